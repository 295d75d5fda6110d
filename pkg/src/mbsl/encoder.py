"""Multi-scale temporal dependency extraction (MTDE) encoders, one per modality group.

Pipeline for one group and a batch of windows:

1. stack the raw channels of the group's modalities -> ``[B, C, L]``;
2. per scale: mask (training only) and patch -> ``[B, C, T_s, P_s]``;
3. per-modality bias-free 1x1 adapters mix the stacked channels into the
   group width ``W``;
4. each token (``P_s * W`` values) is linearly embedded to ``hidden``;
5. ``n_layers`` residual blocks ``h + relu(conv(h))`` with dilation ``2**l``;
6. every branch is cropped and mean-pooled to the coarsest token count,
   concatenated on the feature axis, averaged over time and projected to
   ``output_dim``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, FormatError, ParameterError
from .mstransform import ScaleSpec, default_scales, transform_multiscale

ENCODER_VARIANTS = ("mtde", "plain_tcn", "no_patch", "no_mask", "moderate_mask", "moderate_patch")
DEFAULT_LAYERS = (4, 3, 2)
DEFAULT_KERNELS = (3, 5, 7)


@dataclass(frozen=True)
class BranchSpec:
    scale: ScaleSpec
    kernel_size: int = 3
    n_layers: int = 2

    @property
    def dilations(self) -> list:
        return [2 ** i for i in range(self.n_layers)]

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)


@dataclass
class MTDEEncoderSpec:
    branches: list
    channels: list  # per member modality
    modality_names: list = field(default_factory=list)
    hidden: int = 32
    output_dim: int = 64
    group_id: int = 0
    adapter_width: int | None = None

    def __post_init__(self):
        if not self.branches:
            raise ParameterError("encoder needs at least one branch")
        if not self.channels or min(self.channels) < 1:
            raise ParameterError(f"bad channel list {self.channels}")
        if self.adapter_width is None:
            self.adapter_width = int(sum(self.channels))
        if not self.modality_names:
            self.modality_names = [f"m{i}" for i in range(len(self.channels))]
        if len(self.modality_names) != len(self.channels):
            raise ParameterError("modality_names and channels differ in length")

    @property
    def scales(self) -> list:
        return [b.scale for b in self.branches]

    def token_counts(self, window_len: int) -> list:
        return [window_len // b.scale.patch_len for b in self.branches]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "MTDEEncoderSpec":
        d = dict(d)
        d["branches"] = [BranchSpec(ScaleSpec(**b["scale"]), b["kernel_size"], b["n_layers"]) for b in d["branches"]]
        return cls(**d)


def default_spec(fs, channels, names=None, group_id=0, hidden=32, output_dim=64, kernel_size=DEFAULT_KERNELS,
                 layers=DEFAULT_LAYERS, scales=None) -> MTDEEncoderSpec:
    scales = list(scales) if scales is not None else default_scales(fs)
    layers = list(layers)
    if len(layers) != len(scales):
        raise ParameterError(f"{len(scales)} scales but {len(layers)} layer counts")
    kernels = [int(kernel_size)] * len(scales) if np.ndim(kernel_size) == 0 else [int(k) for k in kernel_size]
    if len(kernels) != len(scales):
        raise ParameterError(f"{len(scales)} scales but {len(kernels)} kernel sizes")
    branches = [BranchSpec(s, k, n) for s, k, n in zip(scales, kernels, layers)]
    return MTDEEncoderSpec(branches, list(channels), list(names or []), hidden, output_dim, group_id)


def variant_spec(spec: MTDEEncoderSpec, variant: str) -> MTDEEncoderSpec:
    """Encoder spec for one ablation variant (idempotent)."""
    if variant not in ENCODER_VARIANTS:
        raise ParameterError(f"encoder variant must be one of {ENCODER_VARIANTS}, got {variant!r}")
    br = spec.branches
    if variant == "mtde":
        new = br
    elif variant == "plain_tcn":
        new = [BranchSpec(ScaleSpec(1, 0.0), br[0].kernel_size, max(b.n_layers for b in br))]
    elif variant == "no_patch":
        new = [replace(b, scale=ScaleSpec(1, b.scale.mask_ratio)) for b in br]
    elif variant == "no_mask":
        new = [replace(b, scale=ScaleSpec(b.scale.patch_len, 0.0)) for b in br]
    elif variant == "moderate_mask":
        new = [replace(b, scale=ScaleSpec(b.scale.patch_len, 0.1)) for b in br]
    else:
        mid = br[len(br) // 2].scale.patch_len
        new = [replace(b, scale=ScaleSpec(mid, b.scale.mask_ratio)) for b in br]
    return replace(spec, branches=list(new))


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng, shape, fan_in):
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape)


def init_group_params(spec: MTDEEncoderSpec, rng) -> dict:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    g = f"g{spec.group_id}"
    W, H = spec.adapter_width, spec.hidden
    p = {}
    for name, c in zip(spec.modality_names, spec.channels):
        p[f"{g}.adapter.{name}"] = _uniform(rng, (W, c), c)
    for b, br in enumerate(spec.branches):
        fan = W * br.scale.patch_len
        p[f"{g}.b{b}.embed.w"] = _uniform(rng, (H, fan), fan)
        p[f"{g}.b{b}.embed.b"] = np.zeros(H)
        for layer in range(br.n_layers):
            p[f"{g}.b{b}.conv{layer}.w"] = _uniform(rng, (H, H, br.kernel_size), H * br.kernel_size)
            p[f"{g}.b{b}.conv{layer}.b"] = np.zeros(H)
    fan = H * len(spec.branches)
    p[f"{g}.proj.w"] = _uniform(rng, (spec.output_dim, fan), fan)
    p[f"{g}.proj.b"] = np.zeros(spec.output_dim)
    return {k: T.Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


class GroupEncoderBank:
    """One MTDE encoder per modality group; groups share no parameters."""

    def __init__(self, specs, params: dict, variant: str = "mtde"):
        self.specs = list(specs)
        self.params = dict(params)
        self.variant = variant

    @classmethod
    def build(cls, dataset, grouping, seed: int = 0, variant: str = "mtde", hidden=32, output_dim=64,
              kernel_size=DEFAULT_KERNELS, layers=DEFAULT_LAYERS, scales=None) -> "GroupEncoderBank":
        rng = np.random.default_rng(seed)
        specs, params = [], {}
        for k, members in enumerate(grouping.groups):
            base = default_spec(dataset.fs, [dataset.modalities[m].channels for m in members],
                                [dataset.modalities[m].name for m in members], k, hidden, output_dim,
                                kernel_size, layers, scales)
            spec = variant_spec(base, variant)
            specs.append(spec)
            params.update(init_group_params(spec, rng))
        return cls(specs, params, variant)

    @property
    def k(self) -> int:
        return len(self.specs)

    def parameters(self) -> list:
        return list(self.params.values())

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def group_params(self, group_id: int) -> dict:
        prefix = f"g{group_id}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def state_bytes(self) -> bytes:
        return b"".join(v.data.astype("<f8").tobytes() for v in self.params.values())

    def copy(self) -> "GroupEncoderBank":
        return GroupEncoderBank([replace(s) for s in self.specs],
                                {k: T.Tensor(v.data.copy(), True, k) for k, v in self.params.items()},
                                self.variant)


# ---------------------------------------------------------------------------
# forward


def _adapter_matrix(spec: MTDEEncoderSpec, gp: dict) -> T.Tensor:
    mats = [gp[f"adapter.{n}"] for n in spec.modality_names]
    return mats[0] if len(mats) == 1 else T.concat(mats, axis=1)


def encode_branch(tokens, params: dict, branch: BranchSpec, adapter: T.Tensor | None = None) -> T.Tensor:
    """Run one TCN branch over a token sequence ``[B, C, T, P]``; returns ``[B, hidden, T]``.

    ``params`` holds ``embed.w``, ``embed.b`` and ``conv{l}.w``/``conv{l}.b``.
    """
    x = tokens.tokens if hasattr(tokens, "tokens") else tokens
    x = T.as_tensor(np.asarray(x, dtype=np.float64) if not isinstance(x, T.Tensor) else x)
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    B, C, n_tok, P = x.shape
    h = T.transpose(x, (0, 2, 3, 1))  # [B, T, P, C]
    if adapter is not None:
        h = T.linear(h, adapter)
    h = T.reshape(h, (B, n_tok, P * h.shape[-1]))
    h = T.linear(h, params["embed.w"], params["embed.b"])
    h = T.transpose(h, (0, 2, 1))  # [B, H, T]
    for layer, dil in enumerate(branch.dilations):
        c = T.conv1d_causal(h, params[f"conv{layer}.w"], params[f"conv{layer}.b"], dil)
        h = T.add(h, T.relu(c))
    return T.reshape(h, h.shape[1:]) if squeeze else h


def _align(h: T.Tensor, n_target: int) -> T.Tensor:
    """Crop the tail so the length is a multiple of the ratio, then mean-pool to ``n_target``."""
    n = h.shape[-1]
    if n == n_target:
        return h
    w = n // n_target
    if n != w * n_target:
        h = T.crop(h, 0, w * n_target)
    return T.mean_pool(h, w)


def encode(group_inputs, bank: GroupEncoderBank, group_id: int, seed=0, training: bool = False,
           spec: MTDEEncoderSpec | None = None, mask_level: str = "timestamp") -> T.Tensor:
    """Embedding of one modality group.

    ``group_inputs`` lists one array per member modality, in the group's
    order, each ``[B, C_m, L]`` (or ``[C_m, L]`` for a single sample).
    Returns ``[B, output_dim]`` (or ``[output_dim]``).
    """
    spec = spec or bank.specs[group_id]
    group_inputs = list(group_inputs)
    if len(group_inputs) != len(spec.channels):
        raise ContractError(f"group {group_id} expects {len(spec.channels)} modalities "
                            f"({spec.modality_names}), got {len(group_inputs)}")
    arrs = [np.asarray(a, dtype=np.float64) for a in group_inputs]
    single = arrs[0].ndim == 2
    if single:
        arrs = [a[None] for a in arrs]
    for a, c, n in zip(arrs, spec.channels, spec.modality_names):
        if a.ndim != 3 or a.shape[1] != c:
            raise ContractError(f"modality {n!r} in group {group_id}: expected {c} channels, got shape {a.shape}")
    x = np.concatenate(arrs, axis=1)
    gp = bank.group_params(group_id)
    if not gp:
        raise ContractError(f"bank has no parameters for group {group_id}")
    adapter = _adapter_matrix(spec, gp)
    base_seed = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    seqs = transform_multiscale(x, spec.scales, base_seed + [group_id], training, mask_level)
    outs = []
    for b, (br, seq) in enumerate(zip(spec.branches, seqs)):
        bp = {k[len(f"b{b}."):]: v for k, v in gp.items() if k.startswith(f"b{b}.")}
        outs.append(encode_branch(seq, bp, br, adapter))
    n_min = min(o.shape[-1] for o in outs)
    feats = T.concat([_align(o, n_min) for o in outs], axis=1)
    pooled = T.mean(feats, axis=-1)
    emb = T.linear(pooled, gp["proj.w"], gp["proj.b"])
    return T.reshape(emb, emb.shape[1:]) if single else emb


def encode_variant(group_inputs, bank: GroupEncoderBank, group_id: int, variant: str, seed=0,
                   training: bool = False) -> T.Tensor:
    """Encode with an ablation variant of the bank's spec.

    Mask-only variants reuse the bank's parameters; shape-changing variants
    need a bank built with that variant.
    """
    spec = variant_spec(bank.specs[group_id], variant)
    try:
        return encode(group_inputs, bank, group_id, seed, training, spec=spec)
    except (DimensionError, KeyError) as e:
        raise ContractError(f"bank built as {bank.variant!r} cannot run variant {variant!r}: {e}") from None


def group_inputs_from(dataset_windows, members, idx=None) -> list:
    """Slice the member modalities' windows (optionally a batch of window indices)."""
    return [dataset_windows[m] if idx is None else dataset_windows[m][idx] for m in members]


def encode_all(bank: GroupEncoderBank, grouping, windows, seed=0, training=False) -> list:
    """One ``[B, output_dim]`` embedding tensor per group."""
    return [encode(group_inputs_from(windows, members), bank, k, seed, training)
            for k, members in enumerate(grouping.groups)]


def embed_dataset(bank: GroupEncoderBank, grouping, dataset, batch_size: int = 128) -> np.ndarray:
    """Frozen, evaluation-mode features: group embeddings concatenated per window."""
    feats = []
    for s in range(0, dataset.n_windows, batch_size):
        idx = np.arange(s, min(s + batch_size, dataset.n_windows))
        embs = encode_all(bank, grouping, [w[idx] for w in dataset.windows], training=False)
        feats.append(np.concatenate([e.data for e in embs], axis=1))
    return np.concatenate(feats, axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_bank(bank: GroupEncoderBank, dir_path) -> Path:
    """``manifest.json`` plus one raw little-endian float64 file per parameter."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in bank.params.items():
        fname = f"{name}.bin"
        (d / fname).write_bytes(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        entries.append({"name": name, "shape": list(t.shape), "file": fname})
    manifest = {"variant": bank.variant, "groups": [s.to_dict() for s in bank.specs], "parameters": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_bank(dir_path) -> GroupEncoderBank:
    d = Path(dir_path)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"checkpoint manifest {mpath} not found", field="manifest")
    try:
        man = json.loads(mpath.read_text())
        specs = [MTDEEncoderSpec.from_dict(g) for g in man["groups"]]
        entries = man["parameters"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{mpath}: malformed checkpoint manifest ({e})", field="manifest") from None
    params = {}
    for e in entries:
        path = d / e["file"]
        if not path.exists():
            raise FormatError(f"missing parameter file {path.name}", field=e["name"])
        raw = path.read_bytes()
        n = int(np.prod(e["shape"]))
        if len(raw) != 8 * n:
            raise FormatError(f"{path.name}: {len(raw)} bytes, expected {8 * n}", field=e["name"])
        arr = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        params[e["name"]] = T.Tensor(arr, requires_grad=True, name=e["name"])
    return GroupEncoderBank(specs, params, man.get("variant", "mtde"))
