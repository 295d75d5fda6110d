"""Synthetic multi-modal windows driven by a shared latent factor.

Every window ``w`` draws a latent ``z_w`` (a fundamental frequency in Hz,
uniform over ``latent_band``). Each modality renders ``z_w`` through its
own structure:

* ``quasi_periodic``: harmonics of ``z_w`` with random phases (PPG-like).
* ``trend``: a monotone decline whose drop over the window grows with
  ``z_w``, clipped to the amplitude range (SpO2-like).
* ``burst``: Gaussian-enveloped noise bursts repeating at ``z_w`` per
  second (accelerometer-like).

A second per-window factor, the intensity ``a_w`` in ``[0, 1]``, scales the
periodic and burst amplitudes and lowers the trend baseline. It is shared by
all modalities unless ``shared_intensity`` is off, in which case each
modality draws its own.

Waveforms are built in normalised units in ``[-1, 1]``; ``noise_std`` is in
those units. They are then mapped affinely onto ``amplitude_range``.
Windows are held as float32, which is also the storage precision, so a
save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

KINDS = ("quasi_periodic", "trend", "burst")
LABEL_KINDS = ("regression", "classification", "none")
MANIFEST = "manifest.json"
LABELS_FILE = "labels.bin"
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    channels: int = 1
    kind: str = "quasi_periodic"
    amplitude_range: tuple = (-1.0, 1.0)
    noise_std: float = 0.05

    def __post_init__(self):
        if not isinstance(self.name, str) or not _NAME_RE.match(self.name):
            raise ParameterError(f"modality name {self.name!r} must match [A-Za-z0-9_.-]+")
        if not isinstance(self.channels, (int, np.integer)) or self.channels < 1:
            raise ParameterError(f"modality {self.name!r}: channels must be >= 1, got {self.channels}")
        if self.kind not in KINDS:
            raise ParameterError(f"modality {self.name!r}: kind must be one of {KINDS}, got {self.kind!r}")
        lo, hi = self.amplitude_range
        if not lo < hi:
            raise ParameterError(f"modality {self.name!r}: amplitude_range needs low < high, got {self.amplitude_range}")
        object.__setattr__(self, "amplitude_range", (float(lo), float(hi)))
        if not self.noise_std >= 0:
            raise ParameterError(f"modality {self.name!r}: noise_std must be >= 0, got {self.noise_std}")


@dataclass(eq=False)
class MultiModalDataset:
    fs: float
    window_len: int
    modalities: list
    windows: list  # per modality, float32 [N, channels, window_len]
    labels: np.ndarray | None = None
    label_kind: str = "none"
    latent: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        ns = {w.shape[0] for w in self.windows}
        if len(ns) != 1:
            raise ParameterError(f"modalities disagree on window count: {sorted(ns)}")
        for spec, w in zip(self.modalities, self.windows):
            if w.shape[1:] != (spec.channels, self.window_len):
                raise ParameterError(f"modality {spec.name!r}: windows shape {w.shape} does not match "
                                     f"({spec.channels}, {self.window_len})")
        if self.labels is not None and len(self.labels) != self.n_windows:
            raise ParameterError(f"labels length {len(self.labels)} != n_windows {self.n_windows}")
        if self.label_kind not in LABEL_KINDS:
            raise ParameterError(f"label_kind must be one of {LABEL_KINDS}")

    @property
    def n_windows(self) -> int:
        return self.windows[0].shape[0]

    @property
    def names(self) -> list:
        return [m.name for m in self.modalities]

    def subset(self, idx) -> "MultiModalDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return MultiModalDataset(
            fs=self.fs, window_len=self.window_len, modalities=list(self.modalities),
            windows=[w[idx] for w in self.windows],
            labels=None if self.labels is None else self.labels[idx],
            label_kind=self.label_kind,
            latent=None if self.latent is None else self.latent[idx],
        )

    def __eq__(self, other):
        # latent is oracle-only state and never persisted, so it is not compared
        if not isinstance(other, MultiModalDataset):
            return NotImplemented
        if (self.fs, self.window_len, self.label_kind) != (other.fs, other.window_len, other.label_kind):
            return False
        if list(self.modalities) != list(other.modalities):
            return False
        if any(a.dtype != b.dtype or a.tobytes() != b.tobytes() for a, b in zip(self.windows, other.windows)):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or (self.labels.dtype == other.labels.dtype
                                       and self.labels.tobytes() == other.labels.tobytes())


def default_specs() -> list:
    """Three modalities forming two planted groups: two PPG-like and one SpO2-like."""
    return [
        ModalitySpec("ppg_green", channels=2, kind="quasi_periodic", amplitude_range=(-1.0, 1.0), noise_std=0.1),
        ModalitySpec("ppg_red", channels=1, kind="quasi_periodic", amplitude_range=(0.0, 4.0), noise_std=0.1),
        ModalitySpec("spo2", channels=1, kind="trend", amplitude_range=(70.0, 100.0), noise_std=0.05),
    ]


# ---------------------------------------------------------------------------
# generation


def _map_range(v, spec):
    lo, hi = spec.amplitude_range
    return (lo + hi) / 2 + (hi - lo) / 2 * v


def _render_quasi_periodic(rng, z, a, t, spec, harmonics):
    n, L = len(z), len(t)
    weights = 1.0 / np.arange(1, harmonics + 1)
    phase = rng.uniform(0, 2 * np.pi, size=(n, spec.channels, harmonics))
    gain = (0.5 + 0.5 * a)[:, None, None]
    h = np.arange(1, harmonics + 1)
    # [n, C, H, L]
    arg = 2 * np.pi * (z[:, None, None, None] * h[None, None, :, None]) * t + phase[..., None]
    wave = np.einsum("h,nchl->ncl", weights / weights.sum(), np.sin(arg))
    v = gain * wave + spec.noise_std * rng.standard_normal((n, spec.channels, L))
    return _map_range(v, spec)


def _render_trend(rng, u, a, t, spec):
    """Monotone decline from a high baseline; the drop over the window grows with ``u``."""
    n, L = len(u), len(t)
    slope = -(0.1 + 1.4 * u)
    base = (0.75 - 0.2 * a)[:, None, None] + rng.uniform(-0.05, 0.05, size=(n, 1, 1))
    ramp = t / t[-1] if L > 1 else np.zeros(1)
    v = base + slope[:, None, None] * ramp + spec.noise_std * rng.standard_normal((n, spec.channels, L))
    return _map_range(np.clip(v, -1.0, 1.0), spec)


def _render_burst(rng, z, a, t, spec):
    n, L = len(z), len(t)
    width = 0.06
    out = np.zeros((n, spec.channels, L))
    duration = t[-1] + (t[1] - t[0] if L > 1 else 0.0)
    for i in range(n):
        period = 1.0 / z[i]
        start = rng.uniform(0, period)
        centers = np.arange(start, duration, period)
        centers = centers + rng.normal(0, 0.03 * period, size=len(centers))
        env = np.exp(-0.5 * ((t[None, :] - centers[:, None]) / width) ** 2).sum(axis=0)
        carrier = rng.standard_normal((spec.channels, L))
        out[i] = (0.2 + 0.3 * a[i]) * np.minimum(env, 1.0) * carrier
    v = out + spec.noise_std * rng.standard_normal((n, spec.channels, L))
    return _map_range(np.clip(v, -1.0, 1.0), spec)


def _spectrum_channel(x):
    """|rfft| of the first channel, stretched to the window length and scaled to max 1."""
    n, _, L = x.shape
    centered = x[:, 0, :] - x[:, 0, :].mean(axis=1, keepdims=True)
    mag = np.abs(np.fft.rfft(centered, axis=1))
    grid = np.linspace(0, mag.shape[1] - 1, L)
    res = np.stack([np.interp(grid, np.arange(mag.shape[1]), m) for m in mag])
    peak = res.max(axis=1, keepdims=True)
    return (res / np.where(peak > 0, peak, 1.0))[:, None, :]


def _inward_f32(lo, hi):
    lo32, hi32 = np.float32(lo), np.float32(hi)
    if lo32 < lo:
        lo32 = np.nextafter(lo32, np.float32(np.inf))
    if hi32 > hi:
        hi32 = np.nextafter(hi32, np.float32(-np.inf))
    return lo32, hi32


def generate(seed: int, n_windows: int, fs: float, window_len: int, specs, task: str = "regression",
             latent_band=(1.0, 2.5), n_classes: int = 3, harmonics: int = 3,
             derived_fft: bool = False, shared_intensity: bool = True) -> MultiModalDataset:
    """Draw ``n_windows`` synchronized windows for every modality in ``specs``.

    ``task`` selects the label: ``regression`` uses ``z`` itself,
    ``classification`` buckets ``z`` into ``n_classes`` quantile bins, and
    ``none`` emits no labels. With ``derived_fft`` every quasi-periodic
    modality gets one extra channel holding its magnitude spectrum.
    """
    specs = list(specs)
    if not specs:
        raise ParameterError("specs must contain at least one ModalitySpec")
    if n_windows < 1:
        raise ParameterError(f"n_windows must be >= 1, got {n_windows}")
    if window_len < 32:
        raise ParameterError(f"window_len must be >= 32, got {window_len}")
    if fs <= 0:
        raise ParameterError(f"fs must be > 0, got {fs}")
    if task not in LABEL_KINDS:
        raise ParameterError(f"task must be one of {LABEL_KINDS}, got {task!r}")
    lo, hi = map(float, latent_band)
    if not 0 < lo <= hi:
        raise ParameterError(f"latent_band must satisfy 0 < low <= high, got {latent_band}")
    if len({s.name for s in specs}) != len(specs):
        raise ParameterError("modality names must be unique")

    children = np.random.SeedSequence(seed).spawn(len(specs) + 1)
    latent_rng = np.random.default_rng(children[0])
    z = latent_rng.uniform(lo, hi, size=n_windows)
    a = latent_rng.uniform(0.0, 1.0, size=n_windows)  # intensity
    u = (z - lo) / (hi - lo) if hi > lo else np.full(n_windows, 0.5)
    t = np.arange(window_len) / fs

    out_specs, windows = [], []
    for spec, child in zip(specs, children[1:]):
        rng = np.random.default_rng(child)
        a_m = a if shared_intensity else rng.uniform(0.0, 1.0, size=n_windows)
        if spec.kind == "quasi_periodic":
            x = _render_quasi_periodic(rng, z, a_m, t, spec, harmonics)
        elif spec.kind == "trend":
            x = _render_trend(rng, u, a_m, t, spec)
        else:
            x = _render_burst(rng, z, a_m, t, spec)
        if derived_fft and spec.kind == "quasi_periodic":
            x = np.concatenate([x, _map_range(2 * _spectrum_channel(x) - 1, spec)], axis=1)
            spec = ModalitySpec(spec.name, spec.channels + 1, spec.kind, spec.amplitude_range, spec.noise_std)
        x32 = x.astype(np.float32)
        if spec.kind != "quasi_periodic":
            x32 = np.clip(x32, *_inward_f32(*spec.amplitude_range))
        out_specs.append(spec)
        windows.append(np.ascontiguousarray(x32))

    if task == "regression":
        labels = z.astype(np.float32)
    elif task == "classification":
        edges = np.quantile(z, np.arange(1, n_classes) / n_classes)
        labels = np.searchsorted(edges, z, side="right").astype(np.int32)
    else:
        labels = None
    return MultiModalDataset(fs=float(fs), window_len=int(window_len), modalities=out_specs, windows=windows,
                             labels=labels, label_kind=task, latent=z)


# ---------------------------------------------------------------------------
# persistence


def _label_dtype(kind):
    return np.dtype("<f4") if kind == "regression" else np.dtype("<i4")


def manifest_dict(dataset: MultiModalDataset) -> dict:
    return {
        "fs": dataset.fs,
        "window_len": dataset.window_len,
        "n_windows": dataset.n_windows,
        "modalities": [
            {"name": m.name, "channels": m.channels, "kind": m.kind,
             "amplitude_range": list(m.amplitude_range), "noise_std": m.noise_std}
            for m in dataset.modalities
        ],
        "label_kind": dataset.label_kind,
    }


def save(dataset: MultiModalDataset, dir_path) -> Path:
    """Write ``manifest.json``, one ``<name>.bin`` per modality and ``labels.bin``."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    for m, w in zip(dataset.modalities, dataset.windows):
        (d / f"{m.name}.bin").write_bytes(np.ascontiguousarray(w, dtype="<f4").tobytes())
    labels_path = d / LABELS_FILE
    if dataset.labels is not None:
        labels_path.write_bytes(np.ascontiguousarray(dataset.labels, dtype=_label_dtype(dataset.label_kind)).tobytes())
    elif labels_path.exists():
        labels_path.unlink()
    (d / MANIFEST).write_text(json.dumps(manifest_dict(dataset), indent=2, sort_keys=True) + "\n")
    return d


def _require(obj, key, where):
    if key not in obj:
        raise FormatError(f"{where}: missing field {key!r}", field=key)
    return obj[key]


def _read_array(path, dtype, shape, field_name):
    if not path.exists():
        raise FormatError(f"missing file {path.name} for {field_name}", field=field_name)
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path.name}: {len(raw)} bytes on disk, manifest implies {expected} "
                          f"(check {field_name})", field=field_name)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def load(dir_path) -> MultiModalDataset:
    d = Path(dir_path)
    mpath = d / MANIFEST
    if not d.is_dir():
        raise FormatError(f"dataset directory {d} does not exist", field="dir")
    if not mpath.exists():
        raise FormatError(f"{mpath} not found", field="manifest")
    try:
        man = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{mpath}: invalid JSON ({e})", field="manifest") from None
    fs = _require(man, "fs", "manifest")
    L = _require(man, "window_len", "manifest")
    n = _require(man, "n_windows", "manifest")
    kind = _require(man, "label_kind", "manifest")
    mods = _require(man, "modalities", "manifest")
    if kind not in LABEL_KINDS:
        raise FormatError(f"manifest: unknown label_kind {kind!r}", field="label_kind")
    for name, val in (("window_len", L), ("n_windows", n)):
        if not isinstance(val, int) or val < 1:
            raise FormatError(f"manifest: {name} must be a positive integer", field=name)
    specs, windows = [], []
    for i, m in enumerate(mods):
        where = f"modalities[{i}]"
        try:
            spec = ModalitySpec(
                name=_require(m, "name", where), channels=_require(m, "channels", where),
                kind=_require(m, "kind", where), amplitude_range=tuple(m.get("amplitude_range", (-1.0, 1.0))),
                noise_std=m.get("noise_std", 0.0))
        except ParameterError as e:
            raise FormatError(f"{where}: {e}", field=f"{where}") from None
        w = _read_array(d / f"{spec.name}.bin", np.dtype("<f4"), (n, spec.channels, L), f"{where}.channels")
        if not np.all(np.isfinite(w)):
            raise FormatError(f"{spec.name}.bin contains non-finite values", field=f"{where}")
        specs.append(spec)
        windows.append(w)
    labels = None
    if kind != "none":
        labels = _read_array(d / LABELS_FILE, _label_dtype(kind), (n,), "labels")
        if not np.all(np.isfinite(labels)):
            raise FormatError("labels.bin contains non-finite values", field="labels")
    return MultiModalDataset(fs=fs, window_len=L, modalities=specs, windows=windows, labels=labels, label_kind=kind)


# ---------------------------------------------------------------------------
# splitting


def split_indices(n: int, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Disjoint, exhaustive, seeded partition of ``range(n)`` into train/val/test."""
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ParameterError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ParameterError(f"split of {n} windows by {tuple(fractions)} leaves an empty part")
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(np.sort(p) for p in parts)


def split(dataset: MultiModalDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    return tuple(dataset.subset(idx) for idx in split_indices(dataset.n_windows, fractions, seed))
