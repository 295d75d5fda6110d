"""Contrastive pretraining, frozen-encoder linear probing and the ablation harness."""
from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .datagen import split_indices
from .encoder import ENCODER_VARIANTS, GroupEncoderBank, encode, group_inputs_from
from .errors import ContractError, ParameterError, TrainingError
from .grouping import VARIANTS as GROUPING_VARIANTS
from .grouping import grouping_variant
from .mstransform import ScaleSpec
from .objective import NEGATIVES, MetricReport, cross_modal_loss, instance_contrastive_loss, metrics

LOSSES = ("cross_modal", "instance", "supervised")

# variant -> (grouping variant, encoder variant, loss)
ABLATIONS = {
    "full": ("img", "mtde", "cross_modal"),
    "wo_img": ("none", "mtde", "cross_modal"),
    "random_grouping": ("random", "mtde", "cross_modal"),
    "full_grouping": ("full", "mtde", "cross_modal"),
    "wo_mask": ("img", "no_mask", "cross_modal"),
    "moderate_mask": ("img", "moderate_mask", "cross_modal"),
    "wo_patch": ("img", "no_patch", "cross_modal"),
    "moderate_patch": ("img", "moderate_patch", "cross_modal"),
    "plain_tcn": ("img", "plain_tcn", "cross_modal"),
    "supervised": ("img", "mtde", "supervised"),
    "instance_contrastive": ("img", "mtde", "instance"),
}

FULL_SCALE_PRESET = {"batch_size": 480, "lr": 0.002, "tau": 0.1}


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.002
    tau: float = 0.1
    negatives: str = "cross_view"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int | None = None
    split: tuple = (0.6, 0.2, 0.2)
    grouping: str = "img"
    grouping_method: str = "tsne"
    threshold: float | None = None  # None: median inter-modal distance
    encoder: str = "mtde"
    loss: str = "cross_modal"
    hidden: int = 32
    output_dim: int = 64
    kernel_size: tuple = (3, 5, 7)  # one per branch, or a single int for all
    layers: tuple = (4, 3, 2)
    scales: tuple | None = None  # ((patch_len, mask_ratio), ...); None derives them from fs
    probe_lr: float = 0.01
    probe_max_steps: int = 3000
    probe_eval_every: int = 10
    probe_patience: int = 5

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.split = tuple(float(s) for s in self.split)
        self.layers = tuple(int(n) for n in self.layers)
        if np.ndim(self.kernel_size) == 0:
            self.kernel_size = int(self.kernel_size)
        else:
            self.kernel_size = tuple(int(k) for k in self.kernel_size)
        if self.scales is not None:
            self.scales = tuple((int(p), float(r)) for p, r in self.scales)
        if self.batch_size < 2:
            raise ParameterError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0 or not self.probe_lr > 0:
            raise ParameterError("learning rates must be > 0")
        if not self.tau > 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ParameterError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.negatives not in NEGATIVES:
            raise ParameterError(f"negatives must be one of {NEGATIVES}")
        if self.grouping not in GROUPING_VARIANTS:
            raise ParameterError(f"grouping must be one of {GROUPING_VARIANTS}")
        if self.encoder not in ENCODER_VARIANTS:
            raise ParameterError(f"encoder must be one of {ENCODER_VARIANTS}")
        if self.loss not in LOSSES:
            raise ParameterError(f"loss must be one of {LOSSES}")
        if len(self.betas) != 2 or len(self.split) != 3:
            raise ParameterError("betas needs 2 values and split needs 3")
        if self.threshold is not None and not self.threshold > 0:
            raise ParameterError(f"threshold must be > 0, got {self.threshold}")

    def scale_specs(self):
        return None if self.scales is None else [ScaleSpec(p, r) for p, r in self.scales]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ParameterError(f"unknown training keys: {unknown}")
        return cls(**d)


@dataclass
class RunReport:
    tag: str
    config: dict
    groups: list
    loss_name: str
    loss_curve: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)  # split -> MetricReport dict
    n_params: int = 0
    wall_clock: float = 0.0
    indices: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "RunReport":
        return cls(**d)


def write_loss_csv(path, curve, name: str = "loss_cm"):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", name])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])


# ---------------------------------------------------------------------------
# data plumbing


def splits_for(dataset, config: TrainConfig) -> dict:
    tr, va, te = split_indices(dataset.n_windows, config.split, config.seed)
    return {"train": tr, "val": va, "test": te}


def fit_normalizer(windows, idx) -> list:
    """Per-modality, per-channel mean and std over the given windows."""
    out = []
    for w in windows:
        x = np.asarray(w[idx], dtype=np.float64)
        mu = x.mean(axis=(0, 2), keepdims=True)[0]
        sd = x.std(axis=(0, 2), keepdims=True)[0]
        out.append((mu, np.where(sd > 0, sd, 1.0)))
    return out


def normalize(windows, norm) -> list:
    return [(np.asarray(w, dtype=np.float64) - mu) / sd for w, (mu, sd) in zip(windows, norm)]


def _batches(n: int, batch_size: int, rng) -> list:
    """Shuffled full batches; the remainder is dropped so every step sees the same N."""
    if n < 2:
        raise ParameterError(f"need at least 2 training windows, got {n}")
    b = min(batch_size, n)
    order = rng.permutation(n)
    return [order[i:i + b] for i in range(0, n - b + 1, b)]


def _encode_groups(bank, grouping, windows, idx, seed, training):
    return [encode(group_inputs_from(windows, members, idx), bank, k, seed, training)
            for k, members in enumerate(grouping.groups)]


def features(bank, grouping, windows, idx=None, batch_size: int = 128) -> np.ndarray:
    """Frozen evaluation-mode features, group embeddings concatenated."""
    n = len(windows[0])
    idx = np.arange(n) if idx is None else np.asarray(idx)
    out = []
    for s in range(0, len(idx), batch_size):
        part = idx[s:s + batch_size]
        out.append(np.concatenate([e.data for e in _encode_groups(bank, grouping, windows, part, 0, False)],
                                  axis=1))
    return np.concatenate(out, axis=0) if out else np.zeros((0, 0))


def _build_bank(dataset, grouping, config):
    return GroupEncoderBank.build(dataset, grouping, seed=config.seed, variant=config.encoder,
                                  hidden=config.hidden, output_dim=config.output_dim,
                                  kernel_size=config.kernel_size, layers=config.layers,
                                  scales=config.scale_specs())


def _check_finite(loss, step, bank):
    if not np.isfinite(loss.item()):
        raise TrainingError(f"loss became {loss.item()} at step {step}", step=step)
    for p in bank.parameters():
        if not np.all(np.isfinite(p.data)):
            raise TrainingError(f"parameter {p.name} became non-finite at step {step}", step=step)


def _effective_loss(config, grouping) -> str:
    if config.loss == "cross_modal" and grouping.k < 2:
        return "instance"  # a single group has no partner view
    return config.loss


# ---------------------------------------------------------------------------
# pretraining


def pretrain(dataset, grouping, config: TrainConfig, bank: GroupEncoderBank | None = None,
             splits: dict | None = None, tag: str = "pretrain"):
    """Self-supervised pretraining on the training split.

    Returns ``(bank, RunReport)``. A passed-in ``bank`` is copied, never
    modified. Masks at step ``s`` are drawn from seed ``[config.seed, s]``.
    """
    if config.loss == "supervised":
        raise ContractError("pretrain is self-supervised; use train_supervised for loss='supervised'")
    t0 = time.perf_counter()
    splits = splits or splits_for(dataset, config)
    train_idx = splits["train"]
    windows = normalize(dataset.windows, fit_normalizer(dataset.windows, train_idx))
    bank = _build_bank(dataset, grouping, config) if bank is None else bank.copy()
    loss_kind = _effective_loss(config, grouping)
    opt = T.Adam(bank.parameters(), lr=config.lr, betas=config.betas, eps=config.eps)
    order_rng = np.random.default_rng([config.seed, 1])
    curve, seen = [], set()
    step = 0
    limit = config.max_steps if config.max_steps is not None else np.inf
    for _ in range(config.epochs):
        if step >= limit:
            break
        for batch in _batches(len(train_idx), config.batch_size, order_rng):
            if step >= limit:
                break
            idx = train_idx[batch]
            seen.update(idx.tolist())
            with T.Tape() as tape:
                if loss_kind == "cross_modal":
                    embs = _encode_groups(bank, grouping, windows, idx, [config.seed, step], True)
                    loss = cross_modal_loss(embs, config.tau, config.negatives)
                else:
                    a = _encode_groups(bank, grouping, windows, idx, [config.seed, step, 0], True)
                    b = _encode_groups(bank, grouping, windows, idx, [config.seed, step, 1], True)
                    loss = None
                    for ha, hb in zip(a, b):
                        term = instance_contrastive_loss(ha, hb, config.tau, config.negatives)
                        loss = term if loss is None else T.add(loss, term)
            _check_finite(loss, step, bank)
            opt.zero_grad()
            T.backward(loss, tape)
            opt.step()
            _check_finite(loss, step, bank)
            curve.append(loss.item())
            step += 1
    report = RunReport(tag, config.to_dict(), [list(map(int, g)) for g in grouping.groups],
                       "loss_cm" if loss_kind == "cross_modal" else "loss_instance", curve,
                       n_params=bank.n_params(), wall_clock=time.perf_counter() - t0,
                       indices={"pretrain": sorted(seen)})
    return bank, report


# ---------------------------------------------------------------------------
# probing


def _whiten(F, idx, rel_floor: float = 1e-10):
    """Map features so the fitting rows have identity covariance.

    Directions with variance below ``rel_floor`` times the largest are
    dropped. The map is linear, so the head on top stays a linear probe;
    it only removes the ill-conditioning that stalls Adam.
    """
    mu = F[idx].mean(axis=0)
    Xc = F - mu
    lam, V = np.linalg.eigh(Xc[idx].T @ Xc[idx] / len(idx))
    if lam[-1] <= 0:
        return np.zeros((len(F), 1))
    keep = lam > rel_floor * lam[-1]
    return Xc @ (V[:, keep] / np.sqrt(lam[keep]))


def _fit_head(X, y, fit_idx, val_idx, task, n_classes, config):
    """Linear head by full-batch Adam; keeps the weights with the best validation score."""
    D = X.shape[1]
    out = 1 if task == "regression" else n_classes
    W = T.Tensor(np.zeros((out, D)), requires_grad=True, name="head.w")
    b = T.Tensor(np.zeros(out), requires_grad=True, name="head.b")
    opt = T.Adam([W, b], lr=config.probe_lr, betas=config.betas, eps=config.eps)
    Xf = T.Tensor(X[fit_idx])

    def score(idx):
        pred = X[idx] @ W.data.T + b.data
        if task == "regression":
            return np.mean(np.abs(pred[:, 0] - y[idx]))
        # higher accuracy first, lower cross-entropy breaks ties
        z = pred - pred.max(axis=1, keepdims=True)
        ce = np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(idx)), y[idx]])
        return -np.mean(np.argmax(pred, axis=1) == y[idx]) + 1e-6 * ce

    best = (score(val_idx), W.data.copy(), b.data.copy())
    bad = 0
    for step in range(1, config.probe_max_steps + 1):
        with T.Tape() as tape:
            pred = T.linear(Xf, W, b)
            if task == "regression":
                loss = T.mse(T.reshape(pred, (len(fit_idx),)), y[fit_idx])
            else:
                loss = T.cross_entropy(pred, y[fit_idx].astype(np.int64))
        opt.zero_grad()
        T.backward(loss, tape)
        opt.step()
        if step % config.probe_eval_every == 0:
            s = score(val_idx)
            if s < best[0]:
                best, bad = (s, W.data.copy(), b.data.copy()), 0
            else:
                bad += 1
                if bad >= config.probe_patience:
                    break
    return best[1], best[2]


def _check_task(dataset, task):
    if dataset.labels is None or dataset.label_kind == "none":
        raise ContractError("dataset has no labels to probe")
    if task is not None and task != dataset.label_kind:
        raise ContractError(f"probe task {task!r} does not match the dataset labels ({dataset.label_kind!r})")
    return dataset.label_kind


def _report_splits(pred_fn, y_raw, splits, task):
    return {name: metrics(pred_fn(idx), y_raw[idx], task).to_dict() for name, idx in splits.items()}


def probe_features(F, dataset, splits, config: TrainConfig, task=None) -> dict:
    """Linear probe on fixed features; returns ``{split: MetricReport dict}``."""
    task = _check_task(dataset, task)
    tr, va = splits["train"], splits["val"]
    X = _whiten(np.asarray(F, dtype=np.float64), tr)
    y_raw = dataset.labels.astype(np.float64) if task == "regression" else dataset.labels.astype(np.int64)
    if task == "regression":
        y_mu, y_sd = y_raw[tr].mean(), y_raw[tr].std()
        y_sd = y_sd if y_sd > 0 else 1.0
        y = (y_raw - y_mu) / y_sd
        n_classes = 1
    else:
        y = y_raw
        n_classes = int(y_raw.max()) + 1
    W, b = _fit_head(X, y, tr, va, task, n_classes, config)

    def predict(idx):
        out = X[idx] @ W.T + b
        return out[:, 0] * y_sd + y_mu if task == "regression" else out

    return _report_splits(predict, y_raw, splits, task)


def linear_probe(bank, grouping, dataset, config: TrainConfig, splits: dict | None = None, task=None) -> dict:
    """Frozen-encoder linear probe; the head is fit on train and selected on val."""
    task = _check_task(dataset, task)
    splits = splits or splits_for(dataset, config)
    windows = normalize(dataset.windows, fit_normalizer(dataset.windows, splits["train"]))
    return probe_features(features(bank, grouping, windows), dataset, splits, config, task)


# ---------------------------------------------------------------------------
# supervised baseline


def train_supervised(dataset, grouping, config: TrainConfig, splits: dict | None = None, tag="supervised"):
    """Encoder and linear head trained jointly on the labels of the training split."""
    t0 = time.perf_counter()
    task = _check_task(dataset, None)
    splits = splits or splits_for(dataset, config)
    tr = splits["train"]
    windows = normalize(dataset.windows, fit_normalizer(dataset.windows, tr))
    bank = _build_bank(dataset, grouping, config)
    y_raw = dataset.labels.astype(np.float64)
    if task == "regression":
        y_mu, y_sd = y_raw[tr].mean(), (y_raw[tr].std() or 1.0)
        out = 1
    else:
        y_mu, y_sd = 0.0, 1.0
        out = int(y_raw.max()) + 1
    y = (y_raw - y_mu) / y_sd
    D = config.output_dim * grouping.k
    rng = np.random.default_rng([config.seed, 2])
    head = {"head.w": T.Tensor(rng.uniform(-1, 1, (out, D)) / np.sqrt(D), True, "head.w"),
            "head.b": T.Tensor(np.zeros(out), True, "head.b")}
    opt = T.Adam(bank.parameters() + list(head.values()), lr=config.lr, betas=config.betas, eps=config.eps)
    order_rng = np.random.default_rng([config.seed, 1])
    curve, seen, step = [], set(), 0
    limit = config.max_steps if config.max_steps is not None else np.inf
    for _ in range(config.epochs):
        for batch in _batches(len(tr), config.batch_size, order_rng):
            if step >= limit:
                break
            idx = tr[batch]
            seen.update(idx.tolist())
            with T.Tape() as tape:
                embs = _encode_groups(bank, grouping, windows, idx, [config.seed, step], True)
                pred = T.linear(T.concat(embs, axis=1) if len(embs) > 1 else embs[0], head["head.w"], head["head.b"])
                if task == "regression":
                    loss = T.mse(T.reshape(pred, (len(idx),)), y[idx])
                else:
                    loss = T.cross_entropy(pred, y_raw[idx].astype(np.int64))
            _check_finite(loss, step, bank)
            opt.zero_grad()
            T.backward(loss, tape)
            opt.step()
            _check_finite(loss, step, bank)
            curve.append(loss.item())
            step += 1
    F = features(bank, grouping, windows)

    def predict(idx):
        o = F[idx] @ head["head.w"].data.T + head["head.b"].data
        return o[:, 0] * y_sd + y_mu if task == "regression" else o

    y_eval = y_raw if task == "regression" else y_raw.astype(np.int64)
    report = RunReport(tag, config.to_dict(), [list(map(int, g)) for g in grouping.groups], "loss_supervised",
                       curve, _report_splits(predict, y_eval, splits, task), bank.n_params(),
                       time.perf_counter() - t0, {"pretrain": sorted(seen), "probe_fit": tr.tolist(),
                                                  "probe_select": []})
    return bank, report


# ---------------------------------------------------------------------------
# end-to-end runs and ablations


def run(dataset, config: TrainConfig, base_grouping=None, tag: str = "run", grouping=None):
    """Group, pretrain (or train supervised), probe. Returns ``(bank, grouping, RunReport)``."""
    splits = splits_for(dataset, config)
    if grouping is None:
        grouping = grouping_variant(dataset, config.grouping, config.seed, config.grouping_method,
                                    config.threshold, base=base_grouping)
    if config.loss == "supervised":
        bank, report = train_supervised(dataset, grouping, config, splits, tag)
        return bank, grouping, report
    t0 = time.perf_counter()
    bank, report = pretrain(dataset, grouping, config, splits=splits, tag=tag)
    report.metrics = linear_probe(bank, grouping, dataset, config, splits)
    report.indices.update({"probe_fit": splits["train"].tolist(), "probe_select": splits["val"].tolist()})
    report.wall_clock = time.perf_counter() - t0
    return bank, grouping, report


def variant_config(config: TrainConfig, variant: str) -> TrainConfig:
    if variant not in ABLATIONS:
        raise ParameterError(f"unknown ablation variant {variant!r}; choose from {list(ABLATIONS)}")
    g, e, loss = ABLATIONS[variant]
    d = config.to_dict()
    d.update(grouping=g, encoder=e, loss=loss)
    return TrainConfig.from_dict(d)


def _run_variant(args):
    dataset, config, variant, base = args
    _, _, report = run(dataset, variant_config(config, variant), base_grouping=base, tag=variant)
    return report


def ablate(dataset, config: TrainConfig, variants=None, jobs: int = 1, base_grouping=None) -> list:
    """One RunReport per variant, all from the same seed and splits."""
    variants = list(ABLATIONS) if variants is None else list(variants)
    for v in variants:
        if v not in ABLATIONS:
            raise ParameterError(f"unknown ablation variant {v!r}; choose from {list(ABLATIONS)}")
    if base_grouping is None:
        base_grouping = grouping_variant(dataset, "img", config.seed, config.grouping_method, config.threshold)
    work = [(dataset, config, v, base_grouping) for v in variants]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_variant, work))
    return [_run_variant(w) for w in work]


def ablation_table(reports, split: str = "test") -> dict:
    """Rows are variants; regression shows RMSE/MAE/SD, classification Acc/F1/Recall/AUPRC."""
    rows = []
    for r in reports:
        m = r.metrics[split]
        cols = ("rmse", "mae", "sd") if m["task"] == "regression" else ("acc", "f1", "recall", "auprc")
        rows.append({"variant": r.tag, "groups": len(r.groups), "loss": r.loss_name, "n_params": r.n_params,
                     **{c: m[c] for c in cols}})
    columns = ["variant", "groups", "loss", "n_params"] + [c for c in rows[0] if c not in
                                                           ("variant", "groups", "loss", "n_params")] if rows else []
    return {"split": split, "columns": columns, "rows": rows}


def metric_report(d: dict) -> MetricReport:
    return MetricReport(**d)
