"""Inter-modal grouping.

Each modality is reduced to a point in 2-D (t-SNE or PCA over its z-scored
windows, then the centroid), pairwise Euclidean distances are taken, and
modalities are grouped as the connected components of the graph joining
every pair closer than a threshold ``I``. Every member of a multi-member
group then has a partner closer than ``I``, and no two groups come closer
than ``I``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateInputError, ParameterError

VARIANTS = ("img", "none", "random", "full")


@dataclass
class GroupingResult:
    groups: list
    distance_matrix: np.ndarray
    embedding: np.ndarray | None = None
    threshold: float | None = None
    variant: str = "img"
    names: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.groups)

    def group_of(self) -> dict:
        return {m: g for g, members in enumerate(self.groups) for m in members}

    def to_dict(self) -> dict:
        thr = self.threshold
        return {
            "variant": self.variant,
            "groups": [list(map(int, g)) for g in self.groups],
            "group_names": [[self.names[i] for i in g] for g in self.groups] if self.names else None,
            "threshold": None if thr is None or not np.isfinite(thr) else float(thr),
            "distance_matrix": np.asarray(self.distance_matrix, dtype=float).tolist(),
            "embedding": None if self.embedding is None else np.asarray(self.embedding, dtype=float).tolist(),
            "names": list(self.names),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "GroupingResult":
        thr = d.get("threshold")
        return cls(groups=[list(g) for g in d["groups"]], distance_matrix=np.asarray(d["distance_matrix"], float),
                   embedding=None if d.get("embedding") is None else np.asarray(d["embedding"], float),
                   threshold=float("inf") if thr is None else thr, variant=d.get("variant", "img"),
                   names=list(d.get("names") or []))


# ---------------------------------------------------------------------------
# embedding


def _perplexity_affinities(X, perplexity, tol=1e-5, n_steps=100):
    """Symmetric t-SNE input affinities, bisection on each row's precision."""
    n = X.shape[0]
    sq = np.sum(X * X, axis=1)
    D = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
    np.fill_diagonal(D, 0.0)
    target = np.log(perplexity)
    beta = np.ones(n)
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    off = ~np.eye(n, dtype=bool)
    for _ in range(n_steps):
        # subtract per-row minimum off-diagonal distance for stability
        Dm = np.where(off, D, np.inf)
        shift = Dm.min(axis=1, keepdims=True)
        E = np.where(off, np.exp(-(Dm - shift) * beta[:, None]), 0.0)
        S = E.sum(axis=1)
        P = E / S[:, None]
        H = np.log(S) + beta * np.sum(P * np.where(off, D - shift, 0.0), axis=1)
        diff = H - target
        if np.all(np.abs(diff) < tol):
            break
        up = diff > 0  # entropy too high -> sharpen
        lo = np.where(up, beta, lo)
        hi = np.where(up, hi, beta)
        beta = np.where(up, np.where(np.isinf(hi), beta * 2, (beta + hi) / 2),
                        np.where(np.isinf(lo), beta / 2, (beta + lo) / 2))
    P = (P + P.T) / (2 * n)
    return np.maximum(P, np.finfo(float).eps)


def tsne(X, seed: int = 0, perplexity: float = 30.0, n_iter: int = 750, exaggeration: float = 12.0,
         exaggeration_iters: int = 250):
    """Exact (dense, O(n^2)) t-SNE to two dimensions."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    perplexity = min(perplexity, max((n - 1) / 3.0, 1.0))
    P = _perplexity_affinities(X, perplexity)
    rng = np.random.default_rng(seed)
    Y = 1e-4 * rng.standard_normal((n, 2))
    vel = np.zeros_like(Y)
    gains = np.ones_like(Y)
    lr = max(n / exaggeration / 4.0, 50.0)
    for it in range(n_iter):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        sq = np.sum(Y * Y, axis=1)
        num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2 * Y @ Y.T, 0.0))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
        same = np.sign(grad) == np.sign(vel)
        gains = np.maximum(np.where(same, gains * 0.8, gains + 0.2), 0.01)
        vel = momentum * vel - lr * gains * grad
        Y = Y + vel
    return Y - Y.mean(axis=0)


def pca2(X):
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], X.shape[1]))])
    return Xc @ comps.T


def _modality_points(dataset, seed, sample_cap):
    """Up to ``sample_cap`` z-scored (window, channel) series per modality."""
    rng = np.random.default_rng(seed)
    pts, owner = [], []
    for m, (spec, w) in enumerate(zip(dataset.modalities, dataset.windows)):
        if w.shape[0] < 2:
            raise ParameterError(f"modality {spec.name!r} needs >= 2 windows to embed")
        flat = w.reshape(-1, w.shape[-1]).astype(np.float64)
        if np.all(flat == flat[0, 0]):
            raise DegenerateInputError(f"modality {spec.name!r} is constant; cannot embed it")
        take = rng.choice(flat.shape[0], size=min(sample_cap, flat.shape[0]), replace=False)
        x = flat[np.sort(take)]
        mu = x.mean(axis=1, keepdims=True)
        sd = x.std(axis=1, keepdims=True)
        pts.append(np.where(sd > 0, (x - mu) / np.where(sd > 0, sd, 1.0), 0.0))
        owner.append(np.full(len(x), m))
    return np.vstack(pts), np.concatenate(owner)


def embed_modalities(dataset, method: str = "tsne", seed: int = 0, sample_cap: int = 200, return_points=False):
    """2-D coordinate per modality: centroid of its jointly embedded windows.

    Windows are sampled per channel, so a multi-channel modality contributes
    single-channel series of the common window length.
    """
    if sample_cap < 10:
        raise ParameterError(f"sample_cap must be >= 10, got {sample_cap}")
    if method not in ("tsne", "pca"):
        raise ParameterError(f"method must be 'tsne' or 'pca', got {method!r}")
    X, owner = _modality_points(dataset, seed, sample_cap)
    Y = tsne(X, seed=seed) if method == "tsne" else pca2(X)
    cents = np.stack([Y[owner == m].mean(axis=0) for m in range(len(dataset.modalities))])
    return (cents, Y, owner) if return_points else cents


def inter_modal_distances(embedding) -> np.ndarray:
    E = np.asarray(embedding, dtype=np.float64)
    diff = E[:, None, :] - E[None, :, :]
    D = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(D, 0.0)
    return D


def median_threshold(D) -> float:
    D = np.asarray(D)
    iu = np.triu_indices(D.shape[0], k=1)
    return float(np.median(D[iu])) if len(iu[0]) else float("inf")


# ---------------------------------------------------------------------------
# partitioning


def _canonical(groups):
    groups = [sorted(int(i) for i in g) for g in groups if len(g)]
    return sorted(groups, key=lambda g: g[0])


def group_by_threshold(distance_matrix, threshold: float, embedding=None, names=None) -> GroupingResult:
    """Connected components of the ``d < threshold`` graph."""
    D = np.asarray(distance_matrix, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ContractError(f"distance matrix must be square, got shape {D.shape}")
    if np.any(D < 0) or not np.all(np.isfinite(D)):
        raise ContractError("distance matrix must be finite and non-negative")
    if not np.allclose(D, D.T, rtol=0.0, atol=1e-12):
        raise ContractError("distance matrix must be symmetric")
    if not threshold > 0:
        raise ParameterError(f"threshold must be > 0, got {threshold}")
    M = D.shape[0]
    adj = D < threshold
    seen = np.zeros(M, dtype=bool)
    groups = []
    for start in range(M):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in np.flatnonzero(adj[i] & ~seen):
                seen[j] = True
                stack.append(int(j))
        groups.append(comp)
    return GroupingResult(_canonical(groups), D, embedding, float(threshold), "img", list(names or []))


def check_partition(groups, M):
    flat = [i for g in groups for i in g]
    return sorted(flat) == list(range(M)) and all(len(g) for g in groups)


def random_partition(M: int, K: int, seed: int):
    """Uniformly random assignment of M items onto exactly K non-empty groups."""
    if not 1 <= K <= M:
        raise ParameterError(f"cannot split {M} modalities into {K} groups")
    rng = np.random.default_rng(seed)
    while True:
        lab = rng.integers(0, K, size=M)
        if len(np.unique(lab)) == K:
            return _canonical([np.flatnonzero(lab == k) for k in range(K)])


def img_grouping(dataset, method="tsne", seed=0, threshold=None, sample_cap=200) -> GroupingResult:
    emb = embed_modalities(dataset, method, seed, sample_cap)
    D = inter_modal_distances(emb)
    thr = median_threshold(D) if threshold is None else float(threshold)
    return group_by_threshold(D, thr, embedding=emb, names=dataset.names)


def grouping_variant(dataset, variant: str = "img", seed: int = 0, method: str = "tsne", threshold=None,
                     sample_cap: int = 200, base: GroupingResult | None = None) -> GroupingResult:
    """Grouping for the ablation variants.

    ``img`` uses the threshold rule; ``none`` puts every modality in one
    group; ``full`` gives each modality its own group; ``random`` draws a
    random partition with as many groups as ``img`` found. ``base`` may
    carry a precomputed ``img`` result to skip re-embedding.
    """
    if variant not in VARIANTS:
        raise ParameterError(f"grouping variant must be one of {VARIANTS}, got {variant!r}")
    M = len(dataset.modalities)
    img = base if base is not None else img_grouping(dataset, method, seed, threshold, sample_cap)
    if variant == "img":
        return img
    if variant == "none":
        groups = [list(range(M))]
    elif variant == "full":
        groups = [[m] for m in range(M)]
    else:
        groups = random_partition(M, img.k, seed)
    return GroupingResult(groups, img.distance_matrix, img.embedding, img.threshold, variant, dataset.names)
