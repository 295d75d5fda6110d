import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbsl import datagen, grouping
from mbsl.datagen import ModalitySpec
from mbsl.errors import ContractError, DegenerateInputError, ParameterError
from mbsl.grouping import group_by_threshold, inter_modal_distances
from oracles import planted_points, set_partitions, threshold_consistent


def random_distance_matrix(seed, M):
    pts = np.random.default_rng(seed).normal(size=(M, 2))
    return inter_modal_distances(pts)


@pytest.fixture(scope="module")
def small():
    return datagen.generate(0, 60, 50.0, 64, datagen.default_specs())


# ------------------------------------------------------------ distances


def test_distances():
    D = inter_modal_distances([[0, 0], [3, 4]])
    assert D[0, 1] == 5.0 and D[1, 0] == 5.0
    assert inter_modal_distances([[1.0, 2.0]]).tolist() == [[0.0]]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), M=st.integers(3, 7))
def test_triangle_inequality(seed, M):
    D = random_distance_matrix(seed, M)
    for i in range(M):
        for j in range(M):
            for k in range(M):
                assert D[i, k] <= D[i, j] + D[j, k] + 1e-12


# ------------------------------------------------------------ threshold grouping


def test_threshold_extremes():
    D = random_distance_matrix(1, 6)
    assert group_by_threshold(D, np.inf).groups == [list(range(6))]
    pos = D[D > 0].min()
    assert group_by_threshold(D, pos).groups == [[i] for i in range(6)]


@pytest.mark.parametrize("seed", range(5))
def test_planted_partition_unique(seed):
    coords, planted, thr = planted_points(seed)
    D = inter_modal_distances(coords)
    consistent = [sorted(sorted(g) for g in p) for p in set_partitions(range(5)) if threshold_consistent(p, D, thr)]
    assert consistent == [planted]
    assert group_by_threshold(D, thr).groups == planted


def test_contract_errors():
    with pytest.raises(ContractError):
        group_by_threshold(np.array([[0.0, 1.0], [2.0, 0.0]]), 1.0)
    with pytest.raises(ContractError):
        group_by_threshold(np.array([[0.0, -1.0], [-1.0, 0.0]]), 1.0)
    with pytest.raises(ParameterError):
        group_by_threshold(np.zeros((2, 2)), 0.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), M=st.integers(1, 8), q=st.floats(0.05, 0.95))
def test_grouping_invariants(seed, M, q):
    D = random_distance_matrix(seed, M)
    thr = float(np.quantile(D, q)) + 1e-9
    res = group_by_threshold(D, thr)
    assert grouping.check_partition(res.groups, M)
    assert res.groups == sorted(res.groups, key=lambda g: g[0])
    assert all(g == sorted(g) for g in res.groups)
    for g in res.groups:
        if len(g) >= 2:
            for i in g:
                assert min(D[i, j] for j in g if j != i) < thr
    for a in range(res.k):
        for b in range(a + 1, res.k):
            assert min(D[i, j] for i in res.groups[a] for j in res.groups[b]) >= thr
    assert threshold_consistent(res.groups, D, thr)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), M=st.integers(2, 8))
def test_permutation_equivariance(seed, M):
    D = random_distance_matrix(seed, M)
    thr = float(np.median(D[np.triu_indices(M, 1)]))
    perm = np.random.default_rng(seed).permutation(M)
    base = group_by_threshold(D, thr).groups
    permuted = group_by_threshold(D[np.ix_(perm, perm)], thr).groups
    # index i in the permuted problem is modality perm[i]
    mapped = sorted((sorted(int(perm[i]) for i in g) for g in permuted), key=lambda g: g[0])
    assert mapped == base


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), M=st.integers(2, 8))
def test_monotone_in_threshold(seed, M):
    D = random_distance_matrix(seed, M)
    ks = [group_by_threshold(D, thr).k for thr in np.linspace(1e-6, D.max() * 1.1, 20)]
    assert all(a >= b for a, b in zip(ks, ks[1:]))


# ------------------------------------------------------------ embedding


def test_identical_modalities_share_centroid():
    spec = ModalitySpec("a", 1, "quasi_periodic")
    d = datagen.generate(2, 30, 50.0, 64, [spec, ModalitySpec("s", 1, "trend", (0, 1))])
    twin = datagen.MultiModalDataset(d.fs, d.window_len, [spec, ModalitySpec("b", 1, "quasi_periodic"), d.modalities[1]],
                                     [d.windows[0], d.windows[0].copy(), d.windows[1]])
    emb = grouping.embed_modalities(twin, "pca", seed=0, sample_cap=30)
    assert inter_modal_distances(emb)[0, 1] == 0.0


def test_pca_preserves_rank2_distance_ratios():
    rng = np.random.default_rng(0)
    L = 40
    t = np.arange(L)
    u = np.sin(2 * np.pi * t / L)
    v = np.cos(2 * np.pi * 3 * t / L)  # orthogonal, both zero-mean, equal norms
    specs, windows, raw_cents = [], [], []
    for m, centre in enumerate([0.3, 1.2, 2.5, 4.0]):
        ang = centre + rng.uniform(-0.2, 0.2, size=20)
        w = (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v)[:, None, :]
        specs.append(ModalitySpec(f"m{m}", 1, "quasi_periodic"))
        windows.append(w.astype(np.float32))
        x = w[:, 0].astype(np.float32).astype(np.float64)
        raw_cents.append(((x - x.mean(1, keepdims=True)) / x.std(1, keepdims=True)).mean(0))
    d = datagen.MultiModalDataset(1.0, L, specs, windows)
    emb = grouping.embed_modalities(d, "pca", seed=0, sample_cap=20)
    De = inter_modal_distances(emb)
    Dr = inter_modal_distances(np.array(raw_cents))
    iu = np.triu_indices(4, 1)
    ratio = De[iu] / Dr[iu]
    assert np.max(np.abs(ratio / ratio[0] - 1)) <= 1e-9


def test_tsne_deterministic(small):
    a = grouping.embed_modalities(small, "tsne", seed=3, sample_cap=40)
    b = grouping.embed_modalities(small, "tsne", seed=3, sample_cap=40)
    assert a.tobytes() == b.tobytes()


def test_tsne_separates_clusters():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0, 1, (40, 10)), rng.normal(8, 1, (40, 10))])
    Y = grouping.tsne(X, seed=1, n_iter=400)
    ca, cb = Y[:40].mean(0), Y[40:].mean(0)
    spread = max(np.linalg.norm(Y[:40] - ca, axis=1).mean(), np.linalg.norm(Y[40:] - cb, axis=1).mean())
    assert np.linalg.norm(ca - cb) > 3 * spread


def test_constant_modality_rejected(small):
    w = [x.copy() for x in small.windows]
    w[2][:] = 90.0
    d = datagen.MultiModalDataset(small.fs, small.window_len, small.modalities, w)
    with pytest.raises(DegenerateInputError, match="spo2"):
        grouping.embed_modalities(d, "pca")
    with pytest.raises(ParameterError):
        grouping.embed_modalities(small, "pca", sample_cap=5)


def test_default_dataset_groups_ppg_together():
    d = datagen.generate(11, 200, 50.0, 128, datagen.default_specs())
    res = grouping.img_grouping(d, "tsne", seed=11, sample_cap=100)
    assert res.groups == [[0, 1], [2]]


# ------------------------------------------------------------ variants


def test_variants(small):
    base = grouping.img_grouping(small, "pca", seed=0)
    M = len(small.modalities)
    assert grouping.grouping_variant(small, "none", base=base).k == 1
    assert grouping.grouping_variant(small, "full", base=base).k == M
    r1 = grouping.grouping_variant(small, "random", seed=4, base=base)
    r2 = grouping.grouping_variant(small, "random", seed=4, base=base)
    assert r1.groups == r2.groups and r1.k == base.k
    assert grouping.check_partition(r1.groups, M)
    assert grouping.grouping_variant(small, "img", base=base) is base
    with pytest.raises(ParameterError):
        grouping.grouping_variant(small, "clever", base=base)


def test_json_roundtrip(small):
    res = grouping.img_grouping(small, "pca", seed=0)
    back = grouping.GroupingResult.from_dict(__import__("json").loads(res.to_json()))
    assert back.groups == res.groups
    assert np.array_equal(back.distance_matrix, res.distance_matrix)
    assert back.threshold == res.threshold
