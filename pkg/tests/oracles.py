"""Independent reference computations used by the test-suite."""
import numpy as np


def conv1d_loops(x, w, b, dilation):
    c_in, L = x.shape
    c_out, _, K = w.shape
    out = np.zeros((c_out, L))
    for o in range(c_out):
        for t in range(L):
            acc = b[o]
            for c in range(c_in):
                for k in range(K):
                    src = t - (K - 1 - k) * dilation
                    if src >= 0:
                        acc += w[o, c, k] * x[c, src]
            out[o, t] = acc
    return out


def matmul_loops(x, w, b):
    n, d_in = x.shape
    d_out = w.shape[0]
    out = np.zeros((n, d_out))
    for i in range(n):
        for j in range(d_out):
            s = b[j]
            for k in range(d_in):
                s += x[i, k] * w[j, k]
            out[i, j] = s
    return out


def central_diff(f, arrays, step=1e-5):
    """Central finite-difference gradients of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = f()
            flat[i] = old - step
            fm = f()
            flat[i] = old
            gf[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def rel_err(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def nt_xent_enumerate(h1, h2, tau):
    """Symmetrised cross-view NT-Xent by explicit loops over anchors."""
    h1 = np.asarray(h1, float)
    h2 = np.asarray(h2, float)
    n = len(h1)

    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    def one_way(a, b):
        total = 0.0
        for i in range(n):
            num = np.exp(cos(a[i], b[i]) / tau)
            den = sum(np.exp(cos(a[i], b[k]) / tau) for k in range(n))
            total += -np.log(num / den)
        return total / n

    return 0.5 * (one_way(h1, h2) + one_way(h2, h1))


def auprc_enumerate(scores, positives):
    """Area under the PR curve by trying every distinct threshold separately."""
    scores = np.asarray(scores, float)
    positives = np.asarray(positives, bool)
    pts = [(0.0, 1.0)]
    for thr in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= thr
        tp = int(np.sum(pred & positives))
        fp = int(np.sum(pred & ~positives))
        fn = int(np.sum(~pred & positives))
        pts.append((tp / (tp + fn), tp / (tp + fp)))
    area = 0.0
    for (r0, p0), (r1, p1) in zip(pts, pts[1:]):
        area += (r1 - r0) * (p0 + p1) / 2
    return area


def set_partitions(items):
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def threshold_consistent(partition, D, thr):
    """Groups connected under d < thr edges, and all cross-group distances >= thr."""
    for g in partition:
        reached = {g[0]}
        frontier = [g[0]]
        while frontier:
            i = frontier.pop()
            for j in g:
                if j not in reached and D[i, j] < thr:
                    reached.add(j)
                    frontier.append(j)
        if len(reached) != len(g):
            return False
    for a in range(len(partition)):
        for b in range(a + 1, len(partition)):
            if min(D[i, j] for i in partition[a] for j in partition[b]) < thr:
                return False
    return True


def planted_points(seed, sizes=(3, 2), spread=1.0, ratio=10.0):
    """2-D points in two clusters; min cross distance >= ratio * max within distance.

    Returns (coords, planted groups as sorted index lists, threshold between the scales).
    """
    rng = np.random.default_rng(seed)
    M = sum(sizes)
    perm = rng.permutation(M)
    coords = np.zeros((M, 2))
    groups = []
    start = 0
    for c, size in enumerate(sizes):
        idx = perm[start:start + size]
        start += size
        ang = rng.uniform(0, 2 * np.pi, size)
        rad = rng.uniform(0, spread / 2, size)
        coords[idx] = np.stack([rad * np.cos(ang), rad * np.sin(ang)], 1) + [c * spread * (ratio + 2), 0]
        groups.append(sorted(int(i) for i in idx))
    D = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
    within = max(D[i, j] for g in groups for i in g for j in g)
    cross = min(D[i, j] for i in groups[0] for j in groups[1])
    assert cross >= ratio * within
    return coords, sorted(groups), float(np.sqrt(max(within, 1e-9) * cross))
