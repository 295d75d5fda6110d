"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Only the operations needed by the encoder, the contrastive objective and
the probe heads are provided. Everything runs in float64.

Usage::

    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = tsum(mul(x, x))
    backward(loss, tape)
    x.grad  # -> [2., 2., 2.]
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, ParameterError

NORM_EPS = 1e-12

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Op:
    inputs: tuple
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    """Records operations in execution order while active (``with Tape() as t``)."""

    ops: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def record(self, inputs, output, backward_fn):
        if self.consumed:
            raise ContractError("tape already consumed by backward(); create a new Tape")
        self.ops.append(_Op(tuple(inputs), output, backward_fn))

    def reset(self):
        self.ops = []
        self.consumed = False

    def backward(self, loss: Tensor):
        backward(loss, self)


def _make(data, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].record(inputs, out, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor, tape: Tape):
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    A tape can be consumed once; call ``tape.reset()`` and re-run the forward
    pass to differentiate again.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("backward() called twice on the same tape without reset")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad=True")
    if not any(op.output is loss for op in tape.ops):
        raise ContractError("loss was not produced while this tape was recording")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for op in reversed(tape.ops):
        g = op.output.grad
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.backward(g)):
            if gi is not None and inp.requires_grad:
                _accumulate(inp, gi)


# --------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor, axis: int = -1) -> Tensor:
    """Mean over one axis (the axis is removed)."""
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape),)

    return _make(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def crop(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop]`` along the last axis."""
    L = x.shape[-1]
    if not 0 <= start < stop <= L:
        raise ParameterError(f"crop: bad range [{start}, {stop}) for length {L}")

    def bw(g):
        full = np.zeros(x.shape)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make(out, tensors, bw)


# --------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the trailing dimension: ``x @ weight.T + bias``."""
    if weight.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-D, got {weight.shape}")
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"linear: input trailing dim {x.shape[-1]} != weight D_in {d_in}")
    if bias is not None and bias.shape != (d_out,):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({d_out},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, d_in)
        gb = g2.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bw)


def conv1d_causal(x: Tensor, weight: Tensor, bias: Tensor | None, dilation: int = 1) -> Tensor:
    """Dilated causal 1-D convolution.

    ``x`` is ``[C_in, L]`` or ``[B, C_in, L]``; ``weight`` is ``[C_out, C_in, K]``.
    The input is left-padded with ``(K - 1) * dilation`` zeros, so the output
    keeps length ``L`` and position ``t`` only sees inputs at ``t' <= t``.
    Kernel tap ``k`` multiplies ``x[t - (K - 1 - k) * dilation]``.
    """
    if dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {dilation}")
    if weight.ndim != 3:
        raise DimensionError(f"conv1d_causal: weight must be [C_out, C_in, K], got {weight.shape}")
    c_out, c_in, K = weight.shape
    if x.ndim not in (2, 3) or x.shape[-2] != c_in:
        raise DimensionError(f"conv1d_causal: input {x.shape} does not match C_in={c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv1d_causal: bias shape {bias.shape} != ({c_out},)")
    L = x.shape[-1]
    if L < 1:
        raise ParameterError("conv1d_causal: empty input")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    pad = (K - 1) * dilation
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, 0)))
    wd = weight.data
    out = np.zeros((xd.shape[0], c_out, L))
    for k in range(K):
        s = k * dilation
        out += np.einsum("oc,bcl->bol", wd[:, :, k], xp[:, :, s:s + L], optimize=True)
    if bias is not None:
        out += bias.data[None, :, None]

    def bw(g):
        g3 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for k in range(K):
            s = k * dilation
            gxp[:, :, s:s + L] += np.einsum("oc,bol->bcl", wd[:, :, k], g3, optimize=True)
            gw[:, :, k] = np.einsum("bol,bcl->oc", g3, xp[:, :, s:s + L], optimize=True)
        gx = gxp[:, :, pad:]
        if squeeze:
            gx = gx[0]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g3.sum(axis=(0, 2)),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if squeeze else out, inputs, bw)


def mean_pool(x: Tensor, window: int) -> Tensor:
    """Non-overlapping means along the last axis; a short final window is
    averaged over its actual length. Output length is ``ceil(L / window)``."""
    if window < 1:
        raise ParameterError(f"mean_pool window must be >= 1, got {window}")
    L = x.shape[-1]
    n_out = -(-L // window)
    starts = np.arange(0, L, window)
    counts = np.minimum(window, L - starts).astype(np.float64)
    out = np.add.reduceat(x.data, starts, axis=-1) / counts

    def bw(g):
        return (np.repeat(g / counts, counts.astype(int), axis=-1),)

    assert out.shape[-1] == n_out
    return _make(out, (x,), bw)


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale each vector along the last axis to unit L2 norm."""
    norms = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    if np.any(norms <= eps):
        raise DegenerateInputError("l2_normalize: vector with (near-)zero norm")
    y = x.data / norms

    def bw(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norms,)

    return _make(y, (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# --------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets, exclude=None) -> Tensor:
    """Mean softmax cross-entropy of ``logits [N, C]`` against integer targets.

    ``exclude`` is an optional boolean ``[N, C]`` mask of entries removed
    from the softmax denominator (never the target entry).
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be [N, C], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,) or np.any(targets < 0) or np.any(targets >= c):
        raise DimensionError("cross_entropy: targets must be N class indices in range")
    z = logits.data
    keep = np.ones_like(z, dtype=bool) if exclude is None else ~np.asarray(exclude, dtype=bool)
    if not np.all(keep[np.arange(n), targets]):
        raise ContractError("cross_entropy: a target entry is excluded from its own softmax")
    zmax = np.max(np.where(keep, z, -np.inf), axis=1, keepdims=True)
    e = np.where(keep, np.exp(z - zmax), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    logp_t = (z - zmax)[np.arange(n), targets] - np.log(denom[:, 0])
    loss = -np.mean(logp_t)

    def bw(g):
        gl = p.copy()
        gl[np.arange(n), targets] -= 1.0
        return (gl * (g / n),)

    return _make(loss, (logits,), bw)


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _make(np.mean(diff * diff), (pred,), lambda g: (g * 2.0 * diff / n,))


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params):
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    ``grads`` entries may be None (treated as zero gradient).
    """
    if len(params) != len(grads):
        raise DimensionError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state = AdamState.zeros_like(params)
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_p.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


class Adam:
    """Adam over a fixed list of parameter tensors, updated in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.002, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        new, self.state = adam_step([p.data for p in self.params], [p.grad for p in self.params],
                                    self.state, self.lr, self.betas[0], self.betas[1], self.eps)
        for p, d in zip(self.params, new):
            p.data = d
