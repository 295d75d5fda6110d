"""Multi-scale masking and patching of raw windows into token sequences.

Arrays here are plain numpy; nothing in this module is differentiated.
Inputs are ``[..., C, L]``; the mask is drawn per timestamp and shared by
all channels of a window.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

PATCH_FRACTIONS = (0.04, 0.08, 0.16)
MASK_RATIOS = (0.05, 0.10, 0.15)


@dataclass(frozen=True)
class ScaleSpec:
    patch_len: int
    mask_ratio: float = 0.0

    def __post_init__(self):
        if int(self.patch_len) != self.patch_len or self.patch_len < 1:
            raise ParameterError(f"patch_len must be a positive integer, got {self.patch_len}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ParameterError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        object.__setattr__(self, "patch_len", int(self.patch_len))
        object.__setattr__(self, "mask_ratio", float(self.mask_ratio))


@dataclass
class TokenSequence:
    tokens: np.ndarray  # [..., C, T, patch_len]
    scale: ScaleSpec

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]


def default_scales(fs: float) -> list:
    """Small/middle/large scales: patch lengths 0.04, 0.08, 0.16 x fs paired
    with mask ratios 0.05, 0.10, 0.15 (small patch with small ratio)."""
    return [ScaleSpec(max(1, int(round(f * fs))), r) for f, r in zip(PATCH_FRACTIONS, MASK_RATIOS)]


def draw_mask(shape, mask_ratio: float, seed) -> np.ndarray:
    """0/1 float mask; each entry is zero with probability ``mask_ratio``."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ParameterError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    rng = np.random.default_rng(seed)
    return (rng.random(shape) >= mask_ratio).astype(np.float64)


def mask(x, mask_ratio: float, seed, return_mask: bool = False):
    x = np.asarray(x, dtype=np.float64)
    m = draw_mask(x.shape[:-2] + (1, x.shape[-1]), mask_ratio, seed)
    out = x * m
    return (out, m) if return_mask else out


def patch(x, patch_len: int, scale: ScaleSpec | None = None) -> TokenSequence:
    """Cut ``[..., C, L]`` into ``floor(L / P)`` non-overlapping patches; the remainder is dropped."""
    x = np.asarray(x)
    L = x.shape[-1]
    if patch_len < 1:
        raise ParameterError(f"patch_len must be >= 1, got {patch_len}")
    if L < patch_len:
        raise ParameterError(f"window length {L} is shorter than patch_len {patch_len}")
    T = L // patch_len
    tokens = x[..., : T * patch_len].reshape(x.shape[:-1] + (T, patch_len))
    return TokenSequence(tokens, scale if scale is not None else ScaleSpec(patch_len))


def unpatch(seq: TokenSequence) -> np.ndarray:
    t = seq.tokens
    return t.reshape(t.shape[:-2] + (t.shape[-2] * t.shape[-1],))


def scale_seed(seed, index: int):
    """Independent child seed for scale ``index``."""
    base = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return base + [1000 + index]


def transform_multiscale(x, scales, seed=0, training: bool = True, mask_level: str = "timestamp") -> list:
    """Mask (training only) then patch once per scale.

    ``mask_level="token"`` zeroes whole patches instead of single timestamps.
    """
    scales = list(scales)
    if not scales:
        raise ParameterError("at least one ScaleSpec is required")
    if mask_level not in ("timestamp", "token"):
        raise ParameterError(f"mask_level must be 'timestamp' or 'token', got {mask_level!r}")
    x = np.asarray(x, dtype=np.float64)
    out = []
    for i, sc in enumerate(scales):
        if training and sc.mask_ratio > 0 and mask_level == "timestamp":
            seq = patch(mask(x, sc.mask_ratio, scale_seed(seed, i)), sc.patch_len, sc)
        else:
            seq = patch(x, sc.patch_len, sc)
            if training and sc.mask_ratio > 0:
                m = draw_mask(x.shape[:-2] + (1, seq.n_tokens, 1), sc.mask_ratio, scale_seed(seed, i))
                seq = TokenSequence(seq.tokens * m, sc)
        out.append(seq)
    return out
