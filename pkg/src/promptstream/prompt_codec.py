"""Low-rank prompt representation: factorization, interpolation, quantization.

The transmitted unit of semantic content is a 77xd prompt matrix stored as
U (77xr) times V (rxd). Keyframe prompts are fitted; intermediate frames
interpolate linearly between the two adjacent keyframes. Prompt factors go
on the wire as fixed-width uniform-quantized codes (no entropy coding).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import numerics as nm

TOKENS = 77
DEFAULT_Q = 12


@dataclass(frozen=True)
class LowRankPrompt:
    """Factored prompt: compose() yields the 77xd matrix U @ V."""

    U: np.ndarray  # (77, r) float32
    V: np.ndarray  # (r, d) float32

    def __post_init__(self):
        u, v = np.asarray(self.U), np.asarray(self.V)
        if u.ndim != 2 or v.ndim != 2 or u.shape[0] != TOKENS or u.shape[1] != v.shape[0]:
            raise nm.ShapeMismatchError(f"LowRankPrompt: U {u.shape} vs V {v.shape}")
        if self.rank > min(TOKENS, self.d):
            raise ValueError(f"rank {self.rank} exceeds min(77, d={self.d})")

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def d(self) -> int:
        return self.V.shape[1]


def random_prompt(rank, d, rng) -> LowRankPrompt:
    """Gaussian factors scaled so composed entries have roughly unit variance."""
    s = rank ** -0.25
    u = rng.normal(0.0, s, size=(TOKENS, rank)).astype(np.float32)
    v = rng.normal(0.0, s, size=(rank, d)).astype(np.float32)
    return LowRankPrompt(u, v)


def compose(p: LowRankPrompt):
    """U @ V with the library's fixed left-to-right summation order."""
    return nm.matmul(p.U, p.V).data


def compose_tracked(u: nm.Tensor, v: nm.Tensor) -> nm.Tensor:
    """Tape-tracked compose for the trainer; identical arithmetic."""
    return nm.matmul(u, v)


@dataclass(frozen=True)
class PromptGroup:
    """A run of stitched frames spanned by two keyframe prompts.

    Keyframes are shared with adjacent groups, so alphas run from exactly
    0 (keyframe_a) to exactly 1 (keyframe_b).
    """

    keyframe_a: LowRankPrompt
    keyframe_b: LowRankPrompt
    group_len: int
    alphas: tuple = field(default=None)

    def __post_init__(self):
        if self.keyframe_a.rank != self.keyframe_b.rank or self.keyframe_a.d != self.keyframe_b.d:
            raise nm.ShapeMismatchError(
                f"PromptGroup keyframes disagree: "
                f"{self.keyframe_a.U.shape}x{self.keyframe_a.V.shape} vs "
                f"{self.keyframe_b.U.shape}x{self.keyframe_b.V.shape}")
        if self.group_len < 2:
            raise ValueError(f"group_len must be >= 2, got {self.group_len}")
        alphas = self.alphas
        if alphas is None:
            alphas = uniform_alphas(self.group_len)
            object.__setattr__(self, "alphas", alphas)
        else:
            alphas = tuple(float(a) for a in alphas)
            object.__setattr__(self, "alphas", alphas)
        if len(self.alphas) != self.group_len:
            raise ValueError(f"{len(self.alphas)} alphas for group_len {self.group_len}")
        if self.alphas[0] != 0.0 or self.alphas[-1] != 1.0:
            raise ValueError("alphas must start at 0 and end at 1 (shared keyframes)")
        if any(b <= a for a, b in zip(self.alphas, self.alphas[1:])):
            raise ValueError("alphas must be strictly increasing")


def uniform_alphas(n):
    return tuple(float(np.float32(i) / np.float32(n - 1)) for i in range(n))


def interpolate(group: PromptGroup, i: int):
    """Prompt matrix for frame i: (1-a_i)*compose(kf_a) + a_i*compose(kf_b)."""
    if not 0 <= i < group.group_len:
        raise IndexError(f"frame index {i} outside group of length {group.group_len}")
    a = compose(group.keyframe_a)
    b = compose(group.keyframe_b)
    return nm.lerp(nm.Tensor(a), nm.Tensor(b), group.alphas[i]).data


@dataclass(frozen=True)
class QuantizedMatrix:
    """Uniform symmetric fixed-width codes for one float32 matrix."""

    q: int
    scale: float
    codes: np.ndarray  # uint16/uint32 in [0, 2^q - 1]
    shape: tuple


def quantize(m, q=DEFAULT_Q) -> QuantizedMatrix:
    """Round-to-nearest-even uniform quantizer, scale = 2*max|m|/(2^q - 1)."""
    m = np.asarray(m, dtype=np.float32)
    if not np.isfinite(m).all():
        raise ValueError("quantize: matrix contains non-finite values")
    levels = (1 << q) - 1
    half = levels / 2.0
    amax = float(np.abs(m).max()) if m.size else 0.0
    if amax == 0.0:
        mid = 1 << (q - 1)
        codes = np.full(m.shape, mid, dtype=np.uint32)
        return QuantizedMatrix(q, 0.0, codes.reshape(-1), m.shape)
    scale = np.float32(2.0 * amax / levels)
    u = m.astype(np.float64) / float(scale) + half
    codes = np.rint(u)  # rint rounds half to even
    codes = np.clip(codes, 0, levels).astype(np.uint32)
    return QuantizedMatrix(q, float(scale), codes.reshape(-1), m.shape)


def dequantize(qm: QuantizedMatrix):
    half = ((1 << qm.q) - 1) / 2.0
    if qm.scale == 0.0:
        return np.zeros(qm.shape, dtype=np.float32)
    vals = (qm.codes.astype(np.float64) - half) * qm.scale
    return vals.astype(np.float32).reshape(qm.shape)


def bitrate_estimate(d, rank, q, keyframes_per_second):
    """Prompt payload rate in bits/s: (77 + d) * rank * q * kf_rate.

    Container overhead is excluded (the bitstream module reports it).
    Exact when the keyframe rate is an int or Fraction.
    """
    if d <= 0 or rank < 0 or q <= 0:
        raise ValueError("d, q must be positive and rank non-negative")
    bits_per_keyframe = (TOKENS + d) * rank * q
    rate = bits_per_keyframe * keyframes_per_second
    if isinstance(rate, Fraction) and rate.denominator == 1:
        return int(rate)
    return rate
