"""Uniform fixed-range quantizers with power-of-2 grids.

Clip ranges are fixed per tensor class (weights, biases, activations,
gradients) rather than calibrated, so the LSB is a constant power of two
and quantized values round-trip exactly through float64. Mid-tread grids
(a level at zero) are used at 3 bits and above; 1- and 2-bit grids are
mid-rise so they do not collapse around zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _is_pow2(v: float) -> bool:
    if v <= 0.0 or not math.isfinite(v):
        return False
    mant, _ = math.frexp(v)
    return mant == 0.5


@dataclass(frozen=True)
class QuantSpec:
    """One uniform quantizer: ``bits`` levels across [lo, hi).

    ``bits=0`` is the identity (float mode); it never clips and its LSB
    is reported as 0. The grid is anchored at zero: mid-tread levels are
    n*delta, mid-rise levels (n+0.5)*delta.
    """

    bits: int
    lo: float = float("-inf")
    hi: float = float("inf")
    mode: str = field(default="")

    def __post_init__(self):
        if self.bits == 0:
            object.__setattr__(self, "mode", "none")
            return
        if self.bits < 1 or self.bits > 32:
            raise ValueError(f"unsupported bit width {self.bits}")
        if not (self.lo < self.hi) or not math.isfinite(self.hi - self.lo):
            raise ValueError("clip range must be finite with lo < hi")
        if not _is_pow2(self.hi - self.lo):
            raise ValueError("clip span must be a power of two")
        if not self.mode:
            object.__setattr__(
                self, "mode", "mid-tread" if self.bits >= 3 else "mid-rise"
            )
        if self.mode not in ("mid-tread", "mid-rise"):
            raise ValueError(f"unknown quantizer mode {self.mode!r}")
        if self.lo != 0.0 and not _is_pow2(abs(self.lo)):
            raise ValueError("clip lo must be zero or a signed power of two")
        if not float(self.lo / self.delta).is_integer():
            raise ValueError("clip lo must sit on the LSB grid")

    @property
    def delta(self) -> float:
        """LSB step; exactly representable because the span is a power of 2."""
        if self.bits == 0:
            return 0.0
        return (self.hi - self.lo) / (1 << self.bits)

    @classmethod
    def identity(cls) -> "QuantSpec":
        return cls(bits=0)

    def quantize(self, x):
        """Round onto the grid with saturation; ties round half-to-even."""
        x = np.asarray(x, dtype=np.float64)
        if self.bits == 0:
            return x.copy()
        d = self.delta
        n_lo = self.lo / d
        n_hi = self.hi / d - 1.0
        if self.mode == "mid-tread":
            n = np.rint(np.clip(x, self.lo, self.hi) / d)
        else:
            n = np.floor(x / d)
        return np.clip(n, n_lo, n_hi) * d + (0.5 * d if self.mode == "mid-rise" else 0.0)

    def ste_backward(self, upstream, forward_input):
        """Straight-through gradient: pass inside [lo, hi], zero outside."""
        upstream = np.asarray(upstream, dtype=np.float64)
        if self.bits == 0:
            return upstream.copy()
        forward_input = np.asarray(forward_input)
        mask = (forward_input >= self.lo) & (forward_input <= self.hi)
        return upstream * mask

    def snap(self, x):
        """Round to the LSB grid without clipping (weight-update deltas)."""
        x = np.asarray(x, dtype=np.float64)
        if self.bits == 0:
            return x.copy()
        return np.rint(x / self.delta) * self.delta

    def levels(self) -> np.ndarray:
        """All representable values, ascending (small widths only)."""
        if self.bits == 0:
            raise ValueError("identity quantizer has no finite level set")
        if self.bits > 16:
            raise ValueError("level enumeration capped at 16 bits")
        d = self.delta
        n = np.arange(self.lo / d, self.hi / d)
        return n * d + (0.5 * d if self.mode == "mid-rise" else 0.0)


def quantize_maxabs(x: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric quantization with a dynamic max-abs clip range.

    Used for narrow storage of accumulator factors: the scale adapts to
    the tensor, positive and negative codes are symmetric, and an
    all-zero tensor passes through unchanged.
    """
    if bits < 2 or bits > 32:
        raise ValueError(f"unsupported bit width {bits}")
    x = np.asarray(x, dtype=np.float64)
    scale = float(np.max(np.abs(x), initial=0.0))
    if scale == 0.0:
        return x.copy()
    m = (1 << (bits - 1)) - 1
    return np.rint(x * (m / scale)) * (scale / m)


@dataclass(frozen=True)
class QuantProfile:
    """Quantizer assignment for the four on-device tensor classes."""

    weights: QuantSpec
    biases: QuantSpec
    acts: QuantSpec
    grads: QuantSpec
    name: str = "custom"

    @property
    def enabled(self) -> bool:
        return self.weights.bits != 0


def default_profile(weight_bits: int = 8) -> QuantProfile:
    """Default deployment widths: W 8b [-1,1], b 16b [-8,8], a 8b [0,2], g 8b [-1,1].

    ``weight_bits`` can be narrowed for sweep experiments; the other
    classes keep their defaults.
    """
    return QuantProfile(
        weights=QuantSpec(weight_bits, -1.0, 1.0),
        biases=QuantSpec(16, -8.0, 8.0),
        acts=QuantSpec(8, 0.0, 2.0),
        grads=QuantSpec(8, -1.0, 1.0),
        name=f"default-w{weight_bits}",
    )


def float_profile() -> QuantProfile:
    """All-identity profile for float-mode reference runs."""
    ident = QuantSpec.identity()
    return QuantProfile(ident, ident, ident, ident, name="float")
