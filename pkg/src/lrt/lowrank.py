"""Streaming rank-r accumulation of a sum of outer products.

The accumulator keeps an orthonormal basis pair plus a diagonal weight
vector and absorbs one (gradient, activation) pair at a time. Each
absorption inserts the pair into the working bases (rank r+1), takes the
SVD of the small coupling matrix, and compresses back to rank r either by
plain truncation (biased) or by sign-randomized mixing of the trailing
singular values (unbiased, zero-mean error). The unbiased mixing follows
the minimum-variance construction: the trailing k+1 values are replaced
by k copies of their mean, rotated through a sign-flipped Householder
complement so the error has zero expectation.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .linalg import condition_estimate, householder_basis, mgs_insert, svd_small
from .quant import quantize_maxabs

# Relative threshold below which singular values are treated as exact
# zeros. Keeps the unbiased mixing from turning SVD roundoff into
# sqrt-amplified reconstruction error on rank-deficient streams.
SIGMA_SNAP = 1e-12

DEFAULT_KAPPA = 100.0

_MAGIC = b"LRTS"
_VERSION = 2


@dataclass(frozen=True)
class SpectrumSplit:
    """Partition of a descending spectrum into kept and mixed parts.

    ``m`` is the 1-based index of the first mixed value, ``k = q - m`` the
    reduced multiplicity of the mixed block, ``s1`` the mixed mass, and
    ``x0`` the unit vector whose orthogonal complement carries the mixing
    (None when the mixed mass is zero and no mixing is needed).
    """

    m: int
    k: int
    s1: float
    x0: np.ndarray | None


def split_spectrum(sigma: np.ndarray) -> SpectrumSplit:
    """Choose the split point m = min{i : (q-i) sigma_i <= sum_{j>=i} sigma_j}.

    Minimality makes the mixed block representable: k * sigma_m <= s1, so
    every component of x0 is real, and sigma_{m-1} > s1/k keeps the kept
    weights descending.
    """
    vals = [float(s) for s in sigma]
    q = len(vals)
    if q < 2:
        raise ValueError("spectrum must have at least two entries")
    drop_tol = 1e-9 * max(vals[0], 1e-300)
    for a, b in zip(vals, vals[1:]):
        if b - a > drop_tol:
            raise ValueError("spectrum must be nonnegative and descending")
    if min(vals) < 0.0:
        raise ValueError("spectrum must be nonnegative and descending")

    tail = sum(vals)
    m = q - 1
    for i in range(1, q + 1):  # 1-based scan; i = q-1 always satisfies the test
        if (q - i) * vals[i - 1] <= tail:
            m = i
            break
        tail -= vals[i - 1]

    k = q - m
    s1 = sum(vals[m - 1 :])
    if s1 <= 0.0:
        return SpectrumSplit(m=m, k=k, s1=0.0, x0=None)
    # Divide last: when sigma_j * k == s1 exactly (lossless tail) the
    # ratio must be exactly 1, or sqrt turns the rounding into 1e-8.
    x0 = np.sqrt(np.clip(1.0 - (np.asarray(vals[m - 1 :]) * k) / s1, 0.0, None))
    x0 /= math.sqrt(float(x0 @ x0))
    return SpectrumSplit(m=m, k=k, s1=s1, x0=x0)


def mixing_transform(
    split: SpectrumSplit,
    sigma: np.ndarray,
    variant: str,
    rng: np.random.Generator | None = None,
):
    """Build the q x r compression map and the new diagonal weights.

    Biased: keep the top r singular values (best rank-r truncation).
    Unbiased: keep sigma_1..sigma_{m-1}, spread the mixed mass s1 evenly
    over k slots, and rotate the mixed block by diag(signs) times the
    Householder complement of x0 so the estimate is exact in expectation
    over the signs. A zero mixed mass degenerates to truncation, which is
    then exact.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    q = sigma.size
    r = q - 1
    if variant == "biased" or split.s1 == 0.0:
        return np.eye(q, r), sigma[:r].copy()
    if variant != "unbiased":
        raise ValueError(f"unknown variant {variant!r}")
    if rng is None:
        raise ValueError("unbiased mixing needs a random generator")

    m, k = split.m, split.k
    x = householder_basis(split.x0)
    signs = rng.integers(0, 2, size=k + 1) * 2.0 - 1.0
    q_x = np.zeros((q, r))
    q_x.ravel()[: (m - 1) * r : r + 1] = 1.0  # identity on the kept block
    q_x[m - 1 :, m - 1 :] = signs[:, None] * x
    weights = np.empty(r)
    weights[: m - 1] = sigma[: m - 1]
    weights[m - 1 :] = split.s1 / k
    return q_x, weights


def variance_estimate(sigma_log, variant: str, n_samples: int) -> float:
    """Average per-element variance proxy accumulated from the sigma log.

    The log holds one (sigma_r, sigma_q) pair per compression. Biased
    runs drop sigma_q outright, so the squared error is sigma_q^2;
    unbiased runs pay 2 sigma_r sigma_q via the k = 1 mixing bound.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if variant == "biased":
        return float(sum(sq * sq for _, sq in sigma_log)) / n_samples
    if variant == "unbiased":
        return 2.0 * float(sum(sr * sq for sr, sq in sigma_log)) / n_samples
    raise ValueError(f"unknown variant {variant!r}")


class LowRankState:
    """Rank-r streaming accumulator for sums of outer products.

    Parameters
    ----------
    out_dim, in_dim : sizes of the gradient and activation vectors.
    rank : retained rank r (working rank is r + 1).
    variant : "biased" (truncation) or "unbiased" (sign mixing).
    kappa_th : condition threshold above which a sample is dropped
        instead of compressed. Samples whose insertion does not grow the
        working rank (zero coupling corner) are always folded in, since
        that path is lossless.
    storage_bits : when set (e.g. 16), materialized factors are
        quantized symmetrically to that width with a dynamic max-abs
        scale, mirroring narrow on-device factor storage.
    seed : seed for the sign draws.
    """

    def __init__(
        self,
        out_dim: int,
        in_dim: int,
        rank: int,
        variant: str = "unbiased",
        kappa_th: float = DEFAULT_KAPPA,
        storage_bits: int | None = None,
        seed: int = 0,
    ):
        if rank < 1:
            raise ValueError("rank must be at least 1")
        if min(out_dim, in_dim) < 1:
            raise ValueError("dimensions must be positive")
        if variant not in ("biased", "unbiased"):
            raise ValueError(f"unknown variant {variant!r}")
        self.out_dim = int(out_dim)
        self.in_dim = int(in_dim)
        self.rank = int(rank)
        self.q = self.rank + 1
        self.variant = variant
        self.kappa_th = float(kappa_th)
        self.storage_bits = storage_bits
        self.seed = int(seed)
        self.rng = np.random.default_rng(seed)
        self.basis_out = np.zeros((self.out_dim, self.q))
        self.basis_in = np.zeros((self.in_dim, self.q))
        self.weights = np.zeros(self.q)
        self.samples_seen = 0
        self.skipped = 0
        self.sigma_log: list[tuple[float, float]] = []

    # -- streaming ---------------------------------------------------

    def update(self, out_grad: np.ndarray, in_act: np.ndarray) -> None:
        """Absorb one outer product ``out_grad (x) in_act`` into the state."""
        out_grad = np.asarray(out_grad, dtype=np.float64).reshape(-1)
        in_act = np.asarray(in_act, dtype=np.float64).reshape(-1)
        if out_grad.size != self.out_dim or in_act.size != self.in_dim:
            raise ValueError(
                f"expected ({self.out_dim}, {self.in_dim}) vectors, got "
                f"({out_grad.size}, {in_act.size})"
            )
        r = self.rank
        q = self.q

        cl, res_l, col_l = mgs_insert(self.basis_out[:, :r], out_grad)
        cr, res_r, col_r = mgs_insert(self.basis_in[:, :r], in_act)
        self.samples_seen += 1

        c_left = np.empty(q)
        c_left[:r] = cl
        c_left[r] = res_l
        c_right = np.empty(q)
        c_right[:r] = cr
        c_right[r] = res_r
        coupling = c_left[:, None] * c_right
        coupling.ravel()[:: q + 1][:r] += self.weights[:r]

        kappa = condition_estimate(coupling)
        if kappa > self.kappa_th and coupling[r, r] != 0.0:
            # Ill-conditioned novelty: the fresh direction carries so
            # little mass that compressing it would mostly inject noise.
            # Drop the sample. (A zero corner means the working rank did
            # not grow; that case falls through to the lossless path.)
            self.skipped += 1
            return

        self.basis_out[:, r] = col_l
        self.basis_in[:, r] = col_r

        u, sigma, v = svd_small(coupling)
        if sigma[0] > 0.0:
            sigma = np.where(sigma < SIGMA_SNAP * sigma[0], 0.0, sigma)
        self.sigma_log.append((float(sigma[r - 1]), float(sigma[r])))

        split = split_spectrum(sigma)
        if self.variant == "biased" or split.s1 == 0.0:
            # Truncation maps are the identity on the kept block, so the
            # mixing matmul collapses to a column slice.
            self.basis_out[:, :r] = self.basis_out @ u[:, :r]
            self.basis_in[:, :r] = self.basis_in @ v[:, :r]
            self.weights[:r] = sigma[:r]
        else:
            q_x, new_weights = mixing_transform(
                split, sigma, self.variant, self.rng
            )
            self.basis_out[:, :r] = self.basis_out @ (u @ q_x)
            self.basis_in[:, :r] = self.basis_in @ (v @ q_x)
            self.weights[:r] = new_weights
        self.basis_out[:, r] = 0.0
        self.basis_in[:, r] = 0.0
        self.weights[r] = 0.0

    def materialize(self):
        """Return factors (left, right) with the estimate = left @ right.T."""
        root = np.sqrt(self.weights[: self.rank])
        left = self.basis_out[:, : self.rank] * root
        right = self.basis_in[:, : self.rank] * root
        if self.storage_bits is not None:
            left = quantize_maxabs(left, self.storage_bits)
            right = quantize_maxabs(right, self.storage_bits)
        return left, right

    def estimate(self) -> np.ndarray:
        left, right = self.materialize()
        return left @ right.T

    def reset(self) -> None:
        """Clear the accumulated sum and counters; the rng keeps advancing."""
        self.basis_out[:] = 0.0
        self.basis_in[:] = 0.0
        self.weights[:] = 0.0
        self.samples_seen = 0
        self.skipped = 0
        self.sigma_log.clear()

    # -- serialization -----------------------------------------------

    def to_bytes(self) -> bytes:
        """Flat little-endian record: header, weights, bases, rng state."""
        variant_code = 0 if self.variant == "biased" else 1
        header = struct.pack(
            "<4sHIIHBBdQQ",
            _MAGIC,
            _VERSION,
            self.out_dim,
            self.in_dim,
            self.rank,
            variant_code,
            0 if self.storage_bits is None else self.storage_bits,
            self.kappa_th,
            self.samples_seen,
            self.skipped,
        )
        state = self.rng.bit_generator.state
        rng_blob = struct.pack(
            "<Q16s16sBI",
            self.seed % (1 << 64),
            int(state["state"]["state"]).to_bytes(16, "little"),
            int(state["state"]["inc"]).to_bytes(16, "little"),
            int(state["has_uint32"]),
            int(state["uinteger"]),
        )
        return b"".join(
            [
                header,
                self.weights.astype("<f8").tobytes(),
                np.ascontiguousarray(self.basis_out, dtype="<f8").tobytes(),
                np.ascontiguousarray(self.basis_in, dtype="<f8").tobytes(),
                rng_blob,
            ]
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LowRankState":
        head_fmt = "<4sHIIHBBdQQ"
        head_len = struct.calcsize(head_fmt)
        if len(blob) < head_len:
            raise ValueError("record truncated before header end")
        (magic, version, out_dim, in_dim, rank, variant_code, storage_bits,
         kappa_th, seen, skipped) = struct.unpack_from(head_fmt, blob)
        if magic != _MAGIC:
            raise ValueError("bad magic, not an accumulator record")
        if version != _VERSION:
            raise ValueError(f"unsupported record version {version}")
        q = rank + 1
        body = np.dtype("<f8").itemsize * (q + out_dim * q + in_dim * q)
        rng_fmt = "<Q16s16sBI"
        if len(blob) != head_len + body + struct.calcsize(rng_fmt):
            raise ValueError("record length does not match header dimensions")

        state = cls(
            out_dim,
            in_dim,
            rank,
            variant="biased" if variant_code == 0 else "unbiased",
            kappa_th=kappa_th,
            storage_bits=None if storage_bits == 0 else storage_bits,
        )
        state.samples_seen = seen
        state.skipped = skipped
        off = head_len
        state.weights = np.frombuffer(blob, "<f8", q, off).copy()
        off += 8 * q
        state.basis_out = (
            np.frombuffer(blob, "<f8", out_dim * q, off).reshape(out_dim, q).copy()
        )
        off += 8 * out_dim * q
        state.basis_in = (
            np.frombuffer(blob, "<f8", in_dim * q, off).reshape(in_dim, q).copy()
        )
        off += 8 * in_dim * q
        seed, st_bytes, inc_bytes, has_u32, uint = struct.unpack_from(rng_fmt, blob, off)
        state.seed = seed
        gen_state = state.rng.bit_generator.state
        gen_state["state"]["state"] = int.from_bytes(st_bytes, "little")
        gen_state["state"]["inc"] = int.from_bytes(inc_bytes, "little")
        gen_state["has_uint32"] = int(has_u32)
        gen_state["uinteger"] = int(uint)
        state.rng.bit_generator.state = gen_state
        return state


class UoroState:
    """Rank-1 unbiased running estimate of a sum of outer products.

    Classic sign-trick estimator kept as a variance baseline: the current
    factors and the incoming pair are combined with one Rademacher sign
    and norm-balancing gains, so cross terms cancel in expectation while
    the retained rank never exceeds one.
    """

    def __init__(self, out_dim: int, in_dim: int, seed: int = 0):
        self.left = np.zeros(out_dim)
        self.right = np.zeros(in_dim)
        self.rng = np.random.default_rng(seed)
        self.samples_seen = 0

    def update(self, out_grad: np.ndarray, in_act: np.ndarray) -> None:
        out_grad = np.asarray(out_grad, dtype=np.float64).reshape(-1)
        in_act = np.asarray(in_act, dtype=np.float64).reshape(-1)
        self.samples_seen += 1
        gn = float(np.linalg.norm(out_grad))
        an = float(np.linalg.norm(in_act))
        if gn == 0.0 or an == 0.0:
            return  # nothing to add
        ln = float(np.linalg.norm(self.left))
        rn = float(np.linalg.norm(self.right))
        if ln == 0.0 or rn == 0.0:
            self.left = out_grad.copy()
            self.right = in_act.copy()
            return
        sign = float(self.rng.integers(0, 2) * 2 - 1)
        ratio = np.sqrt(gn * rn / (ln * an))  # optimal gain ratio rho1/rho2
        rho1 = np.sqrt(ratio)
        rho2 = 1.0 / rho1
        self.left = sign * rho1 * self.left + rho2 * out_grad
        self.right = sign * self.right / rho1 + in_act / rho2

    def materialize(self):
        return self.left[:, None].copy(), self.right[:, None].copy()

    def estimate(self) -> np.ndarray:
        return np.outer(self.left, self.right)
