"""Quantized network layers that stream per-sample gradient pairs.

Forward arithmetic follows the fixed-point signal flow: every tensor
class has its own uniform quantizer, and each quantizer contributes a
straight-through mask to the backward pass. Weight gradients are never
formed directly in normal operation; layers cache (dz, a) pairs and feed
them to a low-rank accumulator, or apply them immediately in direct-SGD
mode. All weight mutation is routed through the layer so NVM write
counters stay accurate.
"""

from __future__ import annotations

import math

import numpy as np

from .lowrank import LowRankState
from .quant import QuantProfile, float_profile


def relu(x):
    return np.maximum(x, 0.0)


def nearest_pow2(x: float) -> float:
    """Closest power of two to a positive scale, rounding in log space."""
    if x <= 0.0 or not math.isfinite(x):
        raise ValueError(f"need a positive finite scale, got {x}")
    return float(2.0 ** round(math.log2(x)))


def im2col(x, k_h, k_w, stride=1, pad=0):
    """Unfold an (h, w, c) map into one row per output pixel.

    Row i holds the receptive field of output pixel i, flattened
    row-major over (k_h, k_w, c). Zero padding.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    h_out = (h + 2 * pad - k_h) // stride + 1
    w_out = (w + 2 * pad - k_w) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"kernel {k_h}x{k_w} does not fit {h}x{w} input")
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((h_out * w_out, k_h * k_w * c))
    col = 0
    for u in range(k_h):
        for v in range(k_w):
            patch = xp[u : u + h_out * stride : stride,
                       v : v + w_out * stride : stride, :]
            cols[:, col : col + c] = patch.reshape(h_out * w_out, c)
            col += c
    return cols


def col2im(cols, shape, k_h, k_w, stride=1, pad=0):
    """Scatter-add transpose of :func:`im2col` back onto the input grid."""
    h, w, c = shape
    h_out = (h + 2 * pad - k_h) // stride + 1
    w_out = (w + 2 * pad - k_w) // stride + 1
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c))
    col = 0
    for u in range(k_h):
        for v in range(k_w):
            xp[u : u + h_out * stride : stride,
               v : v + w_out * stride : stride, :] += cols[:, col : col + c].reshape(
                h_out, w_out, c
            )
            col += c
    return xp[pad : pad + h, pad : pad + w, :]


class WriteCounter:
    """NVM write bookkeeping for one weight tensor.

    ``events`` counts whole-tensor programming passes and ``counts``
    accumulates them per cell. ``contributions`` tracks the pessimistic
    per-pixel alternative for convolutions: the number of partial-sum
    writes the tensor would absorb if gradient accumulation happened in
    the weight memory itself instead of working memory.
    """

    def __init__(self, shape):
        self.counts = np.zeros(shape, dtype=np.int64)
        self.events = 0
        self.contributions = 0

    def record_event(self, contributions=1):
        self.counts += 1
        self.events += 1
        self.contributions += int(contributions)

    @property
    def max_per_cell(self) -> int:
        return int(self.counts.max()) if self.counts.size else 0


class MaxNormState:
    """Divides gradient tensors by a debiased moving peak magnitude.

    State is two scalars. The divisor is the larger of the current peak
    and the debiased moving average of past peaks, so quiet stretches do
    not amplify noise while spikes are still normalized to unit scale.
    """

    def __init__(self, decay=0.999, floor=1e-4):
        self.decay = float(decay)
        self.floor = float(floor)
        self.count = 0
        self.moving = float(floor)

    def apply(self, g):
        g = np.asarray(g, dtype=np.float64)
        self.count += 1
        peak = float(np.max(np.abs(g), initial=0.0)) + self.floor
        self.moving = self.decay * self.moving + (1.0 - self.decay) * peak
        debiased = self.moving / (1.0 - self.decay**self.count)
        return g / max(peak, debiased)


class StreamingNorm:
    """Per-channel normalization from exponentially weighted moments.

    Tracks the running mean and running mean-square of per-sample
    channel statistics. The decay 1 - 1/B makes the newest sample carry
    the same 1/B weight it would in a true batch of size B, while every
    sample (not just late ones) sees similarly smooth estimates. Both
    accumulators are debiased by 1 - eta^k before use. ``mode="average"``
    replaces the EMA with a plain running average, which reproduces
    two-pass whole-batch statistics exactly.
    """

    def __init__(self, channels, batch=100, mode="ema", eps=1e-5):
        if mode not in ("ema", "average"):
            raise ValueError(f"unknown streaming-norm mode {mode!r}")
        self.channels = int(channels)
        self.mode = mode
        self.eta = 0.0 if batch <= 1 else 1.0 - 1.0 / batch
        self.eps = float(eps)
        self.mu_s = np.zeros(self.channels)
        self.sq_s = np.zeros(self.channels)
        self.count = 0
        self.gamma = np.ones(self.channels)
        self.beta = np.zeros(self.channels)
        self._inv = None
        self._xhat = None

    def stats(self):
        """Current debiased (mean, variance) estimates."""
        if self.count == 0:
            raise ValueError("no samples seen yet")
        if self.mode == "ema":
            corr = 1.0 - self.eta**self.count
        else:
            corr = float(self.count)
        mu = self.mu_s / corr
        var = np.maximum(self.sq_s / corr - mu * mu, 0.0)
        return mu, var

    def apply(self, x):
        flat = np.asarray(x, dtype=np.float64).reshape(-1, self.channels)
        mu_i = flat.mean(axis=0)
        sq_i = np.mean(flat * flat, axis=0)
        self.count += 1
        if self.mode == "ema":
            self.mu_s = self.eta * self.mu_s + (1.0 - self.eta) * mu_i
            self.sq_s = self.eta * self.sq_s + (1.0 - self.eta) * sq_i
        else:
            self.mu_s = self.mu_s + mu_i
            self.sq_s = self.sq_s + sq_i
        mu_b, var_b = self.stats()
        self._inv = 1.0 / np.sqrt(var_b + self.eps)
        self._xhat = (flat - mu_b) * self._inv
        out = self.gamma * self._xhat + self.beta
        return out.reshape(np.shape(x))

    def backward(self, delta):
        """Input gradient; the streaming statistics are treated as constants."""
        flat = np.asarray(delta, dtype=np.float64).reshape(-1, self.channels)
        self._gamma_grad = np.sum(flat * self._xhat, axis=0)
        self._beta_grad = flat.sum(axis=0)
        return (flat * (self.gamma * self._inv)).reshape(np.shape(delta))

    def affine_step(self, lr, grad_quant):
        self.gamma = self.gamma - lr * grad_quant.quantize(self._gamma_grad)
        self.beta = self.beta - lr * grad_quant.quantize(self._beta_grad)

    def aux_bytes(self) -> int:
        # four per-channel vectors held in working memory at 32 bits
        return 4 * self.channels * 4


class MaxPool2:
    """2x2 max pooling, stride 2. Odd trailing rows/columns are dropped."""

    kind = "pool"
    trainable = False

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        h, w, c = x.shape
        ho, wo = h // 2, w // 2
        patch = (
            x[: 2 * ho, : 2 * wo]
            .reshape(ho, 2, wo, 2, c)
            .transpose(0, 2, 4, 1, 3)
            .reshape(ho, wo, c, 4)
        )
        idx = patch.argmax(axis=3)
        self._cache = (x.shape, idx)
        return np.take_along_axis(patch, idx[..., None], axis=3)[..., 0]

    def backward(self, delta):
        shape, idx = self._cache
        ho, wo, c = delta.shape
        scattered = np.zeros((ho, wo, c, 4))
        np.put_along_axis(scattered, idx[..., None],
                          np.asarray(delta, dtype=np.float64)[..., None], axis=3)
        full = np.zeros(shape)
        full[: 2 * ho, : 2 * wo] = (
            scattered.reshape(ho, wo, c, 2, 2)
            .transpose(0, 3, 1, 4, 2)
            .reshape(2 * ho, 2 * wo, c)
        )
        return full


class Flatten:
    """Row-major reshape of a feature map to a vector."""

    kind = "reshape"
    trainable = False

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._shape = x.shape
        return x.reshape(-1)

    def backward(self, delta):
        return np.asarray(delta, dtype=np.float64).reshape(self._shape)


class _TrainableLayer:
    """Shared plumbing for the two weight-bearing layer types."""

    trainable = True

    def _init_common(self, fan_in, n_out, profile, rank, variant, kappa_th,
                     batch, activation, batch_norm, max_norm, seed):
        self.profile = profile if profile is not None else float_profile()
        if not isinstance(self.profile, QuantProfile):
            raise TypeError("profile must be a QuantProfile")
        self.alpha = nearest_pow2(math.sqrt(2.0 / fan_in))
        self.weights = self._init_weights(self.grad_dims, fan_in, seed)
        self.bias = np.zeros(n_out)
        self.batch = int(batch)
        self.rank = int(rank)
        self.lrt = None
        if rank:
            self.lrt = LowRankState(
                self.grad_dims[0], self.grad_dims[1], rank=rank,
                variant=variant, kappa_th=kappa_th,
                storage_bits=16 if self.profile.enabled else None,
                seed=seed + 1,
            )
        self.norm = (
            StreamingNorm(n_out, batch=batch) if batch_norm else None
        )
        self.max_norm = MaxNormState() if max_norm else None
        self.activation = bool(activation)
        self.writes = WriteCounter(self.weights.shape)
        self.pending = 0
        self._cache = None
        self._dz = None

    def _init_weights(self, shape, fan_in, seed):
        rng = np.random.default_rng(seed)
        raw = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape) / self.alpha
        return self.profile.weights.quantize(raw)

    def _mask_chain(self, delta, z_pre, h, act):
        """STE masks and activation derivative, output side inward."""
        d = np.asarray(delta, dtype=np.float64)
        if self.activation:
            d = self.profile.acts.ste_backward(d, act)
            d = d * (h > 0.0)
        if self.norm is not None:
            d = self.norm.backward(d)
        d = self.profile.biases.ste_backward(d, z_pre)
        if self.max_norm is not None:
            d = self.max_norm.apply(d)
        return self.profile.grads.quantize(d)

    def bias_step(self, lr):
        """Per-sample update of the high-endurance parameters."""
        self.bias = self.profile.biases.quantize(self.bias - lr * self._bias_grad())
        if self.norm is not None:
            self.norm.affine_step(lr, self.profile.grads)

    def try_apply(self, base_lr, rho_min=0.01):
        """Attempt to commit the accumulated low-rank update.

        Returns True when the snapped delta touched at least ``rho_min``
        of the cells and was written; otherwise the accumulator keeps
        growing and the next attempt scales the step by the square root
        of the effective batch multiple.
        """
        multiple = self.pending / self.batch
        eta = base_lr * math.sqrt(multiple)
        left, right = self.lrt.materialize()
        dw = self.profile.weights.snap(eta * self.alpha * (left @ right.T))
        density = np.count_nonzero(dw) / dw.size
        if density < rho_min:
            return False
        self.weights = self.profile.weights.quantize(self.weights - dw)
        self.writes.record_event()
        self.lrt.reset()
        self.pending = 0
        return True

    def weight_gradient(self):
        """Accumulated gradient estimate in stored-weight coordinates."""
        return self.alpha * self.lrt.estimate()

    def nvm_bytes(self) -> float:
        bits = self.profile.weights.bits or 64
        return self.weights.size * bits / 8.0

    def aux_bytes(self) -> dict:
        q = self.rank + 1
        n_o, n_i = self.grad_dims
        factor_bytes = 8
        if self.lrt is not None and self.lrt.storage_bits is not None:
            factor_bytes = self.lrt.storage_bits // 8
        out = {
            "lrt": q * (n_o + n_i) * factor_bytes if self.lrt is not None else 0,
            "bias": self.bias.size * ((self.profile.biases.bits or 64) // 8),
            "norm": self.norm.aux_bytes() if self.norm is not None else 0,
            "max_norm": 16 if self.max_norm is not None else 0,
        }
        return out


class DenseLayer(_TrainableLayer):
    """Fully-connected layer: a_out = Qa(ReLU(norm(Qb(alpha*W*a + b)))).

    The ReLU and activation quantizer are dropped when ``activation``
    is False (logit heads). ``rank=0`` disables the accumulator for
    modes that never touch the weights.
    """

    kind = "dense"

    def __init__(self, n_in, n_out, profile=None, rank=0, variant="unbiased",
                 kappa_th=100.0, batch=100, activation=True,
                 batch_norm=False, max_norm=False, seed=0):
        self.n_in, self.n_out = int(n_in), int(n_out)
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("layer dimensions must be positive")
        self.grad_dims = (self.n_out, self.n_in)
        self._init_common(self.n_in, n_out, profile, rank, variant, kappa_th,
                          batch, activation, batch_norm, max_norm, seed)

    def forward(self, a_in):
        a_in = np.asarray(a_in, dtype=np.float64)
        if a_in.shape != (self.n_in,):
            raise ValueError(f"expected input shape ({self.n_in},), got {a_in.shape}")
        z_pre = self.alpha * (self.weights @ a_in) + self.bias
        z = self.profile.biases.quantize(z_pre)
        h = self.norm.apply(z) if self.norm is not None else z
        act = relu(h) if self.activation else h
        a_out = self.profile.acts.quantize(act) if self.activation else act
        self._cache = (a_in, z_pre, h, act)
        return a_out

    def backward(self, delta_out):
        if self._cache is None:
            raise RuntimeError("backward before forward")
        a_in, z_pre, h, act = self._cache
        self._dz = self._mask_chain(delta_out, z_pre, h, act)
        return self.alpha * (self.weights.T @ self._dz)

    def accumulate(self):
        if np.any(self._dz):
            self.lrt.update(self._dz, self._cache[0])
        self.pending += 1

    def _bias_grad(self):
        return self._dz

    def sample_gradient(self):
        """Exact gradient of this sample in stored-weight coordinates."""
        return self.alpha * np.outer(self._dz, self._cache[0])

    def sgd_step(self, lr):
        dw = self.profile.weights.snap(lr * self.sample_gradient())
        self.weights = self.profile.weights.quantize(self.weights - dw)
        self.writes.record_event()


class ConvLayer(_TrainableLayer):
    """3x3-style convolution over (h, w, c) maps via im2col.

    The kernel is stored flattened as (c_out, k_h*k_w*c_in), the same
    matrix the accumulator sees: every output pixel contributes one
    (dz, a) pair, so a single sample produces h_out*w_out accumulator
    pushes against the shared kernel.
    """

    kind = "conv"

    def __init__(self, c_in, c_out, k=3, stride=1, pad=1, profile=None,
                 rank=0, variant="unbiased", kappa_th=100.0, batch=10,
                 activation=True, batch_norm=False, max_norm=False, seed=0):
        self.c_in, self.c_out = int(c_in), int(c_out)
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError("channel counts must be positive")
        self.k_h = self.k_w = int(k)
        self.stride, self.pad = int(stride), int(pad)
        fan_in = self.k_h * self.k_w * self.c_in
        self.grad_dims = (self.c_out, fan_in)
        self._init_common(fan_in, self.c_out, profile, rank, variant,
                          kappa_th, batch, activation, batch_norm,
                          max_norm, seed)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.c_in:
            raise ValueError(f"expected (h, w, {self.c_in}) input, got {x.shape}")
        cols = im2col(x, self.k_h, self.k_w, self.stride, self.pad)
        h_out = (x.shape[0] + 2 * self.pad - self.k_h) // self.stride + 1
        w_out = (x.shape[1] + 2 * self.pad - self.k_w) // self.stride + 1
        z_pre = self.alpha * (cols @ self.weights.T) + self.bias
        z = self.profile.biases.quantize(z_pre)
        h = self.norm.apply(z) if self.norm is not None else z
        act = relu(h) if self.activation else h
        a_out = self.profile.acts.quantize(act) if self.activation else act
        self._cache = (cols, z_pre, h, act, x.shape, (h_out, w_out))
        return a_out.reshape(h_out, w_out, self.c_out)

    def backward(self, delta_out):
        if self._cache is None:
            raise RuntimeError("backward before forward")
        cols, z_pre, h, act, x_shape, _ = self._cache
        d = np.asarray(delta_out, dtype=np.float64).reshape(-1, self.c_out)
        self._dz = self._mask_chain(d, z_pre, h, act)
        d_cols = self._dz @ self.weights
        return self.alpha * col2im(
            d_cols, x_shape, self.k_h, self.k_w, self.stride, self.pad
        )

    def accumulate(self):
        cols = self._cache[0]
        # A pixel whose delta row or input patch is all zero adds a zero
        # outer product; dropping it leaves the accumulated sum intact.
        live = (self._dz != 0.0).any(axis=1) & (cols != 0.0).any(axis=1)
        for j in np.flatnonzero(live):
            self.lrt.update(self._dz[j], cols[j])
        self.pending += 1

    def _bias_grad(self):
        return self._dz.sum(axis=0)

    def sample_gradient(self):
        return self.alpha * (self._dz.T @ self._cache[0])

    def sgd_step(self, lr):
        dw = self.profile.weights.snap(lr * self.sample_gradient())
        self.weights = self.profile.weights.quantize(self.weights - dw)
        self.writes.record_event(contributions=self._dz.shape[0])
