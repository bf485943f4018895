"""Online training loop with write accounting and weight-drift injection.

Samples arrive one at a time: the network predicts, the label is
revealed, and the update policy decides what may touch the weight
memory. Every committed weight write goes through the per-layer
counters, so endurance comparisons between dense per-sample updates
and batched low-rank applies fall out of the same run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import ConvLayer, DenseLayer, Flatten, MaxPool2
from .quant import QuantProfile, default_profile, float_profile

MODES = ("inference", "bias_only", "sgd", "lrt")
SCHEMES = ("inference", "bias_only", "sgd", "lrt", "lrt_maxnorm")


def softmax(logits):
    shifted = np.asarray(logits, dtype=np.float64) - np.max(logits)
    e = np.exp(shifted)
    return e / e.sum()


@dataclass
class UpdatePolicy:
    """What a training step is allowed to write, and how hard.

    ``mode`` picks the family: pure inference, bias-only adaptation,
    dense per-sample SGD, or batched low-rank accumulation. ``bias_lr``
    defaults to ``base_lr``; ``rho_min`` is the minimum fraction of
    weight cells a snapped low-rank delta must move before it is
    committed, otherwise the apply is deferred.
    """

    mode: str = "lrt"
    base_lr: float = 0.01
    bias_lr: float | None = None
    rho_min: float = 0.01

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown update mode {self.mode!r}")
        if self.bias_lr is None:
            self.bias_lr = self.base_lr


def policy_for_scheme(scheme, base_lr=0.01, rho_min=0.01):
    """Map a named training scheme to its update policy."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    mode = "lrt" if scheme == "lrt_maxnorm" else scheme
    return UpdatePolicy(mode=mode, base_lr=base_lr, rho_min=rho_min)


@dataclass
class DriftModel:
    """Retention noise injected into stored weights every ``period`` steps.

    ``analog`` adds Gaussian level noise with per-injection sigma
    ``scale * sqrt(period / horizon)``, then re-quantizes, so a run of
    ``horizon`` steps accumulates the full ``scale`` variance budget.
    ``digital`` flips each of the ``bits`` cells backing a weight with
    probability ``scale * period / horizon`` per injection. Drift is
    degradation, not programming; it is never counted as a write.
    """

    kind: str = "none"
    scale: float = 0.0
    period: int = 10
    horizon: float = 1e6

    def __post_init__(self):
        if self.kind not in ("none", "analog", "digital"):
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if self.period < 1:
            raise ValueError("drift period must be at least 1")

    @property
    def per_injection(self) -> float:
        """Noise scale of a single injection (sigma or bit-flip rate)."""
        if self.kind == "analog":
            return self.scale * math.sqrt(self.period / self.horizon)
        if self.kind == "digital":
            return self.scale * self.period / self.horizon
        return 0.0

    def inject(self, layers, rng):
        if self.kind == "none":
            return
        for lay in layers:
            spec = lay.profile.weights
            if self.kind == "analog":
                noisy = lay.weights + rng.normal(
                    0.0, self.per_injection, lay.weights.shape
                )
                lay.weights = spec.quantize(noisy)
            else:
                if not spec.bits:
                    raise ValueError("digital drift needs quantized weights")
                codes = np.rint((lay.weights - spec.lo) / spec.delta)
                codes = codes.astype(np.int64)
                flips = rng.random(codes.shape + (spec.bits,)) < self.per_injection
                if flips.any():
                    weights = np.int64(1) << np.arange(spec.bits, dtype=np.int64)
                    codes ^= (flips * weights).sum(axis=-1)
                lay.weights = spec.lo + codes * spec.delta


class Network:
    """An ordered layer stack with input activation quantization."""

    def __init__(self, layers, profile=None):
        self.layers = list(layers)
        self.profile = profile if profile is not None else float_profile()
        if not isinstance(self.profile, QuantProfile):
            raise TypeError("profile must be a QuantProfile")

    @property
    def trainable(self):
        return [lay for lay in self.layers if getattr(lay, "trainable", False)]

    def forward(self, x):
        h = self.profile.acts.quantize(np.asarray(x, dtype=np.float64))
        for lay in self.layers:
            h = lay.forward(h)
        return h

    def backward(self, delta):
        for lay in reversed(self.layers):
            delta = lay.backward(delta)
        return delta


class Trainer:
    """Drives one network over an online stream under an update policy.

    Prediction happens before learning, so the reported accuracy is the
    online test-then-train kind: an exponential moving average with the
    usual warm-up debiasing.
    """

    def __init__(self, net, policy=None, drift=None, seed=0, ema_decay=0.999):
        self.net = net
        self.policy = policy if policy is not None else UpdatePolicy()
        self.drift = drift if drift is not None else DriftModel()
        self.rng = np.random.default_rng(seed)
        self.ema_decay = float(ema_decay)
        self._acc_raw = 0.0
        self.steps = 0

    @property
    def accuracy(self) -> float:
        if self.steps == 0:
            return 0.0
        return self._acc_raw / (1.0 - self.ema_decay ** self.steps)

    def step(self, x, label) -> dict:
        label = int(label)
        logits = self.net.forward(x)
        probs = softmax(logits)
        loss = -math.log(max(probs[label], 1e-300))
        correct = int(np.argmax(logits)) == label
        self.steps += 1
        self._acc_raw *= self.ema_decay
        self._acc_raw += (1.0 - self.ema_decay) * float(correct)

        mode = self.policy.mode
        if mode != "inference":
            delta = probs.copy()
            delta[label] -= 1.0
            self.net.backward(delta)
            for lay in self.net.trainable:
                lay.bias_step(self.policy.bias_lr)
                if mode == "sgd":
                    lay.sgd_step(self.policy.base_lr)
                elif mode == "lrt":
                    lay.accumulate()
                    if lay.pending >= lay.batch and lay.pending % lay.batch == 0:
                        lay.try_apply(self.policy.base_lr, self.policy.rho_min)

        if self.drift.kind != "none" and self.steps % self.drift.period == 0:
            self.drift.inject(self.net.trainable, self.rng)

        return {
            "step": self.steps,
            "loss": loss,
            "correct": int(correct),
            "accuracy": self.accuracy,
            "write_events": sum(l.writes.events for l in self.net.trainable),
            "max_writes": max(
                (l.writes.max_per_cell for l in self.net.trainable), default=0
            ),
        }

    def run(self, stream, n_steps) -> list:
        records = []
        for _ in range(int(n_steps)):
            x, label = next(stream)
            records.append(self.step(x, label))
        return records


def memory_report(net) -> dict:
    """Working-memory footprint next to the weight memory it serves.

    Auxiliary state is everything training keeps outside the weight
    array: accumulator factors, biases, norm statistics, the max-norm
    scalar pair. The point of the comparison is that all of it fits in
    a fraction of the weight storage itself.
    """
    rows = []
    nvm_total = 0.0
    aux_total = 0.0
    for i, lay in enumerate(net.trainable):
        aux = lay.aux_bytes()
        nvm = lay.nvm_bytes()
        rows.append({"index": i, "kind": lay.kind, "nvm": nvm, **aux})
        nvm_total += nvm
        aux_total += sum(aux.values())
    return {"layers": rows, "nvm_bytes": nvm_total, "aux_bytes": aux_total}


def build_network(arch="cnn", profile=None, scheme="lrt", rank=4,
                  kappa_th=100.0, variant="unbiased", batch_norm=True,
                  max_norm=None, conv_batch=10, dense_batch=100,
                  conv_channels=(8, 8, 16, 16), fc_width=64,
                  image_hw=28, classes=10, seed=0):
    """Assemble one of the two reference architectures.

    ``cnn`` is four 3x3 convolutions with pooling after the second and
    fourth, then two dense layers; ``mlp`` flattens the image straight
    into the dense pair. The scheme decides the wiring: weight-updating
    schemes get a rank-``rank`` accumulator per weight tensor and the
    max-norm variant enables gradient normalization, everything else
    runs rank 0. Pass ``max_norm`` to decouple gradient normalization
    from the scheme name, and a ``{"conv": ..., "dense": ...}`` mapping
    as ``variant`` to mix estimators across layer kinds.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if profile is None:
        profile = default_profile()
    if max_norm is None:
        max_norm = scheme == "lrt_maxnorm"
    if isinstance(variant, str):
        variants = {"conv": variant, "dense": variant}
    else:
        variants = dict(variant)
        extra = set(variants) - {"conv", "dense"}
        if extra:
            raise ValueError(f"unknown layer kinds {sorted(extra)}")
        variants.setdefault("conv", "unbiased")
        variants.setdefault("dense", "unbiased")
    lrt_rank = rank if scheme in ("lrt", "lrt_maxnorm") else 0
    seeds = [int(s.generate_state(1)[0])
             for s in np.random.SeedSequence(seed).spawn(8)]
    common = dict(profile=profile, rank=lrt_rank, kappa_th=kappa_th,
                  max_norm=max_norm)
    conv_kw = dict(common, variant=variants["conv"])
    dense_kw = dict(common, variant=variants["dense"])

    if arch == "cnn":
        c1, c2, c3, c4 = conv_channels
        flat = (image_hw // 4) ** 2 * c4
        layers = [
            ConvLayer(1, c1, batch=conv_batch, batch_norm=batch_norm,
                      seed=seeds[0], **conv_kw),
            ConvLayer(c1, c2, batch=conv_batch, batch_norm=batch_norm,
                      seed=seeds[1], **conv_kw),
            MaxPool2(),
            ConvLayer(c2, c3, batch=conv_batch, batch_norm=batch_norm,
                      seed=seeds[2], **conv_kw),
            ConvLayer(c3, c4, batch=conv_batch, batch_norm=batch_norm,
                      seed=seeds[3], **conv_kw),
            MaxPool2(),
            Flatten(),
            DenseLayer(flat, fc_width, batch=dense_batch,
                       batch_norm=batch_norm, seed=seeds[4], **dense_kw),
            DenseLayer(fc_width, classes, batch=dense_batch,
                       activation=False, seed=seeds[5], **dense_kw),
        ]
    elif arch == "mlp":
        layers = [
            Flatten(),
            DenseLayer(image_hw * image_hw, fc_width, batch=dense_batch,
                       batch_norm=batch_norm, seed=seeds[0], **dense_kw),
            DenseLayer(fc_width, classes, batch=dense_batch,
                       activation=False, seed=seeds[1], **dense_kw),
        ]
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return Network(layers, profile)
