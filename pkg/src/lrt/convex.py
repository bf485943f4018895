"""Linear-regression laboratory for gradient-error convergence bounds.

A fixed Gaussian batch gives a quadratic loss whose curvature extremes
are known exactly, so the gradient-error inequalities that predict
convergence can be logged per step and compared against what actually
happens: noisy dense SGD on one side, the low-rank accumulator on the
other. The batch is intentionally rank-deficient at the reference
dimensions, which exercises the minimum-nonzero-eigenvalue substitution
and the projected weight distance that comes with it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .lowrank import LowRankState, variance_estimate

TRAJECTORY_COLUMNS = ("step", "loss", "lhs", "rhs_c", "rhs_C", "sigma_q_sum")

DESK_DIMS = (256, 50, 64)
FULL_DIMS = (1024, 100, 256)


@dataclass
class ConvexProblem:
    """Least squares on a static batch with known curvature extremes.

    Loss is ``||W X - Y||_F^2 / (2 B)``, so the Hessian acting on any
    weight row is ``X X^T / B`` and the curvature constants live on
    that matrix: ``c`` is the smallest eigenvalue (zero when the batch
    is rank deficient), ``C`` the largest, ``c_tilde`` the smallest
    nonzero one. ``basis`` spans the nonzero-curvature directions;
    distances to the optimum are measured inside that span because the
    complement is invariant under gradient steps and invisible to the
    loss.
    """

    X: np.ndarray
    Y: np.ndarray
    w_star: np.ndarray
    c: float
    C: float
    c_tilde: float
    basis: np.ndarray

    @property
    def n_i(self) -> int:
        return self.X.shape[0]

    @property
    def n_o(self) -> int:
        return self.Y.shape[0]

    @property
    def batch(self) -> int:
        return self.X.shape[1]

    @property
    def n_elements(self) -> int:
        return self.n_o * self.n_i

    def loss(self, w) -> float:
        resid = w @ self.X - self.Y
        return float(np.sum(resid * resid)) / (2.0 * self.batch)

    def gradient(self, w) -> np.ndarray:
        return ((w @ self.X - self.Y) @ self.X.T) / self.batch

    def distance(self, w) -> float:
        """Frobenius distance to the optimum inside the curved span."""
        return float(np.linalg.norm((w - self.w_star) @ self.basis))


def make_problem(seed=0, n_i=DESK_DIMS[0], batch=DESK_DIMS[1],
                 n_o=DESK_DIMS[2]) -> ConvexProblem:
    """Draw a Gaussian regression problem with a closed-form optimum."""
    if min(n_i, batch, n_o) < 1:
        raise ValueError("problem dimensions must be positive")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_i, batch))
    y = rng.normal(size=(n_o, batch))
    w_star = np.linalg.lstsq(x.T, y.T, rcond=None)[0].T

    vals, vecs = np.linalg.eigh(x @ x.T / batch)
    tol = vals[-1] * n_i * np.finfo(float).eps
    keep = vals > tol
    return ConvexProblem(
        X=x,
        Y=y,
        w_star=w_star,
        c=float(vals[0]) if vals[0] > tol else 0.0,
        C=float(vals[-1]),
        c_tilde=float(vals[keep].min()),
        basis=vecs[:, keep],
    )


def _row(step, loss, eps_norm, problem, dist, sigma_q_sum=0.0) -> dict:
    return {
        "step": step,
        "loss": loss,
        "lhs": eps_norm,
        "rhs_c": 0.5 * problem.c_tilde * dist,
        "rhs_C": 0.5 * problem.C * dist,
        "sigma_q_sum": sigma_q_sum,
    }


def _schedule_lr(lr, schedule, problem):
    """Base rate 1/C unless overridden; inv_sqrt decays it by 1/sqrt(t).

    The unscaled inverse-root schedule takes a first step of length one,
    which overshoots whenever the top curvature exceeds two, so the
    base rate is anchored to the curvature and the schedule only
    controls the decay.
    """
    if schedule not in ("constant", "inv_sqrt"):
        raise ValueError(f"unknown learning-rate schedule {schedule!r}")
    return float(lr) if lr is not None else 1.0 / problem.C


def run_noisy_sgd(problem, noise_sigma, steps=50, lr=None,
                  schedule="constant", noise_mode="relative", seed=0,
                  projection_radius=None):
    """Exact batch gradients plus Gaussian noise of controlled size.

    ``relative`` noise is rescaled each step to ``noise_sigma`` times
    the error bound ``(c_tilde / 2) ||w - w*||`` and restricted to the
    curved span, the same subspace low-rank truncation errors occupy;
    values below one satisfy the bound by construction and values above
    one violate it at every step. ``absolute`` noise is plain iid
    Gaussian with fixed per-element sigma. Returns (trajectory rows,
    final weights); each row logs the loss and both sides of the bound
    before that step's update.
    """
    rng = np.random.default_rng(seed)
    lr0 = _schedule_lr(lr, schedule, problem)
    w = np.zeros_like(problem.w_star)
    rows = []
    for t in range(1, int(steps) + 1):
        grad = problem.gradient(w)
        dist = problem.distance(w)
        if noise_sigma == 0.0:
            eps = np.zeros_like(grad)
        else:
            eps = rng.normal(size=grad.shape)
            if noise_mode == "relative":
                eps = (eps @ problem.basis) @ problem.basis.T
                target = noise_sigma * 0.5 * problem.c_tilde * dist
                eps *= target / np.linalg.norm(eps)
            elif noise_mode == "absolute":
                eps *= noise_sigma
            else:
                raise ValueError(f"unknown noise mode {noise_mode!r}")
        rows.append(_row(t, problem.loss(w), float(np.linalg.norm(eps)),
                         problem, dist))
        step_lr = lr0 if schedule == "constant" else lr0 / math.sqrt(t)
        w = w - step_lr * (grad + eps)
        if projection_radius is not None:
            norm = np.linalg.norm(w)
            if norm > projection_radius:
                w *= projection_radius / norm
    return rows, w


def run_lrt_regression(problem, variant="biased", r=10, steps=50, lr=None,
                       schedule="constant", kappa_th=math.inf, seed=0,
                       quant_spec=None):
    """Batch gradient descent where the gradient comes from the accumulator.

    Each step streams the per-column outer products ``resid_i x_i^T``
    through a fresh rank-``r`` accumulator and applies the materialized
    estimate divided by the batch size. The row's ``lhs`` is the
    measured error norm of that estimate; ``sigma_q_sum`` is the
    error-norm prediction reconstructed from the compression log (plus
    the quantization variance offset when a weight grid is in play),
    directly comparable to ``rhs_c`` and ``rhs_C``.
    """
    state = LowRankState(problem.n_o, problem.n_i, rank=r, variant=variant,
                         kappa_th=kappa_th, seed=seed)
    lr0 = _schedule_lr(lr, schedule, problem)
    w = np.zeros_like(problem.w_star)
    batch = problem.batch
    rows = []
    for t in range(1, int(steps) + 1):
        grad = problem.gradient(w)
        state.reset()
        for i in range(batch):
            resid = w @ problem.X[:, i] - problem.Y[:, i]
            if np.any(resid):
                state.update(resid, problem.X[:, i])
        applied = state.estimate() / batch
        eps_norm = float(np.linalg.norm(applied - grad))
        var_sum = variance_estimate(state.sigma_log, variant, 1.0)
        if quant_spec is not None:
            var_sum += quant_noise_term(quant_spec, problem.n_elements)
        rows.append(_row(t, problem.loss(w), eps_norm, problem,
                         problem.distance(w),
                         sigma_q_sum=math.sqrt(var_sum) / batch))
        step_lr = lr0 if schedule == "constant" else lr0 / math.sqrt(t)
        w = w - step_lr * applied
        if quant_spec is not None:
            w = quant_spec.quantize(w)
    return rows, w


def regret(trajectory, problem) -> float:
    """Cumulative excess loss of the iterates over the offline optimum."""
    if not trajectory:
        raise ValueError("trajectory is empty")
    loss_star = problem.loss(problem.w_star)
    return float(sum(row["loss"] for row in trajectory)
                 - len(trajectory) * loss_star)


def quant_noise_term(spec, n_elements) -> float:
    """Variance offset a weight grid adds to the error-norm budget.

    Rounding to an LSB of ``delta`` behaves like uniform noise of
    variance ``delta^2 / 12`` per element. Accepts a quantizer spec or
    a full profile (the weight spec is used).
    """
    spec = getattr(spec, "weights", spec)
    return n_elements * spec.delta ** 2 / 12.0


def write_trajectory(rows, path):
    """CSV dump of a trajectory in the fixed column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in TRAJECTORY_COLUMNS})
