"""Exhaustive sign-draw enumeration for the unbiased accumulator.

Walks the full product space of sign vectors across every compression
step of a sample sequence and returns the exactly-weighted mean of the
materialized estimates. Sign vectors are enumerated in the s ~ -s
quotient: flipping the whole vector flips the new mixed basis columns on
both sides at once, which leaves the estimate and all downstream updates
unchanged, so fixing the first sign halves each step's branching without
changing the expectation.
"""

import copy

import numpy as np

from lrt.lowrank import LowRankState


class _FixedSigns:
    """Stands in for the rng: hands update() a predetermined sign vector."""

    def __init__(self, signs):
        self.signs = np.asarray(signs, dtype=np.float64)

    def integers(self, lo, hi, size=None):
        assert size == self.signs.size, "unexpected sign-draw width"
        return (self.signs + 1.0) / 2.0


class _Probe:
    """Records how many signs a step would draw, without caring which."""

    def __init__(self):
        self.size = None

    def integers(self, lo, hi, size=None):
        self.size = size
        return np.zeros(size, dtype=np.int64)


def enumerate_mean_estimate(samples, rank, n_out, n_in, kappa_th=float("inf")):
    """Mean of materialize() over all sign draws at every compression step.

    Returns ``(mean_estimate, n_paths)``. Deterministic steps (degenerate
    splits, drops) do not branch. Cost is the full enumeration tree, so
    keep sequences short and rank <= 3.
    """
    total = np.zeros((n_out, n_in))
    n_paths = 0

    def walk(state, idx, weight):
        nonlocal n_paths
        if idx == len(samples):
            total.__iadd__(weight * state.estimate())
            n_paths += 1
            return
        dz, act = samples[idx]
        probe_state = copy.deepcopy(state)
        probe = _Probe()
        probe_state.rng = probe
        probe_state.update(dz, act)
        if probe.size is None:
            walk(probe_state, idx + 1, weight)
            return
        width = probe.size
        # quotient: first sign pinned to +1, each path weighted 2^-(width-1)
        n_branches = 1 << (width - 1)
        for code in range(n_branches):
            signs = np.ones(width)
            for bit in range(width - 1):
                if (code >> bit) & 1:
                    signs[bit + 1] = -1.0
            branch = copy.deepcopy(state)
            branch.rng = _FixedSigns(signs)
            branch.update(dz, act)
            walk(branch, idx + 1, weight / n_branches)

    root = LowRankState(
        n_out, n_in, rank=rank, variant="unbiased", kappa_th=kappa_th, seed=0
    )
    walk(root, 0, 1.0)
    return total, n_paths
