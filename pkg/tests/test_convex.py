"""Convergence laboratory: curvature data, noise bounds, regret, sigma logs."""

import csv
import math

import numpy as np
import pytest

from lrt import default_profile
from lrt.convex import (
    TRAJECTORY_COLUMNS,
    make_problem,
    quant_noise_term,
    regret,
    run_lrt_regression,
    run_noisy_sgd,
    write_trajectory,
)
from lrt.lowrank import LowRankState, variance_estimate
from lrt.quant import QuantSpec


@pytest.fixture(scope="module")
def desk():
    return make_problem(seed=0)


@pytest.fixture(scope="module")
def tiny():
    return make_problem(seed=2, n_i=32, batch=8, n_o=16)


class TestMakeProblem:
    def test_rank_deficient_batch_has_zero_min_curvature(self, desk):
        assert desk.c == 0.0
        assert desk.c_tilde > 0.0
        assert desk.C > desk.c_tilde
        assert desk.basis.shape == (256, 50)

    def test_square_batch_is_full_rank(self):
        p = make_problem(seed=1, n_i=8, batch=8, n_o=4)
        assert p.c > 0.0
        assert p.c == pytest.approx(p.c_tilde)
        assert p.basis.shape == (8, 8)

    def test_optimum_has_vanishing_gradient(self, desk):
        assert np.abs(desk.gradient(desk.w_star)).max() <= 1e-8

    def test_optimum_interpolates(self, desk):
        assert desk.loss(desk.w_star) <= 1e-12

    def test_gradient_matches_finite_differences(self, tiny):
        rng = np.random.default_rng(5)
        w = rng.normal(size=tiny.w_star.shape)
        g = tiny.gradient(w)
        h = 1e-6
        for idx in ((0, 0), (3, 7), (15, 31)):
            wp, wm = w.copy(), w.copy()
            wp[idx] += h
            wm[idx] -= h
            fd = (tiny.loss(wp) - tiny.loss(wm)) / (2 * h)
            assert g[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_flat_directions_are_invisible(self, desk):
        rng = np.random.default_rng(7)
        w = rng.normal(size=desk.w_star.shape)
        raw = rng.normal(size=w.shape)
        flat = raw - (raw @ desk.basis) @ desk.basis.T
        shifted = w + 10.0 * flat
        assert desk.distance(shifted) == pytest.approx(desk.distance(w))
        assert desk.loss(shifted) == pytest.approx(desk.loss(w), rel=1e-9)

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            make_problem(seed=0, n_i=0)


class TestNoisySgd:
    def test_noise_free_descent_is_monotone(self, desk):
        rows, w = run_noisy_sgd(desk, 0.0)
        losses = [r["loss"] for r in rows]
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert desk.loss(w) <= 1e-8 * losses[0]
        assert all(r["lhs"] == 0.0 for r in rows)

    def test_compliant_noise_converges(self, desk):
        rows, w = run_noisy_sgd(desk, 0.5, seed=3)
        assert all(r["lhs"] < r["rhs_c"] for r in rows)
        assert desk.loss(w) <= 0.2 * rows[0]["loss"]

    def test_violating_noise_stalls(self, desk):
        rows, w = run_noisy_sgd(desk, 10.0, seed=3)
        assert all(r["lhs"] > r["rhs_c"] for r in rows)
        assert desk.loss(w) >= 0.5 * rows[0]["loss"]

    def test_bound_columns_share_the_distance(self, desk):
        rows, _ = run_noisy_sgd(desk, 0.5, steps=5, seed=3)
        for row in rows:
            assert row["rhs_C"] == pytest.approx(
                row["rhs_c"] * desk.C / desk.c_tilde
            )

    def test_absolute_noise_has_steady_magnitude(self, desk):
        rows, _ = run_noisy_sgd(desk, 0.05, noise_mode="absolute", seed=3)
        norms = [r["lhs"] for r in rows]
        assert max(norms) / min(norms) < 1.2
        rel_rows, _ = run_noisy_sgd(desk, 0.5, seed=3)
        assert rel_rows[-1]["lhs"] < 1e-3 * rel_rows[0]["lhs"]

    def test_rows_carry_the_csv_columns(self, desk):
        rows, _ = run_noisy_sgd(desk, 0.1, steps=3, seed=0)
        assert set(rows[0]) == set(TRAJECTORY_COLUMNS)
        assert [r["step"] for r in rows] == [1, 2, 3]

    def test_rejects_unknown_modes(self, desk):
        with pytest.raises(ValueError):
            run_noisy_sgd(desk, 0.1, noise_mode="pink")
        with pytest.raises(ValueError):
            run_noisy_sgd(desk, 0.1, schedule="cosine")

    def test_projection_caps_weight_norm(self, desk):
        _, w = run_noisy_sgd(desk, 10.0, seed=3, projection_radius=1.0)
        assert np.linalg.norm(w) <= 1.0 + 1e-12


class TestRegret:
    def test_zero_at_the_optimum(self, desk):
        rows = [{"loss": desk.loss(desk.w_star)}] * 5
        assert regret(rows, desk) == pytest.approx(0.0, abs=1e-10)

    def test_single_step_is_excess_loss(self, desk):
        w0 = np.zeros_like(desk.w_star)
        rows = [{"loss": desk.loss(w0)}]
        expect = desk.loss(w0) - desk.loss(desk.w_star)
        assert regret(rows, desk) == pytest.approx(expect)

    def test_nonnegative_on_real_runs(self, desk):
        rows, _ = run_noisy_sgd(desk, 1.0, steps=20, seed=4)
        assert regret(rows, desk) >= 0.0

    def test_average_regret_decreases_with_inv_sqrt_rate(self, desk):
        rows, _ = run_noisy_sgd(desk, 0.5, schedule="inv_sqrt", seed=3)
        averages = [regret(rows[:t], desk) / t for t in (10, 20, 30, 40, 50)]
        assert all(a > b for a, b in zip(averages, averages[1:]))

    def test_rejects_empty_trajectory(self, desk):
        with pytest.raises(ValueError):
            regret([], desk)


class TestLrtRegression:
    def test_full_rank_accumulator_matches_exact_descent(self, tiny):
        rows_lrt, w_lrt = run_lrt_regression(tiny, "biased", r=8, steps=50)
        rows_ref, w_ref = run_noisy_sgd(tiny, 0.0, steps=50)
        for a, b in zip(rows_lrt, rows_ref):
            assert a["loss"] == pytest.approx(b["loss"], abs=1e-8)
            assert a["lhs"] <= 1e-8
            assert a["sigma_q_sum"] == 0.0
        np.testing.assert_allclose(w_lrt, w_ref, atol=1e-8)

    def test_biased_bound_sides_shrink_together(self, desk):
        rows, w = run_lrt_regression(desk, "biased", r=10, steps=12, seed=1)
        assert desk.loss(w) < rows[0]["loss"]
        early = rows[:4]
        late = rows[-4:]
        for key in ("sigma_q_sum", "rhs_c", "loss"):
            assert (np.mean([r[key] for r in late])
                    < np.mean([r[key] for r in early]))

    def test_unbiased_sigma_log_reconstruction(self):
        prob = make_problem(seed=4, n_i=64, batch=12, n_o=24)
        r, steps, seed = 6, 6, 11
        rows, _ = run_lrt_regression(prob, "unbiased", r=r, steps=steps,
                                     seed=seed)

        state = LowRankState(prob.n_o, prob.n_i, rank=r, variant="unbiased",
                             kappa_th=math.inf, seed=seed)
        lr = 1.0 / prob.C
        w = np.zeros_like(prob.w_star)
        for t in range(steps):
            state.reset()
            for i in range(prob.batch):
                resid = w @ prob.X[:, i] - prob.Y[:, i]
                if np.any(resid):
                    state.update(resid, prob.X[:, i])
            expect = math.sqrt(
                variance_estimate(state.sigma_log, "unbiased", 1)
            ) / prob.batch
            assert rows[t]["sigma_q_sum"] == pytest.approx(expect, abs=1e-10)
            w = w - lr * (state.estimate() / prob.batch)

    def test_quantized_mode_floors_the_sigma_column(self, tiny):
        spec = QuantSpec(8, -1.0, 1.0)
        rows, w = run_lrt_regression(tiny, "biased", r=8, steps=4,
                                     quant_spec=spec)
        floor = math.sqrt(quant_noise_term(spec, tiny.n_elements)) / tiny.batch
        for row in rows:
            assert row["sigma_q_sum"] >= floor - 1e-15
        assert rows[0]["sigma_q_sum"] == pytest.approx(floor)
        np.testing.assert_array_equal(w, spec.quantize(w))

    def test_rejects_unknown_schedule(self, tiny):
        with pytest.raises(ValueError):
            run_lrt_regression(tiny, "biased", r=4, schedule="cosine")


class TestQuantNoiseTerm:
    def test_identity_grid_contributes_nothing(self):
        assert quant_noise_term(QuantSpec.identity(), 1000) == 0.0

    def test_eight_bit_worked_value(self):
        spec = QuantSpec(8, -1.0, 1.0)
        per_element = quant_noise_term(spec, 1)
        assert per_element == pytest.approx((2.0 / 256) ** 2 / 12.0)
        assert per_element == pytest.approx(5.086e-6, rel=1e-3)

    def test_linear_in_element_count(self):
        spec = QuantSpec(8, -1.0, 1.0)
        assert quant_noise_term(spec, 100) == pytest.approx(
            100 * quant_noise_term(spec, 1)
        )

    def test_accepts_a_profile(self):
        prof = default_profile()
        assert quant_noise_term(prof, 10) == quant_noise_term(prof.weights, 10)


class TestTrajectoryCsv:
    def test_round_trip(self, tmp_path, desk):
        rows, _ = run_noisy_sgd(desk, 0.1, steps=4, seed=0)
        path = tmp_path / "traj.csv"
        write_trajectory(rows, path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            assert reader.fieldnames == list(TRAJECTORY_COLUMNS)
            back = list(reader)
        assert len(back) == 4
        for row, orig in zip(back, rows):
            assert int(row["step"]) == orig["step"]
            assert float(row["loss"]) == pytest.approx(orig["loss"])
            assert float(row["rhs_C"]) == pytest.approx(orig["rhs_C"])
