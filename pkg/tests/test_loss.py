import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repsf.density import DensityMap
from repsf.errors import (
    DegenerateInputError,
    ShapeError,
    UnsupportedInstanceError,
    ValidationError,
)
from repsf.loss import (
    SinkhornConfig,
    count_loss,
    eval_metrics,
    exact_ot_oracle,
    ot_gradient,
    ot_loss,
    total_loss,
)

TIGHT = SinkhornConfig(epsilon=1e-3, max_iters=40000, tolerance=1e-7)


def atom_maps(rng, n_a, n_b, h, w):
    """Two uniform-mass maps on disjoint random supports."""
    cells = rng.choice(h * w, size=n_a + n_b, replace=False)
    va = np.zeros(h * w)
    vb = np.zeros(h * w)
    va[cells[:n_a]] = 1.0 / n_a
    vb[cells[n_a:]] = 1.0 / n_b
    return DensityMap(va.reshape(h, w)), DensityMap(vb.reshape(h, w))


def brute_force_assignment(pred: DensityMap, gt: DensityMap) -> float:
    """Enumerate all assignments between equal-size unit-atom supports."""
    h, w = pred.values.shape
    scale = 1.0 / math.hypot(h, w)

    def coords(dm):
        rows, cols = np.nonzero(dm.values > 0)
        return [((r + 0.5) * scale, (c + 0.5) * scale) for r, c in zip(rows, cols)]

    a, b = coords(pred), coords(gt)
    assert len(a) == len(b)
    best = math.inf
    for perm in itertools.permutations(range(len(b))):
        cost = sum(
            (a[i][0] - b[p][0]) ** 2 + (a[i][1] - b[p][1]) ** 2
            for i, p in enumerate(perm)
        )
        best = min(best, cost)
    return best / len(a)


class TestCountLoss:
    def test_equal_counts(self):
        assert count_loss(7.0, 7.0) == 0.0

    def test_l1(self):
        assert count_loss(10.0, 12.0, "l1") == 2.0

    def test_l2(self):
        assert count_loss(10.0, 12.0, "l2") == 4.0

    def test_bad_mode(self):
        with pytest.raises(ValidationError):
            count_loss(1.0, 2.0, "huber")


class TestOtLoss:
    def test_self_transport_is_tiny(self, rng):
        vals = rng.uniform(0.1, 1.0, (5, 5))
        dm = DensityMap(vals)
        result = ot_loss(dm, DensityMap(vals.copy()), TIGHT)
        assert 0.0 <= result.value <= 1e-3

    def test_single_atoms_forced_plan(self):
        va = np.zeros((5, 5))
        vb = np.zeros((5, 5))
        va[1, 1] = 1.0
        vb[4, 3] = 1.0
        expected = ((4 - 1) ** 2 + (3 - 1) ** 2) / (5**2 + 5**2)  # squared dist, diag=1
        result = ot_loss(DensityMap(va), DensityMap(vb), TIGHT)
        assert result.value == pytest.approx(expected, rel=1e-12)
        assert result.converged

    def test_uniform_triples_near_assignment(self, rng):
        pred, gt = atom_maps(rng, 3, 3, 5, 5)
        exact = exact_ot_oracle(pred, gt)
        result = ot_loss(pred, gt, TIGHT)
        assert result.converged
        assert result.value == pytest.approx(exact, rel=0.02)

    def test_marginals_within_tolerance(self, rng):
        pred = DensityMap(rng.uniform(0.1, 1.0, (6, 6)))
        gt = DensityMap(rng.uniform(0.1, 1.0, (6, 6)))
        result = ot_loss(pred, gt, SinkhornConfig(epsilon=0.05, max_iters=5000, tolerance=1e-8))
        assert result.converged
        assert result.marginal_violation <= 1e-8

    def test_scale_invariance(self, rng):
        a = rng.uniform(0.1, 1.0, (6, 6))
        b = rng.uniform(0.1, 1.0, (6, 6))
        cfg = SinkhornConfig(epsilon=0.05, max_iters=5000, tolerance=1e-10)
        base = ot_loss(DensityMap(a), DensityMap(b), cfg).value
        scaled = ot_loss(DensityMap(2.7 * a), DensityMap(0.31 * b), cfg).value
        assert abs(base - scaled) <= 1e-10

    def test_epsilon_bias_shrinks(self, rng):
        pred, gt = atom_maps(rng, 4, 4, 6, 6)
        exact = exact_ot_oracle(pred, gt)
        errors = []
        for eps in (1e-1, 1e-2, 1e-3):
            cfg = SinkhornConfig(epsilon=eps, max_iters=40000, tolerance=1e-7)
            errors.append(abs(ot_loss(pred, gt, cfg).value - exact))
        assert errors[0] >= errors[1] >= errors[2] - 1e-12

    def test_zero_mass_rejected(self, rng):
        zero = DensityMap(np.zeros((4, 4)))
        other = DensityMap(rng.uniform(0.1, 1, (4, 4)))
        with pytest.raises(DegenerateInputError):
            ot_loss(zero, other, TIGHT)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ot_loss(
                DensityMap(rng.uniform(0.1, 1, (4, 4))),
                DensityMap(rng.uniform(0.1, 1, (4, 5))),
                TIGHT,
            )

    def test_non_convergence_flagged_not_raised(self, rng):
        pred, gt = atom_maps(rng, 5, 5, 8, 8)
        cfg = SinkhornConfig(epsilon=1e-3, max_iters=2, tolerance=1e-12, eps_scaling=False)
        result = ot_loss(pred, gt, cfg)
        assert not result.converged
        assert math.isfinite(result.value) and result.value >= 0

    def test_scaling_domain_agrees_with_log_domain(self, rng):
        pred = DensityMap(rng.uniform(0.1, 1.0, (5, 5)))
        gt = DensityMap(rng.uniform(0.1, 1.0, (5, 5)))
        log_cfg = SinkhornConfig(epsilon=0.2, max_iters=3000, tolerance=1e-10)
        lin_cfg = SinkhornConfig(epsilon=0.2, max_iters=3000, tolerance=1e-10, log_domain=False)
        assert ot_loss(pred, gt, log_cfg).value == pytest.approx(
            ot_loss(pred, gt, lin_cfg).value, abs=1e-9
        )


class TestExactOracle:
    def test_identical_supports_zero(self, rng):
        pred, _ = atom_maps(rng, 4, 4, 6, 6)
        twin = DensityMap(pred.values * 2.0)  # scaling does not matter after atomizing
        assert exact_ot_oracle(pred, twin) == 0.0

    def test_one_atom_each_is_ground_cost(self):
        va = np.zeros((4, 4))
        vb = np.zeros((4, 4))
        va[0, 0] = 0.5
        vb[3, 2] = 2.0
        expected = (3**2 + 2**2) / (4**2 + 4**2)
        assert exact_ot_oracle(DensityMap(va), DensityMap(vb)) == pytest.approx(
            expected, rel=1e-12
        )

    def test_matches_brute_force_4v4(self, rng):
        for _ in range(5):
            pred, gt = atom_maps(rng, 4, 4, 5, 5)
            assert exact_ot_oracle(pred, gt) == pytest.approx(
                brute_force_assignment(pred, gt), rel=1e-12
            )

    def test_unequal_sides_atomize_via_lcm(self, rng):
        pred, gt = atom_maps(rng, 2, 3, 5, 5)
        value = exact_ot_oracle(pred, gt)
        sink = ot_loss(pred, gt, TIGHT)
        assert value >= 0
        assert sink.value == pytest.approx(value, rel=0.02, abs=2e-4)

    def test_non_uniform_masses_rejected(self):
        va = np.zeros((4, 4))
        va[0, 0] = 0.25
        va[1, 1] = 0.75
        vb = np.zeros((4, 4))
        vb[2, 2] = 1.0
        with pytest.raises(UnsupportedInstanceError):
            exact_ot_oracle(DensityMap(va), DensityMap(vb))


class TestOtGradient:
    CFG = SinkhornConfig(epsilon=0.1, max_iters=20000, tolerance=1e-13)

    def test_matches_finite_differences(self, rng):
        a = rng.uniform(0.5, 1.5, (6, 6))
        gt = DensityMap(rng.uniform(0.5, 1.5, (6, 6)))
        grad = ot_gradient(DensityMap(a), gt, self.CFG)

        def value(arr):
            return ot_loss(DensityMap(arr), gt, self.CFG).entropic_value

        for _ in range(5):
            d = rng.standard_normal((6, 6))
            d /= np.linalg.norm(d)
            step = 1e-5
            fd = (value(a + step * d) - value(a - step * d)) / (2 * step)
            assert float((grad * d).sum()) == pytest.approx(fd, rel=1e-4)

    def test_swap_symmetry(self, rng):
        a = DensityMap(rng.uniform(0.5, 1.5, (5, 5)))
        b = DensityMap(rng.uniform(0.5, 1.5, (5, 5)))
        cfg = SinkhornConfig(epsilon=0.05, max_iters=20000, tolerance=1e-11)
        assert ot_loss(a, b, cfg).value == pytest.approx(ot_loss(b, a, cfg).value, abs=1e-9)

    def test_gradient_orthogonal_to_prediction(self, rng):
        a = rng.uniform(0.5, 1.5, (6, 6))
        gt = DensityMap(rng.uniform(0.5, 1.5, (6, 6)))
        grad = ot_gradient(DensityMap(a), gt, self.CFG)
        bound = 1e-8 * np.linalg.norm(grad) * np.linalg.norm(a)
        assert abs(float((grad * a).sum())) <= bound

    def test_gradient_finite_with_zero_pixels(self, rng):
        a = rng.uniform(0.5, 1.5, (5, 5))
        a[0, 0] = 0.0
        gt = DensityMap(rng.uniform(0.5, 1.5, (5, 5)))
        grad = ot_gradient(DensityMap(a), gt, self.CFG)
        assert np.all(np.isfinite(grad))


class TestTotalLoss:
    def test_sum_arithmetic(self):
        assert 1.0 * 2.5 + 1.0 * 0.3 == pytest.approx(2.8)

    def test_components_recombine(self, rng):
        pred = DensityMap(rng.uniform(0.1, 1.0, (5, 5)))
        gt = DensityMap(rng.uniform(0.1, 1.0, (5, 5)))
        cfg = SinkhornConfig(epsilon=0.05, max_iters=5000, tolerance=1e-8)
        report = total_loss(pred, gt, cfg, weights=(1.0, 1.0))
        cl = count_loss(pred.count(), gt.count())
        ot = ot_loss(pred, gt, cfg)
        assert report.count_loss == pytest.approx(cl, rel=1e-12)
        assert report.ot_loss == pytest.approx(ot.value, rel=1e-12)
        assert report.total == pytest.approx(cl + ot.value, rel=1e-12)

    def test_identical_maps_near_zero(self, rng):
        vals = rng.uniform(0.1, 1.0, (5, 5))
        report = total_loss(DensityMap(vals), DensityMap(vals.copy()), TIGHT)
        assert report.count_loss == 0.0
        assert report.total <= 1e-3

    def test_weights_applied(self, rng):
        pred = DensityMap(rng.uniform(0.1, 1.0, (4, 4)))
        gt = DensityMap(rng.uniform(0.1, 1.0, (4, 4)))
        cfg = SinkhornConfig(epsilon=0.05, max_iters=5000, tolerance=1e-8)
        r11 = total_loss(pred, gt, cfg, weights=(1.0, 1.0))
        r23 = total_loss(pred, gt, cfg, weights=(2.0, 3.0))
        assert r23.total == pytest.approx(2 * r11.count_loss + 3 * r11.ot_loss, rel=1e-12)


class TestEvalMetrics:
    def test_identical_lists(self):
        report = eval_metrics([5, 9, 2], [5, 9, 2])
        assert report.mae == 0.0 and report.mse == 0.0 and report.n == 3

    def test_documented_example(self):
        report = eval_metrics([10, 20], [12, 17])
        assert report.mae == pytest.approx(2.5)
        assert report.mse == pytest.approx(math.sqrt(6.5))
        assert report.n == 2

    def test_matches_loop_oracle(self, rng):
        preds = rng.uniform(0, 500, 100)
        gts = rng.uniform(0, 500, 100)
        report = eval_metrics(preds, gts)
        abs_errors = [abs(p - g) for p, g in zip(preds, gts)]
        mae = sum(abs_errors) / len(abs_errors)
        mse = math.sqrt(sum(e * e for e in abs_errors) / len(abs_errors))
        assert report.mae == pytest.approx(mae, rel=1e-12)
        assert report.mse == pytest.approx(mse, rel=1e-12)

    @given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 1e4)), min_size=1, max_size=50))
    @settings(max_examples=50, deadline=None)
    def test_mae_never_exceeds_mse(self, pairs):
        preds, gts = zip(*pairs)
        report = eval_metrics(list(preds), list(gts))
        assert report.mae <= report.mse + 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            eval_metrics([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            eval_metrics([1.0], [1.0, 2.0])
