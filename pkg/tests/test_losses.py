import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from portrait_iqa import losses
from conftest import GRAD_RTOL, autograd_gradient, fd_gradient, rel_err

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def f(t):
    return float(t)


class TestRelativeMap:
    def test_odd_length(self):
        out = losses.relative_map([1.0, 2.0, 3.0])
        assert f(out.shift) == 2.0
        assert f(out.scale) == pytest.approx(2 / 3, abs=1e-15)
        np.testing.assert_allclose(out.values.numpy(), [-1.5, 0.0, 1.5], atol=1e-15)

    def test_even_length_uses_mean_of_middles(self):
        out = losses.relative_map([1.0, 2.0, 3.0, 4.0])
        assert f(out.shift) == 2.5
        assert f(out.scale) == 1.0
        np.testing.assert_allclose(out.values.numpy(), [-1.5, -0.5, 0.5, 1.5])

    def test_constant_input(self):
        out = losses.relative_map([5.0, 5.0, 5.0])
        assert out.degenerate
        assert f(out.scale) == 0.0
        assert torch.equal(out.values, torch.zeros(3, dtype=torch.float64))

    def test_too_short(self):
        with pytest.raises(ValueError):
            losses.relative_map([1.0])

    @given(st.lists(finite, min_size=2, max_size=30))
    def test_normalised_moments(self, q):
        out = losses.relative_map(q)
        if f(out.scale) > 1e-6:
            v = out.values.numpy()
            assert abs(np.median(v)) < 1e-9
            assert abs(np.mean(np.abs(v)) - 1.0) < 1e-9


class TestSSILoss:
    def test_affine_image_is_zero(self):
        gt = [1.0, 2.0, 3.0, 4.0]
        pred = [2 * g + 3 for g in gt]
        assert f(losses.ssi_loss([pred], [gt])) == pytest.approx(0.0, abs=1e-15)

    def test_hand_value(self):
        # both mapped by hand: gt -> [-1.5, 0, 1.5], pred [1,2,4] -> [-1, 0, 2]
        assert f(losses.ssi_loss([[1.0, 2.0, 4.0]], [[1.0, 2.0, 3.0]])) == pytest.approx(1 / 3, abs=1e-15)

    def test_two_scenes_zero(self):
        gt = [[1.0, 2.0, 3.0, 4.0], [10.0, 7.0, 8.0, 1.0]]
        pred = [[2 * g + 3 for g in gt[0]], [0.5 * g - 9 for g in gt[1]]]
        assert f(losses.ssi_loss(pred, gt)) == pytest.approx(0.0, abs=1e-15)

    def test_tensor_groups_match_lists(self):
        pred = torch.tensor([[1.0, 2.0, 4.0], [3.0, 1.0, 2.0]], dtype=torch.float64)
        gt = torch.tensor([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]], dtype=torch.float64)
        assert f(losses.ssi_loss(pred, gt)) == pytest.approx(f(losses.ssi_loss(pred.tolist(), gt.tolist())))

    def test_errors(self):
        with pytest.raises(ValueError):
            losses.ssi_loss([[1.0, 2.0]], [[1.0, 2.0, 3.0]])
        with pytest.raises(ValueError):
            losses.ssi_loss([[1.0]], [[1.0]])
        with pytest.raises(ValueError):
            losses.ssi_loss([[1.0, 2.0]], [[1.0, 2.0], [2.0, 1.0]])

    @settings(max_examples=200)
    @given(
        st.lists(finite, min_size=2, max_size=12).flatmap(
            lambda g: st.tuples(st.just(g), st.lists(finite, min_size=len(g), max_size=len(g)))
        ),
        st.floats(0.01, 100),
        finite,
        st.floats(0.01, 100),
        finite,
    )
    def test_invariance(self, pair, a, b, c, d):
        gt, pred = pair
        base = f(losses.ssi_loss([pred], [gt]))
        pred_t = [a * p + b for p in pred]
        gt_t = [c * g + d for g in gt]
        # a tiny spread can collapse to a constant after the affine map; skip those
        if np.ptp(pred) > 1e-3 and np.ptp(gt) > 1e-3:
            assert abs(f(losses.ssi_loss([pred_t], [gt])) - base) < 1e-8
            assert abs(f(losses.ssi_loss([pred], [gt_t])) - base) < 1e-8
        assert base >= 0


class TestMergedRankLoss:
    def test_correct_order_exact(self):
        assert f(losses.merged_rank_loss([2.0, 1.0], [2.0, 1.0])) == 0.0

    def test_rank_term(self):
        assert f(losses.merged_rank_loss([1.0, 2.0], [1.0, 2.0])) == pytest.approx(math.exp(-1), abs=1e-15)
        assert f(losses.merged_rank_loss([1.0, 2.0], [1.0, 2.0])) == pytest.approx(0.367879, abs=1e-6)

    def test_squared_error_only(self):
        assert f(losses.merged_rank_loss([3.0, 1.0], [2.0, 1.0])) == 1.0

    def test_prefactor_averages_pairs(self):
        # two pairs, both correctly ordered: (2/4) * (1 + 4)
        assert f(losses.merged_rank_loss([3.0, 0.0, 5.0, 0.0], [2.0, 1.0, 3.0, 1.0])) == 2.5

    def test_errors(self):
        with pytest.raises(ValueError):
            losses.merged_rank_loss([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            losses.merged_rank_loss([1.0, 2.0], [1.0, 2.0, 3.0, 4.0])


class TestPairLabel:
    @pytest.mark.parametrize("x, y, p", [(5.0, 3.0, 1), (3.0, 5.0, 0), (4.0, 4.0, 1)])
    def test_orientation(self, x, y, p):
        assert losses.pair_label(x, y) == p


class TestFidelityLoss:
    def test_equal_scores(self):
        assert f(losses.fidelity_loss(0.3, 0.3, 1)) == pytest.approx(1 - math.sqrt(0.5), abs=1e-12)
        assert f(losses.fidelity_loss(0.3, 0.3, 1)) == pytest.approx(0.292893, abs=1e-6)

    def test_saturation(self):
        assert f(losses.fidelity_loss(10.0, 0.0, 1)) < 1e-6
        assert f(losses.fidelity_loss(0.0, 10.0, 0)) < 1e-6

    def test_wrong_order_is_penalised(self):
        assert f(losses.fidelity_loss(0.0, 10.0, 1)) > 0.99

    def test_probability_uses_unit_variance_difference(self):
        # p_hat = Phi(d / sqrt 2); with d = sqrt 2 this is Phi(1)
        phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
        assert f(losses.fidelity_loss(math.sqrt(2), 0.0, 1)) == pytest.approx(1 - math.sqrt(phi1), abs=1e-14)

    @settings(max_examples=300)
    @given(finite, finite, st.sampled_from([0, 1]))
    def test_bounds_and_swap_symmetry(self, qx, qy, p):
        a = f(losses.fidelity_loss(qx, qy, p))
        assert 0.0 <= a <= 1.0
        assert a == f(losses.fidelity_loss(qy, qx, 1 - p))

    def test_monotone_for_positive_label(self):
        d = np.linspace(-6, 6, 200)
        vals = [f(losses.fidelity_loss(x, 0.0, 1)) for x in d]
        assert all(b <= a for a, b in zip(vals, vals[1:]))
        assert vals[0] > vals[-1]

    def test_gradient_finite_in_saturation(self):
        q = torch.tensor([30.0, 0.0], dtype=torch.float64, requires_grad=True)
        losses.fidelity_loss(q[0], q[1], 0).backward()
        assert torch.isfinite(q.grad).all()


class TestPatchLoss:
    def test_values(self):
        assert f(losses.patch_loss([4.0, 4.0], 4.0)) == 0.0
        assert f(losses.patch_loss([3.0, 5.0], 4.0)) == 1.0
        assert f(losses.patch_loss([4.0], 3.0)) == 1.0

    def test_squared_variant(self):
        assert f(losses.patch_loss([3.0, 6.0], 4.0, squared=True)) == 2.5

    def test_empty(self):
        with pytest.raises(ValueError):
            losses.patch_loss([], 1.0)


class TestHuberLoss:
    def test_values(self):
        assert f(losses.huber_loss([1.0, 2.0], [1.0, 2.0])) == 0.0
        assert f(losses.huber_loss([0.1], [0.0])) == pytest.approx(0.005, abs=1e-15)
        assert f(losses.huber_loss([1.2], [0.0])) == pytest.approx(0.22, abs=1e-15)

    def test_matches_torch(self):
        rng = np.random.default_rng(0)
        p, g = rng.normal(size=50), rng.normal(size=50)
        ref = torch.nn.functional.huber_loss(torch.tensor(p), torch.tensor(g), delta=0.2)
        assert f(losses.huber_loss(p, g)) == pytest.approx(float(ref), abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            losses.huber_loss([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            losses.huber_loss([1.0], [1.0], delta=0.0)


def _loss_cases(rng):
    """(name, scalar function of a prediction vector, random point) triples."""
    gt_ssi = rng.normal(size=(2, 6))
    gt_merged = rng.normal(size=8)
    lab = rng.integers(0, 2, size=5).astype(float)
    gt_h = rng.normal(size=7)
    return [
        ("ssi", lambda x: losses.ssi_loss(losses.as_tensor(x).reshape(2, 6), gt_ssi), rng.normal(size=12)),
        ("merged", lambda x: losses.merged_rank_loss(x, gt_merged), rng.normal(size=8)),
        ("fidelity", lambda x: losses.fidelity_loss(losses.as_tensor(x)[:5], losses.as_tensor(x)[5:], lab),
         rng.uniform(-2, 2, size=10)),
        ("patch", lambda x: losses.patch_loss(x, 0.3), rng.normal(size=6)),
        ("huber", lambda x: losses.huber_loss(x, gt_h), gt_h + rng.normal(scale=0.3, size=7)),
    ]


def loss_gradient_error(name: str, n_points: int = 100) -> float:
    """Worst relative error between autograd and central differences over random points."""
    rng = np.random.default_rng(7)
    worst, checked = 0.0, 0
    while checked < n_points:
        cases = {n: (fn, x) for n, fn, x in _loss_cases(rng)}
        fn, x = cases[name]
        analytic = autograd_gradient(fn, x)
        # the L1-type losses can be locally flat; a zero gradient is a degenerate point
        if np.linalg.norm(analytic) < 1e-8:
            continue
        worst = max(worst, rel_err(analytic, fd_gradient(fn, x)))
        checked += 1
    return worst


@pytest.mark.parametrize("name", ["ssi", "merged", "fidelity", "patch", "huber"])
def test_gradient_matches_finite_differences(name):
    assert loss_gradient_error(name) < GRAD_RTOL


def test_reversed_numpy_view_is_accepted():
    gt = np.array([1.0, 2.0, 3.0, 4.0])
    assert f(losses.merged_rank_loss(gt[::-1], gt[::-1])) == 0.0
