import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from zclassifier import numcore as nc
from zclassifier.gaussian_head import (ClassPrototype, GaussianLogits, HeadKind, average_latent,
                                       kl_to_prototype, loss, one_hot, predict, reparameterize)

# frozen oracle values, evaluated from the closed forms with K = 10
CE_ON_PROTOTYPE = 1.4611501717344748  # ln((e + 9) / e)
CE_UNIFORM = 2.302585092994046  # ln 10
CE_CONFIDENT_SOFTMAX = 4.085159138727126e-4  # ln(1 + 9 e^-10)


def test_oracle_constants():
    assert CE_ON_PROTOTYPE == pytest.approx(-math.log(math.e / (math.e + 9)), rel=1e-15)
    assert CE_UNIFORM == pytest.approx(math.log(10), rel=1e-15)
    assert CE_CONFIDENT_SOFTMAX == pytest.approx(math.log1p(9 * math.exp(-10)), rel=1e-14)


class TestHeadKind:
    def test_nokl_forces_zero_lambda(self):
        assert HeadKind("nokl", lam=10.0).lam == 0.0

    def test_zclassifier_needs_positive_lambda(self):
        with pytest.raises(ValueError):
            HeadKind("zclassifier", lam=0.0)

    def test_round_trip(self):
        head = HeadKind.zclassifier(lam=3.0, latent_dim=2, samples=2, ce_source="sample")
        assert HeadKind.from_dict(head.to_dict()) == head

    def test_softmax_not_gaussian(self):
        assert not HeadKind.softmax().gaussian
        assert HeadKind.nokl().gaussian

    def test_prototype_mean(self):
        np.testing.assert_array_equal(ClassPrototype(2, 4).mean, [0, 0, 1, 0])


class TestKl:
    def test_zero_at_prototype(self):
        assert kl_to_prototype(one_hot(3, 10), np.zeros(10), 3) == 0.0

    def test_half_at_origin(self):
        for y in range(10):
            assert kl_to_prototype(np.zeros(10), np.zeros(10), y) == 0.5

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            kl_to_prototype(np.zeros(3), np.zeros(3), 3)

    def test_batch_matches_rows(self, rng):
        mu, lv = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        y = np.array([0, 4, 2, 2])
        batch = kl_to_prototype(mu, lv, y)
        np.testing.assert_allclose(batch, [kl_to_prototype(mu[i], lv[i], y[i]) for i in range(4)])

    @given(hnp.arrays(np.float64, 6, elements=st.floats(-3, 3)),
           hnp.arrays(np.float64, 6, elements=st.floats(-3, 3)),
           st.integers(0, 5))
    def test_nonnegative(self, mu, lv, y):
        assert kl_to_prototype(mu, lv, y) >= 0.0

    @given(hnp.arrays(np.float64, 5, elements=st.floats(-1, 1)).filter(lambda d: np.abs(d).max() > 1e-3),
           st.integers(0, 4), st.booleans())
    def test_perturbation_increases(self, delta, y, on_var):
        mu, lv = one_hot(y, 5), np.zeros(5)
        if on_var:
            lv = lv + delta
        else:
            mu = mu + delta
        assert kl_to_prototype(mu, lv, y) > 0.0


class TestSampling:
    def test_zero_eps_broadcasts_mu(self, rng):
        mu, lv = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        z = reparameterize(mu, lv, np.zeros((2, 3, 4))).value
        np.testing.assert_array_equal(z, np.broadcast_to(mu[:, :, None], (2, 3, 4)))

    def test_unit_eps_shifts_by_sigma(self, rng):
        mu = rng.normal(size=(2, 3))
        z = reparameterize(mu, np.zeros((2, 3)), np.ones((2, 3, 2))).value
        np.testing.assert_allclose(z, np.broadcast_to(mu[:, :, None] + 1.0, z.shape))

    def test_shape_error(self):
        with pytest.raises(nc.ShapeError):
            reparameterize(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4, 1)))

    def test_average_identity_for_single_dim(self, rng):
        z = rng.normal(size=(3, 4, 1))
        np.testing.assert_array_equal(average_latent(z).value, z[:, :, 0])

    def test_average_of_constant(self):
        np.testing.assert_array_equal(average_latent(np.full((2, 3, 5), 1.5)).value, np.full((2, 3), 1.5))

    def test_sample_variance(self):
        eps = nc.Rng(1).normal((100_000, 1, 1))
        z = reparameterize(np.zeros((100_000, 1)), np.full((100_000, 1), math.log(2.5)), eps).value
        assert z.var() == pytest.approx(2.5, rel=0.03)

    def test_average_is_unbiased(self):
        eps = nc.Rng(2).normal((100_000, 1, 3))
        zbar = average_latent(reparameterize(np.full((100_000, 1), 2.0), np.zeros((100_000, 1)), eps)).value
        assert zbar.mean() == pytest.approx(2.0, rel=0.01)


class TestLoss:
    def gauss(self, mu, lv):
        return GaussianLogits(nc.parameter(mu), nc.parameter(lv))

    def test_on_prototype(self):
        out = self.gauss(np.eye(10)[[3]], np.zeros((1, 10)))
        parts = loss(HeadKind.zclassifier(), out, [3])
        assert parts.cross_entropy == pytest.approx(CE_ON_PROTOTYPE, abs=1e-12)
        assert parts.kl == 0.0
        assert parts.total == pytest.approx(CE_ON_PROTOTYPE, abs=1e-12)

    def test_uniform_mu(self):
        parts = loss(HeadKind.zclassifier(), self.gauss(np.zeros((2, 10)), np.zeros((2, 10))), [0, 7])
        assert parts.cross_entropy == pytest.approx(CE_UNIFORM, abs=1e-12)
        assert parts.kl == pytest.approx(0.5, abs=1e-15)
        assert parts.total == pytest.approx(7.30259, abs=1e-5)

    def test_softmax_confident(self):
        parts = loss(HeadKind.softmax(), nc.parameter(10 * np.eye(10)[[4]]), [4])
        assert parts.cross_entropy == pytest.approx(CE_CONFIDENT_SOFTMAX, rel=1e-9)
        assert parts.kl == 0.0

    def test_total_is_ce_plus_lambda_kl(self, rng):
        parts = loss(HeadKind.zclassifier(lam=3.5), self.gauss(rng.normal(size=(5, 4)), rng.normal(size=(5, 4))),
                     rng.integers(0, 4, 5))
        assert parts.total == parts.cross_entropy + 3.5 * parts.kl

    def test_nokl_equals_softmax_on_same_mu(self, rng):
        mu = rng.normal(size=(6, 4))
        y = rng.integers(0, 4, 6)
        a = loss(HeadKind.nokl(), self.gauss(mu, rng.normal(size=(6, 4))), y)
        b = loss(HeadKind.softmax(), nc.parameter(mu), y)
        assert a.total == b.total

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            loss(HeadKind.zclassifier(), self.gauss(np.zeros((0, 3)), np.zeros((0, 3))), [])

    @pytest.mark.parametrize("ce_source", ["mu", "sample"])
    def test_gradients(self, rng, ce_source):
        mu = nc.parameter(rng.normal(size=(4, 5)), "mu")
        lv = nc.parameter(rng.normal(size=(4, 5)) * 0.5, "log_var")
        head = HeadKind.zclassifier(ce_source=ce_source, samples=2)
        y = rng.integers(0, 5, 4)
        report = nc.grad_check(lambda: loss(head, GaussianLogits(mu, lv), y, rng=nc.Rng(0)).graph, [mu, lv])
        assert report.passed, report.errors

    def test_sample_source_needs_rng(self):
        with pytest.raises(ValueError):
            loss(HeadKind.zclassifier(ce_source="sample"), self.gauss(np.zeros((1, 2)), np.zeros((1, 2))), [0])


class TestPredict:
    def test_one_hot(self):
        assert predict(one_hot([3], 10))[0] == 3

    def test_ties_go_low(self):
        assert predict(np.full((1, 6), 0.3))[0] == 0

    def test_example_row(self):
        assert predict(np.array([[0.1, 0.9, 0.2, 0.0]]))[0] == 1

    @given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-5, 5)), st.floats(-100, 100))
    def test_shift_invariance(self, mu, c):
        # rounding can merge near-ties, so compare on a coarse grid
        mu = np.round(mu, 2)
        np.testing.assert_array_equal(predict(mu + c), predict(mu))
