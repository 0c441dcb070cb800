import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import make_dataset, oracle_class, oracle_respondents, random_class
from lcrl.latent import (membership_probabilities, mixture_loglik, posterior_memberships,
                         write_memberships_csv)
from lcrl.model import MembershipParams, PanelDataset
from lcrl.rl import sequence_loglik


class TestMembership:
    def test_flat(self):
        p = membership_probabilities([1.0, 0.0], np.zeros((2, 2)))
        np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)

    def test_logistic(self):
        p = membership_probabilities([1.0], np.array([[0.5]]))
        np.testing.assert_allclose(p, [0.6224593312018546, 0.3775406687981454], atol=1e-15)
        assert round(p[0], 4) == 0.6225

    def test_single_class(self):
        assert membership_probabilities([1.0, 3.0], np.zeros((0, 2))).tolist() == [1.0]

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            membership_probabilities([1.0, 2.0, 3.0], np.zeros((1, 2)))

    def test_accepts_membership_params(self):
        eta = MembershipParams(np.array([[0.2, -1.0]]))
        p = membership_probabilities([1.0, 1.0], eta)
        assert p[0] == pytest.approx(oracles.membership([1, 1], [[0.2, -1.0]])[0], abs=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**31), K=st.integers(2, 5), shift=st.floats(-20, 20))
    def test_shift_invariance(self, seed, K, shift):
        rng = np.random.default_rng(seed)
        x = np.concatenate([[1.0], rng.normal(size=2)])
        eta = rng.normal(size=(K - 1, 3))
        # adding c to every logit: the reference class is pinned to 0, so shift
        # the others and compare with the reference raised by the same amount
        full = np.vstack([eta, np.zeros(3)])
        bumped = full + np.array([shift, 0, 0])
        p1 = membership_probabilities(x, eta)
        p2 = membership_probabilities(x, bumped[:-1] - bumped[-1])
        np.testing.assert_allclose(p1, p2, atol=1e-12)
        assert abs(p1.sum() - 1) <= 1e-12


class TestMixture:
    def test_single_class_equals_sequence_sum(self, alts):
        ds = make_dataset(n_resp=4, n_trials=20, seed=2)
        p = random_class(alts, np.random.default_rng(0))
        total = sum(sequence_loglik(r, p)[0] for r in ds.respondents)
        assert mixture_loglik(ds, [p]) == pytest.approx(total, abs=1e-10)
        np.testing.assert_array_equal(posterior_memberships(ds, [p]), np.ones((4, 1)))

    def test_identical_classes(self, alts):
        ds = make_dataset(n_resp=4, n_trials=10, seed=2)
        p = random_class(alts, np.random.default_rng(0))
        eta = np.array([[0.7, -1.2]])
        assert mixture_loglik(ds, [p, p], eta) == pytest.approx(mixture_loglik(ds, [p]), abs=1e-10)
        prior = np.array([membership_probabilities(r.covariates, eta) for r in ds.respondents])
        np.testing.assert_allclose(posterior_memberships(ds, [p, p], eta), prior, atol=1e-12)

    @pytest.mark.parametrize("n_resp,n_trials,K,seed", [(2, 3, 2, 0), (3, 4, 2, 1), (3, 4, 3, 2),
                                                       (1, 4, 3, 3), (2, 2, 3, 4)])
    def test_enumeration_oracle(self, alts, n_resp, n_trials, K, seed):
        ds = make_dataset(n_resp=n_resp, n_trials=n_trials, seed=seed)
        rng = np.random.default_rng(seed + 100)
        params = [random_class(alts, rng) for _ in range(K)]
        eta = rng.normal(size=(K - 1, 2))
        ll_o, post_o = oracles.enumerate_mixture(oracle_respondents(ds),
                                                 [oracle_class(p) for p in params], eta.tolist())
        assert abs(mixture_loglik(ds, params, eta) - ll_o) <= 1e-10
        np.testing.assert_allclose(posterior_memberships(ds, params, eta), post_o, rtol=0, atol=1e-10)

    def test_class_duplication(self, alts):
        """Splitting a class's prior mass across two copies leaves the likelihood unchanged."""
        ds = make_dataset(n_resp=3, n_trials=4, seed=9, covariates=("const",))
        rng = np.random.default_rng(4)
        a, b = random_class(alts, rng), random_class(alts, rng)
        eta2 = np.array([[0.4]])
        # class a gets sigma(0.4); split it evenly between two copies
        eta3 = np.array([[0.4 + np.log(0.5)], [0.4 + np.log(0.5)]])
        base = mixture_loglik(ds, [a, b], eta2)
        dup = mixture_loglik(ds, [a, a, b], eta3)
        oracle, _ = oracles.enumerate_mixture(oracle_respondents(ds),
                                              [oracle_class(p) for p in (a, a, b)], eta3.tolist())
        assert dup == pytest.approx(base, abs=1e-10)
        assert dup == pytest.approx(oracle, abs=1e-10)

    def test_posterior_rows_normalized(self, alts):
        ds = make_dataset(n_resp=20, n_trials=20, seed=1)
        rng = np.random.default_rng(8)
        params = [random_class(alts, rng) for _ in range(3)]
        post = posterior_memberships(ds, params, rng.normal(size=(2, 2)))
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(post >= 0)

    def test_csv(self, tmp_path, small_dataset):
        path = tmp_path / "m.csv"
        write_memberships_csv(path, small_dataset, np.array([[0.25, 0.75]] * 3))
        lines = path.read_text().splitlines()
        assert lines[0] == "respondent_id,pi_1,pi_2"
        assert lines[1] == "r1,0.25,0.75"
