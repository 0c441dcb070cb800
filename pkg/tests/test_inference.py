import math

import numpy as np
import pytest

from conftest import make_dataset
from lcrl.inference import (Adam, FitConfig, SummaryRow, canonicalize, class_shares, fit,
                            init_state, permute_classes, point_estimates, posterior_memberships_sampled,
                            posterior_summary)
from lcrl.latent import mixture_loglik
from lcrl.model import ModelSpec, route_choice_alternatives
from lcrl.simulate import (TruthRanges, dataset_rng, route_choice_feedback, route_choice_template,
                           sample_truth, simulate_dataset)
from lcrl.variational import VariationalModel


def simulated_k1(seed=0):
    alts = route_choice_alternatives()
    rng = dataset_rng(seed, 0)
    truth = sample_truth(alts, 1, 6, TruthRanges(), rng)
    return simulate_dataset(alts, route_choice_template(), route_choice_feedback(), truth, rng)


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        opt = Adam(3, lr=0.1)
        out = opt.step(np.zeros(3), np.array([2.0, -0.5, 0.0]))
        np.testing.assert_allclose(out, [0.1, -0.1, 0.0], atol=1e-7)

    def test_climbs_concave_quadratic(self):
        opt = Adam(2, lr=0.05)
        x = np.array([3.0, -2.0])
        for _ in range(2000):
            x = opt.step(x, -2 * (x - np.array([1.0, 0.5])))
        np.testing.assert_allclose(x, [1.0, 0.5], atol=1e-3)


class TestFit:
    def test_zero_iterations_returns_init(self, small_dataset):
        spec = ModelSpec(2, small_dataset.covariate_names)
        cfg = FitConfig(iterations=0, restarts=1, seed=4)
        result = fit(small_dataset, spec, cfg)
        model = VariationalModel(small_dataset, spec)
        rng = np.random.default_rng(np.random.SeedSequence(4).spawn(2)[0])
        expected = init_state(model, rng, cfg)
        np.testing.assert_array_equal(result.state.pack(), expected.pack())
        assert result.diagnostics["iterations"] == 0

    def test_same_seed_identical_trace(self, small_dataset):
        spec = ModelSpec(2, small_dataset.covariate_names)
        cfg = FitConfig(iterations=60, restarts=2, seed=1)
        a, b = fit(small_dataset, spec, cfg), fit(small_dataset, spec, cfg)
        assert a.diagnostics["elbo_trace"] == b.diagnostics["elbo_trace"]
        assert np.array_equal(a.state.pack(), b.state.pack())

    def test_restart_bookkeeping(self, small_dataset):
        spec = ModelSpec(2, small_dataset.covariate_names)
        r = fit(small_dataset, spec, FitConfig(iterations=30, restarts=3, seed=2))
        elbos = [x["elbo"] for x in r.diagnostics["restarts"]]
        assert len(elbos) == 3
        assert r.elbo == max(elbos)
        assert elbos[r.diagnostics["restart_index"]] == r.elbo

    def test_smoothed_trace_improves(self):
        ds, _ = simulated_k1(2)
        r = fit(ds, ModelSpec(1, ds.covariate_names), FitConfig(restarts=1, iterations=400))
        trace = np.array(r.diagnostics["elbo_trace"])
        assert trace[-50:].mean() >= trace[:50].mean()

    def test_k1_recovers_truth(self):
        ds, truth = simulated_k1(0)
        spec = ModelSpec(1, ds.covariate_names)
        r = fit(ds, spec, FitConfig(restarts=1, seed=0))
        assert r.diagnostics["converged"]
        rows = posterior_summary(r.state, VariationalModel(ds, spec))
        values = truth.params[0].free_vector(ds.alternatives)
        for row, t in zip(rows[:6], values):
            assert abs(row.mean - t) <= 3 * row.sd, (row.parameter, row.mean, row.sd, t)


def two_class_state(ds, rng):
    model = VariationalModel(ds, ModelSpec(3, ds.covariate_names))
    s = model.prior_state()
    s.class_mean = rng.normal(size=s.class_mean.shape)
    s.class_logsd = np.log(rng.uniform(0.1, 0.5, s.class_logsd.shape))
    s.eta_mean = rng.normal(size=s.eta_mean.shape)
    s.eta_scale = np.log(rng.uniform(0.1, 0.5, s.eta_scale.shape))
    s.pi_logits = rng.normal(size=s.pi_logits.shape)
    return model, s


class TestSummary:
    def test_lognormal_moments(self, small_dataset):
        spec = ModelSpec(1, small_dataset.covariate_names)
        model = VariationalModel(small_dataset, spec)
        s = model.prior_state()
        s.class_mean[0, 2], s.class_logsd[0, 2] = 0.0, 0.0
        rows = {r.parameter: r for r in posterior_summary(s, model)}
        assert rows["beta_ds"].mean == pytest.approx(1.6487, abs=1e-4)
        assert rows["beta_ds"].sd == pytest.approx(2.1612, abs=1e-4)
        assert rows["beta_ds"].mean == pytest.approx(math.exp(0.5), abs=1e-12)

    def test_point_mass_alpha(self, small_dataset):
        spec = ModelSpec(1, small_dataset.covariate_names)
        model = VariationalModel(small_dataset, spec)
        s = model.prior_state()
        s.class_mean[0, 4], s.class_logsd[0, 4] = 0.0, -np.inf
        row = next(r for r in posterior_summary(s, model) if r.parameter == "alpha")
        assert row.mean == 0.5 and row.sd == 0.0
        assert row.degenerate and math.isinf(row.z)

    def test_z_score(self):
        assert SummaryRow("x", 1, 2.0, 0.5).z == 4.0
        assert math.isnan(SummaryRow("x", 1, 0.0, 0.0).z)

    def test_class_shares(self):
        ds = make_dataset(n_resp=2)
        model = VariationalModel(ds, ModelSpec(2, ds.covariate_names))
        s = model.prior_state(pi_logits=np.array([[1e3, 0.0], [0.0, 1e3]]))
        np.testing.assert_allclose(class_shares(s), [0.5, 0.5], atol=1e-15)
        shares = [r.mean for r in posterior_summary(s, model) if r.parameter == "class_share"]
        assert shares == [0.5, 0.5]

    def test_point_estimates_shape(self, small_dataset):
        model, s = two_class_state(small_dataset, np.random.default_rng(0))
        params, eta = point_estimates(posterior_summary(s, model), model)
        assert len(params) == 3 and eta.eta.shape == (2, 2)
        assert all(0 < p.alpha < 1 and 2 < p.q0[1] < 7 for p in params)


class TestRelabel:
    def test_permutation_preserves_elbo(self, small_dataset):
        model, s = two_class_state(small_dataset, np.random.default_rng(1))
        noise = model.draw_noise(4, np.random.default_rng(0))
        base = model.evaluate(s, 4, noise=noise)[0]
        # keep the reference class in place so the membership factor is unchanged
        p = permute_classes(s, [1, 0, 2])
        eps_c, eps_e = noise
        moved = model.evaluate(p, 4, noise=(eps_c[:, [1, 0, 2]], eps_e[:, [1, 0]]))[0]
        assert moved == pytest.approx(base, abs=1e-9)

    def test_reference_move_keeps_point_likelihood(self, small_dataset):
        model, s = two_class_state(small_dataset, np.random.default_rng(2))
        params, eta = point_estimates(posterior_summary(s, model), model)
        p = permute_classes(s, [2, 0, 1])
        params2, eta2 = point_estimates(posterior_summary(p, model), model)
        assert mixture_loglik(small_dataset, params2, eta2) == pytest.approx(
            mixture_loglik(small_dataset, params, eta), abs=1e-9)

    def test_canonical_order(self, small_dataset):
        model, s = two_class_state(small_dataset, np.random.default_rng(3))
        c, perm = canonicalize(s)
        shares = class_shares(c)
        assert np.all(np.diff(shares) <= 0)
        np.testing.assert_allclose(shares, class_shares(s)[perm])

    def test_full_covariance_permutation(self, small_dataset):
        model = VariationalModel(small_dataset, ModelSpec(3, small_dataset.covariate_names), "full")
        s = model.prior_state()
        s.pi_logits = np.random.default_rng(0).normal(size=s.pi_logits.shape)
        p = permute_classes(s, [2, 1, 0])
        cov = p.eta_chol() @ np.transpose(p.eta_chol(), (0, 2, 1))
        # new class 1 is the old (zero) reference minus old class 1; new class 2
        # is a difference of two unit-prior factors, so its covariance doubles
        np.testing.assert_allclose(cov[0], 25.0 * np.eye(2), atol=1e-9)
        np.testing.assert_allclose(cov[1], 50.0 * np.eye(2), atol=1e-9)


def test_sampled_memberships_normalized(small_dataset):
    model, s = two_class_state(small_dataset, np.random.default_rng(5))
    post = posterior_memberships_sampled(s, model, 50, np.random.default_rng(0))
    np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)
