"""
Unit Tests — Weighted Survival Likelihood and Composite Objective.

Coverage:
  1. survival_nll: closed-form values, empty tail handling, agreement with the
     probability-space reference
  2. Importance weights: propensity formula, clipping, per-arm normalization,
     learned weights
  3. Balancing term: skipped when an arm is absent
  4. Reverse-mode gradient of the full objective against central finite
     differences on 20 small random configurations
  5. Each term checked on its own: likelihood, head ridge, weight ridge
     through softplus, and the balancing divergence in φ and in w
  6. γ_wd = 0 reduces to the likelihood gradient; a zero-loss batch has a
     zero gradient
"""
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.model.network import init_params, probs_from_logits
from src.model.objective import (
    LearnedWeights, arm_fractions, balance_term, gradient, make_batch, normalize_per_arm,
    propensity_weights, raw_propensity_weights, ridge_penalties, survival_nll,
    survival_nll_from_probs, tilde_weights, total_objective,
)
from src.utils.config import CensoredTail, HyperParams, WeightMode
from src.utils.data_models import TimeGrid

GRID = TimeGrid(np.array([0.0, 1.0, 2.0, 3.0]))


def _logits(n, m=3):
    return torch.zeros(n, m, dtype=torch.float64)


# ── Likelihood ────────────────────────────────────────────────────────────────

class TestSurvivalNll:
    def test_event_on_uniform_head(self):
        losses, _ = survival_nll(_logits(1), torch.tensor([2]), torch.tensor([1]))
        assert float(losses[0]) == pytest.approx(np.log(4.0))

    def test_censored_sums_the_tail(self):
        losses, _ = survival_nll(_logits(1), torch.tensor([2]), torch.tensor([0]))
        assert float(losses[0]) == pytest.approx(np.log(2.0))

    def test_censored_in_first_interval(self):
        losses, _ = survival_nll(_logits(1), torch.tensor([1]), torch.tensor([0]))
        assert float(losses[0]) == pytest.approx(-np.log(0.75))

    def test_empty_tail_contributes_zero(self):
        losses, empty = survival_nll(_logits(2), torch.tensor([4, 2]), torch.tensor([0, 0]))
        assert float(losses[0]) == 0.0
        assert empty == 1

    def test_empty_tail_included(self):
        losses, _ = survival_nll(_logits(1), torch.tensor([4]), torch.tensor([0]), CensoredTail.INCLUDE)
        assert float(losses[0]) == pytest.approx(np.log(4.0))

    def test_event_beyond_horizon_uses_last_bin(self):
        losses, empty = survival_nll(_logits(1), torch.tensor([4]), torch.tensor([1]))
        assert float(losses[0]) == pytest.approx(np.log(4.0))
        assert empty == 0

    def test_agrees_with_probability_reference(self):
        rng = np.random.default_rng(0)
        logits = torch.as_tensor(rng.normal(scale=2.0, size=(40, 5)))
        k = rng.integers(1, 7, size=40)
        event = rng.integers(0, 2, size=40)
        event[k == 6] = 1
        losses, _ = survival_nll(logits, torch.as_tensor(k), torch.as_tensor(event))
        reference = survival_nll_from_probs(probs_from_logits(logits).numpy(), k, event)
        np.testing.assert_allclose(losses.numpy(), reference, rtol=1e-10, atol=1e-12)

    def test_large_logits_stay_finite(self):
        logits = torch.tensor([[800.0, -800.0, 0.0]], dtype=torch.float64)
        losses, _ = survival_nll(logits, torch.tensor([2]), torch.tensor([1]))
        assert bool(torch.isfinite(losses).all())
        assert float(losses[0]) == pytest.approx(1600.0)


# ── Weights ───────────────────────────────────────────────────────────────────

class TestWeights:
    def test_arm_fractions(self):
        np.testing.assert_allclose(arm_fractions(np.array([1, 0, 0, 0])), [0.75, 0.25])

    def test_raw_propensity_formula(self):
        w = raw_propensity_weights(np.array([0.25, 0.25]), np.array([1, 0]), np.array([0.5, 0.5]))
        np.testing.assert_allclose(w, [2.0, 2.0 / 3.0])

    def test_scores_are_clipped(self):
        w = raw_propensity_weights(np.array([0.0, 1.0]), np.array([1, 0]), np.array([0.5, 0.5]))
        np.testing.assert_allclose(w, [50.0, 50.0])

    def test_mean_one_per_arm(self):
        rng = np.random.default_rng(1)
        t = rng.integers(0, 2, size=200)
        w, w_tilde = propensity_weights(rng.uniform(0.05, 0.95, size=200), t)
        for arm in (0, 1):
            assert w[t == arm].mean() == pytest.approx(1.0)
        alpha = arm_fractions(t)
        np.testing.assert_allclose(w_tilde, alpha[t] + (1 - alpha[t]) * w)

    def test_balanced_scores_give_unit_weights(self):
        t = np.array([0, 1, 0, 1])
        w, w_tilde = propensity_weights(np.full(4, 0.5), t)
        np.testing.assert_allclose(w, 1.0)
        np.testing.assert_allclose(w_tilde, 1.0)

    def test_normalize_skips_absent_arm(self):
        np.testing.assert_allclose(normalize_per_arm(np.array([2.0, 4.0]), np.array([1, 1])), [2 / 3, 4 / 3])

    def test_tilde_weights(self):
        np.testing.assert_allclose(
            tilde_weights(np.array([2.0, 0.5]), np.array([0, 1]), np.array([0.4, 0.6])),
            [0.4 + 0.6 * 2.0, 0.6 + 0.4 * 0.5],
        )

    def test_learned_weights_start_at_one(self):
        torch.testing.assert_close(LearnedWeights(np.array([0, 1, 1]))(), torch.ones(3, dtype=torch.float64))

    def test_learned_weights_renormalize(self):
        weights = LearnedWeights(np.array([0, 0, 1, 1, 1]))
        with torch.no_grad():
            weights.theta.copy_(torch.tensor([0.1, 2.0, -1.0, 0.0, 3.0], dtype=torch.float64))
        w = weights()
        assert float(w[:2].mean()) == pytest.approx(1.0)
        assert float(w[2:].mean()) == pytest.approx(1.0)


# ── Composite terms ───────────────────────────────────────────────────────────

class TestObjectiveTerms:
    hyper = HyperParams(hidden_width=6, embed_dim=3, psi_depth=1, gamma_wd=1.0, sinkhorn_eps=0.5)

    def _batch(self, t):
        rng = np.random.default_rng(2)
        n = len(t)
        return make_batch(rng.normal(size=(n, 2)), np.asarray(t), rng.integers(1, 4, size=n),
                          np.ones(n, dtype=int))

    def test_balance_absent_arm(self):
        z = torch.randn(4, 3, dtype=torch.float64)
        t = torch.ones(4, dtype=torch.int64)
        assert balance_term(z, t, torch.ones(4, dtype=torch.float64), self.hyper) is None

    def test_single_arm_batch_skips_balance(self):
        model = init_params(2, GRID, self.hyper)
        terms = total_objective(model, self._batch([1, 1, 1]), self.hyper)
        assert terms.skipped_balance
        assert float(terms.balance) == 0.0

    def test_gamma_zero_ignores_balance(self):
        hyper = self.hyper.replace(gamma_wd=0.0)
        model = init_params(2, GRID, hyper)
        terms = total_objective(model, self._batch([0, 1, 0, 1]), hyper)
        assert not terms.skipped_balance
        assert float(terms.balance) == 0.0

    def test_total_composition(self):
        hyper = self.hyper.replace(lambda_r=0.3, lambda_w=0.2)
        model = init_params(2, GRID, hyper)
        batch = self._batch([0, 1, 0, 1])
        terms = total_objective(model, batch, hyper, WeightMode.PROPENSITY)
        expected = (terms.nll + 1.0 / 4 * terms.balance + 0.3 / 2.0 * terms.omega + 0.2 / 4 * terms.theta)
        assert float(terms.total) == pytest.approx(float(expected))
        assert float(terms.theta) == pytest.approx(2.0)

    def test_uniform_mode_has_no_weight_ridge(self):
        model = init_params(2, GRID, self.hyper)
        omega, theta = ridge_penalties(model, None)
        assert float(omega) > 0.0
        assert float(theta) == 0.0


# ── Gradient check ────────────────────────────────────────────────────────────

def _random_problem(i):
    rng = np.random.default_rng(100 + i)
    n, d = 6 + i % 5, 2 + i % 3
    t = rng.permutation(np.arange(n) % 2)
    k = rng.integers(1, GRID.m + 2, size=n)
    event = rng.integers(0, 2, size=n)
    hyper = HyperParams(
        hidden_width=5, embed_dim=3, phi_depth=1 + i % 2, psi_depth=i % 2,
        gamma_wd=(0.0, 0.5, 2.0)[i % 3], lambda_r=(0.0, 0.05)[i % 2], lambda_w=0.1,
        sinkhorn_eps=0.5, sinkhorn_max_iter=5000, sinkhorn_tol=1e-12,
        censored_tail=(CensoredTail.ZERO, CensoredTail.INCLUDE)[i % 2], seed=i,
    )
    w, w_tilde = propensity_weights(rng.uniform(0.2, 0.8, size=n), t)
    batch = make_batch(rng.normal(size=(n, d)), t, k, event, w, w_tilde)
    return init_params(d, GRID, hyper), batch, hyper, rng


class TestGradient:
    @pytest.mark.parametrize("i", range(20))
    def test_matches_finite_differences(self, i):
        model, batch, hyper, rng = _random_problem(i)
        params = list(model.parameters())
        analytic = torch.cat([g.reshape(-1) for g in gradient(model, batch, hyper)])

        theta0 = parameters_to_vector(params).detach().clone()
        direction = torch.as_tensor(rng.normal(size=theta0.numel()))
        direction /= direction.norm()
        h = 1e-5

        def objective_at(theta):
            vector_to_parameters(theta, params)
            with torch.no_grad():
                return float(total_objective(model, batch, hyper).total)

        numeric = (objective_at(theta0 + h * direction) - objective_at(theta0 - h * direction)) / (2 * h)
        vector_to_parameters(theta0, params)
        exact = float(analytic @ direction)
        assert abs(exact - numeric) <= 1e-4 * max(abs(numeric), 1e-3)

    def test_extra_parameters_receive_gradient(self):
        model, batch, hyper, _ = _random_problem(1)
        learned = LearnedWeights(batch.t.numpy())
        batch.w = learned()
        grads = gradient(model, batch, hyper.replace(weight_mode=WeightMode.LEARNED), extra=[learned.theta])
        assert grads[-1].shape == learned.theta.shape
        assert float(grads[-1].abs().sum()) > 0.0


def _directional(fn, params, rng, h=1e-5):
    """(autograd, central difference) derivative of fn() along a random unit direction."""
    grads = torch.autograd.grad(fn(), params, allow_unused=True)
    analytic = torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])
    theta0 = parameters_to_vector(params).detach().clone()
    direction = torch.as_tensor(rng.normal(size=theta0.numel()))
    direction /= direction.norm()

    def value_at(theta):
        vector_to_parameters(theta, params)
        with torch.no_grad():
            return float(fn())

    numeric = (value_at(theta0 + h * direction) - value_at(theta0 - h * direction)) / (2 * h)
    vector_to_parameters(theta0, params)
    return float(analytic @ direction), numeric


TERMS = ("nll", "omega", "theta", "balance_phi", "balance_w")


class TestGradientTerms:
    def _setup(self, term, i):
        model, batch, hyper, rng = _random_problem(i)
        hyper = hyper.replace(gamma_wd=1.0)
        learned = LearnedWeights(batch.t.numpy())
        with torch.no_grad():
            learned.theta.copy_(torch.as_tensor(rng.normal(size=batch.size)))
        model_params = list(model.parameters())
        cases = {
            "nll": (lambda: total_objective(model, batch, hyper).nll, model_params),
            "omega": (lambda: ridge_penalties(model)[0], model_params),
            "theta": (lambda: ridge_penalties(model, learned())[1], [learned.theta]),
            "balance_phi": (lambda: balance_term(model.embed(batch.x), batch.t, batch.w, hyper), model_params),
            "balance_w": (lambda: balance_term(model.embed(batch.x), batch.t, learned(), hyper), [learned.theta]),
        }
        fn, params = cases[term]
        return fn, params, rng

    @pytest.mark.parametrize("i", range(4))
    @pytest.mark.parametrize("term", TERMS)
    def test_term_matches_finite_differences(self, term, i):
        fn, params, rng = self._setup(term, i)
        exact, numeric = _directional(fn, params, rng)
        assert abs(exact - numeric) <= 1e-4 * max(abs(numeric), 1e-3)

    @pytest.mark.parametrize("term", ("balance_phi", "balance_w", "theta"))
    def test_term_gradient_is_nonzero(self, term):
        fn, params, _ = self._setup(term, 2)
        grads = torch.autograd.grad(fn(), params, allow_unused=True)
        assert sum(float(g.abs().sum()) for g in grads if g is not None) > 0.0

    def test_balance_moves_representation_only(self):
        model, batch, hyper, _ = _random_problem(1)
        value = balance_term(model.embed(batch.x), batch.t, batch.w, hyper.replace(gamma_wd=1.0))
        names = [name for name, _ in model.named_parameters()]
        grads = torch.autograd.grad(value, list(model.parameters()), allow_unused=True)
        for name, g in zip(names, grads):
            if name.startswith("psi."):
                assert g is None
            else:
                assert g is not None
        assert any(float(g.abs().sum()) > 0.0 for name, g in zip(names, grads) if name.startswith("phi."))

    @pytest.mark.parametrize("i", range(6))
    def test_gamma_zero_is_the_likelihood_gradient(self, i):
        model, batch, hyper, _ = _random_problem(i)
        hyper = hyper.replace(gamma_wd=0.0, lambda_r=0.0, lambda_w=0.0, censored_tail=CensoredTail.ZERO)
        params = list(model.parameters())

        probs = probs_from_logits(model(batch.x, batch.t))
        bins = probs.shape[1]
        losses = []
        for row, k, event in zip(probs, batch.k.tolist(), batch.event.tolist()):
            if event == 1:
                losses.append(-torch.log(row[k - 1]))
            elif k < bins:
                losses.append(-torch.log(row[k:].sum()))
            else:
                losses.append(torch.zeros((), dtype=torch.float64))
        nll = (batch.w_tilde * torch.stack(losses)).sum() / batch.size
        expected = torch.autograd.grad(nll, params, allow_unused=True)

        for got, want in zip(gradient(model, batch, hyper), expected):
            want = torch.zeros_like(got) if want is None else want
            torch.testing.assert_close(got, want, rtol=1e-10, atol=1e-12)

    def test_zero_loss_batch_has_zero_gradient(self):
        hyper = HyperParams(hidden_width=5, embed_dim=3, psi_depth=1, gamma_wd=0.0, lambda_r=0.0, lambda_w=0.0)
        model = init_params(2, GRID, hyper)
        last = model.psi[-1]
        with torch.no_grad():
            last.weight.zero_()
            last.bias.fill_(-60.0)
            last.bias[0] = 60.0
        rng = np.random.default_rng(5)
        batch = make_batch(rng.normal(size=(6, 2)), np.arange(6) % 2, np.ones(6, dtype=int), np.ones(6, dtype=int))

        assert float(total_objective(model, batch, hyper).total) < 1e-20
        for g in gradient(model, batch, hyper):
            assert float(g.abs().max()) < 1e-20


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
