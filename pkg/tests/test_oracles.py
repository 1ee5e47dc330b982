import numpy as np
import pytest

from radio.oracles import (
    OracleError,
    constrained_qp_prune,
    obs_loop,
    obs_prune_step,
    obs_step_losses,
)


class TestPruneStep:
    def test_identity_hessian_picks_smallest(self):
        p, delta, loss = obs_prune_step(np.array([1.0, 2.0]), np.eye(2))
        assert p == 0
        assert np.allclose(delta, [-1.0, 0.0], atol=1e-15)
        assert loss == pytest.approx(0.5, abs=1e-15)

    def test_hand_worked_tie(self):
        hess = np.array([[2.0, 1.0], [1.0, 2.0]])
        p, delta, loss = obs_prune_step(np.array([1.0, 1.0]), hess)
        assert p == 0  # tie broken to the lowest index
        assert loss == pytest.approx(0.75, abs=1e-12)
        assert np.allclose(delta, [-1.0, 0.5], atol=1e-12)

    def test_constraint_exact(self, rng):
        for _ in range(30):
            n = int(rng.integers(2, 8))
            a = rng.normal(size=(n, n))
            hess = a @ a.T + n * np.eye(n)
            theta = rng.normal(size=n)
            p, delta, _ = obs_prune_step(theta, hess)
            assert delta[p] == -theta[p]  # exact, not approximate

    def test_matches_constrained_qp_oracle(self, rng):
        for _ in range(40):
            a = rng.normal(size=(5, 5))
            hess = a @ a.T + 5 * np.eye(5)
            theta = rng.normal(size=5)
            p, delta, loss = obs_prune_step(theta, hess)
            p2, delta2, loss2 = constrained_qp_prune(theta, hess)
            assert p == p2
            assert loss == pytest.approx(loss2, rel=1e-6)
            assert np.allclose(delta, delta2, atol=1e-6)

    def test_chosen_loss_is_minimal(self, rng):
        a = rng.normal(size=(6, 6))
        hess = a @ a.T + 6 * np.eye(6)
        theta = rng.normal(size=6)
        p, _, loss = obs_prune_step(theta, hess)
        hinv = np.linalg.inv(hess)
        for i in range(6):
            alt = 0.5 * theta[i] ** 2 / hinv[i, i]
            assert loss <= alt + 1e-12

    def test_singular_rejected(self):
        with pytest.raises(OracleError):
            obs_prune_step(np.ones(2), np.ones((2, 2)))

    def test_asymmetric_rejected(self):
        with pytest.raises(OracleError):
            obs_prune_step(np.ones(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestLoop:
    def test_zero_steps_identity(self, rng):
        theta = rng.normal(size=4)
        assert np.array_equal(obs_loop(theta, np.eye(4), 0), theta)

    def test_diagonal_keeps_largest_loss(self):
        theta = np.array([3.0, 1.0, 2.0, 0.5])
        hess = np.diag([1.0, 4.0, 1.0, 1.0])
        # losses theta_i^2 * H_ii / 2 = 4.5, 2.0, 2.0, 0.125; survivor index 0
        out = obs_loop(theta, hess, 3)
        assert out[0] == 3.0
        assert np.array_equal(out[1:], np.zeros(3))

    def test_pruned_stay_pruned(self, rng):
        a = rng.normal(size=(7, 7))
        hess = a @ a.T + 7 * np.eye(7)
        theta = rng.normal(size=7)
        out = obs_loop(theta, hess, 4)
        assert np.sum(out == 0.0) == 4

    def test_greedy_loss_accounting(self, rng):
        # on a diagonal Hessian the step losses sum exactly to the total
        # quadratic loss; in general the total stays within the greedy sum
        theta = rng.normal(size=6)
        hess = np.diag(rng.uniform(0.5, 2.0, 6))
        k = 4
        out = obs_loop(theta, hess, k)
        losses = obs_step_losses(theta, hess, k)
        delta = out - theta
        total = 0.5 * float(delta @ hess @ delta)
        assert total == pytest.approx(sum(losses), rel=1e-12)

    def test_cannot_prune_all(self):
        with pytest.raises(OracleError):
            obs_loop(np.ones(3), np.eye(3), 3)
