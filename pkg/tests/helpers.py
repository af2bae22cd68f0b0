"""Random policy/batch generators shared by the rlcore and acceptance tests."""

from __future__ import annotations

import numpy as np

from rlvlm.rlcore import PolicyParams, PpoConfig, Transition, copy_weights, init_policy, log_prob


def random_case(rng: np.random.Generator, max_obs=6, max_actions=6, max_hidden=8, max_batch=6):
    """A (params, batch, cfg) triple with theta moved away from theta_old."""
    obs = int(rng.integers(2, max_obs + 1))
    n_act = int(rng.integers(2, max_actions + 1))
    hidden = int(rng.integers(2, max_hidden + 1))
    params = init_policy(obs, n_act, hidden=hidden, seed=int(rng.integers(1 << 30)))
    theta = copy_weights(params.theta)
    for k in theta:
        theta[k] = theta[k] + rng.normal(scale=0.3, size=theta[k].shape)
    old = copy_weights(theta)
    for k in old:
        old[k] = old[k] + rng.normal(scale=0.2, size=old[k].shape)
    params = PolicyParams(theta, old)
    cfg = PpoConfig(
        clip_eps=float(rng.uniform(0.1, 0.3)),
        feedback_weight=float(rng.uniform(0.0, 1.0)),
        gamma=float(rng.uniform(0.8, 1.0)),
    )
    batch = []
    for _ in range(int(rng.integers(1, max_batch + 1))):
        s, s2 = rng.normal(size=obs), rng.normal(size=obs)
        size = int(rng.integers(1, n_act + 1))
        actions = tuple(sorted(rng.choice(n_act, size=size, replace=False).tolist()))
        a = int(rng.choice(actions))
        batch.append(
            Transition(
                s=s,
                a=a,
                r=float(rng.normal()),
                s_next=s2,
                logp_old=log_prob(s, a, old, actions),
                feedback=float(rng.uniform(-1, 1)),
                done=bool(rng.random() < 0.2),
                actions=actions,
            )
        )
    return params, batch, cfg


def numeric_grad(fn, params: PolicyParams, h=1e-5):
    """Central differences of ``fn(params)`` with respect to every entry of theta."""
    grad = {}
    for k, w in params.theta.items():
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + h
            up = fn(params)
            w[idx] = orig - h
            down = fn(params)
            w[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grad[k] = g
    return grad


def flat(grad):
    return np.concatenate([np.ravel(grad[k]) for k in sorted(grad)])


def relative_error(analytic, numeric, floor=1e-8):
    a, n = flat(analytic), flat(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))
