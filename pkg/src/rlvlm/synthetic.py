"""A small seeded environment with one clearly best prompt.

States are fixed random unit vectors. Every state rewards the same optimal
action with 1.0; the other actions draw fixed rewards from [0, 0.5). The
feedback score of an action equals its reward, standing in for a retrieval
signal that agrees with the environment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pipeline import RunConfig, UpdateLog
from .rlcore import (
    PolicyParams,
    Transition,
    init_policy,
    log_prob,
    policy_forward,
    ppo_update,
    sample_action,
)


@dataclass
class SyntheticPromptEnv:
    n_actions: int = 10
    obs_dim: int = 16
    n_states: int = 4
    optimal: int = 3
    steps: int = 3
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        obs = rng.normal(size=(self.n_states, self.obs_dim))
        self.observations = obs / np.linalg.norm(obs, axis=1, keepdims=True)
        self.rewards = rng.uniform(0.0, 0.5, size=(self.n_states, self.n_actions))
        self.rewards[:, self.optimal] = 1.0

    def reward(self, state: int, action: int) -> float:
        return float(self.rewards[state, action])

    def best_actions(self) -> np.ndarray:
        """Exhaustive per-state argmax of the reward table."""
        return np.argmax(self.rewards, axis=1)

    def rollout(self, params: PolicyParams, rng: np.random.Generator) -> list[Transition]:
        states = rng.integers(0, self.n_states, size=self.steps + 1)
        out = []
        for k in range(self.steps):
            s, s_next = self.observations[states[k]], self.observations[states[k + 1]]
            a = sample_action(policy_forward(s, params), rng)
            r = self.reward(states[k], a)
            out.append(Transition(s, a, r, s_next, log_prob(s, a, params), r, k == self.steps - 1))
        return out

    def optimal_rate(self, params: PolicyParams) -> float:
        """Expected fraction of optimal selections, averaged over states."""
        return float(np.mean([policy_forward(s, params)[self.optimal] for s in self.observations]))


def train_synthetic(
    env: SyntheticPromptEnv, config: RunConfig, updates: int, target: float | None = None
) -> tuple[PolicyParams, list[UpdateLog], list[float]]:
    """PPO on the synthetic environment; stops early once ``optimal_rate >= target``."""
    rng = np.random.default_rng(config.seed)
    params = init_policy(env.obs_dim, env.n_actions, config.hidden, config.seed)
    opt = config.optimizer(params)
    log, rates = [], []
    for u in range(updates):
        batch = [t for _ in range(config.episode_batch) for t in env.rollout(params, rng)]
        params.sync()
        params, opt, stats = ppo_update(params, batch, opt, config.ppo, rng, use_feedback=config.feedback)
        log.append(
            UpdateLog(
                u,
                stats.objective,
                stats.value_loss,
                float(np.mean([t.r for t in batch])),
                float(np.mean([t.feedback for t in batch])),
                len(batch),
                0,
            )
        )
        rates.append(env.optimal_rate(params))
        if target is not None and rates[-1] >= target:
            break
    return params, log, rates
