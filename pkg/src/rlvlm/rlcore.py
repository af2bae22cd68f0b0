"""PPO over prompt indices with an external-feedback term.

Everything is plain numpy with hand-derived gradients. Objectives are
returned as values to *maximize*; callers descend the negated gradient.

Network: observation -> ReLU hidden layer -> action logits, with a scalar
value head sharing the hidden layer. Retired prompts are handled by masking
their logits to -inf, so the parameter shapes never change.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

Weights = dict[str, np.ndarray]

PARAM_NAMES = ("w1", "b1", "w_pi", "b_pi", "w_v", "b_v")
CHECKPOINT_FORMAT = "rlvlm-checkpoint"
CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    feedback_weight: float = 0.5
    gamma: float = 0.99
    epochs: int = 4
    minibatch: int = 32
    value_coef: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if self.feedback_weight < 0.0:
            raise ValueError(f"feedback_weight must be >= 0, got {self.feedback_weight}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be positive")


@dataclass
class PolicyParams:
    """Trainable weights ``theta`` plus the frozen snapshot ``theta_old``.

    ``theta_old`` only changes through :meth:`sync`.
    """

    theta: Weights
    theta_old: Weights

    @property
    def obs_dim(self) -> int:
        return self.theta["w1"].shape[0]

    @property
    def n_actions(self) -> int:
        return self.theta["b_pi"].shape[0]

    def sync(self) -> None:
        self.theta_old = copy_weights(self.theta)

    def copy(self) -> "PolicyParams":
        return PolicyParams(copy_weights(self.theta), copy_weights(self.theta_old))


def copy_weights(w: Weights) -> Weights:
    return {k: np.array(v, dtype=float, copy=True) for k, v in w.items()}


def init_policy(obs_dim: int, n_actions: int, hidden: int = 64, seed: int = 0) -> PolicyParams:
    """Seeded fan-in uniform init; the action head starts near zero (near-uniform policy)."""
    rng = np.random.default_rng(seed)
    b_in = 1.0 / math.sqrt(obs_dim)
    b_h = 1.0 / math.sqrt(hidden)
    theta = {
        "w1": rng.uniform(-b_in, b_in, (obs_dim, hidden)),
        "b1": np.zeros(hidden),
        "w_pi": rng.uniform(-b_h, b_h, (hidden, n_actions)) * 0.01,
        "b_pi": np.zeros(n_actions),
        "w_v": rng.uniform(-b_h, b_h, hidden),
        "b_v": np.zeros(1),
    }
    return PolicyParams(theta, copy_weights(theta))


def zero_policy(obs_dim: int, n_actions: int, hidden: int = 64) -> PolicyParams:
    theta = {
        "w1": np.zeros((obs_dim, hidden)),
        "b1": np.zeros(hidden),
        "w_pi": np.zeros((hidden, n_actions)),
        "b_pi": np.zeros(n_actions),
        "w_v": np.zeros(hidden),
        "b_v": np.zeros(1),
    }
    return PolicyParams(theta, copy_weights(theta))


def _weights(params: PolicyParams | Weights) -> Weights:
    return params.theta if isinstance(params, PolicyParams) else params


def _mask(actions: Sequence[int] | None, n_actions: int) -> np.ndarray:
    mask = np.zeros(n_actions, dtype=bool)
    if actions is None:
        mask[:] = True
    else:
        mask[list(actions)] = True
    if not mask.any():
        raise ValueError("empty action space")
    return mask


def _check_obs(S: np.ndarray, w: Weights) -> None:
    if S.shape[-1] != w["w1"].shape[0]:
        raise ValueError(f"observation dim {S.shape[-1]} != network input {w['w1'].shape[0]}")


def _log_softmax_masked(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    lse = zmax + np.log(np.sum(np.exp(z - zmax), axis=-1, keepdims=True))
    return z - lse


def policy_forward(
    s: np.ndarray, params: PolicyParams | Weights, actions: Sequence[int] | None = None
) -> np.ndarray:
    """Action probabilities pi(.|s); entries outside ``actions`` are exactly 0."""
    w = _weights(params)
    s = np.asarray(s, dtype=float)
    _check_obs(s, w)
    h = np.maximum(s @ w["w1"] + w["b1"], 0.0)
    logits = h @ w["w_pi"] + w["b_pi"]
    return np.exp(_log_softmax_masked(logits, _mask(actions, logits.shape[-1])))


def log_prob(s: np.ndarray, a: int, params: PolicyParams | Weights, actions=None) -> float:
    w = _weights(params)
    s = np.asarray(s, dtype=float)
    _check_obs(s, w)
    h = np.maximum(s @ w["w1"] + w["b1"], 0.0)
    logits = h @ w["w_pi"] + w["b_pi"]
    return float(_log_softmax_masked(logits, _mask(actions, logits.shape[-1]))[a])


def state_value(s: np.ndarray, params: PolicyParams | Weights) -> float:
    w = _weights(params)
    s = np.asarray(s, dtype=float)
    _check_obs(s, w)
    h = np.maximum(s @ w["w1"] + w["b1"], 0.0)
    return float(h @ w["w_v"] + w["b_v"][0])


@dataclass(frozen=True)
class Transition:
    """One (s, a, r, s') step.

    ``logp_old`` is the behaviour policy's log-probability of ``a`` at
    collection time; ``actions`` is the action space in force (None = all);
    ``done`` marks the last step of an episode.
    """

    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    logp_old: float
    feedback: float | None = None
    done: bool = False
    actions: tuple[int, ...] | None = None

    def __post_init__(self):
        if not math.isfinite(self.r):
            raise ValueError(f"reward must be finite, got {self.r}")
        if self.feedback is not None and not -1.0 <= self.feedback <= 1.0:
            raise ValueError(f"feedback must lie in [-1, 1], got {self.feedback}")


def advantage(t: Transition, params: PolicyParams | Weights, gamma: float) -> float:
    """One-step advantage ``r + gamma * V(s') - V(s)``.

    With a :class:`PolicyParams` the frozen snapshot's value head is used, so
    the advantage stays constant while ``theta`` moves during an update.
    """
    w = params.theta_old if isinstance(params, PolicyParams) else params
    q_hat = t.r + (0.0 if t.done else gamma * state_value(t.s_next, w))
    return q_hat - state_value(t.s, w)


class ObjectiveResult(NamedTuple):
    value: float
    grad: Weights
    unclipped: float  # same objective with the ratio left unclipped


def _stack(batch: Sequence[Transition], n_actions: int):
    S = np.stack([np.asarray(t.s, dtype=float) for t in batch])
    a = np.array([t.a for t in batch], dtype=int)
    masks = np.stack([_mask(t.actions, n_actions) for t in batch])
    if not masks[np.arange(len(batch)), a].all():
        raise ValueError("transition action outside its recorded action space")
    return S, a, masks


def _zero_grad(w: Weights) -> Weights:
    return {k: np.zeros_like(v) for k, v in w.items()}


def _surrogate(
    batch: Sequence[Transition],
    params: PolicyParams,
    cfg: PpoConfig,
    feedback_weight: float,
) -> ObjectiveResult:
    if not batch:
        raise ValueError("empty batch")
    w = params.theta
    S, a, masks = _stack(batch, params.n_actions)
    _check_obs(S, w)
    B = len(batch)
    rows = np.arange(B)

    pre = S @ w["w1"] + w["b1"]
    H = np.maximum(pre, 0.0)
    logits = H @ w["w_pi"] + w["b_pi"]
    logp_all = _log_softmax_masked(logits, masks)
    pi = np.exp(logp_all)
    logp = logp_all[rows, a]

    A = np.array([advantage(t, params, cfg.gamma) for t in batch])
    ratio = np.exp(logp - np.array([t.logp_old for t in batch]))
    unclipped = ratio * A
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * A
    surr = np.minimum(unclipped, clipped)
    # d surr / d logp: the clipped branch is flat once it is the smaller one
    coef = np.where(unclipped <= clipped, unclipped, 0.0)
    unclipped_terms = unclipped

    if feedback_weight != 0.0:
        F = np.clip([t.feedback for t in batch], -1.0, 1.0)
        fb = feedback_weight * F
        surr = surr + fb * logp
        unclipped_terms = unclipped_terms + fb * logp
        coef = coef + fb

    onehot = np.zeros_like(pi)
    onehot[rows, a] = 1.0
    dlogits = coef[:, None] * (onehot - pi) / B
    dH = dlogits @ w["w_pi"].T
    dpre = dH * (pre > 0)
    grad = _zero_grad(w)
    grad["w_pi"] = H.T @ dlogits
    grad["b_pi"] = dlogits.sum(axis=0)
    grad["w1"] = S.T @ dpre
    grad["b1"] = dpre.sum(axis=0)
    return ObjectiveResult(float(np.mean(surr)), grad, float(np.mean(unclipped_terms)))


def ppo_objective(batch: Sequence[Transition], params: PolicyParams, cfg: PpoConfig) -> ObjectiveResult:
    """Mean clipped surrogate ``min(r A, clip(r, 1-eps, 1+eps) A)`` and its gradient."""
    return _surrogate(batch, params, cfg, 0.0)


def feedback_objective(
    batch: Sequence[Transition], params: PolicyParams, cfg: PpoConfig
) -> ObjectiveResult:
    """Clipped surrogate plus ``lambda * F * log pi(a|s)``.

    The feedback score enters through the log-likelihood so that it carries a
    gradient. With ``lambda == 0`` the result is exactly :func:`ppo_objective`.
    """
    lam = cfg.feedback_weight
    if lam > 0.0:
        missing = [i for i, t in enumerate(batch) if t.feedback is None]
        if missing:
            raise ValueError(f"feedback score missing on transitions {missing[:5]}")
    return _surrogate(batch, params, cfg, lam)


def value_loss(batch: Sequence[Transition], params: PolicyParams, cfg: PpoConfig) -> ObjectiveResult:
    """Mean squared error of V(s) against the one-step target (to minimize)."""
    if not batch:
        raise ValueError("empty batch")
    w = params.theta
    S = np.stack([np.asarray(t.s, dtype=float) for t in batch])
    _check_obs(S, w)
    targets = np.array(
        [t.r + (0.0 if t.done else cfg.gamma * state_value(t.s_next, params.theta_old)) for t in batch]
    )
    pre = S @ w["w1"] + w["b1"]
    H = np.maximum(pre, 0.0)
    v = H @ w["w_v"] + w["b_v"][0]
    err = v - targets
    loss = float(np.mean(err**2))
    dv = 2.0 * err / len(batch)
    dpre = np.outer(dv, w["w_v"]) * (pre > 0)
    grad = _zero_grad(w)
    grad["w_v"] = H.T @ dv
    grad["b_v"] = np.array([dv.sum()])
    grad["w1"] = S.T @ dpre
    grad["b1"] = dpre.sum(axis=0)
    return ObjectiveResult(loss, grad, loss)


@dataclass
class OptimizerState:
    """First/second moment estimates and step hyperparameters.

    ``bias_correction`` is off by default: the update is
    ``theta - lr * m / (sqrt(v) + eps)`` on the raw moments.
    """

    m: Weights
    v: Weights
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = False

    @classmethod
    def zeros_like(cls, params: PolicyParams | Weights, **hyper) -> "OptimizerState":
        w = _weights(params)
        return cls(_zero_grad(w), _zero_grad(w), **hyper)


def optimizer_step(params, grad: Weights, state: OptimizerState):
    """One moment-based descent step on ``grad``; returns ``(params, state)``.

    Inputs are left untouched. A non-finite gradient raises
    :class:`TrainingError` and nothing is updated.
    """
    w = _weights(params)
    if set(grad) != set(w):
        raise ValueError(f"gradient keys {sorted(grad)} != parameter keys {sorted(w)}")
    for k, g in grad.items():
        if np.shape(g) != np.shape(w[k]):
            raise ValueError(f"gradient shape mismatch for {k}: {np.shape(g)} vs {np.shape(w[k])}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {k}; step rejected")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_w, new_m, new_v = {}, {}, {}
    for k in w:
        g = np.asarray(grad[k], dtype=float)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        if state.bias_correction:
            m_hat, v_hat = m / (1.0 - b1**t), v / (1.0 - b2**t)
        else:
            m_hat, v_hat = m, v
        new_w[k] = w[k] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    new_state = replace(state, m=new_m, v=new_v, t=t)
    if isinstance(params, PolicyParams):
        return PolicyParams(new_w, params.theta_old), new_state
    return new_w, new_state


def sample_action(dist: np.ndarray, rng: np.random.Generator) -> int:
    p = np.asarray(dist, dtype=float)
    return int(rng.choice(len(p), p=p / p.sum()))


def cross_entropy(predicted: np.ndarray, target: np.ndarray) -> float:
    """``-sum(y * log(y_hat))`` with predictions floored at 1e-12."""
    p = np.maximum(np.asarray(predicted, dtype=float), PROB_FLOOR)
    y = np.asarray(target, dtype=float)
    return float(-np.sum(y * np.log(p)))


@dataclass
class UpdateStats:
    objective: float
    value_loss: float
    steps: int


def ppo_update(
    params: PolicyParams,
    batch: Sequence[Transition],
    state: OptimizerState,
    cfg: PpoConfig,
    rng: np.random.Generator,
    use_feedback: bool = True,
) -> tuple[PolicyParams, OptimizerState, UpdateStats]:
    """Several epochs of minibatch ascent on the surrogate, plus value regression.

    ``params.theta_old`` must already hold the snapshot that produced ``batch``.
    """
    if not batch:
        raise ValueError("empty batch")
    objective = feedback_objective if use_feedback else ppo_objective
    objs, vls = [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), cfg.minibatch):
            mb = [batch[i] for i in order[start : start + cfg.minibatch]]
            obj = objective(mb, params, cfg)
            vl = value_loss(mb, params, cfg)
            if not (math.isfinite(obj.value) and math.isfinite(vl.value)):
                raise TrainingError(f"non-finite loss (objective={obj.value}, value={vl.value})")
            grad = {k: cfg.value_coef * vl.grad[k] - obj.grad[k] for k in obj.grad}
            params, state = optimizer_step(params, grad, state)
            objs.append(obj.value)
            vls.append(vl.value)
    return params, state, UpdateStats(float(np.mean(objs)), float(np.mean(vls)), len(objs))


# -- checkpoints ---------------------------------------------------------------


def _dump_weights(w: Weights) -> dict:
    return {k: {"shape": list(v.shape), "data": [float(x) for x in np.ravel(v)]} for k, v in w.items()}


def _load_weights(d: dict) -> Weights:
    return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d.items()}


@dataclass
class Checkpoint:
    params: PolicyParams
    optimizer: OptimizerState
    ppo: PpoConfig
    seed: int
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    opt = ckpt.optimizer
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": ckpt.seed,
        "ppo": asdict(ckpt.ppo),
        "theta": _dump_weights(ckpt.params.theta),
        "theta_old": _dump_weights(ckpt.params.theta_old),
        "optimizer": {
            "m": _dump_weights(opt.m),
            "v": _dump_weights(opt.v),
            "t": opt.t,
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "bias_correction": opt.bias_correction,
        },
        "extra": ckpt.extra,
    }
    # float repr round-trips exactly through json
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a policy checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    o = doc["optimizer"]
    opt = OptimizerState(
        m=_load_weights(o["m"]),
        v=_load_weights(o["v"]),
        t=o["t"],
        lr=o["lr"],
        beta1=o["beta1"],
        beta2=o["beta2"],
        eps=o["eps"],
        bias_correction=o["bias_correction"],
    )
    params = PolicyParams(_load_weights(doc["theta"]), _load_weights(doc["theta_old"]))
    return Checkpoint(params, opt, PpoConfig(**doc["ppo"]), doc["seed"], doc.get("extra", {}))
