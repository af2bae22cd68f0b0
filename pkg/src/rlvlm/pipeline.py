"""Iterative caption refinement: caption, rank, select, reward, retrieve, repeat.

Each image is one episode of ``config.iterations`` steps (three by default).
Within an iteration the order is fixed:

1. caption the image under the current conditioning prompt
2. apply the feedback policy update queued by the *previous* iteration, if any
3. rank the live prompts against the caption
4. sample a prompt from the policy and reward it with its ranking score
5. prune the prompt list
6. caption under the chosen prompt, score that text against the knowledge base
7. queue a feedback update when retrieval beats the internal reward by
   ``trigger_margin``; it takes effect at step 2 of the next iteration

Episodes work on a private copy of the policy, so feedback updates never
leak between images and runs are independent of scheduling.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import __version__
from .gateway import Gateway, GatewayError, image_digest
from .metrics import decode_pnm, load_lexicons, semantic_similarity, text_stats
from .prompts import PromptCatalog, RankedPrompt, default_retention, rank_prompts, update_prompt_list
from .rag import VectorIndex, mips_retrieve
from .rlcore import (
    OptimizerState,
    PolicyParams,
    PpoConfig,
    Transition,
    feedback_objective,
    init_policy,
    log_prob,
    optimizer_step,
    policy_forward,
    ppo_objective,
    ppo_update,
    sample_action,
)

REPORT_SCHEMA = 1


class IterationError(RuntimeError):
    def __init__(self, stage: str, iteration: int, cause: Exception):
        super().__init__(f"iteration {iteration} failed at stage '{stage}': {cause}")
        self.stage = stage
        self.iteration = iteration
        self.cause = cause


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 3
    seed: int = 7
    retention_k: int | None = None
    retention_floor: int = 3
    trigger_margin: float = 0.05
    base_prompt: str = "Describe the scene."
    feedback: bool = True  # False gives the PPO-only baseline
    lam: float = 0.5
    clip_eps: float = 0.2
    gamma: float = 0.99
    epochs: int = 4
    minibatch: int = 32
    value_coef: float = 0.5
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    bias_correction: bool = False
    hidden: int = 64
    episode_batch: int = 8

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.retention_k is not None and self.retention_k < 1:
            raise ValueError("retention_k must be >= 1")
        if self.retention_floor < 1:
            raise ValueError("retention_floor must be >= 1")
        _ = self.ppo  # constructing the PpoConfig validates the PPO fields

    @property
    def ppo(self) -> PpoConfig:
        return PpoConfig(
            clip_eps=self.clip_eps,
            feedback_weight=self.lam,
            gamma=self.gamma,
            epochs=self.epochs,
            minibatch=self.minibatch,
            value_coef=self.value_coef,
            seed=self.seed,
        )

    def optimizer(self, params: PolicyParams) -> OptimizerState:
        return OptimizerState.zeros_like(
            params,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.opt_eps,
            bias_correction=self.bias_correction,
        )

    def retention(self, n: int) -> int:
        floor = min(n, self.retention_floor)
        k = default_retention(n, self.retention_floor) if self.retention_k is None else self.retention_k
        return max(floor, min(k, n))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class IterationState:
    i: int
    catalog: PromptCatalog
    prompt: str  # conditions the next caption
    feedback: bool = False
    pending: Transition | None = None

    def __post_init__(self):
        if self.feedback and self.pending is None:
            raise ValueError("feedback flag set without a pending update")


@dataclass
class Episode:
    """Mutable per-image context threaded through :func:`run_iteration`."""

    image: bytes
    config: RunConfig
    policy: PolicyParams
    optimizer: OptimizerState
    index: VectorIndex
    gateway: Gateway
    rng: np.random.Generator


@dataclass
class IterationRecord:
    iteration: int
    text: str
    policy_updated: bool
    policy_digest: str
    catalog_size: int
    action: int
    prompt_id: str
    prompt_text: str
    probability: float
    reward: float
    next_catalog_size: int
    feedback_score: float
    rag_doc: str
    objective: float
    feedback_triggered: bool
    feedback_action: int | None = None


@dataclass
class PipelineReport:
    image_id: str
    image_digest: str
    width: int
    height: int
    channels: int
    seed: int
    config: dict
    initial_caption: str = ""
    iterations: list[IterationRecord] = field(default_factory=list)
    final_text: str = ""
    final_prompt_id: str = ""
    metrics: dict = field(default_factory=dict)
    complete: bool = False
    error: str | None = None
    schema: int = REPORT_SCHEMA
    version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineReport":
        d = dict(d)
        d["iterations"] = [IterationRecord(**r) for r in d.get("iterations", [])]
        return cls(**d)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "PipelineReport":
        return cls.from_dict(json.loads(s))


def canonical_json(obj) -> str:
    """Sorted keys, ASCII only, floats at 17 significant digits."""
    return _canon(obj) + "\n"


def _canon(x) -> str:
    if isinstance(x, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + _canon(x[k]) for k in sorted(x)) + "}"
    if isinstance(x, (list, tuple)):
        return "[" + ",".join(_canon(v) for v in x) + "]"
    if x is None or isinstance(x, (bool, np.bool_)):
        return json.dumps(None if x is None else bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise ValueError(f"non-finite float {x} in report")
        s = format(x, ".17g")
        return s if any(c in s for c in ".en") else s + ".0"
    if isinstance(x, str):
        return json.dumps(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def policy_digest(params: PolicyParams) -> str:
    h = hashlib.sha256()
    for k in sorted(params.theta):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params.theta[k], dtype=float).tobytes())
    return h.hexdigest()[:16]


def observation(text_embedding: np.ndarray, catalog: PromptCatalog, embedder) -> np.ndarray:
    """Generated-text embedding concatenated with the mean live-prompt embedding."""
    return np.concatenate([np.asarray(text_embedding, dtype=float), catalog.mean_embedding(embedder)])


def compute_reward(selected: int, ranked: Sequence[RankedPrompt]) -> float:
    for rp in ranked:
        if rp.action == selected:
            return rp.score
    raise ValueError(f"action {selected} is not in the ranking")


def apply_feedback_update(
    policy: PolicyParams, pending: Transition, optimizer: OptimizerState, ppo: PpoConfig
) -> tuple[PolicyParams, OptimizerState]:
    """One ascent step on the feedback objective over the queued transition."""
    res = feedback_objective([pending], policy, ppo)
    return optimizer_step(policy, {k: -g for k, g in res.grad.items()}, optimizer)


def _stage(name: str, i: int, fn):
    try:
        return fn()
    except GatewayError as exc:
        raise IterationError(name, i, exc) from exc


def run_iteration(state: IterationState, ep: Episode) -> tuple[IterationState, Transition, IterationRecord]:
    cfg = ep.config
    i = state.i
    if i > cfg.iterations:
        raise ValueError(f"iteration {i} exceeds budget {cfg.iterations}")
    gw = ep.gateway

    # object detection / captioning
    text = _stage("caption", i, lambda: gw.caption(ep.image, state.prompt).caption)

    updated = False
    if state.feedback:
        ep.policy, ep.optimizer = apply_feedback_update(ep.policy, state.pending, ep.optimizer, cfg.ppo)
        updated = True

    catalog = state.catalog
    text_emb = _stage("embed", i, lambda: gw.embed(text))
    ranked = _stage("rank", i, lambda: rank_prompts(text_emb, catalog, gw.embed))

    obs = _stage("embed", i, lambda: observation(text_emb, catalog, gw.embed))
    digest = policy_digest(ep.policy)
    dist = policy_forward(obs, ep.policy, catalog.actions)
    action = sample_action(dist, ep.rng)
    logp = log_prob(obs, action, ep.policy, catalog.actions)
    reward = compute_reward(action, ranked)

    next_catalog = update_prompt_list(catalog, ranked, cfg.retention(len(catalog)))
    chosen = catalog.entry(action)

    next_text = _stage("caption", i, lambda: gw.caption(ep.image, chosen.text).caption)
    next_emb = _stage("embed", i, lambda: gw.embed(next_text))
    next_obs = _stage("embed", i, lambda: observation(next_emb, next_catalog, gw.embed))

    done = i == cfg.iterations
    doc_id, score = mips_retrieve(next_emb, ep.index)
    fb = float(np.clip(score, -1.0, 1.0))
    transition = Transition(obs, action, reward, next_obs, logp, fb, done, catalog.actions)
    objective = feedback_objective if cfg.feedback else ppo_objective
    loss = objective([transition], ep.policy, cfg.ppo).value

    pending = None
    if cfg.feedback and cfg.lam > 0 and fb > reward + cfg.trigger_margin:
        # steer toward the live prompt closest to the retrieved document
        doc = ep.index.embedding(doc_id)
        sims = [float(doc @ gw.embed(e.text)) for e in catalog.entries]
        target = catalog.actions[int(np.argmax(sims))]
        pending = Transition(
            obs,
            target,
            compute_reward(target, ranked),
            next_obs,
            log_prob(obs, target, ep.policy, catalog.actions),
            fb,
            done,
            catalog.actions,
        )

    record = IterationRecord(
        iteration=i,
        text=text,
        policy_updated=updated,
        policy_digest=digest,
        catalog_size=len(catalog),
        action=action,
        prompt_id=chosen.id,
        prompt_text=chosen.text,
        probability=float(dist[action]),
        reward=reward,
        next_catalog_size=len(next_catalog),
        feedback_score=fb,
        rag_doc=doc_id,
        objective=loss,
        feedback_triggered=pending is not None,
        feedback_action=None if pending is None else pending.a,
    )
    new_state = IterationState(i + 1, next_catalog, chosen.text, pending is not None, pending)
    return new_state, transition, record


def episode_rng(config: RunConfig, digest: str, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([config.seed, int(digest[:16], 16), salt])


def run_episode(
    image: bytes,
    config: RunConfig,
    policy: PolicyParams,
    catalog: PromptCatalog,
    index: VectorIndex,
    gateway: Gateway,
    image_id: str = "image",
    salt: int = 0,
) -> tuple[PipelineReport, list[Transition]]:
    """Run every iteration on one image; the caller's policy is not modified."""
    img = decode_pnm(image)
    digest = image_digest(image)
    local = policy.copy()
    local.sync()
    ep = Episode(image, config, local, config.optimizer(local), index, gateway, episode_rng(config, digest, salt))
    report = PipelineReport(
        image_id, digest, img.width, img.height, img.channels, config.seed, config.to_dict()
    )
    state = IterationState(1, catalog, config.base_prompt)
    transitions: list[Transition] = []
    try:
        while state.i <= config.iterations:
            state, t, rec = run_iteration(state, ep)
            transitions.append(t)
            report.iterations.append(rec)
        report.initial_caption = report.iterations[0].text
        report.final_text = _stage("caption", state.i, lambda: gateway.caption(image, state.prompt).caption)
    except IterationError as exc:
        report.error = str(exc)
        return report, transitions
    report.final_prompt_id = report.iterations[-1].prompt_id
    report.metrics = _text_metrics(report.initial_caption, report.final_text, gateway)
    report.metrics["mean_reward"] = float(np.mean([r.reward for r in report.iterations]))
    report.metrics["mean_feedback"] = float(np.mean([r.feedback_score for r in report.iterations]))
    report.complete = True
    return report, transitions


def _text_metrics(initial: str, final: str, gateway: Gateway) -> dict:
    lex = load_lexicons()
    return {
        "initial": asdict(text_stats(initial, lex)),
        "final": asdict(text_stats(final, lex)),
        "semantic_similarity": semantic_similarity(initial, final, gateway.embed),
    }


def run_pipeline(
    image: bytes,
    config: RunConfig,
    policy: PolicyParams,
    catalog: PromptCatalog,
    index: VectorIndex,
    gateway: Gateway,
    image_id: str = "image",
) -> PipelineReport:
    return run_episode(image, config, policy, catalog, index, gateway, image_id)[0]


@dataclass
class UpdateLog:
    update: int
    objective: float
    value_loss: float
    mean_reward: float
    mean_feedback: float
    transitions: int
    feedback_updates: int


def train(
    dataset: Sequence[bytes],
    config: RunConfig,
    gateway: Gateway,
    index: VectorIndex,
    catalog: PromptCatalog,
    updates: int,
    params: PolicyParams | None = None,
    optimizer: OptimizerState | None = None,
) -> tuple[PolicyParams, OptimizerState, list[UpdateLog]]:
    """Collect episodes against a frozen snapshot, then apply PPO updates.

    A batch is ``config.episode_batch`` episodes drawn in a seeded order.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_policy(2 * gateway.dim, len(catalog), config.hidden, config.seed)
    if optimizer is None:
        optimizer = config.optimizer(params)
    log = []
    for u in range(updates):
        picks = rng.integers(0, len(dataset), size=config.episode_batch)
        batch: list[Transition] = []
        n_fb = 0
        for slot, j in enumerate(picks):
            report, ts = run_episode(
                dataset[j], config, params, catalog, index, gateway, f"train-{j}", salt=u * config.episode_batch + slot + 1
            )
            if not report.complete:
                raise RuntimeError(f"episode failed during training: {report.error}")
            batch.extend(ts)
            n_fb += sum(r.policy_updated for r in report.iterations)
        params.sync()
        params, optimizer, stats = ppo_update(params, batch, optimizer, config.ppo, rng, use_feedback=config.feedback)
        log.append(
            UpdateLog(
                u,
                stats.objective,
                stats.value_loss,
                float(np.mean([t.r for t in batch])),
                float(np.mean([t.feedback for t in batch])),
                len(batch),
                n_fb,
            )
        )
    return params, optimizer, log
