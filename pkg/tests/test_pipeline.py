import json
from dataclasses import replace

import numpy as np
import pytest

from rlvlm.gateway import Gateway, TransportError
from rlvlm.pipeline import (
    Episode,
    IterationError,
    IterationState,
    PipelineReport,
    RunConfig,
    canonical_json,
    compute_reward,
    episode_rng,
    observation,
    policy_digest,
    run_episode,
    run_iteration,
    run_pipeline,
    train,
)
from rlvlm.prompts import RankedPrompt, rank_prompts, update_prompt_list
from rlvlm.rlcore import copy_weights, init_policy, log_prob


@pytest.fixture
def policy(catalog):
    return init_policy(128, len(catalog), hidden=64, seed=3)


def run(images, catalog, index, policy, config=None, gateway=None, n=0):
    return run_episode(images[n], config or RunConfig(), policy, catalog, index, gateway or Gateway(), f"img{n}")


class FlakyGateway(Gateway):
    """Mock gateway whose caption call fails after ``ok`` successes."""

    def __init__(self, ok):
        super().__init__()
        self.ok = ok

    def caption(self, image, prompt):
        if self.ok == 0:
            raise TransportError("caption", "connection refused")
        self.ok -= 1
        return super().caption(image, prompt)


class TestReward:
    def test_top_ranked(self):
        ranked = [RankedPrompt(2, 0.8), RankedPrompt(0, 0.1)]
        assert compute_reward(2, ranked) == 0.8

    def test_fixture(self):
        ranked = [RankedPrompt(0, 0.9), RankedPrompt(2, 0.7), RankedPrompt(1, 0.2)]
        assert compute_reward(2, ranked) == 0.7

    def test_identical_text(self, catalog, gateway):
        text = catalog.entry(4).text
        ranked = rank_prompts(gateway.embed(text), catalog, gateway.embed)
        assert compute_reward(4, ranked) == pytest.approx(1.0, abs=1e-9)

    def test_not_ranked(self):
        with pytest.raises(ValueError):
            compute_reward(5, [RankedPrompt(0, 0.1)])


class TestRunConfig:
    def test_round_trip(self):
        cfg = RunConfig(iterations=2, lam=0.25, retention_k=4)
        d = cfg.to_dict()
        assert d["lambda"] == 0.25 and "lam" not in d
        assert RunConfig.from_dict(json.loads(json.dumps(d))) == cfg

    def test_retention(self):
        cfg = RunConfig()
        assert [cfg.retention(n) for n in (10, 5, 3, 2)] == [5, 3, 3, 2]
        assert RunConfig(retention_k=1).retention(10) == 3
        assert RunConfig(retention_k=8).retention(5) == 5

    def test_validation(self):
        with pytest.raises(ValueError):
            RunConfig(iterations=0)
        with pytest.raises(ValueError):
            RunConfig(clip_eps=2.0)


class TestIteration:
    def episode(self, images, catalog, index, policy, config):
        local = policy.copy()
        local.sync()
        rng = episode_rng(config, "ab" * 32)
        return Episode(images[0], config, local, config.optimizer(local), index, Gateway(), rng)

    def test_first_iteration_no_update(self, images, catalog, index, policy):
        cfg = RunConfig()
        ep = self.episode(images, catalog, index, policy, cfg)
        state = IterationState(1, catalog, cfg.base_prompt)
        new_state, t, rec = run_iteration(state, ep)
        assert not rec.policy_updated
        assert policy_digest(ep.policy) == policy_digest(policy)
        assert new_state.i == 2 and t.actions == catalog.actions

    def test_trigger_sets_flag(self, images, catalog, index, policy):
        cfg = RunConfig(trigger_margin=-2.0)
        ep = self.episode(images, catalog, index, policy, cfg)
        new_state, t, rec = run_iteration(IterationState(1, catalog, cfg.base_prompt), ep)
        assert new_state.feedback and rec.feedback_triggered
        assert new_state.pending.a == rec.feedback_action
        assert new_state.pending.feedback == t.feedback

    def test_never_triggers_above_one(self, images, catalog, index, policy):
        cfg = RunConfig(trigger_margin=2.0)
        ep = self.episode(images, catalog, index, policy, cfg)
        new_state, _, _ = run_iteration(IterationState(1, catalog, cfg.base_prompt), ep)
        assert not new_state.feedback and new_state.pending is None

    def test_transition_deterministic(self, images, catalog, index, policy):
        cfg = RunConfig()
        out = []
        for _ in range(2):
            ep = self.episode(images, catalog, index, policy, cfg)
            out.append(run_iteration(IterationState(1, catalog, cfg.base_prompt), ep)[1])
        a, b = out
        assert (a.a, a.r, a.logp_old, a.feedback) == (b.a, b.r, b.logp_old, b.feedback)
        assert a.s.tobytes() == b.s.tobytes() and a.s_next.tobytes() == b.s_next.tobytes()

    def test_gateway_failure_carries_stage(self, images, catalog, index, policy):
        cfg = RunConfig()
        ep = self.episode(images, catalog, index, policy, cfg)
        ep.gateway = FlakyGateway(ok=1)
        with pytest.raises(IterationError) as info:
            run_iteration(IterationState(1, catalog, cfg.base_prompt), ep)
        assert info.value.stage == "caption" and info.value.iteration == 1

    def test_budget_exceeded(self, images, catalog, index, policy):
        cfg = RunConfig(iterations=1)
        ep = self.episode(images, catalog, index, policy, cfg)
        with pytest.raises(ValueError):
            run_iteration(IterationState(2, catalog, cfg.base_prompt), ep)


class TestEpisode:
    def test_three_records(self, images, catalog, index, policy):
        report, ts = run(images, catalog, index, policy)
        assert report.complete and report.error is None
        assert [r.iteration for r in report.iterations] == [1, 2, 3]
        assert len(ts) == 3 and [t.done for t in ts] == [False, False, True]
        assert report.final_text and report.final_prompt_id == report.iterations[-1].prompt_id
        assert (report.width, report.height) == (16, 16)

    def test_budget_one(self, images, catalog, index, policy):
        for margin in (-2.0, 0.05):
            report, _ = run(images, catalog, index, policy, RunConfig(iterations=1, trigger_margin=margin))
            assert len(report.iterations) == 1
            assert not any(r.policy_updated for r in report.iterations)

    @pytest.mark.parametrize("n", [0, 1, 2])
    def test_catalog_shrinks(self, images, catalog, index, policy, n):
        cfg = RunConfig(iterations=5)
        report, _ = run(images, catalog, index, policy, cfg, n=n)
        sizes = [r.catalog_size for r in report.iterations] + [report.iterations[-1].next_catalog_size]
        assert sizes[0] == len(catalog)
        assert all(b <= a for a, b in zip(sizes, sizes[1:]))
        assert min(sizes) >= cfg.retention_floor

    @pytest.mark.parametrize("margin", [-2.0, 0.05, 2.0])
    def test_feedback_causality(self, images, catalog, index, policy, margin):
        report, _ = run(images, catalog, index, policy, RunConfig(iterations=4, trigger_margin=margin))
        recs = report.iterations
        assert not recs[0].policy_updated
        for prev, cur in zip(recs, recs[1:]):
            assert cur.policy_updated == prev.feedback_triggered
            # the digest is taken after the pre-update, so it moves exactly when an update ran
            assert (cur.policy_digest != prev.policy_digest) == cur.policy_updated

    def test_rewards_recomputed(self, images, catalog, index, policy, gateway):
        cfg = RunConfig(iterations=4)
        report, ts = run(images, catalog, index, policy, cfg, gateway=gateway)
        cat = catalog
        for rec, t in zip(report.iterations, ts):
            assert cat.actions == t.actions and len(cat) == rec.catalog_size
            ranked = rank_prompts(gateway.embed(rec.text), cat, gateway.embed)
            assert rec.reward == t.r == compute_reward(rec.action, ranked)
            assert t.s.tobytes() == observation(gateway.embed(rec.text), cat, gateway.embed).tobytes()
            cat = update_prompt_list(cat, ranked, cfg.retention(len(cat)))

    def test_deterministic_json(self, images, catalog, index, policy):
        outs = {run(images, catalog, index, policy)[0].to_json() for _ in range(3)}
        assert len(outs) == 1

    def test_fresh_gateway_same_json(self, images, catalog, index, policy):
        a = run_pipeline(images[1], RunConfig(), policy, catalog, index, Gateway(), "x").to_json()
        b = run_pipeline(images[1], RunConfig(), policy, catalog, index, Gateway(), "x").to_json()
        assert a == b

    def test_caller_policy_untouched(self, images, catalog, index, policy):
        before = copy_weights(policy.theta)
        run(images, catalog, index, policy, RunConfig(trigger_margin=-2.0))
        for k in before:
            assert policy.theta[k].tobytes() == before[k].tobytes()

    def test_report_round_trip(self, images, catalog, index, policy):
        report, _ = run(images, catalog, index, policy)
        text = report.to_json()
        assert PipelineReport.from_json(text).to_json() == text
        assert text.isascii() and text.endswith("\n")

    def test_gateway_failure_incomplete(self, images, catalog, index, policy):
        report, ts = run(images, catalog, index, policy, gateway=FlakyGateway(ok=3))
        assert not report.complete
        assert "caption" in report.error and "iteration 2" in report.error
        assert len(report.iterations) == len(ts) == 1

    def test_logp_matches_policy_at_selection(self, images, catalog, index, policy):
        report, ts = run(images, catalog, index, policy, RunConfig(trigger_margin=2.0))
        for rec, t in zip(report.iterations, ts):
            assert t.logp_old == pytest.approx(log_prob(t.s, t.a, policy, t.actions), abs=1e-12)
            assert rec.probability == pytest.approx(np.exp(t.logp_old), rel=1e-12)


class TestCanonicalJson:
    def test_format(self):
        s = canonical_json({"b": 0.1, "a": [1, 2.0, None, True], "c": "é"})
        assert s == '{"a":[1,2.0,null,true],"b":0.10000000000000001,"c":"\\u00e9"}\n'

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            canonical_json({"x": float("nan")})

    def test_floats_round_trip(self, rng):
        xs = rng.normal(size=50).tolist()
        assert json.loads(canonical_json(xs)) == xs


class TestTrain:
    def test_lambda_zero_is_plain_ppo(self, images, catalog, index):
        base = RunConfig(episode_batch=2, epochs=2, lam=0.0)
        p1, _, log1 = train(images, base, Gateway(), index, catalog, updates=2)
        p2, _, log2 = train(images, replace(base, feedback=False), Gateway(), index, catalog, updates=2)
        for k in p1.theta:
            assert p1.theta[k].tobytes() == p2.theta[k].tobytes()
        assert [l.objective for l in log1] == [l.objective for l in log2]
        assert all(l.feedback_updates == 0 for l in log1)

    def test_zero_learning_rate(self, images, catalog, index):
        cfg = RunConfig(episode_batch=2, epochs=1, lr=0.0, trigger_margin=-2.0)
        start = init_policy(128, len(catalog), cfg.hidden, cfg.seed)
        p, _, log = train(images, cfg, Gateway(), index, catalog, updates=3, params=start.copy())
        for k in start.theta:
            assert p.theta[k].tobytes() == start.theta[k].tobytes()
        assert sum(l.feedback_updates for l in log) > 0

    def test_deterministic(self, images, catalog, index):
        cfg = RunConfig(episode_batch=2, epochs=1)
        p1, _, _ = train(images, cfg, Gateway(), index, catalog, updates=2)
        p2, _, _ = train(images, cfg, Gateway(), index, catalog, updates=2)
        assert policy_digest(p1) == policy_digest(p2)

    def test_empty_dataset(self, catalog, index):
        with pytest.raises(ValueError):
            train([], RunConfig(), Gateway(), index, catalog, updates=1)
