import csv
import io
import json

import numpy as np
import pytest

from bikc.consistency import CtConfig, init_cm_policy, make_backbone
from bikc.data import NormStats
from bikc.ddpm import DdpmConfig, init_ddpm_policy
from bikc.errors import ConfigurationError, ContractError
from bikc.keypose import KeyposePredictor, predictor_spec
from bikc.nn import init_mlp
from bikc.runtime import (
    METRIC_COLUMNS,
    EpisodeReport,
    PolicyStack,
    evaluate,
    metrics_csv,
    overall_rate,
    run_episode,
    stage_rates,
)
from bikc.sim import LatencyModel, make_task

FREE = LatencyModel(mode="nfe-cost", tick_ms=20, cost_per_nfe_ms=0)


def unit_stats(obs_dim):
    z, o = np.zeros, np.ones
    return NormStats(z(obs_dim), o(obs_dim), z(6), o(6), z(6), o(6))


def cm_gen(obs_dim=12, kp=False, seed=0):
    cfg = CtConfig(noise_emb_dim=8, keypose_emb_dim=4)
    net = make_backbone(cfg, 6, obs_dim, 6 if kp else 0, hidden_widths=(16,))
    return init_cm_policy(net, cfg, unit_stats(obs_dim), seed)


def ddpm_gen(obs_dim=12, seed=0):
    cfg = DdpmConfig(eval_steps=10)
    net = make_backbone(CtConfig(noise_emb_dim=8, keypose_emb_dim=4), 6, obs_dim, 0, hidden_widths=(16,))
    return init_ddpm_policy(net, cfg, unit_stats(obs_dim), seed)


def predictor(obs_dim=12):
    spec = predictor_spec(obs_dim, hidden_widths=(8,))
    return KeyposePredictor(init_mlp(spec, 0), spec, unit_stats(obs_dim))


def test_nfe_accounting_cm_and_ddpm():
    task = make_task("transfer")
    r = run_episode(PolicyStack(cm_gen()), task, 0, FREE, T=400, stop_on_success=False)
    assert r.inference_calls == 50 and r.nfe_total == 50
    r = run_episode(PolicyStack(ddpm_gen()), task, 0, FREE, T=400, stop_on_success=False)
    assert r.inference_calls == 50 and r.nfe_total == 500
    assert r.nfe_per_call == [10] * 50


def test_latency_ticks_charged():
    task = make_task("transfer")
    paid = LatencyModel(mode="nfe-cost", tick_ms=20, cost_per_nfe_ms=20)
    r = run_episode(PolicyStack(ddpm_gen()), task, 0, paid, T=180, stop_on_success=False)
    # each call: 10 held ticks + 8 executed ticks
    assert r.inference_calls == 10 and r.latency_ticks == 100


def test_cp_has_no_switches():
    r = run_episode(PolicyStack(cm_gen()), make_task("transfer"), 3, FREE, T=100)
    assert r.keypose_switches == 0 and r.keypose_log == [] and r.algo == "cp"


def test_bikc_switch_log_monotone():
    stack = PolicyStack(cm_gen(kp=True), predictor(), switch_threshold=0.5)
    r = run_episode(stack, make_task("transfer"), 0, FREE, T=120)
    assert r.algo == "bikc"
    assert r.keypose_log == sorted(r.keypose_log) and r.keypose_switches == len(r.keypose_log) >= 1


def test_stack_config_errors():
    with pytest.raises(ConfigurationError):
        PolicyStack(cm_gen(kp=True))
    with pytest.raises(ConfigurationError):
        PolicyStack(cm_gen(), predictor())
    with pytest.raises(ConfigurationError):
        PolicyStack(cm_gen(), action_horizon=9)
    with pytest.raises(ConfigurationError):
        PolicyStack(cm_gen(), switch_mask=(True,) * 5)


def test_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        run_episode(PolicyStack(cm_gen(obs_dim=12)), make_task("pick-order"), 0, FREE)


def test_episode_determinism():
    task = make_task("conveyor")
    a = run_episode(PolicyStack(cm_gen()), task, 5, FREE, T=80)
    b = run_episode(PolicyStack(cm_gen()), task, 5, FREE, T=80)
    a.latency_ms = b.latency_ms = []
    assert a.to_json() == b.to_json()


def test_identical_streams_equal_ticks_across_latency_modes():
    task = make_task("transfer")
    chunk = np.tile([0.2, 0.4, 1.0, 0.8, 0.4, 1.0], (8, 1))

    def stream(tick, obs):
        return chunk

    runs = [run_episode(PolicyStack(cm_gen()), task, 0, m, T=64, action_stream=stream)
            for m in (FREE, LatencyModel(mode="nfe-cost", tick_ms=20, cost_per_nfe_ms=40))]
    assert runs[0].ticks == runs[1].ticks == 64


def _report(success):
    return EpisodeReport("t", "a", 0, {}, success, all(success.values()), 0, 0, 1)


def test_stage_rates_product_rule():
    stages = ["s1", "s2", "s3"]
    reps = [_report(dict(zip(stages, f))) for f in
            [(True, True, True), (True, True, False), (True, False, False), (True, False, False)]]
    rows = stage_rates(reps, stages)
    assert [r["rate"] for r in rows[:3]] == [1.0, 0.5, 0.5]
    assert rows[3]["rate"] == 0.25


def test_stage_rates_zero_attempts_is_null():
    stages = ["s1", "s2"]
    rows = stage_rates([_report({"s1": False, "s2": False})] * 3, stages)
    assert rows[0]["rate"] == 0.0 and rows[1]["rate"] is None and rows[1]["attempts"] == 0


def test_metrics_csv_and_overall():
    rows, reports = evaluate(PolicyStack(cm_gen()), make_task("transfer"), [0, 1], FREE, T=20)
    text = metrics_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert list(parsed[0].keys()) == METRIC_COLUMNS
    assert [r["stage"] for r in parsed] == ["grasp", "lift", "transfer", "overall"]
    assert overall_rate(rows) == rows[-1]["rate"]
    assert json.loads(reports[0].to_json())["seed"] == 0
    with pytest.raises(ContractError):
        evaluate(PolicyStack(cm_gen()), make_task("transfer"), [], FREE)


def test_threads_env(monkeypatch):
    monkeypatch.setenv("BIKC_THREADS", "2")
    rows2, _ = evaluate(PolicyStack(cm_gen()), make_task("transfer"), [0, 1], FREE, T=16)
    monkeypatch.setenv("BIKC_THREADS", "1")
    rows1, _ = evaluate(PolicyStack(cm_gen()), make_task("transfer"), [0, 1], FREE, T=16)
    strip = [{k: v for k, v in r.items() if k != "latency_ms_p50"} for r in rows1]
    assert strip == [{k: v for k, v in r.items() if k != "latency_ms_p50"} for r in rows2]
    monkeypatch.setenv("BIKC_THREADS", "many")
    with pytest.raises(ConfigurationError):
        evaluate(PolicyStack(cm_gen()), make_task("transfer"), [0], FREE, T=4)
