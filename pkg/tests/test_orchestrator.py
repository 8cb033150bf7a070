import json
import time
from collections import Counter

import pytest

from fedsilo.communicator.store import MemoryStore
from fedsilo.errors import RunAborted
from fedsilo.federation import load_spec
from fedsilo.orchestrator import (
    RunLog,
    Simulation,
    run_baselines,
    simulate,
    simulation_federation,
    summarize_log,
)
from fedsilo.tensor import decode_state, encode_state
from fedsilo.trainer import local_train

from .conftest import small_config


def run(config, **kw):
    store, runlog = MemoryStore(), RunLog()
    sim = Simulation(config, store=store, runlog=runlog, **kw)
    report = sim.run()
    return report, sim, store, runlog


def test_simulated_run_structure(config):
    report, sim, store, runlog = run(config)
    assert not report.aborted
    assert len(report.rounds) == config.global_rounds
    final = decode_state(store.get(report.final_key))
    assert set(final) == {"linear.weight.lora_A", "linear.weight.lora_B"}
    assert 0.0 <= report.fl_accuracy <= 1.0
    assert set(report.client_accuracies) == set(sim.roster)


def test_bit_identical_repeat(config):
    a = run(config)
    b = run(config)
    assert a[2].get(a[0].final_key) == b[2].get(b[0].final_key)
    assert a[0].final_key == b[0].final_key


def test_one_client_one_round_is_local_training():
    config = small_config(global_rounds=1, partition={"n_clients": 1})
    report, sim, store, _ = run(config)
    expected, _ = local_train(config.model.build(), load_spec(config.client_loader_spec(0)), config.trainer, 0)
    assert store.get(report.final_key) == encode_state(expected)


def test_barrier_audit(config):
    _, sim, _, runlog = run(config)
    roster = sorted(sim.roster)
    ok = Counter()
    for e in runlog.events:
        p = e["payload"]
        if e["kind"] == "result" and p["status"] == "ok" and p["round"] != "final":
            ok[p["round"]] += 1
        if e["kind"] == "round":
            assert p["clients"] == roster
            contributions = [r["payload"]["endpoint"] for r in runlog.of_kind("result")
                             if r["payload"]["round"] == p["round"] and r["payload"]["status"] == "ok"]
            assert sorted(contributions) == roster
            assert ok[p["round"]] == len(roster)


def test_log_completeness(config):
    _, _, _, runlog = run(config)
    dispatched = [e["payload"]["task_id"] for e in runlog.of_kind("dispatch")]
    terminal = [e["payload"]["task_id"] for e in runlog.of_kind("result")]
    assert len(dispatched) == len(set(dispatched)) == (config.global_rounds + 1) * config.n_clients
    assert sorted(dispatched) == sorted(terminal)


def test_final_model_distribution(config):
    report, sim, store, _ = run(config)
    final = decode_state(store.get(report.final_key))
    assert all(report.final_delivered.values()) and len(report.final_delivered) == config.n_clients
    for endpoint in sim.endpoints.values():
        assert endpoint.final_state == final


def test_run_log_file(tmp_path):
    path = tmp_path / "logs" / "run.jsonl"
    config = small_config(run_log=str(path))
    simulate(config, store=MemoryStore())
    events = RunLog.read(path)
    assert events[0]["kind"] == "run_start" and events[-1]["kind"] == "run_end"
    assert [e["kind"] for e in events].count("round") == config.global_rounds
    assert all(set(e) == {"ts", "kind", "payload"} for e in events)
    json.dumps(events)


def test_simulation_ids_deterministic(config):
    a = [e.endpoint_id for e in simulation_federation(config).endpoints]
    b = [e.endpoint_id for e in simulation_federation(config).endpoints]
    assert a == b and len(set(a)) == config.n_clients


def _stall(endpoint, task, payload, load):
    time.sleep(2.0)
    return b"", {}


def _boom(endpoint, task, payload, load):
    raise RuntimeError("disk on fire")


def test_timeout_aborts_with_missing_ids():
    config = small_config(communication={"timeout_s": 0.3})
    runlog = RunLog()
    sim = Simulation(config, store=MemoryStore(), runlog=runlog)
    slow = sim.roster[1]
    sim.endpoints[slow].register_function("local_train", _stall)
    with pytest.raises(RunAborted) as info:
        sim.run()
    report = info.value.report
    assert report.aborted and report.missing == [slow]
    assert "RoundTimeout" in report.error
    assert report.rounds == [] and report.final_key is None
    summary = summarize_log(runlog.events)
    assert "ABORTED" in summary and slow in summary


def test_failed_task_aborts(config):
    runlog = RunLog()
    sim = Simulation(config, store=MemoryStore(), runlog=runlog)
    bad = sim.roster[0]
    sim.endpoints[bad].register_function("local_train", _boom)
    with pytest.raises(RunAborted) as info:
        sim.run()
    assert info.value.report.missing == [bad]
    assert "disk on fire" in info.value.report.error
    assert runlog.events[-1]["kind"] == "run_end" and runlog.events[-1]["payload"]["aborted"]


def test_unreachable_endpoint_aborts(config):
    config = small_config(communication={"connect_timeout_s": 0.2})
    sim = Simulation(config, store=MemoryStore(), runlog=RunLog())
    sim.endpoints.pop(sim.roster[2])
    with pytest.raises(RunAborted) as info:
        sim.run()
    assert info.value.report.missing == [sim.roster[2]]


def test_summary_of_truncated_log(config):
    _, sim, _, runlog = run(config)
    events = [e for e in runlog.events if e["kind"] != "run_end"][:-2]
    text = summarize_log(events)
    assert "ABORTED" in text and "no run_end" in text


def test_summary_table_columns(config):
    report, _, _, runlog = run(config)
    text = summarize_log(runlog.events)
    header = [line for line in text.splitlines() if line.startswith("Dataset")][0]
    for col in ("FL (%)", "Global (%)", "Local Avg (%)", "Local (%)"):
        assert col in header
    assert f"{100 * report.fl_accuracy:.2f}" in text


def test_baselines_identical_shards():
    config = small_config(partition={"scheme": "replicate"})
    report, _, _, _ = run(config)
    base = run_baselines(config)
    local = base["per_client_local_accuracies"]
    assert len(local) == config.n_clients
    assert max(local) - min(local) <= 1e-9
    assert abs(local[0] - report.fl_accuracy) <= 1e-9
    assert abs(base["global_accuracy"] - report.fl_accuracy) <= 1e-9


def test_baselines_in_report(tmp_path):
    config = small_config(baselines=True)
    runlog = RunLog()
    report = simulate(config, store=MemoryStore(), runlog=runlog)
    assert report.baselines["local_average"] == pytest.approx(
        sum(report.baselines["per_client_local_accuracies"]) / config.n_clients)
    text = summarize_log(runlog.events)
    assert f"{100 * report.baselines['global_accuracy']:.2f}" in text
