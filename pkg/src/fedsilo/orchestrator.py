"""Federated server loop, baselines, simulation harness and run logs."""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregate import ClientUpdate, RoundRecord, check_barrier, fedavg
from .communicator.frames import ObjectRef, TaskEnvelope
from .communicator.store import MemoryStore, make_payload, offload, open_store, resolve_payload
from .communicator.transport import InProcessTransport, TcpTransport, wait_all
from .config import ExperimentConfig
from .errors import (
    AggregationError,
    ConfigError,
    EndpointUnreachable,
    FedsiloError,
    RoundTimeout,
    RunAborted,
    TransportError,
)
from .federation.dataloader import DataloaderRegistry, load_spec
from .federation.endpoint import Endpoint
from .federation.manifest import (
    EndpointRecord,
    FederationManifest,
    add_member,
    create_federation,
    load_manifest,
)
from .federation.tokens import issue_token
from .tensor import decode_state, encode_state
from .trainer import evaluate, local_train

log = logging.getLogger(__name__)

SIMULATION_NAMESPACE = uuid.UUID("6f1d2b0c-52a4-4d53-9a51-7f7f3e1c0a11")


class RunLog:
    """Append-only JSON-lines event log; ``path=None`` keeps events in memory only."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.events: list[dict] = []
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def event(self, kind: str, payload: dict):
        record = {"ts": time.time(), "kind": kind, "payload": payload}
        with self._lock:
            self.events.append(record)
            if self.path:
                with open(self.path, "a") as fh:
                    fh.write(json.dumps(record, default=_json_default) + "\n")

    def of_kind(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["kind"] == kind]

    @staticmethod
    def read(path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def describe_payload(ref) -> dict:
    if isinstance(ref, ObjectRef):
        return {"type": "object", "key": ref.key, "size": ref.size, "crc32": ref.crc32}
    return {"type": "inline", "size": len(ref.data)}


@dataclass
class RunReport:
    name: str
    dataset: str
    roster: list[str]
    rounds: list[dict] = field(default_factory=list)
    final_key: str | None = None
    final_crc32: int | None = None
    fl_accuracy: float | None = None
    client_accuracies: dict = field(default_factory=dict)
    final_delivered: dict = field(default_factory=dict)
    baselines: dict | None = None
    aborted: bool = False
    error: str | None = None
    missing: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, d: dict) -> "RunReport":
        return cls(**d)


def resolve_roster(config: ExperimentConfig, manifest: FederationManifest, roster=None) -> list[str]:
    roster = list(roster or config.roster or [e.endpoint_id for e in manifest.endpoints])
    known = {e.endpoint_id for e in manifest.endpoints}
    unknown = [eid for eid in roster if eid not in known]
    if unknown:
        raise ConfigError(f"roster endpoints not registered in the manifest: {', '.join(unknown)}")
    if not roster:
        raise ConfigError("roster is empty")
    return roster


def _abort(report: RunReport, runlog: RunLog, message: str, missing=()):
    report.aborted = True
    report.error = message
    report.missing = sorted(missing)
    runlog.event("run_end", report.to_json())
    raise RunAborted(message, report)


def _collect(handles: dict, deadline: float, runlog: RunLog, round_index):
    """Wait for a batch of tasks, logging a terminal status for each."""
    results, missing, errors = wait_all(handles.values(), deadline)
    for task_id, res in results.items():
        runlog.event("result", {
            "task_id": task_id, "endpoint": handles[task_id].endpoint_id, "round": round_index,
            "status": res.status, "reason": res.reason, "payload": describe_payload(res.payload),
            "metrics": res.metrics,
        })
    for h in missing:
        runlog.event("result", {"task_id": h.task_id, "endpoint": h.endpoint_id, "round": round_index,
                                "status": "timeout"})
    for task_id, exc in errors.items():
        runlog.event("result", {"task_id": task_id, "endpoint": handles[task_id].endpoint_id,
                                "round": round_index, "status": "unreachable", "reason": str(exc)})
    return results, missing, errors


def _send_round(config, transport, manifest, server_id, roster, function, round_index, ref, task_config, runlog):
    handles = {}
    for eid in roster:
        task_id = str(uuid.uuid4())
        token = issue_token(manifest, server_id, task_id, round_index, config.token_ttl_s)
        env = TaskEnvelope(task_id, function, round_index, task_config, ref, token.encode(), server_id)
        handle = transport.dispatch(eid, env)
        handles[task_id] = handle
        runlog.event("dispatch", {"task_id": task_id, "endpoint": eid, "function": function,
                                  "round": round_index, "payload": describe_payload(ref)})
    return handles


def run_federated(config: ExperimentConfig, transport, manifest: FederationManifest, store=None,
                  runlog: RunLog | None = None, roster=None) -> RunReport:
    """Dispatch, barrier, aggregate and redistribute for ``global_rounds`` rounds.

    Any unreachable endpoint, timeout or failed task aborts the run:
    :class:`RunAborted` carries the partial report (also written to the log).
    """
    runlog = runlog or RunLog()
    store = store if store is not None else MemoryStore()
    roster = resolve_roster(config, manifest, roster)
    server_id = config.server_identity or manifest.owner.identity
    report = RunReport(config.name, config.dataset_label, roster)
    runlog.event("run_start", {"config": config.to_dict(), "roster": roster, "group_id": manifest.group_id,
                               "server": server_id})

    missing = transport.wait_ready(roster, config.connect_timeout_s)
    if missing:
        _abort(report, runlog, f"EndpointUnreachable: {', '.join(sorted(missing))}", missing)

    task_config = config.task_config()
    state = config.model.build().trainable_state()
    for k in range(config.global_rounds):
        started = time.time()
        blob = encode_state(state)
        ref = make_payload(blob, store, config.inline_threshold)
        try:
            handles = _send_round(config, transport, manifest, server_id, roster, "local_train", k, ref,
                                  task_config, runlog)
        except TransportError as exc:
            _abort(report, runlog, f"{type(exc).__name__}: {exc}", [str(exc)])
        results, timed_out, errors = _collect(handles, time.monotonic() + config.timeout_s, runlog, k)
        if timed_out:
            exc = RoundTimeout(k, [h.endpoint_id for h in timed_out])
            _abort(report, runlog, f"RoundTimeout: {exc}", exc.missing)
        if errors:
            lost = [handles[t].endpoint_id for t in errors]
            _abort(report, runlog, f"EndpointUnreachable: {', '.join(sorted(lost))}", lost)
        failed = {handles[t].endpoint_id: r.reason for t, r in results.items() if not r.ok}
        if failed:
            _abort(report, runlog, "client task failed: " + "; ".join(f"{e}: {r}" for e, r in sorted(failed.items())),
                   failed)
        try:
            updates = []
            for task_id, res in results.items():
                client_state = decode_state(resolve_payload(res.payload, store))
                updates.append(ClientUpdate(handles[task_id].endpoint_id, k, client_state,
                                            int(res.metrics["n_samples"]), res.metrics))
            barrier = check_barrier(roster, updates, k)
            if not barrier.complete:
                _abort(report, runlog, "barrier incomplete", barrier.missing)
            state = fedavg(updates)
        except (AggregationError, FedsiloError, KeyError) as exc:
            if isinstance(exc, RunAborted):
                raise
            _abort(report, runlog, f"AggregationError: {type(exc).__name__}: {exc}")
        total = sum(u.n_samples for u in updates)
        mean_loss = float(sum(u.metrics["loss"] * u.n_samples for u in updates) / total)
        record = RoundRecord(k, sorted(u.client_id for u in updates), state, total, started, time.time(), mean_loss)
        entry = record.to_json({"crc32": zlib.crc32(encode_state(state)), "payload": describe_payload(ref)})
        report.rounds.append(entry)
        runlog.event("round", entry)
        log.info("round %d: %d clients, %d samples, loss %.4f", k, len(updates), total, mean_loss)

    blob = encode_state(state)
    final_ref = offload(blob, store)
    report.final_key = final_ref.key
    report.final_crc32 = final_ref.crc32
    runlog.event("final", {"key": final_ref.key, "size": final_ref.size, "crc32": final_ref.crc32})
    ref = make_payload(blob, store, config.inline_threshold)
    try:
        handles = _send_round(config, transport, manifest, server_id, roster, "receive_final",
                              config.global_rounds, ref, task_config, runlog)
    except TransportError as exc:
        _abort(report, runlog, f"{type(exc).__name__}: {exc}", [str(exc)])
    results, timed_out, errors = _collect(handles, time.monotonic() + config.timeout_s, runlog, "final")
    if timed_out or errors:
        lost = [h.endpoint_id for h in timed_out] + [handles[t].endpoint_id for t in errors]
        _abort(report, runlog, "final model distribution incomplete", lost)
    for task_id, res in results.items():
        eid = handles[task_id].endpoint_id
        report.final_delivered[eid] = bool(res.ok and res.metrics.get("crc32") == final_ref.crc32)
        if res.ok and "accuracy" in res.metrics:
            report.client_accuracies[eid] = res.metrics["accuracy"]

    val_spec = config.validation_loader_spec()
    if val_spec is not None:
        model = config.model.build().with_trainable(state)
        report.fl_accuracy = evaluate(model, load_spec(val_spec))
    runlog.event("run_end", report.to_json())
    return report


# --------------------------------------------------------------------------
# baselines


def train_rounds(config: ExperimentConfig, data):
    """Train a fresh model on ``data`` alone, with the same per-round budget as an FL client."""
    model = config.model.build()
    for k in range(config.global_rounds):
        state, _ = local_train(model, data, config.trainer, k)
        model = model.with_trainable(state)
    return model


def run_baselines(config: ExperimentConfig) -> dict:
    """Global (pooled data) and per-client local training, scored on the shared validation split.

    Each baseline model runs ``global_rounds`` x ``batches_per_round`` steps,
    exactly what one FL client runs, so the comparison isolates data access.
    """
    val_spec = config.validation_loader_spec()
    if val_spec is None:
        raise ValueError("baselines need a validation split (val_fraction > 0)")
    val = load_spec(val_spec)
    pooled = load_spec(config.pooled_loader_spec())
    shards = [load_spec(config.client_loader_spec(k)) for k in range(config.n_clients)]
    global_acc = evaluate(train_rounds(config, pooled), val)
    local = [evaluate(train_rounds(config, shard), val) for shard in shards]
    return {
        "global_accuracy": global_acc,
        "per_client_local_accuracies": local,
        "local_average": float(np.mean(local)),
    }


# --------------------------------------------------------------------------
# simulation


def simulation_federation(config: ExperimentConfig) -> FederationManifest:
    """Throwaway federation with deterministic endpoint ids, one per client."""
    manifest = create_federation("server", "server@fedsilo.invalid")
    for k in range(config.partition.n_clients):
        identity = f"client-{k}"
        add_member(manifest, identity, f"{identity}@fedsilo.invalid")
        eid = str(uuid.uuid5(SIMULATION_NAMESPACE, f"{config.name}/{identity}"))
        manifest.endpoints.append(EndpointRecord(eid, identity, f"{config.name}-shard-{k}", "inproc"))
    return manifest


def resolve_manifest(config: ExperimentConfig) -> FederationManifest:
    if config.manifest:
        return load_manifest(config.manifest)
    return simulation_federation(config)


class Simulation:
    """All clients as in-process endpoint threads behind an InProcessTransport.

    ``loaders`` overrides the per-client loader specs derived from the
    config; entries may be spec strings or in-memory Datasets.
    """

    def __init__(self, config: ExperimentConfig, manifest: FederationManifest | None = None, store=None,
                 runlog: RunLog | None = None, loaders=None):
        self.config = config
        self.manifest = manifest or resolve_manifest(config)
        self.store = store if store is not None else open_store(config.store)
        self.runlog = runlog or RunLog(config.run_log)
        self.roster = resolve_roster(config, self.manifest)
        self.transport = InProcessTransport()
        self.endpoints: dict[str, Endpoint] = {}
        for k, eid in enumerate(self.roster):
            record = self.manifest.endpoint(eid)
            registry = DataloaderRegistry()
            spec = loaders[k] if loaders is not None else config.client_loader_spec(k)
            registry.register(record.dataloader_name, spec)
            self.endpoints[eid] = Endpoint(eid, self.manifest, registry, self.store, config.inline_threshold)

    def run(self) -> RunReport:
        threads = []
        for eid, endpoint in self.endpoints.items():
            channel = self.transport.attach(eid)
            t = threading.Thread(target=endpoint.serve, args=(channel,), name=f"endpoint-{eid[:8]}", daemon=True)
            t.start()
            threads.append(t)
        try:
            report = run_federated(self.config, self.transport, self.manifest, self.store, self.runlog,
                                   self.roster)
            if self.config.baselines:
                report.baselines = run_baselines(self.config)
                self.runlog.event("baselines", report.baselines)
            return report
        finally:
            self.transport.close()
            for t in threads:
                t.join(timeout=5.0)


def simulate(config: ExperimentConfig, **kwargs) -> RunReport:
    return Simulation(config, **kwargs).run()


def serve_tcp(config: ExperimentConfig, manifest=None, store=None, runlog=None, on_listen=None) -> RunReport:
    """Run the server over TCP against live endpoint processes."""
    manifest = manifest or resolve_manifest(config)
    store = store if store is not None else open_store(config.store)
    runlog = runlog or RunLog(config.run_log)
    roster = resolve_roster(config, manifest)
    transport = TcpTransport(roster, listen=None if config.dial else config.listen)
    try:
        if config.dial:
            for eid in roster:
                transport.dial(eid, manifest.endpoint(eid).address, config.connect_timeout_s)
        elif on_listen is not None:
            on_listen(transport.address)
        report = run_federated(config, transport, manifest, store, runlog, roster)
        if config.baselines:
            report.baselines = run_baselines(config)
            runlog.event("baselines", report.baselines)
        return report
    except EndpointUnreachable as exc:
        report = RunReport(config.name, config.dataset_label, roster, aborted=True, error=str(exc))
        runlog.event("run_end", report.to_json())
        raise RunAborted(str(exc), report) from exc
    finally:
        transport.close()


# --------------------------------------------------------------------------
# reporting


def _pct(x):
    return "-" if x is None else f"{100.0 * x:.2f}"


def summarize_log(events: list[dict]) -> str:
    """Plain-text summary with Dataset / FL / Global / LocalAvg / Local columns."""
    ends = [e for e in events if e["kind"] == "run_end"]
    starts = [e for e in events if e["kind"] == "run_start"]
    if ends:
        report = RunReport.from_json(ends[-1]["payload"])
    else:
        roster = starts[-1]["payload"]["roster"] if starts else []
        name = starts[-1]["payload"]["config"]["name"] if starts else "?"
        report = RunReport(name, name, roster, aborted=True, error="run log has no run_end record")
        report.rounds = [e["payload"] for e in events if e["kind"] == "round"]
        answered = {e["payload"]["endpoint"] for e in events
                    if e["kind"] == "result" and e["payload"].get("status") == "ok"}
        report.missing = sorted(set(roster) - answered)
    baselines = report.baselines
    for e in events:
        if e["kind"] == "baselines":
            baselines = e["payload"]
    lines = [f"run: {report.name}   rounds completed: {len(report.rounds)}   "
             f"status: {'ABORTED' if report.aborted else 'ok'}"]
    if report.aborted:
        lines.append(f"aborted: {report.error}")
        lines.append(f"missing clients: {', '.join(report.missing) if report.missing else '-'}")
    if report.final_key:
        lines.append(f"final model: {report.final_key}")
    header = ["Dataset", "FL (%)", "Global (%)", "Local Avg (%)", "Local (%)"]
    glob = local_avg = None
    local = "-"
    if baselines:
        glob = baselines["global_accuracy"]
        local_avg = baselines["local_average"]
        local = "[" + ", ".join(_pct(a) for a in baselines["per_client_local_accuracies"]) + "]"
    row = [report.dataset, _pct(report.fl_accuracy), _pct(glob), _pct(local_avg), local]
    widths = [max(len(h), len(r)) for h, r in zip(header, row)]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
    lines.append("  ".join(r.ljust(w) for r, w in zip(row, widths)).rstrip())
    return "\n".join(lines)
