"""Run an experiment as a TCP server plus one ``fedsilo endpoint`` process per client."""

import json
import subprocess
import sys
import threading
from dataclasses import replace

from fedsilo.communicator.store import MemoryStore
from fedsilo.config import ExperimentConfig
from fedsilo.federation import save_manifest
from fedsilo.orchestrator import RunLog, serve_tcp, simulate, simulation_federation


def prepare(config: ExperimentConfig, workdir):
    """Persist a manifest and a config file that endpoint processes can read."""
    manifest = simulation_federation(config)
    manifest_path = save_manifest(manifest, workdir / "fed" / "manifest.json")
    d = config.to_dict()
    d["federation"]["manifest"] = str(manifest_path)
    config_path = workdir / "experiment.json"
    config_path.write_text(json.dumps(d, indent=2))
    return replace(config, manifest=str(manifest_path)), manifest, config_path


def run_tcp(config: ExperimentConfig, workdir, timeout=60.0):
    config, manifest, config_path = prepare(config, workdir)
    store, runlog = MemoryStore(), RunLog()
    address = threading.Event()
    box = {}

    def server():
        try:
            box["report"] = serve_tcp(config, manifest, store, runlog,
                                      on_listen=lambda a: (box.__setitem__("addr", a), address.set()))
        except Exception as exc:  # surfaced by the caller
            box["error"] = exc
            address.set()

    thread = threading.Thread(target=server, daemon=True)
    thread.start()
    if not address.wait(timeout) or "error" in box:
        raise RuntimeError(f"server did not start: {box.get('error')}")
    procs = []
    for k, record in enumerate(manifest.endpoints):
        cmd = [sys.executable, "-m", "fedsilo.cli", "endpoint", "--manifest", config.manifest,
               "--endpoint-id", record.endpoint_id, "--connect", box["addr"], "--config", str(config_path),
               "--client-index", str(k)]
        procs.append(subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True))
    thread.join(timeout)
    outputs = []
    for p in procs:
        try:
            outputs.append(p.communicate(timeout=30))
        except subprocess.TimeoutExpired:
            p.kill()
            outputs.append(p.communicate())
    if "error" in box:
        raise box["error"]
    return box["report"], store, runlog, [p.returncode for p in procs], outputs


def run_simulated(config: ExperimentConfig, workdir):
    config, manifest, _ = prepare(config, workdir)
    store, runlog = MemoryStore(), RunLog()
    report = simulate(config, manifest=manifest, store=store, runlog=runlog)
    return report, store, runlog
