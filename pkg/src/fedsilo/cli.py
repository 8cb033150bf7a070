"""``fedsilo`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, FedsiloError, RunAborted

log = logging.getLogger("fedsilo")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_float(flag):
    def parse(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} must be a number, got {text!r}") from None
        if not value > 0:
            raise argparse.ArgumentTypeError(f"{flag} must be > 0, got {text}")
        return value
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedsilo", description="Cross-silo federated learning at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fed = sub.add_parser("federation", help="manage a federation manifest")
    fsub = fed.add_subparsers(dest="action", required=True, parser_class=_Parser)
    c = fsub.add_parser("create", help="create a federation with yourself as owner")
    c.add_argument("--owner", required=True)
    c.add_argument("--email", required=True)
    c.add_argument("--out", required=True, help="manifest path to write")
    a = fsub.add_parser("add-member")
    a.add_argument("--manifest", required=True)
    a.add_argument("--identity", required=True)
    a.add_argument("--email", required=True)
    r = fsub.add_parser("register-endpoint")
    r.add_argument("--manifest", required=True)
    r.add_argument("--owner", required=True, help="member identity that owns the endpoint")
    r.add_argument("--dataloader", required=True, help="dataloader name")
    r.add_argument("--address", default="")

    part = sub.add_parser("partition", help="dual-Dirichlet partition of a label file")
    part.add_argument("--labels", required=True, help="JSON list or one label per line")
    part.add_argument("--clients", type=int, required=True)
    part.add_argument("--alpha1", type=_positive_float("--alpha1"), default=2.0)
    part.add_argument("--alpha2", type=_positive_float("--alpha2"), default=8.0)
    part.add_argument("--seed", type=int, default=0)
    part.add_argument("--out", help="write the PartitionPlan JSON here (default: stdout)")
    part.add_argument("--report", help="write the CSV histogram here (default: stdout)")

    ep = sub.add_parser("endpoint", help="run a client endpoint")
    ep.add_argument("--manifest", required=True)
    ep.add_argument("--endpoint-id", required=True)
    mode = ep.add_mutually_exclusive_group(required=True)
    mode.add_argument("--connect", metavar="HOST:PORT", help="dial the server")
    mode.add_argument("--listen", metavar="HOST:PORT", help="wait for the server to dial in")
    src = ep.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataloader", metavar="SPEC", help="loader spec for the local shard")
    src.add_argument("--config", help="experiment config to derive the shard spec from")
    ep.add_argument("--client-index", type=int, help="shard index when using --config")
    ep.add_argument("--store", help="object store: directory, or http(s)://host/bucket")
    ep.add_argument("--inline-threshold", type=int)
    ep.add_argument("--retry-for", type=float, default=60.0, help="seconds to keep dialing")

    run = sub.add_parser("run", help="run a federated experiment")
    run.add_argument("--config", required=True, help="config file or bundled config name")
    run.add_argument("--simulate", action="store_true", help="all clients as in-process threads")
    run.add_argument("--log", help="run log path (overrides config)")
    run.add_argument("--baselines", action="store_true", help="also run global/local baselines")
    run.add_argument("--listen", help="server address for TCP mode (overrides config)")

    base = sub.add_parser("baselines", help="global vs local training baselines")
    base.add_argument("--config", required=True)

    rep = sub.add_parser("report", help="summarize a run log")
    rep.add_argument("runlog")

    sub.add_parser("configs", help="list bundled experiment configs")
    return p


def _read_labels(path):
    text = Path(path).read_text()
    try:
        labels = json.loads(text)
    except json.JSONDecodeError:
        labels = [line.strip() for line in text.splitlines() if line.strip()]
    if isinstance(labels, dict) and "labels" in labels:
        labels = labels["labels"]
    if not isinstance(labels, list):
        raise UsageError(f"--labels: {path} must hold a list of labels")
    try:
        return np.array([int(v) for v in labels])
    except (TypeError, ValueError):
        return np.array([str(v) for v in labels])


def cmd_federation(args):
    from .federation import manifest as mf

    if args.action == "create":
        manifest = mf.create_federation(args.owner, args.email)
        mf.save_manifest(manifest, args.out)
        print(manifest.group_id)
        return EXIT_OK
    manifest = mf.load_manifest(args.manifest)
    if args.action == "add-member":
        mf.add_member(manifest, args.identity, args.email)
        mf.save_manifest(manifest, args.manifest)
        return EXIT_OK
    record = mf.register_endpoint(manifest, args.owner, args.dataloader, args.address)
    mf.save_manifest(manifest, args.manifest)
    print(record.endpoint_id)
    return EXIT_OK


def cmd_partition(args):
    from .partition import PartitionConfig, dual_dirichlet_partition, partition_report, report_csv

    if args.clients < 1:
        raise UsageError("--clients must be >= 1")
    labels = _read_labels(args.labels)
    plan = dual_dirichlet_partition(labels, PartitionConfig(args.clients, args.alpha1, args.alpha2, args.seed))
    plan_json = plan.to_json()
    csv_text = report_csv(partition_report(plan, labels))
    if args.out:
        Path(args.out).write_text(plan_json + "\n")
    else:
        print(plan_json)
    if args.report:
        Path(args.report).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_endpoint(args):
    from .communicator.store import DEFAULT_INLINE_THRESHOLD, open_store
    from .communicator.transport import TcpChannel
    from .config import load_config
    from .federation import DataloaderRegistry, Endpoint, load_manifest

    manifest = load_manifest(args.manifest)
    try:
        record = manifest.endpoint(args.endpoint_id)
    except KeyError:
        raise UsageError(f"--endpoint-id {args.endpoint_id} is not registered in {args.manifest}") from None
    threshold = args.inline_threshold
    if args.config:
        if args.client_index is None:
            raise UsageError("--config needs --client-index")
        config = load_config(args.config)
        spec = config.client_loader_spec(args.client_index)
        threshold = config.inline_threshold if threshold is None else threshold
        store_spec = args.store or config.store
    else:
        spec = args.dataloader
        store_spec = args.store
    registry = DataloaderRegistry()
    registry.register(record.dataloader_name, spec)
    endpoint = Endpoint(args.endpoint_id, manifest, registry, open_store(store_spec),
                        DEFAULT_INLINE_THRESHOLD if threshold is None else threshold)
    if args.connect:
        channel = TcpChannel.connect(args.connect, args.endpoint_id, retry_for=args.retry_for)
    else:
        channel = TcpChannel.listen(args.listen, args.endpoint_id)
    log.info("endpoint %s serving dataloader %s", args.endpoint_id, record.dataloader_name)
    handled = endpoint.serve(channel)
    channel.close()
    log.info("endpoint %s handled %d tasks", args.endpoint_id, handled)
    return EXIT_OK


def cmd_run(args):
    from dataclasses import replace

    from .config import load_config
    from .orchestrator import serve_tcp, simulate, summarize_log

    config = load_config(args.config)
    if args.log:
        config = replace(config, run_log=args.log)
    if args.listen:
        config = replace(config, listen=args.listen)
    if args.baselines:
        config = replace(config, baselines=True)
    if args.simulate:
        report = simulate(config)
    else:
        report = serve_tcp(config, on_listen=lambda addr: print(f"listening on {addr}", flush=True))
    print(summarize_log([{"ts": 0.0, "kind": "run_end", "payload": report.to_json()}]))
    if config.run_log:
        print(f"run log: {config.run_log}")
    return EXIT_OK


def cmd_baselines(args):
    from .config import load_config
    from .orchestrator import run_baselines

    print(json.dumps(run_baselines(load_config(args.config)), indent=2))
    return EXIT_OK


def cmd_report(args):
    from .orchestrator import RunLog, summarize_log

    try:
        events = RunLog.read(args.runlog)
    except FileNotFoundError:
        raise UsageError(f"no run log at {args.runlog}") from None
    print(summarize_log(events))
    return EXIT_OK


def cmd_configs(args):
    from .config import bundled_configs

    for name in bundled_configs():
        print(name)
    return EXIT_OK


COMMANDS = {
    "federation": cmd_federation,
    "partition": cmd_partition,
    "endpoint": cmd_endpoint,
    "run": cmd_run,
    "baselines": cmd_baselines,
    "report": cmd_report,
    "configs": cmd_configs,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fedsilo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"fedsilo: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunAborted as exc:
        print(f"fedsilo: run aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FedsiloError, OSError, ValueError) as exc:
        print(f"fedsilo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
