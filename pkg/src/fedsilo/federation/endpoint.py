"""Client endpoint runtime: authorize, load local data, run, reply.

Only trainable parameters and scalar metrics ever leave an endpoint.
"""

from __future__ import annotations

import logging
import queue
import time
import traceback
import zlib
from typing import Callable

from ..communicator.frames import FAILED, OK, Inline, ResultEnvelope, TaskEnvelope
from ..communicator.store import DEFAULT_INLINE_THRESHOLD, make_payload, resolve_payload
from ..tensor import decode_state, encode_state
from ..trainer import ModelSpec, TrainerConfig, evaluate, local_train
from .dataloader import DataloaderRegistry
from .manifest import FederationManifest
from .tokens import AuthToken, verify_token

log = logging.getLogger(__name__)

AUTH_REJECTED = "AuthRejected"
UNKNOWN_FUNCTION = "UnknownFunction"
DATALOADER_ERROR = "DataloaderError"
EXECUTION_ERROR = "ExecutionError"
DUPLICATE_TASK = "DuplicateTask"

CLOCK_SKEW = 30.0

# fn(endpoint, task, payload_bytes, load_shard) -> (result_bytes, metrics)
TaskFunction = Callable[["Endpoint", TaskEnvelope, bytes, Callable], tuple]


class DataloaderFailure(Exception):
    pass


def _model_from(task: TaskEnvelope, payload: bytes):
    model = ModelSpec.from_dict(task.config["model"]).build()
    if payload:
        model = model.with_trainable(decode_state(payload))
    return model


def run_local_train(endpoint, task, payload, load_shard):
    model = _model_from(task, payload)
    trainer = TrainerConfig.from_dict(task.config["trainer"])
    shard = load_shard()
    state, metrics = local_train(model, shard, trainer, task.round)
    return encode_state(state), metrics.to_json()


def run_evaluate(endpoint, task, payload, load_shard):
    model = _model_from(task, payload)
    shard = load_shard()
    return b"", {"accuracy": evaluate(model, shard), "n_samples": len(shard)}


def run_receive_final(endpoint, task, payload, load_shard):
    state = decode_state(payload)
    endpoint.final_state = state
    metrics = {"crc32": zlib.crc32(payload), "n_bytes": len(payload)}
    if task.config.get("evaluate", True):
        model = ModelSpec.from_dict(task.config["model"]).build().with_trainable(state)
        shard = load_shard()
        metrics.update(accuracy=evaluate(model, shard), n_samples=len(shard))
    return b"", metrics


DEFAULT_FUNCTIONS = {
    "local_train": run_local_train,
    "evaluate": run_evaluate,
    "receive_final": run_receive_final,
}


class Endpoint:
    """Executes tasks for one registered endpoint, strictly one at a time."""

    def __init__(self, endpoint_id: str, manifest: FederationManifest, registry: DataloaderRegistry,
                 store=None, inline_threshold: int = DEFAULT_INLINE_THRESHOLD,
                 clock_skew: float = CLOCK_SKEW, functions: dict | None = None):
        self.endpoint_id = endpoint_id
        self.manifest = manifest
        self.record = manifest.endpoint(endpoint_id)
        self.registry = registry
        self.store = store
        self.inline_threshold = inline_threshold
        self.clock_skew = clock_skew
        self.functions: dict[str, TaskFunction] = dict(DEFAULT_FUNCTIONS if functions is None else functions)
        self.final_state = None
        self._seen: set[str] = set()

    def register_function(self, name: str, fn: TaskFunction):
        self.functions[name] = fn

    def _fail(self, task, reason, started):
        log.info("task %s on %s failed: %s", task.task_id, self.endpoint_id, reason)
        return ResultEnvelope(task.task_id, self.endpoint_id, FAILED, Inline(b""),
                              {"started": started, "finished": time.time()}, reason)

    def _load_shard(self):
        try:
            return self.registry.load(self.record.dataloader_name)
        except Exception as exc:  # noqa: BLE001 - reported back to the server
            raise DataloaderFailure(f"{type(exc).__name__}: {exc}") from exc

    def handle(self, task: TaskEnvelope) -> ResultEnvelope:
        started = time.time()
        if task.task_id in self._seen:
            return self._fail(task, DUPLICATE_TASK, started)
        self._seen.add(task.task_id)
        verdict = verify_token(self.manifest, task.auth_token, task.task_id, leeway=self.clock_skew)
        if verdict and self._token_sender(task) != task.sender:
            return self._fail(task, f"{AUTH_REJECTED}: UnknownSender", started)
        if not verdict:
            return self._fail(task, f"{AUTH_REJECTED}: {verdict.reason.value}", started)
        fn = self.functions.get(task.function)
        if fn is None:
            return self._fail(task, f"{UNKNOWN_FUNCTION}: {task.function}", started)
        try:
            payload = resolve_payload(task.payload, self.store)
            out, metrics = fn(self, task, payload, self._load_shard)
            ref = make_payload(out, self.store, self.inline_threshold)
        except DataloaderFailure as exc:
            return self._fail(task, f"{DATALOADER_ERROR}: {exc}", started)
        except Exception as exc:  # noqa: BLE001
            log.debug("task %s raised:\n%s", task.task_id, traceback.format_exc())
            return self._fail(task, f"{EXECUTION_ERROR}: {type(exc).__name__}: {exc}", started)
        metrics = dict(metrics)
        metrics.update(started=started, finished=time.time())
        return ResultEnvelope(task.task_id, self.endpoint_id, OK, ref, metrics)

    @staticmethod
    def _token_sender(task):
        try:
            return AuthToken.parse(task.auth_token).claims.get("sender")
        except ValueError:
            return None

    def serve(self, channel, idle_timeout: float | None = None) -> int:
        """Receive-execute-reply until the channel closes. Returns tasks handled."""
        handled = 0
        while True:
            try:
                task = channel.receive(timeout=idle_timeout)
            except queue.Empty:
                break
            if task is None:
                break
            result = self.handle(task)
            try:
                channel.send(result)
            except OSError as exc:
                log.warning("could not deliver result for %s: %s", task.task_id, exc)
                break
            handled += 1
        return handled
