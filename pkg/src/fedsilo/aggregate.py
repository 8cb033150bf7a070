"""Synchronous FedAvg aggregation and the cross-silo round barrier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    DuplicateUpdate,
    EmptyUpdateSet,
    RoundMismatch,
    SignatureMismatch,
    UnknownClient,
)
from .tensor import ModelState, Tensor


@dataclass(frozen=True)
class ClientUpdate:
    client_id: str
    round: int
    state: ModelState
    n_samples: int
    metrics: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise ValueError(f"n_samples must be a positive integer, got {self.n_samples}")


def fedavg(updates: Iterable[ClientUpdate]) -> ModelState:
    """Sample-count weighted mean of the client states.

    Summation runs in client-id order so the result does not depend on the
    order updates arrived in. Each element is clamped to the range of its
    inputs, which only ever removes a final rounding step.
    """
    updates = list(updates)
    if not updates:
        raise EmptyUpdateSet("fedavg needs at least one update")
    signature = updates[0].state.signature()
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise RoundMismatch(f"updates span rounds {sorted(rounds)}")
    for u in updates[1:]:
        if u.state.signature() != signature:
            raise SignatureMismatch(f"update from {u.client_id!r} has a different name/shape/dtype signature")
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = sum(int(u.n_samples) for u in ordered)
    weights = [float(int(u.n_samples)) / float(total) for u in ordered]

    merged = []
    for name, dims, dtype in signature:
        stack = [u.state[name].array for u in ordered]
        acc = np.zeros(dims, dtype=np.float64)
        for w, arr in zip(weights, stack):
            acc += w * arr.astype(np.float64)
        lo = np.minimum.reduce(stack).astype(np.float64)
        hi = np.maximum.reduce(stack).astype(np.float64)
        merged.append((name, Tensor(np.clip(acc, lo, hi), dtype)))
    return ModelState(merged)


@dataclass(frozen=True)
class BarrierStatus:
    complete: bool
    missing: frozenset = frozenset()


def check_barrier(roster, received: Iterable[ClientUpdate], round_index: int) -> BarrierStatus:
    roster = set(roster)
    seen = set()
    for u in received:
        if u.client_id not in roster:
            raise UnknownClient(u.client_id)
        if u.round != round_index:
            raise RoundMismatch(f"update from {u.client_id!r} is for round {u.round}, barrier is at {round_index}")
        if u.client_id in seen:
            raise DuplicateUpdate(u.client_id)
        seen.add(u.client_id)
    missing = frozenset(roster - seen)
    return BarrierStatus(not missing, missing)


@dataclass
class RoundRecord:
    round: int
    clients: list[str]
    state: ModelState
    total_samples: int
    started: float
    finished: float
    mean_loss: float | None = None

    def to_json(self, state_ref: Mapping | None = None) -> dict:
        return {
            "round": self.round,
            "clients": list(self.clients),
            "total_samples": self.total_samples,
            "started": self.started,
            "finished": self.finished,
            "duration_s": self.finished - self.started,
            "mean_loss": self.mean_loss,
            "state": dict(state_ref) if state_ref else {"signature": [list(map(str, s)) for s in self.state.signature()]},
        }
