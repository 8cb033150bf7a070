"""Dual-Dirichlet non-IID partitioning.

Client sizes follow ``Dirichlet(alpha2 * 1)`` over clients and each client's
label mix follows ``Dirichlet(alpha1 * 1)`` over the observed classes. The
integer realization always yields an exact disjoint cover of the samples.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyLabels, NonPositiveAlpha, PlanLabelMismatch, TooFewSamples


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int
    alpha1: float = 2.0
    alpha2: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not self.alpha1 > 0:
            raise NonPositiveAlpha(f"alpha1 must be > 0, got {self.alpha1}")
        if not self.alpha2 > 0:
            raise NonPositiveAlpha(f"alpha2 must be > 0, got {self.alpha2}")


@dataclass(frozen=True)
class PartitionPlan:
    config: PartitionConfig
    assignments: tuple[tuple[int, ...], ...]
    classes: tuple[int, ...] = ()
    class_counts: tuple[int, ...] = ()

    @property
    def n_samples(self) -> int:
        return sum(len(a) for a in self.assignments)

    @property
    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def to_json(self) -> str:
        return json.dumps({
            "config": asdict(self.config),
            "assignments": [list(a) for a in self.assignments],
            "provenance": {"classes": list(self.classes), "class_counts": list(self.class_counts)},
        })

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        d = json.loads(text)
        prov = d.get("provenance", {})
        return cls(
            PartitionConfig(**d["config"]),
            tuple(tuple(int(i) for i in a) for a in d["assignments"]),
            tuple(prov.get("classes", ())),
            tuple(prov.get("class_counts", ())),
        )


def sample_dirichlet(alphas, rng: np.random.Generator) -> np.ndarray:
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or alphas.size < 1:
        raise NonPositiveAlpha("need at least one concentration parameter")
    if not np.all(alphas > 0) or not np.all(np.isfinite(alphas)):
        raise NonPositiveAlpha(f"all concentrations must be finite and > 0, got {alphas}")
    if alphas.size == 1:
        return np.ones(1)
    draws = rng.standard_gamma(alphas)
    total = draws.sum()
    if total == 0.0:
        # every gamma underflowed (tiny alphas): the limit law is a random vertex
        out = np.zeros(alphas.size)
        out[rng.choice(alphas.size, p=alphas / alphas.sum())] = 1.0
        return out
    return draws / total


def largest_remainder(weights, total: int) -> np.ndarray:
    """Integers proportional to ``weights`` that sum to ``total``.

    Ties on the fractional part go to the lower index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if total == 0 or weights.sum() == 0:
        return np.zeros(weights.size, dtype=np.int64)
    exact = weights / weights.sum() * total
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(exact - base), kind="stable")
        base[order[:short]] += 1
    return base


def _client_sizes(p, n, n_clients):
    sizes = largest_remainder(p, n)
    # every client must own at least one sample
    for k in np.flatnonzero(sizes == 0):
        donor = int(np.argmax(sizes))
        sizes[donor] -= 1
        sizes[k] += 1
    return sizes


def dual_dirichlet_partition(labels, config: PartitionConfig) -> PartitionPlan:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyLabels("no labels to partition")
    n = labels.size
    if n < config.n_clients:
        raise TooFewSamples(f"{n} samples cannot cover {config.n_clients} clients")
    rng = np.random.default_rng(config.seed)
    classes, inverse, available = np.unique(labels, return_inverse=True, return_counts=True)
    K, C = config.n_clients, classes.size

    p = sample_dirichlet(np.full(K, config.alpha2), rng)
    sizes = _client_sizes(p, n, K)
    q = np.stack([sample_dirichlet(np.full(C, config.alpha1), rng) for _ in range(K)])
    quota = np.stack([largest_remainder(q[k], int(sizes[k])) for k in range(K)])

    # per class, shrink oversubscribed demand to what exists
    granted = np.zeros_like(quota)
    for c in range(C):
        demand = quota[:, c]
        if demand.sum() <= available[c]:
            granted[:, c] = demand
        else:
            granted[:, c] = largest_remainder(demand, int(available[c]))

    pools = [rng.permutation(np.flatnonzero(inverse == c)) for c in range(C)]
    owned: list[list[np.ndarray]] = [[] for _ in range(K)]
    leftovers = []
    for c in range(C):
        start = 0
        for k in range(K):
            take = int(granted[k, c])
            owned[k].append(pools[c][start:start + take])
            start += take
        leftovers.append(pools[c][start:])

    # spill the surplus to clients with the largest unmet demand
    spill = rng.permutation(np.concatenate(leftovers)) if leftovers else np.empty(0, dtype=np.int64)
    unmet = sizes - granted.sum(axis=1)
    pos = 0
    while pos < spill.size:
        k = int(np.argmax(unmet))
        take = int(unmet[k])
        owned[k].append(spill[pos:pos + take])
        pos += take
        unmet[k] = 0
    assignments = tuple(tuple(int(i) for i in np.sort(np.concatenate(parts))) for parts in owned)
    return PartitionPlan(config, assignments, tuple(classes.tolist()), tuple(available.tolist()))


def replicate_partition(n_samples: int, n_clients: int) -> list[np.ndarray]:
    """Every client gets every sample. Not a partition; used for symmetry checks."""
    return [np.arange(n_samples) for _ in range(n_clients)]


@dataclass(frozen=True)
class ReportRow:
    client: int
    label: object
    count: int
    fraction: float


def partition_report(plan: PartitionPlan, labels) -> list[ReportRow]:
    labels = np.asarray(labels)
    if plan.n_samples != labels.size:
        raise PlanLabelMismatch(f"plan covers {plan.n_samples} samples, labels has {labels.size}")
    flat = np.concatenate([np.asarray(a, dtype=np.int64) for a in plan.assignments]) if plan.assignments else []
    if len(flat) and (flat.min() < 0 or flat.max() >= labels.size):
        raise PlanLabelMismatch("plan references indices outside the label vector")
    rows = []
    classes = np.unique(labels)
    for k, idx in enumerate(plan.assignments):
        local = labels[np.asarray(idx, dtype=np.int64)]
        for c in classes:
            count = int(np.sum(local == c))
            if count:
                rows.append(ReportRow(k, c.item(), count, count / len(idx)))
    return rows


def report_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["client", "class", "count", "fraction"])
    for r in rows:
        writer.writerow([r.client, r.label, r.count, f"{r.fraction:.6f}"])
    return buf.getvalue()
