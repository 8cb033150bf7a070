"""Declarative dataloaders for endpoint-local data.

A loader spec is a URI-like string::

    synthetic:blobs?classes=10&n=2000&seed=7
    csv:/data/site.csv?label=y&features=a,b,c
    json:/data/site.json?label=y
    prompts:/data/rte.json?kind=RTE&label=label&dim=64&max_tokens=200

Any spec may add post-processing keys: ``split=train|val`` with
``val_fraction`` (and optional ``split_seed``), then ``clients``/``client``
to select one client's shard of a partition, using ``scheme``
(``dual_dirichlet`` or ``replicate``), ``alpha1``, ``alpha2`` and
``partition_seed``.
"""

from __future__ import annotations

import csv
import json
import threading
import urllib.parse
from typing import Mapping

import numpy as np

from ..errors import (
    DuplicateName,
    FedsiloError,
    SchemaMismatch,
    SourceUnreadable,
    UnknownDatasetKind,
)
from ..partition import PartitionConfig, dual_dirichlet_partition
from ..taskdata import (
    PROMPTS,
    Dataset,
    answer_label,
    hashed_features,
    render_prompt,
    synth_dataset,
    train_val_split,
    truncate_tokens,
)

_POST_KEYS = {"split", "val_fraction", "split_seed", "clients", "client", "scheme", "alpha1", "alpha2",
              "partition_seed"}


def parse_spec(spec: str) -> tuple[str, str, dict[str, str]]:
    scheme, sep, rest = spec.partition(":")
    if not sep or not scheme:
        raise SchemaMismatch(f"loader spec {spec!r} lacks a scheme")
    target, _, query = rest.partition("?")
    return scheme, target, dict(urllib.parse.parse_qsl(query, keep_blank_values=True))


def shard_spec(source: str, *, split: str | None = None, val_fraction: float | None = None,
               partition: PartitionConfig | None = None, client: int | None = None,
               scheme: str = "dual_dirichlet") -> str:
    """Append post-processing keys to a base loader spec."""
    extra = {}
    if split is not None:
        extra["split"] = split
        extra["val_fraction"] = repr(float(val_fraction or 0.0))
    if partition is not None:
        extra.update(
            scheme=scheme,
            clients=str(partition.n_clients),
            client=str(client),
            alpha1=repr(float(partition.alpha1)),
            alpha2=repr(float(partition.alpha2)),
            partition_seed=str(partition.seed),
        )
    if not extra:
        return source
    joiner = "&" if "?" in source else "?"
    return source + joiner + urllib.parse.urlencode(extra)


def _read_table(scheme: str, path: str) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            if scheme == "csv":
                return list(csv.DictReader(fh))
            records = json.load(fh)
    except OSError as exc:
        raise SourceUnreadable(f"{path}: {exc}") from exc
    except (json.JSONDecodeError, csv.Error, UnicodeDecodeError) as exc:
        raise SchemaMismatch(f"{path}: {exc}") from exc
    if not isinstance(records, list) or not all(isinstance(r, dict) for r in records):
        raise SchemaMismatch(f"{path}: expected a JSON list of records")
    return records


def _load_table(scheme, path, params) -> Dataset:
    records = _read_table(scheme, path)
    label = params.get("label", "label")
    if not records:
        raise SchemaMismatch(f"{path}: no records")
    columns = list(records[0].keys())
    if label not in columns:
        raise SchemaMismatch(f"{path}: label column {label!r} not found in {columns}")
    features = params["features"].split(",") if params.get("features") else [c for c in columns if c != label]
    missing = [f for f in features if f not in columns]
    if missing or not features:
        raise SchemaMismatch(f"{path}: feature columns {missing or features} not found")
    try:
        X = np.array([[float(r[f]) for f in features] for r in records], dtype=np.float64)
        y = np.array([int(float(r[label])) for r in records], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"{path}: non-numeric or missing value: {exc}") from None
    return Dataset(X, y)


def _load_prompts(path, params) -> Dataset:
    kind = params.get("kind")
    if kind not in PROMPTS:
        raise UnknownDatasetKind(kind)
    records = _read_table("json", path)
    label = params.get("label", "label")
    dim = int(params.get("dim", 64))
    max_tokens = int(params.get("max_tokens", 512))
    X, y = [], []
    for r in records:
        if label not in r:
            raise SchemaMismatch(f"{path}: record lacks label field {label!r}")
        try:
            text = render_prompt(kind, r)
        except KeyError as exc:
            raise SchemaMismatch(f"{path}: {exc}") from None
        X.append(hashed_features(truncate_tokens(text, max_tokens), dim))
        value = r[label]
        try:
            y.append(answer_label(kind, value) if isinstance(value, str) else int(value))
        except (TypeError, ValueError) as exc:
            raise SchemaMismatch(f"{path}: bad label: {exc}") from None
    return Dataset(np.array(X).reshape(len(records), dim), np.array(y, dtype=np.int64))


def _postprocess(data: Dataset, params: Mapping[str, str]) -> Dataset:
    try:
        if "split" in params:
            split = params["split"]
            if split not in ("train", "val"):
                raise SchemaMismatch(f"split must be train or val, got {split!r}")
            seed = int(params.get("split_seed", params.get("seed", 0)))
            train, val = train_val_split(data, float(params.get("val_fraction", 0.2)), seed)
            data = train if split == "train" else val
        if "clients" in params:
            n_clients = int(params["clients"])
            client = int(params["client"])
            if not 0 <= client < n_clients:
                raise SchemaMismatch(f"client {client} outside 0..{n_clients - 1}")
            if params.get("scheme", "dual_dirichlet") == "replicate":
                return data
            cfg = PartitionConfig(n_clients, float(params.get("alpha1", 2.0)), float(params.get("alpha2", 8.0)),
                                  int(params.get("partition_seed", 0)))
            plan = dual_dirichlet_partition(data.y, cfg)
            data = data.subset(plan.assignments[client])
    except (KeyError, ValueError) as exc:
        if isinstance(exc, FedsiloError):
            raise
        raise SchemaMismatch(f"bad post-processing parameters: {exc}") from None
    return data


def load_spec(spec) -> Dataset:
    if isinstance(spec, Dataset):
        return spec
    scheme, target, params = parse_spec(spec)
    base = {k: v for k, v in params.items() if k not in _POST_KEYS}
    if scheme == "synthetic":
        data = synth_dataset(target, base)
    elif scheme in ("csv", "json"):
        data = _load_table(scheme, target, base)
    elif scheme == "prompts":
        data = _load_prompts(target, base)
    else:
        raise SchemaMismatch(f"unknown loader scheme {scheme!r}")
    return _postprocess(data, params)


class DataloaderRegistry:
    """Named loader specs, validated at registration and loaded on demand."""

    def __init__(self):
        self._specs: dict = {}
        self._lock = threading.Lock()
        self.load_calls = 0

    def register(self, name: str, spec) -> str:
        if not name:
            raise ValueError("dataloader name must be nonempty")
        with self._lock:
            if name in self._specs:
                raise DuplicateName(name)
        load_spec(spec)
        with self._lock:
            if name in self._specs:
                raise DuplicateName(name)
            self._specs[name] = spec
        return name

    def __contains__(self, name):
        return name in self._specs

    @property
    def names(self) -> list[str]:
        return sorted(self._specs)

    def spec(self, name: str):
        return self._specs[name]

    def load(self, name: str) -> Dataset:
        with self._lock:
            self.load_calls += 1
        return load_spec(self._specs[name])


def register_dataloader(registry: DataloaderRegistry, name: str, spec) -> str:
    return registry.register(name, spec)
