"""Experiment configuration files.

Schema (JSON, all sections optional except ``model`` and ``data``)::

    {
      "name": "blobs-demo",
      "profile": "BoolQ",              # fills batches_per_round / max_token_length
      "seed": 0,                       # default for every seed below
      "global_rounds": 5,
      "model": {"kind": "linear_softmax", "input_dim": 8, "class_count": 10,
                "adapter": {"rank": 2, "scaling": 4, "target_names": ["linear.weight"]}},
      "trainer": {"learning_rate": 0.0001, "decay": 0.85, "batch_size": 4, ...},
      "data": {"source": "synthetic:blobs?classes=10&n=4000&dim=8&seed=1", "val_fraction": 0.2},
      "partition": {"scheme": "dual_dirichlet", "n_clients": 4, "alpha1": 2, "alpha2": 8},
      "communication": {"inline_threshold": 1048576, "timeout_s": 300, "token_ttl_s": 900,
                        "store": "store/", "listen": "127.0.0.1:7000", "dial": false,
                        "connect_timeout_s": 60},
      "federation": {"manifest": "fed/manifest.json", "roster": null, "server_identity": null},
      "baselines": false,
      "run_log": "runs/blobs-demo.jsonl"
    }

A synthetic source without its own ``seed`` takes the top-level seed.
Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .communicator.store import DEFAULT_INLINE_THRESHOLD
from .communicator.transport import DEFAULT_TIMEOUT
from .errors import ConfigError
from .federation.dataloader import parse_spec, shard_spec
from .partition import PartitionConfig
from .taskdata import PROFILES, DatasetProfile
from .trainer import ModelSpec, TrainerConfig

SCHEMES = ("dual_dirichlet", "replicate")


@dataclass
class ExperimentConfig:
    model: ModelSpec
    data_source: str
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    name: str = "experiment"
    profile: DatasetProfile | None = None
    global_rounds: int = 5
    seed: int = 0
    val_fraction: float = 0.2
    partition: PartitionConfig = field(default_factory=lambda: PartitionConfig(4))
    partition_scheme: str = "dual_dirichlet"
    inline_threshold: int = DEFAULT_INLINE_THRESHOLD
    timeout_s: float = DEFAULT_TIMEOUT
    token_ttl_s: float = 900.0
    connect_timeout_s: float = 60.0
    store: str | None = None
    listen: str = "127.0.0.1:0"
    dial: bool = False
    manifest: str | None = None
    roster: list[str] | None = None
    server_identity: str | None = None
    baselines: bool = False
    run_log: str | None = None

    def __post_init__(self):
        if self.global_rounds < 1:
            raise ConfigError("global_rounds must be >= 1")
        if self.partition_scheme not in SCHEMES:
            raise ConfigError(f"partition scheme must be one of {SCHEMES}")
        if self.roster is not None and not self.roster:
            raise ConfigError("roster must be nonempty")
        if self.inline_threshold < 0:
            raise ConfigError("inline_threshold must be >= 0")

    @property
    def n_clients(self) -> int:
        return len(self.roster) if self.roster else self.partition.n_clients

    @property
    def dataset_label(self) -> str:
        return self.profile.dataset_kind if self.profile else self.name

    def client_loader_spec(self, client_index: int) -> str:
        """Loader spec for one client's training shard."""
        partition = replace(self.partition, n_clients=self.n_clients)
        return shard_spec(self.data_source, split="train", val_fraction=self.val_fraction,
                          partition=partition, client=client_index, scheme=self.partition_scheme)

    def pooled_loader_spec(self) -> str:
        return shard_spec(self.data_source, split="train", val_fraction=self.val_fraction)

    def validation_loader_spec(self) -> str | None:
        if self.val_fraction <= 0:
            return None
        return shard_spec(self.data_source, split="val", val_fraction=self.val_fraction)

    def task_config(self) -> dict:
        return {"model": self.model.to_dict(), "trainer": self.trainer.to_dict()}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "profile": self.profile.dataset_kind if self.profile else None,
            "seed": self.seed,
            "global_rounds": self.global_rounds,
            "model": self.model.to_dict(),
            "trainer": self.trainer.to_dict(),
            "data": {"source": self.data_source, "val_fraction": self.val_fraction},
            "partition": {
                "scheme": self.partition_scheme,
                "n_clients": self.partition.n_clients,
                "alpha1": self.partition.alpha1,
                "alpha2": self.partition.alpha2,
                "seed": self.partition.seed,
            },
            "communication": {
                "inline_threshold": self.inline_threshold,
                "timeout_s": self.timeout_s,
                "token_ttl_s": self.token_ttl_s,
                "connect_timeout_s": self.connect_timeout_s,
                "store": self.store,
                "listen": self.listen,
                "dial": self.dial,
            },
            "federation": {"manifest": self.manifest, "roster": self.roster,
                           "server_identity": self.server_identity},
            "baselines": self.baselines,
            "run_log": self.run_log,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir=None) -> "ExperimentConfig":
        try:
            return _from_dict(d, Path(base_dir) if base_dir else None)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc


def _resolve(path, base_dir):
    if path is None or base_dir is None:
        return path
    if isinstance(path, str) and path.startswith(("http://", "https://", "memory")):
        return path
    p = Path(path)
    return str(p if p.is_absolute() else base_dir / p)


def _from_dict(d, base_dir):
    unknown = set(d) - {"name", "profile", "seed", "global_rounds", "model", "trainer", "data", "partition",
                        "communication", "federation", "baselines", "run_log"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    seed = int(d.get("seed", 0))
    profile = None
    if d.get("profile"):
        if d["profile"] not in PROFILES:
            raise ConfigError(f"unknown profile {d['profile']!r}; known: {sorted(PROFILES)}")
        profile = PROFILES[d["profile"]]

    model = dict(d["model"])
    model.setdefault("init_seed", seed)
    model.setdefault("adapter_seed", seed)
    trainer = dict(d.get("trainer", {}))
    trainer.setdefault("seed", seed)
    if profile is not None:
        trainer.setdefault("batches_per_round", profile.batches_per_round)
        trainer.setdefault("max_token_length", profile.max_token_length)

    data = d["data"]
    if isinstance(data, str):
        data = {"source": data}
    source = data["source"]
    if source.startswith("synthetic:") and "seed" not in parse_spec(source)[2]:
        source += ("&" if "?" in source else "?") + f"seed={seed}"
    part = dict(d.get("partition", {}))
    scheme = part.pop("scheme", "dual_dirichlet")
    part.setdefault("n_clients", 4)
    part.setdefault("seed", seed)
    comm = d.get("communication", {})
    fed = d.get("federation", {})
    return ExperimentConfig(
        model=ModelSpec.from_dict(model),
        data_source=source,
        trainer=TrainerConfig.from_dict(trainer),
        name=d.get("name", "experiment"),
        profile=profile,
        global_rounds=int(d.get("global_rounds", 5)),
        seed=seed,
        val_fraction=float(data.get("val_fraction", 0.2)),
        partition=PartitionConfig(int(part["n_clients"]), float(part.get("alpha1", 2.0)),
                                  float(part.get("alpha2", 8.0)), int(part["seed"])),
        partition_scheme=scheme,
        inline_threshold=int(comm.get("inline_threshold", DEFAULT_INLINE_THRESHOLD)),
        timeout_s=float(comm.get("timeout_s", DEFAULT_TIMEOUT)),
        token_ttl_s=float(comm.get("token_ttl_s", 900.0)),
        connect_timeout_s=float(comm.get("connect_timeout_s", 60.0)),
        store=_resolve(comm.get("store"), base_dir),
        listen=comm.get("listen", "127.0.0.1:0"),
        dial=bool(comm.get("dial", False)),
        manifest=_resolve(fed.get("manifest"), base_dir),
        roster=fed.get("roster"),
        server_identity=fed.get("server_identity"),
        baselines=bool(d.get("baselines", False)),
        run_log=_resolve(d.get("run_log"), base_dir),
    )


def bundled_configs() -> list[str]:
    root = resources.files("fedsilo") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(path_or_name) -> ExperimentConfig:
    """Load a config file, or a bundled config by name (e.g. ``blobs_demo``)."""
    path = Path(path_or_name)
    if path.is_file():
        return ExperimentConfig.from_dict(json.loads(path.read_text()), path.parent)
    name = str(path_or_name)
    if name in bundled_configs():
        text = (resources.files("fedsilo") / "configs" / f"{name}.json").read_text()
        return ExperimentConfig.from_dict(json.loads(text))
    raise ConfigError(f"no config file {path_or_name!r} (bundled: {', '.join(bundled_configs())})")
