"""Run configuration: one JSON document, validated strictly, flags override.

Unknown keys are rejected so typos fail before any compute.  The fully
resolved configuration is echoed into the run's output directory for
provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spectral import ConfigError

_TASK_KEYS = {
    "kind": "heat",
    "n": [64],
    "train": 256,
    "test": 64,
    "horizon": 0.01,
    "alpha": 2.0,
    "kmax_cut": None,
    "amplitude": 1.0,
    "input_scaling": None,   # None -> per-kind default
    "target_scaling": None,
}

_NETWORK_KEYS = {
    "n": None,               # None -> taken from the dataset
    "kmax": None,            # None -> n // 4 per dimension
    "d_c": 8,
    "blocks": 2,
    "d_a": None,
    "d_u": None,
    "padding": None,
    "block_kind": "diffusion",
    "lift_hidden": None,
    "proj_hidden": None,
}

_OPTIMIZER_KEYS = {
    "lr": 1e-2,
    "epochs": 200,
    "batch_size": 32,
    "weight_decay": 1e-4,
}

_BAYES_KEYS = {
    "enabled": False,
    "prior_mu": float(np.log(0.01)),
    "prior_sigma": 1.0,
    "posterior_mu0": -5.0,
    "posterior_scale0": 0.5,
    "ln_sigma2_init": -4.0,
    "samples": 100,
}

_TOP_KEYS = {"seed", "out", "dataset", "checkpoint", "task", "network", "optimizer", "bayes"}


def _merge_section(name: str, defaults: dict, given: dict | None) -> dict:
    given = given or {}
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    dataset: str | None = None
    checkpoint: str | None = None
    task: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    bayes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.task = _merge_section("task", _TASK_KEYS, self.task)
        self.network = _merge_section("network", _NETWORK_KEYS, self.network)
        self.optimizer = _merge_section("optimizer", _OPTIMIZER_KEYS, self.optimizer)
        self.bayes = _merge_section("bayes", _BAYES_KEYS, self.bayes)
        self.seed = int(self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out": self.out,
            "dataset": self.dataset,
            "checkpoint": self.checkpoint,
            "task": self.task,
            "network": self.network,
            "optimizer": self.optimizer,
            "bayes": self.bayes,
        }

    def echo(self, outdir: Path) -> None:
        Path(outdir).mkdir(parents=True, exist_ok=True)
        (Path(outdir) / "config_resolved.json").write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        )

    def apply_overrides(self, **overrides) -> "RunConfig":
        """Apply CLI flags; dotted destinations address nested sections."""
        d = self.to_dict()
        for dest, value in overrides.items():
            if value is None:
                continue
            keys = dest.split(".")
            node = d
            for k in keys[:-1]:
                node = node[k]
            node[keys[-1]] = value
        return RunConfig.from_dict(d)
