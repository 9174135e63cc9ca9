"""Binary checkpoint format.

Layout: ``DZCK`` magic, little-endian u64 manifest byte length, UTF-8 JSON
manifest, then concatenated little-endian float64 blobs.  The manifest
records the format version, network spec, tensor table (name, shape,
offset into the payload), optional optimizer state, RNG state, and free
training metadata.  Saving a loaded checkpoint reproduces the exact bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import OptimizerState, ParamStore
from .operator import NetworkSpec

CHECKPOINT_MAGIC = b"DZCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    spec: NetworkSpec
    store: ParamStore
    bayesian: bool = False
    optimizer: OptimizerState | None = None
    rng_state: dict | None = None
    metadata: dict = field(default_factory=dict)


def _spec_to_dict(spec: NetworkSpec) -> dict:
    d = asdict(spec)
    for key in ("n", "kmax", "padding"):
        d[key] = list(d[key])
    return d


def _spec_from_dict(d: dict) -> NetworkSpec:
    d = dict(d)
    for key in ("n", "kmax", "padding"):
        d[key] = tuple(d[key])
    return NetworkSpec(**d)


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    tensors = []
    blobs = []
    offset = 0

    def push(name: str, value: np.ndarray):
        nonlocal offset
        arr = np.ascontiguousarray(value, dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes

    for name, p in ckpt.store.items():
        push(f"param.{name}", p.value)
    opt_meta = None
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        opt_meta = {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "weight_decay": opt.weight_decay,
            "step_count": opt.step_count,
        }
        for name in ckpt.store:
            if name in opt.m:
                push(f"opt.m.{name}", opt.m[name])
                push(f"opt.v.{name}", opt.v[name])

    manifest = {
        "version": CHECKPOINT_VERSION,
        "spec": _spec_to_dict(ckpt.spec),
        "bayesian": ckpt.bayesian,
        "tensors": tensors,
        "optimizer": opt_meta,
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: Path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        size, = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(size).decode())
        payload = fh.read()
    if manifest["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest['version']}")

    def read_tensor(entry) -> np.ndarray:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        return arr.reshape(shape).astype(np.float64)

    store = ParamStore()
    opt = None
    if manifest["optimizer"] is not None:
        meta = manifest["optimizer"]
        opt = OptimizerState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"],
                             eps=meta["eps"], weight_decay=meta["weight_decay"],
                             step_count=meta["step_count"])
    for entry in manifest["tensors"]:
        name = entry["name"]
        value = read_tensor(entry)
        if name.startswith("param."):
            store.add(name[len("param."):], value)
        elif name.startswith("opt.m."):
            opt.m[name[len("opt.m."):]] = value
        elif name.startswith("opt.v."):
            opt.v[name[len("opt.v."):]] = value
        else:
            raise ValueError(f"unknown tensor kind {name!r}")

    return Checkpoint(
        spec=_spec_from_dict(manifest["spec"]),
        store=store,
        bayesian=manifest["bayesian"],
        optimizer=opt,
        rng_state=manifest["rng_state"],
        metadata=manifest["metadata"],
    )
