"""Synthetic operator-learning datasets with verifiable targets.

Three desk-scale tasks, each shipping an oracle for its own targets:

* ``heat`` -- inputs are random smooth fields, targets apply the exact
  heat semigroup for a fixed horizon; the map is a pure diffusion
  multiplier, so a single-channel diffusion block can represent it.
* ``screened-poisson`` -- solves (I - Laplacian) u = a spectrally, exact
  to machine precision.
* ``darcy-lite`` -- solves -div(a grad u) + u = 1 with log-normal
  coefficient a = exp(g) by preconditioned conjugate gradients; every
  accepted sample certifies a relative residual <= 1e-10.

Datasets serialise to a directory of DZF1 field files plus a manifest;
generation is a pure function of (task, seed), so re-running reproduces
the archive byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.fft as _fft

from . import spectral
from .nn import STREAM_DATA, stream_rng
from .spectral import Field, Grid, ModeSet

FIELD_MAGIC = b"DZF1"
FORMAT_VERSION = 1

TASK_KINDS = ("heat", "screened-poisson", "darcy-lite")


class GenerationError(RuntimeError):
    """A generated sample failed its own oracle."""


# ---------------------------------------------------------------------------
# random smooth fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RandomFieldSpec:
    """Power-law random field: coefficient std ~ amplitude (1 + |k|^2)^(-alpha/2).

    ``alpha > d/2`` keeps samples smooth; ``kmax_cut`` truncates the band
    (defaults to n/4 per dimension at sampling time).
    """

    alpha: float = 2.0
    kmax_cut: int | None = None
    amplitude: float = 1.0
    seed: int = 0
    zero_mean: bool = False

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be nonnegative")


def sample_random_field(spec: RandomFieldSpec, grid: Grid, channels: int = 1) -> Field:
    """Draw a real random field with Hermitian-symmetrised coefficients."""
    cut = spec.kmax_cut
    kmax = tuple(min(cut, nj // 2) if cut else nj // 4 for nj in grid.n)
    modes = ModeSet(kmax)
    modes.require_compatible(grid)
    rng = stream_rng(spec.seed)
    k_count = modes.count
    coeffs = rng.standard_normal((k_count, channels)) \
        + 1j * rng.standard_normal((k_count, channels))
    scale = spec.amplitude * (1.0 + spectral._sq_norms(kmax)) ** (-spec.alpha / 2.0)
    coeffs *= scale[:, None]

    counts = modes.axis_counts
    block = coeffs.reshape(*counts, channels)
    plane = block[..., 0, :]
    if grid.d == 1:
        block[..., 0, :] = plane.real
    else:
        perms = [(len_j - np.arange(len_j)) % len_j for len_j in counts[:-1]]
        mirrored = plane[np.ix_(*perms)]
        block[..., 0, :] = 0.5 * (plane + np.conj(mirrored))
    if spec.zero_mean:
        block[(0,) * grid.d] = 0.0

    values = spectral.inverse_modes(block.reshape(k_count, channels), grid.n, kmax)
    return Field(grid=grid, values=values)


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatorTask:
    """Specification of one synthetic dataset."""

    kind: str
    n: tuple[int, ...]
    n_train: int
    n_test: int
    seed: int = 0
    horizon: float = 0.01          # heat only
    alpha: float = 2.0
    kmax_cut: int | None = None
    amplitude: float = 1.0
    input_scaling: str = "none"
    target_scaling: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind {self.kind!r} not one of {TASK_KINDS}")
        if self.kind == "heat" and self.horizon < 0:
            raise ValueError("heat horizon must be nonnegative")
        if min(self.n_train, self.n_test) < 1:
            raise ValueError("need at least one sample per split")
        for scaling in (self.input_scaling, self.target_scaling):
            if scaling not in ("none", "standard"):
                raise ValueError(f"unknown scaling {scaling!r}")

    @property
    def grid(self) -> Grid:
        return Grid(self.n)

    @classmethod
    def make(cls, kind: str, n: tuple[int, ...], n_train: int, n_test: int,
             seed: int = 0, **kwargs) -> "OperatorTask":
        """Task with per-kind default scalers (log-coefficient tasks scale both)."""
        defaults: dict = {}
        if kind == "screened-poisson":
            defaults = {"target_scaling": "standard"}
        elif kind == "darcy-lite":
            # moderate log-amplitude keeps the coefficient contrast benign
            defaults = {"input_scaling": "standard", "target_scaling": "standard",
                        "amplitude": 0.4}
        defaults.update(kwargs)
        return cls(kind=kind, n=tuple(n), n_train=n_train, n_test=n_test,
                   seed=seed, **defaults)


@dataclass
class OperatorDataset:
    task: OperatorTask
    a_train: np.ndarray
    u_train: np.ndarray
    a_test: np.ndarray
    u_test: np.ndarray
    oracle: dict

    @property
    def grid(self) -> Grid:
        return self.task.grid


def _field_spec_for(task: OperatorTask, split_code: int, index: int) -> RandomFieldSpec:
    child_seed = int(stream_rng(task.seed, STREAM_DATA, split_code, index).integers(2 ** 63))
    return RandomFieldSpec(alpha=task.alpha, kmax_cut=task.kmax_cut,
                           amplitude=task.amplitude, seed=child_seed)


def _heat_target(a: np.ndarray, n: tuple[int, ...], horizon: float) -> np.ndarray:
    kmax = tuple(nj // 2 for nj in n)
    coeffs = spectral.forward_modes(a, n, kmax)
    mult = spectral.diffusion_multiplier(spectral._sq_norms(kmax),
                                         np.full(a.shape[-1], horizon))
    return spectral.inverse_modes(coeffs * mult, n, kmax)


def _screened_poisson_target(a: np.ndarray, n: tuple[int, ...]) -> np.ndarray:
    d = len(n)
    axes = tuple(range(a.ndim - 1 - d, a.ndim - 1))
    sq = spectral.rfft_sq_norm_grid(n)[..., None]
    a_hat = _fft.rfftn(a, axes=axes, norm="forward")
    u_hat = a_hat / (1.0 + spectral.FOUR_PI_SQ * sq)
    return _fft.irfftn(u_hat, s=n, axes=axes, norm="forward")


def screened_poisson_residual(a: np.ndarray, u: np.ndarray, n: tuple[int, ...]) -> float:
    """max |u - Lap u - a| / max |a| via the spectral Laplacian."""
    d = len(n)
    axes = tuple(range(u.ndim - 1 - d, u.ndim - 1))
    sq = spectral.rfft_sq_norm_grid(n)[..., None]
    u_hat = _fft.rfftn(u, axes=axes, norm="forward")
    lap = _fft.irfftn(-spectral.FOUR_PI_SQ * sq * u_hat, s=n, axes=axes, norm="forward")
    return float(np.max(np.abs(u - lap - a)) / np.max(np.abs(a)))


# ---------------------------------------------------------------------------
# darcy-lite: -div(a grad u) + u = f on the torus, PCG with spectral preconditioner
# ---------------------------------------------------------------------------

def darcy_forcing(n: tuple[int, ...]) -> np.ndarray:
    """Fixed forcing for the coefficient-to-solution task.

    A constant forcing would be absorbed exactly by the screening term,
    collapsing every target to the same constant field; the fixed unit
    product of cosines keeps the coefficient-to-solution map nontrivial.
    """
    mod = np.ones(n)
    for x in Grid(n).meshgrid():
        mod = mod * np.cos(2.0 * np.pi * x)
    return mod


def _darcy_operator(n: tuple[int, ...], a_scale: float = 1.0):
    factors = spectral.rfft_derivative_factors(n)
    axes = tuple(range(len(n)))
    sq = spectral.rfft_sq_norm_grid(n)

    def apply_op(u: np.ndarray, a: np.ndarray) -> np.ndarray:
        u_hat = _fft.rfftn(u, axes=axes, norm="forward")
        div = np.zeros_like(u)
        for f in factors:
            flux = a * _fft.irfftn(f * u_hat, s=n, axes=axes, norm="forward")
            flux_hat = _fft.rfftn(flux, axes=axes, norm="forward")
            div += _fft.irfftn(f * flux_hat, s=n, axes=axes, norm="forward")
        return -div + u

    def precondition(r: np.ndarray) -> np.ndarray:
        # screened-Poisson inverse at the typical coefficient level
        r_hat = _fft.rfftn(r, axes=axes, norm="forward")
        return _fft.irfftn(r_hat / (1.0 + a_scale * spectral.FOUR_PI_SQ * sq),
                             s=n, axes=axes, norm="forward")

    return apply_op, precondition


def solve_darcy_lite(a: np.ndarray, f: np.ndarray, n: tuple[int, ...],
                     tol: float = 1e-11, max_iter: int | None = None) -> tuple[np.ndarray, float, int]:
    """PCG solve of -div(a grad u) + u = f; returns (u, rel_residual, iters).

    The grid-space operator is symmetric positive definite (derivatives are
    spectral with zeroed Nyquist rows, the coefficient product pointwise),
    and the screened-Poisson inverse at the geometric-mean coefficient
    level preconditions it.
    """
    a_scale = float(np.exp(np.mean(np.log(a))))
    apply_op, precondition = _darcy_operator(n, a_scale=a_scale)
    if max_iter is None:
        max_iter = 10 * int(np.prod(n))
    f_norm = float(np.linalg.norm(f))
    u = np.zeros_like(f)
    r = f - apply_op(u, a)
    z = precondition(r)
    p = z.copy()
    rz = float(np.vdot(r, z).real)
    iters = 0
    for iters in range(1, max_iter + 1):
        ap = apply_op(p, a)
        alpha = rz / float(np.vdot(p, ap).real)
        u += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= tol * f_norm:
            break
        z = precondition(r)
        rz_new = float(np.vdot(r, z).real)
        p = z + (rz_new / rz) * p
        rz = rz_new
    true_res = float(np.linalg.norm(f - apply_op(u, a)) / f_norm)
    if true_res > 1e-10:
        raise GenerationError(
            f"conjugate gradients stalled at relative residual {true_res:.3e} "
            f"after {iters} iterations (coefficient range "
            f"[{a.min():.3e}, {a.max():.3e}])"
        )
    return u, true_res, iters


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate(task: OperatorTask) -> OperatorDataset:
    """Generate all splits of a task; deterministic in (task, seed)."""
    grid = task.grid
    splits = {}
    oracle: dict = {"kind": task.kind, "max_residual": 0.0}
    for split_code, count in ((0, task.n_train), (1, task.n_test)):
        a_list, u_list = [], []
        for i in range(count):
            fspec = _field_spec_for(task, split_code, i)
            g = sample_random_field(fspec, grid).values
            if task.kind == "heat":
                a = g
                u = _heat_target(a, task.n, task.horizon)
            elif task.kind == "screened-poisson":
                a = g
                u = _screened_poisson_target(a, task.n)
                res = screened_poisson_residual(a, u, task.n)
                oracle["max_residual"] = max(oracle["max_residual"], res)
            else:
                # the forcing rides along as a second input channel: the
                # network is translation-equivariant, so the anchored
                # forcing pattern must be visible in the input for the
                # coefficient-to-solution map to be representable
                coeff = np.exp(g)
                forcing = darcy_forcing(task.n)
                u, res, _ = solve_darcy_lite(coeff[..., 0], forcing, task.n)
                u = u[..., None]
                a = np.concatenate([coeff, forcing[..., None]], axis=-1)
                oracle["max_residual"] = max(oracle["max_residual"], res)
            a_list.append(a)
            u_list.append(u)
        splits[split_code] = (np.stack(a_list), np.stack(u_list))
    a_train, u_train = splits[0]
    a_test, u_test = splits[1]
    return OperatorDataset(task=task, a_train=a_train, u_train=u_train,
                           a_test=a_test, u_test=u_test, oracle=oracle)


# ---------------------------------------------------------------------------
# scalers
# ---------------------------------------------------------------------------

@dataclass
class StandardScaler:
    """Per-channel standardisation with population statistics.

    Channels whose training std vanishes are flagged constant and passed
    through untouched.
    """

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "StandardScaler":
        c = values.shape[-1]
        flat = values.reshape(-1, c)
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)          # population convention (ddof=0)
        constant = std < 1e-14 * np.maximum(1.0, np.abs(mean))
        safe_mean = np.where(constant, 0.0, mean)
        safe_std = np.where(constant, 1.0, std)
        return cls(mean=safe_mean, std=safe_std, constant=constant)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def to_dict(self) -> dict:
        return {
            "kind": "standard",
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "constant": self.constant.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardScaler":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64),
                   constant=np.asarray(d["constant"], dtype=bool))


def fit_scaler(values: np.ndarray) -> StandardScaler:
    return StandardScaler.fit(values)


def apply_scaler(scaler: StandardScaler | None, values: np.ndarray) -> np.ndarray:
    return values if scaler is None else scaler.transform(values)


def invert_scaler(scaler: StandardScaler | None, values: np.ndarray) -> np.ndarray:
    return values if scaler is None else scaler.inverse_transform(values)


# ---------------------------------------------------------------------------
# DZF1 field files
# ---------------------------------------------------------------------------

def write_field_file(path: Path, values: np.ndarray) -> None:
    """Binary field file: DZF1 magic, u32 rank, u32 dims, u32 channels, f64 data.

    All integers and floats little-endian; data row-major with channels
    fastest.  Round-trips bit-exactly.
    """
    values = np.asarray(values, dtype=np.float64)
    rank = values.ndim - 1
    dims = values.shape[:-1]
    channels = values.shape[-1]
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<I", rank))
        fh.write(struct.pack(f"<{rank}I", *dims))
        fh.write(struct.pack("<I", channels))
        fh.write(values.astype("<f8").tobytes(order="C"))


def read_field_file(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FIELD_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        rank, = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        channels, = struct.unpack("<I", fh.read(4))
        count = int(np.prod(dims)) * channels
        data = np.frombuffer(fh.read(8 * count), dtype="<f8")
        if data.size != count:
            raise ValueError(f"{path}: truncated payload")
    return data.reshape(*dims, channels).astype(np.float64)


# ---------------------------------------------------------------------------
# dataset archives
# ---------------------------------------------------------------------------

def save_dataset(ds: OperatorDataset, outdir: Path) -> dict:
    """Write the archive directory and return its manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    scalers = {}
    for side, scaling, train_values in (
        ("input", ds.task.input_scaling, ds.a_train),
        ("target", ds.task.target_scaling, ds.u_train),
    ):
        if scaling == "standard":
            scalers[side] = StandardScaler.fit(train_values).to_dict()
        else:
            scalers[side] = {"kind": "none"}

    files: dict[str, list[list[str]]] = {}
    for split, a, u in (("train", ds.a_train, ds.u_train),
                        ("test", ds.a_test, ds.u_test)):
        (outdir / split).mkdir(exist_ok=True)
        entries = []
        for i in range(a.shape[0]):
            pa = f"{split}/{i:04d}.a.dzf"
            pu = f"{split}/{i:04d}.u.dzf"
            write_field_file(outdir / pa, a[i])
            write_field_file(outdir / pu, u[i])
            entries.append([pa, pu])
        files[split] = entries

    manifest = {
        "format_version": FORMAT_VERSION,
        "task": asdict(ds.task),
        "grid": list(ds.task.n),
        "channels": {"input": int(ds.a_train.shape[-1]),
                     "output": int(ds.u_train.shape[-1])},
        "seed": ds.task.seed,
        "scalers": scalers,
        "oracle": ds.oracle,
        "files": files,
    }
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return manifest


@dataclass
class LoadedDataset:
    task: OperatorTask
    manifest: dict
    a_train: np.ndarray
    u_train: np.ndarray
    a_test: np.ndarray
    u_test: np.ndarray

    @property
    def grid(self) -> Grid:
        return self.task.grid

    def scaler(self, side: str) -> StandardScaler | None:
        d = self.manifest["scalers"][side]
        return StandardScaler.from_dict(d) if d["kind"] == "standard" else None


def load_dataset(directory: Path) -> LoadedDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest['format_version']}")
    task_dict = dict(manifest["task"])
    task_dict["n"] = tuple(task_dict["n"])
    task = OperatorTask(**task_dict)
    arrays = {}
    for split in ("train", "test"):
        a_list, u_list = [], []
        for pa, pu in manifest["files"][split]:
            a_list.append(read_field_file(directory / pa))
            u_list.append(read_field_file(directory / pu))
        arrays[split] = (np.stack(a_list), np.stack(u_list))
    return LoadedDataset(task=task, manifest=manifest,
                         a_train=arrays["train"][0], u_train=arrays["train"][1],
                         a_test=arrays["test"][0], u_test=arrays["test"][1])
