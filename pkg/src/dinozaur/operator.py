"""Neural-operator blocks built around the heat-kernel diffusion multiplier.

The main block damps each Fourier mode of its input by exp(-4 pi^2 |k|^2
tau_c) with one learnable time per channel, augments the smoothed signal
with tanh-normalised gradient inner products for anisotropy, mixes the two
feature sets linearly, and adds a pointwise skip path:

    v' = act( W_skip v + b + W_mix [ smooth(v) ; grad_features(smooth(v)) ] )

A dense per-mode complex multiplier block is provided as the classical
baseline; its parameter count grows with the retained mode count, whereas
the diffusion block's count is 4 d_c^2 + 2 d_c regardless of dimension or
truncation.  Networks are assembled as lifting MLP -> (optional zero
padding) -> M blocks -> (crop) -> projection MLP, all pointwise except the
spectral transforms.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import spectral
from .autodiff import NonFiniteError, Tensor
from .nn import STREAM_INIT, AffineLayer, ParamStore, stream_rng
from .spectral import ConfigError, Field, Grid, ModeSet

BLOCK_KINDS = ("diffusion", "diffusion-no-grad", "fno-dense")

_ACTIVATIONS = {
    "gelu": ad.tgelu,
    "tanh": ad.ttanh,
    "identity": lambda t: t,
}


def _act(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class DiffusionTimes:
    """Per-block, per-channel diffusion times stored as log-times."""

    ln_tau: np.ndarray  # (M, d_c)

    def __post_init__(self):
        self.ln_tau = np.asarray(self.ln_tau, dtype=np.float64)
        if self.ln_tau.ndim != 2:
            raise ConfigError("ln_tau must be (blocks, channels)")
        if not np.all(np.isfinite(self.ln_tau)):
            raise ValueError("log diffusion times must be finite")

    @property
    def tau(self) -> np.ndarray:
        return np.exp(self.ln_tau)


@dataclass
class DinozaurBlock:
    """Diffusion-multiplier block parameters.

    ``w_grad is None`` disables gradient features, in which case ``w_mix``
    is square (d_c x d_c) instead of d_c x 2 d_c.
    """

    w_skip: np.ndarray
    bias: np.ndarray
    w_mix: np.ndarray
    times: np.ndarray              # tau > 0 per channel
    w_grad: np.ndarray | None = None
    activation: str = "gelu"


@dataclass
class FnoBlock:
    """Dense-multiplier baseline block: one complex matrix per retained mode."""

    w_skip: np.ndarray
    bias: np.ndarray
    multiplier: np.ndarray         # complex (K, d_c, d_c)
    activation: str = "gelu"


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description for a full operator network."""

    n: tuple[int, ...]
    kmax: tuple[int, ...]
    d_c: int
    blocks: int
    d_a: int = 1
    d_u: int = 1
    padding: tuple[int, ...] | None = None   # per-side zero pad per dimension
    block_kind: str = "diffusion"
    lift_hidden: int | None = None           # defaults to d_c
    proj_hidden: int | None = None           # defaults to 2 d_c
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        object.__setattr__(self, "kmax", tuple(int(v) for v in self.kmax))
        pad = self.padding
        if pad is None:
            pad = (0,) * len(self.n)
        object.__setattr__(self, "padding", tuple(int(v) for v in pad))
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(
                f"block kind {self.block_kind!r} not one of {BLOCK_KINDS}"
            )
        if len(self.kmax) != len(self.n) or len(self.padding) != len(self.n):
            raise ConfigError("n, kmax, and padding must have equal rank")
        if any(p < 0 for p in self.padding):
            raise ConfigError("padding must be nonnegative")
        if min(self.d_c, self.blocks + 1, self.d_a, self.d_u) < 1:
            raise ConfigError("widths and counts must be positive")
        ModeSet(self.kmax).require_compatible(Grid(self.n))

    @property
    def d(self) -> int:
        return len(self.n)

    @property
    def grid(self) -> Grid:
        return Grid(self.n)

    @property
    def modes(self) -> ModeSet:
        return ModeSet(self.kmax)

    @property
    def padded_n(self) -> tuple[int, ...]:
        return tuple(nj + 2 * pj for nj, pj in zip(self.n, self.padding))

    @property
    def lift_width(self) -> int:
        return self.lift_hidden or self.d_c

    @property
    def proj_width(self) -> int:
        return self.proj_hidden or 2 * self.d_c

    def with_kind(self, kind: str) -> "NetworkSpec":
        return replace(self, block_kind=kind)


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------

def split_total_padding(total: int) -> tuple[int, int]:
    """Split a total pad count across the two sides; odd remainder trails."""
    if total < 0:
        raise ConfigError("padding must be nonnegative")
    return total // 2, total - total // 2


def pad_values(values: np.ndarray, p: tuple[int, ...]) -> np.ndarray:
    """Zero-pad each spatial axis of a (*n, c) array by p_j on both sides."""
    widths = [(pj, pj) for pj in p] + [(0, 0)]
    return np.pad(values, widths)


def crop_values(values: np.ndarray, p: tuple[int, ...]) -> np.ndarray:
    slices = tuple(slice(pj, values.shape[i] - pj) for i, pj in enumerate(p))
    return values[slices + (slice(None),)]


def pad_and_crop(field: Field, p: tuple[int, ...], transform=None) -> Field:
    """Run ``transform`` on a zero-padded copy of the field, then crop back.

    With ``transform=None`` this is the identity on the original region;
    it exists to break artificial periodicity around the block stack.
    """
    padded = pad_values(field.values, p)
    if transform is not None:
        padded = transform(padded)
    return Field(grid=field.grid, values=crop_values(padded, p))


# ---------------------------------------------------------------------------
# block graphs (shared by public single-field ops and the network)
# ---------------------------------------------------------------------------

def _spatial_shape(v: Tensor) -> tuple[int, ...]:
    return tuple(v.data.shape[1:-1])


def _diffusion_branch(v: Tensor, tau: Tensor, kmax: tuple[int, ...]):
    """Returns (smoothed field, diffused coefficients) for a batched tensor."""
    n_eff = _spatial_shape(v)
    coeffs = ad.dft_forward(v, n_eff, kmax)
    diffused = ad.diffuse_modes(coeffs, tau, spectral._sq_norms(kmax))
    return ad.dft_inverse(diffused, n_eff, kmax), diffused


def _gradient_feature_graph(diffused: Tensor, w_grad: Tensor,
                            n_eff: tuple[int, ...], kmax: tuple[int, ...]) -> Tensor:
    freq_grids = np.meshgrid(*spectral._axis_freqs(kmax), indexing="ij")
    parts = []
    for j in range(len(kmax)):
        factor = (2j * np.pi * freq_grids[j].reshape(-1).astype(np.float64))[:, None]
        parts.append(ad.dft_inverse(ad.mode_scale(diffused, factor), n_eff, kmax))
    grads = ad.stack_last(parts)  # (B, *n, c, d)
    return ad.ttanh(ad.grad_pair_features(grads, w_grad))


def _diffusion_block_graph(v: Tensor, tau: Tensor, w_skip: Tensor, bias: Tensor,
                           w_mix: Tensor, w_grad: Tensor | None,
                           kmax: tuple[int, ...], activation: str) -> Tensor:
    n_eff = _spatial_shape(v)
    smoothed, diffused = _diffusion_branch(v, tau, kmax)
    if w_grad is not None:
        features = _gradient_feature_graph(diffused, w_grad, n_eff, kmax)
        stacked = ad.concat([smoothed, features], axis=-1)
    else:
        stacked = smoothed
    pre = ad.add(ad.affine(v, w_skip, bias), ad.matmul(stacked, _transpose(w_mix)))
    return _act(activation)(pre)


def _fno_block_graph(v: Tensor, multiplier: Tensor, w_skip: Tensor, bias: Tensor,
                     kmax: tuple[int, ...], activation: str) -> Tensor:
    n_eff = _spatial_shape(v)
    coeffs = ad.dft_forward(v, n_eff, kmax)
    transformed = ad.dft_inverse(ad.mode_contract(coeffs, multiplier), n_eff, kmax)
    pre = ad.add(ad.affine(v, w_skip, bias), transformed)
    return _act(activation)(pre)


def _transpose(w: Tensor) -> Tensor:
    return Tensor(w.data.T, parents=(w,), vjp=lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------------------
# public single-field operations
# ---------------------------------------------------------------------------

def gradient_features(field: Field, w_grad: np.ndarray,
                      modes: ModeSet | None = None) -> Field:
    """Reference tanh-normalised gradient inner products of a field.

    Output channel c is tanh( sum_r w_grad[c, r] <grad v_c(x), grad v_r(x)> )
    with gradients computed spectrally on ``modes`` (defaults to the full
    alias-free mode set of the grid).
    """
    w_grad = np.asarray(w_grad, dtype=np.float64)
    c = field.channels
    if w_grad.shape != (c, c):
        raise ConfigError(f"w_grad must be ({c}, {c}), got {w_grad.shape}")
    if modes is None:
        modes = ModeSet(tuple(nj // 2 for nj in field.grid.n))
    grads = spectral.spectral_gradient(spectral.forward_fft(field, modes), field.grid)
    d = field.grid.d
    g = grads.values.reshape(*field.grid.n, c, d)
    mixed = np.einsum("cr,...rj->...cj", w_grad, g)
    return Field(grid=field.grid, values=np.tanh(np.einsum("...cj,...cj->...c", g, mixed)))


def dinozaur_block_forward(field: Field, block: DinozaurBlock,
                           modes: ModeSet | None = None) -> Field:
    """Apply one diffusion-multiplier block to a single field."""
    if modes is None:
        modes = ModeSet(tuple(nj // 2 for nj in field.grid.n))
    modes.require_compatible(field.grid)
    tau = np.asarray(block.times, dtype=np.float64)
    if np.any(tau <= 0):
        raise ValueError("block diffusion times must be positive")
    v = Tensor(field.values[None])
    out = _diffusion_block_graph(
        v,
        Tensor(tau),
        Tensor(np.asarray(block.w_skip, dtype=np.float64)),
        Tensor(np.asarray(block.bias, dtype=np.float64)),
        Tensor(np.asarray(block.w_mix, dtype=np.float64)),
        None if block.w_grad is None else Tensor(np.asarray(block.w_grad, dtype=np.float64)),
        modes.kmax,
        block.activation,
    )
    return Field(grid=field.grid, values=out.data[0])


def fno_block_forward(field: Field, block: FnoBlock,
                      modes: ModeSet | None = None) -> Field:
    """Apply one dense-multiplier baseline block to a single field."""
    if modes is None:
        modes = ModeSet(tuple(nj // 2 for nj in field.grid.n))
    modes.require_compatible(field.grid)
    r = np.asarray(block.multiplier, dtype=np.complex128)
    if r.shape != (modes.count, field.channels, field.channels):
        raise ConfigError(
            f"multiplier shape {r.shape} != ({modes.count}, c, c)"
        )
    v = Tensor(field.values[None])
    out = _fno_block_graph(
        v,
        Tensor(r),
        Tensor(np.asarray(block.w_skip, dtype=np.float64)),
        Tensor(np.asarray(block.bias, dtype=np.float64)),
        modes.kmax,
        block.activation,
    )
    return Field(grid=field.grid, values=out.data[0])


def diagonal_heat_multiplier(modes: ModeSet, tau: np.ndarray, d_c: int) -> np.ndarray:
    """Dense multiplier equal to the diffusion damping on its diagonal.

    A baseline block initialised with this tensor reproduces the diffusion
    block without gradient features (given matching skip/mix wiring).
    """
    mult = spectral.diffusion_multiplier(spectral._sq_norms(modes.kmax),
                                         np.broadcast_to(tau, (d_c,)))
    r = np.zeros((modes.count, d_c, d_c), dtype=np.complex128)
    idx = np.arange(d_c)
    r[:, idx, idx] = mult
    return r


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

class Network:
    """Lifting, M operator blocks, projection, with padding around the stack."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec

    # parameter registration -------------------------------------------------
    def init_params(self, seed: int, store: ParamStore | None = None,
                    with_times: bool = True) -> ParamStore:
        """Create and initialise all network parameters.

        ``with_times=False`` skips the per-block log-time entries; the
        Bayesian wrapper registers variational parameters instead.
        """
        spec = self.spec
        store = store if store is not None else ParamStore()
        rng = stream_rng(seed, STREAM_INIT)

        def add_affine(prefix, out_dim, in_dim):
            layer = AffineLayer.init(rng, out_dim, in_dim)
            store.add(f"{prefix}.w", layer.weight)
            store.add(f"{prefix}.b", layer.bias)

        add_affine("lift.0", spec.lift_width, spec.d_a)
        add_affine("lift.1", spec.d_c, spec.lift_width)
        k_count = spec.modes.count
        for i in range(spec.blocks):
            bound = np.sqrt(6.0 / (2 * spec.d_c))
            store.add(f"block.{i}.w_skip",
                      rng.uniform(-bound, bound, size=(spec.d_c, spec.d_c)))
            store.add(f"block.{i}.b", np.zeros(spec.d_c))
            if spec.block_kind == "fno-dense":
                store.add(f"block.{i}.r_re",
                          rng.uniform(-bound, bound, size=(k_count, spec.d_c, spec.d_c)))
                store.add(f"block.{i}.r_im",
                          rng.uniform(-bound, bound, size=(k_count, spec.d_c, spec.d_c)))
            else:
                if spec.block_kind == "diffusion":
                    store.add(f"block.{i}.w_grad",
                              rng.uniform(-bound, bound, size=(spec.d_c, spec.d_c)))
                    mix_in = 2 * spec.d_c
                else:
                    mix_in = spec.d_c
                mix_bound = np.sqrt(6.0 / (mix_in + spec.d_c))
                store.add(f"block.{i}.w_mix",
                          rng.uniform(-mix_bound, mix_bound, size=(spec.d_c, mix_in)))
                if with_times:
                    # log-times drawn around ln 0.01: trained times cluster
                    # well below 0.1, so start the receptive field short.
                    store.add(f"block.{i}.ln_tau",
                              rng.normal(np.log(0.01), 0.5, size=spec.d_c))
        add_affine("proj.0", spec.proj_width, spec.d_c)
        add_affine("proj.1", spec.d_u, spec.proj_width)
        return store

    # forward -----------------------------------------------------------------
    def forward(self, a, leaves: dict[str, Tensor],
                times: list[Tensor] | None = None) -> Tensor:
        """Batched forward pass building the differentiable graph.

        ``a`` is (batch, *n, d_a).  For diffusion kinds, ``times`` supplies
        per-block positive time tensors; when omitted they are taken from
        the store's log-time leaves.
        """
        spec = self.spec
        a = ad.as_tensor(a)
        if tuple(a.data.shape[1:]) != (*spec.n, spec.d_a):
            raise ConfigError(
                f"input shape {a.data.shape} does not match spec {(*spec.n, spec.d_a)}"
            )
        act = _act(spec.activation)

        v = ad.affine(a, leaves["lift.0.w"], leaves["lift.0.b"])
        v = ad.affine(act(v), leaves["lift.1.w"], leaves["lift.1.b"])

        pads = [(p, p) for p in spec.padding]
        if any(spec.padding):
            v = ad.pad_spatial(v, pads)

        for i in range(spec.blocks):
            if spec.block_kind == "fno-dense":
                mult = ad.to_complex(leaves[f"block.{i}.r_re"], leaves[f"block.{i}.r_im"])
                v = _fno_block_graph(v, mult, leaves[f"block.{i}.w_skip"],
                                     leaves[f"block.{i}.b"], spec.kmax, spec.activation)
            else:
                if times is not None:
                    tau = times[i]
                else:
                    tau = ad.texp(leaves[f"block.{i}.ln_tau"])
                w_grad = leaves.get(f"block.{i}.w_grad") if spec.block_kind == "diffusion" else None
                v = _diffusion_block_graph(v, tau, leaves[f"block.{i}.w_skip"],
                                           leaves[f"block.{i}.b"], leaves[f"block.{i}.w_mix"],
                                           w_grad, spec.kmax, spec.activation)
            if not np.all(np.isfinite(v.data)):
                raise NonFiniteError(f"block {i} produced non-finite values")

        if any(spec.padding):
            v = ad.crop_spatial(v, pads)

        v = act(ad.affine(v, leaves["proj.0.w"], leaves["proj.0.b"]))
        return ad.affine(v, leaves["proj.1.w"], leaves["proj.1.b"])

    def forward_values(self, a: np.ndarray, store: ParamStore,
                       ln_tau: np.ndarray | None = None) -> np.ndarray:
        """Inference pass returning plain arrays.

        ``ln_tau`` optionally overrides the per-block log-times (shape
        (blocks, d_c)), e.g. with posterior draws.
        """
        times = None
        if ln_tau is not None:
            times = [Tensor(np.exp(ln_tau[i])) for i in range(self.spec.blocks)]
        return self.forward(Tensor(a), store.leaves(), times=times).data


def network_forward(a: Field, spec: NetworkSpec, store: ParamStore,
                    ln_tau: np.ndarray | None = None) -> Field:
    """Single-field forward pass through a full network."""
    out = Network(spec).forward_values(a.values[None], store, ln_tau=ln_tau)
    return Field(grid=a.grid, values=out[0])


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def count_params(spec: NetworkSpec) -> dict:
    """Exact per-component parameter counts for every block kind.

    The diffusion block total is the closed form 4 d_c^2 + 2 d_c,
    independent of both the grid dimensionality and the retained mode
    count; the dense baseline stores 2 d_c^2 real numbers per retained
    mode.
    """
    d_c, m = spec.d_c, spec.blocks
    k_count = spec.modes.count
    lifting = {
        "w0": spec.lift_width * spec.d_a, "b0": spec.lift_width,
        "w1": spec.d_c * spec.lift_width, "b1": spec.d_c,
    }
    lifting["total"] = sum(lifting.values())
    projection = {
        "w0": spec.proj_width * spec.d_c, "b0": spec.proj_width,
        "w1": spec.d_u * spec.proj_width, "b1": spec.d_u,
    }
    projection["total"] = sum(projection.values())

    diffusion = {
        "w_skip": d_c * d_c, "bias": d_c, "w_grad": d_c * d_c,
        "w_mix": 2 * d_c * d_c, "ln_tau": d_c,
    }
    diffusion["per_block"] = sum(v for k, v in diffusion.items() if k != "per_block")
    no_grad = {
        "w_skip": d_c * d_c, "bias": d_c, "w_mix": d_c * d_c, "ln_tau": d_c,
    }
    no_grad["per_block"] = sum(v for k, v in no_grad.items() if k != "per_block")
    fno = {
        "w_skip": d_c * d_c, "bias": d_c, "multiplier": 2 * d_c * d_c * k_count,
    }
    fno["per_block"] = sum(v for k, v in fno.items() if k != "per_block")

    per_block = {"diffusion": diffusion, "diffusion-no-grad": no_grad, "fno-dense": fno}
    table = {
        "lifting": lifting,
        "projection": projection,
        "blocks": per_block,
        "modes_retained": k_count,
        "block_totals": {kind: m * kv["per_block"] for kind, kv in per_block.items()},
    }
    table["totals"] = {
        kind: lifting["total"] + projection["total"] + table["block_totals"][kind]
        for kind in per_block
    }
    table["total"] = table["totals"][spec.block_kind]
    return table
