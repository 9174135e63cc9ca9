"""Trainable-parameter registry, optimizer, schedule, and gradient checker.

All randomness in the repository flows through :func:`stream_rng`: a single
64-bit seed plus a tuple of small integer stream codes feeds numpy's
``SeedSequence``/PCG64, so every initialisation and sampling stream is
reproducible bit-for-bit and independent of call order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .autodiff import NonFiniteError, Tensor

# stream codes for seed derivation (documented contract, do not renumber)
STREAM_INIT = 0          # parameter initialisation
STREAM_DATA = 1          # dataset sampling
STREAM_SHUFFLE = 2       # minibatch shuffling
STREAM_ELBO = 3          # per-step reparametrisation draws
STREAM_PREDICTIVE = 4    # posterior-predictive tau and noise draws
STREAM_GRADCHECK = 5     # gradient-checker probe data


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for stream ``key`` of a run-level seed.

    Implemented as ``PCG64(SeedSequence(entropy=seed, spawn_key=key))``;
    numpy guarantees the derivation is stable across platforms.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=key)))


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

class Parameter:
    """A named trainable tensor with an accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class ParamStore:
    """Ordered mapping of path-like names to trainable parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad.fill(0.0)

    def num_values(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def leaves(self) -> dict[str, Tensor]:
        """Fresh graph leaves viewing the current parameter values."""
        return {name: Tensor(p.value, param=p) for name, p in self._params.items()}

    def check_finite(self) -> None:
        for name, p in self._params.items():
            if not np.all(np.isfinite(p.value)):
                raise NonFiniteError(f"parameter {name!r} contains non-finite values")

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, value in snap.items():
            self._params[name].value[...] = value


@dataclass
class AffineLayer:
    """Dense affine map y = W x + b."""

    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    @classmethod
    def init(cls, rng: np.random.Generator, out_dim: int, in_dim: int) -> "AffineLayer":
        """Glorot-uniform weights, zero bias."""
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        return cls(weight=w, bias=np.zeros(out_dim))


# ---------------------------------------------------------------------------
# activations (plain-array forms with derivatives; tape wrappers in autodiff)
# ---------------------------------------------------------------------------

def gelu(x: np.ndarray) -> np.ndarray:
    """Exact-erf GELU: x * Phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return x * ndtr(x)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    pdf = np.exp(-0.5 * x ** 2) / np.sqrt(2.0 * np.pi)
    return ndtr(x) + x * pdf


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_grad(x: np.ndarray) -> np.ndarray:
    return 1.0 - np.tanh(x) ** 2


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """AdamW moment accumulators and hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(store: ParamStore, opt: OptimizerState, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update; gradients are zeroed afterwards.

    Raises :class:`NonFiniteError` before touching any value if a gradient
    is not finite.
    """
    for name, p in store.items():
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"gradient of {name!r} is not finite")
    lr = opt.lr if lr is None else lr
    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for name, p in store.items():
        m = opt.m.setdefault(name, np.zeros_like(p.value))
        v = opt.v.setdefault(name, np.zeros_like(p.value))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * p.grad
        v *= opt.beta2
        v += (1.0 - opt.beta2) * p.grad ** 2
        if opt.weight_decay:
            p.value *= 1.0 - lr * opt.weight_decay
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    store.zero_grad()
    store.check_finite()


def one_cycle_lr(step: float, total_steps: int, max_lr: float,
                 warmup_frac: float = 0.3, div_start: float = 25.0,
                 div_final: float = 1e4) -> float:
    """One-cycle schedule: linear warmup to ``max_lr``, cosine decay after.

    Warms up from max_lr / div_start over the first ``warmup_frac`` of the
    run, then decays along a half cosine to max_lr / div_final at the end.
    Continuous in ``step`` (the two branches agree at the junction).
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_frac * total_steps
    start = max_lr / div_start
    floor = max_lr / div_final
    if step <= warm:
        return start + (max_lr - start) * (step / warm if warm > 0 else 1.0)
    t = (step - warm) / (total_steps - warm)
    return floor + (max_lr - floor) * 0.5 * (1.0 + np.cos(np.pi * t))


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------

@dataclass
class CoordError:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: CoordError | None
    n_coords: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance

    def summary(self) -> str:
        if self.worst is None:
            return "gradcheck: no coordinates checked"
        w = self.worst
        return (
            f"gradcheck: max rel error {self.max_rel_error:.3e} over "
            f"{self.n_coords} coordinates (worst {w.param}{list(w.index)}: "
            f"analytic {w.analytic:.6e}, numeric {w.numeric:.6e})"
        )


def gradcheck(loss_fn, store: ParamStore, h: float = 1e-6) -> GradCheckReport:
    """Compare backprop gradients against central finite differences.

    ``loss_fn`` rebuilds the scalar loss Tensor from the current store
    values; it must be deterministic (any sampling fixed outside).  Each
    coordinate is perturbed by h * max(1, |theta|).  Relative errors are
    measured against max(|analytic|, |numeric|, floor) where the floor is
    a small fraction of the largest gradient magnitude, so flat directions
    (saturated tanh, unused triangle entries) do not amplify roundoff noise.
    """
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in store.items()}
    store.zero_grad()

    gmax = max((np.abs(g).max() for g in analytic.values() if g.size), default=0.0)
    floor = 1e-3 * max(gmax, 1e-12)

    worst = None
    max_rel = 0.0
    n_coords = 0
    for name, p in store.items():
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            n_coords += 1
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            ana = float(analytic[name].reshape(-1)[i])
            rel = abs(numeric - ana) / max(abs(numeric), abs(ana), floor)
            if rel >= max_rel:
                max_rel = rel
                worst = CoordError(
                    param=name,
                    index=tuple(int(j) for j in np.unravel_index(i, p.value.shape)),
                    analytic=ana,
                    numeric=numeric,
                    rel_error=rel,
                )
    return GradCheckReport(max_rel_error=max_rel, worst=worst, n_coords=n_coords)
