"""Reverse-mode differentiation tape for the fixed operator architectures.

A small tape built on numpy arrays.  Every operation records its parents
and a closure computing vector-Jacobian products; ``Tensor.backward`` walks
the graph once in reverse topological order and accumulates gradients into
the participating :class:`~dinozaur.nn.Parameter` leaves.

Complex intermediates (Fourier coefficients, dense spectral multipliers)
carry gradients in the convention g = dL/dRe + i dL/dIm, under which a
C-linear map pulls cotangents back through its conjugate transpose and an
elementwise product y = a * z has vjp g_z = conj(a) * g.  The adjoint of
the truncated forward transform is the zero-padded normalised inverse
transform, and vice versa; both kernels live in :mod:`dinozaur.spectral`.

Only the primitives needed by the operator, Bayesian, and loss graphs are
provided; this is not a general autodiff system.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from . import spectral

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Node in the computation graph wrapping a numpy array."""

    __slots__ = ("data", "grad", "_parents", "_vjp", "param")

    def __init__(self, data, parents=(), vjp=None, param=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        self.param = param

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # backward -------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if not np.isfinite(self.data):
            raise NonFiniteError("loss is not finite")
        order = _toposort(self)
        self.grad = np.ones_like(self.data, dtype=np.float64)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                g = _match_dtype(g, parent.data)
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in order:
            if node.param is not None and node.grad is not None:
                node.param.grad += node.grad


class NonFiniteError(ArithmeticError):
    """A loss or gradient stopped being finite."""


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    dtype = np.complex128 if np.iscomplexobj(arr) else np.float64
    return Tensor(arr.astype(dtype, copy=False))


def _toposort(root: Tensor) -> list[Tensor]:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _match_dtype(g: np.ndarray, value: np.ndarray) -> np.ndarray:
    g = np.asarray(g)
    if not np.iscomplexobj(value) and np.iscomplexobj(g):
        return g.real
    return g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        parents=(a, b),
        vjp=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data - b.data,
        parents=(a, b),
        vjp=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.data, parents=(a,), vjp=lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Broadcasting elementwise product; conjugate rule for complex factors."""
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(g * np.conj(b.data), a.data.shape),
            _unbroadcast(g * np.conj(a.data), b.data.shape),
        ),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data ** 2, parents=(a,), vjp=lambda g: (2.0 * a.data * g,))


def texp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (out * g,))


def tlog(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.data), parents=(a,), vjp=lambda g: (g / a.data,))


def ttanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: ((1.0 - out ** 2) * g,))


def tgelu(a) -> Tensor:
    """Exact-erf GELU: x * Phi(x) with the standard normal CDF."""
    a = as_tensor(a)
    phi_cdf = ndtr(a.data)
    out = a.data * phi_cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data ** 2)
        return ((phi_cdf + a.data * pdf) * g,)

    return Tensor(out, parents=(a,), vjp=vjp)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return Tensor(out, parents=(a,), vjp=vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return Tensor(a.data.reshape(shape), parents=(a,), vjp=lambda g: (g.reshape(old),))


def concat(parts, axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return Tensor(out, parents=tuple(parts), vjp=vjp)


def stack_last(parts) -> Tensor:
    """Stack same-shaped tensors along a new trailing axis."""
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=-1)

    def vjp(g):
        return tuple(g[..., i] for i in range(len(parts)))

    return Tensor(out, parents=tuple(parts), vjp=vjp)


def pad_spatial(a, pads) -> Tensor:
    """Zero-pad spatial axes of a (batch, *n, c) tensor.

    ``pads`` is a list of (before, after) pairs, one per spatial axis.
    """
    a = as_tensor(a)
    widths = [(0, 0)] + list(pads) + [(0, 0)]
    out = np.pad(a.data, widths)
    slices = tuple(
        slice(before, out.shape[i] - after)
        for i, (before, after) in enumerate(widths)
    )
    return Tensor(out, parents=(a,), vjp=lambda g: (g[slices],))


def crop_spatial(a, pads) -> Tensor:
    """Inverse of :func:`pad_spatial`: strip (before, after) per spatial axis."""
    a = as_tensor(a)
    widths = [(0, 0)] + list(pads) + [(0, 0)]
    slices = tuple(
        slice(before, a.data.shape[i] - after)
        for i, (before, after) in enumerate(widths)
    )
    return Tensor(a.data[slices], parents=(a,), vjp=lambda g: (np.pad(g, widths),))


# ---------------------------------------------------------------------------
# linear algebra primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Stacked matrix product with conjugate-transpose pullbacks."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.conj(np.swapaxes(b.data, -1, -2))
        gb = np.conj(np.swapaxes(a.data, -1, -2)) @ g
        return (
            _unbroadcast(ga, a.data.shape),
            _unbroadcast(gb, b.data.shape),
        )

    return Tensor(out, parents=(a, b), vjp=vjp)


def affine(x, w, b) -> Tensor:
    """Pointwise affine map over the trailing channel axis: x @ w.T + b."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = x.data @ w.data.T + b.data

    def vjp(g):
        gx = g @ w.data
        lead = g.reshape(-1, g.shape[-1])
        xl = x.data.reshape(-1, x.data.shape[-1])
        gw = lead.T @ xl
        gb = lead.sum(axis=0)
        return gx, gw, gb

    return Tensor(out, parents=(x, w, b), vjp=vjp)


def diag_embed(v) -> Tensor:
    """Square matrix with v on the diagonal."""
    v = as_tensor(v)
    n = v.data.shape[0]

    def vjp(g):
        return (np.diagonal(g).copy(),)

    out = np.zeros((n, n), dtype=v.data.dtype)
    out[np.arange(n), np.arange(n)] = v.data
    return Tensor(out, parents=(v,), vjp=vjp)


def scatter_tril(packed, size) -> Tensor:
    """Strictly lower-triangular matrix from a packed coefficient vector."""
    packed = as_tensor(packed)
    rows, cols = np.tril_indices(size, k=-1)
    out = np.zeros((size, size), dtype=np.float64)
    out[rows, cols] = packed.data
    return Tensor(out, parents=(packed,), vjp=lambda g: (g[rows, cols],))


def to_complex(re, im) -> Tensor:
    re, im = as_tensor(re), as_tensor(im)
    return Tensor(
        re.data + 1j * im.data,
        parents=(re, im),
        vjp=lambda g: (g.real, g.imag),
    )


# ---------------------------------------------------------------------------
# spectral primitives
# ---------------------------------------------------------------------------

def dft_forward(x, n: tuple[int, ...], kmax: tuple[int, ...]) -> Tensor:
    """Truncated normalised forward transform of a (batch, *n, c) tensor."""
    x = as_tensor(x)
    out = spectral.forward_modes(x.data, n, kmax)
    return Tensor(
        out,
        parents=(x,),
        vjp=lambda g: (spectral.forward_modes_adjoint(g, n, kmax),),
    )


def dft_inverse(coeffs, n: tuple[int, ...], kmax: tuple[int, ...]) -> Tensor:
    """Hermitian-completing inverse transform to a real (batch, *n, c) tensor."""
    coeffs = as_tensor(coeffs)
    out = spectral.inverse_modes(coeffs.data, n, kmax)
    return Tensor(
        out,
        parents=(coeffs,),
        vjp=lambda g: (spectral.inverse_modes_adjoint(g, n, kmax),),
    )


def diffuse_modes(coeffs, tau, sq_norms: np.ndarray) -> Tensor:
    """Scale retained coefficients by the heat multiplier exp(-4 pi^2 s tau_c).

    ``coeffs`` is complex (batch, K, c); ``tau`` holds positive per-channel
    times and receives the pathwise derivative through the multiplier.
    """
    coeffs, tau = as_tensor(coeffs), as_tensor(tau)
    mult = spectral.diffusion_multiplier(sq_norms, tau.data)
    out = coeffs.data * mult[None, :, :]

    def vjp(g):
        g_coeffs = g * mult[None, :, :]
        # d mult / d tau_c = -4 pi^2 s(k) * mult
        sens = np.real(np.conj(coeffs.data) * g) * mult[None, :, :]
        g_tau = -spectral.FOUR_PI_SQ * np.einsum(
            "bkc,k->c", sens, np.asarray(sq_norms, dtype=np.float64)
        )
        return g_coeffs, g_tau

    return Tensor(out, parents=(coeffs, tau), vjp=vjp)


def mode_scale(coeffs, factor: np.ndarray) -> Tensor:
    """Multiply coefficients by a constant per-mode factor (e.g. i 2 pi k_j)."""
    coeffs = as_tensor(coeffs)
    return Tensor(
        coeffs.data * factor,
        parents=(coeffs,),
        vjp=lambda g: (g * np.conj(factor),),
    )


def mode_contract(coeffs, r) -> Tensor:
    """Per-mode channel contraction out[b,k,o] = sum_i r[k,o,i] coeffs[b,k,i]."""
    coeffs, r = as_tensor(coeffs), as_tensor(r)
    out = np.einsum("bki,koi->bko", coeffs.data, r.data)

    def vjp(g):
        g_coeffs = np.einsum("bko,koi->bki", g, np.conj(r.data))
        g_r = np.einsum("bki,bko->koi", np.conj(coeffs.data), g)
        return g_coeffs, g_r

    return Tensor(out, parents=(coeffs, r), vjp=vjp)


def grad_pair_features(grads, w) -> Tensor:
    """Weighted inner products of channel gradients.

    ``grads`` holds per-point gradients shaped (batch, *n, c, d); the output
    at channel c is sum_r w[c, r] <grad_c, grad_r>, shaped (batch, *n, c).
    Computed without materialising the (c, c) Gram tensor per point.
    """
    grads, w = as_tensor(grads), as_tensor(w)
    lead = grads.data.shape[:-2]
    c, dim = grads.data.shape[-2:]
    dflat = grads.data.reshape(-1, c, dim)
    mixed = np.matmul(w.data[None], dflat)          # (P, c, d): sum_r w[c,r] grad_r
    out = np.sum(dflat * mixed, axis=-1).reshape(*lead, c)

    def vjp(g):
        gflat = g.reshape(-1, c)
        weighted = gflat[:, :, None] * dflat
        g_d = gflat[:, :, None] * mixed + np.matmul(w.data.T[None], weighted)
        g_w = np.tensordot(weighted, dflat, axes=([0, 2], [0, 2]))
        return g_d.reshape(grads.data.shape), g_w

    return Tensor(out, parents=(grads, w), vjp=vjp)
