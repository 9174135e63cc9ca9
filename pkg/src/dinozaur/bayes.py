"""Variational treatment of the diffusion times.

Log-times get a shared Gaussian prior; the approximate posterior factorises
over blocks but keeps a full-rank Gaussian within each block, parametrised
by a mean vector and a Cholesky factor whose diagonal is stored in log form
(positive definiteness holds by construction, no projections needed).

Training maximises the single-sample reparametrised evidence lower bound

    ELBO = (N / B) * sum_batch log N(u | net(a; tau), sigma^2 I) - KL(q || p),

with tau = exp(mu + L eps) drawn once per step, so gradients flow to the
network weights, the variational parameters, and the log noise variance.
Prediction marginalises over tau: each posterior-predictive sample draws
fresh times, runs the network, and adds pointwise Gaussian noise, which
makes the samples spatially correlated through the shared times while the
added noise stays independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import STREAM_PREDICTIVE, ParamStore, stream_rng
from .operator import DiffusionTimes, Network

LN_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class TimePrior:
    """Shared Gaussian prior over log diffusion times."""

    mu: float = float(np.log(0.01))
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("prior scale must be positive")


@dataclass
class NoiseModel:
    """Learnable log-variance of the pointwise Gaussian likelihood."""

    ln_sigma2: float = -4.0

    @property
    def sigma2(self) -> float:
        return float(np.exp(self.ln_sigma2))


@dataclass
class VariationalPosterior:
    """Per-block Gaussian over log-times: mean, and Cholesky factor L.

    ``log_diag`` stores the log of L's diagonal; ``tril`` packs the strict
    lower triangle row-major.  Sigma_i = L_i L_i^T is positive definite
    whenever the parameters are finite.
    """

    mu: np.ndarray        # (M, d_c)
    log_diag: np.ndarray  # (M, d_c)
    tril: np.ndarray      # (M, d_c (d_c - 1) / 2)

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        self.log_diag = np.atleast_2d(np.asarray(self.log_diag, dtype=np.float64))
        self.tril = np.atleast_2d(np.asarray(self.tril, dtype=np.float64))

    @property
    def blocks(self) -> int:
        return self.mu.shape[0]

    @property
    def d_c(self) -> int:
        return self.mu.shape[1]

    def cholesky(self, i: int) -> np.ndarray:
        d = self.d_c
        L = np.zeros((d, d))
        L[np.diag_indices(d)] = np.exp(self.log_diag[i])
        L[np.tril_indices(d, k=-1)] = self.tril[i]
        return L

    def cov(self, i: int) -> np.ndarray:
        L = self.cholesky(i)
        return L @ L.T

    def sample_ln_tau(self, eps: np.ndarray) -> np.ndarray:
        """Reparametrised log-times mu_i + L_i eps_i for eps shaped (M, d_c)."""
        eps = np.asarray(eps, dtype=np.float64)
        out = np.empty_like(self.mu)
        for i in range(self.blocks):
            out[i] = self.mu[i] + self.cholesky(i) @ eps[i]
        return out


# ---------------------------------------------------------------------------
# parameter registration and store views
# ---------------------------------------------------------------------------

def init_variational_params(store: ParamStore, blocks: int, d_c: int,
                            mu0: float = -5.0, scale0: float = 0.5,
                            ln_sigma2_0: float = -4.0) -> None:
    """Register posterior and noise parameters.

    Defaults start every block at N(mu0, scale0^2 I) over log-times with a
    diagonal Cholesky factor, and the observation noise at exp(ln_sigma2_0).
    """
    off = d_c * (d_c - 1) // 2
    for i in range(blocks):
        store.add(f"posterior.{i}.mu", np.full(d_c, mu0))
        store.add(f"posterior.{i}.log_diag", np.full(d_c, np.log(scale0)))
        store.add(f"posterior.{i}.tril", np.zeros(off))
    store.add("noise.ln_sigma2", np.asarray(ln_sigma2_0, dtype=np.float64))


def posterior_from_store(store: ParamStore, blocks: int, d_c: int) -> VariationalPosterior:
    return VariationalPosterior(
        mu=np.stack([store[f"posterior.{i}.mu"].value for i in range(blocks)]),
        log_diag=np.stack([store[f"posterior.{i}.log_diag"].value for i in range(blocks)]),
        tril=np.stack([store[f"posterior.{i}.tril"].value for i in range(blocks)]),
    )


def noise_from_store(store: ParamStore) -> NoiseModel:
    return NoiseModel(ln_sigma2=float(store["noise.ln_sigma2"].value))


# ---------------------------------------------------------------------------
# sampling and divergence
# ---------------------------------------------------------------------------

def sample_times(post: VariationalPosterior, eps: np.ndarray) -> DiffusionTimes:
    """Deterministic transform of standard normal draws into diffusion times."""
    return DiffusionTimes(ln_tau=post.sample_ln_tau(eps))


def kl_divergence(post: VariationalPosterior, prior: TimePrior) -> float:
    """Closed-form KL from the block posteriors to the shared prior.

    Per block: 0.5 [ tr(Sigma) / sp^2 + ||mu - mp||^2 / sp^2 - d_c
                     + d_c ln sp^2 - ln det Sigma ],
    with ln det Sigma read directly off the log-diagonal parameters.
    """
    sp2 = prior.sigma ** 2
    total = 0.0
    for i in range(post.blocks):
        L = post.cholesky(i)
        tr = float(np.sum(L ** 2))
        dev = float(np.sum((post.mu[i] - prior.mu) ** 2))
        logdet = 2.0 * float(np.sum(post.log_diag[i]))
        total += 0.5 * (tr / sp2 + dev / sp2 - post.d_c
                        + post.d_c * np.log(sp2) - logdet)
    return total


# Tensor-path twins used inside the ELBO graph -------------------------------

def _cholesky_leaf(leaves: dict[str, Tensor], i: int, d_c: int) -> Tensor:
    L = ad.diag_embed(ad.texp(leaves[f"posterior.{i}.log_diag"]))
    if d_c > 1:
        L = ad.add(L, ad.scatter_tril(leaves[f"posterior.{i}.tril"], d_c))
    return L


def sample_times_graph(leaves: dict[str, Tensor], blocks: int, d_c: int,
                       eps: np.ndarray) -> list[Tensor]:
    """Differentiable per-block times tau_i = exp(mu_i + L_i eps_i)."""
    times = []
    for i in range(blocks):
        L = _cholesky_leaf(leaves, i, d_c)
        shift = ad.reshape(ad.matmul(L, Tensor(eps[i][:, None])), (d_c,))
        times.append(ad.texp(ad.add(leaves[f"posterior.{i}.mu"], shift)))
    return times


def kl_graph(leaves: dict[str, Tensor], blocks: int, d_c: int,
             prior: TimePrior) -> Tensor:
    sp2 = prior.sigma ** 2
    total = ad.as_tensor(0.0)
    for i in range(blocks):
        L = _cholesky_leaf(leaves, i, d_c)
        tr = ad.tsum(ad.square(L))
        dev = ad.tsum(ad.square(ad.sub(leaves[f"posterior.{i}.mu"], prior.mu)))
        logdet = ad.mul(ad.tsum(leaves[f"posterior.{i}.log_diag"]), 2.0)
        block_kl = ad.mul(
            ad.add(
                ad.add(ad.mul(tr, 1.0 / sp2), ad.mul(dev, 1.0 / sp2)),
                ad.sub(float(d_c * np.log(sp2) - d_c), logdet),
            ),
            0.5,
        )
        total = ad.add(total, block_kl)
    return total


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

def elbo_loss(network: Network, store: ParamStore, a_batch: np.ndarray,
              u_batch: np.ndarray, prior: TimePrior, dataset_size: int,
              eps: np.ndarray) -> tuple[Tensor, dict[str, float]]:
    """Single-sample reparametrised ELBO for one minibatch.

    The Gaussian log-likelihood is summed over every observed scalar in the
    batch and rescaled by dataset_size / batch_size; the exact KL is
    subtracted once.  Returns the ELBO tensor (to be maximised) and scalar
    diagnostics.
    """
    spec = network.spec
    leaves = store.leaves()
    times = sample_times_graph(leaves, spec.blocks, spec.d_c, eps)
    pred = network.forward(Tensor(a_batch), leaves, times=times)
    resid = ad.sub(pred, Tensor(np.asarray(u_batch, dtype=np.float64)))
    ln_s2 = leaves["noise.ln_sigma2"]
    count = float(np.asarray(u_batch).size)
    quad = ad.mul(ad.mul(ad.tsum(ad.square(resid)), ad.texp(ad.neg(ln_s2))), -0.5)
    norm = ad.mul(ad.add(ln_s2, LN_2PI), -0.5 * count)
    loglik = ad.add(quad, norm)
    scale = dataset_size / a_batch.shape[0]
    kl = kl_graph(leaves, spec.blocks, spec.d_c, prior)
    elbo = ad.sub(ad.mul(loglik, scale), kl)
    parts = {
        "loglik": float(loglik.data) * scale,
        "kl": float(kl.data),
        "sigma2": float(np.exp(ln_s2.data)),
    }
    return elbo, parts


# ---------------------------------------------------------------------------
# posterior predictive
# ---------------------------------------------------------------------------

@dataclass
class PredictiveSamples:
    """Sampled outputs plus pointwise moments across samples."""

    samples: np.ndarray  # (S, batch, *n, d_u)
    mean: np.ndarray     # (batch, *n, d_u)
    std: np.ndarray      # (batch, *n, d_u); zero when S == 1


def posterior_predictive(network: Network, store: ParamStore,
                         post: VariationalPosterior, a_star: np.ndarray,
                         n_samples: int = 100, seed: int = 0,
                         sigma2: float | None = None) -> PredictiveSamples:
    """Draw S posterior-predictive output fields for a batch of inputs.

    Each sample draws block times from the posterior, evaluates the
    network, and adds independent N(0, sigma^2) noise at every point.
    ``sigma2=None`` reads the learned noise variance from the store.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if sigma2 is None:
        sigma2 = noise_from_store(store).sigma2
    if sigma2 < 0:
        raise ValueError("noise variance must be nonnegative")
    rng = stream_rng(seed, STREAM_PREDICTIVE)
    a_star = np.asarray(a_star, dtype=np.float64)
    outs = []
    for _ in range(n_samples):
        eps = rng.standard_normal((post.blocks, post.d_c))
        ln_tau = post.sample_ln_tau(eps)
        out = network.forward_values(a_star, store, ln_tau=ln_tau)
        if sigma2 > 0:
            out = out + rng.normal(0.0, np.sqrt(sigma2), size=out.shape)
        outs.append(out)
    samples = np.stack(outs, axis=0)
    mean = samples.mean(axis=0)
    if n_samples == 1:
        std = np.zeros_like(mean)
    else:
        std = samples.std(axis=0, ddof=1)
    return PredictiveSamples(samples=samples, mean=mean, std=std)
