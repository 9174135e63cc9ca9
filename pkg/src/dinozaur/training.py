"""Training, evaluation, and posterior-sampling drivers.

Everything here is deterministic given (config, seed): shuffling, the
per-step reparametrisation draws, and predictive sampling all derive from
documented seed streams.  A non-finite loss or gradient aborts the run and
leaves the last epoch-end parameters on disk as ``checkpoint_aborted.dzck``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bayes, metrics
from .autodiff import NonFiniteError, Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import LoadedDataset, apply_scaler, invert_scaler, write_field_file
from .nn import (STREAM_ELBO, STREAM_GRADCHECK, STREAM_SHUFFLE, GradCheckReport,
                 OptimizerState, adamw_step, gradcheck, one_cycle_lr, stream_rng)
from .operator import Network, NetworkSpec
from .spectral import ConfigError

STD_FLOOR = 1e-12  # keeps degenerate predictive stds strictly positive


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint_path: Path | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


def build_network_spec(cfg: RunConfig, dataset: LoadedDataset) -> NetworkSpec:
    """Network spec resolved against the dataset geometry."""
    net = cfg.network
    n = tuple(dataset.task.n)
    if net["n"] is not None and tuple(net["n"]) != n:
        raise ConfigError(f"config grid {net['n']} != dataset grid {list(n)}")
    d_a = dataset.a_train.shape[-1]
    d_u = dataset.u_train.shape[-1]
    for key, have in (("d_a", d_a), ("d_u", d_u)):
        if net[key] is not None and net[key] != have:
            raise ConfigError(f"config {key}={net[key]} != dataset {key}={have}")
    kmax = tuple(net["kmax"]) if net["kmax"] else tuple(max(1, nj // 4) for nj in n)
    padding = tuple(net["padding"]) if net["padding"] else None
    return NetworkSpec(
        n=n, kmax=kmax, d_c=net["d_c"], blocks=net["blocks"], d_a=d_a, d_u=d_u,
        padding=padding, block_kind=net["block_kind"],
        lift_hidden=net["lift_hidden"], proj_hidden=net["proj_hidden"],
    )


def _batched_forward(network: Network, store, a: np.ndarray, batch_size: int,
                     ln_tau: np.ndarray | None = None) -> np.ndarray:
    outs = []
    for lo in range(0, a.shape[0], batch_size):
        outs.append(network.forward_values(a[lo:lo + batch_size], store, ln_tau=ln_tau))
    return np.concatenate(outs, axis=0)


def _test_rl2(network: Network, store, dataset: LoadedDataset, cfg: RunConfig,
              bayesian: bool) -> float:
    """Deterministic test error on unscaled targets (posterior mean times)."""
    in_scaler = dataset.scaler("input")
    out_scaler = dataset.scaler("target")
    a = apply_scaler(in_scaler, dataset.a_test)
    ln_tau = None
    if bayesian:
        post = bayes.posterior_from_store(store, network.spec.blocks, network.spec.d_c)
        ln_tau = post.mu
    pred = _batched_forward(network, store, a, cfg.optimizer["batch_size"], ln_tau=ln_tau)
    pred = invert_scaler(out_scaler, pred)
    value, _ = metrics.rl2(metrics.PredictionSet.from_arrays(dataset.u_test, pred))
    return value


@dataclass
class TrainResult:
    final_path: Path
    best_path: Path
    log_path: Path
    history: list[dict]
    best_rl2: float


def train_run(cfg: RunConfig, dataset: LoadedDataset, outdir: Path) -> TrainResult:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg.echo(outdir)

    spec = build_network_spec(cfg, dataset)
    network = Network(spec)
    bayesian = bool(cfg.bayes["enabled"])
    if bayesian and spec.block_kind == "fno-dense":
        raise ConfigError("the Bayesian model requires a diffusion block kind")
    store = network.init_params(cfg.seed, with_times=not bayesian)
    if bayesian:
        bayes.init_variational_params(
            store, spec.blocks, spec.d_c,
            mu0=cfg.bayes["posterior_mu0"], scale0=cfg.bayes["posterior_scale0"],
            ln_sigma2_0=cfg.bayes["ln_sigma2_init"],
        )
    prior = bayes.TimePrior(mu=cfg.bayes["prior_mu"], sigma=cfg.bayes["prior_sigma"])

    in_scaler = dataset.scaler("input")
    out_scaler = dataset.scaler("target")
    a_train = apply_scaler(in_scaler, dataset.a_train)
    u_train = apply_scaler(out_scaler, dataset.u_train)
    n_train = a_train.shape[0]

    opt_cfg = cfg.optimizer
    batch_size = min(opt_cfg["batch_size"], n_train)
    epochs = opt_cfg["epochs"]
    steps_per_epoch = (n_train + batch_size - 1) // batch_size
    total_steps = epochs * steps_per_epoch
    optimizer = OptimizerState(lr=opt_cfg["lr"], weight_decay=opt_cfg["weight_decay"])

    log_path = outdir / "log.csv"
    fields = ["epoch", "train_loss", "test_rl2", "lr"]
    if bayesian:
        fields += ["elbo", "kl", "sigma2"]

    history: list[dict] = []
    best_rl2 = np.inf
    best_path = outdir / "checkpoint_best.dzck"
    final_path = outdir / "checkpoint_final.dzck"
    snapshot = store.snapshot()
    global_step = 0

    def checkpoint(metadata: dict) -> Checkpoint:
        return Checkpoint(spec=spec, store=store, bayesian=bayesian,
                          optimizer=optimizer, metadata=metadata)

    with open(log_path, "w", newline="") as log_file:
        writer = csv.DictWriter(log_file, fieldnames=fields)
        writer.writeheader()
        try:
            for epoch in range(epochs):
                perm = stream_rng(cfg.seed, STREAM_SHUFFLE, epoch).permutation(n_train)
                losses, elbos, kls, sigma2s = [], [], [], []
                lr = opt_cfg["lr"]
                for lo in range(0, n_train, batch_size):
                    idx = perm[lo:lo + batch_size]
                    a_b, u_b = a_train[idx], u_train[idx]
                    lr = one_cycle_lr(global_step, total_steps, opt_cfg["lr"])
                    store.zero_grad()
                    if bayesian:
                        eps = stream_rng(cfg.seed, STREAM_ELBO, global_step).standard_normal(
                            (spec.blocks, spec.d_c))
                        elbo, parts = bayes.elbo_loss(network, store, a_b, u_b, prior,
                                                      dataset_size=n_train, eps=eps)
                        loss = ad.neg(elbo)
                        elbos.append(float(elbo.data))
                        kls.append(parts["kl"])
                        sigma2s.append(parts["sigma2"])
                    else:
                        pred = network.forward(Tensor(a_b), store.leaves())
                        loss = ad.tmean(ad.square(ad.sub(pred, Tensor(u_b))))
                    loss.backward()
                    adamw_step(store, optimizer, lr=lr)
                    losses.append(float(loss.data))
                    global_step += 1

                test_rl2 = _test_rl2(network, store, dataset, cfg, bayesian)
                row = {
                    "epoch": epoch,
                    "train_loss": f"{np.mean(losses):.10e}",
                    "test_rl2": f"{test_rl2:.10e}",
                    "lr": f"{lr:.10e}",
                }
                if bayesian:
                    row["elbo"] = f"{np.mean(elbos):.10e}"
                    row["kl"] = f"{np.mean(kls):.10e}"
                    row["sigma2"] = f"{np.mean(sigma2s):.10e}"
                writer.writerow(row)
                log_file.flush()
                history.append(row)

                if test_rl2 < best_rl2:
                    best_rl2 = test_rl2
                    save_checkpoint(best_path, checkpoint(
                        {"epoch": epoch, "test_rl2": test_rl2, "kind": "best"}))
                snapshot = store.snapshot()
        except NonFiniteError as err:
            store.restore(snapshot)
            aborted = outdir / "checkpoint_aborted.dzck"
            save_checkpoint(aborted, checkpoint({"kind": "aborted", "reason": str(err)}))
            raise TrainingAborted(
                f"training aborted ({err}); last good parameters in {aborted}", aborted
            ) from err

    save_checkpoint(final_path, checkpoint(
        {"epoch": epochs - 1, "test_rl2": history[-1]["test_rl2"] if history else None,
         "kind": "final", "history_fields": fields}))
    if not best_path.exists():
        save_checkpoint(best_path, checkpoint({"kind": "best"}))
    return TrainResult(final_path=final_path, best_path=best_path,
                       log_path=log_path, history=history, best_rl2=float(best_rl2))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _predictive_moments(network: Network, store, ckpt_bayesian: bool,
                        a_scaled: np.ndarray, n_samples: int, seed: int,
                        batch_size: int):
    """Predictive mean/std in scaled space; deterministic models get std=None."""
    if not ckpt_bayesian:
        mean = _batched_forward(network, store, a_scaled, batch_size)
        return mean, None
    post = bayes.posterior_from_store(store, network.spec.blocks, network.spec.d_c)
    pred = bayes.posterior_predictive(network, store, post, a_scaled,
                                      n_samples=n_samples, seed=seed)
    return pred.mean, pred.std


def evaluate_run(checkpoint_path: Path, dataset: LoadedDataset, outdir: Path,
                 n_samples: int = 100, seed: int = 0,
                 batch_size: int = 32) -> metrics.MetricReport:
    """Metric report for a checkpoint on a dataset's test split.

    Deterministic checkpoints report RL2 of the forward pass; Bayesian
    checkpoints draw ``n_samples`` posterior-predictive samples per element
    and add NLL, miscalibration area, and interval score, plus the
    calibration curve.  Metrics are computed on unscaled targets.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(checkpoint_path)
    if tuple(ckpt.spec.n) != tuple(dataset.task.n):
        raise ConfigError(
            f"checkpoint grid {ckpt.spec.n} != dataset grid {dataset.task.n}")
    network = Network(ckpt.spec)
    in_scaler = dataset.scaler("input")
    out_scaler = dataset.scaler("target")
    a = apply_scaler(in_scaler, dataset.a_test)

    mean, std = _predictive_moments(network, ckpt.store, ckpt.bayesian, a,
                                    n_samples, seed, batch_size)
    mean = invert_scaler(out_scaler, mean)
    if std is not None:
        if out_scaler is not None:
            std = std * out_scaler.std
        std = np.maximum(std, STD_FLOOR)

    report = metrics.evaluate_predictions(dataset.u_test, mean, std)
    report.extra = {"checkpoint": str(checkpoint_path), "samples": n_samples if std is not None else None,
                    "seed": seed, "n_test": int(dataset.u_test.shape[0])}
    report.save_json(outdir / "report.json")
    if std is not None:
        report.save_calibration_csv(outdir / "calibration_curve.csv")
    return report


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradcheck_run(spec: NetworkSpec, seed: int = 0, bayesian: bool = False,
                  h: float = 1e-6, batch: int = 2) -> GradCheckReport:
    """Finite-difference check of the full model on a random probe batch.

    Deterministic mode differentiates a mean-squared loss through the
    network; Bayesian mode differentiates the negative ELBO at one fixed
    reparametrisation draw, covering the variational and noise parameters.
    """
    network = Network(spec)
    store = network.init_params(seed, with_times=not bayesian)
    prior = bayes.TimePrior()
    if bayesian:
        if spec.block_kind == "fno-dense":
            raise ConfigError("the Bayesian model requires a diffusion block kind")
        bayes.init_variational_params(store, spec.blocks, spec.d_c)
    rng = stream_rng(seed, STREAM_GRADCHECK)
    a = rng.standard_normal((batch, *spec.n, spec.d_a))
    u = rng.standard_normal((batch, *spec.n, spec.d_u))
    eps = rng.standard_normal((spec.blocks, spec.d_c))

    if bayesian:
        def loss_fn():
            elbo, _ = bayes.elbo_loss(network, store, a, u, prior,
                                      dataset_size=batch, eps=eps)
            return ad.neg(elbo)
    else:
        def loss_fn():
            pred = network.forward(Tensor(a), store.leaves())
            return ad.tmean(ad.square(ad.sub(pred, Tensor(u))))

    return gradcheck(loss_fn, store, h=h)


# ---------------------------------------------------------------------------
# posterior sampling to disk
# ---------------------------------------------------------------------------

def sample_run(checkpoint_path: Path, dataset: LoadedDataset, outdir: Path,
               n_samples: int = 100, seed: int = 0) -> dict:
    """Write posterior-predictive sample fields and log-time diagnostics.

    Per test element: ``n_samples`` DZF1 output fields plus pointwise mean
    and std fields.  Diagnostics are two headerless CSV matrices (blocks x
    channels): the posterior mean and std of the log-times per channel.
    Deterministic checkpoints emit their point log-times with zero spread.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(checkpoint_path)
    network = Network(ckpt.spec)
    in_scaler = dataset.scaler("input")
    out_scaler = dataset.scaler("target")
    a = apply_scaler(in_scaler, dataset.a_test)

    if ckpt.bayesian:
        post = bayes.posterior_from_store(ckpt.store, ckpt.spec.blocks, ckpt.spec.d_c)
        pred = bayes.posterior_predictive(network, ckpt.store, post, a,
                                          n_samples=n_samples, seed=seed)
        samples = pred.samples
        tau_mean = post.mu
        tau_std = np.stack([np.sqrt(np.diag(post.cov(i))) for i in range(post.blocks)])
    else:
        out = _batched_forward(network, ckpt.store, a, batch_size=32)
        samples = np.repeat(out[None], n_samples, axis=0)
        tau_mean = np.stack([ckpt.store[f"block.{i}.ln_tau"].value
                             for i in range(ckpt.spec.blocks)])
        tau_std = np.zeros_like(tau_mean)

    samples = invert_scaler(out_scaler, samples)
    mean = samples.mean(axis=0)
    std = samples.std(axis=0, ddof=1) if n_samples > 1 else np.zeros_like(mean)

    for i in range(a.shape[0]):
        elem_dir = outdir / f"elem_{i:04d}"
        elem_dir.mkdir(exist_ok=True)
        for s in range(n_samples):
            write_field_file(elem_dir / f"sample_{s:03d}.dzf", samples[s, i])
        write_field_file(elem_dir / "mean.dzf", mean[i])
        write_field_file(elem_dir / "std.dzf", std[i])

    np.savetxt(outdir / "tau_ln_mean.csv", tau_mean, delimiter=",", fmt="%.17g")
    np.savetxt(outdir / "tau_ln_std.csv", tau_std, delimiter=",", fmt="%.17g")
    return {"elements": int(a.shape[0]), "samples": n_samples,
            "tau_shape": list(tau_mean.shape)}
