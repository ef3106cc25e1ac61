"""Recursive Bayesian network trained by sliding-window variational inference.

The posterior over the flat parameter vector is a fully factorized Gaussian
with mean ``mu`` and standard deviation ``softplus(rho)``. Training maximizes a
Monte Carlo ELBO whose data term is the window-averaged Gaussian
pseudo-likelihood of recursive rollouts (each step conditions on the previous
predicted mean, never on a sample), with reparameterized gradients.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from .datapipe import Dataset, NormStats, TriaxSeries, WindowBatch, stack_windows
from .detmodel import _stack_steps, rollout
from .gradcore import NetArch, Tensor

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
VAR_FLOOR = 1e-6
Z95 = 1.959963984540054


@dataclass
class VariationalParams:
    mu: np.ndarray
    rho: np.ndarray  # pre-softplus standard deviation

    def __post_init__(self):
        self.mu = np.asarray(self.mu, float)
        self.rho = np.asarray(self.rho, float)
        if self.mu.shape != self.rho.shape:
            raise ValueError("mu and rho must have the same shape")

    @property
    def sigma(self) -> np.ndarray:
        return gc.softplus(self.rho)

    @property
    def packed(self) -> np.ndarray:
        return np.concatenate([self.mu, self.rho])

    @classmethod
    def unpack(cls, eta: np.ndarray) -> "VariationalParams":
        L = len(eta) // 2
        return cls(eta[:L].copy(), eta[L:].copy())

    @classmethod
    def initial(cls, mu: np.ndarray, sigma0: float = 0.05) -> "VariationalParams":
        return cls(np.array(mu, float), np.full(len(mu), float(softplus_inv(sigma0))))


def softplus_inv(y):
    return gc.softplus_inverse(y)


@dataclass
class PosteriorSample:
    beta: np.ndarray
    gamma: np.ndarray


def prior_log_density(beta) -> float:
    beta = np.asarray(beta, float)
    return float(-0.5 * np.sum(beta * beta) - 0.5 * beta.size * LOG_2PI)


def reparameterize(vp: VariationalParams, gamma) -> PosteriorSample:
    gamma = np.asarray(gamma, float)
    if gamma.shape[-1] != vp.mu.shape[-1]:
        raise ValueError("gamma length differs from the parameter count")
    return PosteriorSample(vp.mu + vp.sigma * gamma, gamma)


def kl_to_prior(vp: VariationalParams) -> float:
    """Closed-form KL( N(mu, sigma^2) || N(0, 1) ) summed over parameters."""
    sigma = vp.sigma
    return float(np.sum(-np.log(sigma) + 0.5 * (vp.mu ** 2 + sigma ** 2 - 1.0)))


def _kl_tensor(mu: Tensor, rho: Tensor) -> Tensor:
    sigma = gc.softplus(rho)
    return (-gc.log(sigma) + 0.5 * (gc.square(mu) + gc.square(sigma) - 1.0)).sum()


def gaussian_window_terms(mus, vars_, targets, var_floor: float = VAR_FLOOR):
    """-0.5 (log var + r^2 / var) per step and channel, with the 2 pi constant dropped."""
    mu = _stack_steps(mus)
    var = gc.maximum(_stack_steps(vars_), var_floor)
    r = targets - mu
    return -0.5 * (gc.log(var) + gc.square(r) / var)


class WindowLikelihood:
    """Average log pseudo-likelihood of a batch of windows under parameters `beta`."""

    def __init__(self, arch: NetArch, var_floor: float = VAR_FLOOR):
        self.arch = arch
        self.var_floor = var_floor

    @property
    def n_params(self) -> int:
        return self.arch.n_params

    def init_mean(self, rng: np.random.Generator) -> np.ndarray:
        return gc.init_params(self.arch, rng)

    def per_window(self, beta, batch: WindowBatch):
        mus, vars_ = rollout(beta, self.arch, batch.s_init, batch.inputs, batch.theta)
        terms = gaussian_window_terms(mus, vars_, batch.targets, self.var_floor)
        return terms.sum(axis=-1).sum(axis=-1)  # (..., B)

    def __call__(self, beta, batch: WindowBatch):
        """Mean over windows; shape (S,) for stacked beta, scalar otherwise."""
        return self.per_window(beta, batch).mean(axis=-1)


def window_log_pseudolikelihood(beta, arch: NetArch, window, var_floor: float = VAR_FLOOR) -> float:
    batch = window if isinstance(window, WindowBatch) else stack_windows([window])
    return float(WindowLikelihood(arch, var_floor).per_window(np.asarray(beta, float), batch)[0])


def total_log_pseudolikelihood(beta, arch: NetArch, windows, var_floor: float = VAR_FLOOR) -> float:
    """Window-averaged log pseudo-likelihood (weights 1 / (M (N - H + 1)))."""
    if not isinstance(windows, WindowBatch):
        if not len(windows):
            raise ValueError("empty window set")
        windows = stack_windows(list(windows))
    if not len(windows):
        raise ValueError("empty window set")
    return float(WindowLikelihood(arch, var_floor)(np.asarray(beta, float), windows))


def sample_gammas(seed, n: int, L: int, *stream) -> np.ndarray:
    """Standard-normal draws, one independent stream per sample index."""
    return np.stack([np.random.default_rng([int(seed), *map(int, stream), i]).standard_normal(L)
                     for i in range(n)]) if n else np.zeros((0, L))


def elbo_estimate(vp: VariationalParams, loglik, data, n_q: int = 25, seed: int = 0,
                  kl_weight: float = 1.0) -> float:
    """(1/N_q) sum_i loglik(beta_i) - kl_weight * KL, beta_i reparameterized."""
    if n_q < 1:
        raise ValueError("n_q must be >= 1")
    gam = sample_gammas(seed, n_q, len(vp.mu))
    betas = vp.mu + vp.sigma * gam
    ll = np.asarray(loglik(betas, data))
    return float(ll.mean() - kl_weight * kl_to_prior(vp))


def negative_elbo(eta, loglik, data, gammas: np.ndarray, kl_weight: float = 1.0):
    """Fixed-noise negative ELBO as a function of packed (mu, rho); Tensor-friendly."""
    L = gammas.shape[-1]
    if isinstance(eta, Tensor):
        mu, rho = eta[:L], eta[L:]
        beta = mu + gc.softplus(rho) * gammas
        return -loglik(beta, data).mean() + kl_weight * _kl_tensor(mu, rho)
    vp = VariationalParams.unpack(np.asarray(eta, float))
    beta = vp.mu + vp.sigma * gammas
    return float(-np.mean(loglik(beta, data)) + kl_weight * kl_to_prior(vp))


# ---------------------------------------------------------------------------
# training

@dataclass
class BayesConfig:
    hidden: tuple = (110, 110)
    H: int = 14
    lr: float = 1e-3
    lr_decay: float = 0.9
    decay_steps: float = 1000.0
    epochs: int = 3000
    batch_size: int = 256
    n_q: int = 25
    kl_weight: float | str = 1.0   # a number, or "per_window" for 1 / (number of training windows)
    kl_anneal_epochs: int = 0
    sigma0: float = 0.05
    patience: int = 300
    val_every: int = 1
    seed: int = 0
    max_seconds: float | None = None
    init_mean: str = "random"      # "random" or "given"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BayesConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "hidden" in known:
            known["hidden"] = tuple(known["hidden"])
        return cls(**known)


@dataclass
class BayesResult:
    vp: VariationalParams
    arch: NetArch | None
    history: list = field(default_factory=list)
    best_epoch: int = 0
    status: str = "ok"


def resolve_kl_weight(kl_weight, n_train: int) -> float:
    if kl_weight == "per_window":
        return 1.0 / n_train
    return float(kl_weight)


def train_rbnn(train, val, config: BayesConfig, loglik=None, mu0: np.ndarray | None = None,
               seed: int | None = None) -> BayesResult:
    """Minimize the negative ELBO over (mu, rho) with Adam.

    `train` / `val` are window batches (or any object with ``len`` and
    ``take``) understood by `loglik`, which defaults to the recursive window
    pseudo-likelihood of a network built from ``config.hidden``. Within an epoch
    the KL term is split evenly across mini-batches so that a full pass applies
    it exactly once. Gradient noise for epoch e, batch b uses stream
    (seed, e, b).
    """
    seed = config.seed if seed is None else seed
    arch = None
    if loglik is None:
        du = train.inputs.shape[-1]
        arch = NetArch(train.s_init.shape[-1] + du + train.theta.shape[-1], config.hidden,
                       train.s_init.shape[-1])
        loglik = WindowLikelihood(arch)
    rng = np.random.default_rng(seed)
    L = loglik.n_params
    mean0 = loglik.init_mean(rng) if mu0 is None else np.array(mu0, float)
    vp = VariationalParams.initial(mean0, config.sigma0)
    eta = vp.packed
    opt = gc.AdamState.zeros_like(eta)
    sched = gc.ExpDecay(config.lr, config.lr_decay, config.decay_steps)
    kl_full = resolve_kl_weight(config.kl_weight, len(train))
    n_batches = max(1, math.ceil(len(train) / config.batch_size))
    best, best_score, best_epoch = vp, math.inf, 0
    history, status = [], "ok"
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        lr = sched(epoch)
        anneal = min(1.0, (epoch + 1) / config.kl_anneal_epochs) if config.kl_anneal_epochs else 1.0
        klw = kl_full * anneal / n_batches
        nll_sum, count = 0.0, 0
        order = rng.permutation(len(train))
        try:
            for b, i in enumerate(range(0, len(train), config.batch_size)):
                idx = order[i:i + config.batch_size]
                batch = train.take(idx)
                gam = sample_gammas(seed, config.n_q, L, epoch, b)
                value, g = gc.value_and_grad(
                    lambda e: negative_elbo(e, loglik, batch, gam, klw), eta)
                eta, opt = gc.adam_step(opt, eta, g, lr)
                nll_sum += (value - klw * kl_to_prior(VariationalParams.unpack(eta))) * len(idx)
                count += len(idx)
        except gc.NonFiniteError as exc:
            status = f"non-finite ELBO at epoch {epoch}: {exc}"
            log.warning(status)
            break
        vp = VariationalParams.unpack(eta)
        kl = kl_to_prior(vp)
        rec = {"epoch": epoch, "lr": lr, "train_nll": nll_sum / count, "kl": kl,
               "neg_elbo": nll_sum / count + kl_full * kl}
        if val is not None and len(val) and (epoch % config.val_every == 0
                                             or epoch == config.epochs - 1):
            rec["val_nll"] = -float(np.asarray(loglik(vp.mu, val)))
        history.append(rec)
        score = rec.get("val_nll") if val is not None and len(val) else rec["neg_elbo"]
        if score is not None and math.isfinite(score) and score < best_score:
            best, best_score, best_epoch = vp, score, epoch
        if not math.isfinite(rec["neg_elbo"]):
            status = f"non-finite ELBO at epoch {epoch}"
            break
        if epoch - best_epoch > config.patience:
            status = f"early stop at epoch {epoch}"
            break
        if config.max_seconds and time.perf_counter() - t0 > config.max_seconds:
            status = f"time budget reached at epoch {epoch}"
            break
    log.info("rbnn: %s, best epoch %d (%.1fs)", status, best_epoch, time.perf_counter() - t0)
    return BayesResult(best, arch, history, best_epoch, status)


# ---------------------------------------------------------------------------
# prediction

class PredictionError(RuntimeError):
    pass


@dataclass
class PredictiveRollout:
    """Per-step predictive moments for steps 1..N.

    ``var`` is the average of the per-sample variance heads (the headline
    predictive variance); ``epistemic_var`` is the spread of the per-sample
    means, reported separately.
    """
    mean: np.ndarray
    var: np.ndarray
    epistemic_var: np.ndarray
    n_samples: int = 1
    n_excluded: int = 0

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    @property
    def total_var(self) -> np.ndarray:
        return self.var + self.epistemic_var

    def bounds(self, z: float = Z95, total: bool = False):
        s = np.sqrt(self.total_var if total else self.var)
        return self.mean - z * s, self.mean + z * s

    @property
    def lo95(self):
        return self.bounds()[0]

    @property
    def hi95(self):
        return self.bounds()[1]

    def denormalize(self, sigma3: float, stats: NormStats) -> "PredictiveRollout":
        from .datapipe import denormalize_states, denormalize_variances
        return PredictiveRollout(denormalize_states(self.mean, sigma3, stats),
                                 denormalize_variances(self.var, sigma3, stats),
                                 denormalize_variances(self.epistemic_var, sigma3, stats),
                                 self.n_samples, self.n_excluded)


def posterior_predict(vp: VariationalParams, arch: NetArch, s0, inputs, theta,
                      n_mc: int = 1000, seed: int = 0, chunk: int = 250,
                      max_excluded: float = 0.01, workers: int = 1) -> PredictiveRollout:
    """Monte Carlo posterior predictive rollout from the initial state only.

    Sample i uses the noise stream (seed, i), so results depend neither on the
    chunk size nor on the number of worker threads.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    s0 = np.asarray(s0, float)[None]
    u = np.asarray(inputs, float)[None]
    th = np.asarray(theta, float)[None]
    L = len(vp.mu)

    def run(start: int):
        gam = np.stack([np.random.default_rng([int(seed), i]).standard_normal(L)
                        for i in range(start, min(n_mc, start + chunk))])
        betas = vp.mu + vp.sigma * gam
        with np.errstate(over="ignore", invalid="ignore"):
            mus, vars_ = rollout(betas, arch, s0, u, th)
        return np.stack(mus, axis=-2)[:, 0], np.stack(vars_, axis=-2)[:, 0]

    starts = list(range(0, n_mc, chunk))
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    means = [m for m, _ in parts]
    variances = [v for _, v in parts]
    m = np.concatenate(means)
    v = np.concatenate(variances)
    ok = np.isfinite(m).all(axis=(1, 2)) & np.isfinite(v).all(axis=(1, 2))
    excluded = int((~ok).sum())
    if excluded > max_excluded * n_mc:
        raise PredictionError(f"{excluded} of {n_mc} sample rollouts diverged")
    m, v = m[ok], v[ok]
    mean = m.mean(axis=0)
    return PredictiveRollout(mean, v.mean(axis=0), m.var(axis=0), int(ok.sum()), excluded)


def predict_series(vp: VariationalParams, arch: NetArch, series: TriaxSeries, input_dim: int,
                   n_mc: int = 1000, seed: int = 0, workers: int = 1) -> PredictiveRollout:
    return posterior_predict(vp, arch, series.states[0], series.inputs[:, :input_dim],
                             series.theta, n_mc=n_mc, seed=seed, workers=workers)


def predict_dataset(vp: VariationalParams, arch: NetArch, ds: Dataset, n_mc: int = 1000,
                    seed: int = 0, workers: int = 1) -> dict[str, PredictiveRollout]:
    return {s.test_id: predict_series(vp, arch, s, ds.input_dim, n_mc, seed, workers) for s in ds}
