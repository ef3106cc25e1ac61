"""Deterministic recursive feedforward network trained on sliding windows."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from .datapipe import Dataset, TriaxSeries, WindowBatch
from .gradcore import NetArch, Tensor

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def _batched(s_init, inputs, theta):
    s_init = np.asarray(s_init, float)
    single = s_init.ndim == 1
    if single:
        return s_init[None], np.asarray(inputs, float)[None], np.asarray(theta, float)[None], True
    return s_init, np.asarray(inputs, float), np.asarray(theta, float), False


def rollout(params, arch: NetArch, s_init, inputs, theta, with_var: bool = True):
    """Recursive mean rollout.

    ``s_init`` (B, sd), ``inputs`` (B, H, du) and ``theta`` (B, 2) are plain
    arrays; `params` is a vector (L,) or a stack (S, L), as ndarray or Tensor.
    Step t feeds the predicted mean of step t-1 back as the state input.
    Returns per-step lists of means and (optionally) variances, each shaped
    (..., B, sd) with a leading S axis for stacked parameters.
    """
    sd = arch.state_dim
    du = inputs.shape[-1]
    if sd + du + theta.shape[-1] != arch.input_dim:
        raise ValueError(f"state({sd}) + inputs({du}) + theta({theta.shape[-1]}) does not "
                         f"match network input width {arch.input_dim}")
    layers = gc.unpack_params(params, arch)
    state = s_init
    mus, vars_ = [], []
    for t in range(inputs.shape[-2]):
        lead = np.shape(gc._value(state))[:-1]
        x = gc.concat([state, np.broadcast_to(inputs[:, t, :], lead + (du,)),
                       np.broadcast_to(theta, lead + (theta.shape[-1],))], axis=-1)
        out = gc.mlp_apply(layers, x)
        mu = out[..., :sd]
        mus.append(mu)
        if with_var:
            vars_.append(gc.variance_head(out[..., sd:]))
        state = mu
    return mus, vars_


def _stack_steps(steps, axis=-2):
    if steps and isinstance(steps[0], Tensor):
        return gc.concat([s.reshape(*s.shape[:-1], 1, s.shape[-1]) for s in steps], axis=axis)
    return np.stack(steps, axis=axis)


@dataclass
class RolloutResult:
    predictions: np.ndarray          # (H, sd) or (B, H, sd)
    step_losses: np.ndarray | None = None

    def __len__(self) -> int:
        return self.predictions.shape[-2]


def recursive_rollout(params, arch: NetArch, s_init, inputs, theta,
                      targets=None) -> RolloutResult:
    """Roll the network forward over a window using its own predicted means."""
    s, u, th, single = _batched(s_init, inputs, theta)
    if u.shape[-2] == 0:
        raise ValueError("rollout needs at least one input step")
    mus, _ = rollout(np.asarray(params, float), arch, s, u, th, with_var=False)
    preds = np.stack(mus, axis=-2)
    finite = np.isfinite(preds).all(axis=tuple(i for i in range(preds.ndim) if i != preds.ndim - 2))
    if not finite.all():
        bad = int(np.argmin(finite))
        raise DivergenceError(f"rollout became non-finite at step {bad + 1}", bad + 1)
    step_losses = None
    if targets is not None:
        step_losses = huber(np.asarray(targets, float).reshape(preds.shape), preds).mean(axis=-1)
    if single:
        preds = preds[0]
        step_losses = None if step_losses is None else step_losses[0]
    return RolloutResult(preds, step_losses)


def huber(x, xhat):
    """Elementwise Huber loss with unit threshold."""
    r = x - xhat
    a = gc.absolute(r)
    if isinstance(r, Tensor):
        return gc.where(a.value < 1.0, 0.5 * gc.square(r), a - 0.5)
    return np.where(a < 1.0, 0.5 * r * r, a - 0.5)


def window_loss(predictions, targets) -> float:
    """Mean over steps of the channel-averaged Huber loss."""
    predictions = np.asarray(predictions, float)
    targets = np.asarray(targets, float)
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch {predictions.shape} vs {targets.shape}")
    return float(huber(targets, predictions).mean())


def batch_loss(params, arch: NetArch, batch: WindowBatch):
    """Average window loss over a batch; differentiable when `params` is a Tensor."""
    mus, _ = rollout(params, arch, batch.s_init, batch.inputs, batch.theta, with_var=False)
    preds = _stack_steps(mus)
    return huber(batch.targets, preds).mean()


def total_loss(params, arch: NetArch, windows) -> float:
    """Mean window loss, i.e. sum over windows weighted by 1 / (M (N - H + 1))."""
    if isinstance(windows, WindowBatch):
        batch = windows
    else:
        from .datapipe import stack_windows
        if not len(windows):
            raise ValueError("total loss over an empty window set")
        batch = stack_windows(list(windows))
    if not len(batch):
        raise ValueError("total loss over an empty window set")
    return float(batch_loss(np.asarray(params, float), arch, batch))


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    hidden: tuple = (110, 110)
    H: int = 14
    lr: float = 1e-3
    lr_decay: float = 0.9
    decay_steps: float = 1000.0
    epochs: int = 3000
    batch_size: int = 16
    patience: int = 300
    val_every: int = 1
    seed: int = 0
    max_seconds: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "hidden" in known:
            known["hidden"] = tuple(known["hidden"])
        return cls(**known)


@dataclass
class TrainResult:
    params: np.ndarray
    arch: NetArch
    history: list = field(default_factory=list)
    best_epoch: int = 0
    status: str = "ok"


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_rffnn(train: WindowBatch, val: WindowBatch | None, config: TrainConfig,
                arch: NetArch | None = None, params0: np.ndarray | None = None) -> TrainResult:
    """Minimize the windowed Huber loss with Adam over shuffled mini-batches.

    The parameters with the lowest validation loss (training loss when no
    validation windows are given) are returned. Training stops early after
    `patience` epochs without improvement, on `max_seconds`, or on a non-finite
    loss, in which case the best finite checkpoint is kept.
    """
    if arch is None:
        du = train.inputs.shape[-1]
        arch = NetArch(train.s_init.shape[-1] + du + train.theta.shape[-1], config.hidden,
                       train.s_init.shape[-1])
    rng = np.random.default_rng(config.seed)
    params = gc.init_params(arch, rng) if params0 is None else np.array(params0, float)
    opt = gc.AdamState.zeros_like(params)
    sched = gc.ExpDecay(config.lr, config.lr_decay, config.decay_steps)
    best, best_score, best_epoch = params.copy(), math.inf, 0
    history, status = [], "ok"
    t0 = time.perf_counter()

    def loss_fn(b):
        return lambda p: batch_loss(p, arch, b)

    for epoch in range(config.epochs):
        lr = sched(epoch)
        total, count = 0.0, 0
        try:
            for idx in _batches(len(train), config.batch_size, rng):
                b = train.take(idx)
                val_b, g = gc.value_and_grad(loss_fn(b), params)
                params, opt = gc.adam_step(opt, params, g, lr)
                total += val_b * len(idx)
                count += len(idx)
        except gc.NonFiniteError as exc:
            status = f"diverged at epoch {epoch}: {exc}"
            log.warning(status)
            break
        train_loss = total / count
        rec = {"epoch": epoch, "lr": lr, "train_loss": train_loss}
        if val is not None and len(val) and (epoch % config.val_every == 0
                                             or epoch == config.epochs - 1):
            rec["val_loss"] = total_loss(params, arch, val)
        score = rec.get("val_loss", train_loss if val is None or not len(val) else None)
        history.append(rec)
        if score is not None and math.isfinite(score) and score < best_score:
            best, best_score, best_epoch = params.copy(), score, epoch
        if not math.isfinite(train_loss):
            status = f"diverged at epoch {epoch}"
            break
        if epoch - best_epoch > config.patience:
            status = f"early stop at epoch {epoch}"
            break
        if config.max_seconds and time.perf_counter() - t0 > config.max_seconds:
            status = f"time budget reached at epoch {epoch}"
            break
    log.info("rffnn: %s, best epoch %d (%.1fs)", status, best_epoch, time.perf_counter() - t0)
    return TrainResult(best, arch, history, best_epoch, status)


def predict_series(params, arch: NetArch, series: TriaxSeries, input_dim: int) -> np.ndarray:
    """Full-length autoregressive prediction (N, sd) from s_0, the inputs and theta only."""
    res = recursive_rollout(params, arch, series.states[0], series.inputs[:, :input_dim],
                            series.theta)
    return res.predictions


def predict_dataset(params, arch: NetArch, ds: Dataset) -> dict[str, np.ndarray]:
    return {s.test_id: predict_series(params, arch, s, ds.input_dim) for s in ds}
