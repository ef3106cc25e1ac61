"""Error metrics, predictive calibration and the window-length sweep."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

CHANNELS = ("p", "q", "third")


def _aligned(pred, true) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pred, Mapping) or isinstance(true, Mapping):
        pred, true = _align_maps(pred, true)
    pred = _as_stack(pred)
    true = _as_stack(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: predictions {pred.shape} vs truth {true.shape}")
    return pred, true


def _align_maps(pred: Mapping, true: Mapping):
    if set(pred) != set(true):
        raise KeyError(f"test ids differ: {sorted(set(pred) ^ set(true))}")
    keys = sorted(pred)
    return [pred[k] for k in keys], [true[k] for k in keys]


def _as_stack(seqs) -> np.ndarray:
    """Flatten a sequence of (N_m, C) arrays (or one array) to (sum N_m, C)."""
    if isinstance(seqs, np.ndarray):
        return seqs.reshape(-1, seqs.shape[-1]) if seqs.ndim > 1 else seqs[:, None]
    arrs = [np.asarray(s, float) for s in seqs]
    if not arrs:
        raise ValueError("no sequences given")
    arrs = [a[:, None] if a.ndim == 1 else a for a in arrs]
    return np.concatenate(arrs, axis=0)


def mae_rmse(pred, true) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean absolute error and root mean squared error over all tests and steps."""
    p, t = _aligned(pred, true)
    err = p - t
    return np.abs(err).mean(axis=0), np.sqrt((err ** 2).mean(axis=0))


def mean_l2(pred, true) -> float:
    """Mean Euclidean norm of the per-step error vector."""
    p, t = _aligned(pred, true)
    return float(np.linalg.norm(p - t, axis=1).mean())


def mean_l1(pred, true) -> float:
    """Mean L1 norm of the per-step error vector."""
    p, t = _aligned(pred, true)
    return float(np.abs(p - t).sum(axis=1).mean())


def _moments(rollout):
    if hasattr(rollout, "mean") and hasattr(rollout, "var"):
        return np.asarray(rollout.mean, float), np.asarray(rollout.var, float)
    mean, var = rollout
    return np.asarray(mean, float), np.asarray(var, float)


def predictive_nll(rollout, true) -> float:
    """Mean over steps and channels of the Gaussian negative log density."""
    mu, var = _moments(rollout)
    t = np.asarray(true, float)
    if mu.shape != t.shape or var.shape != t.shape:
        raise ValueError(f"shape mismatch: {mu.shape}, {var.shape} vs {t.shape}")
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    return float(np.mean(0.5 * (np.log(2 * math.pi * var) + (t - mu) ** 2 / var)))


def z_value(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    return NormalDist().inv_cdf(0.5 + level / 2.0)


def ci_coverage(rollout, true, level: float = 0.95, per_channel: bool = False):
    """Fraction of (step, channel) pairs whose truth lies inside mean +/- z * std."""
    z = z_value(level)
    mu, var = _moments(rollout)
    t = np.asarray(true, float)
    if mu.shape != t.shape:
        raise ValueError(f"shape mismatch: {mu.shape} vs {t.shape}")
    half = z * np.sqrt(var)
    inside = (t >= mu - half) & (t <= mu + half)
    axes = tuple(range(inside.ndim - 1))
    return inside.mean(axis=axes) if per_channel else float(inside.mean())


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    mae: np.ndarray
    rmse: np.ndarray
    mean_l2: float
    mean_l1: float
    nll: float | None = None
    coverage: float | None = None
    coverage_per_channel: np.ndarray | None = None
    per_test: dict = field(default_factory=dict)
    channels: tuple = CHANNELS
    units: str = "normalized"

    @property
    def probabilistic(self) -> bool:
        return self.coverage is not None

    def to_dict(self) -> dict:
        d = {"units": self.units, "channels": list(self.channels),
             "mae": _floats(self.mae), "rmse": _floats(self.rmse),
             "mean_l2": self.mean_l2, "mean_l1": self.mean_l1}
        if self.probabilistic:
            d["nll"] = self.nll
            d["coverage95"] = self.coverage
            d["coverage95_per_channel"] = _floats(self.coverage_per_channel)
        d["per_test"] = {k: {kk: _floats(vv) if isinstance(vv, np.ndarray) else vv
                             for kk, vv in v.items()} for k, v in self.per_test.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One row per test plus an ``ALL`` row."""
        cols = ["test_id"] + [f"mae_{c}" for c in self.channels] + [f"rmse_{c}" for c in self.channels]
        if self.probabilistic:
            cols += ["nll", "coverage95"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        rows = list(self.per_test.items()) + [("ALL", {"mae": self.mae, "rmse": self.rmse,
                                                        "nll": self.nll, "coverage95": self.coverage})]
        for tid, r in rows:
            line = [tid] + [repr(float(x)) for x in r["mae"]] + [repr(float(x)) for x in r["rmse"]]
            if self.probabilistic:
                line += [repr(float(r["nll"])), repr(float(r["coverage95"]))]
            w.writerow(line)
        return buf.getvalue()


def _floats(a):
    return None if a is None else [float(x) for x in np.atleast_1d(a)]


def build_report(pred: Mapping[str, object], true: Mapping[str, np.ndarray],
                 units: str = "normalized", channels: Sequence[str] = CHANNELS,
                 level: float = 0.95) -> MetricReport:
    """Metrics over aligned {test_id: prediction} and {test_id: truth} maps.

    A prediction is either an (N, C) mean array or an object / pair carrying
    mean and variance, in which case NLL and coverage are also reported.
    """
    if set(pred) != set(true):
        raise KeyError(f"test ids differ: {sorted(set(pred) ^ set(true))}")
    keys = sorted(pred)
    probabilistic = all(not isinstance(pred[k], np.ndarray) for k in keys)
    means = {k: _moments(pred[k])[0] if probabilistic else np.asarray(pred[k], float) for k in keys}
    per_test = {}
    for k in keys:
        mae, rmse = mae_rmse(means[k], true[k])
        row = {"mae": mae, "rmse": rmse}
        if probabilistic:
            row["nll"] = predictive_nll(pred[k], true[k])
            row["coverage95"] = ci_coverage(pred[k], true[k], level)
        per_test[k] = row
    mae, rmse = mae_rmse([means[k] for k in keys], [true[k] for k in keys])
    rep = MetricReport(mae, rmse, mean_l2([means[k] for k in keys], [true[k] for k in keys]),
                       mean_l1([means[k] for k in keys], [true[k] for k in keys]),
                       per_test=per_test, channels=tuple(channels), units=units)
    if probabilistic:
        mu = np.concatenate([_moments(pred[k])[0] for k in keys])
        var = np.concatenate([_moments(pred[k])[1] for k in keys])
        t = np.concatenate([np.asarray(true[k], float) for k in keys])
        rep.nll = predictive_nll((mu, var), t)
        rep.coverage = ci_coverage((mu, var), t, level)
        rep.coverage_per_channel = ci_coverage((mu, var), t, level, per_channel=True)
    return rep


# ---------------------------------------------------------------------------
# window-length sweep

@dataclass
class SweepRow:
    H: int
    val_rmse: np.ndarray | None
    val_nll: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class SweepResult:
    rows: list
    chosen_H: int | None
    rule: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["H", "val_rmse_p", "val_rmse_q", "val_rmse_third", "val_nll"])
        for r in self.rows:
            rm = ["nan"] * 3 if r.val_rmse is None else [repr(float(x)) for x in r.val_rmse]
            w.writerow([r.H, *rm, "" if r.val_nll is None else repr(float(r.val_nll))])
        return buf.getvalue()


def _ranks(values: Sequence[float]) -> np.ndarray:
    """Ranks with 1 = best; ties share their mean rank."""
    v = np.asarray(values, float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def choose_H(rows: Sequence[SweepRow], probabilistic: bool) -> int | None:
    """argmin of mean val RMSE, or of rank(RMSE) + rank(NLL) when probabilistic; ties to smaller H."""
    good = sorted((r for r in rows if r.ok), key=lambda r: r.H)
    if not good:
        return None
    rmse = [float(np.mean(r.val_rmse)) for r in good]
    if probabilistic and all(r.val_nll is not None for r in good):
        score = _ranks(rmse) + _ranks([r.val_nll for r in good])
    else:
        score = np.asarray(rmse)
    return good[int(np.argmin(score))].H


def h_sweep(H_values: Sequence[int], train_eval: Callable[[int], tuple], N: int | None = None,
            probabilistic: bool = False) -> SweepResult:
    """Train and validate one model per window length.

    ``train_eval(H)`` returns ``(val_rmse_per_channel, val_nll_or_None)``. A
    failure for one H is recorded in its row and the sweep continues.
    """
    rows = []
    for H in H_values:
        H = int(H)
        if H < 1 or (N is not None and H > N):
            rows.append(SweepRow(H, None, None, f"H={H} outside [1, {N}]"))
            continue
        try:
            rmse, nll = train_eval(H)
            rows.append(SweepRow(H, np.asarray(rmse, float), None if nll is None else float(nll)))
        except Exception as exc:  # one failed H must not abort the sweep
            log.warning("sweep entry H=%d failed: %s", H, exc)
            rows.append(SweepRow(H, None, None, f"{type(exc).__name__}: {exc}"))
    rule = "rank(rmse)+rank(nll)" if probabilistic else "argmin rmse"
    return SweepResult(rows, choose_H(rows, probabilistic), rule)
