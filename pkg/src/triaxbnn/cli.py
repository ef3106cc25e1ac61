"""Command-line entry point: simulate, train, predict, evaluate and sweep.

Every command writes a manifest next to its outputs that echoes the fully
resolved configuration, so rerunning with the manifest's config reproduces the
numeric outputs byte for byte.

Exit codes: 0 success, 1 simulation failure under ``--strict``, 2 bad config
or missing path, 3 divergence, 4 normalization or alignment mismatch.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import bayesmodel as bm
from . import detmodel as dm
from . import evalkit as ek
from .datapipe import (Dataset, NormStats, SchemaError, SplitError, NormalizationError,
                       denormalize_states, fit_norm, load_csv, normalize, save_csv,
                       split_by_e0, split_by_sigma3, split_dataset, window_batch)
from .gradcore import NetArch
from .triaxsim import (ConstitutiveParams, SeriesSpec, default_suite, generate_dataset,
                       monotonic_suite)

log = logging.getLogger("triaxbnn")

EXIT_OK, EXIT_SIM_FAILED, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4
MODELS = ("ffnn", "rffnn", "rbnn")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config schema

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_NUMS = {"type": "array", "items": _NUM}
_STRS = {"type": "array", "items": {"type": "string"}}

_TRAIN_KEYS = sorted(set(dm.TrainConfig.__dataclass_fields__) | set(bm.BayesConfig.__dataclass_fields__))
_TRAIN_PROPS = {k: {} for k in _TRAIN_KEYS}
_TRAIN_PROPS.update({
    "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
    "H": {"type": "integer", "minimum": 1}, "epochs": {"type": "integer", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 1}, "n_q": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "minimum": 0}, "lr_decay": {"type": "number", "exclusiveMinimum": 0},
    "decay_steps": {"type": "number", "exclusiveMinimum": 0}, "seed": _INT,
    "patience": {"type": "integer", "minimum": 0}, "val_every": {"type": "integer", "minimum": 1},
    "max_seconds": {"type": ["number", "null"]}, "sigma0": {"type": "number", "exclusiveMinimum": 0},
    "kl_weight": {"anyOf": [{"type": "number", "minimum": 0}, {"const": "per_window"}]},
    "kl_anneal_epochs": {"type": "integer", "minimum": 0},
    "init_mean": {"enum": ["random", "given"]},
})

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "description": {"type": "string"},
        "simulate": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "suite": {"enum": ["cyclic", "monotonic", "explicit"]},
                "drainage": {"enum": ["undrained", "drained"]},
                "n_cycles": {"type": "integer", "minimum": 1},
                "steps_per_branch": {"type": "integer", "minimum": 1},
                "amplitude": {"type": "number", "exclusiveMinimum": 0},
                "steps": {"type": "integer", "minimum": 1},
                "pressures": _NUMS, "e0s": _NUMS,
                "series": {"type": "array", "items": {"type": "object"}},
                "params": {"type": "object", "additionalProperties": False,
                           "properties": {k: _NUM for k in
                                          ConstitutiveParams.__dataclass_fields__}},
                "seed": _INT, "noise_sigma": {"type": "number", "minimum": 0},
                "substeps": {"type": "integer", "minimum": 1},
                "ru_stop": {"type": "number", "exclusiveMinimum": 0},
                "pad": {"type": "boolean"},
            },
        },
        "data": {"type": "object", "additionalProperties": False,
                 "properties": {"path": {"type": "string"}}},
        "split": {
            "type": "object", "additionalProperties": False, "required": ["by"],
            "properties": {"by": {"enum": ["e0", "sigma3", "ids"]},
                           "train": _STRS,
                           "val": {"type": "array"}, "test": {"type": "array"}},
        },
        "model": {"type": "object", "additionalProperties": False,
                  "properties": {"kind": {"enum": list(MODELS)}}},
        "train": {"type": "object", "additionalProperties": False, "properties": _TRAIN_PROPS},
        "predict": {"type": "object", "additionalProperties": False,
                    "properties": {"n_mc": {"type": "integer", "minimum": 1}, "seed": _INT,
                                   "test_ids": _STRS}},
        "sweep": {"type": "object", "additionalProperties": False,
                  "properties": {"H": {"type": "array", "items": {"type": "integer"},
                                       "minItems": 1},
                                 "epochs": {"type": "integer", "minimum": 0},
                                 "n_mc": {"type": "integer", "minimum": 1}}},
    },
}


def shipped_configs() -> list[str]:
    return sorted(p.name for p in resources.files("triaxbnn").joinpath("configs").iterdir()
                  if p.name.endswith(".json"))


def _read_config_text(path: str) -> tuple[str, str]:
    p = Path(path)
    if p.is_file():
        return p.read_text(), str(p)
    name = p.name if p.name.endswith(".json") else p.name + ".json"
    res = resources.files("triaxbnn").joinpath("configs", name)
    if str(p) in (p.name, p.stem) and res.is_file():
        return res.read_text(), f"<shipped>/{name}"
    raise CliError(EXIT_CONFIG, f"config not found: {path} (shipped: {', '.join(shipped_configs())})")


def load_config(path: str | None) -> dict:
    """Parse and validate a JSON config; shipped configs may be named without a path."""
    if path is None:
        return {}
    text, where = _read_config_text(path)
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{where}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    validate_config(cfg, where)
    return cfg


def validate_config(cfg, where: str = "config") -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise CliError(EXIT_CONFIG, f"{where}: invalid value at {loc}: {exc.message}") from None
    try:
        ConstitutiveParams(**cfg.get("simulate", {}).get("params", {}))
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"{where}: invalid constitutive parameters: {exc}") from None


# ---------------------------------------------------------------------------
# file helpers

def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    tmp.replace(path)


def write_json(path: Path, obj) -> None:
    write_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_CONFIG, f"{what} not found: {p}")
    return p


def _load_dataset(path: Path) -> Dataset:
    try:
        return load_csv(_require_file(path, "dataset"))
    except SchemaError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _manifest(command: str, cfg: dict, **extra) -> dict:
    return {"command": command, "version": __version__, "config": cfg, **extra}


def _threads() -> int:
    raw = os.environ.get("RBNN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"RBNN_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _fmt(x) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# simulate

def build_suite(sim: dict) -> list[SeriesSpec]:
    suite = sim.get("suite", "cyclic")
    if suite == "cyclic":
        return default_suite(sim.get("drainage", "undrained"), sim.get("n_cycles", 5),
                             sim.get("steps_per_branch", 15), sim.get("amplitude"))
    if suite == "monotonic":
        kw = {k: sim[k] for k in ("pressures", "e0s", "amplitude", "steps") if k in sim}
        return monotonic_suite(**kw)
    try:
        return [SeriesSpec(**s) for s in sim.get("series", [])]
    except TypeError as exc:
        raise CliError(EXIT_CONFIG, f"invalid explicit series entry: {exc}") from None


def cmd_simulate(args, cfg: dict) -> int:
    sim = cfg.setdefault("simulate", {})
    if args.seed is not None:
        sim["seed"] = args.seed
    specs = build_suite(sim)
    if not specs:
        raise CliError(EXIT_CONFIG, "simulation suite is empty")
    cp = ConstitutiveParams(**sim.get("params", {}))
    ds = generate_dataset(specs, cp, seed=sim.get("seed", 0), noise_sigma=sim.get("noise_sigma", 0.0),
                          substeps=sim.get("substeps", 10), ru_stop=sim.get("ru_stop", 0.95),
                          pad=sim.get("pad", True))
    failures = ds.meta["failures"]
    for tid, msg in failures.items():
        log.warning("series %s failed: %s", tid, msg)
    if failures and args.strict:
        print(f"error: {len(failures)} series failed: {', '.join(failures)}", file=sys.stderr)
        return EXIT_SIM_FAILED
    if not len(ds):
        raise CliError(EXIT_SIM_FAILED, "every series failed")
    out = Path(args.output) if args.output else Path(args.out_dir) / "dataset.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out)
    write_json(out.with_suffix(".manifest.json"),
               _manifest("simulate", cfg, output=out.name, sha256=sha256(out),
                         n_series=len(ds), failures=failures, padded=ds.meta["padded"]))
    print(f"wrote {len(ds)} series to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def resolve_split(ds: Dataset, split: dict | None) -> dict:
    if not split:
        return {"train": ds.ids, "val": [], "test": []}
    by = split["by"]
    if by == "e0":
        return split_by_e0(ds, split.get("val", []), split.get("test", []))
    if by == "sigma3":
        return split_by_sigma3(ds, [float(x) for x in split.get("val", [])],
                               [float(x) for x in split.get("test", [])])
    return {r: list(split.get(r, [])) for r in ("train", "val", "test")}


def _dataset_path(args, cfg: dict) -> Path:
    if getattr(args, "dataset", None):
        return Path(args.dataset)
    if cfg.get("data", {}).get("path"):
        return Path(cfg["data"]["path"])
    return Path(args.out_dir) / "dataset.csv"


def _resolve_train_cfg(args, cfg: dict) -> tuple[str, dict]:
    kind = args.model or cfg.get("model", {}).get("kind", "rbnn")
    tr = cfg.setdefault("train", {})
    for flag, key in (("H", "H"), ("seed", "seed"), ("epochs", "epochs")):
        if getattr(args, flag, None) is not None:
            tr[key] = getattr(args, flag)
    if kind == "ffnn":
        # a single-step network is the recursive network with unit window
        kind, tr["H"] = "rffnn", 1
    cfg["model"] = {"kind": kind}
    validate_config(cfg, "resolved config")
    return kind, tr


def _split_data(ds: Dataset, cfg: dict):
    spec = resolve_split(ds, cfg.get("split"))
    try:
        parts = split_dataset(ds, spec)
    except SplitError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    if not len(parts[0]):
        raise CliError(EXIT_CONFIG, "training split is empty")
    try:
        stats = fit_norm(parts[0], allow_constant=True)
    except NormalizationError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    return spec, [normalize(p, stats) for p in parts], stats


def _windows(ds: Dataset, H: int):
    if not len(ds):
        return None
    if H > ds.N:
        raise CliError(EXIT_CONFIG, f"window length H={H} exceeds series length N={ds.N}")
    return window_batch(ds, H)


def fit_model(kind: str, tr: dict, train: Dataset, val: Dataset):
    H = int(tr.get("H", 14))
    tw, vw = _windows(train, H), _windows(val, H)
    if kind == "rbnn":
        res = bm.train_rbnn(tw, vw, bm.BayesConfig.from_dict(tr))
    else:
        res = dm.train_rffnn(tw, vw, dm.TrainConfig.from_dict(tr))
    return res


def _diverged(status: str) -> bool:
    return status.startswith(("diverged", "non-finite"))


def history_csv(history: list) -> str:
    keys = []
    for rec in history:
        keys += [k for k in rec if k not in keys]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for rec in history:
        w.writerow(["" if rec.get(k) is None else
                    (rec[k] if isinstance(rec[k], int) else _fmt(rec[k])) for k in keys])
    return buf.getvalue()


def checkpoint_dict(kind: str, res, tr: dict, stats: NormStats, spec: dict, ds_path: Path,
                    input_dim: int) -> dict:
    ck = {"format": "triaxbnn-checkpoint", "version": 1, "model": kind, "H": int(tr.get("H", 14)),
          "input_dim": input_dim, "train_config": tr, "seed": tr.get("seed", 0),
          "norm_stats": stats.to_dict(), "split": spec,
          "dataset": {"path": str(ds_path), "sha256": sha256(ds_path)},
          "best_epoch": res.best_epoch, "status": res.status}
    if kind == "rbnn":
        ck["arch"] = res.arch.to_dict()
        ck["mu_q"] = [float(x) for x in res.vp.mu]
        ck["sigma_raw"] = [float(x) for x in res.vp.rho]
    else:
        ck["arch"] = res.arch.to_dict()
        ck["params"] = [float(x) for x in res.params]
    return ck


def cmd_train(args, cfg: dict) -> int:
    kind, tr = _resolve_train_cfg(args, cfg)
    ds_path = _dataset_path(args, cfg)
    ds = _load_dataset(ds_path)
    spec, (train, val, _), stats = _split_data(ds, cfg)
    res = fit_model(kind, tr, train, val)
    out = Path(args.out_dir)
    write_atomic(out / "history.csv", history_csv(res.history))
    if _diverged(res.status):
        print(f"error: training diverged ({res.status}); history kept in {out / 'history.csv'}",
              file=sys.stderr)
        return EXIT_DIVERGED
    ck = checkpoint_dict(kind, res, tr, stats, spec, ds_path, ds.input_dim)
    write_json(out / "checkpoint.json", ck)
    write_json(out / "train.manifest.json",
               _manifest("train", cfg, dataset=str(ds_path), dataset_sha256=ck["dataset"]["sha256"],
                         checkpoint_sha256=sha256(out / "checkpoint.json"), status=res.status,
                         best_epoch=res.best_epoch))
    print(f"{kind}: {res.status}, best epoch {res.best_epoch}; checkpoint in {out / 'checkpoint.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict

def load_checkpoint(path) -> dict:
    p = _require_file(path, "checkpoint")
    try:
        ck = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{p}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if ck.get("format") != "triaxbnn-checkpoint" or ck.get("model") not in ("rffnn", "rbnn"):
        raise CliError(EXIT_CONFIG, f"{p}: not a model checkpoint")
    return ck


def check_norm_stats(ck: dict, ds: Dataset) -> NormStats:
    """Checkpoint statistics, cross-checked against a refit when the training ids are present."""
    stats = NormStats.from_dict(ck["norm_stats"])
    train_ids = ck.get("split", {}).get("train", [])
    if train_ids and set(train_ids) <= set(ds.ids):
        refit = fit_norm(ds.subset(train_ids), allow_constant=True)
        if refit.fingerprint() != stats.fingerprint():
            raise CliError(EXIT_MISMATCH, "normalization statistics in the checkpoint do not match "
                                          "the training series of this dataset")
    if ds.input_dim != ck["input_dim"]:
        raise CliError(EXIT_MISMATCH, f"dataset has {ds.input_dim} input channels, "
                                      f"checkpoint expects {ck['input_dim']}")
    return stats


def _select_ids(args, cfg: dict, ck: dict, ds: Dataset) -> list[str]:
    if args.test_ids:
        ids = [t for t in args.test_ids.split(",") if t]
    elif cfg.get("predict", {}).get("test_ids"):
        ids = cfg["predict"]["test_ids"]
    else:
        ids = ck.get("split", {}).get("test") or ds.ids
    missing = [t for t in ids if t not in ds.ids]
    if missing:
        raise CliError(EXIT_MISMATCH, f"test ids not in dataset: {missing}")
    return list(ids)


def predict_rows(ck: dict, ds: Dataset, ids: list[str], stats: NormStats, n_mc: int, seed: int,
                 workers: int = 1) -> tuple[list, bool]:
    """Denormalized predictions as (test_id, step, channel, mean[, var, lo, hi, epistemic]) rows."""
    arch = NetArch.from_dict(ck["arch"])
    norm = normalize(ds.subset(ids), stats)
    probabilistic = ck["model"] == "rbnn"
    rows = []
    for s_raw, s in zip(ds.subset(ids), norm):
        names = ("p", "q", s.third_kind)
        if probabilistic:
            vp = bm.VariationalParams(np.array(ck["mu_q"]), np.array(ck["sigma_raw"]))
            try:
                pr = bm.predict_series(vp, arch, s, ds.input_dim, n_mc=n_mc, seed=seed,
                                       workers=workers).denormalize(s.sigma3, stats)
            except bm.PredictionError as exc:
                raise CliError(EXIT_DIVERGED, f"{s.test_id}: {exc}") from None
            lo, hi = pr.bounds()
            cols = (pr.mean, pr.var, lo, hi, pr.epistemic_var)
        else:
            try:
                mean = dm.predict_series(np.array(ck["params"]), arch, s, ds.input_dim)
            except dm.DivergenceError as exc:
                raise CliError(EXIT_DIVERGED, f"{s.test_id}: {exc}") from None
            cols = (denormalize_states(mean, s.sigma3, stats),)
        for t in range(cols[0].shape[0]):
            for c, name in enumerate(names):
                rows.append([s_raw.test_id, t + 1, name, *(_fmt(a[t, c]) for a in cols)])
    return rows, probabilistic


PRED_COLUMNS = ("test_id", "step", "channel", "mean")
PRED_PROB_COLUMNS = PRED_COLUMNS + ("variance", "lo95", "hi95", "epistemic_variance")


def cmd_predict(args, cfg: dict) -> int:
    ck_path = Path(args.checkpoint) if args.checkpoint else Path(args.out_dir) / "checkpoint.json"
    ck = load_checkpoint(ck_path)
    pcfg = cfg.setdefault("predict", {})
    if args.nmc is not None:
        pcfg["n_mc"] = args.nmc
    if args.seed is not None:
        pcfg["seed"] = args.seed
    n_mc, seed = pcfg.get("n_mc", 1000), pcfg.get("seed", 0)
    ds_path = Path(args.dataset) if args.dataset else Path(ck["dataset"]["path"])
    ds = _load_dataset(ds_path)
    stats = check_norm_stats(ck, ds)
    ids = _select_ids(args, cfg, ck, ds)
    rows, prob = predict_rows(ck, ds, ids, stats, n_mc, seed, _threads())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PRED_PROB_COLUMNS if prob else PRED_COLUMNS)
    w.writerows(rows)
    out = Path(args.output) if args.output else Path(args.out_dir) / "predictions.csv"
    write_atomic(out, buf.getvalue())
    write_json(out.with_suffix(".manifest.json"),
               _manifest("predict", cfg, checkpoint=str(ck_path), checkpoint_sha256=sha256(ck_path),
                         dataset=str(ds_path), dataset_sha256=sha256(ds_path), test_ids=ids,
                         model=ck["model"], n_mc=n_mc if prob else None, seed=seed,
                         norm_stats=ck["norm_stats"], output_sha256=sha256(out)))
    print(f"wrote predictions for {len(ids)} series to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

def read_predictions(path: Path) -> tuple[dict, bool]:
    """{test_id: (mean (N, 3), variance (N, 3) or None)} from a prediction CSV."""
    with open(_require_file(path, "predictions"), newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if not set(PRED_COLUMNS) <= set(cols):
            raise CliError(EXIT_CONFIG, f"{path}: not a prediction file (columns {cols})")
        prob = "variance" in cols
        acc: dict[str, dict[int, dict]] = {}
        for row in reader:
            acc.setdefault(row["test_id"], {}).setdefault(int(row["step"]), {})[row["channel"]] = row
    out = {}
    for tid, steps in acc.items():
        order = sorted(steps)
        if order != list(range(1, len(order) + 1)):
            raise CliError(EXIT_MISMATCH, f"{path}: steps for {tid} are not 1..N")
        chans = list(steps[order[0]])
        mean = np.array([[float(steps[t][c]["mean"]) for c in chans] for t in order])
        var = (np.array([[float(steps[t][c]["variance"]) for c in chans] for t in order])
               if prob else None)
        out[tid] = (mean, var)
    return out, prob


def cmd_evaluate(args, cfg: dict) -> int:
    pred_path = Path(args.predictions) if args.predictions else Path(args.out_dir) / "predictions.csv"
    preds, prob = read_predictions(pred_path)
    man_path = pred_path.with_suffix(".manifest.json")
    man = json.loads(man_path.read_text()) if man_path.is_file() else {}
    ds_path = Path(args.dataset) if args.dataset else Path(man.get("dataset", "")) if man.get("dataset") \
        else _dataset_path(args, cfg)
    ds = _load_dataset(ds_path)
    missing = [t for t in preds if t not in ds.ids]
    if missing:
        raise CliError(EXIT_MISMATCH, f"predicted test ids not in dataset: {missing}")
    truth = {t: ds.by_id(t).states[1:] for t in preds}
    for t, (mean, _) in preds.items():
        if mean.shape != truth[t].shape:
            raise CliError(EXIT_MISMATCH, f"{t}: predictions {mean.shape} vs data {truth[t].shape}")

    def as_pred(mean, var):
        return (mean, var) if prob else mean

    reports = {"physical": ek.build_report({t: as_pred(*preds[t]) for t in preds}, truth,
                                           units="physical")}
    if man.get("norm_stats"):
        stats = NormStats.from_dict(man["norm_stats"])
        npred, ntrue = {}, {}
        for t, (mean, var) in preds.items():
            s = ds.by_id(t)
            shift, scale = _norm_affine(s.sigma3, stats)
            npred[t] = as_pred((mean - shift) / scale, None if var is None else var / scale ** 2)
            ntrue[t] = (truth[t] - shift) / scale
        reports["normalized"] = ek.build_report(npred, ntrue, units="normalized")
    headline = reports.get("normalized", reports["physical"])
    out = Path(args.out_dir)
    write_json(out / "metrics.json", {k: r.to_dict() for k, r in reports.items()})
    write_atomic(out / "metrics.csv", headline.to_csv())
    print(f"{headline.units} RMSE (p, q, third): " + ", ".join(f"{x:.4g}" for x in headline.rmse)
          + (f"; 95% coverage {headline.coverage:.3f}" if headline.probabilistic else ""))
    return EXIT_OK


def _norm_affine(sigma3: float, stats: NormStats):
    zero = denormalize_states(np.zeros(3), sigma3, stats)
    one = denormalize_states(np.ones(3), sigma3, stats)
    return zero, one - zero


# ---------------------------------------------------------------------------
# sweep

def cmd_sweep(args, cfg: dict) -> int:
    kind, tr = _resolve_train_cfg(args, cfg)
    sw = cfg.setdefault("sweep", {})
    H_list = sw.get("H", [1, 7, 10, 14])
    if "epochs" in sw:
        tr = dict(tr, epochs=sw["epochs"])
    n_mc = sw.get("n_mc", 100)
    ds_path = _dataset_path(args, cfg)
    ds = _load_dataset(ds_path)
    _, (train, val, _), _ = _split_data(ds, cfg)
    if not len(val):
        raise CliError(EXIT_CONFIG, "sweep needs a non-empty validation split")

    def train_eval(H: int):
        res = fit_model(kind, dict(tr, H=H), train, val)
        if _diverged(res.status):
            raise FloatingPointError(res.status)
        truth = {s.test_id: s.states[1:] for s in val}
        if kind == "rbnn":
            preds = {s.test_id: bm.predict_series(res.vp, res.arch, s, val.input_dim, n_mc=n_mc,
                                                  seed=tr.get("seed", 0)) for s in val}
            rep = ek.build_report(preds, truth)
            return rep.rmse, rep.nll
        preds = dm.predict_dataset(res.params, res.arch, val)
        return ek.build_report(preds, truth).rmse, None

    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(zip(H_list, pool.map(lambda h: _safe(train_eval, h), H_list)))
        result = ek.h_sweep(H_list, lambda h: _unwrap(results[h]), N=ds.N,
                            probabilistic=kind == "rbnn")
    else:
        result = ek.h_sweep(H_list, train_eval, N=ds.N, probabilistic=kind == "rbnn")
    out = Path(args.out_dir)
    write_atomic(out / "sweep.csv", result.to_csv())
    write_json(out / "sweep.manifest.json",
               _manifest("sweep", cfg, dataset=str(ds_path), dataset_sha256=sha256(ds_path),
                         chosen_H=result.chosen_H, rule=result.rule,
                         errors={str(r.H): r.error for r in result.rows if not r.ok}))
    print(f"chosen H = {result.chosen_H} ({result.rule})")
    return EXIT_OK


def _safe(fn, h):
    try:
        return fn(h)
    except Exception as exc:  # re-raised per entry inside h_sweep
        return exc


def _unwrap(v):
    if isinstance(v, Exception):
        raise v
    return v


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="triaxbnn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config path or the name of a shipped config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default=".", help="directory for outputs (default: .)")
    common.add_argument("--dataset", help="dataset CSV (default: from config or checkpoint)")
    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--strict", action="store_true", help="fail if any series fails")
    p.add_argument("--output", help="dataset CSV path (default: OUT_DIR/dataset.csv)")
    for name in ("train", "sweep"):
        p = sub.add_parser(name, parents=[common],
                           help="train one model" if name == "train" else "tune the window length")
        p.add_argument("--model", choices=MODELS)
        p.add_argument("--H", type=int)
        p.add_argument("--epochs", type=int)
    p = sub.add_parser("predict", parents=[common], help="full-sequence predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--nmc", type=int)
    p.add_argument("--test-ids", help="comma-separated test ids")
    p.add_argument("--output", help="prediction CSV path (default: OUT_DIR/predictions.csv)")
    p = sub.add_parser("evaluate", parents=[common], help="metrics for a prediction file")
    p.add_argument("--predictions")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = copy.deepcopy(load_config(args.config))
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
