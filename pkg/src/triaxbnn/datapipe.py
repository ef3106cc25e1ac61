"""Dataset containers, CSV I/O, normalization, splits and sliding windows."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

KINDS = ("monotonic-CD", "cyclic-CD", "cyclic-CU")
THIRD_FOR_KIND = {"monotonic-CD": "e", "cyclic-CD": "eps_v", "cyclic-CU": "r_u"}
INPUT_NAMES = ("eps", "deps", "delta", "cycle")
CSV_COLUMNS = ("test_id", "kind", "sigma3_kpa", "e0", "step", "eps", "deps", "delta", "cycle",
               "p_kpa", "q_kpa", "third_value", "third_kind")


class SchemaError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


class SplitError(ValueError):
    pass


def compute_invariants(sigma1, sigma3):
    """Mean stress p = (s1 + 2 s3) / 3 and deviatoric stress q = s1 - s3."""
    sigma1 = np.asarray(sigma1, dtype=float)
    sigma3 = np.asarray(sigma3, dtype=float)
    return (sigma1 + 2.0 * sigma3) / 3.0, sigma1 - sigma3


@dataclass(frozen=True)
class TriaxSeries:
    """One triaxial test.

    ``states`` has shape (N+1, 3) holding [p, q, third] for t = 0..N and
    ``inputs`` has shape (N, 4) holding [eps, deps, delta, cycle] for t = 1..N.
    ``theta`` overrides the raw test constants once the series is normalized.
    """
    test_id: str
    kind: str
    sigma3: float
    e0: float
    states: np.ndarray
    inputs: np.ndarray
    third_kind: str = ""
    theta_values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown test kind {self.kind!r}")
        if not self.third_kind:
            object.__setattr__(self, "third_kind", THIRD_FOR_KIND[self.kind])
        states = np.asarray(self.states, dtype=float)
        inputs = np.asarray(self.inputs, dtype=float)
        if states.ndim != 2 or states.shape[1] != 3:
            raise SchemaError(f"{self.test_id}: states must be (N+1, 3), got {states.shape}")
        if inputs.shape != (states.shape[0] - 1, 4):
            raise SchemaError(f"{self.test_id}: inputs must be (N, 4), got {inputs.shape}")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)

    @property
    def N(self) -> int:
        return len(self.inputs)

    @property
    def theta(self) -> np.ndarray:
        if self.theta_values is not None:
            return np.asarray(self.theta_values, dtype=float)
        return np.array([self.sigma3, self.e0])

    @property
    def cyclic(self) -> bool:
        return self.kind.startswith("cyclic")


@dataclass
class Dataset:
    series: list[TriaxSeries] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    def __getitem__(self, i) -> TriaxSeries:
        return self.series[i]

    @property
    def ids(self) -> list[str]:
        return [s.test_id for s in self.series]

    def by_id(self, test_id: str) -> TriaxSeries:
        for s in self.series:
            if s.test_id == test_id:
                return s
        raise KeyError(test_id)

    def subset(self, ids: Iterable[str]) -> "Dataset":
        lookup = {s.test_id: s for s in self.series}
        return Dataset([lookup[i] for i in ids], dict(self.meta))

    @property
    def N(self) -> int:
        """Shared number of load steps; raises if series disagree."""
        lengths = {s.N for s in self.series}
        if len(lengths) > 1:
            raise SchemaError(f"series have different lengths {sorted(lengths)}")
        return lengths.pop() if lengths else 0

    @property
    def input_dim(self) -> int:
        """Exogenous channels fed to the network: 4 for cyclic data, 2 for monotonic."""
        if not self.series:
            return 4
        return 4 if self.series[0].cyclic else 2


# ---------------------------------------------------------------------------
# normalization

def _group_key(sigma3: float) -> str:
    return repr(float(sigma3))


@dataclass
class NormStats:
    """Scaling constants.

    p and q are divided by the RMS of their confining-pressure group; the
    third state channel, the four exogenous inputs and both test constants are
    min-max scaled with global extrema.
    """
    p_rms: dict[str, float] = field(default_factory=dict)
    q_rms: dict[str, float] = field(default_factory=dict)
    third_min: float = 0.0
    third_max: float = 1.0
    u_min: np.ndarray = field(default_factory=lambda: np.zeros(4))
    u_max: np.ndarray = field(default_factory=lambda: np.ones(4))
    theta_min: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta_max: np.ndarray = field(default_factory=lambda: np.ones(2))

    def group_scale(self, sigma3: float) -> tuple[float, float]:
        """(p_rms, q_rms) for a confining pressure, falling back to the nearest group in log space."""
        key = _group_key(sigma3)
        if key in self.p_rms:
            return self.p_rms[key], self.q_rms[key]
        if not self.p_rms:
            raise NormalizationError("no RMS groups recorded")
        keys = list(self.p_rms)
        nearest = min(keys, key=lambda k: abs(math.log(float(k)) - math.log(sigma3)))
        return self.p_rms[nearest], self.q_rms[nearest]

    @staticmethod
    def _span(lo, hi):
        # a constant field is kept at zero after scaling
        span = np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)
        return np.where(span > 0, span, 1.0)

    def to_dict(self) -> dict:
        return {"p_rms": self.p_rms, "q_rms": self.q_rms,
                "third_min": self.third_min, "third_max": self.third_max,
                "u_min": list(map(float, self.u_min)), "u_max": list(map(float, self.u_max)),
                "theta_min": list(map(float, self.theta_min)),
                "theta_max": list(map(float, self.theta_max))}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(p_rms={k: float(v) for k, v in d["p_rms"].items()},
                   q_rms={k: float(v) for k, v in d["q_rms"].items()},
                   third_min=float(d["third_min"]), third_max=float(d["third_max"]),
                   u_min=np.array(d["u_min"], float), u_max=np.array(d["u_max"], float),
                   theta_min=np.array(d["theta_min"], float),
                   theta_max=np.array(d["theta_max"], float))

    def fingerprint(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _rms_stats(ds: Dataset) -> tuple[dict, dict]:
    groups: dict[str, list[TriaxSeries]] = {}
    for s in ds:
        groups.setdefault(_group_key(s.sigma3), []).append(s)
    p_rms, q_rms = {}, {}
    for key, members in groups.items():
        p = np.concatenate([m.states[1:, 0] for m in members])
        q = np.concatenate([m.states[1:, 1] for m in members])
        for name, vals, out in (("p", p, p_rms), ("q", q, q_rms)):
            rms = float(np.sqrt(np.mean(vals ** 2))) if vals.size else 0.0
            if not rms > 0:
                raise NormalizationError(f"zero RMS for {name} in sigma3={key} group")
            out[key] = rms
    return p_rms, q_rms


def _minmax_stats(ds: Dataset, allow_constant: bool):
    third = np.concatenate([s.states[:, 2] for s in ds])
    u = np.vstack([s.inputs for s in ds])
    theta = np.array([s.theta for s in ds])
    lo = (third.min(), u.min(axis=0), theta.min(axis=0))
    hi = (third.max(), u.max(axis=0), theta.max(axis=0))
    if not allow_constant:
        names = ["third"] + [f"u.{n}" for n in INPUT_NAMES] + ["theta.sigma3", "theta.e0"]
        flat_lo = np.concatenate([[lo[0]], lo[1], lo[2]])
        flat_hi = np.concatenate([[hi[0]], hi[1], hi[2]])
        for name, a, b in zip(names, flat_lo, flat_hi):
            if not b > a:
                raise NormalizationError(f"degenerate range for {name}: min = max = {a}")
    return lo, hi


def fit_norm(ds: Dataset, allow_constant: bool = False) -> NormStats:
    if not len(ds):
        raise NormalizationError("cannot fit normalization on an empty dataset")
    p_rms, q_rms = _rms_stats(ds)
    lo, hi = _minmax_stats(ds, allow_constant)
    return NormStats(p_rms, q_rms, float(lo[0]), float(hi[0]), lo[1], hi[1], lo[2], hi[2])


def _scale_series(s: TriaxSeries, st: NormStats, do_rms: bool, do_minmax: bool,
                  inverse: bool) -> TriaxSeries:
    states = s.states.copy()
    inputs = s.inputs.copy()
    theta = s.theta.copy()
    if do_rms:
        pr, qr = st.group_scale(s.sigma3)
        f = (lambda x, c: x * c) if inverse else (lambda x, c: x / c)
        states[:, 0] = f(states[:, 0], pr)
        states[:, 1] = f(states[:, 1], qr)
    if do_minmax:
        def mm(x, lo, hi):
            span = st._span(lo, hi)
            return x * span + lo if inverse else (x - lo) / span
        states[:, 2] = mm(states[:, 2], st.third_min, st.third_max)
        inputs = mm(inputs, st.u_min, st.u_max)
        theta = mm(theta, st.theta_min, st.theta_max)
    theta_values = None if inverse and do_minmax else theta
    if not do_minmax:
        theta_values = s.theta_values
    return replace(s, states=states, inputs=inputs, theta_values=theta_values)


def rms_normalize(ds: Dataset, stats: NormStats | None = None):
    """Divide p and q by the RMS of their confining-pressure group (over t = 1..N)."""
    if stats is None:
        p_rms, q_rms = _rms_stats(ds)
        stats = NormStats(p_rms=p_rms, q_rms=q_rms)
    out = Dataset([_scale_series(s, stats, True, False, False) for s in ds], dict(ds.meta))
    return out, stats


def minmax_scale(ds: Dataset, stats: NormStats | None = None, allow_constant: bool = False):
    """Map third channel, inputs and test constants onto [0, 1] with global extrema."""
    if stats is None:
        if not len(ds):
            raise NormalizationError("cannot fit normalization on an empty dataset")
        lo, hi = _minmax_stats(ds, allow_constant)
        stats = NormStats(third_min=float(lo[0]), third_max=float(hi[0]), u_min=lo[1],
                          u_max=hi[1], theta_min=lo[2], theta_max=hi[2])
    out = Dataset([_scale_series(s, stats, False, True, False) for s in ds], dict(ds.meta))
    return out, stats


def normalize(ds: Dataset, stats: NormStats) -> Dataset:
    return Dataset([_scale_series(s, stats, True, True, False) for s in ds], dict(ds.meta))


def denormalize(ds: Dataset, stats: NormStats) -> Dataset:
    return Dataset([_scale_series(s, stats, True, True, True) for s in ds], dict(ds.meta))


def denormalize_states(states: np.ndarray, sigma3: float, stats: NormStats) -> np.ndarray:
    """Map normalized [p, q, third] rows back to physical units."""
    pr, qr = stats.group_scale(sigma3)
    scale = np.array([pr, qr, stats._span(stats.third_min, stats.third_max)])
    shift = np.array([0.0, 0.0, stats.third_min])
    return np.asarray(states) * scale + shift


def denormalize_variances(var: np.ndarray, sigma3: float, stats: NormStats) -> np.ndarray:
    pr, qr = stats.group_scale(sigma3)
    scale = np.array([pr, qr, stats._span(stats.third_min, stats.third_max)])
    return np.asarray(var) * scale ** 2


# ---------------------------------------------------------------------------
# splits

def split_dataset(ds: Dataset, spec: dict):
    """Partition by test id. ``spec`` maps "train"/"val"/"test" to id lists.

    Every id must appear exactly once; omitted roles are empty.
    """
    roles = ("train", "val", "test")
    unknown = set(spec) - set(roles)
    if unknown:
        raise SplitError(f"unknown split roles {sorted(unknown)}")
    seen: dict[str, str] = {}
    for role in roles:
        for tid in spec.get(role, []):
            if tid in seen:
                raise SplitError(f"test id {tid!r} appears in both {seen[tid]} and {role}")
            seen[tid] = role
    ids = set(ds.ids)
    missing = ids - set(seen)
    extra = set(seen) - ids
    if missing:
        raise SplitError(f"test ids not assigned to any split: {sorted(missing)}")
    if extra:
        raise SplitError(f"split names unknown test ids: {sorted(extra)}")
    return tuple(Dataset([s for s in ds if seen[s.test_id] == role], dict(ds.meta))
                 for role in roles)


def split_by_e0(ds: Dataset, val: Sequence[float], test: Sequence[float]) -> dict:
    """Split spec holding out the given initial void ratios."""
    spec = {"train": [], "val": [], "test": []}
    for s in ds:
        if any(math.isclose(s.e0, v, abs_tol=1e-9) for v in val):
            spec["val"].append(s.test_id)
        elif any(math.isclose(s.e0, v, abs_tol=1e-9) for v in test):
            spec["test"].append(s.test_id)
        else:
            spec["train"].append(s.test_id)
    return spec


def split_by_sigma3(ds: Dataset, val: Sequence[float], test: Sequence[float]) -> dict:
    spec = {"train": [], "val": [], "test": []}
    for s in ds:
        role = "val" if s.sigma3 in val else "test" if s.sigma3 in test else "train"
        spec[role].append(s.test_id)
    return spec


def prepare_splits(ds: Dataset, spec: dict, allow_constant: bool = True):
    """Split, fit statistics on the training part only and normalize all three parts."""
    train, val, test = split_dataset(ds, spec)
    stats = fit_norm(train, allow_constant=allow_constant)
    return normalize(train, stats), normalize(val, stats), normalize(test, stats), stats


# ---------------------------------------------------------------------------
# sliding windows

@dataclass(frozen=True)
class Window:
    m: int
    k: int
    H: int
    s_init: np.ndarray   # s_{k-1}
    inputs: np.ndarray   # u_k .. u_{k+H-1}, (H, du)
    targets: np.ndarray  # s_k .. s_{k+H-1}, (H, 3)
    theta: np.ndarray


@dataclass(frozen=True)
class WindowBatch:
    s_init: np.ndarray   # (B, 3)
    inputs: np.ndarray   # (B, H, du)
    targets: np.ndarray  # (B, H, 3)
    theta: np.ndarray    # (B, 2)

    def __len__(self) -> int:
        return len(self.s_init)

    @property
    def H(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.s_init[idx], self.inputs[idx], self.targets[idx], self.theta[idx])


def segment_windows(ds: Dataset, H: int, input_dim: int | None = None) -> list[Window]:
    """All M (N - H + 1) overlapping windows of length H, ordered by (m, k)."""
    N = ds.N
    if not 1 <= H:
        raise ValueError("window length must be >= 1")
    if len(ds) and H > N:
        raise ValueError(f"window length H={H} exceeds series length N={N}")
    du = input_dim or ds.input_dim
    out = []
    for m, s in enumerate(ds):
        u = s.inputs[:, :du]
        for k in range(1, N - H + 2):
            out.append(Window(m, k, H, s.states[k - 1], u[k - 1:k - 1 + H],
                              s.states[k:k + H], s.theta))
    return out


def stack_windows(windows: Sequence[Window]) -> WindowBatch:
    if not windows:
        raise ValueError("no windows to stack")
    return WindowBatch(np.stack([w.s_init for w in windows]),
                       np.stack([w.inputs for w in windows]),
                       np.stack([w.targets for w in windows]),
                       np.stack([w.theta for w in windows]))


def window_batch(ds: Dataset, H: int, input_dim: int | None = None) -> WindowBatch:
    return stack_windows(segment_windows(ds, H, input_dim))


# ---------------------------------------------------------------------------
# CSV

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_csv(ds: Dataset, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for s in ds:
            for t in range(s.N + 1):
                u = s.inputs[t - 1] if t > 0 else np.zeros(4)
                p, q, third = s.states[t]
                w.writerow([s.test_id, s.kind, _fmt(s.sigma3), _fmt(s.e0), t,
                            *(_fmt(x) for x in u), _fmt(p), _fmt(q), _fmt(third), s.third_kind])
    tmp.replace(path)


def load_csv(path) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        for col in CSV_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        idx = {c: header.index(c) for c in CSV_COLUMNS}
        rows: dict[str, list] = {}
        info: dict[str, tuple] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) < len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                tid = row[idx["test_id"]]
                kind = row[idx["kind"]]
                step = int(row[idx["step"]])
                nums = [float(row[idx[c]]) for c in ("sigma3_kpa", "e0", "eps", "deps", "delta",
                                                     "cycle", "p_kpa", "q_kpa", "third_value")]
                if not all(math.isfinite(x) for x in nums):
                    raise ValueError("non-finite value")
                if kind not in KINDS:
                    raise ValueError(f"unknown kind {kind!r}")
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: malformed row ({exc})") from None
            head = (kind, nums[0], nums[1], row[idx["third_kind"]])
            if tid in info and info[tid] != head:
                raise SchemaError(f"{path}:{lineno}: test constants change within {tid!r}")
            info.setdefault(tid, head)
            rec = rows.setdefault(tid, [])
            if step != len(rec):
                raise SchemaError(f"{path}:{lineno}: expected step {len(rec)} for {tid!r}, got {step}")
            rec.append(nums[2:])
    series = []
    for tid, rec in rows.items():
        arr = np.array(rec)
        kind, s3, e0, third_kind = info[tid]
        series.append(TriaxSeries(tid, kind, s3, e0, arr[:, 4:7], arr[1:, 0:4], third_kind))
    ds = Dataset(series, {"source": str(path)})
    _ = ds.N  # raises on inconsistent lengths
    return ds
