"""Strain-controlled triaxial test simulator.

Implements a critical-state exponential-type sand model in rate form,

    dq    = 3 G [ deps_d - (q / (p' M_p)) |deps_d| ]
    deps_v = M_pt |deps_d| - (q / p') deps_d

integrated with explicit Euler. Drained tests follow the constant-sigma3
stress path dp' = dq / 3; undrained tests keep eps_v = 0 and convert the
plastic volumetric tendency into excess pore pressure through the elastic
bulk modulus.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

P_ATM = 101.325  # kPa


class SimulationError(RuntimeError):
    """Raised when the integrated state leaves the admissible region."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class DegenerateStateError(SimulationError):
    pass


class LiquefactionError(SimulationError):
    pass


@dataclass(frozen=True)
class ConstitutiveParams:
    G0: float = 3000.0
    nu: float = 0.3
    n: float = 0.67
    phi_c: float = 31.2
    e_c0: float = 0.937
    lambda_cs: float = 0.022
    xi: float = 0.71
    d_exp: float = 2.0
    p_atm: float = P_ATM

    def __post_init__(self):
        for name in ("G0", "n", "e_c0", "lambda_cs", "xi", "d_exp", "p_atm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.nu < 0.5:
            raise ValueError("nu must lie in (0, 0.5)")
        if not 0 < self.phi_c < 90:
            raise ValueError("phi_c must lie in (0, 90) degrees")

    @property
    def M_c(self) -> float:
        s = math.sin(math.radians(self.phi_c))
        return 6.0 * s / (3.0 - s)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class SimState:
    p_eff: float
    q: float
    e: float
    e0: float
    sigma3: float
    eps_v: float = 0.0
    eps_d: float = 0.0
    u_excess: float = 0.0
    cycle: int = 0

    @classmethod
    def isotropic(cls, e0: float, sigma3: float) -> "SimState":
        if e0 <= 0 or sigma3 <= 0:
            raise ValueError("e0 and sigma3 must be positive")
        return cls(p_eff=sigma3, q=0.0, e=e0, e0=e0, sigma3=sigma3)

    @property
    def r_u(self) -> float:
        return self.u_excess / self.sigma3


def state_functions(e: float, p_eff: float, cp: ConstitutiveParams):
    """Return (G, K, e_c, M_p, M_pt) at void ratio `e` and mean effective stress `p_eff`."""
    if e <= 0 or p_eff <= 0:
        raise DegenerateStateError(f"non-positive state (e={e}, p'={p_eff})")
    pr = p_eff / cp.p_atm
    G = cp.G0 * (2.97 - e) ** 2 / (1.0 + e) * pr ** cp.n
    K = 2.0 * G * (1.0 + cp.nu) / (3.0 * (1.0 - 2.0 * cp.nu))
    e_c = cp.e_c0 - cp.lambda_cs * pr ** cp.xi
    if e_c <= 0:
        raise DegenerateStateError(f"critical void ratio {e_c} <= 0 at p'={p_eff}")
    M_p = cp.M_c * (e_c / e) ** cp.d_exp
    M_pt = cp.M_c * (e / e_c) ** cp.d_exp
    return G, K, e_c, M_p, M_pt


def step_drained(s: SimState, deps_d: float, cp: ConstitutiveParams,
                 substeps: int = 1, step: int | None = None) -> SimState:
    h = deps_d / substeps
    p, q, e, eps_v = s.p_eff, s.q, s.e, s.eps_v
    for _ in range(substeps):
        G, _, _, M_p, M_pt = state_functions(e, p, cp)
        eta = q / p
        dq = 3.0 * G * (h - eta / M_p * abs(h))
        dev = M_pt * abs(h) - eta * h
        p += dq / 3.0
        q += dq
        eps_v += dev
        e -= (1.0 + s.e0) * dev
        if p <= 0:
            raise SimulationError(f"drained integration produced p'={p}", step)
    return replace(s, p_eff=p, q=q, e=e, eps_v=eps_v, eps_d=s.eps_d + deps_d)


def step_undrained(s: SimState, deps_d: float, cp: ConstitutiveParams,
                   substeps: int = 1, step: int | None = None) -> SimState:
    h = deps_d / substeps
    p, q, u = s.p_eff, s.q, s.u_excess
    for _ in range(substeps):
        G, K, _, M_p, M_pt = state_functions(s.e, p, cp)
        eta = q / p
        dq = 3.0 * G * (h - eta / M_p * abs(h))
        dp = -K * (M_pt * abs(h) - eta * h)
        p += dp
        q += dq
        u += dq / 3.0 - dp
        if p <= 0:
            raise LiquefactionError(f"undrained integration reached p'={p}", step)
    return replace(s, p_eff=p, q=q, u_excess=u, eps_d=s.eps_d + deps_d)


@dataclass(frozen=True)
class StrainPath:
    """Per-step controls for t = 1..N: strain, increment, direction, cycle number."""
    eps: np.ndarray
    deps: np.ndarray
    delta: np.ndarray
    cycle: np.ndarray

    def __len__(self) -> int:
        return len(self.deps)

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.eps, self.deps, self.delta, self.cycle]).astype(float)


def make_strain_path(kind: str, amplitude: float, n_cycles: int = 1,
                     steps_per_branch: int = 100) -> StrainPath:
    """Monotonic ramp to `amplitude`, or a triangular wave between -amplitude and +amplitude.

    A cyclic path is built from quarter branches 0 -> +a -> 0 -> -a -> 0, each of
    `steps_per_branch` equal increments. The cycle number counts cycles started,
    so it steps up once at each reload through zero strain (including the first).
    """
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    if n_cycles < 1 or steps_per_branch < 1:
        raise ValueError("counts must be >= 1")
    if kind == "monotonic":
        n = steps_per_branch
        deps = np.full(n, amplitude / n)
        # cumsum keeps eps the exact running sum of the increments
        return StrainPath(np.cumsum(deps), deps, np.ones(n), np.zeros(n))
    if kind != "cyclic":
        raise ValueError(f"unknown path kind {kind!r}")
    h = amplitude / steps_per_branch
    one = np.concatenate([np.full(steps_per_branch, h), np.full(2 * steps_per_branch, -h),
                          np.full(steps_per_branch, h)])
    deps = np.tile(one, n_cycles)
    cycle = np.repeat(np.arange(1, n_cycles + 1), 4 * steps_per_branch)
    return StrainPath(np.cumsum(deps), deps, np.sign(deps), cycle.astype(float))


# ---------------------------------------------------------------------------
# dataset generation

@dataclass
class SeriesSpec:
    e0: float
    sigma3: float
    drainage: str  # "drained" | "undrained"
    path: dict = field(default_factory=lambda: {"kind": "cyclic", "amplitude": 0.01,
                                                "n_cycles": 5, "steps_per_branch": 15})
    test_id: str | None = None

    @property
    def kind(self) -> str:
        cyclic = self.path.get("kind", "cyclic") == "cyclic"
        if self.drainage == "undrained":
            if not cyclic:
                raise ValueError("monotonic undrained tests are not supported")
            return "cyclic-CU"
        return "cyclic-CD" if cyclic else "monotonic-CD"

    def to_dict(self) -> dict:
        return {"e0": self.e0, "sigma3": self.sigma3, "drainage": self.drainage,
                "path": dict(self.path), "test_id": self.test_id}


THIRD_KIND = {"monotonic-CD": "e", "cyclic-CD": "eps_v", "cyclic-CU": "r_u"}


def simulate_series(spec: SeriesSpec, cp: ConstitutiveParams, substeps: int = 10,
                    ru_stop: float = 0.95):
    """Run one test. Returns (states (N+1, 3), path, stopped_at) in physical units.

    Undrained runs stop once r_u reaches `ru_stop`; `stopped_at` is then the
    last computed step index, otherwise None.
    """
    path = make_strain_path(**spec.path)
    kind = spec.kind
    s = SimState.isotropic(spec.e0, spec.sigma3)
    third = {"e": lambda st: st.e, "eps_v": lambda st: st.eps_v,
             "r_u": lambda st: st.r_u}[THIRD_KIND[kind]]
    rows = [(s.p_eff, s.q, third(s))]
    stepper = step_undrained if spec.drainage == "undrained" else step_drained
    stopped = None
    for t, de in enumerate(path.deps, start=1):
        s = stepper(s, float(de), cp, substeps=substeps, step=t)
        rows.append((s.p_eff, s.q, third(s)))
        if spec.drainage == "undrained" and s.r_u >= ru_stop:
            stopped = t
            break
    return np.array(rows), path, stopped


def halving_check(spec: SeriesSpec, cp: ConstitutiveParams, substeps: int = 10,
                  tol: float = 0.01) -> tuple[bool, np.ndarray]:
    """Compare a run against one with half the Euler step size.

    Returns (converged, per-channel max difference relative to the channel's
    range); converged means every relative difference is below `tol`.
    """
    a, _, sa = simulate_series(spec, cp, substeps, ru_stop=math.inf)
    b, _, sb = simulate_series(spec, cp, 2 * substeps, ru_stop=math.inf)
    rng = np.ptp(b, axis=0)
    rel = np.abs(a - b).max(axis=0) / np.where(rng > 0, rng, 1.0)
    return bool(np.all(rel < tol)), rel


UNDRAINED_AMPLITUDE = 0.0005
DRAINED_AMPLITUDE = 0.01


def default_suite(drainage: str = "undrained", n_cycles: int = 5,
                  steps_per_branch: int = 15, amplitude: float | None = None) -> list[SeriesSpec]:
    """The 16-test cyclic suite: e0 from 0.575 to 0.950 in 0.025 steps.

    Undrained tests default to a +/-0.05% strain amplitude: at +/-1% the
    closure drives every specimen to liquefaction within the first cycle.
    """
    sigma3 = 300.0 if drainage == "undrained" else 98.0
    if amplitude is None:
        amplitude = UNDRAINED_AMPLITUDE if drainage == "undrained" else DRAINED_AMPLITUDE
    e0s = np.round(np.arange(0.575, 0.9501, 0.025), 3)
    path = {"kind": "cyclic", "amplitude": float(amplitude), "n_cycles": n_cycles,
            "steps_per_branch": steps_per_branch}
    tag = "CU" if drainage == "undrained" else "CD"
    return [SeriesSpec(float(e0), sigma3, drainage, dict(path), f"{tag}-e{e0:.3f}") for e0 in e0s]


def monotonic_suite(pressures: Sequence[float] = (5, 10, 20, 40, 80, 100, 120, 180, 220, 300,
                                                  480, 640, 800),
                    e0s: Iterable[float] = (0.60, 0.65, 0.70, 0.75, 0.80, 0.85),
                    amplitude: float = 0.10, steps: int = 100) -> list[SeriesSpec]:
    path = {"kind": "monotonic", "amplitude": amplitude, "n_cycles": 1,
            "steps_per_branch": steps}
    return [SeriesSpec(float(e0), float(s3), "drained", dict(path), f"CD-s{s3:g}-e{e0:.3f}")
            for s3 in pressures for e0 in e0s]


def generate_dataset(cfg: Sequence[SeriesSpec], cp: ConstitutiveParams | None = None,
                     seed: int = 0, noise_sigma: float = 0.0, substeps: int = 10,
                     ru_stop: float = 0.95, pad: bool = True):
    """Simulate every entry of `cfg` and collect the series into a Dataset.

    Failed series are skipped and reported in ``dataset.meta["failures"]``.
    Undrained series that reach `ru_stop` early are padded by holding the last
    state (recorded in ``meta["padded"]``) so that all series share N.
    Optional Gaussian observation noise has std `noise_sigma` times each
    channel's standard deviation within the series.
    """
    from .datapipe import Dataset, TriaxSeries

    cp = cp or ConstitutiveParams()
    for spec in cfg:
        if spec.e0 <= 0 or spec.sigma3 <= 0:
            raise ValueError(f"invalid test constants e0={spec.e0}, sigma3={spec.sigma3}")
    rng = np.random.default_rng(seed)
    series, failures, padded = [], {}, {}
    for i, spec in enumerate(cfg):
        tid = spec.test_id or f"T{i:03d}"
        noise = rng.standard_normal((len(make_strain_path(**spec.path)) + 1, 3))
        try:
            states, path, stopped = simulate_series(spec, cp, substeps, ru_stop)
        except SimulationError as exc:
            failures[tid] = str(exc)
            continue
        if stopped is not None:
            if not pad:
                failures[tid] = f"r_u reached {ru_stop} at step {stopped}"
                continue
            fill = np.repeat(states[-1:], len(path) + 1 - len(states), axis=0)
            states = np.vstack([states, fill])
            padded[tid] = stopped
        if noise_sigma > 0:
            states = states + noise_sigma * states.std(axis=0) * noise
        series.append(TriaxSeries(tid, spec.kind, spec.sigma3, spec.e0, states,
                                  path.as_array(), THIRD_KIND[spec.kind]))
    meta = {"params": cp.to_dict(), "suite": [s.to_dict() for s in cfg], "seed": seed,
            "noise_sigma": noise_sigma, "substeps": substeps, "failures": failures,
            "padded": padded}
    return Dataset(series, meta=meta)
