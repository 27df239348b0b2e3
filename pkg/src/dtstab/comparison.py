"""Comparison functions: classes K / K-infinity, positive time gains, KL envelopes.

Class membership is validated numerically on grids (tolerance 0 at grid
points, strict inequalities checked as ``>`` with ties reported), not
symbolically.  KL envelopes are restricted to the parametric family
``C * s * exp(-c*t)``; at integer times they are evaluated by the exact
geometric recursion ``sigma(s, t+1) = exp(-c) * sigma(s, t)`` so that this
identity holds bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import Dims, compile_expression
from .system import SampleConfig, d_candidates, sphere_points, vecnorm

__all__ = [
    "KFn", "TimeGain", "KLEnvelope", "identity", "linear", "power_fn",
    "kfn_from_expr", "constant", "geometric", "timegain_from_expr",
    "ClassGrid", "ClassReport", "validate_class",
    "KLFit", "fit_kl_envelope", "DominationReport", "check_domination",
    "sup_f_sampler",
]


def _scalar_expr(text: str, var: str) -> Callable[[float], float]:
    fn = compile_expression(text, Dims(aux=frozenset({var})))
    empty = np.zeros(0)
    return lambda v: fn(0.0, empty, empty, empty, {var: float(v)})


@dataclass
class KFn:
    """A claimed class-K (or K-infinity) scalar map s -> fn(s)."""

    fn: Callable[[float], float]
    name: str = "kfn"
    tag: str = "K"  # "K" or "Kinf"
    inv: Callable[[float], float] = None

    def __post_init__(self):
        if self.tag not in ("K", "Kinf"):
            raise ValueError("tag must be 'K' or 'Kinf'")

    def __call__(self, s: float) -> float:
        return float(self.fn(float(s)))

    def inverse(self, v: float, hi_cap: float = 1e300) -> float:
        """fn^{-1}(v); explicit inverse if given, else bisection (fn increasing)."""
        if self.inv is not None:
            return float(self.inv(float(v)))
        v = float(v)
        if v <= 0.0:
            return 0.0
        hi = 1.0
        while self(hi) < v:
            hi *= 2.0
            if hi > hi_cap:
                raise ValueError(f"{self.name}: value {v} outside attainable range")
        lo = 0.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self(mid) < v:
                lo = mid
            else:
                hi = mid
        return hi


def identity() -> KFn:
    return KFn(lambda s: s, "s", "Kinf", inv=lambda v: v)


def linear(a: float, name: str = None) -> KFn:
    if a <= 0:
        raise ValueError("linear gain must be positive")
    return KFn(lambda s: a * s, name or f"{a!r}*s", "Kinf", inv=lambda v: v / a)


def power_fn(p: float, a: float = 1.0) -> KFn:
    if p <= 0 or a <= 0:
        raise ValueError("power and gain must be positive")
    return KFn(lambda s: a * math.pow(s, p), f"{a!r}*s^{p!r}", "Kinf",
               inv=lambda v: math.pow(v / a, 1.0 / p))


def kfn_from_expr(text: str, tag: str = "K") -> KFn:
    return KFn(_scalar_expr(text, "s"), text, tag)


@dataclass
class TimeGain:
    """t -> g(t): a positive gain (class K+) or a decaying offset q.

    ``geometric=(C, ratio)`` marks the exact form C*ratio**t, for which tail
    suprema are analytic; otherwise tails are estimated on a long grid and
    flagged approximate.
    """

    fn: Callable[[float], float]
    name: str = "gain"
    decays: bool = False
    geometric: tuple = None

    def __call__(self, t: float) -> float:
        return float(self.fn(float(t)))

    def sup_tail(self, tau: int, horizon: int = 4096) -> float:
        """sup over t >= tau of the gain (exact for monotone geometric forms)."""
        if self.geometric is not None:
            C, ratio = self.geometric
            if 0.0 <= ratio <= 1.0:
                return self(tau)
            return math.inf
        ts = np.arange(tau, tau + horizon + 1)
        return float(max(self(t) for t in ts))


def constant(c: float, name: str = None) -> TimeGain:
    return TimeGain(lambda t: c, name or repr(float(c)), geometric=(c, 1.0))


def geometric(C: float, ratio: float, name: str = None) -> TimeGain:
    return TimeGain(lambda t: C * math.pow(ratio, t),
                    name or f"{C!r}*{ratio!r}^t",
                    decays=0.0 <= ratio < 1.0, geometric=(C, ratio))


def timegain_from_expr(text: str, decays: bool = False) -> TimeGain:
    fn = compile_expression(text, Dims())
    empty = np.zeros(0)
    return TimeGain(lambda t: fn(float(t), empty, empty, empty, {}),
                    text, decays=decays)


@dataclass
class KLEnvelope:
    """sigma(s, t) = C * s * exp(-c t) with an associated time gain beta.

    Integer times are evaluated by the exact per-step recursion (decay factor
    ``exp(-c)``), so ``sigma(s, t+1) == exp(-c) * sigma(s, t)`` bitwise and
    ``sigma(0, t) == 0``.  A general two-argument form may be supplied via
    ``fn``, losing that exactness.
    """

    C: float
    c: float
    beta: TimeGain = field(default_factory=lambda: constant(1.0))
    fn: Callable[[float, float], float] = None
    name: str = ""

    def __post_init__(self):
        self.g = math.exp(-self.c)
        if not self.name:
            self.name = f"{self.C!r}*s*exp(-{self.c!r}*t)"

    def __call__(self, s: float, t: float) -> float:
        if self.fn is not None:
            return float(self.fn(float(s), float(t)))
        if t >= 0 and float(t).is_integer():
            v = self.C * float(s)
            for _ in range(int(t)):
                v = v * self.g
            return v
        return self.C * float(s) * math.exp(-self.c * float(t))

    def decay_series(self, s: float, length: int) -> np.ndarray:
        """[sigma(s,0), sigma(s,1), ...] by the exact recursion, length terms."""
        out = np.empty(length)
        if length == 0:
            return out
        if self.fn is not None:
            return np.array([self(s, t) for t in range(length)])
        v = self.C * float(s)
        out[0] = v
        for i in range(1, length):
            v = v * self.g
            out[i] = v
        return out


# --- class validation ---

@dataclass
class ClassGrid:
    s_lo: float = 1e-9
    s_hi: float = 1e9
    s_points: int = 60
    t_max: int = 100
    t_step: int = 1
    unbounded_targets: tuple = (1.0, 1e3, 1e6, 1e9, 1e12)
    s_probe_hi: float = 1e300
    decay_eps: tuple = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
    decay_horizon: int = 4096

    def s_grid(self):
        return np.logspace(math.log10(self.s_lo), math.log10(self.s_hi),
                           self.s_points)

    def t_grid(self):
        return np.arange(0, self.t_max + 1, self.t_step)


@dataclass
class ClassCheck:
    axiom: str
    passed: bool
    witness: dict = None


@dataclass
class ClassReport:
    subject: str
    tag: str
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_json(self):
        return {
            "subject": self.subject,
            "tag": self.tag,
            "passed": self.passed,
            "checks": [{"axiom": c.axiom, "passed": c.passed,
                        "witness": c.witness} for c in self.checks],
        }


def _check_strictly_increasing(fn, ss) -> ClassCheck:
    prev_s, prev_v = 0.0, fn(0.0)
    for s in ss:
        v = fn(float(s))
        if not v > prev_v:
            return ClassCheck("strictly_increasing", False,
                              {"s1": prev_s, "s2": float(s), "v1": prev_v,
                               "v2": v, "tie": v == prev_v})
        prev_s, prev_v = float(s), v
    return ClassCheck("strictly_increasing", True)


def _check_unbounded(fn, grid: ClassGrid) -> ClassCheck:
    probes = np.logspace(math.log10(max(grid.s_hi, 1.0)),
                         math.log10(grid.s_probe_hi), 40)
    for target in grid.unbounded_targets:
        if not any(fn(float(s)) > target for s in probes):
            return ClassCheck("unbounded", False,
                              {"target": target, "s_max": float(probes[-1]),
                               "value": fn(float(probes[-1]))})
    return ClassCheck("unbounded", True)


def _check_decay(gain: TimeGain, grid: ClassGrid) -> ClassCheck:
    if gain.geometric is not None:
        C, ratio = gain.geometric
        ok = C >= 0.0 and 0.0 <= ratio < 1.0
        return ClassCheck("decays_to_zero", ok,
                          None if ok else {"C": C, "ratio": ratio,
                                           "note": "analytic (geometric form)"})
    ts = np.arange(0, grid.decay_horizon + 1)
    vals = np.array([gain(t) for t in ts])
    suffix = np.maximum.accumulate(vals[::-1])[::-1]
    for eps in grid.decay_eps:
        if not np.any(suffix <= eps):
            return ClassCheck("decays_to_zero", False,
                              {"eps": eps, "tail_min": float(suffix.min()),
                               "horizon": grid.decay_horizon,
                               "note": "grid estimate"})
    return ClassCheck("decays_to_zero", True)


def validate_class(obj, grid: ClassGrid = None) -> ClassReport:
    """Numeric membership check for KFn / TimeGain / KLEnvelope.

    Pass/fail per axiom with a witness point on every failure.  A failure
    witness remains a failure on any finer grid containing it.
    """
    grid = grid or ClassGrid()
    checks = []
    if isinstance(obj, KFn):
        v0 = obj(0.0)
        checks.append(ClassCheck("zero_at_zero", v0 == 0.0,
                                 None if v0 == 0.0 else {"value": v0}))
        checks.append(_check_strictly_increasing(obj, grid.s_grid()))
        if obj.tag == "Kinf":
            checks.append(_check_unbounded(obj, grid))
        return ClassReport(obj.name, obj.tag, checks)
    if isinstance(obj, TimeGain):
        if obj.decays:
            neg = [(int(t), obj(t)) for t in grid.t_grid() if obj(t) < 0.0]
            checks.append(ClassCheck("non_negative", not neg,
                                     {"t": neg[0][0], "value": neg[0][1]} if neg else None))
            checks.append(_check_decay(obj, grid))
            return ClassReport(obj.name, "decaying", checks)
        bad = [(int(t), obj(t)) for t in grid.t_grid() if not obj(t) > 0.0]
        checks.append(ClassCheck("positive", not bad,
                                 {"t": bad[0][0], "value": bad[0][1]} if bad else None))
        return ClassReport(obj.name, "K+", checks)
    if isinstance(obj, KLEnvelope):
        ts = [0, 1, 2, 5, 10, grid.t_max]
        for t in ts:
            chk = _check_strictly_increasing(lambda s: obj(s, t), grid.s_grid())
            if not chk.passed:
                chk.witness["t"] = t
                checks.append(ClassCheck("class_K_in_s", False, chk.witness))
                break
        else:
            checks.append(ClassCheck("class_K_in_s", True))
        tgrid = grid.t_grid()
        for s in (grid.s_lo, 1.0, grid.s_hi):
            vals = [obj(s, int(t)) for t in tgrid]
            worse = [(int(tgrid[i + 1]), vals[i], vals[i + 1])
                     for i in range(len(vals) - 1) if vals[i + 1] > vals[i]]
            if worse:
                checks.append(ClassCheck("non_increasing_in_t", False,
                                         {"s": float(s), "t": worse[0][0],
                                          "prev": worse[0][1], "next": worse[0][2]}))
                break
        else:
            checks.append(ClassCheck("non_increasing_in_t", True))
        decay_gain = TimeGain(lambda t: obj(1.0, t), "sigma(1,.)", decays=True,
                              geometric=(obj.C, obj.g) if obj.fn is None else None)
        chk = _check_decay(decay_gain, grid)
        checks.append(ClassCheck("decays_to_zero_in_t", chk.passed, chk.witness))
        return ClassReport(obj.name, "KL", checks)
    raise TypeError(f"cannot validate {type(obj).__name__}")


# --- KL envelope fitting ---

@dataclass
class KLFit:
    envelope: KLEnvelope
    C: float
    c: float
    max_slack: float
    witness: dict
    degenerate: bool
    failed: bool
    n_points: int
    notes: list

    @property
    def ok(self):
        return not (self.degenerate or self.failed)

    def to_json(self):
        return {"C": self.C, "c": self.c, "beta": self.envelope.beta.name,
                "max_slack": self.max_slack, "witness": self.witness,
                "degenerate": self.degenerate, "failed": self.failed,
                "n_points": self.n_points, "notes": self.notes}


def _target_norms(traj, target):
    arr = {"Y": traj.Y, "y": traj.y, "x": traj.x}[target]
    return np.array([vecnorm(row) for row in arr])


def fit_kl_envelope(batch: Sequence, target: str = "Y",
                    beta: TimeGain = None) -> KLFit:
    """Fit C, c of a decaying envelope to trajectory output norms.

    Least squares on log(norm / scale) against t - t0 over rows with positive
    norm, with scale = beta(t0) * ||x0||; C is then inflated so the envelope
    dominates every observed point (point-by-point assertable, slack >= 0).
    """
    if not batch:
        raise ValueError("empty batch")
    beta = beta or constant(1.0)
    notes = []
    rows = []  # (traj_index, dt, norm, scale)
    for idx, traj in enumerate(batch):
        norms = _target_norms(traj, target)
        scale = beta(traj.t0) * vecnorm(traj.x0)
        for i in range(len(traj)):
            rows.append((idx, int(traj.t[i] - traj.t0), norms[i], scale))

    fit_pts = [(dt, math.log(norm / scale))
               for _, dt, norm, scale in rows if norm > 0.0 and scale > 0.0]
    if not fit_pts:
        notes.append("all-zero batch: degenerate zero envelope")
        env = KLEnvelope(0.0, 1.0, beta=beta)
        return KLFit(env, 0.0, 1.0, 0.0, None, True, False, 0, notes)

    dts = np.array([p[0] for p in fit_pts], dtype=float)
    logs = np.array([p[1] for p in fit_pts])
    if np.ptp(dts) == 0.0:
        slope, intercept = 0.0, float(np.max(logs))
        notes.append("single time offset: no decay rate identifiable")
    else:
        slope, intercept = np.polyfit(dts, logs, 1)
    c = -float(slope)
    failed = not c > 0.0
    if failed:
        notes.append(f"non-decaying data: fitted c = {c!r} <= 0")

    # inflate C so the envelope's own evaluation dominates each observed row
    base = KLEnvelope(1.0, c, beta=beta)
    ratio_max, n_pts = 0.0, 0
    for _, dt, norm, scale in rows:
        if norm <= 0.0:
            continue
        n_pts += 1
        if scale <= 0.0:
            failed = True
            notes.append("row with zero initial scale but nonzero output")
            continue
        b = base(scale, dt)
        if b > 0.0:
            ratio_max = max(ratio_max, norm / b)
    C = max(math.exp(intercept), ratio_max) * (1.0 + 1e-12)
    env = KLEnvelope(C, c, beta=beta)

    max_slack, min_slack, witness = 0.0, math.inf, None
    for idx, dt, norm, scale in rows:
        bound = env(scale, dt)
        slack = bound - norm
        max_slack = max(max_slack, slack)
        if norm > 0.0 and slack < min_slack:
            min_slack = slack
            witness = {"trajectory": idx, "dt": dt, "norm": norm,
                       "bound": bound, "slack": slack}
    return KLFit(env, C, c, max_slack, witness, False, failed, n_pts, notes)


# --- domination checks (growth hypotheses) ---

@dataclass
class DominationReport:
    passed: bool
    worst_margin: float
    witness: dict
    samples: int
    tol: float

    def to_json(self):
        return {"passed": self.passed, "worst_margin": self.worst_margin,
                "witness": self.witness, "samples": self.samples,
                "tol": self.tol}


def check_domination(sampler: Callable[[float, float], float], zeta: KFn,
                     beta: TimeGain, Ts: Sequence[int] = (0, 1, 2, 5, 10, 20),
                     ss: np.ndarray = None, tol: float = 1e-9) -> DominationReport:
    """Check a(T, s) <= zeta(beta(T) * s) on a (T, s) grid, witness on failure."""
    if ss is None:
        ss = np.logspace(-6, 6, 25)
    worst, witness, count = -math.inf, None, 0
    for T in Ts:
        bT = beta(T)
        for s in ss:
            lhs = float(sampler(T, float(s)))
            rhs = zeta(bT * float(s))
            margin = lhs - rhs
            count += 1
            if margin > worst:
                worst = margin
                witness = {"T": int(T), "s": float(s), "lhs": lhs, "rhs": rhs}
    passed = worst <= tol * (1.0 + abs(witness["rhs"])) if witness else True
    return DominationReport(passed, worst, witness, count, tol)


def sup_f_sampler(sys, cfg: SampleConfig = None, seed: int = 0):
    """Sampled a(T, s) = sup ||f(t,d,x,u)|| over t<=T, d in D, ||x||<=s (||u||<=s).

    A finite under-approximation of the true sup, suitable as the lhs of
    :func:`check_domination`.
    """
    cfg = cfg or SampleConfig(d_grid=9, d_random=16, x_directions=8,
                              x_scales=(1.0, 0.5), u_directions=4)
    rng = np.random.default_rng(seed)
    dcands = d_candidates(sys.d_box, grid=cfg.d_grid, random=cfg.d_random, rng=rng)

    def sampler(T, s):
        ts = np.arange(0, int(T) + 1)
        if ts.shape[0] > cfg.t_cap:
            ts = np.unique(np.linspace(0, int(T), cfg.t_cap).astype(int))
        xs = sphere_points(sys.n, s, cfg.x_directions, cfg.x_scales, rng=0)
        if sys.k > 0:
            us = np.vstack([np.zeros((1, sys.k)),
                            sphere_points(sys.k, s, cfg.u_directions, rng=1)])
        else:
            us = np.zeros((1, 0))
        best = 0.0
        for t in ts:
            for dc in dcands:
                for xc in xs:
                    for uc in us:
                        best = max(best, vecnorm(sys.f_eval(t, dc, xc, uc)))
        return best

    return sampler
