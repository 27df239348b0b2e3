"""Time-varying discrete-time systems with disturbances and inputs.

A system is the tuple (f, H, h, D): state update ``x(t+1) = f(t, d(t), x(t),
u(t))`` with ``d(t)`` ranging over a compact box D, stabilized output
``Y(t) = H(t, x(t))`` and measured output ``y(t) = h(t, x(t))``.  Unforced
systems have input dimension k = 0.  All operations here are pure; systems,
policies with fixed seeds and trajectories are deterministic and replayable.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np

from .expr import Dims, Expr, parse_expression

__all__ = [
    "SystemDef", "Trajectory", "SampleConfig", "ReachableBound",
    "DisturbancePolicy", "ConstantDisturbance", "RandomDisturbance",
    "GreedyDisturbance", "InputPolicy", "ZeroInput", "ConstantInput",
    "SequenceInput", "StateFeedback",
    "step", "simulate", "closed_loop", "reachable_bound",
    "parse_system_file", "vecnorm", "d_candidates", "sphere_points",
    "EquilibriumWarning", "SystemFileError",
]


class SystemFileError(ValueError):
    """Malformed system definition document."""


class EquilibriumWarning(UserWarning):
    """Zero-equilibrium spot check failed; carries a witness in the message."""


def vecnorm(v) -> float:
    """Euclidean norm with an exact fast path for scalars."""
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] == 1:
        return abs(float(v[0]))
    return float(np.linalg.norm(v))


def _as_vector_map(exprs, dims: Dims, what: str):
    """Compile a list of expression strings/ASTs into fn(t, x, d, u) -> ndarray."""
    parsed = []
    for i, e in enumerate(exprs):
        if isinstance(e, str):
            e = parse_expression(e, dims)
        elif not isinstance(e, Expr):
            raise SystemFileError(f"{what}[{i}] is neither a string nor an Expr")
        parsed.append(e)
    fns = [e.compiled() for e in parsed]
    empty = {}

    def evaluate(t, x, d, u):
        return np.array([fn(t, x, d, u, empty) for fn in fns], dtype=float)

    return evaluate, tuple(parsed)


@dataclass
class SystemDef:
    """System (f, H, h, D).  Treated as immutable after construction.

    ``f``, ``H`` and ``h`` may be lists of expression strings (parsed against
    the declared dimensions) or native callables ``f(t, d, x, u)`` /
    ``H(t, x)`` / ``h(t, x)`` returning vectors; native output maps require
    ``p_Y`` / ``p_y``.  ``h=None`` reuses H as the measured output.
    """

    n: int
    m: int
    k: int
    d_box: np.ndarray
    f: object
    H: object
    h: object = None
    name: str = ""
    p_Y: int = None
    p_y: int = None

    def __post_init__(self):
        box = np.asarray(self.d_box, dtype=float).reshape(self.m, 2)
        if not np.all(np.isfinite(box)):
            raise SystemFileError("d_box bounds must be finite")
        if np.any(box[:, 0] > box[:, 1]):
            raise SystemFileError("d_box must satisfy lo <= hi componentwise")
        box.flags.writeable = False
        self.d_box = box

        dims = Dims(n=self.n, m=self.m, k=self.k)
        self.f_exprs = self.H_exprs = self.h_exprs = None
        if callable(self.f):
            native = self.f  # native signature f(t, d, x, u); internal is (t, x, d, u)
            self._f = lambda t, x, d, u: np.asarray(
                native(t, d, x, u), dtype=float).reshape(-1)
        else:
            if len(self.f) != self.n:
                raise SystemFileError(
                    f"f has {len(self.f)} components, state dimension is {self.n}")
            self._f, self.f_exprs = _as_vector_map(self.f, dims, "f")

        out_dims = Dims(n=self.n)  # output maps depend on (t, x) only
        if callable(self.H):
            if self.p_Y is None:
                raise SystemFileError("p_Y required for a native output map H")
            hmap = self.H
            self._H = lambda t, x: np.asarray(hmap(t, x), dtype=float).reshape(-1)
        else:
            Hfn, self.H_exprs = _as_vector_map(self.H, out_dims, "H")
            self._H = lambda t, x, _fn=Hfn: _fn(t, x, _EMPTY, _EMPTY)
            self.p_Y = len(self.H_exprs)

        if self.h is None:
            self._h = self._H
            self.h_exprs = self.H_exprs
            self.p_y = self.p_Y
        elif callable(self.h):
            if self.p_y is None:
                raise SystemFileError("p_y required for a native output map h")
            hm = self.h
            self._h = lambda t, x: np.asarray(hm(t, x), dtype=float).reshape(-1)
        else:
            hfn, self.h_exprs = _as_vector_map(self.h, out_dims, "h")
            self._h = lambda t, x, _fn=hfn: _fn(t, x, _EMPTY, _EMPTY)
            self.p_y = len(self.h_exprs)
        if self.h_eval(0, np.zeros(self.n)).shape[0] != self.p_y:
            raise SystemFileError("h output dimension disagrees with p_y")
        if self.H_eval(0, np.zeros(self.n)).shape[0] != self.p_Y:
            raise SystemFileError("H output dimension disagrees with p_Y")

    # -- evaluation --

    def f_eval(self, t, d, x, u=None) -> np.ndarray:
        if u is None:
            u = _EMPTY
        return np.asarray(self._f(float(t), np.asarray(x, dtype=float),
                                  np.asarray(d, dtype=float),
                                  np.asarray(u, dtype=float)), dtype=float)

    def H_eval(self, t, x) -> np.ndarray:
        return self._H(float(t), np.asarray(x, dtype=float))

    def h_eval(self, t, x) -> np.ndarray:
        return self._h(float(t), np.asarray(x, dtype=float))

    def d_mid(self) -> np.ndarray:
        return (self.d_box[:, 0] + self.d_box[:, 1]) / 2.0

    def check_equilibrium(self, ts=range(21)) -> list:
        """Spot-check f(t,d,0,0)=0, H(t,0)=0, h(t,0)=0 at box corners.

        Returns witness dicts (empty when the checks hold on the sample).
        """
        witnesses = []
        zero_x = np.zeros(self.n)
        zero_u = np.zeros(self.k)
        corners = _box_corners(self.d_box)
        for t in ts:
            for dcorner in corners:
                val = self.f_eval(t, dcorner, zero_x, zero_u)
                if np.any(val != 0.0):
                    witnesses.append({"map": "f", "t": int(t),
                                      "d": dcorner.tolist(), "value": val.tolist()})
            for mapname, fn in (("H", self.H_eval), ("h", self.h_eval)):
                val = fn(t, zero_x)
                if np.any(val != 0.0):
                    witnesses.append({"map": mapname, "t": int(t),
                                      "value": val.tolist()})
        return witnesses


_EMPTY = np.zeros(0)


def _box_corners(box: np.ndarray, cap: int = 256) -> np.ndarray:
    m = box.shape[0]
    if m == 0:
        return np.zeros((1, 0))
    if 2 ** m > cap:
        m_full = int(np.log2(cap))
        corners = _box_corners(box[:m_full], cap)
        mid = np.tile((box[m_full:, 0] + box[m_full:, 1]) / 2.0, (corners.shape[0], 1))
        return np.hstack([corners, mid])
    grid = np.meshgrid(*[box[i] for i in range(m)], indexing="ij")
    return np.stack([g.reshape(-1) for g in grid], axis=1)


def d_candidates(d_box, grid: int = 9, random: int = 0, rng=None) -> np.ndarray:
    """Deterministic corner + per-dimension grid candidates, plus random fills.

    This is the sampled stand-in for suprema over the disturbance set: corners
    catch bilinear worst cases, the grid interior extrema, random points the
    rest.  Always a finite under-approximation of the true sup.
    """
    box = np.asarray(d_box, dtype=float).reshape(-1, 2)
    m = box.shape[0]
    if m == 0:
        return np.zeros((1, 0))
    pieces = [_box_corners(box)]
    if grid > 0:
        if m == 1:
            pieces.append(np.linspace(box[0, 0], box[0, 1], grid).reshape(-1, 1))
        else:
            axes = [np.linspace(lo, hi, grid) for lo, hi in box]
            total = grid ** m
            if total <= 4096:
                mesh = np.meshgrid(*axes, indexing="ij")
                pieces.append(np.stack([g.reshape(-1) for g in mesh], axis=1))
            else:  # axis sweeps through the midpoint instead of a full product
                mid = (box[:, 0] + box[:, 1]) / 2.0
                for i in range(m):
                    sweep = np.tile(mid, (grid, 1))
                    sweep[:, i] = axes[i]
                    pieces.append(sweep)
    if random > 0:
        rng = np.random.default_rng(rng)
        pieces.append(rng.uniform(box[:, 0], box[:, 1], size=(random, m)))
    cands = np.vstack(pieces)
    return np.unique(cands, axis=0)


def sphere_points(dim: int, radius: float, directions: int = 64,
                  scales=(1.0,), rng=None) -> np.ndarray:
    """Points with norm radius*scale: signed axis vectors plus random directions."""
    if dim == 0:
        return np.zeros((1, 0))
    if radius == 0.0:
        return np.zeros((1, dim))
    axes = np.vstack([np.eye(dim), -np.eye(dim)])
    dirs = [axes]
    if directions > 0:
        rng = np.random.default_rng(rng)
        g = rng.standard_normal((directions, dim))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        dirs.append(g / norms)
    dirs = np.vstack(dirs)
    return np.vstack([dirs * (radius * s) for s in scales])


@dataclass
class SampleConfig:
    """Sampling effort for the sup-estimating operations."""

    d_grid: int = 9
    d_random: int = 256
    x_directions: int = 512
    x_scales: tuple = (1.0,)
    u_directions: int = 16
    t_cap: int = 64
    seed: int = 42


# --- policies ---

class DisturbancePolicy:
    def reset(self, seed=None):
        pass

    def __call__(self, sys: SystemDef, t: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def descriptor(self) -> str:
        return type(self).__name__


class ConstantDisturbance(DisturbancePolicy):
    def __init__(self, value):
        self.value = np.asarray(value, dtype=float).reshape(-1)

    def __call__(self, sys, t, x, u):
        return self.value

    def descriptor(self):
        return f"constant(d={self.value.tolist()})"


class RandomDisturbance(DisturbancePolicy):
    """Seeded per-step sampler: box corners, interior points, or a mix."""

    def __init__(self, seed=0, mode="interior"):
        if mode not in ("interior", "corner", "mixed"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.seed = seed
        self.reset(seed)

    def reset(self, seed=None):
        if seed is not None:
            self.seed = seed
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, sys, t, x, u):
        box = sys.d_box
        corner = self.mode == "corner" or (
            self.mode == "mixed" and self.rng.random() < 0.5)
        if corner:
            pick = self.rng.integers(0, 2, size=sys.m)
            return box[np.arange(sys.m), pick]
        return self.rng.uniform(box[:, 0], box[:, 1])

    def descriptor(self):
        return f"random(mode={self.mode}, seed={self.seed})"


class GreedyDisturbance(DisturbancePolicy):
    """Per-step adversary: picks the candidate d maximizing a successor score.

    The default objective is the stabilized-output norm at the successor state;
    pass ``objective(t_next, x_next) -> float`` (e.g. a Lyapunov candidate) for
    other searches.  Candidates are box corners plus a small per-dimension grid,
    so this is an explicit lower bound on the true adversary.
    """

    def __init__(self, objective=None, grid: int = 5, random: int = 0, seed=0):
        self.objective = objective
        self.grid = grid
        self.random = random
        self.seed = seed
        self.reset(seed)
        self._cands = None

    def reset(self, seed=None):
        if seed is not None:
            self.seed = seed
        self.rng = np.random.default_rng(self.seed)
        self._cands = None

    def __call__(self, sys, t, x, u):
        if self._cands is None:
            self._cands = d_candidates(sys.d_box, grid=self.grid, random=0)
        cands = self._cands
        if self.random > 0:
            extra = self.rng.uniform(sys.d_box[:, 0], sys.d_box[:, 1],
                                     size=(self.random, sys.m))
            cands = np.vstack([cands, extra])
        t = float(t)
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        best, best_score = cands[0], -np.inf
        for dcand in cands:
            nxt = sys._f(t, x, dcand, u)
            score = (self.objective(t + 1, nxt) if self.objective
                     else vecnorm(sys._H(t + 1.0, nxt)))
            if score > best_score:
                best, best_score = dcand, score
        return best

    def descriptor(self):
        kind = "custom" if self.objective else "output-seeking"
        return f"greedy({kind}, grid={self.grid}, seed={self.seed})"


class InputPolicy:
    def reset(self, seed=None):
        pass

    def __call__(self, sys: SystemDef, t: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def advance(self, t, y, u):
        """Post-step hook for stateful (dynamic feedback) policies."""

    def descriptor(self) -> str:
        return type(self).__name__


class ZeroInput(InputPolicy):
    def __call__(self, sys, t, x):
        return np.zeros(sys.k)

    def descriptor(self):
        return "zero"


class ConstantInput(InputPolicy):
    def __init__(self, value):
        self.value = np.asarray(value, dtype=float).reshape(-1)

    def __call__(self, sys, t, x):
        return self.value

    def descriptor(self):
        return f"constant(u={self.value.tolist()})"


class SequenceInput(InputPolicy):
    """Plays a fixed sequence indexed by t - t0 (zero once exhausted)."""

    def __init__(self, values, t0=0):
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values.reshape(-1, 1)
        self.t0 = t0

    def __call__(self, sys, t, x):
        i = int(t) - self.t0
        if 0 <= i < self.values.shape[0]:
            return self.values[i]
        return np.zeros(sys.k)

    def descriptor(self):
        return f"sequence(len={self.values.shape[0]})"


class StateFeedback(InputPolicy):
    """u = k(t, x) from a native callable or expression list over (t, x1..xn)."""

    def __init__(self, fb, n=None, k=None, name="k"):
        self.name = name
        if callable(fb):
            self._fn = lambda t, x: np.asarray(fb(t, x), dtype=float).reshape(-1)
        else:
            fn, self.exprs = _as_vector_map(list(fb), Dims(n=n), name)
            self._fn = lambda t, x: fn(t, x, _EMPTY, _EMPTY)

    def __call__(self, sys, t, x):
        return self._fn(float(t), np.asarray(x, dtype=float))

    def descriptor(self):
        return f"state-feedback({self.name})"


# --- trajectories ---

@dataclass
class Trajectory:
    """Time-indexed rows (t, x, d, u, Y, y), plus controller state if present.

    Consecutive rows satisfy x(t+1) = f(t, d(t), x(t), u(t)) exactly as
    evaluated; the final row still records the policies' (d, u) picks.
    """

    t0: int
    t: np.ndarray
    x: np.ndarray
    d: np.ndarray
    u: np.ndarray
    Y: np.ndarray
    y: np.ndarray
    w: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.shape[0]

    @property
    def x0(self):
        return self.x[0]

    def write_csv(self, path):
        cols = [("x", self.x), ("d", self.d), ("u", self.u),
                ("Y", self.Y), ("y", self.y)]
        if self.w is not None:
            cols.append(("w", self.w))
        header = ["t"]
        for name, arr in cols:
            header.extend(f"{name}{i + 1}" for i in range(arr.shape[1]))
        lines = [",".join(header)]
        for i in range(len(self)):
            row = [str(int(self.t[i]))]
            for _, arr in cols:
                row.extend(f"{v:.17g}" for v in arr[i])
            lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read_csv(cls, path):
        lines = Path(path).read_text().strip().split("\n")
        header = lines[0].split(",")
        counts = {"x": 0, "d": 0, "u": 0, "Y": 0, "y": 0, "w": 0}
        for name in header[1:]:
            counts[name.rstrip("0123456789")] += 1
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        ts = data[:, 0].astype(int)
        out, ofs = {}, 1
        for key in ("x", "d", "u", "Y", "y", "w"):
            out[key] = data[:, ofs:ofs + counts[key]]
            ofs += counts[key]
        w = out["w"] if counts["w"] else None
        return cls(t0=int(ts[0]), t=ts, x=out["x"], d=out["d"], u=out["u"],
                   Y=out["Y"], y=out["y"], w=w)


def step(sys: SystemDef, t: int, x, d, u=None) -> np.ndarray:
    """One transition x(t+1) = f(t, d, x, u).  Pure.

    ``u`` may be omitted only for unforced systems (k = 0).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    d = np.asarray(d, dtype=float).reshape(-1)
    u = np.zeros(0) if u is None else np.asarray(u, dtype=float).reshape(-1)
    if x.shape[0] != sys.n or d.shape[0] != sys.m or u.shape[0] != sys.k:
        raise ValueError(
            f"dimension mismatch: got (x={x.shape[0]}, d={d.shape[0]}, "
            f"u={u.shape[0]}), system is (n={sys.n}, m={sys.m}, k={sys.k})")
    if np.any(d < sys.d_box[:, 0]) or np.any(d > sys.d_box[:, 1]):
        raise ValueError(f"disturbance {d.tolist()} outside the declared box")
    return sys.f_eval(t, d, x, u)


def simulate(sys: SystemDef, t0: int, x0, dpol: DisturbancePolicy = None,
             upol: InputPolicy = None, horizon: int = 60,
             meta: dict = None) -> Trajectory:
    """Roll the system forward for ``horizon`` steps (horizon+1 rows)."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    dpol = dpol if dpol is not None else ConstantDisturbance(sys.d_mid())
    upol = upol if upol is not None else ZeroInput()
    N = horizon + 1
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.shape[0] != sys.n:
        raise ValueError(f"x0 has dimension {x.shape[0]}, expected {sys.n}")
    T = np.arange(t0, t0 + N)
    X = np.empty((N, sys.n))
    D = np.empty((N, sys.m))
    U = np.empty((N, sys.k))
    Yv = np.empty((N, sys.p_Y))
    yv = np.empty((N, sys.p_y))
    f_, H_, h_ = sys._f, sys._H, sys._h
    for i, t in enumerate(T):
        tf = float(t)
        X[i] = x
        Yv[i] = H_(tf, x)
        yv[i] = h_(tf, x)
        u = np.asarray(upol(sys, t, x), dtype=float).reshape(-1)
        d = np.asarray(dpol(sys, t, x, u), dtype=float).reshape(-1)
        U[i], D[i] = u, d
        if i + 1 < N:
            x = f_(tf, x, d, u)
            upol.advance(t, yv[i], u)
    info = {"d_policy": dpol.descriptor(), "u_policy": upol.descriptor()}
    if meta:
        info.update(meta)
    return Trajectory(t0=t0, t=T, x=X, d=D, u=U, Y=Yv, y=yv, meta=info)


def closed_loop(sys: SystemDef, fb) -> SystemDef:
    """Absorb a state feedback u = k(t, x) into the dynamics (k becomes 0).

    On an unforced system any feedback is vacuous and the system is returned
    unchanged.  The zero equilibrium is preserved iff f(t,d,0,k(t,0)) = 0;
    this is spot-checked and a warning is emitted otherwise.
    """
    if sys.k == 0:
        return sys
    pol = fb if isinstance(fb, InputPolicy) else StateFeedback(fb, n=sys.n)

    def f_cl(t, d, x, u):
        return sys.f_eval(t, d, x, pol(sys, t, x))

    out = SystemDef(n=sys.n, m=sys.m, k=0, d_box=sys.d_box, f=f_cl,
                    H=sys._H, h=sys._h, name=f"{sys.name}|{pol.descriptor()}",
                    p_Y=sys.p_Y, p_y=sys.p_y)
    bad = out.check_equilibrium(ts=range(0, 21, 5))
    if bad:
        warnings.warn(f"feedback moves the zero equilibrium: {bad[0]}",
                      EquilibriumWarning, stacklevel=2)
    return out


@dataclass
class ReachableBound:
    """Radius estimates rho(0..T) for the iterated-image reachability recursion.

    rho(k) is the max of ||f|| over sampled (t <= 2T, d, ||x|| <= rho(k-1),
    ||u|| <= r); a sampled under-approximation of the true sup that still
    upper-bounds every sampled trajectory.
    """

    r: float
    T: int
    rho: np.ndarray
    witnesses: list
    label: str = "sampled bound"


def reachable_bound(sys: SystemDef, r: float, T: int,
                    sample_cfg: SampleConfig = None) -> ReachableBound:
    if r < 0 or T < 0:
        raise ValueError("require r >= 0 and T >= 0")
    cfg = sample_cfg or SampleConfig(d_random=32, x_directions=64, u_directions=8)
    rng = np.random.default_rng(cfg.seed)
    ts = np.arange(0, 2 * T + 1)
    if ts.shape[0] > cfg.t_cap:
        ts = np.unique(np.linspace(0, 2 * T, cfg.t_cap).astype(int))
    dcands = d_candidates(sys.d_box, grid=cfg.d_grid, random=cfg.d_random, rng=rng)
    if sys.k > 0:
        ucands = np.vstack([np.zeros((1, sys.k)),
                            sphere_points(sys.k, r, cfg.u_directions,
                                          scales=(1.0, 0.5), rng=rng)])
    else:
        ucands = np.zeros((1, 0))

    rho = np.empty(T + 1)
    rho[0] = r
    witnesses = [None]
    for kstep in range(1, T + 1):
        xs = sphere_points(sys.n, rho[kstep - 1], cfg.x_directions,
                           scales=cfg.x_scales, rng=rng)
        best, wit = 0.0, None
        for t in ts:
            for dc in dcands:
                for xc in xs:
                    for uc in ucands:
                        val = vecnorm(sys.f_eval(t, dc, xc, uc))
                        if val > best:
                            best = val
                            wit = {"t": int(t), "d": dc.tolist(),
                                   "x": xc.tolist(), "u": uc.tolist(),
                                   "norm": val}
        rho[kstep] = best
        witnesses.append(wit)
    return ReachableBound(r=r, T=T, rho=rho, witnesses=witnesses)


def parse_system_file(doc) -> SystemDef:
    """Build a SystemDef from a JSON document (text, mapping or path).

    Required keys: n, m, k, d_box, f, H.  Optional: h (defaults to H), name.
    The zero-equilibrium property is spot-checked at t in 0..20 and box
    corners; failures are reported as :class:`EquilibriumWarning` witnesses.
    """
    if isinstance(doc, (str, Path)) and "{" not in str(doc):
        doc = Path(doc).read_text()
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as ex:
            raise SystemFileError(f"not valid JSON: {ex}") from None
    if not isinstance(doc, dict):
        raise SystemFileError("system document must be a JSON object")
    missing = [key for key in ("n", "m", "k", "d_box", "f", "H") if key not in doc]
    if missing:
        raise SystemFileError(f"missing keys: {', '.join(missing)}")
    n, m, k = (int(doc[key]) for key in ("n", "m", "k"))
    d_box = doc["d_box"]
    if len(d_box) != m:
        raise SystemFileError(f"d_box has {len(d_box)} rows, expected m={m}")
    for name, want in (("f", n),):
        if len(doc[name]) != want:
            raise SystemFileError(
                f"{name} has {len(doc[name])} components, expected {want}")
    sys_ = SystemDef(n=n, m=m, k=k, d_box=d_box, f=list(doc["f"]),
                     H=list(doc["H"]),
                     h=list(doc["h"]) if doc.get("h") is not None else None,
                     name=str(doc.get("name", "")))
    bad = sys_.check_equilibrium()
    if bad:
        warnings.warn(
            f"zero-equilibrium spot check failed for '{sys_.name}': {bad[0]}",
            EquilibriumWarning, stacklevel=2)
    return sys_
