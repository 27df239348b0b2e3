"""Dead-beat output-feedback synthesis via delayed output/input windows.

A function k(t, x) of the state is reconstructible from a length-p window of
measured outputs and applied inputs when a reconstruction map Psi matches
k(t+p, F_p(t, x, d-window, u-window)) for every disturbance realization.  The
delay-chain controller stores the last p outputs and inputs in shift
registers and applies Psi; its control action coincides with the state
feedback after p steps regardless of the register initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .certify import (FAIL, PASS, CertificateReport, _verdict,
                      _worst_verdict)
from .expr import Dims, compile_expression
from .system import (ConstantDisturbance, DisturbancePolicy, StateFeedback,
                     SystemDef, Trajectory)

__all__ = [
    "ObservabilityChain", "ChainResult", "iterate_maps",
    "ReconstructionMap", "check_reconstruction",
    "DelayChainController", "synthesize_delay_controller",
    "run_output_feedback", "CoincidenceReport", "build_extended_system",
]


@dataclass
class ObservabilityChain:
    """Iterated dynamics F_i and delayed outputs y_i over windows of length p."""

    sys: SystemDef
    p: int

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("chain length p must be >= 1")


@dataclass
class ChainResult:
    F: list          # F_1 .. F_p
    y_hist: list     # y_0 .. y_{p-1}
    y_p: np.ndarray

    @property
    def F_p(self):
        return self.F[-1]


def iterate_maps(chain: ObservabilityChain, t: int, x, d_seq, u_seq) -> ChainResult:
    """Evaluate the chain: F_0 = x, F_i = f(t+i-1, d_{i-1}, F_{i-1}, u_{i-1}).

    Exactly p forward step calls; y_i = h(t+i, F_i).
    """
    sys, p = chain.sys, chain.p
    d_seq = np.asarray(d_seq, dtype=float).reshape(p, sys.m)
    u_seq = np.asarray(u_seq, dtype=float).reshape(p, sys.k)
    if np.any(d_seq < sys.d_box[:, 0]) or np.any(d_seq > sys.d_box[:, 1]):
        raise ValueError("disturbance window leaves the declared box")
    state = np.asarray(x, dtype=float).reshape(sys.n)
    Fs, ys = [], [sys.h_eval(t, state)]
    for i in range(p):
        state = sys.f_eval(t + i, d_seq[i], state, u_seq[i])
        Fs.append(state)
        ys.append(sys.h_eval(t + i + 1, state))
    return ChainResult(F=Fs, y_hist=ys[:p], y_p=ys[p])


class ReconstructionMap:
    """Psi(t, y_p, y-window, u-window) -> input-space vector.

    Either a native callable ``psi(t, y_p, y_hist, u_hist)`` (vectors /
    sequences of vectors) or, for scalar measured output and scalar input, an
    expression over ``t``, ``y0..y<p>`` (``y<p>`` is the current output) and
    ``u0..u<p-1>``.
    """

    def __init__(self, psi, p: int, out_dim: int = 1, name: str = None):
        if p < 1:
            raise ValueError("p must be >= 1")
        self.p = p
        self.out_dim = out_dim
        self.text = None
        if callable(psi):
            self._psi = psi
            self.name = name or getattr(psi, "__name__", "psi")
        else:
            aux = frozenset({f"y{i}" for i in range(p + 1)}
                            | {f"u{i}" for i in range(p)})
            fn = compile_expression(psi, Dims(aux=aux))
            empty = np.zeros(0)

            def from_expr(t, y_p, y_hist, u_hist):
                env = {f"y{i}": float(np.asarray(y_hist[i]).reshape(-1)[0])
                       for i in range(p)}
                env[f"y{p}"] = float(np.asarray(y_p).reshape(-1)[0])
                env.update({f"u{i}": float(np.asarray(u_hist[i]).reshape(-1)[0])
                            for i in range(p)})
                return np.array([fn(float(t), empty, empty, empty, env)])

            self._psi = from_expr
            self.text = psi
            self.name = name or psi

    def __call__(self, t, y_p, y_hist, u_hist) -> np.ndarray:
        return np.asarray(self._psi(float(t), y_p, y_hist, u_hist),
                          dtype=float).reshape(-1)


def _as_state_fn(k_fn, n):
    if isinstance(k_fn, StateFeedback):
        return lambda t, x: k_fn(None, t, x)
    if callable(k_fn):
        return lambda t, x: np.asarray(k_fn(t, x), dtype=float).reshape(-1)
    fb = StateFeedback(list(k_fn), n=n)
    return lambda t, x: fb(None, t, x)


def check_reconstruction(chain: ObservabilityChain, k_fn,
                         psi: ReconstructionMap, n_samples: int = 1000,
                         ts=range(0, 11), x_radius: float = 5.0,
                         u_radius: float = 5.0, seed: int = 0,
                         tol: float = 0.0) -> CertificateReport:
    """Sampled check of k(t+p, F_p(...)) == Psi(t+p, y_p, y-window, u-window).

    A pass is "no violation found at n_samples samples", not a proof.
    """
    sys, p = chain.sys, chain.p
    target = _as_state_fn(k_fn, sys.n)
    rng = np.random.default_rng(seed)
    ts = list(ts)
    worst, wit = -math.inf, None
    # deterministic zero-window spots first: they pin the normalization
    # k(t+p, 0) = Psi(t+p, 0, 0, 0)
    spots = [(int(t), np.zeros(sys.n), np.tile(sys.d_mid(), (p, 1)),
              np.zeros((p, sys.k))) for t in ts]
    for _ in range(max(n_samples - len(spots), 0)):
        t = int(ts[rng.integers(0, len(ts))])
        x = rng.uniform(-x_radius, x_radius, size=sys.n)
        d_seq = rng.uniform(sys.d_box[:, 0], sys.d_box[:, 1], size=(p, sys.m))
        u_seq = rng.uniform(-u_radius, u_radius, size=(p, sys.k))
        spots.append((t, x, d_seq, u_seq))
    for t, x, d_seq, u_seq in spots:
        res = iterate_maps(chain, t, x, d_seq, u_seq)
        lhs = target(t + p, res.F_p)
        rhs = psi(t + p, res.y_p, res.y_hist, [u_seq[i] for i in range(p)])
        err = float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
        if err > worst:
            worst = err
            wit = {"t": t, "x": x.tolist(), "d_seq": d_seq.tolist(),
                   "u_seq": u_seq.tolist(), "lhs": lhs.tolist(),
                   "rhs": rhs.tolist()}
    scale = max(abs(v) for v in wit["rhs"]) if wit["rhs"] else 0.0
    return CertificateReport("reconstruction", _verdict(worst, scale, tol),
                             worst, wit, n_samples, tol)


@dataclass
class DelayChainController:
    """Shift-register dynamic feedback: state w holds the last p outputs and
    inputs; the applied input is Psi over the current output and the
    retracted, time-reversed window.  Slots a particular Psi never reads are
    still carried (fidelity to the register form over minimality).
    """

    p: int
    p_y: int
    k: int
    psi: ReconstructionMap
    retraction: Callable = None  # None = identity (full output-value set)
    w0: np.ndarray = None

    def __post_init__(self):
        if self.w0 is None:
            self.w0 = np.zeros(self.state_dim)
        self.w0 = np.asarray(self.w0, dtype=float).reshape(self.state_dim)

    @property
    def state_dim(self):
        return self.p * (self.p_y + self.k)

    def initial_state(self, w0=None) -> np.ndarray:
        if w0 is None:
            return self.w0.copy()
        w0 = np.asarray(w0, dtype=float).reshape(-1)
        if w0.size == 1 and self.state_dim > 1:
            return np.full(self.state_dim, w0[0])
        return w0.reshape(self.state_dim).copy()

    def _blocks(self, w):
        p, py, k = self.p, self.p_y, self.k
        ys = [w[i * py:(i + 1) * py] for i in range(p)]
        us = [w[p * py + i * k:p * py + (i + 1) * k] for i in range(p)]
        return ys, us

    def window(self, w):
        """Retracted, oldest-first (y-window, u-window) as Psi consumes them."""
        ys, us = self._blocks(w)
        a = self.retraction or (lambda y: y)
        y_hist = [np.asarray(a(ys[self.p - 1 - j]), dtype=float).reshape(-1)
                  for j in range(self.p)]
        u_hist = [us[self.p - 1 - j] for j in range(self.p)]
        return y_hist, u_hist

    def output(self, t, y, w) -> np.ndarray:
        y_hist, u_hist = self.window(w)
        return self.psi(t, np.asarray(y, dtype=float).reshape(-1), y_hist, u_hist)

    def advance(self, w, y, u) -> np.ndarray:
        """Pure shift/record: w_1 <- y, w_i <- w_{i-1}; same for the u block."""
        ys, us = self._blocks(w)
        ys = [np.asarray(y, dtype=float).reshape(-1)] + ys[:-1]
        us = [np.asarray(u, dtype=float).reshape(-1)] + us[:-1]
        return np.concatenate(ys + us)

    def descriptor(self):
        return f"delay-chain(p={self.p}, psi={self.psi.name})"

    def to_json(self):
        return {"p": self.p,
                "psi": self.psi.text if self.psi.text else self.psi.name,
                "retraction": "identity" if self.retraction is None else
                getattr(self.retraction, "__name__", "custom"),
                "w0": self.w0.tolist()}


def synthesize_delay_controller(psi: ReconstructionMap, p: int = None,
                                retraction=None, p_y: int = 1,
                                k: int = 1, w0=None) -> DelayChainController:
    p = p if p is not None else psi.p
    if p != psi.p:
        raise ValueError(f"chain length {p} != reconstruction window {psi.p}")
    ctrl = DelayChainController(p=p, p_y=p_y, k=k, psi=psi,
                                retraction=retraction)
    if w0 is not None:
        ctrl.w0 = ctrl.initial_state(w0)
    return ctrl


@dataclass
class CoincidenceReport:
    p: int
    from_t: int
    history_exact: bool
    history_witness: dict
    coincidence_max_err: float
    coincidence_witness: dict
    tol: float
    verdict: str = ""
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return self.verdict != FAIL

    def to_json(self):
        return {"check": "output-feedback-coincidence", "verdict": self.verdict,
                "p": self.p, "coincident_from": self.from_t,
                "history_exact": self.history_exact,
                "history_witness": self.history_witness,
                "max_err": self.coincidence_max_err,
                "witness": self.coincidence_witness, "tol": self.tol,
                "notes": self.notes}


def run_output_feedback(sys: SystemDef, ctrl: DelayChainController, t0: int,
                        x0, w0=None, dpol: DisturbancePolicy = None,
                        horizon: int = 40, reference_k=None,
                        tol: float = 1e-12):
    """Closed loop of the plant with the delay-chain controller.

    Returns the trajectory (with register columns) and a report verifying the
    register history w_i(t) = y(t-i), w_{p+i}(t) = u(t-i) exactly for
    t >= t0 + p, and |u(t) - k(t, x(t))| <= tol*(1 + |k|) there when a
    reference state feedback is supplied.  Rows before t0 + p are the
    register-filling transient; any w0 is allowed.
    """
    dpol = dpol if dpol is not None else ConstantDisturbance(sys.d_mid())
    N = horizon + 1
    x = np.asarray(x0, dtype=float).reshape(sys.n)
    w = ctrl.initial_state(w0)
    T = np.arange(t0, t0 + N)
    X = np.empty((N, sys.n))
    D = np.empty((N, sys.m))
    U = np.empty((N, sys.k))
    Yv = np.empty((N, sys.p_Y))
    yv = np.empty((N, sys.p_y))
    W = np.empty((N, ctrl.state_dim))
    for i, t in enumerate(T):
        X[i], W[i] = x, w
        Yv[i] = sys.H_eval(t, x)
        yv[i] = sys.h_eval(t, x)
        u = ctrl.output(t, yv[i], w)
        U[i] = u
        D[i] = dpol(sys, t, x, u)
        if i + 1 < N:
            x = sys.f_eval(t, D[i], x, u)
            w = ctrl.advance(w, yv[i], u)
    traj = Trajectory(t0=t0, t=T, x=X, d=D, u=U, Y=Yv, y=yv, w=W,
                      meta={"d_policy": dpol.descriptor(),
                            "controller": ctrl.descriptor()})

    p, py, k = ctrl.p, ctrl.p_y, ctrl.k
    history_exact, hist_wit = True, None
    for i in range(p, N):
        for j in range(1, p + 1):
            yslot = W[i, (j - 1) * py:j * py]
            uslot = W[i, p * py + (j - 1) * k:p * py + j * k]
            if not (np.array_equal(yslot, yv[i - j])
                    and np.array_equal(uslot, U[i - j])):
                history_exact = False
                hist_wit = {"t": int(T[i]), "slot": j,
                            "w_y": yslot.tolist(), "y": yv[i - j].tolist(),
                            "w_u": uslot.tolist(), "u": U[i - j].tolist()}
                break
        if not history_exact:
            break

    max_err, co_wit = 0.0, None
    if reference_k is not None:
        ref = _as_state_fn(reference_k, sys.n)
        for i in range(p, N):
            want = ref(T[i], X[i])
            err = float(np.max(np.abs(U[i] - want))) if want.size else 0.0
            bound = tol * (1.0 + float(np.max(np.abs(want))) if want.size else 1.0)
            if err > max_err:
                max_err = err
                co_wit = {"t": int(T[i]), "u": U[i].tolist(),
                          "k_ref": want.tolist(), "err": err, "bound": bound}
    scale = (max(abs(v) for v in co_wit["k_ref"]) if co_wit else 0.0)
    verdict = PASS if history_exact else FAIL
    if reference_k is not None:
        verdict = _worst_verdict(verdict, _verdict(max_err, scale, tol))
    report = CoincidenceReport(
        p=p, from_t=t0 + p, history_exact=history_exact,
        history_witness=hist_wit, coincidence_max_err=max_err,
        coincidence_witness=co_wit, tol=tol, verdict=verdict,
        notes=[f"rows [{t0}, {t0 + p}) are the register-filling transient"])
    return traj, report



def build_extended_system(sys: SystemDef, w_dim: int) -> SystemDef:
    """Append an integrator block: state (x, w), input (u, v), w(t+1) = v.

    The measured output stacks (h(t, x), w); the stabilized output stays
    H(t, x).  The x-component of solutions does not depend on v.
    """
    if w_dim < 1:
        raise ValueError("w_dim must be >= 1")
    n, k = sys.n, sys.k

    def f_ext(t, d, s, uv):
        x, u, v = s[:n], uv[:k], uv[k:]
        return np.concatenate([sys.f_eval(t, d, x, u), v])

    def H_ext(t, s):
        return sys.H_eval(t, s[:n])

    def h_ext(t, s):
        return np.concatenate([sys.h_eval(t, s[:n]), s[n:]])

    return SystemDef(n=n + w_dim, m=sys.m, k=k + w_dim, d_box=sys.d_box,
                     f=f_ext, H=H_ext, h=h_ext,
                     name=f"{sys.name}|extended(w={w_dim})",
                     p_Y=sys.p_Y, p_y=sys.p_y + w_dim)
