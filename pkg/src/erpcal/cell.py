"""Modified Mitchell-Schaeffer cell model and its transformed parameterisation.

The membrane voltage ``V`` is normalised to [0, 1] and ``h`` is the recovery
gate.  Tissue-level parameters are expressed in the transformed space
(``cv_max``, ``tau_in``, ``tau_out``, ``tau_open``, ``apd_max``) in which convex
combinations of valid parameters stay valid; :func:`to_raw` converts back to
the time constants and diffusivity used by the solvers.

Units: ms for time constants, m/s (numerically equal to mm/ms) for velocity,
mm^2/ms for diffusivity.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numba
import numpy as np

V_GATE = 0.1

#: valid ranges of the transformed parameters
PARAM_RANGES = {
    "cv_max": (0.1, 1.5),
    "tau_in": (0.01, 0.30),
    "tau_out": (1.0, 30.0),
    "tau_open": (65.0, 215.0),
    "apd_max": (120.0, 270.0),
}

PARAM_NAMES = tuple(PARAM_RANGES)


class ParameterError(ValueError):
    """Raised for parameters outside their admissible range."""


@dataclass(frozen=True)
class MMSRawParams:
    tau_in: float
    tau_out: float
    tau_open: float
    tau_close: float
    diffusivity: float
    v_gate: float = V_GATE

    def __post_init__(self):
        for name in ("tau_in", "tau_out", "tau_open", "tau_close", "diffusivity"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ParameterError(f"{name} must be finite and positive, got {value}")
        if not 0.0 < self.v_gate < 0.5:
            raise ParameterError(f"v_gate must lie in (0, 0.5), got {self.v_gate}")


@dataclass(frozen=True)
class EPParams:
    cv_max: float = 0.7
    tau_in: float = 0.05
    tau_out: float = 6.0
    tau_open: float = 120.0
    apd_max: float = 180.0

    def check(self, rtol: float = 1e-9) -> "EPParams":
        """Raise :class:`ParameterError` if any value is outside its valid range."""
        for name, (lo, hi) in PARAM_RANGES.items():
            value = getattr(self, name)
            slack = rtol * max(abs(lo), abs(hi))
            if not (np.isfinite(value) and lo - slack <= value <= hi + slack):
                raise ParameterError(f"{name}={value} outside valid range [{lo}, {hi}]")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)])

    @classmethod
    def from_array(cls, values) -> "EPParams":
        return cls(*(float(v) for v in values))

    def replace(self, **changes) -> "EPParams":
        d = asdict(self)
        d.update(changes)
        return EPParams(**d)


def _log_argument(tau_in, tau_out, v_gate=V_GATE):
    return 1.0 + tau_out * (1.0 - v_gate) ** 2 / (4.0 * tau_in)


def to_raw(p: EPParams, check: bool = True) -> MMSRawParams:
    """Convert transformed parameters to mMS time constants and diffusivity.

    ``cv_max = 0.5 (1 - 2 v_gate) sqrt(2 D / tau_in)`` is solved for ``D`` and
    ``apd_max = tau_close log(1 + tau_out (1 - v_gate)^2 / (4 tau_in))`` for
    ``tau_close``.
    """
    if check:
        p.check()
    log_term = np.log(_log_argument(p.tau_in, p.tau_out))
    if not log_term > 0:
        raise ParameterError("apd_max mapping is singular (tau_out too small)")
    tau_close = p.apd_max / log_term
    diffusivity = p.tau_in * (p.cv_max / (0.5 * (1.0 - 2.0 * V_GATE))) ** 2 / 2.0
    return MMSRawParams(p.tau_in, p.tau_out, p.tau_open, tau_close, diffusivity)


def from_raw(raw: MMSRawParams) -> EPParams:
    cv = 0.5 * (1.0 - 2.0 * raw.v_gate) * np.sqrt(2.0 * raw.diffusivity / raw.tau_in)
    apd = raw.tau_close * np.log(_log_argument(raw.tau_in, raw.tau_out, raw.v_gate))
    return EPParams(cv, raw.tau_in, raw.tau_out, raw.tau_open, apd)


def raw_arrays(params) -> tuple:
    """Vectorised :func:`to_raw` over arrays of transformed parameters.

    ``params`` is a mapping with keys from :data:`PARAM_NAMES`; returns
    ``(tau_in, tau_out, tau_open, tau_close, diffusivity)`` arrays.
    """
    tin = np.asarray(params["tau_in"], dtype=float)
    tout = np.asarray(params["tau_out"], dtype=float)
    cv = np.asarray(params["cv_max"], dtype=float)
    log_term = np.log(_log_argument(tin, tout))
    if np.any(log_term <= 0):
        raise ParameterError("apd_max mapping is singular (tau_out too small)")
    tclose = np.asarray(params["apd_max"], dtype=float) / log_term
    diff = tin * (cv / (0.5 * (1.0 - 2.0 * V_GATE))) ** 2 / 2.0
    topen = np.asarray(params["tau_open"], dtype=float)
    shape = np.broadcast(tin, tout, topen, tclose, diff).shape
    return tuple(np.broadcast_to(a, shape).astype(float) for a in (tin, tout, topen, tclose, diff))


@numba.njit(cache=True)
def ionic_step(v, h, tau_in, tau_out, tau_open, tau_close, j_stim, dt):
    dv = h * v * (v - V_GATE) * (1.0 - v) / tau_in - (1.0 - h) * v / tau_out + j_stim
    if v <= V_GATE:
        dh = (1.0 - h) / tau_open
    else:
        dh = -h / tau_close
    return v + dt * dv, h + dt * dh


@numba.njit(cache=True)
def ionic_substeps(V, h, tau_in, tau_out, tau_open, tau_close, stim, dt, nsub):
    """Advance every node ``nsub`` forward-Euler steps of size ``dt`` in place.

    Parameter arrays have one entry per node; ``stim`` is the per-node
    stimulus current held constant over the substeps.
    """
    for i in range(V.size):
        v = V[i]
        g = h[i]
        for _ in range(nsub):
            v, g = ionic_step(v, g, tau_in[i], tau_out[i], tau_open[i], tau_close[i], stim[i], dt)
        V[i] = v
        h[i] = g


def step_cell(state, raw: MMSRawParams, j_stim: float, dt: float):
    """One forward-Euler step of the reaction and gate equations (no diffusion)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v, h = ionic_step(float(state[0]), float(state[1]), raw.tau_in, raw.tau_out,
                      raw.tau_open, raw.tau_close, float(j_stim), float(dt))
    if not (np.isfinite(v) and np.isfinite(h)):
        raise FloatingPointError("non-finite cell state")
    return v, h


@numba.njit(cache=True)
def _run_cell(v, h, tau_in, tau_out, tau_open, tau_close, amp, stim_starts, stim_dur, dt, n_steps):
    out = np.empty(n_steps + 1)
    out[0] = v
    for s in range(n_steps):
        t = s * dt
        j = 0.0
        for k in range(stim_starts.size):
            if stim_starts[k] - 1e-9 <= t < stim_starts[k] + stim_dur - 1e-9:
                j = amp
        v, h = ionic_step(v, h, tau_in, tau_out, tau_open, tau_close, j, dt)
        out[s + 1] = v
    return out


def simulate_cell(p: EPParams, stim_times, duration: float, dt: float = 0.02,
                  amplitude: float = 0.5, pulse_ms: float = 2.0):
    """Single-cell (space-clamped) simulation; returns ``(time, vm)`` arrays."""
    raw = to_raw(p)
    n_steps = int(round(duration / dt))
    vm = _run_cell(0.0, 1.0, raw.tau_in, raw.tau_out, raw.tau_open, raw.tau_close,
                   float(amplitude), np.asarray(stim_times, dtype=float), float(pulse_ms),
                   float(dt), n_steps)
    if not np.all(np.isfinite(vm)):
        raise FloatingPointError("non-finite voltage in cell simulation")
    return np.arange(n_steps + 1) * dt, vm


@dataclass
class EPFields:
    """Per-vertex transformed parameters (same units as :class:`EPParams`)."""

    cv_max: np.ndarray
    tau_in: np.ndarray
    tau_out: np.ndarray
    tau_open: np.ndarray
    apd_max: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, n), dtype=float) for n in PARAM_NAMES]
        n = max(a.size for a in arrays)
        for name, a in zip(PARAM_NAMES, arrays):
            setattr(self, name, np.broadcast_to(a, (n,)).copy() if a.size in (1, n) else a)
            if getattr(self, name).shape != (n,):
                raise ValueError(f"field {name} has inconsistent length")

    @property
    def n_vertices(self) -> int:
        return self.tau_out.size

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def at(self, i: int) -> EPParams:
        return EPParams(*(float(getattr(self, n)[i]) for n in PARAM_NAMES))

    def copy(self) -> "EPFields":
        return EPFields(**{n: a.copy() for n, a in self.as_dict().items()})

    def replace(self, **changes) -> "EPFields":
        d = self.copy().as_dict()
        d.update(changes)
        return EPFields(**d)

    def check(self, rtol: float = 1e-9) -> "EPFields":
        for name, (lo, hi) in PARAM_RANGES.items():
            a = getattr(self, name)
            slack = rtol * max(abs(lo), abs(hi))
            bad = ~((a >= lo - slack) & (a <= hi + slack))
            if np.any(bad):
                raise ParameterError(f"{name} outside [{lo}, {hi}] at {int(bad.sum())} vertices")
        return self
