"""1D cable ("strip") simulation of the mMS model and ERP/APD measurement.

The cable is paced from one end and activation is detected at its midpoint.
Diffusion is integrated with backward Euler on a lumped-mass P1 discretisation
(no-flux ends); the reaction terms take forward-Euler substeps inside every
diffusion step.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.optimize import brentq

from .cell import EPParams, MMSRawParams, ionic_substeps, to_raw

log = logging.getLogger(__name__)

ACTIVATION_LEVEL = 0.7
#: APD level (percent repolarisation) -> downstroke threshold
APD_THRESHOLDS = {20: 0.8, 30: 0.7, 50: 0.5, 90: 0.1}


class CaptureError(RuntimeError):
    """A beat that the protocol requires to capture did not."""


@dataclass(frozen=True)
class StripConfig:
    """Numerical and stimulus settings of the cable simulation."""

    length_mm: float = 20.0
    dx_mm: float = 0.3
    dt_ms: float = 0.1
    ionic_substeps: int = 5
    stim_length_mm: float = 1.0
    pulse_ms: float = 2.0
    amplitude_factor: float = 2.0
    amplitude: float | None = None  # absolute override of the stimulus current
    capture_window_ms: float = 100.0
    tune_cv: bool = True

    @property
    def n_nodes(self) -> int:
        return int(round(self.length_mm / self.dx_mm)) + 1

    @property
    def ionic_dt(self) -> float:
        return self.dt_ms / self.ionic_substeps


@dataclass(frozen=True)
class PacingProtocol:
    kind: str = "S1S2"  # or "S1S2S3"
    s1: float = 600.0
    s2: float = 300.0
    n_s1_beats: int = 8
    resolution: float = 10.0
    scan_lower: float = 50.0
    scan_upper: float = 600.0

    def __post_init__(self):
        if self.kind not in ("S1S2", "S1S2S3"):
            raise ValueError(f"unknown protocol kind {self.kind!r}")
        if self.resolution <= 0:
            raise ValueError("protocol resolution must be positive")
        premature = self.s2 if self.kind == "S1S2S3" else self.scan_upper
        if not (self.s1 >= premature > self.scan_lower):
            raise ValueError("require S1 >= S2 > scan lower bound")
        if self.n_s1_beats < 1:
            raise ValueError("need at least one S1 beat")


@dataclass
class ActionPotentialTrace:
    time: np.ndarray
    vm: np.ndarray

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.vm = np.asarray(self.vm, dtype=float)
        if self.time.shape != self.vm.shape:
            raise ValueError("time and vm must have equal length")
        if np.any(np.diff(self.time) <= 0):
            raise ValueError("time axis must be strictly increasing")
        if not np.all(np.isfinite(self.vm)):
            raise ValueError("non-finite voltage samples")

    def to_csv(self, path):
        np.savetxt(path, np.column_stack([self.time, self.vm]), delimiter=",",
                   header="time_ms,vm", comments="", fmt="%.6f")


@dataclass
class StripResult:
    trace: ActionPotentialTrace
    stim_times: np.ndarray
    captured: np.ndarray
    activation_times: np.ndarray = field(default_factory=lambda: np.empty(0))


# ---------------------------------------------------------------------------
# numerical kernel

@numba.njit(cache=True)
def _run_cable(V, h, tin, tout, topen, tclose, off, piv, mass, stim_mask, amp,
               stim_starts, stim_dur, t0, dt, nsub, n_steps, probe):
    n = V.size
    dts = dt / nsub
    trace = np.empty(n_steps + 1)
    trace[0] = V[probe]
    stim = np.zeros(n)
    rhs = np.empty(n)
    t = t0
    for s in range(n_steps):
        # stimulus is sampled at the middle of the diffusion step
        tm = t + 0.5 * dt
        j = 0.0
        for k in range(stim_starts.size):
            if stim_starts[k] <= tm < stim_starts[k] + stim_dur:
                j = amp
        for i in range(n):
            stim[i] = j if stim_mask[i] else 0.0
        ionic_substeps(V, h, tin, tout, topen, tclose, stim, dts, nsub)
        for i in range(n):
            rhs[i] = mass[i] * V[i]
        for i in range(1, n):
            rhs[i] -= off / piv[i - 1] * rhs[i - 1]
        V[n - 1] = rhs[n - 1] / piv[n - 1]
        for i in range(n - 2, -1, -1):
            V[i] = (rhs[i] - off * V[i + 1]) / piv[i]
        t = t0 + (s + 1) * dt
        trace[s + 1] = V[probe]
    return trace


def upward_crossings(time, v, level=ACTIVATION_LEVEL):
    """Linearly interpolated times at which ``v`` rises through ``level``."""
    v = np.asarray(v)
    idx = np.nonzero((v[:-1] < level) & (v[1:] >= level))[0]
    frac = (level - v[idx]) / (v[idx + 1] - v[idx])
    return time[idx] + frac * (time[idx + 1] - time[idx])


class Cable:
    """Homogeneous cable for one parameter set.

    Parameters
    ----------
    raw : MMSRawParams
        Cell parameters; ``raw.diffusivity`` is used as given (no tuning).
    config : StripConfig
    amplitude : float, optional
        Stimulus current; defaults to ``config.amplitude_factor`` times the
        capture threshold from rest.
    """

    def __init__(self, raw: MMSRawParams, config: StripConfig = StripConfig(),
                 amplitude: float | None = None, cv_hint: float | None = None):
        self.raw = raw
        self.config = config
        n = config.n_nodes
        self.n = n
        dx = config.dx_mm
        self.x = np.arange(n) * dx
        self.mass = np.full(n, dx)
        self.mass[[0, -1]] = dx / 2
        k = raw.diffusivity / dx * config.dt_ms
        diag = self.mass + 2 * k
        diag[[0, -1]] -= k
        self.off = -k
        piv = np.empty(n)
        piv[0] = diag[0]
        for i in range(1, n):
            piv[i] = diag[i] - k * k / piv[i - 1]
        self.piv = piv
        self.params = tuple(np.full(n, v) for v in (raw.tau_in, raw.tau_out, raw.tau_open, raw.tau_close))
        self.stim_mask = self.x <= config.stim_length_mm + 1e-9
        self.probe = n // 2
        cv = cv_hint if cv_hint is not None else _continuum_cv(raw)
        travel = (self.x[self.probe] - config.stim_length_mm) / cv
        self.travel = travel
        self.window = max(config.capture_window_ms, 2.5 * travel)
        if amplitude is None:
            amplitude = config.amplitude
        if amplitude is None:
            amplitude = config.amplitude_factor * self.capture_threshold()
        self.amplitude = float(amplitude)

    def rest_state(self):
        return np.zeros(self.n), np.ones(self.n)

    def run(self, state, t0, duration, stim_times, amplitude=None):
        """Integrate from ``state`` at ``t0``; returns ``(state, time, probe_vm)``."""
        V, h = (a.copy() for a in state)
        n_steps = int(round(duration / self.config.dt_ms))
        amp = self.amplitude if amplitude is None else amplitude
        trace = _run_cable(V, h, *self.params, self.off, self.piv, self.mass, self.stim_mask,
                           float(amp), np.asarray(stim_times, dtype=float), self.config.pulse_ms,
                           float(t0), self.config.dt_ms, self.config.ionic_substeps, n_steps,
                           self.probe)
        if not np.all(np.isfinite(trace)) or not np.all(np.isfinite(V)):
            raise FloatingPointError("numerical blow-up in cable simulation")
        time = t0 + np.arange(n_steps + 1) * self.config.dt_ms
        return (V, h), time, trace

    def single_capture(self, amplitude):
        _, time, vm = self.run(self.rest_state(), 0.0, self.window + self.config.pulse_ms,
                               [0.0], amplitude)
        return upward_crossings(time, vm).size > 0

    def capture_threshold(self, rtol=0.02):
        """Smallest stimulus current (to ``rtol``) that captures from rest."""
        lo, hi = 0.0, 0.05
        while not self.single_capture(hi):
            lo, hi = hi, hi * 2
            if hi > 1e3:
                raise CaptureError("no stimulus amplitude captures from rest")
        if lo == 0.0:
            lo = hi / 2
            while self.single_capture(lo) and lo > 1e-6:
                hi, lo = lo, lo / 2
        while hi - lo > rtol * hi:
            mid = 0.5 * (lo + hi)
            if self.single_capture(mid):
                hi = mid
            else:
                lo = mid
        return hi

    def premature_captures(self, state, t_ref, coupling):
        """Whether a stimulus ``coupling`` ms after a reference beat at ``t_ref`` captures.

        ``state`` is the tissue state at ``t_ref`` just before the reference
        stimulus.  The first midpoint upstroke after ``t_ref`` belongs to the
        reference beat.
        """
        t_test = t_ref + coupling
        _, time, vm = self.run(state, t_ref, coupling + self.window, [t_ref, t_test])
        ups = upward_crossings(time, vm)
        if ups.size == 0:
            raise CaptureError(f"reference beat at t={t_ref} ms did not capture")
        later = ups[1:]
        return bool(np.any((later >= t_test) & (later <= t_test + self.window)))


def _continuum_cv(raw: MMSRawParams):
    return 0.5 * (1 - 2 * raw.v_gate) * np.sqrt(2 * raw.diffusivity / raw.tau_in)


# ---------------------------------------------------------------------------
# conduction velocity and diffusivity tuning

def cable_cv(raw: MMSRawParams, config: StripConfig = StripConfig(), amplitude=2.0):
    """Front speed (mm/ms) between the cable quarter points for one beat from rest.

    Returns 0.0 if the wave does not reach the far quarter point.
    """
    cable = Cable(raw, config, amplitude=amplitude, cv_hint=1.0)
    q1, q3 = cable.n // 4, (3 * cable.n) // 4
    duration = 20.0 + 2.5 * (cable.x[q3] / max(_continuum_cv(raw), 0.05))
    V, h = cable.rest_state()
    n_steps = int(round(duration / config.dt_ms))
    ups = []
    for node in (q1, q3):
        V0, h0 = V.copy(), h.copy()
        tr = _run_cable(V0, h0, *cable.params, cable.off, cable.piv, cable.mass, cable.stim_mask,
                        float(amplitude), np.array([0.0]), config.pulse_ms, 0.0, config.dt_ms,
                        config.ionic_substeps, n_steps, node)
        c = upward_crossings(np.arange(n_steps + 1) * config.dt_ms, tr)
        if c.size == 0:
            return 0.0
        ups.append(c[0])
    return (cable.x[q3] - cable.x[q1]) / (ups[1] - ups[0])


@functools.lru_cache(maxsize=4096)
def _tuned_diffusivity(cv_target, tau_in, dx, dt, nsub, length):
    config = StripConfig(length_mm=length, dx_mm=dx, dt_ms=dt, ionic_substeps=nsub, tune_cv=False)
    base = tau_in * (cv_target / (0.5 * (1 - 2 * 0.1))) ** 2 / 2

    def speed(log_d):
        raw = MMSRawParams(tau_in, 10.0, 100.0, 100.0, float(np.exp(log_d)))
        return cable_cv(raw, config) - cv_target

    lo = hi = np.log(base)
    f_hi = speed(hi)
    if f_hi < 0:
        while f_hi < 0:
            lo, hi = hi, hi + np.log(2.0)
            f_hi = speed(hi)
            if hi - np.log(base) > np.log(1e4):
                raise RuntimeError("could not bracket the tuned diffusivity")
    else:
        f_lo = f_hi
        while f_lo > 0:
            hi, lo = lo, lo - np.log(2.0)
            f_lo = speed(lo)
            if np.log(base) - lo > np.log(1e4):
                raise RuntimeError("could not bracket the tuned diffusivity")
    return float(np.exp(brentq(speed, lo, hi, xtol=1e-3)))


def tuned_diffusivity(cv_target: float, tau_in: float, config: StripConfig = StripConfig()):
    """Diffusivity at which the discretised cable conducts at ``cv_target``.

    Coarse grids conduct slower than the continuum wave speed (and can fail
    to conduct altogether), so the diffusivity is adjusted until the cable
    front speed matches the target.  Cached per discretisation.
    """
    return _tuned_diffusivity(round(float(cv_target), 6), round(float(tau_in), 6),
                              config.dx_mm, config.dt_ms, config.ionic_substeps,
                              config.length_mm)


def strip_raw(p: EPParams, config: StripConfig = StripConfig()) -> MMSRawParams:
    raw = to_raw(p)
    if config.tune_cv:
        raw = replace(raw, diffusivity=tuned_diffusivity(p.cv_max, p.tau_in, config))
    return raw


def make_cable(p: EPParams, config: StripConfig = StripConfig()) -> Cable:
    return Cable(strip_raw(p, config), config, cv_hint=p.cv_max)


# ---------------------------------------------------------------------------
# public operations

def simulate_strip(p: EPParams, stim_times, duration: float,
                   config: StripConfig = StripConfig()) -> StripResult:
    """Pace the cable at ``stim_times`` and record the midpoint voltage.

    A stimulus captures when the midpoint voltage rises through 0.7 within
    the capture window after it.  Each upstroke is credited to the latest
    stimulus at least half the expected travel time before it.
    """
    stim_times = np.asarray(stim_times, dtype=float)
    if np.any(np.diff(stim_times) <= 0):
        raise ValueError("stimulus times must be increasing")
    cable = make_cable(p, config)
    _, time, vm = cable.run(cable.rest_state(), 0.0, duration, stim_times)
    ups = upward_crossings(time, vm)
    captured = np.zeros(stim_times.size, dtype=bool)
    act = np.full(stim_times.size, np.nan)
    for u in ups:
        # a midpoint upstroke lags its stimulus by roughly the travel time
        k = np.searchsorted(stim_times, u - 0.5 * cable.travel, side="right") - 1
        if k >= 0 and u - stim_times[k] <= cable.window and not captured[k]:
            captured[k] = True
            act[k] = u
    return StripResult(ActionPotentialTrace(time, vm), stim_times, captured, act)


def _bisect_coupling(cable, state, t_ref, lo, hi, precision):
    if not cable.premature_captures(state, t_ref, hi):
        raise CaptureError(f"coupling interval {hi} ms (scan upper bound) does not capture")
    if cable.premature_captures(state, t_ref, lo):
        raise CaptureError(f"coupling interval {lo} ms (scan lower bound) captures")
    while hi - lo > precision:
        mid = 0.5 * (lo + hi)
        if cable.premature_captures(state, t_ref, mid):
            hi = mid
        else:
            lo = mid
    return lo, hi


def _check_monotone(cable, state, t_ref, lo, step, n_checks=2):
    for k in range(1, n_checks + 1):
        c = lo - k * step
        if c <= 0:
            break
        if cable.premature_captures(state, t_ref, c):
            log.warning("capture non-monotone: %.1f ms captures below failing %.1f ms", c, lo)
            return False
    return True


def measure_erp(p: EPParams, protocol: PacingProtocol = PacingProtocol(), precision: float = 1.0,
                config: StripConfig = StripConfig(), check_monotone: bool = False) -> float:
    """Effective refractory period of the final premature beat.

    The cable is paced with ``n_s1_beats`` S1 beats; for ``S1S2S3`` one S2 beat
    follows.  The last coupling interval is bisected between the scan bounds
    until capture and failure are bracketed within ``precision`` ms, and the
    midpoint of the bracket is returned.
    """
    if precision < 0.5:
        raise ValueError("precision must be at least 0.5 ms")
    cable = make_cable(p, config)
    s1 = protocol.s1
    t_last = (protocol.n_s1_beats - 1) * s1
    state = cable.rest_state()
    if t_last > 0:
        state, _, _ = cable.run(state, 0.0, t_last, np.arange(protocol.n_s1_beats - 1) * s1)
    t_ref = t_last
    if protocol.kind == "S1S2S3":
        if not cable.premature_captures(state, t_last, protocol.s2):
            raise CaptureError(f"S2={protocol.s2} ms beat failed to capture")
        state, _, _ = cable.run(state, t_last, protocol.s2, [t_last])
        t_ref = t_last + protocol.s2
    lo, hi = _bisect_coupling(cable, state, t_ref, protocol.scan_lower, protocol.scan_upper, precision)
    if check_monotone:
        _check_monotone(cable, state, t_ref, lo, protocol.resolution)
    return 0.5 * (lo + hi)


def coupling_captures(p: EPParams, protocol: PacingProtocol, coupling: float,
                      config: StripConfig = StripConfig()) -> bool:
    """Whether the final premature beat at ``coupling`` ms captures."""
    cable = make_cable(p, config)
    t_last = (protocol.n_s1_beats - 1) * protocol.s1
    state = cable.rest_state()
    if t_last > 0:
        state, _, _ = cable.run(state, 0.0, t_last, np.arange(protocol.n_s1_beats - 1) * protocol.s1)
    if protocol.kind == "S1S2S3":
        state, _, _ = cable.run(state, t_last, protocol.s2, [t_last])
        t_last += protocol.s2
    return cable.premature_captures(state, t_last, coupling)


def measure_apd(trace: ActionPotentialTrace, levels=(20, 30, 50, 90)) -> dict:
    """APD of the final beat at the requested repolarisation levels (percent).

    Activation is the last upward crossing of 0.7; recovery is the first
    downward crossing of ``1 - level/100`` after the voltage has exceeded it.
    """
    t, v = trace.time, trace.vm
    ups = upward_crossings(t, v)
    if ups.size == 0:
        raise ValueError("trace has no upstroke through 0.7")
    t_act = ups[-1]
    start = np.searchsorted(t, t_act)
    out = {}
    for level in levels:
        thr = APD_THRESHOLDS.get(level, 1.0 - level / 100.0)
        seg = v[start:]
        above = np.nonzero(seg >= thr)[0]
        if above.size == 0:
            raise ValueError(f"level APD{level} never crossed")
        down = np.nonzero((seg[above[0]:-1] >= thr) & (seg[above[0] + 1:] < thr))[0]
        if down.size == 0:
            raise ValueError(f"level APD{level} never crossed")
        i = start + above[0] + down[0]
        frac = (v[i] - thr) / (v[i] - v[i + 1])
        out[level] = t[i] + frac * (t[i + 1] - t[i]) - t_act
    return out


def measure_erp_pair(p: EPParams, s1: float = 600.0, s2: float = 300.0, n_s1_beats: int = 8,
                     precision: float = 1.0, scan=(50.0, 600.0),
                     config: StripConfig = StripConfig()) -> tuple:
    """``(ERP_S2, ERP_S3)`` from one shared S1 train.

    ERP_S3 is NaN when the S2 beat fails to capture.  Identical to two
    :func:`measure_erp` calls but the S1 train is simulated once.
    """
    if precision < 0.5:
        raise ValueError("precision must be at least 0.5 ms")
    cable = make_cable(p, config)
    t_last = (n_s1_beats - 1) * s1
    state = cable.rest_state()
    if t_last > 0:
        state, _, _ = cable.run(state, 0.0, t_last, np.arange(n_s1_beats - 1) * s1)
    lo, hi = _bisect_coupling(cable, state, t_last, scan[0], scan[1], precision)
    erp_s2 = 0.5 * (lo + hi)
    if not cable.premature_captures(state, t_last, s2):
        return erp_s2, float("nan")
    state3, _, _ = cable.run(state, t_last, s2, [t_last])
    lo, hi = _bisect_coupling(cable, state3, t_last + s2, scan[0], scan[1], precision)
    return erp_s2, 0.5 * (lo + hi)
