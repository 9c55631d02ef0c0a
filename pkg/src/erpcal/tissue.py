"""Monodomain mMS simulation on a triangulated surface.

P1 finite elements with lumped mass; each time step applies forward-Euler
ionic substeps followed by a backward-Euler diffusion solve
``(M + dt S_D) V = M V*``.  Activation and repolarisation times are
recorded on the fly for the final beat.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .cell import EPFields, ionic_substeps, raw_arrays
from .io import write_csv, write_vtk
from .mesh import TriMesh, cotangent_stiffness, graph_geodesic, lumped_mass
from .strip import ACTIVATION_LEVEL, APD_THRESHOLDS, CaptureError, StripConfig, tuned_diffusivity

log = logging.getLogger(__name__)

APD_LEVELS = (20, 30, 50, 90)


@dataclass(frozen=True)
class TissueConfig:
    dt_ms: float = 0.1
    ionic_substeps: int = 5
    stim_radius_mm: float = 1.5
    pulse_ms: float = 2.0
    amplitude: float | None = None  # None: amplitude_factor x capture threshold
    amplitude_factor: float = 2.0
    tune_cv: bool = True
    diffusivity_scale: float = 1.0
    cv_grid_points: int = 12
    tuning_dx_mm: float | None = None  # None: characteristic spacing of the mesh


@dataclass
class ActivationMaps:
    """Final-beat activation time (ms after the final stimulus) and APDs."""

    act_ms: np.ndarray
    apd: dict = field(default_factory=dict)  # level -> (n,) ms
    stim_time_ms: float = 0.0

    @property
    def captured(self) -> np.ndarray:
        ok = np.isfinite(self.act_ms)
        for v in self.apd.values():
            ok &= np.isfinite(v)
        return ok

    def arrays(self) -> dict:
        out = {"act_ms": self.act_ms}
        out.update({f"apd{l}_ms": self.apd[l] for l in sorted(self.apd)})
        return out

    def to_vtk(self, path, mesh: TriMesh, meta=None):
        write_vtk(path, mesh, self.arrays(), meta)

    def to_csv(self, path, meta=None):
        cols = {"vertex_id": np.arange(self.act_ms.size)}
        cols.update(self.arrays())
        write_csv(path, cols, meta)


def apd_rmse(maps_a: ActivationMaps, maps_b: ActivationMaps, level: int = 90) -> float:
    """RMS difference of APD at ``level`` over vertices captured in both maps."""
    a, b = maps_a.apd[level], maps_b.apd[level]
    if a.shape != b.shape:
        raise ValueError("maps belong to different meshes")
    ok = maps_a.captured & maps_b.captured
    if not ok.any():
        return float("nan")
    return float(np.sqrt(np.mean((a[ok] - b[ok]) ** 2)))


# ---------------------------------------------------------------------------

def _tuned_diffusivities(cv, tau_in, dx, config: TissueConfig):
    """Vertex diffusivities giving the target front speed at grid spacing ``dx``.

    Tuned values are computed on a log-spaced CV grid per distinct tau_in and
    interpolated (log-log) to each vertex.
    """
    strip_cfg = StripConfig(length_mm=max(20.0, 40 * dx), dx_mm=dx, dt_ms=config.dt_ms,
                            ionic_substeps=config.ionic_substeps)
    out = np.empty_like(cv)
    for tin in np.unique(tau_in):
        sel = tau_in == tin
        lo, hi = cv[sel].min(), cv[sel].max()
        if hi / lo < 1.0 + 1e-9:
            out[sel] = tuned_diffusivity(lo, tin, strip_cfg)
            continue
        grid = np.geomspace(lo, hi, config.cv_grid_points)
        d = np.array([tuned_diffusivity(g, tin, strip_cfg) for g in grid])
        out[sel] = np.exp(np.interp(np.log(cv[sel]), np.log(grid), np.log(d)))
    return out


@numba.njit(cache=True)
def _record(V_prev, V, t_prev, t, t_window, act, rec, thresholds):
    for i in range(V.size):
        a, b = V_prev[i], V[i]
        if t >= t_window:
            if a < 0.7 <= b:
                act[i] = t_prev + (0.7 - a) / (b - a) * (t - t_prev)
                for l in range(thresholds.size):
                    rec[i, l] = np.nan
            elif not np.isnan(act[i]):
                for l in range(thresholds.size):
                    thr = thresholds[l]
                    if np.isnan(rec[i, l]) and a >= thr > b:
                        rec[i, l] = t_prev + (a - thr) / (a - b) * (t - t_prev)


def characteristic_spacing(mesh: TriMesh) -> float:
    """``sqrt(2 * mean triangle area)``: the cable spacing with the same node density."""
    return float(np.sqrt(2.0 * mesh.triangle_areas().mean()))


class MonodomainSolver:
    """Assembled operators for one mesh and parameter field set."""

    def __init__(self, mesh: TriMesh, fields: EPFields, config: TissueConfig = TissueConfig()):
        fields.check()
        self.mesh, self.config = mesh, config
        tin, tout, topen, tclose, diff = raw_arrays(fields.as_dict())
        if config.tune_cv:
            dx = config.tuning_dx_mm or characteristic_spacing(mesh)
            diff = _tuned_diffusivities(fields.cv_max, fields.tau_in, dx, config)
        diff = diff * config.diffusivity_scale
        self.params = (tin, tout, topen, tclose)
        self.diffusivity = diff
        d_elem = diff[mesh.triangles].mean(axis=1)
        self.mass = lumped_mass(mesh)
        S = cotangent_stiffness(mesh, d_elem)
        A = sp.diags(self.mass) + config.dt_ms * S
        self._lu = splu(A.tocsc())

    def stim_vertices(self, pacing_vertex: int) -> np.ndarray:
        d = graph_geodesic(self.mesh, [pacing_vertex])
        return d <= self.config.stim_radius_mm + 1e-9

    def run(self, stim_mask, stim_times, duration, amplitude, record_from=None, state=None):
        """Integrate from rest; returns ``(state, act, recovery)``."""
        cfg = self.config
        n = self.mesh.n_vertices
        V, h = (np.zeros(n), np.ones(n)) if state is None else (state[0].copy(), state[1].copy())
        tin, tout, topen, tclose = self.params
        stim = np.zeros(n)
        thresholds = np.array([APD_THRESHOLDS[l] for l in APD_LEVELS])
        act = np.full(n, np.nan)
        rec = np.full((n, len(APD_LEVELS)), np.nan)
        t_window = np.inf if record_from is None else record_from
        stim_times = np.asarray(stim_times, dtype=float)
        n_steps = int(round(duration / cfg.dt_ms))
        dts = cfg.dt_ms / cfg.ionic_substeps
        for s in range(n_steps):
            t = s * cfg.dt_ms
            tm = t + 0.5 * cfg.dt_ms
            on = np.any((stim_times <= tm) & (tm < stim_times + cfg.pulse_ms))
            stim[:] = 0.0
            if on:
                stim[stim_mask] = amplitude
            V_prev = V.copy()
            ionic_substeps(V, h, tin, tout, topen, tclose, stim, dts, cfg.ionic_substeps)
            V = self._lu.solve(self.mass * V)
            if s % 200 == 0 and not np.all(np.isfinite(V)):
                raise FloatingPointError(f"non-finite membrane voltage at t={t:.1f} ms")
            _record(V_prev, V, t, t + cfg.dt_ms, t_window, act, rec, thresholds)
        if not np.all(np.isfinite(V)):
            raise FloatingPointError("non-finite membrane voltage")
        return (V, h), act, rec

    def captures(self, stim_mask, amplitude, probe, window=60.0) -> bool:
        _, act, _ = self.run(stim_mask, [0.0], window, amplitude, record_from=0.0)
        return bool(np.isfinite(act[probe]).all())

    def capture_threshold(self, stim_mask, probe, rtol=0.05):
        lo, hi = 0.0, 0.1
        while not self.captures(stim_mask, hi, probe):
            lo, hi = hi, 2 * hi
            if hi > 1e3:
                raise CaptureError("failure of capture: no stimulus amplitude excites the tissue")
        while hi - lo > rtol * hi:
            mid = 0.5 * (lo + hi)
            if self.captures(stim_mask, mid, probe):
                hi = mid
            else:
                lo = mid
        return hi


def run_monodomain(mesh: TriMesh, fields: EPFields, pacing_vertex: int, n_beats: int = 8,
                   cycle_ms: float = 600.0, config: TissueConfig = TissueConfig()) -> ActivationMaps:
    """Pace ``n_beats`` times and map activation and APD of the final beat.

    A vertex that shows no 0.7 upstroke (or does not repolarise) during the
    final cycle gets NaN.  Raises :class:`CaptureError` if the pacing site
    itself fails to activate.
    """
    if n_beats < 1:
        raise ValueError("n_beats must be >= 1")
    if not 0 <= pacing_vertex < mesh.n_vertices:
        raise ValueError("pacing vertex out of range")
    solver = MonodomainSolver(mesh, fields, config)
    mask = solver.stim_vertices(pacing_vertex)
    # probe: ring just outside the stimulus region
    dist = graph_geodesic(mesh, [pacing_vertex])
    ring = np.flatnonzero((dist > config.stim_radius_mm + 1e-9))
    probe = ring[np.argsort(dist[ring])[:3]] if ring.size else np.array([pacing_vertex])
    amplitude = config.amplitude
    if amplitude is None:
        amplitude = config.amplitude_factor * solver.capture_threshold(mask, probe)
    t_final = (n_beats - 1) * cycle_ms
    stim_times = np.arange(n_beats) * cycle_ms
    _, act, rec = solver.run(mask, stim_times, t_final + cycle_ms, amplitude, record_from=t_final)
    if not np.isfinite(act[pacing_vertex]):
        raise CaptureError("failure of capture at the pacing site")
    apd = {l: rec[:, k] - act for k, l in enumerate(APD_LEVELS)}
    n_missing = int((~np.isfinite(act)).sum())
    if n_missing:
        log.info("%d vertices without a final-beat upstroke", n_missing)
    return ActivationMaps(act - t_final, apd, t_final)


def conduction_velocity(mesh: TriMesh, act_ms) -> np.ndarray:
    """Per-triangle speed ``1/|grad t|`` from a P1 activation-time field (mm/ms)."""
    v, t = mesh.vertices, mesh.triangles
    p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    e1, e2 = p1 - p0, p2 - p0
    a = np.asarray(act_ms, dtype=float)
    d1, d2 = a[t[:, 1]] - a[t[:, 0]], a[t[:, 2]] - a[t[:, 0]]
    G = np.stack([e1, e2], axis=1)  # (m, 2, 3)
    gram = G @ np.transpose(G, (0, 2, 1))
    coef = np.linalg.solve(gram, np.stack([d1, d2], axis=1)[..., None])[..., 0]
    grad = np.einsum("mk,mkj->mj", coef, G)
    with np.errstate(divide="ignore"):
        return 1.0 / np.linalg.norm(grad, axis=1)
