"""Interval-valued ERP observations, posterior over GP hyperparameters, validation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln, logsumexp

from .cell import PARAM_RANGES, EPFields
from .gp import (FIELD_NAMES, KERNELS, HyperState, RepairError, dlog_sqrt_density_dlog_rho, frequencies,
                 repair_constraints, spectral_density)
from .hmc import HMCConfig, PosteriorSamples, run_hmc
from .surrogate import CUBIC_TERMS
from .io import read_csv, require_columns, write_csv
from .mesh import Eigenbasis, biharmonic_embedding

log = logging.getLogger(__name__)

KINDS = ("S2", "S3")
LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


# ---------------------------------------------------------------------------
# observations

@dataclass(frozen=True)
class ERPObservation:
    vertex: int
    kind: str
    lo: float
    hi: float
    resolution: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")


def observe(true_erp, resolution: float, origin: float = 0.0):
    """Grid interval ``[I, I + resolution]`` containing the true ERP.

    ``I`` is the largest grid point ``origin + k * resolution`` not above the
    true value, so a value exactly on the grid belongs to the interval above.
    """
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    x = (np.asarray(true_erp, dtype=float) - origin) / resolution
    k = np.floor(x)
    # values within rounding of the next grid point belong to it
    k = np.where(np.isclose(x, k + 1, rtol=0, atol=1e-9), k + 1, k)
    lo = origin + k * resolution
    return lo, lo + resolution


def make_observations(erp_s2, erp_s3, sites, resolution: float = 10.0, origin: float = 0.0,
                      kinds=KINDS) -> list:
    out = []
    for v in np.asarray(sites, dtype=int):
        for kind, field_ in zip(KINDS, (erp_s2, erp_s3)):
            if kind in kinds:
                lo, hi = observe(field_[v], resolution, origin)
                out.append(ERPObservation(int(v), kind, float(lo), float(hi), float(resolution)))
    return out


def observations_to_csv(obs, path, meta=None):
    write_csv(path, {"vertex_id": [o.vertex for o in obs], "kind": [o.kind for o in obs],
                     "interval_lo_ms": [o.lo for o in obs], "interval_hi_ms": [o.hi for o in obs],
                     "resolution_ms": [o.resolution for o in obs]}, meta)


def observations_from_csv(path) -> list:
    cols, _ = read_csv(path)
    require_columns(cols, ("vertex_id", "kind", "interval_lo_ms", "interval_hi_ms", "resolution_ms"), path)
    return [ERPObservation(int(v), str(k), float(a), float(b), float(r)) for v, k, a, b, r in
            zip(cols["vertex_id"], cols["kind"], cols["interval_lo_ms"], cols["interval_hi_ms"],
                cols["resolution_ms"])]


# ---------------------------------------------------------------------------
# likelihood

def _mixture_grid(lo, hi, pad=0.0):
    lo, hi = lo - pad, hi + pad
    width = hi - lo
    n = max(int(round(width)), 1)
    s = width / n
    centres = lo + (np.arange(n) + 0.5) * s
    return centres, s, n


def log_likelihood_interval(f, lo, hi, pad: float = 0.0, return_grad: bool = False):
    """Log density of a prediction ``f`` under the smoothed top-hat on ``[lo, hi]``.

    The interval is split into ``N = round(hi - lo)`` sub-intervals (unit width
    for integer-ms resolutions) and the density is the equal-weight mixture
    of normals centred on them with SD equal to the sub-interval width.
    ``pad`` widens the interval on both sides.
    """
    centres, s, n = _mixture_grid(float(lo), float(hi), pad)
    f = np.asarray(f, dtype=float)
    z = (f[..., None] - centres) / s
    terms = -0.5 * z * z - LOG_SQRT_2PI - np.log(s) - np.log(n)
    val = logsumexp(terms, axis=-1)
    if not return_grad:
        return val
    w = np.exp(terms - val[..., None])
    return val, np.sum(w * (-z / s), axis=-1)


# ---------------------------------------------------------------------------
# priors and posterior

@dataclass(frozen=True)
class Priors:
    rho_shape: float = 1.01
    rho_scale: float = 20.0
    alpha_shape: float = 1.0
    alpha_scale: float = 5.0

    @staticmethod
    def _inv_gamma_log(log_x, a, b, jacobian):
        """Log InvGamma(a, b) density at ``x = exp(log_x)`` and its log_x-derivative."""
        val = a * np.log(b) - gammaln(a) - (a + 1) * log_x - b * np.exp(-log_x)
        grad = -(a + 1) + b * np.exp(-log_x)
        if jacobian:
            val, grad = val + log_x, grad + 1.0
        return val, grad

    def rho_mode(self):
        return self.rho_scale / (self.rho_shape + 1)

    def alpha_mode(self):
        return self.alpha_scale / (self.alpha_shape + 1)


_TERM_A = np.array([a for a, _ in CUBIC_TERMS], dtype=np.int64)
_TERM_B = np.array([b for _, b in CUBIC_TERMS], dtype=np.int64)


@numba.njit(cache=True)
def _ipow(x, k):
    r = 1.0
    for _ in range(k):
        r *= x
    return r


@numba.njit(cache=True)
def _cubic(coef, z1, z2):
    """Value and (z1, z2) partials of a cubic in standardised inputs."""
    v = 0.0
    d1 = 0.0
    d2 = 0.0
    for t in range(coef.size):
        a, b = _TERM_A[t], _TERM_B[t]
        v += coef[t] * _ipow(z1, a) * _ipow(z2, b)
        if a > 0:
            d1 += coef[t] * a * _ipow(z1, a - 1) * _ipow(z2, b)
        if b > 0:
            d2 += coef[t] * b * _ipow(z1, a) * _ipow(z2, b - 1)
    return v, d1, d2


@numba.njit(cache=True)
def _log_posterior_kernel(u, K, phi, omega, length_unit, kernel_id, coef, centre, scale, cutoff,
                          penalty, obs_row, obs_kind, obs_lo, obs_hi, pad, prior, jacobian, grad):
    """Log posterior and its gradient (written into ``grad``); see PosteriorTarget."""
    nv = phi.shape[0]
    for i in range(grad.size):
        grad[i] = 0.0
    val = 0.0
    # priors
    # prior = (rho_shape, rho_scale, alpha_shape, alpha_scale); u[2:4] log alpha, u[4:6] log rho
    for i in range(2, 6):
        a = prior[2] if i < 4 else prior[0]
        b = prior[3] if i < 4 else prior[1]
        x = u[i]
        val += a * np.log(b) - math.lgamma(a) - (a + 1) * x - b * np.exp(-x)
        grad[i] += -(a + 1) + b * np.exp(-x)
        if jacobian:
            val += x
            grad[i] += 1.0
    for k in range(2 * K):
        e = u[6 + k]
        val -= 0.5 * e * e + 0.9189385332046727
        grad[6 + k] -= e
    if obs_row.size == 0:
        return val
    # fields at observed vertices
    w = np.empty((2, K))
    gw = np.empty((2, K))
    alpha = np.exp(u[2:4])
    for l in range(2):
        r = np.exp(u[4 + l]) * length_unit
        for k in range(K):
            r2w2 = (r * omega[k]) ** 2
            if kernel_id == 0:
                S = 2 * np.pi * r * r * np.exp(-0.5 * r2w2)
                g = 1.0 - 0.5 * r2w2
            else:
                S = 2 * np.pi * r * r * (1 + r2w2 / 5.0) ** -3.5
                g = 1.0 - 0.7 * r2w2 / (1 + r2w2 / 5.0)
            w[l, k] = np.sqrt(S)
            gw[l, k] = g
    theta = np.empty((2, nv))
    base = np.empty((2, nv))
    rbase = np.empty((2, nv))
    for l in range(2):
        for v in range(nv):
            s0 = 0.0
            s1 = 0.0
            for k in range(K):
                c = phi[v, k] * w[l, k] * u[6 + l * K + k]
                s0 += c
                s1 += c * gw[l, k]
            base[l, v] = s0
            rbase[l, v] = s1
            theta[l, v] = u[l] + alpha[l] * s0
    # surrogates and penalty
    dth = np.zeros((2, nv))
    pred = np.empty((2, nv))
    dpred = np.empty((2, 2, nv))
    for v in range(nv):
        z1 = (theta[0, v] - centre[0]) / scale[0]
        z2 = (theta[1, v] - centre[1]) / scale[1]
        for m in range(2):
            f, d1, d2 = _cubic(coef[m], z1, z2)
            pred[m, v] = f
            dpred[m, 0, v] = d1 / scale[0]
            dpred[m, 1, v] = d2 / scale[1]
        ex = pred[0, v] - cutoff
        if ex > 0:
            val -= penalty * ex * ex
            dth[0, v] -= 2 * penalty * ex * dpred[0, 0, v]
            dth[1, v] -= 2 * penalty * ex * dpred[0, 1, v]
    # interval likelihoods
    for j in range(obs_row.size):
        v, m = obs_row[j], obs_kind[j]
        f = pred[m, v]
        clipped = m == 0 and f > cutoff
        if clipped:
            f = cutoff
        lo = obs_lo[j] - pad
        width = obs_hi[j] + pad - lo
        n = max(int(np.round(width)), 1)
        s = width / n
        mx = -np.inf
        for i in range(n):
            z = (f - (lo + (i + 0.5) * s)) / s
            mx = max(mx, -0.5 * z * z)
        tot = 0.0
        dsum = 0.0
        for i in range(n):
            z = (f - (lo + (i + 0.5) * s)) / s
            e = np.exp(-0.5 * z * z - mx)
            tot += e
            dsum += e * (-z / s)
        val += mx + np.log(tot) - 0.9189385332046727 - np.log(s) - np.log(n)
        if not clipped:
            dll = dsum / tot
            dth[0, v] += dll * dpred[m, 0, v]
            dth[1, v] += dll * dpred[m, 1, v]
    # chain rule to hyperparameters
    for l in range(2):
        for v in range(nv):
            d = dth[l, v]
            grad[l] += d
            grad[2 + l] += d * alpha[l] * base[l, v]
            grad[4 + l] += d * alpha[l] * rbase[l, v]
            for k in range(K):
                grad[6 + l * K + k] += d * alpha[l] * phi[v, k] * w[l, k]
    return val


class PosteriorTarget:
    """Log posterior of the hyperparameter vector in unconstrained coordinates.

    Coordinates are ``[m1, m2, log a1, log a2, log r1, log r2, eta1, eta2]``
    for fields (tau_out, apd_max).  Calling the object returns the value and
    gradient; ``jacobian=False`` drops the log-transform Jacobian (used for
    MAP estimation in the constrained space).
    """

    def __init__(self, basis: Eigenbasis, observations, surrogate, K: int = 24,
                 kernel: str = "rbf", length_unit: float = 1.0, priors: Priors = Priors(),
                 pad: float = 0.0, penalty: float = 1.0, jacobian: bool = True):
        if K > basis.K:
            raise ValueError(f"K={K} exceeds the {basis.K} basis functions")
        self.K, self.kernel, self.length_unit = K, kernel, length_unit
        self.priors, self.pad, self.penalty, self.jacobian = priors, pad, penalty, jacobian
        self.surrogate = surrogate
        self.obs = list(observations)
        self.omega = frequencies(basis, K)
        self.vertices = np.unique([o.vertex for o in self.obs]).astype(int)
        self.phi = basis.eigenvectors[self.vertices, :K]
        index = {v: i for i, v in enumerate(self.vertices)}
        self.obs_row = np.array([index[o.vertex] for o in self.obs], dtype=int)
        self.obs_kind = np.array([KINDS.index(o.kind) for o in self.obs], dtype=int)
        # observations grouped by identical interval for vectorised likelihoods
        self._groups = {}
        for j, o in enumerate(self.obs):
            self._groups.setdefault((o.lo, o.hi), []).append(j)
        self._groups = {k: np.array(v) for k, v in self._groups.items()}
        self.dim = 6 + 2 * K
        self.n_flagged = 0

    def names(self):
        return HyperState.scalar_names(self.K)

    def initial_point(self, midpoints=None):
        m = midpoints or [0.5 * sum(PARAM_RANGES[f]) for f in FIELD_NAMES]
        u = np.zeros(self.dim)
        u[0:2] = m
        u[2:4] = np.log(self.priors.alpha_mode())
        u[4:6] = np.log(self.priors.rho_mode())
        return u

    def fields_at_obs(self, u):
        """Field values at observed vertices and their partials w.r.t. ``u`` blocks."""
        K = self.K
        m, la, lr = u[0:2], u[2:4], u[4:6]
        eta = u[6:].reshape(2, K)
        alpha, rho = np.exp(la), np.exp(lr)
        theta, d_la, d_lr, d_eta = [], [], [], []
        for l in range(2):
            r = rho[l] * self.length_unit
            w = np.sqrt(spectral_density(self.kernel, self.omega, r))
            g = dlog_sqrt_density_dlog_rho(self.kernel, self.omega, r)
            base = self.phi @ (w * eta[l])
            theta.append(m[l] + alpha[l] * base)
            d_la.append(alpha[l] * base)
            d_lr.append(alpha[l] * (self.phi @ (w * g * eta[l])))
            d_eta.append(alpha[l] * self.phi * w)
        return np.array(theta), np.array(d_la), np.array(d_lr), d_eta

    def log_prior(self, u):
        K = self.K
        pr = self.priors
        grad = np.zeros(self.dim)
        va, ga = Priors._inv_gamma_log(u[2:4], pr.alpha_shape, pr.alpha_scale, self.jacobian)
        vr, gr = Priors._inv_gamma_log(u[4:6], pr.rho_shape, pr.rho_scale, self.jacobian)
        eta = u[6:]
        val = va.sum() + vr.sum() - 0.5 * eta @ eta - 2 * K * LOG_SQRT_2PI
        grad[2:4], grad[4:6], grad[6:] = ga, gr, -eta
        return val, grad

    def _kernel_args(self):
        if not hasattr(self, "_args"):
            m = self.surrogate
            self._args = (
                self.K, np.ascontiguousarray(self.phi), self.omega, float(self.length_unit),
                KERNELS.index(self.kernel), np.stack([m.coef["erp_s2"], m.coef["erp_s3"]]),
                np.asarray(m.centre, dtype=float), np.asarray(m.scale, dtype=float), float(m.cutoff),
                float(self.penalty), self.obs_row, self.obs_kind,
                np.array([o.lo for o in self.obs], dtype=float),
                np.array([o.hi for o in self.obs], dtype=float), float(self.pad),
                np.array([self.priors.rho_shape, self.priors.rho_scale,
                          self.priors.alpha_shape, self.priors.alpha_scale]))
        return self._args

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        grad = np.empty(self.dim)
        val = _log_posterior_kernel(u, *self._kernel_args(), self.jacobian, grad)
        if not np.isfinite(val):
            raise FloatingPointError("non-finite log posterior")
        if not np.all(np.isfinite(grad)):
            bad = np.flatnonzero(~np.isfinite(grad))
            raise FloatingPointError(f"non-finite gradient component(s) {self.names_of(bad)}")
        return val, grad

    def reference(self, u):
        """Vectorised NumPy evaluation of the same density (used as a cross-check)."""
        u = np.asarray(u, dtype=float)
        val, grad = self.log_prior(u)
        if not self.obs:
            return val, grad
        theta, d_la, d_lr, d_eta = self.fields_at_obs(u)
        t_out, apd = theta[0], theta[1]
        model = self.surrogate
        s2 = model.value("erp_s2", t_out, apd)
        s3 = model.value("erp_s3", t_out, apd)
        g2 = model.gradient("erp_s2", t_out, apd)
        g3 = model.gradient("erp_s3", t_out, apd)
        cutoff = model.cutoff
        # smooth penalty on predicted ERP_S2 beyond the validity boundary
        excess = np.maximum(s2 - cutoff, 0.0)
        self.n_flagged = int(np.count_nonzero(excess))
        dval_dtheta = -2.0 * self.penalty * excess[None, :] * g2.T  # (2, n_vertices)
        val -= self.penalty * np.sum(excess ** 2)
        pred = np.where(self.obs_kind == 0, s2[self.obs_row], s3[self.obs_row])
        dpred = np.where((self.obs_kind == 0)[:, None], g2[self.obs_row], g3[self.obs_row])
        # clipped S2 predictions beyond the cutoff carry no likelihood gradient
        clipped = (self.obs_kind == 0) & (pred > cutoff)
        pred = np.where(clipped, cutoff, pred)
        dpred[clipped] = 0.0
        dll = np.empty(len(self.obs))
        for (lo, hi), idx in self._groups.items():
            v, d = log_likelihood_interval(pred[idx], lo, hi, self.pad, return_grad=True)
            val += v.sum()
            dll[idx] = d
        contrib = dll[:, None] * dpred  # (n_obs, 2)
        for l in range(2):
            dval_dtheta[l] += np.bincount(self.obs_row, weights=contrib[:, l],
                                          minlength=self.vertices.size)
        K = self.K
        for l in range(2):
            dt = dval_dtheta[l]
            grad[l] += dt.sum()
            grad[2 + l] += dt @ d_la[l]
            grad[4 + l] += dt @ d_lr[l]
            grad[6 + l * K:6 + (l + 1) * K] += dt @ d_eta[l]
        if not np.isfinite(val):
            raise FloatingPointError("non-finite log posterior")
        if not np.all(np.isfinite(grad)):
            bad = np.flatnonzero(~np.isfinite(grad))
            raise FloatingPointError(f"non-finite gradient component(s) {self.names_of(bad)}")
        return val, grad

    def names_of(self, idx):
        names = self.names()
        return [names[i] for i in idx]


def log_posterior(hyper: HyperState, observations, basis: Eigenbasis, surrogate, priors=Priors(),
                  kernel: str = "rbf", length_unit: float = 1.0, pad: float = 0.0):
    """``(value, gradient)`` of the log posterior at ``hyper`` (unconstrained gradient)."""
    target = PosteriorTarget(basis, observations, surrogate, hyper.K, kernel, length_unit,
                             priors, pad)
    return target(hyper.to_vector())


# ---------------------------------------------------------------------------
# fitting

def calibrate(target: PosteriorTarget, config: HMCConfig = HMCConfig()) -> PosteriorSamples:
    """Sample the posterior with NUTS from jittered prior-mode starts."""
    init = target.initial_point()
    return run_hmc(target, init, config, names=target.names())


def find_map(target: PosteriorTarget, n_starts: int = 8, seed=0, maxiter: int = 2000,
             starts=()) -> tuple:
    """Multi-start L-BFGS maximum of the constrained-space posterior density.

    Returns ``(u, log_density)``.  Starts are the prior-mode point, jittered
    copies of it, and any extra points in ``starts`` (e.g. the best
    posterior draws).
    """
    t = PosteriorTarget.__new__(PosteriorTarget)
    t.__dict__.update(target.__dict__)
    t.jacobian = False
    rng = np.random.default_rng(seed)
    u0 = t.initial_point()

    def objective(u):
        # overflowing trial points (huge line-search steps) count as infeasible
        try:
            v, g = t(u)
        except FloatingPointError:
            return np.inf, np.zeros_like(u)
        return -v, -g

    jitter = [u0 + np.r_[rng.normal(0, 3, 2), rng.normal(0, 0.5, 4), rng.normal(0, 1, 2 * t.K)]
              for _ in range(n_starts - 1)]
    best = None
    extra = list(np.atleast_2d(np.asarray(starts, dtype=float))) if len(starts) else []
    for s, start in enumerate([u0, *jitter, *extra]):
        res = minimize(objective, start, jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
        if not np.isfinite(res.fun):
            log.warning("MAP start %d ended at a non-finite density; skipped", s)
            continue
        if best is None or -res.fun > best[1]:
            best = (res.x, -res.fun)
    if best is None:
        raise FloatingPointError("every MAP start ended at a non-finite density")
    return best


# ---------------------------------------------------------------------------
# posterior summaries

@dataclass
class FieldSummary:
    mean: dict
    sd: dict
    map_fields: dict
    n_draws: int
    n_repaired: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    n_unrepairable: int = 0


def _fields_from_vector(u, basis, K, kernel, length_unit):
    hyper = HyperState.from_vector(u, K)
    phi = basis.eigenvectors[:, :K]
    om = frequencies(basis, K)
    out = []
    for l in range(2):
        w = np.sqrt(spectral_density(kernel, om, hyper.rho[l] * length_unit))
        out.append(hyper.m[l] + hyper.alpha[l] * (phi @ (w * hyper.eta[l])))
    return out


def posterior_fields(samples, basis: Eigenbasis, surrogate, K: int, kernel: str = "rbf",
                     length_unit: float = 1.0, repair: bool = True, repair_modes: int | None = 64,
                     log_density=None, embedding: np.ndarray | None = None,
                     map_point=None) -> FieldSummary:
    """Per-vertex mean/SD of tau_out, apd_max, ERP_S2 and ERP_S3 over draws.

    ``samples`` is a :class:`PosteriorSamples` or a ``(n, dim)`` array of
    unconstrained vectors (then ``log_density`` selects the best draw).  The
    ``map_fields`` come from ``map_point`` when given (e.g. from
    :func:`find_map`), otherwise from the highest-density draw.
    Each draw's fields are optionally passed through the ERP_S2 repair
    before the surrogates are applied; draws whose repair does not converge
    are skipped and counted in ``n_unrepairable``.
    """
    if isinstance(samples, PosteriorSamples):
        draws, lp = samples.draws, samples.log_density
    else:
        draws = np.atleast_2d(np.asarray(samples, dtype=float))
        lp = np.zeros(len(draws)) if log_density is None else np.asarray(log_density)
    if len(draws) == 0:
        raise ValueError("no posterior draws")
    names = ("tau_out", "apd_max", "erp_s2", "erp_s3")
    n = basis.n_vertices
    s1 = {k: np.zeros(n) for k in names}
    s2 = {k: np.zeros(n) for k in names}
    if repair and embedding is None:
        b = basis if repair_modes is None else basis.truncated(min(repair_modes, basis.K))
        embedding = biharmonic_embedding(b)

    def evaluate(u):
        t_out, apd = _fields_from_vector(u, basis, K, kernel, length_unit)
        changed = 0
        if repair:
            f = EPFields(cv_max=np.full(n, 0.7), tau_in=0.05, tau_out=t_out, tau_open=120.0, apd_max=apd)
            f2 = repair_constraints(f, basis, surrogate, embedding=embedding)
            changed = int(np.count_nonzero(f2.tau_out != t_out))
            t_out, apd = f2.tau_out, f2.apd_max
        return dict(zip(names, (t_out, apd, *surrogate.predict(t_out, apd)))), changed

    map_fields, best_lp = None, -np.inf
    n_rep = np.zeros(len(draws), dtype=int)
    N = 0
    # accumulate sums about the first draw for a stable one-pass variance
    shift = None
    for i, u in enumerate(draws):
        try:
            vals, n_rep[i] = evaluate(u)
        except RepairError as exc:
            # a draw that cannot be repaired is left out of the summary and counted
            log.warning("draw %d skipped: %s", i, exc)
            n_rep[i] = -1
            continue
        if shift is None:
            shift = {k: v.copy() for k, v in vals.items()}
        for k in names:
            d = vals[k] - shift[k]
            s1[k] += d
            s2[k] += d * d
        N += 1
        if lp[i] > best_lp or map_fields is None:
            best_lp = lp[i]
            map_fields = {k: v.copy() for k, v in vals.items()}
    if N == 0:
        raise RepairError("no posterior draw could be repaired")
    if map_point is not None:
        try:
            map_fields = evaluate(np.asarray(map_point, dtype=float))[0]
        except RepairError as exc:
            log.warning("MAP point not repairable, using the best draw: %s", exc)
    mean = {k: shift[k] + s1[k] / N for k in names}
    sd = {k: np.sqrt(np.maximum(s2[k] / N - (s1[k] / N) ** 2, 0.0)) for k in names}
    return FieldSummary(mean, sd, map_fields, N, n_rep, int(np.count_nonzero(n_rep < 0)))


def ise(true, mean, sd, min_sd: float = 1e-9):
    """``|true - mean| / sd`` per vertex; NaN where ``sd < min_sd`` (flagged)."""
    true, mean, sd = (np.asarray(a, dtype=float) for a in (true, mean, sd))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.abs(true - mean) / sd
    return np.where(sd < min_sd, np.nan, out)


def rmse(a, b, mask=None) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if mask is not None:
        d = d[mask]
    return float(np.sqrt(np.mean(d * d)))


# ---------------------------------------------------------------------------
# validation sweep

@dataclass(frozen=True)
class ValidationConfig:
    lengthscales: tuple = (5.0, 10.0, 20.0)
    n_observations: tuple = (5, 10, 20)
    resolutions: tuple = (5.0, 10.0)
    replicates: int = 5
    designs_per_replicate: int = 1
    K: int = 32
    truth_K: int = 256
    truth_kernel: str = "matern52"
    kernel: str = "rbf"
    length_unit: float = 1.0
    exclusion_cm: float = 0.6
    candidate_fraction: float = 0.5
    map_starts: int = 4
    origin: float = 0.0
    seed: int = 0


GRIDS = {
    "tiny": dict(lengthscales=(5.0, 20.0), n_observations=(5, 20), resolutions=(10.0,), replicates=2),
    "small": dict(lengthscales=(5.0, 10.0, 20.0), n_observations=(5, 10, 20), resolutions=(5.0, 10.0),
                  replicates=5),
    "paper": dict(lengthscales=(5.0, 10.0, 20.0, 40.0), n_observations=(5, 10, 20, 40),
                  resolutions=(1.0, 5.0, 10.0), replicates=45, designs_per_replicate=5),
}


@dataclass
class ValidationResult:
    rows: list  # dicts with lengthscale, n_obs, resolution, replicate, design, rmse_*, status

    def columns(self) -> dict:
        keys = ("lengthscale", "n_obs", "resolution_ms", "replicate", "design",
                "rmse_s2", "rmse_s3", "rmse", "status")
        return {k: [r[k] for r in self.rows] for k in keys}

    def summary(self) -> dict:
        """Mean and SD of the pooled RMSE per (lengthscale, n_obs, resolution) cell."""
        cells = {}
        for r in self.rows:
            if r["status"] == "ok":
                cells.setdefault((r["lengthscale"], r["n_obs"], r["resolution_ms"]), []).append(r["rmse"])
        keys = sorted(cells)
        return {"lengthscale": [k[0] for k in keys], "n_obs": [k[1] for k in keys],
                "resolution_ms": [k[2] for k in keys],
                "rmse_mean": [float(np.mean(cells[k])) for k in keys],
                "rmse_sd": [float(np.std(cells[k], ddof=1)) if len(cells[k]) > 1 else 0.0 for k in keys],
                "n": [len(cells[k]) for k in keys]}


def _seed(*parts):
    return np.random.SeedSequence([int(p) for p in parts])


def validate(config: ValidationConfig, mesh, basis: Eigenbasis, surrogate) -> ValidationResult:
    """RMSE of MAP ERP predictions over a grid of experimental settings.

    Ground truths depend on (lengthscale, replicate) and observation designs on
    (n_obs, replicate, design), so every grid cell sees common random inputs.
    Failures of a cell are recorded in its ``status`` and the sweep goes on.
    """
    from .gp import generate_ground_truth
    from .mesh import maximin_design

    embedding = biharmonic_embedding(basis.truncated(min(64, basis.K)))
    cal_basis = basis.truncated(config.K)
    rows = []
    designs = {}
    for i, ls in enumerate(config.lengthscales):
        for r in range(config.replicates):
            try:
                truth = generate_ground_truth(basis, ls, seed=_seed(config.seed, 1, i, r), surrogate=surrogate,
                                              kernel=config.truth_kernel, K=config.truth_K,
                                              length_unit=config.length_unit)
                e2, e3 = surrogate.predict(truth.tau_out, truth.apd_max)
            except Exception as exc:
                for n_obs in config.n_observations:
                    for res in config.resolutions:
                        for d in range(config.designs_per_replicate):
                            rows.append(_failed_row(ls, n_obs, res, r, d, exc))
                continue
            for n_obs in config.n_observations:
                for d in range(config.designs_per_replicate):
                    key = (n_obs, r, d)
                    if key not in designs:
                        designs[key] = maximin_design(
                            mesh, basis, n_obs, config.exclusion_cm, seed=_seed(config.seed, 2, n_obs, r, d),
                            candidate_fraction=config.candidate_fraction).vertices
                    for res in config.resolutions:
                        try:
                            obs = make_observations(e2, e3, designs[key], res, config.origin)
                            target = PosteriorTarget(cal_basis, obs, surrogate, config.K, config.kernel,
                                                     config.length_unit)
                            u, lp = find_map(target, config.map_starts, seed=_seed(config.seed, 3, i, r, n_obs, d))
                            s = posterior_fields(u[None], cal_basis, surrogate, config.K, config.kernel,
                                                 config.length_unit, repair=True, log_density=[lp],
                                                 embedding=embedding)
                            p2, p3 = s.map_fields["erp_s2"], s.map_fields["erp_s3"]
                            rows.append(dict(lengthscale=ls, n_obs=n_obs, resolution_ms=res, replicate=r, design=d,
                                             rmse_s2=rmse(p2, e2), rmse_s3=rmse(p3, e3),
                                             rmse=rmse(np.r_[p2, p3], np.r_[e2, e3]), status="ok"))
                        except Exception as exc:
                            log.warning("validation cell failed: %s", exc)
                            rows.append(_failed_row(ls, n_obs, res, r, d, exc))
    return ValidationResult(rows)


def _failed_row(ls, n_obs, res, r, d, exc):
    return dict(lengthscale=ls, n_obs=n_obs, resolution_ms=res, replicate=r, design=d,
                rmse_s2=np.nan, rmse_s3=np.nan, rmse=np.nan,
                status=f"error: {type(exc).__name__}: {exc}".replace(",", ";"))


def trend_fractions(summary: dict) -> dict:
    """Fraction of adjacent grid comparisons where mean RMSE strictly decreases.

    Compared along increasing lengthscale (other factors fixed) and along
    increasing observation count.
    """
    table = {(l, n, r): m for l, n, r, m in zip(summary["lengthscale"], summary["n_obs"],
                                                 summary["resolution_ms"], summary["rmse_mean"])}
    ls = sorted(set(summary["lengthscale"]))
    ns = sorted(set(summary["n_obs"]))
    rs = sorted(set(summary["resolution_ms"]))
    by_ls, by_n = [], []
    for n in ns:
        for r in rs:
            for a, b in zip(ls, ls[1:]):
                if (a, n, r) in table and (b, n, r) in table:
                    by_ls.append(table[(b, n, r)] < table[(a, n, r)])
    for l in ls:
        for r in rs:
            for a, b in zip(ns, ns[1:]):
                if (l, a, r) in table and (l, b, r) in table:
                    by_n.append(table[(l, b, r)] < table[(l, a, r)])
    both = by_ls + by_n
    frac = lambda x: float(np.mean(x)) if x else float("nan")
    return {"lengthscale": frac(by_ls), "n_obs": frac(by_n), "overall": frac(both),
            "n_comparisons": len(both)}
