"""Reduced-rank Gaussian-process parameter fields on a mesh eigenbasis.

A field is ``theta(x) = m + alpha * sum_k eta_k sqrt(S(sqrt(lambda_k), rho)) phi_k(x)``
with ``eta_k ~ N(0, 1)``.  The eigenfunctions are M-orthonormal, so the
constant mode has magnitude ``|Phi_1| = 1/sqrt(area)``; the amplitude is
measured in units of that mode (``alpha / |Phi_1|``) and the spectral
density is taken per unit area, which leaves ``alpha`` as the marginal
standard deviation of the field.  Lengthscales are given in "lengthscale
units" of ``length_unit`` mesh millimetres each.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .cell import PARAM_RANGES, EPFields
from .mesh import Eigenbasis, TriMesh, biharmonic_distances, biharmonic_embedding, graph_geodesic

log = logging.getLogger(__name__)

KERNELS = ("rbf", "matern52")
FIELD_NAMES = ("tau_out", "apd_max")
ERP_CUTOFF = 280.0


def spectral_density(kernel: str, omega, rho):
    """Two-dimensional spectral density of a unit-variance stationary kernel.

    Normalised so that ``integral S(|w|) d^2w / (2 pi)^2 = 1``.
    """
    omega = np.asarray(omega, dtype=float)
    r2w2 = (rho * omega) ** 2
    if kernel == "rbf":
        return 2 * np.pi * rho**2 * np.exp(-0.5 * r2w2)
    if kernel == "matern52":
        return 2 * np.pi * rho**2 * (1 + r2w2 / 5.0) ** -3.5
    raise ValueError(f"unknown kernel {kernel!r}")


def dlog_sqrt_density_dlog_rho(kernel: str, omega, rho):
    r2w2 = (rho * np.asarray(omega, dtype=float)) ** 2
    if kernel == "rbf":
        return 1.0 - 0.5 * r2w2
    if kernel == "matern52":
        return 1.0 - 0.7 * r2w2 / (1 + r2w2 / 5.0)
    raise ValueError(f"unknown kernel {kernel!r}")


def kernel_correlation(kernel: str, d, lengthscale):
    r = np.asarray(d, dtype=float) / lengthscale
    if kernel == "rbf":
        return np.exp(-0.5 * r * r)
    if kernel == "matern52":
        s = np.sqrt(5.0) * r
        return (1 + s + s * s / 3.0) * np.exp(-s)
    raise ValueError(f"unknown kernel {kernel!r}")


def frequencies(basis: Eigenbasis, K: int | None = None):
    lam = basis.eigenvalues[: K or basis.K]
    return np.sqrt(np.clip(lam, 0.0, None))


def spectral_weights(basis: Eigenbasis, rho, kernel="rbf", K=None, length_unit=1.0):
    """``sqrt(S(sqrt(lambda_k), rho))`` for the first ``K`` modes."""
    return np.sqrt(spectral_density(kernel, frequencies(basis, K), rho * length_unit))


@dataclass
class HyperState:
    """GP hyperparameters of the two calibrated fields (tau_out, apd_max).

    ``m``, ``alpha`` and ``rho`` have shape (2,), ``eta`` has shape (2, K).
    """

    m: np.ndarray
    alpha: np.ndarray
    rho: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float).reshape(2)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(2)
        self.rho = np.asarray(self.rho, dtype=float).reshape(2)
        self.eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        if self.eta.shape[0] != 2:
            raise ValueError("eta must have shape (2, K)")
        if np.any(self.alpha <= 0) or np.any(self.rho <= 0):
            raise ValueError("alpha and rho must be positive")

    @property
    def K(self) -> int:
        return self.eta.shape[1]

    # unconstrained vector: m1 m2 log(a1) log(a2) log(r1) log(r2) eta1 eta2
    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.m, np.log(self.alpha), np.log(self.rho), self.eta.ravel()])

    @classmethod
    def from_vector(cls, u, K: int) -> "HyperState":
        u = np.asarray(u, dtype=float)
        if u.size != 6 + 2 * K:
            raise ValueError(f"vector of length {u.size} does not match K={K}")
        return cls(u[0:2], np.exp(u[2:4]), np.exp(u[4:6]), u[6:].reshape(2, K))

    @staticmethod
    def scalar_names(K: int):
        names = ["m_tau_out", "m_apd_max", "alpha_tau_out", "alpha_apd_max",
                 "rho_tau_out", "rho_apd_max"]
        return names + [f"eta_{f}_{k}" for f in FIELD_NAMES for k in range(K)]


def _field_index(l):
    if isinstance(l, str):
        return FIELD_NAMES.index(l)
    if l not in (0, 1):
        raise ValueError("field id must be 0, 1, 'tau_out' or 'apd_max'")
    return int(l)


def field_evaluate(basis: Eigenbasis, l, hyper: HyperState, kernel: str = "rbf",
                   vertices=None, length_unit: float = 1.0) -> np.ndarray:
    """Evaluate field ``l`` (0/'tau_out' or 1/'apd_max') at all or selected vertices."""
    i = _field_index(l)
    K = hyper.K
    if K > basis.K:
        raise ValueError(f"hyper state has K={K} but the basis only {basis.K} modes")
    phi = basis.eigenvectors[:, :K] if vertices is None else basis.eigenvectors[np.asarray(vertices), :K]
    w = spectral_weights(basis, hyper.rho[i], kernel, K, length_unit)
    return hyper.m[i] + hyper.alpha[i] * (phi @ (w * hyper.eta[i]))


def field_jacobian(basis: Eigenbasis, l, hyper: HyperState, kernel: str = "rbf",
                   vertices=None, length_unit: float = 1.0) -> dict:
    """Derivatives of field ``l`` w.r.t. ``m``, ``alpha``, ``rho`` and ``eta``.

    Returns a dict of arrays with one row per evaluated vertex (``eta`` is
    ``(n, K)``).
    """
    i = _field_index(l)
    K = hyper.K
    phi = basis.eigenvectors[:, :K] if vertices is None else basis.eigenvectors[np.asarray(vertices), :K]
    om = frequencies(basis, K)
    rho_m = hyper.rho[i] * length_unit
    w = np.sqrt(spectral_density(kernel, om, rho_m))
    g = dlog_sqrt_density_dlog_rho(kernel, om, rho_m)
    base = phi @ (w * hyper.eta[i])
    return {
        "m": np.ones(phi.shape[0]),
        "alpha": base,
        "rho": hyper.alpha[i] * (phi @ (w * g * hyper.eta[i])) / hyper.rho[i],
        "eta": hyper.alpha[i] * phi * w,
    }


def sample_prior_field(basis: Eigenbasis, kernel: str, rho: float, K: int | None = None,
                       rng=None, size: int | None = None, length_unit: float = 1.0) -> np.ndarray:
    """Draw zero-mean, unit-amplitude field(s); shape (n,) or (size, n)."""
    K = K or basis.K
    if K > basis.K:
        raise ValueError(f"K={K} exceeds the {basis.K} available eigenpairs")
    rng = np.random.default_rng(rng)
    eta = rng.standard_normal((1 if size is None else size, K))
    w = spectral_weights(basis, rho, kernel, K, length_unit)
    f = (eta * w) @ basis.eigenvectors[:, :K].T
    return f[0] if size is None else f


# ---------------------------------------------------------------------------
# ground truth and constraint repair

class RepairError(RuntimeError):
    pass


def repair_constraints(fields: EPFields, basis: Eigenbasis, surrogate, cutoff: float = ERP_CUTOFF,
                       max_passes: int = 3, n_modes: int | None = None, chunk: int = 512,
                       embedding: np.ndarray | None = None) -> EPFields:
    """Replace (tau_out, apd_max) where the predicted ERP_S2 exceeds ``cutoff``.

    Each offending vertex receives the average over admissible vertices
    weighted by inverse fourth power of biharmonic distance.  Admissible
    vertices are never modified.  A precomputed biharmonic ``embedding``
    may be passed to avoid recomputing it.
    """
    out = fields.copy()
    vals = np.column_stack([out.tau_out, out.apd_max])
    bad = surrogate.predict(vals[:, 0], vals[:, 1])[0] > cutoff
    if not bad.any():
        return out
    if bad.all():
        raise RepairError("no vertex has an admissible ERP_S2")
    if embedding is None:
        basis_used = basis if n_modes is None else basis.truncated(min(n_modes, basis.K))
        embedding = biharmonic_embedding(basis_used)
    E = embedding
    n_first = int(bad.sum())
    for _ in range(max_passes):
        good = np.flatnonzero(~bad)
        offenders = np.flatnonzero(bad)
        for s in range(0, offenders.size, chunk):
            rows = offenders[s:s + chunk]
            d = biharmonic_distances(E, rows, good)
            w = 1.0 / np.maximum(d, 1e-300) ** 4
            vals[rows] = (w @ vals[good]) / w.sum(axis=1, keepdims=True)
        erp = surrogate.predict(vals[offenders, 0], vals[offenders, 1])[0]
        bad = np.zeros_like(bad)
        bad[offenders[erp > cutoff]] = True
        if not bad.any():
            break
    else:
        raise RepairError(f"{int(bad.sum())} vertices still violate ERP_S2 <= {cutoff} after {max_passes} passes")
    log.debug("repaired %d of %d vertices", n_first, vals.shape[0])
    out.tau_out, out.apd_max = vals[:, 0].copy(), vals[:, 1].copy()
    return out


def scale_to_range(f, lo, hi):
    f = np.asarray(f, dtype=float)
    return lo + (hi - lo) * (f - f.min()) / (f.max() - f.min())


def generate_ground_truth(basis: Eigenbasis, rho: float, ranges=None, seed=None, surrogate=None,
                          kernel: str = "matern52", K: int = 256, length_unit: float = 1.0,
                          tau_in: float = 0.05, tau_open: float = 120.0, cutoff: float = ERP_CUTOFF,
                          repair_modes: int | None = None) -> EPFields:
    """Random parameter fields spanning the full valid ranges.

    Independent prior draws for tau_out, apd_max and cv_max are mapped
    affinely so that their sample minimum and maximum hit the range bounds;
    tau_in and tau_open are constant.  If a surrogate is given, vertices with
    predicted ERP_S2 above ``cutoff`` are repaired.
    """
    if basis.K < K:
        raise ValueError(f"ground truth needs {K} eigenpairs, basis has {basis.K}")
    ranges = dict(PARAM_RANGES, **(ranges or {}))
    rng = np.random.default_rng(seed)
    draws = {name: sample_prior_field(basis, kernel, rho, K, rng, length_unit=length_unit)
             for name in ("tau_out", "apd_max", "cv_max")}
    fields = EPFields(
        cv_max=scale_to_range(draws["cv_max"], *ranges["cv_max"]),
        tau_in=np.full(basis.n_vertices, tau_in),
        tau_out=scale_to_range(draws["tau_out"], *ranges["tau_out"]),
        tau_open=np.full(basis.n_vertices, tau_open),
        apd_max=scale_to_range(draws["apd_max"], *ranges["apd_max"]),
    )
    if surrogate is not None:
        fields = repair_constraints(fields, basis, surrogate, cutoff, n_modes=repair_modes)
    return fields


# ---------------------------------------------------------------------------
# lengthscale units

class LengthscaleFitError(RuntimeError):
    pass


def calibrate_lengthscale_units(basis: Eigenbasis, kernel: str = "rbf", rho: float = 1.0,
                                n_samples: int = 2000, n_pairs: int = 2000, seed=None,
                                mesh: TriMesh | None = None, n_sources: int = 40,
                                length_unit: float = 1.0) -> float:
    """Millimetres of graph-geodesic distance per unit of GP lengthscale.

    Prior fields are sampled on ``basis``; their empirical correlation at
    random vertex pairs is fitted by least squares to the kernel's
    correlation as a function of the pairs' geodesic distance on ``mesh``
    (the basis' own mesh by default).
    """
    mesh = mesh if mesh is not None else basis.mesh
    if mesh is None:
        raise ValueError("a mesh is needed for geodesic distances")
    rng = np.random.default_rng(seed)
    F = sample_prior_field(basis, kernel, rho, basis.K, rng, size=n_samples, length_unit=length_unit)
    F = F - F.mean(axis=0)
    sd = F.std(axis=0)
    sources = rng.choice(mesh.n_vertices, size=min(n_sources, mesh.n_vertices), replace=False)
    per = int(np.ceil(n_pairs / sources.size))
    dist, corr = [], []
    for s in sources:
        d = graph_geodesic(mesh, [s])
        targets = rng.choice(mesh.n_vertices, size=per, replace=True)
        c = (F[:, s][:, None] * F[:, targets]).mean(axis=0) / (sd[s] * sd[targets])
        dist.append(d[targets])
        corr.append(c)
    dist, corr = np.concatenate(dist)[:n_pairs], np.concatenate(corr)[:n_pairs]
    if np.min(corr) > 0.5:
        raise LengthscaleFitError("correlations never decay; lengthscale too large for this mesh")
    guess = np.median(dist[np.abs(corr - np.exp(-0.5)) < 0.1]) if np.any(np.abs(corr - np.exp(-0.5)) < 0.1) else np.median(dist)
    try:
        (ell,), _ = curve_fit(lambda d, l: kernel_correlation(kernel, d, l), dist, corr,
                              p0=[max(guess, 1e-12)], bounds=(1e-12, np.inf))
    except RuntimeError as exc:
        raise LengthscaleFitError(str(exc)) from exc
    return float(ell / rho)
