"""Experimental design, cubic ERP surrogates and variance-based sensitivity."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.spatial.distance import pdist, squareform

from .cell import PARAM_NAMES, PARAM_RANGES, EPParams
from .io import fmt, floats, read_csv, read_keyvalue, require_columns, write_csv, write_keyvalue
from .strip import StripConfig, measure_erp_pair

log = logging.getLogger(__name__)

ERP_CUTOFF = 280.0
TARGETS = ("erp_s2", "erp_s3")
INPUTS = ("tau_out", "apd_max")
TABLE_COLUMNS = ("cvmax", "tau_in", "tau_out", "tau_open", "apd_max", "erp_s2", "erp_s3")
# exponents (a, b) of z1^a z2^b in coefficient order
CUBIC_TERMS = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3))
SURROGATE_FIELDS = {"tau_in": 0.05, "tau_open": 120.0}


# ---------------------------------------------------------------------------
# Latin hypercube

@dataclass
class LHSDesign:
    names: tuple
    ranges: dict
    unit: np.ndarray  # (n, d) in [0, 1)

    @property
    def points(self) -> np.ndarray:
        lo = np.array([self.ranges[n][0] for n in self.names])
        hi = np.array([self.ranges[n][1] for n in self.names])
        return lo + self.unit * (hi - lo)

    @property
    def n(self) -> int:
        return self.unit.shape[0]

    def column(self, name) -> np.ndarray:
        return self.points[:, self.names.index(name)]

    def min_distance(self) -> float:
        return float(pdist(self.unit).min()) if self.n > 1 else np.inf


def latin_hypercube(n: int, ranges: dict, seed=None, n_iter: int = 2000) -> LHSDesign:
    """Maximin Latin hypercube.

    A random LHS is improved by swapping two entries of one column; a swap
    is kept only if it increases the minimum pairwise distance (in the unit
    cube), so the projection property is preserved throughout.
    """
    if n < 2:
        raise ValueError("a Latin hypercube needs n >= 2")
    names = tuple(ranges)
    d = len(names)
    rng = np.random.default_rng(seed)
    perms = np.column_stack([rng.permutation(n) for _ in range(d)])
    jitter = rng.random((n, d))
    unit = (perms + jitter) / n
    D = squareform(pdist(unit))
    np.fill_diagonal(D, np.inf)
    best = D.min()
    for _ in range(n_iter):
        c = rng.integers(d)
        i, j = rng.choice(n, 2, replace=False)
        # keep each point's jitter within its new bin
        cand = unit.copy()
        bi, bj = perms[i, c], perms[j, c]
        cand[i, c] = (bj + jitter[i, c]) / n
        cand[j, c] = (bi + jitter[j, c]) / n
        rows = np.sqrt(((cand[[i, j], None, :] - cand[None, :, :]) ** 2).sum(-1))
        rows[0, i] = rows[1, j] = np.inf
        Dn = D.copy()
        Dn[[i, j], :] = rows
        Dn[:, [i, j]] = rows.T
        m = Dn.min()
        if m > best:
            unit, D, best = cand, Dn, m
            perms[i, c], perms[j, c] = bj, bi
    return LHSDesign(names, {k: tuple(map(float, v)) for k, v in ranges.items()}, unit)


# ---------------------------------------------------------------------------
# training data

@dataclass
class TrainingTable:
    cv_max: np.ndarray
    tau_in: np.ndarray
    tau_out: np.ndarray
    tau_open: np.ndarray
    apd_max: np.ndarray
    erp_s2: np.ndarray
    erp_s3: np.ndarray
    errors: dict = field(default_factory=dict)  # row -> message

    def __post_init__(self):
        for n in ("cv_max", "tau_in", "tau_out", "tau_open", "apd_max", "erp_s2", "erp_s3"):
            setattr(self, n, np.asarray(getattr(self, n), dtype=float))

    def __len__(self):
        return self.tau_out.size

    def inputs(self, names=PARAM_NAMES) -> np.ndarray:
        return np.column_stack([getattr(self, n) for n in names])

    def subset(self, rows) -> "TrainingTable":
        rows = np.asarray(rows)
        return TrainingTable(*(getattr(self, n)[rows] for n in
                               ("cv_max", "tau_in", "tau_out", "tau_open", "apd_max", "erp_s2", "erp_s3")))

    def to_csv(self, path, meta=None):
        write_csv(path, {"cvmax": self.cv_max, "tau_in": self.tau_in, "tau_out": self.tau_out,
                         "tau_open": self.tau_open, "apd_max": self.apd_max,
                         "erp_s2": self.erp_s2, "erp_s3": self.erp_s3}, meta)

    @classmethod
    def from_csv(cls, path) -> "TrainingTable":
        cols, _ = read_csv(path)
        require_columns(cols, TABLE_COLUMNS, path)
        return cls(cols["cvmax"], cols["tau_in"], cols["tau_out"], cols["tau_open"],
                   cols["apd_max"], cols["erp_s2"], cols["erp_s3"])


def design_params(design: LHSDesign, fixed=None) -> list:
    """EPParams per design row; parameters not in the design take ``fixed`` values."""
    fixed = dict(SURROGATE_FIELDS, **(fixed or {}))
    defaults = EPParams()
    pts = design.points
    out = []
    for row in pts:
        vals = {n: fixed.get(n, getattr(defaults, n)) for n in PARAM_NAMES}
        vals.update(zip(design.names, map(float, row)))
        out.append(EPParams(**vals))
    return out


def _erp_row(args):
    p, kw = args
    try:
        s2, s3 = measure_erp_pair(p, **kw)
        return s2, s3, None
    except Exception as exc:  # recorded per row
        return np.nan, np.nan, f"{type(exc).__name__}: {exc}"


def build_training_set(design: LHSDesign, s1: float = 600.0, s2: float = 300.0,
                       n_s1_beats: int = 8, precision: float = 1.0,
                       config: StripConfig = StripConfig(), fixed=None,
                       workers: int = 1) -> TrainingTable:
    """ERP_S2 and ERP_S3 from strip simulations at every design point.

    Parameters missing from the design are held at ``tau_in=0.05`` and
    ``tau_open=120`` (others at :class:`EPParams` defaults).  Failed rows get
    NaN and their error message in ``table.errors``.
    """
    params = design_params(design, fixed)
    kw = dict(s1=s1, s2=s2, n_s1_beats=n_s1_beats, precision=precision, config=config)
    jobs = [(p, kw) for p in params]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_erp_row, jobs, chunksize=4))
    else:
        results = [_erp_row(j) for j in jobs]
    errors = {i: r[2] for i, r in enumerate(results) if r[2] is not None}
    for i, msg in errors.items():
        log.warning("design row %d failed: %s", i, msg)
    cols = {n: np.array([getattr(p, n) for p in params]) for n in PARAM_NAMES}
    return TrainingTable(cols["cv_max"], cols["tau_in"], cols["tau_out"], cols["tau_open"],
                         cols["apd_max"], [r[0] for r in results], [r[1] for r in results], errors)


# ---------------------------------------------------------------------------
# cubic surrogates

class SurrogateFitError(ValueError):
    pass


def cubic_features(z1, z2, order: int = 0):
    """Cubic monomials of standardised inputs and their derivatives.

    ``order=0`` returns ``(n, 10)``; ``order=1`` returns ``(2, n, 10)`` partials
    w.r.t. ``(z1, z2)``; ``order=2`` returns ``(2, 2, n, 10)``.
    """
    z1 = np.atleast_1d(np.asarray(z1, dtype=float))
    z2 = np.atleast_1d(np.asarray(z2, dtype=float))

    def mono(x, a, k):  # k-th derivative of x**a
        if k > a:
            return np.zeros_like(x)
        c = 1.0
        for j in range(k):
            c *= a - j
        return c * x ** (a - k)

    if order == 0:
        return np.stack([mono(z1, a, 0) * mono(z2, b, 0) for a, b in CUBIC_TERMS], axis=-1)
    if order == 1:
        return np.stack([
            np.stack([mono(z1, a, 1) * mono(z2, b, 0) for a, b in CUBIC_TERMS], axis=-1),
            np.stack([mono(z1, a, 0) * mono(z2, b, 1) for a, b in CUBIC_TERMS], axis=-1)])
    if order == 2:
        out = np.empty((2, 2, z1.size, len(CUBIC_TERMS)))
        for r in range(2):
            for s in range(2):
                k1, k2 = (r == 0) + (s == 0), (r == 1) + (s == 1)
                out[r, s] = np.stack([mono(z1, a, k1) * mono(z2, b, k2) for a, b in CUBIC_TERMS], axis=-1)
        return out
    raise ValueError("order must be 0, 1 or 2")


@dataclass
class SurrogateModel:
    """Bivariate cubic polynomials ``f(tau_out, apd_max)`` for ERP_S2 and ERP_S3."""

    centre: np.ndarray
    scale: np.ndarray
    coef: dict
    rms: dict
    n_rows: dict
    cutoff: float = ERP_CUTOFF
    lower: np.ndarray = field(default_factory=lambda: np.array([-np.inf, -np.inf]))
    upper: np.ndarray = field(default_factory=lambda: np.array([np.inf, np.inf]))

    VERSION = 1

    def standardise(self, tau_out, apd_max):
        return ((np.asarray(tau_out, dtype=float) - self.centre[0]) / self.scale[0],
                (np.asarray(apd_max, dtype=float) - self.centre[1]) / self.scale[1])

    def _flat(self, tau_out, apd_max):
        z1, z2 = np.broadcast_arrays(*self.standardise(tau_out, apd_max))
        return z1.ravel(), z2.ravel(), z1.shape

    def value(self, target, tau_out, apd_max):
        z1, z2, shape = self._flat(tau_out, apd_max)
        return (cubic_features(z1, z2) @ self.coef[target]).reshape(shape)

    def gradient(self, target, tau_out, apd_max):
        """Partials w.r.t. (tau_out, apd_max); shape ``(..., 2)``."""
        z1, z2, shape = self._flat(tau_out, apd_max)
        g = cubic_features(z1, z2, 1) @ self.coef[target] / self.scale[:, None]
        return np.moveaxis(g, 0, -1).reshape(shape + (2,))

    def hessian(self, target, tau_out, apd_max):
        z1, z2, shape = self._flat(tau_out, apd_max)
        H = cubic_features(z1, z2, 2) @ self.coef[target]
        H = H / (self.scale[:, None, None] * self.scale[None, :, None])
        return np.moveaxis(H, (0, 1), (-2, -1)).reshape(shape + (2, 2))

    def predict(self, tau_out, apd_max):
        return self.value("erp_s2", tau_out, apd_max), self.value("erp_s3", tau_out, apd_max)

    def save(self, path, meta=None):
        values = {"cutoff": self.cutoff, "inputs": " ".join(INPUTS), "terms":
                  " ".join(f"{a}{b}" for a, b in CUBIC_TERMS), "centre": self.centre,
                  "scale": self.scale, "lower": self.lower, "upper": self.upper}
        for t in TARGETS:
            values[f"coef_{t}"] = self.coef[t]
            values[f"rms_{t}"] = self.rms[t]
            values[f"rows_{t}"] = int(self.n_rows[t])
        write_keyvalue(path, "erpcal-surrogate", self.VERSION, values, meta)

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        v, _ = read_keyvalue(path, "erpcal-surrogate", cls.VERSION)
        return cls(floats(v["centre"]), floats(v["scale"]),
                   {t: floats(v[f"coef_{t}"]) for t in TARGETS},
                   {t: float(v[f"rms_{t}"]) for t in TARGETS},
                   {t: int(v[f"rows_{t}"]) for t in TARGETS},
                   float(v["cutoff"]), floats(v["lower"]), floats(v["upper"]))


def fit_surrogates(table: TrainingTable, cutoff: float = ERP_CUTOFF) -> SurrogateModel:
    """Least-squares cubic fits on rows with ``ERP_S2 <= cutoff``.

    Missing ERP_S3 values drop the row for that target only.
    """
    keep = np.isfinite(table.erp_s2) & (table.erp_s2 <= cutoff)
    X = np.column_stack([table.tau_out[keep], table.apd_max[keep]])
    if X.shape[0] < len(CUBIC_TERMS):
        raise SurrogateFitError(f"{X.shape[0]} rows left after the cutoff; a cubic needs {len(CUBIC_TERMS)}")
    centre = X.mean(axis=0)
    scale = X.std(axis=0)
    if np.any(scale == 0):
        raise SurrogateFitError("rank-deficient design: an input is constant")
    coef, rms, n_rows = {}, {}, {}
    for t in TARGETS:
        y = getattr(table, t)[keep]
        ok = np.isfinite(y)
        Z = (X[ok] - centre) / scale
        A = cubic_features(Z[:, 0], Z[:, 1])
        if ok.sum() < A.shape[1] or np.linalg.matrix_rank(A) < A.shape[1]:
            raise SurrogateFitError(f"rank-deficient design for {t}")
        c, *_ = np.linalg.lstsq(A, y[ok], rcond=None)
        coef[t] = c
        rms[t] = float(np.sqrt(np.mean((A @ c - y[ok]) ** 2)))
        n_rows[t] = int(ok.sum())
    return SurrogateModel(centre, scale, coef, rms, n_rows, float(cutoff), X.min(axis=0), X.max(axis=0))


@dataclass
class SurrogateEval:
    erp_s2: np.ndarray
    erp_s3: np.ndarray
    valid: np.ndarray
    extrapolated: np.ndarray
    grad_s2: np.ndarray
    grad_s3: np.ndarray
    hess_s2: np.ndarray
    hess_s3: np.ndarray


def eval_surrogate(model: SurrogateModel, tau_out, apd_max) -> SurrogateEval:
    """Values, derivatives and validity flags of both surrogates."""
    s2, s3 = model.predict(tau_out, apd_max)
    t, a = np.broadcast_arrays(np.asarray(tau_out, dtype=float), np.asarray(apd_max, dtype=float))
    extrap = ((t < model.lower[0]) | (t > model.upper[0]) | (a < model.lower[1]) | (a > model.upper[1]))
    return SurrogateEval(s2, s3, s2 <= model.cutoff, extrap,
                         model.gradient("erp_s2", t, a), model.gradient("erp_s3", t, a),
                         model.hessian("erp_s2", t, a), model.hessian("erp_s3", t, a))


# ---------------------------------------------------------------------------
# sensitivity

def _spline_smoother(x, y, n_basis=10, lams=np.logspace(-4, 4, 33)):
    """Cubic P-spline with second-difference penalty; smoothing by GCV."""
    u = (x - x.min()) / (x.max() - x.min())
    degree = 3
    inner = np.linspace(0, 1, n_basis - degree + 1)
    knots = np.concatenate([[0.0] * degree, inner, [1.0] * degree])
    B = BSpline.design_matrix(np.clip(u, 0, 1), knots, degree).toarray()
    Dm = np.diff(np.eye(n_basis), 2, axis=0)
    P = Dm.T @ Dm
    BtB, Bty = B.T @ B, B.T @ y
    n = y.size
    best = None
    for lam in lams:
        A = BtB + lam * P
        c = np.linalg.solve(A, Bty)
        edf = np.trace(np.linalg.solve(A, BtB))
        rss = np.sum((y - B @ c) ** 2)
        gcv = n * rss / (n - edf) ** 2
        if best is None or gcv < best[0]:
            best = (gcv, B @ c)
    return best[1]


def sensitivity_indices(inputs, output, n_basis: int = 10) -> np.ndarray:
    """Main-effect index per input column: ``var(smooth) / var(output)``.

    Each index is the variance of a univariate penalised spline smoother
    (evaluated at the input points) relative to the output variance.  NaN
    outputs are dropped.
    """
    X = np.asarray(inputs, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(output, dtype=float)
    ok = np.isfinite(y)
    X, y = X[ok], y[ok]
    if y.size < 50:
        raise ValueError(f"sensitivity needs at least 50 points, got {y.size}")
    vy = y.var()
    if not vy > 0:
        raise ValueError("output has zero variance")
    out = np.empty(X.shape[1])
    for j in range(X.shape[1]):
        if np.ptp(X[:, j]) == 0:
            raise ValueError(f"input column {j} is constant")
        out[j] = np.clip(_spline_smoother(X[:, j], y, n_basis).var() / vy, 0.0, 1.0)
    return out


def surrogate_design(n: int, seed=None, n_iter: int = 2000) -> LHSDesign:
    """Design over CV_max, tau_out and APD_max used for surrogate training."""
    return latin_hypercube(n, {k: PARAM_RANGES[k] for k in ("cv_max", "tau_out", "apd_max")},
                           seed, n_iter)


def sensitivity_design(n: int, seed=None, n_iter: int = 2000) -> LHSDesign:
    """Design over all five transformed parameters."""
    return latin_hypercube(n, dict(PARAM_RANGES), seed, n_iter)


def sensitivity_table(table: TrainingTable, names=PARAM_NAMES) -> dict:
    """``{target: {input: index}}`` for both ERP targets."""
    X = table.inputs(names)
    return {t: dict(zip(names, map(float, sensitivity_indices(X, getattr(table, t)))))
            for t in TARGETS}


__all__ = ["LHSDesign", "latin_hypercube", "TrainingTable", "build_training_set", "SurrogateModel",
           "fit_surrogates", "eval_surrogate", "sensitivity_indices", "surrogate_design",
           "sensitivity_design", "sensitivity_table", "ERP_CUTOFF", "fmt"]
