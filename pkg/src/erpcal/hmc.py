"""No-U-Turn Hamiltonian Monte Carlo with Stan-style warmup.

Multinomial trajectory sampling with the generalised no-U-turn criterion,
dual-averaging step-size adaptation and a diagonal inverse metric estimated
in doubling windows during warmup.  ``target(u)`` must return the log
density and its gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MAX_ENERGY_ERROR = 1000.0


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class HMCConfig:
    iterations: int = 5000
    chains: int = 8
    warmup_fraction: float = 0.5
    thin_to: int = 200
    target_accept: float = 0.8
    max_depth: int = 10
    init_jitter: float = 0.1
    seed: int = 0

    @property
    def n_warmup(self) -> int:
        return int(round(self.iterations * self.warmup_fraction))


@dataclass
class PosteriorSamples:
    """Pooled, thinned draws plus per-chain diagnostics."""

    draws: np.ndarray  # (n_thin, dim)
    log_density: np.ndarray  # (n_thin,)
    chain_draws: np.ndarray  # (chains, n_post, dim)
    chain_log_density: np.ndarray  # (chains, n_post)
    accept_stat: np.ndarray  # (chains,)
    divergences: np.ndarray  # (chains,)
    step_size: np.ndarray  # (chains,)
    inv_metric: np.ndarray  # (chains, dim)
    rhat: np.ndarray  # (dim,)
    names: list = field(default_factory=list)

    @property
    def n_divergent(self) -> int:
        return int(self.divergences.sum())

    def map_index(self) -> int:
        return int(np.argmax(self.log_density))


# ---------------------------------------------------------------------------
# diagnostics

def split_rhat(chains: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction for ``(chains, draws, dim)`` arrays."""
    x = np.asarray(chains, dtype=float)
    if x.ndim == 2:
        x = x[..., None]
    n = x.shape[1] // 2
    halves = np.concatenate([x[:, :n], x[:, x.shape[1] - n:]], axis=0)
    means = halves.mean(axis=1)
    W = halves.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    return np.where(W > 0, r, 1.0)


# ---------------------------------------------------------------------------
# dual averaging and metric windows

class DualAveraging:
    def __init__(self, step_size, target=0.8, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10 * step_size)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(step_size)

    def restart(self, step_size):
        self.mu = np.log(10 * step_size)
        self.count = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept):
        self.count += 1
        eta = 1.0 / (self.count + self.t0)
        self.s_bar = (1 - eta) * self.s_bar + eta * (self.target - accept)
        x = self.mu - self.s_bar * np.sqrt(self.count) / self.gamma
        w = self.count ** -self.kappa
        self.x_bar = w * x + (1 - w) * self.x_bar
        return float(np.exp(x))

    @property
    def final(self) -> float:
        return float(np.exp(self.x_bar))


def warmup_windows(n_warmup, init_buffer=75, term_buffer=50, base_window=25):
    """End iterations (exclusive) of the slow metric-adaptation windows."""
    if n_warmup < 20:
        return []
    if init_buffer + base_window + term_buffer > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    ends, start, w = [], init_buffer, base_window
    last = n_warmup - term_buffer
    while start < last:
        end = start + w
        if end + 2 * w > last:
            end = last
        ends.append(end)
        start, w = end, 2 * w
    return ends


# ---------------------------------------------------------------------------
# NUTS transition

class _Tree:
    __slots__ = ("q_left", "p_left", "g_left", "q_right", "p_right", "g_right", "q_prop",
                 "lp_prop", "g_prop", "log_w", "rho", "p_sharp_left", "p_sharp_right",
                 "diverging", "turning", "sum_accept", "n_leapfrog")


class NUTS:
    def __init__(self, target, dim, rng, max_depth=10):
        self.target, self.dim, self.rng, self.max_depth = target, dim, rng, max_depth

    def _leapfrog(self, q, p, g, eps, inv_m):
        p = p + 0.5 * eps * g
        q = q + eps * inv_m * p
        lp, g = self.target(q)
        p = p + 0.5 * eps * g
        return q, p, lp, g

    @staticmethod
    def _log_add(a, b):
        m = max(a, b)
        if m == -np.inf:
            return -np.inf
        return m + np.log(np.exp(a - m) + np.exp(b - m))

    def _turning(self, p_sharp_minus, p_sharp_plus, rho):
        return (np.dot(p_sharp_plus, rho) <= 0) or (np.dot(p_sharp_minus, rho) <= 0)

    def _build(self, q, p, g, depth, direction, eps, inv_m, H0):
        t = _Tree()
        if depth == 0:
            q1, p1, lp1, g1 = self._leapfrog(q, p, g, direction * eps, inv_m)
            H = -lp1 + 0.5 * np.dot(p1, inv_m * p1)
            if not np.isfinite(H):
                H = np.inf
            dH = H - H0
            t.q_left = t.q_right = t.q_prop = q1
            t.p_left = t.p_right = p1
            t.g_left = t.g_right = t.g_prop = g1
            t.lp_prop = lp1
            t.log_w = -dH
            t.rho = p1.copy()
            t.p_sharp_left = t.p_sharp_right = inv_m * p1
            t.diverging = dH > MAX_ENERGY_ERROR
            t.turning = False
            t.sum_accept = 1.0 if dH <= 0 else (np.exp(-dH) if np.isfinite(dH) else 0.0)
            t.n_leapfrog = 1
            return t
        a = self._build(q, p, g, depth - 1, direction, eps, inv_m, H0)
        if a.diverging or a.turning:
            return a
        if direction > 0:
            b = self._build(a.q_right, a.p_right, a.g_right, depth - 1, direction, eps, inv_m, H0)
        else:
            b = self._build(a.q_left, a.p_left, a.g_left, depth - 1, direction, eps, inv_m, H0)
        t.sum_accept = a.sum_accept + b.sum_accept
        t.n_leapfrog = a.n_leapfrog + b.n_leapfrog
        t.diverging, t.turning = b.diverging, b.turning
        if direction > 0:
            left, right = a, b
        else:
            left, right = b, a
        t.q_left, t.p_left, t.g_left = left.q_left, left.p_left, left.g_left
        t.q_right, t.p_right, t.g_right = right.q_right, right.p_right, right.g_right
        t.p_sharp_left, t.p_sharp_right = left.p_sharp_left, right.p_sharp_right
        t.log_w = self._log_add(a.log_w, b.log_w)
        t.rho = a.rho + b.rho
        if b.diverging or b.turning:
            t.q_prop, t.lp_prop, t.g_prop = a.q_prop, a.lp_prop, a.g_prop
            return t
        # progressive sampling within the subtree
        if np.log(self.rng.random()) < b.log_w - t.log_w:
            t.q_prop, t.lp_prop, t.g_prop = b.q_prop, b.lp_prop, b.g_prop
        else:
            t.q_prop, t.lp_prop, t.g_prop = a.q_prop, a.lp_prop, a.g_prop
        # generalised no-U-turn checks, including the merged-subtree extras
        t.turning = self._turning(t.p_sharp_left, t.p_sharp_right, t.rho)
        if not t.turning:
            rho_ext = left.rho + right.p_left
            t.turning = self._turning(left.p_sharp_left, inv_m * right.p_left, rho_ext)
        if not t.turning:
            rho_ext = right.rho + left.p_right
            t.turning = self._turning(inv_m * left.p_right, right.p_sharp_right, rho_ext)
        return t

    def transition(self, q, lp, g, eps, inv_m):
        """One NUTS iteration; returns ``(q, lp, g, accept_stat, diverged, n_leapfrog)``."""
        p = self.rng.standard_normal(self.dim) / np.sqrt(inv_m)
        H0 = -lp + 0.5 * np.dot(p, inv_m * p)
        q_left = q_right = q
        p_left = p_right = p
        g_left = g_right = g
        rho = p.copy()
        p_sharp_left = p_sharp_right = inv_m * p
        log_w = 0.0
        q_new, lp_new, g_new = q, lp, g
        sum_accept, n_leap = 0.0, 0
        diverged = False
        for depth in range(self.max_depth):
            direction = 1 if self.rng.random() < 0.5 else -1
            if direction > 0:
                sub = self._build(q_right, p_right, g_right, depth, 1, eps, inv_m, H0)
            else:
                sub = self._build(q_left, p_left, g_left, depth, -1, eps, inv_m, H0)
            sum_accept += sub.sum_accept
            n_leap += sub.n_leapfrog
            if sub.diverging:
                diverged = True
                break
            if sub.turning:
                break
            # biased progressive sampling between old tree and new subtree
            if np.log(self.rng.random()) < sub.log_w - log_w:
                q_new, lp_new, g_new = sub.q_prop, sub.lp_prop, sub.g_prop
            if direction > 0:
                left_rho, right_rho = rho, sub.rho
                p_sl_old, p_sr_old = p_sharp_left, p_sharp_right
                old_p_right, new_p_left = p_right, sub.p_left
                q_right, p_right, g_right = sub.q_right, sub.p_right, sub.g_right
                p_sharp_right = sub.p_sharp_right
                ext1 = self._turning(p_sl_old, inv_m * new_p_left, left_rho + new_p_left)
                ext2 = self._turning(inv_m * old_p_right, sub.p_sharp_right, right_rho + old_p_right)
            else:
                left_rho, right_rho = sub.rho, rho
                p_sl_old, p_sr_old = p_sharp_left, p_sharp_right
                old_p_left, new_p_right = p_left, sub.p_right
                q_left, p_left, g_left = sub.q_left, sub.p_left, sub.g_left
                p_sharp_left = sub.p_sharp_left
                ext1 = self._turning(sub.p_sharp_left, inv_m * old_p_left, left_rho + old_p_left)
                ext2 = self._turning(inv_m * new_p_right, p_sr_old, right_rho + new_p_right)
            log_w = self._log_add(log_w, sub.log_w)
            rho = rho + sub.rho
            if self._turning(p_sharp_left, p_sharp_right, rho) or ext1 or ext2:
                break
        accept = sum_accept / max(n_leap, 1)
        return q_new, lp_new, g_new, accept, diverged, n_leap


# ---------------------------------------------------------------------------

def _initial_step_size(target, q, lp, g, inv_m, rng):
    eps = 1.0
    p = rng.standard_normal(q.size) / np.sqrt(inv_m)
    H0 = -lp + 0.5 * np.dot(p, inv_m * p)

    def dH(e):
        p1 = p + 0.5 * e * g
        q1 = q + e * inv_m * p1
        lp1, g1 = target(q1)
        p1 = p1 + 0.5 * e * g1
        H = -lp1 + 0.5 * np.dot(p1, inv_m * p1)
        return H - H0 if np.isfinite(H) else np.inf

    direction = 1 if -dH(eps) > np.log(0.8) else -1
    for _ in range(100):
        d = -dH(eps)
        if direction == 1 and not d > np.log(0.8):
            break
        if direction == -1 and d > np.log(0.8):
            break
        eps = eps * 2 if direction == 1 else eps / 2
    return eps


def run_chain(target, init, n_iter, n_warmup, rng, target_accept=0.8, max_depth=10):
    """One chain; returns post-warmup draws, their log densities and stats."""
    q = np.asarray(init, dtype=float).copy()
    dim = q.size
    lp, g = target(q)
    if not (np.isfinite(lp) and np.all(np.isfinite(g))):
        raise SamplerError("target is not finite at the initial point")
    inv_m = np.ones(dim)
    sampler = NUTS(target, dim, rng, max_depth)
    eps = _initial_step_size(target, q, lp, g, inv_m, rng)
    da = DualAveraging(eps, target_accept)
    windows = warmup_windows(n_warmup)
    window_start = windows and (75 if 75 + 25 + 50 <= n_warmup else int(0.15 * n_warmup))
    buf = []
    draws = np.empty((n_iter - n_warmup, dim))
    lps = np.empty(n_iter - n_warmup)
    acc_sum, n_div = 0.0, 0
    for it in range(n_iter):
        q, lp, g, acc, div, _ = sampler.transition(q, lp, g, eps, inv_m)
        if it < n_warmup:
            eps = da.update(acc)
            if windows and window_start <= it < windows[-1]:
                buf.append(q.copy())
                if it + 1 in windows:
                    x = np.array(buf)
                    n = x.shape[0]
                    var = x.var(axis=0, ddof=1)
                    inv_m = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                    buf = []
                    eps = _initial_step_size(target, q, lp, g, inv_m, rng)
                    da.restart(eps)
            if it == n_warmup - 1:
                eps = da.final
        else:
            k = it - n_warmup
            draws[k], lps[k] = q, lp
            acc_sum += acc
            n_div += int(div)
    n_post = max(n_iter - n_warmup, 1)
    return draws, lps, acc_sum / n_post, n_div, eps, inv_m


def run_hmc(target, init, config: HMCConfig = HMCConfig(), names=None, init_fn=None) -> PosteriorSamples:
    """Run ``config.chains`` independent NUTS chains and pool the draws.

    ``init`` is the common starting point; each chain adds Gaussian jitter of
    scale ``config.init_jitter`` (or calls ``init_fn(rng)`` if given).
    Post-warmup draws are pooled and randomly thinned to ``config.thin_to``.
    """
    init = np.asarray(init, dtype=float)
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains + 1)
    n_warm = config.n_warmup
    if not 0 <= n_warm < config.iterations:
        raise ValueError("warmup must leave at least one sampling iteration")
    results = []
    for c in range(config.chains):
        rng = np.random.default_rng(seeds[c])
        start = init_fn(rng) if init_fn is not None else init + config.init_jitter * rng.standard_normal(init.size)
        results.append(run_chain(target, start, config.iterations, n_warm, rng,
                                 config.target_accept, config.max_depth))
    chain_draws = np.stack([r[0] for r in results])
    chain_lp = np.stack([r[1] for r in results])
    divs = np.array([r[3] for r in results])
    n_post = chain_draws.shape[1]
    if np.all(divs >= n_post):
        raise SamplerError("every transition diverged")
    pooled = chain_draws.reshape(-1, init.size)
    pooled_lp = chain_lp.ravel()
    rng = np.random.default_rng(seeds[-1])
    n_keep = min(config.thin_to, pooled.shape[0]) if config.thin_to else pooled.shape[0]
    keep = np.sort(rng.choice(pooled.shape[0], n_keep, replace=False))
    if divs.sum():
        log.warning("%d divergent transitions", int(divs.sum()))
    return PosteriorSamples(pooled[keep], pooled_lp[keep], chain_draws, chain_lp,
                            np.array([r[2] for r in results]), divs,
                            np.array([r[4] for r in results]), np.stack([r[5] for r in results]),
                            split_rhat(chain_draws), list(names or []))
