"""Experiment drivers: tail-exponent fit, conditional limit law, path
constancy, and stay-positive ratio stabilization.

Each driver averages environment-exact quantities over sampled environments
(so the only randomness is the environment itself), or, for joint-path
statistics, consumes rejection-sampled conditioned trajectories. Outputs are
plain dataclasses that the CLI serializes; every one is reproducible
bit-exactly from (config, seed) at any worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conditional import ConditionedPaths, _delta_log, sample_conditioned_paths
from .offspring import EnvironmentModel
from .reports import EstimateReport, mean_stderr, ratio_stderr, wls_line_fit
from .rng import DEFAULT_CHUNK_SIZE, chunk_sizes, run_chunks, stream_salt, substream

__all__ = [
    "EstimateReport",
    "TailFit",
    "tail_fit",
    "LimitLawResult",
    "limit_law_Zn",
    "conditional_Zn_pmf",
    "PathConstancyResult",
    "path_constancy",
    "RatioConvergenceResult",
    "PhiFunctional",
    "ratio_convergence",
]


# --- extinction-time tail ------------------------------------------------------


@dataclass(frozen=True)
class TailFit:
    """Tail of the extinction time: per-n estimates and the log-log slope."""

    n_grid: np.ndarray
    p: np.ndarray
    stderr: np.ndarray
    slope: float
    slope_se: float
    intercept: float
    intercept_se: float
    replicates: int
    seed: dict = field(default_factory=dict)

    @property
    def scaled(self) -> np.ndarray:
        """n^{3/2} P(T = n+1), the sequence whose limit is the tail constant."""
        return self.n_grid**1.5 * self.p

    @property
    def scaled_stderr(self) -> np.ndarray:
        return self.n_grid**1.5 * self.stderr

    @property
    def slope_ci(self) -> tuple[float, float]:
        return (self.slope - 1.96 * self.slope_se, self.slope + 1.96 * self.slope_se)

    def stabilization_gap(self) -> tuple[float, float]:
        """Last-two-points gap of the scaled sequence and its combined error."""
        d = float(self.scaled[-1] - self.scaled[-2])
        se = float(math.hypot(self.scaled_stderr[-1], self.scaled_stderr[-2]))
        return d, se


def _tail_chunk(model, n_grid, count, rng):
    """Exact per-environment masses P(T = n+1 | env) at every grid n."""
    gmax = int(n_grid[-1])
    where = {int(v): i for i, v in enumerate(n_grid)}
    sums = np.zeros(len(n_grid))
    sums_sq = np.zeros(len(n_grid))
    s = np.zeros(count)
    logb = np.full(count, -np.inf)
    log_surv = np.zeros(count)
    for k in range(1, gmax + 2):
        x, eta = model.sample_laws(count, rng)
        if (k - 1) in where:
            # mass of dying exactly at k given the environment so far + law k
            log_xf1 = np.log(np.expm1(-x) + eta)
            logb_next = np.logaddexp(logb, np.log(eta) - s)
            log_surv_next = -np.logaddexp(-(s + x), logb_next)
            pmf = np.exp(log_surv + log_surv_next - s + log_xf1)
            i = where[k - 1]
            sums[i] = pmf.sum()
            sums_sq[i] = (pmf**2).sum()
        logb = np.logaddexp(logb, np.log(eta) - s)
        s = s + x
        log_surv = -np.logaddexp(-s, logb)
    return sums, sums_sq, count


def tail_fit(
    model: EnvironmentModel,
    n_grid,
    replicates: int,
    seed: int = 0,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> TailFit:
    """Estimate P(T = n+1) on the grid and fit the log-log slope by WLS.

    The inner quantity is exact per environment, so all variance comes from
    the environment draw; a point-mass model yields zero variance.
    """
    n_grid = np.asarray(sorted(int(v) for v in n_grid))
    if len(n_grid) < 2:
        raise ValueError("need at least two grid points")
    if n_grid[-1] < 10 * n_grid[0]:
        raise ValueError("grid must span at least one decade")
    sizes = chunk_sizes(replicates, chunk_size)
    salt = stream_salt("tail")

    def one(i):
        return _tail_chunk(model, n_grid, sizes[i], substream(seed, salt, i))

    parts = run_chunks(one, len(sizes), workers)
    sums = sum(p[0] for p in parts)
    sums_sq = sum(p[1] for p in parts)
    total = sum(p[2] for p in parts)
    p_hat, se = mean_stderr(sums, sums_sq, total)
    if np.any(se == 0.0):
        # degenerate (point-mass) model: exact values, nominal equal weights
        slope, intercept, slope_se, intercept_se = wls_line_fit(
            np.log(n_grid.astype(float)), np.log(p_hat), np.ones_like(p_hat)
        )
    else:
        slope, intercept, slope_se, intercept_se = wls_line_fit(
            np.log(n_grid.astype(float)), np.log(p_hat), se / p_hat
        )
    return TailFit(
        n_grid=n_grid.astype(float),
        p=p_hat,
        stderr=se,
        slope=slope,
        slope_se=slope_se,
        intercept=intercept,
        intercept_se=intercept_se,
        replicates=total,
        seed={"seed": seed, "chunk_size": chunk_size, "salt_label": "tail"},
    )


# --- conditional law of the final population -----------------------------------


@dataclass(frozen=True)
class LimitLawResult:
    """Conditional transform of Z_n given extinction at n+1, at two horizons."""

    n_pair: tuple[int, int]
    s_grid: np.ndarray
    ratios: np.ndarray  # (2, S) E[s^{Z_n} | T=n+1]
    stderr: np.ndarray  # (2, S)
    pmf_k: np.ndarray  # support 1..k_max
    pmf: np.ndarray  # (2, k_max) conditional pmf estimates
    pmf_stderr: np.ndarray
    replicates: tuple[int, int]
    seed: dict = field(default_factory=dict)

    @property
    def distances(self) -> np.ndarray:
        return np.abs(self.ratios[0] - self.ratios[1])

    @property
    def combined_stderr(self) -> np.ndarray:
        return np.sqrt(self.stderr[0] ** 2 + self.stderr[1] ** 2)

    @property
    def sup_distance(self) -> float:
        return float(self.distances.max())

    def passes(self, floor: float = 0.02, n_sigma: float = 3.0) -> bool:
        tol = np.maximum(floor, n_sigma * self.combined_stderr)
        return bool(np.all(self.distances <= tol))


def _limit_chunk(model, n, s_grid, k_max, count, rng):
    """Environment-exact numerators and denominator for the conditional law."""
    s = np.zeros(count)
    logb = np.full(count, -np.inf)
    for _ in range(n):
        x, eta = model.sample_laws(count, rng)
        logb = np.logaddexp(logb, np.log(eta) - s)
        s = s + x
    x1, eta1 = model.sample_laws(count, rng)
    f0 = 1.0 - 1.0 / (np.exp(-x1) + eta1)
    den = np.exp(_delta_log(s, logb, f0, 1.0))
    out = {
        "den": float(den.sum()),
        "den_sq": float((den**2).sum()),
        "count": count,
        "num": np.zeros(len(s_grid)),
        "num_sq": np.zeros(len(s_grid)),
        "cross": np.zeros(len(s_grid)),
    }
    for j, sv in enumerate(s_grid):
        if sv == 0.0:
            continue
        num = np.exp(_delta_log(s, logb, f0, float(sv)))
        out["num"][j] = num.sum()
        out["num_sq"][j] = (num**2).sum()
        out["cross"][j] = (num * den).sum()
    if k_max:
        big = np.logaddexp(-s, logb)
        log_q = logb - big
        log_pref = -s - 2.0 * big  # log[(1-q) / (a+b)] with the k-free parts
        log_alpha = np.log(f0)
        wk = np.zeros(k_max)
        wk_sq = np.zeros(k_max)
        wk_cross = np.zeros(k_max)
        for k in range(1, k_max + 1):
            w = np.exp(log_pref + (k - 1) * log_q + k * log_alpha)
            wk[k - 1] = w.sum()
            wk_sq[k - 1] = (w**2).sum()
            wk_cross[k - 1] = (w * den).sum()
        out["wk"] = wk
        out["wk_sq"] = wk_sq
        out["wk_cross"] = wk_cross
    return out


def _conditional_law_at(model, n, s_grid, k_max, replicates, seed, chunk_size, workers):
    sizes = chunk_sizes(replicates, chunk_size)
    salt = stream_salt(f"limitlaw:{n}")

    def one(i):
        return _limit_chunk(model, n, s_grid, k_max, sizes[i], substream(seed, salt, i))

    parts = run_chunks(one, len(sizes), workers)
    total = sum(p["count"] for p in parts)
    sd = sum(p["den"] for p in parts)
    sd2 = sum(p["den_sq"] for p in parts)
    sn = sum(p["num"] for p in parts)
    sn2 = sum(p["num_sq"] for p in parts)
    snd = sum(p["cross"] for p in parts)
    ratios, se = ratio_stderr(sn, sn2, np.full_like(sn, sd), np.full_like(sn, sd2), snd, total)
    # exact endpoints: no mass at zero population, full mass at s = 1
    for j, sv in enumerate(s_grid):
        if sv == 0.0:
            ratios[j], se[j] = 0.0, 0.0
        elif sv == 1.0:
            ratios[j], se[j] = 1.0, 0.0
    if k_max:
        wn = sum(p["wk"] for p in parts)
        wn2 = sum(p["wk_sq"] for p in parts)
        wnd = sum(p["wk_cross"] for p in parts)
        pmf, pmf_se = ratio_stderr(wn, wn2, np.full_like(wn, sd), np.full_like(wn, sd2), wnd, total)
    else:
        pmf, pmf_se = np.zeros(0), np.zeros(0)
    return ratios, se, pmf, pmf_se, total


def limit_law_Zn(
    model: EnvironmentModel,
    n_pair: tuple[int, int],
    s_grid=None,
    k_max: int = 40,
    replicates: int = 200_000,
    seed: int = 0,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> LimitLawResult:
    """Estimate E[s^{Z_n} | T=n+1] at two horizons plus the conditional pmf.

    Ratio estimators over exact per-environment numerators and denominators;
    s = 0 gives exactly 0 (the population is alive at n) and s = 1 exactly 1.
    """
    if s_grid is None:
        s_grid = np.round(np.linspace(0.0, 1.0, 11), 10)
    s_grid = np.asarray(s_grid, dtype=float)
    n_lo, n_hi = int(n_pair[0]), int(n_pair[1])
    r0, e0, p0, pe0, t0 = _conditional_law_at(
        model, n_lo, s_grid, k_max, replicates, seed, chunk_size, workers
    )
    r1, e1, p1, pe1, t1 = _conditional_law_at(
        model, n_hi, s_grid, k_max, replicates, seed, chunk_size, workers
    )
    return LimitLawResult(
        n_pair=(n_lo, n_hi),
        s_grid=s_grid,
        ratios=np.stack([r0, r1]),
        stderr=np.stack([e0, e1]),
        pmf_k=np.arange(1, k_max + 1),
        pmf=np.stack([p0, p1]),
        pmf_stderr=np.stack([pe0, pe1]),
        replicates=(t0, t1),
        seed={"seed": seed, "chunk_size": chunk_size, "salt_label": "limitlaw:*"},
    )


def conditional_Zn_pmf(
    model: EnvironmentModel,
    n: int,
    k_max: int,
    replicates: int,
    seed: int = 0,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
):
    """Exact-in-environment estimate of P(Z_n = k | T = n+1), k = 1..k_max."""
    _, _, pmf, pmf_se, total = _conditional_law_at(
        model, int(n), np.zeros(0), k_max, replicates, seed, chunk_size, workers
    )
    return pmf, pmf_se, total


# --- path constancy of the rescaled trajectory ---------------------------------


@dataclass(frozen=True)
class PathConstancyResult:
    """Exceedance of sup_t |Y_t - Y_{1-delta}| over conditioned paths."""

    n_grid: np.ndarray
    delta: float
    epsilon: float
    exceedance: np.ndarray
    stderr: np.ndarray
    accepted: np.ndarray
    attempts: np.ndarray
    discards: np.ndarray
    partial: bool
    seed: dict = field(default_factory=dict)

    def monotone_pass(self, n_sigma: float = 1.0) -> bool:
        """Each step down the grid may rise by at most n_sigma combined errors."""
        for i in range(len(self.n_grid) - 1):
            allowed = n_sigma * math.hypot(self.stderr[i], self.stderr[i + 1])
            if self.exceedance[i + 1] > self.exceedance[i] + allowed:
                return False
        return True


def _path_deviation(paths: ConditionedPaths, delta: float):
    """Per-path sup deviation of Y from its value at the right edge."""
    n = paths.n
    m_lo = int(math.floor(n * delta))
    m_hi = int(math.floor(n * (1.0 - delta)))
    idx = np.arange(m_lo, m_hi + 1)
    y = paths.y_values(idx)
    ref = y[:, -1]
    dev = np.abs(y - ref[:, None]).max(axis=1)
    return dev, ref


def path_constancy(
    model: EnvironmentModel,
    n_grid,
    delta: float,
    target_accepted: int,
    seed: int = 0,
    epsilon: float | None = None,
    epsilon_factor: float = 0.2,
    batch: int = DEFAULT_CHUNK_SIZE,
    max_batches: int = 5000,
    max_pop: int = 1_000_000_000,
    workers: int = 1,
    keep_paths: bool = False,
):
    """Estimate P(sup_{t in [delta, 1-delta]} |Y_t - Y_{1-delta}| > eps | T=n+1).

    When epsilon is not given it is set once, at the first grid horizon, to
    epsilon_factor times the empirical median of Y_{1-delta}, and shared
    across the grid so the exceedances are comparable.
    """
    if not 0.0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 1/2)")
    n_grid = np.asarray(sorted(int(v) for v in n_grid))
    ensembles = []
    for n in n_grid:
        paths = sample_conditioned_paths(
            model, int(n), target_accepted, seed=seed, batch=batch,
            max_batches=max_batches, max_pop=max_pop, workers=workers,
        )
        ensembles.append(paths)
    partial = any(p.accepted < target_accepted for p in ensembles)
    devs, refs = zip(*(_path_deviation(p, delta) for p in ensembles))
    if epsilon is None:
        epsilon = float(epsilon_factor * np.median(refs[0]))
    exceed = np.empty(len(n_grid))
    se = np.empty(len(n_grid))
    for i, dev in enumerate(devs):
        k = len(dev)
        p = float((dev > epsilon).mean()) if k else float("nan")
        exceed[i] = p
        se[i] = math.sqrt(max(p * (1.0 - p), 1e-12) / k) if k else float("nan")
    result = PathConstancyResult(
        n_grid=n_grid.astype(float),
        delta=delta,
        epsilon=epsilon,
        exceedance=exceed,
        stderr=se,
        accepted=np.array([p.accepted for p in ensembles]),
        attempts=np.array([p.attempts for p in ensembles]),
        discards=np.array([p.discards for p in ensembles]),
        partial=partial,
        seed={"seed": seed, "batch": batch},
    )
    return (result, ensembles) if keep_paths else result


# --- stabilization of stay-positive weighted ratios ----------------------------


@dataclass(frozen=True)
class PhiFunctional:
    """1 / prod_i (alpha_i e^{-S_n} + beta_i + gamma_i b_n), all parameters > 0.

    Bounded by 1/(beta_1 beta_2), which the driver checks pointwise.
    """

    alpha: tuple[float, float]
    beta: tuple[float, float]
    gamma: tuple[float, float]

    def __post_init__(self):
        for v in (*self.alpha, *self.beta, *self.gamma):
            if v <= 0.0:
                raise ValueError("all functional parameters must be positive")

    @property
    def bound(self) -> float:
        return 1.0 / (self.beta[0] * self.beta[1])

    def __call__(self, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = np.ones_like(w)
        for i in range(2):
            out = out / (self.alpha[i] * w + self.beta[i] + self.gamma[i] * b)
        return out


@dataclass(frozen=True)
class RatioConvergenceResult:
    """Per-n conditioned ratios E[g w; stay] / E[w; stay] with w = e^{-S_n}."""

    n_grid: np.ndarray
    ratio: np.ndarray
    stderr: np.ndarray
    bound: float
    replicates: int
    seed: dict = field(default_factory=dict)

    def stabilization_pass(self, n_sigma: float = 3.0) -> bool:
        d = abs(self.ratio[-1] - self.ratio[-2])
        return bool(d <= n_sigma * math.hypot(self.stderr[-1], self.stderr[-2]))

    def bound_pass(self) -> bool:
        return bool(np.all(self.ratio <= self.bound * (1.0 + 1e-12)))


def _ratio_chunk(model, n_grid, functional, count, rng):
    where = {int(v): i for i, v in enumerate(n_grid)}
    gmax = int(n_grid[-1])
    vals = np.zeros((5, len(n_grid)))
    s = np.zeros(count)
    b = np.zeros(count)
    for k in range(1, gmax + 1):
        if len(s):
            x, eta = model.sample_laws(len(s), rng)
            b = b + eta * np.exp(-s)
            s = s + x
            keep = s >= 0.0
            s = s[keep]
            b = b[keep]
        if k in where:
            i = where[k]
            w = np.exp(-s)
            gv = functional(w, b) if functional is not None else np.ones_like(w)
            gw = gv * w
            vals[0, i] = gw.sum()
            vals[1, i] = (gw**2).sum()
            vals[2, i] = w.sum()
            vals[3, i] = (w**2).sum()
            vals[4, i] = (gw * w).sum()
    return vals, count


def ratio_convergence(
    model: EnvironmentModel,
    functional: PhiFunctional | None,
    n_grid,
    replicates: int,
    seed: int = 0,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> RatioConvergenceResult:
    """Check Cauchy-style stabilization of the conditioned ratio along n_grid.

    Limits themselves are out of scope; the driver only reports per-n ratios
    with errors, the last-two-points gap and the uniform upper bound.
    functional = None runs the identity functional (ratio exactly 1).
    """
    n_grid = np.asarray(sorted(int(v) for v in n_grid))
    sizes = chunk_sizes(replicates, chunk_size)
    salt = stream_salt("ratio")

    def one(i):
        return _ratio_chunk(model, n_grid, functional, sizes[i], substream(seed, salt, i))

    parts = run_chunks(one, len(sizes), workers)
    vals = sum(p[0] for p in parts)
    total = sum(p[1] for p in parts)
    ratio, se = ratio_stderr(vals[0], vals[1], vals[2], vals[3], vals[4], total)
    return RatioConvergenceResult(
        n_grid=n_grid.astype(float),
        ratio=ratio,
        stderr=se,
        bound=functional.bound if functional is not None else 1.0,
        replicates=total,
        seed={"seed": seed, "chunk_size": chunk_size, "salt_label": "ratio"},
    )
