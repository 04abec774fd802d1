"""The associated random walk: fluctuation summaries, renewal tables and
weighted expectations under the stay-positive change of measure.

All estimators simulate killed walks in replicate chunks: staying
nonnegative and staying negative are absorbing events, so dead walks are
compacted away and a pass to depth K costs O(sqrt(K)) live steps per walk.
The first-strict-minimum weight E[e^{S_n}; walk minimal at n] is estimated
through time reversal, which maps that event onto {max of first n steps < 0}
for the same i.i.d. increments and so inherits the same killed simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .offspring import EnvironmentModel
from .reports import EstimateReport, mean_stderr, ratio_stderr
from .rng import DEFAULT_CHUNK_SIZE, chunk_sizes, run_chunks, stream_salt, substream


@dataclass(frozen=True)
class WalkSummary:
    """Running minimum/maximum over steps 1..n and the first-minimum index."""

    l: float
    m: float
    tau: int


def walk_from_env(env) -> np.ndarray:
    """The walk S_0 = 0, S_k = x_1 + ... + x_k driven by an environment."""
    return env.walk()


def summarize(path) -> WalkSummary:
    """Exact L_n, M_n and the first index attaining min(S_0..S_n)."""
    s = np.asarray(path, dtype=float)
    if s.ndim != 1 or len(s) < 2:
        raise ValueError("path must contain S_0 and at least one step")
    return WalkSummary(
        l=float(s[1:].min()),
        m=float(s[1:].max()),
        tau=int(np.argmin(s)),
    )


# --- renewal tables ----------------------------------------------------------


@dataclass(frozen=True)
class RenewalTable:
    """Truncated-series estimate of a renewal function on a nonnegative grid.

    side "plus" estimates u(x), the harmonic weight of the stay-positive
    measure, whose series runs over walks staying strictly negative. side
    "minus" estimates v at negated arguments (its series runs over walks
    staying nonnegative). `partials` holds the monotone partial sums at the
    checkpoint depths, for truncation-bias bookkeeping.
    """

    side: str
    grid: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    depth: int
    replicates: int
    checkpoints: np.ndarray
    partials: np.ndarray  # (len(checkpoints), len(grid)) partial-sum values
    seed: dict = field(default_factory=dict)

    def evaluate(self, x) -> np.ndarray:
        """Piecewise-linear interpolation; linear extrapolation past the grid.

        Arguments below zero evaluate to 0, matching the half-line convention.
        """
        x = np.asarray(x, dtype=float)
        g, v = self.grid, self.values
        out = np.interp(x, g, v)
        if len(g) >= 2:
            slope = (v[-1] - v[-2]) / (g[-1] - g[-2])
            above = x > g[-1]
            out = np.where(above, v[-1] + slope * (x - g[-1]), out)
        return np.where(x < 0.0, 0.0, out)

    def covers(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x >= self.grid[0]) & (x <= self.grid[-1])


def _renewal_chunk(model, side, grid, depth, checkpoints, count, rng,
                   harmonicity_xs=None, outer_draws=0):
    """One chunk of killed walks accumulating the renewal series counts.

    Returns per-walk count sums, squared sums, checkpoint partial sums and,
    when requested, the harmonicity residuals computed from this chunk's own
    partial table (chunk residuals are i.i.d., so their spread is a valid
    error estimate for the pooled residual).
    """
    g = np.asarray(grid, dtype=float)
    counts = np.zeros((count, len(g)), dtype=np.int32)
    partials = np.zeros((len(checkpoints), len(g)))
    s = np.zeros(count)
    ids = np.arange(count)
    cp = {k: i for i, k in enumerate(checkpoints)}
    for k in range(1, depth + 1):
        if len(s):
            x = model.sample_x(len(s), rng)
            s = s + x
            # "plus" (u) lives on walks staying strictly negative and counts
            # arrivals at or above -x; "minus" (v at negated arguments) lives
            # on walks staying nonnegative and counts arrivals below x.
            keep = (s < 0.0) if side == "plus" else (s >= 0.0)
            s = s[keep]
            ids = ids[keep]
        if len(s):
            if side == "plus":
                counts[ids] += s[:, None] >= -g[None, :]
            else:
                counts[ids] += s[:, None] < g[None, :]
        if k in cp:
            partials[cp[k]] = 1.0 + counts.sum(axis=0) / count
    col = counts.sum(axis=0, dtype=np.int64)
    col_sq = (counts.astype(np.int64) ** 2).sum(axis=0)
    out = {"sum": col, "sum_sq": col_sq, "count": count, "partials": partials}
    if harmonicity_xs is not None:
        vals = 1.0 + counts.sum(axis=0) / count
        slope = (vals[-1] - vals[-2]) / (g[-1] - g[-2]) if len(g) >= 2 else 0.0
        xo = model.sample_x(outer_draws, rng)
        resid = np.empty(len(harmonicity_xs))
        for i, x0 in enumerate(harmonicity_xs):
            z = x0 + xo
            uz = np.interp(z, g, vals)
            uz = np.where(z > g[-1], vals[-1] + slope * (z - g[-1]), uz)
            uz = np.where(z < 0.0, 0.0, uz)
            resid[i] = uz.mean() - np.interp(x0, g, vals)
        out["resid"] = resid
    return out


def estimate_renewal(
    model: EnvironmentModel,
    side: str,
    grid,
    depth: int = 10_000,
    replicates: int = 1_000_000,
    seed: int = 0,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> RenewalTable:
    """Monte Carlo estimate of the truncated renewal series on a grid.

    The value at x is 1 plus the expected number of pre-kill steps at which
    the walk satisfies the side's level condition; partial sums over the
    truncation depth are monotone, which the checkpoint rows document.
    """
    if side not in ("plus", "minus"):
        raise ValueError("side must be 'plus' or 'minus'")
    g = np.asarray(sorted(grid), dtype=float)
    if len(g) < 1 or g[0] < 0.0:
        raise ValueError("grid must be nonnegative and nonempty")
    if depth < 1 or replicates < 1:
        raise ValueError("depth and replicates must be >= 1")
    checkpoints = sorted({max(1, depth // 4), max(1, depth // 2), max(1, 3 * depth // 4), depth})
    sizes = chunk_sizes(replicates, chunk_size)
    salt = stream_salt(f"renewal:{side}")

    def one(i):
        return _renewal_chunk(model, side, g, depth, checkpoints, sizes[i], substream(seed, salt, i))

    parts = run_chunks(one, len(sizes), workers)
    total = sum(p["sum"] for p in parts)
    total_sq = sum(p["sum_sq"] for p in parts)
    n = sum(p["count"] for p in parts)
    mean, se = mean_stderr(total.astype(float), total_sq.astype(float), n)
    partials = sum(p["partials"] * p["count"] for p in parts) / n
    return RenewalTable(
        side=side,
        grid=g,
        values=1.0 + mean,
        stderr=se,
        depth=depth,
        replicates=n,
        checkpoints=np.asarray(checkpoints),
        partials=partials,
        seed={"seed": seed, "chunk_size": chunk_size, "salt_label": f"renewal:{side}"},
    )


@dataclass(frozen=True)
class HarmonicityReport:
    """Residuals of the one-step mean-preservation identity for the table."""

    xs: np.ndarray
    residual: np.ndarray
    stderr: np.ndarray
    chunks: int

    @property
    def max_abs_sigma(self) -> float:
        return float(np.max(np.abs(self.residual) / self.stderr))

    def passes(self, n_sigma: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.residual) <= n_sigma * self.stderr))


def harmonicity_residuals(
    model: EnvironmentModel,
    xs,
    grid,
    depth: int = 10_000,
    replicates: int = 1_000_000,
    outer_draws: int = 20_000,
    seed: int = 0,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> tuple[RenewalTable, HarmonicityReport]:
    """Estimate u and the residuals E[u(x+X); x+X >= 0] - u(x) on xs.

    Each chunk evaluates the residual with its own partial table and its own
    draws of X, so the chunk residuals are i.i.d. replicates of the pooled
    residual (the residual is linear in the table values) and their spread
    gives an honest combined standard error.
    """
    g = np.asarray(sorted(grid), dtype=float)
    xs = np.asarray(xs, dtype=float)
    max_step = abs(float(model.x_spec[1])) if model.x_spec[0] != "gauss" else float(model.x_spec[2])
    if np.any(xs + max_step > g[-1] + 1e-9):
        raise ValueError("grid must cover x + max-step for every harmonicity point")
    checkpoints = [depth]
    sizes = chunk_sizes(replicates, chunk_size)
    if len(sizes) < 8:
        raise ValueError("need at least 8 chunks for a residual error estimate")
    salt = stream_salt("renewal:plus:harmonicity")

    def one(i):
        return _renewal_chunk(
            model, "plus", g, depth, checkpoints, sizes[i], substream(seed, salt, i),
            harmonicity_xs=xs, outer_draws=outer_draws,
        )

    parts = run_chunks(one, len(sizes), workers)
    total = sum(p["sum"] for p in parts)
    total_sq = sum(p["sum_sq"] for p in parts)
    n = sum(p["count"] for p in parts)
    mean, se = mean_stderr(total.astype(float), total_sq.astype(float), n)
    table = RenewalTable(
        side="plus",
        grid=g,
        values=1.0 + mean,
        stderr=se,
        depth=depth,
        replicates=n,
        checkpoints=np.asarray(checkpoints),
        partials=sum(p["partials"] * p["count"] for p in parts) / n,
        seed={"seed": seed, "chunk_size": chunk_size, "salt_label": "renewal:plus:harmonicity"},
    )
    resid = np.stack([p["resid"] for p in parts])
    weights = np.asarray([p["count"] for p in parts], dtype=float)[:, None] / n
    pooled = (resid * weights).sum(axis=0)
    c = len(parts)
    dev = resid - pooled[None, :]
    se_resid = np.sqrt((weights**2 * dev**2).sum(axis=0) * c / (c - 1))
    report = HarmonicityReport(xs=xs, residual=pooled, stderr=se_resid, chunks=c)
    return table, report


# --- weighted expectations under the stay-positive measure --------------------


@dataclass(frozen=True)
class PplusState:
    """Per-replicate terminal data handed to stay-positive functionals."""

    s_n: np.ndarray
    b_n: np.ndarray


def _pplus_chunk(model, g, n, x0, table, count, rng):
    s = np.full(count, float(x0))
    b = np.zeros(count)
    for _ in range(n):
        x, eta = model.sample_laws(len(s), rng)
        b = b + eta * np.exp(-s)
        s = s + x
        keep = s >= 0.0
        s = s[keep]
        b = b[keep]
    if len(s) == 0:
        return dict(sw=0.0, sw2=0.0, sgw=0.0, sgw2=0.0, sgww=0.0, alive=0, count=count, beyond=0)
    w = table.evaluate(s)
    gv = np.asarray(g(PplusState(s_n=s, b_n=b)), dtype=float)
    gw = gv * w
    return dict(
        sw=float(w.sum()),
        sw2=float((w**2).sum()),
        sgw=float(gw.sum()),
        sgw2=float((gw**2).sum()),
        sgww=float((gw * w).sum()),
        alive=len(s),
        count=count,
        beyond=int((s > table.grid[-1]).sum()),
    )


def pplus_expectation(
    model: EnvironmentModel,
    g,
    n: int,
    x0: float,
    replicates: int,
    table: RenewalTable,
    seed: int = 0,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> EstimateReport:
    """Self-normalized estimate of the stay-positive expectation of g.

    Weight = u(S_n) on {min(S_1..S_n) >= 0}; normalizing by the empirical
    weight sum makes g = 1 come out exactly 1 and absorbs the overall u(x0)
    factor. The report flags plug-in bias inputs (table depth, replicates)
    and how many terminal points needed extrapolation beyond the grid.
    """
    if x0 < 0.0:
        raise ValueError("start must be nonnegative")
    if table.side != "plus":
        raise ValueError("stay-positive weighting needs the 'plus'-side table (u)")
    sizes = chunk_sizes(replicates, chunk_size)
    salt = stream_salt(f"pplus:{n}:{x0}")

    def one(i):
        return _pplus_chunk(model, g, n, x0, table, sizes[i], substream(seed, salt, i))

    parts = run_chunks(one, len(sizes), workers)
    total = sum(p["count"] for p in parts)
    alive = sum(p["alive"] for p in parts)
    if alive == 0:
        raise RuntimeError(f"no path of length {n} stayed nonnegative in {total} replicates")
    sw = sum(p["sw"] for p in parts)
    sw2 = sum(p["sw2"] for p in parts)
    sgw = sum(p["sgw"] for p in parts)
    sgw2 = sum(p["sgw2"] for p in parts)
    sgww = sum(p["sgww"] for p in parts)
    value, se = ratio_stderr(sgw, sgw2, sw, sw2, sgww, total)
    return EstimateReport(
        value=value,
        stderr=se,
        replicates=total,
        seed={"seed": seed, "chunk_size": chunk_size, "salt_label": f"pplus:{n}:{x0}"},
        metadata={
            "alive": alive,
            "effective_weight_fraction": sw**2 / (sw2 * total) if sw2 > 0 else 0.0,
            "extrapolated_points": sum(p["beyond"] for p in parts),
            "plug_in_bias": {"table_depth": table.depth, "table_replicates": table.replicates},
        },
    )


# --- the two fluctuation weights ----------------------------------------------


@dataclass(frozen=True)
class StarTable:
    """Per-n estimates of the two extinction-rate walk weights.

    k1[i] estimates E[e^{-S_n}; min(S_1..S_n) >= 0] and k2[i] estimates
    E[e^{S_n}; first strict minimum at n] at n = n_grid[i]. `scaled_*` are
    the n^{3/2}-blowups whose stabilization the theory predicts.
    """

    n_grid: np.ndarray
    k1: np.ndarray
    k1_stderr: np.ndarray
    k2: np.ndarray
    k2_stderr: np.ndarray
    replicates: int
    seed: dict = field(default_factory=dict)

    @property
    def scaled_k1(self) -> np.ndarray:
        return self.n_grid**1.5 * self.k1

    @property
    def scaled_k1_stderr(self) -> np.ndarray:
        return self.n_grid**1.5 * self.k1_stderr

    @property
    def scaled_k2(self) -> np.ndarray:
        return self.n_grid**1.5 * self.k2

    @property
    def scaled_k2_stderr(self) -> np.ndarray:
        return self.n_grid**1.5 * self.k2_stderr

    def consecutive_ratios(self, which: str = "k1"):
        """Ratios of consecutive scaled values with propagated errors."""
        v = self.scaled_k1 if which == "k1" else self.scaled_k2
        se = self.scaled_k1_stderr if which == "k1" else self.scaled_k2_stderr
        r = v[1:] / v[:-1]
        r_se = np.abs(r) * np.sqrt((se[1:] / v[1:]) ** 2 + (se[:-1] / v[:-1]) ** 2)
        return r, r_se


def _star_chunk(model, n_grid, count, rng):
    gmax = int(n_grid[-1])
    grid_set = {int(v): i for i, v in enumerate(n_grid)}
    sums = np.zeros((2, len(n_grid)))
    sums_sq = np.zeros((2, len(n_grid)))
    s_pos = np.zeros(count)  # killed when below 0
    s_neg = np.zeros(count)  # killed when at or above 0
    for k in range(1, gmax + 1):
        if len(s_pos):
            x = model.sample_x(len(s_pos), rng)
            s_pos = s_pos + x
            s_pos = s_pos[s_pos >= 0.0]
        if len(s_neg):
            x = model.sample_x(len(s_neg), rng)
            s_neg = s_neg + x
            s_neg = s_neg[s_neg < 0.0]
        if k in grid_set:
            i = grid_set[k]
            w = np.exp(-s_pos)
            sums[0, i] = w.sum()
            sums_sq[0, i] = (w**2).sum()
            w = np.exp(s_neg)
            sums[1, i] = w.sum()
            sums_sq[1, i] = (w**2).sum()
    return sums, sums_sq, count


def star_constants(
    model: EnvironmentModel,
    n_grid,
    replicates: int,
    seed: int = 0,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> StarTable:
    """Estimate both fluctuation weights on an increasing n-grid.

    The stay-nonnegative weight is accumulated directly. The first-minimum
    weight uses the reversed-increment identity, so both reduce to killed
    walks and one pass covers the whole grid.
    """
    n_grid = np.asarray(sorted(int(v) for v in n_grid))
    if n_grid[0] < 1:
        raise ValueError("n grid must contain positive horizons")
    sizes = chunk_sizes(replicates, chunk_size)
    salt = stream_salt("star")

    def one(i):
        return _star_chunk(model, n_grid, sizes[i], substream(seed, salt, i))

    parts = run_chunks(one, len(sizes), workers)
    sums = sum(p[0] for p in parts)
    sums_sq = sum(p[1] for p in parts)
    n = sum(p[2] for p in parts)
    k1, k1_se = mean_stderr(sums[0], sums_sq[0], n)
    k2, k2_se = mean_stderr(sums[1], sums_sq[1], n)
    return StarTable(
        n_grid=n_grid.astype(float),
        k1=k1,
        k1_stderr=k1_se,
        k2=k2,
        k2_stderr=k2_se,
        replicates=n,
        seed={"seed": seed, "chunk_size": chunk_size, "salt_label": "star"},
    )
