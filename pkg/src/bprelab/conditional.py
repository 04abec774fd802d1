"""Environment-conditional laws on the event that extinction hits at n+1.

Two complementary routes are provided. The algebraic route computes, for a
fixed environment, the exact transform E[s^{Z_m}; T=n+1 | env] and the exact
per-generation marginal (a normalized difference of two geometric series),
and scales to horizons of thousands because everything stays in log space.
The simulation route rejection-samples whole conditioned trajectories, which
is the only way to get joint path functionals but is limited to moderate n
(acceptance decays like n^{-3/2}).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .genfun import Composition, SuffixTable, NEG_INF, log1mexp
from .offspring import EnvironmentModel, FracLinLaw
from .reports import EstimateReport, ratio_stderr
from .rng import DEFAULT_CHUNK_SIZE, chunk_sizes, run_chunks, stream_salt, substream


def _delta_log(s_n, log_b, f0_next, s):
    """log of E[s^{Z_n}; T=n+1 | env prefix, next law], vectorized.

    Arguments are the prefix walk endpoint S_n, the prefix log b, the
    zero-offspring probability of the (n+1)-th law, and s in (0, 1].
    """
    with np.errstate(divide="ignore"):
        l1 = np.logaddexp(-s_n, log_b)
        log_sf = np.log(s) + np.log(f0_next)
        log_1msf = np.log1p(-s * f0_next)
        l2 = np.logaddexp(-s_n - log_1msf, log_b)
        return -l1 - l2 + log_sf - log_1msf - s_n


def delta_n(comp: Composition, law: FracLinLaw, s: float) -> float:
    """E[s^{Z_n}; T=n+1 | env prefix, f_{n+1} = law]; at s=1 this is the
    conditional probability of extinction exactly at n+1."""
    if comp.k != 0:
        raise ValueError("prefix composition must span (0, n)")
    if not 0.0 <= s <= 1.0:
        raise ValueError("s must lie in [0, 1]")
    if s == 0.0:
        return 0.0
    return float(np.exp(_delta_log(comp.neg_log_a, comp.log_b, law.f0, s)))


def _transform_log(s, nla_p, logb_p, log_surv_lo, log_surv_hi, log_amb):
    """log of E[s^{Z_m}; T=n+1 | env] from prefix (0,m) data and the two
    suffix survival logs (horizons n and n+1) plus log(alpha - beta).

    Uses the cancellation-free difference of two evaluations of the prefix
    generating function: f(u1) - f(u2) = a (u1-u2) / ((a + b(1-u1))(a + b(1-u2))),
    with 1 - s*alpha computed as (1-s) + s*(1 - alpha).
    """
    with np.errstate(divide="ignore"):
        log_s = np.log(s)
        log_1msa = np.logaddexp(np.log1p(-s), log_s + log_surv_hi)
        log_1msb = np.logaddexp(np.log1p(-s), log_s + log_surv_lo)
    d1 = np.logaddexp(-nla_p, logb_p + log_1msa)
    d2 = np.logaddexp(-nla_p, logb_p + log_1msb)
    return log_s - nla_p + log_amb - d1 - d2


def log_alpha_minus_beta(table: SuffixTable, m: int) -> float:
    """log(f_{m,n+1}(0) - f_{m,n}(0)) as a product of positive factors."""
    ls0 = table.log_surv(m, table.n)
    ls1 = table.log_surv(m, table.n + 1)
    return float(-table.nla_n[m] + table.log_xf1_next + ls0 + ls1)


def conditional_marginal_transform(
    table: SuffixTable, prefix: Composition, m: int, n: int, s: float
) -> float:
    """E[s^{Z_m}; T=n+1 | env]; at s=1 it reduces to P(T=n+1 | env)."""
    if n != table.n:
        raise ValueError(f"table was built for horizon {table.n}, got {n}")
    if not 0 <= m <= n:
        raise ValueError("generation index must satisfy 0 <= m <= n")
    if prefix.k != 0 or prefix.n != m:
        raise ValueError(f"prefix must span (0, {m})")
    if not 0.0 <= s <= 1.0:
        raise ValueError("s must lie in [0, 1]")
    if s == 0.0:
        return 0.0
    val = _transform_log(
        s,
        prefix.neg_log_a,
        prefix.log_b,
        table.log_surv(m, n),
        table.log_surv(m, n + 1),
        log_alpha_minus_beta(table, m),
    )
    return float(np.exp(val))


@dataclass(frozen=True)
class ConditionalMarginal:
    """Exact law of Z_m given the environment and extinction at n+1.

    pmf(k) = q^{k-1} (alpha^k - beta^k) / norm on k = 1, 2, ..., where
    alpha and beta are the suffix extinction probabilities toward horizons
    n+1 and n and q is the geometric ratio of the prefix composite.
    """

    m: int
    n: int
    alpha: float
    beta: float
    q: float
    norm: float
    log_amb: float | None = None  # log(alpha - beta); defaults to the naive log

    def __post_init__(self):
        if not 0.0 <= self.beta < self.alpha < 1.0:
            raise ValueError(
                f"conditioning event has zero mass at (m={self.m}, n={self.n}): "
                f"alpha={self.alpha}, beta={self.beta}"
            )
        if not 0.0 <= self.q < 1.0:
            raise ValueError(f"geometric ratio out of range: {self.q}")
        if not (self.norm > 0.0 and math.isfinite(self.norm)):
            raise ValueError(
                f"marginal normalizer underflowed at (m={self.m}, n={self.n}, "
                f"q={self.q}, alpha={self.alpha}, beta={self.beta}): norm={self.norm}"
            )
        if self.log_amb is None:
            object.__setattr__(self, "log_amb", math.log(self.alpha - self.beta))

    def _partial(self, kk: float) -> float:
        """Unnormalized cdf through k, via closed geometric partial sums."""
        return self.alpha * _geom_partial(self.q * self.alpha, kk) - self.beta * _geom_partial(
            self.q * self.beta, kk
        )

    def pmf(self, k) -> np.ndarray:
        k = np.asarray(k)
        if np.any(k < 1):
            raise ValueError("support is {1, 2, ...}")
        val = self.q ** (k - 1.0) * (self.alpha**k - self.beta**k) / self.norm
        return float(val) if val.ndim == 0 else val

    def pmf_vector(self, kmax: int) -> np.ndarray:
        return self.pmf(np.arange(1, kmax + 1))

    def mean(self) -> float:
        a, b, q = self.alpha, self.beta, self.q
        return (a / (1.0 - q * a) ** 2 - b / (1.0 - q * b) ** 2) / self.norm

    def sample(self, rng: np.random.Generator, size=None):
        """Exact inverse-cdf draw(s) by bisection on the closed-form cdf."""
        if size is None:
            return self._sample_one(rng)
        return np.array([self._sample_one(rng) for _ in range(size)])

    def _sample_one(self, rng) -> int:
        target = rng.random() * self.norm
        hi = 1
        while self._partial(hi) < target and hi < (1 << 62):
            hi *= 2
        lo = 0  # invariant: partial(lo) < target <= partial(hi)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self._partial(mid) < target:
                lo = mid
            else:
                hi = mid
        return hi


def _geom_partial(r: float, k: float) -> float:
    """(1 - r^k) / (1 - r) for r in [0, 1], stable as r -> 1."""
    if r >= 1.0:
        return float(k)
    if r == 0.0:
        return 1.0 if k >= 1 else 0.0
    return -math.expm1(k * math.log(r)) / (1.0 - r)


def marginal_from_tables(table: SuffixTable, prefix: Composition, m: int) -> ConditionalMarginal:
    """Build the conditional marginal of Z_m from suffix and prefix data."""
    if prefix.k != 0 or prefix.n != m:
        raise ValueError(f"prefix must span (0, {m})")
    alpha = table.f0(m, table.n + 1)
    beta = table.f0(m, table.n)
    if prefix.is_empty:
        q = 0.0
    else:
        q = math.exp(prefix.log_b - np.logaddexp(-prefix.neg_log_a, prefix.log_b))
    log_amb = log_alpha_minus_beta(table, m)
    norm = math.exp(log_amb) / ((1.0 - q * alpha) * (1.0 - q * beta))
    return ConditionalMarginal(
        m=m, n=table.n, alpha=alpha, beta=beta, q=q, norm=norm, log_amb=log_amb
    )


def sample_Zm_given_T(marginal: ConditionalMarginal, rng: np.random.Generator, size=None):
    return marginal.sample(rng, size)


# --- joint path simulation by rejection ---------------------------------------


@dataclass(frozen=True)
class PathSample:
    """One forward-simulated trajectory and its environment walk."""

    z: np.ndarray  # generation sizes Z_0..Z_stop
    s: np.ndarray  # walk S_0..S_stop
    accepted: bool  # extinct exactly at n+1
    discarded: bool  # population cap exceeded; excluded from estimates
    provenance: dict = field(default_factory=dict)


def _population_step(z, f0, q, rng):
    """Vectorized one-generation totals for populations z under laws (f0, q).

    Each parent contributes 0 with probability f0, else a geometric number
    of children; the nonzero parents' total is their count plus a negative
    binomial overshoot.
    """
    z = np.asarray(z)
    litters = rng.binomial(z, 1.0 - f0)
    total = litters.astype(np.int64)
    pos = litters > 0
    if np.any(pos):
        qq = q[pos] if np.ndim(q) else q
        total[pos] += rng.negative_binomial(litters[pos], 1.0 - qq)
    return total


def rejection_joint_path(
    model: EnvironmentModel,
    n: int,
    rng: np.random.Generator,
    max_pop: int = 1_000_000_000,
) -> PathSample:
    """One forward attempt; accepted iff the line dies exactly at n+1."""
    if n < 1:
        raise ValueError("horizon must be >= 1")
    if max_pop < 1:
        raise ValueError("population cap must be positive")
    z = [1]
    s = [0.0]
    discarded = False
    for _ in range(1, n + 2):
        x, eta = model.sample_laws(1, rng)
        law = FracLinLaw(float(x[0]), float(eta[0]))
        nxt = int(_population_step(np.array([z[-1]]), law.f0, law.q, rng)[0])
        z.append(nxt)
        s.append(s[-1] + law.x)
        if nxt == 0:
            break
        if nxt > max_pop:
            discarded = True
            break
    z = np.array(z, dtype=np.int64)
    s = np.array(s)
    accepted = (not discarded) and len(z) == n + 2 and z[n] >= 1 and z[n + 1] == 0
    return PathSample(z=z, s=s, accepted=accepted, discarded=discarded)


@dataclass(frozen=True)
class ConditionedPaths:
    """Accepted joint paths of the event {extinct exactly at n+1}."""

    n: int
    z: np.ndarray  # (accepted, n+2) generation sizes
    s: np.ndarray  # (accepted, n+2) walk values
    attempts: int
    discards: int
    batches: int
    seed: dict = field(default_factory=dict)

    @property
    def accepted(self) -> int:
        return self.z.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0

    def y_values(self, indices) -> np.ndarray:
        """Rescaled populations Z_m e^{-S_m} at the given generation indices."""
        idx = np.asarray(indices, dtype=int)
        return self.z[:, idx] * np.exp(-self.s[:, idx])


def _rejection_chunk(model, n, count, rng, max_pop):
    z_hist = np.zeros((count, n + 2), dtype=np.int64)
    s_hist = np.zeros((count, n + 2))
    z_hist[:, 0] = 1
    alive = np.arange(count)
    z = np.ones(count, dtype=np.int64)
    s = np.zeros(count)
    bad = np.zeros(count, dtype=bool)
    for g in range(1, n + 2):
        if len(alive) == 0:
            break
        x, eta = model.sample_laws(len(alive), rng)
        f0 = 1.0 - 1.0 / (np.exp(-x) + eta)
        q = eta / (np.exp(-x) + eta)
        z = _population_step(z, f0, q, rng)
        s = s + x
        z_hist[alive, g] = z
        s_hist[alive, g] = s
        over = z > max_pop
        if np.any(over):
            bad[alive[over]] = True
        keep = (z > 0) & ~over
        alive = alive[keep]
        z = z[keep]
        s = s[keep]
    ok = (z_hist[:, n] >= 1) & (z_hist[:, n + 1] == 0) & ~bad
    return z_hist[ok], s_hist[ok], count, int(bad.sum())


def sample_conditioned_paths(
    model: EnvironmentModel,
    n: int,
    target_accepted: int,
    seed: int = 0,
    batch: int = DEFAULT_CHUNK_SIZE,
    max_batches: int = 5000,
    max_pop: int = 1_000_000_000,
    workers: int = 1,
) -> ConditionedPaths:
    """Collect at least `target_accepted` conditioned paths by rejection.

    Batches are processed in index order and the ensemble is the prefix of
    batches whose cumulative acceptances first reach the target, so the
    result does not depend on the worker count. If the batch budget runs out
    the ensemble is returned short (callers flag it as partial).
    """
    salt = stream_salt(f"reject:{n}")
    zs, ss = [], []
    got = attempts = discards = batches = 0
    wave = max(workers, 1)
    while got < target_accepted and batches < max_batches:
        todo = list(range(batches, min(batches + wave, max_batches)))

        def one(i):
            return _rejection_chunk(model, n, batch, substream(seed, salt, i), max_pop)

        for zh, sh, cnt, dsc in run_chunks(lambda j: one(todo[j]), len(todo), workers):
            batches += 1
            attempts += cnt
            discards += dsc
            zs.append(zh)
            ss.append(sh)
            got += zh.shape[0]
            if got >= target_accepted:
                break
    return ConditionedPaths(
        n=n,
        z=np.concatenate(zs) if zs else np.zeros((0, n + 2), dtype=np.int64),
        s=np.concatenate(ss) if ss else np.zeros((0, n + 2)),
        attempts=attempts,
        discards=discards,
        batches=batches,
        seed={"seed": seed, "batch": batch, "salt_label": f"reject:{n}"},
    )


# --- Laplace transform of the rescaled population, environment-exact ----------


def _laplace_chunk(model, n, m, lam, count, rng):
    """Chunk sums for E[e^{-lam * Z_m e^{-S_m}}; T=n+1] and P(T=n+1).

    One forward pass accumulates the prefix composite to m, then continues
    with a second accumulator for the suffix span (m, n); extending both by
    the drawn (n+1)-th law yields every ingredient of the exact transform.
    """
    s = np.zeros(count)
    logb = np.full(count, NEG_INF)
    for _ in range(m):
        x, eta = model.sample_laws(count, rng)
        logb = np.logaddexp(logb, np.log(eta) - s)
        s = s + x
    s_m = s.copy()
    logb_m = logb.copy()
    logb_suf = np.full(count, NEG_INF)
    for _ in range(m, n):
        x, eta = model.sample_laws(count, rng)
        logb = np.logaddexp(logb, np.log(eta) - s)
        logb_suf = np.logaddexp(logb_suf, np.log(eta) - (s - s_m))
        s = s + x
    x1, eta1 = model.sample_laws(count, rng)
    log_eta1 = np.log(eta1)
    log_xf1 = np.log(np.expm1(-x1) + eta1)

    # full span (0, n+1) for the denominator P(T=n+1 | env)
    log_surv_n = -np.logaddexp(-s, logb)
    logb_full1 = np.logaddexp(logb, log_eta1 - s)
    log_surv_n1 = -np.logaddexp(-(s + x1), logb_full1)
    log_den = log_surv_n + log_surv_n1 - s + log_xf1
    den = np.exp(log_den)

    # suffix spans (m, n) and (m, n+1)
    nla_suf = s - s_m
    log_ssurv_n = -np.logaddexp(-nla_suf, logb_suf)
    logb_suf1 = np.logaddexp(logb_suf, log_eta1 - nla_suf)
    log_ssurv_n1 = -np.logaddexp(-(nla_suf + x1), logb_suf1)
    log_amb = -nla_suf + log_xf1 + log_ssurv_n + log_ssurv_n1

    # transform at s(lam) = exp(-lam e^{-S_m}), all in log space
    with np.errstate(over="ignore"):
        log_s = -lam * np.exp(-s_m)
    log_1msa = np.logaddexp(log1mexp(log_s), log_s + log_ssurv_n1)
    log_1msb = np.logaddexp(log1mexp(log_s), log_s + log_ssurv_n)
    d1 = np.logaddexp(-s_m, logb_m + log_1msa)
    d2 = np.logaddexp(-s_m, logb_m + log_1msb)
    num = np.exp(log_s - s_m + log_amb - d1 - d2)

    return (
        float(num.sum()),
        float((num**2).sum()),
        float(den.sum()),
        float((den**2).sum()),
        float((num * den).sum()),
        count,
    )


def laplace_Yt_given_T(
    model: EnvironmentModel,
    n: int,
    t: float,
    lam: float,
    replicates: int,
    seed: int = 0,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> EstimateReport:
    """E[exp(-lam Z_{[nt]} e^{-S_{[nt]}}) | T = n+1] by environment-exact MC.

    Numerator and denominator are exact given each sampled environment; no
    path simulation is involved. lam = 0 returns exactly 1.
    """
    if not 0.0 < t < 1.0:
        raise ValueError("t must lie in (0, 1)")
    if lam < 0.0:
        raise ValueError("lam must be nonnegative")
    m = int(math.floor(n * t))
    if m < 1 or m > n:
        raise ValueError(f"floor(n t) = {m} is outside 1..{n}")
    seed_rec = {"seed": seed, "chunk_size": chunk_size, "salt_label": f"laplace:{n}:{m}"}
    if lam == 0.0:
        return EstimateReport(
            value=1.0, stderr=0.0, replicates=0, seed=seed_rec, metadata={"exact": "lam=0"}
        )
    sizes = chunk_sizes(replicates, chunk_size)
    salt = stream_salt(f"laplace:{n}:{m}")

    def one(i):
        return _laplace_chunk(model, n, m, lam, sizes[i], substream(seed, salt, i))

    parts = run_chunks(one, len(sizes), workers)
    sn = sum(p[0] for p in parts)
    sn2 = sum(p[1] for p in parts)
    sd = sum(p[2] for p in parts)
    sd2 = sum(p[3] for p in parts)
    snd = sum(p[4] for p in parts)
    total = sum(p[5] for p in parts)
    value, se = ratio_stderr(sn, sn2, sd, sd2, snd, total)
    ess = sd**2 / sd2 if sd2 > 0 else 0.0
    return EstimateReport(
        value=value,
        stderr=se,
        replicates=total,
        seed=seed_rec,
        metadata={
            "n": n, "t": t, "m": m, "lam": lam,
            "denominator_ess": ess,
            "flag_denominator_collapse": bool(ess < 50.0),
        },
    )
