"""Exact log-domain algebra for composed fractional-linear generating functions.

A composition of laws k+1..n is fully described by two numbers: the walk
increment S_n - S_k (stored as neg_log_a, so the leading coefficient is
a = e^{-neg_log_a}) and the accumulated shape term b (stored as log_b).
Evaluation, survival probabilities and extinction-time pmfs all come out of
these two numbers without leaving log space, so environments whose walk
wanders hundreds of log-units stay overflow-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .offspring import EnvRealization, FracLinLaw

_LN2 = math.log(2.0)
NEG_INF = float("-inf")


def log1mexp(w):
    """log(1 - e^w) for w <= 0, stable in both tails."""
    w = np.asarray(w, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(w > -_LN2, np.log(-np.expm1(w)), np.log1p(-np.exp(w)))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Composition:
    """The pair (a, b) of a composed generating function over laws k+1..n.

    1/(1 - f_{k,n}(s)) = a/(1-s) + b with a = e^{-neg_log_a}, b = e^{log_b}.
    The empty composition (k == n) is the identity: a = 1, b = 0.
    """

    neg_log_a: float
    log_b: float
    k: int
    n: int

    def __post_init__(self):
        if self.n < self.k:
            raise ValueError(f"invalid span ({self.k}, {self.n})")
        if self.n == self.k and not (self.neg_log_a == 0.0 and self.log_b == NEG_INF):
            raise ValueError("empty composition must have a = 1, b = 0")

    @property
    def is_empty(self) -> bool:
        return self.n == self.k

    @property
    def log_survival(self) -> float:
        """log(1 - f_{k,n}(0)) = -log(a + b)."""
        return -float(np.logaddexp(-self.neg_log_a, self.log_b))

    @property
    def survival(self) -> float:
        return math.exp(self.log_survival)


def empty_composition(at: int = 0) -> Composition:
    return Composition(0.0, NEG_INF, at, at)


def extend_right(comp: Composition, law: FracLinLaw) -> Composition:
    """Append law f_{n+1} on the inside: span (k, n) -> (k, n+1)."""
    log_b = float(np.logaddexp(comp.log_b, math.log(law.eta) - comp.neg_log_a))
    return Composition(comp.neg_log_a + law.x, log_b, comp.k, comp.n + 1)


def extend_left(comp: Composition, law: FracLinLaw) -> Composition:
    """Prepend law f_k on the outside: span (k, n) -> (k-1, n)."""
    log_b = float(np.logaddexp(math.log(law.eta), comp.log_b - law.x))
    return Composition(comp.neg_log_a + law.x, log_b, comp.k - 1, comp.n)


def splice(left: Composition, right: Composition) -> Composition:
    """Join spans (k, j) and (j, n) into (k, n): a = a_l a_r, b = b_l + a_l b_r."""
    if left.n != right.k:
        raise ValueError(f"cannot splice spans ({left.k},{left.n}) and ({right.k},{right.n})")
    log_b = float(np.logaddexp(left.log_b, right.log_b - left.neg_log_a))
    return Composition(left.neg_log_a + right.neg_log_a, log_b, left.k, right.n)


def evaluate(comp: Composition, s: float) -> float:
    """f_{k,n}(s) for s in [0, 1]; s = 1 returns exactly 1."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"argument must lie in [0, 1], got {s}")
    if s == 1.0:
        return 1.0
    log_recip = np.logaddexp(-comp.neg_log_a - math.log1p(-s), comp.log_b)
    return float(-np.expm1(-log_recip))


def pgf_coefficients(comp: Composition, kmax: int) -> np.ndarray:
    """Coefficients of the composed pgf on 0..kmax.

    The composite is again fractional-linear, so the coefficients are a point
    mass at zero plus a geometric run with ratio q = b/(a+b).
    """
    if comp.is_empty:
        out = np.zeros(kmax + 1)
        if kmax >= 1:
            out[1] = 1.0
        return out
    log_ab = np.logaddexp(-comp.neg_log_a, comp.log_b)
    log_surv = -log_ab
    log_q = comp.log_b - log_ab
    log_1mq = -comp.neg_log_a - log_ab
    out = np.empty(kmax + 1)
    out[0] = -math.expm1(log_surv)
    k = np.arange(1, kmax + 1)
    out[1:] = np.exp(log_1mq + (k - 1) * log_q + log_surv)
    return out


def prefix_compositions(env: EnvRealization, n_max: int | None = None) -> list[Composition]:
    """Compositions over laws 1..m for m = 0..n_max, built in one forward sweep."""
    n_max = len(env) if n_max is None else n_max
    if n_max > len(env):
        raise ValueError("environment too short")
    out = [empty_composition(0)]
    for m in range(1, n_max + 1):
        out.append(extend_right(out[-1], env.law(m)))
    return out


@dataclass(frozen=True)
class SuffixTable:
    """Per-start compositions toward two adjacent horizons n and n+1.

    Row m holds the (neg_log_a, log_b) pairs of the spans (m, n) and
    (m, n+1), m = 0..n, along with log(eta + e^{-x} - 1) of law n+1, which
    is what the stable difference formulas need.
    """

    n: int
    nla_n: np.ndarray
    logb_n: np.ndarray
    nla_n1: np.ndarray
    logb_n1: np.ndarray
    log_xf1_next: float

    def log_surv(self, m: int, horizon: int) -> float:
        """log(1 - f_{m,horizon}(0)) for horizon n or n+1."""
        if horizon == self.n:
            return -float(np.logaddexp(-self.nla_n[m], self.logb_n[m]))
        if horizon == self.n + 1:
            return -float(np.logaddexp(-self.nla_n1[m], self.logb_n1[m]))
        raise ValueError(f"table holds horizons {self.n} and {self.n + 1}")

    def f0(self, m: int, horizon: int) -> float:
        return -math.expm1(self.log_surv(m, horizon))


def build_suffix_table(env: EnvRealization, n: int) -> SuffixTable:
    """Backward O(n) sweep building all suffix spans for horizons n and n+1."""
    if len(env) < n + 1:
        raise ValueError(f"need {n + 1} laws, environment has {len(env)}")
    nla_n = np.zeros(n + 1)
    logb_n = np.full(n + 1, NEG_INF)
    nla_n1 = np.zeros(n + 1)
    logb_n1 = np.full(n + 1, NEG_INF)

    comp = empty_composition(n)
    for m in range(n - 1, -1, -1):
        comp = extend_left(comp, env.law(m + 1))
        nla_n[m] = comp.neg_log_a
        logb_n[m] = comp.log_b

    law_next = env.law(n + 1)
    comp = extend_left(empty_composition(n + 1), law_next)
    nla_n1[n] = comp.neg_log_a
    logb_n1[n] = comp.log_b
    for m in range(n - 1, -1, -1):
        comp = extend_left(comp, env.law(m + 1))
        nla_n1[m] = comp.neg_log_a
        logb_n1[m] = comp.log_b

    log_xf1 = math.log(math.expm1(-law_next.x) + law_next.eta)
    return SuffixTable(
        n=n, nla_n=nla_n, logb_n=logb_n, nla_n1=nla_n1, logb_n1=logb_n1, log_xf1_next=log_xf1
    )


@dataclass(frozen=True)
class ExtinctionPmf:
    """Extinction-time distribution under a fixed environment."""

    pmf: np.ndarray  # pmf[k-1] = P(T = k | environment), k = 1..n_max
    survival: float  # P(T > n_max | environment)

    @property
    def total(self) -> float:
        return float(self.pmf.sum()) + self.survival


def extinction_pmf_given_env(env: EnvRealization, n_max: int | None = None) -> ExtinctionPmf:
    """P(T = k | environment) for k = 1..n_max plus the survival remainder.

    Each mass is computed as the product
    survival(k-1) * survival(k) * e^{-S_{k-1}} * (e^{-x_k} + eta_k - 1),
    which is positive term by term and immune to the cancellation that the
    naive difference of survival probabilities suffers from.
    """
    n_max = len(env) if n_max is None else n_max
    if n_max < 1 or n_max > len(env):
        raise ValueError("n_max must be between 1 and the environment length")
    pmf = np.empty(n_max)
    s_prev = 0.0  # S_{k-1}
    log_surv_prev = 0.0  # log survival of the empty span
    nla, logb = 0.0, NEG_INF
    for k in range(1, n_max + 1):
        x_k = float(env.x[k - 1])
        eta_k = float(env.eta[k - 1])
        logb = float(np.logaddexp(logb, math.log(eta_k) - nla))
        nla += x_k
        log_surv = -float(np.logaddexp(-nla, logb))
        log_xf1 = math.log(math.expm1(-x_k) + eta_k)
        pmf[k - 1] = math.exp(log_surv_prev + log_surv - s_prev + log_xf1)
        s_prev = nla
        log_surv_prev = log_surv
    return ExtinctionPmf(pmf=pmf, survival=math.exp(log_surv_prev))
