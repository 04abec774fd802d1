"""Fractional-linear offspring laws and random-environment models.

A law is the pair (x, eta): x is the log of the offspring mean and eta is
f''(1) / (2 f'(1)^2) for its generating function f. The reciprocal of
1 - f(s) is affine in 1/(1 - s), which keeps the family closed under
composition and gives closed forms for the pmf, pgf, moments and exact
sampling: a draw is 0 with probability f(0) and otherwise geometric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import stream_salt, substream

_ENV_SALT = stream_salt("environment")


class AssumptionError(ValueError):
    """A sampled law or model violates a declared model assumption."""


@dataclass(frozen=True)
class FracLinLaw:
    """One offspring law, parameterized by log-mean x and shape eta > 0."""

    x: float
    eta: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.eta)):
            raise ValueError(f"law parameters must be finite, got x={self.x}, eta={self.eta}")
        if self.eta <= 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if math.exp(-self.x) + self.eta <= 1.0:
            raise ValueError(
                f"(x={self.x}, eta={self.eta}) is not a probability law: exp(-x)+eta must exceed 1"
            )

    @property
    def mean(self) -> float:
        return math.exp(self.x)

    @property
    def f0(self) -> float:
        """Probability of zero offspring, 1 - 1/(e^-x + eta)."""
        return 1.0 - 1.0 / (math.exp(-self.x) + self.eta)

    @property
    def q(self) -> float:
        """Geometric ratio of the positive part, eta / (e^-x + eta)."""
        d = math.exp(-self.x) + self.eta
        return self.eta / d

    def pgf(self, s):
        """E[s^xi] for s in [0, 1]."""
        s = np.asarray(s, dtype=float)
        if np.any(s < 0.0) or np.any(s > 1.0):
            raise ValueError("pgf argument must lie in [0, 1]")
        val = 1.0 - (1.0 - s) / (math.exp(-self.x) + self.eta * (1.0 - s))
        return float(val) if val.ndim == 0 else val

    def pmf(self, k: int) -> float:
        if k < 0:
            raise ValueError("offspring count must be nonnegative")
        d = math.exp(-self.x) + self.eta
        if k == 0:
            return 1.0 - 1.0 / d
        return (1.0 - self.q) * self.q ** (k - 1) / d

    def pmf_vector(self, kmax: int) -> np.ndarray:
        """pmf on 0..kmax as one array."""
        d = math.exp(-self.x) + self.eta
        out = np.empty(kmax + 1)
        out[0] = 1.0 - 1.0 / d
        k = np.arange(1, kmax + 1)
        out[1:] = (1.0 - self.q) / d * self.q ** (k - 1)
        return out

    def adaptive_kmax(self, tail_mass: float = 1e-12) -> int:
        """Smallest K whose truncated pmf misses at most tail_mass.

        The tail beyond K is exactly q^K / (e^-x + eta).
        """
        d = math.exp(-self.x) + self.eta
        if tail_mass >= 1.0 / d:
            return 1
        return max(1, math.ceil(math.log(tail_mass * d) / math.log(self.q)))

    def sample(self, rng: np.random.Generator, size=None):
        """Exact draw(s): zero w.p. f0, else geometric with ratio q on {1,2,...}."""
        nonzero = rng.random(size) < (1.0 - self.f0)
        geo = rng.geometric(1.0 - self.q, size)
        if size is None:
            return int(geo) if nonzero else 0
        return np.where(nonzero, geo, 0)

    def zeta(self, a: int = 1, rel_tol: float = 1e-15) -> float:
        """Normalized truncated second moment sum_{y>=a} y^2 pmf(y) / mean^2.

        The geometric tail is summed adaptively until it contributes less
        than rel_tol of the accumulated value.
        """
        if a < 1:
            raise ValueError("a must be a positive integer")
        d = math.exp(-self.x) + self.eta
        coeff = (1.0 - self.q) / d / self.mean**2
        total = 0.0
        y0 = a
        block = 256
        while True:
            y = np.arange(y0, y0 + block, dtype=float)
            terms = coeff * y**2 * self.q ** (y - 1)
            total += float(terms.sum())
            # remaining tail is below terms[-1] * q/(1-q) * (growing y^2 factor ~ bounded)
            if terms[-1] * self.q / (1.0 - self.q) * 4.0 < rel_tol * max(total, 1e-300):
                return total
            y0 += block
            if y0 > 10_000_000:
                raise RuntimeError("zeta truncation did not converge")


def law_from_params(x: float, eta: float) -> FracLinLaw:
    """Validate and build a law from its (x, eta) parameters."""
    return FracLinLaw(float(x), float(eta))


def pgf_eval(law: FracLinLaw, s) -> float:
    return law.pgf(s)


def pmf(law: FracLinLaw, k: int) -> float:
    return law.pmf(k)


def sample_offspring(law: FracLinLaw, rng: np.random.Generator, size=None):
    return law.sample(rng, size)


# --- environment models -----------------------------------------------------

_X_KINDS = ("uniform", "gauss", "point")
_ETA_KINDS = ("point", "uniform")


@dataclass(frozen=True)
class EnvironmentModel:
    """A named distribution over (x, eta) pairs with declared assumption data.

    x_spec is ("uniform", half_width), ("gauss", sd, cut) for a truncated
    centered Gaussian, or ("point", value). eta_spec is ("point", value) or
    ("uniform", lo, hi). Non-latticeness cannot be sampled, so models declare
    it; the continuous presets are non-lattice by construction.
    """

    name: str
    chi: float
    x_spec: tuple
    eta_spec: tuple
    nonlattice: bool
    a3_a: int = 1
    a3_eps: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.chi < 0.5):
            raise ValueError(f"chi must lie in (0, 1/2), got {self.chi}")
        if self.x_spec[0] not in _X_KINDS:
            raise ValueError(f"unknown x distribution {self.x_spec[0]!r}")
        if self.eta_spec[0] not in _ETA_KINDS:
            raise ValueError(f"unknown eta distribution {self.eta_spec[0]!r}")

    def sample_x(self, count: int, rng: np.random.Generator) -> np.ndarray:
        kind = self.x_spec[0]
        if kind == "uniform":
            half = self.x_spec[1]
            return rng.uniform(-half, half, count)
        if kind == "gauss":
            sd, cut = self.x_spec[1], self.x_spec[2]
            out = rng.normal(0.0, sd, count)
            bad = np.abs(out) > cut
            while bad.any():
                out[bad] = rng.normal(0.0, sd, int(bad.sum()))
                bad = np.abs(out) > cut
            return out
        return np.full(count, float(self.x_spec[1]))

    def sample_eta(self, count: int, rng: np.random.Generator) -> np.ndarray:
        kind = self.eta_spec[0]
        if kind == "point":
            return np.full(count, float(self.eta_spec[1]))
        return rng.uniform(self.eta_spec[1], self.eta_spec[2], count)

    def sample_laws(self, count: int, rng: np.random.Generator):
        """Draw `count` (x, eta) pairs; x first, then eta, per call."""
        return self.sample_x(count, rng), self.sample_eta(count, rng)

    def a1_violations(self) -> list[str]:
        """Static feasibility diagnostics for the A1 bounds, used by validate."""
        problems = []
        if self.eta_spec[0] == "point" and self.eta_spec[1] < self.chi:
            problems.append(
                f"eta = {self.eta_spec[1]} is below chi = {self.chi}"
            )
        if self.eta_spec[0] == "uniform" and self.eta_spec[1] < self.chi:
            problems.append(
                f"eta range starts at {self.eta_spec[1]}, below chi = {self.chi}"
            )
        return problems


def check_law_bounds(x: np.ndarray, eta: np.ndarray, chi: float) -> None:
    """Hard A1 assert on sampled laws; names the first offending law."""
    f0 = 1.0 - 1.0 / (np.exp(-x) + eta)
    bad = (f0 < chi) | (f0 > 1.0 - chi) | (eta < chi)
    if bad.any():
        i = int(np.argmax(bad))
        raise AssumptionError(
            f"law (x={x[i]:.6g}, eta={eta[i]:.6g}) violates the uniform bounds for "
            f"chi={chi}: f(0)={f0[i]:.6g}, required {chi} <= f(0) <= {1-chi} and eta >= {chi}"
        )


PRESETS = {
    "uniform-unit": dict(
        chi=0.25, x_spec=("uniform", 1.0), eta_spec=("point", 1.0), nonlattice=True
    ),
    "gauss-unit": dict(
        chi=0.2, x_spec=("gauss", 0.6, 1.2), eta_spec=("point", 1.0), nonlattice=True
    ),
    "point-mass": dict(
        chi=0.25, x_spec=("point", 0.0), eta_spec=("point", 1.0), nonlattice=False
    ),
}


def preset(name: str, **overrides) -> EnvironmentModel:
    """Build a preset model, optionally overriding chi / eta / x parameters.

    Supported overrides: chi, eta (pins eta to a constant), x_half_width
    (uniform presets), x_sd and x_cut (gauss presets), x_value (point preset).
    """
    if name not in PRESETS:
        raise ValueError(f"unknown model preset {name!r}; known: {sorted(PRESETS)}")
    params = dict(PRESETS[name])
    x_spec = list(params["x_spec"])
    eta_spec = list(params["eta_spec"])
    for key, val in overrides.items():
        if key == "chi":
            params["chi"] = float(val)
        elif key == "eta":
            eta_spec = ["point", float(val)]
        elif key == "x_half_width" and x_spec[0] == "uniform":
            x_spec[1] = float(val)
        elif key == "x_sd" and x_spec[0] == "gauss":
            x_spec[1] = float(val)
        elif key == "x_cut" and x_spec[0] == "gauss":
            x_spec[2] = float(val)
        elif key == "x_value" and x_spec[0] == "point":
            x_spec[1] = float(val)
        else:
            raise ValueError(f"override {key!r} not supported for preset {name!r}")
    return EnvironmentModel(
        name=name,
        chi=params["chi"],
        x_spec=tuple(x_spec),
        eta_spec=tuple(eta_spec),
        nonlattice=params["nonlattice"],
    )


@dataclass(frozen=True)
class EnvRealization:
    """A sampled environment: law i of the sequence is (x[i-1], eta[i-1])."""

    x: np.ndarray
    eta: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.x)

    def law(self, i: int) -> FracLinLaw:
        """The i-th law of the sequence, 1-based."""
        return FracLinLaw(float(self.x[i - 1]), float(self.eta[i - 1]))

    def walk(self) -> np.ndarray:
        """The associated random walk S_0=0, S_k = x_1 + ... + x_k."""
        s = np.empty(len(self.x) + 1)
        s[0] = 0.0
        np.cumsum(self.x, out=s[1:])
        return s


def sample_environment(
    model: EnvironmentModel, length: int, seed: int, index: int = 0
) -> EnvRealization:
    """Sample an environment, bit-exactly regenerable from (model, seed, index)."""
    rng = substream(seed, _ENV_SALT, index)
    x, eta = model.sample_laws(length, rng)
    return EnvRealization(
        x=x,
        eta=eta,
        provenance={"model": model.name, "length": length, "seed": seed, "index": index},
    )


# --- assumption checking -----------------------------------------------------


@dataclass(frozen=True)
class AssumptionsReport:
    model: str
    samples: int
    a1_pass: bool
    a1_detail: str
    a2_pass: bool
    x_mean: float
    x_mean_se: float
    x_var: float
    x_var_se: float
    nonlattice: bool
    a3_pass: bool
    a3_moment: float
    a3_moment_se: float
    a3_a: int
    a3_eps: float

    @property
    def all_pass(self) -> bool:
        return self.a1_pass and self.a2_pass and self.a3_pass

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "samples": self.samples,
            "a1": {"pass": self.a1_pass, "detail": self.a1_detail},
            "a2": {
                "pass": self.a2_pass,
                "x_mean": self.x_mean,
                "x_mean_se": self.x_mean_se,
                "x_var": self.x_var,
                "x_var_se": self.x_var_se,
                "nonlattice_declared": self.nonlattice,
            },
            "a3": {
                "pass": self.a3_pass,
                "moment": self.a3_moment,
                "moment_se": self.a3_moment_se,
                "a": self.a3_a,
                "eps": self.a3_eps,
            },
            "all_pass": self.all_pass,
        }


def check_assumptions(
    model: EnvironmentModel, samples: int, seed: int = 0, zeta_samples: int = 2000
) -> AssumptionsReport:
    """Verify the model assumptions on `samples` sampled laws.

    A1 is a hard per-law assert (raises AssumptionError naming the law).
    A2 reports moment estimates with standard errors plus the declared
    non-lattice flag. The A3 moment is a sanity computation: geometric tails
    make it finite for every law here, so it never gates.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = substream(seed, stream_salt("assumptions"), 0)
    x, eta = model.sample_laws(samples, rng)
    check_law_bounds(x, eta, model.chi)

    n = float(samples)
    x_mean = float(x.mean())
    x_var = float(x.var(ddof=1)) if samples > 1 else 0.0
    x_mean_se = math.sqrt(x_var / n) if samples > 1 else 0.0
    centered = x - x_mean
    m4 = float((centered**4).mean())
    var_of_var = max(m4 - x_var**2, 0.0)
    x_var_se = math.sqrt(var_of_var / n)

    mean_ok = abs(x_mean) <= 3.0 * x_mean_se + 1e-12
    var_ok = x_var - 3.0 * x_var_se > 0.0
    a2_pass = bool(mean_ok and var_ok and model.nonlattice)

    k = min(zeta_samples, samples)
    zvals = np.empty(k)
    for i in range(k):
        law = FracLinLaw(float(x[i]), float(eta[i]))
        z = law.zeta(model.a3_a)
        zvals[i] = math.log(max(z, 1.0)) ** (2.0 + model.a3_eps)
    a3_moment = float(zvals.mean())
    a3_se = float(zvals.std(ddof=1) / math.sqrt(k)) if k > 1 else 0.0
    a3_pass = math.isfinite(a3_moment)

    return AssumptionsReport(
        model=model.name,
        samples=samples,
        a1_pass=True,
        a1_detail=f"all {samples} sampled laws inside the chi={model.chi} bounds",
        a2_pass=a2_pass,
        x_mean=x_mean,
        x_mean_se=x_mean_se,
        x_var=x_var,
        x_var_se=x_var_se,
        nonlattice=model.nonlattice,
        a3_pass=a3_pass,
        a3_moment=a3_moment,
        a3_moment_se=a3_se,
        a3_a=model.a3_a,
        a3_eps=model.a3_eps,
    )
