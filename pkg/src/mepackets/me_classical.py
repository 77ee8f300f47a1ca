"""Classical maximum-entropy phase-space packets.

A packet is fixed by the averages Q, P and the widths dQ, dP of position
and momentum; the entropy maximizer is the factorized Gaussian. Besides the
static quantities this module evolves the moments exactly for potentials of
degree <= 2, gives short-time Taylor data for quartic potentials and
carries a seeded Monte Carlo ensemble oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .qcore import NumericalConsistencyError, ValidationError

DEGENERATE_WIDTH = 1e-12


@dataclass(frozen=True)
class MEPacketParams:
    Q: float
    P: float
    dQ: float
    dP: float
    v: float = 2 * math.pi  # phase-space cell, h = 2 pi hbar with hbar = 1

    def __post_init__(self):
        for name in ("Q", "P", "dQ", "dP", "v"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.dQ <= DEGENERATE_WIDTH or self.dP <= DEGENERATE_WIDTH:
            raise ValidationError("widths dQ, dP must be positive (delta limit excluded)")
        if self.v <= 0:
            raise ValidationError("cell volume v must be positive")

    def nu(self, hbar: float = 1.0) -> float:
        return 2 * self.dQ * self.dP / hbar

    def replace(self, **kw) -> "MEPacketParams":
        d = dict(Q=self.Q, P=self.P, dQ=self.dQ, dP=self.dP, v=self.v)
        d.update(kw)
        return MEPacketParams(**d)


@dataclass(frozen=True)
class LagrangeMultipliers:
    l1: float
    l2: float
    l3: float
    l4: float

    def __post_init__(self):
        if not (self.l3 > 0 and self.l4 > 0):
            raise ValidationError("l3 and l4 must be positive")


@dataclass(frozen=True)
class PolynomialPotential:
    """V(q) = sum_k V_k q^k / k!, k = 0..5, for a particle of mass mu."""

    coeffs: tuple = (0.0, 0.0, 0.0)
    mu: float = 1.0

    def __post_init__(self):
        c = tuple(float(x) for x in self.coeffs)
        if len(c) > 6:
            raise ValidationError("coefficients beyond V5 are not supported")
        if not all(math.isfinite(x) for x in c):
            raise ValidationError("potential coefficients must be finite")
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise ValidationError("mass must be positive")
        object.__setattr__(self, "coeffs", c + (0.0,) * (6 - len(c)))

    @classmethod
    def harmonic(cls, V2=1.0, mu=1.0, V1=0.0) -> "PolynomialPotential":
        return cls((0.0, V1, V2), mu)

    @classmethod
    def free(cls, mu=1.0) -> "PolynomialPotential":
        return cls((0.0, 0.0, 0.0), mu)

    def __getitem__(self, k: int) -> float:
        return self.coeffs[k]

    @property
    def degree(self) -> int:
        nz = [k for k, c in enumerate(self.coeffs) if c != 0.0]
        return max(nz) if nz else 0

    @property
    def is_quadratic(self) -> bool:
        return self.degree <= 2

    def value(self, q):
        q = np.asarray(q, dtype=float)
        return sum(c * q ** k / math.factorial(k) for k, c in enumerate(self.coeffs))

    def force(self, q):
        q = np.asarray(q, dtype=float)
        # Horner form of -V'(q) up to the actual degree
        a = [self.coeffs[j + 1] / math.factorial(j) for j in range(self.degree)]
        out = np.zeros_like(q)
        for c in reversed(a):
            out = out * q - c
        return out

    def energy(self, q, p):
        return np.asarray(p) ** 2 / (2 * self.mu) + self.value(q)


# ----------------------------------------------------------------------------
# static quantities

def multipliers_from_params(p: MEPacketParams) -> LagrangeMultipliers:
    return LagrangeMultipliers(
        l1=-p.Q / p.dQ ** 2,
        l2=-p.P / p.dP ** 2,
        l3=1 / (2 * p.dQ ** 2),
        l4=1 / (2 * p.dP ** 2),
    )


def log_classical_partition_function(m: LagrangeMultipliers, v: float = 2 * math.pi) -> float:
    return (math.log(math.pi / v) - 0.5 * math.log(m.l3 * m.l4)
            + m.l1 ** 2 / (4 * m.l3) + m.l2 ** 2 / (4 * m.l4))


def classical_partition_function(m: LagrangeMultipliers, v: float = 2 * math.pi) -> float:
    """Z = integral of exp(-l1 q - l2 p - l3 q^2 - l4 p^2) dq dp / v."""
    return math.exp(log_classical_partition_function(m, v))


def density_at(p: MEPacketParams, q, pm):
    """Packet distribution, normalized so that integral(rho dq dp / v) = 1."""
    q = np.asarray(q, dtype=float)
    pm = np.asarray(pm, dtype=float)
    arg = (q - p.Q) ** 2 / (2 * p.dQ ** 2) + (pm - p.P) ** 2 / (2 * p.dP ** 2)
    return p.v / (2 * math.pi * p.dQ * p.dP) * np.exp(-arg)


def _central_moment(sigma: float, j: int) -> float:
    if j % 2:
        return 0.0
    return float(np.prod(np.arange(j - 1, 0, -2))) * sigma ** j if j else 1.0


def _raw_moment(mean: float, sigma: float, k: int) -> float:
    return sum(math.comb(k, j) * mean ** (k - j) * _central_moment(sigma, j) for j in range(k + 1))


def gaussian_moment(p: MEPacketParams, k: int, l: int) -> float:
    """<q^k p^l> for the packet (k + l <= 8)."""
    if k < 0 or l < 0 or k + l > 8:
        raise ValidationError("moment order must satisfy 0 <= k + l <= 8")
    return _raw_moment(p.Q, p.dQ, k) * _raw_moment(p.P, p.dP, l)


@lru_cache(maxsize=None)
def _partition_derivative_expr(k: int, l: int):
    import sympy as sp

    l1, l2, l3, l4 = sp.symbols("l1 l2 l3 l4", positive=True)
    Z = sp.pi / sp.sqrt(l3 * l4) * sp.exp(l1 ** 2 / (4 * l3) + l2 ** 2 / (4 * l4))
    # <q^k p^l> = (1/Z)(-d/dl1)^k (-d/dl2)^l Z
    expr = sp.diff(Z, l1, k, l2, l) * (-1) ** (k + l) / Z if k + l else sp.Integer(1)
    return sp.lambdify((l1, l2, l3, l4), sp.simplify(expr), "math")


def moment_from_partition_function(p: MEPacketParams, k: int, l: int) -> float:
    """<q^k p^l> from derivatives of the partition function in l1, l2.

    Symbolic route, kept as an independent check of `gaussian_moment`.
    """
    m = multipliers_from_params(p)
    return float(_partition_derivative_expr(k, l)(m.l1, m.l2, m.l3, m.l4))


def classical_entropy(p: MEPacketParams) -> float:
    return 1.0 + math.log(2 * math.pi * p.dQ * p.dP / p.v)


# ----------------------------------------------------------------------------
# exact evolution for quadratic potentials

@dataclass(frozen=True)
class QuadraticEvolutionBasis:
    """Linear phase-space map q(t) = f0 + f1 q + f2 p, p(t) = g0 + g1 q + g2 p."""

    f0: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    g0: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    regime: str

    @property
    def determinant(self):
        return self.f1 * self.g2 - self.f2 * self.g1


def _require_quadratic(V: PolynomialPotential):
    if not V.is_quadratic:
        raise ValidationError("exact evolution needs V3 = V4 = V5 = 0")


def quadratic_basis(V: PolynomialPotential, t) -> QuadraticEvolutionBasis:
    _require_quadratic(V)
    t = np.asarray(t, dtype=float)
    V1, V2, mu = V[1], V[2], V.mu
    if V2 == 0.0:
        one, zero = np.ones_like(t), np.zeros_like(t)
        return QuadraticEvolutionBasis(
            f0=-V1 * t ** 2 / (2 * mu), f1=one, f2=t / mu,
            g0=-V1 * t, g1=zero, g2=one,
            regime="free" if V1 == 0.0 else "linear")
    if V2 > 0:
        xi = math.sqrt(mu * V2)
        w = math.sqrt(V2 / mu)
        c, s = np.cos(w * t), np.sin(w * t)
        return QuadraticEvolutionBasis(
            f0=-(V1 / V2) * (1 - c), f1=c, f2=s / xi,
            g0=-xi * (V1 / V2) * s, g1=-xi * s, g2=c,
            regime="oscillator")
    # inverted oscillator: the same construction with hyperbolic functions
    xi = math.sqrt(-mu * V2)
    k = math.sqrt(-V2 / mu)
    c, s = np.cosh(k * t), np.sinh(k * t)
    return QuadraticEvolutionBasis(
        f0=-(V1 / V2) * (1 - c), f1=c, f2=s / xi,
        g0=xi * (V1 / V2) * s, g1=xi * s, g2=c,
        regime="anti-oscillator")


@dataclass(frozen=True)
class MomentTrajectory:
    t: np.ndarray
    Q: np.ndarray
    P: np.ndarray
    dQ: np.ndarray
    dP: np.ndarray
    meta: dict = field(default_factory=dict)

    def max_abs_diff(self, other: "MomentTrajectory") -> float:
        return float(max(np.max(np.abs(getattr(self, k) - getattr(other, k)))
                         for k in ("Q", "P", "dQ", "dP")))

    def rows(self):
        return zip(self.t, self.Q, self.P, self.dQ, self.dP)


def quadratic_trajectory(p: MEPacketParams, V: PolynomialPotential, t) -> MomentTrajectory:
    """Moments along the exact flow; `meta['unbounded']` flags V2 < 0."""
    b = quadratic_basis(V, t)
    Q = b.f0 + p.Q * b.f1 + p.P * b.f2
    P = b.g0 + p.Q * b.g1 + p.P * b.g2
    dQ = np.sqrt(b.f1 ** 2 * p.dQ ** 2 + b.f2 ** 2 * p.dP ** 2)
    dP = np.sqrt(b.g1 ** 2 * p.dQ ** 2 + b.g2 ** 2 * p.dP ** 2)
    meta = {"regime": b.regime, "unbounded": b.regime == "anti-oscillator"}
    return MomentTrajectory(np.asarray(t, dtype=float), Q, P, dQ, dP, meta)


def evolve_quadratic(p: MEPacketParams, V: PolynomialPotential, t: float) -> MEPacketParams:
    """Averages and widths of the packet after time t under a quadratic V.

    The evolved distribution is generally correlated, so the result carries
    the moments, not the full distribution.
    """
    tr = quadratic_trajectory(p, V, float(t))
    return p.replace(Q=float(tr.Q), P=float(tr.P), dQ=float(tr.dQ), dP=float(tr.dP))


# ----------------------------------------------------------------------------
# Taylor data for polynomial potentials

Poly = dict  # {(i, j): coefficient of q^i p^j}


def _poly_add(a: Poly, b: Poly, s: float = 1.0) -> Poly:
    out = dict(a)
    for key, c in b.items():
        out[key] = out.get(key, 0.0) + s * c
    return {k: c for k, c in out.items() if c != 0.0}


def _poly_time_derivative(f: Poly, V: PolynomialPotential) -> Poly:
    """Poisson bracket {f, H} for H = p^2/2mu + V(q) truncated at quartic order."""
    mu = V.mu
    dV = {k - 1: V[k] / math.factorial(k - 1) for k in range(1, 5) if V[k] != 0.0}
    out: Poly = {}
    for (i, j), c in f.items():
        if i:
            out = _poly_add(out, {(i - 1, j + 1): c * i / mu})
        if j:
            for k, vk in dV.items():
                out = _poly_add(out, {(i + k, j - 1): -c * j * vk})
    return out


def point_derivative_polynomials(V: PolynomialPotential, order: int = 4) -> list[Poly]:
    """d^n p/dt^n, n = 1..order, as polynomials in the phase-space point (q, p)."""
    first = {(k - 1, 0): -V[k] / math.factorial(k - 1) for k in range(1, 5) if V[k] != 0.0}
    out = [first]
    for _ in range(order - 1):
        out.append(_poly_time_derivative(out[-1], V))
    return out


def average_polynomial(p: MEPacketParams, f: Poly) -> float:
    return float(sum(c * gaussian_moment(p, i, j) for (i, j), c in f.items()))


@dataclass(frozen=True)
class TaylorDerivatives:
    dP: tuple  # d^n P/dt^n, n = 1..4
    dQ: tuple  # d^n Q/dt^n, n = 1..4

    def predict(self, p: MEPacketParams, t: float) -> tuple[float, float]:
        """Fourth-order Taylor estimate of (Q(t), P(t))."""
        Q = p.Q + sum(d * t ** (n + 1) / math.factorial(n + 1) for n, d in enumerate(self.dQ))
        P = p.P + sum(d * t ** (n + 1) / math.factorial(n + 1) for n, d in enumerate(self.dP))
        return Q, P


def moment_taylor_derivatives(p: MEPacketParams, V: PolynomialPotential) -> TaylorDerivatives:
    """First four time derivatives of Q and P at t = 0.

    Obtained by averaging the point-particle derivatives over the packet;
    terms involving V5 and beyond are dropped.
    """
    d = [average_polynomial(p, f) for f in point_derivative_polynomials(V, 4)]
    dQ = (p.P / V.mu,) + tuple(x / V.mu for x in d[:3])
    return TaylorDerivatives(dP=tuple(d), dQ=dQ)


# ----------------------------------------------------------------------------
# Monte Carlo oracle

@dataclass(frozen=True)
class MonteCarloMoments:
    Q: float
    P: float
    dQ: float
    dP: float
    Q_se: float
    P_se: float
    dQ_se: float
    dP_se: float
    n_samples: int
    n_steps: int


CHUNK = 1 << 16


def _sample_initial(p: MEPacketParams, n: int, seed: int):
    """Initial phase points; chunked substreams make results partition-free."""
    n_chunks = -(-n // CHUNK)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    q = np.empty(n)
    pm = np.empty(n)
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        lo, hi = i * CHUNK, min(n, (i + 1) * CHUNK)
        z = rng.standard_normal((2, hi - lo))
        q[lo:hi] = p.Q + p.dQ * z[0]
        pm[lo:hi] = p.P + p.dP * z[1]
    return q, pm


def _default_steps(V: PolynomialPotential, t: float, p: MEPacketParams) -> int:
    # curvature scale from V2 plus the cubic/quartic terms at a few widths
    reach = abs(p.Q) + 6 * p.dQ
    curv = abs(V[2]) + abs(V[3]) * reach + abs(V[4]) * reach ** 2 / 2 + abs(V[5]) * reach ** 3 / 6
    w = math.sqrt(curv / V.mu)
    return max(100, math.ceil(abs(t) * w / 0.01))


def rk4_integrate(q, pm, V: PolynomialPotential, t: float, n_steps: int):
    """Classic fixed-step Runge-Kutta for Hamilton's equations (vectorized)."""
    h = t / n_steps
    mu = V.mu
    q = np.array(q, dtype=float)
    pm = np.array(pm, dtype=float)
    for _ in range(n_steps):
        k1q, k1p = pm / mu, V.force(q)
        k2q, k2p = (pm + 0.5 * h * k1p) / mu, V.force(q + 0.5 * h * k1q)
        k3q, k3p = (pm + 0.5 * h * k2p) / mu, V.force(q + 0.5 * h * k2q)
        k4q, k4p = (pm + h * k3p) / mu, V.force(q + h * k3q)
        q += h / 6 * (k1q + 2 * k2q + 2 * k3q + k4q)
        pm += h / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
    return q, pm


def _width_se(x: np.ndarray) -> tuple[float, float]:
    c = x - x.mean()
    m2 = np.mean(c * c)
    m4 = np.mean(c ** 4)
    s = math.sqrt(m2)
    se = math.sqrt(max(m4 - m2 * m2, 0.0) / len(x)) / (2 * s) if s > 0 else 0.0
    return s, se


def monte_carlo_oracle(p: MEPacketParams, V: PolynomialPotential, t: float,
                       n_samples: int = 100_000, seed: int = 0,
                       n_steps: int | None = None, return_samples: bool = False):
    """Empirical moments of a sampled ensemble after time t.

    By default the step keeps omega * step <= 0.01; an explicit `n_steps`
    overrides it. Raises NumericalConsistencyError when a quadratic potential
    shows an ensemble energy drift above 1%.
    """
    if n_samples < 1000:
        raise ValidationError("need at least 10^3 samples")
    q0, p0 = _sample_initial(p, n_samples, seed)
    steps = n_steps
    if steps is None:
        steps = _default_steps(V, t, p)
        if V[2] != 0.0:
            w = math.sqrt(abs(V[2]) / V.mu)
            steps = max(steps, math.ceil(abs(t) * w / 0.01))
    with np.errstate(over="ignore", invalid="ignore"):
        q, pm = rk4_integrate(q0, p0, V, t, steps) if t != 0 else (q0.copy(), p0.copy())
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(pm))):
        raise NumericalConsistencyError("sampled trajectories escape to infinity before time t")
    if V.is_quadratic:
        e0 = np.mean(V.energy(q0, p0))
        e1 = np.mean(V.energy(q, pm))
        scale = max(abs(e0), np.mean(p0 ** 2) / (2 * V.mu), 1e-300)
        if abs(e1 - e0) / scale > 0.01:
            raise NumericalConsistencyError(f"ensemble energy drift {abs(e1 - e0) / scale:.2%}")
    n = len(q)
    sq, sq_se = _width_se(q)
    sp_, sp_se = _width_se(pm)
    res = MonteCarloMoments(
        Q=float(q.mean()), P=float(pm.mean()), dQ=sq, dP=sp_,
        Q_se=float(q.std() / math.sqrt(n)), P_se=float(pm.std() / math.sqrt(n)),
        dQ_se=sq_se, dP_se=sp_se, n_samples=n, n_steps=steps)
    if return_samples:
        return res, (q, pm)
    return res


def finite_difference_dPdt(p: MEPacketParams, V: PolynomialPotential, h: float = 1e-3,
                           n_samples: int = 1_000_000, seed: int = 0) -> tuple[float, float]:
    """Central difference of the ensemble momentum average at t = 0.

    The same initial points are integrated to +h and -h, so the standard
    error is that of the per-sample difference quotient.
    """
    q0, p0 = _sample_initial(p, n_samples, seed)
    steps = max(4, _default_steps(V, h, p) // 10)
    _, pp = rk4_integrate(q0, p0, V, h, steps)
    _, pmn = rk4_integrate(q0, p0, V, -h, steps)
    d = (pp - pmn) / (2 * h)
    return float(d.mean()), float(d.std() / math.sqrt(len(d)))
