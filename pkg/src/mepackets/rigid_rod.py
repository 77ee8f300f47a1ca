"""Harmonic chain of N point masses as a model of a rigid rod.

Nearest-neighbour springs H = sum p_n^2/2mu + (kappa^2/2) sum (x_{n+1} - x_n - xi)^2
decouple into a centre-of-mass mode and N - 1 phonon modes. The internal
state is the Gibbs state of the phonons at multiplier lambda; the rod
length depends only on the odd modes.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import me_classical as mc
from . import me_quantum as mq
from .qcore import NumericalConsistencyError, ValidationError


@dataclass(frozen=True)
class ChainSpec:
    N: int
    mu: float = 1.0
    kappa: float = 1.0
    xi: float = 1.0
    hbar: float = 1.0

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValidationError("chain needs N >= 2 particles")
        for name in ("mu", "kappa", "xi", "hbar"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")

    def replace(self, **kw) -> "ChainSpec":
        d = dict(N=self.N, mu=self.mu, kappa=self.kappa, xi=self.xi, hbar=self.hbar)
        d.update(kw)
        return ChainSpec(**d)


@dataclass(frozen=True)
class NormalModes:
    Y: np.ndarray  # Y[n, m]: particle n (0-based) in mode m
    omega: np.ndarray


@dataclass(frozen=True)
class RodGibbs:
    lam: float
    occupations: np.ndarray  # per mode, index 0 (centre of mass) is 0
    omega: np.ndarray

    def with_occupations(self, occ) -> "RodGibbs":
        return RodGibbs(self.lam, np.asarray(occ, dtype=float), self.omega)


def mode_frequencies(spec: ChainSpec) -> np.ndarray:
    m = np.arange(spec.N)
    return 2 * spec.kappa / math.sqrt(spec.mu) * np.sin(m * math.pi / (2 * spec.N))


def mode_amplitude(spec: ChainSpec, n, m):
    """Y^m_n with particle index n = 1..N: cosine for even m, sine for odd m."""
    N = spec.N
    n = np.asarray(n, dtype=float)
    m = np.asarray(m)
    A = np.where(m == 0, 1 / math.sqrt(N), math.sqrt(2 / N))
    arg = math.pi * m / N * (n - (N + 1) / 2)
    return A * np.where(m % 2 == 0, np.cos(arg), np.sin(arg))


def build_modes(spec: ChainSpec) -> NormalModes:
    """Orthogonal mode matrix and spectrum (dense, so meant for moderate N)."""
    n = np.arange(1, spec.N + 1)[:, None]
    m = np.arange(spec.N)[None, :]
    return NormalModes(Y=mode_amplitude(spec, n, m), omega=mode_frequencies(spec))


def stiffness_matrix(spec: ChainSpec) -> np.ndarray:
    """Matrix of the quadratic form (kappa^2/2) sum (u_{n+1} - u_n)^2, times 2."""
    N = spec.N
    D = np.diff(np.eye(N), axis=0)
    return spec.kappa ** 2 * D.T @ D


def bose_occupation(lam: float, hbar: float, omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    out = np.zeros_like(omega)
    pos = omega > 0
    with np.errstate(over="ignore"):
        out[pos] = 1.0 / np.expm1(lam * hbar * omega[pos])
    return out


def rod_gibbs(spec: ChainSpec, lam: float) -> RodGibbs:
    if not lam > 0:
        raise ValidationError("lambda must be positive")
    w = mode_frequencies(spec)
    return RodGibbs(float(lam), bose_occupation(lam, spec.hbar, w), w)


def internal_energy(spec: ChainSpec, lam: float) -> float:
    w = mode_frequencies(spec)[1:]
    return float(np.sum(spec.hbar * w * bose_occupation(lam, spec.hbar, w)))


def solve_lambda(spec: ChainSpec, E: float, rtol: float = 1e-12) -> RodGibbs:
    """Multiplier lambda whose Gibbs state has internal energy E."""
    if not E > 0:
        raise ValidationError("internal energy must be positive for a finite lambda")
    scale = spec.hbar * mode_frequencies(spec)[1]
    lo, hi = 1e-12 / scale, 1e6 / scale

    def f(loglam):
        e = internal_energy(spec, math.exp(loglam))
        return math.log(e / E) if e > 0 else -math.inf

    for _ in range(200):
        if f(math.log(lo)) > 0:
            break
        lo *= 1e-3
    else:
        raise NumericalConsistencyError("could not bracket lambda from below")
    for _ in range(200):
        if f(math.log(hi)) < 0:
            break
        if lam_too_large(spec, hi):
            raise NumericalConsistencyError("energy underflows before it reaches E")
        hi *= 10
    else:
        raise NumericalConsistencyError("could not bracket lambda from above")
    loglam = optimize.bisect(f, math.log(lo), math.log(hi), xtol=1e-15, rtol=rtol, maxiter=500)
    lam = math.exp(loglam)
    if lam * scale > 50:
        warnings.warn(f"lambda*hbar*omega_1 = {lam * scale:.1f}: essentially zero temperature",
                      RuntimeWarning, stacklevel=2)
    return rod_gibbs(spec, lam)


def lam_too_large(spec: ChainSpec, lam: float) -> bool:
    return lam * spec.hbar * mode_frequencies(spec)[1] > 700


def odd_mode_coefficients(spec: ChainSpec) -> tuple[np.ndarray, np.ndarray]:
    """Odd mode indices and squared weights (Y^m_N - Y^m_1)^2 in the length."""
    N = spec.N
    m = np.arange(1, N, 2)
    return m, 8.0 / N * np.cos(m * math.pi / (2 * N)) ** 2


def length_statistics(spec: ChainSpec, g: RodGibbs) -> tuple[float, float]:
    """<L> and Var(L) in the Gibbs state.

    Only modes odd under reflection about the centre move the end points
    apart, so even-mode occupations never enter.
    """
    mean = (spec.N - 1) * spec.xi
    m, c2 = odd_mode_coefficients(spec)
    w = g.omega[m]
    u2 = spec.hbar * (2 * g.occupations[m] + 1) / (2 * spec.mu * w)
    return mean, float(np.sum(c2 * u2))


def energy_relative_variance(spec: ChainSpec, g: RodGibbs) -> float:
    hw = spec.hbar * g.omega[1:]
    n = g.occupations[1:]
    E = np.sum(hw * n)
    return float(np.sum(hw ** 2 * n * (n + 1)) / E ** 2)


def asymptotic_constant(spec: ChainSpec, lam: float) -> float:
    """Large-N value of sqrt(N) dL/<L> stated for the classical regime."""
    return 2 * math.sqrt(3) / (math.pi * spec.kappa * spec.xi * math.sqrt(lam))


def high_temperature_constant(spec: ChainSpec, lam: float) -> float:
    """sqrt(N) dL/<L> as N -> inf from the equipartition sum, 1/(kappa xi sqrt(lam))."""
    return 1.0 / (spec.kappa * spec.xi * math.sqrt(lam))


@dataclass(frozen=True)
class ScanRow:
    N: int
    mean_L: float
    rel_dL: float
    sqrtN_rel: float


def n_scan(spec: ChainSpec, Ns, lam: float) -> list[ScanRow]:
    rows = []
    for N in Ns:
        s = spec.replace(N=int(N))
        mean, var = length_statistics(s, rod_gibbs(s, lam))
        rel = math.sqrt(var) / mean
        rows.append(ScanRow(int(N), mean, rel, math.sqrt(N) * rel))
    return rows


def bulk_motion(spec: ChainSpec, cm_packet: mc.MEPacketParams, t: float,
                quantum: bool = False) -> mc.MEPacketParams:
    """Free motion of the centre of mass, total mass N mu."""
    V = mc.PolynomialPotential.free(mu=spec.N * spec.mu)
    if quantum:
        pkt = mq.QuantumMEPacket(cm_packet, spec.hbar)
        return mq.evolve_quadratic_quantum(pkt, V, t).params
    return mc.evolve_quadratic(cm_packet, V, t)
