"""Quantum maximum-entropy packets.

The entropy maximizer with given <q>, <p>, <q^2>, <p^2> is a thermal state
of the auxiliary oscillator

    K = (dP/dQ)(q - Q)^2/2 + (dQ/dP)(p - P)^2/2,

diagonal in its number basis with geometric weights
R_m = 2 (nu - 1)^m / (nu + 1)^(m + 1), nu = 2 dQ dP / hbar. In that basis

    q = Q + (dQ/sqrt(nu)) (A + A†),   p = P - i (dP/sqrt(nu)) (A - A†).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import Polynomial

from . import me_classical as mc
from .me_classical import MEPacketParams, MomentTrajectory, PolynomialPotential
from .qcore import (NumericalConsistencyError, OscillatorBasis, StateOperator,
                    ValidationError, annihilation, hermite_functions)

NU_TOL = 1e-12
TAIL_TOL = 1e-12
MAX_WORD = 6


class MultiplierDivergenceError(ValidationError):
    """Quantum multipliers diverge as nu -> 1."""


@dataclass(frozen=True)
class QuantumMEPacket:
    params: MEPacketParams
    hbar: float = 1.0

    def __post_init__(self):
        if not self.hbar > 0:
            raise ValidationError("hbar must be positive")
        if self.nu < 1 - NU_TOL:
            raise ValidationError(f"uncertainty bound violated: nu = {self.nu!r} < 1")

    @classmethod
    def from_moments(cls, Q, P, dQ, dP, hbar=1.0) -> "QuantumMEPacket":
        return cls(MEPacketParams(Q, P, dQ, dP, v=2 * math.pi * hbar), hbar)

    @classmethod
    def from_nu(cls, nu, Q=0.0, P=0.0, dQ=1.0, hbar=1.0) -> "QuantumMEPacket":
        return cls.from_moments(Q, P, dQ, nu * hbar / (2 * dQ), hbar)

    @property
    def nu(self) -> float:
        return 2 * self.params.dQ * self.params.dP / self.hbar

    @property
    def alpha(self) -> float:
        return self.params.dQ / math.sqrt(max(self.nu, 1.0))

    @property
    def beta(self) -> float:
        return self.params.dP / math.sqrt(max(self.nu, 1.0))


@dataclass(frozen=True)
class QuantumMultipliers:
    l1: float
    l2: float
    l3: float
    l4: float


def _log_ratio(nu: float) -> float:
    """ln((nu + 1)/(nu - 1)), accurate for large nu."""
    return math.log1p(2.0 / (nu - 1.0))


def quantum_multipliers(pkt: QuantumMEPacket) -> QuantumMultipliers:
    nu = pkt.nu
    if nu <= 1 + 1e-9:
        raise MultiplierDivergenceError("multipliers diverge for nu -> 1")
    f = 0.5 * nu * _log_ratio(nu)
    c = mc.multipliers_from_params(pkt.params)
    return QuantumMultipliers(c.l1 * f, c.l2 * f, c.l3 * f, c.l4 * f)


def log_quantum_partition_function(m: QuantumMultipliers, hbar: float = 1.0) -> float:
    if not (m.l3 > 0 and m.l4 > 0):
        raise ValidationError("need l3 * l4 > 0")
    x = hbar * math.sqrt(m.l3 * m.l4)
    log_2sinh = x + math.log1p(-math.exp(-2 * x))
    return m.l1 ** 2 / (4 * m.l3) + m.l2 ** 2 / (4 * m.l4) - log_2sinh


def quantum_partition_function(m: QuantumMultipliers, hbar: float = 1.0) -> float:
    return math.exp(log_quantum_partition_function(m, hbar))


def quantum_entropy(nu: float) -> float:
    if nu < 1 - NU_TOL:
        raise ValidationError("entropy defined for nu >= 1")
    nu = max(nu, 1.0)
    lower = 0.0 if nu == 1.0 else 0.5 * (nu - 1) * math.log(nu - 1)
    return -math.log(2.0) + 0.5 * (nu + 1) * math.log(nu + 1) - lower


def eigenvalues(nu: float, levels: int) -> np.ndarray:
    """R_m for m < levels."""
    m = np.arange(levels)
    if nu <= 1.0:
        return (m == 0).astype(float)
    r = (nu - 1) / (nu + 1)
    return 2 / (nu + 1) * r ** m


def levels_for_tail(nu: float, tail_tol: float = TAIL_TOL) -> int:
    """Smallest M with sum_{m >= M} R_m = r^M below tail_tol."""
    if nu <= 1.0:
        return 1
    r = (nu - 1) / (nu + 1)
    return max(1, math.ceil(math.log(tail_tol) / math.log(r)))


@dataclass(frozen=True)
class DiagonalRep:
    eigenvalues: np.ndarray
    basis: OscillatorBasis
    Q: float
    P: float
    tail_mass: float


def build_state(pkt: QuantumMEPacket, M: int | None = None,
                tail_tol: float = TAIL_TOL) -> tuple[StateOperator, DiagonalRep]:
    """State operator in the number basis of K, truncated at M levels."""
    need = levels_for_tail(pkt.nu, tail_tol)
    if M is None:
        M = need
    elif M < need:
        raise ValidationError(f"{M} levels leave tail mass above {tail_tol:g}; need {need}")
    M = max(int(M), 2)
    R = eigenvalues(pkt.nu, M)
    tail = max(0.0, 1.0 - R.sum())
    T = StateOperator.diagonal(R / R.sum())
    p = pkt.params
    rep = DiagonalRep(R, OscillatorBasis(M, pkt.hbar, mass=p.dP / p.dQ, omega=1.0),
                      p.Q, p.P, tail)
    return T, rep


def number_state_wavefunction(pkt: QuantumMEPacket, x, levels: int) -> np.ndarray:
    """Position wave functions <x|m; Q, P> for m < levels (rows)."""
    p = pkt.params
    s = math.sqrt(pkt.hbar * p.dQ / p.dP)  # oscillator length of K
    x = np.asarray(x, dtype=float)
    h = hermite_functions(levels, (x - p.Q) / s) / math.sqrt(s)
    return h * np.exp(1j * p.P * x / pkt.hbar)


def gaussian_wavefunction(pkt: QuantumMEPacket, x) -> np.ndarray:
    """Closed-form minimum-uncertainty packet, exact when nu = 1."""
    p = pkt.params
    nu = pkt.nu
    x = np.asarray(x, dtype=float)
    return ((nu / (2 * math.pi * p.dQ ** 2)) ** 0.25
            * np.exp(-nu * (x - p.Q) ** 2 / (4 * p.dQ ** 2) + 1j * p.P * x / pkt.hbar))


# ----------------------------------------------------------------------------
# ladder-algebra moments

def _check_word(word: str) -> str:
    word = word.replace(" ", "").replace("*", "")
    if set(word) - {"q", "p"}:
        raise ValidationError("monomials are words over 'q' and 'p'")
    if len(word) > MAX_WORD:
        raise ValidationError(f"monomial degree above {MAX_WORD}")
    return word


def _normal_product(x: dict, y: dict) -> dict:
    """Product of normally ordered polynomials {(m, n): c} = sum c A†^m A^n."""
    out: dict = {}
    for (m1, n1), c1 in x.items():
        for (m2, n2), c2 in y.items():
            # A^n1 A†^m2 = sum_k C(n1,k) C(m2,k) k! A†^(m2-k) A^(n1-k)
            for k in range(min(n1, m2) + 1):
                c = c1 * c2 * math.comb(n1, k) * math.comb(m2, k) * math.factorial(k)
                key = (m1 + m2 - k, n1 + n2 - k)
                out[key] = out.get(key, 0) + c
    return out


def normal_ordered(pkt: QuantumMEPacket, word: str) -> dict:
    word = _check_word(word)
    p = pkt.params
    a, b = pkt.alpha, pkt.beta
    ops = {"q": {(0, 0): p.Q, (1, 0): a, (0, 1): a},
           "p": {(0, 0): p.P, (1, 0): 1j * b, (0, 1): -1j * b}}
    out = {(0, 0): 1.0 + 0j}
    for ch in word:
        out = _normal_product(out, ops[ch])
    return out


def _falling_factorial(k: int) -> Polynomial:
    poly = Polynomial([1.0])
    for j in range(k):
        poly = poly * Polynomial([-j, 1.0])
    return poly


@lru_cache(maxsize=None)
def _diff_tower(n: int) -> Polynomial:
    """((nu^2 - 1)/2 d/dnu)^n applied to (nu + 1)/2."""
    f = Polynomial([0.5, 0.5])
    g = Polynomial([-0.5, 0.0, 0.5])
    for _ in range(n):
        f = g * f.deriv()
    return f


def number_polynomial(pkt: QuantumMEPacket, word: str) -> Polynomial:
    """Number-operator polynomial of the diagonal part of the normal-ordered word."""
    coeffs = normal_ordered(pkt, word)
    poly = Polynomial([0j])
    for (m, n), c in coeffs.items():
        if m == n:
            poly = poly + c * _falling_factorial(m)
    return poly


def ladder_average(pkt: QuantumMEPacket, word: str) -> complex:
    """<word> in the packet state, e.g. 'pqqp' means p q q p.

    Normal orders in A, A†, keeps the number-operator polynomial and maps
    N^n to (2/(nu+1)) ((nu^2-1)/2 d/dnu)^n (nu+1)/2.
    """
    poly = number_polynomial(pkt, word)
    nu = pkt.nu
    total = sum(c * _diff_tower(n)(nu) for n, c in enumerate(poly.coef))
    return complex(2 / (nu + 1) * total)


def phase_space_matrices(pkt: QuantumMEPacket, levels: int):
    a = annihilation(levels)
    ad = a.conj().T
    p = pkt.params
    I = np.eye(levels)
    return p.Q * I + pkt.alpha * (a + ad), p.P * I - 1j * pkt.beta * (a - ad)


def matrix_average(pkt: QuantumMEPacket, word: str, tail_tol: float = TAIL_TOL) -> complex:
    """<word> by explicit traces of truncated matrices against R_m."""
    word = _check_word(word)
    T, rep = build_state(pkt, tail_tol=tail_tol)
    M = rep.basis.levels
    q, p = phase_space_matrices(pkt, M + len(word) + 1)
    X = np.eye(M + len(word) + 1, dtype=complex)
    for ch in word:
        X = X @ (q if ch == "q" else p)
    return complex(np.sum(np.diag(T.matrix) * np.diag(X)[:M]))


def classical_word_average(params: MEPacketParams, word: str) -> float:
    return mc.gaussian_moment(params, word.count("q"), word.count("p"))


def words(max_degree: int = 4):
    for d in range(1, max_degree + 1):
        for w in itertools.product("qp", repeat=d):
            yield "".join(w)


def symmetrized_average(pkt: QuantumMEPacket, word: str) -> complex:
    """Average of the mean over all distinct orderings of the word's letters."""
    perms = {"".join(w) for w in itertools.permutations(word)}
    return sum(ladder_average(pkt, w) for w in perms) / len(perms)


def classical_limit_error(Q, P, dQ, dP, nu, max_degree: int = 4) -> float:
    """Largest deviation of quantum from classical moments at given nu.

    hbar is set to 2 dQ dP / nu. The deviation is taken on the Hermitian
    part (W + W†)/2 of each word W, i.e. on Re <W>.
    """
    pkt = QuantumMEPacket.from_moments(Q, P, dQ, dP, hbar=2 * dQ * dP / nu)
    return max(abs(ladder_average(pkt, w).real - classical_word_average(pkt.params, w))
               for w in words(max_degree))


# ----------------------------------------------------------------------------
# dynamics

def evolve_quadratic_quantum(pkt: QuantumMEPacket, V: PolynomialPotential, t: float) -> QuantumMEPacket:
    """Moments after time t; identical to the classical closed form.

    The evolved state is not of maximum-entropy form in general; the result
    is the packet with the evolved averages and widths.
    """
    return QuantumMEPacket(mc.evolve_quadratic(pkt.params, V, t), pkt.hbar)


def quadratic_trajectory_quantum(pkt: QuantumMEPacket, V: PolynomialPotential, t) -> MomentTrajectory:
    return mc.quadratic_trajectory(pkt.params, V, t)


def _propagation_dimension(pkt, V, times, M, scale2):
    tr = mc.quadratic_trajectory(pkt.params, V, times)
    c = (2 * M - 1) / max(pkt.nu, 1.0)
    q2 = np.max(tr.Q ** 2 + c * tr.dQ ** 2)
    p2 = np.max(tr.P ** 2 + c * tr.dP ** 2)
    if scale2 is None:
        if V[2] > 0:
            scale2 = pkt.hbar / math.sqrt(V.mu * V[2])
        else:
            scale2 = pkt.hbar * math.sqrt(q2 / p2)
    nbar = 0.5 * (q2 / scale2 + p2 * scale2 / pkt.hbar ** 2)
    return scale2, nbar


@dataclass(frozen=True)
class MatrixPropagation:
    trajectory: MomentTrajectory
    dim: int
    levels: int
    top_population: float
    meta: dict = field(default_factory=dict)


def _run_matrix(pkt, V, times, R, M, dim, s2):
    hbar = pkt.hbar
    pad = dim + 4
    a = annihilation(pad)
    ad = a.conj().T
    s = math.sqrt(s2)
    qf = s / math.sqrt(2) * (a + ad)
    pf = -1j * hbar / (s * math.sqrt(2)) * (a - ad)
    q, p = qf[:dim, :dim], pf[:dim, :dim]
    q2, p2 = (qf @ qf)[:dim, :dim], (pf @ pf)[:dim, :dim]
    par = pkt.params
    Ipad = np.eye(pad)
    dq, dp = qf - par.Q * Ipad, pf - par.P * Ipad
    K = 0.5 * (par.dP / par.dQ) * (dq @ dq) + 0.5 * (par.dQ / par.dP) * (dp @ dp)
    _, vk = np.linalg.eigh(0.5 * (K[:dim, :dim] + K[:dim, :dim].conj().T))
    C0 = vk[:, :M] * np.sqrt(R)
    H = p2 / (2 * V.mu) + V[0] * np.eye(dim) + V[1] * q + 0.5 * V[2] * q2
    E, W = np.linalg.eigh(0.5 * (H + H.conj().T))
    A0 = W.conj().T @ C0
    top = slice(int(0.9 * dim), dim)
    out = {k: np.empty(len(times)) for k in ("Q", "P", "dQ", "dP")}
    worst = 0.0

    def avg(op, C):
        return float(np.vdot(C, op @ C).real)

    for i, t in enumerate(times):
        C = W @ (np.exp(-1j * E * t / hbar)[:, None] * A0)
        worst = max(worst, float(np.sum(np.abs(C[top]) ** 2)))
        mq_, mp = avg(q, C), avg(p, C)
        out["Q"][i], out["P"][i] = mq_, mp
        out["dQ"][i] = math.sqrt(max(avg(q2, C) - mq_ * mq_, 0.0))
        out["dP"][i] = math.sqrt(max(avg(p2, C) - mp * mp, 0.0))
    return out, worst


def propagate_matrix(pkt: QuantumMEPacket, V: PolynomialPotential, times,
                     M: int | None = None, tail_tol: float = TAIL_TOL,
                     dim: int | None = None, max_dim: int = 2000,
                     drift_tol: float = 1e-9) -> MatrixPropagation:
    """Schrodinger-picture propagation of the truncated state.

    The state is expanded in the number basis of a reference oscillator,
    evolved with the eigendecomposition of the truncated Hamiltonian and its
    moments measured at each time. `M` caps the number of K levels kept in
    the state; the reference basis starts from a size estimated from the
    trajectory and doubles until the top 10% of it stays empty to drift_tol.
    """
    if not V.is_quadratic:
        raise ValidationError("matrix propagation implemented for quadratic V")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    need = levels_for_tail(pkt.nu, tail_tol)
    if M is not None and int(M) < need:
        raise ValidationError(f"{M} levels leave tail mass above {tail_tol:g}; need {need}")
    M = need  # a larger cap adds only levels below tail_tol
    R = eigenvalues(pkt.nu, M)
    R = R / R.sum()
    s2, nbar = _propagation_dimension(pkt, V, times, M, None)
    adaptive = dim is None
    if adaptive:
        dim = int(np.clip(math.ceil(8 * (nbar + 1)) + 64, 128, max_dim))
    while True:
        out, worst = _run_matrix(pkt, V, times, R, M, dim, s2)
        if worst <= drift_tol or not adaptive or dim >= max_dim:
            break
        dim = min(2 * dim, max_dim)
    if worst > drift_tol:
        raise NumericalConsistencyError(
            f"truncation drift: population {worst:.2e} reaches the top of a {dim}-level basis")
    traj = MomentTrajectory(times, out["Q"], out["P"], out["dQ"], out["dP"],
                            {"method": "matrix", "dim": dim, "levels": M})
    return MatrixPropagation(traj, dim, M, worst, {"scale2": s2, "nbar": nbar})


# ----------------------------------------------------------------------------
# quantum corrections to the moment hierarchy

# operator forms of the first four derivatives of p: lists of (coefficient, word)
def _operator_derivatives(V: PolynomialPotential):
    V1, V2, V3, V4 = V[1], V[2], V[3], V[4]
    mu = V.mu
    d1 = [(-V1, ""), (-V2, "q"), (-V3 / 2, "qq"), (-V4 / 6, "qqq")]
    d2 = [(-V2 / mu, "p"), (-V3 / (2 * mu), "qp"), (-V3 / (2 * mu), "pq"), (-V4 / (2 * mu), "qpq")]
    d3 = [(-V3 / mu ** 2, "pp"), (-V4 / mu ** 2, "pqp"), (V1 * V2 / mu, ""),
          ((V1 * V3 + V2 ** 2) / mu, "q"), ((3 * V2 * V3 + V1 * V4) / (2 * mu), "qq"),
          ((4 * V2 * V4 + 3 * V3 ** 2) / (6 * mu), "qqq"), (5 * V3 * V4 / (12 * mu), "qqqq"),
          (V4 ** 2 / (12 * mu), "qqqqq")]
    c = (3 * V1 * V4 + 5 * V2 * V3) / (2 * mu ** 2)
    e = 3 * V3 * V4 / (2 * mu ** 2)
    d4 = [(-V4 / mu ** 3, "ppp"), ((3 * V1 * V3 + V2 ** 2) / mu ** 2, "p"), (c, "qp"), (c, "pq"),
          ((5 * V3 ** 2 + 8 * V2 * V4) / (2 * mu ** 2), "qpq"), (e, "qqqp"), (e, "pqqq"),
          (3 * V4 ** 2 / (4 * mu ** 2), "qqpqq")]
    return [d1, d2, d3, d4]


def quantum_taylor_derivatives(pkt: QuantumMEPacket, V: PolynomialPotential) -> tuple:
    """Quantum averages of the operator derivatives d^n p/dt^n, n = 1..4."""
    out = []
    for terms in _operator_derivatives(V):
        out.append(sum(c * (ladder_average(pkt, w) if w else 1.0) for c, w in terms if c != 0.0))
    return tuple(complex(x) for x in out)


@dataclass(frozen=True)
class CorrectionTerm:
    name: str
    derivative_order: int
    value: float  # including the quantum correction
    classical_value: float
    excess: float  # value - classical_value
    commutator_excess: float  # excess implied by the checked operator identity
    note: str = ""


@dataclass(frozen=True)
class CorrectionCatalog:
    terms: tuple
    taylor_deviation: float  # max |quantum - classical| over d^n P/dt^n, n <= 4

    def __len__(self):
        return len(self.terms)

    def __iter__(self):
        return iter(self.terms)

    def __getitem__(self, name: str) -> CorrectionTerm:
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(name)


def quantum_correction_catalog(pkt: QuantumMEPacket, V: PolynomialPotential) -> CorrectionCatalog:
    """Ordering corrections in the quantum moment hierarchy.

    * ``v3v4_fifth``: the q^2 p^2 term of the fifth derivative of p, whose
      average carries dQ^2 dP^2 (21 - 2/nu^2) in place of 21 dQ^2 dP^2.
    * ``v5_third``: the V5 term of the third derivative. The reference
      expression -(V5/2mu^2)(<q^2p^2>_class + 4 dQ^2 dP^2/nu^2) is returned
      as ``value``; the commutator
      [(q^3p + pq^3), p^2] = 6 i hbar (2 p q^2 p - hbar^2) gives no excess,
      which is what ``commutator_excess`` reports.
    """
    prm = pkt.params
    nu = pkt.nu
    mu = V.mu
    V3, V4, V5 = V[3], V[4], V[5]
    q2p2 = mc.gaussian_moment(prm, 2, 2)
    dd = prm.dQ ** 2 * prm.dP ** 2
    terms = []
    if V3 != 0.0 and V4 != 0.0:
        k = V3 * V4 / (2 * mu ** 3)
        Q, P = prm.Q, prm.P
        base = 21 * Q ** 2 * P ** 2 + 21 * P ** 2 * prm.dQ ** 2 + 21 * Q ** 2 * prm.dP ** 2
        val = k * (base + dd * (21 - 2 / nu ** 2))
        cl = k * (base + 21 * dd)
        # 21 <p q^2 p> - 11 hbar^2, evaluated with the ladder calculator
        direct = k * (21 * ladder_average(pkt, "pqqp").real - 11 * pkt.hbar ** 2)
        terms.append(CorrectionTerm("v3v4_fifth", 5, val, cl, val - cl, direct - cl,
                                    "coefficient dQ^2 dP^2 (21 - 2/nu^2)"))
    if V5 != 0.0:
        cl = -V5 / (2 * mu ** 2) * q2p2
        val = -V5 / (2 * mu ** 2) * (q2p2 + 4 * dd / nu ** 2)
        direct = -V5 / (4 * mu ** 2) * (2 * ladder_average(pkt, "pqqp").real - pkt.hbar ** 2)
        terms.append(CorrectionTerm("v5_third", 3, val, cl, val - cl, direct - cl,
                                    "reference form; commutator gives -(V5/4mu^2)(2pq^2p - hbar^2)"))
    if not terms and V3 == 0.0 and V4 == 0.0:
        return CorrectionCatalog((), 0.0)
    qd = quantum_taylor_derivatives(pkt, V)
    cd = mc.moment_taylor_derivatives(prm, V).dP
    dev = max(abs(a - b) for a, b in zip(qd, cd))
    return CorrectionCatalog(tuple(terms), float(dev))
