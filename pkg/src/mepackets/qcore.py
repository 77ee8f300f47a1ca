"""Finite-dimensional state operators, effects and POV measures.

Dense-matrix engine shared by the other modules: validation of state
operators, Born probabilities, moments, entropy, partial traces,
(anti)symmetrized composition of identical particles and truncated
oscillator ladder algebra.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

HERMITIAN_TOL = 1e-12
POSITIVITY_TOL = 1e-12
TRACE_TOL = 1e-12
POVM_TOL = 1e-10
ENTROPY_CUTOFF = 1e-14


class ValidationError(ValueError):
    """Input violates a structural invariant (Hermiticity, trace, dims...)."""


class NumericalConsistencyError(ArithmeticError):
    """A numerical diagnostic failed (drift, truncation, negative variance)."""


class PauliExclusionError(ValidationError):
    """Antisymmetrization annihilated the composed state."""


def _as_square(a, name="matrix") -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"{name} must be a square matrix, got shape {a.shape}")
    return a


def hermitize(a, tol: float = HERMITIAN_TOL) -> np.ndarray:
    """Return (A + A†)/2, rejecting inputs whose asymmetry exceeds `tol`."""
    a = _as_square(a)
    asym = np.max(np.abs(a - a.conj().T)) if a.size else 0.0
    if asym > tol:
        raise ValidationError(f"operator is not Hermitian (asymmetry {asym:.3e})")
    return 0.5 * (a + a.conj().T)


@dataclass(frozen=True)
class StateOperator:
    """Positive, unit-trace Hermitian matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = hermitize(self.matrix)
        tr = np.trace(m).real
        if abs(tr - 1.0) > TRACE_TOL:
            raise ValidationError(f"state trace must be 1, got {tr!r}")
        lo = np.linalg.eigvalsh(m)[0]
        if lo < -POSITIVITY_TOL:
            raise ValidationError(f"state has negative eigenvalue {lo:.3e}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def pure(cls, psi) -> "StateOperator":
        psi = np.asarray(psi, dtype=complex).ravel()
        n = np.linalg.norm(psi)
        if abs(n - 1.0) > 1e-10:
            raise ValidationError(f"state vector must be normalized, |psi| = {n!r}")
        psi = psi / n
        return cls(np.outer(psi, psi.conj()))

    @classmethod
    def diagonal(cls, weights) -> "StateOperator":
        return cls(np.diag(np.asarray(weights, dtype=float)))

    @classmethod
    def normalized(cls, a) -> "StateOperator":
        """Build from a positive matrix by dividing out its trace."""
        a = _as_square(a)
        tr = np.trace(a).real
        if tr <= 0:
            raise ValidationError("cannot normalize an operator with non-positive trace")
        return cls(a / tr)

    def eigvals(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def is_pure(self, tol: float = 1e-10) -> bool:
        return abs(np.trace(self.matrix @ self.matrix).real - 1.0) < tol


@dataclass(frozen=True)
class Effect:
    """Hermitian operator with spectrum in [0, 1]."""

    matrix: np.ndarray

    def __post_init__(self):
        m = hermitize(self.matrix)
        ev = np.linalg.eigvalsh(m)
        if ev[0] < -POSITIVITY_TOL or ev[-1] > 1 + POSITIVITY_TOL:
            raise ValidationError(
                f"effect spectrum [{ev[0]:.3e}, {ev[-1]:.3e}] outside [0, 1]")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class DiscretePOVM:
    """Finitely many effects summing to the identity."""

    effects: tuple
    labels: tuple

    def __post_init__(self):
        effects = tuple(e if isinstance(e, Effect) else Effect(e) for e in self.effects)
        labels = tuple(self.labels)
        if len(effects) == 0 or len(effects) != len(labels):
            raise ValidationError("need one label per effect and at least one effect")
        dim = effects[0].dim
        if any(e.dim != dim for e in effects):
            raise ValidationError("effects have inconsistent dimensions")
        total = sum(e.matrix for e in effects)
        dev = np.max(np.abs(total - np.eye(dim)))
        if dev > POVM_TOL:
            raise ValidationError(f"effects do not sum to identity (deviation {dev:.3e})")
        object.__setattr__(self, "effects", effects)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_observable(cls, a) -> "DiscretePOVM":
        """Spectral measure of a Hermitian matrix (degenerate eigenvalues merged)."""
        a = hermitize(a)
        w, v = np.linalg.eigh(a)
        groups: list[list[int]] = []
        for i, x in enumerate(w):
            if groups and abs(x - w[groups[-1][0]]) < 1e-9:
                groups[-1].append(i)
            else:
                groups.append([i])
        effects = [v[:, g] @ v[:, g].conj().T for g in groups]
        return cls(tuple(effects), tuple(float(np.mean(w[g])) for g in groups))

    def probabilities(self, T: StateOperator) -> np.ndarray:
        return np.array([born_probability(T, e) for e in self.effects])

    def sample(self, T: StateOperator, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw `n` outcome labels by the Born rule."""
        p = self.probabilities(T)
        idx = rng.choice(len(p), size=n, p=p / p.sum())
        return np.asarray(self.labels, dtype=object)[idx]


@dataclass(frozen=True)
class DecomposableState:
    """Statistical decomposition: an explicit weighted list of states.

    Kept as a list on purpose; `flatten()` gives the average operator when
    it is needed.
    """

    components: tuple
    tags: tuple = field(default=())

    def __post_init__(self):
        comps = tuple((float(w), T if isinstance(T, StateOperator) else StateOperator(T))
                      for w, T in self.components)
        if not comps:
            raise ValidationError("a decomposition needs at least one component")
        ws = np.array([w for w, _ in comps])
        if np.any(ws < -1e-15) or np.any(ws > 1 + 1e-12):
            raise ValidationError("weights must lie in [0, 1]")
        if abs(ws.sum() - 1.0) > TRACE_TOL:
            raise ValidationError(f"weights must sum to 1, got {ws.sum()!r}")
        dims = {T.dim for _, T in comps}
        if len(dims) != 1:
            raise ValidationError("components live on different spaces")
        tags = tuple(self.tags) if self.tags else tuple(None for _ in comps)
        if len(tags) != len(comps):
            raise ValidationError("one tag per component required")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "tags", tags)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.components])

    @property
    def states(self) -> list[StateOperator]:
        return [T for _, T in self.components]

    @property
    def dim(self) -> int:
        return self.components[0][1].dim

    def __len__(self):
        return len(self.components)

    def flatten(self) -> StateOperator:
        return StateOperator(sum(w * T.matrix for w, T in self.components))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Indices of components drawn with their weights."""
        w = self.weights
        return rng.choice(len(w), size=n, p=w / w.sum())


# ----------------------------------------------------------------------------
# moments, entropy, correlations

def _matrix(x) -> np.ndarray:
    if isinstance(x, (StateOperator, Effect)):
        return x.matrix
    return np.asarray(x, dtype=complex)


def _check_dims(*ops):
    dims = {op.shape[0] for op in ops}
    if len(dims) != 1:
        raise ValidationError(f"dimension mismatch: {sorted(dims)}")


def von_neumann_entropy(T) -> float:
    """-tr[T ln T] in nats; eigenvalues below 1e-14 count as zero."""
    if not isinstance(T, StateOperator):
        T = StateOperator(T)
    ev = T.eigvals()
    ev = ev[ev > ENTROPY_CUTOFF]
    return float(-np.sum(ev * np.log(ev)))


def born_probability(T, E) -> float:
    t, e = _matrix(T), _matrix(E)
    _check_dims(t, e)
    p = float(np.einsum("ij,ji->", t, e).real)
    if -1e-10 <= p < 0.0:
        p = 0.0
    elif 1.0 < p <= 1.0 + 1e-10:
        p = 1.0
    return p


def expectation(T, A) -> complex:
    t, a = _matrix(T), _matrix(A)
    _check_dims(t, a)
    return complex(np.einsum("ij,ji->", t, a))


def average_and_variance(T, A) -> tuple[float, float]:
    """Return (<A>, Delta A) for Hermitian A."""
    t, a = _matrix(T), hermitize(_matrix(A))
    _check_dims(t, a)
    m1 = expectation(t, a).real
    m2 = expectation(t, a @ a).real
    rad = m2 - m1 * m1
    if rad < 0:
        scale = max(1.0, abs(m2))
        if rad < -1e-10 * scale:
            raise NumericalConsistencyError(f"negative variance {rad:.3e}")
        rad = 0.0
    return m1, math.sqrt(rad)


def normalized_correlation(T, A, B) -> float:
    """(<AB> - <A><B>)/(Delta A Delta B) for commuting Hermitian A, B."""
    t = _matrix(T)
    a, b = hermitize(_matrix(A)), hermitize(_matrix(B))
    _check_dims(t, a, b)
    comm = np.max(np.abs(a @ b - b @ a))
    if comm > 1e-10:
        raise ValidationError(f"observables do not commute (|[A,B]| = {comm:.3e})")
    ma, da = average_and_variance(t, a)
    mb, db = average_and_variance(t, b)
    if da < 1e-12 or db < 1e-12:
        raise ValidationError("normalized correlation undefined for zero variance")
    c = (expectation(t, a @ b).real - ma * mb) / (da * db)
    return float(np.clip(c, -1.0, 1.0))


# ----------------------------------------------------------------------------
# tensor structure

def kron(*ops) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for op in ops:
        out = np.kron(out, _matrix(op))
    return out


def tensor(*states) -> StateOperator:
    return StateOperator(kron(*states))


def partial_trace(W, dims: Sequence[int], keep: Iterable[int]):
    """Trace out every factor not listed in `keep`.

    `dims` declares the factorization of the space; the result keeps the
    remaining factors in their original order. Returns a StateOperator if
    given one, otherwise an array.
    """
    w = _matrix(W)
    dims = [int(d) for d in dims]
    n = int(np.prod(dims))
    if w.shape != (n, n):
        raise ValidationError(f"matrix of shape {w.shape} does not factor as {dims}")
    keep = sorted(set(keep))
    if any(k < 0 or k >= len(dims) for k in keep):
        raise ValidationError("keep index out of range")
    k = len(dims)
    t = w.reshape(dims + dims)
    traced = [i for i in range(k) if i not in keep]
    # move each traced pair to the end and contract
    letters = "abcdefghijklmnopqrstuvwxyz"
    row = list(letters[:k])
    col = list(letters[k:2 * k])
    for i in traced:
        col[i] = row[i]
    out = "".join(row[i] for i in keep) + "".join(col[i] for i in keep)
    r = np.einsum("".join(row) + "".join(col) + "->" + out, t)
    d = int(np.prod([dims[i] for i in keep])) if keep else 1
    r = r.reshape(d, d)
    if isinstance(W, StateOperator):
        return StateOperator(r)
    return r


def _permutation_operator(d: int, perm: Sequence[int]) -> np.ndarray:
    """Operator permuting tensor factors: factor i goes to position perm[i]."""
    n = len(perm)
    N = d ** n
    idx = np.arange(N).reshape([d] * n)
    # inverse permutation of axes
    inv = np.argsort(perm)
    moved = np.transpose(idx, inv).ravel()
    P = np.zeros((N, N))
    P[np.arange(N), moved] = 1.0
    return P


def _perm_sign(perm) -> int:
    perm = list(perm)
    sign = 1
    for i in range(len(perm)):
        while perm[i] != i:
            j = perm[i]
            perm[i], perm[j] = perm[j], perm[i]
            sign = -sign
    return sign


def symmetrizer(d: int, n: int, statistics: str = "boson") -> np.ndarray:
    """Orthogonal projection onto the (anti)symmetric part of (C^d)^{⊗n}, n ≤ 3."""
    if statistics not in ("boson", "fermion"):
        raise ValidationError("statistics must be 'boson' or 'fermion'")
    if not 1 <= n <= 3:
        raise ValidationError("symmetrization supported for at most 3 factors")
    P = np.zeros((d ** n, d ** n))
    for perm in itertools.permutations(range(n)):
        s = _perm_sign(perm) if statistics == "fermion" else 1
        P += s * _permutation_operator(d, perm)
    return P / math.factorial(n)


def symmetrize_compose(T, Tp, statistics: str = "boson", single_dim: int | None = None) -> StateOperator:
    """Compose states of identical particles: P(T⊗T')P / tr[P(T⊗T')P].

    `single_dim` is the one-particle dimension; by default T is taken to be
    a single-particle state. T' may hold one or two particles.
    """
    t, tp = _matrix(T), _matrix(Tp)
    d = int(single_dim or t.shape[0])

    def count(m):
        n, size = 0, m.shape[0]
        while size > 1 and size % d == 0:
            size //= d
            n += 1
        if size != 1:
            raise ValidationError(f"dimension {m.shape[0]} is not a power of {d}")
        return n

    n = count(t) + count(tp)
    if n > 3:
        raise ValidationError("at most 3 particles in total")
    P = symmetrizer(d, n, statistics)
    w = P @ np.kron(t, tp) @ P
    tr = np.trace(w).real
    if tr < 1e-14:
        raise PauliExclusionError("composed state vanishes after (anti)symmetrization")
    return StateOperator(w / tr)


# ----------------------------------------------------------------------------
# truncated oscillator

@dataclass(frozen=True)
class OscillatorBasis:
    """Number basis of an oscillator truncated to `levels` states.

    `mass` and `omega` set the length scale sqrt(hbar/(mass*omega)) of
    u = sqrt(hbar/(2 mass omega)) (A + A†).
    """

    levels: int
    hbar: float = 1.0
    mass: float = 1.0
    omega: float = 1.0

    def __post_init__(self):
        if int(self.levels) != self.levels or self.levels < 2:
            raise ValidationError("an oscillator basis needs at least 2 levels")
        if self.hbar <= 0 or self.mass <= 0 or self.omega <= 0:
            raise ValidationError("hbar, mass and omega must be positive")

    @property
    def length_scale(self) -> float:
        return math.sqrt(self.hbar / (self.mass * self.omega))


@dataclass(frozen=True)
class LadderOperators:
    a: np.ndarray
    adag: np.ndarray
    u: np.ndarray
    w: np.ndarray

    @property
    def number(self) -> np.ndarray:
        return self.adag @ self.a


def annihilation(levels: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, levels, dtype=float)), k=1).astype(complex)


def ladder_operators(basis: OscillatorBasis) -> LadderOperators:
    """A, A†, position-like u and momentum-like w on the truncated basis."""
    a = annihilation(basis.levels)
    ad = a.conj().T
    su = math.sqrt(basis.hbar / (2 * basis.mass * basis.omega))
    sw = math.sqrt(basis.hbar * basis.mass * basis.omega / 2)
    return LadderOperators(a=a, adag=ad, u=su * (a + ad), w=-1j * sw * (a - ad))


def hermite_functions(n_max: int, x) -> np.ndarray:
    """Normalized Hermite functions h_0..h_{n_max-1} at dimensionless x.

    Rows are orders. Uses the stable three-term recurrence.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty((n_max,) + x.shape)
    out[0] = np.pi ** -0.25 * np.exp(-0.5 * x * x)
    if n_max > 1:
        out[1] = math.sqrt(2.0) * x * out[0]
    for n in range(2, n_max):
        out[n] = math.sqrt(2.0 / n) * x * out[n - 1] - math.sqrt((n - 1) / n) * out[n - 2]
    return out
