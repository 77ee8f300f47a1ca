"""Registration models: premeasurement, channel-based state reduction, tracks.

A detector is described by its channel states T'_mkl: the state the
detector (or object + detector) reaches once the object entered from the
m-th eigenspace, with degeneracy indices k, l. Channel states are model
inputs; the reductions below only recombine them with the classical
weights p_m and discard the cross terms between different signals.

Object eigenvectors phi_mk are the columns of `BCLModel.basis`, grouped by
m. The coefficient matrix C[mk, nl] = <phi_mk|S|phi_nl> drives every
reduction, so vector and non-extremal inputs share one code path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.stats import unitary_group

from .qcore import (
    DecomposableState,
    NumericalConsistencyError,
    StateOperator,
    ValidationError,
    kron,
    normalized_correlation,
    partial_trace,
    symmetrizer,
)

BRANCH_CUTOFF = 1e-14
CHANNEL_TOL = 1e-10


class UnsupportedOperationError(ValidationError):
    pass


class WindowEscapeError(NumericalConsistencyError):
    pass


def _unit(v, name="vector") -> np.ndarray:
    v = np.asarray(v, dtype=complex).ravel()
    n = np.linalg.norm(v)
    if abs(n - 1.0) > 1e-10:
        raise ValidationError(f"{name} must have unit norm, got {n!r}")
    return v


def random_isometry(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    if cols > rows:
        raise ValidationError("isometry needs rows >= cols")
    if rows == 1:
        return np.ones((1, 1), dtype=complex)
    return unitary_group.rvs(rows, random_state=rng)[:, :cols]


def random_density(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Full-rank (by default) random state operator from a Ginibre matrix."""
    g = rng.normal(size=(dim, rank or dim)) + 1j * rng.normal(size=(dim, rank or dim))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def _traced_blocks(V: np.ndarray, out_dim: int, env_dim: int) -> np.ndarray:
    """T[k, l] = tr_env V|k><l|V^dagger for an isometry into out (x) env."""
    d = V.shape[1]
    W = V.reshape(out_dim, env_dim, d)
    return np.einsum("aek,bel->klab", W, W.conj())


def _choi_min_eig(blocks: np.ndarray) -> float:
    d, _, D, _ = blocks.shape
    M = blocks.transpose(0, 2, 1, 3).reshape(d * D, d * D)
    M = 0.5 * (M + M.conj().T)
    return float(np.linalg.eigvalsh(M)[0])


# ----------------------------------------------------------------------------
# premeasurement

@dataclass(frozen=True)
class BCLModel:
    """Discrete observable O = sum_m o_m sum_k |phi_mk><phi_mk| and its coupling.

    `released[m]` holds the object vectors phi'_mk (columns) the object is
    left in after interacting through channel m; the identity evolution is
    used when omitted. The meter has ready state e_0 and pointers e_m.
    """

    eigenvalues: tuple
    degeneracies: tuple
    basis: np.ndarray = None
    released: tuple = None

    def __post_init__(self):
        o = tuple(float(x) for x in self.eigenvalues)
        d = tuple(int(x) for x in self.degeneracies)
        if len(o) != len(d) or not o:
            raise ValidationError("one degeneracy per eigenvalue required")
        if len(set(o)) != len(o):
            raise ValidationError("eigenvalues must be distinct")
        if min(d) < 1:
            raise ValidationError("degeneracies must be positive")
        n = sum(d)
        B = np.eye(n, dtype=complex) if self.basis is None else np.asarray(self.basis, dtype=complex)
        if B.shape != (n, n):
            raise ValidationError(f"basis must be {n}x{n}")
        if np.max(np.abs(B.conj().T @ B - np.eye(n))) > 1e-10:
            raise ValidationError("eigenvectors phi_mk are not orthonormal")
        off = np.concatenate([[0], np.cumsum(d)])
        if self.released is None:
            rel = tuple(B[:, off[m]:off[m + 1]] for m in range(len(d)))
        else:
            rel = tuple(np.asarray(r, dtype=complex) for r in self.released)
            if len(rel) != len(d):
                raise ValidationError("one released block per eigenvalue required")
        for m, r in enumerate(rel):
            if r.shape[1] != d[m]:
                raise ValidationError(f"released block {m} needs {d[m]} columns")
            if np.max(np.abs(r.conj().T @ r - np.eye(d[m]))) > 1e-10:
                raise ValidationError(f"released vectors of channel {m} are not orthonormal")
        object.__setattr__(self, "eigenvalues", o)
        object.__setattr__(self, "degeneracies", d)
        object.__setattr__(self, "basis", B)
        object.__setattr__(self, "released", rel)

    @classmethod
    def standard(cls, eigenvalues, degeneracies=None) -> "BCLModel":
        degeneracies = degeneracies or (1,) * len(eigenvalues)
        return cls(tuple(eigenvalues), tuple(degeneracies))

    @classmethod
    def random(cls, degeneracies, rng: np.random.Generator, released_dim: int | None = None,
               eigenvalues=None) -> "BCLModel":
        d = tuple(int(x) for x in degeneracies)
        n = sum(d)
        o = eigenvalues if eigenvalues is not None else tuple(range(1, len(d) + 1))
        B = unitary_group.rvs(n, random_state=rng) if n > 1 else np.ones((1, 1))
        rd = released_dim or n
        rel = tuple(random_isometry(rd, dm, rng) for dm in d)
        return cls(tuple(o), d, B, rel)

    @property
    def N(self) -> int:
        return len(self.eigenvalues)

    @property
    def dim(self) -> int:
        return sum(self.degeneracies)

    @property
    def released_dim(self) -> int:
        return self.released[0].shape[0]

    def block(self, m: int) -> slice:
        start = sum(self.degeneracies[:m])
        return slice(start, start + self.degeneracies[m])

    def projector(self, m: int) -> np.ndarray:
        b = self.basis[:, self.block(m)]
        return b @ b.conj().T

    def observable(self) -> np.ndarray:
        return sum(o * self.projector(m) for m, o in enumerate(self.eigenvalues))

    def coefficients(self, phi) -> np.ndarray:
        return self.basis.conj().T @ _unit(phi, "object vector")

    def coefficient_matrix(self, S) -> np.ndarray:
        s = S.matrix if isinstance(S, StateOperator) else StateOperator(S).matrix
        if s.shape != (self.dim, self.dim):
            raise ValidationError(f"state must act on the {self.dim}-dimensional object space")
        return self.basis.conj().T @ s @ self.basis


@dataclass(frozen=True)
class Premeasurement:
    vector: np.ndarray  # object (x) meter, meter dimension N + 1
    labels: tuple  # eigenvalue indices m (0-based) of the kept branches
    probabilities: np.ndarray
    conditional: tuple  # normalized released object vectors, one per kept branch
    coefficients: np.ndarray


def bcl_premeasure(model: BCLModel, phi) -> Premeasurement:
    c = model.coefficients(phi)
    meter = np.eye(model.N + 1)
    out = np.zeros(model.released_dim * (model.N + 1), dtype=complex)
    labels, probs, cond = [], [], []
    for m in range(model.N):
        cm = c[model.block(m)]
        p = float(np.vdot(cm, cm).real)
        branch = model.released[m] @ cm
        out += np.kron(branch, meter[m + 1])
        if p < BRANCH_CUTOFF:
            continue
        labels.append(m)
        probs.append(p)
        cond.append(branch / math.sqrt(p))
    return Premeasurement(out, tuple(labels), np.array(probs), tuple(cond), c)


# ----------------------------------------------------------------------------
# detectors

@dataclass(frozen=True)
class DetectorSpec:
    """Channel data of a detector.

    Absorbing flexible detector: `channels[m]` has shape (d_m, d_m, D, D) on
    the full end space. Absorbing fixed array: `channels[m]` acts on
    sub-detector m only and `rest_states[r]` is the unfired state of
    sub-detector r. A releasing (non-absorbing) detector stores only
    `release_states[m]`, the detector part left behind by signal m; its
    channel states are |phi'_mk><phi'_ml| (x) release state, built from the
    model. For non-ideal detectors `no_signal[mk, nl]` holds T0_mnkl.
    """

    signal_mode: str
    absorbing: bool
    channels: tuple
    dims: tuple
    efficiencies: tuple = None
    rest_states: tuple = ()
    release_states: tuple = ()
    no_signal: np.ndarray = None
    signal_projectors: tuple = ()

    def __post_init__(self):
        if self.signal_mode not in ("flexible", "fixed_array"):
            raise ValidationError(f"unknown signal mode {self.signal_mode!r}")
        ch = tuple(np.asarray(c, dtype=complex) for c in self.channels)
        rel = tuple(StateOperator(r).matrix for r in self.release_states)
        if self.absorbing and rel:
            raise ValidationError("an absorbing detector has no release states")
        if not self.absorbing and ch:
            raise ValidationError("channels of a releasing detector follow from its release states")
        N = len(ch) if self.absorbing else len(rel)
        if N == 0:
            raise ValidationError("detector needs at least one signal")
        eta = (1.0,) * N if self.efficiencies is None else tuple(float(e) for e in self.efficiencies)
        if len(eta) != N:
            raise ValidationError("one efficiency per signal required")
        if any(not (0 < e <= 1) for e in eta):
            raise ValidationError("efficiencies must lie in (0, 1]")
        if self.signal_mode == "fixed_array" and min(eta) < 1:
            raise ValidationError("non-ideal reduction is implemented for flexible-signal detectors")
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "release_states", rel)
        object.__setattr__(self, "efficiencies", eta)
        object.__setattr__(self, "dims", tuple(int(x) for x in self.dims))
        object.__setattr__(self, "rest_states", tuple(StateOperator(r).matrix for r in self.rest_states))
        object.__setattr__(self, "signal_projectors", tuple(np.asarray(P) for P in self.signal_projectors))
        if self.no_signal is not None:
            object.__setattr__(self, "no_signal", np.asarray(self.no_signal, dtype=complex))
        for m, c in enumerate(ch):
            d = c.shape[0]
            if c.ndim != 4 or c.shape[1] != d or c.shape[2] != c.shape[3]:
                raise ValidationError(f"channel {m} must have shape (d, d, D, D)")
            tr = np.einsum("klaa->kl", c)
            if np.max(np.abs(tr - np.eye(d))) > CHANNEL_TOL:
                raise ValidationError(f"channel {m} violates tr T'_mkl = delta_kl")
            if np.max(np.abs(c - c.transpose(1, 0, 3, 2).conj())) > CHANNEL_TOL:
                raise ValidationError(f"channel {m} violates T'_mlk = T'_mkl^dagger")
            if _choi_min_eig(c) < -CHANNEL_TOL:
                raise ValidationError(f"channel {m} does not give states for every input")
        if self.signal_mode == "fixed_array" and len(self.rest_states) != N:
            raise ValidationError("fixed array needs one rest state per sub-detector")
        if min(eta) < 1 and self.no_signal is None:
            raise ValidationError("inefficient detector needs no-signal states T0")
        if self.no_signal is not None:
            T0 = self.no_signal
            if T0.ndim != 4 or T0.shape[0] != T0.shape[1] or T0.shape[2:] != (self.dim, self.dim):
                raise ValidationError("no-signal block must have shape (n, n, D, D)")
            tr = np.einsum("ijaa->ij", T0)
            if np.max(np.abs(tr - tr.conj().T)) > CHANNEL_TOL or _choi_min_eig(T0) < -CHANNEL_TOL:
                raise ValidationError("no-signal states are not positive")

    @property
    def N(self) -> int:
        return len(self.channels) if self.absorbing else len(self.release_states)

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    def _embed(self, m: int, op: np.ndarray) -> np.ndarray:
        return kron(*[op if r == m else self.rest_states[r] for r in range(self.N)])

    def release_state(self, m: int) -> np.ndarray:
        """Detector part of the end state for signal m on all detector factors."""
        if self.absorbing:
            raise UnsupportedOperationError("an absorbing detector never releases the object")
        if self.signal_mode == "flexible":
            return self.release_states[m]
        return self._embed(m, self.release_states[m])

    def full_channel(self, model: BCLModel, m: int) -> np.ndarray:
        """Channel m as blocks T'_mkl on the full end space."""
        if not self.absorbing:
            R = model.released[m]
            obj = np.einsum("ak,bl->klab", R, R.conj())
            det = self.release_state(m)
            d, D = R.shape[1], R.shape[0] * det.shape[0]
            return np.einsum("klab,cd->klacbd", obj, det).reshape(d, d, D, D)
        c = self.channels[m]
        if self.signal_mode == "flexible":
            return c
        d = c.shape[0]
        return np.array([[self._embed(m, c[k, l]) for l in range(d)] for k in range(d)])

    def as_flexible(self, model: BCLModel) -> "DetectorSpec":
        """Same detector with the channels spelled out on the full space."""
        if not self.absorbing:
            rel = tuple(self.release_state(m) for m in range(self.N))
            dims = (self.dims[0], int(np.prod(self.dims[1:])))
            return DetectorSpec("flexible", False, (), dims, self.efficiencies, (), rel,
                                self.no_signal, self.signal_projectors)
        return DetectorSpec("flexible", True, tuple(self.full_channel(model, m) for m in range(self.N)),
                            self.dims, self.efficiencies, (), (), self.no_signal, self.signal_projectors)

    def check_model(self, model: BCLModel):
        if model.N != self.N:
            raise ValidationError(f"detector has {self.N} signals, observable has {model.N} values")
        if self.absorbing:
            for m, c in enumerate(self.channels):
                if c.shape[0] != model.degeneracies[m]:
                    raise ValidationError(f"channel {m} expects degeneracy {c.shape[0]}")
        elif self.dims[0] != model.released_dim:
            raise ValidationError("first factor of a releasing detector must be the released object")
        if self.no_signal is not None:
            if self.no_signal.shape[0] != model.dim:
                raise ValidationError("no-signal block does not match the object dimension")
            scale = np.repeat(1 - np.array(self.efficiencies), model.degeneracies)
            tr = np.einsum("ijaa->ij", self.no_signal)
            if np.max(np.abs(tr - np.diag(scale))) > CHANNEL_TOL:
                raise ValidationError("no-signal states violate tr T0 = (1 - eta_m) delta delta")
        for m, P in enumerate(self.signal_projectors):
            got = np.einsum("ab,klba->kl", P, self.full_channel(model, m))
            if np.max(np.abs(got - np.eye(got.shape[0]))) > CHANNEL_TOL:
                raise ValidationError(f"channel {m} does not contain signal {m}")


def flexible_detector(model: BCLModel, rng: np.random.Generator, internal_dim: int = 2,
                      absorbing: bool = True, efficiencies=None) -> DetectorSpec:
    """Register with ready/no-signal level 0 and signal levels 1..N, plus internal noise.

    Absorbing: the end space is register (x) internal and the object is
    absorbed into the internal degrees of freedom. Releasing: the object is
    a first tensor factor; without a signal it goes on unchanged.
    """
    N, n, r = model.N, model.dim, int(internal_dim)
    eta = np.ones(N) if efficiencies is None else np.asarray(efficiencies, dtype=float)
    if eta.shape != (N,) or np.any(~((eta > 0) & (eta <= 1))):
        raise ValidationError("one efficiency in (0, 1] per signal required")
    reg = np.eye(N + 1)
    proj = [np.outer(reg[m + 1], reg[m + 1]) for m in range(N)]
    ready = np.outer(reg[0], reg[0])
    D_det = (N + 1) * r
    channels, release = [], []
    if absorbing:
        env = max(1, -(-n // r))
        dims = (N + 1, r)
        for m, d in enumerate(model.degeneracies):
            tau = _traced_blocks(random_isometry(r * env, d, rng), r, env)
            channels.append(np.einsum("ab,klcd->klacbd", proj[m], tau).reshape(d, d, D_det, D_det))
        W = random_isometry(r * env, n, rng)
        T0 = np.einsum("ab,klcd->klacbd", ready, _traced_blocks(W, r, env)).reshape(n, n, D_det, D_det)
        sig = [kron(p, np.eye(r)) for p in proj]
    else:
        rd = model.released_dim
        dims = (rd, N + 1, r)
        release = [kron(proj[m], random_density(r, rng)) for m in range(N)]
        sig = [kron(np.eye(rd), p, np.eye(r)) for p in proj]
        T0 = None
        if np.any(eta < 1):
            if rd != n:
                raise ValidationError("an unchanged silent object needs released_dim == object dim")
            obj = np.einsum("ai,bj->ijab", model.basis, model.basis.conj())
            D = n * D_det
            T0 = np.einsum("ijab,cd->ijacbd", obj, kron(ready, random_density(r, rng))).reshape(n, n, D, D)
    if T0 is not None:
        amp = np.repeat(np.sqrt(1 - eta), model.degeneracies)
        T0 = T0 * np.outer(amp, amp)[:, :, None, None]
        if not np.any(eta < 1):
            T0 = None
    return DetectorSpec("flexible", absorbing, tuple(channels), dims, tuple(eta), (),
                        tuple(release), T0, tuple(sig))


def fixed_array_detector(model: BCLModel, rng: np.random.Generator, internal_dim: int = 2,
                         absorbing: bool = True) -> DetectorSpec:
    """One sub-detector per eigenvalue: a rest/fired flag (x) internal noise."""
    N, r = model.N, int(internal_dim)
    flag = np.eye(2)
    fired = np.outer(flag[1], flag[1])
    rest = tuple(kron(np.outer(flag[0], flag[0]), random_density(r, rng)) for _ in range(N))
    s = 2 * r
    if not absorbing:
        release = tuple(kron(fired, random_density(r, rng)) for _ in range(N))
        return DetectorSpec("fixed_array", False, (), (model.released_dim,) + (s,) * N,
                            None, rest, release)
    channels = []
    for d in model.degeneracies:
        env = max(1, -(-d // r))
        tau = _traced_blocks(random_isometry(r * env, d, rng), r, env)
        channels.append(np.einsum("ab,klcd->klacbd", fired, tau).reshape(d, d, s, s))
    return DetectorSpec("fixed_array", True, tuple(channels), (s,) * N, None, rest)


# ----------------------------------------------------------------------------
# end states

@dataclass(frozen=True)
class EndState:
    """Reduced state after registration: a structural (+)_p list with signal records.

    `signals[i]` names what fired in component i (None if nothing did).
    """

    decomposition: DecomposableState
    signals: tuple
    dims: tuple
    kind: str
    preparation: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def weights(self) -> np.ndarray:
        return self.decomposition.weights

    @property
    def states(self) -> list:
        return self.decomposition.states

    def __len__(self):
        return len(self.decomposition)

    def weight_of(self, signal) -> float:
        return float(sum(w for w, s in zip(self.weights, self.signals) if s == signal))

    def flatten(self) -> StateOperator:
        return self.decomposition.flatten()

    def reduced(self, i: int, keep) -> StateOperator:
        return partial_trace(self.states[i], self.dims, keep)

    def check_invariants(self, tol: float = 1e-10) -> float:
        """Largest violation of the weight and trace invariants; raises above tol."""
        w = self.weights
        err = max(abs(math.fsum(w) - 1.0), float(max(0.0, -w.min())))
        for T in self.states:
            err = max(err, abs(np.trace(T.matrix).real - 1.0))
        if err > tol:
            raise NumericalConsistencyError(f"end state invariants violated by {err:.3e}")
        return err

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.decomposition.sample(n, rng)

    def signal_frequencies(self, n: int, rng: np.random.Generator) -> dict:
        idx = self.sample(n, rng)
        counts = np.bincount(idx, minlength=len(self))
        out: dict = {}
        for s, c in zip(self.signals, counts):
            out[s] = out.get(s, 0) + c / n
        return out

    def binomial_z_scores(self, n: int, rng: np.random.Generator) -> dict:
        """(observed - expected)/sigma per signal record for n sampled registrations."""
        freq = self.signal_frequencies(n, rng)
        z = {}
        for s, f in freq.items():
            p = self.weight_of(s)
            sd = math.sqrt(max(p * (1 - p), 0.0) / n)
            z[s] = 0.0 if sd == 0 else (f - p) / sd
        return z


def _decomposition(items) -> DecomposableState:
    w = np.array([x[0] for x in items])
    total = math.fsum(w)
    if abs(total - 1.0) > 1e-12:
        raise NumericalConsistencyError(f"branch weights sum to {total!r}")
    return DecomposableState(tuple((wi, T) for wi, (_, T, _) in zip(w, items)),
                             tags=tuple(s for _, _, s in items))


def _end(items, dims, kind, preparation=False, **meta) -> EndState:
    dec = _decomposition(items)
    return EndState(dec, tuple(s for _, _, s in items), tuple(dims), kind, preparation, meta)


def _hermitian_state(a: np.ndarray) -> StateOperator:
    return StateOperator(0.5 * (a + a.conj().T))


def _flexible_items(model, det, C, eta=None):
    items = []
    for m in range(model.N):
        sl = model.block(m)
        Cm = C[sl, sl]
        p = float(np.trace(Cm).real)
        w = p * (1.0 if eta is None else eta[m])
        if p < BRANCH_CUTOFF or w < BRANCH_CUTOFF:
            continue
        state = np.einsum("kl,klab->ab", Cm, det.full_channel(model, m)) / p
        items.append((w, _hermitian_state(state), (m,)))
    return items


def _coeffs(model: BCLModel, phi=None, S=None) -> np.ndarray:
    if (phi is None) == (S is None):
        raise ValidationError("give exactly one of an object vector or a state operator")
    if S is not None:
        return model.coefficient_matrix(S)
    c = model.coefficients(phi)
    return np.outer(c, c.conj())


def reduce_flexible(model: BCLModel, detector: DetectorSpec, phi=None, S=None) -> EndState:
    detector.check_model(model)
    if min(detector.efficiencies) < 1:
        raise ValidationError("inefficient detector: use nonideal_end_state")
    C = _coeffs(model, phi, S)
    items = _flexible_items(model, detector, C)
    return _end(items, detector.dims, "flexible", input_mixed=S is not None)


def reduce_fixed_array(model: BCLModel, detector: DetectorSpec, phi=None, S=None) -> EndState:
    """Sub-detector m fires and every other sub-detector stays in its rest state."""
    if detector.signal_mode != "fixed_array":
        raise ValidationError("detector is not a fixed-signal array")
    detector.check_model(model)
    C = _coeffs(model, phi, S)
    if not detector.absorbing:
        return _end(_flexible_items(model, detector, C), detector.dims, "fixed_array")
    items = []
    for m in range(model.N):
        sl = model.block(m)
        Cm = C[sl, sl]
        p = float(np.trace(Cm).real)
        if p < BRANCH_CUTOFF:
            continue
        local = np.einsum("kl,klab->ab", Cm, detector.channels[m]) / p
        items.append((p, _hermitian_state(detector._embed(m, local)), (m,)))
    return _end(items, detector.dims, "fixed_array")


def release_end_state(model: BCLModel, detector: DetectorSpec, phi=None, S=None) -> EndState:
    """Released object state (x) signalling detector state; marks a fresh preparation."""
    if detector.absorbing:
        raise UnsupportedOperationError("an absorbing detector never releases the object")
    detector.check_model(model)
    C = _coeffs(model, phi, S)
    items = []
    for m in range(model.N):
        sl = model.block(m)
        Cm = C[sl, sl]
        p = float(np.trace(Cm).real)
        if p < BRANCH_CUTOFF:
            continue
        R = model.released[m]
        obj = R @ Cm @ R.conj().T / p
        items.append((p, _hermitian_state(np.kron(obj, detector.release_state(m))), (m,)))
    dims = (model.released_dim, int(np.prod(detector.dims[1:])))
    return _end(items, dims, "release", preparation=True)


def released_object_states(end: EndState) -> list:
    """Object factor of each component of a release end state."""
    if not end.preparation:
        raise ValidationError("end state does not release the object")
    return [end.reduced(i, [0]) for i in range(len(end))]


def nonideal_end_state(model: BCLModel, detector: DetectorSpec, phi=None, S=None) -> EndState:
    """Signal m with weight p_m eta_m, plus one coherent no-signal component."""
    if detector.signal_mode != "flexible":
        raise ValidationError("non-ideal reduction needs a flexible-signal detector")
    detector.check_model(model)
    C = _coeffs(model, phi, S)
    eta = detector.efficiencies
    items = _flexible_items(model, detector, C, eta)
    p = np.array([np.trace(C[model.block(m), model.block(m)]).real for m in range(model.N)])
    q = math.fsum(p * (1 - np.array(eta)))
    if q >= BRANCH_CUTOFF:
        state = np.einsum("ij,ijab->ab", C, detector.no_signal) / q
        items.append((q, _hermitian_state(state), None))
    return _end(items, detector.dims, "nonideal", signal_weight=math.fsum(p * np.array(eta)),
                no_signal_weight=q)


def nonextremal_input(model: BCLModel, S, detector: DetectorSpec, mode: str = "flexible") -> EndState:
    """Any reduction with c_mk c*_ml replaced by S_mkml."""
    fn = {"flexible": reduce_flexible, "fixed_array": reduce_fixed_array,
          "release": release_end_state, "nonideal": nonideal_end_state}.get(mode)
    if fn is None:
        raise ValidationError(f"unknown reduction {mode!r}")
    return fn(model, detector, S=S)


# ----------------------------------------------------------------------------
# screen

@dataclass(frozen=True)
class ScreenSpec:
    """Object passing a screen (amplitude c_thr) or swallowed by it (c_sw).

    End states live on object (x) screen: `through_state` is the object
    vector behind the screen, `screen_state` the unexcited screen and
    `swallowed_state` the composite state with the object absorbed.
    """

    c_thr: complex
    c_sw: complex
    through_state: np.ndarray
    screen_state: np.ndarray
    swallowed_state: np.ndarray

    def __post_init__(self):
        total = abs(self.c_thr) ** 2 + abs(self.c_sw) ** 2
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"|c_thr|^2 + |c_sw|^2 = {total!r}, not 1")
        object.__setattr__(self, "through_state", _unit(self.through_state, "through state"))
        S = StateOperator(self.screen_state).matrix
        object.__setattr__(self, "screen_state", S)
        W = StateOperator(self.swallowed_state).matrix
        if W.shape[0] != self.through_state.size * S.shape[0]:
            raise ValidationError("swallowed state must act on object (x) screen")
        object.__setattr__(self, "swallowed_state", W)

    @property
    def dims(self) -> tuple:
        return (self.through_state.size, self.screen_state.shape[0])


def blocked_slit_screen(psi, open_slits) -> ScreenSpec:
    """Slit amplitudes psi hit a screen with only `open_slits` transmitting.

    Object space: one level per slit plus an `absorbed` level; the screen is a
    two-level system, excited when it swallows the object.
    """
    psi = _unit(psi, "slit amplitudes")
    n = psi.size
    mask = np.zeros(n, dtype=bool)
    mask[list(open_slits)] = True
    thr = np.where(mask, psi, 0)
    a_thr = np.linalg.norm(thr)
    a_sw = math.sqrt(max(0.0, 1 - a_thr ** 2))
    through = np.zeros(n + 1, dtype=complex)
    if a_thr > 0:
        u = thr / np.max(np.abs(thr))  # rescale first so tiny amplitudes normalize exactly
        through[:n] = u / np.linalg.norm(u)
    else:
        through[0] = 1
    absorbed = np.zeros(n + 1)
    absorbed[n] = 1
    scr = np.diag([1.0, 0.0])
    sw = np.kron(np.outer(absorbed, absorbed), np.diag([0.0, 1.0]))
    return ScreenSpec(complex(a_thr), complex(a_sw), through, scr, sw)


def screen_reduce(spec: ScreenSpec) -> EndState:
    """Through branch and swallowed branch; their interference terms are discarded."""
    items = []
    p_thr, p_sw = abs(spec.c_thr) ** 2, abs(spec.c_sw) ** 2
    if p_thr >= BRANCH_CUTOFF:
        T = np.kron(np.outer(spec.through_state, spec.through_state.conj()), spec.screen_state)
        items.append((p_thr, StateOperator(T), "through"))
    if p_sw >= BRANCH_CUTOFF:
        items.append((p_sw, StateOperator(spec.swallowed_state), "swallowed"))
    return _end(items, spec.dims, "screen")


# ----------------------------------------------------------------------------
# EPR pair

PLUS, MINUS = np.array([1.0, 0.0]), np.array([0.0, 1.0])
SLOT_REST, SLOT_FIRED = np.diag([1.0, 0.0]), np.diag([0.0, 1.0])


def singlet() -> np.ndarray:
    return (np.kron(PLUS, MINUS) - np.kron(MINUS, PLUS)) / math.sqrt(2)


def _check_singlet(v) -> np.ndarray:
    v = _unit(v, "spin pair")
    if v.size != 4 or abs(abs(np.vdot(singlet(), v)) - 1.0) > 1e-10:
        raise ValidationError("input is not the spin singlet")
    return v


def epr_end_state(pair=None, rest=SLOT_REST, fired=SLOT_FIRED) -> EndState:
    """Particle 1 registered by sub-detectors D+ and D-; particle 2 survives.

    End space: spin of particle 2 (x) D+ (x) D-. Signal D- goes with spin +
    of the far particle and D+ with spin -.
    """
    _check_singlet(singlet() if pair is None else pair)
    rest, fired = StateOperator(rest).matrix, StateOperator(fired).matrix
    up, dn = np.outer(PLUS, PLUS), np.outer(MINUS, MINUS)
    items = [(0.5, StateOperator(kron(up, rest, fired)), "D-"),
             (0.5, StateOperator(kron(dn, fired, rest)), "D+")]
    return _end(items, (2, rest.shape[0], rest.shape[0]), "epr")


def epr_two_sided_end_state(pair=None, rest=SLOT_REST, fired=SLOT_FIRED) -> EndState:
    """Both particles registered: D1+ (x) D1- (x) D2+ (x) D2-."""
    _check_singlet(singlet() if pair is None else pair)
    r, f = StateOperator(rest).matrix, StateOperator(fired).matrix
    items = [(0.5, StateOperator(kron(r, f, f, r)), ("D1-", "D2+")),
             (0.5, StateOperator(kron(f, r, r, f)), ("D1+", "D2-"))]
    return _end(items, (r.shape[0],) * 4, "epr2")


def far_spin_reduced_state(pair=None) -> StateOperator:
    v = _check_singlet(singlet() if pair is None else pair)
    return partial_trace(StateOperator.pure(v), (2, 2), [1])


def sample_epr(end: EndState, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Signal value (+1 for D+, -1 for D-) and Born-sampled far spin per registration."""
    idx = end.sample(n, rng)
    sig = np.array([1 if end.signals[i] == "D+" else -1 for i in idx], dtype=np.int64)
    p_up = np.array([end.reduced(i, [0]).matrix[0, 0].real for i in range(len(end))])
    spin = np.where(rng.random(n) < p_up[idx], 1, -1).astype(np.int64)
    return sig, spin


def integer_correlation(x, y) -> float:
    """Pearson correlation of integer samples evaluated in exact integer arithmetic."""
    x = [int(v) for v in x]
    y = [int(v) for v in y]
    n = len(x)
    sx, sy = sum(x), sum(y)
    num = n * sum(a * b for a, b in zip(x, y)) - sx * sy
    vx = n * sum(a * a for a in x) - sx * sx
    vy = n * sum(b * b for b in y) - sy * sy
    if vx == 0 or vy == 0:
        raise ValidationError("correlation undefined for constant samples")
    den = vx * vy
    root = math.isqrt(den)
    if root * root == den:
        return num / root
    return num / math.sqrt(den)


# ----------------------------------------------------------------------------
# two bosons on a pair of spin detectors

def _hbt_amplitudes(abc) -> np.ndarray:
    a = np.asarray(abc, dtype=complex)
    if a.shape != (3,):
        raise ValidationError("need amplitudes (a, b, c)")
    total = float(np.sum(np.abs(a) ** 2))
    if abs(total - 1.0) > 1e-12:
        raise ValidationError(f"|a|^2 + |b|^2 + |c|^2 = {total!r}, not 1")
    return a


def hbt_two_boson_vector(abc) -> np.ndarray:
    """a|++> + b|--> + c(|+-> + |-+>)/sqrt 2 in C^2 (x) C^2."""
    a, b, c = _hbt_amplitudes(abc)
    pm = (np.kron(PLUS, MINUS) + np.kron(MINUS, PLUS)) / math.sqrt(2)
    v = a * np.kron(PLUS, PLUS) + b * np.kron(MINUS, MINUS) + c * pm
    if np.max(np.abs(symmetrizer(2, 2) @ v - v)) > 1e-12:
        raise NumericalConsistencyError("two-boson vector is not symmetric")
    return v


def hbt_closed_form(abc) -> float:
    A, B = (float(abs(x) ** 2) for x in _hbt_amplitudes(abc)[:2])
    den = (A - A * A) * (B - B * B)
    if den <= 0:
        raise ValidationError("correlation undefined when either detector is certain")
    return -A * B / math.sqrt(den)


def hbt_projectors() -> tuple[np.ndarray, np.ndarray]:
    """'D+ fires' and 'D- fires' on the two-particle spin space."""
    up, dn = np.outer(PLUS, PLUS), np.outer(MINUS, MINUS)
    pp = np.kron(up, up)
    mm = np.kron(dn, dn)
    pm_vec = (np.kron(PLUS, MINUS) + np.kron(MINUS, PLUS)) / math.sqrt(2)
    pm = np.outer(pm_vec, pm_vec)
    return pp + pm, mm + pm


def hbt_formal_end_vector(abc) -> np.ndarray:
    """Unreduced end vector a|2,0> + b|0,2> + c|1,1> on the count spaces of D+ (x) D-."""
    a, b, c = _hbt_amplitudes(abc)
    e = np.eye(3)
    return a * np.kron(e[2], e[0]) + b * np.kron(e[0], e[2]) + c * np.kron(e[1], e[1])


@dataclass(frozen=True)
class HBTResult:
    end: EndState
    correlation: float  # from the reduced end state
    correlation_input: float  # from the two-boson state before registration
    closed_form: float


def hbt_register(abc, tol: float = 1e-12) -> HBTResult:
    """Reduced end state on D+ (x) D- count spaces and the signal correlation."""
    a, b, c = _hbt_amplitudes(abc)
    e = np.eye(3)
    cnt = [np.outer(e[i], e[i]) for i in range(3)]
    items = [(abs(a) ** 2, StateOperator(kron(cnt[2], cnt[0])), ("D+", "D+")),
             (abs(b) ** 2, StateOperator(kron(cnt[0], cnt[2])), ("D-", "D-")),
             (abs(c) ** 2, StateOperator(kron(cnt[1], cnt[1])), ("D+", "D-"))]
    items = [x for x in items if x[0] >= BRANCH_CUTOFF]
    end = _end(items, (3, 3), "hbt")
    fires = np.diag([0.0, 1.0, 1.0])
    C_end = normalized_correlation(end.flatten(), kron(fires, np.eye(3)), kron(np.eye(3), fires))
    Pp, Pm = hbt_projectors()
    C_in = normalized_correlation(StateOperator.pure(hbt_two_boson_vector(abc)), Pp, Pm)
    closed = hbt_closed_form(abc)
    if abs(C_end - closed) > tol or abs(C_in - closed) > tol:
        raise NumericalConsistencyError(
            f"HBT correlation {C_end!r} / {C_in!r} disagrees with closed form {closed!r}")
    return HBTResult(end, C_end, C_in, closed)


# ----------------------------------------------------------------------------
# layered detector tracks

@dataclass(frozen=True)
class TrackSetup:
    """Stack of layers of cells of width d, registering the transverse position.

    The instrumented window has `n_cells` cells; between layers the state is
    propagated on a local window of 2 * local_cells + 1 cells around the
    cell that fired. `periodic` wraps cell indices (used for plane waves).
    """

    n_layers: int = 10
    d: float = 1.0
    n_cells: int = 41
    points_per_cell: int = 64
    spacing: float = 0.0025  # longitudinal distance between layers
    p_long: float = 1.0
    mu: float = 1.0
    hbar: float = 1.0
    q0: float = 0.0
    p0: float = 0.0
    dq: float | None = 3.0  # None gives a plane wave over the window
    local_cells: int = 12
    periodic: bool = False
    escape_tol: float = 1e-4  # mass allowed in the two outer cells of a window

    def __post_init__(self):
        if self.n_layers < 1 or self.n_cells < 5 or self.points_per_cell < 2 or self.local_cells < 3:
            raise ValidationError("track setup needs >= 1 layer, >= 5 cells, >= 2 points per cell")
        for name in ("d", "p_long", "mu", "hbar"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.spacing < 0:
            raise ValidationError("layer spacing must be non-negative")

    def replace(self, **kw) -> "TrackSetup":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return TrackSetup(**d)

    @property
    def tau(self) -> float:
        return self.spacing * self.mu / self.p_long

    @property
    def width(self) -> float:
        return self.n_cells * self.d

    @property
    def h(self) -> float:
        return self.d / self.points_per_cell

    def x(self) -> np.ndarray:
        return -0.5 * self.width + self.h * (np.arange(self.n_cells * self.points_per_cell) + 0.5)

    def momentum_spread(self) -> float:
        """hbar tau/(mu d): drift of a state with momentum spread hbar/d over one gap."""
        return self.hbar * self.tau / (self.mu * self.d)

    def fresnel_length(self) -> float:
        """sqrt(hbar tau/mu): how far the sharp edges of a cell-truncated state smear."""
        return math.sqrt(self.hbar * self.tau / self.mu)

    def packet_spread(self) -> float:
        if self.dq is None:
            return 0.0
        return self.hbar / (2 * self.dq) * self.tau / self.mu

    def spreading_per_layer(self) -> float:
        return max(self.momentum_spread(), self.fresnel_length(), self.packet_spread())


def _initial_wave(setup: TrackSetup) -> np.ndarray:
    x = setup.x()
    if setup.dq is None:
        psi = np.exp(1j * setup.p0 * x / setup.hbar)
    else:
        psi = np.exp(-((x - setup.q0) ** 2) / (4 * setup.dq ** 2) + 1j * setup.p0 * x / setup.hbar)
    return psi / math.sqrt(np.sum(np.abs(psi) ** 2) * setup.h)


def _draw(prob: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(prob, axis=-1)
    u = rng.random(prob.shape[0]) * cum[:, -1]
    return np.minimum((cum < u[:, None]).sum(axis=1), prob.shape[1] - 1)


def simulate_tracks(setup: TrackSetup, n_tracks: int, seed: int = 0, chunk: int = 4096) -> np.ndarray:
    """Cell index hit in each layer, shape (n_tracks, n_layers).

    Each layer registers the coarse position: a cell is drawn with its Born
    weight, the released state is the wave restricted to that cell and
    renormalized, and free propagation over tau = spacing mu / p_long
    carries it to the next layer.
    """
    if n_tracks < 1:
        raise ValidationError("need at least one track")
    M, K, H = setup.n_cells, setup.points_per_cell, setup.local_cells
    L = 2 * H + 1
    h = setup.h
    psi0 = _initial_wave(setup).reshape(M, K)
    p0 = np.sum(np.abs(psi0) ** 2, axis=1) * h
    if not setup.periodic and p0[:2].sum() + p0[-2:].sum() > setup.escape_tol:
        raise WindowEscapeError("initial wave packet is not contained in the instrumented window")
    k = 2 * np.pi * np.fft.fftfreq(L * K, d=h)
    prop = np.exp(-1j * setup.hbar * k ** 2 * setup.tau / (2 * setup.mu))
    out = np.empty((n_tracks, setup.n_layers), dtype=np.int64)
    starts = range(0, n_tracks, chunk)
    streams = np.random.SeedSequence(seed).spawn(len(starts))
    for s, ss in zip(starts, streams):
        rng = np.random.default_rng(ss)
        n = min(chunk, n_tracks - s)
        rows = np.arange(n)
        cell = _draw(np.broadcast_to(p0, (n, M)), rng)
        out[s:s + n, 0] = cell
        local = np.zeros((n, L, K), dtype=complex)
        local[:, H] = psi0[cell] / np.sqrt(p0[cell])[:, None]
        for layer in range(1, setup.n_layers):
            if setup.tau > 0:
                f = sfft.fft(local.reshape(n, L * K), axis=1, workers=-1)
                local = sfft.ifft(f * prop, axis=1, workers=-1).reshape(n, L, K)
            prob = np.sum(np.abs(local) ** 2, axis=2) * h
            edge = prob[:, :2].sum(axis=1) + prob[:, -2:].sum(axis=1)
            if np.max(edge) > setup.escape_tol:
                raise WindowEscapeError(
                    f"state spreads past the propagation window (edge mass {np.max(edge):.3e}); "
                    "increase local_cells")
            j = _draw(prob, rng)
            cell = cell + j - H
            if setup.periodic:
                cell = np.mod(cell, M)
            elif np.any((cell < 0) | (cell >= M)):
                raise WindowEscapeError("a track left the instrumented window")
            out[s:s + n, layer] = cell
            keep = local[rows, j] / np.sqrt(prob[rows, j])[:, None]
            local = np.zeros_like(local)
            local[:, H] = keep
    return out


def track_deviation(tracks: np.ndarray, period: int | None = None) -> np.ndarray:
    """Largest distance (in cells) of each track from its first-layer cell."""
    diff = tracks - tracks[:, :1]
    if period:
        diff = (diff + period // 2) % period - period // 2
    return np.max(np.abs(diff), axis=1)
