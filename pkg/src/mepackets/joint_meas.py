"""Joint position-momentum registration through an ancilla.

The object S and an ancilla A (a copy of the same particle) are measured
jointly in the commuting pair a = q - Q, b = p + P, binned into rectangular
cells. Written as a measurement on S alone, the cell (a, b) has density

    rho(a, b) = <chi_ab| T_S |chi_ab> / (2 pi hbar),
    chi_ab(x) = exp(i b x / hbar) conj(psi_A(x - a)),

summed over the ancilla's mixture components. The small-cell effective
effect is S_kl/(2 pi hbar) |chi_kl><chi_kl|. Wave functions are sampled on
a uniform position grid; momentum shifts act as an explicit Fourier sum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import me_quantum as mq
from .qcore import Effect, NumericalConsistencyError, ValidationError

COVERAGE_TOL = 1e-3
BOX_TOL = 1e-8


class CoverageError(NumericalConsistencyError):
    """Cell grid misses more outcome probability than allowed."""


@dataclass(frozen=True)
class CellGrid:
    a_edges: np.ndarray
    b_edges: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a_edges, dtype=float)
        b = np.asarray(self.b_edges, dtype=float)
        if a.ndim != 1 or b.ndim != 1 or len(a) < 2 or len(b) < 2:
            raise ValidationError("need at least one cell along each axis")
        if np.any(np.diff(a) <= 0) or np.any(np.diff(b) <= 0):
            raise ValidationError("cell edges must be strictly increasing")
        object.__setattr__(self, "a_edges", a)
        object.__setattr__(self, "b_edges", b)

    @classmethod
    def uniform(cls, a_range, b_range, na: int, nb: int) -> "CellGrid":
        return cls(np.linspace(*a_range, na + 1), np.linspace(*b_range, nb + 1))

    @property
    def a_centers(self) -> np.ndarray:
        return 0.5 * (self.a_edges[1:] + self.a_edges[:-1])

    @property
    def b_centers(self) -> np.ndarray:
        return 0.5 * (self.b_edges[1:] + self.b_edges[:-1])

    @property
    def areas(self) -> np.ndarray:
        return np.outer(np.diff(self.a_edges), np.diff(self.b_edges))

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.a_edges) - 1, len(self.b_edges) - 1

    def refined(self, factor: int = 2) -> "CellGrid":
        def split(e):
            return np.concatenate([np.linspace(e[i], e[i + 1], factor + 1)[:-1]
                                   for i in range(len(e) - 1)] + [e[-1:]])
        return CellGrid(split(self.a_edges), split(self.b_edges))


@dataclass(frozen=True)
class AncillaSpec:
    """Ancilla state: Gaussian of width parameter sigma, or an ME packet at rest."""

    kind: str = "gaussian"
    sigma: float = 1.0
    dQ: float | None = None
    dP: float | None = None
    hbar: float = 1.0
    tail_tol: float = 1e-12

    def __post_init__(self):
        if self.kind not in ("gaussian", "me_packet"):
            raise ValidationError("ancilla kind must be 'gaussian' or 'me_packet'")
        if not self.hbar > 0:
            raise ValidationError("hbar must be positive")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if self.kind == "me_packet":
            if self.dQ is None or self.dP is None:
                raise ValidationError("ME ancilla needs dQ and dP")
            if 2 * self.dQ * self.dP / self.hbar < 1 - 1e-12:
                raise ValidationError("ME ancilla violates nu >= 1")

    @classmethod
    def me_packet(cls, nu: float, dQ: float, hbar: float = 1.0) -> "AncillaSpec":
        return cls(kind="me_packet", dQ=dQ, dP=nu * hbar / (2 * dQ), hbar=hbar)

    @property
    def widths(self) -> tuple[float, float]:
        if self.kind == "gaussian":
            return self.sigma / math.sqrt(2), self.hbar / (self.sigma * math.sqrt(2))
        return self.dQ, self.dP

    def _packet(self) -> mq.QuantumMEPacket:
        return mq.QuantumMEPacket.from_moments(0.0, 0.0, self.dQ, self.dP, self.hbar)

    def components(self) -> np.ndarray:
        """Mixture weights of the ancilla state."""
        if self.kind == "gaussian":
            return np.ones(1)
        pkt = self._packet()
        M = mq.levels_for_tail(pkt.nu, self.tail_tol)
        R = mq.eigenvalues(pkt.nu, M)
        return R / R.sum()

    def wavefunctions(self, x) -> np.ndarray:
        """Component wave functions psi_m(x), one row per weight."""
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            s = self.sigma
            return ((math.pi * s * s) ** -0.25 * np.exp(-x * x / (2 * s * s)))[None].astype(complex)
        return mq.number_state_wavefunction(self._packet(), x, len(self.components()))


@dataclass(frozen=True)
class PositionGridRep:
    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        d = np.diff(x)
        if len(x) < 8 or np.ptp(d) > 1e-9 * abs(d[0]):
            raise ValidationError("position grid must be uniform with >= 8 points")
        object.__setattr__(self, "x", x)

    @classmethod
    def symmetric(cls, half_width: float, n: int = 1024, center: float = 0.0) -> "PositionGridRep":
        return cls(center + np.linspace(-half_width, half_width, n))

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def half_width(self) -> float:
        return 0.5 * float(self.x[-1] - self.x[0])

    @property
    def momenta(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(len(self.x), self.h)


@dataclass(frozen=True)
class GridState:
    """Mixed state as a weighted ensemble of sampled wave functions."""

    rep: PositionGridRep
    weights: np.ndarray
    vectors: np.ndarray  # (components, points), sum |psi|^2 h = 1 per row
    hbar: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        v = np.atleast_2d(np.asarray(self.vectors, dtype=complex))
        if v.shape != (len(w), len(self.rep.x)):
            raise ValidationError("one sampled vector per weight required")
        if abs(w.sum() - 1) > 1e-12 or np.any(w < 0):
            raise ValidationError("weights must be a probability vector")
        norms = np.sum(np.abs(v) ** 2, axis=1) * self.rep.h
        if np.any(norms < 1 - BOX_TOL) or np.any(norms > 1 + 1e-6):
            raise ValidationError(
                f"box captures too little of the state (min norm {norms.min():.3e})")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "vectors", v / np.sqrt(norms)[:, None])

    def density_matrix(self) -> np.ndarray:
        """Matrix in the orthonormal grid basis sqrt(h) delta(x - x_i)."""
        v = self.vectors * math.sqrt(self.rep.h)
        return (v.T * self.weights) @ v.conj()

    def _mom_weights(self):
        ft = np.fft.fft(self.vectors, axis=1)
        return np.abs(ft) ** 2, self.hbar * self.rep.momenta

    def moments(self) -> dict:
        x, h = self.rep.x, self.rep.h
        rho = self.weights @ (np.abs(self.vectors) ** 2) * h
        mq_ = float(rho @ x)
        vq = float(rho @ (x - mq_) ** 2)
        pw, k = self._mom_weights()
        pw = pw / pw.sum(axis=1, keepdims=True)
        pr = self.weights @ pw
        mp = float(pr @ k)
        vp = float(pr @ (k - mp) ** 2)
        return {"Q": mq_, "P": mp, "dQ": math.sqrt(vq), "dP": math.sqrt(vp)}


def _check_box(rep: PositionGridRep, center: float, width: float, what: str):
    lo, hi = rep.x[0], rep.x[-1]
    reach = 7 * width  # Gaussian mass beyond 7 widths is ~1e-12
    if center - reach < lo or center + reach > hi:
        raise ValidationError(f"position box [{lo:g}, {hi:g}] too small for {what} at {center:g}")


def gaussian_state(rep: PositionGridRep, q0: float, p0: float, dq: float, hbar: float = 1.0) -> GridState:
    """Minimum-uncertainty object state with averages (q0, p0), width dq."""
    _check_box(rep, q0, dq, "object")
    x = rep.x
    psi = (2 * math.pi * dq * dq) ** -0.25 * np.exp(-(x - q0) ** 2 / (4 * dq * dq) + 1j * p0 * x / hbar)
    return GridState(rep, np.ones(1), psi[None], hbar)


def me_packet_state(rep: PositionGridRep, pkt: mq.QuantumMEPacket, tail_tol: float = 1e-12) -> GridState:
    """Quantum ME packet sampled as its diagonal mixture of number states."""
    M = mq.levels_for_tail(pkt.nu, tail_tol)
    c = (2 * M + 1) / max(pkt.nu, 1.0)
    _check_box(rep, pkt.params.Q, pkt.params.dQ * math.sqrt(c), "object")
    R = mq.eigenvalues(pkt.nu, M)
    return GridState(rep, R / R.sum(), mq.number_state_wavefunction(pkt, rep.x, M), pkt.hbar)


def shift_boost_ancilla(anc: AncillaSpec, a: float, b: float, rep: PositionGridRep) -> GridState:
    """Ancilla state shifted by a and boosted by -b: <Q> = a, <P> = -b."""
    dq, dp = anc.widths
    R = anc.components()
    spread = dq * math.sqrt((2 * len(R) + 1) / (2 * dq * dp / anc.hbar)) if len(R) > 1 else dq
    _check_box(rep, a, spread, "shifted ancilla")
    kmax = math.pi * anc.hbar / rep.h
    if abs(b) + 8 * dp * max(1.0, math.sqrt(len(R))) > kmax:
        raise ValidationError("grid too coarse for the requested boost")
    psi = anc.wavefunctions(rep.x - a) * np.exp(-1j * b * rep.x / anc.hbar)
    return GridState(rep, R, psi, anc.hbar)


# ----------------------------------------------------------------------------
# outcome probabilities

def outcome_density(T_S: GridState, anc: AncillaSpec, a, b) -> np.ndarray:
    """Exact joint density of outcomes at the points a (rows) x b (columns)."""
    hbar = anc.hbar
    if abs(T_S.hbar - hbar) > 1e-15:
        raise ValidationError("object and ancilla use different hbar")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    x, h = T_S.rep.x, T_S.rep.h
    if np.max(np.abs(b)) > math.pi * hbar / h:
        raise ValidationError("momentum outcomes exceed the grid's Nyquist range")
    F = np.exp(-1j * np.outer(x, b) / hbar) * h  # (points, nb)
    R = anc.components()
    out = np.zeros((len(a), len(b)))
    chunk = max(1, int(2e7 // (len(R) * len(x))))
    for lo in range(0, len(a), chunk):
        rows = slice(lo, lo + chunk)
        psiA = anc.wavefunctions(x[None, :] - a[rows, None])  # (m, rows, points)
        for wj, phi in zip(T_S.weights, T_S.vectors):
            for Rm, pm in zip(R, psiA):
                amp = (pm * phi[None, :]) @ F
                out[rows] += wj * Rm * np.abs(amp) ** 2
    return out / (2 * math.pi * hbar)


@dataclass
class EffectivePOVM:
    """Small-cell effects E_kl = S_kl/(2 pi hbar) sum_m R_m |chi_m,kl><chi_m,kl|.

    Effects are built on demand as grid operators; `warnings` lists cell
    sizes that are large compared with the ancilla widths.
    """

    grid: CellGrid
    anc: AncillaSpec
    rep: PositionGridRep
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        dq, dp = self.anc.widths
        da = float(np.max(np.diff(self.grid.a_edges)))
        db = float(np.max(np.diff(self.grid.b_edges)))
        if da > dq:
            self.warnings.append(f"cell width in a ({da:.3g}) exceeds ancilla dQ ({dq:.3g})")
        if db > dp:
            self.warnings.append(f"cell width in b ({db:.3g}) exceeds ancilla dP ({dp:.3g})")

    def __len__(self):
        na, nb = self.grid.shape
        return na * nb

    def kernel_vectors(self, k: int, l: int) -> np.ndarray:
        a = self.grid.a_centers[k]
        b = self.grid.b_centers[l]
        x = self.rep.x
        chi = np.conj(self.anc.wavefunctions(x - a)) * np.exp(1j * b * x / self.anc.hbar)
        return chi * math.sqrt(self.rep.h)

    def effect(self, k: int, l: int) -> Effect:
        v = self.kernel_vectors(k, l)
        R = self.anc.components()
        S = self.grid.areas[k, l]
        return Effect(S / (2 * math.pi * self.anc.hbar) * (v.T * R) @ v.conj())

    def __getitem__(self, idx) -> Effect:
        if isinstance(idx, tuple):
            return self.effect(*idx)
        na, nb = self.grid.shape
        if not -len(self) <= idx < len(self):
            raise IndexError(idx)
        k, l = divmod(idx % len(self), nb)
        return self.effect(k, l)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def probabilities(self, T_S: GridState) -> np.ndarray:
        dens = outcome_density(T_S, self.anc, self.grid.a_centers, self.grid.b_centers)
        return np.clip(dens * self.grid.areas, 0.0, 1.0)


def effective_povm(grid: CellGrid, anc: AncillaSpec, rep: PositionGridRep) -> EffectivePOVM:
    return EffectivePOVM(grid, anc, rep)


@dataclass(frozen=True)
class OutcomeStatistics:
    p: np.ndarray
    a: np.ndarray
    b: np.ndarray
    total: float
    mean_a: float
    mean_b: float
    var_a: float
    var_b: float
    cov_ab: float

    @property
    def cell_size(self) -> tuple[float, float]:
        return float(np.max(np.diff(self.a))), float(np.max(np.diff(self.b)))


def _stats(p, a, b) -> OutcomeStatistics:
    total = float(p.sum())
    pa, pb = p.sum(axis=1) / total, p.sum(axis=0) / total
    ma, mb = float(pa @ a), float(pb @ b)
    va, vb = float(pa @ (a - ma) ** 2), float(pb @ (b - mb) ** 2)
    cov = float(np.sum(p / total * np.outer(a - ma, b - mb)))
    return OutcomeStatistics(p, a, b, total, ma, mb, va, vb, cov)


def outcome_statistics(T_S: GridState, grid: CellGrid, anc: AncillaSpec,
                       coverage_tol: float = COVERAGE_TOL) -> OutcomeStatistics:
    """Cell probabilities from the effective POVM, with moments over cell centres."""
    p = effective_povm(grid, anc, T_S.rep).probabilities(T_S)
    st = _stats(p, grid.a_centers, grid.b_centers)
    if 1 - st.total > coverage_tol:
        raise CoverageError(f"cells capture only {st.total:.6f} of the outcome probability")
    return st


def exact_cell_probabilities(T_S: GridState, grid: CellGrid, anc: AncillaSpec,
                             order: int = 6) -> np.ndarray:
    """Cell probabilities by Gauss-Legendre integration of the exact density."""
    xg, wg = np.polynomial.legendre.leggauss(order)

    def nodes(edges):
        lo, hi = edges[:-1, None], edges[1:, None]
        half = 0.5 * (hi - lo)
        return (0.5 * (hi + lo) + half * xg).ravel(), (half * wg).ravel()

    an, aw = nodes(grid.a_edges)
    bn, bw = nodes(grid.b_edges)
    dens = outcome_density(T_S, anc, an, bn) * np.outer(aw, bw)
    na, nb = grid.shape
    return dens.reshape(na, order, nb, order).sum(axis=(1, 3))


def gaussian_prediction(q0, p0, dq_s, dp_s, anc: AncillaSpec) -> dict:
    """Outcome means and variances for an uncorrelated Gaussian object state."""
    dq, dp = anc.widths
    return {"mean_a": q0, "mean_b": p0, "var_a": dq_s ** 2 + dq ** 2, "var_b": dp_s ** 2 + dp ** 2}


def gaussian_cell_probabilities(grid: CellGrid, pred: dict) -> np.ndarray:
    def cdf(e, m, v):
        return 0.5 * (1 + erf((e - m) / math.sqrt(2 * v)))
    pa = np.diff(cdf(grid.a_edges, pred["mean_a"], pred["var_a"]))
    pb = np.diff(cdf(grid.b_edges, pred["mean_b"], pred["var_b"]))
    return np.outer(pa, pb)


def default_grids(q0, p0, dq_s, dp_s, anc: AncillaSpec, cells=(32, 32), cell_span=4.0,
                  points=1024, box_span=8.0):
    """Position grid over +-box_span and cells over +-cell_span combined widths."""
    dq, dp = anc.widths
    wa = math.hypot(dq_s, dq)
    wb = math.hypot(dp_s, dp)
    rep = PositionGridRep.symmetric(box_span * wa + abs(q0), points)
    grid = CellGrid.uniform((q0 - cell_span * wa, q0 + cell_span * wa),
                            (p0 - cell_span * wb, p0 + cell_span * wb), *cells)
    return rep, grid
