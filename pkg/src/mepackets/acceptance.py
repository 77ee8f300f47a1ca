"""Acceptance checks, shared by the test suite and `mepackets verify`."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import joint_meas as jm
from . import me_classical as mc
from . import me_quantum as mq
from . import registration as rg
from . import rigid_rod as rr
from .qcore import DiscretePOVM, von_neumann_entropy


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number}. {self.name}: {self.summary}"

    def as_dict(self) -> dict:
        return {"number": self.number, "name": self.name, "passed": bool(self.passed),
                "summary": self.summary, "seconds": self.seconds,
                "details": _jsonable(self.details)}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (complex, np.complexfloating)):
        return [float(x.real), float(x.imag)]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    return x


def _timed(fn):
    def run(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


@_timed
def check_quadratic_equivalence(seed: int = 0) -> CheckResult:
    p = (1.0, 0.0, 0.5, 1.0)
    t = np.linspace(0.0, 10.0, 201)
    pkt = mq.QuantumMEPacket.from_moments(*p, hbar=1.0)
    rows = {}
    ok = True
    t0 = time.perf_counter()
    for name, V in (("harmonic", mc.PolynomialPotential.harmonic(V2=1.0, mu=1.0)),
                    ("free", mc.PolynomialPotential.free(mu=1.0))):
        cl = mc.quadratic_trajectory(pkt.params, V, t)
        qu = mq.quadratic_trajectory_quantum(pkt, V, t)
        mat = mq.propagate_matrix(pkt, V, t, M=128, tail_tol=1e-12)
        d_cq = cl.max_abs_diff(qu)
        d_mat = mat.trajectory.max_abs_diff(cl)
        rows[name] = {"closed_form_diff": d_cq, "matrix_diff": d_mat, "basis_dim": mat.dim}
        ok &= d_cq <= 1e-12 and d_mat <= 1e-6
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 10
    rows["runtime_s"] = elapsed
    s = ", ".join(f"{k}: closed {v['closed_form_diff']:.1e}, matrix {v['matrix_diff']:.1e}"
                  for k, v in rows.items() if isinstance(v, dict))
    return CheckResult(1, "quadratic-potential equivalence", ok, f"{s}; {elapsed:.1f} s", rows)


@_timed
def check_moment_identities(seed: int = 0) -> CheckResult:
    rows = {}
    ok = True
    for nu in (1.5, 3.0, 10.0):
        pkt = mq.QuantumMEPacket.from_nu(nu, Q=0.7, P=-0.4, dQ=1.0, hbar=1.0)
        prm = pkt.params
        sym = (mq.matrix_average(pkt, "qp") + mq.matrix_average(pkt, "pq")).real
        want_sym = 2 * prm.Q * prm.P
        pqqp = mq.matrix_average(pkt, "pqqp").real
        want = mc.gaussian_moment(prm, 2, 2) + 2 * prm.dQ ** 2 * prm.dP ** 2 / nu ** 2
        e1 = abs(sym - want_sym) / abs(want_sym)
        e2 = abs(pqqp - want) / abs(want)
        rows[nu] = {"qp+pq_rel": e1, "pq2p_rel": e2}
        ok &= e1 <= 1e-6 and e2 <= 1e-6
    worst = max(max(v.values()) for v in rows.values())
    return CheckResult(2, "moment identities", ok, f"worst relative error {worst:.1e}", rows)


@_timed
def check_entropy(seed: int = 0) -> CheckResult:
    s1 = mq.quantum_entropy(1.0)
    s100 = mq.quantum_entropy(100.0)
    asym = math.log(100) + 1 - math.log(2)
    rows = {"S(1)": s1, "S(100)": s100, "asymptote": asym}
    ok = s1 == 0.0 and abs(s100 - asym) < 0.01
    worst = 0.0
    for nu in (1.0, 1.5, 3.0, 10.0):
        T, _ = mq.build_state(mq.QuantumMEPacket.from_nu(nu), tail_tol=1e-12)
        worst = max(worst, abs(von_neumann_entropy(T) - mq.quantum_entropy(nu)))
    rows["matrix_vs_formula"] = worst
    ok &= worst <= 1e-6
    return CheckResult(3, "entropy suite", ok,
                       f"S(1) = {s1}, |S(100) - asymptote| = {abs(s100 - asym):.2e}, "
                       f"matrix vs formula {worst:.1e}", rows)


@_timed
def check_classical_limit(seed: int = 0) -> CheckResult:
    nus = np.array([10.0, 20.0, 40.0])
    errs = np.array([mq.classical_limit_error(1.0, 0.5, 1.0, 1.0, nu) for nu in nus])
    slope = float(np.polyfit(np.log(nus), np.log(errs), 1)[0])
    ok = abs(slope + 2.0) <= 0.1
    return CheckResult(4, "classical limit", ok, f"slope {slope:.4f} (errors {errs.tolist()})",
                       {"nu": nus.tolist(), "errors": errs.tolist(), "slope": slope})


@_timed
def check_rigid_rod(seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    spec = rr.ChainSpec(N=100)
    lam = 1.0
    Ns = [100 * 2 ** k for k in range(8)]
    rows = rr.n_scan(spec, Ns, lam)
    exact_mean = all(r.mean_L == (r.N - 1) * spec.xi for r in rows)
    slope = float(np.polyfit(np.log([r.N for r in rows]), np.log([r.rel_dL for r in rows]), 1)[0])
    s = [r.sqrtN_rel for r in rows]
    last_change = abs(s[-1] - s[-2]) / abs(s[-2])
    asym = rr.asymptotic_constant(spec, lam)
    high_t = rr.high_temperature_constant(spec, lam)
    elapsed = time.perf_counter() - t0
    ok = exact_mean and abs(slope + 0.5) <= 0.02 and last_change < 0.01 and elapsed < 30
    return CheckResult(
        5, "rigid rod", ok,
        f"slope {slope:.4f}, sqrt(N) ratio -> {s[-1]:.5f} (last change {last_change:.1e}); "
        f"reference constant 2 sqrt3/(pi kappa xi sqrt lambda) = {asym:.5f}, "
        f"equipartition limit 1/(kappa xi sqrt lambda) = {high_t:.5f}",
        {"N": Ns, "sqrtN_ratio": s, "slope": slope, "mean_exact": exact_mean,
         "limit": s[-1], "asymptotic_constant": asym, "equipartition_constant": high_t,
         "runtime_s": elapsed})


def cubic_dPdt(p: mc.MEPacketParams, V: mc.PolynomialPotential) -> float:
    """Averaged force -V1 - V2 Q - (V3/2)(Q^2 + dQ^2) for V up to cubic order."""
    return -V[1] - V[2] * p.Q - 0.5 * V[3] * (p.Q ** 2 + p.dQ ** 2)


@_timed
def check_monte_carlo(seed: int = 0) -> CheckResult:
    p = mc.MEPacketParams(0.5, 0.2, 0.4, 0.6)
    V = mc.PolynomialPotential((0.0, 0.3, 1.0, 0.8), mu=1.0)
    want = cubic_dPdt(p, V)
    got, se = mc.finite_difference_dPdt(p, V, h=1e-3, n_samples=1_000_000, seed=seed)
    z = (got - want) / se
    ok = abs(z) <= 3
    return CheckResult(6, "Monte Carlo oracle", ok,
                       f"dP/dt = {got:.6f} +- {se:.1e} vs {want:.6f} ({z:+.2f} se)",
                       {"finite_difference": got, "se": se, "formula": want, "z": z,
                        "taylor_dPdt": mc.moment_taylor_derivatives(p, V).dP[0]})


@_timed
def check_joint_measurement(seed: int = 0) -> CheckResult:
    hbar = 1.0
    q0, p0, dq = 0.5, -0.3, 0.7
    dp = hbar / (2 * dq)
    anc = jm.AncillaSpec(sigma=1.0, hbar=hbar)
    rep, grid = jm.default_grids(q0, p0, dq, dp, anc, cells=(48, 48), cell_span=6.0)
    T = jm.gaussian_state(rep, q0, p0, dq, hbar)
    st = jm.outcome_statistics(T, grid, anc)
    oracle = jm.exact_cell_probabilities(T, grid, anc, order=6)
    ost = jm._stats(oracle, grid.a_centers, grid.b_centers)
    va_want = dq ** 2 + anc.sigma ** 2 / 2
    vb_want = dp ** 2 + hbar ** 2 / (2 * anc.sigma ** 2)
    ca, cb = st.cell_size
    rows = {
        "total": st.total,
        "mean_a_offset_cells": abs(st.mean_a - q0) / ca,
        "mean_b_offset_cells": abs(st.mean_b - p0) / cb,
        "var_a_rel": abs(st.var_a - va_want) / va_want,
        "var_b_rel": abs(st.var_b - vb_want) / vb_want,
        "oracle_var_a_rel": abs(ost.var_a - va_want) / va_want,
        "oracle_var_b_rel": abs(ost.var_b - vb_want) / vb_want,
        "povm_vs_oracle_max": float(np.max(np.abs(st.p - oracle))),
    }
    ok = (st.total >= 0.999 and ost.total >= 0.999
          and rows["mean_a_offset_cells"] <= 1 and rows["mean_b_offset_cells"] <= 1
          and max(rows["var_a_rel"], rows["var_b_rel"],
                  rows["oracle_var_a_rel"], rows["oracle_var_b_rel"]) <= 0.02)
    return CheckResult(7, "joint measurement", ok,
                       f"total {st.total:.8f}, variance errors {rows['var_a_rel']:.1e} / "
                       f"{rows['var_b_rel']:.1e}, POVM vs integral {rows['povm_vs_oracle_max']:.1e}",
                       rows)


def _random_unit(n, rng):
    v = rng.normal(size=n) + 1j * rng.normal(size=n)
    return v / np.linalg.norm(v)


@_timed
def check_registration(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    draws = 100_000
    worst_inv = 0.0
    ends = []
    # non-degenerate observable: p_k = |c_k|^2
    model = rg.BCLModel.random((1, 1, 1, 1), rng)
    phi = _random_unit(4, rng)
    c = model.coefficients(phi)
    pre = rg.bcl_premeasure(model, phi)
    probrep = float(np.max(np.abs(pre.probabilities - np.abs(c) ** 2)))
    born = DiscretePOVM.from_observable(model.observable())
    # degenerate observable through every reduction
    dmodel = rg.BCLModel.random((2, 1, 3), rng)
    dphi = _random_unit(dmodel.dim, rng)
    flex = rg.flexible_detector(dmodel, rng)
    fixed = rg.fixed_array_detector(dmodel, rng)
    rel = rg.flexible_detector(dmodel, rng, absorbing=False)
    eta = (0.9, 0.35, 0.6)
    nonid = rg.flexible_detector(dmodel, rng, efficiencies=eta)
    ends += [rg.reduce_flexible(model, rg.flexible_detector(model, rng), phi),
             rg.reduce_flexible(dmodel, flex, dphi),
             rg.reduce_fixed_array(dmodel, fixed, dphi),
             rg.release_end_state(dmodel, rel, dphi),
             rg.nonextremal_input(dmodel, rg.random_density(dmodel.dim, rng), flex)]
    ni = rg.nonideal_end_state(dmodel, nonid, dphi)
    ends.append(ni)
    ends.append(rg.screen_reduce(rg.blocked_slit_screen(np.ones(2) / math.sqrt(2), [0])))
    ends.append(rg.epr_end_state())
    ends.append(rg.epr_two_sided_end_state())
    for e in ends:
        worst_inv = max(worst_inv, e.check_invariants(1e-10))
    born_err = float(np.max(np.abs(ends[0].weights - born.probabilities(
        np.outer(phi, phi.conj())))))
    p_m = np.array([np.vdot(dmodel.coefficients(dphi)[dmodel.block(m)],
                            dmodel.coefficients(dphi)[dmodel.block(m)]).real for m in range(3)])
    ni_sum_err = abs(math.fsum(ni.weights) - 1.0)
    ni_w_err = float(np.max(np.abs(ni.weights[:3] - p_m * np.array(eta))))
    z = ni.binomial_z_scores(draws, np.random.default_rng(seed + 1))
    zmax = max(abs(v) for v in z.values())
    epr = rg.epr_end_state()
    sig, spin = rg.sample_epr(epr, draws, np.random.default_rng(seed + 2))
    epr_corr = rg.integer_correlation(sig, spin)
    hbt_err = 0.0
    hrng = np.random.default_rng(seed + 3)
    for _ in range(100):
        v = _random_unit(3, hrng)
        r = rg.hbt_register(v, tol=1.0)
        hbt_err = max(hbt_err, abs(r.correlation - r.closed_form), abs(r.correlation_input - r.closed_form))
    rows = {"invariants": worst_inv, "probrep": probrep, "born": born_err,
            "nonideal_sum_err": ni_sum_err, "nonideal_weight_err": ni_w_err,
            "max_z": zmax, "z": {str(k): v for k, v in z.items()},
            "epr_correlation": epr_corr, "hbt_max_err": hbt_err}
    ok = (worst_inv <= 1e-10 and probrep <= 1e-12 and born_err <= 1e-12
          and ni_sum_err <= 1e-14 and ni_w_err <= 1e-12 and zmax <= 3
          and epr_corr == -1.0 and hbt_err <= 1e-12)
    return CheckResult(8, "registration", ok,
                       f"invariants {worst_inv:.1e}, p_k err {probrep:.1e}, non-ideal sum err "
                       f"{ni_sum_err:.1e}, max |z| {zmax:.2f}, EPR corr {epr_corr}, HBT err {hbt_err:.1e}",
                       rows)


@_timed
def check_tracks(seed: int = 0) -> CheckResult:
    setup = rg.TrackSetup()
    spread = setup.spreading_per_layer()
    tracks = rg.simulate_tracks(setup, 10_000, seed=seed)
    frac = float(np.mean(rg.track_deviation(tracks) <= 2))
    ok = spread < setup.d / 10 and frac >= 0.95
    return CheckResult(9, "tracks", ok,
                       f"{frac:.2%} of 10^4 tracks within 2 cells (spreading per layer {spread:.3f} d)",
                       {"fraction": frac, "spreading_per_layer": spread,
                        "fresnel_length": setup.fresnel_length(),
                        "momentum_spread": setup.momentum_spread()})


CHECKS = (check_quadratic_equivalence, check_moment_identities, check_entropy,
          check_classical_limit, check_rigid_rod, check_monte_carlo,
          check_joint_measurement, check_registration, check_tracks)


def run_all(seed: int = 0, only=None) -> list[CheckResult]:
    out = []
    for i, fn in enumerate(CHECKS, start=1):
        if only and i not in only:
            continue
        out.append(fn(seed=seed))
    return out
