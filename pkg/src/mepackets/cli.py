"""Command-line driver: `mepackets <subcommand> [options]`.

Every subcommand writes `<subcommand>.csv` (a table) and/or
`<subcommand>.json` (a summary) into the output directory, chosen by
--out, else $MEPACKETS_OUT, else the working directory. Options may also
come from a JSON file given with --config; flags on the command line win.

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 numerical diagnostic.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import acceptance
from . import joint_meas as jm
from . import me_classical as mc
from . import me_quantum as mq
from . import registration as rg
from . import rigid_rod as rr
from .qcore import NumericalConsistencyError, ValidationError

ENV_OUT = "MEPACKETS_OUT"
EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
_META_KEYS = {"command", "config", "out", "func", "quiet"}


class ConfigError(ValidationError):
    pass


# ----------------------------------------------------------------------------
# output helpers

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return "" if x is None else str(x)


def config_dict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _META_KEYS}


def config_hash(args) -> str:
    blob = json.dumps(config_dict(args), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def out_dir(args) -> Path:
    d = Path(args.out or os.environ.get(ENV_OUT) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_csv(args, header, rows, name: str | None = None) -> Path:
    path = out_dir(args) / f"{name or args.command}.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# mepackets {__version__} seed={args.seed} config_sha256={config_hash(args)}\r\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


def write_json(args, payload: dict, name: str | None = None) -> Path:
    path = out_dir(args) / f"{name or args.command}.json"
    body = {"mepackets": __version__, "command": args.command, "seed": args.seed,
            "config_sha256": config_hash(args), "config": config_dict(args)}
    body.update(acceptance._jsonable(payload))
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _say(args, msg: str):
    if not args.quiet:
        print(msg)


# ----------------------------------------------------------------------------
# argument parsing helpers

def parse_scan(text: str) -> list[int]:
    """'100:12800:x2' (geometric) or '10:50:+10' (arithmetic), endpoints inclusive."""
    try:
        lo, hi, step = text.split(":")
        lo, hi = int(lo), int(hi)
        if step.startswith("x"):
            f = float(step[1:])
            if f <= 1:
                raise ValueError
            out, n = [], lo
            while n <= hi:
                out.append(n)
                n = int(round(n * f))
            return out
        inc = int(step.lstrip("+"))
        if inc <= 0:
            raise ValueError
        return list(range(lo, hi + 1, inc))
    except ValueError:
        raise ConfigError(f"bad scan {text!r}; use START:STOP:xFACTOR or START:STOP:+STEP") from None


def _floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _complexes(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(complex(x) for x in text)
    return tuple(complex(x.replace(" ", "")) for x in str(text).split(",") if x.strip())


def potential_from_args(args) -> mc.PolynomialPotential:
    if args.potential == "harmonic":
        return mc.PolynomialPotential.harmonic(V2=args.omega2, mu=args.mu)
    if args.potential == "free":
        return mc.PolynomialPotential.free(mu=args.mu)
    if args.potential == "poly":
        if not args.coeffs:
            raise ConfigError("--potential poly needs --coeffs V0,V1,...")
        return mc.PolynomialPotential(_floats(args.coeffs), mu=args.mu)
    raise ConfigError(f"unknown potential {args.potential!r}")


def _times(args) -> np.ndarray:
    if args.n_times < 2 or not args.t_max > 0:
        raise ConfigError("need --t-max > 0 and --n-times >= 2")
    return np.linspace(0.0, args.t_max, args.n_times)


def _add_packet(p, dP=True, nu=False):
    g = p.add_argument_group("packet")
    g.add_argument("--Q", type=float, default=1.0)
    g.add_argument("--P", type=float, default=0.0)
    g.add_argument("--dQ", type=float, default=0.5)
    if dP:
        g.add_argument("--dP", type=float, default=None, help="defaults from --nu")
    if nu:
        g.add_argument("--nu", type=float, default=1.0)
    g.add_argument("--hbar", type=float, default=1.0)


def _add_potential(p):
    g = p.add_argument_group("potential")
    g.add_argument("--potential", choices=("harmonic", "free", "poly"), default="harmonic")
    g.add_argument("--omega2", type=float, default=1.0, help="V2 of the harmonic potential")
    g.add_argument("--coeffs", default=None, help="V0,V1,...,V5 for --potential poly")
    g.add_argument("--mu", type=float, default=1.0)


def _add_times(p):
    p.add_argument("--t-max", type=float, default=10.0)
    p.add_argument("--n-times", type=int, default=101)


def _packet_params(args) -> mc.MEPacketParams:
    dP = args.dP if getattr(args, "dP", None) is not None else args.nu * args.hbar / (2 * args.dQ)
    return mc.MEPacketParams(args.Q, args.P, args.dQ, dP, v=2 * math.pi * args.hbar)


def _traj_rows(tr: mc.MomentTrajectory, extra=None):
    for i, r in enumerate(tr.rows()):
        yield list(r) + ([] if extra is None else list(extra[i]))


# ----------------------------------------------------------------------------
# subcommands

def cmd_me_classical(args) -> int:
    p = _packet_params(args)
    V = potential_from_args(args)
    t = _times(args)
    header = ["t", "Q", "P", "dQ", "dP"]
    if args.method == "closed":
        tr = mc.quadratic_trajectory(p, V, t)
        rows = list(_traj_rows(tr))
        summary = {"method": "closed", "regime": tr.meta["regime"]}
    elif args.method == "taylor":
        td = mc.moment_taylor_derivatives(p, V)
        rows = [[ti, *td.predict(p, ti)] for ti in t]
        header = ["t", "Q", "P"]
        summary = {"method": "taylor", "dP_derivatives": td.dP, "dQ_derivatives": td.dQ}
    else:
        header += ["Q_se", "P_se", "dQ_se", "dP_se"]
        rows = []
        for ti in t:
            m = mc.monte_carlo_oracle(p, V, ti, n_samples=args.samples, seed=args.seed)
            rows.append([ti, m.Q, m.P, m.dQ, m.dP, m.Q_se, m.P_se, m.dQ_se, m.dP_se])
        summary = {"method": "monte-carlo", "samples": args.samples}
    summary["entropy"] = mc.classical_entropy(p)
    path = write_csv(args, header, rows)
    write_json(args, summary)
    _say(args, f"wrote {path}")
    return EXIT_OK


def cmd_me_quantum(args) -> int:
    prm = _packet_params(args)
    pkt = mq.QuantumMEPacket(prm, args.hbar)
    V = potential_from_args(args)
    t = _times(args)
    closed = mq.quadratic_trajectory_quantum(pkt, V, t)
    mat = mq.propagate_matrix(pkt, V, t, M=args.levels, tail_tol=args.tail_tol)
    rows = list(_traj_rows(closed, [list(r)[1:] for r in mat.trajectory.rows()]))
    header = ["t", "Q", "P", "dQ", "dP", "Q_matrix", "P_matrix", "dQ_matrix", "dP_matrix"]
    path = write_csv(args, header, rows)
    T, rep = mq.build_state(pkt, tail_tol=args.tail_tol)
    write_json(args, {"nu": pkt.nu, "entropy": mq.quantum_entropy(pkt.nu),
                      "levels": rep.basis.levels, "tail_mass": rep.tail_mass,
                      "matrix_basis_dim": mat.dim,
                      "matrix_max_abs_diff": mat.trajectory.max_abs_diff(closed)})
    _say(args, f"wrote {path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    hbar = args.hbar
    dP = args.nu * hbar / (2 * args.dQ)
    pkt = mq.QuantumMEPacket.from_moments(args.Q, args.P, args.dQ, dP, hbar)
    V = potential_from_args(args)
    if not V.is_quadratic:
        raise ConfigError("compare needs a quadratic potential (harmonic, free or poly up to V2)")
    t = _times(args)
    cl = mc.quadratic_trajectory(pkt.params, V, t)
    qu = mq.quadratic_trajectory_quantum(pkt, V, t)
    mat = mq.propagate_matrix(pkt, V, t, tail_tol=args.tail_tol).trajectory if args.matrix else None
    keys = ("Q", "P", "dQ", "dP")
    header = ["t"] + [f"{k}_classical" for k in keys] + [f"{k}_quantum" for k in keys]
    if mat is not None:
        header += [f"{k}_matrix" for k in keys]
    header.append("max_abs_diff")
    rows = []
    for i, ti in enumerate(t):
        c = [getattr(cl, k)[i] for k in keys]
        q = [getattr(qu, k)[i] for k in keys]
        row = [ti, *c, *q]
        diff = max(abs(a - b) for a, b in zip(c, q))
        if mat is not None:
            m = [getattr(mat, k)[i] for k in keys]
            row += m
            diff = max(diff, max(abs(a - b) for a, b in zip(c, m)))
        rows.append(row + [diff])
    path = write_csv(args, header, rows)
    write_json(args, {"nu": pkt.nu, "max_abs_diff": max(r[-1] for r in rows),
                      "regime": cl.meta["regime"]})
    _say(args, f"wrote {path}")
    return EXIT_OK


def cmd_rod(args) -> int:
    spec = rr.ChainSpec(N=max(2, min(parse_scan(args.n_scan))), mu=args.mu, kappa=args.kappa,
                        xi=args.xi, hbar=args.hbar)
    Ns = parse_scan(args.n_scan)
    if min(Ns) < 2:
        raise ConfigError("chains need N >= 2")
    rows = []
    if args.energy is not None:
        header = ["N", "lambda", "mean_L", "rel_dL", "sqrtN_rel"]
        for N in Ns:
            s = spec.replace(N=N)
            g = rr.solve_lambda(s, args.energy * (N - 1))
            mean, var = rr.length_statistics(s, g)
            rel = math.sqrt(var) / mean
            rows.append([N, g.lam, mean, rel, math.sqrt(N) * rel])
        lam_note = {"energy_per_mode": args.energy}
    else:
        header = ["N", "mean_L", "rel_dL", "sqrtN_rel"]
        for r in rr.n_scan(spec, Ns, args.lam):
            rows.append([r.N, r.mean_L, r.rel_dL, r.sqrtN_rel])
        lam_note = {"lambda": args.lam,
                    "asymptotic_constant": rr.asymptotic_constant(spec, args.lam),
                    "equipartition_constant": rr.high_temperature_constant(spec, args.lam)}
    path = write_csv(args, header, rows)
    Nl = np.log([r[0] for r in rows])
    rel = np.log([r[header.index("rel_dL")] for r in rows])
    slope = float(np.polyfit(Nl, rel, 1)[0]) if len(rows) > 1 else float("nan")
    write_json(args, {"slope": slope, "last_sqrtN_rel": rows[-1][-1], **lam_note})
    _say(args, f"wrote {path}")
    return EXIT_OK


def cmd_jointmeas(args) -> int:
    hbar = args.hbar
    if args.ancilla_nu is not None:
        anc = jm.AncillaSpec.me_packet(args.ancilla_nu, args.ancilla_dQ, hbar)
    else:
        anc = jm.AncillaSpec(sigma=args.sigma, hbar=hbar)
    dp = args.dP if args.dP is not None else hbar / (2 * args.dQ)
    rep, grid = jm.default_grids(args.Q, args.P, args.dQ, dp, anc, cells=(args.cells, args.cells),
                                 cell_span=args.cell_span, points=args.points)
    if args.dP is None:
        T = jm.gaussian_state(rep, args.Q, args.P, args.dQ, hbar)
    else:
        T = jm.me_packet_state(rep, mq.QuantumMEPacket.from_moments(args.Q, args.P, args.dQ, dp, hbar))
    st = jm.outcome_statistics(T, grid, anc)
    pred = jm.gaussian_prediction(args.Q, args.P, args.dQ, dp, anc)
    rows = [[a, b, st.p[i, j]] for i, a in enumerate(grid.a_centers)
            for j, b in enumerate(grid.b_centers)]
    path = write_csv(args, ["a", "b", "p"], rows)
    write_json(args, {"total": st.total, "mean_a": st.mean_a, "mean_b": st.mean_b,
                      "var_a": st.var_a, "var_b": st.var_b, "cov_ab": st.cov_ab,
                      "predicted": pred, "cell_size": st.cell_size})
    _say(args, f"wrote {path}")
    return EXIT_OK


def _register_end(args, rng):
    sc = args.scenario
    if sc == "screen":
        psi = np.array(_complexes(args.amplitudes or "0.7071067811865476,0.7071067811865476"))
        psi = psi / np.linalg.norm(psi)
        return rg.screen_reduce(rg.blocked_slit_screen(psi, _ints(args.open_slits))), {}
    if sc == "epr":
        return rg.epr_end_state(), {}
    if sc == "hbt":
        abc = np.array(_complexes(args.amplitudes or "0.5773502691896258,0.5773502691896258,0.5773502691896258"))
        r = rg.hbt_register(abc)
        return r.end, {"correlation": r.correlation, "closed_form": r.closed_form}
    model = rg.BCLModel.random(_ints(args.degeneracies), rng)
    if args.amplitudes:
        phi = np.array(_complexes(args.amplitudes))
        if phi.size != model.dim:
            raise ConfigError(f"--amplitudes needs {model.dim} entries")
        phi = phi / np.linalg.norm(phi)
    else:
        phi = rng.normal(size=model.dim) + 1j * rng.normal(size=model.dim)
        phi /= np.linalg.norm(phi)
    extra = {"p_m": rg.bcl_premeasure(model, phi).probabilities}
    if sc == "flexible":
        return rg.reduce_flexible(model, rg.flexible_detector(model, rng), phi), extra
    if sc == "fixed":
        return rg.reduce_fixed_array(model, rg.fixed_array_detector(model, rng), phi), extra
    if sc == "release":
        return rg.release_end_state(model, rg.flexible_detector(model, rng, absorbing=False), phi), extra
    if sc == "nonideal":
        eta = _floats(args.efficiencies) if args.efficiencies else (0.8,) * model.N
        det = rg.flexible_detector(model, rng, efficiencies=eta)
        return rg.nonideal_end_state(model, det, phi), extra
    raise ConfigError(f"unknown scenario {sc!r}")


def cmd_register(args) -> int:
    rng = np.random.default_rng(args.seed)
    end, extra = _register_end(args, rng)
    err = end.check_invariants()
    freq = end.signal_frequencies(args.draws, np.random.default_rng([args.seed, 1])) if args.draws else {}
    rows = []
    for i, (w, T) in enumerate(end.decomposition.components):
        s = end.signals[i]
        label = "none" if s is None else ("+".join(str(x) for x in s) if isinstance(s, tuple) else str(s))
        rows.append([i, label, w, np.trace(T.matrix).real, T.is_pure(),
                     freq.get(s, float("nan")) if freq else float("nan")])
    path = write_csv(args, ["component", "signal", "weight", "trace", "pure", "sampled_frequency"], rows)
    write_json(args, {"scenario": args.scenario, "kind": end.kind, "preparation": end.preparation,
                      "invariant_error": err, "weights": end.weights, **extra})
    _say(args, f"wrote {path}")
    return EXIT_OK


def cmd_tracks(args) -> int:
    setup = rg.TrackSetup(n_layers=args.layers, d=args.d, n_cells=args.cells,
                          points_per_cell=args.points_per_cell, spacing=args.spacing,
                          p_long=args.p_long, mu=args.mu, hbar=args.hbar,
                          dq=None if args.plane_wave else args.dq, periodic=args.plane_wave,
                          local_cells=args.local_cells)
    tracks = rg.simulate_tracks(setup, args.tracks, seed=args.seed)
    dev = rg.track_deviation(tracks, setup.n_cells if args.plane_wave else None)
    header = ["track"] + [f"layer{i + 1}" for i in range(setup.n_layers)] + ["max_deviation"]
    path = write_csv(args, header, ([i, *row, d] for i, (row, d) in enumerate(zip(tracks.tolist(), dev))))
    write_json(args, {"within_2_cells": float(np.mean(dev <= 2)),
                      "spreading_per_layer": setup.spreading_per_layer(),
                      "fresnel_length": setup.fresnel_length(),
                      "deviation_histogram": np.bincount(dev).tolist()})
    _say(args, f"wrote {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.suite == "all":
        only = None
    else:
        only = set(_ints(args.suite))
        if not only or not only <= set(range(1, len(acceptance.CHECKS) + 1)):
            raise ConfigError(f"--suite takes 'all' or numbers 1-{len(acceptance.CHECKS)}")
    results = acceptance.run_all(seed=args.seed, only=only)
    for r in results:
        _say(args, r.line())
    ok = all(r.passed for r in results)
    path = write_json(args, {"passed": ok, "checks": [r.as_dict() for r in results]})
    _say(args, f"{'all checks passed' if ok else 'verification FAILED'}; report {path}")
    return EXIT_OK if ok else EXIT_FAILED


# ----------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mepackets", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"mepackets {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option values (flags override)")
    common.add_argument("--out", help=f"output directory (default ${ENV_OUT} or .)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--quiet", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("me-classical", parents=[common], help="classical ME packet moments")
    _add_packet(p, nu=True)
    _add_potential(p)
    _add_times(p)
    p.add_argument("--method", choices=("closed", "taylor", "mc"), default="closed")
    p.add_argument("--samples", type=int, default=100_000)
    p.set_defaults(func=cmd_me_classical)

    p = sub.add_parser("me-quantum", parents=[common], help="quantum ME packet: closed form and matrix run")
    _add_packet(p, nu=True)
    _add_potential(p)
    _add_times(p)
    p.add_argument("--levels", type=int, default=None, help="cap on K levels kept in the state")
    p.add_argument("--tail-tol", type=float, default=1e-12)
    p.set_defaults(func=cmd_me_quantum)

    p = sub.add_parser("compare", parents=[common], help="classical vs quantum moment trajectories")
    _add_packet(p, dP=False, nu=True)
    _add_potential(p)
    _add_times(p)
    p.add_argument("--matrix", action="store_true", help="add the truncated-matrix propagation")
    p.add_argument("--tail-tol", type=float, default=1e-12)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("rod", parents=[common], help="harmonic-chain rod length fluctuations")
    p.add_argument("--n-scan", default="100:12800:x2")
    p.add_argument("--lam", type=float, default=1.0, help="Gibbs multiplier lambda")
    p.add_argument("--energy", type=float, default=None,
                   help="internal energy per phonon mode; solves for lambda at each N")
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--xi", type=float, default=1.0)
    p.add_argument("--hbar", type=float, default=1.0)
    p.set_defaults(func=cmd_rod)

    p = sub.add_parser("jointmeas", parents=[common], help="ancilla-based joint q-p registration")
    _add_packet(p)
    p.add_argument("--sigma", type=float, default=1.0, help="Gaussian ancilla width parameter")
    p.add_argument("--ancilla-nu", type=float, default=None, help="use an ME-packet ancilla")
    p.add_argument("--ancilla-dQ", type=float, default=0.7)
    p.add_argument("--cells", type=int, default=48)
    p.add_argument("--cell-span", type=float, default=6.0)
    p.add_argument("--points", type=int, default=1024)
    p.set_defaults(func=cmd_jointmeas, Q=0.5, P=-0.3, dQ=0.7)

    p = sub.add_parser("register", parents=[common], help="detector registration end states")
    p.add_argument("--scenario", choices=("flexible", "fixed", "release", "nonideal", "screen", "epr", "hbt"),
                   default="flexible")
    p.add_argument("--degeneracies", default="1,1,1")
    p.add_argument("--efficiencies", default=None)
    p.add_argument("--amplitudes", default=None, help="comma-separated complex amplitudes")
    p.add_argument("--open-slits", default="0")
    p.add_argument("--draws", type=int, default=100_000)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("tracks", parents=[common], help="layered-detector particle tracks")
    p.add_argument("--layers", type=int, default=10)
    p.add_argument("--d", type=float, default=1.0)
    p.add_argument("--cells", type=int, default=41)
    p.add_argument("--points-per-cell", type=int, default=64)
    p.add_argument("--spacing", type=float, default=0.0025)
    p.add_argument("--p-long", type=float, default=1.0)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--hbar", type=float, default=1.0)
    p.add_argument("--dq", type=float, default=3.0)
    p.add_argument("--plane-wave", action="store_true")
    p.add_argument("--local-cells", type=int, default=12)
    p.add_argument("--tracks", type=int, default=10_000)
    p.set_defaults(func=cmd_tracks)

    p = sub.add_parser("verify", parents=[common], help="run the acceptance suite")
    p.add_argument("--suite", default="all", help="'all' or comma-separated check numbers")
    p.set_defaults(func=cmd_verify)
    return ap


def _apply_config(parser, argv):
    """Parse once to find the subcommand and --config, then re-parse with file defaults."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(cfg) - known - {"command"})
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    cfg.pop("command", None)
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except SystemExit as exc:  # argparse: --help, --version, bad flags
        return int(exc.code or 0)
    except NumericalConsistencyError as exc:
        print(f"mepackets: numerical diagnostic: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ValueError, TypeError) as exc:
        print(f"mepackets: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None) -> int:
    return run(sys.argv[1:] if argv is None else argv)
