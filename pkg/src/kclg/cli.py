"""Command-line entry point.

Exit codes: 0 success, 2 validation failure or malformed input, 3 budget exceeded.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .lattice import Configuration, Domain, DomainError, make_rng, sample_equilibrium
from .models import BudgetExceeded, ModelSpecError, get_model, verify_axioms

EXIT_OK, EXIT_INVALID, EXIT_BUDGET = 0, 2, 3


class InputError(ValueError):
    pass


def default_budget() -> int:
    raw = os.environ.get("KCLG_BUDGET")
    if raw is None:
        return 1 << 22
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"KCLG_BUDGET must be an integer, got {raw!r}") from None


# ------------------------------------------------------------ parsing helpers

def parse_sites(text: str, field: str = "sites") -> list[tuple[int, ...]]:
    """``"1,1;1,2"`` -> ``[(1, 1), (1, 2)]``; an empty string gives no sites."""
    text = text.strip()
    if not text:
        return []
    try:
        out = [tuple(int(c) for c in part.split(",")) for part in text.split(";")]
    except ValueError:
        raise InputError(f"{field}: cannot parse {text!r} as ';'-separated integer sites") from None
    if len({len(s) for s in out}) > 1:
        raise InputError(f"{field}: sites have mixed dimensions")
    return out


def parse_clusters(text: str) -> list[list[tuple[int, ...]]]:
    """Clusters separated by ``|``, e.g. ``"1;2|1;3"``."""
    return [parse_sites(part, "clusters") for part in text.split("|")]


def parse_vector(text: str, d: int, field: str = "u") -> np.ndarray:
    try:
        v = np.array([float(c) for c in text.split(",")])
    except ValueError:
        raise InputError(f"{field}: cannot parse {text!r}") from None
    if len(v) != d:
        raise InputError(f"{field}: expected {d} components, got {len(v)}")
    return v


def load_model(name: str):
    try:
        return get_model(name)
    except (ModelSpecError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"model: {exc}") from None


def load_aux_model(name: str):
    """A registered model name, or a JSON aux spec with ``dimension`` and ``sets``."""
    from .transport import AuxSpec, build_aux_model

    path = Path(name)
    if path.exists():
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"auxspec: {exc}") from None
        if "sets" in d:
            return build_aux_model(AuxSpec.from_dict(d), path.stem)
    return load_model(name)


def emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def emit_json(obj: dict, out: str | None):
    emit(json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n", out)


def config_echo(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def csv_header(args, **extra) -> str:
    prov = {"config": config_echo(args), **extra}
    return "# " + json.dumps(prov, sort_keys=True, default=str) + "\n"


# ------------------------------------------------------------ moves

def library_move(model_name: str, name: str):
    from . import moves

    bt1d = {"tr+1": moves.bt1d_tr_plus, "tr-1": moves.bt1d_tr_minus, "ex+1": moves.bt1d_ex_plus,
            "ex-1": moves.bt1d_ex_minus_composition}
    bt2d = {"tr+2": moves.bt2d_tr_up,
            "hop": lambda: moves.hop_move(moves.bt2d_certificate()),
            "sigma1": lambda: moves.sigma_move(moves.bt2d_certificate(), 1),
            "sigma2": lambda: moves.sigma_move(moves.bt2d_certificate(), 2)}
    table = {"bt1d": bt1d, "bt2d": bt2d}.get(model_name, {})
    if name in table:
        return table[name]()
    path = Path(name)
    if not path.exists():
        raise InputError(f"move: {name!r} is neither a library move for {model_name} nor a file")
    try:
        return moves.MoveProgram.loads(path.read_text())
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"move file {name}: {exc}") from None


def cmd_verify_model(args) -> int:
    m = load_model(args.model)
    rep = verify_axioms(m, budget=args.budget)
    out = rep.to_dict()
    out["digest"] = m.digest()
    out["config"] = config_echo(args)
    emit_json(out, args.out)
    return EXIT_OK if rep.passed else EXIT_INVALID


def cmd_verify_move(args) -> int:
    from .moves import MoveContext, validate

    m = load_model(args.model)
    prog = library_move(args.model, args.move)
    tracer = tuple(parse_sites(args.tracer, "tracer")[0]) if args.tracer else None
    ctx = MoveContext(m, tracer=tracer, budget=args.budget)
    mode = "exhaustive" if args.exhaustive else ("sampled" if args.samples else "worstCase")
    rep = validate(prog, ctx, mode, samples=args.samples or 0, seed=args.seed)
    out = rep.to_json()
    out.update(move=prog.name, model=m.name, modelDigest=m.digest(), config=config_echo(args))
    emit_json(out, args.out)
    return EXIT_OK if rep.valid else EXIT_INVALID


def cmd_certify(args) -> int:
    from .moves import MoveError, certify

    m = load_model(args.model)
    C = parse_sites(args.cluster, "cluster")
    if not C or len(C[0]) != m.dim:
        raise InputError("cluster: expected nonempty sites of the model dimension")
    try:
        cert = certify(m, C, args.l, budget=args.budget)
    except MoveError as exc:
        emit_json({"found": False, "reason": str(exc), "config": config_echo(args)}, args.out)
        return EXIT_INVALID
    bundle = cert.to_json()
    bundle["config"] = config_echo(args)
    emit_json(bundle, args.out)
    return EXIT_OK


# ------------------------------------------------------------ exact analysis

def cmd_gap(args) -> int:
    from .spectral import (build_closed_generator, build_reservoir_generator, build_torus_generator, gap_table,
                           relaxation_time)

    m = load_model(args.model)
    rows = []
    if args.setting == "reservoir":
        if args.q is None:
            raise InputError("q: required for the reservoir setting")
        R = build_reservoir_generator(m, args.L, args.q, budget=args.budget)
        rows.append({"L": args.L, "q_or_k": args.q, "size": len(R.space), "relaxationTime": relaxation_time(R)})
    else:
        if args.k is None:
            raise InputError("k: required for closed and torus settings")
        if args.setting == "torus":
            R = build_torus_generator(m, args.L, args.k, budget=args.budget)
        else:
            R = build_closed_generator(m, args.L, args.k, args.boundary, budget=args.budget)
        ncomp, labels = R.components()
        for c in range(ncomp):
            members = np.flatnonzero(labels == c)
            rows.append({"L": args.L, "q_or_k": args.k, "component": c, "size": len(members),
                         "relaxationTime": relaxation_time(R, members)})
    emit(csv_header(args, modelDigest=m.digest(), detailedBalanceError=R.detailed_balance_error()) + gap_table(rows),
         args.out)
    return EXIT_OK


def cmd_ergodic(args) -> int:
    from .spectral import ergodic_components

    m = load_model(args.model)
    rep = ergodic_components(m, args.L, args.k, parse_clusters(args.clusters), args.boundary, budget=args.budget,
                             with_times=args.times)
    out = rep.to_json()
    out["mismatches"] = [[list(s) for s in v] for v in rep.mismatches()[:50]]
    out["singletons"] = [[list(s) for s in rep.space.vacancy_sites(int(c.members[0]))]
                         for c in rep.components if c.size == 1][:50]
    if args.times:
        out["relaxationTimes"] = [c.relaxation_time for c in rep.components]
    out.update(model=m.name, modelDigest=m.digest(), config=config_echo(args))
    emit_json(out, args.out)
    return EXIT_OK


def cmd_diffusion(args) -> int:
    from .transport import assemble_diffusion_qp, solve_qp

    m = load_model(args.model)
    u = parse_vector(args.u, m.dim)
    window = parse_sites(args.window, "window")
    vp = assemble_diffusion_qp(m, u, window, args.q, estimator=args.estimator, samples=args.samples,
                               seed=args.seed, budget=args.budget)
    _, value = solve_qp(vp)
    head = csv_header(args, modelDigest=m.digest(), provenance=vp.provenance)
    emit(head + "model,q,u,window,estimator,value\n"
         f"{m.name},{args.q},{args.u.replace(',', ' ')},{args.window.replace(',', ' ')},{args.estimator},{value!r}\n",
         args.out)
    return EXIT_OK


# ------------------------------------------------------------ auxiliary dynamics

def cmd_aux(args) -> int:
    from .transport import assemble_diffusion_qp, aux_diffusion_closed_form, solve_qp, total_current

    m = load_aux_model(args.auxspec)
    if args.action == "current":
        dom = Domain.box(args.L, m.dim, "periodic")
        rng = make_rng(args.seed)
        worst = 0
        for _ in range(args.samples):
            q = args.q if args.q is not None else rng.uniform(0.05, 0.95)
            worst = max(worst, int(np.abs(total_current(sample_equilibrium(dom, q, rng), m)).max()))
        sys.stdout.write(f"max |current| = {worst}\n")
        if args.out:
            emit_json({"maxCurrent": worst, "modelDigest": m.digest(), "config": config_echo(args)}, args.out)
        return EXIT_OK if worst == 0 else EXIT_INVALID
    if args.q is None:
        raise InputError("q: required for dcoef")
    u = parse_vector(args.u, m.dim)
    closed = aux_diffusion_closed_form(m, args.q, u)
    _, qp = solve_qp(assemble_diffusion_qp(m, u, parse_sites(args.window, "window"), args.q, budget=args.budget))
    emit_json({"closedForm": closed, "qp": qp, "difference": abs(closed - qp), "modelDigest": m.digest(),
               "config": config_echo(args)}, args.out)
    return EXIT_OK


def load_dynamics(name: str):
    from .moves import bt2d_certificate
    from .selfdiff import aux_tracer_dynamics, kc_tracer_dynamics

    if name == "aux-bt2d":
        return aux_tracer_dynamics(bt2d_certificate())
    if name.startswith("kc:"):
        return kc_tracer_dynamics(load_model(name[3:]))
    raise InputError(f"dynamics: expected 'aux-bt2d' or 'kc:<model>', got {name!r}")


def cmd_selfdiff(args) -> int:
    from .selfdiff import self_diffusion_qp
    from .simulate import tracer_run
    from .transport import solve_qp

    dyn = load_dynamics(args.dynamics)
    u = parse_vector(args.u, dyn.dim)
    if args.action == "qp":
        vp = self_diffusion_qp(dyn, u, parse_sites(args.window, "window"), args.q, budget=args.budget)
        _, value = solve_qp(vp)
        emit(csv_header(args, provenance=vp.provenance) + "dynamics,q,u,window,value\n"
             f"{dyn.name},{args.q},{args.u.replace(',', ' ')},{args.window.replace(',', ' ')},{value!r}\n", args.out)
        return EXIT_OK
    res = tracer_run(dyn, args.L, args.q, args.tmax, seed=args.seed, replicas=args.replicas, u=u)
    est, se = res.diffusion_estimate()
    lines = [csv_header(args, provenance=res.provenance, moved=res.moved, estimate=est, stderr=se),
             "t,msd_u,stderr_u,msd\n"]
    for t, a, s, b in zip(res.times, res.msd_u, res.stderr_u, res.msd):
        lines.append(f"{t!r},{a!r},{s!r},{b!r}\n")
    emit("".join(lines), args.out)
    return EXIT_OK


# ------------------------------------------------------------ simulation

def cmd_simulate(args) -> int:
    from .lattice import sample_fixed_vacancies
    from .simulate import KMC, autocorrelation, run, series_csv

    m = load_model(args.model)
    boundary = "empty" if args.q is not None else args.boundary
    dom = Domain.box(args.L, m.dim, boundary)
    if args.vacancies is not None:
        c = Configuration.from_vacancies(dom, parse_sites(args.vacancies, "vacancies"))
    elif args.k is not None:
        c = sample_fixed_vacancies(dom, args.k, make_rng(args.seed, 1))
    elif args.q is not None:
        c = sample_equilibrium(dom, args.q, make_rng(args.seed, 1))
    else:
        raise InputError("initial state: give --vacancies, --k, or --q")
    sim = KMC(m, c, seed=args.seed, reservoir_q=args.q)
    n = int(round(args.tmax / args.dt))
    sched = np.arange(1, n + 1) * args.dt
    obs = {"density": lambda b: float(b.mean())}
    series = run(sim, args.tmax, obs, sched, max_events=args.max_events)
    prov = {"config": config_echo(args), **series["density"].provenance, "seed": args.seed,
            "truncated": series["density"].truncated}
    if args.autocorr and len(series["density"].values) > 2:
        ac = autocorrelation(series["density"].values, args.dt)
        prov["autocorrelation"] = {"tau": ac.tau, "band": ac.band, "degenerate": ac.degenerate, "warning": ac.warning}
    emit(series_csv(series, prov), args.out)
    return EXIT_OK


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kclg", description="Kinetically constrained lattice gas toolkit.")
    p.add_argument("--budget", type=int, default=None, help="state budget (default from KCLG_BUDGET or 2^22)")
    p.add_argument("--threads", type=int, default=None, help="worker cap; results do not depend on it")
    p.add_argument("--out", default=None, help="output file (default stdout)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("verify-model", help="check the model axioms")
    s.add_argument("model")
    s.set_defaults(func=cmd_verify_model)

    s = sub.add_parser("verify-move", help="validate a move program")
    s.add_argument("model")
    s.add_argument("move", help="library name (tr+1, ex-1, hop, ...) or a move file")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--exhaustive", action="store_true")
    g.add_argument("--worst-case", action="store_true")
    g.add_argument("--samples", type=int, default=0)
    s.add_argument("--tracer", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify_move)

    s = sub.add_parser("certify", help="search a mobile-cluster certificate")
    s.add_argument("model")
    s.add_argument("--cluster", required=True)
    s.add_argument("--l", type=int, required=True)
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("gap", help="exact relaxation times")
    s.add_argument("model")
    s.add_argument("--setting", choices=["reservoir", "closed", "torus"], required=True)
    s.add_argument("--L", type=int, required=True)
    s.add_argument("--q", type=float)
    s.add_argument("--k", type=int)
    s.add_argument("--boundary", choices=["occupied", "empty"], default="occupied")
    s.set_defaults(func=cmd_gap)

    s = sub.add_parser("ergodic", help="ergodic components of a vacancy sector")
    s.add_argument("model")
    s.add_argument("--L", type=int, required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--clusters", required=True, help="e.g. '1;2|1;3'")
    s.add_argument("--boundary", choices=["occupied", "empty", "periodic"], default="occupied")
    s.add_argument("--times", action="store_true", help="per-component relaxation times")
    s.set_defaults(func=cmd_ergodic)

    s = sub.add_parser("diffusion", help="finite-window diffusion coefficient")
    s.add_argument("model")
    s.add_argument("--q", type=float, required=True)
    s.add_argument("--u", default="1")
    s.add_argument("--window", default="")
    s.add_argument("--estimator", choices=["exact", "mc"], default="exact")
    s.add_argument("--samples", type=int, default=20000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_diffusion)

    s = sub.add_parser("aux", help="auxiliary zero-current dynamics")
    s.add_argument("action", choices=["current", "dcoef"])
    s.add_argument("auxspec", help="registered aux model or JSON aux spec")
    s.add_argument("--L", type=int, default=12)
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--q", type=float)
    s.add_argument("--u", default="1")
    s.add_argument("--window", default="")
    s.set_defaults(func=cmd_aux)

    s = sub.add_parser("selfdiff", help="tracer self-diffusion")
    s.add_argument("action", choices=["qp", "msd"])
    s.add_argument("--dynamics", required=True, help="aux-bt2d or kc:<model>")
    s.add_argument("--q", type=float, required=True)
    s.add_argument("--u", default="1,0")
    s.add_argument("--window", default="")
    s.add_argument("--L", type=int, default=64)
    s.add_argument("--tmax", type=float, default=20.0)
    s.add_argument("--replicas", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selfdiff)

    s = sub.add_parser("simulate", help="kinetic Monte Carlo density time series")
    s.add_argument("model")
    s.add_argument("--L", type=int, required=True)
    s.add_argument("--q", type=float, help="reservoir density of vacancies (empty boundary with flips)")
    s.add_argument("--k", type=int, help="number of vacancies in a closed system")
    s.add_argument("--vacancies", default=None)
    s.add_argument("--boundary", choices=["occupied", "empty", "periodic"], default="periodic")
    s.add_argument("--tmax", type=float, default=100.0)
    s.add_argument("--dt", type=float, default=1.0)
    s.add_argument("--max-events", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--autocorr", action="store_true")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: list[str] | None = None) -> int:
    from .moves import MoveError
    from .transport import NumericalError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.budget is None:
            args.budget = default_budget()
        return args.func(args)
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (InputError, ModelSpecError, MoveError, DomainError, NumericalError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
