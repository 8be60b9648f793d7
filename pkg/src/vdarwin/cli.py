"""Command-line entry point: ``vdarwin {gen,simulate,fields,w2,uniqueness,verify}``.

Each command reads one JSON config (``--config``), validates it against the
bundled schema before any compute, and writes CSV/JSON results.  Exit codes:
0 success, 1 a verification suite failed, 2 bad configuration, 3 the field
fixed point did not converge, 4 an input/output problem.
"""

import argparse
import json
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from referencing import Registry, Resource

from . import dynamics, fields, kernels, stability, transport
from .ensemble import generate, read_csv, reference_ball, write_csv
from .errors import InvalidSpec, NoConvergence, SizeMismatch, WeightMismatch

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NO_CONVERGENCE, EXIT_IO = 0, 1, 2, 3, 4
SUITES = ("kernels", "identity", "fields", "transport", "gronwall")


class InputError(Exception):
    """Unreadable or malformed input file (exit code 4)."""


# -- schemas ---------------------------------------------------------------------


def _load_schemas():
    out = {}
    for entry in resources.files("vdarwin").joinpath("schemas").iterdir():
        if entry.name.endswith(".json"):
            out[entry.name] = json.loads(entry.read_text(encoding="utf-8"))
    return out


_SCHEMAS = _load_schemas()
_REGISTRY = Registry().with_resources(
    (name, Resource.from_contents(doc)) for name, doc in _SCHEMAS.items()
)


def validate(doc, schema_name):
    """Validate ``doc`` against a bundled schema; raises InvalidSpec."""
    schema = _SCHEMAS[schema_name]
    validator = jsonschema.Draft202012Validator(schema, registry=_REGISTRY)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.path) or "<root>"
        raise InvalidSpec(f"{schema_name}: {where}: {err.message}")
    return doc


def _emit_json(doc, schema_name, path=None):
    validate(doc, schema_name)
    text = json.dumps(doc, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- config handling ----------------------------------------------------------------


def _load_config(args):
    if args.config is None:
        cfg = {}
    else:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"{args.config}: invalid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise InvalidSpec(f"{args.config}: config must be a JSON object")
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _relative(cfg_path, p):
    p = Path(p)
    if p.is_absolute() or cfg_path is None:
        return p
    return Path(cfg_path).parent / p


def _read_ensemble(path):
    try:
        return read_csv(path)
    except OSError as exc:
        raise InputError(f"cannot read ensemble {path}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise InputError(f"malformed ensemble {path}: {exc}") from exc


def _flow_config(cfg):
    flow = dict(cfg.get("flow", {}))
    if "seed" in cfg:
        flow["seed"] = cfg["seed"]
    return dynamics.FlowConfig(**flow)


def _out_dir(args, default):
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


# -- commands -------------------------------------------------------------------------


def cmd_gen(args):
    cfg = validate(_load_config(args), "gen.json")
    ens = generate(
        cfg["family"],
        cfg["n"],
        radius=cfg.get("radius", 1.0),
        momentum_scale=cfg.get("momentum_scale", 0.5),
        seed=cfg.get("seed", 0),
        mass=cfg.get("mass", 1.0),
    )
    out = Path(args.out or "ensemble.csv")
    try:
        write_csv(ens, out)
    except OSError as exc:
        raise InputError(f"cannot write {out}: {exc.strerror}") from exc
    return EXIT_OK


def cmd_simulate(args):
    cfg = validate(_load_config(args), "simulate.json")
    flow = _flow_config(cfg)
    f0 = _read_ensemble(_relative(args.config, cfg["input"]))
    _ = flow.n_steps  # validate t_end / dt before running
    traj = dynamics.run(f0, flow)
    out = _out_dir(args, "trajectory")
    meta = dynamics.export_trajectory(traj, out)
    validate(meta, "meta.json")
    return EXIT_OK


def _probe_points(spec, ens):
    if spec in (None, "sources"):
        return ens.x
    n, hw = spec["grid_n"], spec["half_width"]
    ax = -hw + (np.arange(n) + 0.5) * (2 * hw / n)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)


def cmd_fields(args):
    cfg = validate(_load_config(args), "fields.json")
    ens = _read_ensemble(_relative(args.config, cfg["input"]))
    eps = cfg.get("eps", 0.05)
    state = fields.solve_vector_potential(
        ens, eps, cfg.get("tol", 1e-10), cfg.get("max_iter", 500), cfg.get("damping", 1.0)
    )
    probes = _probe_points(cfg.get("probes"), ens)
    values = fields.vector_potential_at(state, ens, probes, eps)
    out = _out_dir(args, "fields")
    with open(out / "fields.csv", "w", encoding="utf-8") as fh:
        fh.write("x1,x2,x3,A1,A2,A3\n")
        for row in np.hstack([probes, values]):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    _emit_json(state.to_json(), "fields_sidecar.json", out / "fields.json")
    return EXIT_OK


def cmd_w2(args):
    a = _read_ensemble(args.path_a)
    b = _read_ensemble(args.path_b)
    plan = transport.w2_exact(a, b)
    _emit_json(plan.to_json(), "w2_summary.json")
    if args.out:
        out = _out_dir(args, args.out)
        transport.write_plan_csv(plan, out / "plan.csv")
        _emit_json(plan.to_json(), "w2_summary.json", out / "summary.json")
    return EXIT_OK


def cmd_uniqueness(args):
    cfg = validate(_load_config(args), "uniqueness.json")
    flow = _flow_config(cfg)
    f0 = _read_ensemble(_relative(args.config, cfg["input"]))
    _ = flow.n_steps
    out = _out_dir(args, "uniqueness")
    if cfg.get("study", "trace") == "dt-halving":
        rows = stability.dt_halving_study(f0, flow, cfg.get("levels", 3), threads=args.threads)
        _emit_json({"rows": rows}, "dt_study.json", out / "order_table.json")
        return EXIT_OK
    try:
        spec = stability.PerturbSpec(**cfg.get("perturbation", {"kind": "none"}))
    except ValueError as exc:
        raise InvalidSpec(str(exc)) from exc
    trace = stability.uniqueness_experiment(f0, flow, spec, threads=args.threads)
    summary = trace.summary()
    validate(summary, "trace.json")
    stability.export_trace(trace, out)
    return EXIT_OK


# -- verification suites --------------------------------------------------------------


def _check(name, value, limit, passed=None):
    if passed is None:
        passed = bool(value <= limit)
    return {"name": name, "passed": bool(passed), "value": float(value), "limit": float(limit)}


def _suite_kernels(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(scale=3.0, size=(10_000, 3))
    xi = rng.normal(size=(10_000, 3))
    q = 1.0 + np.sum(g * g, axis=1)
    det_err = np.abs(np.linalg.det(kernels.velocity_jacobian(g)) - q**-2.5).max()
    quad = np.einsum("ni,nij,nj->n", xi, kernels.velocity_jacobian(g), xi)
    margin = (quad - kernels.velocity_jacobian_min_eigenvalue(g) * np.sum(xi * xi, axis=1)).min()
    x = rng.uniform(-1, 1, (100_000, 3))
    y = rng.uniform(-1, 1, (100_000, 3))
    r = np.linalg.norm(y - x, axis=1)
    k_ratio = (kernels.inf_norm(kernels.darwin_kernel(x, y)) * r).max()
    dk = np.abs(kernels.darwin_kernel_gradient(x, y)).max(axis=(1, 2, 3))
    dk_ratio = (dk * r * r).max()
    return [
        _check("det Dv error", det_err, 1e-12),
        _check("Dv lowest-eigenvalue margin", margin, -1e-12, passed=margin >= -1e-12),
        _check("|K| |y-x|", k_ratio, 2.0 * (1 + 1e-12)),
        _check("|dK| |y-x|^2", dk_ratio, 6.0 * (1 + 1e-12)),
    ]


def _suite_identity(seed):
    c = tuple(np.array([1.0, 1.0, 1.0]) * 2 / math.sqrt(3))
    coarse = fields.verify_kernel_identity(fields.BumpSpec(c, 1.0), (0, 0, 0), fields.QuadSpec(0.05))
    fine = fields.verify_kernel_identity(fields.BumpSpec(c, 1.0), (0, 0, 0), fields.QuadSpec(0.025))
    sym = fields.verify_kernel_identity(fields.BumpSpec((0.0, 0.0, 0.0), 1.0), (0, 0, 0), fields.QuadSpec(0.05))
    off = max(abs(sym.lhs[i, k]) + abs(sym.rhs[i, k]) for i in range(3) for k in range(3) if i != k)
    ratio = coarse.discrepancy / fine.discrepancy
    return [
        _check("trace gap", coarse.trace_gap, 1e-12 * max(1.0, np.abs(coarse.rhs).max())),
        _check("off-diagonal, symmetric bump", off, 1e-10),
        _check("discrepancy h=0.05", coarse.discrepancy, 2e-2),
        _check("refinement ratio", ratio, 3.0, passed=ratio >= 3.0),
    ]


def _suite_fields(seed):
    ens = reference_ball()
    state = fields.solve_vector_potential(ens, 0.05, 1e-10)
    rng = np.random.default_rng(seed)
    probes = rng.uniform(-1, 1, (1000, 3))
    grad = fields.grad_vector_potential(state, ens, probes)
    div = (np.abs(np.trace(grad, axis1=1, axis2=2)) / (1 + kernels.inf_norm(grad))).max()
    rep = fields.verify_potential_bounds(ens, state, probes)
    return [
        _check("residual", state.residual, 1e-10),
        _check("sup iterate / C-bar", max(state.iterate_norms) / state.cbar, 1.0),
        _check("divergence", div, 1e-8),
        _check("sup |Phi| / bound", rep.sup_phi / rep.bound_phi, 1.0),
        _check("sup |grad A| / bound", rep.sup_grad_a / rep.bound_grad, 1.0),
        _check("sup |grad Phi| / bound", rep.sup_grad_phi / rep.bound_grad, 1.0),
    ]


def _suite_transport(seed):
    from .ensemble import Ensemble

    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in range(2, 8):
        for _ in range(20):
            a = Ensemble(rng.uniform(-0.5, 0.5, (n, 3)), rng.uniform(-0.5, 0.5, (n, 3)), np.full(n, 1 / n))
            b = Ensemble(rng.uniform(-0.5, 0.5, (n, 3)), rng.uniform(-0.5, 0.5, (n, 3)), np.full(n, 1 / n))
            worst = max(worst, abs(transport.w2_exact(a, b).cost - transport.w2_bruteforce(a, b).cost))
    return [_check("solver vs brute force", worst, 0.0)]


def _suite_gronwall(seed):
    checks = []
    for c in (0.1, 1.0, 10.0):
        t_end = min(1.0, 1.0 / c)
        t = np.linspace(0.0, t_end, int(round(t_end / 1e-3)) + 1)
        y0 = 3.0 * math.exp(c * t_end)
        q = np.exp(1.0 - y0 * np.exp(-c * t))
        fit = stability.gronwall_fit(t, q)
        checks.append(_check(f"C={c} relative error", abs(fit.c - c) / c, 0.05))
    return checks


_SUITE_FUNCS = {
    "kernels": _suite_kernels,
    "identity": _suite_identity,
    "fields": _suite_fields,
    "transport": _suite_transport,
    "gronwall": _suite_gronwall,
}


def cmd_verify(args):
    if args.suite not in _SUITE_FUNCS:
        raise InvalidSpec(f"unknown suite {args.suite!r}; expected one of {SUITES}")
    cfg = _load_config(args)
    checks = _SUITE_FUNCS[args.suite](cfg.get("seed", 0))
    report = {"suite": args.suite, "passed": all(c["passed"] for c in checks), "checks": checks}
    if args.out:
        out = _out_dir(args, args.out)
        _emit_json(report, "verify_report.json", out / f"verify_{args.suite}.json")
    _emit_json(report, "verify_report.json")
    return EXIT_OK if report["passed"] else EXIT_FAILED


# -- entry point --------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=0, help="worker threads (0 = auto)")

    parser = argparse.ArgumentParser(prog="vdarwin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="sample an initial ensemble").set_defaults(fn=cmd_gen)
    sub.add_parser("simulate", parents=[common], help="integrate the flow").set_defaults(fn=cmd_simulate)
    sub.add_parser("fields", parents=[common], help="solve for A and export it").set_defaults(fn=cmd_fields)
    p = sub.add_parser("w2", parents=[common], help="exact W2 between two ensembles")
    p.add_argument("path_a")
    p.add_argument("path_b")
    p.set_defaults(fn=cmd_w2)
    sub.add_parser("uniqueness", parents=[common], help="two-run stability experiment").set_defaults(
        fn=cmd_uniqueness
    )
    p = sub.add_parser("verify", parents=[common], help="run a verification suite")
    p.add_argument("suite", help=f"one of {', '.join(SUITES)}")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.threads < 0:
        print("error: --threads must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NoConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except (InvalidSpec, SizeMismatch, WeightMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
