"""Command-line entry points: synth, fit, code, classify, recover, docbench, verify."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io
from .core import LatentParams, grid_support, seeded_rng, uniform_simplex

log = logging.getLogger("geosparse")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON config file; flags below override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--sinkhorn-iters", type=int)
    p.add_argument("--outer-iters", type=int)
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.add_argument("-v", "--verbose", action="store_true")


def _overrides(args, rho_key="rho", rho_as_tuple=False) -> dict:
    out = io.read_json(args.config) if args.config else {}
    pairs = [("seed", args.seed), ("epsilon", args.epsilon), ("sinkhorn_iters", args.sinkhorn_iters),
             ("outer_iters", args.outer_iters)]
    for key, val in pairs:
        if val is not None:
            out[key] = val
    if args.rho is not None:
        out[rho_key] = (args.rho,) if rho_as_tuple else args.rho
    return out


def _fit_config(args):
    from .learn import FitConfig

    cfg = _overrides(args)
    extra = {k: cfg.pop(k) for k in ("epsilon", "grid", "samples_per_class") if k in cfg}
    return FitConfig.from_dict(cfg), extra


def _support(args, epsilon):
    return io.read_support(args.support, epsilon)


def cmd_synth(args):
    from .experiments import SyntheticSpec, generate_synthetic, grid_shape_atoms

    cfg = _overrides(args)
    grid = int(cfg.get("grid", args.grid))
    per_class = int(cfg.get("samples_per_class", args.samples_per_class))
    support = grid_support((grid, grid), cfg.get("epsilon"))
    atoms, atom_class = grid_shape_atoms(grid)
    spec = SyntheticSpec(tuple((atoms[atom_class == k], per_class) for k in range(3)), cfg.get("seed", 0))
    synth = generate_synthetic(spec, support, cfg.get("sinkhorn_iters", 50))
    out = args.out_dir
    io.write_support(out / "support.csv", support)
    io.write_measures(out / "data.csv", synth.data)
    io.write_labels(out / "labels.csv", synth.labels)
    io.write_matrix(out / "true_weights.csv", synth.true_weights, prefix="lam")
    io.write_measures(out / "true_atoms.csv", atoms)
    io.write_labels(out / "true_atom_labels.csv", atom_class)
    io.write_json(out / "synth.json", {"grid": grid, "samples_per_class": per_class,
                                       "epsilon": support.epsilon, **cfg})
    return 0


def cmd_fit(args):
    from .learn import fit, fit_with_restarts

    cfg, extra = _fit_config(args)
    support = _support(args, extra.get("epsilon"))
    data = io.read_measures(args.data)
    if args.restarts > 1:
        res = fit_with_restarts(data, args.atoms, support, cfg, restarts=args.restarts)
    else:
        res = fit(data, args.atoms, support, cfg)
    io.save_fit(res, args.out_dir, cfg)
    print(f"final loss {res.loss_trace[-1]!r}; atom usage {res.atom_usage!r}")
    return 0


def cmd_code(args):
    from .coding import build_problem, solve_lp, solve_qp

    cfg = _overrides(args)
    support = _support(args, cfg.get("epsilon"))
    iters = cfg.get("sinkhorn_iters", 50)
    data = io.read_measures(args.data)
    atoms = io.read_measures(args.atoms)
    rows = []
    for i, mu in enumerate(data):
        prob = build_problem(mu, atoms, support, iters)
        if args.method == "qp":
            r = solve_qp(prob)
            row = {"datum": i, "method": "qp", "objective": r.objective, "feasible": True}
            lam = r.lam
        else:
            r = solve_lp(prob, args.tau)
            row = {"datum": i, "method": "lp", "objective": r.objective, "feasible": r.feasible, "tau": r.tau}
            lam = r.lam
        row.update({f"lam{j}": v for j, v in enumerate(lam)})
        rows.append(row)
    io.write_rows(args.out_dir / "coding.csv", rows)
    return 0


def cmd_classify(args):
    from .classify import RULES, ReferenceSet, classify_batch

    cfg = _overrides(args)
    support = _support(args, cfg.get("epsilon"))
    iters = cfg.get("sinkhorn_iters", 50)
    refs = io.read_measures(args.refs)
    labels = io.read_labels(args.ref_labels)
    classes = sorted(set(labels), key=labels.index)
    ref_set = ReferenceSet.from_classes(
        [(c, refs[[i for i, lab in enumerate(labels) if lab == c]]) for c in classes], support
    )
    rules = tuple(args.rules.split(",")) if args.rules else RULES
    rows = classify_batch(io.read_measures(args.tests), ref_set, support, iters, rules)
    io.write_rows(args.out_dir / "classification.csv", rows)
    return 0


def cmd_recover(args):
    from .experiments import RecoveryConfig, run_recovery_experiment

    cfg = RecoveryConfig.from_dict(_overrides(args, "rhos", rho_as_tuple=True))
    rep = run_recovery_experiment(cfg, args.out_dir)
    for rho, vals in rep.summary["per_rho"].items():
        print(f"rho={rho}: " + ", ".join(f"{k}={v:.4g}" for k, v in vals.items()))
    return 0


def cmd_docbench(args):
    from .documents import read_documents, read_embeddings
    from .experiments import ClassificationConfig, run_classification_experiment

    cfg = ClassificationConfig.from_dict(_overrides(args, "rhos", rho_as_tuple=True))
    corpus = None
    if args.docs:
        if not args.embeddings:
            raise SystemExit("--docs needs --embeddings")
        docs, labels = read_documents(args.docs)
        corpus = (docs, labels, read_embeddings(args.embeddings))
    rep = run_classification_experiment(cfg, args.out_dir, corpus)
    for key, gap in rep.summary["learned_minus_random"].items():
        print(f"{key}: learned - random = {gap:+.3f}")
    return 0


def cmd_verify(args):
    from .experiments import extension_sweep
    from .grad import finite_diff_check

    cfg = _overrides(args)
    seed = cfg.get("seed", 0)
    rho = cfg.get("rho", 0.1)
    rows = []
    rng = seeded_rng(seed)
    for N, m, n, L in [(8, 3, 3, 5), (8, 3, 3, 20), (5, 2, 2, 10)]:
        support = grid_support(N, cfg.get("epsilon", 0.05))
        data = uniform_simplex(rng, n, N)
        params = LatentParams(rng.normal(size=(n, m)), rng.normal(size=(m, N)))
        err = finite_diff_check(params, data, support, rho, L, probes=args.probes, seed=seed)
        rows.append({"check": "gradient", "N": N, "m": m, "n": n, "sinkhorn_iters": L, "max_rel_err": err,
                     "pass": err < 1e-4})
    sweep = extension_sweep(args.instances, seed)
    worst = max((r["lhs"] - r["rhs"]) / max(abs(r["rhs"]), 1e-300) for r in sweep)
    rows.append({"check": "extension", "instances": args.instances, "max_rel_violation": worst,
                 "pass": worst <= 1e-6})
    io.write_rows(args.out_dir / "verify.csv", rows)
    io.write_rows(args.out_dir / "extension_sweep.csv", sweep)
    ok = all(r["pass"] for r in rows)
    for r in rows:
        print(r)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geosparse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="emit the synthetic shape dataset")
    _common(s)
    s.add_argument("--grid", type=int, default=12)
    s.add_argument("--samples-per-class", type=int, default=15)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", help="learn a dictionary")
    _common(s)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--support", type=Path, required=True)
    s.add_argument("--atoms", type=int, required=True)
    s.add_argument("--restarts", type=int, default=1)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("code", help="barycentric coding against a fixed dictionary")
    _common(s)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--atoms", type=Path, required=True)
    s.add_argument("--support", type=Path, required=True)
    s.add_argument("--method", choices=("qp", "lp"), default="qp")
    s.add_argument("--tau", type=float)
    s.set_defaults(func=cmd_code)

    s = sub.add_parser("classify", help="run the reference-based rules on test measures")
    _common(s)
    s.add_argument("--refs", type=Path, required=True)
    s.add_argument("--ref-labels", type=Path, required=True)
    s.add_argument("--tests", type=Path, required=True)
    s.add_argument("--support", type=Path, required=True)
    s.add_argument("--rules", help="comma-separated subset of 1nn,mad,mbl,mbl_qp,mc")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("recover", help="synthetic atom recovery over a rho grid")
    _common(s)
    s.set_defaults(func=cmd_recover)

    s = sub.add_parser("docbench", help="learned vs random references on documents")
    _common(s)
    s.add_argument("--docs", type=Path, help="CSV with doc_id,label,text; bundled generator if omitted")
    s.add_argument("--embeddings", type=Path)
    s.set_defaults(func=cmd_docbench)

    s = sub.add_parser("verify", help="gradient checks and the geodesic-extension sweep")
    _common(s)
    s.add_argument("--probes", type=int, default=50)
    s.add_argument("--instances", type=int, default=200)
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
