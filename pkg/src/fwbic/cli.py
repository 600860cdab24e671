"""Command-line front end.

Every run writes ``manifest.json`` into the output directory, also when it
fails; failures additionally print a structured error record on stderr and
exit with the code of the error class (2 validation, 3 numerical,
4 configuration).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__, problem
from .errors import FWBICError, NoCrossing

SUBCOMMANDS = ("eigen-scan", "bic-find", "resonance-scan", "sym-bic", "validate", "converge")


def _parser():
    p = argparse.ArgumentParser(prog="fwbic", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="problem file (JSON)")
        s.add_argument("--out-dir", default=".", help="directory for outputs")
        s.add_argument("--delta-from", type=float)
        s.add_argument("--delta-to", type=float)
        s.add_argument("--delta-steps", type=int, default=41)
        s.add_argument("--resolution", type=int)
        s.add_argument("--mcav", type=int)
        s.add_argument("--jwg", type=int)
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--engine", choices=("fem", "analytic"), default=None,
                       help="cavity solver (default: analytic for homogeneous cavities)")
        s.add_argument("--no-clear-zone-check", action="store_true",
                       help="do not require inclusions to avoid the clear zone")
        if name == "sym-bic":
            s.add_argument("--branch", type=int, help="odd cavity branch (default: lowest)")
        if name == "validate":
            s.add_argument("--seed", type=int, default=0)
    return p


class Run:
    def __init__(self, args):
        self.args = args
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files = []
        self.t0 = time.perf_counter()
        self.spec = None
        self.results = {}

    def path(self, name):
        p = self.out / name
        self.files.append(str(p))
        return p

    def load(self):
        a = self.args
        spec = problem.load(a.config)
        t = spec.truncation
        trunc = problem.Truncation(
            M_cav=a.mcav or t.M_cav, J_wg=a.jwg or t.J_wg, M=t.M
        )
        changes = {"truncation": trunc}
        if a.resolution:
            changes["resolution"] = a.resolution
        lo, hi = spec.delta_range
        if a.delta_from is not None:
            lo = a.delta_from
        if a.delta_to is not None:
            hi = a.delta_to
        changes["delta_range"] = (lo, hi)
        self.spec = problem.validate_spec(
            spec.replace(**changes), check_clear_zone=not a.no_clear_zone_check
        )
        return self.spec

    def model(self, spec=None, **kw):
        from .model import CavityModel

        spec = self.spec if spec is None else spec
        engine = self.args.engine or ("analytic" if spec.is_homogeneous else "fem")
        return CavityModel(spec, engine=engine, **kw)

    def deltas(self):
        lo, hi = self.spec.delta_range
        return np.linspace(lo, hi, self.args.delta_steps)

    def executor(self):
        n = self.args.threads
        return ThreadPoolExecutor(max_workers=n) if n and n > 1 else nullcontext(None)

    def manifest(self, status, error=None):
        m = {
            "command": self.args.command,
            "status": status,
            "config_path": str(self.args.config),
            "config": None if self.spec is None else problem.to_dict(self.spec),
            "truncation": None if self.spec is None else vars_(self.spec.truncation),
            "tolerances": None if self.spec is None else vars_(self.spec.tolerances),
            "wall_clock_s": time.perf_counter() - self.t0,
            "outputs": self.files,
            "version": __version__,
            "results": self.results,
        }
        if error is not None:
            m["error"] = error
        path = self.out / "manifest.json"
        path.write_text(json.dumps(m, indent=2, default=_json_default))
        return path


def vars_(obj):
    import dataclasses

    return dataclasses.asdict(obj)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    return str(o)


# ---------------------------------------------------------------------------
# subcommands


def cmd_eigen_scan(run):
    from .cavity_fem import write_eigen_csv

    spec = run.load()
    model = run.model()
    with run.executor() as ex:
        data = model.sweep(run.deltas(), ex)
    write_eigen_csv(run.path("eigen.csv"), [d.basis for d in data])
    M = model.M
    lam0 = np.array([d.lambdas[M - 2] for d in data])
    lam1 = np.array([d.lambdas[M - 1] for d in data])
    gap = lam0 - lam1
    sc = np.where(np.sign(gap[:-1]) * np.sign(gap[1:]) < 0)[0]
    res = {"crossings": []}
    for i in sc:
        d = run.deltas()
        t = gap[i] / (gap[i] - gap[i + 1])
        dc = d[i] + t * (d[i + 1] - d[i])
        entry = {
            "delta": float(dc),
            "lambda": float(lam0[i] + t * (lam0[i + 1] - lam0[i])),
        }
        if isinstance(spec.perturbation, problem.IndexSweep):
            entry["n"] = float(spec.perturbation.index(dc))
        res["crossings"].append(entry)
    run.results = res


def cmd_bic_find(run):
    from .bic_search import find_bic, reconstruct_mode, write_curves, write_field, write_summary

    run.load()
    model = run.model()
    try:
        with run.executor() as ex:
            sol = find_bic(model, steps=run.args.delta_steps, executor=ex)
    except NoCrossing as exc:
        with open(run.path("gap_curve.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delta", "gap"])
            for d, g in zip(exc.details["delta"], exc.details["gap"]):
                w.writerow([repr(float(d)), repr(float(g))])
        raise
    write_curves(run.path("curves.csv"), sol)
    write_summary(run.path("summary.json"), sol)
    fld = reconstruct_mode(sol, model)
    write_field(run.path("field.csv"), fld)
    run.results = {**sol.summary(), **fld["checks"]}


def cmd_resonance_scan(run):
    from .resonance import min_imag, scan_resonances, write_resonances

    run.load()
    model = run.model()
    with run.executor() as ex:
        scan = scan_resonances(model, run.deltas(), executor=ex)
    write_resonances(run.path("resonances.csv"), scan)
    run.results = {str(m): min_imag(p) for m, p in scan.items()}


def _lowest_odd(md):
    from .bic_search import odd_modes

    odd, _ = odd_modes(md.table)
    odd = [int(i) for i in odd if i > 0]
    if not odd:
        from .errors import ParityViolation

        raise ParityViolation("no odd-coupled mode in the truncation")
    return odd[0]


def cmd_sym_bic(run):
    from .bic_search import symmetry_bic
    from .resonance import find_resonance

    run.load()
    model = run.model()
    with run.executor() as ex:
        data = model.sweep(run.deltas(), ex)
    m = run.args.branch if run.args.branch is not None else _lowest_odd(data[0])
    rows = []
    for md in data:
        s = symmetry_bic(md, m)
        r = find_resonance(md, s.mu, m)
        rows.append((md.delta, s.mu, s.diagnostics["sigma_min_rel"], r.mu.real, r.mu.imag))
    with open(run.path("sym_bic.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "mu", "sigma_min_rel", "re_mu_res", "im_mu_res"])
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
    run.results = {
        "branch": m,
        "max_sigma_min_rel": max(r[2] for r in rows),
        "max_abs_im": max(abs(r[4]) for r in rows),
    }


def cmd_validate(run):
    from .validation import run_suite

    spec = run.load()
    model = run.model()
    report = run_suite(spec, model, seed=run.args.seed)
    path = run.path("validation.json")
    path.write_text(json.dumps(report, indent=2, default=_json_default))
    run.results = {"passed": all(c["pass"] for c in report["checks"]),
                   "n_checks": len(report["checks"])}
    for c in report["checks"]:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['name']}: {c['detail']}")
    if not run.results["passed"]:
        return 3


def cmd_converge(run):
    from .validation import convergence_study

    spec = run.load()
    rows = convergence_study(spec, engine=run.args.engine)
    with open(run.path("convergence.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["study", "level", "value_name", "value"])
        for r in rows:
            w.writerow([r["study"], r["level"], r["name"], repr(float(r["value"]))])
    run.results = {"rows": len(rows)}


COMMANDS = {
    "eigen-scan": cmd_eigen_scan,
    "bic-find": cmd_bic_find,
    "resonance-scan": cmd_resonance_scan,
    "sym-bic": cmd_sym_bic,
    "validate": cmd_validate,
    "converge": cmd_converge,
}


def cli(argv=None):
    """Run a subcommand and return its exit code."""
    args = _parser().parse_args(argv)
    run = Run(args)
    try:
        code = COMMANDS[args.command](run) or 0
        run.manifest("ok" if code == 0 else "failed")
        return code
    except FWBICError as exc:
        rec = exc.record()
        run.manifest("error", rec)
        print(json.dumps(rec, default=_json_default), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # unexpected failures still leave a manifest
        rec = {"error": type(exc).__name__, "module": "cli", "message": str(exc), "details": {}}
        run.manifest("error", rec)
        print(json.dumps(rec), file=sys.stderr)
        return 3


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
