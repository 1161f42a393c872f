"""Command-line entry point: ``jointivim <command> ...``.

Exit status is 0 on success, 2 for invalid input or configuration and 1 for
failures while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import baselines
from .case import normalize_case
from .caseio import (load_case, load_deformations, load_maps, read_nifti, save_case,
                     save_deformations, save_maps, save_result, write_json)
from .classical import fit_map
from .config import build, load_config, read_mapping
from .errors import GridSearchError
from .evaluation import (CRITERIA, EvalCase, correlate_ga, dice, grid_search, mask_alignment_score,
                         param_rmse, read_records, write_table)
from .joint import optimize_case
from .phantom import PhantomSpec, simulate
from .warp import integrate_svf

log = logging.getLogger("jointivim")

METHODS = ("affine-b0", "deformable-b0", "sequential", "iterative", "ivim-morph")


def _common(sub=False):
    p = argparse.ArgumentParser(add_help=False)
    d = argparse.SUPPRESS if sub else None
    p.add_argument("--threads", type=int, default=d if sub else 1, help="worker threads")
    p.add_argument("--seed", type=int, default=d, help="random seed (overrides the config)")
    p.add_argument("--out", default=d, help="output directory")
    return p


def _case_args(p):
    p.add_argument("case", help="case directory or NIfTI file")
    p.add_argument("--slice", type=int, dest="slice_index", help="slice of a multi-slice volume")
    p.add_argument("--crop", type=int, nargs=2, metavar=("H", "W"), help="centre crop/pad size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointivim", parents=[_common()],
                                     description="IVIM parameter mapping with joint motion correction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(sub=True)

    p = sub.add_parser("fit", parents=[common], help="pixelwise SLS-TRF maps")
    _case_args(p)
    p.add_argument("--mask", help="mask NIfTI (defaults to the case mask)")

    p = sub.add_parser("correct", parents=[common], help="motion correction followed by fitting")
    _case_args(p)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--config", help="run configuration (JSON or YAML)")

    p = sub.add_parser("phantom", parents=[common], help="simulate a phantom case")
    p.add_argument("--spec", help="phantom spec (JSON or YAML); defaults if omitted")

    p = sub.add_parser("eval", parents=[common], help="evaluation metrics")
    ev = p.add_subparsers(dest="metric", required=True)
    q = ev.add_parser("dice", parents=[common], help="Dice of two mask NIfTIs")
    q.add_argument("a")
    q.add_argument("b")
    q = ev.add_parser("rmse", parents=[common], help="map RMSE against ground truth")
    q.add_argument("est", help="directory with D/Dstar/f/S0 maps")
    q.add_argument("truth", help="directory with ground-truth maps")
    q.add_argument("--mask", required=True, help="mask NIfTI")
    q = ev.add_parser("correlate", parents=[common], help="parameter vs GA regression")
    q.add_argument("records", help="cohort CSV")
    q.add_argument("--parameter", default="f", choices=("D", "Dstar", "f"))
    q = ev.add_parser("masks", parents=[common], help="lung-mask alignment Dice")
    q.add_argument("case", help="case directory with lung_masks")
    q.add_argument("--deformations", help="deformations NIfTI; identity if omitted")

    p = sub.add_parser("grid", parents=[common], help="loss-weight grid search")
    p.add_argument("--cases", required=True, help="directory of case directories")
    p.add_argument("--grid", help="grid file with alpha1/alpha2/alpha3 lists; default grid if omitted")
    p.add_argument("--criterion", choices=CRITERIA, default="rmse_f")
    p.add_argument("--config", help="run configuration (JSON or YAML)")
    return parser


def _out(args, default):
    d = Path(args.out or default)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load(args):
    crop = tuple(args.crop) if args.crop else None
    return normalize_case(load_case(args.case, args.slice_index, crop))


def cmd_fit(args):
    case = _load(args)
    mask = read_nifti(args.mask).astype(bool) if args.mask else None
    maps = fit_map(case, mask=mask, threads=args.threads)
    out = save_maps(maps, _out(args, "fit_out"))
    print(f"maps written to {out}")


def cmd_correct(args):
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    case = _load(args)
    out = _out(args, f"correct_{args.method}")
    s = cfg.baseline
    if args.method == "ivim-morph":
        result = optimize_case(case, replace(cfg.opt_config(), seed=seed), cfg.bounds)
        save_result(result, out, metrics={"method": args.method})
        save_case(case.with_images(result.corrected.astype(np.float64)), out / "corrected")
        print(f"ivim-morph: {result.iterations} iterations, final loss {result.final.total:.6g}; "
              f"results in {out}")
        return
    if args.method == "affine-b0":
        corr = baselines.correct_to_b0(case, "affine", s, threads=args.threads)
    elif args.method == "deformable-b0":
        corr = baselines.correct_to_b0(case, "deformable", s, threads=args.threads)
    elif args.method == "sequential":
        corr = baselines.correct_sequential(case, s)
    else:
        corr = baselines.iterative_fit_register(case, settings=s, bounds=cfg.bounds)
    maps = corr.maps if corr.maps is not None else fit_map(corr.case, bounds=cfg.bounds, threads=args.threads)
    save_maps(maps, out)
    save_deformations(corr.deformations, out / "deformations.nii")
    save_case(corr.case, out / "corrected")
    write_json({"method": args.method, "settings": s, "fit_terms": corr.fit_terms}, out / "report.json")
    print(f"{args.method}: results in {out}")


def cmd_phantom(args):
    spec = build(PhantomSpec, read_mapping(args.spec), "phantom") if args.spec else PhantomSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    case, gt = simulate(spec)
    out = _out(args, "phantom")
    save_case(case, out)
    save_maps(gt.maps, out / "truth")
    # fields that undo the simulated motion, comparable to registration output
    save_deformations(integrate_svf(-gt.velocities), out / "truth" / "deformations.nii")
    write_json(spec.to_dict(), out / "spec.json")
    print(f"phantom written to {out}")


def cmd_eval(args):
    if args.metric == "dice":
        res = {"dice": dice(read_nifti(args.a), read_nifti(args.b))}
    elif args.metric == "rmse":
        res = param_rmse(load_maps(args.est), load_maps(args.truth), read_nifti(args.mask).astype(bool))
    elif args.metric == "correlate":
        res = correlate_ga(read_records(args.records), args.parameter).to_dict()
    else:
        case = load_case(args.case)
        phis = load_deformations(args.deformations) if args.deformations else None
        res = {"mask_dice": mask_alignment_score(case, phis)}
    print(json.dumps(res, indent=2))
    if args.out:
        write_json(res, _out(args, ".") / f"eval_{args.metric}.json")


def _eval_cases(directory):
    d = Path(directory)
    if not d.is_dir():
        raise ValueError(f"{d} is not a directory")
    cases = []
    for sub in sorted(p for p in d.iterdir() if p.is_dir()):
        case = normalize_case(load_case(sub))
        truth = load_maps(sub / "truth") if (sub / "truth").is_dir() else None
        cases.append(EvalCase(case, truth))
    if not cases:
        raise ValueError(f"no case directories under {d}")
    return cases


def cmd_grid(args):
    cfg = load_config(args.config)
    base = replace(cfg.opt_config(), seed=cfg.seed if args.seed is None else args.seed)
    grid = read_mapping(args.grid) if args.grid else None
    kw = {"grid": grid} if grid else {}
    out = _out(args, "grid_out")
    try:
        res = grid_search(_eval_cases(args.cases), criterion=args.criterion, base=base,
                          threads=args.threads, **kw)
    except GridSearchError as exc:
        write_table(exc.table, out / "grid_table.csv")
        raise
    write_table(res.table, out / "grid_table.csv")
    write_json({"best": res.best, "best_score": res.best_score, "criterion": args.criterion},
               out / "grid_best.json")
    print(f"best {res.best} score {res.best_score:.6g}; table in {out}")


COMMANDS = {"fit": cmd_fit, "correct": cmd_correct, "phantom": cmd_phantom, "eval": cmd_eval, "grid": cmd_grid}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    torch.set_num_threads(args.threads)
    try:
        COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report, no traceback
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
