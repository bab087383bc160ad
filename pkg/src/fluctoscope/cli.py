"""Command-line pipeline: simulate, reconstruct, evaluate.

Subcommands
-----------
simulate     render a synthetic acquisition to a dataset directory
reconstruct  covariance -> support -> intensity on a dataset directory
evaluate     score a reconstruction against the dataset ground truth
lambda-max   print the penalty scale references for a dataset
pipeline     simulate + reconstruct + evaluate in one deterministic run

A JSON config file (--config) supplies any of the long-option values;
explicit command-line flags override it. FLUCTOSCOPE_THREADS caps the
kernel thread count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import _kernels, io
from .covariance import empirical_covariance, empirical_mean
from .errors import SolverFailureError
from .evaluate import EvalReport, jaccard_index, noise_variance_error, psnr, snr
from .intensity import IntensityProblem, discrepancy_f, estimate_intensity, select_mu
from .operators import vec_to_img
from .simulate import SimulationConfig, generate_phantom, preset, simulate
from .support import (Regularizer, SolverOptions, estimate_support,
                      estimate_support_with_restarts, lambda_max)

_SIM_FIELDS = {f.name for f in dataclasses.fields(SimulationConfig)
               if f.name != "phantom_image"}


def _json_safe(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return io.read_json(path)


def _merged(args: argparse.Namespace, cfg_file: dict, keys: list[str]
            ) -> dict:
    """File values first, explicit CLI flags override."""
    out = {}
    for k in keys:
        if k in cfg_file:
            out[k] = cfg_file[k]
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _apply_threads(threads: int | None) -> None:
    if threads is not None:
        _kernels.set_num_threads(threads)


def _sim_config(args, cfg_file: dict) -> SimulationConfig:
    over = _merged(args, cfg_file, sorted(_SIM_FIELDS))
    kind = over.pop("preset", None) or getattr(args, "preset", None) \
        or cfg_file.get("preset")
    if kind:
        return dataclasses.replace(preset(kind), **over)
    return SimulationConfig(**over)


def cmd_simulate(args) -> int:
    cfg_file = _load_config(args.config)
    cfg = _sim_config(args, cfg_file)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = simulate(cfg)
    io.write_stack(out / "stack.tif", ds.stack)
    io.write_stack(out / "clean_stack.tif", ds.clean_stack)
    L = cfg.fine_size
    io.write_image(out / "gt_intensity.tif",
                   vec_to_img(ds.gt_intensity, L),
                   pixel_size_nm=cfg.pixel_size_nm / cfg.q)
    io.write_image(out / "gt_background.tif",
                   vec_to_img(ds.gt_background, cfg.coarse_size),
                   pixel_size_nm=cfg.pixel_size_nm)
    sidecar = {
        "config": {f: getattr(cfg, f) for f in sorted(_SIM_FIELDS)},
        "sigma2_used": ds.sigma2_used,
        "files": {
            "stack": "stack.tif",
            "clean_stack": "clean_stack.tif",
            "gt_intensity": "gt_intensity.tif",
            "gt_background": "gt_background.tif",
        },
    }
    io.write_json(out / "dataset.json", _json_safe(sidecar))
    print(f"wrote dataset to {out}")
    return 0


def _solver_options(args, cfg_file: dict) -> SolverOptions:
    keys = ["outer_max", "inner_max", "rel_tol", "irl1_rounds", "seed"]
    over = _merged(args, cfg_file, keys)
    over.setdefault("seed", 0)
    return SolverOptions(**over)


def cmd_reconstruct(args) -> int:
    cfg_file = _load_config(args.config)
    _apply_threads(args.threads)
    indir, out = Path(args.input), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stack = io.read_stack(indir / "stack.tif")
    meta = io.read_json(indir / "dataset.json")
    simcfg = meta["config"]
    model = SimulationConfig(**{k: v for k, v in simcfg.items()
                                if k in _SIM_FIELDS}).forward_model()
    opts = _solver_options(args, cfg_file)
    rec = _merged(args, cfg_file, ["reg", "gamma", "lam", "mu", "alpha",
                                   "beta", "nu_dp", "restarts"])
    reg_kind = rec.get("reg", "l1")
    gamma = rec.get("gamma", 5e-4)

    cov = empirical_covariance(stack)
    mean = empirical_mean(stack)

    report: dict = {"reg": reg_kind, "T": stack.T}
    try:
        if "lam" in rec and rec["lam"] is not None:
            lam = float(rec["lam"])
            report["lambda_source"] = "fixed"
        else:
            lmax = lambda_max(model, cov.r_y, reg_kind) \
                if reg_kind != "tv" else None
            if lmax is None:
                raise SolverFailureError(
                    "tv needs an explicit --lambda (no lambda-max formula)")
            lam = gamma * lmax
            report["lambda_max"] = lmax
            report["gamma"] = gamma
            report["lambda_source"] = "gamma"
        report["lambda"] = lam

        reg = Regularizer(reg_kind, lam)
        restarts = int(rec.get("restarts", 0) or 0)
        if restarts > 0 and reg_kind == "cel0":
            sup = estimate_support_with_restarts(
                model, cov, reg, opts, max_restarts=restarts)
        else:
            sup = estimate_support(model, cov, reg, opts)
        report["support_size"] = int(sup.support.size)
        report["s"] = sup.s
        report["support_objective_trace"] = list(sup.trace)
        report["support_restarts"] = sup.restarts

        prob = IntensityProblem(
            model, mean, sup.support, s=sup.s, T=stack.T,
            mu=float(rec.get("mu") or 1.0),
            beta=float(rec.get("beta", 20.0)),
            alpha=float(rec.get("alpha", 1e6)),
            nu_dp=float(rec.get("nu_dp", 1.0)))
        if rec.get("mu") is not None:
            x, b, trace = estimate_intensity(prob, opts)
            report["mu_source"] = "fixed"
            report["mu_hat"] = prob.mu
            report["f_residual"] = discrepancy_f(prob, x, b)
            report["intensity_objective_trace"] = trace
        else:
            sel = select_mu(prob, opts=opts)
            x, b = sel.x, sel.b
            report["mu_source"] = "discrepancy"
            report["mu_hat"] = sel.mu_hat
            report["f_residual"] = sel.f_value
            report["mu_converged"] = sel.converged
            report["newton_iterations"] = sel.iterations
    except SolverFailureError as err:
        report["error"] = str(err)
        io.write_json(out / "run_report.json", _json_safe(report))
        print(f"solver failure: {err}", file=sys.stderr)
        return 3

    io.write_image(out / "x.tif", vec_to_img(x, model.L))
    io.write_image(out / "background.tif", vec_to_img(b, model.M))
    io.write_json(out / "support.json",
                  {"indices": sup.support.tolist(), "grid": model.L})
    io.write_json(out / "run_report.json", _json_safe(report))
    print(f"wrote reconstruction to {out}")
    return 0


def cmd_evaluate(args) -> int:
    import jsonschema

    indir = Path(args.input)
    recdir = Path(args.recon)
    out = Path(args.out) if args.out else recdir
    out.mkdir(parents=True, exist_ok=True)
    meta = io.read_json(indir / "dataset.json")
    simcfg = meta["config"]
    q = simcfg["q"]
    fine_nm = simcfg["pixel_size_nm"] / q
    L = simcfg["coarse_size"] * q

    gt_img = io.read_image(indir / "gt_intensity.tif")
    gt_vec = gt_img.reshape(-1, order="F")
    gt_support = np.flatnonzero(gt_vec > 0)
    est = np.asarray(io.read_json(recdir / "support.json")["indices"],
                     dtype=np.int64)
    run = io.read_json(recdir / "run_report.json")
    x = io.read_image(recdir / "x.tif").reshape(-1, order="F")

    ji, cd, fp, fn = jaccard_index(est, gt_support, args.tolerance_nm,
                                   fine_nm, L)
    stack = io.read_stack(indir / "stack.tif")
    clean = io.read_stack(indir / "clean_stack.tif")
    report = EvalReport(
        jaccard=ji, correct_detections=cd, false_positives=fp,
        false_negatives=fn, tolerance_nm=float(args.tolerance_nm),
        psnr_db=psnr(x, gt_vec), snr_db=snr(stack, clean),
        noise_var_rel_err=noise_variance_error(
            run["s"], meta["sigma2_used"]))
    payload = _json_safe(report.to_dict())
    schema = json.loads(
        (Path(__file__).parent / "schemas" /
         "eval_report.schema.json").read_text())
    jsonschema.validate(payload, schema)
    io.write_json(out / "eval_report.json", payload)
    io.write_image(out / "compare_gt.tif", gt_img)
    io.write_image(out / "compare_x.tif", vec_to_img(x, L))
    print(f"wrote evaluation to {out / 'eval_report.json'}")
    return 0


def cmd_lambda_max(args) -> int:
    indir = Path(args.input)
    stack = io.read_stack(indir / "stack.tif")
    meta = io.read_json(indir / "dataset.json")
    simcfg = meta["config"]
    model = SimulationConfig(**{k: v for k, v in simcfg.items()
                                if k in _SIM_FIELDS}).forward_model()
    cov = empirical_covariance(stack)
    out = {kind: lambda_max(model, cov.r_y, kind)
           for kind in ("cel0", "l1")}
    print(json.dumps(_json_safe(out), indent=2, sort_keys=True))
    return 0


def cmd_pipeline(args) -> int:
    out = Path(args.out)
    data_dir = out / "data"
    rec_dir = out / "recon"
    args_sim = argparse.Namespace(**{**vars(args), "out": str(data_dir)})
    rc = cmd_simulate(args_sim)
    if rc:
        return rc
    args_rec = argparse.Namespace(**{**vars(args), "input": str(data_dir),
                                     "out": str(rec_dir)})
    rc = cmd_reconstruct(args_rec)
    if rc:
        return rc
    args_ev = argparse.Namespace(**{**vars(args), "input": str(data_dir),
                                    "recon": str(rec_dir),
                                    "out": str(rec_dir)})
    return cmd_evaluate(args_ev)


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=["LB", "HB", "lb", "hb"])
    p.add_argument("--T", dest="T", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--coarse-size", dest="coarse_size", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--fwhm-nm", dest="fwhm_nm", type=float)
    p.add_argument("--pixel-size-nm", dest="pixel_size_nm", type=float)
    p.add_argument("--background-photons", dest="background_photons",
                   type=float)
    p.add_argument("--n-filaments", dest="n_filaments", type=int)


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--reg", choices=["cel0", "l1", "tv"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--nu-dp", dest="nu_dp", type=float)
    p.add_argument("--restarts", type=int)
    p.add_argument("--outer-max", dest="outer_max", type=int)
    p.add_argument("--inner-max", dest="inner_max", type=int)
    p.add_argument("--rel-tol", dest="rel_tol", type=float)
    p.add_argument("--irl1-rounds", dest="irl1_rounds", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fluctoscope",
        description="Covariance-domain super-resolution reconstruction "
                    "from blinking-fluorophore stacks")
    ap.add_argument("--config", help="JSON file with default options")
    ap.add_argument("--threads", type=int,
                    help="kernel thread count (capped by "
                         "FLUCTOSCOPE_THREADS)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic dataset")
    _add_sim_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="run the two-step estimation")
    p.add_argument("input", help="dataset directory")
    p.add_argument("--out", required=True)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score a reconstruction")
    p.add_argument("input", help="dataset directory")
    p.add_argument("recon", help="reconstruction directory")
    p.add_argument("--out")
    p.add_argument("--tolerance-nm", dest="tolerance_nm", type=float,
                   default=40.0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("lambda-max", help="print penalty scale references")
    p.add_argument("input", help="dataset directory")
    p.set_defaults(func=cmd_lambda_max)

    p = sub.add_parser("pipeline",
                       help="simulate, reconstruct and evaluate")
    _add_sim_flags(p)
    _add_solver_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--tolerance-nm", dest="tolerance_nm", type=float,
                   default=40.0)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(getattr(args, "threads", None))
    try:
        return args.func(args)
    except FileNotFoundError as err:
        print(f"missing input: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
