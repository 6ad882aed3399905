"""Command-line entry point wiring the pipeline: template generation,
fitting, simulation, data generation, training, inference, evaluation.

Exit codes: 0 success, 2 validation failure, 3 solver failure, 4 I/O or
format failure. Every command is deterministic under a fixed --seed and
stamps its outputs with the config hash and tool version.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import __version__
from .config import load_config, write_config
from .errors import FormatError, SolverError, ValidationError


def _stamp(cfg) -> str:
    return f"config {cfg.hash()} volblend {__version__}"


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1,
                   help="process-parallelism across identities/instances")


def cmd_template(args) -> int:
    from . import lhm as vl
    cfg = load_config(args.config)
    if args.level is not None:
        cfg["template"]["level"] = args.level
    spec = cfg.template_spec()
    model = vl.generate_synthetic_template(spec)
    model = vl.massage_layers(
        model, cfg.solver_weights(),
        outer_iterations=int(cfg["template"]["massage_outer_iterations"]),
        inner_iterations=int(cfg["template"]["massage_inner_iterations"]))
    model = vl.build_tissue_meshes(model)
    model.validate()
    vl.save_lhm(model, args.out, manifest_extra={
        "stamp": _stamp(cfg), "seed": args.seed,
        "level": cfg["template"]["level"],
        "skin_vertices": model.skin.n_vertices,
        "wrap_faces": model.skin_wrap.n_faces,
        "massage_residual_reduction": "; ".join(
            f"{k}={v:.1f}" for k, v in model.diagnostics.items()
            if isinstance(v, float))})
    print(f"template written to {args.out} "
          f"(skin {model.skin.n_vertices} vertices, "
          f"wraps {model.skin_wrap.n_faces} faces)")
    return 0


def cmd_train_regressor(args) -> int:
    from . import fitting as vf
    from . import lhm as vl
    cfg = load_config(args.config)
    template = vl.load_lhm(args.lhm)
    rng = np.random.default_rng(args.seed)
    t0 = time.perf_counter()
    wraps, dists = vf.synthetic_paired_dataset(
        template, int(args.instances or cfg["fitting"]["regressor_instances"]),
        rng, level=int(cfg["template"]["level"]))
    reg = vf.train_distance_regressor(
        wraps, dists, k_in=int(cfg["fitting"]["k_in"]),
        k_out=int(cfg["fitting"]["k_out"]), ridge=float(cfg["fitting"]["ridge"]),
        min_distance=float(cfg["fitting"]["min_distance"]))
    vf.save_regressor(reg, args.out)
    print(f"regressor trained on {len(wraps)} paired instances in "
          f"{time.perf_counter() - t0:.1f}s -> {args.out}")
    return 0


def cmd_fit(args) -> int:
    from . import fitting as vf
    from . import lhm as vl
    from . import mesh as vm
    cfg = load_config(args.config)
    template = vl.load_lhm(args.lhm)
    reg = vf.load_regressor(args.regressor)
    skin = vm.read_obj(args.skin)
    if skin.n_vertices != template.skin.n_vertices:
        raise ValidationError(
            f"target skin has {skin.n_vertices} vertices; the template "
            f"topology has {template.skin.n_vertices}")
    skin = vm.TriangleMesh(skin.vertices, template.skin.faces,
                           dict(template.skin.region_masks))
    result = vf.fit_lhm(skin, reg, template, cfg.solver_weights(),
                        w_rel=float(cfg["fitting"]["w_rel"]))
    vl.save_lhm(result.lhm, args.out, manifest_extra={
        "stamp": _stamp(cfg),
        "fit_seconds": f"{result.diagnostics['stage_seconds']['total']:.3f}"})
    print(f"fit completed in {result.diagnostics['stage_seconds']['total']:.3f}s "
          f"-> {args.out}")
    return 0


def cmd_simulate(args) -> int:
    from . import lhm as vl
    from . import mesh as vm
    from . import physics as vp
    cfg = load_config(args.config)
    lhm = vl.load_lhm(args.lhm)
    sim = vp.HeadSimulator(lhm, cfg.solver_weights(),
                           n_iterations=int(cfg["solver_weights"]["n_iterations"]))
    os.makedirs(args.out, exist_ok=True)
    log: list = []
    if args.mode == "inverse":
        target = vm.read_obj(args.target)
        state, plausible = sim.inverse(target.vertices, energy_log=log)
        vp.save_state(state, os.path.join(args.out, "state.vbsv"))
        vm.write_obj(vm.TriangleMesh(plausible, lhm.skin.faces),
                     os.path.join(args.out, "plausible_skin.obj"))
    else:
        state = vp.load_state(args.state)
        skin = sim.forward(state, energy_log=log)
        vm.write_obj(vm.TriangleMesh(skin, lhm.skin.faces),
                     os.path.join(args.out, "skin.obj"))
    from . import solver as ps
    ps.write_energy_log_csv(os.path.join(args.out, "energy.csv"), log,
                            header_comment=_stamp(cfg))
    print(f"{args.mode} simulation done -> {args.out}")
    return 0


def _dataset_to_npz(ds, path, stamp: str):
    np.savez_compressed(
        path,
        neutral=np.stack([i.neutral for i in ds.instances]),
        linear_delta=np.stack([i.linear_delta for i in ds.instances]),
        target_delta=np.stack([i.target_delta for i in ds.instances]),
        identity=np.array([i.identity for i in ds.instances]),
        weights=np.stack([i.weights for i in ds.instances]),
        stamp=np.array(stamp))


def _dataset_from_npz(path):
    from .neural import Dataset, DatasetInstance
    try:
        data = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise FormatError(f"cannot read dataset {path}: {exc}") from None
    instances = [
        DatasetInstance(neutral=data["neutral"][i],
                        linear_delta=data["linear_delta"][i],
                        target_delta=data["target_delta"][i],
                        identity=int(data["identity"][i]),
                        weights=data["weights"][i])
        for i in range(len(data["identity"]))]
    return Dataset(instances=instances, n_coords=data["neutral"].shape[1],
                   identities=np.unique(data["identity"]))


def cmd_gendata(args) -> int:
    from . import fitting as vf
    from . import lhm as vl
    from . import neural as vn
    cfg = load_config(args.config)
    template = vl.load_lhm(args.lhm)
    reg = vf.load_regressor(args.regressor)
    n_id = int(args.identities or cfg["dataset"]["n_identities"])
    n_expr = int(args.expressions or cfg["dataset"]["expressions_per_identity"])
    t0 = time.perf_counter()
    ds = vn.generate_dataset(template, reg, n_id, n_expr, seed=args.seed,
                             level=int(cfg["template"]["level"]), jobs=args.jobs,
                             zero_weight_rate=float(cfg["dataset"]["zero_weight_rate"]))
    _dataset_to_npz(ds, args.out, _stamp(cfg))
    print(f"{len(ds.instances)} instances over {len(ds.identities)} identities "
          f"in {time.perf_counter() - t0:.1f}s -> {args.out}")
    return 0


def cmd_train(args) -> int:
    from . import neural as vn
    cfg = load_config(args.config)
    tc = cfg.training_config(seed=args.seed)
    if args.steps:
        tc.steps = args.steps
    ds = _dataset_from_npz(args.dataset)
    train_set, test_set = ds.split(np.random.default_rng(args.seed),
                                   tc.train_fraction)
    resume_model = resume_state = None
    if args.resume:
        resume_model, ckpt_cfg, resume_state = vn.load_checkpoint(args.resume)
        if vn.config_hash(ckpt_cfg) != vn.config_hash(tc):
            raise ValidationError("checkpoint config hash does not match; "
                                  "refusing to resume")
    t0 = time.perf_counter()
    result = vn.train(train_set, tc, model=resume_model, resume_state=resume_state,
                      checkpoint_path=args.checkpoint, checkpoint_every=args.checkpoint_every)
    vn.save_model(result.model, args.out)
    if args.log:
        vn.write_training_log_csv(args.log, result.log,
                                  header_comment=f"{_stamp(cfg)} "
                                                 f"training {vn.config_hash(tc)}")
    msg = (f"trained {tc.steps} steps in {time.perf_counter() - t0:.1f}s; "
           f"final loss {result.log[-1]['loss']:.6f} -> {args.out}")
    if test_set:
        metrics = vn.evaluate(result.model, test_set)
        msg += f"; test mean error {metrics['mean_error_mm']:.4f} mm"
    print(msg)
    return 0


def cmd_infer(args) -> int:
    from . import mesh as vm
    from . import neural as vn
    cfg = load_config(args.config)
    model = vn.load_model(args.model)
    neutral = vm.read_obj(args.neutral)
    linear = vm.read_obj(args.linear)
    flat_n = neutral.vertices.ravel()
    flat_d = linear.vertices.ravel() - flat_n
    out, dt = vn.infer_timed(model, flat_n, flat_d)
    vm.write_obj(vm.TriangleMesh(out.reshape(-1, 3), neutral.faces), args.out)
    print(f"inference {dt * 1e3:.2f} ms -> {args.out}  [{_stamp(cfg)}]")
    return 0


def cmd_eval(args) -> int:
    from . import neural as vn
    cfg = load_config(args.config)
    model = vn.load_model(args.model)
    ds = _dataset_from_npz(args.dataset)
    _, test_set = ds.split(np.random.default_rng(args.seed),
                           float(cfg["training"]["train_fraction"]))
    if not test_set:
        test_set = ds.instances
    metrics = vn.evaluate(model, test_set, n_latency_calls=args.latency_calls)
    vn.write_metrics_csv(args.out, metrics, header_comment=_stamp(cfg))
    print(f"test mean error {metrics['mean_error_mm']:.4f} mm over "
          f"{metrics['n_instances']} instances -> {args.out}")
    return 0


def cmd_show_config(args) -> int:
    cfg = load_config(args.config)
    write_config(cfg, args.out)
    print(f"effective config (hash {cfg.hash()}) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volblend",
        description="physics-grounded volumetric blendshapes: anatomy "
                    "fitting, quasi-static facial simulation, and a "
                    "realtime neural approximation")
    parser.add_argument("--version", action="version",
                        version=f"volblend {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("template", help="generate + massage a synthetic template")
    _add_common(p)
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_template)

    p = sub.add_parser("train-regressor", help="fit the skin-to-skull distance regressor")
    _add_common(p)
    p.add_argument("--lhm", required=True, help="template LHM directory")
    p.add_argument("--instances", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_regressor)

    p = sub.add_parser("fit", help="fit the layered model to a neutral skin")
    _add_common(p)
    p.add_argument("--lhm", required=True)
    p.add_argument("--regressor", required=True)
    p.add_argument("--skin", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    for mode in ("inverse", "forward"):
        p = sub.add_parser(f"simulate-{mode}", help=f"run the {mode} model")
        _add_common(p)
        p.add_argument("--lhm", required=True, help="fitted LHM directory")
        if mode == "inverse":
            p.add_argument("--target", required=True, help="expression OBJ")
        else:
            p.add_argument("--state", required=True, help="volumetric state file")
        p.add_argument("--out", required=True)
        p.set_defaults(func=cmd_simulate, mode=mode)

    p = sub.add_parser("gendata", help="generate training data")
    _add_common(p)
    p.add_argument("--lhm", required=True, help="template LHM directory")
    p.add_argument("--regressor", required=True)
    p.add_argument("--identities", type=int, default=None)
    p.add_argument("--expressions", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="train the correction network")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="training log CSV")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="realtime correction of a linear blend")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--neutral", required=True)
    p.add_argument("--linear", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a trained model")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--latency-calls", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("show-config", help="write the effective config")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_show_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
