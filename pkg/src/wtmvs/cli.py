"""Command-line entry point: ``wtmvs <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 missing input, 3 invalid config,
64 bad command line.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import torch

from .ablation import ablation_table, infer_views, median_overall, run_ablation, scene_samples, thresholds
from .config import ConfigError, PipelineConfig
from .fusion import consistency_filter, evaluate, fuse
from .io import FormatError, read_camera, read_dmap, read_kv, read_ply, write_dmap, write_json, write_ply
from .pipeline import TrainingDiverged, build_model, train
from .regularizers import KINDS
from .scenes import SceneError, SceneSpec, generate, load_scene, save_scene, spec_from_kv, view_name

log = logging.getLogger("wtmvs")


class MissingInput(Exception):
    def __init__(self, path):
        super().__init__(f"missing input: {path}")
        self.path = Path(path)


class UsageError(Exception):
    pass


def _require(path) -> Path:
    if path is None:
        raise UsageError("a required path flag was not given")
    p = Path(path)
    if not p.exists():
        raise MissingInput(p)
    return p


def _config(args) -> PipelineConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_kv(_require(args.config)))
    overrides = {"seed": args.seed, "n_views": args.views, "stages": args.stages, "reg": args.reg,
                 "geo_set": args.geo_set, "steps": getattr(args, "steps", None)}
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_dict(values)


def _out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_dir(args) -> Path:
    p = _require(args.scene)
    for name in ("scene.cfg", "gt.ply"):
        _require(p / name)
    return p


def _model(cfg, args):
    model = build_model(cfg)
    if getattr(args, "checkpoint", None):
        ckpt = Path(args.checkpoint)
        _require(ckpt.with_suffix(".bin"))
        _require(ckpt.with_suffix(".manifest"))
        model.load(ckpt)
    return model


def cmd_gen_scene(args) -> int:
    spec = spec_from_kv(read_kv(_require(args.spec))) if args.spec else SceneSpec()
    if args.views is not None:
        spec = SceneSpec(**{**spec.__dict__, "n_views": args.views})
    scene = generate(spec, args.seed or 0)
    save_scene(scene, _out(args))
    log.info("wrote %d views to %s", len(scene.cams), args.out)
    return 0


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "stage", "ce", "geo", "total"])
        for row in history:
            w.writerow([row["step"], row["stage"], repr(row["ce"]), repr(row["geo"]), repr(row["total"])])


def cmd_train(args) -> int:
    cfg = _config(args)
    scene = load_scene(_scene_dir(args))
    out = _out(args)
    model = _model(cfg, args)
    model, history = train(scene_samples(scene, cfg.n_views), cfg, model)
    model.save(out / "model")
    write_loss_csv(out / "loss.csv", history)
    cfg.save(out / "config.cfg")
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args)
    scene = load_scene(_scene_dir(args))
    out = _out(args)
    depths, confs = infer_views(scene, _model(cfg, args), cfg.n_views)
    for v, (d, c) in enumerate(zip(depths, confs)):
        write_dmap(out / f"{view_name(v)}_depth.dmap", d)
        write_dmap(out / f"{view_name(v)}_conf.dmap", c)
    return 0


def cmd_fuse(args) -> int:
    cfg = _config(args)
    scene_dir = _scene_dir(args)
    depth_dir = _require(args.depths)
    spec = spec_from_kv(read_kv(scene_dir / "scene.cfg"))
    cams, depths, confs = [], [], []
    for v in range(spec.n_views):
        cams.append(read_camera(_require(scene_dir / "cams" / f"{view_name(v)}_cam.txt")))
        depths.append(read_dmap(_require(depth_dir / f"{view_name(v)}_depth.dmap")))
        confs.append(read_dmap(_require(depth_dir / f"{view_name(v)}_conf.dmap")))
    th = thresholds(cfg)
    masks = consistency_filter(depths, confs, cams, th)
    cloud = fuse(depths, masks, cams, th)
    write_ply(_out(args) / "recon.ply", cloud.points)
    return 0


def cmd_eval(args) -> int:
    recon = read_ply(_require(args.recon))
    gt = read_ply(_require(args.gt))
    report = evaluate(recon, gt, args.tau, args.outlier_cap)
    out = _out(args)
    report.write(out / "report.txt", out / "report.json")
    print(f"accuracy={report.accuracy:.6g} completeness={report.completeness:.6g} "
          f"overall={report.overall:.6g} fscore={report.fscore:.6g}%")
    return 0


def cmd_ablate_reg(args) -> int:
    cfg = _config(args)
    scene = load_scene(_scene_dir(args)) if args.scene else generate(SceneSpec(), cfg.seed)
    kinds = [args.reg] if args.reg else list(KINDS)
    seeds = [cfg.seed + k for k in range(args.repeats)]
    rows = run_ablation(scene, cfg, kinds, seeds, tau=args.tau, log=log.info)
    out = _out(args)
    (out / "ablation.csv").write_text(ablation_table(rows))
    write_json(out / "ablation.json", {"median_overall": median_overall(rows)})
    print(ablation_table(rows), end="")
    return 0


def cmd_check_grads(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(instances=args.instances, seed=args.seed or 0)
    for r in results:
        print(r.summary())
    if args.out:
        write_json(_out(args) / "gradcheck.json",
                   {r.name: {"passed": r.passed, "max_rel_error": r.max_rel_error} for r in results})
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--views", type=int, default=None, help="views per sample, reference included")
    common.add_argument("--stages", type=int, default=None, help="cascade stages to run (1-3)")
    common.add_argument("--reg", choices=KINDS, default=None)
    common.add_argument("--geo-set", dest="geo_set", choices=("intersection", "union"), default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="wtmvs", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-scene", parents=[common])
    g.add_argument("--spec", help="key=value scene spec")
    t = sub.add_parser("train", parents=[common])
    t.add_argument("--scene", required=True)
    t.add_argument("--checkpoint", help="initial weights")
    t.add_argument("--steps", type=int, default=None)
    i = sub.add_parser("infer", parents=[common])
    i.add_argument("--scene", required=True)
    i.add_argument("--checkpoint")
    f = sub.add_parser("fuse", parents=[common])
    f.add_argument("--scene", required=True)
    f.add_argument("--depths", required=True, help="directory written by infer")
    e = sub.add_parser("eval", parents=[common])
    e.add_argument("--recon", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--tau", type=float, default=0.05)
    e.add_argument("--outlier-cap", dest="outlier_cap", type=float, default=None)
    a = sub.add_parser("ablate-reg", parents=[common])
    a.add_argument("--scene")
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--repeats", type=int, default=3)
    a.add_argument("--tau", type=float, default=0.05)
    c = sub.add_parser("check-grads", parents=[common])
    c.add_argument("--instances", type=int, default=10)
    return p


COMMANDS = {
    "gen-scene": cmd_gen_scene, "train": cmd_train, "infer": cmd_infer, "fuse": cmd_fuse,
    "eval": cmd_eval, "ablate-reg": cmd_ablate_reg, "check-grads": cmd_check_grads,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 64 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except MissingInput as exc:
        print(f"error: missing input: {exc.path}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: invalid config keys: {', '.join(sorted(exc.problems))}", file=sys.stderr)
        for k, v in exc.problems.items():
            print(f"  {k}: {v}", file=sys.stderr)
        return 3
    except SceneError as exc:
        print(f"error: invalid scene spec: {exc}", file=sys.stderr)
        return 3
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 64
    except (FormatError, TrainingDiverged, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
