"""Single executable over the full pipeline, config-driven and reproducible.

Commands: gen-data, train-teacher, train-stage1, train-stage2, sample,
guide, gs-optimize, eval, render. Flags override config-file values; every
run writes its fully resolved config next to its outputs. Failures print
one line, `ERROR:<category>: <message>`, and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .config import RunConfig, load_config, save_resolved_config
from .dataset import generate_dataset, load_split
from .errors import ConfigError, DataError, MissingArtifactError, SplatdiffError
from .guidance import GuidanceConfig, guided_sample, gs_optimize, sample
from .images import save_imgf, save_ppm
from .ioutil import atomic_write_text
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.denoiser import DenoiserModel
from .render import render
from .splats import GaussianSet, SplatNormalizer, load_splats, save_splats
from .teacher import TeacherModel, train_teacher
from .trainer import fit_normalizer, heldout_metrics, train, write_train_log


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"ERROR:usage: {message}", file=sys.stderr)
        raise SystemExit(2)


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    return int(os.environ.get("SPLATDIFF_THREADS", "1"))


def _resolve_config(args, **overrides) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.apply_overrides(overrides)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{what} not found: {path}")
    return path


def _load_teacher(cfg: RunConfig, ckpt_path) -> TeacherModel:
    _, blobs, _ = load_checkpoint(_require(ckpt_path, "teacher checkpoint"),
                                  expect_digest=cfg.teacher_digest())
    model = TeacherModel(cfg.model.teacher_config(), np.random.default_rng(0))
    model.load_blobs(blobs)
    model.freeze()
    return model


def _load_denoiser(cfg: RunConfig, ckpt_path):
    _, blobs, _ = load_checkpoint(_require(ckpt_path, "model checkpoint"),
                                  expect_digest=cfg.denoiser_digest())
    model = DenoiserModel(cfg.model.denoiser_config(cfg.schedule.T), np.random.default_rng(0))
    norm_blobs = {k: blobs.pop(k) for k in ("normalizer.mean", "normalizer.std") if k in blobs}
    if len(norm_blobs) != 2:
        raise DataError("checkpoint is missing normalizer statistics")
    model.load_blobs(blobs)
    normalizer = SplatNormalizer(mean=norm_blobs["normalizer.mean"].astype(np.float64),
                                 std=norm_blobs["normalizer.std"].astype(np.float64))
    return model, normalizer


def _scene_by_id(scenes, scene_id):
    if scene_id is None:
        return scenes[0]
    for s in scenes:
        if s.scene_id == scene_id:
            return s
    raise DataError(f"scene not found: {scene_id}")


def _background(cfg: RunConfig) -> np.ndarray:
    return np.asarray(cfg.dataset.background, dtype=np.float64)


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args, **{"dataset.image_size": args.image_size,
                                   "dataset.n_train": args.n_train,
                                   "dataset.n_val": args.n_val})
    out = _out_dir(args)
    generate_dataset(out, seed=args.seed, spec=cfg.dataset, threads=_threads(args))
    save_resolved_config(cfg, out)
    print(f"dataset written to {out}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _resolve_config(args, **{"train.teacher_steps": args.steps, "train.seed": args.seed,
                                   "train.teacher_lr": args.lr})
    out = _out_dir(args)
    scenes = load_split(args.dataset, "train")
    rows = []

    def on_log(step, loss, elapsed):
        rows.append([step, 0, "", "", "", loss, "", "", int(elapsed * 1000)])

    model, history = train_teacher(scenes, steps=cfg.train.teacher_steps,
                                   batch_size=cfg.train.teacher_batch,
                                   lr=cfg.train.teacher_lr, seed=cfg.train.seed,
                                   cfg=cfg.model.teacher_config(),
                                   background=_background(cfg), on_log=on_log)
    save_checkpoint(out / "teacher.ckpt", cfg.teacher_digest(),
                    dict(model.named_parameters()))
    write_train_log(out / "teacher_log.csv", rows)
    save_resolved_config(cfg, out)
    print(f"teacher trained for {len(history)} steps, final loss {history[-1]:.6f}")
    return 0


def _run_stage(args, stage: int) -> int:
    cfg = _resolve_config(args, **{"train.steps": args.steps, "train.seed": args.seed,
                                   "train.lr": args.lr, "train.batch_size": args.batch,
                                   "train.w_cyc": args.w_cyc})
    out = _out_dir(args)
    schedule = cfg.schedule.build()
    train_scenes = load_split(args.dataset, "train")
    val_scenes = load_split(args.dataset, "val")
    teacher = _load_teacher(cfg, args.teacher_ckpt)
    model = DenoiserModel(cfg.model.denoiser_config(cfg.schedule.T),
                          np.random.default_rng(cfg.train.seed))
    if stage == 1:
        normalizer = fit_normalizer(teacher, train_scenes)
    else:
        stage1_model, normalizer = _load_denoiser(cfg, args.stage1_ckpt)
        model = stage1_model
    tcfg = cfg.train.train_config(stage)
    train(stage, teacher, model, normalizer, schedule, train_scenes, val_scenes, tcfg,
          out_dir=out, digest=cfg.denoiser_digest(), background=_background(cfg))
    save_resolved_config(cfg, out)
    print(f"stage {stage} training complete: {out / f'stage{stage}.ckpt'}")
    return 0


def cmd_train_stage1(args) -> int:
    return _run_stage(args, 1)


def cmd_train_stage2(args) -> int:
    return _run_stage(args, 2)


def cmd_sample(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    scenes = load_split(args.dataset, args.split)
    scene = _scene_by_id(scenes, args.scene)
    model, normalizer = _load_denoiser(cfg, args.ckpt)
    schedule = cfg.schedule.build()
    rng = np.random.default_rng(args.seed)
    splats = sample(model, normalizer, schedule, scene.source_image, scene.source_camera,
                    steps=args.steps, rng=rng)
    save_splats(out / "sample.splt", splats)
    _write_views(out, splats, scene, cfg)
    save_resolved_config(cfg, out)
    print(f"sampled {splats.count} splats for {scene.scene_id}")
    return 0


def _write_views(out, splats, scene, cfg):
    bg = _background(cfg)
    for vi in [scene.source_index] + list(scene.eval_indices):
        img = render(splats, scene.cameras[vi], bg).values
        save_imgf(out / f"render_{vi:02d}.imgf", img)
        save_ppm(out / f"render_{vi:02d}.ppm", img)


def cmd_guide(args) -> int:
    cfg = _resolve_config(args, **{"guidance.strength": args.strength,
                                   "guidance.gs_steps": args.gs_steps})
    out = _out_dir(args)
    scenes = load_split(args.dataset, args.split)
    scene = _scene_by_id(scenes, args.scene)
    model, normalizer = _load_denoiser(cfg, args.ckpt)
    schedule = cfg.schedule.build()
    gcfg = cfg.guidance.guidance_config()
    gd_index = scene.guidance_index
    if gd_index == scene.source_index:
        raise DataError("guidance view must differ from the source view")
    rng = np.random.default_rng(args.seed)
    splats, trace = guided_sample(model, normalizer, schedule, scene.source_image,
                                  scene.source_camera, scene.images[gd_index],
                                  scene.cameras[gd_index], gcfg, rng=rng,
                                  background=_background(cfg))
    if args.gs_optimize:
        views = [(scene.source_image, scene.source_camera),
                 (scene.images[gd_index], scene.cameras[gd_index])]
        splats = gs_optimize(splats, views, steps=gcfg.gs_steps, lr=gcfg.gs_lr,
                             background=_background(cfg))
    save_splats(out / "guided.splt", splats)
    atomic_write_text(out / "guidance_loss.csv",
                      "substep,guidance_mse\n"
                      + "".join(f"{i},{repr(v)}\n" for i, v in enumerate(trace)))
    _write_views(out, splats, scene, cfg)
    save_resolved_config(cfg, out)
    print(f"guided sample for {scene.scene_id} (guidance view {gd_index})")
    return 0


def cmd_gs_optimize(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    scenes = load_split(args.dataset, args.split)
    scene = _scene_by_id(scenes, args.scene)
    init = load_splats(_require(args.init, "initial splat file"))
    views = [(scene.source_image, scene.source_camera),
             (scene.images[scene.guidance_index], scene.cameras[scene.guidance_index])]
    splats = gs_optimize(init, views, steps=args.steps, lr=args.lr,
                         background=_background(cfg))
    save_splats(out / "optimized.splt", splats)
    _write_views(out, splats, scene, cfg)
    save_resolved_config(cfg, out)
    print(f"optimized {splats.count} splats over {len(views)} views")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    scenes = load_split(args.dataset, args.split)
    bg = _background(cfg)

    if args.source == "gt":
        def predict(scene):
            if scene.gt is None:
                raise DataError(f"scene {scene.scene_id} has no stored ground-truth splats")
            return scene.gt
    elif args.source == "background":
        def predict(scene):
            return GaussianSet(np.zeros((0, 14)))
    elif args.source == "teacher":
        teacher = _load_teacher(cfg, args.teacher_ckpt)
        from .teacher import teacher_predict

        def predict(scene):
            return teacher_predict(teacher, scene.source_image, scene.source_camera)
    elif args.source == "model":
        model, normalizer = _load_denoiser(cfg, args.ckpt)
        schedule = cfg.schedule.build()

        def predict(scene):
            import zlib

            scene_code = zlib.crc32(scene.scene_id.encode())
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(args.seed, scene_code)))
            return sample(model, normalizer, schedule, scene.source_image,
                          scene.source_camera, steps=args.steps, rng=rng)
    else:
        raise ConfigError(f"unknown eval source: {args.source}")

    result = metrics_mod.evaluate(predict, scenes, lambda s, c: render(s, c, bg).values,
                                  out_csv=out / "metrics.csv", threads=_threads(args))
    save_resolved_config(cfg, out)
    print(f"source view: psnr {result['source'].psnr:.3f} ssim {result['source'].ssim:.4f}")
    print(f"novel views: psnr {result['novel'].psnr:.3f} ssim {result['novel'].ssim:.4f}")
    return 0


def cmd_render(args) -> int:
    cfg = _resolve_config(args)
    splats = load_splats(_require(args.splats, "splat file"))
    scenes = load_split(args.dataset, args.split, with_gt=False)
    scene = _scene_by_id(scenes, args.scene)
    cam = scene.cameras[args.view]
    img = render(splats, cam, _background(cfg)).values
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_imgf(out.with_suffix(".imgf"), img)
    save_ppm(out.with_suffix(".ppm"), img)
    print(f"rendered view {args.view} of {scene.scene_id} to {out.with_suffix('.ppm')}")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="splatdiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--seed", type=int, default=0)
        if dataset:
            sp.add_argument("--dataset", required=True, help="dataset root")

    sp = sub.add_parser("gen-data", help="generate the toy multi-view dataset")
    common(sp, dataset=False)
    sp.add_argument("--image-size", type=int, default=None)
    sp.add_argument("--n-train", type=int, default=None)
    sp.add_argument("--n-val", type=int, default=None)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-teacher", help="train the deterministic splat predictor")
    common(sp)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.set_defaults(func=cmd_train_teacher)

    for stage in (1, 2):
        sp = sub.add_parser(f"train-stage{stage}",
                            help=f"stage {stage} training of the splat denoiser")
        common(sp)
        sp.add_argument("--teacher-ckpt", required=True)
        if stage == 2:
            sp.add_argument("--stage1-ckpt", required=True)
        sp.add_argument("--steps", type=int, default=None)
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--batch", type=int, default=None)
        sp.add_argument("--w-cyc", type=float, default=None)
        sp.set_defaults(func=cmd_train_stage1 if stage == 1 else cmd_train_stage2)

    sp = sub.add_parser("sample", help="draw splats for a scene with the trained model")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scene", default=None)
    sp.add_argument("--split", default="val")
    sp.add_argument("--steps", type=int, default=10)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("guide", help="sample with additional-view guidance")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scene", default=None)
    sp.add_argument("--split", default="val")
    sp.add_argument("--strength", type=float, default=None)
    sp.add_argument("--gs-optimize", action="store_true",
                    help="follow guidance with per-scene splat optimization")
    sp.add_argument("--gs-steps", type=int, default=None)
    sp.set_defaults(func=cmd_guide)

    sp = sub.add_parser("gs-optimize", help="2-view splat optimization from an initial set")
    common(sp)
    sp.add_argument("--init", required=True, help="initial .splt file")
    sp.add_argument("--scene", default=None)
    sp.add_argument("--split", default="val")
    sp.add_argument("--steps", type=int, default=300)
    sp.add_argument("--lr", type=float, default=5e-3)
    sp.set_defaults(func=cmd_gs_optimize)

    sp = sub.add_parser("eval", help="evaluate a splat source on a dataset split")
    common(sp)
    sp.add_argument("--source", required=True, choices=["gt", "background", "teacher", "model"])
    sp.add_argument("--split", default="val")
    sp.add_argument("--ckpt", default=None)
    sp.add_argument("--teacher-ckpt", default=None)
    sp.add_argument("--steps", type=int, default=10)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("render", help="render a splat file from a dataset camera")
    common(sp)
    sp.add_argument("--splats", required=True)
    sp.add_argument("--scene", default=None)
    sp.add_argument("--split", default="val")
    sp.add_argument("--view", type=int, default=0)
    sp.set_defaults(func=cmd_render)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SplatdiffError as e:
        print(f"ERROR:{e.category}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
