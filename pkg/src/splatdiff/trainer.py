"""Two-stage training: teacher-supervised bootstrapping, then unrolled
multi-step fine-tuning, both with cycle-consistency regularization.

Stage 1 draws a timestep uniformly, noises the frozen teacher's prediction,
and trains the denoiser single-step against the teacher splats in 3D plus a
rendered image loss, with gradients flowing only into the denoiser. Stage 2
draws timesteps above the critical threshold, unrolls the full deterministic
denoising chain to t = 0, and accumulates weighted per-substep rendering
losses (no 3D term by default), backpropagating through the whole chain.

The cycle branch renders the prediction at the supervision view, lifts that
image back to splats (through the frozen teacher in stage 1, through a fresh
multi-step denoising chain in stage 2), renders the lift at the source view,
and penalizes deviation from the source image.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion_space import (
    denormalize_tensor, frame_to_world_tensor, teacher_to_diffusion, world_to_frame,
)
from .errors import ConfigError, DataError, ShapeMismatchError
from .guidance import sample as ddim_sample
from .ioutil import atomic_write_text
from .metrics import psnr as psnr_metric, ssim as ssim_metric
from .nn.adam import AdamState, adam_step
from .nn.autodiff import Tensor, no_grad, zero_grads
from .nn.checkpoint import save_checkpoint
from .nn.denoiser import DenoiserModel
from .render import render, render_tensor
from .schedule import (
    NoiseSchedule, ddim_step, sample_timestep, step_loss_weights, substep_grid,
)
from .splats import GaussianSet, SplatNormalizer
from .teacher import TeacherModel


@dataclass
class TrainConfig:
    stage: int
    steps: int = 500
    batch_size: int = 8
    lr: float = 2e-4
    seed: int = 0
    t_policy: str = "uniform_full"
    unroll_steps: int = 10
    lambda_policy: str = "late_heavy"
    w_cyc: float = 1.0
    use_3dgs_loss: bool = True
    use_image_loss: bool = True
    use_cycle_loss: bool = True
    cycle_steps: int = 10
    start_at_T: bool = False
    eval_every: int = 0
    eval_scenes: int = 8
    eval_seed: int = 1234

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 2 and self.t_policy != "above_t_star":
            raise ConfigError("stage 2 requires the above_t_star timestep policy")


@dataclass
class LossReport:
    stage: int
    loss_3dgs: float
    loss_image: float        # weighted image term as it enters the total
    loss_cycle: float
    total: float
    per_step_render: list = field(default_factory=list)  # stage 2: unweighted per-substep means
    step_weights: list = field(default_factory=list)
    w_cyc: float = 1.0
    use_3dgs: bool = True
    use_image: bool = True
    use_cycle: bool = True

    def recompute_total(self) -> float:
        total = 0.0
        if self.use_3dgs:
            total += self.loss_3dgs
        if self.use_image:
            total += self.loss_image
        if self.use_cycle:
            total += self.w_cyc * self.loss_cycle
        return total

    def recompute_image_term(self) -> float:
        if self.stage == 2 and self.per_step_render:
            return float(np.dot(self.step_weights, self.per_step_render))
        return self.loss_image


def loss_3dgs(predicted, target) -> float:
    """Mean squared difference over all N*d entries, both in diffusion space."""
    predicted = predicted.params if isinstance(predicted, GaussianSet) else np.asarray(predicted)
    target = target.params if isinstance(target, GaussianSet) else np.asarray(target)
    if predicted.shape != target.shape:
        raise ShapeMismatchError(f"splat shapes differ: {predicted.shape} vs {target.shape}")
    return float(np.mean((predicted - target) ** 2))


def loss_image(splats: GaussianSet, cam, target, background=None) -> float:
    """Mean squared pixel difference between the rendered set and a target view."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (cam.height, cam.width, 3):
        raise ShapeMismatchError(f"target shape {target.shape} does not match camera image size")
    rendered = render(splats, cam, background).values
    return float(np.mean((rendered - target) ** 2))


def _mse(a: Tensor, b: Tensor) -> Tensor:
    return ((a - b) ** 2).mean()


class _Streams:
    """Independent rng streams so toggling one branch never shifts another."""

    def __init__(self, seed: int):
        ss = np.random.SeedSequence(seed)
        self.data, self.t, self.noise, self.view, self.cycle = (
            np.random.default_rng(s) for s in ss.spawn(5)
        )


def fit_normalizer(teacher: TeacherModel, scenes, chunk: int = 16) -> SplatNormalizer:
    """Standardization statistics over source-frame teacher outputs."""
    collected = []
    with no_grad():
        for lo in range(0, len(scenes), chunk):
            part = scenes[lo:lo + chunk]
            images = teacher.images_to_tensor([s.source_image for s in part])
            preds = teacher.predict_batch(images, [s.source_camera for s in part])
            for scene, pred in zip(part, preds):
                world = GaussianSet(pred.data.astype(np.float64))
                framed = world_to_frame(world, scene.source_camera)
                collected.append(framed.params)
    return SplatNormalizer.fit(collected)


def _teacher_diffusion_targets(teacher, batch, normalizer):
    with no_grad():
        images = teacher.images_to_tensor([s.source_image for s in batch])
        preds = teacher.predict_batch(images, [s.source_camera for s in batch])
    return np.stack([
        teacher_to_diffusion(GaussianSet(p.data.astype(np.float64)), s.source_camera, normalizer)
        for p, s in zip(preds, batch)
    ])


def _prediction_to_world(shat_row: Tensor, cam, normalizer) -> Tensor:
    return frame_to_world_tensor(denormalize_tensor(shat_row, normalizer), cam)


def stage1_step(teacher: TeacherModel, model: DenoiserModel, normalizer: SplatNormalizer,
                schedule: NoiseSchedule, batch, cfg: TrainConfig, adam: AdamState,
                streams: _Streams, background=None) -> LossReport:
    if background is None:
        background = np.ones(3)
    b = len(batch)
    s0_norm = _teacher_diffusion_targets(teacher, batch, normalizer).astype(model.dtype)
    t_arr = np.array([sample_timestep(schedule, cfg.t_policy, streams.t) for _ in range(b)])
    eps = streams.noise.standard_normal(s0_norm.shape).astype(model.dtype)
    coef_a = np.array([schedule.signal_noise(t)[0] for t in t_arr], dtype=model.dtype)[:, None, None]
    coef_b = np.array([schedule.signal_noise(t)[1] for t in t_arr], dtype=model.dtype)[:, None, None]
    s_t = coef_a * s0_norm + coef_b * eps

    images = model.images_to_tensor([s.source_image for s in batch])
    encoded = model.encode(images)
    shat = model.predict_x0(Tensor(s_t), t_arr, encoded)

    views = [int(streams.view.choice(s.target_indices)) for s in batch]

    l3d = _mse(shat, Tensor(s0_norm)) if cfg.use_3dgs_loss else None

    img_losses, cyc_losses = [], []
    need_render = cfg.use_image_loss or (cfg.use_cycle_loss and cfg.w_cyc != 0.0)
    for i, scene in enumerate(batch):
        if not need_render:
            break
        vi = views[i]
        world = _prediction_to_world(shat[i], scene.source_camera, normalizer)
        rendered_tgt = render_tensor(world, scene.cameras[vi], background)
        if cfg.use_image_loss:
            img_losses.append(_mse(rendered_tgt, Tensor(scene.images[vi].astype(model.dtype))))
        if cfg.use_cycle_loss and cfg.w_cyc != 0.0:
            # lift the rendered target view back through the frozen teacher
            lift_in = rendered_tgt.transpose((2, 0, 1)).reshape(1, 3, rendered_tgt.shape[0], rendered_tgt.shape[1])
            lifted = teacher.predict_batch(lift_in, [scene.cameras[vi]])[0]
            back = render_tensor(lifted, scene.source_camera, background)
            cyc_losses.append(_mse(back, Tensor(scene.source_image.astype(model.dtype))))

    terms = []
    if l3d is not None:
        terms.append(l3d)
    limg = _batch_mean(img_losses)
    if limg is not None:
        terms.append(limg)
    lcyc = _batch_mean(cyc_losses)
    if lcyc is not None:
        terms.append(float(cfg.w_cyc) * lcyc)
    if not terms:
        raise ConfigError("stage 1 has no enabled loss terms")
    total = terms[0]
    for term in terms[1:]:
        total = total + term

    total.backward()
    adam_step(adam, model.parameters())
    zero_grads(model.parameters())
    zero_grads(teacher.parameters())

    return LossReport(
        stage=1,
        loss_3dgs=float(l3d.data) if l3d is not None else 0.0,
        loss_image=float(limg.data) if limg is not None else 0.0,
        loss_cycle=float(lcyc.data) if lcyc is not None else 0.0,
        total=float(total.data),
        w_cyc=cfg.w_cyc,
        use_3dgs=cfg.use_3dgs_loss,
        use_image=cfg.use_image_loss,
        use_cycle=cfg.use_cycle_loss and cfg.w_cyc != 0.0 and bool(cyc_losses),
    )


def _batch_mean(losses):
    if not losses:
        return None
    acc = losses[0]
    for l in losses[1:]:
        acc = acc + l
    return acc / float(len(losses))


def _unrolled_chain(model, schedule, encoded_slice, s_start, grid):
    """Run the denoise + step chain, returning per-substep clean predictions."""
    s = Tensor(s_start)
    preds = []
    for t, t_prev in zip(grid[:-1], grid[1:]):
        shat = model.predict_x0(_as_batch1(s), np.array([t]), encoded_slice)[0]
        preds.append((t, shat))
        s = ddim_step(schedule, s, shat, t, t_prev)
    return preds, s


def _as_batch1(s):
    if isinstance(s, Tensor) and s.ndim == 2:
        return s.reshape(1, *s.shape)
    return s


def stage2_step(teacher: TeacherModel, model: DenoiserModel, normalizer: SplatNormalizer,
                schedule: NoiseSchedule, batch, cfg: TrainConfig, adam: AdamState,
                streams: _Streams, background=None, lam_override=None) -> LossReport:
    if background is None:
        background = np.ones(3)
    b = len(batch)
    s0_norm = _teacher_diffusion_targets(teacher, batch, normalizer).astype(model.dtype)
    t_arr = np.array([
        schedule.T if cfg.start_at_T else sample_timestep(schedule, cfg.t_policy, streams.t)
        for _ in range(b)
    ])
    eps = streams.noise.standard_normal(s0_norm.shape).astype(model.dtype)

    images = model.images_to_tensor([s.source_image for s in batch])
    fmap, glob = model.encode(images)

    lam = lam_override if lam_override is not None else step_loss_weights(cfg.unroll_steps, cfg.lambda_policy)

    sample_totals = []
    l3d_vals, limg_vals, lcyc_vals = [], [], []
    step_means = np.zeros(cfg.unroll_steps)
    for i, scene in enumerate(batch):
        t0 = int(t_arr[i])
        a, bb = schedule.signal_noise(t0)
        s_start = (a * s0_norm[i] + bb * eps[i]).astype(model.dtype)
        grid = substep_grid(t0, cfg.unroll_steps)
        if len(grid) != cfg.unroll_steps + 1:
            raise ConfigError(
                f"substep grid from t={t0} has {len(grid) - 1} steps; "
                f"need t_star >= unroll_steps for a full grid"
            )
        encoded_slice = (fmap[i:i + 1], glob[i:i + 1])
        preds, _ = _unrolled_chain(model, schedule, encoded_slice, s_start, grid)

        vi = int(streams.view.choice(scene.target_indices))
        target = Tensor(scene.images[vi].astype(model.dtype))
        weighted = None
        for k, (t_k, shat_k) in enumerate(preds):
            if lam[k] == 0.0:
                continue  # zero weight contributes exactly nothing, value and gradient
            world_k = _prediction_to_world(shat_k, scene.source_camera, normalizer)
            mse_k = _mse(render_tensor(world_k, scene.cameras[vi], background), target)
            step_means[k] += float(mse_k.data) / b
            contrib = float(lam[k]) * mse_k
            weighted = contrib if weighted is None else weighted + contrib
        parts = []
        if cfg.use_image_loss and weighted is not None:
            parts.append(weighted)
            limg_vals.append(float(weighted.data))

        shat_final = preds[-1][1]
        if cfg.use_3dgs_loss:
            l3d_i = _mse(shat_final, Tensor(s0_norm[i]))
            parts.append(l3d_i)
            l3d_vals.append(float(l3d_i.data))

        if cfg.use_cycle_loss and cfg.w_cyc != 0.0:
            world_final = _prediction_to_world(shat_final, scene.source_camera, normalizer)
            xhat = render_tensor(world_final, scene.cameras[vi], background)
            lift_in = xhat.transpose((2, 0, 1)).reshape(1, 3, xhat.shape[0], xhat.shape[1])
            enc_cycle = model.encode(lift_in)
            s_noise = streams.cycle.standard_normal(s0_norm[i].shape).astype(model.dtype)
            cyc_grid = substep_grid(schedule.T, cfg.cycle_steps)
            cyc_preds, _ = _unrolled_chain(model, schedule, enc_cycle, s_noise, cyc_grid)
            s_tilde = cyc_preds[-1][1]
            world_tilde = _prediction_to_world(s_tilde, scene.cameras[vi], normalizer)
            back = render_tensor(world_tilde, scene.source_camera, background)
            lcyc_i = _mse(back, Tensor(scene.source_image.astype(model.dtype)))
            parts.append(float(cfg.w_cyc) * lcyc_i)
            lcyc_vals.append(float(lcyc_i.data))

        if not parts:
            raise ConfigError("stage 2 has no enabled loss terms")
        tot = parts[0]
        for p in parts[1:]:
            tot = tot + p
        sample_totals.append(tot)

    total = _batch_mean(sample_totals)
    total.backward()
    adam_step(adam, model.parameters())
    zero_grads(model.parameters())
    zero_grads(teacher.parameters())

    return LossReport(
        stage=2,
        loss_3dgs=float(np.mean(l3d_vals)) if l3d_vals else 0.0,
        loss_image=float(np.mean(limg_vals)) if limg_vals else 0.0,
        loss_cycle=float(np.mean(lcyc_vals)) if lcyc_vals else 0.0,
        total=float(total.data),
        per_step_render=list(step_means),
        step_weights=list(lam),
        w_cyc=cfg.w_cyc,
        use_3dgs=cfg.use_3dgs_loss,
        use_image=cfg.use_image_loss,
        use_cycle=cfg.use_cycle_loss and cfg.w_cyc != 0.0,
    )


def heldout_metrics(model, normalizer, schedule, scenes, steps, eval_seed, background=None):
    """Mean PSNR/SSIM of sampled splats over held-out views of val scenes."""
    ps, ss_ = [], []
    for k, scene in enumerate(scenes):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(eval_seed, k)))
        splats = ddim_sample(model, normalizer, schedule, scene.source_image,
                             scene.source_camera, steps=steps, rng=rng)
        for vi in scene.eval_indices:
            img = render(splats, scene.cameras[vi], background).values
            ps.append(psnr_metric(img, scene.images[vi]))
            ss_.append(ssim_metric(img, scene.images[vi]))
    return float(np.mean(ps)), float(np.mean(ss_))


def train(stage: int, teacher: TeacherModel, model: DenoiserModel, normalizer: SplatNormalizer,
          schedule: NoiseSchedule, train_scenes, val_scenes, cfg: TrainConfig,
          out_dir=None, digest: str = "", background=None, on_log=None):
    """Run one training stage; optionally persist checkpoint + metric log.

    Deterministic given cfg.seed. The teacher is frozen (and asserted
    unchanged by tests); checkpoints and the CSV log are written atomically.
    """
    if stage != cfg.stage:
        raise ConfigError(f"stage argument {stage} disagrees with config stage {cfg.stage}")
    if not train_scenes:
        raise DataError("empty training split")
    teacher.freeze()
    streams = _Streams(cfg.seed)
    adam = AdamState(lr=cfg.lr)
    step_fn = stage1_step if stage == 1 else stage2_step
    rows = []
    t_start = time.monotonic()
    for step in range(cfg.steps):
        idx = streams.data.choice(len(train_scenes), size=min(cfg.batch_size, len(train_scenes)),
                                  replace=False)
        batch = [train_scenes[i] for i in idx]
        report = step_fn(teacher, model, normalizer, schedule, batch, cfg, adam, streams,
                         background=background)
        heldout = ("", "")
        if cfg.eval_every > 0 and val_scenes and (step + 1) % cfg.eval_every == 0:
            heldout = heldout_metrics(model, normalizer, schedule, val_scenes[:cfg.eval_scenes],
                                      steps=10, eval_seed=cfg.eval_seed, background=background)
        wall_ms = int((time.monotonic() - t_start) * 1000)
        rows.append([step, stage, report.loss_3dgs, report.loss_image, report.loss_cycle,
                     report.total, heldout[0], heldout[1], wall_ms])
        if on_log is not None:
            on_log(step, report)
    if out_dir is not None:
        out_dir = Path(out_dir)
        blobs = dict(model.named_parameters())
        blobs["normalizer.mean"] = normalizer.mean
        blobs["normalizer.std"] = normalizer.std
        save_checkpoint(out_dir / f"stage{stage}.ckpt", digest, blobs)
        write_train_log(out_dir / f"stage{stage}_log.csv", rows)
    return model, rows


def write_train_log(path, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "stage", "loss_3dgs", "loss_image", "loss_cycle", "total",
                     "heldout_psnr", "heldout_ssim", "wall_ms"])
    for row in rows:
        writer.writerow([_fmt(x) for x in row])
    atomic_write_text(Path(path), buf.getvalue())


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x
