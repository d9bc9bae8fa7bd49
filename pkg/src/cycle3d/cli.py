"""Command line entry point: ``cycle3d <subcommand> ...``.

Every subcommand is deterministic given its flags.  Contract violations end
the process with a one-line ``cycle3d <cmd>: error: ...`` message on stderr
and exit status 2; a failed gradient check exits with status 1.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .cyclegen import make_cycle_pairs
from .exceptions import Cycle3DError
from .frames import RgbdFrame
from .geometry import Intrinsics, Pose
from .metrics import psnr, ssim
from .scenes import SceneSpec, ground_truth_view, make_scene
from .trainer import TrainConfig

EXIT_FAILED_CHECK = 1
EXIT_ERROR = 2
SCENE_TRAJECTORY_STEP = 1.0 / 16.0
SCENE_TRAJECTORY_LEN = 5


class CliError(Cycle3DError):
    pass


def _load_frame(rgb, depth, invert_depth: bool) -> RgbdFrame:
    return io.load_rgbd(rgb, depth, invert_depth=invert_depth)


def _save_masked(out: Path, stem: str, masked) -> None:
    io.save_png(out / f"{stem}.png", masked.rgb)
    io.save_mask_png(out / f"mask_{stem}.png", masked.mask)
    io.save_pfm(out / f"depth_{stem}.pfm", masked.depth)


# ---------------------------------------------------------------- subcommands

def cmd_warp(a) -> int:
    from .warp import forward_warp

    frame = _load_frame(a.rgb, a.depth, a.invert_depth)
    k, poses = io.load_trajectory(a.traj)
    if not 0 <= a.pose_index < len(poses):
        raise CliError(f"pose index {a.pose_index} outside trajectory of {len(poses)} poses")
    if (k.height, k.width) != frame.shape:
        raise CliError(f"trajectory intrinsics are {k.width}x{k.height}, frame is {frame.shape[1]}x{frame.shape[0]}")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    r = forward_warp(frame, poses[a.pose_index], k)
    io.save_png(out / "rgb.png", r.rgb)
    io.save_mask_png(out / "mask.png", r.mask)
    io.save_pfm(out / "depth.pfm", r.depth)
    return 0


def _matched_inputs(rgb_dir: Path, depth_dir: Path) -> list:
    rgbs = sorted(rgb_dir.glob("*.png"))
    if not rgbs:
        raise CliError(f"no PNG files in {rgb_dir}")
    pairs = []
    for p in rgbs:
        d = depth_dir / f"{p.stem}.pfm"
        if not d.exists():
            raise CliError(f"missing depth map {d} for {p.name}")
        pairs.append((p, d))
    return pairs


def cmd_cyclegen(a) -> int:
    files = _matched_inputs(Path(a.rgb_dir), Path(a.depth_dir))
    frames = [_load_frame(r, d, a.invert_depth) for r, d in files]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise CliError(f"input frames differ in size: {sorted(shapes)}")
    h, w = frames[0].shape
    k = Intrinsics.default(w, h)
    max_rot = math.radians(a.max_rot)
    pairs = make_cycle_pairs(frames, k, a.n, a.seed, a.max_trans, max_rot, [a.prompt_id] * len(frames))
    cfg = {"seed": a.seed, "n": a.n, "max_trans": a.max_trans, "max_rot_deg": a.max_rot,
           "invert_depth": a.invert_depth, "prompt_id": a.prompt_id, "intrinsics": k.to_dict()}
    chash = io.config_hash(cfg)
    out = Path(a.out)
    for i, pair in enumerate(pairs):
        src = files[i % len(files)][0].name
        io.save_pair(out / f"pair_{i:05d}", pair, {"seed": a.seed, "index": i, "source": src,
                                                   "config": cfg, "config_hash": chash})
    return 0


def cmd_scene(a) -> int:
    spec = SceneSpec(a.kind, a.size, seed=a.seed)
    k = spec.intrinsics()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    frame = make_scene(spec, k)
    io.save_png(out / "rgb.png", frame.rgb)
    io.save_pfm(out / "depth.pfm", frame.depth)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True))
    # a short lateral dolly; gt/frame_000 is the source view and frame_i the view at pose i - 1,
    # matching the frame numbering of `sample`
    poses = [Pose(np.eye(3), np.array([i * SCENE_TRAJECTORY_STEP, 0.0, 0.0])) for i in range(1, SCENE_TRAJECTORY_LEN + 1)]
    io.save_trajectory(out / "trajectory.json", k, poses)
    gt = out / "gt"
    gt.mkdir(exist_ok=True)
    for i, p in enumerate([Pose.identity()] + poses):
        _save_masked(gt, f"frame_{i:03d}", ground_truth_view(spec, p, k))
    return 0


def cmd_train(a) -> int:
    from .net.unet import UNetConfig
    from .trainer import train_loop

    # with --condition object-mask the trainer re-masks each pair's target
    pairs = io.load_pairs(a.pairs)
    cfg = TrainConfig(steps=a.steps, seed=a.seed, condition=a.condition, batch_size=a.batch_size,
                      learning_rate=a.lr, checkpoint_every=a.checkpoint_every, checkpoint_path=a.ckpt)
    net_cfg = UNetConfig(n_prompts=max(2, max(p.prompt_id for p in pairs)), head_steps=cfg.T)
    params = opt = ema = None
    start = 0
    if a.resume:
        ck = io.load_checkpoint(a.ckpt)
        params, opt, ema, start, net_cfg = ck.params, ck.opt_state, ck.ema_params, ck.step, ck.net_config
    res = train_loop(pairs, cfg, net_cfg, params, opt, start, ema_params=ema)
    io.save_checkpoint(a.ckpt, res, extra={"train": {k: v for k, v in vars(a).items() if k != "func"}})
    losses = [r["loss"] for r in res.loss_trace]
    if losses:
        print(f"trained steps {start}..{res.step - 1}: first loss {losses[0]:.4f}, last loss {losses[-1]:.4f}")
    return 0


def cmd_sample(a) -> int:
    from .sampler import SamplerConfig, sample_video

    model = io.load_checkpoint(a.ckpt)
    start = _load_frame(a.start, a.depth, a.invert_depth)
    k, poses = io.load_trajectory(a.traj)
    if (k.height, k.width) != start.shape:
        raise CliError(f"trajectory intrinsics are {k.width}x{k.height}, frame is {start.shape[1]}x{start.shape[0]}")
    cfg = SamplerConfig(guidance_scale=a.scale, seed=a.seed, composite=a.composite, prompt_id=a.prompt_id)
    roll = sample_video(model, start, poses, k, cfg)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (rgb, m, d) in enumerate(zip(roll.frames, roll.masks, roll.depths)):
        io.save_png(out / f"frame_{i:03d}.png", rgb)
        io.save_mask_png(out / f"mask_frame_{i:03d}.png", m)
        io.save_pfm(out / f"depth_frame_{i:03d}.pfm", d)
    return 0


def _is_frame(p: Path) -> bool:
    return p.suffix == ".png" and not p.name.startswith("mask")


def cmd_eval(a) -> int:
    pred, gt = Path(a.pred), Path(a.gt)
    names = sorted(p.name for p in pred.iterdir() if _is_frame(p) and (gt / p.name).exists())
    if not names:
        raise CliError(f"no PNG frames common to {pred} and {gt}")
    frames = []
    for n in names:
        x, y = io.load_png(pred / n), io.load_png(gt / n)
        if x.shape != y.shape:
            raise CliError(f"{n}: prediction {x.shape} vs ground truth {y.shape}")
        rec = {"name": n, "psnr": psnr(x, y), "ssim": ssim(x, y)}
        if a.mask:
            mpath = Path(a.mask) / f"mask_{n}"
            if not mpath.exists():
                mpath = Path(a.mask) / n
            if mpath.exists():
                m = io.load_mask_png(mpath)
                rec["psnr_masked"] = psnr(x, y, m) if m.any() else None
        frames.append(rec)
    report = {"frames": frames, "mean_psnr": float(np.mean([f["psnr"] for f in frames])),
              "mean_ssim": float(np.mean([f["ssim"] for f in frames]))}
    masked = [f["psnr_masked"] for f in frames if f.get("psnr_masked") is not None]
    if masked:
        report["mean_psnr_masked"] = float(np.mean(masked))
    Path(a.report).write_text(json.dumps(report, indent=1))
    print(f"{len(frames)} frames: mean PSNR {report['mean_psnr']:.2f} dB, mean SSIM {report['mean_ssim']:.4f}")
    return 0


def cmd_gradcheck(a) -> int:
    from .net.gradcheck import REL_TOL, run_gradcheck_suite

    results = run_gradcheck_suite(a.seed, n_params=a.n_params)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.n_checked} params, "
              f"max rel error {r.max_rel_error:.3e} at {r.worst_param}")
    worst = max(r.max_rel_error for r in results)
    ok = all(r.passed for r in results)
    print(f"gradcheck {'passed' if ok else 'FAILED'}: max relative error {worst:.3e} (tolerance {REL_TOL:g})")
    return 0 if ok else EXIT_FAILED_CHECK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cycle3d", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("warp", help="forward-warp one RGBD frame to a trajectory pose")
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--pose-index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--invert-depth", action="store_true", help="inputs are disparity; use 1/max(d, 1e-6)")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("cyclegen", help="build cycle-rendered training pairs")
    p.add_argument("--rgb-dir", required=True)
    p.add_argument("--depth-dir", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-trans", type=float, default=None, help="default: 5%% of each frame's median depth")
    p.add_argument("--max-rot", type=float, default=2.0, help="degrees")
    p.add_argument("--prompt-id", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--invert-depth", action="store_true")
    p.set_defaults(func=cmd_cyclegen)

    p = sub.add_parser("scene", help="write a synthetic scene with exact trajectory views")
    p.add_argument("--kind", default="two-plane", choices=("constant-plane", "two-plane"))
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scene)

    p = sub.add_parser("train", help="train the denoiser on a pair directory")
    p.add_argument("--pairs", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--condition", choices=("cycle", "object-mask"), default="cycle")
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint at --ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="autoregressive render-and-inpaint rollout")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--start", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--prompt-id", type=int, default=0)
    p.add_argument("--composite", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--invert-depth", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="PSNR/SSIM of predicted frames against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the network gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-params", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (Cycle3DError, ValueError, OSError, KeyError, IndexError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"cycle3d {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
