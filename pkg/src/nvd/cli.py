"""Command-line surface for the decomposition pipeline.

Every subcommand is a thin wrapper over the library; numeric results are
printed as space-separated key=value lines. Exit codes: 0 success, 1
runtime failure (diagnostic on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import atlas as atlas_mod
from . import dataio, hypernet, model, trainer
from .autodiff import Tensor
from .trainer import TrainConfig


def _load_config(path, **overrides) -> TrainConfig:
    config = TrainConfig.from_json(path) if path else TrainConfig()
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    config.__post_init__()
    return config


def cmd_synth(args) -> int:
    vx, vy = (int(v) for v in args.velocity.split(","))
    spec = dataio.SynthSceneSpec(
        height=args.size, width=args.size, n_frames=args.frames,
        background_seed=args.seed, sprite_seed=args.seed + 1,
        sprite_size=max(4, args.size // 4),
        start_row=args.size // 8, start_col=args.size // 8,
        velocity=(vx, vy))
    ds = dataio.synth_generate(spec, args.out)
    print(f"video={ds.id} frames={ds.n_frames} height={ds.height} "
          f"width={ds.width}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config, seed=args.seed)
    config.videos = [args.video]
    t = trainer.train_meta(config, out_path=args.out, log_path=args.log)
    scores = {vid: trainer.evaluate_psnr(t.arch, t.params_for(vid),
                                         t.datasets[vid])
              for vid in t.video_ids}
    for vid, score in scores.items():
        print(f"video={vid} psnr={score:.4f}")
    print(f"checkpoint={args.out} iterations={t.iteration}")
    return 0


def cmd_train_meta(args) -> int:
    config = _load_config(args.config, seed=args.seed,
                          embedding_mode=args.embed, mrhe_mode=args.mrhe)
    config.videos = args.videos.split(",")
    t = trainer.train_meta(config, out_path=args.out, log_path=args.log)
    for vid in t.video_ids:
        score = trainer.evaluate_psnr(t.arch, t.params_for(vid),
                                      t.datasets[vid])
        print(f"video={vid} psnr={score:.4f}")
    print(f"checkpoint={args.out} iterations={t.iteration}")
    return 0


def cmd_finetune(args) -> int:
    ds = dataio.load_video_dataset(args.video)
    meta_config = trainer.load_checkpoint(args.meta).config
    config = _load_config(args.config, seed=args.seed)
    if args.config is None:
        config.arch = meta_config.arch
        config.hyper = meta_config.hyper
    config.videos = [args.video]
    t = trainer.finetune_nvd(args.meta, ds, config, scratch=args.scratch,
                             log_path=args.log)
    final = t.run()
    t.save(args.out)
    init = "scratch" if args.scratch else "metamodel"
    print(f"video={ds.id} init={init} psnr={final:.4f}")
    print(f"checkpoint={args.out} iterations={t.iteration}")
    return 0


def _load_nvd(ckpt_path):
    ckpt = trainer.load_checkpoint(ckpt_path)
    if ckpt.mode != "nvd":
        raise trainer.CheckpointError(
            f"{ckpt_path}: expected an nvd checkpoint, found {ckpt.mode!r}")
    arch = model.ArchSpec.from_dict(ckpt.header["arch"])
    params = {name: Tensor.const(arr)
              for name, arr in trainer.nvd_params_from_checkpoint(ckpt).items()}
    return ckpt, arch, params


def cmd_decompose(args) -> int:
    ckpt, arch, params = _load_nvd(args.ckpt)
    ds = dataio.load_video_dataset(args.video)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = (ds.n_frames, ds.height, ds.width)
    recon = atlas_mod.reconstruct_video(arch, params, dims)
    dataio.save_tensor(out / "reconstruction.nvdt", recon)
    coords = model.normalize_coords(
        *[g.ravel() for g in np.meshgrid(
            np.arange(dims[0]), np.arange(dims[1]), np.arange(dims[2]),
            indexing="ij")], *dims)
    alpha = np.empty((coords.shape[0], arch.n_foreground))
    residuals = {layer: np.empty(coords.shape[0])
                 for layer in model.layer_ids(arch)}
    for lo in range(0, coords.shape[0], 8192):
        part = coords[lo : lo + 8192]
        alpha[lo : lo + part.shape[0]] = model.alpha_value(params, part).data
        for layer in residuals:
            residuals[layer][lo : lo + part.shape[0]] = \
                model.residual_coeff(arch, params, layer, part).data[:, 0]
    dataio.save_tensor(out / "alpha.nvdt",
                       alpha.reshape(dims + (arch.n_foreground,)))
    for layer, arr in residuals.items():
        dataio.save_tensor(out / f"residual_{layer}.nvdt", arr.reshape(dims))
    for layer in model.layer_ids(arch):
        a = atlas_mod.render_atlas(arch, params, layer, g=args.atlas_size)
        atlas_mod.save_atlas_png(a, out / f"atlas_{layer}.png",
                                 ckpt.header["config_digest"])
    score = atlas_mod.psnr(recon, ds.frames)
    print(f"video={ds.id} psnr={score:.4f} out={out}")
    return 0


def cmd_render_atlas(args) -> int:
    ckpt, arch, params = _load_nvd(args.ckpt)
    a = atlas_mod.render_atlas(arch, params, args.layer, g=args.size)
    atlas_mod.save_atlas_png(a, args.out, ckpt.header["config_digest"])
    print(f"layer={args.layer} size={args.size} out={args.out}")
    return 0


def cmd_apply_edit(args) -> int:
    ckpt, arch, params = _load_nvd(args.ckpt)
    ds = dataio.load_video_dataset(args.video)
    edited_pixels = atlas_mod.load_atlas_png(args.atlas, layer=args.layer)
    base = atlas_mod.render_atlas(arch, params, args.layer,
                                  g=edited_pixels.resolution)
    edit = atlas_mod.EditedAtlas(base=base, pixels=edited_pixels.pixels)
    dims = (ds.n_frames, ds.height, ds.width)
    frames = atlas_mod.recompose_video(arch, params, dims,
                                       edits={args.layer: edit})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image
    for t in range(frames.shape[0]):
        img = np.clip(np.round(frames[t] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(out / f"edit_{t:04d}.png")
    print(f"video={ds.id} frames={frames.shape[0]} out={out}")
    return 0


def cmd_eval(args) -> int:
    ckpt, arch, params = _load_nvd(args.ckpt)
    ds = dataio.load_video_dataset(args.video)
    dims = (ds.n_frames, ds.height, ds.width)
    recon = atlas_mod.reconstruct_video(arch, params, dims)
    p = atlas_mod.psnr(recon, ds.frames)
    s = atlas_mod.video_ssim(recon, ds.frames)
    print(f"psnr={p:.4f} ssim={s:.4f}")
    return 0


def cmd_compress_embed(args) -> int:
    features = dataio.load_tensor(args.features)
    emb, final_l1 = hypernet.compress_embedding(
        features, epochs=args.epochs, seed=args.seed)
    dataio.save_tensor(args.out, emb)
    print(f"out={args.out} l1={final_l1:.6g} dim={emb.size}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    failures = run_gradcheck(seed=args.seed, verbose=True)
    print(f"failures={failures}")
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nvd",
        description="Layered neural video decomposition and editing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic video dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--velocity", default="2,1")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="single-video metamodel training")
    p.add_argument("--config")
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-meta", help="multi-video metamodel training")
    p.add_argument("--config")
    p.add_argument("--videos", required=True, help="comma-separated dirs")
    p.add_argument("--out", required=True)
    p.add_argument("--embed", choices=trainer.EMBEDDING_MODES)
    p.add_argument("--mrhe", choices=trainer.MRHE_MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train_meta)

    p = sub.add_parser("finetune", help="fine-tune an NVD from a metamodel")
    p.add_argument("--meta", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--scratch", action="store_true",
                   help="random-init baseline instead of metamodel init")
    p.add_argument("--seed", type=int)
    p.add_argument("--log")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("decompose", help="write layers, maps and atlases")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--atlas-size", type=int, default=256)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("render-atlas", help="render one layer's texture atlas")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", required=True, choices=["b", "f"])
    p.add_argument("--size", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_atlas)

    p = sub.add_parser("apply-edit", help="recompose with an edited atlas")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", required=True, choices=["b", "f"])
    p.add_argument("--atlas", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_apply_edit)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a video")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compress-embed", help="compress a feature matrix")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compress_embed)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
