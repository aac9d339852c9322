"""``s3f`` command line: scene generation, training, reconstruction and applications."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .config import Config, describe, load_config

log = logging.getLogger("s3f")

COMMANDS = ("gen-scenes", "train", "reconstruct", "render", "repose", "relight", "edit", "eval", "gradcheck")


class CommandError(RuntimeError):
    pass


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise CommandError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise CommandError(f"missing value for --{key}")
            val = extra[i + 1]
            i += 1
        out[key.replace("-", "_")] = val
        i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="s3f",
        description="Body-anchored 3D feature reconstruction on procedural capsule scenes.",
        epilog="config keys (override with --key=value):\n" + describe(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", help="key=value config file")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="write procedural scene bundles")
    g.add_argument("--count", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", default=None)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--scenes", default=None)
    t.add_argument("--out", default=None)

    for name, helptext in (
        ("reconstruct", "forward pass + marching cubes + texturing to PLY"),
        ("repose", "reconstruct in the pose of another scene"),
        ("relight", "reconstruct with the illumination code of another image"),
        ("edit", "swap features inside a mask with a donor reconstruction"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--scene", required=True)
        s.add_argument("--out", required=True, help="output .ply")
        s.add_argument("--resolution", type=int, default=None)
        if name == "repose":
            s.add_argument("--target", required=True, help="scene whose body pose to use")
        if name == "relight":
            s.add_argument("--light", required=True, help="scene whose image provides the illumination code")
        if name == "edit":
            s.add_argument("--donor", required=True, help="scene providing the donor features")
            s.add_argument("--mask", required=True, help="PGM clothing mask in the scene's image frame")

    r = sub.add_parser("render", help="novel-view volume rendering to PPM")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--azimuth", type=float, default=np.pi, help="radians")
    r.add_argument("--elevation", type=float, default=0.0, help="radians")

    e = sub.add_parser("eval", help="metrics CSV over a held-out scene set")
    e.add_argument("--checkpoint", default=None, help="omit to score the zero-init model")
    e.add_argument("--pred", default=None, help="score saved <scene_id>.ply predictions from this directory instead of a model")
    e.add_argument("--scenes", required=True)
    e.add_argument("--out", required=True, help="metrics CSV")
    e.add_argument("--baseline", action="store_true", help="add unclothed-body rows")
    e.add_argument("--multiview", action="store_true", help="add back-view 1-view vs 2-view rows")
    e.add_argument("--resolution", type=int, default=None)

    sub.add_parser("gradcheck", help="run the gradient suite; nonzero exit on failure")
    return p


def _model(cfg: Config, checkpoint):
    from .model import S3FModel
    from .train import load_model

    if checkpoint is None:
        return S3FModel(cfg)
    return load_model(checkpoint)[0]


def _scene(path, with_gt=False):
    from .scenes import load_scene

    return load_scene(path, with_gt=with_gt)


def _finite_mesh(mesh):
    if mesh.empty:
        raise CommandError("reconstruction produced an empty mesh")
    for a in (mesh.vertices, mesh.albedo, mesh.shaded):
        if a is not None and not np.isfinite(a).all():
            raise CommandError("non-finite values in the reconstruction")


def cmd_gen_scenes(cfg: Config, args) -> int:
    from .scenes import gen_scene, save_scene

    count = args.count if args.count is not None else cfg.n_scenes
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out or cfg.scenes_dir)
    made = []
    try:
        for i in range(count):
            bundle = gen_scene(seed * 1000 + i, size=cfg.image_size)
            made.append(save_scene(bundle, out))
            print(f"wrote {made[-1]}")
    except BaseException:
        for d in made:
            shutil.rmtree(d, ignore_errors=True)
        raise
    return 0


def _write_csv(path, rows, columns):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    tmp.replace(path)


def cmd_train(cfg: Config, args) -> int:
    from . import plots
    from .scenes import list_scenes, load_scene
    from .train import train_loop

    scenes = [load_scene(p) for p in list_scenes(args.scenes or cfg.scenes_dir)]
    if not scenes:
        raise CommandError("no scenes found")
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    every = max(1, cfg.steps // 20)
    t0 = time.perf_counter()
    res = train_loop(
        cfg, scenes, out, evaluate_ratio=True,
        progress=lambda r: print(f"step {r['step']:6d}  total {r['total']:10.4f}  {r['seconds']:.2f}s", flush=True)
        if r["step"] % every == 0 else None,
    )
    seconds = time.perf_counter() - t0
    plots.loss_curves(res.history, out / "losses.png")
    summary = {"steps": len(res.history), "seconds": seconds, "initial": res.initial_eval, "final": res.final_eval}
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print("----- train summary -----")
    print(f"eval_loss_initial,{res.initial_eval:.6f}")
    print(f"eval_loss_final,{res.final_eval:.6f}")
    print(f"train_seconds,{seconds:.1f}")
    print(f"checkpoint,{res.checkpoint}")
    print("-------------------------")
    return 0


def _observe(model, bundle, body=None):
    return model.observe(bundle.rgb, bundle.mask, body or bundle.body(), bundle.camera)


def _reconstruct_to(model, obs, out, resolution, code=None):
    from .extract import reconstruct, texture_mesh

    mesh = texture_mesh(model, reconstruct(model, obs, resolution=resolution, pad=model.cfg.mc_pad), obs, code=code)
    _finite_mesh(mesh)
    mesh.save_ply(out)
    print(f"wrote {out} ({len(mesh.vertices)} vertices, {len(mesh.faces)} faces)")
    return mesh


def cmd_reconstruct(cfg, args) -> int:
    model = _model(cfg, args.checkpoint)
    obs = _observe(model, _scene(args.scene))
    _reconstruct_to(model, obs, args.out, args.resolution or model.cfg.mc_resolution)
    return 0


def cmd_repose(cfg, args) -> int:
    from .extract import repose_reconstruction

    model = _model(cfg, args.checkpoint)
    obs = _observe(model, _scene(args.scene))
    target = _scene(args.target).body()
    _reconstruct_to(model, repose_reconstruction(obs, target), args.out, args.resolution or model.cfg.mc_resolution)
    return 0


def cmd_relight(cfg, args) -> int:
    model = _model(cfg, args.checkpoint)
    obs = _observe(model, _scene(args.scene))
    light_obs = _observe(model, _scene(args.light))
    _reconstruct_to(model, obs, args.out, args.resolution or model.cfg.mc_resolution, code=light_obs.code.detach())
    return 0


def cmd_edit(cfg, args) -> int:
    from . import io
    from .structured import swap_features

    model = _model(cfg, args.checkpoint)
    bundle = _scene(args.scene)
    obs = _observe(model, bundle)
    donor = _observe(model, _scene(args.donor))
    if not Path(args.mask).exists():
        raise CommandError(f"mask {args.mask} not found")
    mask = io.read_pgm(args.mask) > 0.5
    sf = swap_features(obs.sf, bundle.camera, mask, donor.sf)
    _reconstruct_to(model, obs.with_features(sf), args.out, args.resolution or model.cfg.mc_resolution)
    return 0


def cmd_render(cfg, args) -> int:
    from . import io
    from .geometry import Camera
    from .render import render_image

    model = _model(cfg, args.checkpoint)
    bundle = _scene(args.scene)
    obs = _observe(model, bundle)
    cam = Camera.orbit(args.azimuth, args.elevation, size=bundle.camera.width, focal=bundle.camera.focal)
    rgb, _ = render_image(cam, obs.body, model.sample_fn(obs), model.beta().detach(), model.cfg.render_samples)
    if not np.isfinite(rgb).all():
        raise CommandError("non-finite rendering")
    io.write_ppm(args.out, rgb)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(cfg, args) -> int:
    from . import plots
    from .experiments import METRIC_COLUMNS, body_baseline, evaluate_scene, multiview_trend, score_prediction
    from .scenes import list_scenes, load_scene

    if args.pred is not None and args.multiview:
        raise CommandError("--multiview needs a model, not --pred")
    model = _model(cfg, args.checkpoint) if args.pred is None else None
    res = args.resolution or (model.cfg if model is not None else cfg).mc_resolution
    rows = []
    for path in list_scenes(args.scenes):
        bundle = load_scene(path)
        if bundle.surface is None:
            raise CommandError(f"{path}: held-out scenes need gt_surface.bin")
        if args.pred is not None:
            ply = Path(args.pred) / f"{bundle.scene_id}.ply"
            if not ply.exists():
                raise CommandError(f"prediction {ply} not found")
            rows.append(score_prediction(bundle, ply))
        else:
            rows.append(evaluate_scene(model, bundle, res)[0])
        if args.baseline:
            rows.append(body_baseline(bundle, res, cfg.mc_pad)[0])
        if args.multiview:
            mv = multiview_trend(model, bundle)
            nan = float("nan")
            for k in ("1view", "2view"):
                rows.append({"scene_id": f"{bundle.scene_id}:back:{k}", "chamfer_e3": nan, "iou": nan, "nc": nan,
                             "psnr_albedo": nan, "psnr_shaded": mv[f"psnr_{k}"]})
    if not rows:
        raise CommandError("no scenes to evaluate")
    _write_csv(args.out, rows, METRIC_COLUMNS)
    plots.metric_bars([{**r, "method": r["scene_id"]} for r in rows], Path(args.out).with_suffix(".png"))
    print("----- metrics -----")
    print(",".join(METRIC_COLUMNS))
    for r in rows:
        print(",".join(r["scene_id"] if c == "scene_id" else f"{r[c]:.6g}" for c in METRIC_COLUMNS))
    print("-------------------")
    return 0


def cmd_gradcheck(cfg, args) -> int:
    from .gradsuite import run_suite

    results = run_suite()
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<22} err={r.error:.3e}  tol={r.tol:.0e}  {r.seconds:.1f}s")
    return 0 if all(r.ok for r in results) else 1


HANDLERS = {
    "gen-scenes": cmd_gen_scenes, "train": cmd_train, "reconstruct": cmd_reconstruct, "render": cmd_render,
    "repose": cmd_repose, "relight": cmd_relight, "edit": cmd_edit, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config, _parse_overrides(extra))
        return HANDLERS[args.command](cfg, args)
    except (CommandError, FileNotFoundError, KeyError, ValueError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"s3f {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
