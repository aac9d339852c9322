"""Sampling, loss stack and the two-branch training loop.

Each step runs one synthetic scene with full 3D supervision and one
"real" scene that only sees its image, mask and a noisy body fit, then takes a
single Adam step on the summed objective.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import Config
from .geometry import BodyState, template_points
from .model import Observation, S3FModel
from .nncore import ParamStore, load_checkpoint, save_checkpoint
from .render import density, make_rays, render_rays
from .scenes import SceneBundle, perturbed_body

log = logging.getLogger(__name__)

COMPONENTS = ("rgb", "patch", "mask", "eik", "rgb3d", "label")
REAL_COMPONENTS = ("rgb", "patch", "mask", "eik")
BCE_EPS = 1e-6


@dataclass
class Batch3D:
    surface: np.ndarray  # (n, 3)
    albedo: np.ndarray  # (n, 3)
    shaded: np.ndarray  # (n, 3)
    near: np.ndarray  # (m, 3)
    labels: np.ndarray  # (m,)


def sample_pixels(mask: np.ndarray, rng: np.random.Generator, n: int = 32, fg_fraction: float = 0.75):
    """(pixels (n, 2) as (row, col), in-foreground flags).

    With no background pixels at all, the background draws come from the
    foreground instead.
    """
    fg = np.argwhere(mask > 0.5)
    bg = np.argwhere(mask <= 0.5)
    if len(fg) == 0:
        raise ValueError("empty foreground mask; scene rejected")
    n_fg = int(round(n * fg_fraction))
    n_bg = n - n_fg
    if len(bg) == 0:
        n_fg, n_bg = n, 0
    pick_fg = fg[rng.choice(len(fg), n_fg, replace=len(fg) < n_fg)]
    pick_bg = bg[rng.choice(len(bg), n_bg, replace=len(bg) < n_bg)] if n_bg else np.zeros((0, 2), int)
    pix = np.concatenate([pick_fg, pick_bg])
    return pix, np.r_[np.ones(n_fg, bool), np.zeros(n_bg, bool)]


def sample_patch(mask: np.ndarray, rng: np.random.Generator, size: int = 16) -> np.ndarray:
    """Pixels of a ``size`` x ``size`` window centred on a random foreground pixel (clamped to the image)."""
    H, W = mask.shape
    fg = np.argwhere(mask > 0.5)
    if len(fg) == 0:
        raise ValueError("empty foreground mask; scene rejected")
    r, c = fg[rng.integers(len(fg))]
    r0 = int(np.clip(r - size // 2, 0, H - size))
    c0 = int(np.clip(c - size // 2, 0, W - size))
    rr, cc = np.meshgrid(np.arange(r0, r0 + size), np.arange(c0, c0 + size), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], 1)


def sample_3d_points(bundle: SceneBundle, rng: np.random.Generator, n_surface: int = 128, n_near: int = 128) -> Batch3D:
    if bundle.surface is None or bundle.labels is None:
        raise ValueError(f"{bundle.scene_id}: no 3D ground truth")
    s = bundle.surface[rng.choice(len(bundle.surface), n_surface, replace=False)]
    k = rng.choice(len(bundle.labels), n_near, replace=False)
    return Batch3D(s[:, :3], s[:, 3:6], s[:, 6:9], bundle.label_points[k], bundle.labels[k])


def sample_eikonal(model: S3FModel, body: BodyState, rng: np.random.Generator, n: int = 128, sigma: float = 0.10):
    V = template_points(model.template, body)
    return V[rng.choice(len(V), n, replace=len(V) < n)] + rng.normal(0.0, sigma, (n, 3))


def l1_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over rows of the per-row L1 norm."""
    return (a - b).abs().sum(-1).mean()


def image_gradients(img: torch.Tensor):
    return img[1:, :, :] - img[:-1, :, :], img[:, 1:, :] - img[:, :-1, :]


def patch_loss(pred: torch.Tensor, gt: torch.Tensor, scales: int = 2) -> torch.Tensor:
    """L1 on finite-difference image gradients of (P, P, 3) patches, at full and half resolution."""
    total = pred.new_zeros(())
    p, g = pred, gt
    for s in range(scales):
        if s:
            p = F.avg_pool2d(p.permute(2, 0, 1)[None], 2)[0].permute(1, 2, 0)
            g = F.avg_pool2d(g.permute(2, 0, 1)[None], 2)[0].permute(1, 2, 0)
        for dp, dg in zip(image_gradients(p), image_gradients(g)):
            total = total + (dp - dg).abs().mean()
    return total


def eikonal_loss(grad: torch.Tensor) -> torch.Tensor:
    return ((grad.norm(dim=-1) - 1.0) ** 2).mean()


def occupancy_probability(sigma: torch.Tensor, delta_ref) -> torch.Tensor:
    """Squash density into (0, 1) as the opacity of a ``delta_ref`` slab."""
    return 1.0 - torch.exp(-sigma * delta_ref)


def label_slab(cfg: Config, beta: torch.Tensor):
    """Slab thickness for the label probability.

    With a fixed slab p tops out at 1 - exp(-delta/beta), which stays below 1/2
    while beta is large and then drives every near point inside.  A slab of
    2 ln2 beta puts p = 1/2 exactly on the zero level set at any beta.
    """
    return cfg.delta_ref if cfg.delta_ref > 0 else 2.0 * math.log(2.0) * beta


def bce(labels: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p)).mean()


def weighted_total(parts: dict[str, torch.Tensor], cfg: Config) -> torch.Tensor:
    w = {"rgb": cfg.w_rgb, "patch": cfg.w_vgg, "mask": cfg.w_mask, "eik": cfg.w_eik, "rgb3d": cfg.w_3drgb, "label": cfg.w_3dlabel}
    return sum(w[k] * v for k, v in parts.items())


def check_components(branch: str, parts: dict[str, torch.Tensor]):
    for k, v in parts.items():
        if not torch.isfinite(v).all():
            raise FloatingPointError(f"non-finite loss component {branch}/{k}")


def image_only(bundle: SceneBundle) -> SceneBundle:
    """Strip every 3D ground-truth field; the real branch only ever sees this."""
    return replace(bundle, surface=None, label_points=None, labels=None)


def branch_losses(
    model: S3FModel,
    bundle: SceneBundle,
    body: BodyState,
    cfg: Config,
    rng: np.random.Generator,
    synthetic: bool,
    create_graph: bool = True,
) -> dict[str, torch.Tensor]:
    """Unweighted loss components for one scene."""
    obs = model.observe(bundle.rgb, bundle.mask, body, bundle.camera)
    beta = model.beta()
    fn = model.sample_fn(obs, create_graph=create_graph)
    dtype = obs.featimg.dtype

    pix, _ = sample_pixels(bundle.mask, rng, cfg.n_pixels, cfg.fg_fraction)
    c, o = render_rays(make_rays(bundle.camera, pix, body, cfg.train_samples), fn, beta, dtype)
    gt_c = torch.as_tensor(bundle.rgb[pix[:, 0], pix[:, 1]], dtype=dtype)
    gt_m = torch.as_tensor(bundle.mask[pix[:, 0], pix[:, 1]], dtype=dtype)
    parts = {"rgb": l1_rows(c, gt_c), "mask": (o - gt_m).abs().mean()}

    P = cfg.patch_size
    ppix = sample_patch(bundle.mask, rng, P)
    pc, _ = render_rays(make_rays(bundle.camera, ppix, body, cfg.train_samples), fn, beta, dtype)
    parts["patch"] = patch_loss(
        pc.reshape(P, P, 3), torch.as_tensor(bundle.rgb[ppix[:, 0], ppix[:, 1]].reshape(P, P, 3), dtype=dtype)
    )

    keys = model.field.keys(obs.sf) if model.field.pooling == "attention" else None
    xe = torch.as_tensor(sample_eikonal(model, body, rng, cfg.n_eik, cfg.eik_sigma), dtype=dtype)
    parts["eik"] = eikonal_loss(model.sample(obs, xe, keys=keys, create_graph=create_graph).normal)

    if synthetic:
        b3 = sample_3d_points(bundle, rng, cfg.n_surface, cfg.n_near)
        out = model.sample(obs, torch.as_tensor(b3.surface, dtype=dtype), keys=keys, create_graph=create_graph)
        parts["rgb3d"] = l1_rows(out.albedo, torch.as_tensor(b3.albedo, dtype=dtype)) + l1_rows(
            out.color, torch.as_tensor(b3.shaded, dtype=dtype)
        )
        s_near = model.field(torch.as_tensor(b3.near, dtype=dtype), obs.sf, body, keys).sdf
        p = occupancy_probability(density(s_near, beta), label_slab(cfg, beta))
        parts["label"] = bce(torch.as_tensor(b3.labels, dtype=dtype), p)
    check_components("synth" if synthetic else "real", parts)
    return parts


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def step_losses(model: S3FModel, scenes: list[SceneBundle], cfg: Config, rng: np.random.Generator, create_graph=True):
    """Both branches for one step. Returns (total, flat components dict)."""
    i_syn, i_real = rng.integers(len(scenes)), rng.integers(len(scenes))
    syn = scenes[i_syn]
    real = image_only(scenes[i_real])
    p_syn = branch_losses(model, syn, syn.body(), cfg, rng, True, create_graph)
    real_body = perturbed_body(scenes[i_real], cfg.real_rot_noise, cfg.real_trans_noise)
    p_real = branch_losses(model, real, real_body, cfg, rng, False, create_graph)
    total = weighted_total(p_syn, cfg) + weighted_total(p_real, cfg)
    flat = {f"synth_{k}": float(v.detach()) for k, v in p_syn.items()}
    flat.update({f"real_{k}": float(v.detach()) for k, v in p_real.items()})
    flat["total"] = float(total.detach())
    return total, flat


def eval_loss(model: S3FModel, scenes: list[SceneBundle], cfg: Config, seed: int = 12345) -> float:
    """Total loss averaged over one fixed draw per scene (synthetic and real branch)."""
    vals = []
    for i, sc in enumerate(scenes):
        rng = np.random.default_rng([seed, i])
        t = weighted_total(branch_losses(model, sc, sc.body(), cfg, rng, True, False), cfg)
        t = t + weighted_total(
            branch_losses(model, image_only(sc), perturbed_body(sc, cfg.real_rot_noise, cfg.real_trans_noise), cfg, rng, False, False),
            cfg,
        )
        vals.append(float(t.detach()))
    return float(np.mean(vals))


def learning_rate(cfg: Config, step: int) -> float:
    return cfg.lr * cfg.lr_decay ** (step // cfg.lr_decay_every)


CSV_FIELDS = ["step", "lr"] + [f"synth_{k}" for k in COMPONENTS] + [f"real_{k}" for k in REAL_COMPONENTS] + ["total", "seconds"]


@dataclass
class TrainResult:
    model: S3FModel
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    initial_eval: float | None = None
    final_eval: float | None = None


def save_model(path, model: S3FModel, store: ParamStore | None = None):
    store = store or ParamStore(model)
    save_checkpoint(path, store.state())
    model.cfg.save(Path(path).with_suffix(".cfg"))


def load_model(path, cfg: Config | None = None) -> tuple[S3FModel, ParamStore]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    if cfg is None:
        from .config import load_config

        side = path.with_suffix(".cfg")
        cfg = load_config(side) if side.exists() else Config()
    model = S3FModel(cfg)
    store = ParamStore(model)
    store.load_state(load_checkpoint(path))
    return model, store


def train_loop(
    cfg: Config,
    scenes: list[SceneBundle],
    out_dir=None,
    model: S3FModel | None = None,
    evaluate_ratio: bool = False,
    progress=None,
) -> TrainResult:
    """Train for ``cfg.steps`` steps; returns the model and per-step loss log.

    Writes ``losses.csv`` and ``model.ckpt`` (+ ``model.cfg``) into ``out_dir``
    when given.  On a non-finite loss the last checkpoint on disk is left
    untouched and the error propagates.
    """
    if not scenes:
        raise ValueError("no training scenes")
    model = model or S3FModel(cfg)
    store = ParamStore(model)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "model.ckpt" if out is not None else None
    result = TrainResult(model)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "losses.csv", "w", newline="")
        writer = csv.DictWriter(fh, CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
    if evaluate_ratio:
        result.initial_eval = eval_loss(model, scenes, cfg)
    try:
        for step in range(store.step, cfg.steps):
            t0 = time.perf_counter()
            store.zero_grad()
            total, row = step_losses(model, scenes, cfg, step_rng(cfg.seed, step))
            total.backward()
            lr = learning_rate(cfg, step)
            store.adam_step(lr)
            row.update(step=step, lr=lr, seconds=time.perf_counter() - t0)
            result.history.append(row)
            if out is not None:
                writer.writerow(row)
                fh.flush()
                if (step + 1) % cfg.checkpoint_every == 0:
                    save_model(ckpt, model, store)
            if progress is not None:
                progress(row)
    finally:
        if out is not None:
            fh.close()
    if ckpt is not None:
        save_model(ckpt, model, store)
        result.checkpoint = ckpt
    if evaluate_ratio:
        result.final_eval = eval_loss(model, scenes, cfg)
    return result
