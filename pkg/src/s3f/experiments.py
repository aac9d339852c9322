"""Evaluation drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

import numpy as np
import torch

from . import io
from .extract import TriMesh, field_sdf, marching_cubes, mesh_metrics, oriented_point_sdf, psnr, reconstruct, texture_mesh, vertex_normals
from .geometry import BodyState, Camera, body_normals, body_sdf
from .model import Observation, S3FModel
from .render import render_image
from .scenes import SceneBundle, random_camera, render_scene
from .structured import aggregate_views

METRIC_COLUMNS = ("scene_id", "chamfer_e3", "iou", "nc", "psnr_albedo", "psnr_shaded")


def gt_arrays(bundle: SceneBundle):
    clothed = bundle.clothed()
    pts = bundle.surface[:, :3]
    return pts, body_normals(pts, clothed), bundle.surface[:, 3:6], bundle.surface[:, 6:9], clothed


def score_mesh(mesh: TriMesh, pred_sdf, bundle: SceneBundle, iou_resolution: int = 64) -> dict[str, float]:
    pts, nrm, alb, shd, clothed = gt_arrays(bundle)
    lo, hi = clothed.bbox(0.05)
    return mesh_metrics(mesh, pts, nrm, pred_sdf, lambda x: body_sdf(x, clothed), lo, hi, alb, shd, iou_resolution)


def evaluate_scene(model: S3FModel, bundle: SceneBundle, resolution: int | None = None) -> tuple[dict, TriMesh]:
    """Single-image reconstruction of ``bundle`` scored against its clothed ground truth."""
    resolution = resolution or model.cfg.mc_resolution
    obs = model.observe(bundle.rgb, bundle.mask, bundle.body(), bundle.camera)
    mesh = texture_mesh(model, reconstruct(model, obs, resolution=resolution, pad=model.cfg.mc_pad), obs)
    row = {"scene_id": bundle.scene_id, **score_mesh(mesh, field_sdf(model, obs), bundle)}
    return row, mesh


def score_prediction(bundle: SceneBundle, ply_path, iou_resolution: int = 64) -> dict:
    """Score a saved PLY (mesh or oriented point cloud) against the scene's ground truth.

    A file carries no SDF, so occupancy on both sides comes from the
    nearest-oriented-point sign rule; identical inputs agree everywhere.
    """
    V, F, extra = io.read_ply(ply_path)
    normals = extra["normals"]
    if len(F) and not np.abs(normals).sum(1).all():
        normals = vertex_normals(TriMesh(V, F))
    mesh = TriMesh(V, F, normals, extra["albedo"], extra["shaded"])
    pts, nrm, alb, shd, clothed = gt_arrays(bundle)
    lo, hi = clothed.bbox(0.05)
    row = mesh_metrics(mesh, pts, nrm, oriented_point_sdf(V, normals), oriented_point_sdf(pts, nrm), lo, hi, alb, shd, iou_resolution)
    return {"scene_id": bundle.scene_id, **row}


def body_baseline(bundle: SceneBundle, resolution: int = 96, pad: float = 0.15) -> tuple[dict, TriMesh]:
    """The unclothed body surface as a reconstruction."""
    body = bundle.body()
    sdf = lambda x: body_sdf(x, body)
    lo, hi = body.bbox(pad)
    mesh = marching_cubes(sdf, lo, hi, resolution)
    return {"scene_id": f"{bundle.scene_id}:body", **score_mesh(mesh, sdf, bundle)}, mesh


def view_of(bundle: SceneBundle, camera: Camera):
    """GT image and mask of ``bundle`` seen from ``camera``."""
    return render_scene(bundle.clothed(), camera, bundle.palette, bundle.light)


def render_psnr(model: S3FModel, obs: Observation, bundle: SceneBundle, camera: Camera, n_samples: int | None = None):
    rgb_gt, _ = view_of(bundle, camera)
    rgb, _ = render_image(camera, obs.body, model.sample_fn(obs), model.beta().detach(), n_samples or model.cfg.render_samples)
    return psnr(rgb, rgb_gt), rgb, rgb_gt


def multiview_trend(
    model: S3FModel,
    bundle: SceneBundle,
    views: tuple[float, ...] = (0.0, 0.6 * np.pi),
    eval_azimuth: float = np.pi,
) -> dict[str, float]:
    """Held-out back-view PSNR from one view versus visibility-weighted aggregation of several."""
    body = bundle.body()
    size = bundle.camera.width
    cams = [Camera.orbit(az, 0.0, size=size, focal=bundle.camera.focal) for az in views]
    obs_list = []
    with torch.no_grad():
        for cam in cams:
            rgb, mask = view_of(bundle, cam)
            obs_list.append(model.observe(rgb, mask, body, cam))
    back = Camera.orbit(eval_azimuth, 0.0, size=size, focal=bundle.camera.focal)
    single = obs_list[0]
    fused_sf = aggregate_views([o.sf for o in obs_list], body.transforms)
    fused = Observation(fused_sf, single.code, single.featimg, single.camera, body)
    with torch.no_grad():
        p1, img1, gt = render_psnr(model, single, bundle, back)
        p2, img2, _ = render_psnr(model, fused, bundle, back)
    return {"psnr_1view": p1, "psnr_2view": p2, "images": (gt, img1, img2)}
