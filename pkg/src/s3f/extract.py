"""Meshing, texturing, reposing/relighting and reconstruction metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage import measure

from . import io
from .geometry import BodyState
from .model import Observation, S3FModel
from .structured import repose

PSNR_CAP = 99.0
MIN_FACE_AREA = 1e-12

SdfFn = Callable[[np.ndarray], np.ndarray]  # (n, 3) float64 -> (n,)


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    normals: np.ndarray | None = None  # (V, 3) unit
    albedo: np.ndarray | None = None  # (V, 3)
    shaded: np.ndarray | None = None  # (V, 3)
    shading: np.ndarray | None = None  # (V, 3) shading coefficient
    gradients: np.ndarray | None = None  # (V, 3) raw field gradient, the shading input

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def volume(self) -> float:
        v = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return int(len(used) - len(self.edges()) + len(self.faces))

    def save_ply(self, path):
        io.write_ply(path, self.vertices, self.faces, self.normals, self.albedo, self.shaded)


def grid_points(lo, hi, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """(R+1)^3 lattice over the box; returns (points (n, 3), spacing (3,))."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    axes = [np.linspace(lo[i], hi[i], resolution + 1) for i in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    return g.reshape(-1, 3), (hi - lo) / resolution


def evaluate_grid(sdf: SdfFn, lo, hi, resolution: int, chunk: int = 65536) -> tuple[np.ndarray, np.ndarray]:
    pts, spacing = grid_points(lo, hi, resolution)
    vals = np.concatenate([np.asarray(sdf(pts[i : i + chunk]), float) for i in range(0, len(pts), chunk)])
    n = resolution + 1
    return vals.reshape(n, n, n), spacing


def cleanup(mesh: TriMesh) -> TriMesh:
    """Weld coincident vertices, then drop collapsed and zero-area faces.

    Marching cubes emits duplicate vertices where the level set passes
    exactly through a grid node; welding them first keeps the surface closed.
    """
    uniq, inv = np.unique(mesh.vertices, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    first = np.full(len(uniq), len(mesh.vertices))
    np.minimum.at(first, inv, np.arange(len(mesh.vertices)))
    f = inv[mesh.faces]
    f = f[(f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])]
    pick = lambda a: None if a is None else a[first]
    out = TriMesh(uniq, f, pick(mesh.normals), pick(mesh.albedo), pick(mesh.shaded), pick(mesh.shading), pick(mesh.gradients))
    return replace(out, faces=out.faces[out.face_areas() >= MIN_FACE_AREA])


def outward_fraction(mesh: TriMesh, sdf: SdfFn, n_probe: int = 512, seed: int = 0) -> float:
    """Fraction of probed faces whose normal points toward increasing SDF."""
    if mesh.empty:
        return 1.0
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(mesh.faces), min(n_probe, len(mesh.faces)), replace=False)
    fn = mesh.face_normals()[idx]
    fn = fn / np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)
    c = mesh.vertices[mesh.faces[idx]].mean(1)
    edge = np.linalg.norm(mesh.vertices[mesh.faces[idx, 0]] - mesh.vertices[mesh.faces[idx, 1]], axis=1)
    h = np.maximum(0.25 * edge, 1e-6)[:, None]
    both = np.asarray(sdf(np.concatenate([c + h * fn, c - h * fn])), float)
    return float((both[: len(idx)] > both[len(idx) :]).mean())


def marching_cubes(sdf: SdfFn, lo, hi, resolution: int = 96) -> TriMesh:
    """Zero level set of ``sdf`` over the box [lo, hi] on an R^3-cell grid.

    Triangles are wound so their normals point along increasing SDF (outward).
    """
    vol, spacing = evaluate_grid(sdf, lo, hi, resolution)
    if not (vol.min() < 0.0 < vol.max()):
        warnings.warn("no zero crossing in the volume; returning an empty mesh")
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    verts, faces, normals, _ = measure.marching_cubes(vol, 0.0, spacing=tuple(spacing))
    verts = verts + np.asarray(lo, float)
    mesh = cleanup(TriMesh(verts.astype(np.float64), faces, normals.astype(np.float64)))
    # a closed level set has one consistent winding; pick the outward one by probing the SDF
    if outward_fraction(mesh, sdf) < 0.5:
        mesh.faces = mesh.faces[:, [0, 2, 1]]
    fn = mesh.face_normals()
    if len(fn) and (np.einsum("ij,ij->i", fn, mesh.normals[mesh.faces].mean(1)) < 0).mean() > 0.5:
        mesh.normals = -mesh.normals
    return mesh


def field_sdf(model: S3FModel, obs: Observation, body: BodyState | None = None, chunk: int = 8192) -> SdfFn:
    """Numpy SDF evaluator of the trained field (no gradients)."""
    body = body or obs.body
    keys = model.field.keys(obs.sf) if model.field.pooling == "attention" else None
    dtype = obs.featimg.dtype

    def fn(x: np.ndarray) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, len(x), chunk):
                xt = torch.as_tensor(x[i : i + chunk], dtype=dtype)
                out.append(model.field(xt, obs.sf, body, keys).sdf.double().numpy())
        return np.concatenate(out) if out else np.zeros(0)

    return fn


def body_box(body: BodyState, pad: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    return body.bbox(pad)


def reconstruct(model: S3FModel, obs: Observation, body: BodyState | None = None, resolution: int = 96, pad: float = 0.15) -> TriMesh:
    body = body or obs.body
    lo, hi = body_box(body, pad)
    return marching_cubes(field_sdf(model, obs, body), lo, hi, resolution)


def texture_mesh(model: S3FModel, mesh: TriMesh, obs: Observation, body: BodyState | None = None, code=None, chunk: int = 4096) -> TriMesh:
    """Per-vertex albedo, shading and shaded color from field queries at the vertices."""
    if mesh.empty:
        return mesh
    keys = model.field.keys(obs.sf) if model.field.pooling == "attention" else None
    keys = tuple(k.detach() for k in keys) if keys is not None else None
    alb, shd, nrm = [], [], []
    dtype = obs.featimg.dtype
    for i in range(0, len(mesh.vertices), chunk):
        x = torch.as_tensor(mesh.vertices[i : i + chunk], dtype=dtype)
        s = model.sample(obs, x, body, code, keys)
        alb.append(s.albedo.detach().double().numpy())
        shd.append(s.shading.detach().double().numpy())
        nrm.append(s.normal.detach().double().numpy())
    albedo = np.concatenate(alb)
    shading = np.concatenate(shd)
    n = np.concatenate(nrm)
    return replace(mesh, normals=n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12),
                   albedo=albedo, shading=shading, shaded=shading * albedo, gradients=n)


def relight(model: S3FModel, mesh: TriMesh, code: torch.Tensor) -> TriMesh:
    """Recompute shading under another illumination code; geometry and albedo are left untouched."""
    if mesh.albedo is None or mesh.gradients is None:
        raise ValueError("relight needs a textured mesh")
    if model.shading is None:
        shading = np.ones_like(mesh.albedo)
    else:
        with torch.no_grad():
            g = torch.as_tensor(mesh.gradients, dtype=code.dtype)
            shading = model.shading(g, code).double().numpy()
            flat = np.linalg.norm(mesh.gradients, axis=1) < 1e-8
            shading[flat] = 1.0
    return replace(mesh, shading=shading, shaded=shading * mesh.albedo)


def repose_reconstruction(obs: Observation, target_body: BodyState) -> Observation:
    """Move the structured features to ``target_body``'s pose; the field then uses that body's SDF."""
    sf = repose(obs.sf, target_body.transforms)
    return Observation(sf, obs.code, obs.featimg, obs.camera, target_body)


# metrics -----------------------------------------------------------------


def nearest(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each ``src`` point, (distance, index) of its nearest ``dst`` point."""
    d, i = cKDTree(dst).query(src, k=1)
    return d, i


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of the two directed mean squared nearest-neighbor distances (m^2)."""
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    da, _ = nearest(a, b)
    db, _ = nearest(b, a)
    return 0.5 * (float(np.mean(da**2)) + float(np.mean(db**2)))


def occupancy_iou(pred_sdf: SdfFn, gt_sdf: SdfFn, lo, hi, resolution: int = 64) -> float:
    """IoU of the inside (sdf < 0) sets on a grid over the box."""
    pts, _ = grid_points(lo, hi, resolution - 1)
    p = np.asarray(pred_sdf(pts)) < 0
    g = np.asarray(gt_sdf(pts)) < 0
    union = np.logical_or(p, g).sum()
    return 1.0 if union == 0 else float(np.logical_and(p, g).sum() / union)


def oriented_point_sdf(points: np.ndarray, normals: np.ndarray) -> SdfFn:
    """Distance to the nearest point, negative behind its normal; an SDF proxy for oriented point sets."""
    tree = cKDTree(points)

    def fn(x: np.ndarray) -> np.ndarray:
        d, i = tree.query(x, k=1)
        side = np.einsum("ij,ij->i", x - points[i], normals[i])
        return np.where(side < 0, -d, d)

    return fn


def normal_consistency(pred_pts, pred_normals, gt_pts, gt_normals) -> float:
    """Mean |cos| between each GT normal and the normal of its nearest predicted vertex."""
    _, idx = nearest(gt_pts, pred_pts)
    a = gt_normals / np.linalg.norm(gt_normals, axis=1, keepdims=True)
    b = pred_normals[idx] / np.maximum(np.linalg.norm(pred_normals[idx], axis=1, keepdims=True), 1e-12)
    return float(np.abs((a * b).sum(1)).mean())


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, float) - np.asarray(gt, float)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(-10.0 * np.log10(mse))


def transfer_colors(pred_pts, pred_colors, gt_pts) -> np.ndarray:
    """Colors of the nearest predicted vertex for every GT point."""
    _, idx = nearest(gt_pts, pred_pts)
    return pred_colors[idx]


def mesh_metrics(
    mesh: TriMesh,
    gt_points: np.ndarray,
    gt_normals: np.ndarray,
    pred_sdf: SdfFn,
    gt_sdf: SdfFn,
    lo,
    hi,
    gt_albedo: np.ndarray | None = None,
    gt_shaded: np.ndarray | None = None,
    iou_resolution: int = 64,
) -> dict[str, float]:
    """chamfer_e3 (x1e-3 m^2), iou, nc, psnr_albedo, psnr_shaded."""
    if len(mesh.vertices) == 0:
        return {"chamfer_e3": float("inf"), "iou": 0.0, "nc": 0.0, "psnr_albedo": 0.0, "psnr_shaded": 0.0}
    normals = mesh.normals if mesh.normals is not None else vertex_normals(mesh)
    out = {
        "chamfer_e3": 1e3 * chamfer(mesh.vertices, gt_points),
        "iou": occupancy_iou(pred_sdf, gt_sdf, lo, hi, iou_resolution),
        "nc": normal_consistency(mesh.vertices, normals, gt_points, gt_normals),
        "psnr_albedo": float("nan"),
        "psnr_shaded": float("nan"),
    }
    if gt_albedo is not None and mesh.albedo is not None:
        out["psnr_albedo"] = psnr(transfer_colors(mesh.vertices, mesh.albedo, gt_points), gt_albedo)
    if gt_shaded is not None and mesh.shaded is not None:
        out["psnr_shaded"] = psnr(transfer_colors(mesh.vertices, mesh.shaded, gt_points), gt_shaded)
    return out


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    fn = mesh.face_normals()
    n = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(n, mesh.faces[:, k], fn)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
