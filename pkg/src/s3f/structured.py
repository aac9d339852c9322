"""Structured 3D features: body-anchored points carrying pooled image features.

Points start on the posed body template, pick up features at their
projection, are displaced by a small network, and re-pool the remaining
feature channels at their new location.  Because every point keeps its
template index and skinning weights, the set can be unposed, aggregated over
several observations in canonical space and re-posed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .features import sample_feature
from .geometry import Camera, apply_transforms, blended_transforms, project, project_torch, unpose_points
from .nncore import xavier

D_MAX = 0.30


@dataclass
class StructuredFeatures:
    positions: torch.Tensor  # (N, 3) displaced points V'
    features: torch.Tensor  # (N, k_f) final pooled features F'
    template_index: np.ndarray  # (N,)
    skin_bones: np.ndarray  # (N, 2) inherited from the template point
    skin_weights: np.ndarray  # (N, 2)
    transforms: np.ndarray  # (J, 4, 4) pose the positions currently live in
    visibility: np.ndarray  # (N,)
    outside: np.ndarray  # (N,) bool, out-of-image or behind camera when pooled
    body_points: torch.Tensor | None = None  # (N, 3) undisplaced V
    pixel_source: tuple | None = None  # (featimg, camera, channels) for the pixel-aligned baseline

    def __len__(self):
        return self.positions.shape[0]

    def detach(self) -> "StructuredFeatures":
        bp = None if self.body_points is None else self.body_points.detach()
        return replace(self, positions=self.positions.detach(), features=self.features.detach(), body_points=bp)

    def canonical_positions(self) -> np.ndarray:
        return unpose_points(
            self.positions.detach().double().numpy(), self.skin_bones, self.skin_weights, self.transforms
        )


def pool(V: torch.Tensor, featimg: torch.Tensor, camera: Camera, channels: slice) -> tuple[torch.Tensor, torch.Tensor]:
    """Features of ``channels`` at the projections of ``V``; zeros behind the camera or off-image."""
    uv, front = project_torch(camera, V)
    f, outside = sample_feature(featimg[..., channels], uv)
    outside = outside | ~front
    return f * (~outside)[:, None].to(f.dtype), outside


def displacement_channels(feat_dim: int, disp_dim: int) -> tuple[slice, slice]:
    """(displacement slice = last ``disp_dim`` channels, final slice = the rest)."""
    return slice(feat_dim - disp_dim, feat_dim), slice(0, feat_dim - disp_dim)


def pool_initial(V, featimg, camera, disp_dim: int = 8):
    return pool(V, featimg, camera, displacement_channels(featimg.shape[-1], disp_dim)[0])


def pool_final(V_disp, featimg, camera, disp_dim: int = 8):
    return pool(V_disp, featimg, camera, displacement_channels(featimg.shape[-1], disp_dim)[1])


class Displacement(nn.Module):
    """``V' = V + d(F, e, V)`` with d a 2-layer MLP in camera coordinates.

    The output layer starts at zero so ``V' = V`` before training; the raw
    offset saturates smoothly at ``d_max``.
    """

    def __init__(self, feat_dim: int = 8, code_dim: int = 8, hidden: int = 64, d_max: float = D_MAX):
        super().__init__()
        self.fc1 = nn.Linear(feat_dim + code_dim + 3, hidden)
        self.fc2 = nn.Linear(hidden, 3)
        self.d_max = d_max
        xavier(self.fc1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def raw(self, V, feats, codes, camera: Camera):
        R = torch.as_tensor(camera.R, dtype=V.dtype)
        t = torch.as_tensor(camera.t, dtype=V.dtype)
        v_cam = V @ R.T + t
        return self.fc2(F.leaky_relu(self.fc1(torch.cat([feats, codes, v_cam], -1)), 0.01))

    def clamp(self, raw_cam: torch.Tensor) -> torch.Tensor:
        return self.d_max * torch.tanh(raw_cam / self.d_max)

    def forward(self, V, feats, codes, camera: Camera):
        d_cam = self.clamp(self.raw(V, feats, codes, camera))
        R = torch.as_tensor(camera.R, dtype=V.dtype)
        return V + d_cam @ R


def softmax_weights(visibilities: np.ndarray) -> np.ndarray:
    """Per-point softmax over views of raw visibility scores, shape (T, N)."""
    o = np.asarray(visibilities, np.float64)
    e = np.exp(o - o.max(0, keepdims=True))
    return e / e.sum(0, keepdims=True)


def aggregate_views(views: list[StructuredFeatures], target_transforms: np.ndarray) -> StructuredFeatures:
    """Fuse observations in canonical space, weighting by visibility softmax, then pose."""
    if not views:
        raise ValueError("no views to aggregate")
    first = views[0]
    for v in views[1:]:
        if len(v) != len(first) or not np.array_equal(v.template_index, first.template_index):
            raise ValueError("views do not share the same template points")
    w = softmax_weights(np.stack([v.visibility for v in views]))
    canon = np.stack([v.canonical_positions() for v in views])
    feats = np.stack([v.features.detach().double().numpy() for v in views])
    canon_hat = (w[..., None] * canon).sum(0)
    feat_hat = (w[..., None] * feats).sum(0)
    M = blended_transforms(first.skin_bones, first.skin_weights, target_transforms)
    posed = apply_transforms(M, canon_hat)
    dtype = first.features.dtype
    return StructuredFeatures(
        positions=torch.as_tensor(posed, dtype=dtype),
        features=torch.as_tensor(feat_hat, dtype=dtype),
        template_index=first.template_index.copy(),
        skin_bones=first.skin_bones,
        skin_weights=first.skin_weights,
        transforms=np.array(target_transforms),
        visibility=np.max(np.stack([v.visibility for v in views]), 0),
        outside=np.logical_and.reduce([v.outside for v in views]),
    )


def repose(sf: StructuredFeatures, target_transforms: np.ndarray) -> StructuredFeatures:
    """Move the feature points to another pose through canonical space."""
    canon = sf.canonical_positions()
    M = blended_transforms(sf.skin_bones, sf.skin_weights, target_transforms)
    posed = torch.as_tensor(apply_transforms(M, canon), dtype=sf.positions.dtype)
    return replace(sf, positions=posed, transforms=np.array(target_transforms), body_points=None)


def projected_inside(positions: np.ndarray, camera: Camera, mask: np.ndarray) -> np.ndarray:
    """Points whose nearest pixel lies inside ``mask`` (and in front of the camera)."""
    uv, front = project(camera, positions)
    col = np.rint(uv[:, 0]).astype(int)
    row = np.rint(uv[:, 1]).astype(int)
    H, W = mask.shape
    ok = front & (col >= 0) & (col < W) & (row >= 0) & (row < H)
    inside = np.zeros(len(positions), bool)
    inside[ok] = mask[row[ok], col[ok]] > 0
    return inside


def swap_features(sf: StructuredFeatures, camera: Camera, mask: np.ndarray, donor: StructuredFeatures) -> StructuredFeatures:
    """Replace feature rows of points projecting inside ``mask`` with the donor's rows."""
    if not np.array_equal(sf.template_index, donor.template_index):
        raise ValueError("donor features come from a different template")
    sel = torch.as_tensor(projected_inside(sf.positions.detach().double().numpy(), camera, mask))
    feats = torch.where(sel[:, None], donor.features.to(sf.features.dtype), sf.features)
    return replace(sf, features=feats)
