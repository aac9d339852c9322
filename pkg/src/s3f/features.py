"""Image encoder and pixel-feature sampling.

The encoder sees the masked RGB image stacked with the mask and two body
guidance maps (view-space normals and canonical-position "semantic" colors),
and returns a stride-1 feature image plus a global illumination code pooled
from its bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import BodyState, Camera, body_normals, body_sdf, sphere_trace, surface_weights, unpose_points
from .nncore import xavier

# canonical box used to normalize semantic colors (unit-shape body, padded)
SEMANTIC_BOX = (np.array([-0.95, -1.0, -0.2]), np.array([0.95, 0.9, 0.3]))


@dataclass
class GuidanceMaps:
    normal: np.ndarray  # (H, W, 3) in [0, 1]
    semantic: np.ndarray  # (H, W, 3) in [0, 1]
    hit: np.ndarray  # (H, W) bool


def pixel_grid(height: int, width: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def render_guidance(body: BodyState, camera: Camera, height: int | None = None, width: int | None = None) -> GuidanceMaps:
    """Ray-cast the body SDF per pixel into normal and semantic maps."""
    H = height or camera.height
    W = width or camera.width
    pix = pixel_grid(H, W)
    dirs = camera.pixel_dirs(pix)
    o = camera.center
    t_max = np.linalg.norm(o - body.starts.mean(0)) + 3.0
    hit, t = sphere_trace(lambda x: body_sdf(x, body), o, dirs, t_max)
    normal = np.zeros((H * W, 3))
    semantic = np.zeros((H * W, 3))
    if hit.any():
        x = o + t[hit, None] * dirs[hit]
        n = body_normals(x, body)
        # view space: x right, y up, z toward the camera
        n_view = (n @ camera.R.T) * np.array([1.0, -1.0, -1.0])
        normal[hit] = np.clip((n_view + 1.0) / 2.0, 0.0, 1.0)
        bones, w = surface_weights(x, body)
        canon = unpose_points(x, bones, w, body.transforms)
        lo, hi = SEMANTIC_BOX
        semantic[hit] = np.clip((canon - lo) / (hi - lo), 0.0, 1.0)
    return GuidanceMaps(normal.reshape(H, W, 3), semantic.reshape(H, W, 3), hit.reshape(H, W))


def stack_inputs(rgb: np.ndarray, mask: np.ndarray, guidance: GuidanceMaps) -> torch.Tensor:
    """(1, 10, H, W) float32 encoder input: rgb, mask, normal, semantic."""
    rgb = rgb * mask[..., None]
    x = np.concatenate([rgb, mask[..., None], guidance.normal, guidance.semantic], axis=-1)
    return torch.as_tensor(x.transpose(2, 0, 1)[None], dtype=torch.float32)


class ImageEncoder(nn.Module):
    """Three-level U-Net with skip connections and an illumination bottleneck."""

    def __init__(self, in_ch: int = 10, enc=(16, 32, 64), dec=(64, 32, 32), feat_dim: int = 32, illum_dim: int = 16):
        super().__init__()
        self.down = nn.ModuleList()
        c = in_ch
        skips = [in_ch]
        for w in enc:
            self.down.append(nn.Conv2d(c, w, 3, stride=2, padding=1))
            c = w
            skips.append(w)
        skips.pop()  # bottleneck is not a skip
        self.up = nn.ModuleList()
        for w in dec:
            self.up.append(nn.Conv2d(c + skips[-1], w, 3, padding=1))
            c = w
            skips.pop()
        self.head = nn.Conv2d(c, feat_dim, 1)
        self.illum = nn.Linear(enc[-1], illum_dim)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                xavier(m)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        H, W = x.shape[-2:]
        if H != W or H & (H - 1) or H < 2 ** len(self.down):
            raise ValueError(f"encoder input must be square with power-of-two size, got {H}x{W}")
        feats = [x]
        h = x
        for conv in self.down:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        code = self.illum(h.mean(dim=(-2, -1)))
        feats.pop()
        for conv in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.leaky_relu(conv(torch.cat([h, feats.pop()], 1)), 0.2)
        fmap = self.head(h)
        return fmap[0].permute(1, 2, 0), code[0]


def encode_image(encoder: ImageEncoder, rgb: np.ndarray, mask: np.ndarray, guidance: GuidanceMaps):
    """Returns (feature image (H, W, k), illumination code (d,))."""
    x = stack_inputs(rgb, mask, guidance)
    return encoder(x.to(next(encoder.parameters()).dtype))


def sample_feature(featimg: torch.Tensor, uv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinear lookup of (H, W, k) features at (n, 2) pixel coords ``(u=col, v=row)``.

    Points outside ``[0, W-1] x [0, H-1]`` get zeros; the second return value
    flags them.
    """
    H, W, k = featimg.shape
    u, v = uv[:, 0], uv[:, 1]
    outside = (u < 0) | (u > W - 1) | (v < 0) | (v > H - 1) | ~torch.isfinite(u) | ~torch.isfinite(v)
    uc = torch.where(outside, torch.zeros_like(u), u)
    vc = torch.where(outside, torch.zeros_like(v), v)
    x0 = uc.detach().floor().clamp(0, W - 2).long()
    y0 = vc.detach().floor().clamp(0, H - 2).long()
    ax = (uc - x0.to(uc.dtype))[:, None]
    ay = (vc - y0.to(vc.dtype))[:, None]
    flat = featimg.reshape(H * W, k)
    f00 = flat[y0 * W + x0]
    f01 = flat[y0 * W + x0 + 1]
    f10 = flat[(y0 + 1) * W + x0]
    f11 = flat[(y0 + 1) * W + x0 + 1]
    out = (1 - ay) * ((1 - ax) * f00 + ax * f01) + ay * ((1 - ax) * f10 + ax * f11)
    return out * (~outside)[:, None].to(out.dtype), outside
