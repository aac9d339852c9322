"""Volume rendering of an SDF field through the Laplace-CDF density."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import BodyState, Camera

BETA_MIN = 1e-4
Z_PAD = 0.10

# x (M, 3) -> (sdf (M,), shaded color (M, 3))
SampleFn = Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


def laplace_cdf(x: torch.Tensor, beta) -> torch.Tensor:
    """CDF of a zero-mean Laplace distribution with scale ``beta``."""
    neg = 0.5 * torch.exp(x.clamp(max=0.0) / beta)
    pos = 1.0 - 0.5 * torch.exp(-x.clamp(min=0.0) / beta)
    return torch.where(x <= 0, neg, pos)


def density(s: torch.Tensor, beta) -> torch.Tensor:
    """sigma = Psi_beta(-s) / beta."""
    return laplace_cdf(-s, beta) / beta


class Sharpness(nn.Module):
    """Learnable beta = softplus(rho) + 1e-4."""

    def __init__(self, init: float = 0.1):
        super().__init__()
        y = init - BETA_MIN
        self.rho = nn.Parameter(torch.tensor(float(np.log(np.expm1(y))), dtype=torch.float32))

    def forward(self) -> torch.Tensor:
        return F.softplus(self.rho) + BETA_MIN


@dataclass
class RayBatch:
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3) unit
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)
    n_samples: int = 32

    @property
    def empty(self) -> np.ndarray:
        return ~(self.far > self.near)

    def __len__(self):
        return len(self.dirs)

    def spacing(self) -> np.ndarray:
        return np.where(self.empty, 0.0, (self.far - self.near) / self.n_samples)

    def sample_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Midpoints of S equal bins in [near, far]: (points (R, S, 3), spacing (R,))."""
        dt = self.spacing()
        t = self.near[:, None] + (np.arange(self.n_samples) + 0.5) * dt[:, None]
        return self.origins[:, None, :] + t[..., None] * self.dirs[:, None, :], dt


def body_depth_range(body: BodyState, camera: Camera) -> tuple[float, float]:
    """Exact camera-z extent of the capsule union."""
    zs = np.concatenate([camera.to_camera(body.starts)[:, 2], camera.to_camera(body.ends)[:, 2]])
    r = np.concatenate([body.radii, body.radii])
    return float((zs - r).min()), float((zs + r).max())


def make_rays(camera: Camera, pixels: np.ndarray, body: BodyState, n_samples: int = 32, pad: float = Z_PAD) -> RayBatch:
    """Camera rays through (row, col) pixels, bounded by the padded body depth slab."""
    pixels = np.asarray(pixels).reshape(-1, 2)
    if len(pixels) and (
        pixels.min() < 0 or pixels[:, 0].max() >= camera.height or pixels[:, 1].max() >= camera.width
    ):
        raise ValueError("pixel outside image")
    dirs = camera.pixel_dirs(pixels)
    z_lo, z_hi = body_depth_range(body, camera)
    dz = dirs @ camera.R[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        near = np.where(dz > 1e-9, (z_lo - pad) / dz, np.inf)
        far = np.where(dz > 1e-9, (z_hi + pad) / dz, -np.inf)
    near = np.maximum(near, 0.0)
    far = np.where(far > near, far, near)  # degenerate -> empty
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return RayBatch(origins, dirs, near, far, n_samples)


def integrate(colors: torch.Tensor, sigmas: torch.Tensor, deltas: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Alpha compositing. colors (R, S, 3), sigmas (R, S), deltas (R, S) or (R, 1).

    Returns (ray color (R, 3), accumulated opacity (R,)).
    """
    tau = sigmas * deltas
    alpha = 1.0 - torch.exp(-tau)
    acc = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-(acc - tau))  # exclusive: T_i = prod_{j<i} (1 - alpha_j)
    w = trans * alpha
    return (w[..., None] * colors).sum(-2), 1.0 - torch.exp(-acc[..., -1])


def transmittance(sigmas: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    tau = sigmas * deltas
    return torch.exp(-(torch.cumsum(tau, -1) - tau))


def render_rays(rays: RayBatch, sample_fn: SampleFn, beta, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Render a ray batch; empty rays return zero color and opacity."""
    R, S = len(rays), rays.n_samples
    live = np.nonzero(~rays.empty)[0]
    color = torch.zeros((R, 3), dtype=dtype)
    opacity = torch.zeros(R, dtype=dtype)
    if len(live) == 0:
        return color, opacity
    pts, dt = rays.sample_points()
    x = torch.as_tensor(pts[live].reshape(-1, 3), dtype=dtype)
    s, c = sample_fn(x)
    sig = density(s, beta).reshape(len(live), S)
    c_r, o_r = integrate(c.reshape(len(live), S, 3), sig, torch.as_tensor(dt[live, None], dtype=dtype))
    idx = torch.as_tensor(live)
    color = color.index_copy(0, idx, c_r)
    opacity = opacity.index_copy(0, idx, o_r)
    return color, opacity


def render_image(
    camera: Camera,
    body: BodyState,
    sample_fn: SampleFn,
    beta,
    n_samples: int = 64,
    ray_chunk: int = 128,
    height: int | None = None,
    width: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Full-frame render, (H, W, 3) color and (H, W) opacity as float64 arrays."""
    from .features import pixel_grid

    H = height or camera.height
    W = width or camera.width
    rays = make_rays(camera, pixel_grid(H, W), body, n_samples)
    rgb = np.zeros((H * W, 3))
    opa = np.zeros(H * W)
    for i in range(0, H * W, ray_chunk):
        sub = RayBatch(
            rays.origins[i : i + ray_chunk], rays.dirs[i : i + ray_chunk],
            rays.near[i : i + ray_chunk], rays.far[i : i + ray_chunk], n_samples,
        )
        c, o = render_rays(sub, sample_fn, beta)
        rgb[i : i + ray_chunk] = c.detach().double().numpy()
        opa[i : i + ray_chunk] = o.detach().double().numpy()
    return rgb.reshape(H, W, 3), opa.reshape(H, W)
