"""Implicit signed-distance + albedo field over structured features, and shading.

A query point attends over the feature points with two independent heads,
one for geometry and one for albedo.  Geometry is predicted as a bounded
residual on top of the exact body SDF, so a freshly initialised field is the
body itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .geometry import BodyState, body_sdf
from .nncore import MLP, attention, positional_encoding, xavier
from .structured import StructuredFeatures, pool

POOLING_MODES = ("attention", "knn3", "pixel")


@dataclass
class FieldSample:
    sdf: torch.Tensor  # (Q,)
    residual: torch.Tensor  # (Q,)
    albedo: torch.Tensor  # (Q, 3)
    normal: torch.Tensor | None = None  # (Q, 3), raw SDF gradient
    shading: torch.Tensor | None = None  # (Q, 3)
    color: torch.Tensor | None = None  # (Q, 3)


class ShadingNet(nn.Module):
    """delta = p(n, L): three ReLU layers, the last one included."""

    def __init__(self, illum_dim: int = 16, width: int = 32):
        super().__init__()
        self.layers = nn.ModuleList([nn.Linear(3 + illum_dim, width), nn.Linear(width, width), nn.Linear(width, 3)])
        for lin in self.layers:
            xavier(lin)
        # start near unit shading so the ReLU output is not dead
        nn.init.constant_(self.layers[-1].bias, 1.0)

    def forward(self, normal: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        h = torch.cat([normal, code.expand(normal.shape[0], -1)], -1)
        for lin in self.layers:
            h = torch.relu(lin(h))
        return h


def knn3_weights(x: torch.Tensor, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Indices (Q, 3) and normalized inverse-distance weights of the 3 nearest points."""
    d = torch.cdist(x, points)
    dist, idx = d.topk(3, dim=-1, largest=False)
    inv = 1.0 / dist.clamp_min(1e-8)
    return idx, inv / inv.sum(-1, keepdim=True)


class ImplicitField(nn.Module):
    def __init__(
        self,
        feat_dim: int = 24,
        key_dim: int = 64,
        width: int = 128,
        depth: int = 4,
        pooling: str = "attention",
        residual: bool = True,
        residual_scale: float = 0.5,
        n_freq: int = 6,
    ):
        super().__init__()
        if pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")
        self.pooling = pooling
        self.residual = residual
        self.residual_scale = residual_scale
        self.n_freq = n_freq
        pe_dim = 3 + 6 * n_freq
        self.geo_enc = MLP(pe_dim, key_dim, 1, key_dim)
        self.alb_enc = MLP(pe_dim, key_dim, 1, key_dim)
        self.geo_head = MLP(key_dim + feat_dim, width, depth, 1, skip_at=2, zero_out=residual)
        self.alb_head = MLP(key_dim + feat_dim, width, depth, 3, skip_at=2)

    def keys(self, sf: StructuredFeatures) -> tuple[torch.Tensor, torch.Tensor]:
        pe = positional_encoding(sf.positions, self.n_freq)
        return self.geo_enc(pe), self.alb_enc(pe)

    def pooled(self, x, sf, q_geo, q_alb, keys):
        if self.pooling == "attention":
            k_geo, k_alb = keys if keys is not None else self.keys(sf)
            return attention(q_geo, k_geo, sf.features), attention(q_alb, k_alb, sf.features)
        if self.pooling == "knn3":
            idx, w = knn3_weights(x, sf.positions)
            f = (sf.features[idx] * w[..., None]).sum(1)
            return f, f
        featimg, camera, channels = sf.pixel_source
        f, _ = pool(x, featimg, camera, channels)
        return f, f

    def forward(self, x: torch.Tensor, sf: StructuredFeatures, body: BodyState, keys=None) -> FieldSample:
        pe = positional_encoding(x, self.n_freq)
        q_geo, q_alb = self.geo_enc(pe), self.alb_enc(pe)
        f_geo, f_alb = self.pooled(x, sf, q_geo, q_alb, keys)
        raw = self.geo_head(torch.cat([f_geo, q_geo], -1))[:, 0]
        albedo = torch.sigmoid(self.alb_head(torch.cat([f_alb, q_alb], -1)))
        if self.residual:
            ds = self.residual_scale * torch.tanh(raw)
            s = body_sdf(x, body) + ds
        else:
            ds = raw
            s = raw
        return FieldSample(s, ds, albedo)


def query(field: ImplicitField, x: torch.Tensor, sf: StructuredFeatures, body: BodyState, keys=None):
    out = field(x, sf, body, keys)
    return out.sdf, out.albedo


def evaluate(
    field: ImplicitField,
    shading: ShadingNet | None,
    x: torch.Tensor,
    sf: StructuredFeatures,
    body: BodyState,
    code: torch.Tensor,
    keys=None,
    create_graph: bool = False,
) -> FieldSample:
    """Full field sample: SDF, albedo, gradient normal, shading and shaded color.

    ``shading=None`` is the no-shading mode (delta = 1).
    """
    with torch.enable_grad():
        xg = x if x.requires_grad else x.detach().requires_grad_(True)
        out = field(xg, sf, body, keys)
        (n,) = torch.autograd.grad(out.sdf.sum(), xg, create_graph=create_graph)
    out.normal = n
    if shading is None:
        delta = torch.ones_like(out.albedo)
    else:
        delta = shading(n, code)
        flat = n.detach().norm(dim=-1) < 1e-8
        if flat.any():
            delta = torch.where(flat[:, None], torch.ones_like(delta), delta)
    out.shading = delta
    out.color = delta * out.albedo
    return out


def knn3_query(field: ImplicitField, x, sf, body):
    """Field query with nearest-3 inverse-distance pooling regardless of mode."""
    mode = field.pooling
    field.pooling = "knn3"
    try:
        return query(field, x, sf, body)
    finally:
        field.pooling = mode
