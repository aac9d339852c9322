"""The full reconstruction model: encoder, structured features, field, shading."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import Config
from .features import GuidanceMaps, ImageEncoder, encode_image, render_guidance
from .field import ImplicitField, ShadingNet, evaluate
from .geometry import (
    BodyState,
    Camera,
    KinematicTree,
    Shape,
    default_tree,
    sample_surface_template,
    template_points,
    visibility,
)
from .render import Sharpness
from .structured import Displacement, StructuredFeatures, displacement_channels, pool


@dataclass
class Observation:
    """Everything derived from one image: structured features plus illumination code."""

    sf: StructuredFeatures
    code: torch.Tensor  # (illum_dim,)
    featimg: torch.Tensor  # (H, W, feat_dim)
    camera: Camera
    body: BodyState

    def with_features(self, sf: StructuredFeatures) -> "Observation":
        return Observation(sf, self.code, self.featimg, self.camera, self.body)


class S3FModel(nn.Module):
    def __init__(self, cfg: Config | None = None, tree: KinematicTree | None = None):
        super().__init__()
        self.cfg = cfg = cfg or Config()
        self.tree = tree or default_tree()
        torch.manual_seed(cfg.seed)
        self.template = sample_surface_template(self.tree, Shape.unit(self.tree.num_bones), cfg.n_points, cfg.seed)
        self.encoder = ImageEncoder(10, feat_dim=cfg.feat_dim, illum_dim=cfg.illum_dim)
        self.displacement = Displacement(cfg.disp_dim, cfg.code_dim, 64, cfg.d_max)
        g = torch.Generator().manual_seed(cfg.seed + 1)
        self.codes = nn.Parameter(0.1 * torch.randn(cfg.n_points, cfg.code_dim, generator=g))
        self.field = ImplicitField(
            cfg.feat_dim - cfg.disp_dim, cfg.key_dim, cfg.head_width, cfg.head_depth,
            cfg.pooling, cfg.residual, cfg.residual_scale, cfg.n_freq,
        )
        self.shading = ShadingNet(cfg.illum_dim, cfg.shading_width) if cfg.use_shading else None
        self.sharpness = Sharpness(cfg.beta_init)

    def channels(self) -> tuple[slice, slice]:
        return displacement_channels(self.cfg.feat_dim, self.cfg.disp_dim)

    def observe(
        self,
        rgb: np.ndarray,
        mask: np.ndarray,
        body: BodyState,
        camera: Camera,
        guidance: GuidanceMaps | None = None,
    ) -> Observation:
        """Encode an image and build its structured 3D features on ``body``."""
        guidance = guidance or render_guidance(body, camera)
        featimg, code = encode_image(self.encoder, rgb, mask, guidance)
        disp_ch, final_ch = self.channels()
        V_np = template_points(self.template, body)
        V = torch.as_tensor(V_np, dtype=featimg.dtype)
        F_init, out0 = pool(V, featimg, camera, disp_ch)
        if self.cfg.use_displacement:
            V_disp = self.displacement(V, F_init, self.codes, camera)
        else:
            V_disp = V
        feats, out1 = pool(V_disp, featimg, camera, final_ch)
        sf = StructuredFeatures(
            positions=V_disp,
            features=feats,
            template_index=np.arange(len(self.template)),
            skin_bones=self.template.skin_bones,
            skin_weights=self.template.skin_weights,
            transforms=body.transforms,
            visibility=visibility(V_np, body, camera),
            outside=out1.numpy(),
            body_points=V,
            pixel_source=(featimg, camera, final_ch),
        )
        return Observation(sf, code, featimg, camera, body)

    def beta(self) -> torch.Tensor:
        return self.sharpness()

    def sample(self, obs: Observation, x: torch.Tensor, body: BodyState | None = None, code=None, keys=None, create_graph=False):
        """Full field sample at ``x`` against ``body`` (defaults to the observed body)."""
        body = body or obs.body
        code = obs.code if code is None else code
        return evaluate(self.field, self.shading, x, obs.sf, body, code, keys, create_graph)

    def sample_fn(self, obs: Observation, body: BodyState | None = None, code=None, create_graph=False, albedo=None):
        """Closure for the renderer: x -> (sdf, shaded color)."""
        keys = self.field.keys(obs.sf) if self.field.pooling == "attention" else None

        def fn(x):
            out = self.sample(obs, x, body, code, keys, create_graph)
            if albedo is not None:
                return out.sdf, out.shading * torch.as_tensor(albedo, dtype=out.sdf.dtype)
            return out.sdf, out.color

        return fn

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append(name)
        return groups
