"""Registered gradient checks: every differentiable op plus the composed loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import nncore
from .config import Config
from .features import sample_feature
from .field import ShadingNet
from .geometry import BodyState, Camera, Pose, Shape, body_sdf, default_tree, project_torch, random_pose
from .render import density, integrate
from .structured import Displacement

OP_TOL = 1e-3
LOSS_TOL = 1e-2


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def _rand(g: torch.Generator, *shape, scale=1.0):
    return scale * torch.randn(*shape, generator=g, dtype=torch.float64)


def _body():
    tree = default_tree()
    return BodyState(tree, random_pose(tree, np.random.default_rng(3), 0.5), Shape.unit(tree.num_bones))


def _op_checks() -> dict[str, Callable[[], float]]:
    g = torch.Generator().manual_seed(0)
    checks: dict[str, Callable[[], float]] = {}

    x, W, b = _rand(g, 5, 4), _rand(g, 3, 4), _rand(g, 3)
    checks["linear"] = lambda: nncore.grad_check(lambda x, W, b: (nncore.linear(x, W, b) ** 2).sum(), [x, W, b])
    for kind in ("relu", "leaky_relu", "swish", "sigmoid"):
        z = _rand(g, 20)
        z = z + 0.05 * torch.sign(z)  # keep away from the kinks at 0
        checks[f"activation_{kind}"] = lambda z=z, k=kind: nncore.grad_check(lambda z: (nncore.activation(z, k) * torch.arange(20.0, dtype=z.dtype)).sum(), [z])
    s = _rand(g, 3, 6)
    wts = _rand(g, 3, 6)
    checks["softmax"] = lambda: nncore.grad_check(lambda s: (nncore.softmax(s) * wts).sum(), [s])
    p = _rand(g, 4, 3, scale=0.3)
    checks["positional_encoding"] = lambda: nncore.grad_check(lambda p: nncore.positional_encoding(p).pow(2).sum(), [p])
    q, k, v = _rand(g, 7, 8), _rand(g, 5, 8), _rand(g, 5, 3)
    checks["attention"] = lambda: nncore.grad_check(lambda q, k, v: nncore.attention(q, k, v, chunk=3).pow(2).sum(), [q, k, v])

    sv = torch.linspace(-0.3, 0.3, 13, dtype=torch.float64) + 0.0123
    beta = torch.tensor(0.07, dtype=torch.float64)
    checks["density"] = lambda: nncore.grad_check(lambda s, bt: density(s, bt).sum(), [sv, beta])
    sig, col, dl = _rand(g, 2, 6).abs() * 5, torch.rand(2, 6, 3, generator=g, dtype=torch.float64), torch.full((2, 1), 0.05, dtype=torch.float64)
    checks["integrate"] = lambda: nncore.grad_check(lambda s, c: sum(t.pow(2).sum() for t in integrate(c, s, dl)), [sig, col])

    fimg = _rand(g, 6, 5, 4)
    uv = torch.tensor([[1.3, 2.6], [3.7, 0.4], [0.2, 4.1]], dtype=torch.float64)
    checks["sample_feature"] = lambda: nncore.grad_check(lambda f, u: sample_feature(f, u)[0].pow(2).sum(), [fimg, uv])
    cam = Camera.orbit(0.4, 0.1)
    xp = _rand(g, 6, 3, scale=0.4)
    checks["project"] = lambda: nncore.grad_check(lambda x: project_torch(cam, x)[0].pow(2).sum() * 1e-3, [xp])

    body = _body()
    xb = torch.as_tensor(body.starts[:6] + 0.21 * np.random.default_rng(1).normal(size=(6, 3)))
    checks["body_sdf"] = lambda: nncore.grad_check(lambda x: body_sdf(x, body).pow(2).sum(), [xb])

    def disp_check():
        torch.manual_seed(1)
        d = Displacement(4, 3, 16).double()
        torch.nn.init.normal_(d.fc2.weight, std=0.3)
        V, F, e = _rand(g, 5, 3, scale=0.4), _rand(g, 5, 4), _rand(g, 5, 3)
        return max(nncore.module_grad_check(d, lambda m: m(V, F, e, cam).norm(dim=-1).sum(), h=1e-6, max_coords=12).values())

    checks["displacement"] = disp_check

    def shading_check():
        torch.manual_seed(2)
        net = ShadingNet(5, 8).double()
        n, L = _rand(g, 6, 3), _rand(g, 5)
        return nncore.grad_check(lambda n, L: net(n, L).sum(), [n, L])

    checks["shading"] = shading_check

    def field_grad_check():
        model, obs = _micro_model()
        x = torch.as_tensor(obs.body.starts[:4] + 0.05, dtype=torch.float64)
        return nncore.grad_check(lambda x: model.field(x, obs.sf, obs.body).sdf.sum(), [x], h=1e-6)

    checks["field_sdf_x"] = field_grad_check
    return checks


def _perturb(model: torch.nn.Module, scale: float = 0.05, seed: int = 0):
    """Move off the zero-init layers so every parameter gets a nonzero gradient."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def micro_config() -> Config:
    return Config(n_points=96, n_pixels=2, patch_size=4, train_samples=6, n_surface=4, n_near=4, n_eik=4, head_width=32, key_dim=16)


def _micro_model():
    from .model import S3FModel
    from .scenes import gen_scene

    cfg = micro_config()
    model = S3FModel(cfg).double()
    _perturb(model)
    sc = gen_scene(5, size=32, n_surface=256, n_labels=256)
    obs = model.observe(sc.rgb, sc.mask, sc.body(), sc.camera)
    return model, obs


def composed_loss_check(max_coords: int = 3) -> float:
    """Total (synthetic + real) loss gradient for every parameter tensor of a float64 micro model."""
    from .model import S3FModel
    from .scenes import gen_scene
    from .train import step_losses

    cfg = micro_config()
    model = S3FModel(cfg).double()
    _perturb(model)
    scenes = [gen_scene(5, size=32, n_surface=256, n_labels=256)]

    def loss_fn(m):
        total, _ = step_losses(m, scenes, cfg, np.random.default_rng(7))
        return total

    errs = nncore.module_grad_check(model, loss_fn, h=1e-6, max_coords=max_coords)
    return max(errs.values())


def run_suite(include_loss: bool = True) -> list[CheckResult]:
    results = []
    for name, fn in _op_checks().items():
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, float(err), OP_TOL, time.perf_counter() - t0))
    if include_loss:
        t0 = time.perf_counter()
        err = composed_loss_check()
        results.append(CheckResult("composed_loss", float(err), LOSS_TOL, time.perf_counter() - t0))
    return results
