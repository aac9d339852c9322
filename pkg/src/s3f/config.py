"""Flat key=value configuration with documented defaults.

Every field carries a unit and, where one exists, the full-scale value used
for the large model; desk defaults are scaled down to run on one CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


def _f(default, unit: str, full: str = ""):
    from dataclasses import field

    return field(default=default, metadata={"unit": unit, "full": full})


@dataclass(frozen=True)
class Config:
    seed: int = _f(0, "-", "n/a")
    image_size: int = _f(64, "px", "512")
    n_points: int = _f(512, "points", "18000")
    feat_dim: int = _f(32, "channels", "256")
    disp_dim: int = _f(8, "channels", "64")
    code_dim: int = _f(8, "dims", "256")
    illum_dim: int = _f(16, "dims", "8x8x512 bottleneck")
    key_dim: int = _f(64, "dims", "256")
    head_width: int = _f(128, "units", "512")
    head_depth: int = _f(4, "layers", "8")
    shading_width: int = _f(32, "units", "256")
    n_freq: int = _f(6, "frequencies", "6")
    pooling: str = _f("attention", "attention|knn3|pixel", "attention")
    use_displacement: bool = _f(True, "bool", "true")
    use_shading: bool = _f(True, "bool", "true")
    residual: bool = _f(True, "bool", "true")
    residual_scale: float = _f(0.5, "m", "n/a")
    d_max: float = _f(0.30, "m", "n/a")
    beta_init: float = _f(0.1, "m", "0.1")
    train_samples: int = _f(32, "samples/ray", "64")
    render_samples: int = _f(64, "samples/ray", "64")
    w_rgb: float = _f(10.0, "-", "10")
    w_vgg: float = _f(30.0, "-", "30")
    w_mask: float = _f(5.0, "-", "5")
    w_eik: float = _f(0.1, "-", "0.1")
    w_3drgb: float = _f(200.0, "-", "200")
    w_3dlabel: float = _f(30.0, "-", "30")
    n_pixels: int = _f(32, "pixels", "32")
    fg_fraction: float = _f(0.75, "-", "0.75")
    patch_size: int = _f(16, "px", "16")
    n_surface: int = _f(128, "points", "128")
    n_near: int = _f(128, "points", "128")
    near_sigma: float = _f(0.01, "m", "0.01")
    n_eik: int = _f(128, "points", "n/a")
    eik_sigma: float = _f(0.10, "m", "0.10")
    delta_ref: float = _f(0.0, "m (0: 2ln2*beta)", "n/a")
    lr: float = _f(1e-3, "-", "1e-4")
    lr_decay: float = _f(0.9, "-", "0.9")
    lr_decay_every: int = _f(500, "steps", "50000")
    steps: int = _f(2000, "steps", "500000")
    checkpoint_every: int = _f(500, "steps", "n/a")
    real_rot_noise: float = _f(0.15, "rad", "n/a (real fits)")
    real_trans_noise: float = _f(0.02, "m", "n/a (real fits)")
    mc_resolution: int = _f(96, "cells", "512")
    mc_pad: float = _f(0.15, "m", "n/a")
    n_scenes: int = _f(8, "scenes", "80 scans")
    scenes_dir: str = _f("scenes", "path", "n/a")
    out_dir: str = _f("runs/default", "path", "n/a")

    def updated(self, **kw) -> "Config":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **{k: _coerce(self, k, v) for k, v in kw.items()})

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def save(self, path):
        Path(path).write_text(self.to_text())


def _coerce(cfg: Config, key: str, value):
    kind = type(getattr(cfg, key))
    if not isinstance(value, str):
        return kind(value)
    if kind is bool:
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    return kind(value.strip())


def parse_pairs(lines) -> dict[str, str]:
    out = {}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides: dict | None = None) -> Config:
    cfg = Config()
    if path is not None:
        cfg = cfg.updated(**parse_pairs(Path(path).read_text().splitlines()))
    if overrides:
        cfg = cfg.updated(**overrides)
    return cfg


def describe() -> str:
    """One line per key: name, default, unit and full-scale value."""
    rows = []
    for f in fields(Config):
        full = f.metadata["full"] or "n/a"
        rows.append(
            f"  {f.name:<18} default={f.default!s:<14} unit={f.metadata['unit']:<22} full-scale={full}"
        )
    return "\n".join(rows)
