"""Procedural clothed-body scenes used as the training and evaluation corpus.

"Clothing" inflates the torso and hip capsules, which gives an exact clothed
SDF.  Surfaces carry a per-bone checker texture and are lit by an ambient plus
directional Lambert model, and images are produced by ray casting the clothed
SDF.  The unclothed body with the same pose is what the pipeline receives as
its body estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .geometry import (
    BodyState,
    Camera,
    KinematicTree,
    Pose,
    Shape,
    body_normals,
    body_sdf,
    capsule_distances,
    default_tree,
    random_pose,
    sphere_trace,
    surface_samples,
)
from .features import pixel_grid

CLOTHED_BONES = ("root", "spine1", "spine2", "l_thigh", "r_thigh")
INFLATION_RANGE = (0.15, 0.40)
FRONTAL_PROB = 0.4
MAX_ELEVATION = np.deg2rad(20.0)
CHECKER = (4, 6)  # cells along the bone, around the bone

SURFACE_WIDTH = 9  # xyz, albedo, shaded


@dataclass
class Light:
    direction: np.ndarray  # unit, pointing toward the light
    ambient: float
    diffuse: float

    def shade(self, normals: np.ndarray) -> np.ndarray:
        return self.ambient + self.diffuse * np.clip(normals @ self.direction, 0.0, None)


@dataclass
class SceneBundle:
    scene_id: str
    rgb: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) in {0, 1}
    camera: Camera
    pose: Pose
    shape: Shape
    inflation: np.ndarray  # (J,) relative radius increase of the clothed surface
    light: Light
    palette: np.ndarray  # (J, 2, 3) checker colors per bone
    surface: np.ndarray | None = None  # (M, 9) GT xyz, albedo, shaded
    label_points: np.ndarray | None = None  # (K, 3)
    labels: np.ndarray | None = None  # (K,) 1 inside, 0 outside
    seed: int = 0
    tree: KinematicTree = field(default_factory=default_tree)

    def body(self) -> BodyState:
        """The unclothed body estimate."""
        return BodyState(self.tree, self.pose, self.shape)

    def clothed(self) -> BodyState:
        return BodyState(self.tree, self.pose, self.shape, self.inflation)


def checker_albedo(x: np.ndarray, clothed: BodyState, palette: np.ndarray) -> np.ndarray:
    """Per-bone checker over (axial fraction, angle) of the nearest clothed capsule."""
    import torch

    d = capsule_distances(torch.as_tensor(x, dtype=torch.float64), *clothed.torch_capsules())
    bones = d.argmin(-1).numpy()
    u, phi = clothed.rest_frame_coords(x, bones)
    nu, nphi = CHECKER
    cell = (np.minimum(np.floor(u * nu), nu - 1) + np.floor(phi / (2 * np.pi) * nphi)).astype(int) % 2
    return palette[bones, cell]


def shaded_color(x: np.ndarray, clothed: BodyState, palette: np.ndarray, light: Light):
    alb = checker_albedo(x, clothed, palette)
    return alb, alb * light.shade(body_normals(x, clothed))[:, None]


def ray_cast(clothed: BodyState, camera: Camera):
    """(hit (H*W,), hit points (n, 3)) of the exact clothed SDF."""
    dirs = camera.pixel_dirs(pixel_grid(camera.height, camera.width))
    o = camera.center
    hit, t = sphere_trace(lambda x: body_sdf(x, clothed), o, dirs, np.linalg.norm(o) + 3.0, max_steps=512, eps=1e-6)
    return hit, o + t[hit, None] * dirs[hit]


def render_scene(clothed: BodyState, camera: Camera, palette, light) -> tuple[np.ndarray, np.ndarray]:
    H, W = camera.height, camera.width
    hit, x = ray_cast(clothed, camera)
    rgb = np.zeros((H * W, 3))
    if hit.any():
        rgb[hit] = shaded_color(x, clothed, palette, light)[1]
    return np.clip(rgb, 0, 1).reshape(H, W, 3), hit.reshape(H, W).astype(np.float64)


def random_camera(rng: np.random.Generator, size: int, frontal_prob: float = FRONTAL_PROB) -> Camera:
    if rng.random() < frontal_prob:
        return Camera.orbit(0.0, 0.0, size=size, focal=100.0 * size / 64)
    az = rng.uniform(0, 2 * np.pi)
    el = rng.uniform(-MAX_ELEVATION, MAX_ELEVATION)
    return Camera.orbit(az, el, size=size, focal=100.0 * size / 64)


def gen_scene(
    seed: int,
    size: int = 64,
    n_surface: int = 8192,
    n_labels: int = 4096,
    frontal_prob: float = FRONTAL_PROB,
    tree: KinematicTree | None = None,
) -> SceneBundle:
    tree = tree or default_tree()
    rng = np.random.default_rng(seed)
    J = tree.num_bones
    pose = random_pose(tree, rng, 1.0)
    shape = Shape(np.full(J, rng.uniform(0.95, 1.05)), np.full(J, rng.uniform(0.95, 1.05)))
    inflation = np.zeros(J)
    for name in CLOTHED_BONES:
        inflation[tree.names.index(name)] = rng.uniform(*INFLATION_RANGE)
    base = rng.uniform(0.25, 0.95, size=(J, 3))
    palette = np.stack([base, base * rng.uniform(0.35, 0.65, size=(J, 1))], axis=1)
    d = rng.normal(size=3)
    d[2] = abs(d[2]) + 0.5  # keep the light broadly on the camera-facing hemisphere of the body front
    light = Light(d / np.linalg.norm(d), rng.uniform(0.3, 0.5), rng.uniform(0.4, 0.6))
    camera = random_camera(rng, size, frontal_prob)
    clothed = BodyState(tree, pose, shape, inflation)
    rgb, mask = render_scene(clothed, camera, palette, light)
    if mask.sum() == 0:
        raise RuntimeError(f"scene {seed}: body not visible")
    xs = surface_samples(clothed, n_surface, rng)
    alb, shaded = shaded_color(xs, clothed, palette, light)
    near = surface_samples(clothed, n_labels, rng) + rng.normal(0.0, 0.01, (n_labels, 3))
    labels = (body_sdf(near, clothed) < 0).astype(np.int64)
    return SceneBundle(
        scene_id=f"scene_{seed:04d}",
        rgb=rgb, mask=mask, camera=camera, pose=pose, shape=shape, inflation=inflation, light=light,
        palette=palette, surface=np.concatenate([xs, alb, shaded], 1), label_points=near, labels=labels,
        seed=seed, tree=tree,
    )


def perturbed_body(bundle: SceneBundle, rot: float = 0.15, trans: float = 0.02) -> BodyState:
    """Fixed per-scene noisy body fit for the image-only branch."""
    rng = np.random.default_rng([bundle.seed, 991])
    rv = bundle.pose.rotvecs + rng.uniform(-rot, rot, bundle.pose.rotvecs.shape)
    t = np.asarray(bundle.pose.translation) + rng.uniform(-trans, trans, 3)
    return BodyState(bundle.tree, Pose(rv, t), bundle.shape)


def save_scene(bundle: SceneBundle, root) -> Path:
    out = Path(root) / bundle.scene_id
    out.mkdir(parents=True, exist_ok=True)
    c = bundle.camera
    io.write_ppm(out / "rgb.ppm", bundle.rgb)
    io.write_pgm(out / "mask.pgm", bundle.mask)
    io.write_record(
        out / "camera.txt",
        {"focal": c.focal, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height, "R": c.R, "t": c.t},
    )
    io.write_record(
        out / "body.txt",
        {
            "seed": bundle.seed,
            "rotvecs": bundle.pose.rotvecs,
            "translation": bundle.pose.translation,
            "length_scale": bundle.shape.length_scale,
            "radius_scale": bundle.shape.radius_scale,
            "inflation": bundle.inflation,
            "palette": bundle.palette,
        },
    )
    io.write_record(
        out / "light.txt",
        {"direction": bundle.light.direction, "ambient": bundle.light.ambient, "diffuse": bundle.light.diffuse},
    )
    if bundle.surface is not None:
        io.write_f32_records(out / "gt_surface.bin", bundle.surface)
    if bundle.label_points is not None:
        io.write_labels(out / "gt_labels.bin", bundle.label_points, bundle.labels)
    return out


def load_camera(path) -> Camera:
    r = io.read_record(path)
    return Camera(
        float(r["focal"][0]), float(r["cx"][0]), float(r["cy"][0]), int(r["width"][0]), int(r["height"][0]),
        r["R"].reshape(3, 3), r["t"],
    )


def load_scene(path, with_gt: bool = True, tree: KinematicTree | None = None) -> SceneBundle:
    path = Path(path)
    if not (path / "rgb.ppm").exists():
        raise FileNotFoundError(f"{path}: not a scene directory (rgb.ppm missing)")
    tree = tree or default_tree()
    J = tree.num_bones
    b = io.read_record(path / "body.txt")
    lt = io.read_record(path / "light.txt")
    # 8-bit quantisation of the stored image is part of the observation
    rgb = io.read_ppm(path / "rgb.ppm")
    mask = (io.read_pgm(path / "mask.pgm") > 0.5).astype(np.float64)
    surface = labels = label_points = None
    if with_gt and (path / "gt_surface.bin").exists():
        surface = io.read_f32_records(path / "gt_surface.bin", SURFACE_WIDTH)
        label_points, labels = io.read_labels(path / "gt_labels.bin")
    return SceneBundle(
        scene_id=path.name, rgb=rgb, mask=mask, camera=load_camera(path / "camera.txt"),
        pose=Pose(b["rotvecs"].reshape(J, 3), b["translation"]),
        shape=Shape(b["length_scale"], b["radius_scale"]), inflation=b["inflation"],
        light=Light(lt["direction"], float(lt["ambient"][0]), float(lt["diffuse"][0])),
        palette=b["palette"].reshape(J, 2, 3), surface=surface, label_points=label_points, labels=labels,
        seed=int(b["seed"][0]), tree=tree,
    )


def list_scenes(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory {root} does not exist")
    return sorted(p for p in root.iterdir() if (p / "rgb.ppm").exists())
