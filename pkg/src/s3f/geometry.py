"""Articulated capsule body: kinematics, skinning, exact SDF, cameras, visibility.

The body is a kinematic tree with exactly one capsule ("bone") per joint.
Bone ``i`` starts at joint ``i`` and extends ``length * length_scale`` along
its rest axis.  The zero pose with a given shape is the canonical pose, so
every world-from-rest transform is the identity there.

Geometry runs in float64 numpy; :func:`body_sdf` is written in torch so it can
sit inside the autograd graph of the implicit field and follows the dtype of
its query points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import torch
from scipy.spatial.transform import Rotation

# (name, parent, rest offset from parent joint, rest axis, length m, radius m)
_BONES = [
    ("root", -1, (0.0, 0.0, 0.0), (0, 1, 0), 0.10, 0.12),
    ("spine1", 0, (0.0, 0.10, 0.0), (0, 1, 0), 0.15, 0.12),
    ("spine2", 1, (0.0, 0.15, 0.0), (0, 1, 0), 0.15, 0.12),
    ("neck", 2, (0.0, 0.15, 0.0), (0, 1, 0), 0.20, 0.06),
    ("head", 3, (0.0, 0.20, 0.0), (0, 1, 0), 0.08, 0.09),
    ("l_upperarm", 2, (0.17, 0.12, 0.0), (1, 0, 0), 0.28, 0.05),
    ("l_lowerarm", 5, (0.28, 0.0, 0.0), (1, 0, 0), 0.25, 0.04),
    ("l_hand", 6, (0.25, 0.0, 0.0), (1, 0, 0), 0.08, 0.035),
    ("r_upperarm", 2, (-0.17, 0.12, 0.0), (-1, 0, 0), 0.28, 0.05),
    ("r_lowerarm", 8, (-0.28, 0.0, 0.0), (-1, 0, 0), 0.25, 0.04),
    ("r_hand", 9, (-0.25, 0.0, 0.0), (-1, 0, 0), 0.08, 0.035),
    ("l_thigh", 0, (0.09, -0.02, 0.0), (0, -1, 0), 0.42, 0.07),
    ("l_shin", 11, (0.0, -0.42, 0.0), (0, -1, 0), 0.40, 0.05),
    ("l_foot", 12, (0.0, -0.42, 0.02), (0, 0, 1), 0.14, 0.04),
    ("r_thigh", 0, (-0.09, -0.02, 0.0), (0, -1, 0), 0.42, 0.07),
    ("r_shin", 14, (0.0, -0.42, 0.0), (0, -1, 0), 0.40, 0.05),
    ("r_foot", 15, (0.0, -0.42, 0.02), (0, 0, 1), 0.14, 0.04),
]

BLEND_ZONE = 0.1  # axial fraction near each joint where two bones blend
VIS_EPS = 5e-3


class DegeneratePoseError(ValueError):
    """Blended skinning transform is (near) singular."""


@dataclass(frozen=True)
class KinematicTree:
    names: tuple[str, ...]
    parents: np.ndarray  # (J,) int, root = -1
    offsets: np.ndarray  # (J, 3) rest offset from the parent joint
    axes: np.ndarray  # (J, 3) unit rest direction of each bone
    lengths: np.ndarray  # (J,)
    radii: np.ndarray  # (J,)

    def __post_init__(self):
        p = np.asarray(self.parents)
        if (p == -1).sum() != 1 or p[0] != -1:
            raise ValueError("kinematic tree needs exactly one root at index 0")
        if np.any(p[1:] >= np.arange(1, len(p))) or np.any(p[1:] < 0):
            raise ValueError("parent index must be smaller than child index")
        if np.any(self.lengths <= 0) or np.any(self.radii <= 0):
            raise ValueError("bone lengths and radii must be positive")

    @property
    def num_bones(self) -> int:
        return len(self.parents)

    @cached_property
    def continuation(self) -> np.ndarray:
        """First child of each bone (the bone its tip blends into), or -1."""
        nxt = np.full(self.num_bones, -1)
        for j in range(self.num_bones - 1, 0, -1):
            nxt[self.parents[j]] = j
        return nxt


def default_tree() -> KinematicTree:
    """17-bone capsule skeleton standing along +y and facing +z."""
    names, parents, offsets, axes, lengths, radii = zip(*_BONES)
    ax = np.asarray(axes, float)
    return KinematicTree(
        names=tuple(names),
        parents=np.asarray(parents),
        offsets=np.asarray(offsets, float),
        axes=ax / np.linalg.norm(ax, axis=1, keepdims=True),
        lengths=np.asarray(lengths, float),
        radii=np.asarray(radii, float),
    )


@dataclass
class Pose:
    rotvecs: np.ndarray  # (J, 3) axis-angle per joint, radians
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def zero(cls, num_joints: int) -> "Pose":
        return cls(np.zeros((num_joints, 3)))

    def canonical(self) -> "Pose":
        """Same rotations with every angle wrapped into [0, pi]."""
        rv = Rotation.from_rotvec(self.rotvecs).as_rotvec()
        return Pose(rv, np.array(self.translation, float))


@dataclass
class Shape:
    length_scale: np.ndarray  # (J,)
    radius_scale: np.ndarray  # (J,)

    @classmethod
    def unit(cls, num_bones: int) -> "Shape":
        return cls(np.ones(num_bones), np.ones(num_bones))

    def validate(self):
        for s in (self.length_scale, self.radius_scale):
            if np.any(s < 0.5) or np.any(s > 2.0):
                raise ValueError("shape scales must lie in [0.5, 2.0]")


def rest_joints(tree: KinematicTree, shape: Shape) -> np.ndarray:
    """Joint positions in the canonical (zero) pose.

    A bone's length scale stretches the offsets of all of its children.
    """
    J = np.zeros((tree.num_bones, 3))
    J[0] = tree.offsets[0]
    for i in range(1, tree.num_bones):
        p = tree.parents[i]
        J[i] = J[p] + tree.offsets[i] * shape.length_scale[p]
    return J


def forward_kinematics(tree: KinematicTree, pose: Pose, shape: Shape) -> np.ndarray:
    """Per-bone world-from-rest rigid transforms, shape (J, 4, 4)."""
    if not (np.all(np.isfinite(pose.rotvecs)) and np.all(np.isfinite(pose.translation))):
        raise ValueError("pose contains non-finite values")
    J = rest_joints(tree, shape)
    R = Rotation.from_rotvec(pose.rotvecs).as_matrix()
    G = np.zeros((tree.num_bones, 4, 4))
    for i in range(tree.num_bones):
        local = np.eye(4)
        local[:3, :3] = R[i]
        p = tree.parents[i]
        if p < 0:
            local[:3, 3] = J[i] + pose.translation
            G[i] = local
        else:
            local[:3, 3] = J[i] - J[p]
            G[i] = G[p] @ local
    unrest = np.tile(np.eye(4), (tree.num_bones, 1, 1))
    unrest[:, :3, 3] = -J
    return G @ unrest


def _perp_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


class BodyState:
    """Posed capsule body. Immutable after construction."""

    def __init__(self, tree: KinematicTree, pose: Pose, shape: Shape, radius_inflation=None):
        self.tree = tree
        self.pose = pose
        self.shape = shape
        self.transforms = forward_kinematics(tree, pose, shape)
        self.rest_joints = rest_joints(tree, shape)
        self.bone_lengths = tree.lengths * shape.length_scale
        radii = tree.radii * shape.radius_scale
        if radius_inflation is not None:
            radii = radii * (1.0 + np.asarray(radius_inflation))
        self.radii = radii
        self.rest_tips = self.rest_joints + tree.axes * self.bone_lengths[:, None]
        self.starts = apply_transforms(self.transforms, self.rest_joints)
        self.ends = apply_transforms(self.transforms, self.rest_tips)
        self._torch_cache: dict = {}

    @classmethod
    def canonical(cls, tree: KinematicTree, shape: Shape | None = None) -> "BodyState":
        shape = shape or Shape.unit(tree.num_bones)
        return cls(tree, Pose.zero(tree.num_bones), shape)

    def torch_capsules(self, dtype=torch.float64):
        if dtype not in self._torch_cache:
            self._torch_cache[dtype] = tuple(
                torch.as_tensor(a, dtype=dtype) for a in (self.starts, self.ends, self.radii)
            )
        return self._torch_cache[dtype]

    def bbox(self, pad: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        pts = np.concatenate([self.starts, self.ends])
        r = np.concatenate([self.radii, self.radii])[:, None]
        return (pts - r).min(0) - pad, (pts + r).max(0) + pad

    def rest_frame_coords(self, x: np.ndarray, bones: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cylindrical (axial fraction, angle) of posed points ``x`` w.r.t. ``bones``."""
        Tinv = np.linalg.inv(self.transforms[bones])
        xr = np.einsum("nij,nj->ni", Tinv[:, :3, :3], x) + Tinv[:, :3, 3]
        rel = xr - self.rest_joints[bones]
        ax = self.tree.axes[bones]
        u = np.clip((rel * ax).sum(-1) / self.bone_lengths[bones], 0.0, 1.0)
        phi = np.empty(len(x))
        for b in np.unique(bones):
            m = bones == b
            e1, e2 = _perp_frame(self.tree.axes[b])
            phi[m] = np.arctan2(rel[m] @ e2, rel[m] @ e1) % (2 * np.pi)
        return u, phi


def apply_transforms(T: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", T[..., :3, :3], x) + T[..., :3, 3]


def capsule_distances(x, starts, ends, radii):
    """Signed distance of ``x`` (..., 3) to every capsule, shape (..., J)."""
    ab = ends - starts
    ap = x[..., None, :] - starts
    h = ((ap * ab).sum(-1) / (ab * ab).sum(-1)).clamp(0.0, 1.0)
    return torch.linalg.vector_norm(ap - h[..., None] * ab, dim=-1) - radii


def body_sdf(x, body: BodyState):
    """Exact signed distance to the union of posed capsules (negative inside).

    Accepts a torch tensor (differentiable, dtype preserved) or an array-like,
    in which case a float64 numpy array is returned.
    """
    if isinstance(x, torch.Tensor):
        caps = body.torch_capsules(x.dtype)
        return capsule_distances(x, *caps).min(-1).values
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64))
    return capsule_distances(xt, *body.torch_capsules()).min(-1).values.numpy()


def blend_weights(u: np.ndarray, bones: np.ndarray, tree: KinematicTree) -> tuple[np.ndarray, np.ndarray]:
    """Skinning weights over at most two bones from the axial fraction ``u``.

    Weight 1 in the bone interior, blending linearly to 50/50 at the joint
    shared with the parent (u -> 0) or the continuing child (u -> 1).
    """
    n = len(u)
    pair = np.stack([bones, bones], axis=1)
    w = np.zeros((n, 2))
    w[:, 0] = 1.0
    parent = tree.parents[bones]
    child = tree.continuation[bones]
    lo = (u < BLEND_ZONE) & (parent >= 0)
    hi = (u > 1.0 - BLEND_ZONE) & (child >= 0)
    w[lo, 0] = 0.5 + 0.5 * u[lo] / BLEND_ZONE
    pair[lo, 1] = parent[lo]
    w[hi, 0] = 0.5 + 0.5 * (1.0 - u[hi]) / BLEND_ZONE
    pair[hi, 1] = child[hi]
    w[:, 1] = 1.0 - w[:, 0]
    return pair, w


def surface_weights(x: np.ndarray, body: BodyState) -> tuple[np.ndarray, np.ndarray]:
    """Skinning weights for arbitrary posed points via their nearest capsule."""
    d = capsule_distances(torch.as_tensor(x, dtype=torch.float64), *body.torch_capsules())
    bones = d.argmin(-1).numpy()
    u, _ = body.rest_frame_coords(x, bones)
    return blend_weights(u, bones, body.tree)


@dataclass
class SurfaceTemplate:
    bone: np.ndarray  # (N,) owning bone
    u: np.ndarray  # (N,) axial fraction
    phi: np.ndarray  # (N,) angle around the bone axis
    skin_bones: np.ndarray  # (N, 2)
    skin_weights: np.ndarray  # (N, 2)
    canonical: np.ndarray  # (N, 3) zero-pose position

    def __len__(self):
        return len(self.bone)


def allocate_counts(areas: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder split of ``n`` proportional to ``areas``."""
    quota = n * areas / areas.sum()
    counts = np.floor(quota).astype(int)
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def sample_surface_template(
    tree: KinematicTree, shape: Shape, n: int = 512, seed: int = 0
) -> SurfaceTemplate:
    """Sample ``n`` points on the exposed cylindrical sides of the canonical body.

    Candidates buried inside another capsule are redrawn, so every point lies
    on the union surface in the zero pose.
    """
    if n < 4 * tree.num_bones:
        raise ValueError(f"need at least {4 * tree.num_bones} template points, got {n}")
    body = BodyState.canonical(tree, shape)
    areas = 2 * np.pi * body.radii * body.bone_lengths
    counts = allocate_counts(areas, n)
    rng = np.random.default_rng(seed)
    bones, us, phis, pts = [], [], [], []
    for b, c in enumerate(counts):
        if c == 0:
            continue
        e1, e2 = _perp_frame(tree.axes[b])
        got_u, got_phi, got_x = [], [], []
        for _ in range(1000):
            u = rng.random(4 * c)
            phi = rng.random(4 * c) * 2 * np.pi
            x = (
                body.starts[b]
                + u[:, None] * (body.ends[b] - body.starts[b])
                + body.radii[b] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
            )
            ok = body_sdf(x, body) > -1e-9
            got_u.extend(u[ok])
            got_phi.extend(phi[ok])
            got_x.extend(x[ok])
            if len(got_u) >= c:
                break
        else:
            raise ValueError(f"bone {tree.names[b]} is fully buried; cannot sample its surface")
        bones.append(np.full(c, b))
        us.append(np.asarray(got_u[:c]))
        phis.append(np.asarray(got_phi[:c]))
        pts.append(np.asarray(got_x[:c]))
    bone = np.concatenate(bones)
    u = np.concatenate(us)
    pair, w = blend_weights(u, bone, tree)
    return SurfaceTemplate(bone, u, np.concatenate(phis), pair, w, np.concatenate(pts))


def blended_transforms(skin_bones: np.ndarray, skin_weights: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    return np.einsum("nk,nkij->nij", skin_weights, transforms[skin_bones])


def skin_points(template: SurfaceTemplate, transforms: np.ndarray) -> np.ndarray:
    """Linear blend skinning of the canonical template points."""
    M = blended_transforms(template.skin_bones, template.skin_weights, transforms)
    return apply_transforms(M, template.canonical)


def unpose_points(points: np.ndarray, skin_bones: np.ndarray, skin_weights: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    """Invert the per-point blended transform, mapping posed points to canonical space."""
    M = blended_transforms(skin_bones, skin_weights, transforms)
    det = np.linalg.det(M[:, :3, :3])
    if np.any(np.abs(det) <= 1e-8):
        raise DegeneratePoseError(f"{int((np.abs(det) <= 1e-8).sum())} points have a singular skinning blend")
    rhs = points - M[:, :3, 3]
    return np.linalg.solve(M[:, :3, :3], rhs[..., None])[..., 0]


def repose_points(points, skin_bones, skin_weights, source_T, target_T) -> np.ndarray:
    canon = unpose_points(points, skin_bones, skin_weights, source_T)
    return apply_transforms(blended_transforms(skin_bones, skin_weights, target_T), canon)


@dataclass
class Camera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # world-to-camera rotation, camera looks down +z, image y down
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, float)
        self.t = np.asarray(self.t, float)
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.R.T + self.t

    def pixel_dirs(self, pixels: np.ndarray) -> np.ndarray:
        """Unit world-space ray directions through (row, col) pixel centers."""
        pixels = np.asarray(pixels)
        d_cam = np.stack(
            [(pixels[:, 1] - self.cx) / self.focal, (pixels[:, 0] - self.cy) / self.focal, np.ones(len(pixels))],
            axis=1,
        )
        d = d_cam @ self.R
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), focal=100.0, size=64) -> "Camera":
        eye, target, up = (np.asarray(v, float) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        y = -(up - (up @ z) * z)
        y /= np.linalg.norm(y)
        x = np.cross(y, z)
        R = np.stack([x, y, z])
        c = (size - 1) / 2.0
        return cls(focal, c, c, size, size, R, -R @ eye)

    @classmethod
    def orbit(cls, azimuth: float, elevation: float = 0.0, distance: float = 3.2, target=(0.0, -0.05, 0.0), **kw) -> "Camera":
        target = np.asarray(target, float)
        eye = target + distance * np.array(
            [np.sin(azimuth) * np.cos(elevation), np.sin(elevation), np.cos(azimuth) * np.cos(elevation)]
        )
        return cls.look_at(eye, target, **kw)


def project(camera: Camera, x) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection. Returns (uv (..., 2), in_front mask)."""
    xc = camera.to_camera(x)
    z = xc[..., 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    uv = np.stack([camera.focal * xc[..., 0] / zs + camera.cx, camera.focal * xc[..., 1] / zs + camera.cy], -1)
    return uv, front


def project_torch(camera: Camera, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable pinhole projection for torch points."""
    R = torch.as_tensor(camera.R, dtype=x.dtype)
    t = torch.as_tensor(camera.t, dtype=x.dtype)
    xc = x @ R.T + t
    z = xc[..., 2]
    front = z > 1e-6
    zs = torch.where(front, z, torch.ones_like(z))
    uv = torch.stack([camera.focal * xc[..., 0] / zs + camera.cx, camera.focal * xc[..., 1] / zs + camera.cy], -1)
    return uv, front


def sphere_trace(sdf, origins, dirs, t_max, max_steps: int = 256, eps: float = 1e-4):
    """Sphere-trace rays; returns (hit mask, t). ``sdf`` maps (n, 3) float64 -> (n,)."""
    origins = np.broadcast_to(origins, dirs.shape)
    t = np.zeros(len(dirs))
    t_max = np.broadcast_to(t_max, t.shape)
    hit = np.zeros(len(dirs), bool)
    active = np.ones(len(dirs), bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        s = sdf(origins[idx] + t[idx, None] * dirs[idx])
        close = s < eps
        hit[idx[close]] = True
        t[idx] += np.where(close, 0.0, s)
        active[idx[close]] = False
        active[idx[t[idx] > t_max[idx]]] = False
    return hit, t


def visibility(points: np.ndarray, body: BodyState, camera: Camera, eps: float = VIS_EPS) -> np.ndarray:
    """1 where the first body hit from the camera center lies within ``eps`` of the point."""
    o = camera.center
    delta = points - o
    dist = np.linalg.norm(delta, axis=1)
    dirs = delta / dist[:, None]
    hit, t = sphere_trace(lambda x: body_sdf(x, body), o, dirs, dist + eps)
    occluded = hit & (t < dist - eps)
    return (~occluded).astype(np.float64)


def visibility_raymarch(points: np.ndarray, body: BodyState, camera: Camera, step: float = 1e-3, eps: float = VIS_EPS):
    """Dense fixed-step ray-march reference for :func:`visibility`."""
    o = camera.center
    out = np.empty(len(points))
    for i, p in enumerate(points):
        d = p - o
        dist = np.linalg.norm(d)
        ts = np.arange(0.0, dist - eps, step)
        out[i] = 0.0 if np.any(body_sdf(o + ts[:, None] * (d / dist), body) < 0) else 1.0
    return out


def surface_samples(body: BodyState, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform points on the capsule-union surface, caps included."""
    areas = 2 * np.pi * body.radii * body.bone_lengths + 4 * np.pi * body.radii**2
    out = []
    total = 0
    while total < n:
        m = 2 * n
        b = rng.choice(len(areas), size=m, p=areas / areas.sum())
        v = rng.normal(size=(m, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        # split each capsule into side and caps by area
        side_frac = (2 * np.pi * body.radii * body.bone_lengths / areas)[b]
        on_side = rng.random(m) < side_frac
        ab = body.ends[b] - body.starts[b]
        axis = ab / np.linalg.norm(ab, axis=1, keepdims=True)
        radial = v - (v * axis).sum(1, keepdims=True) * axis
        radial /= np.linalg.norm(radial, axis=1, keepdims=True)
        h = rng.random(m)
        side = body.starts[b] + h[:, None] * ab + body.radii[b, None] * radial
        cap_end = np.where(((v * axis).sum(1) > 0)[:, None], body.ends[b], body.starts[b])
        cap = cap_end + body.radii[b, None] * v
        x = np.where(on_side[:, None], side, cap)
        keep = np.abs(body_sdf(x, body)) < 1e-9
        out.append(x[keep])
        total += keep.sum()
    return np.concatenate(out)[:n]


def body_normals(x: np.ndarray, body: BodyState) -> np.ndarray:
    """Unit outward SDF gradient (autograd through the exact capsule union)."""
    with torch.enable_grad():  # also callable from no_grad evaluation code
        xt = torch.as_tensor(x, dtype=torch.float64).detach().requires_grad_(True)
        (g,) = torch.autograd.grad(body_sdf(xt, body).sum(), xt)
    g = g.numpy()
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def random_pose(tree: KinematicTree, rng: np.random.Generator, scale: float = 1.0) -> Pose:
    """Bounded random pose: small torso bends, larger limb swings."""
    rv = np.zeros((tree.num_bones, 3))
    for i, name in enumerate(tree.names):
        if name in ("spine1", "spine2", "neck", "head"):
            rv[i] = rng.uniform(-0.15, 0.15, 3)
        elif name.endswith("upperarm"):
            sign = 1.0 if name.startswith("l") else -1.0
            rv[i] = [rng.uniform(-0.3, 0.3), rng.uniform(-0.4, 0.4), sign * rng.uniform(-1.1, 0.2)]
        elif name.endswith("lowerarm"):
            rv[i] = [0.0, rng.uniform(-0.8, 0.1) * (1 if name.startswith("l") else -1), 0.0]
        elif name.endswith("thigh"):
            rv[i] = [rng.uniform(-0.5, 0.3), 0.0, rng.uniform(-0.15, 0.15) * (1 if name.startswith("l") else -1)]
        elif name.endswith("shin"):
            rv[i] = [rng.uniform(0.0, 0.6), 0.0, 0.0]
        elif name != "root":
            rv[i] = rng.uniform(-0.2, 0.2, 3)
    return Pose(rv * scale)


def bone_index(tree: KinematicTree, names: Sequence[str]) -> list[int]:
    return [tree.names.index(n) for n in names]


def template_canonical(template: SurfaceTemplate, body: BodyState) -> np.ndarray:
    """Template (bone, u, phi) coordinates placed on ``body``'s canonical capsules."""
    out = np.empty((len(template), 3))
    for b in np.unique(template.bone):
        m = template.bone == b
        e1, e2 = _perp_frame(body.tree.axes[b])
        phi = template.phi[m]
        out[m] = (
            body.rest_joints[b]
            + template.u[m, None] * body.bone_lengths[b] * body.tree.axes[b]
            + body.radii[b] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
        )
    return out


def template_points(template: SurfaceTemplate, body: BodyState) -> np.ndarray:
    """Posed template points V on ``body`` via linear blend skinning."""
    M = blended_transforms(template.skin_bones, template.skin_weights, body.transforms)
    return apply_transforms(M, template_canonical(template, body))
