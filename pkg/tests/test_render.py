import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from s3f import nncore
from s3f.geometry import (
    BodyState,
    Camera,
    KinematicTree,
    Pose,
    Shape,
    body_normals,
    body_sdf,
    default_tree,
    random_pose,
    sphere_trace,
)
from s3f.render import (
    BETA_MIN,
    RayBatch,
    Sharpness,
    body_depth_range,
    density,
    integrate,
    laplace_cdf,
    make_rays,
    render_image,
    render_rays,
    transmittance,
)

TREE = default_tree()
J = TREE.num_bones
LIGHT = np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8])


def t64(x):
    return torch.as_tensor(x, dtype=torch.float64)


def test_density_at_zero():
    assert density(t64(0.0), 0.1).item() == 5.0
    for b in (0.5, 0.01, 1e-3):
        assert density(t64(0.0), b).item() == 1 / (2 * b)


def test_density_limits_and_closed_form():
    beta = 0.1
    assert density(t64(50.0), beta).item() < 1e-100
    assert density(t64(-50.0), beta).item() == pytest.approx(1 / beta)
    assert density(t64(-0.1), beta).item() == pytest.approx(10 * (1 - 0.5 * np.exp(-1)), abs=1e-12)
    assert density(t64(-0.1), beta).item() == pytest.approx(8.1606, abs=1e-4)


def test_density_matches_laplace_cdf_sweep():
    s = np.linspace(-1, 1, 1000)
    beta = 0.07
    want = np.where(-s <= 0, 0.5 * np.exp(-s / beta), 1 - 0.5 * np.exp(s / beta)) / beta
    got = density(t64(s), beta).numpy()
    assert np.abs(got - want).max() < 1e-6
    assert np.all(np.diff(got) < 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(1e-3, 1.0), st.floats(1e-6, 0.1))
def test_density_strictly_decreasing(s, beta, ds):
    a, b = density(t64(s), beta).item(), density(t64(s + ds), beta).item()
    assert a >= 0 and b >= 0
    assert b <= a
    if ds / beta < 10 and abs(s) / beta < 20:
        assert b < a


def test_density_continuous_at_zero():
    beta = 0.05
    assert density(t64(1e-12), beta).item() == pytest.approx(density(t64(-1e-12), beta).item(), rel=1e-9)


def test_density_beta_gradient():
    s = t64(np.linspace(-0.2, 0.2, 9) + 0.013)
    assert nncore.grad_check(lambda b: density(s, b).sum(), [t64(0.05)]) < 1e-3
    assert nncore.grad_check(lambda s: density(s, 0.05).sum(), [s]) < 1e-3


def test_density_gradients_finite_far_from_surface():
    s = t64([-30.0, 30.0]).requires_grad_(True)
    b = t64(1e-3).requires_grad_(True)
    density(s, b).sum().backward()
    assert torch.isfinite(s.grad).all() and torch.isfinite(b.grad)


def test_sharpness_init_and_floor():
    sh = Sharpness(0.1)
    assert sh().item() == pytest.approx(0.1, rel=1e-6)
    with torch.no_grad():
        sh.rho.fill_(-200.0)
    assert sh().item() >= np.float32(BETA_MIN)


def z_capsule_body(z0=2.1, z1=2.3, r=0.1):
    tree = KinematicTree(("c",), np.array([-1]), np.array([[0.0, 0.0, z0]]), np.array([[0.0, 0, 1.0]]), np.array([z1 - z0]), np.array([r]))
    return BodyState(tree, Pose.zero(1), Shape.unit(1))


def forward_camera(size=65, focal=64.0):
    c = (size - 1) / 2
    return Camera(focal, c, c, size, size, np.eye(3), np.zeros(3))


def test_ray_bounds_padded_body_extent():
    body = z_capsule_body()
    cam = forward_camera()
    assert body_depth_range(body, cam) == pytest.approx((2.0, 2.4))
    rays = make_rays(cam, np.array([[32, 32]]), body, 32)
    assert rays.near[0] == pytest.approx(1.9) and rays.far[0] == pytest.approx(2.5)
    pts, dt = rays.sample_points()
    assert dt[0] == pytest.approx(0.6 / 32)
    assert np.allclose(np.diff(pts[0, :, 2]), 0.6 / 32)
    assert np.abs(np.linalg.norm(rays.dirs, axis=1) - 1).max() < 1e-6


def test_off_axis_ray_bounds_follow_camera_z():
    body = z_capsule_body()
    rays = make_rays(forward_camera(), np.array([[0, 0]]), body, 16)
    z = rays.dirs[0, 2]
    assert rays.near[0] * z == pytest.approx(1.9) and rays.far[0] * z == pytest.approx(2.5)


def test_rays_reject_outside_pixels():
    with pytest.raises(ValueError):
        make_rays(forward_camera(), np.array([[65, 0]]), z_capsule_body())
    with pytest.raises(ValueError):
        make_rays(forward_camera(), np.array([[-1, 3]]), z_capsule_body())


def test_body_behind_camera_gives_empty_rays():
    body = z_capsule_body(-2.3, -2.1)
    rays = make_rays(forward_camera(), np.array([[32, 32], [3, 60]]), body)
    assert rays.empty.all()
    called = []

    def fn(x):
        called.append(x)
        return body_sdf(x, body), torch.zeros(len(x), 3)

    c, o = render_rays(rays, fn, 0.01)
    assert not called
    assert torch.equal(c, torch.zeros(2, 3)) and torch.equal(o, torch.zeros(2))


def test_integrate_empty_medium():
    c, o = integrate(torch.rand(4, 8, 3), torch.zeros(4, 8), torch.full((4, 1), 0.1))
    assert torch.equal(c, torch.zeros(4, 3)) and torch.equal(o, torch.zeros(4))


def test_integrate_opaque_first_sample():
    cols = torch.rand(1, 5, 3, dtype=torch.float64)
    sig = t64([[1e4, 3.0, 3.0, 3.0, 3.0]])
    c, o = integrate(cols, sig, t64([[0.1]]))
    assert torch.allclose(c[0], cols[0, 0], atol=1e-6)
    assert abs(o.item() - 1) < 1e-6


@pytest.mark.parametrize("c2", [0.0, 0.4, 1.0])
def test_integrate_two_samples_by_hand(c2):
    cols = t64([[[1.0, 1.0, 1.0], [c2, c2, c2]]])
    sig = t64([[np.log(2), np.log(2)]])
    c, o = integrate(cols, sig, t64([[1.0]]))
    assert torch.allclose(c, torch.full((1, 3), 0.5 + 0.25 * c2, dtype=torch.float64), atol=1e-12)
    assert o.item() == pytest.approx(0.75, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 200), min_size=1, max_size=12), st.floats(1e-3, 0.5))
def test_transmittance_monotone(sig, dt):
    s = t64([sig])
    T = transmittance(s, t64([[dt]]))[0].numpy()
    assert T[0] == 1.0
    assert np.all(np.diff(T) <= 1e-15)
    assert (T >= 0).all() and (T <= 1).all()
    _, o = integrate(torch.rand(1, len(sig), 3, dtype=torch.float64), s, t64([[dt]]))
    assert 0 <= o.item() <= 1


def test_integrate_grad_check():
    g = torch.Generator().manual_seed(0)
    sig = torch.rand(3, 7, generator=g, dtype=torch.float64) * 8
    col = torch.rand(3, 7, 3, generator=g, dtype=torch.float64)
    dl = torch.full((3, 1), 0.07, dtype=torch.float64)
    assert nncore.grad_check(lambda s, c: integrate(c, s, dl)[0].sum() + integrate(c, s, dl)[1].sum(), [sig, col]) < 1e-3


def lambert_fn(body):
    def fn(x):
        n = torch.as_tensor(body_normals(x.detach().double().numpy(), body), dtype=x.dtype)
        shade = 0.3 + 0.7 * (n @ torch.as_tensor(LIGHT, dtype=x.dtype)).clamp_min(0)
        return body_sdf(x, body), 0.8 * shade[:, None].expand(-1, 3)
    return fn


@pytest.fixture(scope="module")
def posed_body():
    return BodyState(TREE, random_pose(TREE, np.random.default_rng(0), 0.4), Shape.unit(J))


def test_render_image_opacity_range_and_determinism(posed_body):
    cam = Camera.orbit(0.3, size=24, focal=37.5)
    rgb, opa = render_image(cam, posed_body, lambert_fn(posed_body), 0.01, n_samples=32)
    rgb2, opa2 = render_image(cam, posed_body, lambert_fn(posed_body), 0.01, n_samples=32)
    assert np.array_equal(rgb, rgb2) and np.array_equal(opa, opa2)
    assert opa.min() >= 0 and opa.max() <= 1
    assert opa.max() > 0.99 and opa.min() < 1e-6


def test_render_quadrature_self_convergence(posed_body):
    cam = Camera.orbit(0.3, size=24, focal=37.5)
    a, _ = render_image(cam, posed_body, lambert_fn(posed_body), 0.01, n_samples=64)
    b, _ = render_image(cam, posed_body, lambert_fn(posed_body), 0.01, n_samples=128)
    assert np.abs(a - b).mean() < 0.02


def test_render_converges_to_surface_color_as_beta_shrinks(posed_body):
    cam = Camera.orbit(0.0, size=64, focal=100.0)
    fn = lambert_fn(posed_body)
    pix = np.array([[24, 32], [30, 31], [20, 33]])
    hit, t = sphere_trace(lambda x: body_sdf(x, posed_body), cam.center, cam.pixel_dirs(pix), 10.0, 512, 1e-7)
    assert hit.all()
    x_hit = cam.center + t[:, None] * cam.pixel_dirs(pix)
    want = fn(torch.as_tensor(x_hit))[1].numpy()
    errs = []
    for beta in (0.1, 0.01, 0.001):
        rays = make_rays(cam, pix, posed_body, 1024)
        c, _ = render_rays(rays, fn, beta, torch.float64)
        errs.append(np.abs(c.numpy() - want).mean())
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.01
