import numpy as np
import pytest
import torch

from s3f import nncore
from s3f.features import (
    SEMANTIC_BOX,
    ImageEncoder,
    encode_image,
    render_guidance,
    sample_feature,
    stack_inputs,
)
from s3f.geometry import (
    BodyState,
    Camera,
    KinematicTree,
    Pose,
    Shape,
    default_tree,
    project,
    random_pose,
    sample_surface_template,
    template_points,
    visibility,
)

TREE = default_tree()
J = TREE.num_bones


def isolated_capsule():
    tree = KinematicTree(("c",), np.array([-1]), np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.array([1.0]), np.array([0.2]))
    return BodyState(tree, Pose.zero(1), Shape.unit(1))


def test_guidance_zero_off_body_and_in_unit_range():
    body = BodyState(TREE, random_pose(TREE, np.random.default_rng(0), 0.5), Shape.unit(J))
    g = render_guidance(body, Camera.orbit(0.3, size=32, focal=50.0))
    assert g.hit.any() and (~g.hit).any()
    for m in (g.normal, g.semantic):
        assert m.shape == (32, 32, 3)
        assert m.min() >= 0 and m.max() <= 1
        assert np.all(m[~g.hit] == 0)
    assert g.hit[0, 0] == False


def test_head_on_capsule_normal_maps_to_camera():
    cam = Camera.look_at([0.5, 0.0, 3.0], [0.5, 0.0, 0.0], size=65)
    g = render_guidance(isolated_capsule(), cam)
    assert g.hit[32, 32]
    assert np.allclose(g.normal[32, 32], [0.5, 0.5, 1.0], atol=1e-4)


def test_normal_map_up_and_right_conventions():
    cam = Camera.look_at([0.5, 0.0, 3.0], [0.5, 0.0, 0.0], size=65, focal=200.0)
    g = render_guidance(isolated_capsule(), cam)
    rows = np.nonzero(g.hit[:, 32])[0]
    # top edge of the silhouette faces up (+y view), bottom faces down
    assert g.normal[rows.min(), 32, 1] > 0.8
    assert g.normal[rows.max(), 32, 1] < 0.2


def test_semantic_map_pose_invariant():
    tmpl = sample_surface_template(TREE, Shape.unit(J), 400, seed=1)
    torso = np.isin(tmpl.bone, [0, 1, 2]) & (tmpl.u > 0.2) & (tmpl.u < 0.8)
    cam = Camera.orbit(0.0, size=64, focal=100.0)
    lo, hi = SEMANTIC_BOX
    want = (tmpl.canonical - lo) / (hi - lo)
    errs = []
    for seed in (3, 4):
        pose = random_pose(TREE, np.random.default_rng(seed), 0.3)
        body = BodyState(TREE, pose, Shape.unit(J))
        g = render_guidance(body, cam)
        V = template_points(tmpl, body)
        vis = visibility(V, body, cam) > 0
        uv, _ = project(cam, V)
        sel = torso & vis
        col, row = np.rint(uv[sel]).astype(int).T
        errs.append(np.abs(g.semantic[row, col] - want[sel]).max(1))
    # same canonical value up to half a pixel of ray-hit slop (~2 cm on a 2 m box)
    for e in errs:
        assert np.median(e) < 0.015
    assert errs[0].size > 20 and errs[1].size > 20


def test_stack_inputs_masks_rgb_and_orders_channels():
    rgb = np.ones((8, 8, 3))
    mask = np.zeros((8, 8))
    mask[2:4, 2:4] = 1
    g = render_guidance(isolated_capsule(), Camera.look_at([0.5, 0, 3.0], [0.5, 0, 0], size=8))
    x = stack_inputs(rgb, mask, g)
    assert x.shape == (1, 10, 8, 8)
    assert x[0, 0, 0, 0] == 0 and x[0, 0, 2, 2] == 1
    assert torch.equal(x[0, 3], torch.as_tensor(mask, dtype=torch.float32))


def test_encoder_shapes_and_rejections():
    torch.manual_seed(0)
    enc = ImageEncoder()
    f, code = enc(torch.zeros(1, 10, 64, 64))
    assert f.shape == (64, 64, 32) and code.shape == (16,)
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 10, 64, 32))
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 10, 48, 48))


def test_encoder_zero_input_bit_exact_repeatable():
    torch.manual_seed(0)
    a = ImageEncoder()
    torch.manual_seed(0)
    b = ImageEncoder()
    x = torch.zeros(1, 10, 32, 32)
    fa, ca = a(x)
    fb, cb = b(x)
    assert torch.equal(fa, fb) and torch.equal(ca, cb)
    fa2, _ = a(x)
    assert torch.equal(fa, fa2)
    # biases start at zero, so the bias pathway of a zero image is exactly zero
    assert torch.equal(fa, torch.zeros_like(fa))


def test_encoder_grad_check():
    torch.manual_seed(0)
    enc = ImageEncoder(enc=(4, 4, 4), dec=(4, 4, 4), feat_dim=3, illum_dim=2).double()
    for p in enc.parameters():
        torch.nn.init.normal_(p, std=0.3)
    x = torch.randn(1, 10, 8, 8, dtype=torch.float64)
    probe = torch.randn(8, 8, 3, dtype=torch.float64)
    errs = nncore.module_grad_check(enc, lambda m: (m(x)[0] * probe).sum() + m(x)[1].sum(), h=1e-6, max_coords=4)
    assert max(errs.values()) < 1e-3


def test_illumination_code_sees_foreground_pixel():
    torch.manual_seed(0)
    enc = ImageEncoder()
    body = BodyState(TREE, Pose.zero(J), Shape.unit(J))
    cam = Camera.orbit(0.0, size=32, focal=50.0)
    g = render_guidance(body, cam)
    rgb = np.full((32, 32, 3), 0.5)
    mask = g.hit.astype(float)
    r, c = np.argwhere(g.hit)[len(np.argwhere(g.hit)) // 2]
    _, code0 = encode_image(enc, rgb, mask, g)
    rgb[r, c] = [1.0, 0.0, 0.0]
    _, code1 = encode_image(enc, rgb, mask, g)
    assert (code0 - code1).abs().max() > 0


def test_encoder_finite_for_random_input():
    torch.manual_seed(1)
    f, c = ImageEncoder()(torch.rand(1, 10, 32, 32))
    assert torch.isfinite(f).all() and torch.isfinite(c).all()


@pytest.fixture
def fimg():
    return torch.arange(4 * 5 * 2, dtype=torch.float64).reshape(4, 5, 2)


def test_sample_integer_coordinates(fimg):
    uv = torch.tensor([[0.0, 0.0], [4.0, 3.0], [2.0, 1.0]], dtype=torch.float64)
    f, out = sample_feature(fimg, uv)
    assert torch.equal(f, fimg[[0, 3, 1], [0, 4, 2]])
    assert not out.any()


def test_sample_texel_midpoint_is_mean(fimg):
    f, _ = sample_feature(fimg, torch.tensor([[1.5, 2.5]], dtype=torch.float64))
    assert torch.allclose(f[0], fimg[2:4, 1:3].reshape(4, 2).mean(0))


def test_sample_outside_is_zero_and_flagged(fimg):
    f, out = sample_feature(fimg, torch.tensor([[-5.0, 10.0], [4.01, 0.0], [float("nan"), 1.0]], dtype=torch.float64))
    assert torch.equal(f, torch.zeros(3, 2, dtype=torch.float64))
    assert out.all()


def test_sample_continuous_inside(fimg):
    g = torch.Generator().manual_seed(0)
    uv = torch.rand(100, 2, generator=g, dtype=torch.float64) * torch.tensor([4.0, 3.0])
    a, _ = sample_feature(fimg, uv)
    b, _ = sample_feature(fimg, uv + 1e-7)
    assert (a - b).abs().max() < 1e-5
