import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from s3f import nncore
from s3f.features import sample_feature
from s3f.geometry import (
    BodyState,
    Camera,
    Shape,
    default_tree,
    project,
    random_pose,
    sample_surface_template,
    template_points,
)
from s3f.structured import (
    Displacement,
    StructuredFeatures,
    aggregate_views,
    displacement_channels,
    pool_final,
    pool_initial,
    projected_inside,
    repose,
    softmax_weights,
    swap_features,
)

TREE = default_tree()
J = TREE.num_bones
TMPL = sample_surface_template(TREE, Shape.unit(J), 256, seed=0)
CAM = Camera.orbit(0.0, size=64, focal=100.0)


def posed(seed, scale=0.5):
    return BodyState(TREE, random_pose(TREE, np.random.default_rng(seed), scale), Shape.unit(J))


def make_sf(body, feats=None, vis=None, offset=0.0, seed=0):
    rng = np.random.default_rng(seed)
    V = template_points(TMPL, body) + offset
    n = len(V)
    return StructuredFeatures(
        positions=torch.as_tensor(V),
        features=torch.as_tensor(rng.normal(size=(n, 4)) if feats is None else feats),
        template_index=np.arange(n),
        skin_bones=TMPL.skin_bones,
        skin_weights=TMPL.skin_weights,
        transforms=body.transforms,
        visibility=np.ones(n) if vis is None else vis,
        outside=np.zeros(n, bool),
    )


def test_channel_split():
    d, f = displacement_channels(32, 8)
    assert (d.start, d.stop) == (24, 32) and (f.start, f.stop) == (0, 24)


def test_pool_behind_camera_is_zero():
    fimg = torch.ones(64, 64, 32, dtype=torch.float64)
    V = torch.as_tensor(CAM.center + 0.5 * CAM.R[2] * -1 + np.zeros((5, 3)))
    feats, outside = pool_initial(V, fimg, CAM)
    assert outside.all() and torch.equal(feats, torch.zeros(5, 8, dtype=torch.float64))


def test_pool_integer_pixel_exact():
    fimg = torch.randn(64, 64, 32, dtype=torch.float64)
    # back-project pixel (row 20, col 41) to depth 3
    d = CAM.pixel_dirs(np.array([[20, 41]]))
    x = CAM.center + d * (3.0 / (d @ CAM.R[2]))[:, None]
    f0, _ = pool_initial(torch.as_tensor(x), fimg, CAM)
    f1, _ = pool_final(torch.as_tensor(x), fimg, CAM)
    assert torch.allclose(f0[0], fimg[20, 41, 24:], atol=1e-9)
    assert torch.allclose(f1[0], fimg[20, 41, :24], atol=1e-9)


def test_pool_matches_per_point_oracle():
    g = torch.Generator().manual_seed(0)
    fimg = torch.randn(64, 64, 32, generator=g, dtype=torch.float64)
    V = template_points(TMPL, posed(1))
    f0, _ = pool_initial(torch.as_tensor(V), fimg, CAM)
    f1, _ = pool_final(torch.as_tensor(V), fimg, CAM)
    for i in range(0, len(V), 17):
        uv, front = project(CAM, V[i : i + 1])
        u, v = uv[0]
        if not front[0] or not (0 <= u <= 63 and 0 <= v <= 63):
            assert f0[i].abs().max() == 0
            continue
        x0, y0 = min(int(u), 62), min(int(v), 62)
        a, b = u - x0, v - y0
        want = ((1 - a) * (1 - b) * fimg[y0, x0] + a * (1 - b) * fimg[y0, x0 + 1]
                + (1 - a) * b * fimg[y0 + 1, x0] + a * b * fimg[y0 + 1, x0 + 1])
        assert torch.allclose(f0[i], want[24:], atol=1e-9)
        assert torch.allclose(f1[i], want[:24], atol=1e-9)


def test_zero_init_displacement_is_identity():
    torch.manual_seed(0)
    d = Displacement(8, 8, 64)
    V = torch.randn(20, 3)
    assert torch.equal(d(V, torch.randn(20, 8), torch.randn(20, 8), CAM), V)


def test_displacement_clamp():
    d = Displacement(8, 8, 64)
    big = d.clamp(torch.tensor([[1000.0, 0.0, 0.0], [-50.0, 40.0, 3.0]]))
    assert big.norm(dim=-1).max() <= 0.30 * np.sqrt(3) + 1e-6
    assert big.abs().max() <= 0.30
    with torch.no_grad():
        d.fc2.bias.copy_(torch.tensor([1000.0, 0.0, 0.0]))
    V = torch.randn(7, 3)
    out = d(V, torch.zeros(7, 8), torch.zeros(7, 8), CAM)
    assert ((out - V).norm(dim=-1) <= 0.30 + 1e-6).all()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.0, 100.0))
def test_displacement_never_exceeds_bound(seed, scale):
    torch.manual_seed(seed)
    d = Displacement(4, 3, 16)
    with torch.no_grad():
        for p in d.parameters():
            p.normal_(0, scale)
    V = torch.randn(9, 3)
    out = d(V, torch.randn(9, 4), torch.randn(9, 3), CAM)
    # per axis of camera space the offset saturates at d_max
    assert ((out - V) @ torch.as_tensor(CAM.R, dtype=out.dtype).T).abs().max() <= 0.30 + 1e-6


def test_displacement_grad_check():
    torch.manual_seed(1)
    d = Displacement(4, 3, 16).double()
    torch.nn.init.normal_(d.fc2.weight, std=0.3)
    V, F, e = torch.randn(5, 3, dtype=torch.float64), torch.randn(5, 4, dtype=torch.float64), torch.randn(5, 3, dtype=torch.float64)
    errs = nncore.module_grad_check(d, lambda m: m(V, F, e, CAM).norm(dim=-1).sum(), h=1e-6, max_coords=12)
    assert max(errs.values()) < 1e-3


def test_softmax_weights_closed_form():
    w = softmax_weights(np.array([[1.0, 0.5], [0.0, 0.5]]))
    assert np.allclose(w[:, 0], [np.e / (np.e + 1), 1 / (np.e + 1)])
    assert np.isclose(w[0, 0], 0.731, atol=5e-4)
    assert np.allclose(w[:, 1], 0.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), min_size=5, max_size=5), min_size=1, max_size=5))
def test_softmax_weights_normalized(vis):
    w = softmax_weights(np.array(vis))
    assert (w >= 0).all()
    assert np.allclose(w.sum(0), 1.0, atol=1e-6)


def test_aggregate_single_view_reposes():
    a, b = posed(1), posed(2)
    sf = make_sf(a)
    out = aggregate_views([sf], b.transforms)
    want = repose(sf, b.transforms)
    assert torch.allclose(out.positions, want.positions, atol=1e-9)
    assert torch.allclose(out.features, sf.features)
    assert np.abs(out.positions.numpy() - template_points(TMPL, b)).max() < 1e-5


def test_aggregate_equal_visibility_is_mean():
    a, b = posed(1), posed(2)
    f1, f2 = torch.randn(len(TMPL), 4, dtype=torch.float64), torch.randn(len(TMPL), 4, dtype=torch.float64)
    s1 = make_sf(a, f1, offset=0.0)
    s2 = make_sf(b, f2)
    out = aggregate_views([s1, s2], a.transforms)
    assert torch.allclose(out.features, 0.5 * (f1 + f2))
    can = 0.5 * (s1.canonical_positions() + s2.canonical_positions())
    assert np.abs(out.canonical_positions() - can).max() < 1e-6


def test_aggregate_visible_in_one_view():
    a = posed(1)
    n = len(TMPL)
    f1, f2 = torch.ones(n, 4, dtype=torch.float64), torch.zeros(n, 4, dtype=torch.float64)
    out = aggregate_views([make_sf(a, f1, np.ones(n)), make_sf(a, f2, np.zeros(n))], a.transforms)
    assert torch.allclose(out.features, torch.full((n, 4), np.e / (np.e + 1), dtype=torch.float64))


def test_aggregate_duplicated_views_is_single_view():
    a, b = posed(3), posed(4)
    vis = np.random.default_rng(0).integers(0, 2, len(TMPL)).astype(float)
    sf = make_sf(a, vis=vis)
    one = aggregate_views([sf], b.transforms)
    three = aggregate_views([sf, sf, sf], b.transforms)
    assert (one.positions - three.positions).abs().max() < 1e-6
    assert (one.features - three.features).abs().max() < 1e-6


def test_aggregate_rejects_mismatched_views():
    a = posed(1)
    sf = make_sf(a)
    short = StructuredFeatures(sf.positions[:10], sf.features[:10], sf.template_index[:10], sf.skin_bones[:10],
                               sf.skin_weights[:10], sf.transforms, sf.visibility[:10], sf.outside[:10])
    with pytest.raises(ValueError):
        aggregate_views([sf, short], a.transforms)
    with pytest.raises(ValueError):
        aggregate_views([], a.transforms)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_unpose_repose_roundtrip(seed):
    a = posed(seed)
    rng = np.random.default_rng(seed)
    sf = make_sf(a)
    sf.positions = sf.positions + torch.as_tensor(rng.uniform(-0.1, 0.1, sf.positions.shape))
    back = repose(sf, a.transforms)
    assert (back.positions - sf.positions).abs().max() < 1e-5
    via = repose(repose(sf, posed(seed + 1).transforms), a.transforms)
    assert (via.positions - sf.positions).abs().max() < 1e-5


def test_swap_empty_and_full_masks():
    a = posed(1)
    sf, donor = make_sf(a, seed=1), make_sf(a, seed=2)
    same = swap_features(sf, CAM, np.zeros((64, 64)), donor)
    assert torch.equal(same.features, sf.features)
    full = swap_features(sf, CAM, np.ones((64, 64)), donor)
    inframe = projected_inside(sf.positions.numpy(), CAM, np.ones((64, 64)))
    assert inframe.all()
    assert torch.equal(full.features, donor.features)
    assert torch.equal(full.positions, sf.positions)


def test_swap_half_mask_matches_projection_oracle():
    a = posed(1)
    sf, donor = make_sf(a, seed=1), make_sf(a, seed=2)
    mask = np.zeros((64, 64))
    mask[:32] = 1
    out = swap_features(sf, CAM, mask, donor)
    uv, _ = project(CAM, sf.positions.numpy())
    upper = np.rint(uv[:, 1]) < 32
    assert 0 < upper.sum() < len(upper)
    assert torch.equal(out.features[upper], donor.features[upper])
    assert torch.equal(out.features[~upper], sf.features[~upper])


def test_swap_rejects_foreign_template():
    a = posed(1)
    sf, donor = make_sf(a), make_sf(a)
    donor.template_index = donor.template_index[::-1].copy()
    with pytest.raises(ValueError):
        swap_features(sf, CAM, np.ones((64, 64)), donor)
