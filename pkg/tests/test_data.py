import dataclasses

import numpy as np
import pytest

from ggb.data import (BACKGROUND, KEYPOINT_NAMES, Appearance, ResolutionError, SyntheticDataset, VariationSpec,
                      build_pyramid, collate, encode_label_map, keypoint_pixel, read_cache, render, render_sample,
                      sample_variation, write_cache)
from ggb.tensor import Tensor, downsample


def pose(seed):
    return sample_variation(np.random.default_rng(seed))


def foreground(img):
    return np.any(np.abs(img - np.asarray(BACKGROUND)[:, None, None]) > 1e-12, axis=0)


def test_identity_variation_copies_x():
    v = pose(0)
    pair = render_sample(5, v, v, 64)
    assert pair.x.tobytes() == pair.y.tobytes()


def test_render_is_deterministic():
    a = render_sample(3, pose(1), pose(2), 64)
    b = render_sample(3, pose(1), pose(2), 64)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert a.label_map.tobytes() == b.label_map.tobytes()


def test_pixels_in_range():
    pair = render_sample(11, pose(3), pose(4), 64)
    for arr in (pair.x, pair.y):
        assert arr.min() >= -1.0 and arr.max() <= 1.0
        assert arr.shape == (3, 64, 64)


@pytest.mark.parametrize("res", [16, 48, 100])
def test_bad_resolution(res):
    with pytest.raises(ResolutionError):
        render_sample(0, pose(0), pose(0), res)


@pytest.mark.parametrize("seed", range(4))
def test_color_change_keeps_shape_mask(seed):
    app = Appearance.from_seed(seed)
    recolored = dataclasses.replace(app, shirt=(0.9, 0.9, -0.9), shirt_alt=(0.1, 0.9, 0.9), skin=(0.95, 0.95, 0.95),
                                    pants=(-0.1, 0.2, 0.9))
    v = pose(seed + 10)
    a, b = render(app, v, 64), render(recolored, v, 64)
    np.testing.assert_array_equal(foreground(a), foreground(b))
    assert not np.array_equal(a, b)


def test_pose_change_keeps_palette():
    """Changing only c never changes the identity's colour set."""
    for ident in range(5):
        colors = []
        for s in (20, 21):
            img = render(Appearance.from_seed(ident), pose(s), 64)
            colors.append({tuple(np.round(img[:, i, j], 12)) for i, j in zip(*np.nonzero(foreground(img)))})
        assert colors[0] == colors[1]


def test_identity_change_keeps_head_position():
    """Different identities in one pose put the head at the same place."""
    v = pose(30)
    head_u, head_v = v.placed()[KEYPOINT_NAMES.index("head")]
    res = 64
    cy, cx = (np.arange(res) + 0.5) / res, (np.arange(res) + 0.5) / res
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    near = (xx - head_u) ** 2 + (yy - head_v) ** 2 < 0.09**2
    centroids = []
    for ident in (1, 2, 3):
        app = Appearance.from_seed(ident)
        img = render(app, v, res)
        skin = np.all(np.abs(img - np.asarray(app.skin)[:, None, None]) < 1e-12, axis=0) & near
        centroids.append((xx[skin].mean(), yy[skin].mean()))
    for c in centroids:
        assert np.hypot(c[0] - head_u, c[1] - head_v) < 1.0 / res


def test_variation_validation():
    with pytest.raises(ValueError, match="unit square"):
        VariationSpec(((1.2, 0.5),))
    with pytest.raises(ValueError, match="placed"):
        VariationSpec(((0.95, 0.5),), translation=(0.1, 0.0))
    v = pose(7)
    assert VariationSpec.from_dict(v.to_dict()) == v


def test_label_map_center_peak():
    c = VariationSpec(((0.5, 0.5),))
    m = encode_label_map(c, 64)
    assert m.shape == (3, 64, 64)
    r, q = keypoint_pixel(0.5, 0.5, 64)
    assert np.unravel_index(np.argmax(m[0]), m[0].shape) == (r, q) == (32, 32)
    assert m[0, r, q] == 1.0
    assert not m[1:].any()


def test_label_map_empty():
    assert not encode_label_map(VariationSpec(()), 32).any()


def test_label_map_superposition():
    a, b = (0.1, 0.15), (0.85, 0.9)
    both = encode_label_map(VariationSpec((a, b)), 64)
    # round-robin channels: the second keypoint lands on channel 1
    single_a = encode_label_map(VariationSpec((a,)), 64)
    single_b = encode_label_map(VariationSpec(((0.5, 0.5), b)), 64) - encode_label_map(VariationSpec(((0.5, 0.5),)), 64)
    np.testing.assert_allclose(both, single_a + single_b, rtol=0, atol=1e-10)


def test_pyramid_constant_image():
    pair = render_sample(0, pose(0), pose(0), 64)
    const = dataclasses.replace(pair, x=np.full((3, 64, 64), 0.25), y=np.full((3, 64, 64), -0.5))
    pyr = build_pyramid(const, 6)
    for n, (xn, yn) in pyr.levels.items():
        assert np.all(xn == 0.25) and np.all(yn == -0.5)


def test_pyramid_geometry():
    pyr = build_pyramid(render_sample(1, pose(1), pose(2), 64), 6)
    assert pyr.top == 6
    for n, (xn, yn) in pyr.levels.items():
        assert xn.shape[-1] == yn.shape[-1] == 2**n
    assert pyr.levels[6][0].tobytes() == render_sample(1, pose(1), pose(2), 64).x.tobytes()


def test_pyramid_of_level_is_tail():
    pair = render_sample(2, pose(3), pose(4), 64)
    full = build_pyramid(pair, 6)
    k = 4
    xk, yk = full.levels[k]
    sub = build_pyramid(dataclasses.replace(pair, x=xk, y=yk), k)
    for n in range(1, k + 1):
        np.testing.assert_allclose(sub.levels[n][0], full.levels[n][0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(sub.levels[n][1], full.levels[n][1], rtol=0, atol=1e-12)


def test_pyramid_levels_match_downsample():
    pair = render_sample(2, pose(3), pose(4), 64)
    pyr = build_pyramid(pair, 6)
    for n in range(1, 7):
        ref = downsample(Tensor(pair.y[None]), 2 ** (6 - n)).data[0]
        np.testing.assert_array_equal(pyr.levels[n][1], ref)


def test_dataset_splits_use_disjoint_identities():
    train = SyntheticDataset(40, 32, split="train")
    test = SyntheticDataset(40, 32, split="test")
    assert not {train[i].identity_seed for i in range(40)} & {test[i].identity_seed for i in range(40)}


def test_dataset_pairs_share_identity():
    ds = SyntheticDataset(8, 32, seed=3)
    for pair in ds:
        app = Appearance.from_seed(pair.identity_seed)
        assert pair.palette_class == app.palette_class
        assert pair.label_map.shape == pair.x.shape


def test_dataset_is_deterministic():
    a = SyntheticDataset(6, 32, seed=9).batch([0, 3, 5])
    b = SyntheticDataset(6, 32, seed=9).batch([0, 3, 5])
    assert a.x.tobytes() == b.x.tobytes() and list(a.indices) == [0, 3, 5]


def test_cache_round_trip(tmp_path):
    ds = SyntheticDataset(3, 32, seed=1)
    manifest = write_cache(ds, tmp_path)
    assert manifest.exists() and len(manifest.read_text().splitlines()) == 3
    back = read_cache(tmp_path)
    for orig, got in zip(ds, back):
        # 8-bit quantization only
        assert np.abs(orig.x - got.x).max() <= 1 / 127.5
        assert got.c == orig.c and got.identity_seed == orig.identity_seed
        np.testing.assert_allclose(got.label_map, orig.label_map)


def test_collate_stacks():
    ds = SyntheticDataset(4, 32)
    b = collate([ds[0], ds[1]], [0, 1])
    assert b.x.shape == (2, 3, 32, 32) and len(b) == 2
