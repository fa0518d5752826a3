import numpy as np
import pytest

from gmssl.core import make_rng
from gmssl.synth import (
    DataConfig,
    ViewTransform,
    apply_view,
    gen_scene,
    lattice_positions,
    load_batch,
    make_batch,
    overlap_area,
    random_transform_pair,
    save_batch,
)


def test_scene_deterministic_and_shape():
    a = gen_scene(make_rng(3), 8, 32)
    b = gen_scene(make_rng(3), 8, 32)
    assert np.array_equal(a, b)
    assert gen_scene(make_rng(0), 1, 4).shape == (1, 4, 4)


def test_scene_smoothing_reduces_variance():
    raw = make_rng(9).standard_normal((8, 32, 32))
    smooth = gen_scene(make_rng(9), 8, 32)
    assert smooth.var() < raw.var()


def test_identity_view_positions_are_lattice():
    scene = gen_scene(make_rng(0), 2, 16)
    _, pos = apply_view(scene, ViewTransform.identity(), 4, 5)
    xs, ys = np.meshgrid(np.linspace(0, 1, 5), np.linspace(0, 1, 4))
    assert np.allclose(pos[..., 0], xs) and np.allclose(pos[..., 1], ys)


def test_hflip_reverses_rows():
    t = ViewTransform(0.1, 0.2, 0.6, 0.5)
    f = ViewTransform(0.1, 0.2, 0.6, 0.5, hflip=True)
    assert np.allclose(lattice_positions(f, 3, 4), lattice_positions(t, 3, 4)[:, ::-1])


def test_positions_monotone_without_flip():
    pos = lattice_positions(ViewTransform(0.2, 0.1, 0.5, 0.7), 6, 6)
    assert np.all(np.diff(pos[..., 0], axis=1) > 0)
    assert np.all(np.diff(pos[..., 1], axis=0) > 0)


def test_same_crop_same_features():
    scene = gen_scene(make_rng(1), 3, 16)
    t = ViewTransform(0.1, 0.1, 0.7, 0.7)
    a, _ = apply_view(scene, t, 5, 5)
    b, _ = apply_view(scene, t, 5, 5)
    assert np.array_equal(a, b)


def test_invalid_transform():
    with pytest.raises(ValueError):
        ViewTransform(0.9, 0.0, 0.5, 0.5)
    with pytest.raises(ValueError):
        ViewTransform(0.0, 0.0, 0.2, 0.5)


def test_batch_default_shapes():
    cfg = DataConfig()
    xs, xt = make_batch(make_rng(0), 16, cfg)
    for v in (xs, xt):
        assert v.y.shape == (16, cfg.D, cfg.R, cfg.S)
        assert v.pos.shape == (16, cfg.R, cfg.S, 2)


def test_batch_identity_transforms_equal_views():
    cfg = DataConfig(noise_sigma=0.0)
    ident = (ViewTransform.identity(), ViewTransform.identity())
    xs, xt = make_batch(make_rng(0), 2, cfg, transforms=ident)
    assert np.array_equal(xs.y, xt.y)


def test_crop_pairs_overlap():
    rng = make_rng(4)
    cfg = DataConfig(crop_min=0.25, crop_max=0.5)
    for _ in range(500):
        s, t = random_transform_pair(rng, cfg)
        # independent rectangle intersection
        ix = max(0.0, min(s.x0 + s.w, t.x0 + t.w) - max(s.x0, t.x0))
        iy = max(0.0, min(s.y0 + s.h, t.y0 + t.h) - max(s.y0, t.y0))
        assert ix * iy >= 0.04
        assert overlap_area(s, t) == pytest.approx(ix * iy)


@pytest.mark.parametrize("seed", range(5))
def test_correspondence_recoverable_without_noise(seed):
    # crops offset by whole lattice steps share sample points
    rng = make_rng(seed)
    scene = gen_scene(rng, 8, 32)
    s = ViewTransform(0.0, 0.0, 0.6, 0.6)
    t = ViewTransform(0.2, 0.1, 0.6, 0.6)
    ys, ps = apply_view(scene, s, 7, 7)
    yt, pt = apply_view(scene, t, 7, 7)
    fs, ft = ys.reshape(8, -1).T, yt.reshape(8, -1).T
    ps, pt = ps.reshape(-1, 2), pt.reshape(-1, 2)
    inside = np.all((ps >= np.array([0.2, 0.1]) - 1e-9) & (ps <= np.array([0.8, 0.7]) + 1e-9), axis=1)
    assert inside.sum() == 30
    for c in np.flatnonzero(inside):
        nn = np.argmin(np.sum((ft - fs[c]) ** 2, axis=1))
        assert np.abs(pt[nn] - ps[c]).max() <= 0.1 + 1e-9


def test_batch_dir_round_trip(tmp_path):
    cfg = DataConfig()
    xs, xt = make_batch(make_rng(2), 4, cfg)
    save_batch(tmp_path, xs, xt, 2, cfg)
    ls, lt = load_batch(tmp_path)
    assert ls.y.tobytes() == xs.y.tobytes() and lt.pos.tobytes() == xt.pos.tobytes()


def test_legacy_pos_name_accepted(tmp_path):
    cfg = DataConfig()
    xs, xt = make_batch(make_rng(2), 3, cfg)
    save_batch(tmp_path, xs, xt, 2, cfg)
    (tmp_path / "pos_s.gmt").rename(tmp_path / "post_s.gmt")
    ls, _ = load_batch(tmp_path)
    assert np.array_equal(ls.pos, xs.pos)
