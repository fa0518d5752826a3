import numpy as np
import pytest

from gmssl.affinity import affinity_backward, build_affinities, local_cost, local_cost_matrix, perturb
from gmssl.core import make_rng
from gmssl.graph import knn_graph
from gmssl.trainer import TrainConfig

from fdcheck import numeric_grad, rel_err


def naive_local_cost(y_i, y_a, pos_i, pos_a, gamma):
    """Double-loop reference: explicit argmin per cell, sort by selection distance."""
    D, R, S = y_i.shape
    cells = [(r, s) for r in range(R) for s in range(S)]

    def branch(dist_fn):
        picks = []
        for ci, (r, s) in enumerate(cells):
            best, best_d = None, np.inf
            for cj, (r2, s2) in enumerate(cells):
                d = dist_fn(r, s, r2, s2)
                if d < best_d:
                    best, best_d = cj, d
            picks.append((best_d, ci, best))
        picks.sort(key=lambda t: (t[0], t[1]))
        kept = picks[:gamma]
        A = np.concatenate([y_i[:, cells[ci][0], cells[ci][1]] for _, ci, _ in kept])
        B = np.concatenate([y_a[:, cells[cj][0], cells[cj][1]] for _, _, cj in kept])
        return A @ B / (np.linalg.norm(A) * np.linalg.norm(B))

    loc = branch(lambda r, s, r2, s2: np.sum((pos_i[r, s] - pos_a[r2, s2]) ** 2))
    feat = branch(lambda r, s, r2, s2: np.sum((y_i[:, r, s] - y_a[:, r2, s2]) ** 2))
    return 0.5 * (loc + feat)


def random_pair(rng, D=2, R=3, S=3):
    return rng.standard_normal((D, R, S)), rng.standard_normal((D, R, S)), rng.random((R, S, 2)), rng.random((R, S, 2))


def test_local_cost_self_match():
    y, _, p, _ = random_pair(make_rng(0))
    assert local_cost(y, y, p, p, 4)[0] == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(10))
def test_local_cost_matches_naive(seed):
    y_i, y_a, p_i, p_a = random_pair(make_rng(seed))
    assert local_cost(y_i, y_a, p_i, p_a, 4)[0] == pytest.approx(naive_local_cost(y_i, y_a, p_i, p_a, 4), abs=1e-12)


def test_gamma_saturation():
    y_i, y_a, p_i, p_a = random_pair(make_rng(1))
    full = local_cost(y_i, y_a, p_i, p_a, 9)[0]
    assert local_cost(y_i, y_a, p_i, p_a, 50)[0] == full
    _, cache = local_cost(y_i, y_a, p_i, p_a, 50)
    assert cache.loc_top.shape[-1] == 9 and cache.feat_top.shape[-1] == 9


def test_local_cost_swap_symmetry():
    rng = make_rng(2)
    y_i = rng.standard_normal((3, 3, 3))
    y_a = y_i + 1e-3 * rng.standard_normal((3, 3, 3))
    # shared positions and a small perturbation make both branches pair cells mutually
    p = rng.random((3, 3, 2))
    for gamma in (4, 9):
        assert local_cost(y_i, y_a, p, p, gamma)[0] == pytest.approx(local_cost(y_a, y_i, p, p, gamma)[0], abs=1e-12)


def setup(seed, N=5, D=3, F=4, R=3, k=2, identical=False):
    rng = make_rng(seed)
    zs = rng.standard_normal((N, F))
    zt = zs.copy() if identical else rng.standard_normal((N, F))
    ys = rng.standard_normal((N, D, R, R))
    yt = ys.copy() if identical else rng.standard_normal((N, D, R, R))
    ps = rng.random((N, R, R, 2))
    pt = ps.copy() if identical else rng.random((N, R, R, 2))
    return zs, zt, ys, yt, ps, pt, knn_graph(zs, k), knn_graph(zt, k)


def test_default_alpha():
    assert TrainConfig().alpha == 0.8


def test_identical_views_unit_diagonal():
    args = setup(0, identical=True)
    affs, _ = build_affinities(*args, alpha=0.8, gamma=4)
    assert np.allclose(np.diag(affs.cv), 1.0, atol=1e-12)


def test_alpha_one_is_pure_cosine():
    zs, zt, ys, yt, ps, pt, gs, gt = setup(1)
    affs, cache = build_affinities(zs, zt, ys, yt, ps, pt, gs, gt, alpha=1.0)
    assert cache.local is None
    ref = np.array([[a @ b / np.linalg.norm(a) / np.linalg.norm(b) for b in zt] for a in zs])
    assert np.allclose(affs.cv, ref)
    _, _, dys, dyt = affinity_backward(np.ones_like(affs.cv), np.ones_like(affs.ce), affs, cache)
    assert not dys.any() and not dyt.any()


def test_cv_bounded_and_ce_sign_symmetry():
    zs, zt, ys, yt, ps, pt, gs, gt = setup(2)
    affs, _ = build_affinities(zs, zt, ys, yt, ps, pt, gs, gt, alpha=0.6, gamma=3)
    assert np.all(np.abs(affs.cv) <= 1 + 1e-6)
    assert affs.ce.shape == (gs.num_edges, gt.num_edges)
    i, j = gs.edges[0]
    a, b = gt.edges[0]
    u, v = zs[i] - zs[j], zt[a] - zt[b]
    ref = (-u) @ (-v) / np.linalg.norm(u) / np.linalg.norm(v)
    assert affs.ce_entry(i, j, a, b) == pytest.approx(ref)


def test_zero_upstream_zero_grads():
    zs, zt, ys, yt, ps, pt, gs, gt = setup(3)
    affs, cache = build_affinities(zs, zt, ys, yt, ps, pt, gs, gt, alpha=0.5, gamma=3)
    for g in affinity_backward(np.zeros_like(affs.cv), np.zeros_like(affs.ce), affs, cache):
        assert not np.any(g)


def test_stale_cache_rejected():
    zs, zt, ys, yt, ps, pt, gs, gt = setup(3)
    affs, cache = build_affinities(zs, zt, ys, yt, ps, pt, gs, gt)
    with pytest.raises(ValueError):
        affinity_backward(np.zeros((2, 2)), np.zeros_like(affs.ce), affs, cache)


@pytest.mark.parametrize("seed", range(5))
def test_affinity_backward_fd(seed):
    zs, zt, ys, yt, ps, pt, gs, gt = setup(seed)
    rng = make_rng(100 + seed)
    _, cache0 = build_affinities(zs, zt, ys, yt, ps, pt, gs, gt, alpha=0.7, gamma=4)
    frozen = cache0.local
    wv = rng.standard_normal((5, 5))
    we = rng.standard_normal((gs.num_edges, gt.num_edges))

    def f():
        a, _ = build_affinities(zs, zt, ys, yt, ps, pt, gs, gt, alpha=0.7, gamma=4, local_cache=frozen)
        return float(np.sum(wv * a.cv) + np.sum(we * a.ce))

    affs, cache = build_affinities(zs, zt, ys, yt, ps, pt, gs, gt, alpha=0.7, gamma=4, local_cache=frozen)
    dzs, dzt, dys, dyt = affinity_backward(wv, we, affs, cache)
    for analytic, x in ((dzs, zs), (dzt, zt), (dys, ys), (dyt, yt)):
        assert rel_err(analytic, numeric_grad(f, x)) < 1e-3


def test_single_cv_entry_fd():
    zs, zt, ys, yt, ps, pt, gs, gt = setup(7)
    wv = np.zeros((5, 5))
    wv[1, 3] = 1.0
    affs, cache = build_affinities(zs, zt, ys, yt, ps, pt, gs, gt)
    dzs, _, _, _ = affinity_backward(wv, np.zeros_like(affs.ce), affs, cache)
    f = lambda: build_affinities(zs, zt, ys, yt, ps, pt, gs, gt, local_cache=cache.local)[0].cv[1, 3]  # noqa: E731
    assert rel_err(dzs, numeric_grad(f, zs)) < 1e-3


def test_perturb():
    zs, zt, ys, yt, ps, pt, gs, gt = setup(4)
    affs, _ = build_affinities(zs, zt, ys, yt, ps, pt, gs, gt)
    same = perturb(affs, make_rng(0), scale=0.0)
    assert np.array_equal(same.cv, affs.cv) and np.array_equal(same.ce, affs.ce)
    a, b = perturb(affs, make_rng(9)), perturb(affs, make_rng(9))
    assert np.array_equal(a.cv, b.cv) and np.array_equal(a.ce, b.ce)


def test_perturb_mean_is_euler_gamma():
    from gmssl.affinity import AffinitySet

    base = AffinitySet(np.zeros((100, 100)), np.zeros((300, 300)), np.zeros((300, 2), int), np.zeros((300, 2), int))
    p = perturb(base, make_rng(1))
    assert p.cv.mean() == pytest.approx(0.5772, abs=0.01)
    assert p.ce.mean() == pytest.approx(0.5772, abs=0.01)


def test_local_cost_matrix_reuses_cache():
    _, _, ys, yt, ps, pt, _, _ = setup(5)
    L, cache = local_cost_matrix(ys, yt, ps, pt, 4)
    L2, _ = local_cost_matrix(ys, yt, ps[::-1], pt, 4, cache=cache)
    assert np.array_equal(L, L2)
