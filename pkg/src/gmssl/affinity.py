"""Vertex/edge affinities between two view graphs and their backward pass.

Vertex affinity mixes the global cosine of message-passed embeddings with a
local cost computed on the encoder feature maps::

    cv[i, a] = alpha * cos(zs[i], zt[a]) + (1 - alpha) * local_cost(ys[i], yt[a], pos_s[i], pos_t[a])
    ce[(i, j), (a, b)] = cos(zs[i] - zs[j], zt[a] - zt[b])

The local cost averages two branches. Each branch pairs every cell of the
source map with one cell of the target map (nearest by position, or nearest by
feature), keeps the ``gamma`` pairs with the smallest pairing distance and
takes the cosine between the two stacked feature sets. Nearest-neighbour
indices and the kept cells are treated as constants by the backward pass.
"""

from dataclasses import dataclass

import numpy as np

from .core import rowwise_cosine, rowwise_cosine_grad, sample_gumbel


@dataclass
class AffinitySet:
    cv: np.ndarray  # N x N
    ce: np.ndarray  # |Es| x |Et|, rows follow Gs.edges, columns Gt.edges
    es: np.ndarray
    et: np.ndarray

    def __post_init__(self):
        if self.ce.shape != (len(self.es), len(self.et)):
            raise ValueError(f"ce shape {self.ce.shape} does not match edge counts {len(self.es)} x {len(self.et)}")

    @property
    def n(self):
        return self.cv.shape[0]

    def ce_entry(self, i, j, a, b):
        """Edge affinity for source edge (i, j) and target edge (a, b)."""
        e = np.flatnonzero((self.es[:, 0] == i) & (self.es[:, 1] == j))
        f = np.flatnonzero((self.et[:, 0] == a) & (self.et[:, 1] == b))
        if not len(e) or not len(f):
            raise KeyError((i, j, a, b))
        return float(self.ce[e[0], f[0]])


@dataclass
class LocalCostCache:
    loc_nn: np.ndarray  # Ns x Nt x M, target cell index per source cell
    loc_top: np.ndarray  # Ns x Nt x g, kept source cells
    feat_nn: np.ndarray
    feat_top: np.ndarray
    shape: tuple  # (D, R, S)


def _flat_cells(y):
    """N x D x R x S -> N x M x D."""
    n, d, r, s = y.shape
    return np.asarray(y, dtype=np.float64).reshape(n, d, r * s).transpose(0, 2, 1)


def _select(dist, gamma):
    nn = np.argmin(dist, axis=-1)
    sel = np.take_along_axis(dist, nn[..., None], axis=-1)[..., 0]
    g = min(gamma, dist.shape[-1])
    top = np.argsort(sel, axis=-1, kind="stable")[..., :g]
    return nn, top


def _gather(ysm, ytm, nn, top):
    ns, nt = nn.shape[:2]
    ii = np.broadcast_to(np.arange(ns)[:, None, None], top.shape)
    aa = np.broadcast_to(np.arange(nt)[None, :, None], top.shape)
    tgt = np.take_along_axis(nn, top, axis=-1)
    A = ysm[ii, top]  # ns x nt x g x D
    B = ytm[aa, tgt]
    return A, B, (ii, aa, tgt)


def local_cost_matrix(ys, yt, pos_s, pos_t, gamma, cache=None):
    """Local cost for every (source item, target item) pair.

    Returns (L: Ns x Nt, cache). Passing a cache reuses its index choices.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    ysm, ytm = _flat_cells(ys), _flat_cells(yt)
    if ysm.shape[1:] != ytm.shape[1:]:
        raise ValueError(f"feature maps differ in shape: {np.shape(ys)} vs {np.shape(yt)}")
    if cache is None:
        ps = np.asarray(pos_s, dtype=np.float64).reshape(len(ysm), -1, 2)
        pt = np.asarray(pos_t, dtype=np.float64).reshape(len(ytm), -1, 2)
        dpos = np.sum((ps[:, None, :, None, :] - pt[None, :, None, :, :]) ** 2, axis=-1)
        loc_nn, loc_top = _select(dpos, gamma)
        sq_s = np.sum(ysm * ysm, axis=-1)
        sq_t = np.sum(ytm * ytm, axis=-1)
        dfeat = sq_s[:, None, :, None] + sq_t[None, :, None, :] - 2.0 * np.einsum("imd,ajd->iamj", ysm, ytm)
        feat_nn, feat_top = _select(dfeat, gamma)
        cache = LocalCostCache(loc_nn, loc_top, feat_nn, feat_top, tuple(np.shape(ys)[1:]))
    total = 0.0
    for nn, top in ((cache.loc_nn, cache.loc_top), (cache.feat_nn, cache.feat_top)):
        A, B, _ = _gather(ysm, ytm, nn, top)
        c, _, _ = rowwise_cosine(A.reshape(*A.shape[:2], -1), B.reshape(*B.shape[:2], -1))
        total = total + c
    return 0.5 * total, cache


def local_cost_backward(dL, ys, yt, cache):
    ysm, ytm = _flat_cells(ys), _flat_cells(yt)
    if dL.shape != cache.loc_nn.shape[:2]:
        raise ValueError(f"upstream {dL.shape} does not match cached pair grid {cache.loc_nn.shape[:2]}")
    dysm = np.zeros_like(ysm)
    dytm = np.zeros_like(ytm)
    for nn, top in ((cache.loc_nn, cache.loc_top), (cache.feat_nn, cache.feat_top)):
        A, B, (ii, aa, tgt) = _gather(ysm, ytm, nn, top)
        Af, Bf = A.reshape(*A.shape[:2], -1), B.reshape(*B.shape[:2], -1)
        c, na, nb = rowwise_cosine(Af, Bf)
        dA, dB = rowwise_cosine_grad(Af, Bf, c, na, nb, 0.5 * dL)
        np.add.at(dysm, (ii, top), dA.reshape(A.shape))
        np.add.at(dytm, (aa, tgt), dB.reshape(B.shape))

    def unflat(d, like):
        n = d.shape[0]
        return d.transpose(0, 2, 1).reshape(n, *np.shape(like)[1:])

    return unflat(dysm, ys), unflat(dytm, yt)


def local_cost(y_i, y_a, pos_i, pos_a, gamma):
    """Local cost of a single item pair (maps D x R x S, positions R x S x 2)."""
    L, cache = local_cost_matrix(
        np.asarray(y_i)[None], np.asarray(y_a)[None], np.asarray(pos_i)[None], np.asarray(pos_a)[None], gamma
    )
    return float(L[0, 0]), cache


@dataclass
class AffinityCache:
    zs: np.ndarray
    zt: np.ndarray
    ys: np.ndarray
    yt: np.ndarray
    alpha: float
    local: LocalCostCache | None


def build_affinities(zs, zt, ys, yt, pos_s, pos_t, gs, gt, alpha=0.8, gamma=10, local_cache=None):
    """Returns (AffinitySet, AffinityCache)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    zs = np.asarray(zs, dtype=np.float64)
    zt = np.asarray(zt, dtype=np.float64)
    gcos, _, _ = rowwise_cosine(zs[:, None, :], zt[None, :, :])
    cv = alpha * gcos
    lc = None
    if alpha < 1.0:
        L, lc = local_cost_matrix(ys, yt, pos_s, pos_t, gamma, cache=local_cache)
        cv = cv + (1.0 - alpha) * L
    es, et = gs.edges, gt.edges
    us = zs[es[:, 0]] - zs[es[:, 1]]
    ut = zt[et[:, 0]] - zt[et[:, 1]]
    ce, _, _ = rowwise_cosine(us[:, None, :], ut[None, :, :])
    affs = AffinitySet(cv, ce.reshape(len(es), len(et)), es, et)
    return affs, AffinityCache(zs, zt, np.asarray(ys, np.float64), np.asarray(yt, np.float64), alpha, lc)


def affinity_backward(dcv, dce, affs, cache):
    """Gradients (dzs, dzt, dys, dyt) of sum(dcv * cv) + sum(dce * ce), indices held fixed."""
    zs, zt, alpha = cache.zs, cache.zt, cache.alpha
    n_s, n_t = len(zs), len(zt)
    es, et = affs.es, affs.et
    dcv = np.asarray(dcv, dtype=np.float64)
    dce = np.asarray(dce, dtype=np.float64)
    if dcv.shape != (n_s, n_t) or dce.shape != (len(es), len(et)):
        raise ValueError("stale cache: gradient shapes do not match the cached forward pass")

    U = np.broadcast_to(zs[:, None, :], (n_s, n_t, zs.shape[1]))
    V = np.broadcast_to(zt[None, :, :], (n_s, n_t, zt.shape[1]))
    c, nu, nv = rowwise_cosine(U, V)
    dU, dV = rowwise_cosine_grad(U, V, c, nu, nv, alpha * dcv)
    dzs = dU.sum(axis=1)
    dzt = dV.sum(axis=0)

    if len(es) and len(et):
        us = zs[es[:, 0]] - zs[es[:, 1]]
        ut = zt[et[:, 0]] - zt[et[:, 1]]
        Us = np.broadcast_to(us[:, None, :], (len(es), len(et), us.shape[1]))
        Ut = np.broadcast_to(ut[None, :, :], (len(es), len(et), ut.shape[1]))
        c, nu, nv = rowwise_cosine(Us, Ut)
        dUs, dUt = rowwise_cosine_grad(Us, Ut, c, nu, nv, dce)
        dus, dut = dUs.sum(axis=1), dUt.sum(axis=0)
        np.add.at(dzs, es[:, 0], dus)
        np.add.at(dzs, es[:, 1], -dus)
        np.add.at(dzt, et[:, 0], dut)
        np.add.at(dzt, et[:, 1], -dut)

    if alpha < 1.0:
        dys, dyt = local_cost_backward((1.0 - alpha) * dcv, cache.ys, cache.yt, cache.local)
    else:
        dys, dyt = np.zeros_like(cache.ys), np.zeros_like(cache.yt)
    return dzs, dzt, dys, dyt


def perturb(affs, rng, scale=1.0):
    """Add independent Gumbel(0, 1) noise (times ``scale``) to every cv and ce entry."""
    if scale == 0.0:
        return AffinitySet(affs.cv.copy(), affs.ce.copy(), affs.es, affs.et)
    eps_v = sample_gumbel(rng, affs.cv.shape)
    eps_e = sample_gumbel(rng, affs.ce.shape)
    return AffinitySet(affs.cv + scale * eps_v, affs.ce + scale * eps_e, affs.es, affs.et)
