"""Hamming loss on matchings and the interpolation gradient through the solver.

The solver maximises affinity. For a loss L(v) with linear coefficient dL/dv
the affinities are shifted against the loss, ``cv' = cv - lam * dL/dv``, the
problem is re-solved, and the gradient is the scaled difference between the
two solutions::

    dcv = (v_hat - v_lam) / lam
    dce = (u_hat - u_lam) / lam

where ``u[(i, j), (a, b)] = v[i, a] * v[j, b]`` is the induced edge indicator.
Descending along ``dcv`` moves affinity mass from ``v_hat`` towards ``v_lam``.
"""

from dataclasses import dataclass

import numpy as np

from .affinity import AffinitySet
from .matcher import Matching, gm_solve


@dataclass
class SolverGradCfg:
    lam: float = 80.0

    def validate(self):
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")


def hamming_loss_and_grad(v_hat, v_star):
    v_hat = np.asarray(v_hat, dtype=np.float64)
    v_star = np.asarray(v_star, dtype=np.float64)
    if v_hat.shape != v_star.shape:
        raise ValueError(f"shape mismatch: {v_hat.shape} vs {v_star.shape}")
    loss = float(np.sum(v_hat * (1.0 - v_star) + v_star * (1.0 - v_hat)))
    return loss, 1.0 - 2.0 * v_star


def edge_indicator(v, es, et):
    """u[e, f] = v[i, a] * v[j, b] for source edge e = (i, j), target edge f = (a, b)."""
    v = np.asarray(v, dtype=np.float64)
    if not len(es) or not len(et):
        return np.zeros((len(es), len(et)))
    return v[es[:, 0][:, None], et[:, 0][None, :]] * v[es[:, 1][:, None], et[:, 1][None, :]]


def solver_grad(affs, v_hat, dLdv, lam=80.0, solve=None):
    """Returns (dcv, dce, v_lam). ``solve`` maps an AffinitySet to a Matching."""
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    solve = solve or gm_solve
    if isinstance(v_hat, Matching):
        v_hat = v_hat.v
    shifted = AffinitySet(affs.cv - lam * np.asarray(dLdv, dtype=np.float64), affs.ce, affs.es, affs.et)
    m_lam = solve(shifted)
    v_lam = m_lam.v
    dcv = (v_hat - v_lam) / lam
    dce = (edge_indicator(v_hat, affs.es, affs.et) - edge_indicator(v_lam, affs.es, affs.et)) / lam
    return dcv, dce, m_lam
