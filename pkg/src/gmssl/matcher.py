"""Second-order graph matching (Lawler-form QAP), maximisation convention.

The score of a permutation ``perm`` (source node i -> target node perm[i]) is::

    sum_i cv[i, perm[i]] + sum over source edges (i, j) whose image
    (perm[i], perm[j]) is a target edge of ce[(i, j), (perm[i], perm[j])]

Small problems are solved by enumerating all permutations. Larger ones start
from the assignment-problem optimum on ``cv`` (plus random restarts) and climb
by alternating 2-swap moves, 3-node rotations and re-assignment on the
objective linearised at the current permutation, with a few random kicks out
of each local optimum.
"""

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class Matching:
    perm: np.ndarray

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        n = len(self.perm)
        if not np.array_equal(np.sort(self.perm), np.arange(n)):
            raise ValueError(f"not a permutation: {self.perm.tolist()}")

    @property
    def n(self):
        return len(self.perm)

    @property
    def v(self):
        out = np.zeros((self.n, self.n))
        out[np.arange(self.n), self.perm] = 1.0
        return out

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n))

    @classmethod
    def from_indicator(cls, v):
        v = np.asarray(v)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or not np.all((v == 0) | (v == 1)):
            raise ValueError("indicator must be a square 0/1 matrix")
        if not (np.all(v.sum(0) == 1) and np.all(v.sum(1) == 1)):
            raise ValueError("indicator must have exactly one 1 per row and column")
        return cls(np.argmax(v, axis=1))


@dataclass
class SolverCfg:
    exact_threshold: int = 8
    restarts: int = 4
    max_sweeps: int = 50
    kicks: int = 5  # perturb-and-reclimb rounds per restart
    kick_size: int = 4  # nodes reshuffled by one kick

    def validate(self):
        if not 0 <= self.exact_threshold <= 10:
            raise ValueError("exact_threshold must lie in [0, 10]")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.kicks < 0:
            raise ValueError("kicks must be >= 0")
        if self.kick_size < 2:
            raise ValueError("kick_size must be >= 2")


class Scorer:
    """Vectorised ``match_score`` for many candidate permutations at once."""

    def __init__(self, affs):
        self.cv = np.asarray(affs.cv, dtype=np.float64)
        self.ce = np.asarray(affs.ce, dtype=np.float64)
        self.es = affs.es
        n = self.cv.shape[0]
        self.t_index = np.full((n, n), -1, dtype=np.int64)
        if len(affs.et):
            self.t_index[affs.et[:, 0], affs.et[:, 1]] = np.arange(len(affs.et))
        # padded column so that missing target edges contribute 0
        self.ce_pad = np.concatenate([self.ce, np.zeros((len(self.es), 1))], axis=1)
        self.rows = np.arange(n)
        self.erows = np.arange(len(self.es))

    def scores(self, perms):
        perms = np.atleast_2d(perms)
        total = self.cv[self.rows, perms].sum(axis=1)
        if len(self.es):
            f = self.t_index[perms[:, self.es[:, 0]], perms[:, self.es[:, 1]]]
            total = total + self.ce_pad[self.erows, f].sum(axis=1)
        return total

    def score(self, perm):
        return float(self.scores(np.asarray(perm)[None])[0])

    def linearize(self, perm):
        """N x N gain of sending i -> a with every other node held at ``perm``."""
        M = self.cv.copy()
        if not len(self.es):
            return M
        src, dst = self.es[:, 0], self.es[:, 1]
        # source edge (i, j): i -> a keeps it iff (a, perm[j]) is a target edge
        f = self.t_index[:, perm[dst]]  # N(a) x E
        np.add.at(M.T, (slice(None), src), self.ce_pad[self.erows[None, :], f])
        # and j -> b keeps it iff (perm[i], b) is a target edge
        f = self.t_index[perm[src], :]  # E x N(b)
        np.add.at(M, dst, self.ce_pad[self.erows[:, None], f])
        return M


def match_score(m, affs):
    perm = m.perm if isinstance(m, Matching) else np.asarray(m)
    return Scorer(affs).score(perm)


# --- linear assignment -------------------------------------------------------

def solve_lap(cv):
    """Permutation maximising sum_i cv[i, perm[i]] (shortest augmenting paths, O(N^3))."""
    cv = np.asarray(cv, dtype=np.float64)
    if cv.ndim != 2 or cv.shape[0] != cv.shape[1]:
        raise ValueError("solve_lap needs a square matrix")
    if not np.all(np.isfinite(cv)):
        raise ValueError("solve_lap needs finite entries")
    rows, cols = linear_sum_assignment(cv, maximize=True)
    perm = np.empty(len(rows), dtype=np.int64)
    perm[rows] = cols
    return Matching(perm)


# --- exact and heuristic graph matching ------------------------------------

@lru_cache(maxsize=4)
def all_permutations(n):
    """Every permutation of range(n) in lexicographic order, as an (n!, n) array."""
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)


def solve_exact(affs, chunk=200_000):
    """Max-score permutation by enumeration; ties go to the lexicographically smallest."""
    n = affs.n
    if n > 10:
        raise ValueError("exhaustive solve is limited to N <= 10")
    scorer = Scorer(affs)
    perms = all_permutations(n)
    best_val, best_idx = -np.inf, 0
    for start in range(0, len(perms), chunk):
        s = scorer.scores(perms[start : start + chunk])
        k = int(np.argmax(s))
        if s[k] > best_val:
            best_val, best_idx = s[k], start + k
    return Matching(perms[best_idx].copy())


def two_swap_climb(perm, scorer, max_sweeps, tol=1e-12):
    """First-improvement 2-swap hill climbing. Returns (perm, score)."""
    perm = np.array(perm, dtype=np.int64)
    n = len(perm)
    cur = scorer.score(perm)
    for _ in range(max_sweeps):
        improved = False
        for i in range(n - 1):
            j_lo = i + 1
            while j_lo < n:
                js = np.arange(j_lo, n)
                cands = np.repeat(perm[None], len(js), axis=0)
                cands[np.arange(len(js)), i] = perm[js]
                cands[np.arange(len(js)), js] = perm[i]
                s = scorer.scores(cands)
                hits = np.flatnonzero(s > cur + tol)
                if not len(hits):
                    break
                h = hits[0]
                perm = cands[h]
                cur = float(s[h])
                improved = True
                j_lo = js[h] + 1
        if not improved:
            break
    return perm, cur


def linearized_ascent(perm, scorer, max_iters, tol=1e-12):
    """Repeatedly re-solve the assignment problem on the objective linearised
    at the current permutation; stop when that no longer raises the score."""
    perm = np.array(perm, dtype=np.int64)
    cur = scorer.score(perm)
    for _ in range(max_iters):
        cand = solve_lap(scorer.linearize(perm)).perm
        val = scorer.score(cand)
        if not val > cur + tol:
            break
        perm, cur = cand, val
    return perm, cur


@lru_cache(maxsize=16)
def _triples(n):
    t = np.array(list(itertools.combinations(range(n), 3)), dtype=np.int64).reshape(-1, 3)
    # both cyclic rotations of each triple
    return np.concatenate([t, t]), np.concatenate([t[:, [1, 2, 0]], t[:, [2, 0, 1]]])


def rotation_climb(perm, scorer, max_sweeps, tol=1e-12):
    """Best-improvement moves that rotate the targets of three nodes. Returns (perm, score)."""
    perm = np.array(perm, dtype=np.int64)
    cur = scorer.score(perm)
    if len(perm) < 3:
        return perm, cur
    dst, src = _triples(len(perm))
    rows = np.arange(len(dst))[:, None]
    for _ in range(max_sweeps):
        cands = np.repeat(perm[None], len(dst), axis=0)
        cands[rows, dst] = perm[src]
        s = scorer.scores(cands)
        h = int(np.argmax(s))
        if not s[h] > cur + tol:
            break
        perm, cur = cands[h], float(s[h])
    return perm, cur


def local_search(perm, scorer, max_sweeps, tol=1e-12):
    """Alternate linearised re-assignment, 2-swap climbing and 3-node rotations
    until a full round brings no improvement."""
    perm, cur = linearized_ascent(perm, scorer, max_sweeps, tol)
    for _ in range(max_sweeps):
        start = cur
        perm, cur = two_swap_climb(perm, scorer, max_sweeps, tol)
        perm, cur = rotation_climb(perm, scorer, max_sweeps, tol)
        perm, cur = linearized_ascent(perm, scorer, max_sweeps, tol)
        if not cur > start + tol:
            break
    return perm, scorer.score(perm)


def kicked_search(perm, scorer, cfg, rng):
    """``local_search``, then ``cfg.kicks`` rounds of: shuffle the targets of
    ``cfg.kick_size`` random nodes of the best permutation and climb again,
    keeping the result only if it scores higher."""
    best, best_val = local_search(perm, scorer, cfg.max_sweeps)
    m = min(cfg.kick_size, len(best))
    for _ in range(cfg.kicks if m >= 2 else 0):
        start = best.copy()
        idx = rng.choice(len(start), m, replace=False)
        start[idx] = start[rng.permutation(idx)]
        cand, val = local_search(start, scorer, cfg.max_sweeps)
        if val > best_val + 1e-12:
            best, best_val = cand, val
    return best, best_val


def solve_heuristic(affs, cfg, rng):
    """Restart 0 starts from the assignment optimum on ``cv``, the others from
    random permutations; each is refined by ``kicked_search`` and the best wins."""
    scorer = Scorer(affs)
    best_perm, best_val = kicked_search(solve_lap(affs.cv).perm, scorer, cfg, rng)
    for _ in range(1, cfg.restarts):
        perm, val = kicked_search(rng.permutation(affs.n), scorer, cfg, rng)
        if val > best_val + 1e-12:
            best_perm, best_val = perm, val
    return Matching(best_perm)


def gm_solve(affs, cfg=None, rng=None, force_heuristic=False):
    cfg = cfg or SolverCfg()
    if affs.n <= cfg.exact_threshold and not force_heuristic:
        return solve_exact(affs)
    if rng is None:
        rng = np.random.default_rng(0)
    return solve_heuristic(affs, cfg, rng)
