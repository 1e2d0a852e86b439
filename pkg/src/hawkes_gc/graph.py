"""Acyclicity, thresholding to a DAG, recovery metrics and graph export."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import defaults
from .core import HawkesParams, default_type_names

DAG_TOL = 1e-8


def h_dag(A) -> float:
    """tr(exp(|A|)) - d; zero exactly when the support of A has no directed cycle."""
    M = np.abs(np.asarray(A, dtype=float))
    if M.size == 0:
        return 0.0
    return max(float(np.trace(expm(M)) - M.shape[0]), 0.0)


def has_cycle(A) -> bool:
    """Iterative three-colour DFS over the support of A (self-loops count)."""
    adj = np.asarray(A) != 0
    d = adj.shape[0]
    colour = [0] * d  # 0 white, 1 on stack, 2 done
    succ = [np.flatnonzero(adj[i]).tolist() for i in range(d)]
    for root in range(d):
        if colour[root]:
            continue
        stack = [(root, iter(succ[root]))]
        colour[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                colour[node] = 2
                stack.pop()
            elif colour[nxt] == 1:
                return True
            elif colour[nxt] == 0:
                colour[nxt] = 1
                stack.append((nxt, iter(succ[nxt])))
    return False


def threshold_to_dag(A_hat, tol: float = DAG_TOL):
    """Zero the smallest entries until the support is acyclic.

    Candidate thresholds are the distinct nonzero magnitudes in ascending
    order; entries with |a| < threshold are dropped.  Removing edges never
    creates a cycle, so the first passing threshold is found by bisection.
    Returns (matrix, threshold); the threshold is inf if every entry had to go.
    """
    A = np.array(A_hat, dtype=float)
    mags = np.unique(np.abs(A[A != 0]))
    if mags.size == 0:
        return A, 0.0
    cands = np.append(mags, np.inf)

    def cut(tau):
        return np.where(np.abs(A) < tau, 0.0, A)

    def ok(k):
        return h_dag(cut(cands[k])) <= tol

    lo, hi = 0, cands.size - 1  # cands[-1] = inf always passes
    if ok(lo):
        return cut(cands[lo]), float(cands[lo])
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    out = cut(cands[hi])
    out[out == 0] = 0.0
    return out, float(cands[hi])


def _pair_states(S: np.ndarray, iu, ju) -> np.ndarray:
    # per unordered pair: 0 none, 1 i->j only, 2 j->i only, 3 both
    return S[..., iu, ju].astype(np.int8) + 2 * S[..., ju, iu].astype(np.int8)


def structural_hamming_distance(S_true, S_hat):
    """Edge insertions, deletions and reversals turning S_hat into S_true.

    Each unordered off-diagonal pair is scored on its own: a single edge
    reversed costs 1, adding or removing one direction costs 1, and going
    between no edge and both directions costs 2.  Leading axes broadcast,
    so stacks of graphs can be compared in one call.
    """
    S_true = np.asarray(S_true) != 0
    S_hat = np.asarray(S_hat) != 0
    d = S_true.shape[-1]
    iu, ju = np.triu_indices(d, 1)
    a = _pair_states(S_hat, iu, ju)
    b = _pair_states(S_true, iu, ju)
    none_vs_both = (a ^ b) == 3
    none_vs_both &= (a == 0) | (a == 3)
    cost = (a != b).sum(axis=-1) + none_vs_both.sum(axis=-1)
    return int(cost) if np.ndim(cost) == 0 else cost


@dataclass(frozen=True)
class Metrics:
    beta_err: float
    mu_err: float
    A_err: float
    hd: float
    hd_raw: int
    shd: int
    threshold: float

    def to_dict(self) -> dict:
        return {
            "beta_err": self.beta_err,
            "mu_err": self.mu_err,
            "A_err": self.A_err,
            "hd": self.hd,
            "hd_raw": self.hd_raw,
            "shd": self.shd,
            "threshold": self.threshold,
        }


def metrics(A_true, A_hat, mu_true=None, mu_hat=None, beta_true=None, beta_hat=None) -> Metrics:
    A_true = np.asarray(A_true, dtype=float)
    A_hat = np.asarray(A_hat, dtype=float)
    if A_true.shape != A_hat.shape:
        raise ValueError(f"shape mismatch: {A_true.shape} vs {A_hat.shape}")
    d = A_true.shape[0]
    A_err = float(np.abs(A_hat - A_true).sum())
    mu_err = math.nan
    if mu_true is not None and mu_hat is not None:
        mu_err = float(np.abs(np.asarray(mu_hat) - np.asarray(mu_true)).sum())
    beta_err = math.nan
    if beta_true is not None and beta_hat is not None:
        beta_err = abs(float(beta_hat) - float(beta_true))
    thresholded, tau = threshold_to_dag(A_hat)
    S_hat = thresholded != 0
    S_true = A_true != 0
    hd_raw = int(np.sum(S_hat != S_true))
    shd = structural_hamming_distance(S_true, S_hat)
    return Metrics(beta_err, mu_err, A_err, hd_raw / d ** 2, hd_raw, shd, tau)


# -- export -------------------------------------------------------------------


def strength_category(w: float, cuts=defaults.STRENGTH_CUTS) -> str:
    a = abs(w)
    if a == 0:
        return "none"
    if a < cuts[0]:
        return "+"
    if a < cuts[1]:
        return "++"
    return "+++"


@dataclass(frozen=True)
class GCGraph:
    d: int
    weights: np.ndarray  # weights[i, j]: effect of j on i
    categories: tuple  # categories[i][j] in {"none", "+", "++", "+++"}
    type_names: tuple

    def sign(self, i: int, j: int) -> str:
        w = self.weights[i, j]
        if w > 0:
            return "exciting"
        if w < 0:
            return "inhibiting"
        return "none"

    def edges(self):
        """(source, target, weight, category, sign) for every nonzero weight."""
        out = []
        for i in range(self.d):
            for j in range(self.d):
                if self.weights[i, j] != 0:
                    out.append((j, i, float(self.weights[i, j]), self.categories[i][j], self.sign(i, j)))
        return out

    def strong_exciting_successors(self):
        """succ[j] = targets i with an exciting edge j -> i of category ++ or +++."""
        succ = [[] for _ in range(self.d)]
        for i in range(self.d):
            for j in range(self.d):
                if self.weights[i, j] > 0 and self.categories[i][j] in ("++", "+++"):
                    succ[j].append(i)
        return [sorted(s) for s in succ]


def make_graph(A, type_names=None, cuts=defaults.STRENGTH_CUTS) -> GCGraph:
    if isinstance(A, HawkesParams):
        A = A.A
    W = np.array(A, dtype=float)
    d = W.shape[0]
    names = tuple(type_names) if type_names is not None else default_type_names(d)
    cats = tuple(tuple(strength_category(W[i, j], cuts) for j in range(d)) for i in range(d))
    return GCGraph(d, W, cats, names)


def _dot_id(name: str) -> str:
    return '"' + name.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(graph: GCGraph, max_penwidth: float = 5.0) -> str:
    lines = ["digraph GC {"]
    for name in graph.type_names:
        lines.append(f"  {_dot_id(name)};")
    edges = graph.edges()
    top = max((abs(e[2]) for e in edges), default=0.0)
    for src, dst, w, cat, sign in edges:
        colour = "blue" if sign == "exciting" else "red"
        width = max_penwidth * abs(w) / top if top > 0 else 1.0
        lines.append(
            f"  {_dot_id(graph.type_names[src])} -> {_dot_id(graph.type_names[dst])} "
            f'[color={colour}, penwidth={width:.3f}, label="{cat}", sign={sign}, weight_value={w!r}];'
        )
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_graph(A, type_names=None, cuts=defaults.STRENGTH_CUTS):
    graph = make_graph(A, type_names, cuts)
    return graph, to_dot(graph)
