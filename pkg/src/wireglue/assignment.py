"""Score matrices with dustbins, dual-softmax and mutual nearest neighbours."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx

DEFAULT_THRESHOLD = 0.2


def point_score_matrix(fa, fb):
    """``S[i, j] = <fa_i, fb_j>``."""
    return nx.matmul(fa, nx.transpose(fb))


def line_score_matrix(fa, fb, edges_a, edges_b, gram=None):
    """Endpoint-order agnostic line scores.

    ``S[i, j] = max(<a_s,b_s> + <a_e,b_e>, <a_s,b_e> + <a_e,b_s>)``. All four
    terms are read from one node Gram matrix, so swapping the endpoints of a
    line permutes identical floating point values and the result is
    bit-identical.
    """
    edges_a = np.asarray(edges_a, dtype=np.intp).reshape(-1, 2)
    edges_b = np.asarray(edges_b, dtype=np.intp).reshape(-1, 2)
    if gram is None:
        gram = point_score_matrix(fa, fb)
    sa, ea = edges_a[:, 0], edges_a[:, 1]
    sb, eb = edges_b[:, 0], edges_b[:, 1]
    straight = nx.add(nx.gather2d(gram, sa, sb), nx.gather2d(gram, ea, eb))
    crossed = nx.add(nx.gather2d(gram, sa, eb), nx.gather2d(gram, ea, sb))
    return nx.maximum(straight, crossed)


def augment(body, dustbin):
    """(M+1) x (N+1) matrix whose last row and column hold ``dustbin``."""
    return nx.dustbin_augment(body, dustbin)


def log_dual_softmax(aug):
    """Log of ``sqrt(softmax_row * softmax_col)`` on an augmented matrix."""
    return nx.scale(nx.add(nx.log_softmax(aug, axis=1), nx.log_softmax(aug, axis=0)), 0.5)


def dual_softmax(aug):
    """Final assignment matrix (dustbins included). Array in, array out."""
    if isinstance(aug, nx.Var):
        return nx.exp(log_dual_softmax(aug))
    a = np.asarray(aug, dtype=np.float64)
    return np.exp(0.5 * (nx.log_softmax(a, axis=1) + nx.log_softmax(a, axis=0)))


@dataclass
class MatchSet:
    matches: list = field(default_factory=list)  # [(i, j, confidence)]
    unmatched_a: list = field(default_factory=list)
    unmatched_b: list = field(default_factory=list)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(i, j) for i, j, _ in self.matches]


def extract_matches(final, threshold: float = DEFAULT_THRESHOLD) -> MatchSet:
    """Mutual nearest neighbours of the body with score >= ``threshold``.

    Ties go to the lowest index (``argmax`` order).
    """
    final = np.asarray(nx.value_of(final))
    body = final[:-1, :-1]
    m, n = body.shape
    if m == 0 or n == 0:
        return MatchSet([], list(range(m)), list(range(n)))
    best_j = body.argmax(axis=1)
    best_i = body.argmax(axis=0)
    matches = []
    for i in range(m):
        j = int(best_j[i])
        if best_i[j] == i and body[i, j] >= threshold:
            matches.append((i, j, float(body[i, j])))
    used_a = {i for i, _, _ in matches}
    used_b = {j for _, j, _ in matches}
    return MatchSet(matches,
                    [i for i in range(m) if i not in used_a],
                    [j for j in range(n) if j not in used_b])


def match_log_scores(fa, fb, edges_a, edges_b, bin_point, bin_line):
    """Log final assignment matrices for points (nodes) and lines."""
    gram = point_score_matrix(fa, fb)
    log_p = log_dual_softmax(augment(gram, bin_point))
    s_l = line_score_matrix(fa, fb, edges_a, edges_b, gram=gram)
    log_l = log_dual_softmax(augment(s_l, bin_line))
    return log_p, log_l
