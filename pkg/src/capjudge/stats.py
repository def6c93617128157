import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .judgments import CATEGORIES, PairwisePreferenceTask, get_kind
from .utils import format_table

__all__ = ['CorrelationResult', 'PairwiseAccuracyReport', 'kendall_tau_b', 'kendall_tau_c', 'brute_force_tau',
           'correlate', 'pascal50s_accuracy', 'format_correlation_table', 'format_accuracy_table']

BRUTE_FORCE_LIMIT = 2000


@dataclass(frozen=True)
class CorrelationResult:
    tau: float
    n: int
    n_c: int
    n_d: int
    ties_x: int
    ties_y: int
    # pairs tied in both x and y; counted in ties_x and ties_y alike
    ties_xy: int = 0
    m: Optional[int] = None
    variant: str = 'b'

    def __post_init__(self):
        if not -1.0 <= self.tau <= 1.0:
            raise ValueError(f'tau {self.tau} outside [-1, 1]')
        if self.n_c + self.n_d + self.ties_x + self.ties_y - self.ties_xy > self.n * (self.n - 1) // 2:
            raise ValueError('pair counts exceed the number of pairs')


@dataclass(frozen=True)
class PairwiseAccuracyReport:
    accuracy: Dict[str, float]
    average: float
    tie_count: int
    counts: Dict[str, int] = field(default_factory=dict)


def _tied_pairs(*columns: np.ndarray) -> int:
    _, counts = np.unique(np.stack(columns, axis=1), axis=0, return_counts=True)
    return int(sum(int(c) * (int(c) - 1) // 2 for c in counts))


def _discordant_pairs(x: np.ndarray, y: np.ndarray) -> int:
    """
    Strict inversions of y once the pairs are sorted by (x, y); ties in x sort y ascending
    and so never count. Fenwick tree over the dense ranks of y.
    """
    order = np.lexsort((y, x))
    ranks = np.unique(y, return_inverse=True)[1].reshape(-1)[order] + 1
    size = int(ranks.max())
    tree = [0] * (size + 1)
    discordant = 0
    for seen, r in enumerate(ranks.tolist()):
        # elements so far with rank <= r
        not_greater, i = 0, r
        while i > 0:
            not_greater += tree[i]
            i -= i & -i
        discordant += seen - not_greater
        i = r
        while i <= size:
            tree[i] += 1
            i += i & -i
    return discordant


def _validate(x: Sequence[float], y: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f'length mismatch: {x.size} vs {y.size}')
    if x.size < 2:
        raise ValueError('at least two observations are required')
    if np.isnan(x).any() or np.isnan(y).any():
        raise ValueError('NaN in input')
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError('degenerate input: all values equal')
    return x, y


def _pair_counts(x: np.ndarray, y: np.ndarray) -> Tuple[int, int, int, int, int, int]:
    n = x.size
    n0 = n * (n - 1) // 2
    n1 = _tied_pairs(x)
    n2 = _tied_pairs(y)
    n3 = _tied_pairs(x, y)
    n_d = _discordant_pairs(x, y)
    n_c = n0 - n1 - n2 + n3 - n_d
    return n0, n1, n2, n3, n_c, n_d


def _clip(tau: float) -> float:
    return min(1.0, max(-1.0, tau))


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    x, y = _validate(x, y)
    n0, n1, n2, n3, n_c, n_d = _pair_counts(x, y)
    tau = (n_c - n_d) / math.sqrt((n0 - n1) * (n0 - n2))
    return CorrelationResult(_clip(tau), x.size, n_c, n_d, n1, n2, n3, None, 'b')


def kendall_tau_c(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """
    m is the smaller of the two distinct-value counts.
    """
    x, y = _validate(x, y)
    m = min(np.unique(x).size, np.unique(y).size)
    if m < 2:
        raise ValueError('tau-c needs at least two distinct values in each vector')
    n = x.size
    _, n1, n2, n3, n_c, n_d = _pair_counts(x, y)
    tau = 2 * m * (n_c - n_d) / (n * n * (m - 1))
    return CorrelationResult(_clip(tau), n, n_c, n_d, n1, n2, n3, m, 'c')


def brute_force_tau(x: Sequence[float], y: Sequence[float], variant: str = 'b') -> float:
    if variant not in ('b', 'c'):
        raise ValueError(f'invalid variant: {variant}')
    if len(x) > BRUTE_FORCE_LIMIT:
        raise ValueError(f'brute force is limited to {BRUTE_FORCE_LIMIT} observations')
    xs, ys = _validate(x, y)
    xs, ys = xs.tolist(), ys.tolist()
    n = len(xs)
    n_c = n_d = ties_x = ties_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = xs[i] - xs[j]
            dy = ys[i] - ys[j]
            if dx == 0:
                ties_x += 1
            if dy == 0:
                ties_y += 1
            if (dx > 0 and dy > 0) or (dx < 0 and dy < 0):
                n_c += 1
            elif (dx > 0 and dy < 0) or (dx < 0 and dy > 0):
                n_d += 1
    if variant == 'b':
        n0 = n * (n - 1) // 2
        return _clip((n_c - n_d) / math.sqrt((n0 - ties_x) * (n0 - ties_y)))
    m = min(len(set(xs)), len(set(ys)))
    if m < 2:
        raise ValueError('tau-c needs at least two distinct values in each vector')
    return _clip(2 * m * (n_c - n_d) / (n * n * (m - 1)))


def correlate(kind: str, x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    statistic = get_kind(kind).statistic
    if statistic == 'tau_b':
        return kendall_tau_b(x, y)
    if statistic == 'tau_c':
        return kendall_tau_c(x, y)
    raise ValueError(f'dataset kind {kind} is not evaluated by rank correlation')


def pascal50s_accuracy(tasks: Sequence[PairwisePreferenceTask], scores: Mapping[Tuple[str, str], float],
                       tie_credit: float = 0.5) -> PairwiseAccuracyReport:
    """
    scores maps (task id, 'A' | 'B') to the metric score of that candidate.
    A task is correct when the higher-scored candidate is the human choice; exact ties earn tie_credit.
    """
    if not 0.0 <= tie_credit <= 1.0:
        raise ValueError('tie credit must be in [0, 1]')
    correct = {c: 0.0 for c in CATEGORIES}
    counts = {c: 0 for c in CATEGORIES}
    ties = 0
    for task in tasks:
        try:
            a, b = scores[task.id, 'A'], scores[task.id, 'B']
        except KeyError as e:
            raise ValueError(f'missing score for {e.args[0]}') from None
        counts[task.category] += 1
        if a == b:
            ties += 1
            correct[task.category] += tie_credit
        elif ('A' if a > b else 'B') == task.human_choice:
            correct[task.category] += 1
    empty = [c for c in CATEGORIES if counts[c] == 0]
    if empty:
        raise ValueError(f'empty category: {", ".join(empty)}')
    accuracy = {c: correct[c] / counts[c] for c in CATEGORIES}
    return PairwiseAccuracyReport(accuracy, math.fsum(accuracy.values()) / len(CATEGORIES), ties, counts)


def format_correlation_table(rows: Sequence[Tuple[str, CorrelationResult]]) -> str:
    """
    Correlations are shown x100 with one decimal.
    """
    lines: List[List[str]] = [['Dataset', 'Statistic', 'Value', 'N']]
    for name, result in rows:
        lines.append([name, f'tau_{result.variant}', f'{result.tau * 100:.1f}', str(result.n)])
    return format_table(lines)


def format_accuracy_table(report: PairwiseAccuracyReport) -> str:
    header = list(CATEGORIES) + ['Avg', 'Ties']
    values = [f'{report.accuracy[c] * 100:.1f}' for c in CATEGORIES]
    return format_table([header, values + [f'{report.average * 100:.1f}', str(report.tie_count)]], left=0)
