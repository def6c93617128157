import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .utils import derive_rng, format_table, read_records, wrap_record_error

__all__ = ['CRITERION_NAMES', 'PREFIXES', 'RATING_CRITERIA', 'DISAGREEMENT', 'ExplanationError',
           'StructuredExplanation', 'RatingRecord', 'CriterionSummary', 'QualityReport', 'parse_explanation',
           'load_ratings', 'aggregate_ratings', 'bootstrap_ci', 'format_quality_table']

CRITERION_NAMES = ('fluency', 'relevance', 'descriptiveness')
PREFIXES = ('Fluency:', 'Relevance:', 'Descriptiveness:')
# markdown decoration models like to wrap headings in, e.g. **Fluency:**
DECORATION = '*_#`>- \t'

RATING_CRITERIA = ('consistency', 'factuality', 'informativeness')
DISAGREEMENT = 'disagreement'


class ExplanationError(ValueError):
    def __init__(self, reason: str, message: str):
        super().__init__(f'{reason}: {message}')
        self.reason = reason


def _match_prefix(line: str) -> Optional[Tuple[int, str]]:
    stripped = line.strip()
    cleaned = stripped.lstrip(DECORATION)
    for idx, prefix in enumerate(PREFIXES):
        if cleaned.startswith(prefix):
            rest = cleaned[len(prefix):]
            # closing decoration only exists when the heading was decorated
            return idx, rest.lstrip(DECORATION) if cleaned != stripped else rest.lstrip()
    return None


@dataclass(frozen=True)
class StructuredExplanation:
    fluency: str
    relevance: str
    descriptiveness: str

    def __post_init__(self):
        for name, body in zip(CRITERION_NAMES, self.as_tuple()):
            if not body.strip():
                raise ExplanationError('empty', f'{name} explanation is empty')
            for line in body.splitlines()[1:]:
                if _match_prefix(line) is not None:
                    raise ExplanationError('out-of-order', f'{name} explanation contains a criterion line')

    def as_tuple(self) -> Tuple[str, str, str]:
        return self.fluency, self.relevance, self.descriptiveness


def parse_explanation(text: str) -> StructuredExplanation:
    """
    Criterion text runs from its prefix to the next prefixed line (or the end of text);
    lines before the first prefix are ignored.
    """
    bodies: List[List[str]] = []
    order: List[int] = []
    for line in text.splitlines():
        match = _match_prefix(line)
        if match is None:
            if bodies:
                bodies[-1].append(line)
            continue
        order.append(match[0])
        bodies.append([match[1]])

    if order != [0, 1, 2]:
        missing = [PREFIXES[i] for i in range(3) if i not in order]
        if missing:
            raise ExplanationError('missing', f'no line starting with {missing[0]}')
        raise ExplanationError('out-of-order', 'criterion lines are not Fluency, Relevance, Descriptiveness')
    texts = ['\n'.join(b).strip() for b in bodies]
    for name, body in zip(CRITERION_NAMES, texts):
        if not body:
            raise ExplanationError('empty', f'{name} explanation is empty')
    return StructuredExplanation(*texts)


@dataclass(frozen=True)
class RatingRecord:
    instance: str
    annotator: str
    criterion: str
    value: Union[int, str]
    system: Optional[str] = None

    def __post_init__(self):
        if self.criterion not in RATING_CRITERIA:
            raise ValueError(f'invalid criterion: {self.criterion}')
        if self.value == DISAGREEMENT:
            if self.criterion != 'informativeness':
                raise ValueError('the disagreement option only exists for informativeness')
        elif isinstance(self.value, bool) or self.value not in (1, 2, 3, 4):
            raise ValueError(f'invalid rating: {self.value!r}')

    @property
    def is_disagreement(self) -> bool:
        return self.value == DISAGREEMENT


@dataclass(frozen=True)
class CriterionSummary:
    system: Optional[str]
    criterion: str
    mean: float
    std: float
    count: int
    ci: Tuple[float, float]
    excluded: int = 0


class QualityReport:
    def __init__(self, rows: List[CriterionSummary]):
        self.rows = rows

    def get(self, criterion: str, system: Optional[str] = None) -> CriterionSummary:
        for row in self.rows:
            if row.criterion == criterion and row.system == system:
                return row
        raise KeyError((system, criterion))

    @property
    def systems(self) -> List[Optional[str]]:
        return list(dict.fromkeys(row.system for row in self.rows))


def load_ratings(path: str) -> List[RatingRecord]:
    records = []
    for lineno, record in read_records(path):
        with wrap_record_error(path, lineno):
            value = record['value']
            if isinstance(value, str) and value.strip().lower() == DISAGREEMENT:
                value = DISAGREEMENT
            records.append(RatingRecord(str(record['instance']), str(record['annotator']), record['criterion'],
                                        value, record.get('system')))
    return records


def bootstrap_ci(values: Sequence[float], resamples: int = 10000, level: float = 0.95,
                 seed: int = 0) -> Tuple[float, float]:
    """
    Percentile bootstrap interval of the mean.
    """
    data = np.sort(np.asarray(values, dtype=np.float64))
    if data.size == 0:
        raise ValueError('cannot bootstrap an empty sample')
    if resamples < 1000:
        raise ValueError('at least 1000 resamples are required')
    if not 0 < level < 1:
        raise ValueError('level must be in (0, 1)')
    rng = derive_rng(seed, 'bootstrap')
    n = data.size
    means = np.empty(resamples)
    chunk = max(1, (1 << 22) // n)
    for start in range(0, resamples, chunk):
        stop = min(resamples, start + chunk)
        means[start:stop] = data[rng.integers(0, n, size=(stop - start, n))].mean(axis=1)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(means, [alpha, 1 - alpha])
    return float(lo), float(hi)


def aggregate_ratings(records: Sequence[RatingRecord], ddof: int = 0, resamples: int = 10000,
                      level: float = 0.95, seed: int = 0) -> QualityReport:
    """
    Pools ratings across annotators and instances per (system, criterion).
    Disagreement-marked ratings are excluded from every statistic.
    """
    if not records:
        raise ValueError('no ratings to aggregate')
    groups: Dict[Tuple[Optional[str], str], List[RatingRecord]] = {}
    for record in records:
        groups.setdefault((record.system, record.criterion), []).append(record)
    systems = sorted({s for s, _ in groups}, key=lambda s: (s is not None, s or ''))

    rows = []
    for system in systems:
        for criterion in RATING_CRITERIA:
            group = groups.get((system, criterion))
            if group is None:
                continue
            values = np.array(sorted(r.value for r in group if not r.is_disagreement), dtype=np.float64)
            excluded = len(group) - values.size
            label = criterion if system is None else f'{criterion} ({system})'
            if values.size == 0:
                raise ValueError(f'zero retained ratings for {label}')
            if excluded:
                logging.info(f'Excluded {excluded} disagreement ratings for {label}')
            if values.size <= ddof:
                logging.warning(f'Only {values.size} rating for {label}; standard deviation is undefined')
                std = float('nan')
            else:
                std = float(np.std(values, ddof=ddof))
            rows.append(CriterionSummary(system, criterion, float(values.mean()), std, int(values.size),
                                         bootstrap_ci(values, resamples, level, seed), excluded))
    return QualityReport(rows)


def format_quality_table(report: QualityReport, level: float = 0.95) -> str:
    ci_title = f'{level * 100:g}% CI'
    with_system = any(row.system is not None for row in report.rows)
    header = ['Criteria', 'Average', 'Std. Dev.', ci_title, 'N']
    if with_system:
        header.insert(0, 'System')
    lines = [header]
    for row in report.rows:
        cells = [row.criterion.capitalize(), f'{row.mean:.2f}', f'{row.std:.2f}',
                 f'[{row.ci[0]:.2f}, {row.ci[1]:.2f}]', str(row.count)]
        if with_system:
            cells.insert(0, row.system or '-')
        lines.append(cells)
    return format_table(lines, left=2 if with_system else 1)

