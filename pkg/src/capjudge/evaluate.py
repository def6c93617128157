import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .backend import Backend, BackendError, build_generation_request, build_two_stage_requests, create_backend, \
    run_ordered
from .config import RunConfig
from .explanations import parse_explanation
from .judgments import JudgmentInstance, PairwisePreferenceTask, merge_by_source
from .scoring import decode_greedy_score, extract_digit_distributions, smooth_score
from .stats import CorrelationResult, correlate
from .templates import export_sft, render_explanation_response, sft_record_to_json
from .utils import format_table, read_records, wrap_record_error, write_records

__all__ = ['EvaluationRow', 'EvaluationResult', 'ExplanationResult', 'TimingReport', 'evaluate_caption',
           'evaluate_dataset', 'correlate_rows', 'explain_dataset', 'export_sft_records', 'score_pairwise',
           'load_pairwise_scores', 'save_pairwise_scores', 'time_profile', 'format_timing_table', 'dump_row',
           'load_rows', 'save_rows']


@dataclass(frozen=True)
class EvaluationRow:
    id: str
    # smoothed score, or the greedy score when smoothing is off; None for failed rows
    score: Optional[float]
    greedy_text: str = ''
    explanation: Optional[str] = None
    score_latency: float = 0.0
    explanation_latency: Optional[float] = None
    coverage: Optional[Tuple[float, float]] = None
    renormalized: Optional[Tuple[bool, bool]] = None
    error: Optional[str] = None
    # greedy integer part was 1; smoothing only sees the fractional digits
    integer_one: bool = False

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def greedy_score(self) -> float:
        return float(self.greedy_text)

    @property
    def latency(self) -> float:
        return self.score_latency + (self.explanation_latency or 0.0)


class EvaluationResult:
    def __init__(self):
        self.rows: List[EvaluationRow] = []
        self.correlation: Optional[CorrelationResult] = None
        # same statistic over the greedy, unsmoothed scores
        self.greedy_correlation: Optional[CorrelationResult] = None
        self.error_count: int = 0


class ExplanationResult:
    def __init__(self):
        self.instances: List[JudgmentInstance] = []
        self.error_count: int = 0


def evaluate_caption(conf: RunConfig, backend: Backend, caption: str, image_ref: str, id: str = '',
                     score_only: Optional[bool] = None) -> EvaluationRow:
    """
    Scoring stage, then (in full mode) the explanation stage with the greedy score echoed back.
    """
    request = build_two_stage_requests(caption, image_ref, model=conf.model,
                                       candidate_count=conf.candidate_count if conf.smoothing else 0,
                                       score_max_tokens=conf.score_max_tokens)
    response = backend.complete(request)
    greedy, literal = decode_greedy_score(response.text)
    coverage = renormalized = None
    integer_one = False
    score = greedy
    if conf.smoothing:
        dist = extract_digit_distributions(response.tokens)
        score = smooth_score(dist).value
        coverage, renormalized = dist.coverage, dist.renormalized
        if any(renormalized):
            logging.debug(f'{id}: digit mass renormalized (coverage {coverage[0]:.4f}, {coverage[1]:.4f})')
        if dist.integer_part == '1':
            integer_one = True
            logging.warning(f'{id}: greedy score {literal} has integer part 1; smoothed score {score:.4f} '
                            f'covers the fractional digits only')
    if conf.score_only if score_only is None else score_only:
        return EvaluationRow(id, score, literal, None, response.latency, None, coverage, renormalized,
                             integer_one=integer_one)

    request = build_two_stage_requests(caption, image_ref, literal, stage='explanation', model=conf.model,
                                       explanation_max_tokens=conf.explanation_max_tokens)
    second = backend.complete(request)
    explanation = render_explanation_response(parse_explanation(second.text))
    return EvaluationRow(id, score, literal, explanation, response.latency, second.latency, coverage, renormalized,
                         integer_one=integer_one)


def _correlate_successful(kind: str, rows: Sequence[EvaluationRow], human: Sequence[float],
                          greedy: bool = False) -> Optional[CorrelationResult]:
    metric = [row.greedy_score if greedy else row.score for row in rows]
    try:
        return correlate(kind, metric, human)
    except ValueError as e:
        logging.warning(f'Cannot compute correlation over {len(rows)} rows: {e}')
        return None


def evaluate_dataset(conf: RunConfig, dataset: Sequence[JudgmentInstance], kind: str = 'canonical',
                     backend: Optional[Backend] = None) -> EvaluationResult:
    backend = backend or create_backend(conf)

    def evaluate_one(instance: JudgmentInstance) -> EvaluationRow:
        try:
            return evaluate_caption(conf, backend, instance.caption, instance.image_ref, instance.id)
        except (BackendError, ValueError) as e:
            logging.warning(f'Failed to evaluate {instance.id}: {e}')
            return EvaluationRow(instance.id, None, error=str(e))

    result = EvaluationResult()
    result.rows = run_ordered(evaluate_one, dataset, conf.parallelism, desc='evaluate')
    result.error_count = sum(row.failed for row in result.rows)
    ok = [(row, instance) for row, instance in zip(result.rows, dataset) if not row.failed]
    if result.error_count:
        logging.warning(f'{result.error_count} of {len(dataset)} rows failed; '
                        f'correlation covers the remaining {len(ok)}')
    rows = [row for row, _ in ok]
    human = [instance.norm_score for _, instance in ok]
    result.correlation = _correlate_successful(kind, rows, human)
    if conf.smoothing:
        result.greedy_correlation = _correlate_successful(kind, rows, human, greedy=True)
    return result


def correlate_rows(rows: Sequence[EvaluationRow], dataset: Sequence[JudgmentInstance],
                   kind: str = 'canonical') -> CorrelationResult:
    """
    Joins scored rows to the dataset by instance id; failed rows are left out.
    """
    human = {instance.id: instance.norm_score for instance in dataset}
    metric, reference = [], []
    for row in rows:
        if row.failed:
            continue
        if row.id not in human:
            raise ValueError(f'row {row.id} is not in the dataset')
        metric.append(row.score)
        reference.append(human[row.id])
    if len(metric) < len(human):
        logging.info(f'{len(human) - len(metric)} dataset instances have no scored row')
    return correlate(kind, metric, reference)


def explain_dataset(conf: RunConfig, dataset: Sequence[JudgmentInstance],
                    backend: Optional[Backend] = None) -> ExplanationResult:
    """
    Builds an explanation dataset: one generation request per instance. Only the caption
    and image go into the prompt, never the human score.
    """
    backend = backend or create_backend(conf)

    def explain_one(instance: JudgmentInstance) -> Optional[JudgmentInstance]:
        request = build_generation_request(instance.caption, instance.image_ref, conf.model,
                                           conf.explanation_max_tokens)
        try:
            explanation = parse_explanation(backend.complete(request).text)
        except (BackendError, ValueError) as e:
            logging.warning(f'Failed to generate an explanation for {instance.id}: {e}')
            return None
        return replace(instance, explanation=render_explanation_response(explanation))

    result = ExplanationResult()
    for instance in run_ordered(explain_one, dataset, conf.parallelism, desc='explain'):
        if instance is None:
            result.error_count += 1
        else:
            result.instances.append(instance)
    return result


def export_sft_records(dataset: Sequence[JudgmentInstance], aliases: Iterable[Tuple[str, str]] = (),
                       bin_size: Optional[float] = 0.10, decimals: int = 2) -> List[dict]:
    merged = merge_by_source(dataset, aliases)
    return [sft_record_to_json(record) for record in export_sft(merged, bin_size, decimals)]


def score_pairwise(conf: RunConfig, tasks: Sequence[PairwisePreferenceTask],
                   backend: Optional[Backend] = None) -> Tuple[Dict[Tuple[str, str], float], int]:
    """
    Scores both candidates of every task with the scoring stage only.
    Returns the scores keyed by (task id, 'A' | 'B') and the number of failed candidates.
    """
    backend = backend or create_backend(conf)
    items = [(task, side) for task in tasks for side in ('A', 'B')]

    def score_one(item: Tuple[PairwisePreferenceTask, str]) -> Optional[float]:
        task, side = item
        caption = task.candidate_a if side == 'A' else task.candidate_b
        try:
            return evaluate_caption(conf, backend, caption, task.image_ref, f'{task.id}:{side}', score_only=True).score
        except (BackendError, ValueError) as e:
            logging.warning(f'Failed to score {task.id} candidate {side}: {e}')
            return None

    scores = {}
    errors = 0
    for (task, side), score in zip(items, run_ordered(score_one, items, conf.parallelism, desc='pascal50s')):
        if score is None:
            errors += 1
        else:
            scores[task.id, side] = score
    return scores, errors


def load_pairwise_scores(path: str) -> Dict[Tuple[str, str], float]:
    scores = {}
    for lineno, record in read_records(path):
        with wrap_record_error(path, lineno):
            side = str(record['candidate']).upper()
            if side not in ('A', 'B'):
                raise ValueError(f'invalid candidate: {side}')
            scores[str(record['task']), side] = float(record['score'])
    return scores


def save_pairwise_scores(path: str, scores: Dict[Tuple[str, str], float]) -> int:
    return write_records(path, ({'task': task, 'candidate': side, 'score': score}
                                for (task, side), score in scores.items()))


@dataclass(frozen=True)
class TimingReport:
    score_mean: float
    score_count: int
    # None when no row ran the explanation stage
    explanation_mean: Optional[float] = None
    full_mean: Optional[float] = None
    full_count: int = 0


def time_profile(rows: Sequence[EvaluationRow]) -> TimingReport:
    rows = [row for row in rows if not row.failed]
    if not rows:
        raise ValueError('no successful rows to profile')
    score_mean = math.fsum(row.score_latency for row in rows) / len(rows)
    full = [row for row in rows if row.explanation_latency is not None]
    if not full:
        return TimingReport(score_mean, len(rows))
    return TimingReport(score_mean, len(rows),
                        math.fsum(row.explanation_latency for row in full) / len(full),
                        math.fsum(row.latency for row in full) / len(full), len(full))


def format_timing_table(report: TimingReport) -> str:
    lines = [['Metric', 'Inference Time (sec)', 'N'],
             ['capjudge (score only)', f'{report.score_mean:.3f}', str(report.score_count)]]
    if report.full_mean is not None:
        lines.append(['capjudge (explanation stage)', f'{report.explanation_mean:.3f}', str(report.full_count)])
        lines.append(['capjudge', f'{report.full_mean:.3f}', str(report.full_count)])
    return format_table(lines)


def dump_row(row: EvaluationRow) -> dict:
    record = {'id': row.id}
    if row.failed:
        record['error'] = row.error
        return record
    record.update({'score': row.score, 'greedy': row.greedy_text, 'score_latency': row.score_latency})
    if row.explanation is not None:
        record['explanation'] = row.explanation
        record['explanation_latency'] = row.explanation_latency
    if row.coverage is not None:
        record['coverage'] = list(row.coverage)
        record['renormalized'] = list(row.renormalized)
    if row.integer_one:
        record['integer_one'] = True
    return record


def save_rows(path: str, rows: Iterable[EvaluationRow]) -> int:
    return write_records(path, map(dump_row, rows))


def load_rows(path: str) -> List[EvaluationRow]:
    rows = []
    for lineno, record in read_records(path):
        with wrap_record_error(path, lineno):
            if 'error' in record:
                rows.append(EvaluationRow(str(record['id']), None, error=str(record['error'])))
                continue
            coverage = record.get('coverage')
            renormalized = record.get('renormalized')
            rows.append(EvaluationRow(
                str(record['id']), float(record['score']), str(record['greedy']), record.get('explanation'),
                float(record['score_latency']), record.get('explanation_latency'),
                tuple(coverage) if coverage is not None else None,
                tuple(renormalized) if renormalized is not None else None,
                integer_one=bool(record.get('integer_one', False))))
    return rows
