import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from disjoint_set import DisjointSet

from .utils import DatasetError, derive_rng, read_lines, read_records, wrap_record_error, write_records

__all__ = ['PROPORTION', 'SPLITS', 'CATEGORIES', 'DatasetKind', 'DATASET_KINDS', 'JudgmentInstance',
           'PairwisePreferenceTask', 'ScoreStratum', 'DatasetError', 'cf_proportion', 'load_dataset',
           'load_exclusions', 'load_aliases', 'load_pascal50s', 'dump_instance', 'save_dataset',
           'merge_duplicates', 'merge_by_source', 'validate_strata', 'parse_strata', 'stratified_sample']

PROPORTION = 'proportion'
SPLITS = ('train', 'val', 'test')
CATEGORIES = ('HC', 'HI', 'HM', 'MM')

Scale = Union[Tuple[float, float], str]


@dataclass(frozen=True)
class DatasetKind:
    name: str
    # None: every record declares its own scale_lo / scale_hi
    scale: Optional[Tuple[float, float]]
    votes: bool
    statistic: str


DATASET_KINDS: Dict[str, DatasetKind] = {k.name: k for k in [
    DatasetKind('canonical', None, False, 'tau_c'),
    DatasetKind('flickr8k-ex', (1.0, 4.0), False, 'tau_c'),
    DatasetKind('flickr8k-cf', None, True, 'tau_b'),
    DatasetKind('composite', (1.0, 5.0), False, 'tau_c'),
    DatasetKind('polaris', (0.0, 1.0), False, 'tau_c'),
    DatasetKind('nebula', (0.0, 1.0), False, 'tau_c'),
]}


def get_kind(name: str) -> DatasetKind:
    if name not in DATASET_KINDS:
        raise ValueError(f'Unknown dataset kind: {name} (choices: {", ".join(DATASET_KINDS)})')
    return DATASET_KINDS[name]


@dataclass(frozen=True)
class JudgmentInstance:
    id: str
    image_ref: str
    caption: str
    raw_score: float
    raw_scale: Scale
    norm_score: float
    source: str
    split: str = 'test'
    annotator_count: Optional[int] = None
    # three-line structured explanation text, present in explanation datasets
    explanation: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.caption.strip():
            raise ValueError('caption is empty')
        if not 0.0 <= self.norm_score <= 1.0:
            raise ValueError(f'normalized score {self.norm_score} outside [0, 1]')
        if self.raw_scale != PROPORTION:
            lo, hi = self.raw_scale
            if not lo < hi:
                raise ValueError(f'invalid scale [{lo}, {hi}]')
            if self.norm_score != (self.raw_score - lo) / (hi - lo):
                raise ValueError('normalized score does not match the raw score')
        if self.split not in SPLITS:
            raise ValueError(f'invalid split: {self.split}')
        if self.annotator_count is not None and self.annotator_count < 1:
            raise ValueError('annotator_count must be positive')

    @classmethod
    def from_raw(cls, id: str, image_ref: str, caption: str, raw_score: float, scale: Tuple[float, float],
                 source: str, **kwargs) -> 'JudgmentInstance':
        lo, hi = scale
        if not lo < hi:
            raise ValueError(f'invalid scale [{lo}, {hi}]')
        if not lo <= raw_score <= hi:
            raise ValueError(f'score outside declared scale: {raw_score} not in [{lo}, {hi}]')
        return cls(id, image_ref, caption, raw_score, (lo, hi), (raw_score - lo) / (hi - lo), source, **kwargs)

    @property
    def key(self) -> Tuple[str, str]:
        return self.image_ref, self.caption


@dataclass(frozen=True)
class PairwisePreferenceTask:
    id: str
    image_ref: str
    candidate_a: str
    candidate_b: str
    category: str
    human_choice: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f'invalid category: {self.category}')
        if self.candidate_a == self.candidate_b:
            raise ValueError('candidates are identical')
        if self.human_choice not in ('A', 'B'):
            raise ValueError(f'invalid human choice: {self.human_choice}')


@dataclass(frozen=True)
class ScoreStratum:
    """
    Either a score interval over the normalized score ([lo, hi), or [lo, hi] when closed),
    or a discrete level matched against the raw score.
    """
    sample_count: int
    lo: Optional[float] = None
    hi: Optional[float] = None
    level: Optional[float] = None
    closed: bool = False

    def __post_init__(self):
        if self.sample_count < 0:
            raise ValueError('sample_count must be nonnegative')
        if (self.level is None) == (self.lo is None or self.hi is None):
            raise ValueError('a stratum is either an interval or a level')
        if self.level is None and not 0.0 <= self.lo < self.hi <= 1.0:
            raise ValueError(f'invalid interval [{self.lo}, {self.hi}]')

    @property
    def is_level(self) -> bool:
        return self.level is not None

    @property
    def name(self) -> str:
        if self.is_level:
            return f'level {self.level:g}'
        return f'[{self.lo:g}, {self.hi:g}{"]" if self.closed else ")"}'

    def contains(self, instance: JudgmentInstance) -> bool:
        if self.is_level:
            return math.isclose(instance.raw_score, self.level, rel_tol=0.0, abs_tol=1e-9)
        if self.closed:
            return self.lo <= instance.norm_score <= self.hi
        return self.lo <= instance.norm_score < self.hi


def cf_proportion(judgments: Sequence[Union[str, bool, int]]) -> float:
    if not judgments:
        raise ValueError('no judgments to aggregate')
    yes = 0
    for vote in judgments:
        if isinstance(vote, str):
            vote = vote.strip().lower()
            if vote not in ('yes', 'no'):
                raise ValueError(f'invalid vote: {vote!r}')
            yes += vote == 'yes'
        elif isinstance(vote, (bool, int)) and vote in (0, 1):
            yes += bool(vote)
        else:
            raise ValueError(f'invalid vote: {vote!r}')
    return yes / len(judgments)


def load_exclusions(path: str) -> Set[str]:
    return {line for _, line in read_lines(path) if not line.startswith('#')}


def _parse_instance(record: dict, kind: DatasetKind) -> JudgmentInstance:
    caption = record['caption']
    image = record['image']
    if not isinstance(caption, str) or not isinstance(image, str):
        raise ValueError('image and caption must be strings')
    if not caption.strip():
        raise ValueError('caption is empty')
    common = dict(source=str(record.get('source', kind.name)), split=record.get('split', 'test'),
                  explanation=record.get('explanation'))
    annotators = record.get('annotator_count')
    if annotators is not None:
        annotators = int(annotators)

    if 'votes' in record or kind.votes:
        votes = record['votes']
        if not isinstance(votes, list):
            raise ValueError('votes must be a list')
        score = cf_proportion(votes)
        return JudgmentInstance(str(record['id']), image, caption, score, PROPORTION, score,
                                annotator_count=annotators or len(votes), **common)

    raw = float(record['raw_score'])
    lo = record.get('scale_lo', kind.scale and kind.scale[0])
    hi = record.get('scale_hi', kind.scale and kind.scale[1])
    if lo is None or hi is None:
        raise KeyError('scale_lo' if lo is None else 'scale_hi')
    return JudgmentInstance.from_raw(str(record['id']), image, caption, raw, (float(lo), float(hi)),
                                     annotator_count=annotators, **common)


def load_dataset(path: str, schema: str = 'canonical', exclude: Optional[Set[str]] = None) -> List[JudgmentInstance]:
    kind = get_kind(schema)
    exclude = exclude or set()
    instances: List[JudgmentInstance] = []
    seen: Set[str] = set()
    excluded = 0
    for lineno, record in read_records(path):
        with wrap_record_error(path, lineno):
            if str(record['id']) in exclude:
                excluded += 1
                continue
            instance = _parse_instance(record, kind)
        if instance.id in seen:
            raise DatasetError(path, lineno, f'duplicate id {instance.id}')
        seen.add(instance.id)
        instances.append(instance)
    if excluded:
        logging.info(f'Excluded {excluded} instances from {path}')
    logging.info(f'Loaded {len(instances)} {kind.name} instances from {path}')
    return instances


def load_pascal50s(path: str) -> List[PairwisePreferenceTask]:
    tasks: List[PairwisePreferenceTask] = []
    for lineno, record in read_records(path):
        with wrap_record_error(path, lineno):
            choice = record['choice']
            if isinstance(choice, str):
                choice = choice.strip().upper()
            tasks.append(PairwisePreferenceTask(str(record.get('id', f'pascal50s-{lineno}')), record['image'],
                                                record['a'], record['b'], record['category'], choice))
    return tasks


def dump_instance(instance: JudgmentInstance) -> dict:
    if instance.raw_scale == PROPORTION:
        # vote lists are not retained after loading; the proportion is kept on a [0, 1] scale
        lo, hi = 0.0, 1.0
    else:
        lo, hi = instance.raw_scale
    record = {'id': instance.id, 'image': instance.image_ref, 'caption': instance.caption,
              'raw_score': instance.raw_score, 'scale_lo': lo, 'scale_hi': hi,
              'source': instance.source, 'split': instance.split}
    if instance.annotator_count is not None:
        record['annotator_count'] = instance.annotator_count
    if instance.explanation is not None:
        record['explanation'] = instance.explanation
    return record


def load_aliases(path: str) -> List[Tuple[str, str]]:
    """
    One pair of whitespace-separated image references per line, naming the same image.
    """
    aliases = []
    for lineno, line in read_lines(path):
        if line.startswith('#'):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(path, lineno, 'expected two image references')
        aliases.append((parts[0], parts[1]))
    return aliases


def save_dataset(path: str, instances: Iterable[JudgmentInstance]) -> int:
    return write_records(path, map(dump_instance, instances))


def _canonical_images(aliases: Iterable[Tuple[str, str]]) -> Dict[str, str]:
    djs = DisjointSet()
    for a, b in aliases:
        djs.union(a, b)
    canonical: Dict[str, str] = {}
    for group in djs.itersets():
        root = min(group)
        for ref in group:
            canonical[ref] = root
    return canonical


def _merge_group(group: List[JudgmentInstance]) -> JudgmentInstance:
    first = group[0]
    sources = sorted({s for i in group for s in i.source.split('+')})
    splits = {i.split for i in group}
    if len(splits) > 1:
        logging.warning(f'Duplicates of {first.id} span splits {sorted(splits)}; keeping {first.split}')
    score = math.fsum(i.norm_score for i in group) / len(group)
    explanation = next((i.explanation for i in group if i.explanation is not None), None)
    # scales may differ inside a group, so the merged score lives on [0, 1]
    return JudgmentInstance(first.id, first.image_ref, first.caption, score, (0.0, 1.0), score,
                            '+'.join(sources), first.split, len(group), explanation)


def merge_duplicates(instances: Sequence[JudgmentInstance],
                     aliases: Iterable[Tuple[str, str]] = ()) -> List[JudgmentInstance]:
    """
    Groups instances by (image, caption) and replaces every group with one instance
    carrying the arithmetic mean of the group's normalized scores.
    aliases: pairs of image references that name the same image
    """
    canonical = _canonical_images(aliases)
    groups: Dict[Tuple[str, str], List[JudgmentInstance]] = {}
    for instance in instances:
        key = canonical.get(instance.image_ref, instance.image_ref), instance.caption
        groups.setdefault(key, []).append(instance)
    merged = [g[0] if len(g) == 1 else _merge_group(g) for g in groups.values()]
    logging.info(f'Merged {len(instances)} instances into {len(merged)} unique pairs')
    return merged


def merge_by_source(instances: Sequence[JudgmentInstance],
                    aliases: Iterable[Tuple[str, str]] = ()) -> List[JudgmentInstance]:
    """
    Merges duplicates inside every source first, then cross-source duplicates.
    The result can differ from a single pooled merge when group sizes differ.
    """
    aliases = list(aliases)
    by_source: Dict[str, List[JudgmentInstance]] = {}
    for instance in instances:
        by_source.setdefault(instance.source, []).append(instance)
    within: List[JudgmentInstance] = []
    for group in by_source.values():
        within += merge_duplicates(group, aliases)
    return merge_duplicates(within, aliases)


def validate_strata(strata: Sequence[ScoreStratum]) -> List[ScoreStratum]:
    """
    Checks that strata are all intervals (disjoint, ordered) or all distinct levels,
    and returns them with the final interval closed on the right.
    """
    if not strata:
        raise ValueError('no strata given')
    if all(s.is_level for s in strata):
        levels = [s.level for s in strata]
        if len(set(levels)) != len(levels):
            raise ValueError('duplicate stratum levels')
        return list(strata)
    if any(s.is_level for s in strata):
        raise ValueError('cannot mix interval and level strata')
    for prev, cur in zip(strata, strata[1:]):
        if prev.closed or cur.lo < prev.hi:
            raise ValueError(f'strata {prev.name} and {cur.name} overlap or are out of order')
    return list(strata[:-1]) + [replace(strata[-1], closed=True)]


def parse_strata(specs: Sequence[str], levels: bool = False) -> List[ScoreStratum]:
    """
    Interval notation 'lo:hi:count' (e.g. 0:0.33:34), level notation 'level:count' (e.g. 3:25).
    """
    strata: List[ScoreStratum] = []
    for spec in specs:
        parts = spec.split(':')
        try:
            if levels and len(parts) == 2:
                strata.append(ScoreStratum(int(parts[1]), level=float(parts[0])))
            elif not levels and len(parts) == 3:
                strata.append(ScoreStratum(int(parts[2]), lo=float(parts[0]), hi=float(parts[1])))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f'Invalid stratum: {spec}') from None
    return validate_strata(strata)


def stratified_sample(instances: Sequence[JudgmentInstance], strata: Sequence[ScoreStratum],
                      seed: int) -> List[JudgmentInstance]:
    strata = validate_strata(strata)
    rng = derive_rng(seed, 'sample')
    result: List[JudgmentInstance] = []
    for stratum in strata:
        pool = [i for i, inst in enumerate(instances) if stratum.contains(inst)]
        if len(pool) < stratum.sample_count:
            raise ValueError(f'insufficient population in stratum {stratum.name}: '
                             f'{len(pool)} < {stratum.sample_count}')
        chosen = sorted(pool[int(k)] for k in rng.choice(len(pool), size=stratum.sample_count, replace=False))
        logging.debug(f'Sampled {len(chosen)} of {len(pool)} instances from stratum {stratum.name}')
        result += [instances[i] for i in chosen]
    return result
