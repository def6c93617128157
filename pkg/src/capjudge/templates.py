from dataclasses import dataclass
from decimal import Decimal
from functools import lru_cache
from importlib import resources
from string import Template
from typing import List, Optional, Sequence, Tuple

from .explanations import PREFIXES, StructuredExplanation, parse_explanation
from .judgments import JudgmentInstance
from .scoring import BinningConfig, bin_score

__all__ = ['TemplateError', 'CriterionSpec', 'CRITERIA', 'Turn', 'Conversation', 'SftRecord', 'render_scoring_query',
           'render_score_response', 'render_explanation_query', 'render_explanation_response',
           'render_generation_prompt', 'score_decimals', 'build_sft_record', 'sft_record_to_json', 'export_sft']


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class CriterionSpec:
    name: str
    description: str


CRITERIA = (
    CriterionSpec('fluency', 'Whether the caption is fluent, natural, and grammatically correct.'),
    CriterionSpec('relevance', 'Whether the sentence correctly describes the visual content and is closely '
                               'relevant to the image.'),
    CriterionSpec('descriptiveness', 'Whether the sentence is a precise, informative caption that describes '
                                     'important details of the image.'),
)


@lru_cache(maxsize=None)
def _template(name: str) -> Template:
    text = resources.files(__package__).joinpath('resources', f'{name}.txt').read_text(encoding='utf-8')
    # resource files end with one newline that is not part of the prompt
    return Template(text.removesuffix('\n'))


def _render(name: str, caption: str) -> str:
    if not isinstance(caption, str) or not caption.strip():
        raise TemplateError('caption is empty')
    return _template(name).substitute({c.name: c.description for c in CRITERIA}, caption=caption)


def render_scoring_query(caption: str) -> str:
    return _render('scoring_query', caption)


def render_explanation_query(caption: str) -> str:
    return _render('explanation_query', caption)


def render_generation_prompt(caption: str) -> str:
    """
    Explanation-generation prompt for building explanation datasets.
    The human score is deliberately not part of it.
    """
    return _render('generation_prompt', caption)


def score_decimals(score: float) -> int:
    """
    Number of fractional digits in the shortest representation of score (at least 1).
    """
    exponent = Decimal(repr(float(score))).normalize().as_tuple().exponent
    return max(1, -exponent)


def render_score_response(score: float, decimals: int = 2) -> str:
    if not 0.0 <= score <= 1.0:
        raise TemplateError(f'score {score} outside [0, 1]')
    if decimals < 1:
        raise TemplateError('decimals must be positive')
    value = Decimal(repr(float(score)))
    quantized = value.quantize(Decimal(1).scaleb(-decimals))
    if quantized != value:
        raise TemplateError(f'score not aligned to rendering precision: {score} with {decimals} decimals')
    return str(quantized)


def render_explanation_response(expl: StructuredExplanation) -> str:
    for name, body in zip(('fluency', 'relevance', 'descriptiveness'), expl.as_tuple()):
        if not body.strip():
            raise TemplateError(f'{name} explanation is empty')
    return '\n'.join(f'{prefix} {body}' for prefix, body in zip(PREFIXES, expl.as_tuple()))


@dataclass(frozen=True)
class Turn:
    role: str
    text: str
    image_attached: bool = False


@dataclass(frozen=True)
class Conversation:
    turns: Tuple[Turn, ...]

    def __post_init__(self):
        if not self.turns or self.turns[0].role != 'user':
            raise TemplateError('a conversation starts with a user turn')
        for i, turn in enumerate(self.turns):
            if turn.role != ('user' if i % 2 == 0 else 'assistant'):
                raise TemplateError('conversation roles must alternate')
            if turn.image_attached and i != 0:
                raise TemplateError('only the first user turn can carry the image')


@dataclass(frozen=True)
class SftRecord:
    image_ref: str
    conversation: Conversation

    def __post_init__(self):
        turns = self.conversation.turns
        if len(turns) != 4:
            raise TemplateError('a training record has exactly four turns')
        try:
            score = float(turns[1].text)
        except ValueError:
            raise TemplateError(f'score response is not a number: {turns[1].text!r}') from None
        if not 0.0 <= score <= 1.0:
            raise TemplateError(f'score response {score} outside [0, 1]')
        parse_explanation(turns[3].text)


def build_sft_record(image_ref: str, caption: str, score: float, expl: StructuredExplanation,
                     decimals: Optional[int] = 2) -> SftRecord:
    """
    score must already be binned; decimals=None renders it at its natural precision.
    """
    if decimals is None:
        decimals = score_decimals(score)
    turns = (
        Turn('user', render_scoring_query(caption), True),
        Turn('assistant', render_score_response(score, decimals)),
        Turn('user', render_explanation_query(caption)),
        Turn('assistant', render_explanation_response(expl)),
    )
    return SftRecord(image_ref, Conversation(turns))


def sft_record_to_json(record: SftRecord) -> dict:
    return {'image': record.image_ref,
            'turns': [{'role': t.role, 'text': t.text} for t in record.conversation.turns]}


def export_sft(instances: Sequence[JudgmentInstance], bin_size: Optional[float] = 0.10,
               decimals: int = 2) -> List[SftRecord]:
    """
    One two-stage training record per instance. bin_size=None disables binning and renders
    every score at its natural precision.
    """
    config = BinningConfig(bin_size) if bin_size is not None else None
    records = []
    for instance in instances:
        if instance.explanation is None:
            raise TemplateError(f'instance {instance.id} has no explanation')
        expl = parse_explanation(instance.explanation)
        if config is None:
            records.append(build_sft_record(instance.image_ref, instance.caption, instance.norm_score, expl, None))
        else:
            records.append(build_sft_record(instance.image_ref, instance.caption,
                                            bin_score(instance.norm_score, config), expl, decimals))
    return records
