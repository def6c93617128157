import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

__all__ = ['ScoreError', 'BinningConfig', 'GeneratedToken', 'DigitDistribution', 'SmoothedScore', 'bin_score',
           'extract_digit_distributions', 'smooth_score', 'decode_greedy_score']

DIGITS = '0123456789'
# weight 10^-j of the j-th place after the decimal point, j = 1, 2
PLACE_WEIGHTS = np.array([0.1, 0.01])


class ScoreError(ValueError):
    pass


@dataclass(frozen=True)
class BinningConfig:
    bin_size: float = 0.10

    def __post_init__(self):
        if not 0 < self.bin_size <= 1:
            raise ValueError(f'bin size {self.bin_size} outside (0, 1]')


def bin_score(s: float, config: BinningConfig = BinningConfig()) -> float:
    """
    Rounds s to the nearest multiple of the bin size, ties away from zero, clamped to [0, 1].
    Decimal arithmetic keeps ties such as 0.85 / 0.1 exact.
    """
    if not 0.0 <= s <= 1.0:
        raise ScoreError(f'score {s} outside [0, 1]')
    b = Decimal(repr(float(config.bin_size)))
    steps = (Decimal(repr(float(s))) / b).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return min(1.0, max(0.0, float(steps * b)))


@dataclass(frozen=True)
class GeneratedToken:
    text: str
    # (token text, probability), sorted by descending probability
    candidates: Tuple[Tuple[str, float], ...] = ()


@dataclass(frozen=True, eq=False)
class DigitDistribution:
    # probs[j - 1, i] = p(i, j)
    probs: np.ndarray
    renormalized: Tuple[bool, bool] = (False, False)
    coverage: Tuple[float, float] = (1.0, 1.0)
    # greedy text before the decimal point
    integer_part: Optional[str] = None

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.shape != (2, 10):
            raise ValueError(f'expected a 2x10 probability table, got {probs.shape}')
        if np.any(probs < 0):
            raise ValueError('negative digit probability')
        if not np.allclose(probs.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
            raise ValueError('digit probabilities do not sum to 1')
        probs.setflags(write=False)
        object.__setattr__(self, 'probs', probs)

    @classmethod
    def from_probabilities(cls, first: Mapping[int, float],
                           second: Optional[Mapping[int, float]] = None) -> 'DigitDistribution':
        """
        second=None means the second place was never generated: p(0, 2) = 1.
        """
        probs = np.zeros((2, 10))
        for digit, p in first.items():
            probs[0, digit] = p
        if second is None:
            probs[1, 0] = 1.0
            return cls(probs, (False, True), (1.0, 0.0))
        for digit, p in second.items():
            probs[1, digit] = p
        return cls(probs)

    def p(self, i: int, j: int) -> float:
        return float(self.probs[j - 1, i])


@dataclass(frozen=True)
class SmoothedScore:
    value: float
    # E_j = sum_i i * p(i, j)
    expectations: Tuple[float, float]

    def __post_init__(self):
        if not -1e-12 <= self.value <= 0.99 + 1e-12:
            raise ValueError(f'smoothed score {self.value} outside [0, 0.99]')


def _digit_mass(token: GeneratedToken) -> np.ndarray:
    mass = np.zeros(10)
    for text, p in token.candidates:
        # multi-digit tokens such as '60' count toward their leading digit
        if text[:1] and text[0] in DIGITS:
            mass[DIGITS.index(text[0])] += p
    return mass


def extract_digit_distributions(tokens: Sequence[GeneratedToken]) -> DigitDistribution:
    """
    Positions 1 and 2 are the two generated tokens right after the decimal-point token.
    Non-digit candidate mass is discarded and the rest renormalized. The second position
    counts as absent when generation stopped or moved on to a non-digit token.
    """
    point = next((k for k, token in enumerate(tokens) if '.' in token.text), None)
    if point is None:
        raise ScoreError(f'no decimal point in generated text: {"".join(t.text for t in tokens)!r}')
    integer_part = (''.join(t.text for t in tokens[:point]) + tokens[point].text.split('.', 1)[0]).strip()

    probs = np.zeros((2, 10))
    renormalized = [False, False]
    coverage = [0.0, 0.0]
    for j in (1, 2):
        k = point + j
        present = k < len(tokens) and (j == 1 or tokens[k].text[:1] in tuple(DIGITS))
        mass = _digit_mass(tokens[k]) if present else np.zeros(10)
        total = float(mass.sum())
        if total <= 0.0:
            if j == 1:
                raise ScoreError('zero digit mass at the first decimal place')
            probs[1, 0] = 1.0
            renormalized[1] = True
            continue
        probs[j - 1] = mass / total
        coverage[j - 1] = total
        renormalized[j - 1] = abs(total - 1.0) > 1e-9
    return DigitDistribution(probs, tuple(renormalized), tuple(coverage), integer_part)


def smooth_score(dist: DigitDistribution) -> SmoothedScore:
    """
    s = sum_{j=1,2} 10^-j * sum_{i=0..9} i * p(i, j)
    The integer part is not part of the expectation, so a greedy '1.00' smooths over its fractional digits.
    """
    expectations = dist.probs @ np.arange(10)
    value = float(PLACE_WEIGHTS @ expectations)
    return SmoothedScore(min(max(value, 0.0), 0.99), (float(expectations[0]), float(expectations[1])))


_SCORE_LITERAL = re.compile(r'\s*(\d+(?:\.\d+)?|\.\d+)')


def decode_greedy_score(text: str) -> Tuple[float, str]:
    """
    Returns the parsed score and the exact literal consumed, which is echoed back as the
    assistant turn of the explanation stage.
    """
    match = _SCORE_LITERAL.match(text)
    if not match:
        raise ScoreError(f'unparseable score: {text!r}')
    literal = match.group(1)
    value = float(literal)
    if not 0.0 <= value <= 1.0:
        raise ScoreError(f'score {literal} outside [0, 1]')
    return value, literal
