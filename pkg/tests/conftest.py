import json

import pytest

from capjudge.backend import MockScript, build_two_stage_requests
from capjudge.judgments import JudgmentInstance
from capjudge.scoring import GeneratedToken

EXPLANATION = ('Fluency: The caption is grammatical and reads naturally.\n'
               'Relevance: It describes the man and the wave shown in the image.\n'
               'Descriptiveness: It names the surfboard, the key detail of the scene.')


def certain_tokens(literal: str):
    # one token per character, each generated with probability 1
    return tuple(GeneratedToken(ch, ((ch, 1.0),)) for ch in literal)


@pytest.fixture
def write_jsonl(tmp_path):
    def write(name, records):
        path = tmp_path / name
        with open(path, 'w', encoding='utf-8') as f:
            for record in records:
                f.write((record if isinstance(record, str) else json.dumps(record)) + '\n')
        return str(path)
    return write


@pytest.fixture
def synthetic_dataset():
    """
    100 instances with distinct normalized scores 0.00, 0.01, ..., 0.99.
    """
    return [JudgmentInstance.from_raw(f'inst-{i}', f'data:image/png;base64,aW1n{i}', f'a photo of object number {i}',
                                      float(i), (0.0, 100.0), 'synthetic') for i in range(100)]


@pytest.fixture
def scripted():
    """
    Builds a mock script whose scoring stage answers each instance with the given score
    (two decimals, every digit certain) and whose explanation stage answers with EXPLANATION.
    """
    def build(instances, scores, score_latency=0.5, explanation_latency=1.5, explanation=EXPLANATION):
        script = MockScript()
        for instance, score in zip(instances, scores):
            literal = f'{score:.2f}'
            script.add(build_two_stage_requests(instance.caption, instance.image_ref), literal,
                       certain_tokens(literal), score_latency)
            script.add(build_two_stage_requests(instance.caption, instance.image_ref, literal, stage='explanation'),
                       explanation, latency=explanation_latency)
        return script
    return build
