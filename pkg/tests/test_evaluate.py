import logging
from dataclasses import replace
from types import SimpleNamespace

import pytest

from conftest import EXPLANATION
from capjudge.backend import MockBackend, MockScript, OpenAIBackend, build_generation_request
from capjudge.config import RunConfig
from capjudge.evaluate import EvaluationRow, correlate_rows, evaluate_dataset, explain_dataset, export_sft_records, \
    format_timing_table, load_pairwise_scores, load_rows, save_pairwise_scores, save_rows, score_pairwise, \
    time_profile
from capjudge.judgments import PairwisePreferenceTask
from capjudge.templates import render_scoring_query


class CountingBackend(MockBackend):
    def __init__(self, script: MockScript):
        super().__init__(script)
        self.stages = []

    def complete(self, request):
        self.stages.append(request.stage)
        return super().complete(request)


def replying_backend(text: str) -> OpenAIBackend:
    reply = SimpleNamespace(choices=[SimpleNamespace(message=SimpleNamespace(content=text), logprobs=None)],
                            usage=None)
    completions = SimpleNamespace(create=lambda **body: reply)
    return OpenAIBackend('http://localhost:1/v1', client=SimpleNamespace(chat=SimpleNamespace(completions=completions)))


def make_config(**values) -> RunConfig:
    conf = RunConfig()
    conf.backend = 'mock'
    conf.parallelism = 8
    for key, value in values.items():
        setattr(conf, key, value)
    return conf


class TestEvaluateDataset:
    def test_perfect_agreement(self, synthetic_dataset, scripted):
        script = scripted(synthetic_dataset, [i.norm_score for i in synthetic_dataset])
        result = evaluate_dataset(make_config(), synthetic_dataset, 'canonical', MockBackend(script))
        assert result.error_count == 0
        assert result.correlation.tau == 1.0
        assert result.correlation.variant == 'c'
        assert result.greedy_correlation.tau == 1.0
        assert [row.id for row in result.rows] == [i.id for i in synthetic_dataset]
        assert all(row.explanation == EXPLANATION for row in result.rows)
        assert result.rows[37].score == pytest.approx(0.37)
        assert result.rows[37].greedy_text == '0.37'

    def test_reversed(self, synthetic_dataset, scripted):
        script = scripted(synthetic_dataset, [0.99 - i.norm_score for i in synthetic_dataset])
        result = evaluate_dataset(make_config(), synthetic_dataset, 'canonical', MockBackend(script))
        assert result.correlation.tau == -1.0

    def test_score_only(self, synthetic_dataset, scripted):
        backend = CountingBackend(scripted(synthetic_dataset, [i.norm_score for i in synthetic_dataset]))
        result = evaluate_dataset(make_config(mode='score_only'), synthetic_dataset, 'canonical', backend)
        assert all(row.explanation is None for row in result.rows)
        assert backend.stages == ['score'] * len(synthetic_dataset)

    def test_full_mode_calls(self, synthetic_dataset, scripted):
        backend = CountingBackend(scripted(synthetic_dataset, [i.norm_score for i in synthetic_dataset]))
        evaluate_dataset(make_config(), synthetic_dataset, 'canonical', backend)
        assert backend.stages.count('score') == backend.stages.count('explanation') == len(synthetic_dataset)

    def test_failed_rows(self, synthetic_dataset, scripted):
        script = scripted(synthetic_dataset[:90], [i.norm_score for i in synthetic_dataset[:90]])
        result = evaluate_dataset(make_config(), synthetic_dataset, 'canonical', MockBackend(script))
        assert result.error_count == 10
        assert all(row.failed for row in result.rows[90:])
        assert 'no script entry' in result.rows[95].error
        assert result.correlation.n == 90
        assert result.correlation.tau == 1.0

    def test_malformed_explanation_fails_row(self, synthetic_dataset, scripted):
        data = synthetic_dataset[:5]
        script = scripted(data, [i.norm_score for i in data], explanation='Looks fine to me.')
        result = evaluate_dataset(make_config(), data, 'canonical', MockBackend(script))
        assert result.error_count == 5
        assert result.correlation is None

    def test_unreadable_image_fails_row(self, synthetic_dataset, tmp_path):
        data = [synthetic_dataset[0], replace(synthetic_dataset[1], image_ref=str(tmp_path / 'missing.jpg')),
                synthetic_dataset[2]]
        conf = make_config(mode='score_only', smoothing=False, parallelism=2)
        result = evaluate_dataset(conf, data, 'canonical', replying_backend('0.70'))
        assert [row.failed for row in result.rows] == [False, True, False]
        assert 'cannot read image' in result.rows[1].error
        assert result.error_count == 1

    def test_integer_one_flagged(self, synthetic_dataset, scripted, tmp_path, caplog):
        data = synthetic_dataset[:3]
        script = scripted(data, [1.0, 0.5, 0.2])
        with caplog.at_level(logging.WARNING):
            result = evaluate_dataset(make_config(mode='score_only'), data, 'canonical', MockBackend(script))
        assert [row.integer_one for row in result.rows] == [True, False, False]
        assert result.rows[0].greedy_text == '1.00' and result.rows[0].score == 0.0
        assert 'inst-0: greedy score 1.00 has integer part 1' in caplog.text
        path = str(tmp_path / 'rows.jsonl')
        save_rows(path, result.rows)
        assert [row.integer_one for row in load_rows(path)] == [True, False, False]

    def test_without_smoothing(self, synthetic_dataset, scripted):
        script = scripted(synthetic_dataset, [i.norm_score for i in synthetic_dataset])
        conf = make_config(smoothing=False, mode='score_only')
        result = evaluate_dataset(conf, synthetic_dataset, 'canonical', MockBackend(script))
        assert result.rows[42].score == 0.42
        assert result.rows[42].coverage is None
        assert result.greedy_correlation is None

    def test_byte_identical_output(self, synthetic_dataset, scripted, tmp_path):
        script = scripted(synthetic_dataset, [i.norm_score for i in synthetic_dataset])
        outputs = []
        for run in range(2):
            result = evaluate_dataset(make_config(seed=5), synthetic_dataset, 'canonical', MockBackend(script))
            path = tmp_path / f'rows{run}.jsonl'
            save_rows(str(path), result.rows)
            outputs.append(path.read_bytes())
        assert outputs[0] == outputs[1]

    def test_rows_reload(self, synthetic_dataset, scripted, tmp_path):
        script = scripted(synthetic_dataset[:50], [i.norm_score for i in synthetic_dataset[:50]])
        result = evaluate_dataset(make_config(), synthetic_dataset, 'canonical', MockBackend(script))
        path = str(tmp_path / 'rows.jsonl')
        save_rows(path, result.rows)
        rows = load_rows(path)
        assert rows == result.rows
        assert correlate_rows(rows, synthetic_dataset).tau == 1.0


class TestCorrelateRows:
    def test_unknown_row(self, synthetic_dataset):
        rows = [EvaluationRow('other', 0.5, '0.50'), EvaluationRow('inst-1', 0.1, '0.10')]
        with pytest.raises(ValueError, match='not in the dataset'):
            correlate_rows(rows, synthetic_dataset)


class TestTimeProfile:
    def test_constant(self):
        rows = [EvaluationRow(str(k), 0.5, '0.50', score_latency=0.5) for k in range(10)]
        report = time_profile(rows)
        assert report.score_mean == 0.5
        assert report.explanation_mean is None and report.full_mean is None
        assert 'explanation stage' not in format_timing_table(report)

    def test_full_not_faster(self, synthetic_dataset, scripted):
        script = scripted(synthetic_dataset, [i.norm_score for i in synthetic_dataset], 0.25, 0.75)
        full = time_profile(evaluate_dataset(make_config(), synthetic_dataset, 'canonical',
                                             MockBackend(script)).rows)
        score_only = time_profile(evaluate_dataset(make_config(mode='score_only'), synthetic_dataset, 'canonical',
                                                   MockBackend(script)).rows)
        assert full.full_mean == pytest.approx(1.0)
        assert full.explanation_mean == pytest.approx(0.75)
        assert full.full_mean >= score_only.score_mean
        assert 'Inference Time (sec)' in format_timing_table(full)

    def test_empty(self):
        with pytest.raises(ValueError):
            time_profile([EvaluationRow('a', None, error='boom')])


class TestExplainDataset:
    def test_generation(self, synthetic_dataset):
        data = synthetic_dataset[:4]
        script = MockScript()
        for instance in data[:3]:
            request = build_generation_request(instance.caption, instance.image_ref)
            script.add(request, 'Sure.\n' + EXPLANATION)
            assert f'{instance.norm_score}' not in request.messages[0].text
        result = explain_dataset(make_config(), data, MockBackend(script))
        assert result.error_count == 1
        assert [i.id for i in result.instances] == [i.id for i in data[:3]]
        assert all(i.explanation == EXPLANATION for i in result.instances)

    def test_unreadable_image_skipped(self, synthetic_dataset, tmp_path):
        data = [replace(synthetic_dataset[0], image_ref=str(tmp_path)), synthetic_dataset[1]]
        result = explain_dataset(make_config(), data, replying_backend(EXPLANATION))
        assert result.error_count == 1
        assert [i.id for i in result.instances] == ['inst-1']


class TestExportSft:
    def test_merge_and_bin(self, synthetic_dataset):
        first = replace(synthetic_dataset[59], explanation=EXPLANATION)
        duplicate = replace(synthetic_dataset[61], id='dup', caption=first.caption, image_ref=first.image_ref,
                            source='nebula', explanation=EXPLANATION)
        other = replace(synthetic_dataset[12], explanation=EXPLANATION)
        records = export_sft_records([first, duplicate, other])
        assert len(records) == 2
        assert records[0]['turns'][1]['text'] == '0.60'
        assert records[1]['turns'][1]['text'] == '0.10'
        assert records[0]['turns'][0]['text'] == render_scoring_query(first.caption)

    def test_no_binning(self, synthetic_dataset):
        instance = replace(synthetic_dataset[37], explanation=EXPLANATION)
        assert export_sft_records([instance], bin_size=None)[0]['turns'][1]['text'] == '0.37'


class TestPairwise:
    def test_score_pairwise(self, tmp_path, scripted):
        task = PairwisePreferenceTask('t1', 'data:image/png;base64,eA==', 'a good caption', 'a bad caption',
                                      'HC', 'A')
        candidates = (task.candidate_a, task.candidate_b)
        instances = [SimpleNamespace(caption=c, image_ref=task.image_ref) for c in candidates]
        backend = CountingBackend(scripted(instances, [0.8, 0.3]))
        scores, errors = score_pairwise(make_config(), [task], backend)
        assert errors == 0
        assert scores == {('t1', 'A'): pytest.approx(0.8), ('t1', 'B'): pytest.approx(0.3)}
        assert backend.stages == ['score', 'score']

        path = str(tmp_path / 'scores.jsonl')
        save_pairwise_scores(path, scores)
        assert load_pairwise_scores(path) == scores
