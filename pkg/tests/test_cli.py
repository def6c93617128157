import json
from dataclasses import replace
from types import SimpleNamespace

import pytest

from conftest import EXPLANATION
from capjudge.cli import cli_entry
from capjudge.judgments import load_dataset, save_dataset


@pytest.fixture
def workspace(tmp_path, synthetic_dataset, scripted):
    dataset = str(tmp_path / 'dataset.jsonl')
    save_dataset(dataset, synthetic_dataset)
    script = str(tmp_path / 'script.jsonl')
    scripted(synthetic_dataset, [i.norm_score for i in synthetic_dataset]).save(script)
    return tmp_path, dataset, script


def run(*argv):
    cli_entry([str(a) for a in argv])


class TestEvaluateCommand:
    def test_evaluate_deterministic(self, workspace, capsys):
        tmp_path, dataset, script = workspace
        outputs = []
        for k in range(2):
            rows = tmp_path / f'rows{k}.jsonl'
            run('evaluate', dataset, '--backend', 'mock', '--mock-script', script, '--seed', 3, '-o', rows)
            outputs.append(rows.read_bytes())
        assert outputs[0] == outputs[1]
        out = capsys.readouterr().out
        assert '100.0' in out
        assert '100 rows scored, 0 failed' in out

    def test_failed_rows_exit_code(self, workspace, tmp_path, synthetic_dataset, scripted):
        _, dataset, _ = workspace
        partial = str(tmp_path / 'partial.jsonl')
        scripted(synthetic_dataset[:50], [i.norm_score for i in synthetic_dataset[:50]]).save(partial)
        with pytest.raises(SystemExit) as info:
            run('evaluate', dataset, '--backend', 'mock', '--mock-script', partial, '--score-only')
        assert info.value.code == 1

    def test_correlate_and_profile(self, workspace, capsys):
        tmp_path, dataset, script = workspace
        rows = tmp_path / 'rows.jsonl'
        run('evaluate', dataset, '--backend', 'mock', '--mock-script', script, '-o', rows)
        capsys.readouterr()
        run('correlate', rows, dataset)
        assert '100.0' in capsys.readouterr().out
        run('profile', rows)
        out = capsys.readouterr().out
        assert 'Inference Time (sec)' in out
        assert '0.500' in out and '2.000' in out

    def test_score(self, workspace, synthetic_dataset, capsys):
        _, _, script = workspace
        instance = synthetic_dataset[42]
        run('score', instance.image_ref, instance.caption, '--backend', 'mock', '--mock-script', script)
        out = capsys.readouterr().out
        assert 'greedy 0.42' in out
        assert EXPLANATION.splitlines()[0] in out

    def test_config_file(self, workspace, tmp_path):
        _, dataset, script = workspace
        config = tmp_path / 'config.json'
        config.write_text(json.dumps({'backend': 'mock', 'mock_script': script, 'mode': 'score_only'}))
        run('evaluate', dataset, '--config', config)

    def test_unknown_config_key(self, workspace, tmp_path):
        _, dataset, _ = workspace
        config = tmp_path / 'config.json'
        config.write_text(json.dumps({'temperature': 0.7}))
        with pytest.raises(SystemExit) as info:
            run('evaluate', dataset, '--config', config)
        assert info.value.code == 2

    def test_smoothing_needs_candidates(self, workspace):
        _, dataset, script = workspace
        with pytest.raises(SystemExit) as info:
            run('evaluate', dataset, '--backend', 'mock', '--mock-script', script, '--candidate-count', 5)
        assert info.value.code == 2


class TestDataCommands:
    def test_sample(self, tmp_path, synthetic_dataset):
        dataset = str(tmp_path / 'dataset.jsonl')
        save_dataset(dataset, synthetic_dataset)
        out = str(tmp_path / 'sample.jsonl')
        run('sample', dataset, '--strata', '0:0.33:10', '0.33:0.66:10', '0.66:1:10', '-o', out, '--seed', 1)
        sample = load_dataset(out)
        assert len(sample) == 30
        assert sum(i.norm_score < 0.33 for i in sample) == 10

    def test_export_sft(self, tmp_path, synthetic_dataset):
        dataset = str(tmp_path / 'expl.jsonl')
        save_dataset(dataset, [replace(i, explanation=EXPLANATION) for i in synthetic_dataset[:10]])
        out = tmp_path / 'sft.jsonl'
        run('export-sft', dataset, '-o', out)
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(records) == 10
        assert records[7]['turns'][1]['text'] == '0.10'
        assert records[7]['turns'][3]['text'] == EXPLANATION

    def test_aggregate_ratings(self, write_jsonl, capsys):
        records = [{'instance': k, 'annotator': 'a', 'criterion': 'consistency', 'value': 1 + k % 4}
                   for k in range(100)]
        run('aggregate-ratings', write_jsonl('ratings.jsonl', records), '--resamples', 1000)
        out = capsys.readouterr().out
        assert 'Consistency' in out and '2.50' in out

    def test_pascal50s(self, write_jsonl, capsys):
        tasks, scores = [], []
        for k, category in enumerate(['HC', 'HI', 'HM', 'MM']):
            tasks.append({'id': f't{k}', 'image': 'x.jpg', 'a': 'first', 'b': 'second', 'category': category,
                          'choice': 'A'})
            scores += [{'task': f't{k}', 'candidate': 'A', 'score': 0.9},
                       {'task': f't{k}', 'candidate': 'B', 'score': 0.9 if category == 'MM' else 0.1}]
        run('pascal50s', write_jsonl('tasks.jsonl', tasks), write_jsonl('scores.jsonl', scores))
        row = capsys.readouterr().out.splitlines()[1].split()
        assert row == ['100.0', '100.0', '100.0', '50.0', '87.5', '1']

    def test_pascal50s_failed_candidate(self, write_jsonl, scripted, tmp_path, capsys):
        tasks, instances, scores = [], [], []
        for k, category in enumerate(['HC', 'HI', 'HM', 'MM'] * 2):
            task = {'id': f't{k}', 'image': 'data:image/png;base64,eA==', 'a': f'good caption {k}',
                    'b': f'bad caption {k}', 'category': category, 'choice': 'A'}
            tasks.append(task)
            instances += [SimpleNamespace(caption=task['a'], image_ref=task['image']),
                          SimpleNamespace(caption=task['b'], image_ref=task['image'])]
            scores += [0.9, 0.1]
        # candidate B of t0 is never scripted
        script = str(tmp_path / 'script.jsonl')
        scripted(instances[:1] + instances[2:], scores[:1] + scores[2:]).save(script)
        with pytest.raises(SystemExit) as info:
            run('pascal50s', write_jsonl('tasks.jsonl', tasks), '--backend', 'mock', '--mock-script', script)
        assert info.value.code == 1
        row = capsys.readouterr().out.splitlines()[1].split()
        assert row == ['100.0'] * 5 + ['0']

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            run('correlate', tmp_path / 'rows.jsonl', tmp_path / 'dataset.jsonl')
        assert info.value.code == 2
