import argparse
import logging
import sys

from .backend import BackendError, create_backend
from .config import RunConfig
from .evaluate import correlate_rows, evaluate_caption, evaluate_dataset, explain_dataset, export_sft_records, \
    format_timing_table, load_pairwise_scores, load_rows, save_pairwise_scores, save_rows, score_pairwise, \
    time_profile
from .explanations import aggregate_ratings, format_quality_table, load_ratings
from .judgments import DATASET_KINDS, load_aliases, load_dataset, load_exclusions, load_pascal50s, parse_strata, \
    save_dataset, stratified_sample
from .stats import format_accuracy_table, format_correlation_table, pascal50s_accuracy
from .utils import write_records


def get_parser():
    root_parser = argparse.ArgumentParser(prog='capjudge')
    subparsers = root_parser.add_subparsers(title='commands', dest='command', required=True,
                                            metavar='command', help=None)

    def add_common_arguments(parser: argparse.ArgumentParser):
        parser.add_argument('-v', dest='verbose', action='count', default=0,
                            help="Verbose output. Use -vv for more verbosity.")
        parser.add_argument('--config', metavar='path',
                            help="JSON config file; command-line flags override its values")
        parser.add_argument('--seed', type=int, metavar='n',
                            help="Seed of every randomized step (sampling, bootstrap). Default: 0")

    def add_backend_arguments(parser: argparse.ArgumentParser):
        parser.add_argument('--backend', choices=['openai', 'mock'],
                            help="Inference backend. Default: openai")
        parser.add_argument('--endpoint', metavar='url',
                            help="Base URL of a chat-completion server reporting token log-probabilities")
        parser.add_argument('--model', metavar='name', help="Model id sent with every request")
        parser.add_argument('--mock-script', metavar='path',
                            help="Script file replayed by the mock backend")
        parser.add_argument('-j', '--parallelism', type=int, metavar='n',
                            help="Maximum number of in-flight requests. Default: 4")

    def add_scoring_arguments(parser: argparse.ArgumentParser):
        parser.add_argument('--score-only', action='store_true',
                            help="Skip the explanation stage (one request per caption)")
        parser.add_argument('--no-smoothing', action='store_true',
                            help="Use the greedy score instead of the probability-weighted one")
        parser.add_argument('--candidate-count', type=int, metavar='k',
                            help="Top candidates requested per generated token. Default: 20")

    def add_dataset_arguments(parser: argparse.ArgumentParser):
        parser.add_argument('--kind', default='canonical', choices=list(DATASET_KINDS),
                            help="Dataset kind; selects the default scale and the correlation statistic. "
                                 "Default: canonical")
        parser.add_argument('--exclude', metavar='path',
                            help="File of instance ids (one per line) dropped at load time")

    score_parser = subparsers.add_parser('score', help="Score a single caption")
    add_common_arguments(score_parser)
    add_backend_arguments(score_parser)
    add_scoring_arguments(score_parser)
    score_parser.add_argument('image', help="Image path or data URI")
    score_parser.add_argument('caption', help="Candidate caption")
    score_parser.set_defaults(func=score_func)

    evaluate_parser = subparsers.add_parser('evaluate', help="Score a human-judgment dataset and correlate")
    add_common_arguments(evaluate_parser)
    add_backend_arguments(evaluate_parser)
    add_scoring_arguments(evaluate_parser)
    add_dataset_arguments(evaluate_parser)
    evaluate_parser.add_argument('-o', '--output', metavar='path', help="Write evaluation rows to this file")
    evaluate_parser.add_argument('dataset', help="Dataset file")
    evaluate_parser.set_defaults(func=evaluate_func)

    correlate_parser = subparsers.add_parser('correlate', help="Correlate saved evaluation rows with a dataset")
    add_common_arguments(correlate_parser)
    add_dataset_arguments(correlate_parser)
    correlate_parser.add_argument('rows', help="Evaluation rows file")
    correlate_parser.add_argument('dataset', help="Dataset file")
    correlate_parser.set_defaults(func=correlate_func)

    pascal_parser = subparsers.add_parser('pascal50s', help="Pairwise preference accuracy")
    add_common_arguments(pascal_parser)
    add_backend_arguments(pascal_parser)
    pascal_parser.add_argument('--tie-credit', type=float, metavar='x',
                               help="Credit for exactly tied candidates; 0 counts ties as wrong. Default: 0.5")
    pascal_parser.add_argument('-o', '--output', metavar='path',
                               help="Write the candidate scores to this file when scoring with the backend")
    pascal_parser.add_argument('tasks', help="Preference task file")
    pascal_parser.add_argument('scores', nargs='?',
                               help="Candidate scores file; scored with the backend if omitted")
    pascal_parser.set_defaults(func=pascal50s_func)

    expl_parser = subparsers.add_parser('build-expl-dataset', help="Generate explanations for a dataset")
    add_common_arguments(expl_parser)
    add_backend_arguments(expl_parser)
    add_dataset_arguments(expl_parser)
    expl_parser.add_argument('-o', '--output', metavar='path', required=True, help="Output dataset file")
    expl_parser.add_argument('dataset', help="Dataset file")
    expl_parser.set_defaults(func=build_expl_dataset_func)

    sft_parser = subparsers.add_parser('export-sft', help="Export two-stage training conversations")
    add_common_arguments(sft_parser)
    add_dataset_arguments(sft_parser)
    sft_parser.add_argument('--bin-size', type=float, metavar='b', help="Score bin size. Default: 0.1")
    sft_parser.add_argument('--no-binning', action='store_true',
                            help="Keep scores at their natural precision")
    sft_parser.add_argument('--decimals', type=int, metavar='n',
                            help="Fractional digits of rendered scores. Default: 2")
    sft_parser.add_argument('--aliases', metavar='path',
                            help="File of image reference pairs that name the same image")
    sft_parser.add_argument('-o', '--output', metavar='path', required=True, help="Output file")
    sft_parser.add_argument('dataset', nargs='+', help="Explanation dataset files")
    sft_parser.set_defaults(func=export_sft_func)

    sample_parser = subparsers.add_parser('sample', help="Stratified sample of a dataset")
    add_common_arguments(sample_parser)
    add_dataset_arguments(sample_parser)
    group = sample_parser.add_mutually_exclusive_group(required=True)
    group.add_argument('--strata', nargs='+', metavar='lo:hi:n',
                       help="Score intervals over the normalized score, e.g. 0:0.33:34 0.33:0.66:33 0.66:1:33")
    group.add_argument('--levels', nargs='+', metavar='level:n',
                       help="Discrete raw score levels, e.g. 1:25 2:25 3:25 4:25")
    sample_parser.add_argument('-o', '--output', metavar='path', required=True, help="Output dataset file")
    sample_parser.add_argument('dataset', help="Dataset file")
    sample_parser.set_defaults(func=sample_func)

    ratings_parser = subparsers.add_parser('aggregate-ratings', help="Summarize explanation quality ratings")
    add_common_arguments(ratings_parser)
    ratings_parser.add_argument('--ddof', type=int, choices=[0, 1],
                                help="Standard deviation degrees of freedom. Default: 0")
    ratings_parser.add_argument('--resamples', type=int, metavar='n',
                                help="Bootstrap resamples. Default: 10000")
    ratings_parser.add_argument('ratings', help="Ratings file")
    ratings_parser.set_defaults(func=aggregate_ratings_func)

    profile_parser = subparsers.add_parser('profile', help="Inference time of saved evaluation rows")
    add_common_arguments(profile_parser)
    profile_parser.add_argument('rows', help="Evaluation rows file")
    profile_parser.set_defaults(func=profile_func)

    return root_parser


def populate_config(args: argparse.Namespace, needs_backend: bool = False) -> RunConfig:
    if args.verbose == 0:
        logging.getLogger().setLevel(logging.WARNING)
    elif args.verbose == 1:
        logging.getLogger().setLevel(logging.INFO)
    else:
        logging.getLogger().setLevel(logging.DEBUG)

    conf = RunConfig()
    if args.config is not None:
        conf.load_file(args.config)
    if args.seed is not None:
        conf.seed = args.seed
    for flag, key in [('backend', 'backend'), ('endpoint', 'endpoint'), ('model', 'model'),
                      ('mock_script', 'mock_script'), ('parallelism', 'parallelism'),
                      ('candidate_count', 'candidate_count'), ('tie_credit', 'tie_credit'),
                      ('bin_size', 'bin_size'), ('decimals', 'decimals'), ('ddof', 'std_ddof'),
                      ('resamples', 'bootstrap_resamples')]:
        value = getattr(args, flag, None)
        if value is not None:
            setattr(conf, key, value)
    if getattr(args, 'score_only', False):
        conf.mode = 'score_only'
    if getattr(args, 'no_smoothing', False):
        conf.smoothing = False
    conf.validate(backend=needs_backend)
    return conf


def load_input(args: argparse.Namespace, path: str):
    exclude = load_exclusions(args.exclude) if args.exclude else None
    return load_dataset(path, args.kind, exclude)


def exit_on_errors(error_count: int):
    if error_count > 0:
        logging.error(f'{error_count} errors occurred; check previous output')
        sys.exit(1)


def score_func(args: argparse.Namespace):
    conf = populate_config(args, needs_backend=True)
    row = evaluate_caption(conf, create_backend(conf), args.caption, args.image)
    print(f'Score: {row.score:.4f} (greedy {row.greedy_text})')
    if row.explanation is not None:
        print(row.explanation)


def evaluate_func(args: argparse.Namespace):
    conf = populate_config(args, needs_backend=True)
    dataset = load_input(args, args.dataset)
    result = evaluate_dataset(conf, dataset, args.kind)
    if args.output:
        save_rows(args.output, result.rows)
    table = []
    if result.correlation is not None:
        table.append((args.kind, result.correlation))
    if result.greedy_correlation is not None:
        table.append((f'{args.kind} (greedy)', result.greedy_correlation))
    if table:
        print(format_correlation_table(table))
    print(f'{len(result.rows) - result.error_count} rows scored, {result.error_count} failed')
    exit_on_errors(result.error_count)


def correlate_func(args: argparse.Namespace):
    populate_config(args)
    result = correlate_rows(load_rows(args.rows), load_input(args, args.dataset), args.kind)
    print(format_correlation_table([(args.kind, result)]))


def pascal50s_func(args: argparse.Namespace):
    conf = populate_config(args, needs_backend=args.scores is None)
    tasks = load_pascal50s(args.tasks)
    errors = 0
    if args.scores is not None:
        scores = load_pairwise_scores(args.scores)
    else:
        scores, errors = score_pairwise(conf, tasks)
        if args.output:
            save_pairwise_scores(args.output, scores)
        if errors:
            complete = [t for t in tasks if (t.id, 'A') in scores and (t.id, 'B') in scores]
            logging.warning(f'{len(tasks) - len(complete)} tasks with a failed candidate are left out of the accuracy')
            tasks = complete
    print(format_accuracy_table(pascal50s_accuracy(tasks, scores, conf.tie_credit)))
    exit_on_errors(errors)


def build_expl_dataset_func(args: argparse.Namespace):
    conf = populate_config(args, needs_backend=True)
    result = explain_dataset(conf, load_input(args, args.dataset))
    count = save_dataset(args.output, result.instances)
    print(f'Wrote {count} explained instances to {args.output}')
    exit_on_errors(result.error_count)


def export_sft_func(args: argparse.Namespace):
    conf = populate_config(args)
    dataset = []
    for path in args.dataset:
        dataset += load_input(args, path)
    aliases = load_aliases(args.aliases) if args.aliases else ()
    records = export_sft_records(dataset, aliases, None if args.no_binning else conf.bin_size, conf.decimals)
    count = write_records(args.output, records)
    print(f'Wrote {count} training records to {args.output}')


def sample_func(args: argparse.Namespace):
    conf = populate_config(args)
    strata = parse_strata(args.levels, levels=True) if args.levels else parse_strata(args.strata)
    sample = stratified_sample(load_input(args, args.dataset), strata, conf.seed)
    count = save_dataset(args.output, sample)
    print(f'Wrote {count} sampled instances to {args.output}')


def aggregate_ratings_func(args: argparse.Namespace):
    conf = populate_config(args)
    report = aggregate_ratings(load_ratings(args.ratings), conf.std_ddof, conf.bootstrap_resamples,
                               conf.confidence_level, conf.seed)
    print(format_quality_table(report, conf.confidence_level))


def profile_func(args: argparse.Namespace):
    populate_config(args)
    print(format_timing_table(time_profile(load_rows(args.rows))))


def cli_entry(argv=None):
    parser = get_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, BackendError) as e:
        import traceback
        traceback.print_exc()
        parser.error(str(e))
