import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .analysis import run_analysis
from .composition import ClusteringError, CompositionError
from .config import Config, ConfigError, ExperimentConfig, parse_config
from .effects import EstimationError
from .embeddings import EmbeddingError, build_provider, embed_post
from .logfile import (
    LOG_DIR,
    POSTS_NAME,
    LogFormatError,
    ManifestError,
    write_history,
    write_manifest,
    write_observation_log,
    write_post_table,
)
from .platform_sim import InteractionError, SparseLibraryError, build_library
from .reporting import ReportError, build_report
from .trial import TrialError, build_trial_plan, run_trial
from .utils import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
VALIDATION_ERRORS = (ConfigError, ManifestError, LogFormatError, TrialError)
RUNTIME_ERRORS = (OSError, EmbeddingError, EstimationError, ClusteringError, CompositionError, ReportError,
                  SparseLibraryError, InteractionError)


def cmd_simulate(config: ExperimentConfig, out_dir=None, n_jobs: int = 1) -> int:
    """
    Run the full crossover trial and write logs, histories, the post table and the manifest

    Returns:
        EXIT_OK, or EXIT_RUNTIME when any puppet failed (its logs are still written)
    """
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dim = config.library.embedding_dim
    provider = build_provider(config.embedding, config.label_universe, dim, seed=config.platform.rng_seed)

    library = build_library(config.platform, config.library, config.label_universe,
                            aliases=config.aliases, subtopics=config.subtopics,
                            embed=lambda post: embed_post(provider, post, dim))
    plan = build_trial_plan(config.topics, config.interactions, config.puppets_per_cell,
                            doses=config.doses, primer_topics=config.primer_topics)
    dataset = run_trial(plan, library, config.platform, n_jobs=n_jobs)

    puppets, seen, snapshots = [], {}, 0
    for log in dataset.logs:
        a = log.assignment
        log_name = f"{LOG_DIR}/{a.account_id}.tsv"
        history_name = f"{LOG_DIR}/{a.account_id}.history.tsv"
        puppets.append({
            'account_id': a.account_id,
            'group': a.group,
            'interaction': a.interaction,
            'pair_index': a.pair_index,
            'seed': a.seed,
            'sequence': list(a.sequence.topics) if a.sequence else None,
            'sequence_index': a.sequence.index if a.sequence else None,
            'snapshots': len(log.snapshots),
            'status': 'ok' if log.ok else 'failed',
            'failure': log.failure,
            'log': log_name,
            'history': history_name,
            'log_sha256': write_observation_log(log, out / log_name),
            'history_sha256': write_history(a.account_id, log.history, out / history_name),
        })
        snapshots += len(log.snapshots)
        for snap in log.snapshots:
            seen.update({entry.post.post_id: entry.post for entry in snap.page.entries})
    write_post_table(seen.values(), out / POSTS_NAME)

    manifest = {
        'config_hash': config.config_hash(),
        'seed': config.seed,
        'config': config.to_dict(),
        'embedding_provider': provider.name,
        'counts': {
            'puppets': len(plan),
            'treatment': len(plan.treatment_assignments),
            'control': len(plan.control_assignments),
            'snapshots': snapshots,
            'posts_seen': len(seen),
            'failed': len(dataset.failures),
            'observations_per_pair': plan.observations_per_pair(),
            'observations_per_action': plan.observations_per_action(),
            'puppets_per_topic': plan.puppets_per_topic(),
        },
        'puppets': puppets,
    }
    path = write_manifest(manifest, out)
    logger.info(f"Wrote {len(puppets)} puppet logs and {path}")

    if dataset.failures:
        for account_id, failure in sorted(dataset.failures.items()):
            print(f"FAILED {account_id}: {failure}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_analyze(run_dir, out_dir=None, alpha: Optional[float] = None, n_jobs: int = 1) -> int:
    out = Path(out_dir) if out_dir else Path(run_dir) / 'analysis'
    run_analysis(run_dir, out, alpha=alpha, n_jobs=n_jobs)
    return EXIT_OK


def cmd_report(analysis_dir, out_file=None) -> int:
    summary = build_report(analysis_dir)
    if out_file:
        Path(out_file).write_text(summary, encoding='utf-8')
        logger.info(f"Wrote report {out_file}")
    sys.stdout.write(summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='feed-audit', description='Sockpuppet audit lab for recommender feeds')
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    simulate = sub.add_parser('simulate', help='run the crossover trial on the simulated platform')
    simulate.add_argument('--config', required=True, help='experiment config (TOML)')
    simulate.add_argument('--out', help='run directory (default: experiment.output_dir)')
    simulate.add_argument('--seed', type=int, help='override experiment.seed')
    simulate.add_argument('--jobs', type=int, default=1, help='parallel puppets')

    analyze = sub.add_parser('analyze', help='estimate effects from a run directory')
    analyze.add_argument('run_dir', help='output directory of simulate')
    analyze.add_argument('--out', help='analysis directory (default: <run_dir>/analysis)')
    analyze.add_argument('--alpha', type=float, help='significance level (default: analysis.alpha, 0.05)')
    analyze.add_argument('--jobs', type=int, default=1, help='parallel puppets')

    report = sub.add_parser('report', help='summarize an analysis directory')
    report.add_argument('analysis_dir', help='output directory of analyze')
    report.add_argument('--out', help='also write the summary to this file')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = 'DEBUG' if args.verbose else Config.LOG_LEVEL
    setup_logging(level, Config.ENVIRONMENT, Config.LOG_DIR)

    try:
        if args.command == 'simulate':
            if args.jobs < 1:
                raise ConfigError([f"--jobs must be >= 1, got {args.jobs}"])
            config = parse_config(args.config, seed_override=args.seed)
            return cmd_simulate(config, args.out, n_jobs=args.jobs)
        if args.command == 'analyze':
            if args.alpha is not None and not 0.0 < args.alpha <= 1.0:
                raise ConfigError([f"--alpha must be in (0, 1], got {args.alpha}"])
            return cmd_analyze(args.run_dir, args.out, alpha=args.alpha, n_jobs=max(1, args.jobs))
        return cmd_report(args.analysis_dir, args.out)
    except VALIDATION_ERRORS as e:
        logger.error(f"Validation failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except RUNTIME_ERRORS as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
