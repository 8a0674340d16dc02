import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from . import effects
from .behaviors import (
    action_dose_response,
    dose_response_series,
    explore_prominence,
    exploration_by_action,
    exploration_distribution,
    fit_hill,
)
from .composition import (
    CATEGORY,
    EMBEDDING,
    IN_NETWORK,
    CompositionVectors,
    compose_vectors,
    composition_delta,
    fit_topic_clusters,
)
from .config import ConfigError, ExperimentConfig, config_from_mapping
from .effects import MEASURE_NAMES, EstimationError
from .logfile import (
    POSTS_NAME,
    ManifestError,
    file_digest,
    read_history,
    read_manifest,
    read_observation_log,
    read_post_table,
)
from .platform_sim import INTERACTIONS, NO_TOPIC, HistoryEntry
from .trial import CONTROL_GROUP, TREATMENT, Snapshot
from .utils import format_number

logger = logging.getLogger(__name__)

OUTPUT_FILES = ('effects.csv', 'sources.csv', 'influence.csv', 'carryover.csv', 'trend.csv',
                'explore.csv', 'dose.csv', 'analysis.json')
UNAVAILABLE = '-'


@dataclass
class PuppetRecord:
    account_id: str
    group: str
    interaction: str
    pair_index: int
    sequence: Optional[List[str]]
    snapshots: List[Snapshot] = field(default_factory=list)
    history: List[HistoryEntry] = field(default_factory=list)


@dataclass
class RunData:
    config: ExperimentConfig
    manifest: Dict[str, Any]
    puppets: List[PuppetRecord]
    posts: Dict[str, Any]
    excluded: List[str]


def load_run(run_dir) -> RunData:
    """
    Read and cross-check a simulate output directory

    Raises:
        ManifestError: missing manifest, config hash mismatch, missing or altered log files,
            an interaction whose treatment puppets have no controls
        LogFormatError: corrupt log lines (with line numbers)
    """
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    try:
        config = config_from_mapping(manifest['config'])
    except ConfigError as e:
        raise ManifestError(f"manifest config is invalid: {e}") from e
    if config.config_hash() != manifest['config_hash'] or config.seed != manifest['seed']:
        raise ManifestError("manifest config hash or seed does not match its config")

    posts = read_post_table(run_dir / POSTS_NAME)
    puppets, failed = [], set()
    for entry in manifest['puppets']:
        if entry.get('status') != 'ok':
            failed.add(entry['account_id'])
            continue
        log_path = run_dir / entry['log']
        history_path = run_dir / entry['history']
        for path, digest in ((log_path, entry['log_sha256']), (history_path, entry['history_sha256'])):
            if not path.is_file():
                raise ManifestError(f"missing log file {path}")
            if file_digest(path) != digest:
                raise ManifestError(f"{path} does not match the manifest checksum")
        puppets.append(PuppetRecord(
            account_id=entry['account_id'],
            group=entry['group'],
            interaction=entry['interaction'],
            pair_index=int(entry['pair_index']),
            sequence=entry.get('sequence'),
            snapshots=read_observation_log(log_path, posts),
            history=read_history(history_path),
        ))

    # a failed member removes its whole pair
    failed_pairs = {(e['interaction'], int(e['pair_index'])) for e in manifest['puppets']
                    if e['account_id'] in failed and e['group'] == CONTROL_GROUP}
    kept, excluded = [], sorted(failed)
    for puppet in puppets:
        if puppet.group == TREATMENT and (puppet.interaction, puppet.pair_index) in failed_pairs:
            excluded.append(puppet.account_id)
        else:
            kept.append(puppet)
    for interaction in sorted({p.interaction for p in kept if p.group == TREATMENT}):
        if not any(p.group == CONTROL_GROUP and p.interaction == interaction for p in kept):
            raise ManifestError(f"treatment puppets of {interaction} have no controls")
    if excluded:
        logger.warning(f"Excluding {len(excluded)} puppet(s) from analysis: {', '.join(sorted(excluded))}")
    return RunData(config=config, manifest=manifest, puppets=kept, posts=posts, excluded=sorted(excluded))


def label_posts(run: RunData) -> Tuple[Dict[str, str], Dict[str, Any]]:
    """post_id -> topic label, by ground truth or by clustering the post embeddings."""
    post_ids = sorted(run.posts)
    truth = [run.posts[p].true_topic for p in post_ids]
    settings = run.config.analysis
    if settings.labeling == 'truth':
        return dict(zip(post_ids, truth)), {'labeling': 'truth'}

    X = np.array([run.posts[p].embedding for p in post_ids], dtype=float)
    candidates = range(settings.k_min, min(settings.k_max, len(post_ids)) + 1)
    model = fit_topic_clusters(X, candidates, true_labels=truth, seed=run.config.seed)
    labels = {p: model.label_map[int(c)] for p, c in zip(post_ids, model.assignments)}
    info = {
        'labeling': 'cluster',
        'k': model.k,
        'silhouette': model.silhouette,
        'inertia_curve': {str(k): v for k, v in model.inertia_curve.items()},
        'label_map': {str(c): name for c, name in model.label_map.items()},
    }
    return labels, info


def _history_before(history: Sequence[HistoryEntry], tick: int) -> Tuple[set, set]:
    topics = {h.topic for h in history if h.tick < tick and h.topic != NO_TOPIC}
    sources = {h.source_id for h in history if h.tick < tick and h.source_id}
    return topics, sources


def _puppet_rows(puppet: PuppetRecord, config: ExperimentConfig, labels: Mapping[str, str]) -> List[dict]:
    universe = config.label_universe
    rows = []
    for snap in puppet.snapshots:
        topics, sources = _history_before(puppet.history, snap.tick)
        vectors = compose_vectors(snap.page, labels, sources, universe)
        label = NO_TOPIC if snap.topic == NO_TOPIC else config.label_for(snap.topic)
        rows.append({
            'account_id': puppet.account_id,
            'group': puppet.group,
            'interaction': puppet.interaction,
            'pair_index': puppet.pair_index,
            'position': snap.seq_index,
            'topic': label,
            'dose_index': snap.dose_index,
            'tick': snap.tick,
            'explore_prom': explore_prominence(snap.page, topics, sources, labels),
            'vectors': vectors,
        })
    return rows


def snapshot_table(run: RunData, labels: Mapping[str, str], n_jobs: int = 1) -> pd.DataFrame:
    """One row per snapshot with its composition vectors and ExploreProm."""
    per_puppet = Parallel(n_jobs=n_jobs, prefer='threads')(
        delayed(_puppet_rows)(puppet, run.config, labels) for puppet in run.puppets
    )
    rows = [row for puppet_rows in per_puppet for row in puppet_rows]
    frame = pd.DataFrame(rows)
    return frame.sort_values(['account_id', 'tick', 'position']).reset_index(drop=True)


def _deltas(group: str, topic: str, pre: CompositionVectors, post: CompositionVectors) -> Dict[str, float]:
    return {
        effects.TOPIC_PREVALENCE: 100 * composition_delta(group, CATEGORY, pre.topic_prevalence, post.topic_prevalence, topic),
        effects.TOPIC_PROMINENCE: 100 * composition_delta(group, CATEGORY, pre.topic_prominence, post.topic_prominence, topic),
        effects.AVG_EMBEDDING: composition_delta(group, EMBEDDING, pre.avg_embedding, post.avg_embedding),
        effects.SOURCE_PREVALENCE: 100 * composition_delta(group, CATEGORY, pre.source_prevalence, post.source_prevalence,
                                                           component=IN_NETWORK),
        effects.SOURCE_PROMINENCE: 100 * composition_delta(group, CATEGORY, pre.source_prominence, post.source_prominence,
                                                           component=IN_NETWORK),
    }


def block_table(snapshots: pd.DataFrame) -> pd.DataFrame:
    """Per (puppet, block, dose >= 1): change of every measure since the block's dose-0 snapshot."""
    rows = []
    blocks = snapshots[snapshots['position'] > 0]
    for (account_id, position), block in blocks.groupby(['account_id', 'position'], sort=True):
        base = block[block['dose_index'] == 0]
        if base.empty:
            logger.warning(f"{account_id} block {position} has no pre-treatment snapshot; skipped")
            continue
        pre = base.iloc[0]
        for _, post in block[block['dose_index'] > 0].sort_values('dose_index').iterrows():
            row = {key: post[key] for key in ('account_id', 'group', 'interaction', 'position', 'topic',
                                              'pair_index', 'dose_index')}
            row.update(_deltas(post['group'], pre['topic'], pre['vectors'], post['vectors']))
            rows.append(row)
    columns = list(effects.BLOCK_KEYS) + list(effects.MEASURES)
    return pd.DataFrame(rows, columns=columns)


def _fmt(value) -> str:
    return format_number(value)


def effects_table(blocks: pd.DataFrame, topics: Sequence[str], actions: Sequence[str],
                  measures: Sequence[str], dose: int, alpha: float) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    """Rows (topic, measure), one column group per action, mu_topic last."""
    columns = ['topic', 'measure']
    for action in INTERACTIONS:
        columns += [action, f"{action}_p", f"{action}_significant"]
    columns.append('mu_topic')
    rows, significant = [], []
    for measure in measures:
        grid = effects.estimate_grid(blocks, topics, actions, measure, dose, alpha)
        try:
            per_topic, per_action = effects.aggregate_effects(grid, topics, actions)
        except EstimationError as e:
            logger.warning(f"{MEASURE_NAMES[measure]}: {e}")
            per_topic, per_action = {}, {}
        for topic in topics:
            row = {'topic': topic, 'measure': MEASURE_NAMES[measure]}
            for action in INTERACTIONS:
                estimate = grid.get((topic, action))
                if estimate is None:
                    row.update({action: UNAVAILABLE, f"{action}_p": UNAVAILABLE, f"{action}_significant": UNAVAILABLE})
                    continue
                row[action] = _fmt(estimate.mu_hat)
                row[f"{action}_p"] = _fmt(estimate.p_value)
                row[f"{action}_significant"] = 'yes' if estimate.significant else 'no'
                if estimate.significant:
                    significant.append(f"{topic}/{action}/{MEASURE_NAMES[measure]}")
            row['mu_topic'] = _fmt(per_topic[topic]) if topic in per_topic else UNAVAILABLE
            rows.append(row)
        row = {'topic': 'mu_action', 'measure': MEASURE_NAMES[measure], 'mu_topic': ''}
        for action in INTERACTIONS:
            row[action] = _fmt(per_action[action]) if action in per_action else UNAVAILABLE
            row[f"{action}_p"] = row[f"{action}_significant"] = ''
        rows.append(row)
    return pd.DataFrame(rows, columns=columns), {'significant': significant}


def influence_table(blocks: pd.DataFrame, topics: Sequence[str], actions: Sequence[str], dose: int, epsilon: float,
                    measure: str = effects.TOPIC_PREVALENCE) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    """One row per influence variable, then fit diagnostics."""
    grid = effects.position_grid(blocks, actions, measure, dose)
    solution = effects.decompose_influence(grid, epsilon=epsilon, topics=topics, actions=actions,
                                           positions=range(1, len(topics) + 1))
    rows = [('topic', t, _fmt(v)) for t, v in solution.f1.items()]
    rows += [('action', a, _fmt(v)) for a, v in solution.f2.items()]
    rows += [('position', str(p), _fmt(v)) for p, v in solution.f3.items()]
    rows += [('fit', 'residual', _fmt(solution.residual)), ('fit', 'clamped', str(solution.clamped_count))]
    info = {
        'clamped': solution.clamped_count,
        'residual': solution.residual,
        'top_action': max(solution.f2, key=solution.f2.get),
        'top_topic': max(solution.f1, key=solution.f1.get),
        'top_position': max(solution.f3, key=solution.f3.get),
    }
    return pd.DataFrame(rows, columns=['factor', 'level', 'influence']), info


def carryover_table(blocks: pd.DataFrame, actions: Sequence[str], dose: int, m: int) -> pd.DataFrame:
    columns = ['interaction', 'measure', 'f_statistic', 'p_value', 'mean_difference'] + \
              [f"seq_{k}_mean" for k in range(1, m + 1)]
    rows = []
    for action in actions:
        try:
            result = effects.test_carryover(blocks, action, effects.TOPIC_PREVALENCE, dose)
        except EstimationError as e:
            logger.warning(f"Carryover test skipped: {e}")
            continue
        row = {'interaction': action, 'measure': MEASURE_NAMES[effects.TOPIC_PREVALENCE],
               'f_statistic': _fmt(result.f_statistic), 'p_value': _fmt(result.p_value),
               'mean_difference': _fmt(result.mean_difference)}
        for k in range(1, m + 1):
            row[f"seq_{k}_mean"] = _fmt(result.group_means[k]) if k in result.group_means else UNAVAILABLE
        rows.append(row)
    return pd.DataFrame(rows, columns=columns)


def trend_table(blocks: pd.DataFrame, actions: Sequence[str], dose: int) -> pd.DataFrame:
    rows = []
    for action in actions:
        for measure in (effects.TOPIC_PREVALENCE, effects.TOPIC_PROMINENCE):
            name = MEASURE_NAMES[measure]
            try:
                trend = effects.position_trend(blocks, action, measure, dose)
                rows.append((action, name, 'position_trend', _fmt(trend.slope), _fmt(trend.intercept),
                             _fmt(trend.p_value), str(trend.n)))
            except EstimationError as e:
                logger.warning(f"Position trend skipped: {e}")
            try:
                f_statistic, p_value = effects.topic_homogeneity(blocks, action, measure, dose)
                n = int(((blocks['interaction'] == action) & (blocks['group'] == TREATMENT)
                         & (blocks['dose_index'] == dose)).sum())
                rows.append((action, name, 'topic_homogeneity', _fmt(f_statistic), '', _fmt(p_value), str(n)))
            except EstimationError as e:
                logger.warning(f"Topic homogeneity skipped: {e}")
    return pd.DataFrame(rows, columns=['interaction', 'measure', 'kind', 'statistic', 'intercept', 'p_value', 'n'])


def _summary(values: np.ndarray) -> Dict[str, str]:
    if values.size == 0:
        return {k: '' for k in ('mean', 'std', 'median', 'min', 'max')}
    return {
        'mean': _fmt(values.mean()),
        'std': _fmt(values.std(ddof=1) if values.size > 1 else 0.0),
        'median': _fmt(np.median(values)),
        'min': _fmt(values.min()),
        'max': _fmt(values.max()),
    }


def _ecdf(values: np.ndarray) -> pd.DataFrame:
    ordered = np.sort(values)
    return pd.DataFrame({'x': [_fmt(v) for v in ordered],
                         'y': [_fmt((i + 1) / ordered.size) for i in range(ordered.size)]})


def explore_table(snapshots: pd.DataFrame, topics: Sequence[str], actions: Sequence[str],
                  dose: int) -> Tuple[pd.DataFrame, Dict[str, pd.DataFrame]]:
    columns = ['topic', 'action', 'n', 'mean', 'std', 'median', 'min', 'max', 'f_statistic', 'p_value']
    rows, plots = [], {}
    for topic in topics:
        for action in actions:
            try:
                values = exploration_distribution(snapshots, topic, action, dose)
            except EstimationError as e:
                logger.warning(f"Exploration distribution skipped: {e}")
                continue
            rows.append({'topic': topic, 'action': action, 'n': str(values.size), **_summary(values),
                         'f_statistic': '', 'p_value': ''})
    pooled, f_statistic, p_value = exploration_by_action(snapshots, actions, dose)
    for action, values in pooled.items():
        rows.append({'topic': '*', 'action': action, 'n': str(values.size), **_summary(values),
                     'f_statistic': '', 'p_value': ''})
        plots[f"explore_{_slug(action)}.tsv"] = _ecdf(values)
    rows.append({'topic': 'anova', 'action': '*', 'n': str(sum(v.size for v in pooled.values())),
                 **_summary(np.array([])), 'f_statistic': _fmt(f_statistic), 'p_value': _fmt(p_value)})
    return pd.DataFrame(rows, columns=columns), plots


def dose_table(blocks: pd.DataFrame, topics: Sequence[str], actions: Sequence[str],
               doses: int) -> Tuple[pd.DataFrame, Dict[str, pd.DataFrame]]:
    columns = ['topic', 'action'] + [f"dose_{i}" for i in range(1, doses + 1)] + ['e_max', 'ec50', 'hill_n', 'mse']
    rows, plots = [], {}
    curves = []
    for action in actions:
        for topic in topics:
            try:
                curves.append(dose_response_series(blocks, topic, action))
            except EstimationError as e:
                logger.warning(f"Dose-response skipped: {e}")
        try:
            curves.append(action_dose_response(blocks, action, topics))
        except EstimationError as e:
            logger.warning(f"Per-action dose-response skipped: {e}")
    for curve in curves:
        row = {'topic': curve.topic, 'action': curve.action}
        row.update({f"dose_{d}": _fmt(r) for d, r in zip(curve.doses, curve.responses)})
        try:
            fit = fit_hill(curve)
            row.update({'e_max': _fmt(fit.e_max), 'ec50': _fmt(fit.ec50), 'hill_n': _fmt(fit.hill_n),
                        'mse': _fmt(fit.mse)})
        except EstimationError as e:
            logger.warning(f"Hill fit skipped for ({curve.topic}, {curve.action}): {e}")
            row.update({k: UNAVAILABLE for k in ('e_max', 'ec50', 'hill_n', 'mse')})
        rows.append(row)
        name = 'all' if curve.topic == '*' else _slug(curve.topic)
        plots[f"dose_{name}_{_slug(curve.action)}.tsv"] = pd.DataFrame(
            {'x': [str(d) for d in curve.doses], 'y': [_fmt(r) for r in curve.responses]})
    return pd.DataFrame(rows, columns=columns).fillna(UNAVAILABLE), plots


def _slug(name: str) -> str:
    return re.sub(r'[^A-Za-z0-9]+', '_', name).strip('_').lower()


def _write_csv(frame: pd.DataFrame, path: Path, sep: str = ','):
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, sep=sep, lineterminator='\n')
    logger.info(f"Wrote {path}")


def run_analysis(run_dir, out_dir, alpha: Optional[float] = None, n_jobs: int = 1) -> Dict[str, Any]:
    """
    Analyze a simulate output directory and write every report table

    Args:
        run_dir: directory holding manifest.json, posts.tsv and logs/
        out_dir: destination of the CSV tables, plots/ and analysis.json
        alpha: significance level overriding the config's analysis.alpha
        n_jobs: threads used for per-puppet composition work

    Returns:
        The analysis.json payload
    """
    run = load_run(run_dir)
    config = run.config
    alpha = config.analysis.alpha if alpha is None else alpha
    dose = config.analysis.effect_dose
    topics = list(config.treatment_labels)
    actions = list(config.interactions)
    out_dir = Path(out_dir)

    labels, labeling = label_posts(run)
    snapshots = snapshot_table(run, labels, n_jobs=n_jobs)
    blocks = block_table(snapshots)
    if blocks.empty:
        raise ManifestError("logs contain no treatment blocks")

    effects_frame, significance = effects_table(blocks, topics, actions, effects.TOPIC_MEASURES, dose, alpha)
    sources_frame, source_significance = effects_table(blocks, topics, actions, effects.SOURCE_MEASURES, dose, alpha)
    _write_csv(effects_frame, out_dir / 'effects.csv')
    _write_csv(sources_frame, out_dir / 'sources.csv')

    try:
        influence_frame, influence = influence_table(blocks, topics, actions, dose, config.analysis.epsilon)
    except EstimationError as e:
        logger.warning(f"Influence decomposition failed: {e}")
        influence_frame, influence = pd.DataFrame(columns=['factor', 'level', 'influence']), {'error': str(e)}
    _write_csv(influence_frame, out_dir / 'influence.csv')
    _write_csv(carryover_table(blocks, actions, dose, len(topics)), out_dir / 'carryover.csv')
    _write_csv(trend_table(blocks, actions, dose), out_dir / 'trend.csv')

    explore_frame, explore_plots = explore_table(snapshots, topics, actions, config.doses)
    _write_csv(explore_frame, out_dir / 'explore.csv')
    dose_frame, dose_plots = dose_table(blocks, topics, actions, config.doses)
    _write_csv(dose_frame, out_dir / 'dose.csv')
    for name, frame in sorted({**explore_plots, **dose_plots}.items()):
        _write_csv(frame, out_dir / 'plots' / name, sep='\t')

    payload = {
        'config_hash': run.manifest['config_hash'],
        'alpha': alpha,
        'effect_dose': dose,
        'labeling': labeling,
        'excluded': run.excluded,
        'puppets_analyzed': len(run.puppets),
        'influence': influence,
        'significant': significance['significant'] + source_significance['significant'],
    }
    (out_dir / 'analysis.json').write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.info(f"Analysis of {len(run.puppets)} puppets written to {out_dir}")
    return payload
