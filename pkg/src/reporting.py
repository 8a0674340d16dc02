import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

logger = logging.getLogger(__name__)

SECTIONS = {
    'influence.csv': 'influence',
    'effects.csv': 'effects',
    'carryover.csv': 'carryover',
    'dose.csv': 'dose-response',
    'explore.csv': 'exploration',
    'trend.csv': 'position trend',
    'sources.csv': 'source effects',
}


class ReportError(RuntimeError):
    """No analysis outputs to summarize."""


def _read(path: Path) -> Optional[pd.DataFrame]:
    if not path.is_file():
        return None
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        logger.warning(f"Unreadable analysis file {path}: {e}")
        return None


def _float(value) -> Optional[float]:
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


def _influence_lines(frame: pd.DataFrame) -> List[str]:
    lines = ['Influence (TopicPrevalence, log-linear decomposition):']
    for factor in ('action', 'topic', 'position'):
        rows = frame[frame['factor'] == factor]
        ranked = sorted(((r.level, _float(r.influence)) for r in rows.itertuples()),
                        key=lambda item: (-(item[1] or 0.0), item[0]))
        if not ranked:
            continue
        level, value = ranked[0]
        shown = f"{value:.4f}" if value is not None else '?'
        lines.append(f"  most influential {factor}: {level} ({shown})")
        lines.append(f"  {factor} ranking: {' > '.join(level for level, _ in ranked)}")
    fit = dict(zip(frame.loc[frame['factor'] == 'fit', 'level'], frame.loc[frame['factor'] == 'fit', 'influence']))
    if fit:
        lines.append(f"  residual (log RMS): {fit.get('residual', '?')}, clamped cells: {fit.get('clamped', '?')}")
    return lines


def _carryover_lines(frame: pd.DataFrame, alpha: float) -> List[str]:
    lines = ['Carryover (ANOVA on per-puppet sums by sequence):']
    for r in frame.itertuples():
        p = _float(r.p_value)
        flag = ' *' if p is not None and p < alpha else ''
        lines.append(f"  {r.interaction}: F={r.f_statistic} p={r.p_value} mean difference={r.mean_difference}{flag}")
    return lines


def _dose_lines(frame: pd.DataFrame) -> List[str]:
    lines = ['Dose-response (Hill fits per action, all topics):']
    for r in frame[frame['topic'] == '*'].itertuples():
        lines.append(f"  {r.action}: E_max={r.e_max} EC50={r.ec50} n={r.hill_n} mse={r.mse}")
    lines.append(f"  per-(topic, action) curves: {int((frame['topic'] != '*').sum())}")
    return lines


def _explore_lines(frame: pd.DataFrame) -> List[str]:
    lines = ['Exploration (ExploreProm at block ends, pooled per action):']
    for r in frame[frame['topic'] == '*'].itertuples():
        lines.append(f"  {r.action}: mean={r.mean} median={r.median} n={r.n}")
    anova = frame[frame['topic'] == 'anova']
    if not anova.empty:
        lines.append(f"  across actions: F={anova.iloc[0]['f_statistic']} p={anova.iloc[0]['p_value']}")
    return lines


def _trend_lines(frame: pd.DataFrame, alpha: float) -> List[str]:
    lines = ['Position trend (per-block effect regressed on block position):']
    for r in frame[frame['kind'] == 'position_trend'].itertuples():
        p = _float(r.p_value)
        flag = ' *' if p is not None and p < alpha else ''
        lines.append(f"  {r.interaction} {r.measure}: slope={r.statistic} p={r.p_value} n={r.n}{flag}")
    homogeneity = frame[frame['kind'] == 'topic_homogeneity']
    for r in homogeneity.itertuples():
        lines.append(f"  {r.interaction} {r.measure} across topics: F={r.statistic} p={r.p_value}")
    return lines


def _source_lines(frame: pd.DataFrame) -> List[str]:
    lines = ['Source effects (mu_action per in-network measure):']
    for row in frame[frame['topic'] == 'mu_action'].to_dict('records'):
        values = [f"{name}={row[name]}" for name in frame.columns
                  if name not in ('topic', 'measure', 'mu_topic') and not name.endswith(('_p', '_significant'))
                  and row[name] not in ('', '-')]
        lines.append(f"  {row['measure']}: {' '.join(values) or 'no estimates'}")
    return lines


def build_report(analysis_dir) -> str:
    """
    Plain-text summary of an analyze output directory

    Missing tables are listed under a Gaps section instead of failing.

    Raises:
        ReportError: the directory holds none of the analysis outputs
    """
    analysis_dir = Path(analysis_dir)
    frames: Dict[str, Optional[pd.DataFrame]] = {name: _read(analysis_dir / name) for name in SECTIONS}
    meta_path = analysis_dir / 'analysis.json'
    meta = json.loads(meta_path.read_text(encoding='utf-8')) if meta_path.is_file() else None
    if meta is None and all(frame is None for frame in frames.values()):
        raise ReportError(f"no analysis outputs in {analysis_dir}")

    alpha = float(meta.get('alpha', 0.05)) if meta else 0.05
    lines = ['Feed audit summary', '==================']
    if meta:
        labeling = meta.get('labeling', {})
        detail = ''
        if labeling.get('labeling') == 'cluster':
            detail = f" (k={labeling.get('k')}, silhouette {labeling.get('silhouette', 0.0):.3f})"
        lines.append(f"Config hash: {meta.get('config_hash', '?')}")
        lines.append(f"Labeling: {labeling.get('labeling', '?')}{detail}")
        lines.append(f"Puppets analyzed: {meta.get('puppets_analyzed', '?')}; "
                     f"excluded: {len(meta.get('excluded', []))}")
        if meta.get('excluded'):
            lines.append(f"  excluded puppets: {', '.join(meta['excluded'])}")
    lines.append('')

    if frames['influence.csv'] is not None and not frames['influence.csv'].empty:
        lines += _influence_lines(frames['influence.csv']) + ['']
    if meta:
        significant = meta.get('significant', [])
        lines.append(f"Significant cells (p < {alpha}): {len(significant)}")
        lines += [f"  {cell}" for cell in significant]
        lines.append('')
    if frames['carryover.csv'] is not None:
        lines += _carryover_lines(frames['carryover.csv'], alpha) + ['']
    if frames['dose.csv'] is not None:
        lines += _dose_lines(frames['dose.csv']) + ['']
    if frames['explore.csv'] is not None:
        lines += _explore_lines(frames['explore.csv']) + ['']
    if frames['trend.csv'] is not None:
        lines += _trend_lines(frames['trend.csv'], alpha) + ['']
    if frames['sources.csv'] is not None:
        lines += _source_lines(frames['sources.csv']) + ['']

    gaps = [f"{label}: unavailable" for name, label in SECTIONS.items()
            if frames[name] is None or (name == 'influence.csv' and frames[name].empty)]
    if meta is None:
        gaps.append('analysis metadata: unavailable')
    if gaps:
        lines.append('Gaps:')
        lines += [f"  {gap}" for gap in gaps]
    return '\n'.join(lines).rstrip('\n') + '\n'
