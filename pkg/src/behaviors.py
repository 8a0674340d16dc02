import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.special import expit

from .effects import TOPIC_PROMINENCE, EstimationError, carryover_anova, observed_effect, paired_deltas
from .platform_sim import FeedPage

logger = logging.getLogger(__name__)

EC50_GRID = np.geomspace(0.1, 20.0, 48)
HILL_N_GRID = np.geomspace(0.25, 4.0, 32)
LOG_BOUND = 20.0


@dataclass(frozen=True)
class DoseResponseCurve:
    topic: str
    action: str
    doses: Tuple[int, ...]
    responses: Tuple[float, ...]

    def __post_init__(self):
        if list(self.doses) != list(range(1, len(self.doses) + 1)):
            raise EstimationError(f"dose indices must run 1..{len(self.doses)}, got {self.doses}")
        if len(self.doses) != len(self.responses):
            raise EstimationError("doses and responses differ in length")


@dataclass(frozen=True)
class HillFit:
    e_max: float
    ec50: float
    hill_n: float
    mse: float

    def predict(self, doses) -> np.ndarray:
        return hill(np.asarray(doses, dtype=float), self.e_max, self.ec50, self.hill_n)


def explore_prominence(feed: FeedPage, history_topics: Iterable[str], history_sources: Iterable[str],
                       labels: Optional[Mapping[str, str]] = None) -> float:
    """Zipf mass of posts whose topic is new to the account and whose source is out-of-network."""
    if not feed.entries:
        raise EstimationError(f"empty feed for {feed.account_id} at tick {feed.tick}")
    topics = set(history_topics)
    sources = set(history_sources)
    size = len(feed)
    score = 0.0
    for entry in feed.entries:
        topic = labels[entry.post.post_id] if labels is not None else entry.post.true_topic
        if topic not in topics and entry.post.source_id not in sources:
            score += 1.0 / (entry.rank * size)
    return score


def _block_end(snapshots: pd.DataFrame, dose: Optional[int]) -> pd.DataFrame:
    if dose is None:
        dose = int(snapshots['dose_index'].max())
    return snapshots[(snapshots['dose_index'] == dose) & (snapshots['position'] > 0)]


def exploration_distribution(snapshots: pd.DataFrame, topic: str, action: str,
                             dose: Optional[int] = None) -> np.ndarray:
    """
    ExploreProm of every block-end feed whose history already includes (topic, action)

    For a puppet treated with topic at position p, the block-end snapshots of
    positions p, p+1, ... qualify. Controls never qualify.

    Raises:
        EstimationError: no treatment puppet received (topic, action)
    """
    ends = _block_end(snapshots, dose)
    treated = ends[(ends['group'] == 'treatment') & (ends['interaction'] == action)]
    start = treated[treated['topic'] == topic].groupby('account_id')['position'].min()
    if start.empty:
        raise EstimationError(f"treatment ({topic}, {action}) not found in dataset")
    rows = treated[treated['account_id'].isin(start.index)]
    rows = rows[rows['position'] >= rows['account_id'].map(start)]
    return rows.sort_values(['account_id', 'position'])['explore_prom'].to_numpy(dtype=float)


def exploration_by_action(snapshots: pd.DataFrame, actions: Sequence[str],
                          dose: Optional[int] = None) -> Tuple[Dict[str, np.ndarray], float, float]:
    """Block-end ExploreProm pooled per action, plus a one-way ANOVA (F, p) across actions."""
    ends = _block_end(snapshots, dose)
    pooled = {}
    for action in actions:
        rows = ends[(ends['group'] == 'treatment') & (ends['interaction'] == action)]
        pooled[action] = rows.sort_values(['account_id', 'position'])['explore_prom'].to_numpy(dtype=float)
    groups = [v for v in pooled.values() if v.size]
    if len(groups) < 2:
        return pooled, math.nan, math.nan
    f_statistic, p_value = carryover_anova(groups)
    return pooled, f_statistic, p_value


def dose_response_series(blocks: pd.DataFrame, topic: str, action: str,
                         measure: str = TOPIC_PROMINENCE) -> DoseResponseCurve:
    """
    Diff-in-diff response after each successive dose

    Puppets missing any dose snapshot of the block are skipped.

    Raises:
        EstimationError: no treatment block for (topic, action)
    """
    treated = blocks[(blocks['group'] == 'treatment') & (blocks['interaction'] == action)
                     & (blocks['topic'] == topic)]
    if treated.empty:
        raise EstimationError(f"no treatment blocks for ({topic}, {action})")
    doses = int(blocks['dose_index'].max())
    counts = treated.groupby('account_id')['dose_index'].nunique()
    complete = counts[counts == doses].index
    skipped = sorted(set(counts.index) - set(complete))
    if skipped:
        logger.warning(f"Dose-response ({topic}, {action}): skipping incomplete blocks of {', '.join(skipped)}")
    if complete.empty:
        raise EstimationError(f"no complete blocks for ({topic}, {action})")
    usable = blocks[(blocks['group'] == 'control') | blocks['account_id'].isin(complete)]

    responses = []
    for i in range(1, doses + 1):
        pairs = paired_deltas(usable, action, measure, i, topic=topic)
        if pairs.empty:
            raise EstimationError(f"({topic}, {action}) has no paired controls at dose {i}")
        responses.append(observed_effect(pairs['treatment'], pairs['control']).mu_hat)
    return DoseResponseCurve(topic=topic, action=action, doses=tuple(range(1, doses + 1)),
                             responses=tuple(responses))


def action_dose_response(blocks: pd.DataFrame, action: str, topics: Sequence[str],
                         measure: str = TOPIC_PROMINENCE) -> DoseResponseCurve:
    """Per-action curve: the mean of the per-topic curves."""
    curves = []
    for topic in topics:
        try:
            curves.append(dose_response_series(blocks, topic, action, measure))
        except EstimationError as e:
            logger.warning(f"Per-action dose-response {action}: {e}")
    if not curves:
        raise EstimationError(f"no dose-response data for {action}")
    length = min(len(c.responses) for c in curves)
    responses = np.mean([c.responses[:length] for c in curves], axis=0)
    return DoseResponseCurve(topic='*', action=action, doses=tuple(range(1, length + 1)),
                             responses=tuple(float(r) for r in responses))


def hill(doses, e_max: float, ec50: float, hill_n: float) -> np.ndarray:
    """E(d) = E_max * d^n / (EC50^n + d^n)"""
    doses = np.asarray(doses, dtype=float)
    return e_max * expit(hill_n * (np.log(doses) - np.log(ec50)))


def _profile(log_d: np.ndarray, y: np.ndarray, log_ec50: float, log_n: float) -> Tuple[float, float]:
    """Best E_max for fixed (EC50, n) and the resulting sum of squares."""
    g = expit(math.exp(log_n) * (log_d - log_ec50))
    denom = float(g @ g)
    e_max = float(g @ y) / denom if denom > 0 else 0.0
    residual = y - e_max * g
    return e_max, float(residual @ residual)


def fit_hill(curve) -> HillFit:
    """
    Least-squares Hill fit

    A log-spaced grid over EC50 in [0.1, 20] and n in [0.25, 4] seeds a Nelder-Mead
    refinement over (log EC50, log n); E_max is solved in closed form at every step.

    Args:
        curve: DoseResponseCurve or a (doses, responses) pair

    Raises:
        EstimationError: fewer than three points or non-finite responses
    """
    if isinstance(curve, DoseResponseCurve):
        doses, responses = curve.doses, curve.responses
    else:
        doses, responses = curve
    d = np.asarray(doses, dtype=float)
    y = np.asarray(responses, dtype=float)
    if d.size < 3 or d.size != y.size:
        raise EstimationError(f"Hill fit needs >= 3 dose points, got {d.size}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(d))) or np.any(d <= 0):
        raise EstimationError("Hill fit needs finite responses and positive doses")
    if np.all(y == 0):
        return HillFit(e_max=0.0, ec50=1.0, hill_n=1.0, mse=0.0)

    log_d = np.log(d)
    best = None
    for ec50 in EC50_GRID:
        for n in HILL_N_GRID:
            _, sse = _profile(log_d, y, math.log(ec50), math.log(n))
            if best is None or sse < best[0]:
                best = (sse, math.log(ec50), math.log(n))

    def objective(theta):
        log_ec50, log_n = np.clip(theta, -LOG_BOUND, LOG_BOUND)
        return _profile(log_d, y, log_ec50, log_n)[1]

    result = minimize(objective, x0=np.array(best[1:]), method='Nelder-Mead',
                      options={'xatol': 1e-8, 'fatol': 1e-8, 'maxiter': 20000, 'maxfev': 40000})
    theta = result.x if result.fun <= best[0] else np.array(best[1:])
    log_ec50, log_n = np.clip(theta, -LOG_BOUND, LOG_BOUND)
    e_max, sse = _profile(log_d, y, log_ec50, log_n)
    return HillFit(e_max=e_max, ec50=math.exp(log_ec50), hill_n=math.exp(log_n), mse=sse / d.size)
