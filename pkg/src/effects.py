"""
Treatment-effect estimation for the crossover trial.

The inputs are block tables: one row per (puppet, block position, dose index)
holding the change of every composition measure since the block's dose-0
snapshot. Category measures are in percentage points.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)

TOPIC_PREVALENCE = 'topic_prevalence'
TOPIC_PROMINENCE = 'topic_prominence'
AVG_EMBEDDING = 'avg_embedding'
SOURCE_PREVALENCE = 'source_prevalence'
SOURCE_PROMINENCE = 'source_prominence'
TOPIC_MEASURES = (TOPIC_PREVALENCE, TOPIC_PROMINENCE, AVG_EMBEDDING)
SOURCE_MEASURES = (SOURCE_PREVALENCE, SOURCE_PROMINENCE)
MEASURES = TOPIC_MEASURES + SOURCE_MEASURES
MEASURE_NAMES = {
    TOPIC_PREVALENCE: 'TopicPrevalence',
    TOPIC_PROMINENCE: 'TopicProminence',
    AVG_EMBEDDING: 'AvgEmbedding',
    SOURCE_PREVALENCE: 'SourcePrevalence',
    SOURCE_PROMINENCE: 'SourceProminence',
}
BLOCK_KEYS = ('account_id', 'group', 'interaction', 'position', 'topic', 'pair_index', 'dose_index')
ZERO_SUM_TOLERANCE = 1e-9


class EstimationError(ValueError):
    """Inputs an estimator cannot work with (missing cells, coverage gaps, bad lengths)."""


@dataclass(frozen=True)
class TreatmentEffectEstimate:
    topic: str
    action: str
    mu_hat: float
    treatment_deltas: Tuple[float, ...]
    control_deltas: Tuple[float, ...]
    p_value: Optional[float]
    significant: bool
    alpha: float = 0.05

    @property
    def n(self) -> int:
        return len(self.treatment_deltas)


@dataclass(frozen=True)
class NuisanceModel:
    mu: Mapping[Tuple[str, str], float]
    carryover: Mapping[Tuple[str, str], float]
    lambda_w: float
    rho: Sequence[float]
    gamma: Sequence[float]

    def __post_init__(self):
        for name, values in (('rho', self.rho), ('gamma', self.gamma)):
            if abs(math.fsum(values)) > ZERO_SUM_TOLERANCE:
                raise EstimationError(f"{name} must sum to zero, got {math.fsum(values)}")


@dataclass(frozen=True)
class InfluenceSolution:
    f1: Dict[str, float]
    f2: Dict[str, float]
    f3: Dict[int, float]
    residual: float
    clamped_count: int

    def predict(self, topic: str, action: str, position: int) -> float:
        return self.f1[topic] * self.f2[action] * self.f3[position]


@dataclass(frozen=True)
class CarryoverTestResult:
    interaction: str
    f_statistic: float
    p_value: float
    group_means: Dict[int, float] = field(default_factory=dict)
    mean_difference: float = 0.0


@dataclass(frozen=True)
class TrendResult:
    interaction: str
    measure: str
    slope: float
    intercept: float
    p_value: float
    n: int


def welch_p_value(treatment: np.ndarray, control: np.ndarray) -> Optional[float]:
    """Welch two-sample t-test p-value; None when either sample has a single value."""
    if len(treatment) < 2 or len(control) < 2:
        return None
    t_var = np.var(treatment, ddof=1)
    c_var = np.var(control, ddof=1)
    if t_var == 0 and c_var == 0:
        return 1.0 if np.mean(treatment) == np.mean(control) else 0.0
    result = stats.ttest_ind(treatment, control, equal_var=False)
    return float(result.pvalue)


def observed_effect(treatment_deltas: Sequence[float], control_deltas: Sequence[float],
                    topic: str = '', action: str = '', alpha: float = 0.05) -> TreatmentEffectEstimate:
    """
    Diff-in-diff treatment effect over n treatment and n control deltas

    mu_hat is the mean of every treatment-minus-control cross pair, which equals
    the difference of the two means.

    Raises:
        EstimationError: empty samples or unequal lengths
    """
    t = np.asarray(treatment_deltas, dtype=float)
    c = np.asarray(control_deltas, dtype=float)
    if t.size == 0 or t.size != c.size:
        raise EstimationError(f"need n >= 1 equal-length samples, got {t.size} treatment and {c.size} control")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(c))):
        raise EstimationError("deltas must be finite")

    n = t.size
    mu_hat = float((t[:, None] - c[None, :]).sum() / n ** 2)
    assert math.isclose(mu_hat, float(t.mean() - c.mean()), rel_tol=1e-9, abs_tol=1e-9)

    p_value = welch_p_value(t, c)
    return TreatmentEffectEstimate(
        topic=topic,
        action=action,
        mu_hat=mu_hat,
        treatment_deltas=tuple(t.tolist()),
        control_deltas=tuple(c.tolist()),
        p_value=p_value,
        significant=p_value is not None and p_value < alpha,
        alpha=alpha,
    )


def paired_deltas(blocks: pd.DataFrame, interaction: str, measure: str, dose: int,
                  topic: Optional[str] = None, position: Optional[int] = None) -> pd.DataFrame:
    """
    Treatment rows joined to their paired control rows

    A treatment puppet with pair index k at block position p is paired with control
    k of the same interaction at position p. Returns columns account_id, position,
    pair_index, topic, treatment, control; unpaired rows are dropped.
    """
    rows = blocks[(blocks['interaction'] == interaction) & (blocks['dose_index'] == dose)]
    treatment = rows[rows['group'] == 'treatment']
    if topic is not None:
        treatment = treatment[treatment['topic'] == topic]
    if position is not None:
        treatment = treatment[treatment['position'] == position]
    control = rows[rows['group'] == 'control'][['position', 'pair_index', measure]]
    merged = treatment[['account_id', 'position', 'pair_index', 'topic', measure]].merge(
        control, on=['position', 'pair_index'], how='inner', suffixes=('', '_control'))
    merged = merged.rename(columns={measure: 'treatment', f"{measure}_control": 'control'})
    return merged.sort_values(['position', 'pair_index', 'account_id']).reset_index(drop=True)


def estimate_cell(blocks: pd.DataFrame, topic: str, action: str, measure: str, dose: int,
                  alpha: float = 0.05) -> TreatmentEffectEstimate:
    pairs = paired_deltas(blocks, action, measure, dose, topic=topic)
    if pairs.empty:
        raise EstimationError(f"no paired observations for ({topic}, {action})")
    return observed_effect(pairs['treatment'], pairs['control'], topic=topic, action=action, alpha=alpha)


def estimate_grid(blocks: pd.DataFrame, topics: Sequence[str], actions: Sequence[str], measure: str,
                  dose: int, alpha: float = 0.05) -> Dict[Tuple[str, str], TreatmentEffectEstimate]:
    """One estimate per (topic, action); cells without paired data are left out."""
    grid = {}
    for topic, action in itertools.product(topics, actions):
        try:
            grid[(topic, action)] = estimate_cell(blocks, topic, action, measure, dose, alpha)
        except EstimationError as e:
            logger.warning(f"Skipping {MEASURE_NAMES.get(measure, measure)} cell: {e}")
    return grid


def aggregate_effects(grid: Mapping[Tuple[str, str], float], topics: Sequence[str],
                      actions: Sequence[str]) -> Tuple[Dict[str, float], Dict[str, float]]:
    """Unweighted per-topic and per-action means of a complete (topic, action) grid."""
    values = {key: (v.mu_hat if isinstance(v, TreatmentEffectEstimate) else float(v)) for key, v in grid.items()}
    missing = [f"({t}, {a})" for t, a in itertools.product(topics, actions) if (t, a) not in values]
    if missing:
        raise EstimationError(f"missing cells: {', '.join(missing)}")
    per_topic = {t: float(np.mean([values[(t, a)] for a in actions])) for t in topics}
    per_action = {a: float(np.mean([values[(t, a)] for t in topics])) for a in actions}
    return per_topic, per_action


def nuisance_forward_model(model: NuisanceModel, plan) -> Dict[Tuple[str, str, int], float]:
    """
    Synthetic measured effects T(topic, action) at each sequence position

    Position 1 of sequence s gives mu + rho_1 + gamma_s; later positions add
    lambda_prev - lambda_w, lambda_prev being the carryover of the topic before it
    under the same action.
    """
    m = len(plan.sequences)
    if len(model.rho) != m or len(model.gamma) != m:
        raise EstimationError(f"rho and gamma need {m} entries for {m} sequences")
    grid = {}
    for seq in plan.sequences:
        gamma = model.gamma[seq.index - 1]
        for position, topic in enumerate(seq.topics, start=1):
            for action in plan.interactions:
                value = model.mu[(topic, action)] + model.rho[position - 1] + gamma
                if position > 1:
                    previous = seq.topics[position - 2]
                    value += model.carryover.get((previous, action), 0.0) - model.lambda_w
                grid[(topic, action, position)] = value
    return grid


def average_forward_cells(grid: Mapping[Tuple[str, str, int], float]) -> Dict[Tuple[str, str], float]:
    cells: Dict[Tuple[str, str], List[float]] = {}
    for (topic, action, _), value in grid.items():
        cells.setdefault((topic, action), []).append(value)
    return {key: math.fsum(values) / len(values) for key, values in cells.items()}


def expected_cell_average(mu: float, lambda_prev: float, lambda_w: float, m: int) -> float:
    """Closed form of the averaged cell in an m-topic cyclic design."""
    return mu + (m - 1) / m * (lambda_prev - lambda_w)


def carryover_anova(groups: Sequence[Sequence[float]]) -> Tuple[float, float]:
    """One-way ANOVA with explicit answers where the F ratio is undefined."""
    arrays = [np.asarray(g, dtype=float) for g in groups]
    if len(arrays) < 2 or any(a.size == 0 for a in arrays):
        raise EstimationError("ANOVA needs at least two nonempty groups")
    pooled = np.concatenate(arrays)
    if np.allclose(pooled, pooled[0], rtol=0.0, atol=1e-12):
        return 0.0, 1.0
    within = sum(float(((a - a.mean()) ** 2).sum()) for a in arrays)
    if within <= 1e-24:
        return math.inf, 0.0
    result = stats.f_oneway(*arrays)
    return float(result.statistic), float(result.pvalue)


def block_effects(blocks: pd.DataFrame, interaction: str, measure: str, dose: int) -> pd.DataFrame:
    """Per treatment block: paired treatment delta minus control delta."""
    pairs = paired_deltas(blocks, interaction, measure, dose)
    pairs['effect'] = pairs['treatment'] - pairs['control']
    return pairs


def test_carryover(blocks: pd.DataFrame, interaction: str, measure: str = TOPIC_PREVALENCE,
                   dose: Optional[int] = None, sequences: Optional[Mapping[str, int]] = None) -> CarryoverTestResult:
    """
    ANOVA on per-puppet sums of treatment effects grouped by sequence

    Args:
        blocks: block table
        interaction: interaction whose puppets are tested
        measure: block-table measure column
        dose: dose index of the effect snapshot (default: the last dose)
        sequences: account_id -> sequence index; parsed from the account id when omitted

    Raises:
        EstimationError: fewer than two sequences with two puppets each
    """
    if dose is None:
        dose = int(blocks['dose_index'].max())
    effects = block_effects(blocks, interaction, measure, dose)
    sums = effects.groupby('account_id')['effect'].sum()
    sequence_of = sequences or {a: _sequence_from_account(a) for a in sums.index}
    grouped: Dict[int, List[float]] = {}
    for account_id, total in sums.items():
        grouped.setdefault(sequence_of[account_id], []).append(float(total))
    usable = {s: v for s, v in sorted(grouped.items()) if len(v) >= 2}
    if len(usable) < 2:
        raise EstimationError(f"{interaction}: need >= 2 sequences with >= 2 puppets, got {len(usable)}")

    f_statistic, p_value = carryover_anova(list(usable.values()))
    means = {s: float(np.mean(v)) for s, v in usable.items()}
    return CarryoverTestResult(
        interaction=interaction,
        f_statistic=f_statistic,
        p_value=p_value,
        group_means=means,
        mean_difference=max(means.values()) - min(means.values()),
    )


def _sequence_from_account(account_id: str) -> int:
    # treatment ids look like "<interaction>-t<sequence>-p<pair>"
    for part in account_id.split('-'):
        if part.startswith('t') and part[1:].isdigit():
            return int(part[1:])
    raise EstimationError(f"cannot read a sequence index from account id {account_id!r}")


def position_grid(blocks: pd.DataFrame, actions: Sequence[str], measure: str,
                  dose: int) -> Dict[Tuple[str, str, int], float]:
    """Mean paired effect per (topic, action, block position)."""
    grid = {}
    for action in actions:
        effects = block_effects(blocks, action, measure, dose)
        for (topic, position), group in effects.groupby(['topic', 'position']):
            grid[(topic, action, int(position))] = float(group['effect'].mean())
    return grid


def decompose_influence(grid: Mapping[Tuple[str, str, int], float], epsilon: float = 0.01,
                        topics: Optional[Sequence[str]] = None, actions: Optional[Sequence[str]] = None,
                        positions: Optional[Sequence[int]] = None) -> InfluenceSolution:
    """
    Solve log mu = log f1(topic) + log f2(action) + log f3(position)

    Non-positive cells are clamped to epsilon. Least squares with gauge rows
    mean(log f1) = 0 and mean(log f3) = 0 removes the two scale freedoms.
    Expected levels, when given, must each appear in at least one cell.

    Raises:
        EstimationError: empty grid, missing factor levels, a grid too sparse to
            identify every factor, or every cell clamped
    """
    if not grid:
        raise EstimationError("influence grid is empty")
    keys = sorted(grid)
    levels = []
    for axis, (name, expected) in enumerate((('topic', topics), ('action', actions), ('position', positions))):
        present = sorted({k[axis] for k in keys})
        if expected is not None:
            missing = sorted(set(expected) - set(present))
            if missing:
                raise EstimationError(f"influence grid has no cells for {name} level(s) {missing}")
            unknown = sorted(set(present) - set(expected))
            if unknown:
                raise EstimationError(f"influence grid has unexpected {name} level(s) {unknown}")
        levels.append(present)
    topics, actions, positions = levels
    values = np.array([grid[k] for k in keys], dtype=float)
    if not np.all(np.isfinite(values)):
        raise EstimationError("influence grid has non-finite cells")

    clamped = values <= 0
    if clamped.all():
        raise EstimationError("every influence cell is non-positive")
    values = np.where(clamped, epsilon, values)

    n_t, n_a, n_p = len(topics), len(actions), len(positions)
    t_index = {t: i for i, t in enumerate(topics)}
    a_index = {a: n_t + i for i, a in enumerate(actions)}
    p_index = {p: n_t + n_a + i for i, p in enumerate(positions)}
    design = np.zeros((len(keys) + 2, n_t + n_a + n_p))
    for row, (topic, action, position) in enumerate(keys):
        design[row, [t_index[topic], a_index[action], p_index[position]]] = 1.0
    design[len(keys), :n_t] = 1.0 / n_t
    design[len(keys) + 1, n_t + n_a:] = 1.0 / n_p
    target = np.concatenate([np.log(values), [0.0, 0.0]])

    solution, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < n_t + n_a + n_p:
        raise EstimationError(f"influence grid does not identify every factor (rank {rank} < {n_t + n_a + n_p})")
    fitted = design[:len(keys)] @ solution
    residual = float(np.sqrt(np.mean((np.log(values) - fitted) ** 2)))
    if clamped.any():
        logger.warning(f"Clamped {int(clamped.sum())} non-positive influence cell(s) to {epsilon}")

    factors = np.exp(solution)
    return InfluenceSolution(
        f1={t: float(factors[t_index[t]]) for t in topics},
        f2={a: float(factors[a_index[a]]) for a in actions},
        f3={p: float(factors[p_index[p]]) for p in positions},
        residual=residual,
        clamped_count=int(clamped.sum()),
    )


def position_trend(blocks: pd.DataFrame, interaction: str, measure: str, dose: int) -> TrendResult:
    """Linear regression of per-block effects on block position."""
    effects = block_effects(blocks, interaction, measure, dose)
    if effects['position'].nunique() < 2:
        raise EstimationError(f"{interaction}: trend needs at least two block positions")
    x = effects['position'].to_numpy(dtype=float)
    y = effects['effect'].to_numpy(dtype=float)
    if np.allclose(y, y[0]):
        return TrendResult(interaction, measure, 0.0, float(y[0]), 1.0, len(y))
    fit = stats.linregress(x, y)
    return TrendResult(interaction, measure, float(fit.slope), float(fit.intercept), float(fit.pvalue), len(y))


def topic_homogeneity(blocks: pd.DataFrame, interaction: str, measure: str, dose: int) -> Tuple[float, float]:
    """ANOVA of per-block effects of one interaction grouped by topic: (F, p)."""
    effects = block_effects(blocks, interaction, measure, dose)
    groups = [g['effect'].to_numpy() for _, g in effects.groupby('topic')]
    return carryover_anova(groups)
