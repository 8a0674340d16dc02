"""Crossover trial: Latin-square plans, primer/washout and dosed sockpuppet runs."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from joblib import Parallel, delayed

from .platform_sim import (
    CONTROL,
    NO_TOPIC,
    AccountState,
    ContentLibrary,
    FeedPage,
    HistoryEntry,
    InteractionError,
    PlatformParams,
    SparseLibraryError,
    apply_interaction,
    create_account,
    generate_feed,
)
from .utils import stable_seed

logger = logging.getLogger(__name__)

TREATMENT = 'treatment'
CONTROL_GROUP = 'control'
PRIMER_INTERACTION = 'Like'
PRIMER_DOSES = 5
DEFAULT_PRIMER_TOPICS = ('Breakfast Recipes', 'Lunch Recipes', 'Dinner Recipes')


class TrialError(RuntimeError):
    """Invalid plan or an unpaired treatment puppet."""


@dataclass(frozen=True)
class TreatmentPair:
    topic: str
    action: str


@dataclass(frozen=True)
class TopicSequence:
    topics: Tuple[str, ...]
    index: int

    def position_of(self, topic: str) -> int:
        return self.topics.index(topic) + 1


@dataclass(frozen=True)
class PuppetAssignment:
    account_id: str
    group: str
    interaction: str
    pair_index: int
    seed: int
    sequence: Optional[TopicSequence] = None


@dataclass(frozen=True)
class TrialPlan:
    topics: Tuple[str, ...]
    interactions: Tuple[str, ...]
    puppets_per_cell: int
    sequences: Tuple[TopicSequence, ...]
    assignments: Tuple[PuppetAssignment, ...]
    primer_topics: Tuple[str, ...] = DEFAULT_PRIMER_TOPICS
    doses: int = 5

    def __len__(self):
        return len(self.assignments)

    @property
    def treatment_assignments(self) -> List[PuppetAssignment]:
        return [a for a in self.assignments if a.group == TREATMENT]

    @property
    def control_assignments(self) -> List[PuppetAssignment]:
        return [a for a in self.assignments if a.group == CONTROL_GROUP]

    def control_for(self, assignment: PuppetAssignment) -> Optional[PuppetAssignment]:
        for a in self.control_assignments:
            if a.interaction == assignment.interaction and a.pair_index == assignment.pair_index:
                return a
        return None

    def observations_per_pair(self) -> int:
        """Treatment observations of each (topic, action): every topic appears once per sequence."""
        return len(self.sequences) * self.puppets_per_cell

    def observations_per_action(self) -> int:
        return self.observations_per_pair() * len(self.topics)

    def puppets_per_topic(self) -> int:
        """Puppets whose feed is observed around each topic block (treatments plus their controls)."""
        return len(self.interactions) * (len(self.sequences) + 1) * self.puppets_per_cell

    def snapshots_per_puppet(self) -> int:
        return 1 + len(self.topics) * (self.doses + 1)


@dataclass(frozen=True)
class Snapshot:
    account_id: str
    group: str
    interaction: str
    seq_index: int
    topic: str
    dose_index: int
    page: FeedPage

    @property
    def tick(self) -> int:
        return self.page.tick


@dataclass
class ObservationLog:
    assignment: PuppetAssignment
    snapshots: List[Snapshot] = field(default_factory=list)
    history: Tuple[HistoryEntry, ...] = ()
    failure: Optional[str] = None

    @property
    def account_id(self) -> str:
        return self.assignment.account_id

    @property
    def ok(self) -> bool:
        return self.failure is None


@dataclass
class TrialDataset:
    plan: TrialPlan
    logs: List[ObservationLog]

    @property
    def failures(self) -> Dict[str, str]:
        return {log.account_id: log.failure for log in self.logs if not log.ok}

    def log_for(self, account_id: str) -> ObservationLog:
        for log in self.logs:
            if log.account_id == account_id:
                return log
        raise KeyError(account_id)


def generate_latin_squares(topics: Sequence[str]) -> List[TopicSequence]:
    """Cyclic Latin square: sequence k is the topic list rotated left by k - 1."""
    topics = list(topics)
    if not topics:
        raise TrialError("at least one topic is required")
    if len(set(topics)) != len(topics):
        raise TrialError(f"duplicate topics in {topics}")
    m = len(topics)
    return [TopicSequence(topics=tuple(topics[(k + j) % m] for j in range(m)), index=k + 1) for k in range(m)]


def build_trial_plan(topics: Sequence[str], interactions: Sequence[str], n: int, doses: int = 5,
                     primer_topics: Sequence[str] = DEFAULT_PRIMER_TOPICS) -> TrialPlan:
    """
    Build the stratified crossover plan

    Per interaction: one treatment subgroup of n puppets per Latin-square sequence,
    plus n control puppets. Control k is paired with treatment puppet k of every
    sequence and shares its account seed.
    """
    if n < 1:
        raise TrialError(f"puppets per cell must be >= 1, got {n}")
    if not topics or not interactions:
        raise TrialError("topics and interactions must be nonempty")
    if len(set(interactions)) != len(interactions):
        raise TrialError(f"duplicate interactions in {list(interactions)}")

    sequences = generate_latin_squares(topics)
    assignments = []
    for interaction in interactions:
        prefix = interaction.lower()
        for k in range(1, n + 1):
            seed = stable_seed('puppet', interaction, k)
            for seq in sequences:
                assignments.append(PuppetAssignment(
                    account_id=f"{prefix}-t{seq.index}-p{k}",
                    group=TREATMENT,
                    interaction=interaction,
                    pair_index=k,
                    seed=seed,
                    sequence=seq,
                ))
            assignments.append(PuppetAssignment(
                account_id=f"{prefix}-c-p{k}",
                group=CONTROL_GROUP,
                interaction=interaction,
                pair_index=k,
                seed=seed,
            ))
    assignments.sort(key=lambda a: a.account_id)
    return TrialPlan(
        topics=tuple(topics),
        interactions=tuple(interactions),
        puppets_per_cell=n,
        sequences=tuple(sequences),
        assignments=tuple(assignments),
        primer_topics=tuple(primer_topics),
        doses=doses,
    )


def run_primer(account: AccountState, library: ContentLibrary, params: PlatformParams,
               primer_topics: Sequence[str] = DEFAULT_PRIMER_TOPICS) -> AccountState:
    """Like the top PRIMER_DOSES results of every primer topic."""
    for query in primer_topics:
        for i in range(1, PRIMER_DOSES + 1):
            account = apply_interaction(account, PRIMER_INTERACTION, query, i, library, params)
    return account


def run_sockpuppet(assignment: PuppetAssignment, library: ContentLibrary, params: PlatformParams,
                   plan: TrialPlan) -> ObservationLog:
    """
    Run one puppet through primer, dosed topic blocks and washouts

    Treatment puppets apply their interaction to each topic of their sequence;
    controls place Control markers on the same ticks, so both record snapshots
    at identical ticks. Simulator errors end the run with a failure record.
    """
    log = ObservationLog(assignment=assignment)
    is_control = assignment.group == CONTROL_GROUP
    blocks = [NO_TOPIC] * len(plan.topics) if is_control else list(assignment.sequence.topics)
    account = create_account(params, assignment.seed, assignment.account_id)

    def record(account, position, topic, dose):
        log.snapshots.append(Snapshot(
            account_id=assignment.account_id,
            group=assignment.group,
            interaction=assignment.interaction,
            seq_index=position,
            topic=topic,
            dose_index=dose,
            page=generate_feed(account, library, params),
        ))

    try:
        account = run_primer(account, library, params, plan.primer_topics)
        record(account, 0, NO_TOPIC, 0)
        for position, topic in enumerate(blocks, start=1):
            record(account, position, topic, 0)
            for i in range(1, plan.doses + 1):
                if is_control:
                    account = apply_interaction(account, CONTROL, NO_TOPIC, i, library, params)
                else:
                    account = apply_interaction(account, assignment.interaction, topic, i, library, params)
                record(account, position, topic, i)
            account = run_primer(account, library, params, plan.primer_topics)
    except (SparseLibraryError, InteractionError) as e:
        log.failure = f"{type(e).__name__}: {e}"
        logger.error(f"Puppet {assignment.account_id} failed: {log.failure}")
    log.history = account.interaction_history
    logger.debug(f"Puppet {assignment.account_id} finished with {len(log.snapshots)} snapshots")
    return log


def check_pairing(plan: TrialPlan):
    missing = [a.account_id for a in plan.treatment_assignments if plan.control_for(a) is None]
    if missing:
        raise TrialError(f"treatment puppets without a paired control: {', '.join(missing)}")


def run_trial(plan: TrialPlan, library: ContentLibrary, params: PlatformParams, n_jobs: int = 1) -> TrialDataset:
    """
    Execute every puppet of a plan

    Puppets are independent, so they run on a joblib thread pool; the dataset is
    ordered by account id whatever the execution order.
    """
    check_pairing(plan)
    if not plan.assignments:
        return TrialDataset(plan=plan, logs=[])

    logger.info(f"Running {len(plan)} sockpuppets ({n_jobs} job(s))")
    logs = Parallel(n_jobs=n_jobs, prefer='threads')(
        delayed(run_sockpuppet)(assignment, library, params, plan) for assignment in plan.assignments
    )
    logs = sorted(logs, key=lambda log: log.account_id)
    dataset = TrialDataset(plan=plan, logs=logs)
    if dataset.failures:
        logger.error(f"{len(dataset.failures)} puppet(s) failed: {', '.join(sorted(dataset.failures))}")
    else:
        logger.info(f"All {len(logs)} sockpuppets completed")
    return dataset
