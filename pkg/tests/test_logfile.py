import pytest

from src.logfile import (
    LOG_COLUMNS,
    LogFormatError,
    ManifestError,
    file_digest,
    read_history,
    read_manifest,
    read_observation_log,
    read_post_table,
    write_history,
    write_manifest,
    write_observation_log,
    write_post_table,
)
from src.trial import ObservationLog, build_trial_plan, run_sockpuppet

from .conftest import PRIMERS


@pytest.fixture(scope='module')
def puppet_log(params, library):
    plan = build_trial_plan(['NFL', 'Fitness'], ['Follow'], 1, doses=2, primer_topics=PRIMERS)
    return run_sockpuppet(plan.treatment_assignments[0], library, params, plan)


def test_observation_log_round_trip(tmp_path, puppet_log):
    first = tmp_path / 'first.tsv'
    digest = write_observation_log(puppet_log, first)
    assert digest == file_digest(first)
    assert first.read_text(encoding='utf-8').splitlines()[0].split('\t') == list(LOG_COLUMNS)

    snapshots = read_observation_log(first)
    assert len(snapshots) == len(puppet_log.snapshots) == 1 + 2 * 3
    assert [s.page.tick for s in snapshots] == [s.page.tick for s in puppet_log.snapshots]

    second = tmp_path / 'second.tsv'
    assert write_observation_log(ObservationLog(puppet_log.assignment, snapshots), second) == digest
    assert first.read_bytes() == second.read_bytes()


def test_observation_log_uses_post_table(tmp_path, puppet_log):
    seen = {e.post.post_id: e.post for s in puppet_log.snapshots for e in s.page.entries}
    write_post_table(seen.values(), tmp_path / 'posts.tsv')
    posts = read_post_table(tmp_path / 'posts.tsv')
    assert posts == seen

    write_observation_log(puppet_log, tmp_path / 'log.tsv')
    snapshots = read_observation_log(tmp_path / 'log.tsv', posts)
    assert snapshots == puppet_log.snapshots


def test_corrupt_line_is_reported(tmp_path, puppet_log):
    path = tmp_path / 'log.tsv'
    write_observation_log(puppet_log, path)
    lines = path.read_text(encoding='utf-8').splitlines()
    fields = lines[4].split('\t')
    fields[LOG_COLUMNS.index('rank')] = 'x'
    lines[4] = '\t'.join(fields)
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    with pytest.raises(LogFormatError, match=r':5: column rank'):
        read_observation_log(path)


def test_wrong_header(tmp_path):
    path = tmp_path / 'log.tsv'
    path.write_text('account_id\tgroup\n', encoding='utf-8')
    with pytest.raises(LogFormatError, match=':1:'):
        read_observation_log(path)


def test_history_round_trip(tmp_path, puppet_log):
    path = tmp_path / 'history.tsv'
    write_history(puppet_log.account_id, puppet_log.history, path)
    assert tuple(read_history(path)) == puppet_log.history


def test_history_ticks_must_increase(tmp_path, puppet_log):
    path = tmp_path / 'history.tsv'
    write_history(puppet_log.account_id, puppet_log.history[:3][::-1], path)
    with pytest.raises(LogFormatError, match='strictly increase'):
        read_history(path)


def test_manifest(tmp_path):
    with pytest.raises(ManifestError, match='no manifest'):
        read_manifest(tmp_path)
    write_manifest({'config_hash': 'abc', 'seed': 1, 'config': {}, 'puppets': []}, tmp_path)
    assert read_manifest(tmp_path)['config_hash'] == 'abc'
    write_manifest({'seed': 1}, tmp_path)
    with pytest.raises(ManifestError, match='config_hash'):
        read_manifest(tmp_path)
