"""Observation logs, interaction histories, the post table and the run manifest."""

import csv
import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import pandas as pd

from .platform_sim import FeedEntry, FeedPage, HistoryEntry, PostRecord
from .trial import ObservationLog, Snapshot

logger = logging.getLogger(__name__)

LOG_COLUMNS = ('account_id', 'group', 'interaction', 'seq_index', 'topic', 'dose_index',
               'snapshot_tick', 'rank', 'post_id', 'source_id', 'true_topic', 'text')
HISTORY_COLUMNS = ('account_id', 'tick', 'interaction', 'topic', 'query', 'target_id', 'source_id')
POST_COLUMNS = ('post_id', 'source_id', 'true_topic', 'subtopic', 'created_tick', 'popularity', 'embedding', 'text')
MANIFEST_NAME = 'manifest.json'
POSTS_NAME = 'posts.tsv'
LOG_DIR = 'logs'
_FORBIDDEN = ('\t', '\n', '\r', '"')


class LogFormatError(ValueError):
    """A log file that does not follow the column contract; messages carry line numbers."""


class ManifestError(ValueError):
    """Missing, unreadable or inconsistent run manifest."""


def _check_text(value: str, where: str):
    if any(ch in value for ch in _FORBIDDEN):
        raise LogFormatError(f"{where}: field contains a tab, newline or quote: {value!r}")


def _to_tsv(rows: List[Sequence[Any]], columns: Sequence[str]) -> str:
    frame = pd.DataFrame(rows, columns=list(columns))
    buffer = io.StringIO()
    frame.to_csv(buffer, sep='\t', index=False, lineterminator='\n', quoting=csv.QUOTE_NONE)
    return buffer.getvalue()


def _write(path: Path, text: str) -> str:
    data = text.encode('utf-8')
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _read_tsv(path: Path, columns: Sequence[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False, quoting=csv.QUOTE_NONE,
                            encoding='utf-8')
    except FileNotFoundError as e:
        raise LogFormatError(f"{path}: file not found") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise LogFormatError(f"{path}: {e}") from e
    if tuple(frame.columns) != tuple(columns):
        raise LogFormatError(f"{path}:1: expected header {'|'.join(columns)}, got {'|'.join(frame.columns)}")
    return frame


def _ints(frame: pd.DataFrame, column: str, path: Path) -> pd.Series:
    values = pd.to_numeric(frame[column], errors='coerce')
    bad = values.isna() | (values != values.round())
    if bad.any():
        line = int(bad.to_numpy().argmax()) + 2
        raise LogFormatError(f"{path}:{line}: column {column} is not an integer: {frame[column].iloc[line - 2]!r}")
    return values.astype(int)


def observation_rows(log: ObservationLog) -> List[tuple]:
    rows = []
    for snap in log.snapshots:
        for entry in snap.page.entries:
            post = entry.post
            _check_text(post.text, f"{snap.account_id} post {post.post_id}")
            rows.append((snap.account_id, snap.group, snap.interaction, snap.seq_index, snap.topic,
                         snap.dose_index, snap.tick, entry.rank, post.post_id, post.source_id,
                         post.true_topic, post.text))
    return rows


def write_observation_log(log: ObservationLog, path) -> str:
    """Write one puppet's snapshots; returns the file's sha256."""
    return _write(Path(path), _to_tsv(observation_rows(log), LOG_COLUMNS))


def read_observation_log(path, posts: Optional[Mapping[str, PostRecord]] = None) -> List[Snapshot]:
    """
    Read a puppet log back into snapshots

    Args:
        path: log file
        posts: post_id -> PostRecord used for the entries (carries embeddings);
            rows not in it become bare records built from the log columns

    Raises:
        LogFormatError naming the offending line
    """
    path = Path(path)
    frame = _read_tsv(path, LOG_COLUMNS)
    for column in ('seq_index', 'dose_index', 'snapshot_tick', 'rank'):
        frame[column] = _ints(frame, column, path)

    snapshots = []
    keys = ['account_id', 'group', 'interaction', 'seq_index', 'topic', 'dose_index', 'snapshot_tick']
    # consecutive runs of identical keys form one snapshot
    run_id = (frame[keys] != frame[keys].shift()).any(axis=1).cumsum()
    for _, rows in frame.groupby(run_id, sort=False):
        first = rows.iloc[0]
        entries = []
        for line, row in zip(rows.index + 2, rows.itertuples(index=False)):
            post = posts.get(row.post_id) if posts is not None else None
            if post is None:
                post = PostRecord(post_id=row.post_id, source_id=row.source_id, true_topic=row.true_topic,
                                  text=row.text)
            elif post.source_id != row.source_id or post.true_topic != row.true_topic:
                raise LogFormatError(f"{path}:{line}: post {row.post_id} disagrees with the post table")
            entries.append(FeedEntry(rank=int(row.rank), post=post))
        try:
            page = FeedPage(account_id=first['account_id'], tick=int(first['snapshot_tick']), entries=tuple(entries))
        except ValueError as e:
            raise LogFormatError(f"{path}:{int(rows.index[0]) + 2}: {e}") from e
        snapshots.append(Snapshot(
            account_id=first['account_id'],
            group=first['group'],
            interaction=first['interaction'],
            seq_index=int(first['seq_index']),
            topic=first['topic'],
            dose_index=int(first['dose_index']),
            page=page,
        ))
    return snapshots


def write_history(account_id: str, history: Iterable[HistoryEntry], path) -> str:
    rows = []
    for h in history:
        for value in (h.query, h.topic):
            _check_text(value, f"{account_id} history")
        rows.append((account_id, h.tick, h.interaction, h.topic, h.query, h.target_id, h.source_id))
    return _write(Path(path), _to_tsv(rows, HISTORY_COLUMNS))


def read_history(path) -> List[HistoryEntry]:
    path = Path(path)
    frame = _read_tsv(path, HISTORY_COLUMNS)
    ticks = _ints(frame, 'tick', path)
    history = [HistoryEntry(tick=int(t), interaction=r.interaction, topic=r.topic, query=r.query,
                            target_id=r.target_id, source_id=r.source_id)
               for t, r in zip(ticks, frame.itertuples(index=False))]
    for line, (a, b) in enumerate(zip(history, history[1:]), start=3):
        if b.tick <= a.tick:
            raise LogFormatError(f"{path}:{line}: history ticks must strictly increase")
    return history


def write_post_table(posts: Iterable[PostRecord], path) -> str:
    """Posts seen in any log, with embeddings written as repr floats so they read back exactly."""
    rows = []
    for p in sorted(posts, key=lambda p: p.post_id):
        _check_text(p.text, f"post {p.post_id}")
        embedding = ' '.join(repr(float(x)) for x in (p.embedding or ()))
        rows.append((p.post_id, p.source_id, p.true_topic, p.subtopic, p.created_tick, repr(float(p.popularity)),
                     embedding, p.text))
    return _write(Path(path), _to_tsv(rows, POST_COLUMNS))


def read_post_table(path) -> Dict[str, PostRecord]:
    path = Path(path)
    frame = _read_tsv(path, POST_COLUMNS)
    created = _ints(frame, 'created_tick', path)
    posts = {}
    for line, (tick, row) in enumerate(zip(created, frame.itertuples(index=False)), start=2):
        try:
            embedding = tuple(float(x) for x in row.embedding.split()) or None
            popularity = float(row.popularity)
        except ValueError as e:
            raise LogFormatError(f"{path}:{line}: {e}") from e
        posts[row.post_id] = PostRecord(post_id=row.post_id, source_id=row.source_id, true_topic=row.true_topic,
                                        text=row.text, embedding=embedding, created_tick=int(tick),
                                        popularity=popularity, subtopic=row.subtopic)
    return posts


def write_manifest(manifest: Dict[str, Any], directory) -> Path:
    path = Path(directory) / MANIFEST_NAME
    _write(path, json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    return path


def read_manifest(directory) -> Dict[str, Any]:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise ManifestError(f"no manifest in {directory}")
    try:
        manifest = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: {e}") from e
    for key in ('config_hash', 'seed', 'config', 'puppets'):
        if key not in manifest:
            raise ManifestError(f"{path}: missing key {key!r}")
    return manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
