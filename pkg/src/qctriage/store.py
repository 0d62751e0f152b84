"""The QC verdict ledger.

One RFC-4180 CSV per (dataset, pipeline) holds a row per reviewable
output: identifiers, the yes/no/maybe status, user, UTC timestamp and a
free-text note. Writes are whole-file rewrites through a temp file and an
atomic rename, so readers always observe a complete revision and a crash
can never corrupt the ledger. Multi-source aggregation resolves conflicts
deterministically: latest timestamp wins, ties prefer the more
conservative status, then the lexicographically smallest user.
"""

from __future__ import annotations

import csv
import os
import socket
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

STATUSES = ("yes", "no", "maybe")
# conservative ordering for timestamp ties: no beats maybe beats yes
STATUS_RANK = {"no": 0, "maybe": 1, "yes": 2}

CLOCK_SKEW_SECONDS = 300

RESULT_COLUMNS = ["item_id", "dataset", "pipeline", "sub", "ses", "acq",
                  "run", "suffix", "sub_output", "png_path", "status",
                  "user", "timestamp", "note"]

LEDGER_SUFFIX = "__qc.csv"


class StoreError(Exception):
    pass


class InvalidStatusError(StoreError):
    pass


class InvalidTimestampError(StoreError):
    pass


class UnknownItemError(StoreError):
    pass


class DuplicateItemIdError(StoreError):
    pass


class EmptyManifestError(StoreError):
    pass


class ReadOnlyError(StoreError):
    pass


class LockHeldError(StoreError):
    pass


def utc_now() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


def format_timestamp(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    dt = dt.astimezone(timezone.utc).replace(microsecond=0)
    return dt.isoformat().replace("+00:00", "Z")


def parse_timestamp(text: str) -> datetime:
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise InvalidTimestampError(f"bad timestamp {text!r}: {exc}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


@dataclass(frozen=True)
class Verdict:
    status: str
    user: str
    timestamp: datetime
    note: str = ""

    def __post_init__(self):
        if self.status not in STATUSES:
            raise InvalidStatusError(
                f"status {self.status!r} not one of {STATUSES}")

    def check_clock(self, now: datetime | None = None) -> None:
        now = now or utc_now()
        if (self.timestamp - now).total_seconds() > CLOCK_SKEW_SECONDS:
            raise InvalidTimestampError(
                f"timestamp {format_timestamp(self.timestamp)} is in the future")


def make_item_id(dataset: str, pipeline: str, entity_key: str,
                 sub_output: str = "") -> str:
    base = f"{dataset}/{pipeline}/{entity_key}"
    return f"{base}/{sub_output}" if sub_output else base


@dataclass
class ResultsRow:
    item_id: str
    dataset: str
    pipeline: str
    sub: str
    ses: str
    acq: str
    run: str
    suffix: str
    sub_output: str
    png_path: str
    verdict: Verdict

    def __post_init__(self):
        if os.path.isabs(self.png_path):
            raise StoreError(f"png_path must be relative: {self.png_path!r}")

    def to_csv(self) -> list:
        return [self.item_id, self.dataset, self.pipeline, self.sub, self.ses,
                self.acq, self.run, self.suffix, self.sub_output,
                self.png_path, self.verdict.status, self.verdict.user,
                format_timestamp(self.verdict.timestamp), self.verdict.note]

    @classmethod
    def from_csv(cls, record: dict) -> "ResultsRow":
        return cls(
            item_id=record["item_id"], dataset=record["dataset"],
            pipeline=record["pipeline"], sub=record["sub"], ses=record["ses"],
            acq=record["acq"], run=record["run"], suffix=record["suffix"],
            sub_output=record["sub_output"], png_path=record["png_path"],
            verdict=Verdict(status=record["status"], user=record["user"],
                            timestamp=parse_timestamp(record["timestamp"]),
                            note=record["note"]),
        )


@dataclass
class ResultsTable:
    rows: dict = field(default_factory=dict)    # item_id -> ResultsRow
    provenance: str = ""
    revision: int = 0
    conflict_count: int = 0

    def __len__(self) -> int:
        return len(self.rows)

    def sorted_rows(self) -> list:
        return [self.rows[key] for key in sorted(self.rows)]

    def add(self, row: ResultsRow) -> None:
        if row.item_id in self.rows:
            raise DuplicateItemIdError(row.item_id)
        self.rows[row.item_id] = row

    def save(self, path=None) -> Path:
        """Atomically rewrite the ledger: temp file, fsync, rename."""
        path = Path(path or self.provenance)
        if not str(path):
            raise StoreError("no path to save to")
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent,
                                        prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(RESULT_COLUMNS)
                for row in self.sorted_rows():
                    writer.writerow(row.to_csv())
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp_name, path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
        self.provenance = str(path)
        return path

    @classmethod
    def load(cls, path) -> "ResultsTable":
        path = Path(path)
        table = cls(provenance=str(path))
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != RESULT_COLUMNS:
                raise StoreError(
                    f"{path}: unexpected columns {reader.fieldnames}")
            for record in reader:
                table.add(ResultsRow.from_csv(record))
        return table


@dataclass
class ItemSeed:
    """What init_results needs to know about one renderable output."""

    dataset: str
    pipeline: str
    entity_key: str                 # serialized EntityMap
    entity_fields: dict             # sub/ses/acq/run/suffix values
    png_path: str
    sub_output: str = ""
    missing: bool = False           # rendering reported MissingInput


def init_results(seeds, user: str = "system",
                 now: datetime | None = None) -> ResultsTable:
    """Fresh ledger: everything passes unless its rendering was missing.

    Renderable items start as "yes" to minimize reporting effort; items
    whose render reported missing inputs start as "no" with a note.
    """
    seeds = list(seeds)
    if not seeds:
        raise EmptyManifestError("cannot initialize an empty ledger")
    now = now or utc_now()
    table = ResultsTable()
    for seed in seeds:
        verdict = Verdict(status="no" if seed.missing else "yes", user=user,
                          timestamp=now,
                          note="missing outputs" if seed.missing else "")
        fields = seed.entity_fields
        table.add(ResultsRow(
            item_id=make_item_id(seed.dataset, seed.pipeline, seed.entity_key,
                                 seed.sub_output),
            dataset=seed.dataset, pipeline=seed.pipeline,
            sub=fields.get("sub", ""), ses=fields.get("ses", ""),
            acq=fields.get("acq", ""), run=fields.get("run", ""),
            suffix=fields.get("suffix", ""), sub_output=seed.sub_output,
            png_path=seed.png_path, verdict=verdict,
        ))
    return table


def record_verdict(table: ResultsTable, item_id: str, verdict: Verdict,
                   now: datetime | None = None) -> ResultsTable:
    """Replace one row's verdict and persist before returning."""
    if item_id not in table.rows:
        raise UnknownItemError(item_id)
    verdict.check_clock(now)
    table.rows[item_id] = replace(table.rows[item_id], verdict=verdict)
    table.revision += 1
    if table.provenance:
        table.save()
    return table


def _wins(challenger: ResultsRow, incumbent: ResultsRow) -> bool:
    a, b = challenger.verdict, incumbent.verdict
    if a.timestamp != b.timestamp:
        return a.timestamp > b.timestamp
    if STATUS_RANK[a.status] != STATUS_RANK[b.status]:
        return STATUS_RANK[a.status] < STATUS_RANK[b.status]
    return a.user < b.user


def merge_results(tables) -> ResultsTable:
    """Union tables by item_id with deterministic conflict resolution.

    Associative and commutative up to row ordering; the number of item_ids
    that needed resolving is recorded on the result's conflict_count.
    """
    tables = list(tables)
    if not tables:
        raise StoreError("nothing to merge")
    merged = ResultsTable()
    contested: set = set()
    for table in tables:
        for item_id, row in table.rows.items():
            current = merged.rows.get(item_id)
            if current is None:
                merged.rows[item_id] = row
                continue
            if row.to_csv() != current.to_csv():
                contested.add(item_id)
            if _wins(row, current):
                merged.rows[item_id] = row
    merged.conflict_count = len(contested)
    return merged


@dataclass
class Summary:
    counts: dict
    failure_rate: float
    per_user: dict


def summarize(table: ResultsTable) -> Summary:
    counts = {status: 0 for status in STATUSES}
    per_user: dict = {}
    for row in table.rows.values():
        counts[row.verdict.status] += 1
        per_user[row.verdict.user] = per_user.get(row.verdict.user, 0) + 1
    total = len(table.rows)
    rate = counts["no"] / total if total else 0.0
    return Summary(counts=counts, failure_rate=rate, per_user=per_user)


def ledger_path(archive_root, dataset: str, pipeline: str) -> Path:
    return Path(archive_root) / f"{dataset}__{pipeline}{LEDGER_SUFFIX}"


def find_ledgers(archive_root) -> list:
    """(dataset, pipeline, path) for every ledger CSV under the archive."""
    out = []
    for path in sorted(Path(archive_root).glob(f"*{LEDGER_SUFFIX}")):
        stem = path.name[: -len(LEDGER_SUFFIX)]
        dataset, sep, pipeline = stem.rpartition("__")
        if sep:
            out.append((dataset, pipeline, path))
    return out


class LedgerLock:
    """Advisory single-writer lock: ``<csv>.lock`` holding pid and host.

    A leftover lock from a dead process on the same host is reclaimed.
    """

    def __init__(self, ledger_path):
        self.path = Path(str(ledger_path) + ".lock")
        self.held = False

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        payload = f"{os.getpid()} {socket.gethostname()}\n"
        for attempt in (1, 2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                with os.fdopen(fd, "w") as fh:
                    fh.write(payload)
                self.held = True
                return
            except FileExistsError:
                if attempt == 1 and self._stale():
                    self.path.unlink(missing_ok=True)
                    continue
                raise LockHeldError(
                    f"{self.path} held by {self.owner() or 'unknown'}")

    def _stale(self) -> bool:
        owner = self.owner()
        if owner is None:
            return True
        pid, host = owner
        if host != socket.gethostname():
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    def owner(self):
        try:
            pid_text, host = self.path.read_text().split()
            return int(pid_text), host
        except (OSError, ValueError):
            return None

    def release(self) -> None:
        if self.held:
            self.path.unlink(missing_ok=True)
            self.held = False

    def __enter__(self) -> "LedgerLock":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()
