"""HTTP backend for the review loop.

Serves queue listings, PNG bytes tuned for montage-speed cycling (server
side read-ahead, LRU byte cache, content-hash validators), and records
verdicts write-through: the ledger row is durable on disk before the
acknowledgment leaves the server.

One service instance owns a ledger's write lock; others fall back to
read-only and answer verdict posts with 403 so the single-writer rule is
visible to clients.
"""

from __future__ import annotations

import getpass
import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import HTMLResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import preflight, store

PREFETCH_DEFAULT = 32
CACHE_MB_DEFAULT = 512


class ByteLru:
    """Thread-safe LRU of byte strings, bounded by total payload size."""

    def __init__(self, capacity_bytes: int):
        self.capacity = capacity_bytes
        self.size = 0
        self._entries: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            if key not in self._entries:
                return None
            self._entries.move_to_end(key)
            return self._entries[key]

    def put(self, key, value: bytes) -> None:
        with self._lock:
            if key in self._entries:
                self.size -= len(self._entries.pop(key))
            self._entries[key] = value
            self.size += len(value)
            while self.size > self.capacity and len(self._entries) > 1:
                _, evicted = self._entries.popitem(last=False)
                self.size -= len(evicted)

    def __contains__(self, key) -> bool:
        with self._lock:
            return key in self._entries


@dataclass
class QueueHandle:
    dataset: str
    pipeline: str
    path: Path
    table: store.ResultsTable
    mtime: float
    lock: store.LedgerLock | None     # held write lock, None when read-only

    @property
    def writable(self) -> bool:
        return self.lock is not None


class VerdictBody(BaseModel):
    item_id: str
    status: str
    note: str = ""
    user: str = ""


class ReviewService:
    """Shared state behind the HTTP handlers."""

    def __init__(self, archive_root, *, cache_mb: int = CACHE_MB_DEFAULT,
                 read_only: bool = False, prefetch: int = PREFETCH_DEFAULT,
                 default_user: str | None = None):
        self.archive_root = Path(archive_root)
        if not self.archive_root.is_dir():
            raise FileNotFoundError(f"archive root {archive_root} missing")
        self.read_only = read_only
        self.prefetch = prefetch
        self.default_user = default_user or getpass.getuser()
        self.cache = ByteLru(cache_mb * 1024 * 1024)
        self.queues: dict = {}
        self._write_lock = threading.Lock()
        self.refresh()

    def close(self) -> None:
        for handle in self.queues.values():
            if handle.lock is not None:
                handle.lock.release()

    def refresh(self) -> None:
        """Pick up new/changed ledgers; keep held write locks."""
        for dataset, pipeline, path in store.find_ledgers(self.archive_root):
            key = (dataset, pipeline)
            handle = self.queues.get(key)
            if handle is None:
                lock = None
                if not self.read_only:
                    candidate = store.LedgerLock(path)
                    try:
                        candidate.acquire()
                        lock = candidate
                    except store.LockHeldError:
                        lock = None
                self.queues[key] = QueueHandle(
                    dataset=dataset, pipeline=pipeline, path=path,
                    table=store.ResultsTable.load(path),
                    mtime=path.stat().st_mtime, lock=lock)
            elif handle.lock is None:
                # not the writer: follow on-disk changes
                mtime = path.stat().st_mtime
                if mtime != handle.mtime:
                    handle.table = store.ResultsTable.load(path)
                    handle.mtime = mtime

    def queue(self, dataset: str, pipeline: str) -> QueueHandle:
        self.refresh()
        handle = self.queues.get((dataset, pipeline))
        if handle is None:
            raise HTTPException(404, f"unknown queue {dataset}/{pipeline}")
        return handle

    def suspects(self, dataset: str, pipeline: str) -> set:
        return preflight.load_suspects(
            preflight.report_path(self.archive_root, dataset, pipeline))

    def find_row(self, item_id: str):
        self.refresh()
        for handle in self.queues.values():
            row = handle.table.rows.get(item_id)
            if row is not None:
                return handle, row
        raise HTTPException(404, f"unknown item {item_id}")

    def png_bytes(self, item_id: str, png_path: str) -> bytes:
        cached = self.cache.get(item_id)
        if cached is not None:
            return cached
        path = self.archive_root / png_path
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise HTTPException(410, f"file vanished: {png_path}")
        self.cache.put(item_id, data)
        return data

    def warm(self, handle: QueueHandle, count: int) -> None:
        for row in handle.table.sorted_rows()[:count]:
            if row.item_id not in self.cache:
                path = self.archive_root / row.png_path
                if path.exists():
                    self.cache.put(row.item_id, path.read_bytes())

    def counts(self, handle: QueueHandle) -> dict:
        return store.summarize(handle.table).counts

    def record(self, handle: QueueHandle, item_id: str,
               verdict: store.Verdict) -> dict:
        if not handle.writable:
            raise HTTPException(403, "ledger is read-only on this instance")
        with self._write_lock:
            try:
                store.record_verdict(handle.table, item_id, verdict)
            except store.UnknownItemError:
                raise HTTPException(404, f"unknown item {item_id}")
            handle.mtime = handle.path.stat().st_mtime
        return self.counts(handle)


FALLBACK_PAGE = """<!doctype html>
<html><head><title>QC review</title></head>
<body><h1>QC review service</h1>
<p>No frontend assets are installed. The JSON API lives under
<a href="/api/queues">/api/queues</a>.</p></body></html>
"""


def create_app(archive_root, *, cache_mb: int = CACHE_MB_DEFAULT,
               read_only: bool = False, prefetch: int = PREFETCH_DEFAULT,
               static_dir=None, default_user: str | None = None) -> FastAPI:
    service = ReviewService(archive_root, cache_mb=cache_mb,
                            read_only=read_only, prefetch=prefetch,
                            default_user=default_user)
    app = FastAPI(title="qctriage review service")
    app.state.service = service

    @app.get("/api/queues")
    def list_queues():
        service.refresh()
        out = []
        for (dataset, pipeline) in sorted(service.queues):
            handle = service.queues[(dataset, pipeline)]
            counts = service.counts(handle)
            suspects = service.suspects(dataset, pipeline)
            out.append({
                "dataset": dataset,
                "pipeline": pipeline,
                "total": len(handle.table),
                "non_yes": counts["no"] + counts["maybe"],
                "suspect": sum(1 for item_id in handle.table.rows
                               if item_id in suspects),
            })
        return out

    @app.get("/api/queues/{dataset}/{pipeline}")
    def get_queue(dataset: str, pipeline: str):
        handle = service.queue(dataset, pipeline)
        suspects = service.suspects(dataset, pipeline)
        rows = handle.table.sorted_rows()
        items = [{
            "item_id": row.item_id,
            "png_path": row.png_path,
            "status": row.verdict.status,
            "suspect": row.item_id in suspects,
            "position": position,
            "total": len(rows),
        } for position, row in enumerate(rows, start=1)]
        service.warm(handle, service.prefetch)
        return {"dataset": dataset, "pipeline": pipeline,
                "counts": service.counts(handle), "items": items}

    @app.get("/api/png/{item_id:path}")
    def get_png(item_id: str, request: Request):
        handle, row = service.find_row(item_id)
        data = service.png_bytes(item_id, row.png_path)
        etag = '"' + hashlib.sha256(data).hexdigest() + '"'
        if request.headers.get("if-none-match") == etag:
            return Response(status_code=304, headers={"ETag": etag})
        return Response(content=data, media_type="image/png",
                        headers={"ETag": etag})

    @app.post("/api/verdict")
    def post_verdict(body: VerdictBody):
        handle, _ = service.find_row(body.item_id)
        try:
            verdict = store.Verdict(status=body.status,
                                    user=body.user or service.default_user,
                                    timestamp=store.utc_now(), note=body.note)
        except store.InvalidStatusError as exc:
            raise HTTPException(400, str(exc))
        counts = service.record(handle, body.item_id, verdict)
        return {"item_id": body.item_id, "status": verdict.status,
                "counts": counts}

    @app.get("/api/progress/{dataset}/{pipeline}")
    def get_progress(dataset: str, pipeline: str):
        handle = service.queue(dataset, pipeline)
        rows = handle.table.rows.values()
        last = max((r.verdict.timestamp for r in rows), default=None)
        return {"dataset": dataset, "pipeline": pipeline,
                "counts": service.counts(handle),
                "last_activity": store.format_timestamp(last) if last else None}

    static = Path(static_dir) if static_dir else None
    if static and static.is_dir():
        app.mount("/", StaticFiles(directory=static, html=True), name="ui")
    else:
        @app.get("/", response_class=HTMLResponse)
        def index():
            return FALLBACK_PAGE

    @app.exception_handler(store.StoreError)
    def store_error(_, exc: store.StoreError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    return app
