import hashlib

import numpy as np
import pytest
from fastapi.testclient import TestClient

from qctriage import pngio, preflight, service, store


def build_archive(tmp_path, dataset="adni", pipeline="slant", n=3):
    archive = tmp_path / "archive"
    png_dir = archive / dataset / pipeline
    png_dir.mkdir(parents=True, exist_ok=True)
    seeds = []
    rng = np.random.default_rng(42)
    for i in range(n):
        key = f"sub-{i:02d}_T1w"
        rel = f"{dataset}/{pipeline}/{key}.png"
        arr = rng.integers(0, 256, size=(32, 32), dtype=np.uint8)
        (archive / rel).write_bytes(pngio.encode_png(arr))
        seeds.append(store.ItemSeed(
            dataset=dataset, pipeline=pipeline, entity_key=key,
            entity_fields={"sub": f"{i:02d}", "suffix": "T1w"},
            png_path=rel))
    table = store.init_results(seeds)
    table.save(store.ledger_path(archive, dataset, pipeline))
    return archive


@pytest.fixture
def archive(tmp_path):
    return build_archive(tmp_path)


@pytest.fixture
def client(archive):
    app = service.create_app(archive)
    with TestClient(app) as c:
        yield c
    app.state.service.close()


class TestQueues:
    def test_list_two_ledgers(self, tmp_path):
        archive = build_archive(tmp_path)
        build_archive(tmp_path, dataset="oasis", pipeline="prequal", n=2)
        app = service.create_app(archive)
        try:
            with TestClient(app) as c:
                queues = c.get("/api/queues").json()
        finally:
            app.state.service.close()
        assert [(q["dataset"], q["pipeline"], q["total"]) for q in queues] == \
            [("adni", "slant", 3), ("oasis", "prequal", 2)]

    def test_empty_archive_is_empty_list(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        app = service.create_app(empty)
        with TestClient(app) as c:
            assert c.get("/api/queues").json() == []

    def test_missing_archive_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            service.create_app(tmp_path / "nope")

    def test_non_yes_count(self, archive):
        table = store.ResultsTable.load(
            store.ledger_path(archive, "adni", "slant"))
        ids = sorted(table.rows)
        for item_id, status in [(ids[0], "no"), (ids[1], "maybe")]:
            store.record_verdict(table, item_id, store.Verdict(
                status=status, user="u", timestamp=store.utc_now()))
        app = service.create_app(archive)
        try:
            with TestClient(app) as c:
                queue = c.get("/api/queues").json()[0]
            assert queue["non_yes"] == 2
        finally:
            app.state.service.close()


class TestGetQueue:
    def test_positions_and_total(self, client):
        payload = client.get("/api/queues/adni/slant").json()
        assert [i["position"] for i in payload["items"]] == [1, 2, 3]
        assert all(i["total"] == 3 for i in payload["items"])
        assert payload["counts"] == {"yes": 3, "no": 0, "maybe": 0}

    def test_suspect_flag_from_preflight_report(self, archive):
        items_sorted = sorted(store.ResultsTable.load(
            store.ledger_path(archive, "adni", "slant")).rows)
        preflight.append_report(
            preflight.report_path(archive, "adni", "slant"), items_sorted[1],
            [preflight.CheckResult("bvec_norms", "flag", 1.0, 0.01,
                                   detail="off unit")])
        app = service.create_app(archive)
        try:
            with TestClient(app) as c:
                items = c.get("/api/queues/adni/slant").json()["items"]
            assert [i["suspect"] for i in items] == [False, True, False]
        finally:
            app.state.service.close()

    def test_unknown_queue(self, client):
        assert client.get("/api/queues/adni/nope").status_code == 404

    def test_read_ahead_warms_cache(self, client):
        svc = client.app.state.service
        client.get("/api/queues/adni/slant")
        for item_id in sorted(svc.queues[("adni", "slant")].table.rows):
            assert item_id in svc.cache


class TestGetPng:
    def test_bytes_match_disk_and_etag(self, client, archive):
        items = client.get("/api/queues/adni/slant").json()["items"]
        first = items[0]
        response = client.get(f"/api/png/{first['item_id']}")
        assert response.status_code == 200
        assert response.headers["content-type"] == "image/png"
        disk = (archive / first["png_path"]).read_bytes()
        assert response.content == disk
        expected = '"' + hashlib.sha256(disk).hexdigest() + '"'
        assert response.headers["etag"] == expected

    def test_not_modified_round_trip(self, client):
        items = client.get("/api/queues/adni/slant").json()["items"]
        url = f"/api/png/{items[0]['item_id']}"
        etag = client.get(url).headers["etag"]
        second = client.get(url, headers={"If-None-Match": etag})
        assert second.status_code == 304
        assert second.content == b""

    def test_unknown_item(self, client):
        assert client.get("/api/png/nope/nope/nope").status_code == 404

    def test_vanished_file(self, client, archive):
        items = client.get("/api/queues/adni/slant").json()["items"]
        target = items[2]
        (archive / target["png_path"]).unlink()
        # bypass the cache warmed by get_queue
        svc = client.app.state.service
        svc.cache = service.ByteLru(svc.cache.capacity)
        assert client.get(f"/api/png/{target['item_id']}").status_code == 410


class TestPostVerdict:
    def test_write_through_and_counts(self, client, archive):
        items = client.get("/api/queues/adni/slant").json()["items"]
        response = client.post("/api/verdict", json={
            "item_id": items[0]["item_id"], "status": "no",
            "note": "labels outside brain", "user": "reviewer"})
        assert response.status_code == 200
        payload = response.json()
        assert payload["counts"] == {"yes": 2, "no": 1, "maybe": 0}
        # durable before acknowledgment: a fresh load sees the verdict
        table = store.ResultsTable.load(
            store.ledger_path(archive, "adni", "slant"))
        row = table.rows[items[0]["item_id"]]
        assert row.verdict.status == "no"
        assert row.verdict.note == "labels outside brain"
        assert row.verdict.user == "reviewer"

    def test_idempotent_yes(self, client):
        items = client.get("/api/queues/adni/slant").json()["items"]
        for _ in range(2):
            response = client.post("/api/verdict", json={
                "item_id": items[1]["item_id"], "status": "yes",
                "user": "r"})
            assert response.status_code == 200
        assert response.json()["counts"]["yes"] == 3

    def test_default_user_filled(self, client, archive):
        items = client.get("/api/queues/adni/slant").json()["items"]
        client.post("/api/verdict", json={
            "item_id": items[0]["item_id"], "status": "maybe"})
        table = store.ResultsTable.load(
            store.ledger_path(archive, "adni", "slant"))
        assert table.rows[items[0]["item_id"]].verdict.user != ""

    def test_invalid_status(self, client):
        items = client.get("/api/queues/adni/slant").json()["items"]
        response = client.post("/api/verdict", json={
            "item_id": items[0]["item_id"], "status": "bad", "user": "r"})
        assert response.status_code == 400

    def test_unknown_item(self, client):
        response = client.post("/api/verdict", json={
            "item_id": "x/y/z", "status": "no", "user": "r"})
        assert response.status_code == 404

    def test_read_only_instance_rejects(self, archive):
        writer = service.create_app(archive)
        reader = service.create_app(archive)
        try:
            with TestClient(writer) as wc, TestClient(reader) as rc:
                items = rc.get("/api/queues/adni/slant").json()["items"]
                denied = rc.post("/api/verdict", json={
                    "item_id": items[0]["item_id"], "status": "no",
                    "user": "r"})
                assert denied.status_code == 403
                allowed = wc.post("/api/verdict", json={
                    "item_id": items[0]["item_id"], "status": "no",
                    "user": "r"})
                assert allowed.status_code == 200
                # reader follows the on-disk change
                progress = rc.get("/api/progress/adni/slant").json()
                assert progress["counts"]["no"] == 1
        finally:
            writer.state.service.close()
            reader.state.service.close()

    def test_explicit_read_only_flag(self, archive):
        app = service.create_app(archive, read_only=True)
        try:
            with TestClient(app) as c:
                items = c.get("/api/queues/adni/slant").json()["items"]
                response = c.post("/api/verdict", json={
                    "item_id": items[0]["item_id"], "status": "no",
                    "user": "r"})
            assert response.status_code == 403
        finally:
            app.state.service.close()


class TestProgress:
    def test_fresh_queue_all_yes(self, client):
        progress = client.get("/api/progress/adni/slant").json()
        assert progress["counts"] == {"yes": 3, "no": 0, "maybe": 0}
        assert progress["last_activity"] is not None

    def test_read_your_writes(self, client):
        items = client.get("/api/queues/adni/slant").json()["items"]
        for item in items[:2]:
            client.post("/api/verdict", json={
                "item_id": item["item_id"], "status": "no", "user": "r"})
        progress = client.get("/api/progress/adni/slant").json()
        assert progress["counts"] == {"yes": 1, "no": 2, "maybe": 0}

    def test_unknown_queue(self, client):
        assert client.get("/api/progress/adni/none").status_code == 404

    def test_restart_loses_no_verdicts(self, archive):
        first = service.create_app(archive)
        with TestClient(first) as c:
            items = c.get("/api/queues/adni/slant").json()["items"]
            c.post("/api/verdict", json={"item_id": items[0]["item_id"],
                                         "status": "maybe", "user": "r"})
        first.state.service.close()
        second = service.create_app(archive)
        try:
            with TestClient(second) as c:
                progress = c.get("/api/progress/adni/slant").json()
            assert progress["counts"]["maybe"] == 1
        finally:
            second.state.service.close()


class TestByteLru:
    def test_eviction_by_size(self):
        cache = service.ByteLru(100)
        cache.put("a", b"x" * 60)
        cache.put("b", b"y" * 60)
        assert "a" not in cache and "b" in cache

    def test_lru_order(self):
        cache = service.ByteLru(100)
        cache.put("a", b"x" * 40)
        cache.put("b", b"y" * 40)
        cache.get("a")
        cache.put("c", b"z" * 40)
        assert "a" in cache and "b" not in cache

    def test_overwrite_updates_size(self):
        cache = service.ByteLru(100)
        cache.put("a", b"x" * 90)
        cache.put("a", b"y" * 10)
        assert cache.size == 10


class TestFallbackPage:
    def test_root_serves_html(self, client):
        response = client.get("/")
        assert response.status_code == 200
        assert "text/html" in response.headers["content-type"]
