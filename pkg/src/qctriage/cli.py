"""qct: one executable for the whole QC workflow.

Subcommands: scan (BIDS tree -> manifest), render (manifest + recipe ->
QC PNGs + initialized ledger), preflight (automated checks -> report),
serve (review HTTP service), aggregate (merge ledgers), stats (counts).

Exit codes are a stable scripting contract: 0 success, 1 partial (some
items failed), 2 usage or environment error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import bids, preflight, render, store

ENV_PREFIX = "QCT_"

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


class CliError(Exception):
    """Usage/environment failure; maps to exit code 2."""


@dataclass
class RunConfig:
    data_root: Path | None = None
    archive: Path | None = None
    recipes: Path | None = None
    workers: int = 0

    def __post_init__(self):
        if self.workers <= 0:
            self.workers = os.cpu_count() or 1
        if self.data_root and self.archive and \
                Path(self.data_root).resolve() == Path(self.archive).resolve():
            raise CliError("data root and QC archive must be distinct "
                           "directories")

    def need(self, name: str) -> Path:
        value = getattr(self, name)
        if value is None:
            flag = "--" + name.replace("_", "-")
            raise CliError(f"{flag} is required (or set "
                           f"{ENV_PREFIX}{name.upper()})")
        return Path(value)


def _env(name: str):
    return os.environ.get(ENV_PREFIX + name)


def manifest_path(archive: Path, dataset: str) -> Path:
    return archive / dataset / "manifest.json"


def cmd_scan(config: RunConfig, args) -> int:
    data_root = config.need("data_root")
    archive = config.need("archive")
    if not data_root.is_dir():
        raise CliError(f"data root {data_root} is not a readable directory")
    manifest = bids.scan_dataset(data_root)
    out = manifest_path(archive, manifest.dataset)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    print(f"{manifest.dataset}: {len(manifest.items)} item(s), "
          f"{len(manifest.exclusions)} exclusion(s) -> {out}")
    reasons: dict = {}
    for _, reason in manifest.exclusions:
        key = reason.split(":")[0]
        reasons[key] = reasons.get(key, 0) + 1
    for reason, count in sorted(reasons.items()):
        print(f"  excluded {count} ({reason})")
    return EXIT_OK


def _load_manifest(config: RunConfig, dataset: str | None) -> bids.Manifest:
    archive = config.need("archive")
    if dataset is None:
        dataset = config.need("data_root").name
    path = manifest_path(archive, dataset)
    if not path.exists():
        raise CliError(f"no manifest at {path}; run `qct scan` first")
    return bids.Manifest.load(path)


def render_target(item: bids.ManifestItem, data_root: Path,
                  dataset: str) -> render.RenderTarget:
    base, _ = bids.split_extension(item.image)
    ent = item.entities
    fields = {
        "base": base,
        "dataset": dataset,
        "sub": ent.subject,
        "ses": ent.session or "",
        "acq": ent.acquisition or "",
        "dir": ent.direction or "",
        "run": ent.run or "",
        "suffix": ent.suffix,
        "entities": ent.serialize(),
    }
    return render.RenderTarget(root=data_root, fields=fields)


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_render(config: RunConfig, args) -> int:
    data_root = config.need("data_root")
    archive = config.need("archive")
    recipes = config.need("recipes")
    manifest = _load_manifest(config, args.dataset)
    dataset = manifest.dataset
    pipeline = args.pipeline

    recipe_file = recipes / f"{pipeline}.recipe"
    if not recipe_file.exists():
        raise CliError(f"recipe {recipe_file} not found")
    recipe = render.load_recipe(recipe_file)

    def render_one(item: bids.ManifestItem):
        key = item.entities.serialize()
        rel_png = f"{dataset}/{pipeline}/{key}.png"
        out_path = archive / rel_png
        try:
            png = render.render_recipe(
                recipe, render_target(item, data_root, dataset))
        except render.MissingInputError as exc:
            return key, rel_png, "missing", str(exc)
        except Exception as exc:     # parse errors carry file context
            return key, rel_png, "error", f"{type(exc).__name__}: {exc}"
        if out_path.exists() and out_path.read_bytes() == png:
            return key, rel_png, "unchanged", ""
        _write_atomic(out_path, png)
        return key, rel_png, "rendered", ""

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        outcomes = list(pool.map(render_one, manifest.items))

    seeds, failures = [], 0
    by_key = {item.entities.serialize(): item for item in manifest.items}
    for key, rel_png, status, detail in outcomes:
        if status == "error":
            failures += 1
            print(f"  FAILED {key}: {detail}", file=sys.stderr)
            continue
        ent = by_key[key].entities
        seeds.append(store.ItemSeed(
            dataset=dataset, pipeline=pipeline, entity_key=key,
            entity_fields={"sub": ent.subject, "ses": ent.session or "",
                           "acq": ent.acquisition or "",
                           "run": ent.run or "", "suffix": ent.suffix},
            png_path=rel_png, missing=(status == "missing")))

    ledger_file = store.ledger_path(archive, dataset, pipeline)
    if seeds:
        if ledger_file.exists():
            table = store.ResultsTable.load(ledger_file)
            added = 0
            fresh = store.init_results(seeds)
            for item_id, row in fresh.rows.items():
                if item_id not in table.rows:
                    table.add(row)
                    added += 1
            if added:
                table.save(ledger_file)
        else:
            store.init_results(seeds).save(ledger_file)

    counts = {status: sum(1 for o in outcomes if o[2] == status)
              for status in ("rendered", "unchanged", "missing")}
    print(f"{dataset}/{pipeline}: {counts['rendered']} rendered, "
          f"{counts['unchanged']} unchanged, {counts['missing']} auto-failed, "
          f"{failures} failed")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_preflight(config: RunConfig, args) -> int:
    data_root = config.need("data_root")
    archive = config.need("archive")
    manifest = _load_manifest(config, args.dataset)
    checks = tuple(args.check) if args.check else preflight.DWI_CHECKS
    report = preflight.preflight_manifest(manifest, data_root, archive,
                                          args.pipeline, checks=checks)
    suspects = preflight.load_suspects(report)
    print(f"{manifest.dataset}/{args.pipeline}: {len(manifest.items)} "
          f"item(s) checked, {len(suspects)} suspect -> {report}")
    return EXIT_OK


def cmd_serve(config: RunConfig, args) -> int:
    import uvicorn

    from .service import create_app

    archive = config.need("archive")
    host, _, port = args.bind.rpartition(":")
    if not host or not port.isdigit():
        raise CliError(f"--bind must look like addr:port, got {args.bind!r}")
    app = create_app(archive, cache_mb=args.cache_mb,
                     read_only=args.read_only, static_dir=args.static)
    print(f"serving QC archive {archive} on http://{args.bind}/")
    uvicorn.run(app, host=host, port=int(port), log_level="warning")
    return EXIT_OK


def cmd_aggregate(config: RunConfig, args) -> int:
    archive = config.need("archive")
    ledgers = store.find_ledgers(archive)
    if not ledgers:
        raise CliError(f"no ledgers found under {archive}")
    merged = store.merge_results(
        [store.ResultsTable.load(path) for _, _, path in ledgers])
    merged.save(args.out)
    print(f"{len(ledgers)} ledger(s) -> {args.out} "
          f"({len(merged)} rows)")
    print(f"conflicts resolved: {merged.conflict_count}", file=sys.stderr)
    return EXIT_OK


def cmd_stats(config: RunConfig, args) -> int:
    archive = config.need("archive")
    ledgers = store.find_ledgers(archive)
    if not ledgers:
        print("no ledgers found")
        return EXIT_OK
    rows = []
    for dataset, pipeline, path in ledgers:
        summary = store.summarize(store.ResultsTable.load(path))
        counts = summary.counts
        rows.append((dataset, pipeline, counts["yes"], counts["no"],
                     counts["maybe"], summary.failure_rate))
    if args.csv:
        writer = csv.writer(sys.stdout)
        writer.writerow(["dataset", "pipeline", "yes", "no", "maybe",
                         "failure_rate"])
        for row in rows:
            writer.writerow([*row[:5], f"{row[5]:.4f}"])
    else:
        widths = (max(7, max(len(r[0]) for r in rows)),
                  max(8, max(len(r[1]) for r in rows)))
        print(f"{'dataset':<{widths[0]}}  {'pipeline':<{widths[1]}}  "
              f"{'yes':>6}  {'no':>6}  {'maybe':>6}  rate")
        for dataset, pipeline, yes, no, maybe, rate in rows:
            print(f"{dataset:<{widths[0]}}  {pipeline:<{widths[1]}}  "
                  f"{yes:>6}  {no:>6}  {maybe:>6}  {rate:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qct", description="QC triage for imaging pipeline outputs")
    parser.add_argument("--data-root", default=_env("DATA_ROOT"),
                        help="root of the BIDS-organized data")
    parser.add_argument("--archive", default=_env("ARCHIVE"),
                        help="QC archive directory (PNGs, ledgers, reports)")
    parser.add_argument("--recipes", default=_env("RECIPES"),
                        help="directory of per-pipeline .recipe files")
    parser.add_argument("--workers", type=int,
                        default=int(_env("WORKERS") or 0),
                        help="parallel workers (default: logical cores)")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("scan", help="walk the data root and write a manifest")

    p_render = sub.add_parser("render", help="render QC PNGs for a pipeline")
    p_render.add_argument("--dataset", default=None)
    p_render.add_argument("--pipeline", required=True)

    p_pre = sub.add_parser("preflight", help="run automated checks")
    p_pre.add_argument("--dataset", default=None)
    p_pre.add_argument("--pipeline", default="raw")
    p_pre.add_argument("--check", action="append",
                       choices=preflight.KNOWN_CHECKS,
                       help="check to run (repeatable; default: DWI checks)")

    p_serve = sub.add_parser("serve", help="start the review service")
    p_serve.add_argument("--bind", default="127.0.0.1:8080")
    p_serve.add_argument("--cache-mb", type=int, default=512)
    p_serve.add_argument("--read-only", action="store_true")
    p_serve.add_argument("--static", default=None,
                         help="directory of built frontend assets")

    p_agg = sub.add_parser("aggregate", help="merge all ledgers into one CSV")
    p_agg.add_argument("--out", required=True)

    p_stats = sub.add_parser("stats", help="per-pipeline counts and rates")
    p_stats.add_argument("--csv", action="store_true")
    return parser


COMMANDS = {
    "scan": cmd_scan,
    "render": cmd_render,
    "preflight": cmd_preflight,
    "serve": cmd_serve,
    "aggregate": cmd_aggregate,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = RunConfig(
            data_root=Path(args.data_root) if args.data_root else None,
            archive=Path(args.archive) if args.archive else None,
            recipes=Path(args.recipes) if args.recipes else None,
            workers=args.workers,
        )
        return COMMANDS[args.command](config, args)
    except CliError as exc:
        print(f"qct: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NotADirectoryError, FileNotFoundError) as exc:
        print(f"qct: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
