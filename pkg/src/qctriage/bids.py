"""BIDS tree scanning, filename entities, gradient tables and pre-filtering.

Walks ``sub-*/[ses-*/](anat|dwi)/`` directories, parses filename entities
and bval/bvec sidecars, applies the initial keep/exclude/flag rules for
DWI scans, and emits a deterministic manifest of QC-able items.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti

# entity serialization order; ``dir`` sits in its BIDS-conventional slot
ENTITY_KEYS = ("sub", "ses", "acq", "dir", "run")

KNOWN_EXTENSIONS = (".nii.gz", ".nii", ".bval", ".bvec", ".json", ".png",
                    ".csv", ".tsv")

MIN_DWI_VOLUMES = 6
B0_THRESHOLD = 50.0   # s/mm^2; at or below this a scan direction may be zero


class BidsError(Exception):
    pass


class MissingSubjectError(BidsError):
    pass


class NoSuffixError(BidsError):
    pass


class DuplicateEntityError(BidsError):
    pass


class GradientError(Exception):
    pass


class CountMismatchError(GradientError):
    pass


class UnparseableNumberError(GradientError):
    pass


class EmptyFileError(GradientError):
    pass


@dataclass(frozen=True)
class EntityMap:
    """Parsed BIDS filename entities with order-normalized serialization."""

    subject: str
    suffix: str
    extension: str = ""
    dataset: str = ""
    session: str | None = None
    acquisition: str | None = None
    direction: str | None = None
    run: str | None = None

    def serialize(self, with_extension: bool = False) -> str:
        parts = [f"sub-{self.subject}"]
        for key, value in (("ses", self.session), ("acq", self.acquisition),
                           ("dir", self.direction), ("run", self.run)):
            if value is not None:
                parts.append(f"{key}-{value}")
        parts.append(self.suffix)
        name = "_".join(parts)
        return name + self.extension if with_extension else name

    def sort_key(self) -> tuple:
        return (self.subject, self.session or "", self.acquisition or "",
                self.direction or "", self.run or "", self.suffix)


def split_extension(filename: str) -> tuple[str, str]:
    for ext in KNOWN_EXTENSIONS:
        if filename.endswith(ext):
            return filename[: -len(ext)], ext
    dot = filename.rfind(".")
    if dot > 0:
        return filename[:dot], filename[dot:]
    return filename, ""


def parse_entities(filename: str, dataset: str = "") -> EntityMap:
    """Parse BIDS key-value tokens from a base filename.

    Tokens may appear in any order; the final underscore-delimited token
    before the extension is the suffix.
    """
    base, extension = split_extension(Path(filename).name)
    tokens = [t for t in base.split("_") if t]
    if not tokens:
        raise NoSuffixError(f"{filename}: empty name")

    suffix = tokens[-1]
    if "-" in suffix:
        raise NoSuffixError(f"{filename}: last token {suffix!r} is not a suffix")

    found: dict[str, str] = {}
    for token in tokens[:-1]:
        key, sep, value = token.partition("-")
        if not sep:
            raise BidsError(f"{filename}: token {token!r} is not key-value")
        if key in found:
            raise DuplicateEntityError(f"{filename}: duplicate entity {key!r}")
        found[key] = value

    if not found.get("sub"):
        raise MissingSubjectError(f"{filename}: no sub- entity")

    return EntityMap(
        subject=found["sub"],
        session=found.get("ses"),
        acquisition=found.get("acq"),
        direction=found.get("dir"),
        run=found.get("run"),
        suffix=suffix,
        extension=extension,
        dataset=dataset,
    )


@dataclass
class GradientTable:
    """Per-volume b-values (s/mm^2) and gradient directions."""

    bvals: np.ndarray
    bvecs: np.ndarray   # (N, 3)

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=float).ravel()
        self.bvecs = np.asarray(self.bvecs, dtype=float)
        if self.bvecs.ndim != 2 or self.bvecs.shape[1] != 3:
            raise CountMismatchError(
                f"bvecs shape {self.bvecs.shape} is not (N, 3)")
        if len(self.bvals) != len(self.bvecs):
            raise CountMismatchError(
                f"{len(self.bvals)} b-values vs {len(self.bvecs)} vectors")

    def __len__(self) -> int:
        return len(self.bvals)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.bvecs, axis=1)


def _parse_floats(text: str, path) -> list[float]:
    try:
        return [float(tok) for tok in text.split()]
    except ValueError as exc:
        raise UnparseableNumberError(f"{path}: {exc}") from exc


def load_gradients(bval_path, bvec_path) -> GradientTable:
    """Parse bval/bvec sidecars into a positionally paired table.

    bvec files come as either 3 rows of N columns (FSL layout) or N rows
    of 3 columns; 3x3 is treated as 3 rows of 3.
    """
    bval_text = Path(bval_path).read_text()
    bvec_text = Path(bvec_path).read_text()
    if not bval_text.strip():
        raise EmptyFileError(f"{bval_path} is empty")
    if not bvec_text.strip():
        raise EmptyFileError(f"{bvec_path} is empty")

    bvals = _parse_floats(bval_text, bval_path)

    rows = [_parse_floats(line, bvec_path)
            for line in bvec_text.splitlines() if line.strip()]
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise UnparseableNumberError(f"{bvec_path}: ragged rows {sorted(lengths)}")
    arr = np.array(rows, dtype=float)
    if arr.shape[0] == 3:
        bvecs = arr.T
    elif arr.shape[1] == 3:
        bvecs = arr
    else:
        raise UnparseableNumberError(
            f"{bvec_path}: shape {arr.shape} has no axis of length 3")

    return GradientTable(bvals=np.asarray(bvals), bvecs=bvecs)


@dataclass(frozen=True)
class FilterDecision:
    action: str          # keep | exclude | flag
    reason: str = ""
    rule: str = ""       # which reverse-PE detection rule fired, if any


@dataclass
class ScanCandidate:
    """One image file as seen by the pre-filter."""

    path: Path
    entities: EntityMap
    n_volumes: int
    bval_path: Path | None = None
    bvec_path: Path | None = None
    phase_encoding: str | None = None

    @property
    def is_dwi(self) -> bool:
        return self.entities.suffix.lower() == "dwi"

    def session_key(self) -> tuple[str, str]:
        return (self.entities.subject, self.entities.session or "")


def _opposite_pe(a: str, b: str) -> bool:
    a, b = a.strip(), b.strip()
    if not a or not b:
        return False
    return (a == b + "-") or (b == a + "-")


_RPE_MARKERS = ("rpe", "rev")
_PE_PAIR = {"pa": "ap", "ap": "pa"}


def _entity_rpe_rule(item: ScanCandidate, kept: ScanCandidate) -> str | None:
    for value in (item.entities.acquisition, item.entities.direction):
        if value is None:
            continue
        low = value.lower()
        if any(marker in low for marker in _RPE_MARKERS):
            return "entity_rpe"
        opposite = _PE_PAIR.get(low)
        if opposite is not None:
            for other in (kept.entities.acquisition, kept.entities.direction):
                if other is None or other.lower() == opposite:
                    return "entity_pair"
    return None


def prefilter(item: ScanCandidate, context: list[ScanCandidate]) -> FilterDecision:
    """Initial keep/exclude/flag decision for a DWI candidate.

    Scans with fewer than MIN_DWI_VOLUMES volumes are excluded unless they
    are the reverse-phase-encoding companion of a kept scan in the same
    subject/session. Kept DWIs without both gradient sidecars are flagged
    so the operator can chase the missing files.
    """
    if item.n_volumes >= MIN_DWI_VOLUMES:
        if item.is_dwi and (item.bval_path is None or item.bvec_path is None):
            return FilterDecision("flag", reason="missing_gradients")
        return FilterDecision("keep")

    companions = [c for c in context
                  if c is not item and c.is_dwi
                  and c.session_key() == item.session_key()
                  and c.n_volumes >= MIN_DWI_VOLUMES]
    for kept in companions:
        if item.phase_encoding and kept.phase_encoding and \
                _opposite_pe(item.phase_encoding, kept.phase_encoding):
            return FilterDecision("keep", rule="json_pedir")
        rule = _entity_rpe_rule(item, kept)
        if rule:
            return FilterDecision("keep", rule=rule)
    return FilterDecision("exclude", reason="too_few_volumes")


@dataclass
class ManifestItem:
    entities: EntityMap
    image: str                       # path relative to the dataset root
    sidecars: dict = field(default_factory=dict)
    flags: tuple = ()
    notes: str = ""
    pipeline: str = ""               # placeholder, assigned at render time

    def item_key(self) -> str:
        return self.entities.serialize()


@dataclass
class Manifest:
    dataset: str
    root: str
    items: list = field(default_factory=list)
    exclusions: list = field(default_factory=list)   # (relative path, reason)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "root": self.root,
            "items": [
                {
                    "entities": item.entities.serialize(with_extension=True),
                    "image": item.image,
                    "sidecars": item.sidecars,
                    "flags": list(item.flags),
                    "notes": item.notes,
                }
                for item in self.items
            ],
            "exclusions": [list(e) for e in self.exclusions],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Manifest":
        manifest = cls(dataset=payload["dataset"], root=payload["root"])
        for entry in payload["items"]:
            entities = parse_entities(entry["entities"], manifest.dataset)
            manifest.items.append(ManifestItem(
                entities=entities,
                image=entry["image"],
                sidecars=dict(entry["sidecars"]),
                flags=tuple(entry["flags"]),
                notes=entry["notes"],
            ))
        manifest.exclusions = [tuple(e) for e in payload["exclusions"]]
        return manifest

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2,
                                         sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _sidecar_paths(image_path: Path) -> dict:
    base, _ = split_extension(image_path.name)
    out = {}
    for kind, ext in (("bval", ".bval"), ("bvec", ".bvec"), ("json", ".json")):
        candidate = image_path.parent / (base + ext)
        if candidate.exists():
            out[kind] = candidate
    return out


def _phase_encoding(json_path: Path | None) -> str | None:
    if json_path is None:
        return None
    try:
        payload = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError):
        return None
    value = payload.get("PhaseEncodingDirection")
    return value if isinstance(value, str) else None


def scan_dataset(root) -> Manifest:
    """Walk a BIDS tree and build the manifest of QC-able items.

    Unreadable or malformed files become exclusions with a reason; the
    scan itself never aborts on a bad file. Output ordering is a pure
    function of tree content.
    """
    root = Path(root)
    if not root.is_dir():
        raise NotADirectoryError(str(root))
    dataset = root.name
    manifest = Manifest(dataset=dataset, root=str(root))

    patterns = ("sub-*/anat/*", "sub-*/dwi/*",
                "sub-*/ses-*/anat/*", "sub-*/ses-*/dwi/*")
    images = sorted(
        p for pattern in patterns for p in root.glob(pattern)
        if p.is_file() and p.name.endswith((".nii", ".nii.gz")))

    candidates: list[ScanCandidate] = []
    for path in images:
        rel = str(path.relative_to(root))
        try:
            entities = parse_entities(path.name, dataset)
        except BidsError as exc:
            manifest.exclusions.append((rel, f"bad_name: {exc}"))
            continue
        try:
            header = nifti.load_header(path)
        except nifti.NiftiError as exc:
            manifest.exclusions.append((rel, f"unreadable: {exc}"))
            continue
        sidecars = _sidecar_paths(path)
        candidates.append(ScanCandidate(
            path=path,
            entities=entities,
            n_volumes=header.time_points,
            bval_path=sidecars.get("bval"),
            bvec_path=sidecars.get("bvec"),
            phase_encoding=_phase_encoding(sidecars.get("json")),
        ))

    seen: set[str] = set()
    for cand in candidates:
        rel = str(cand.path.relative_to(root))
        key = cand.entities.serialize()
        if key in seen:
            manifest.exclusions.append((rel, "duplicate_entities"))
            continue

        flags, notes = (), ""
        if cand.is_dwi:
            decision = prefilter(cand, candidates)
            if decision.action == "exclude":
                manifest.exclusions.append((rel, decision.reason))
                continue
            if decision.action == "flag":
                flags = (decision.reason,)
            if decision.rule:
                notes = f"kept_by:{decision.rule}"

        seen.add(key)
        manifest.items.append(ManifestItem(
            entities=cand.entities,
            image=rel,
            sidecars={k: str(v.relative_to(root))
                      for k, v in _sidecar_paths(cand.path).items()},
            flags=flags,
            notes=notes,
        ))

    manifest.items.sort(key=lambda item: item.entities.sort_key())
    manifest.exclusions.sort()
    return manifest
