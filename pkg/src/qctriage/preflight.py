"""Automated pre-flight checks that flag suspect outputs before review.

Checks are advisory: a flag marks the item "suspect" in the review queue
so a human can prioritize it, but never records a verdict — the ledger is
owned by visual review alone.

The signal-decay check fits log median intensity against b-value: diffusion
weighting attenuates signal as S = S0 * exp(-b * d), so shell medians must
fall as b rises and the fitted slope gives an effective diffusivity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bids, nifti
from .store import make_item_id

B0_MAX = 50.0                  # s/mm^2, at or below counts as b0
UNIT_NORM_TOL = 0.01
FOREGROUND_FRACTION = 0.10     # of the b0 maximum
MONOTONE_SLACK = 1.05          # Rician floor can flatten the high-b tail
TENSOR_B_MAX = 1500.0          # shells above this are excluded from the fit
RANGE_EPS = 0.01               # tolerated numeric spill outside [0, 1]
RANGE_BAD_FRACTION = 0.005
SYMMETRY_TOL = 1e-6
DIAGONAL_FACTOR = 2.0
COV_MAX = 1.0

SCALAR_KINDS = ("fa_map", "noddi_map", "cortical_thickness_mean",
                "bundle_mean_fa")

PASS, FLAG, NOT_APPLICABLE = "pass", "flag", "not_applicable"


class PreflightError(Exception):
    pass


class AllBackgroundError(PreflightError):
    pass


class UnknownKindError(PreflightError):
    pass


class NotSquareError(PreflightError):
    pass


class EmptyInputError(PreflightError):
    pass


@dataclass
class CheckResult:
    check_name: str
    status: str
    metric: float
    threshold: float
    detail: str = ""

    def __post_init__(self):
        if self.status == FLAG and not self.detail:
            raise ValueError("a flag result must explain itself in detail")


@dataclass
class DecayFit:
    s0_log: float
    d_eff: float                      # mm^2/s
    shells: list                      # [(b, median intensity)] ascending


@dataclass
class Connectome:
    matrix: np.ndarray
    weighting: str = "nos"            # nos | mean_fa | other

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2 or \
                self.matrix.shape[0] != self.matrix.shape[1]:
            raise NotSquareError(f"matrix shape {self.matrix.shape}")

    @property
    def region_count(self) -> int:
        return self.matrix.shape[0]


def shell_group(bvals, tol: float = 50.0) -> list:
    """Cluster b-values into shells by single-linkage with gap ``tol``.

    Returns [(shell_b, member_indices)] ascending; shell_b is the rounded
    mean of its members.
    """
    bvals = np.asarray(bvals, dtype=float).ravel()
    if bvals.size == 0:
        raise EmptyInputError("no b-values")
    if tol <= 0:
        raise ValueError("tol must be positive")
    order = np.argsort(bvals, kind="stable")
    shells = []
    current = [order[0]]
    for idx in order[1:]:
        if bvals[idx] - bvals[current[-1]] > tol:
            shells.append(current)
            current = [idx]
        else:
            current.append(idx)
    shells.append(current)
    return [(int(round(float(np.mean(bvals[m])))), sorted(int(i) for i in m))
            for m in shells]


def _foreground_mask(dwi: np.ndarray, bvals: np.ndarray) -> np.ndarray:
    b0_indices = np.flatnonzero(bvals <= B0_MAX)
    ref_index = int(b0_indices[0]) if b0_indices.size else int(np.argmin(bvals))
    reference = dwi[..., ref_index]
    peak = reference.max()
    mask = reference > FOREGROUND_FRACTION * peak
    if peak <= 0 or not mask.any():
        raise AllBackgroundError("foreground mask is empty")
    return mask


def check_signal_decay(dwi: nifti.Volume, grads: bids.GradientTable
                       ) -> tuple[CheckResult, DecayFit | None]:
    """Median intensity must decay with b-value (exponential attenuation)."""
    data = dwi.data
    if data.ndim != 4:
        raise PreflightError(f"expected a 4D volume, got shape {data.shape}")
    if data.shape[3] != len(grads):
        raise bids.CountMismatchError(
            f"{data.shape[3]} volumes vs {len(grads)} gradient entries")

    mask = _foreground_mask(data, grads.bvals)
    volume_medians = np.array([np.median(data[..., t][mask])
                               for t in range(data.shape[3])])
    shells = shell_group(grads.bvals)
    shell_medians = [(b, float(np.median(volume_medians[members])))
                     for b, members in shells]

    if len(shell_medians) < 2:
        return (CheckResult("signal_decay", NOT_APPLICABLE, 0.0, 0.0,
                            detail="fewer than 2 shells"), None)

    bs = np.array([b for b, _ in shell_medians], dtype=float)
    medians = np.array([m for _, m in shell_medians])

    problems = []
    if (medians <= 0).any():
        problems.append("nonpositive shell median")
        slope, intercept = 0.0, 0.0
    else:
        fit_mask = bs <= TENSOR_B_MAX
        if fit_mask.sum() < 2:
            fit_mask = np.ones_like(fit_mask)    # degenerate cutoff: use all
        slope, intercept = np.polyfit(bs[fit_mask], np.log(medians[fit_mask]), 1)
        if slope >= 0:
            problems.append(f"non-negative decay slope {slope:.3g}")
        steps = medians[1:] > MONOTONE_SLACK * medians[:-1]
        if steps.any():
            first = int(np.flatnonzero(steps)[0])
            problems.append(
                f"median rises from shell b={bs[first]:.0f} "
                f"({medians[first]:.4g}) to b={bs[first + 1]:.0f} "
                f"({medians[first + 1]:.4g})")

    fit = DecayFit(s0_log=float(intercept), d_eff=float(-slope),
                   shells=shell_medians)
    if problems:
        return (CheckResult("signal_decay", FLAG, float(slope), 0.0,
                            detail="; ".join(problems)), fit)
    return (CheckResult("signal_decay", PASS, float(slope), 0.0,
                        detail=f"d_eff={-slope:.4g} mm^2/s"), fit)


def check_bvec_norms(grads: bids.GradientTable) -> CheckResult:
    """Diffusion directions must be unit vectors (zero allowed at b0)."""
    norms = grads.norms()
    weighted = grads.bvals > B0_MAX
    deviations = np.where((~weighted) & (norms == 0), 0.0, np.abs(norms - 1.0))
    bad = deviations > UNIT_NORM_TOL
    metric = float(deviations.max()) if len(deviations) else 0.0
    if bad.any():
        worst = int(np.argmax(deviations))
        return CheckResult(
            "bvec_norms", FLAG, metric, UNIT_NORM_TOL,
            detail=f"{int(bad.sum())} direction(s) off unit norm; worst "
                   f"entry {worst} has |g|={norms[worst]:.4g} "
                   f"at b={grads.bvals[worst]:.0f}")
    return CheckResult("bvec_norms", PASS, metric, UNIT_NORM_TOL)


def _map_values(map_or_value) -> np.ndarray:
    if isinstance(map_or_value, nifti.Volume):
        return map_or_value.data
    return np.asarray(map_or_value, dtype=float)


def check_scalar_range(map_or_value, kind: str) -> CheckResult:
    """Numeric expectations for derived scalar maps.

    fa_map / noddi_map: values live in [0, 1]; flag if more than 0.5% of
    foreground (nonzero) voxels spill outside. cortical_thickness_mean:
    mean must land in 2-4 mm. bundle_mean_fa: value must land in 0.4-0.9.
    """
    if kind not in SCALAR_KINDS:
        raise UnknownKindError(kind)
    name = f"range_{kind}"

    if kind in ("fa_map", "noddi_map"):
        values = _map_values(map_or_value)
        foreground = values[values != 0]
        if foreground.size == 0:
            return CheckResult(name, NOT_APPLICABLE, 0.0, RANGE_BAD_FRACTION,
                               detail="no foreground voxels")
        outside = (foreground < -RANGE_EPS) | (foreground > 1 + RANGE_EPS)
        fraction = float(outside.mean())
        if fraction > RANGE_BAD_FRACTION:
            return CheckResult(name, FLAG, fraction, RANGE_BAD_FRACTION,
                               detail=f"{fraction:.2%} of foreground voxels "
                                      f"outside [0, 1]")
        return CheckResult(name, PASS, fraction, RANGE_BAD_FRACTION)

    values = _map_values(map_or_value)
    if values.ndim == 0:
        metric = float(values)
    else:
        foreground = values[values != 0]
        if foreground.size == 0:
            return CheckResult(name, NOT_APPLICABLE, 0.0, 0.0,
                               detail="no foreground voxels")
        metric = float(foreground.mean())

    low, high = (2.0, 4.0) if kind == "cortical_thickness_mean" else (0.4, 0.9)
    if low <= metric <= high:
        return CheckResult(name, PASS, metric, low)
    bound = high if metric > high else low
    unit = "mm" if kind == "cortical_thickness_mean" else ""
    return CheckResult(name, FLAG, metric, bound,
                       detail=f"mean {metric:.3g}{unit} outside "
                              f"[{low}, {high}]")


def check_connectome(connectome: Connectome) -> CheckResult:
    """Connectomes must be symmetric; NOS needs a dominant diagonal and
    mean-FA a reasonably homogeneous weight distribution."""
    matrix = connectome.matrix
    if connectome.region_count < 2:
        raise NotSquareError("need at least a 2x2 connectome")

    scale = float(np.abs(matrix).max())
    asymmetry = 0.0 if scale == 0 else \
        float(np.abs(matrix - matrix.T).max() / scale)
    if asymmetry > SYMMETRY_TOL:
        return CheckResult("connectome", FLAG, asymmetry, SYMMETRY_TOL,
                           detail=f"asymmetric: max|M-M^T|/max|M| = "
                                  f"{asymmetry:.3g}")

    if connectome.weighting == "nos":
        diagonal = np.median(np.diag(matrix))
        off = matrix[~np.eye(connectome.region_count, dtype=bool)]
        positive_off = off[off > 0]
        if positive_off.size == 0:
            ratio = np.inf
        else:
            ratio = float(diagonal / np.median(positive_off))
        if ratio < DIAGONAL_FACTOR:
            return CheckResult("connectome", FLAG, ratio, DIAGONAL_FACTOR,
                               detail=f"weak diagonal: median(diag) / "
                                      f"median(off+) = {ratio:.3g} < "
                                      f"{DIAGONAL_FACTOR}")
        metric = ratio if np.isfinite(ratio) else 0.0
        return CheckResult("connectome", PASS, metric, DIAGONAL_FACTOR)

    if connectome.weighting == "mean_fa":
        positive = matrix[matrix > 0]
        if positive.size:
            cov = float(positive.std() / positive.mean())
            if cov > COV_MAX:
                return CheckResult("connectome", FLAG, cov, COV_MAX,
                                   detail=f"inhomogeneous weights: "
                                          f"CoV {cov:.3g} > {COV_MAX}")
    return CheckResult("connectome", PASS, asymmetry, SYMMETRY_TOL)


def mad_outliers(values, k: float = 3.0) -> list:
    """Indices deviating from the median by more than k median absolute
    deviations; with MAD 0, everything off the median is flagged."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise EmptyInputError("no values")
    center = np.median(values)
    deviation = np.abs(values - center)
    mad = np.median(deviation)
    if mad == 0:
        flagged = deviation > 0
    else:
        flagged = deviation > k * mad
    return [int(i) for i in np.flatnonzero(flagged)]


def load_connectome(path, weighting: str = "nos") -> Connectome:
    """Plain-text square matrix, comma- or whitespace-delimited, with an
    optional header row of region labels."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise EmptyInputError(f"{path} is empty")

    def tokens(line):
        return line.replace(",", " ").split()

    rows = []
    for i, line in enumerate(lines):
        try:
            rows.append([float(t) for t in tokens(line)])
        except ValueError:
            if i == 0:
                continue            # header row of region labels
            raise PreflightError(f"{path}: unparseable row {i + 1}")
    return Connectome(matrix=np.array(rows), weighting=weighting)


# --- per-item driver ---------------------------------------------------------

DWI_CHECKS = ("signal_decay", "bvec_norms")
RANGE_CHECKS = tuple(f"range_{kind}" for kind in SCALAR_KINDS)
KNOWN_CHECKS = DWI_CHECKS + RANGE_CHECKS


class _ItemInputs:
    """Lazy, memoized access to one item's volume and gradient table."""

    def __init__(self, item: bids.ManifestItem, data_root: Path):
        self.item = item
        self.data_root = data_root
        self._volume = self._grads = None
        self._volume_error = self._grads_error = None

    def volume(self):
        if self._volume is None and self._volume_error is None:
            try:
                self._volume = nifti.load_volume(
                    self.data_root / self.item.image)
            except (nifti.NiftiError, OSError) as exc:
                self._volume_error = str(exc)
        return self._volume, self._volume_error

    def gradients(self):
        if self._grads is None and self._grads_error is None:
            if not {"bval", "bvec"} <= set(self.item.sidecars):
                self._grads_error = "missing gradient sidecars"
            else:
                try:
                    self._grads = bids.load_gradients(
                        self.data_root / self.item.sidecars["bval"],
                        self.data_root / self.item.sidecars["bvec"])
                except (bids.GradientError, OSError) as exc:
                    self._grads_error = str(exc)
        return self._grads, self._grads_error


def run_preflight(item: bids.ManifestItem, data_root,
                  checks=DWI_CHECKS) -> list:
    """Run the configured checks on one manifest item.

    DWI checks on non-DWI items come back not_applicable; an unreadable
    input flags only the checks that need it, carrying the parse error.
    Range checks (range_fa_map, range_noddi_map, ...) treat the item's
    image as the map under test.
    """
    inputs = _ItemInputs(item, Path(data_root))
    is_dwi = item.entities.suffix.lower() == "dwi"
    results = []
    for name in checks:
        if name not in KNOWN_CHECKS:
            raise UnknownKindError(name)
        try:
            if name in DWI_CHECKS:
                if not is_dwi:
                    results.append(CheckResult(name, NOT_APPLICABLE, 0.0, 0.0,
                                               detail="not a DWI item"))
                    continue
                grads, grads_error = inputs.gradients()
                if name == "bvec_norms":
                    if grads_error:
                        results.append(CheckResult(name, FLAG, 0.0, 0.0,
                                                   detail=grads_error))
                    else:
                        results.append(check_bvec_norms(grads))
                    continue
                volume, volume_error = inputs.volume()
                error = volume_error or grads_error
                if error:
                    results.append(CheckResult(name, FLAG, 0.0, 0.0,
                                               detail=error))
                else:
                    results.append(check_signal_decay(volume, grads)[0])
            else:
                kind = name[len("range_"):]
                volume, volume_error = inputs.volume()
                if volume_error:
                    results.append(CheckResult(name, FLAG, 0.0, 0.0,
                                               detail=volume_error))
                else:
                    results.append(check_scalar_range(volume.data, kind))
        except (PreflightError, bids.GradientError) as exc:
            results.append(CheckResult(name, FLAG, 0.0, 0.0, detail=str(exc)))
    return results


REPORT_COLUMNS = ["item_id", "check_name", "status", "metric", "threshold",
                  "detail"]
REPORT_SUFFIX = "__preflight.csv"


def report_path(archive_root, dataset: str, pipeline: str) -> Path:
    return Path(archive_root) / f"{dataset}__{pipeline}{REPORT_SUFFIX}"


def append_report(path, item_id: str, results) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists()
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(REPORT_COLUMNS)
        for result in results:
            writer.writerow([item_id, result.check_name, result.status,
                             str(float(result.metric)),
                             str(float(result.threshold)), result.detail])


def load_suspects(path) -> set:
    """item_ids with at least one flagged check in a preflight report."""
    path = Path(path)
    if not path.exists():
        return set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return {record["item_id"] for record in csv.DictReader(fh)
                if record["status"] == FLAG}


def preflight_manifest(manifest: bids.Manifest, data_root, archive_root,
                       pipeline: str, checks=DWI_CHECKS) -> Path:
    """Run checks across a manifest, appending to the pipeline's report."""
    path = report_path(archive_root, manifest.dataset, pipeline)
    for item in manifest.items:
        results = run_preflight(item, data_root, checks)
        item_id = make_item_id(manifest.dataset, pipeline,
                               item.entities.serialize())
        append_report(path, item_id, results)
    return path
