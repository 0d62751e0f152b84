"""Deterministic QC PNG rendering.

Every pipeline gets one declarative recipe describing how to turn its
outputs into a QC image: triplanar slices of a windowed volume, label
overlays, side-by-side comparisons, axial grids, or stitching of
pre-rasterized pages. The whole path — slice selection, windowing,
composition, PNG encoding — is a pure function of the recipe and input
bytes, so reruns produce byte-identical files.

Internally images are float arrays in [0, 1], (H, W) gray or (H, W, 3)
RGB; quantization to uint8 happens once at encode time.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti, pngio
from .font import draw_text

GUTTER = 2
PLANES = ("sagittal", "coronal", "axial")
MODES = ("triplanar_gray", "triplanar_overlay", "side_by_side",
         "axial_grid", "stitch_pages")

GOLDEN_CONJUGATE = 0.6180339887498949


class RenderError(Exception):
    pass


class EmptyImageError(RenderError):
    pass


class SizeMismatchError(RenderError):
    pass


class NotCanonicalError(RenderError):
    pass


class EmptyGridError(RenderError):
    pass


class MissingInputError(RenderError):
    """A recipe pattern matched no file; the item is an automatic failure."""


class RecipeError(RenderError):
    pass


@dataclass
class RenderRecipe:
    name: str
    base_pattern: str
    mode: str = "triplanar_gray"
    overlay_pattern: str | None = None
    slice_fractions: tuple = (0.25, 0.5, 0.75)
    overlay_alpha: float = 0.5
    window_percentiles: tuple = (1.0, 99.0)
    panel_labels: tuple | None = None
    frame: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise RecipeError(f"unknown mode {self.mode!r}")
        fr = tuple(float(f) for f in self.slice_fractions)
        if not fr or any(not 0 < f < 1 for f in fr) or list(fr) != sorted(set(fr)):
            raise RecipeError(
                f"slice_fractions must be strictly increasing in (0,1): {fr}")
        self.slice_fractions = fr
        if not 0 <= self.overlay_alpha <= 1:
            raise RecipeError(f"overlay_alpha {self.overlay_alpha} outside [0,1]")
        low, high = (float(p) for p in self.window_percentiles)
        if not low < high:
            raise RecipeError(f"window_percentiles must satisfy low < high: "
                              f"({low}, {high})")
        self.window_percentiles = (low, high)


_RECIPE_PARSERS = {
    "name": str,
    "base_pattern": str,
    "overlay_pattern": str,
    "mode": str,
    "slice_fractions": lambda v: tuple(float(x) for x in v.split(",")),
    "overlay_alpha": float,
    "window_percentiles": lambda v: tuple(float(x) for x in v.split(",")),
    "panel_labels": lambda v: tuple(x.strip() for x in v.split(",")),
    "frame": int,
}


def parse_recipe(text: str, source: str = "<recipe>") -> RenderRecipe:
    """Parse a ``key = value`` recipe document; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise RecipeError(f"{source}:{lineno}: expected 'key = value'")
        key, value = key.strip(), value.strip()
        if key not in _RECIPE_PARSERS:
            raise RecipeError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise RecipeError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _RECIPE_PARSERS[key](value)
        except ValueError as exc:
            raise RecipeError(f"{source}:{lineno}: bad value for {key}: {exc}")
    for required in ("name", "base_pattern"):
        if required not in values:
            raise RecipeError(f"{source}: missing required key {required!r}")
    return RenderRecipe(**values)


def load_recipe(path) -> RenderRecipe:
    path = Path(path)
    return parse_recipe(path.read_text(), source=str(path))


def window_intensity(image: np.ndarray, p_low: float, p_high: float) -> np.ndarray:
    """Rescale to [0, 1] between the given intensity percentiles.

    Percentiles use linear interpolation between order statistics; a
    constant image maps to all zeros.
    """
    if not p_low < p_high:
        raise ValueError(f"need p_low < p_high, got ({p_low}, {p_high})")
    arr = np.asarray(image, dtype=float)
    if arr.size == 0:
        raise EmptyImageError("cannot window an empty image")
    lo, hi = np.percentile(arr, [p_low, p_high])
    if hi == lo:
        return np.zeros_like(arr)
    return np.clip((arr - lo) / (hi - lo), 0.0, 1.0)


def slice_index(fraction: float, length: int) -> int:
    # round half up, so fraction 0.5 of an even axis picks the upper middle
    return int(np.floor(fraction * (length - 1) + 0.5))


def extract_slice(volume: nifti.Volume, plane: str, fraction: float) -> np.ndarray:
    """One 2D slice of a canonical 3D volume.

    Returns the raw in-plane array (no display flips): axial -> (nx, ny),
    coronal -> (nx, nz), sagittal -> (ny, nz). Display orientation is a
    uniform transform applied at composition time.
    """
    if not volume.canonical:
        raise NotCanonicalError("volume must pass canonical_orient first")
    data = volume.data
    if data.ndim != 3:
        raise RenderError(f"expected a 3D volume, got shape {data.shape}")
    if not 0 < fraction < 1:
        raise ValueError(f"fraction {fraction} outside (0, 1)")
    if plane == "axial":
        return data[:, :, slice_index(fraction, data.shape[2])]
    if plane == "coronal":
        return data[:, slice_index(fraction, data.shape[1]), :]
    if plane == "sagittal":
        return data[slice_index(fraction, data.shape[0]), :, :]
    raise ValueError(f"unknown plane {plane!r}")


def to_display(slice2d: np.ndarray) -> np.ndarray:
    """Uniform slice-to-image transform (superior/anterior up, radiological)."""
    arr = np.asarray(slice2d)
    if arr.ndim == 3:
        return np.flip(np.transpose(arr, (1, 0, 2)), axis=(0, 1))
    return np.flip(arr.T, axis=(0, 1))


def default_lut(label: int) -> tuple:
    """Deterministic, visually distinct color for a positive label."""
    hue = (label * GOLDEN_CONJUGATE) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.8, 0.9)


def overlay_labels(base: np.ndarray, labels: np.ndarray, lut=default_lut,
                   alpha: float = 0.5) -> np.ndarray:
    """Blend a label map over a grayscale image; label 0 is transparent."""
    base = np.asarray(base, dtype=float)
    labels = np.asarray(labels)
    if base.shape != labels.shape:
        raise SizeMismatchError(
            f"base {base.shape} vs labels {labels.shape}")
    getter = lut if callable(lut) else lut.__getitem__
    out = np.repeat(base[..., None], 3, axis=2)
    for value in np.unique(labels):
        value = int(value)
        if value == 0:
            continue
        mask = labels == value
        color = np.asarray(getter(value), dtype=float)
        out[mask] = (1 - alpha) * out[mask] + alpha * color
    return np.clip(out, 0.0, 1.0)


def _to_rgb(image: np.ndarray) -> np.ndarray:
    return image if image.ndim == 3 else np.repeat(image[..., None], 3, axis=2)


def compose_panels(panels, labels=None) -> np.ndarray:
    """Tile a grid of images onto one canvas.

    Smaller images are letterboxed (centered, black background) to the
    common tile size; 2-pixel gutters separate tiles and frame the canvas.
    Optional labels are stamped into the top-left of each tile, row-major.
    """
    rows = [list(r) for r in panels]
    if not rows or any(not r for r in rows):
        raise EmptyGridError("panel grid is empty")
    cells = [np.asarray(c, dtype=float) for r in rows for c in r]
    rgb = any(c.ndim == 3 for c in cells)
    tile_h = max(c.shape[0] for c in cells)
    tile_w = max(c.shape[1] for c in cells)
    n_rows, n_cols = len(rows), max(len(r) for r in rows)

    height = n_rows * tile_h + (n_rows + 1) * GUTTER
    width = n_cols * tile_w + (n_cols + 1) * GUTTER
    canvas = np.zeros((height, width, 3) if rgb else (height, width))

    index = 0
    for i, row in enumerate(rows):
        for j, cell in enumerate(row):
            cell = np.asarray(cell, dtype=float)
            if rgb:
                cell = _to_rgb(cell)
            top = GUTTER + i * (tile_h + GUTTER) + (tile_h - cell.shape[0]) // 2
            left = GUTTER + j * (tile_w + GUTTER) + (tile_w - cell.shape[1]) // 2
            canvas[top:top + cell.shape[0], left:left + cell.shape[1]] = cell
            if labels and index < len(labels) and labels[index]:
                tile_top = GUTTER + i * (tile_h + GUTTER)
                tile_left = GUTTER + j * (tile_w + GUTTER)
                draw_text(canvas, str(labels[index]),
                          tile_top + 2, tile_left + 2, value=1.0)
            index += 1
    return canvas


def stitch_pages(pages) -> np.ndarray:
    """Concatenate raster pages vertically; narrower pages centered on black."""
    pages = [np.asarray(p, dtype=float) for p in pages]
    if not pages:
        raise RenderError("no pages to stitch")
    rgb = any(p.ndim == 3 for p in pages)
    width = max(p.shape[1] for p in pages)
    height = sum(p.shape[0] for p in pages)
    canvas = np.zeros((height, width, 3) if rgb else (height, width))
    top = 0
    for page in pages:
        if rgb:
            page = _to_rgb(page)
        left = (width - page.shape[1]) // 2
        canvas[top:top + page.shape[0], left:left + page.shape[1]] = page
        top += page.shape[0]
    return canvas


@dataclass
class RenderTarget:
    """Where a recipe's patterns are resolved and what they may reference."""

    root: Path
    fields: dict = field(default_factory=dict)

    def resolve(self, pattern: str) -> list[Path]:
        class _Defaulting(dict):
            def __missing__(self, key):
                return ""

        expanded = pattern.format_map(_Defaulting(self.fields))
        return sorted(self.root.glob(expanded))


def _load_canonical(path, frame: int) -> nifti.Volume:
    volume = nifti.canonical_orient(nifti.load_volume(path))
    return volume.frame(frame) if volume.data.ndim == 4 else volume


def _resolve_one(recipe: RenderRecipe, target: RenderTarget,
                 pattern: str) -> Path:
    matches = target.resolve(pattern)
    if not matches:
        raise MissingInputError(
            f"recipe {recipe.name!r}: pattern {pattern!r} matched nothing "
            f"under {target.root}")
    return matches[0]


def _triplanar_grid(volume: nifti.Volume, recipe: RenderRecipe,
                    overlay: nifti.Volume | None = None) -> list:
    low, high = recipe.window_percentiles
    grid = []
    for plane in PLANES:
        row = []
        for fraction in recipe.slice_fractions:
            cell = window_intensity(extract_slice(volume, plane, fraction),
                                    low, high)
            if overlay is not None:
                labels = np.rint(extract_slice(overlay, plane, fraction))
                cell = overlay_labels(cell, labels.astype(int),
                                      alpha=recipe.overlay_alpha)
            row.append(to_display(cell))
        grid.append(row)
    return grid


def render_recipe(recipe: RenderRecipe, target: RenderTarget) -> bytes:
    """Run a recipe against one item's files and return PNG bytes."""
    if recipe.mode == "stitch_pages":
        matches = target.resolve(recipe.base_pattern)
        if not matches:
            raise MissingInputError(
                f"recipe {recipe.name!r}: pattern {recipe.base_pattern!r} "
                f"matched nothing under {target.root}")
        pages = [pngio.decode_png(p.read_bytes()) / 255.0 for p in matches]
        canvas = stitch_pages(pages)
    elif recipe.mode == "axial_grid":
        matches = target.resolve(recipe.base_pattern)
        if not matches:
            raise MissingInputError(
                f"recipe {recipe.name!r}: pattern {recipe.base_pattern!r} "
                f"matched nothing under {target.root}")
        low, high = recipe.window_percentiles
        grid = []
        for path in matches:
            volume = _load_canonical(path, recipe.frame)
            grid.append([
                to_display(window_intensity(
                    extract_slice(volume, "axial", fr), low, high))
                for fr in recipe.slice_fractions])
        canvas = compose_panels(grid, labels=recipe.panel_labels)
    elif recipe.mode == "triplanar_gray":
        volume = _load_canonical(
            _resolve_one(recipe, target, recipe.base_pattern), recipe.frame)
        canvas = compose_panels(_triplanar_grid(volume, recipe))
    elif recipe.mode == "triplanar_overlay":
        if not recipe.overlay_pattern:
            raise RecipeError(f"recipe {recipe.name!r}: triplanar_overlay "
                              f"needs overlay_pattern")
        volume = _load_canonical(
            _resolve_one(recipe, target, recipe.base_pattern), recipe.frame)
        overlay = _load_canonical(
            _resolve_one(recipe, target, recipe.overlay_pattern), recipe.frame)
        if volume.data.shape != overlay.data.shape:
            raise SizeMismatchError(
                f"base {volume.data.shape} vs overlay {overlay.data.shape}")
        canvas = compose_panels(_triplanar_grid(volume, recipe, overlay))
    elif recipe.mode == "side_by_side":
        if not recipe.overlay_pattern:
            raise RecipeError(f"recipe {recipe.name!r}: side_by_side needs "
                              f"overlay_pattern for the right-hand volume")
        left = _load_canonical(
            _resolve_one(recipe, target, recipe.base_pattern), recipe.frame)
        right = _load_canonical(
            _resolve_one(recipe, target, recipe.overlay_pattern), recipe.frame)
        panels = [compose_panels(_triplanar_grid(left, recipe)),
                  compose_panels(_triplanar_grid(right, recipe))]
        canvas = compose_panels([panels], labels=recipe.panel_labels)
    else:  # pragma: no cover - rejected in RenderRecipe.__post_init__
        raise RecipeError(f"unknown mode {recipe.mode!r}")

    return pngio.encode_png(quantize(canvas))


def quantize(image: np.ndarray) -> np.ndarray:
    """Float [0,1] image to uint8, round-half-away like conventional scaling."""
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)
