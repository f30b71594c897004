"""Tile iteration, overlap stitching, and the parallel tiled pipeline.

Windows of ``crop`` pixels advance by ``stride``; the final window clamps
to the image edge so coverage is complete. Overlaps resolve by last
writer in row-major window order for label rasters and by summation for
logit rasters. The tiled aggregation merges per-window results strictly
in window-index order, so output is bit-identical for any worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from typing import Optional, Sequence

import numpy as np

from .aggregate import AggregationResult, NucleusDecision, TeacherBundle, aggregate
from .config import RunConfig
from .raster import InstanceMap, connected_components
from .taxonomy import Taxonomy

WORKERS_ENV = "TMESEG_WORKERS"


@dataclass(frozen=True)
class TilePlan:
    crop: int = 384
    stride: int = 320
    halo: int = 0

    def __post_init__(self):
        if self.crop < 1:
            raise ValueError("crop must be >= 1")
        if not 1 <= self.stride <= self.crop:
            raise ValueError("stride must be in [1, crop]")
        if self.halo < 0:
            raise ValueError("halo must be >= 0")


@dataclass(frozen=True)
class Window:
    index: int
    y0: int
    x0: int
    height: int
    width: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return (
            slice(self.y0, self.y0 + self.height),
            slice(self.x0, self.x0 + self.width),
        )


def axis_offsets(extent: int, crop: int, stride: int) -> list[int]:
    """Window start offsets along one axis, final window clamped."""
    if extent <= crop:
        return [0]
    offsets = list(range(0, extent - crop + 1, stride))
    if offsets[-1] + crop < extent:
        offsets.append(extent - crop)
    return offsets


def iterate_tiles(shape: tuple[int, int], plan: Optional[TilePlan] = None) -> list[Window]:
    """Row-major windows covering an (height, width) extent.

    Extents smaller than the crop yield a single window of the full
    extent (processed as one tile).
    """
    plan = plan or TilePlan()
    h, w = shape
    if h < 1 or w < 1:
        raise ValueError("extent must be at least 1x1")
    windows = []
    for y0 in axis_offsets(h, plan.crop, plan.stride):
        for x0 in axis_offsets(w, plan.crop, plan.stride):
            windows.append(
                Window(
                    index=len(windows),
                    y0=y0,
                    x0=x0,
                    height=min(plan.crop, h),
                    width=min(plan.crop, w),
                )
            )
    return windows


def stitch_labels(
    tiles: Sequence[tuple[Window, np.ndarray]], shape: tuple[int, int]
) -> np.ndarray:
    """Last-writer stitching in window-index order."""
    first = tiles[0][1]
    canvas = np.zeros(shape, dtype=first.dtype)
    for win, tile in sorted(tiles, key=lambda t: t[0].index):
        canvas[win.slices] = tile
    return canvas


def stitch_logits(
    tiles: Sequence[tuple[Window, np.ndarray]], shape: tuple[int, int]
) -> np.ndarray:
    """Summation stitching for (C, h, w) logit tiles, fixed order."""
    channels = tiles[0][1].shape[0]
    canvas = np.zeros((channels,) + tuple(shape), dtype=np.float32)
    for win, tile in sorted(tiles, key=lambda t: t[0].index):
        canvas[(slice(None),) + win.slices] += tile
    return canvas


# ---------------------------------------------------------------------------
# Tiled aggregation
# ---------------------------------------------------------------------------


def crop_bundle(bundle: TeacherBundle, win: Window) -> TeacherBundle:
    """Window view of a bundle; candidates keep only in-window centers."""
    ys, xs = win.slices
    ids = bundle.nuclei.ids[ys, xs]
    types = {
        gid: a.teacher_type
        for gid, a in bundle.nuclei.attrs.items()
        if a.teacher_type is not None
    }
    cands = tuple(
        (x - win.x0, y - win.y0, s)
        for x, y, s in bundle.mitosis_candidates
        if win.x0 <= x < win.x0 + win.width and win.y0 <= y < win.y0 + win.height
    )
    return TeacherBundle(
        he=bundle.he[ys, xs],
        tissue_logits=bundle.tissue_logits.crop(win.y0, win.x0, win.height, win.width),
        cell_logits=bundle.cell_logits.crop(win.y0, win.x0, win.height, win.width),
        nuclei=InstanceMap.from_ids(ids, types),
        mitosis_candidates=cands,
        halo=0,
        mpp=bundle.mpp,
    )


def _claimed_ids(sub_ids: np.ndarray, win: Window, shape: tuple[int, int]) -> set[int]:
    """Nuclei fully owned by this window.

    A nucleus touching a window border is skipped unless that border is
    also the image border (it may extend into a neighboring window there).
    """
    h, w = shape
    border = []
    if win.y0 > 0:
        border.append(sub_ids[0, :])
    if win.y0 + win.height < h:
        border.append(sub_ids[-1, :])
    if win.x0 > 0:
        border.append(sub_ids[:, 0])
    if win.x0 + win.width < w:
        border.append(sub_ids[:, -1])
    present = set(np.unique(sub_ids).tolist()) - {0}
    if not border:
        return present
    touching = set(np.unique(np.concatenate(border)).tolist()) - {0}
    return present - touching


# Shared state for forked workers (copy-on-write; nothing is pickled).
_SHARED: Optional[tuple] = None


def _run_window(idx: int):
    bundle, config, taxonomy, windows, shape = _SHARED
    win = windows[idx]
    sub = crop_bundle(bundle, win)
    res = aggregate(sub, config, taxonomy, validate=False)
    claimed = _claimed_ids(sub.nuclei.ids, win, shape)
    classes = {gid: res.classes[gid] for gid in claimed}
    prov = {gid: res.provenance[gid] for gid in claimed}
    return idx, res.semantic, classes, prov, res.mitosis.ids > 0


def tiled_aggregate(
    bundle: TeacherBundle,
    config: Optional[RunConfig] = None,
    plan: Optional[TilePlan] = None,
    workers: Optional[int] = None,
    taxonomy: Optional[Taxonomy] = None,
) -> AggregationResult:
    """Aggregate window by window and stitch.

    Workers default to the TMESEG_WORKERS environment variable (else 1).
    Fan-out uses forked processes sharing the bundle read-only; results
    merge by window index, making output independent of scheduling.
    """
    global _SHARED
    cfg = config or RunConfig()
    plan = plan or TilePlan(crop=cfg.crop_px, stride=cfg.stride_px)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers < 1:
        raise ValueError("workers must be >= 1")
    bundle.validate(taxonomy)
    shape = (bundle.height, bundle.width)
    windows = iterate_tiles(shape, plan)

    _SHARED = (bundle, cfg, taxonomy, windows, shape)
    try:
        if workers == 1 or len(windows) == 1:
            results = [_run_window(i) for i in range(len(windows))]
        else:
            ctx = get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                results = list(pool.map(_run_window, range(len(windows))))
    finally:
        _SHARED = None

    results.sort(key=lambda r: r[0])
    semantic = np.zeros(shape, dtype=np.uint8)
    mito = np.zeros(shape, dtype=bool)
    classes: dict[int, Optional[int]] = {}
    provenance: dict[int, NucleusDecision] = {}
    for idx, sem, cls, prov, mit in results:
        win = windows[idx]
        semantic[win.slices] = sem
        mito[win.slices] |= mit
        classes.update(cls)
        provenance.update(prov)
    for gid in bundle.nuclei.instance_ids:
        classes.setdefault(gid, None)
        provenance.setdefault(gid, NucleusDecision(rule="unclaimed"))
    return AggregationResult(
        semantic=semantic,
        instances=bundle.nuclei,
        classes=classes,
        mitosis=connected_components(mito, 8),
        provenance=provenance,
    )
