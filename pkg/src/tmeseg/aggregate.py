"""Teacher-aggregation pipeline: fuse tissue/cell logits, nucleus instances,
and mitosis candidates into one panoptic label mask.

Stages, in fixed order:

1. background from Otsu on the Gaussian-smoothed H&E tile
2. tissue labels (smooth muscle / epithelial tissue contest, red blood
   cell overlay, stroma remainder)
3. per-pixel hierarchical cell classification inside nuclei, then a
   per-nucleus majority vote
4. fallback rules for still-undefined nuclei
5. mitosis candidate filtering and nucleus supersedence
6. final mask combination (nucleus classes paint over tissue labels)

Everything is deterministic: identical bundles give bit-identical results.
A structurally separate per-pixel reference of the same rules lives in
``reference.py`` and is used as the test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .raster import (
    InstanceMap,
    LogitStack,
    check_rgb_tile,
    connected_components,
    contours,
    convex_hull,
    gaussian_smooth,
    grayscale,
    otsu_threshold,
    rasterize_hull,
)
from .taxonomy import Taxonomy, default_taxonomy

# Channel rosters the two teacher stacks must carry, by class name.
TISSUE_CHANNELS = ("smooth_muscle", "epithelial_tissue", "red_blood_cell")
CELL_CHANNELS = (
    "leukocyte",
    "endothelial_cell",
    "red_blood_cell",
    "lymphocyte",
    "plasma_cell",
    "myeloid_cell",
    "eosinophil",
    "neutrophil",
    "smooth_muscle",
    "epithelial_tissue",
)

# Internal sentinel for "no class"; the public API uses None.
UNDEFINED = -1


# ---------------------------------------------------------------------------
# Bundle and result containers
# ---------------------------------------------------------------------------


@dataclass
class TeacherBundle:
    """All teacher outputs for one tile.

    ``mitosis_candidates`` holds (x, y, score) triples; x is the column.
    Candidates may fall inside the declared halo just outside the tile.
    """

    he: np.ndarray
    tissue_logits: LogitStack
    cell_logits: LogitStack
    nuclei: InstanceMap
    mitosis_candidates: tuple = ()
    halo: int = 0
    mpp: float = 0.25

    def __post_init__(self):
        self.mitosis_candidates = tuple(
            (float(x), float(y), float(s)) for x, y, s in self.mitosis_candidates
        )

    @property
    def height(self) -> int:
        return self.he.shape[0]

    @property
    def width(self) -> int:
        return self.he.shape[1]

    def validate(self, taxonomy: Optional[Taxonomy] = None) -> None:
        tax = taxonomy or default_taxonomy()
        check_rgb_tile(self.he)
        h, w = self.he.shape[:2]
        for name, stack, wanted in (
            ("tissue_logits", self.tissue_logits, TISSUE_CHANNELS),
            ("cell_logits", self.cell_logits, CELL_CHANNELS),
        ):
            if (stack.height, stack.width) != (h, w):
                raise ValueError(f"{name} does not share the H&E dimensions")
            want_ids = {tax.resolve(n) for n in wanted}
            have_ids = set(stack.class_ids)
            if have_ids != want_ids:
                missing = sorted(tax.name_of(c) for c in want_ids - have_ids)
                extra = sorted(tax.name_of(c) for c in have_ids - want_ids)
                raise ValueError(
                    f"{name} channel mismatch: missing {missing}, unexpected {extra}"
                )
            stack.require_finite()
        if self.nuclei.ids.shape != (h, w):
            raise ValueError("nuclei do not share the H&E dimensions")
        self.nuclei.validate()
        for x, y, score in self.mitosis_candidates:
            if not (
                -self.halo <= x < w + self.halo and -self.halo <= y < h + self.halo
            ):
                raise ValueError(
                    f"candidate ({x}, {y}) outside tile plus halo {self.halo}"
                )
            if not 0.0 <= score <= 1.0:
                raise ValueError("candidate score must lie in [0, 1]")


@dataclass
class NucleusDecision:
    """How one nucleus got its final class."""

    rule: str  # vote | fallback_epithelial | fallback_fibroblast | mitosis | undefined
    votes: dict[int, int] = field(default_factory=dict)  # UNDEFINED key = -1
    level_fired: tuple[int, int, int, int] = (0, 0, 0, 0)


@dataclass
class AggregationResult:
    semantic: np.ndarray  # (H, W) uint8 class ids
    instances: InstanceMap
    classes: dict[int, Optional[int]]  # nucleus id -> final class (None undefined)
    mitosis: InstanceMap
    provenance: dict[int, NucleusDecision]

    def check_invariants(self, taxonomy: Optional[Taxonomy] = None) -> None:
        tax = taxonomy or default_taxonomy()
        mit = tax.resolve("mitotic_cell")
        ids = self.instances.ids
        mit_hit = self.mitosis.ids > 0
        for gid in self.instances.instance_ids:
            cls = self.classes[gid]
            where = ids == gid
            if cls is not None and not (self.semantic[where] == cls).all():
                raise AssertionError(f"nucleus {gid}: semantic/instance class mismatch")
            if (mit_hit & where).any() and cls != mit:
                raise AssertionError(f"nucleus {gid}: mitosis supersedence violated")


# ---------------------------------------------------------------------------
# Stage 1+2: tissue segmentation
# ---------------------------------------------------------------------------


def background_mask(
    he: np.ndarray, config: Optional[RunConfig] = None
) -> tuple[np.ndarray, int]:
    """Glass mask (True = background) and the threshold used."""
    cfg = config or RunConfig()
    gray = grayscale(gaussian_smooth(he, cfg.blur_sigma))
    t = cfg.background_threshold
    if t is None:
        t = otsu_threshold(gray)
    return gray > t, t


def tissue_segmentation(
    bundle: TeacherBundle,
    config: Optional[RunConfig] = None,
    taxonomy: Optional[Taxonomy] = None,
) -> np.ndarray:
    """Label every pixel background / smooth_muscle / epithelial_tissue /
    red_blood_cell / stroma.

    Non-background pixels contest between smooth muscle and epithelium
    where either logit is positive (larger wins, tie to the lower id);
    positive red-blood-cell logits overlay both; the rest is stroma.
    """
    tax = taxonomy or default_taxonomy()
    sm_id = tax.resolve("smooth_muscle")
    epi_id = tax.resolve("epithelial_tissue")
    rbc_id = tax.resolve("red_blood_cell")
    str_id = tax.resolve("stroma")
    bg_id = tax.resolve("background")

    sm = bundle.tissue_logits.plane(sm_id)
    epi = bundle.tissue_logits.plane(epi_id)
    rbc = bundle.tissue_logits.plane(rbc_id)

    labels = np.full(sm.shape, str_id, dtype=np.uint8)
    contested = (sm > 0) | (epi > 0)
    winner = np.where(epi > sm, np.uint8(epi_id), np.uint8(sm_id))
    labels[contested] = winner[contested]
    labels[rbc > 0] = rbc_id
    bg, _ = background_mask(bundle.he, config)
    labels[bg] = bg_id
    return labels


# ---------------------------------------------------------------------------
# Stage 3: hierarchical per-pixel classification and nucleus voting
# ---------------------------------------------------------------------------


def _hierarchy_plan(
    logits: LogitStack, tax: Taxonomy
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per level: (stack-plane indices, class ids), both ascending by id."""
    plan = []
    index = {c: i for i, c in enumerate(logits.class_ids)}
    for level_ids in tax.levels:
        ids = sorted(level_ids)
        try:
            rows = [index[c] for c in ids]
        except KeyError:
            missing = [tax.name_of(c) for c in ids if c not in index]
            raise ValueError(f"logit stack missing hierarchy channels {missing}")
        plan.append((np.asarray(rows), np.asarray(ids, dtype=np.int16)))
    return plan


def _classify_pixels(
    logits: LogitStack, rows: np.ndarray, cols: np.ndarray, tax: Taxonomy
) -> tuple[np.ndarray, np.ndarray]:
    """Walk hierarchy levels 1..4 at the given pixels.

    Returns (labels, fired): labels is int16 with UNDEFINED where no level
    produced a positive winner; fired is (4, N) bool marking override hits.
    At each level the winning channel is the argmax (ties to the lowest
    class id); it overrides the running label only when positive.
    """
    n = rows.size
    labels = np.full(n, UNDEFINED, dtype=np.int16)
    fired = np.zeros((4, n), dtype=bool)
    if n == 0:
        return labels, fired
    vals = logits.planes[:, rows, cols]  # (C, N) float32
    for lvl, (plane_rows, ids) in enumerate(_hierarchy_plan(logits, tax)):
        sub = vals[plane_rows]  # (k, N)
        win = np.argmax(sub, axis=0)  # first max -> lowest id
        winval = np.take_along_axis(sub, win[None, :], axis=0)[0]
        pos = winval > 0
        labels[pos] = ids[win[pos]]
        fired[lvl] = pos
    return labels, fired


def _vote(counts_defined: np.ndarray, count_undef: np.ndarray) -> np.ndarray:
    """Majority vote per row; undefined wins only a strict plurality.

    ``counts_defined`` is (M, 10) for class ids 2..11 ascending; returns
    int16 class ids with UNDEFINED where undefined wins.
    """
    max_def = counts_defined.max(axis=1)
    winner = (np.argmax(counts_defined, axis=1) + 2).astype(np.int16)
    return np.where(count_undef > max_def, np.int16(UNDEFINED), winner)


def classify_nucleus(
    rows: np.ndarray,
    cols: np.ndarray,
    logits: LogitStack,
    taxonomy: Optional[Taxonomy] = None,
) -> tuple[Optional[int], NucleusDecision]:
    """Classify one nucleus given its pixel coordinates.

    Returns (class id or None, decision record with vote counts and the
    per-level override hit counts).
    """
    tax = taxonomy or default_taxonomy()
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.size == 0:
        raise ValueError("nucleus pixel set is empty")
    labels, fired = _classify_pixels(logits, rows, cols, tax)
    counts = np.bincount(labels + 1, minlength=13)  # slot 0 = undefined
    cls = int(_vote(counts[None, 3:13], counts[None, 0])[0])
    votes = {int(c) - 1: int(n) for c, n in enumerate(counts) if n}
    decision = NucleusDecision(
        rule="vote" if cls != UNDEFINED else "undefined",
        votes=votes,
        level_fired=tuple(int(f.sum()) for f in fired),
    )
    return (None if cls == UNDEFINED else cls), decision


# ---------------------------------------------------------------------------
# Stage 4: fallback rules
# ---------------------------------------------------------------------------


def fallback_rules(
    nuclei: InstanceMap,
    classes: dict[int, Optional[int]],
    tissue: np.ndarray,
    taxonomy: Optional[Taxonomy] = None,
) -> tuple[dict[int, Optional[int]], dict[int, str]]:
    """Resolve undefined nuclei from tissue context.

    A nucleus with more than half its pixels on epithelial tissue becomes
    epithelial_cell_nucleus; one with more than half on stroma whose
    teacher type is fibroblast (teacher name `connective`) becomes
    fibroblast. Everything else stays undefined.
    """
    tax = taxonomy or default_taxonomy()
    epi = tax.resolve("epithelial_tissue")
    stro = tax.resolve("stroma")
    epi_n = tax.resolve("epithelial_cell_nucleus")
    fib = tax.resolve("fibroblast")

    out = dict(classes)
    rules: dict[int, str] = {}
    undef = [g for g, c in classes.items() if c is None]
    if not undef:
        return out, rules
    ids = nuclei.ids
    m = int(ids.max()) + 1
    inside = ids > 0
    nid = ids[inside]
    tis = tissue[inside]
    cnt_epi = np.bincount(nid[tis == epi], minlength=m)
    cnt_str = np.bincount(nid[tis == stro], minlength=m)
    for gid in undef:
        total = nuclei.attrs[gid].pixel_count
        if 2 * int(cnt_epi[gid]) > total:
            out[gid] = epi_n
            rules[gid] = "fallback_epithelial"
        elif 2 * int(cnt_str[gid]) > total and nuclei.attrs[gid].teacher_type == fib:
            out[gid] = fib
            rules[gid] = "fallback_fibroblast"
    return out, rules


# ---------------------------------------------------------------------------
# Stage 5: mitosis detection and supersedence
# ---------------------------------------------------------------------------


def detect_mitosis(
    candidates: Sequence[tuple],
    he: np.ndarray,
    tissue: np.ndarray,
    config: Optional[RunConfig] = None,
    taxonomy: Optional[Taxonomy] = None,
    score_threshold: float = 0.0,
) -> InstanceMap:
    """Filter mitosis candidates into a mask of hull regions.

    Per candidate: clip a circular ROI at the tile border; reject when the
    ROI's median RGB sum is <= the carbon-dust bound; Otsu the ROI grays
    and keep the dark side; keep 8-connected blobs (holes filled) of at
    least the minimum area; rasterize each blob's convex hull; keep hulls
    overlapping epithelial tissue by at least one pixel. Region ids are
    assigned over the union in raster-scan order.
    """
    cfg = config or RunConfig()
    tax = taxonomy or default_taxonomy()
    epi = tax.resolve("epithelial_tissue")
    check_rgb_tile(he)
    h, w = he.shape[:2]
    gray = grayscale(he)
    rgb_sum = he.astype(np.int32).sum(axis=2)
    union = np.zeros((h, w), dtype=bool)
    r = cfg.mitosis_roi_radius_px
    for x, y, score in candidates:
        if score < score_threshold:
            continue
        y0 = max(int(np.ceil(y - r)), 0)
        y1 = min(int(np.floor(y + r)), h - 1)
        x0 = max(int(np.ceil(x - r)), 0)
        x1 = min(int(np.floor(x + r)), w - 1)
        if y0 > y1 or x0 > x1:
            continue
        gy, gx = np.meshgrid(
            np.arange(y0, y1 + 1), np.arange(x0, x1 + 1), indexing="ij"
        )
        circle = (gy - y) ** 2 + (gx - x) ** 2 <= float(r) * float(r)
        if not circle.any():
            continue
        box = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        if np.median(rgb_sum[box][circle]) <= cfg.carbon_rgb_sum_max:
            continue  # carbon dust
        t = otsu_threshold(gray[box][circle])
        dark = circle & (gray[box] <= t)
        epi_box = tissue[box] == epi
        for blob in contours(dark):
            if blob.area < cfg.mitosis_min_area_px:
                continue
            # hull in (x, y) order over the blob's filled pixels
            hull = convex_hull(blob.pixels[:, ::-1])
            region = rasterize_hull(hull, (x1 - x0 + 1, y1 - y0 + 1))
            if (region & epi_box).any():
                union[box] |= region
    return connected_components(union, 8)


def apply_mitosis(
    classes: dict[int, Optional[int]],
    nuclei: InstanceMap,
    mitosis: InstanceMap,
    taxonomy: Optional[Taxonomy] = None,
) -> tuple[dict[int, Optional[int]], list[int]]:
    """Reassign every nucleus intersecting the mitosis mask to mitotic_cell."""
    tax = taxonomy or default_taxonomy()
    mit = tax.resolve("mitotic_cell")
    hit_ids = np.unique(nuclei.ids[(nuclei.ids > 0) & (mitosis.ids > 0)])
    out = dict(classes)
    for gid in hit_ids.tolist():
        out[gid] = mit
    return out, [int(g) for g in hit_ids.tolist()]


# ---------------------------------------------------------------------------
# Stage 6: full composition
# ---------------------------------------------------------------------------


def aggregate(
    bundle: TeacherBundle,
    config: Optional[RunConfig] = None,
    taxonomy: Optional[Taxonomy] = None,
    validate: bool = True,
) -> AggregationResult:
    """Run the whole pipeline on one bundle."""
    cfg = config or RunConfig()
    tax = taxonomy or default_taxonomy()
    if validate:
        bundle.validate(tax)

    tissue = tissue_segmentation(bundle, cfg, tax)

    ids = bundle.nuclei.ids
    inside = ids > 0
    rows, cols = np.nonzero(inside)
    nid = ids[rows, cols]
    labels, fired = _classify_pixels(bundle.cell_logits, rows, cols, tax)

    gids = bundle.nuclei.instance_ids
    m = (int(ids.max()) + 1) if gids else 1
    key = nid.astype(np.int64) * 16 + (labels.astype(np.int64) + 1)
    counts = np.bincount(key, minlength=m * 16).reshape(m, 16)
    voted = _vote(counts[:, 3:13], counts[:, 0])
    fired_per = [
        np.bincount(nid[fired[lvl]], minlength=m) for lvl in range(4)
    ]

    classes: dict[int, Optional[int]] = {}
    provenance: dict[int, NucleusDecision] = {}
    for gid in gids:
        cls = int(voted[gid])
        votes = {
            int(slot) - 1: int(n)
            for slot, n in enumerate(counts[gid])
            if n
        }
        provenance[gid] = NucleusDecision(
            rule="vote" if cls != UNDEFINED else "undefined",
            votes=votes,
            level_fired=tuple(int(f[gid]) for f in fired_per),
        )
        classes[gid] = None if cls == UNDEFINED else cls

    classes, fb_rules = fallback_rules(bundle.nuclei, classes, tissue, tax)
    for gid, rule in fb_rules.items():
        provenance[gid].rule = rule

    mitosis = detect_mitosis(bundle.mitosis_candidates, bundle.he, tissue, cfg, tax)
    classes, mit_ids = apply_mitosis(classes, bundle.nuclei, mitosis, tax)
    for gid in mit_ids:
        provenance[gid].rule = "mitosis"

    semantic = tissue.copy()
    if gids:
        lut = np.full(m, UNDEFINED, dtype=np.int16)
        for gid, cls in classes.items():
            if cls is not None:
                lut[gid] = cls
        painted = lut[ids]
        keep = painted >= 0
        semantic[keep] = painted[keep].astype(np.uint8)

    return AggregationResult(
        semantic=semantic,
        instances=bundle.nuclei,
        classes=classes,
        mitosis=mitosis,
        provenance=provenance,
    )
