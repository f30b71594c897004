"""TMEF1 stack container: a minimal bit-exact raster file format.

Layout: a little-endian u32 header length, a UTF-8 JSON header, then the
channel planes concatenated row-major in little-endian byte order. The
header carries ``{"magic": "TMEF1", "width", "height", "dtype", "channels",
"mpp"?, "halo"?, "meta"?}`` with dtype one of f32 / u8 / u32. Round-trips
are lossless; f32 payloads must be finite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .raster import InstanceMap, LogitStack
from .taxonomy import Taxonomy, default_taxonomy

MAGIC = "TMEF1"

_DTYPES = {"f32": "<f4", "u8": "|u1", "u32": "<u4"}
_NATIVE = {"f32": np.float32, "u8": np.uint8, "u32": np.uint32}


class ContainerError(ValueError):
    """Malformed TMEF1 data."""


class MagicError(ContainerError):
    pass


class DtypeError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class PayloadValueError(ContainerError):
    pass


@dataclass
class StackContainer:
    channels: tuple[str, ...]
    planes: np.ndarray  # (C, H, W), native dtype
    dtype: str
    mpp: Optional[float] = None
    halo: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = tuple(str(c) for c in self.channels)
        if self.dtype not in _DTYPES:
            raise DtypeError(f"unknown dtype {self.dtype!r}; expected f32/u8/u32")
        self.planes = np.ascontiguousarray(self.planes, dtype=_NATIVE[self.dtype])
        if self.planes.ndim != 3 or self.planes.shape[0] != len(self.channels):
            raise ContainerError("planes must be (C, H, W) with one name per channel")
        if not self.channels:
            raise ContainerError("at least one channel required")
        if len(set(self.channels)) != len(self.channels):
            raise ContainerError("channel names must be distinct")

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def header(self) -> dict:
        doc = {
            "magic": MAGIC,
            "width": self.width,
            "height": self.height,
            "dtype": self.dtype,
            "channels": list(self.channels),
        }
        if self.mpp is not None:
            doc["mpp"] = self.mpp
        if self.halo is not None:
            doc["halo"] = self.halo
        if self.meta:
            doc["meta"] = self.meta
        return doc


def save_stack(container: StackContainer, path: str | Path) -> None:
    header = json.dumps(container.header(), sort_keys=True).encode("utf-8")
    payload = container.planes.astype(_DTYPES[container.dtype], copy=False).tobytes(
        order="C"
    )
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_stack(path: str | Path) -> StackContainer:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than the header length field")
    (hlen,) = struct.unpack("<I", blob[:4])
    if len(blob) < 4 + hlen:
        raise TruncatedPayloadError(f"{path}: truncated header (need {hlen} bytes)")
    try:
        header = json.loads(blob[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header: {exc}") from exc
    if header.get("magic") != MAGIC:
        raise MagicError(f"{path}: bad magic {header.get('magic')!r}; expected {MAGIC!r}")
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise DtypeError(f"{path}: unknown dtype {dtype!r}; expected f32/u8/u32")
    channels = header.get("channels") or []
    width = int(header.get("width", 0))
    height = int(header.get("height", 0))
    if width < 1 or height < 1 or not channels:
        raise ContainerError(f"{path}: header must declare width, height, channels")
    item = np.dtype(_DTYPES[dtype]).itemsize
    expected = width * height * len(channels) * item
    actual = len(blob) - 4 - hlen
    if actual != expected:
        raise TruncatedPayloadError(
            f"{path}: expected {expected} payload bytes, found {actual}"
        )
    raw = np.frombuffer(blob, dtype=_DTYPES[dtype], offset=4 + hlen)
    planes = raw.reshape(len(channels), height, width).astype(
        _NATIVE[dtype], copy=True
    )
    if dtype == "f32" and not np.isfinite(planes).all():
        raise PayloadValueError(f"{path}: f32 payload contains NaN or Inf")
    return StackContainer(
        channels=tuple(channels),
        planes=planes,
        dtype=dtype,
        mpp=header.get("mpp"),
        halo=header.get("halo"),
        meta=header.get("meta", {}),
    )


# ---------------------------------------------------------------------------
# Typed adapters
# ---------------------------------------------------------------------------


def container_from_logits(
    stack: LogitStack,
    taxonomy: Optional[Taxonomy] = None,
    mpp: Optional[float] = None,
    halo: Optional[int] = None,
) -> StackContainer:
    tax = taxonomy or default_taxonomy()
    names = tuple(tax.name_of(c) for c in stack.class_ids)
    return StackContainer(names, stack.planes, "f32", mpp=mpp, halo=halo)


def logits_from_container(
    container: StackContainer, taxonomy: Optional[Taxonomy] = None
) -> LogitStack:
    """Resolve channel names against the vocabulary (raises on unknowns)."""
    tax = taxonomy or default_taxonomy()
    ids = tuple(tax.resolve(name) for name in container.channels)
    return LogitStack(ids, container.planes)


def container_from_labels(
    labels: np.ndarray, mpp: Optional[float] = None
) -> StackContainer:
    return StackContainer(("labels",), labels[None, :, :], "u8", mpp=mpp)


def labels_from_container(container: StackContainer) -> np.ndarray:
    if container.dtype != "u8" or container.channels != ("labels",):
        raise ContainerError("not a label raster container")
    return container.planes[0]


def container_from_mask(mask: np.ndarray, mpp: Optional[float] = None) -> StackContainer:
    return StackContainer(("mask",), mask.astype(np.uint8)[None, :, :], "u8", mpp=mpp)


def container_from_rgb(he: np.ndarray, mpp: Optional[float] = None) -> StackContainer:
    if he.ndim != 3 or he.shape[2] != 3 or he.dtype != np.uint8:
        raise ContainerError("RGB tile must be (H, W, 3) uint8")
    return StackContainer(("r", "g", "b"), np.moveaxis(he, 2, 0), "u8", mpp=mpp)


def rgb_from_container(container: StackContainer) -> np.ndarray:
    if container.dtype != "u8" or container.channels != ("r", "g", "b"):
        raise ContainerError("not an RGB tile container")
    return np.ascontiguousarray(np.moveaxis(container.planes, 0, 2))


def container_from_instances(
    imap: InstanceMap, mpp: Optional[float] = None
) -> StackContainer:
    types = {
        str(gid): a.teacher_type
        for gid, a in imap.attrs.items()
        if a.teacher_type is not None
    }
    return StackContainer(
        ("instance_ids",),
        imap.ids.astype(np.uint32)[None, :, :],
        "u32",
        mpp=mpp,
        meta={"teacher_types": types} if types else {},
    )


def instances_from_container(container: StackContainer) -> InstanceMap:
    if container.dtype != "u32" or container.channels != ("instance_ids",):
        raise ContainerError("not an instance map container")
    types_doc = container.meta.get("teacher_types", {})
    types = {int(k): int(v) for k, v in types_doc.items()}
    return InstanceMap.from_ids(container.planes[0].astype(np.int32), types)


# ---------------------------------------------------------------------------
# Bundle manifest: one JSON document referencing the per-part containers
# ---------------------------------------------------------------------------

BUNDLE_PARTS = ("he", "tissue_logits", "cell_logits", "nuclei")


def save_bundle(bundle, out_dir: str | Path, taxonomy: Optional[Taxonomy] = None) -> Path:
    """Write a teacher bundle as four containers plus a JSON manifest.

    Returns the manifest path (``bundle.json``); part paths inside the
    manifest are relative to its directory.
    """
    tax = taxonomy or default_taxonomy()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_stack(container_from_rgb(bundle.he, bundle.mpp), out_dir / "he.tmef")
    save_stack(
        container_from_logits(bundle.tissue_logits, tax, bundle.mpp, bundle.halo),
        out_dir / "tissue_logits.tmef",
    )
    save_stack(
        container_from_logits(bundle.cell_logits, tax, bundle.mpp, bundle.halo),
        out_dir / "cell_logits.tmef",
    )
    save_stack(container_from_instances(bundle.nuclei, bundle.mpp), out_dir / "nuclei.tmef")
    manifest = {
        "he": "he.tmef",
        "tissue_logits": "tissue_logits.tmef",
        "cell_logits": "cell_logits.tmef",
        "nuclei": "nuclei.tmef",
        "candidates": [list(c) for c in bundle.mitosis_candidates],
        "mpp": bundle.mpp,
        "halo": bundle.halo,
    }
    path = out_dir / "bundle.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def bundle_part_paths(manifest_path: str | Path) -> dict[str, Path]:
    """Resolve the manifest's part files relative to its directory."""
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    missing = [k for k in BUNDLE_PARTS if k not in doc]
    if missing:
        raise ContainerError(f"bundle manifest missing keys {missing}")
    return {k: manifest_path.parent / doc[k] for k in BUNDLE_PARTS}


def load_bundle(manifest_path: str | Path, taxonomy: Optional[Taxonomy] = None):
    """Load a teacher bundle from its JSON manifest."""
    from .aggregate import TeacherBundle  # deferred: aggregate is a heavier import

    tax = taxonomy or default_taxonomy()
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    parts = bundle_part_paths(manifest_path)
    return TeacherBundle(
        he=rgb_from_container(load_stack(parts["he"])),
        tissue_logits=logits_from_container(load_stack(parts["tissue_logits"]), tax),
        cell_logits=logits_from_container(load_stack(parts["cell_logits"]), tax),
        nuclei=instances_from_container(load_stack(parts["nuclei"])),
        mitosis_candidates=tuple(tuple(c) for c in doc.get("candidates", [])),
        halo=int(doc.get("halo") or 0),
        mpp=float(doc.get("mpp") or 0.25),
    )
