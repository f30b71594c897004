import json
import struct

import numpy as np
import pytest

from tmeseg.container import (
    ContainerError,
    DtypeError,
    MagicError,
    PayloadValueError,
    StackContainer,
    TruncatedPayloadError,
    container_from_instances,
    container_from_labels,
    container_from_logits,
    container_from_rgb,
    instances_from_container,
    labels_from_container,
    load_bundle,
    load_stack,
    logits_from_container,
    rgb_from_container,
    save_bundle,
    save_stack,
)
from tmeseg.raster import InstanceMap, LogitStack
from tmeseg.synth import build_bundle, random_scene
from tmeseg.taxonomy import UnknownClassError, default_taxonomy

TAX = default_taxonomy()


def _write(tmp_path, container, name="stack.tmef"):
    path = tmp_path / name
    save_stack(container, path)
    return path


@pytest.mark.parametrize(
    "dtype,maker",
    [
        ("f32", lambda rng: rng.normal(size=(3, 5, 7)).astype(np.float32)),
        ("u8", lambda rng: rng.integers(0, 256, size=(2, 5, 7)).astype(np.uint8)),
        ("u32", lambda rng: rng.integers(0, 9, size=(1, 5, 7)).astype(np.uint32)),
    ],
)
def test_round_trip_all_dtypes(tmp_path, dtype, maker):
    rng = np.random.default_rng(1)
    planes = maker(rng)
    names = tuple(f"ch{i}" for i in range(planes.shape[0]))
    c = StackContainer(names, planes, dtype, mpp=0.25, halo=3, meta={"k": "v"})
    path = _write(tmp_path, c)
    back = load_stack(path)
    assert back.channels == names
    assert back.dtype == dtype
    assert back.mpp == 0.25 and back.halo == 3 and back.meta == {"k": "v"}
    assert np.array_equal(back.planes, planes)


def test_byte_layout_is_header_length_then_json_then_planes(tmp_path):
    planes = np.arange(6, dtype=np.uint8).reshape(1, 2, 3)
    path = _write(tmp_path, StackContainer(("labels",), planes, "u8"))
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<I", blob[:4])
    header = json.loads(blob[4 : 4 + hlen])
    assert header["magic"] == "TMEF1"
    assert (header["height"], header["width"]) == (2, 3)
    assert list(header) == sorted(header)  # keys sorted for reproducible bytes
    assert blob[4 + hlen :] == bytes(range(6))  # row-major payload


def test_save_is_byte_deterministic(tmp_path):
    planes = np.zeros((1, 4, 4), np.float32)
    c = StackContainer(("a",), planes, "f32", meta={"z": 1, "a": 2})
    p1 = _write(tmp_path, c, "one.tmef")
    p2 = _write(tmp_path, c, "two.tmef")
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = _write(tmp_path, StackContainer(("a",), np.zeros((1, 2, 2), np.uint8), "u8"))
    blob = bytearray(path.read_bytes())
    header = json.loads(blob[4 : 4 + struct.unpack("<I", blob[:4])[0]])
    header["magic"] = "WRONG"
    enc = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(struct.pack("<I", len(enc)) + enc + bytes(blob[-4:]))
    with pytest.raises(MagicError, match="WRONG"):
        load_stack(path)


def test_unknown_dtype_rejected(tmp_path):
    with pytest.raises(DtypeError):
        StackContainer(("a",), np.zeros((1, 2, 2)), "f64")
    path = _write(tmp_path, StackContainer(("a",), np.zeros((1, 2, 2), np.uint8), "u8"))
    blob = path.read_bytes()
    hlen = struct.unpack("<I", blob[:4])[0]
    header = json.loads(blob[4 : 4 + hlen])
    header["dtype"] = "i16"
    enc = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(struct.pack("<I", len(enc)) + enc + blob[4 + hlen :])
    with pytest.raises(DtypeError, match="i16"):
        load_stack(path)


def test_truncation_error_names_expected_and_actual(tmp_path):
    path = _write(
        tmp_path, StackContainer(("a", "b"), np.zeros((2, 3, 3), np.float32), "f32")
    )
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(TruncatedPayloadError, match="expected 72 .* found 67"):
        load_stack(path)


def test_truncated_header_rejected(tmp_path):
    path = tmp_path / "broken.tmef"
    path.write_bytes(b"\x00\x01")
    with pytest.raises(TruncatedPayloadError):
        load_stack(path)
    path.write_bytes(struct.pack("<I", 4096) + b"{}")
    with pytest.raises(TruncatedPayloadError):
        load_stack(path)


def test_nonfinite_f32_payload_rejected(tmp_path):
    planes = np.zeros((1, 2, 2), np.float32)
    path = _write(tmp_path, StackContainer(("a",), planes, "f32"))
    blob = bytearray(path.read_bytes())
    blob[-4:] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(blob))
    with pytest.raises(PayloadValueError, match="NaN"):
        load_stack(path)


def test_container_errors_are_value_errors():
    for exc in (MagicError, DtypeError, TruncatedPayloadError, PayloadValueError):
        assert issubclass(exc, ContainerError)
        assert issubclass(exc, ValueError)


def test_container_shape_and_name_validation():
    with pytest.raises(ContainerError):
        StackContainer(("a",), np.zeros((2, 2), np.uint8), "u8")  # not (C, H, W)
    with pytest.raises(ContainerError):
        StackContainer(("a", "a"), np.zeros((2, 2, 2), np.uint8), "u8")
    with pytest.raises(ContainerError):
        StackContainer((), np.zeros((0, 2, 2), np.uint8), "u8")


# ---------------------------------------------------------------------------
# Typed adapters
# ---------------------------------------------------------------------------


def test_logit_adapter_round_trip(tmp_path):
    ids = (TAX.resolve("stroma"), TAX.resolve("lymphocyte"))
    stack = LogitStack(ids, np.random.default_rng(0).normal(size=(2, 4, 4)).astype(np.float32))
    path = _write(tmp_path, container_from_logits(stack, mpp=0.5))
    back = logits_from_container(load_stack(path))
    assert back.class_ids == ids
    assert np.array_equal(back.planes, stack.planes)


def test_logit_adapter_rejects_unknown_channel(tmp_path):
    c = StackContainer(("not_a_class",), np.zeros((1, 2, 2), np.float32), "f32")
    with pytest.raises(UnknownClassError):
        logits_from_container(c)


def test_label_and_rgb_adapters(tmp_path):
    labels = np.arange(12, dtype=np.uint8).reshape(3, 4)
    back = labels_from_container(load_stack(_write(tmp_path, container_from_labels(labels))))
    assert np.array_equal(back, labels)
    he = np.random.default_rng(2).integers(0, 256, size=(5, 6, 3)).astype(np.uint8)
    rt = rgb_from_container(load_stack(_write(tmp_path, container_from_rgb(he), "he.tmef")))
    assert np.array_equal(rt, he)
    with pytest.raises(ContainerError):
        container_from_rgb(np.zeros((5, 6, 4), np.uint8))
    with pytest.raises(ContainerError):
        labels_from_container(container_from_rgb(he))


def test_instance_adapter_keeps_teacher_types(tmp_path):
    ids = np.zeros((5, 5), np.int32)
    ids[1, 1] = 1
    ids[3, 3] = 2
    imap = InstanceMap.from_ids(ids, {1: TAX.resolve("fibroblast")})
    back = instances_from_container(
        load_stack(_write(tmp_path, container_from_instances(imap)))
    )
    assert np.array_equal(back.ids, ids)
    assert back.attrs[1].teacher_type == TAX.resolve("fibroblast")
    assert back.attrs[2].teacher_type is None


# ---------------------------------------------------------------------------
# Bundle manifest
# ---------------------------------------------------------------------------


def test_bundle_round_trip(tmp_path):
    bundle = build_bundle(random_scene(33))
    manifest = save_bundle(bundle, tmp_path / "bundle")
    assert manifest.name == "bundle.json"
    back = load_bundle(manifest)
    assert np.array_equal(back.he, bundle.he)
    assert np.array_equal(back.tissue_logits.planes, bundle.tissue_logits.planes)
    assert back.tissue_logits.class_ids == bundle.tissue_logits.class_ids
    assert np.array_equal(back.cell_logits.planes, bundle.cell_logits.planes)
    assert np.array_equal(back.nuclei.ids, bundle.nuclei.ids)
    assert {g: a.teacher_type for g, a in back.nuclei.attrs.items()} == {
        g: a.teacher_type for g, a in bundle.nuclei.attrs.items()
    }
    assert back.mitosis_candidates == bundle.mitosis_candidates
    assert back.mpp == bundle.mpp
    back.validate()


def test_bundle_manifest_missing_key(tmp_path):
    bundle = build_bundle(random_scene(34, max_nuclei=3, max_candidates=0))
    manifest = save_bundle(bundle, tmp_path / "bundle")
    doc = json.loads(manifest.read_text())
    del doc["nuclei"]
    manifest.write_text(json.dumps(doc))
    with pytest.raises(ContainerError, match="nuclei"):
        load_bundle(manifest)
