"""Bit-exact file formats: binary map containers, JSON manifests, results.

Container layout (single file, little-endian):

    bytes 0-3   magic "ZPKT"
    bytes 4-7   uint32 header length L
    bytes 8-    UTF-8 JSON header (L bytes)
    then        float32 payload, row-major
    then        optional mask, one bit per cell, row-major, zero-padded

The header records version, payload kind ("feature" or "depth"), dtype,
shape, per-kind metadata (grid stride/offset for features, scale for depth),
whether a mask follows, and a CRC-32 over payload plus mask bytes. Readers
reject rather than guess: every corruption category raises its own error
class, and read(write(x)) is bitwise equal to x.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .evaluation import format_results_table, summarize_by_category
from .geometry import CameraIntrinsics, RigidPose, SphericalCamera
from .matching import FeatureMap
from .synth import (
    Box,
    DatasetManifest,
    DepthMap,
    GridSpec,
    QueryView,
    ReferenceView,
    Sphere,
    SyntheticScene,
    WarpParams,
)

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "FileFormatError",
    "MagicError",
    "VersionError",
    "HeaderError",
    "ChecksumError",
    "TruncationError",
    "DimensionError",
    "SchemaError",
    "write_feature_map",
    "read_feature_map",
    "write_depth_map",
    "read_depth_map",
    "write_manifest",
    "read_manifest",
    "write_results",
]

MAGIC = b"ZPKT"
FORMAT_VERSION = 1


class FileFormatError(Exception):
    """Base class for all file parsing failures."""


class MagicError(FileFormatError):
    """Leading bytes are not the container magic."""


class VersionError(FileFormatError):
    """Unsupported container version."""


class HeaderError(FileFormatError):
    """Header is unparseable, incomplete, or of the wrong kind."""


class ChecksumError(FileFormatError):
    """Payload bytes do not match the recorded checksum."""


class TruncationError(FileFormatError):
    """File ends before the declared content."""


class DimensionError(FileFormatError):
    """Declared dims are invalid or inconsistent with the payload length."""


class SchemaError(FileFormatError):
    """A JSON document violates the schema; names the offending field path."""


def _write_container(path, kind: str, meta: dict, payload: np.ndarray, mask) -> None:
    payload = np.ascontiguousarray(payload, dtype="<f4")
    payload_bytes = payload.tobytes()
    mask_bytes = b""
    if mask is not None:
        mask_bytes = np.packbits(mask.astype(bool).ravel()).tobytes()
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "dtype": "<f4",
        "shape": [int(d) for d in payload.shape],
        "has_mask": mask is not None,
        "checksum": zlib.crc32(payload_bytes + mask_bytes) & 0xFFFFFFFF,
    }
    header.update(meta)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload_bytes)
        f.write(mask_bytes)


def _parse_header(data: bytes, path) -> tuple[dict, int]:
    """Validate magic/version and decode the JSON header; returns (header, body offset)."""
    if len(data) < 4:
        raise TruncationError(f"{path}: file shorter than the 4-byte magic")
    if data[:4] != MAGIC:
        raise MagicError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise TruncationError(f"{path}: file ends inside the header length field")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise TruncationError(f"{path}: file ends inside the header")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderError(f"{path}: header is not valid JSON ({e})") from e
    if not isinstance(header, dict):
        raise HeaderError(f"{path}: header must be a JSON object")
    for key in ("version", "kind", "dtype", "shape", "has_mask", "checksum"):
        if key not in header:
            raise HeaderError(f"{path}: header missing required key {key!r}")
    if header["version"] != FORMAT_VERSION:
        raise VersionError(
            f"{path}: unsupported version {header['version']!r}, "
            f"expected {FORMAT_VERSION}"
        )
    if header["dtype"] != "<f4":
        raise HeaderError(f"{path}: unsupported dtype {header['dtype']!r}")
    return header, 8 + hlen


def _read_container(path, expected_kind: str, expected_rank: int):
    data = Path(path).read_bytes()
    header, offset = _parse_header(data, path)
    if header["kind"] != expected_kind:
        raise HeaderError(
            f"{path}: kind is {header['kind']!r}, expected {expected_kind!r}"
        )
    shape = header["shape"]
    if (
        not isinstance(shape, list)
        or len(shape) != expected_rank
        or not all(isinstance(d, int) and d >= 1 for d in shape)
    ):
        raise DimensionError(f"{path}: invalid {expected_kind} shape {shape!r}")

    n_values = math.prod(shape)
    n_payload = n_values * 4
    n_mask = math.ceil(shape[0] * shape[1] / 8) if header["has_mask"] else 0
    body = data[offset:]
    if len(body) < n_payload + n_mask:
        raise TruncationError(
            f"{path}: payload truncated ({len(body)} bytes, "
            f"expected {n_payload + n_mask})"
        )
    if len(body) > n_payload + n_mask:
        raise DimensionError(
            f"{path}: {len(body)} payload bytes inconsistent with header "
            f"dims {shape} (expected {n_payload + n_mask})"
        )
    if zlib.crc32(body) & 0xFFFFFFFF != header["checksum"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    values = np.frombuffer(body[:n_payload], dtype="<f4").reshape(shape).copy()
    mask = None
    if header["has_mask"]:
        bits = np.frombuffer(body[n_payload:], dtype=np.uint8)
        mask = (
            np.unpackbits(bits, count=shape[0] * shape[1])
            .astype(bool)
            .reshape(shape[0], shape[1])
        )
    return header, values, mask


def write_feature_map(path, fm: FeatureMap) -> None:
    _write_container(
        path,
        "feature",
        {"pixel_stride": fm.pixel_stride, "pixel_offset": fm.pixel_offset},
        fm.data,
        fm.mask,
    )


def read_feature_map(path) -> FeatureMap:
    header, values, mask = _read_container(path, "feature", 3)
    for key in ("pixel_stride", "pixel_offset"):
        if key not in header:
            raise HeaderError(f"{path}: feature header missing {key!r}")
    return FeatureMap(
        data=values,
        pixel_stride=float(header["pixel_stride"]),
        pixel_offset=float(header["pixel_offset"]),
        mask=mask,
    )


def write_depth_map(path, dm: DepthMap) -> None:
    _write_container(path, "depth", {"scale": dm.scale}, dm.values, None)


def read_depth_map(path) -> DepthMap:
    header, values, mask = _read_container(path, "depth", 2)
    if "scale" not in header:
        raise HeaderError(f"{path}: depth header missing 'scale'")
    return DepthMap(values=values, scale=float(header["scale"]))


# --- manifest -------------------------------------------------------------

_CONVENTIONS = {
    "extrinsics": "x_cam = R @ X_world + t",
    "camera_axes": "+x right, +y down, +z forward",
    "angles": "radians",
}


def _get(obj, key, path, types):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{path}.{key}: missing")
    value = obj[key]
    if types is not None and not isinstance(value, types):
        raise SchemaError(f"{path}.{key}: expected {types}, got {type(value).__name__}")
    return value


def _num(obj, key, path) -> float:
    v = _get(obj, key, path, (int, float))
    if isinstance(v, bool):
        raise SchemaError(f"{path}.{key}: expected a number")
    return float(v)


def _vec(obj, key, path, n) -> tuple:
    v = _get(obj, key, path, list)
    if len(v) != n or not all(isinstance(c, (int, float)) for c in v):
        raise SchemaError(f"{path}.{key}: expected a list of {n} numbers")
    return tuple(float(c) for c in v)


def _pose_to_json(p: RigidPose) -> dict:
    return {
        "rotation": [[float(v) for v in row] for row in p.rotation],
        "translation": [float(v) for v in p.translation],
    }


def _pose_from_json(obj, path) -> RigidPose:
    rows = _get(obj, "rotation", path, list)
    if len(rows) != 3 or not all(
        isinstance(r, list) and len(r) == 3 and all(isinstance(v, (int, float)) for v in r)
        for r in rows
    ):
        raise SchemaError(f"{path}.rotation: expected a 3x3 matrix (row-major)")
    t = _vec(obj, "translation", path, 3)
    try:
        return RigidPose(np.array(rows, dtype=float), np.array(t))
    except ValueError as e:
        raise SchemaError(f"{path}.rotation: {e}") from e


def _scene_to_json(scene: SyntheticScene) -> dict:
    prims = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            prims.append({"kind": "sphere", "center": list(p.center), "radius": p.radius})
        else:
            prims.append(
                {
                    "kind": "box",
                    "center": list(p.center),
                    "half_extents": list(p.half_extents),
                }
            )
    return {
        "primitives": prims,
        "descriptor_dim": scene.descriptor_dim,
        "descriptor_seed": scene.descriptor_seed,
        "warp": {"amplitude": scene.warp.amplitude, "frequency": scene.warp.frequency},
    }


def _warp_from_json(obj, path) -> WarpParams:
    return WarpParams(_num(obj, "amplitude", path), _num(obj, "frequency", path))


def _scene_from_json(obj, path) -> SyntheticScene:
    prims = []
    entries = _get(obj, "primitives", path, list)
    for i, entry in enumerate(entries):
        ppath = f"{path}.primitives[{i}]"
        kind = _get(entry, "kind", ppath, str)
        try:
            if kind == "sphere":
                prims.append(
                    Sphere(_vec(entry, "center", ppath, 3), _num(entry, "radius", ppath))
                )
            elif kind == "box":
                prims.append(
                    Box(
                        _vec(entry, "center", ppath, 3),
                        _vec(entry, "half_extents", ppath, 3),
                    )
                )
            else:
                raise SchemaError(f"{ppath}.kind: unknown primitive {kind!r}")
        except ValueError as e:
            raise SchemaError(f"{ppath}: {e}") from e
    try:
        return SyntheticScene(
            primitives=tuple(prims),
            descriptor_dim=int(_num(obj, "descriptor_dim", path)),
            descriptor_seed=int(_num(obj, "descriptor_seed", path)),
            warp=_warp_from_json(_get(obj, "warp", path, dict), f"{path}.warp"),
        )
    except ValueError as e:
        raise SchemaError(f"{path}: {e}") from e


def write_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "format": "poselift-dataset",
        "version": FORMAT_VERSION,
        "conventions": _CONVENTIONS,
        "category": manifest.category,
        "noise_sd": manifest.noise_sd,
        "intrinsics": {
            "fx": manifest.intrinsics.fx,
            "fy": manifest.intrinsics.fy,
            "cx": manifest.intrinsics.cx,
            "cy": manifest.intrinsics.cy,
            "width": manifest.intrinsics.width,
            "height": manifest.intrinsics.height,
        },
        "grid": {
            "grid_height": manifest.grid.grid_height,
            "grid_width": manifest.grid.grid_width,
            "pixel_stride": manifest.grid.pixel_stride,
            "pixel_offset": manifest.grid.pixel_offset,
        },
        "scene": _scene_to_json(manifest.scene),
        "query_warp": (
            None
            if manifest.query_warp is None
            else {
                "amplitude": manifest.query_warp.amplitude,
                "frequency": manifest.query_warp.frequency,
            }
        ),
        "references": [
            {
                "id": r.view_id,
                "camera": {
                    "theta": r.camera.theta,
                    "phi": r.camera.phi,
                    "radius": r.camera.radius,
                },
                "depth_file": r.depth_file,
                "feature_file": r.feature_file,
            }
            for r in manifest.references
        ],
        "queries": [
            {
                "id": q.view_id,
                "pose": _pose_to_json(q.pose),
                "feature_file": q.feature_file,
                "depth_file": q.depth_file,
            }
            for q in manifest.queries
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a dataset manifest.

    With ``check_files`` every referenced map file must exist and have a
    well-formed header (payloads are not verified until actually read).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON ({e})") from e
    root = path.parent

    if _get(doc, "format", "manifest", str) != "poselift-dataset":
        raise SchemaError("manifest.format: expected 'poselift-dataset'")
    if doc["version"] != FORMAT_VERSION:
        raise SchemaError(f"manifest.version: unsupported {doc['version']!r}")

    ints = _get(doc, "intrinsics", "manifest", dict)
    try:
        K = CameraIntrinsics(
            fx=_num(ints, "fx", "manifest.intrinsics"),
            fy=_num(ints, "fy", "manifest.intrinsics"),
            cx=_num(ints, "cx", "manifest.intrinsics"),
            cy=_num(ints, "cy", "manifest.intrinsics"),
            width=int(_num(ints, "width", "manifest.intrinsics")),
            height=int(_num(ints, "height", "manifest.intrinsics")),
        )
    except ValueError as e:
        raise SchemaError(f"manifest.intrinsics: {e}") from e

    g = _get(doc, "grid", "manifest", dict)
    try:
        grid = GridSpec(
            grid_height=int(_num(g, "grid_height", "manifest.grid")),
            grid_width=int(_num(g, "grid_width", "manifest.grid")),
            pixel_stride=_num(g, "pixel_stride", "manifest.grid"),
            pixel_offset=_num(g, "pixel_offset", "manifest.grid"),
        )
    except ValueError as e:
        raise SchemaError(f"manifest.grid: {e}") from e

    scene = _scene_from_json(_get(doc, "scene", "manifest", dict), "manifest.scene")
    qw = doc.get("query_warp")
    query_warp = None if qw is None else _warp_from_json(qw, "manifest.query_warp")

    references = []
    for i, entry in enumerate(_get(doc, "references", "manifest", list)):
        epath = f"references[{i}]"
        cam = _get(entry, "camera", epath, dict)
        try:
            camera = SphericalCamera(
                theta=_num(cam, "theta", f"{epath}.camera"),
                phi=_num(cam, "phi", f"{epath}.camera"),
                radius=_num(cam, "radius", f"{epath}.camera"),
            )
        except ValueError as e:
            raise SchemaError(f"{epath}.camera: {e}") from e
        references.append(
            ReferenceView(
                view_id=_get(entry, "id", epath, str),
                camera=camera,
                depth_file=_get(entry, "depth_file", epath, str),
                feature_file=_get(entry, "feature_file", epath, str),
            )
        )

    queries = []
    for i, entry in enumerate(_get(doc, "queries", "manifest", list)):
        epath = f"queries[{i}]"
        pose = _pose_from_json(_get(entry, "pose", epath, dict), f"{epath}.pose")
        depth_file = entry.get("depth_file")
        if depth_file is not None and not isinstance(depth_file, str):
            raise SchemaError(f"{epath}.depth_file: expected a string or null")
        queries.append(
            QueryView(
                view_id=_get(entry, "id", epath, str),
                pose=pose,
                feature_file=_get(entry, "feature_file", epath, str),
                depth_file=depth_file,
            )
        )

    manifest = DatasetManifest(
        scene=scene,
        intrinsics=K,
        grid=grid,
        noise_sd=_num(doc, "noise_sd", "manifest"),
        category=_get(doc, "category", "manifest", str),
        references=tuple(references),
        queries=tuple(queries),
        query_warp=query_warp,
        root=root,
    )

    if check_files:
        for r in manifest.references:
            _check_map_file(manifest.resolve(r.depth_file), "depth")
            _check_map_file(manifest.resolve(r.feature_file), "feature")
        for q in manifest.queries:
            _check_map_file(manifest.resolve(q.feature_file), "feature")
            if q.depth_file is not None:
                _check_map_file(manifest.resolve(q.depth_file), "depth")
    return manifest


def _check_map_file(path: Path, kind: str) -> None:
    if not path.is_file():
        raise FileNotFoundError(f"manifest references missing file: {path}")
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise TruncationError(f"{path}: file ends inside the header length field")
        (hlen,) = struct.unpack("<I", head[4:8])
        header, _ = _parse_header(head + f.read(hlen), path)
    if header["kind"] != kind:
        raise HeaderError(f"{path}: kind is {header['kind']!r}, expected {kind!r}")


# --- results --------------------------------------------------------------


def write_results(json_path, table_path, records, thresholds=(15.0, 30.0)):
    """Write evaluation records plus per-category and pooled summaries.

    Emits a JSON document and an aligned plain-text table with one row per
    category and a final pooled "all" row. Returns (by_category, pooled).
    """
    records = list(records)
    by_cat, pooled = summarize_by_category(records, thresholds)

    def _summary_json(s):
        return {
            "median_err_deg": s.median_err_deg,
            "n": s.n,
            "acc": {f"{t:g}": v for t, v in s.acc_at.items()},
        }

    doc = {
        "thresholds": [float(t) for t in thresholds],
        "records": [
            {
                "query_id": r.query_id,
                "category": r.category,
                "error_deg": r.error_deg,
                "best_view_index": r.best_view_index,
                "iterations_run": r.iterations_run,
                "rotation_est": [[float(v) for v in row] for row in r.rotation_est],
                "rotation_gt": [[float(v) for v in row] for row in r.rotation_gt],
            }
            for r in records
        ],
        "summaries": {cat: _summary_json(s) for cat, s in by_cat.items()},
        "pooled": _summary_json(pooled),
    }
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")

    rows = list(by_cat.items()) + [("all", pooled)]
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(format_results_table(rows, thresholds))
    return by_cat, pooled
