"""Directory containers: ``manifest.json`` plus one little-endian ``.bin`` blob per tensor."""

from __future__ import annotations

import json
import re
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptArtifactError, FormatError
from .infer import TileQLayer
from .moe import ExpertSet, MoELayerSpec
from .packing import pack_codes, packed_length, unpack_codes
from .quantizer import QuantizedExpert
from .tiler import ScalingVectors, TileAssignment, TiledLowRank

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
_PLAIN = {"f32": "<f4", "f16": "<u2", "u8": "u1", "u16": "<u2"}
_PACKED = re.compile(r"^packed-u([1-8])$")
_NAME = re.compile(r"^[A-Za-z0-9_.\-]+$")


def _blob_bytes(dtype: str, array: np.ndarray) -> bytes:
    if dtype == "f16":
        return np.ascontiguousarray(array, dtype=np.float16).view("<u2").tobytes()
    if dtype in _PLAIN:
        return np.ascontiguousarray(array).astype(_PLAIN[dtype]).tobytes()
    m = _PACKED.match(dtype)
    if m:
        return pack_codes(array, int(m.group(1))).tobytes()
    raise FormatError(f"unknown dtype {dtype!r}")


def _expected_length(entry: dict) -> int:
    count = int(np.prod(entry["shape"])) if entry["shape"] else 1
    dtype = entry["dtype"]
    if dtype in _PLAIN:
        return count * np.dtype(_PLAIN[dtype]).itemsize
    m = _PACKED.match(dtype)
    if m:
        return packed_length(count, int(m.group(1)))
    raise FormatError(f"tensor {entry['name']!r}: unknown dtype {dtype!r}")


def write_container(path, kind: str, attributes: dict, tensors: list[tuple[str, str, np.ndarray]]) -> Path:
    """Write ``(name, dtype, array)`` tensors and a manifest; output bytes are deterministic."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        old = root / MANIFEST
        if old.exists():
            try:
                for entry in json.loads(old.read_text()).get("tensors", []):
                    (root / entry.get("file", "")).unlink(missing_ok=True)
            except (ValueError, OSError):
                pass
        entries = []
        for name, dtype, array in tensors:
            if not _NAME.match(name):
                raise FormatError(f"invalid tensor name {name!r}")
            arr = np.asarray(array)
            data = _blob_bytes(dtype, arr)
            fname = f"{name}.bin"
            (root / fname).write_bytes(data)
            entries.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": dtype,
                            "byte_length": len(data), "crc32": zlib.crc32(data)})
        manifest = {"format_version": FORMAT_VERSION, "kind": kind, "attributes": attributes,
                    "tensors": entries}
        (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write container at {root}: {exc}") from exc
    return root


def read_manifest(path) -> dict:
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"no {MANIFEST} in {root}") from exc
    except ValueError as exc:
        raise FormatError(f"{MANIFEST} is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    for field in ("kind", "attributes", "tensors"):
        if field not in manifest:
            raise FormatError(f"manifest is missing field {field!r}")
    return manifest


def read_container(path, verify: bool = True) -> tuple[dict, dict[str, np.ndarray]]:
    """Load every tensor, checking sizes always and CRC32 unless ``verify`` is false."""
    root = Path(path)
    manifest = read_manifest(root)
    out: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        name = entry.get("name", "?")
        for field in ("file", "shape", "dtype", "byte_length"):
            if field not in entry:
                raise FormatError(f"tensor {name!r}: manifest entry lacks {field!r}")
        expected = _expected_length(entry)
        if entry["byte_length"] != expected:
            raise FormatError(f"tensor {name!r}: byte_length {entry['byte_length']} does not match "
                              f"shape {entry['shape']} with dtype {entry['dtype']} ({expected} bytes)")
        blob = root / entry["file"]
        if not blob.is_file():
            raise FormatError(f"tensor {name!r}: missing blob {entry['file']}")
        data = blob.read_bytes()
        if len(data) != expected:
            raise FormatError(f"tensor {name!r}: blob holds {len(data)} bytes, expected {expected}")
        if verify and "crc32" in entry and zlib.crc32(data) != entry["crc32"]:
            raise CorruptArtifactError(f"tensor {name!r}: CRC32 mismatch")
        out[name] = _decode(entry, data)
    return manifest, out


def _decode(entry: dict, data: bytes) -> np.ndarray:
    shape = tuple(entry["shape"])
    dtype = entry["dtype"]
    if dtype == "f16":
        return np.frombuffer(data, dtype="<u2").view(np.float16).reshape(shape).copy()
    if dtype in _PLAIN:
        arr = np.frombuffer(data, dtype=_PLAIN[dtype]).reshape(shape)
        return arr.astype(arr.dtype.newbyteorder("=")).copy()
    bits = int(_PACKED.match(dtype).group(1))
    count = int(np.prod(shape)) if shape else 1
    try:
        return unpack_codes(np.frombuffer(data, dtype=np.uint8), count, bits).reshape(shape)
    except FormatError as exc:
        raise FormatError(f"tensor {entry['name']!r}: {exc}") from exc


def _spec_dict(spec: MoELayerSpec) -> dict:
    return {"num_experts": spec.num_experts, "top_k": spec.top_k, "in_dim": spec.in_dim,
            "out_dim": spec.out_dim, "num_shared": spec.num_shared}


def _spec_from(attrs: dict) -> MoELayerSpec:
    try:
        s = attrs["spec"]
        return MoELayerSpec(int(s["num_experts"]), int(s["top_k"]), int(s["in_dim"]),
                            int(s["out_dim"]), int(s.get("num_shared", 0)))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest attributes lack a valid layer spec: {exc}") from exc


def write_model(path, experts: ExpertSet, extra: dict[str, np.ndarray] | None = None,
                attributes: dict | None = None) -> Path:
    """Full-precision expert set, one float32 blob per expert, plus optional float32 extras."""
    attrs = {"spec": _spec_dict(experts.spec), **(attributes or {})}
    tensors = [(f"routed.{k}", "f32", w) for k, w in enumerate(experts.routed)]
    tensors += [(f"shared.{s}", "f32", w) for s, w in enumerate(experts.shared)]
    for name, arr in sorted((extra or {}).items()):
        tensors.append((name, "f32", arr))
    return write_container(path, "expert_set", attrs, tensors)


def read_model(path, verify: bool = True) -> tuple[ExpertSet, dict[str, np.ndarray], dict]:
    """Returns ``(experts, extra_tensors, attributes)``."""
    manifest, tensors = read_container(path, verify)
    if manifest["kind"] != "expert_set":
        raise FormatError(f"container kind is {manifest['kind']!r}, expected 'expert_set'")
    spec = _spec_from(manifest["attributes"])
    o, i = spec.out_dim, spec.in_dim

    def take(name):
        if name not in tensors:
            raise FormatError(f"tensor {name!r} is missing from the container")
        arr = tensors.pop(name)
        if arr.shape != (o, i) or arr.dtype != np.float32:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, expected {(o, i)}")
        return arr

    routed = np.stack([take(f"routed.{k}") for k in range(spec.num_experts)])
    shared = np.stack([take(f"shared.{s}") for s in range(spec.num_shared)]) if spec.num_shared \
        else np.zeros((0, o, i), dtype=np.float32)
    return ExpertSet(spec, routed, shared), tensors, manifest["attributes"]


def _expert_tensors(prefix: str, q: QuantizedExpert) -> tuple[dict, list]:
    meta = {"mode": q.mode, "bits": q.bits, "group_size": q.group_size, "sub_dim": q.sub_dim,
            "method": q.method, "shape": list(q.shape)}
    codes = q.codes()
    out = [(f"{prefix}.codes", f"packed-u{q.bits}", codes)]
    if q.mode == "vector":
        out.append((f"{prefix}.codebook", "f16", q.codebook))
    else:
        out.append((f"{prefix}.scales", "f16", q.scales))
        out.append((f"{prefix}.zeros", f"packed-u{q.bits}", q.zeros))
    return meta, out


def _expert_from(prefix: str, meta: dict, tensors: dict) -> QuantizedExpert:
    def get(name):
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise FormatError(f"tensor {key!r} is missing from the artifact")
        return tensors[key]

    shape = tuple(int(v) for v in meta["shape"])
    bits = int(meta["bits"])
    codes = get("codes")
    q = QuantizedExpert(shape=shape, bits=bits, group_size=int(meta["group_size"]), mode=meta["mode"],
                        packed=pack_codes(codes, bits), sub_dim=int(meta.get("sub_dim", 1)),
                        method=meta.get("method", "rtn"))
    if codes.size != q.code_count:
        raise FormatError(f"tensor '{prefix}.codes' holds {codes.size} codes, expected {q.code_count}")
    if q.mode == "vector":
        return QuantizedExpert(**{**q.__dict__, "codebook": get("codebook")})
    scales, zeros = get("scales"), get("zeros").astype(np.uint8)
    if scales.shape != (shape[0], q.num_groups) or zeros.shape != scales.shape:
        raise FormatError(f"grid tensors of {prefix!r} do not match shape {shape}")
    return QuantizedExpert(**{**q.__dict__, "scales": scales, "zeros": zeros})


def write_artifact(path, layer: TileQLayer) -> Path:
    t = layer.tiled
    a = t.assignment
    tensors = [
        ("gate_weights", "f32", layer.gate_weights),
        ("placement", "u16", a.placed),
        ("ideal", "u16", a.ideal),
        ("scaling", "f32", t.scaling.values),
    ]
    coded = t.u_codes is not None
    if coded:
        tensors += [("u_codes", "u8", t.u_codes.view(np.uint8)), ("u_absmax", "f32", t.u_absmax),
                    ("singulars", "f16", t.singulars),
                    ("v_codes", "u8", t.v_codes.view(np.uint8)), ("v_absmax", "f32", t.v_absmax)]
    else:
        tensors += [("u_blocks", "f32", t.u_blocks), ("singulars", "f32", t.singulars),
                    ("v_blocks", "f32", t.v_blocks)]
    routed_meta, shared_meta = [], []
    for k, q in enumerate(layer.quantized):
        meta, items = _expert_tensors(f"routed.{k}", q)
        routed_meta.append(meta)
        tensors += items
    for s, q in enumerate(layer.shared_quantized):
        meta, items = _expert_tensors(f"shared.{s}", q)
        shared_meta.append(meta)
        tensors += items
    attrs = {
        "spec": _spec_dict(layer.spec),
        "grid": [a.grid_rows, a.grid_cols],
        "rank": t.rank,
        "factor_codec": "int8-absmax" if coded else "f32",
        "singular_codec": "f16" if coded else "f32",
        "gate_normalization": "softmax-topk-renormalized",
        "routed": routed_meta,
        "shared": shared_meta,
        "config": layer.config,
    }
    return write_container(path, "tileq_layer", attrs, tensors)


def read_artifact(path, verify: bool = True) -> TileQLayer:
    manifest, tensors = read_container(path, verify)
    if manifest["kind"] != "tileq_layer":
        raise FormatError(f"container kind is {manifest['kind']!r}, expected 'tileq_layer'")
    attrs = manifest["attributes"]
    spec = _spec_from(attrs)
    try:
        m, n = (int(v) for v in attrs["grid"])
        rank = int(attrs["rank"])
        codec = attrs["factor_codec"]
        routed_meta, shared_meta = attrs["routed"], attrs.get("shared", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest attributes incomplete: {exc}") from exc
    for name in ("gate_weights", "placement", "ideal", "scaling", "singulars"):
        if name not in tensors:
            raise FormatError(f"tensor {name!r} is missing from the artifact")
    placed = tensors["placement"].astype(np.int64)
    ideal = tensors["ideal"].astype(np.int64)
    if placed.shape != (spec.num_experts, 2):
        raise FormatError(f"tensor 'placement' has shape {placed.shape}")
    assignment = TileAssignment(m, n, ideal, placed, int(np.abs(placed - ideal).sum()))
    assignment.validate()
    scaling = ScalingVectors(tensors["scaling"])
    if codec == "int8-absmax":
        for name in ("u_codes", "u_absmax", "v_codes", "v_absmax"):
            if name not in tensors:
                raise FormatError(f"tensor {name!r} is missing from the artifact")
        tiled = TiledLowRank.from_codes(tensors["u_codes"].view(np.int8), tensors["u_absmax"],
                                        tensors["singulars"], tensors["v_codes"].view(np.int8),
                                        tensors["v_absmax"], assignment, scaling)
    elif codec == "f32":
        tiled = TiledLowRank(tensors["u_blocks"], tensors["singulars"], tensors["v_blocks"],
                             assignment, scaling)
    else:
        raise FormatError(f"unknown factor codec {codec!r}")
    if tiled.rank != rank or tiled.u_blocks.shape != (m, spec.in_dim, rank) \
            or tiled.v_blocks.shape != (n, rank, spec.out_dim):
        raise FormatError("factor tensors do not match grid, rank and layer dimensions")
    if len(routed_meta) != spec.num_experts or len(shared_meta) != spec.num_shared:
        raise FormatError("per-expert metadata count does not match the layer spec")
    quantized = tuple(_expert_from(f"routed.{k}", meta, tensors) for k, meta in enumerate(routed_meta))
    shared = tuple(_expert_from(f"shared.{s}", meta, tensors) for s, meta in enumerate(shared_meta))
    return TileQLayer(spec=spec, quantized=quantized, tiled=tiled, gate_weights=tensors["gate_weights"],
                      shared_quantized=shared, config=attrs.get("config", {}))
