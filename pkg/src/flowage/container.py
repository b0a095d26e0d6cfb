"""Self-describing binary container for fields, volumes, matrices, checkpoints.

Single-tensor layout:

    bytes 0-7   magic "FLOWAGE1"
    bytes 8-11  little-endian uint32 header length
    header      UTF-8 "key: value" lines; required keys role, dtype, shape,
                order (plus spacing for spatial roles); unknown keys are
                preserved on round trip
    payload     raw little-endian array data

Vector-field payloads store one 3-vector per voxel with voxels ordered
x-fastest; scalar volumes likewise. Checkpoints reuse the same magic and
header block (kind: checkpoint) followed by named sections, each an
embedded single-tensor container. All writes are temp-then-rename so no
partial files are ever visible.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .flow import CouplingLayer, FlowConfig, FlowModel, MixingTransform
from .geometry import DeformationField, VelocityField, Volume
from .subspace import SubspaceModel, vec_to_field

MAGIC = b"FLOWAGE1"
SPATIAL_ROLES = ("velocity", "deformation", "volume")
ROLES = SPATIAL_ROLES + ("matrix", "vector")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class TensorRecord:
    data: np.ndarray
    role: str
    spacing: tuple[float, float, float] | None
    header: dict


def atomic_write_bytes(path, blob: bytes) -> None:
    """Write a file via temp-then-rename in the destination directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _format_header(entries: dict) -> bytes:
    lines = [f"{k}: {v}" for k, v in entries.items()]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_header(blob: bytes, where: str) -> dict:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(blob.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if ":" not in line:
            raise ValidationError(f"{where}: header line {lineno} is not 'key: value': {line!r}")
        k, v = line.split(":", 1)
        entries[k.strip()] = v.strip()
    return entries


def _spatial_to_bytes(data: np.ndarray, dtype: np.dtype) -> bytes:
    """Serialize (nx, ny, nz[, 3]) so the x index varies fastest."""
    axes = (2, 1, 0, 3) if data.ndim == 4 else (2, 1, 0)
    return np.ascontiguousarray(data.transpose(axes)).astype(dtype).tobytes()


def _spatial_from_bytes(raw: bytes, shape, dtype, n_comp: int) -> np.ndarray:
    nx, ny, nz = shape
    arr = np.frombuffer(raw, dtype=dtype)
    if n_comp == 3:
        arr = arr.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
    else:
        arr = arr.reshape(nz, ny, nx).transpose(2, 1, 0)
    return np.ascontiguousarray(arr, dtype=np.float64)


def encode_tensor(data: np.ndarray, role: str, spacing=None, extra: dict | None = None, dtype: str = "f64") -> bytes:
    if role not in ROLES:
        raise ValidationError(f"role must be one of {ROLES}, got {role!r}")
    if dtype not in _DTYPES:
        raise ValidationError(f"dtype must be f32 or f64, got {dtype!r}")
    data = np.asarray(data, dtype=np.float64)
    entries: dict[str, str] = {"role": role, "dtype": dtype}
    if role in SPATIAL_ROLES:
        if spacing is None:
            raise ValidationError(f"role {role!r} requires spacing")
        want = 4 if role in ("velocity", "deformation") else 3
        if data.ndim != want:
            raise ValidationError(f"role {role!r} expects {want}-d data, got shape {data.shape}")
        entries["shape"] = ",".join(str(n) for n in data.shape[:3])
        entries["order"] = "x-fastest"
        entries["spacing"] = ",".join(repr(float(s)) for s in spacing)
        payload = _spatial_to_bytes(data, _DTYPES[dtype])
    else:
        if role == "vector" and data.ndim != 1:
            raise ValidationError(f"role 'vector' expects 1-d data, got shape {data.shape}")
        if role == "matrix" and data.ndim != 2:
            raise ValidationError(f"role 'matrix' expects 2-d data, got shape {data.shape}")
        entries["shape"] = ",".join(str(n) for n in data.shape)
        entries["order"] = "row-major"
        payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes()
    for k in sorted(extra or {}):
        if k in entries:
            raise ValidationError(f"extra header key {k!r} collides with a required key")
        entries[k] = str((extra or {})[k])
    header = _format_header(entries)
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def decode_tensor(blob: bytes, where: str = "<bytes>") -> TensorRecord:
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise ValidationError(f"{where}: not a tensor container (expected magic {MAGIC!r})")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise ValidationError(f"{where}: truncated header (expected {hlen} bytes)")
    header = _parse_header(blob[12 : 12 + hlen], where)
    for key in ("role", "dtype", "shape", "order"):
        if key not in header:
            raise ValidationError(f"{where}: header is missing required key {key!r}")
    role = header["role"]
    if role not in ROLES:
        raise ValidationError(f"{where}: unknown role {role!r}, expected one of {ROLES}")
    dtype = _DTYPES.get(header["dtype"])
    if dtype is None:
        raise ValidationError(f"{where}: unknown dtype {header['dtype']!r}, expected f32 or f64")
    shape = tuple(int(s) for s in header["shape"].split(","))
    n_comp = 3 if role in ("velocity", "deformation") else 1
    expected = int(np.prod(shape)) * n_comp * dtype.itemsize
    payload = blob[12 + hlen :]
    if len(payload) != expected:
        raise ValidationError(f"{where}: payload is {len(payload)} bytes, expected {expected} for shape {shape}")
    spacing = None
    if role in SPATIAL_ROLES:
        if "spacing" not in header:
            raise ValidationError(f"{where}: spatial role {role!r} requires a spacing header key")
        spacing = tuple(float(s) for s in header["spacing"].split(","))
        data = _spatial_from_bytes(payload, shape, dtype, 3 if role in ("velocity", "deformation") else 1)
    else:
        data = np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(shape)
    return TensorRecord(data=data, role=role, spacing=spacing, header=header)


def write_tensor(path, data: np.ndarray, role: str, spacing=None, extra: dict | None = None) -> None:
    atomic_write_bytes(path, encode_tensor(data, role, spacing, extra))


def read_tensor(path) -> TensorRecord:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{path}: file not found")
    return decode_tensor(path.read_bytes(), str(path))


def write_velocity(path, v: VelocityField, extra: dict | None = None) -> None:
    write_tensor(path, v.data, "velocity", v.spacing, extra)


def read_velocity(path) -> VelocityField:
    rec = read_tensor(path)
    if rec.role != "velocity":
        raise ValidationError(f"{path}: expected a velocity container, found role {rec.role!r}")
    return VelocityField(rec.data, rec.spacing)


def write_deformation(path, d: DeformationField) -> None:
    write_tensor(path, d.data, "deformation", d.spacing)


def read_deformation(path) -> DeformationField:
    rec = read_tensor(path)
    if rec.role != "deformation":
        raise ValidationError(f"{path}: expected a deformation container, found role {rec.role!r}")
    return DeformationField(rec.data, rec.spacing)


def write_volume(path, vol: Volume) -> None:
    write_tensor(path, vol.data, "volume", vol.spacing, {"interpolation": vol.interpolation})


def read_volume(path) -> Volume:
    rec = read_tensor(path)
    if rec.role != "volume":
        raise ValidationError(f"{path}: expected a volume container, found role {rec.role!r}")
    return Volume(rec.data, rec.spacing, rec.header.get("interpolation", "trilinear"))


# ---------------------------------------------------------------------------
# Checkpoints: a header block plus named embedded tensor sections.

def _encode_checkpoint(kind: str, meta: dict, sections: list[tuple[str, bytes]]) -> bytes:
    entries = {"kind": "checkpoint", "checkpoint": kind, "format_version": "1", "sections": str(len(sections))}
    for k, v in meta.items():
        if k in entries:
            raise ValidationError(f"meta key {k!r} collides with a reserved checkpoint key")
        entries[k] = str(v)
    header = _format_header(entries)
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    for name, blob in sections:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def _decode_checkpoint(blob: bytes, where: str) -> tuple[str, dict, dict[str, TensorRecord]]:
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise ValidationError(f"{where}: not a flowage container (expected magic {MAGIC!r})")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = _parse_header(blob[12 : 12 + hlen], where)
    if header.get("kind") != "checkpoint":
        raise ValidationError(f"{where}: expected a checkpoint container, found kind {header.get('kind')!r}")
    n_sections = int(header["sections"])
    off = 12 + hlen
    sections: dict[str, TensorRecord] = {}
    for i in range(n_sections):
        (nlen,) = struct.unpack("<I", blob[off : off + 4])
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (blen,) = struct.unpack("<Q", blob[off : off + 8])
        off += 8
        sections[name] = decode_tensor(blob[off : off + blen], f"{where}[{name}]")
        off += blen
    if off != len(blob):
        raise ValidationError(f"{where}: {len(blob) - off} trailing bytes after the last section")
    return header["checkpoint"], header, sections


def _subspace_meta(model: SubspaceModel) -> dict:
    return {
        "n_sub": model.n_sub,
        "n_pop": model.n_pop,
        "dims": ",".join(str(n) for n in model.dims),
        "spacing": ",".join(repr(float(s)) for s in model.spacing),
        "standardize": model.standardize,
        "variance_captured": repr(model.variance_captured),
    }


def _subspace_sections(model: SubspaceModel, prefix: str = "") -> list[tuple[str, bytes]]:
    return [
        (prefix + "mean", encode_tensor(model.mean.data, "velocity", model.spacing)),
        (prefix + "basis", encode_tensor(model.basis, "matrix")),
        (prefix + "singular_values", encode_tensor(model.singular_values, "vector")),
        (prefix + "coord_scale", encode_tensor(model.coord_scale, "vector")),
    ]


def _subspace_from_parts(header: dict, sections: dict[str, TensorRecord], prefix: str = "") -> SubspaceModel:
    dims = tuple(int(s) for s in header["dims"].split(","))
    spacing = tuple(float(s) for s in header["spacing"].split(","))
    mean = vec_to_field(sections[prefix + "mean"].data.reshape(-1), dims, spacing)
    return SubspaceModel(
        mean=mean,
        basis=sections[prefix + "basis"].data,
        singular_values=sections[prefix + "singular_values"].data,
        coord_scale=sections[prefix + "coord_scale"].data,
        variance_captured=float(header["variance_captured"]),
        n_pop=int(header["n_pop"]),
        standardize=header["standardize"] == "True",
    )


def save_subspace(path, model: SubspaceModel) -> None:
    atomic_write_bytes(path, _encode_checkpoint("subspace", _subspace_meta(model), _subspace_sections(model)))


def load_subspace(path) -> SubspaceModel:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{path}: file not found")
    kind, header, sections = _decode_checkpoint(path.read_bytes(), str(path))
    if kind != "subspace":
        raise ValidationError(f"{path}: expected a subspace checkpoint, found {kind!r}")
    return _subspace_from_parts(header, sections)


def _flow_meta(flow: FlowModel) -> dict:
    cfg = flow.config
    schedule = []
    pos = 0
    for stage in flow.stages:
        if isinstance(stage, CouplingLayer):
            pos = stage.index
        else:
            schedule.append(f"{pos}={stage.kind}")
    return {
        "flow_n_lay": cfg.n_lay,
        "flow_n_hid": cfg.n_hid,
        "flow_hidden_width": cfg.hidden_width,
        "flow_scale_clamp": repr(cfg.scale_clamp),
        "flow_mixing": ";".join(schedule),
        "flow_seed": flow.seed,
        "age_norm_mean": repr(flow.age_norm[0]),
        "age_norm_std": repr(flow.age_norm[1]),
    }


def _flow_sections(flow: FlowModel) -> list[tuple[str, bytes]]:
    out = []
    for name, arr in flow.parameters():
        role = "matrix" if arr.ndim == 2 else "vector"
        out.append((f"flow.{name}", encode_tensor(arr, role)))
    mix_i = 0
    for stage in flow.stages:
        if isinstance(stage, MixingTransform) and stage.kind == "orthogonal":
            out.append((f"flow.mix{mix_i:02d}.matrix", encode_tensor(stage.matrix, "matrix")))
        if isinstance(stage, MixingTransform):
            mix_i += 1
    return out


def _flow_from_parts(n_sub: int, header: dict, sections: dict[str, TensorRecord]) -> FlowModel:
    cfg = FlowConfig(
        n_sub=n_sub,
        n_lay=int(header["flow_n_lay"]),
        n_hid=int(header["flow_n_hid"]),
        hidden_width=int(header["flow_hidden_width"]),
        scale_clamp=float(header["flow_scale_clamp"]),
    )
    schedule: dict[int, str] = {}
    if header.get("flow_mixing"):
        for item in header["flow_mixing"].split(";"):
            pos, kind = item.split("=")
            schedule[int(pos)] = kind
    seed = int(header.get("flow_seed", 0))
    stages: list = []
    mix_i = 0
    for i in range(1, cfg.n_lay + 1):
        weights, biases = [], []
        for l in range(cfg.n_hid + 1):
            weights.append(sections[f"flow.layer{i:02d}.W{l}"].data.copy())
            biases.append(sections[f"flow.layer{i:02d}.b{l}"].data.copy())
        stages.append(CouplingLayer(i, n_sub, weights, biases, cfg.scale_clamp))
        if i in schedule:
            kind = schedule[i]
            matrix = sections[f"flow.mix{mix_i:02d}.matrix"].data.copy() if kind == "orthogonal" else None
            stages.append(MixingTransform(kind, matrix, seed=seed))
            mix_i += 1
    age_norm = (float(header["age_norm_mean"]), float(header["age_norm_std"]))
    return FlowModel(cfg, stages, age_norm=age_norm, seed=seed)


def save_aging_model(path, subspace: SubspaceModel, flow: FlowModel, provenance: dict | None = None) -> None:
    """Write the combined subspace + flow checkpoint with provenance echo."""
    meta = _subspace_meta(subspace)
    meta.update(_flow_meta(flow))
    for k, v in (provenance or {}).items():
        meta[f"prov_{k}"] = v
    sections = _subspace_sections(subspace, "subspace.") + _flow_sections(flow)
    atomic_write_bytes(path, _encode_checkpoint("aging", meta, sections))


def load_aging_model(path):
    """Returns (SubspaceModel, FlowModel, provenance dict)."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{path}: file not found")
    kind, header, sections = _decode_checkpoint(path.read_bytes(), str(path))
    if kind != "aging":
        raise ValidationError(f"{path}: expected an aging checkpoint, found {kind!r}")
    sub = _subspace_from_parts(header, sections, "subspace.")
    flow = _flow_from_parts(sub.n_sub, header, sections)
    prov = {k[5:]: v for k, v in header.items() if k.startswith("prov_")}
    return sub, flow, prov
