"""Bit-exact binary persistence: checkpoints and sparse deltas.

Both formats are a JSON header followed by a raw little-endian float32
body. A checkpoint stores every tensor densely. A delta stores, against
a base checkpoint identified by content hash, only the values of
mask-selected backbone scalars (u32 flat indices + f32 values, grouped
by selection round) plus the dense adapter and head tensors, so its size
scales with the trainable budget rather than the model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, attach_adapters
from .backbone import BackboneConfig, DenseViT, build_backbone
from .selection import SelectionMask, SelectionPool
from .store import GROUP_ADAPTER, GROUP_HEAD, ParameterStore

CHECKPOINT_MAGIC = b"PLCKPT01"
DELTA_MAGIC = b"PLDELT01"
FORMAT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


class CheckpointError(ValueError):
    pass


def fnv1a64(data: bytes) -> str:
    """64-bit FNV-1a content hash, hex encoded (integrity, not security)."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return f"{h:016x}"


def _write(path: Path, magic: bytes, header: dict, body: bytes) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(body)


def _read(path: Path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != magic:
        raise CheckpointError(f"{path}: bad magic (expected {magic!r})")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[16:16 + header_len].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {header.get('format_version')}")
    return header, raw[16 + header_len:]


@dataclass
class Checkpoint:
    backbone: BackboneConfig
    adapter: AdapterConfig | None
    mask_manifest: dict | None
    arrays: dict[str, np.ndarray]
    groups: dict[str, str]
    body_hash: str

    def to_model(self) -> DenseViT:
        model = build_backbone(self.backbone, seed=0)
        if self.adapter is not None:
            attach_adapters(model, self.adapter, seed=0)
        model.store.restore(self.arrays)
        return model


def save_checkpoint(path: str | Path, store: ParameterStore, backbone: BackboneConfig,
                    adapter: AdapterConfig | None = None,
                    mask_manifest: dict | None = None) -> Path:
    path = Path(path)
    records = []
    chunks = []
    offset = 0
    for name, tensor in store.items():
        data = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        records.append({"name": name, "shape": list(tensor.data.shape),
                        "dtype": "float32", "offset": offset, "nbytes": len(data),
                        "group": store.group_of(name)})
        chunks.append(data)
        offset += len(data)
    body = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "backbone": backbone.to_dict(),
        "adapter": adapter.to_dict() if adapter else None,
        "mask": mask_manifest,
        "tensors": records,
        "body_nbytes": len(body),
        "body_fnv1a64": fnv1a64(body),
    }
    _write(path, CHECKPOINT_MAGIC, header, body)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, body = _read(Path(path), CHECKPOINT_MAGIC)
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint file")
    arrays: dict[str, np.ndarray] = {}
    groups: dict[str, str] = {}
    expected = 0
    for rec in header["tensors"]:
        if rec["offset"] != expected:
            raise CheckpointError(
                f"{path}: tensor {rec['name']!r} offset {rec['offset']} not contiguous")
        end = rec["offset"] + rec["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: body truncated at tensor {rec['name']!r}")
        flat = np.frombuffer(body, dtype="<f4", count=rec["nbytes"] // 4,
                             offset=rec["offset"])
        arrays[rec["name"]] = flat.reshape(rec["shape"]).astype(np.float32)
        groups[rec["name"]] = rec["group"]
        expected = end
    if expected != len(body) or expected != header["body_nbytes"]:
        raise CheckpointError(
            f"{path}: body is {len(body)} bytes, records cover {expected}, "
            f"header says {header['body_nbytes']}")
    if fnv1a64(body) != header["body_fnv1a64"]:
        raise CheckpointError(f"{path}: content hash mismatch")
    return Checkpoint(
        backbone=BackboneConfig.from_dict(header["backbone"]),
        adapter=AdapterConfig.from_dict(header["adapter"]) if header["adapter"] else None,
        mask_manifest=header["mask"],
        arrays=arrays,
        groups=groups,
        body_hash=header["body_fnv1a64"],
    )


def export_delta(path: str | Path, store: ParameterStore, mask: SelectionMask,
                 base: Checkpoint, backbone: BackboneConfig,
                 adapter: AdapterConfig | None) -> Path:
    """Write the adapted model as (base hash, sparse backbone changes, dense
    adapter/head tensors). Verifies that unselected backbone scalars still
    match the base, which is what makes the delta lossless."""
    path = Path(path)
    chunks: list[bytes] = []
    offset = 0
    sparse_records = []
    for name in mask.pool.names:
        base_flat = base.arrays[name].reshape(-1)
        cur_flat = store[name].data.reshape(-1)
        selected = mask.selected(name)
        if not np.array_equal(base_flat[~selected], cur_flat[~selected]):
            raise CheckpointError(
                f"unselected scalars of {name!r} differ from the base checkpoint")
        order = mask.indices(name)
        rounds = mask.rounds(name)
        groups_meta = []
        for r in np.unique(rounds):
            idx = np.sort(order[rounds == r]).astype("<u4")
            values = cur_flat[idx].astype("<f4")
            groups_meta.append({"round": int(r), "count": int(idx.size),
                                "indices_offset": offset,
                                "values_offset": offset + idx.nbytes})
            chunks.append(idx.tobytes())
            chunks.append(values.tobytes())
            offset += idx.nbytes + values.nbytes
        if groups_meta:
            sparse_records.append({"name": name, "rounds": groups_meta})
    dense_records = []
    for name, tensor in store.items():
        group = store.group_of(name)
        if group not in (GROUP_ADAPTER, GROUP_HEAD):
            continue
        data = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        dense_records.append({"name": name, "shape": list(tensor.data.shape),
                              "dtype": "float32", "offset": offset,
                              "nbytes": len(data), "group": group})
        chunks.append(data)
        offset += len(data)
    body = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "delta",
        "base_fnv1a64": base.body_hash,
        "backbone": backbone.to_dict(),
        "adapter": adapter.to_dict() if adapter else None,
        "sparse": sparse_records,
        "dense": dense_records,
        "body_nbytes": len(body),
    }
    _write(path, DELTA_MAGIC, header, body)
    return path


def apply_delta(base: Checkpoint, path: str | Path) -> tuple[DenseViT, dict]:
    """Rebuild the adapted model from base + delta; returns (model, mask manifest)."""
    path = Path(path)
    header, body = _read(path, DELTA_MAGIC)
    if header.get("kind") != "delta":
        raise CheckpointError(f"{path}: not a delta file")
    if header["base_fnv1a64"] != base.body_hash:
        raise CheckpointError(
            f"{path}: base-hash mismatch (delta wants {header['base_fnv1a64']}, "
            f"base is {base.body_hash})")
    if len(body) != header["body_nbytes"]:
        raise CheckpointError(f"{path}: body is {len(body)} bytes, "
                              f"header says {header['body_nbytes']}")
    backbone = BackboneConfig.from_dict(header["backbone"])
    adapter = AdapterConfig.from_dict(header["adapter"]) if header["adapter"] else None
    model = build_backbone(backbone, seed=0)
    if adapter is not None:
        attach_adapters(model, adapter, seed=0)

    for name, arr in base.arrays.items():
        if base.groups[name] == GROUP_HEAD:
            continue  # the delta carries the adapted head densely
        np.copyto(model.store[name].data, arr)

    manifest: dict[str, dict] = {}
    for rec in header["sparse"]:
        name = rec["name"]
        flat = model.store[name].data.reshape(-1)
        all_idx, all_rounds = [], []
        for grp in rec["rounds"]:
            count = grp["count"]
            idx = np.frombuffer(body, dtype="<u4", count=count,
                                offset=grp["indices_offset"]).astype(np.int64)
            values = np.frombuffer(body, dtype="<f4", count=count,
                                   offset=grp["values_offset"])
            flat[idx] = values
            all_idx.append(idx)
            all_rounds.append(np.full(count, grp["round"], dtype=np.int64))
        idx = np.concatenate(all_idx)
        rounds = np.concatenate(all_rounds)
        order = np.argsort(idx, kind="stable")
        manifest[name] = {"indices": idx[order].tolist(),
                          "rounds": rounds[order].tolist()}
    for rec in header["dense"]:
        flat = np.frombuffer(body, dtype="<f4", count=rec["nbytes"] // 4,
                             offset=rec["offset"])
        model.store[rec["name"]].data[...] = flat.reshape(rec["shape"])
    return model, manifest


def mask_from_delta(path: str | Path) -> dict:
    """Just the mask manifest of a delta (for mask transfer)."""
    header, body = _read(Path(path), DELTA_MAGIC)
    manifest: dict[str, dict] = {}
    for rec in header["sparse"]:
        all_idx, all_rounds = [], []
        for grp in rec["rounds"]:
            idx = np.frombuffer(body, dtype="<u4", count=grp["count"],
                                offset=grp["indices_offset"]).astype(np.int64)
            all_idx.append(idx)
            all_rounds.append(np.full(grp["count"], grp["round"], dtype=np.int64))
        idx = np.concatenate(all_idx)
        rounds = np.concatenate(all_rounds)
        order = np.argsort(idx, kind="stable")
        manifest[rec["name"]] = {"indices": idx[order].tolist(),
                                 "rounds": rounds[order].tolist()}
    return manifest
