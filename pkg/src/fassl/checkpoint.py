"""Binary serialization for parameter trees and synthetic datasets.

Checkpoint container layout (all integers little-endian):

    magic "FSSL" | format version u16 | entry count u32
    per entry: name length u16 | name UTF-8 | rank u8 | dims u32 each
               | payload as little-endian f64

Entries are written in canonical name order, so identical trees produce
byte-identical files. Dataset dumps reuse the same container with tensors
named per clip, which is enough for reproducibility audits.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ContractError
from .model import ParamTree

MAGIC = b"FSSL"
FORMAT_VERSION = 1


def _pack_entries(entries) -> bytes:
    chunks = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(entries))]
    for name, tensor in entries:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContractError(f"entry name too long: {name[:40]}...")
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def _unpack_entries(blob: bytes, source: str) -> list[tuple[str, Tensor]]:
    if blob[:4] != MAGIC:
        raise ContractError(f"{source}: bad magic bytes (not a checkpoint container)")
    offset = 4
    (version,) = struct.unpack_from("<H", blob, offset)
    offset += 2
    if version != FORMAT_VERSION:
        raise ContractError(f"{source}: unsupported format version {version}")
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(dims)
        offset += 8 * n
        entries.append((name, Tensor(payload.astype(np.float64))))
    if offset != len(blob):
        raise ContractError(f"{source}: {len(blob) - offset} trailing bytes after last entry")
    return entries


def save_params(params: ParamTree, path: str | Path) -> None:
    Path(path).write_bytes(_pack_entries(list(params.items())))


def load_params(path: str | Path) -> ParamTree:
    return ParamTree(_unpack_entries(Path(path).read_bytes(), str(path)))


def params_bytes(params: ParamTree) -> bytes:
    """Serialized form without touching disk (used for byte-equality checks)."""
    return _pack_entries(list(params.items()))


def save_dataset(dataset, path: str | Path) -> None:
    """Dump a SynthDataset into the container format (same header discipline)."""
    entries = [
        ("meta.n_classes", Tensor(float(dataset.n_classes))),
        ("meta.split", Tensor(float({"train": 0, "test": 1}[dataset.split]))),
    ]
    for key in sorted(dataset.generator):
        entries.append((f"gen.{key}", Tensor(np.asarray(dataset.generator[key], dtype=np.float64))))
    for clip in dataset.clips:
        entries.append((f"clip.{clip.clip_id:08d}.features", clip.features))
        entries.append((f"clip.{clip.clip_id:08d}.label", Tensor(float(clip.label))))
    Path(path).write_bytes(_pack_entries(entries))


def load_dataset(path: str | Path):
    from .data import Clip, SynthDataset

    entries = dict(_unpack_entries(Path(path).read_bytes(), str(path)))
    n_classes = int(entries.pop("meta.n_classes").item())
    split = {0: "train", 1: "test"}[int(entries.pop("meta.split").item())]
    generator = {}
    clips_raw: dict[int, dict] = {}
    for name, tensor in entries.items():
        if name.startswith("gen."):
            generator[name[len("gen."):]] = tensor.data
        elif name.startswith("clip."):
            _, cid, field = name.split(".")
            clips_raw.setdefault(int(cid), {})[field] = tensor
        else:
            raise ContractError(f"{path}: unexpected entry {name!r} in dataset dump")
    clips = [
        Clip(features=fields["features"], label=int(fields["label"].item()), clip_id=cid)
        for cid, fields in sorted(clips_raw.items())
    ]
    return SynthDataset(clips=clips, n_classes=n_classes, generator=generator, split=split)
