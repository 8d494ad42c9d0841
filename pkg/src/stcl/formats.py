"""On-disk formats: metadata CSV, embedding blocks, manifests, checkpoints, tensors."""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .geo import AreaSet, GeoPoint, ImageRecord
from .pairs import PairManifest, PosPair, same_heading

PathLike = Union[str, Path]

METADATA_HEADER = ["id", "lat", "lon", "heading_deg", "capture_year", "capture_month", "city", "area_id"]
MANIFEST_HEADER = ["pair_type", "id_a", "id_b", "dist_m", "year_a", "year_b", "heading_a", "heading_b"]
EMB_MAGIC = b"STCLEMB1"
CKPT_MAGIC = b"STCLCKP1"
TENSOR_MAGIC = b"STCLTEN1"


class FormatError(ValueError):
    pass


def dump_json(obj, path: PathLike) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Metadata CSV
# --------------------------------------------------------------------------


def load_metadata(path: PathLike) -> List[ImageRecord]:
    records = []
    seen = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METADATA_HEADER:
            raise FormatError(f"{path}: row 1: expected header {','.join(METADATA_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(METADATA_HEADER):
                raise FormatError(f"{path}: row {row_no}: expected {len(METADATA_HEADER)} fields, got {len(row)}")
            rid, lat, lon, heading, year, month, city, area = row
            if rid in seen:
                raise FormatError(f"{path}: row {row_no}: duplicate id {rid!r} (first at row {seen[rid]})")
            try:
                rec = ImageRecord(
                    id=rid,
                    pos=GeoPoint(float(lat), float(lon)),
                    heading_deg=float(heading),
                    capture_year=int(year),
                    capture_month=int(month),
                    city=city,
                    area_id=area or None,
                )
            except ValueError as exc:
                raise FormatError(f"{path}: row {row_no}: {exc}") from None
            seen[rid] = row_no
            records.append(rec)
    return records


def save_metadata(records: Sequence[ImageRecord], path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METADATA_HEADER)
        for r in records:
            w.writerow([r.id, repr(r.pos.lat), repr(r.pos.lon), repr(r.heading_deg), r.capture_year, r.capture_month, r.city, r.area_id or ""])


def load_areas(path: PathLike) -> AreaSet:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return AreaSet.from_dict(obj)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed area file ({exc})") from None


def save_areas(areas: AreaSet, path: PathLike) -> None:
    dump_json(areas.to_dict(), path)


# --------------------------------------------------------------------------
# Embeddings
# --------------------------------------------------------------------------


@dataclass
class EmbeddingSet:
    """Row-aligned ids and feature matrix (float64 in memory)."""

    ids: List[str]
    matrix: np.ndarray
    renormalized: bool = False

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            self.matrix = self.matrix.reshape(len(self.ids), -1)
        if len(self.ids) != self.matrix.shape[0]:
            raise ValueError(f"{len(self.ids)} ids for {self.matrix.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in embedding set")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def normalized(self) -> "EmbeddingSet":
        norms = np.linalg.norm(self.matrix, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero embedding row cannot be normalized")
        changed = bool(np.any(np.abs(norms - 1.0) > 1e-6))
        return EmbeddingSet(self.ids, self.matrix / norms, changed)

    def subset(self, ids: Sequence[str]) -> "EmbeddingSet":
        row = {i: n for n, i in enumerate(self.ids)}
        return EmbeddingSet(list(ids), self.matrix[[row[i] for i in ids]], self.renormalized)

    def row_of(self) -> dict:
        return {i: n for n, i in enumerate(self.ids)}


def ids_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".ids")


def save_embeddings(emb: EmbeddingSet, path: PathLike) -> None:
    block = np.ascontiguousarray(emb.matrix, dtype="<f4")
    n, d = block.shape
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", n, d) + block.tobytes())
    ids_path(path).write_text("".join(f"{i}\n" for i in emb.ids), encoding="utf-8")


def load_embeddings(path: PathLike, normalize: bool = True) -> EmbeddingSet:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != EMB_MAGIC:
        raise FormatError(f"{path}: not an embedding file (bad magic)")
    n, d = struct.unpack("<II", data[8:16])
    if len(data) != 16 + 4 * n * d:
        raise FormatError(f"{path}: expected {16 + 4 * n * d} bytes, found {len(data)}")
    matrix = np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64).reshape(n, d)
    ip = ids_path(path)
    if not ip.exists():
        raise FormatError(f"{path}: missing companion ids file {ip}")
    ids = ip.read_text(encoding="utf-8").splitlines()
    if len(ids) != n:
        raise FormatError(f"{path}: {len(ids)} ids for {n} rows")
    emb = EmbeddingSet(ids, matrix)
    return emb.normalized() if normalize and n else emb


# --------------------------------------------------------------------------
# Pair manifests
# --------------------------------------------------------------------------


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_manifest(manifest: PairManifest, path: PathLike, extra: Optional[dict] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for p in manifest.pairs:
            w.writerow([p.pair_type, p.id_a, p.id_b, repr(p.dist_m), p.year_a, p.year_b, repr(p.heading_a), repr(p.heading_b)])
    side = {
        "seed": manifest.seed,
        "source_dataset": manifest.source_dataset,
        "constraint_summary": manifest.constraint_summary,
        "n_pairs": len(manifest),
    }
    side.update(extra or {})
    dump_json(side, sidecar_path(path))


def load_manifest(path: PathLike) -> PairManifest:
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != MANIFEST_HEADER:
            raise FormatError(f"{path}: row 1: expected header {','.join(MANIFEST_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            try:
                kind, a, b, dist, ya, yb, ha, hb = row
                pairs.append(
                    PosPair(kind, a, b, float(dist), same_heading(float(ha), float(hb)), int(ya), int(yb), float(ha), float(hb))
                )
            except ValueError as exc:
                raise FormatError(f"{path}: row {row_no}: {exc}") from None
    side = sidecar_path(path)
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    return PairManifest(pairs, int(meta.get("seed", 0)), meta.get("source_dataset", ""), meta.get("constraint_summary", {}))


# --------------------------------------------------------------------------
# Header + float32 block files (checkpoints, attention/feature tensors)
# --------------------------------------------------------------------------


def _write_blocked(path: PathLike, magic: bytes, header: dict, block: np.ndarray) -> None:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<I", len(head)) + head)
        fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())


def _read_blocked(path: PathLike, magic: bytes) -> Tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:8] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic.decode()}")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{path}: corrupt header") from None
    body = data[12 + hlen :]
    if len(body) % 4:
        raise FormatError(f"{path}: truncated float block")
    return header, np.frombuffer(body, dtype="<f4").astype(np.float64)


def save_checkpoint(encoder, path: PathLike, seed: int = 0, config: Optional[dict] = None) -> None:
    header = {"layer_sizes": encoder.layer_sizes, "n_params": encoder.n_params, "seed": seed, "config": config or {}}
    _write_blocked(path, CKPT_MAGIC, header, encoder.get_flat())


def load_checkpoint(path: PathLike):
    from .encoder import ToyEncoder

    header, flat = _read_blocked(path, CKPT_MAGIC)
    sizes = header["layer_sizes"]
    if flat.size != header["n_params"]:
        raise FormatError(f"{path}: expected {header['n_params']} parameters, found {flat.size}")
    enc = ToyEncoder(
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
    )
    enc.set_flat(flat)
    return enc, header


def save_tensor(path: PathLike, kind: str, array: np.ndarray, rows: int, cols: int, patch_size: float = 16.0, class_token: bool = False) -> None:
    """Write an attention ``(layers, heads, N, N)`` or feature ``(layers, N, C)`` tensor."""
    array = np.asarray(array)
    header = {"kind": kind, "shape": list(array.shape), "rows": rows, "cols": cols, "patch_size": patch_size, "class_token": bool(class_token)}
    if kind == "attention":
        header.update(layers=array.shape[0], heads=array.shape[1])
    elif kind == "features":
        header.update(layers=array.shape[0], channels=array.shape[2])
    else:
        raise ValueError(f"unknown tensor kind {kind!r}")
    _write_blocked(path, TENSOR_MAGIC, header, array)


def load_tensor(path: PathLike) -> Tuple[dict, np.ndarray]:
    header, flat = _read_blocked(path, TENSOR_MAGIC)
    shape = tuple(header["shape"])
    if int(np.prod(shape)) != flat.size:
        raise FormatError(f"{path}: header shape {shape} does not match {flat.size} floats")
    return header, flat.reshape(shape)


def write_csv(path: PathLike, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
