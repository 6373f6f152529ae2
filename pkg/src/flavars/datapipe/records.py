"""Dataset records and the on-disk manifest + JSONL + image-file layout."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from flavars.encoders import GeoCoordinate
from flavars.errors import DataError

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
RECORDS_NAME = "records.jsonl"


@dataclass(frozen=True)
class Grounding:
    phrase: str
    bbox: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max in pixels


@dataclass(frozen=True)
class GroundedCaption:
    text: str
    groundings: tuple[Grounding, ...] = ()
    warning: str | None = None

    def validate(self, width: int, height: int) -> None:
        for g in self.groundings:
            reason = bbox_problem(g.phrase, g.bbox, width, height)
            if reason:
                raise DataError(f"grounding {g.phrase!r}: {reason}")

    def to_dict(self) -> dict:
        out = {
            "text": self.text,
            "groundings": [{"phrase": g.phrase, "bbox": list(g.bbox)} for g in self.groundings],
        }
        if self.warning:
            out["warning"] = self.warning
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GroundedCaption":
        gs = tuple(Grounding(g["phrase"], tuple(g["bbox"])) for g in data.get("groundings", []))
        return cls(data["text"], gs, data.get("warning"))


def bbox_problem(phrase, bbox, width: int, height: int) -> str | None:
    """Describe why a grounding is invalid, or None when it is fine."""
    if not isinstance(phrase, str) or not phrase.strip():
        return "empty phrase"
    if len(bbox) != 4:
        return "bbox must have four numbers"
    x0, y0, x1, y1 = bbox
    if not all(math.isfinite(v) for v in bbox):
        return "non-finite coordinate"
    if x0 < 0 or y0 < 0:
        return "negative coordinate"
    if x1 > width:
        return f"x_max {x1} exceeds image width {width}"
    if y1 > height:
        return f"y_max {y1} exceeds image height {height}"
    if x0 >= x1:
        return f"degenerate box: x_min {x0} >= x_max {x1}"
    if y0 >= y1:
        return f"degenerate box: y_min {y0} >= y_max {y1}"
    return None


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray  # H x W x C uint8
    caption: str
    coord: GeoCoordinate
    score: float | None = None
    grounded: GroundedCaption | None = None
    # evaluation-only extras: class name and dense label map
    label: str | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.score is not None and not (math.isfinite(self.score) and -1.0 <= self.score <= 1.0):
            raise DataError(f"record {self.id}: score {self.score} outside [-1, 1]")


@dataclass
class DatasetManifest:
    schema_version: int
    image_size: tuple[int, int, int]
    record_count: int
    shards: list[str] = field(default_factory=lambda: [RECORDS_NAME])
    tokenizer_fingerprint: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "image_size": list(self.image_size),
            "record_count": self.record_count,
            "shards": list(self.shards),
            "tokenizer_fingerprint": self.tokenizer_fingerprint,
        }


@dataclass
class Dataset:
    manifest: DatasetManifest
    records: list[SampleRecord]
    root: Path | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def by_id(self) -> dict[str, SampleRecord]:
        return {r.id: r for r in self.records}

    def subset(self, ids: Sequence[str]) -> list[SampleRecord]:
        table = self.by_id()
        missing = [i for i in ids if i not in table]
        if missing:
            raise DataError(f"unknown record ids: {missing[:5]}")
        return [table[i] for i in ids]


def record_to_line(rec: SampleRecord, image_path: str, mask_path: str | None = None) -> dict:
    line = {
        "id": rec.id,
        "caption": rec.caption,
        "lat": rec.coord.lat,
        "lon": rec.coord.lon,
        "score": rec.score,
        "image_path": image_path,
        "grounded": rec.grounded.to_dict() if rec.grounded else None,
    }
    if rec.label is not None:
        line["label"] = rec.label
    if mask_path is not None:
        line["mask_path"] = mask_path
    return line


def _save_png(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def _load_png(path: Path, channels: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if channels is not None and arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_dataset(root, records: Sequence[SampleRecord], tokenizer_fingerprint: str | None = None, force: bool = False) -> DatasetManifest:
    root = Path(root)
    if (root / MANIFEST_NAME).exists() and not force:
        raise FileExistsError(f"{root / MANIFEST_NAME} exists; pass force to overwrite")
    if not records:
        raise DataError("refusing to write an empty dataset")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("record ids must be unique")
    shape = tuple(int(s) for s in records[0].image.shape)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        if tuple(rec.image.shape) != shape:
            raise DataError(f"record {rec.id}: image shape {rec.image.shape} != {shape}")
        img_rel = f"images/{rec.id}.png"
        _save_png(root / img_rel, rec.image.astype(np.uint8))
        mask_rel = None
        if rec.mask is not None:
            (root / "masks").mkdir(exist_ok=True)
            mask_rel = f"masks/{rec.id}.png"
            _save_png(root / mask_rel, rec.mask.astype(np.uint8))
        lines.append(json.dumps(record_to_line(rec, img_rel, mask_rel), sort_keys=True))
    (root / RECORDS_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest = DatasetManifest(SCHEMA_VERSION, shape, len(records), [RECORDS_NAME], tokenizer_fingerprint)
    (root / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def parse_record_line(line: dict, root: Path, channels: int) -> SampleRecord:
    try:
        rid = str(line["id"])
        image = _load_png(root / line["image_path"], channels)
        grounded = GroundedCaption.from_dict(line["grounded"]) if line.get("grounded") else None
        mask = _load_png(root / line["mask_path"]) if line.get("mask_path") else None
        return SampleRecord(
            id=rid,
            image=image,
            caption=line["caption"],
            coord=GeoCoordinate(float(line["lat"]), float(line["lon"])),
            score=None if line.get("score") is None else float(line["score"]),
            grounded=grounded,
            label=line.get("label"),
            mask=mask,
        )
    except KeyError as exc:
        raise DataError(f"record line missing field {exc}") from exc


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise DataError(f"no dataset manifest at {mpath}")
    data = json.loads(mpath.read_text(encoding="utf-8"))
    if data.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported dataset schema_version {data.get('schema_version')!r}")
    manifest = DatasetManifest(
        data["schema_version"], tuple(data["image_size"]), data["record_count"], list(data["shards"]), data.get("tokenizer_fingerprint")
    )
    channels = manifest.image_size[2]
    records = []
    for shard in manifest.shards:
        for raw in (root / shard).read_text(encoding="utf-8").splitlines():
            if raw.strip():
                records.append(parse_record_line(json.loads(raw), root, channels))
    if len(records) != manifest.record_count:
        raise DataError(f"manifest says {manifest.record_count} records, shards hold {len(records)}")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate record ids in dataset")
    for rec in records:
        if tuple(rec.image.shape) != tuple(manifest.image_size):
            raise DataError(f"record {rec.id}: image shape {rec.image.shape} != manifest {manifest.image_size}")
    return Dataset(manifest, records, root)
