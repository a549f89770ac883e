"""G2APS-style annotation records and their line-delimited JSON schema.

Each line of an annotation file is one image::

    {"version": 1, "image_id": "...", "file": "images/x.png", "camera": "uav",
     "altitude_bucket": "20-30m", "width": 128, "height": 96,
     "boxes": [{"x": 3, "y": 4, "w": 10, "h": 22, "id": 17}, ...]}

``id == -1`` marks a person that was not given an identity label.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import IntegrityError, SchemaError

SCHEMA_VERSION = 1

CAMERAS = ("ground", "uav")
ALTITUDE_BUCKETS = ("20-30m", "30-40m", "40-50m", "50-60m")
NOT_APPLICABLE = "not-applicable"
SPLITS = ("train", "test")

# Box width histogram bins (pixels); last bin is open-ended.
WIDTH_BIN_EDGES = tuple(range(0, 105, 5))


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float
    identity: int = -1
    confidence: float | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w}, h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box corner must be non-negative, got ({self.x}, {self.y})")
        if self.identity < -1:
            raise ValueError(f"identity must be >= -1, got {self.identity}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    @property
    def labeled(self) -> bool:
        return self.identity >= 0

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def to_json(self) -> dict:
        d = {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "id": self.identity}
        if self.confidence is not None:
            d["score"] = self.confidence
        return d


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    file: str
    camera: str
    altitude_bucket: str
    width: int
    height: int
    boxes: tuple[BoundingBox, ...] = ()

    def __post_init__(self):
        if self.camera not in CAMERAS:
            raise ValueError(f"unknown camera {self.camera!r}")
        if self.camera == "ground" and self.altitude_bucket != NOT_APPLICABLE:
            raise ValueError("ground images carry no altitude bucket")
        if self.camera == "uav" and self.altitude_bucket not in ALTITUDE_BUCKETS + (NOT_APPLICABLE,):
            raise ValueError(f"unknown altitude bucket {self.altitude_bucket!r}")
        for b in self.boxes:
            if b.x + b.w > self.width or b.y + b.h > self.height:
                raise ValueError(f"box {b.xyxy()} exceeds image extent {self.width}x{self.height}")

    def identities(self) -> set[int]:
        return {b.identity for b in self.boxes if b.identity >= 0}

    def boxes_of(self, identity: int) -> list[BoundingBox]:
        return [b for b in self.boxes if b.identity == identity]

    def to_json(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "image_id": self.image_id,
            "file": self.file,
            "camera": self.camera,
            "altitude_bucket": self.altitude_bucket,
            "width": self.width,
            "height": self.height,
            "boxes": [b.to_json() for b in self.boxes],
        }


@dataclass
class AnnotationSet:
    records: list[ImageRecord]
    split: str = "train"
    root: Path | None = field(default=None, compare=False)
    # in-memory pixel arrays keyed by image_id (synthetic data); never compared
    images: dict[str, np.ndarray] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        seen = set()
        for r in self.records:
            if r.image_id in seen:
                raise IntegrityError(f"duplicate image_id {r.image_id!r}")
            seen.add(r.image_id)
        self._index = {r.image_id: r for r in self.records}

    @property
    def identity_universe(self) -> frozenset[int]:
        ids: set[int] = set()
        for r in self.records:
            ids |= r.identities()
        return frozenset(ids)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, image_id: str) -> ImageRecord:
        return self._index[image_id]

    def __contains__(self, image_id) -> bool:
        return image_id in self._index

    def box_counts(self) -> tuple[int, int, int]:
        """Return ``(labeled, unlabeled, total)`` box counts."""
        labeled = unlabeled = 0
        for r in self.records:
            for b in r.boxes:
                if b.labeled:
                    labeled += 1
                else:
                    unlabeled += 1
        return labeled, unlabeled, labeled + unlabeled

    def by_camera(self, camera: str) -> list[ImageRecord]:
        return [r for r in self.records if r.camera == camera]

    def load_image(self, image_id: str) -> np.ndarray:
        """Pixels as an ``(H, W, 3)`` uint8 array."""
        if image_id in self.images:
            return self.images[image_id]
        from PIL import Image

        rec = self[image_id]
        path = Path(rec.file)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))


def _require(obj: dict, key: str, kind, record):
    if key not in obj:
        raise SchemaError(record, key, "missing")
    value = obj[key]
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise SchemaError(record, key, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def record_from_json(obj: dict, where: str = "?") -> ImageRecord:
    if not isinstance(obj, dict):
        raise SchemaError(where, "<record>", "expected an object")
    version = _require(obj, "version", int, where)
    if version != SCHEMA_VERSION:
        raise SchemaError(where, "version", f"unsupported version {version}")
    image_id = _require(obj, "image_id", str, where)
    where = image_id
    boxes = []
    for k, b in enumerate(_require(obj, "boxes", list, where)):
        if not isinstance(b, dict):
            raise SchemaError(where, f"boxes[{k}]", "expected an object")
        vals = {key: _require(b, key, (int, float), where) for key in ("x", "y", "w", "h")}
        ident = _require(b, "id", int, where)
        score = b.get("score")
        try:
            boxes.append(BoundingBox(vals["x"], vals["y"], vals["w"], vals["h"], ident, score))
        except ValueError as exc:
            raise SchemaError(where, f"boxes[{k}]", str(exc)) from None
    try:
        return ImageRecord(
            image_id=image_id,
            file=_require(obj, "file", str, where),
            camera=_require(obj, "camera", str, where),
            altitude_bucket=_require(obj, "altitude_bucket", str, where),
            width=_require(obj, "width", int, where),
            height=_require(obj, "height", int, where),
            boxes=tuple(boxes),
        )
    except ValueError as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(where, "camera/altitude_bucket/boxes", str(exc)) from None


def load_annotations(path, split: str | None = None) -> AnnotationSet:
    """Read and validate a line-delimited annotation file.

    ``split`` defaults to ``"test"`` when the file name contains "test",
    otherwise ``"train"``.
    """
    path = Path(path)
    if split is None:
        split = "test" if "test" in path.name else "train"
    records = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}", "<json>", str(exc)) from None
            rec = record_from_json(obj, where=f"line {lineno}")
            if rec.image_id in seen:
                raise IntegrityError(f"duplicate image_id {rec.image_id!r} at line {lineno}")
            seen.add(rec.image_id)
            records.append(rec)
    aset = AnnotationSet(records, split=split, root=path.parent)
    labeled, unlabeled, total = aset.box_counts()
    assert labeled + unlabeled == sum(len(r.boxes) for r in records) == total
    return aset


def save_annotations(aset: AnnotationSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in aset.records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def merge_sets(sets: Iterable[AnnotationSet], split: str) -> AnnotationSet:
    records, images = [], {}
    for s in sets:
        records.extend(s.records)
        images.update(s.images)
    return AnnotationSet(records, split=split, images=images)


def dataset_stats(aset: AnnotationSet) -> dict:
    labeled, unlabeled, total = aset.box_counts()
    n_ids = len(aset.identity_universe)
    edges = np.asarray(WIDTH_BIN_EDGES + (np.inf,), dtype=float)
    hist = {}
    for cam in CAMERAS:
        widths = [b.w for r in aset.records if r.camera == cam for b in r.boxes]
        counts, _ = np.histogram(widths, bins=edges)
        hist[cam] = {
            "count": len(widths),
            "mean_width": float(np.mean(widths)) if widths else 0.0,
            "counts": counts.tolist(),
        }
    return {
        "split": aset.split,
        "images": len(aset.records),
        "images_per_camera": {cam: len(aset.by_camera(cam)) for cam in CAMERAS},
        "boxes": total,
        "labeled_boxes": labeled,
        "unlabeled_boxes": unlabeled,
        "identities": n_ids,
        "boxes_per_id": labeled / n_ids if n_ids else 0.0,
        "width_bin_edges": list(WIDTH_BIN_EDGES),
        "width_histogram": hist,
    }


def format_stats(stats: dict) -> str:
    lines = [
        f"split            {stats['split']}",
        f"#image           {stats['images']:,}  "
        + "  ".join(f"{k}={v:,}" for k, v in stats["images_per_camera"].items()),
        f"#ID              {stats['identities']:,}",
        f"#labeled box     {stats['labeled_boxes']:,}",
        f"#unlabeled box   {stats['unlabeled_boxes']:,}",
        f"#box             {stats['boxes']:,}",
        f"boxes per ID     {stats['boxes_per_id']:.2f}",
        "",
        "width histogram (px)",
    ]
    edges = stats["width_bin_edges"]
    labels = [f"{lo}-{hi}" for lo, hi in zip(edges[:-1], edges[1:])] + [f"{edges[-1]}+"]
    header = "  ".join(f"{cam:>8}" for cam in stats["width_histogram"])
    lines.append(f"{'bin':>8}  {header}")
    for k, label in enumerate(labels):
        row = "  ".join(f"{h['counts'][k]:>8}" for h in stats["width_histogram"].values())
        if any(h["counts"][k] for h in stats["width_histogram"].values()):
            lines.append(f"{label:>8}  {row}")
    return "\n".join(lines)
