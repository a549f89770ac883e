"""Seeded synthetic dual-view (ground + UAV) person search data.

Persons are identity-coded textured rectangles: shirt colour, trouser
colour and a stripe flag are fixed per identity and shared by both views.
UAV-view persons are rendered smaller by ``scale_ratio_uav`` and under a
different illumination and background, which gives a miniature version of
the ground-to-aerial resolution gap.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from .annotations import (
    ALTITUDE_BUCKETS,
    NOT_APPLICABLE,
    AnnotationSet,
    BoundingBox,
    ImageRecord,
    save_annotations,
)

PALETTE = np.array(
    [
        [220, 30, 30],
        [30, 170, 40],
        [40, 60, 220],
        [235, 215, 30],
        [200, 40, 200],
        [30, 200, 210],
        [245, 130, 20],
        [120, 40, 160],
        [250, 250, 250],
        [20, 20, 20],
    ],
    dtype=np.float64,
)
SKIN = np.array([225, 185, 150], dtype=np.float64)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_ids: int = 8
    boxes_per_id: int = 16
    ground_fraction: float = 0.25
    images_per_view: int = 64
    image_size: tuple[int, int] = (96, 128)  # (height, width)
    scale_ratio_uav: float = 0.5
    ground_width: tuple[int, int] = (14, 22)
    ground_aspect: float = 2.2
    uav_aspect: float = 2.0
    unlabeled_per_image: int = 1
    altitude_buckets: tuple[str, ...] = ("20-30m",)
    shared_identities: bool = True

    def counts_per_id(self) -> tuple[int, int]:
        """Labeled appearances per identity as ``(ground, uav)``."""
        n_ground = min(max(1, round(self.boxes_per_id * self.ground_fraction)), self.boxes_per_id - 1)
        return n_ground, self.boxes_per_id - n_ground

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        obj = dict(obj)
        for key in ("image_size", "ground_width", "altitude_buckets"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def _validate(cfg: SynthConfig):
    if cfg.num_ids < 2:
        raise ConfigurationError("num_ids must be >= 2: the search protocol needs distractor identities")
    if not cfg.shared_identities and cfg.num_ids < 4:
        raise ConfigurationError("disjoint train/test identities need num_ids >= 4")
    if cfg.boxes_per_id < 2:
        raise ConfigurationError("boxes_per_id must be >= 2 (one ground and one UAV appearance)")
    for b in cfg.altitude_buckets:
        if b not in ALTITUDE_BUCKETS:
            raise ConfigurationError(f"unknown altitude bucket {b!r}")
    n_ground, n_uav = cfg.counts_per_id()
    if max(n_ground, n_uav) > cfg.images_per_view:
        raise ConfigurationError(
            f"an identity needs {max(n_ground, n_uav)} distinct images but images_per_view={cfg.images_per_view}"
        )
    h, w = cfg.image_size
    if cfg.ground_width[1] * cfg.ground_aspect + 2 > h or cfg.ground_width[1] + 2 > w:
        raise ConfigurationError(f"image_size {cfg.image_size} too small for ground_width {cfg.ground_width}")


def _appearances(num_ids: int, rng: np.random.Generator) -> list[dict]:
    n_col = len(PALETTE)
    combos = [(a, b) for a, b in itertools.product(range(n_col), repeat=2) if a != b]
    combos = [(a, b, s) for s in (0, 1) for a, b in combos]
    if num_ids > len(combos):
        raise ConfigurationError(f"at most {len(combos)} synthetic identities are supported")
    order = [combos[k] for k in rng.permutation(len(combos))]
    # distinct-looking identities first: no reused shirt or trouser colour, no swapped pair
    picked, tops, bottoms, pairs = [], set(), set(), set()
    for c in order:
        if len(picked) < num_ids and c[0] not in tops and c[1] not in bottoms and frozenset(c[:2]) not in pairs:
            picked.append(c)
            tops.add(c[0])
            bottoms.add(c[1])
            pairs.add(frozenset(c[:2]))
    picked += [c for c in order if c not in picked][: num_ids - len(picked)]
    return [{"top": PALETTE[a], "bottom": PALETTE[b], "stripes": s} for a, b, s in picked]


def _assign(ids: list[int], per_id: int, n_images: int, rng: np.random.Generator) -> list[list[int]]:
    """Spread ``per_id`` appearances of each identity over distinct images,
    keeping the per-image load balanced."""
    slots: list[list[int]] = [[] for _ in range(n_images)]
    pool = [pid for pid in ids for _ in range(per_id)]
    pool = [pool[k] for k in rng.permutation(len(pool))]
    for pid in pool:
        load = np.array([len(s) if pid not in s else np.iinfo(np.int64).max for s in slots], dtype=np.int64)
        best = np.flatnonzero(load == load.min())
        slots[int(rng.choice(best))].append(pid)
    return slots


def _stratified_widths(n: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    base = lo + (hi - lo) * (np.arange(n) + 0.5) / max(n, 1)
    return base[rng.permutation(n)]


def _place(sizes, height, width, rng, image_id, margin=2, tries=500):
    placed = []
    for w, h in sizes:
        for _ in range(tries):
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            if all(
                x + w + margin <= px or px + pw + margin <= x or y + h + margin <= py or py + ph + margin <= y
                for px, py, pw, ph in placed
            ):
                placed.append((x, y, w, h))
                break
        else:
            raise ConfigurationError(
                f"cannot place {len(sizes)} persons without overlap in {width}x{height} image {image_id}"
            )
    return placed


def _render_person(img, x, y, w, h, look, illum, rng):
    top, bottom = look["top"] * illum, look["bottom"] * illum
    head = max(1, round(h * 0.18))
    torso_end = head + max(1, round((h - head) * 0.5))
    patch = np.empty((h, w, 3))
    patch[:head] = SKIN * illum
    patch[head:torso_end] = top
    patch[torso_end:] = bottom
    if look["stripes"]:
        rows = np.arange(head, torso_end)
        patch[rows[(rows - head) % 2 == 1]] *= 0.45
    patch += rng.normal(0.0, 4.0, size=patch.shape)
    img[y : y + h, x : x + w] = patch


def _render_split(cfg, split, ids, looks, rng) -> AnnotationSet:
    H, W = cfg.image_size
    n_ground, n_uav = cfg.counts_per_id()
    records, images = [], {}
    for camera, per_id in (("ground", n_ground), ("uav", n_uav)):
        slots = _assign(ids, per_id, cfg.images_per_view, rng)
        n_persons = sum(len(s) for s in slots) + cfg.unlabeled_per_image * cfg.images_per_view
        lo, hi = cfg.ground_width
        widths = _stratified_widths(n_persons, lo, hi, rng)
        if camera == "uav":
            widths = widths * cfg.scale_ratio_uav
        aspect = cfg.ground_aspect if camera == "ground" else cfg.uav_aspect
        cursor = 0
        for k, labeled in enumerate(slots):
            image_id = f"{split}_{camera}_{k:04d}"
            persons = labeled + [-1] * cfg.unlabeled_per_image
            order = rng.permutation(len(persons))
            persons = [persons[i] for i in order]
            sizes = []
            for _ in persons:
                w = max(2, int(round(widths[cursor])))
                sizes.append((w, max(3, int(round(w * aspect)))))
                cursor += 1
            boxes_xywh = _place(sizes, H, W, rng, image_id)
            if camera == "ground":
                img = np.full((H, W, 3), rng.uniform(95, 135)) + np.array([0.0, 0.0, 6.0])
                illum, bucket = 1.0, NOT_APPLICABLE
            else:
                img = np.full((H, W, 3), 1.0) * np.array([85.0, 115.0, 75.0]) * rng.uniform(0.9, 1.1)
                illum = 0.85
                bucket = cfg.altitude_buckets[k % len(cfg.altitude_buckets)]
            img += rng.normal(0.0, 6.0, size=img.shape)
            boxes = []
            for pid, (x, y, w, h) in zip(persons, boxes_xywh):
                if pid >= 0:
                    look = looks[pid]
                else:
                    g1, g2 = rng.uniform(60, 200, size=2)
                    look = {"top": np.full(3, g1), "bottom": np.full(3, g2), "stripes": 0}
                _render_person(img, x, y, w, h, look, illum, rng)
                boxes.append(BoundingBox(x, y, w, h, pid))
            images[image_id] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            records.append(ImageRecord(image_id, f"images/{image_id}.png", camera, bucket, W, H, tuple(boxes)))
    return AnnotationSet(records, split=split, images=images)


def synth_generate(config: SynthConfig | None = None, **overrides) -> tuple[AnnotationSet, AnnotationSet]:
    """Generate a ``(train, test)`` pair with in-memory pixel data."""
    cfg = config or SynthConfig()
    if overrides:
        cfg = SynthConfig(**{**asdict(cfg), **overrides})
    _validate(cfg)
    rng = np.random.default_rng(cfg.seed)
    looks = _appearances(cfg.num_ids, rng)
    all_ids = list(range(cfg.num_ids))
    if cfg.shared_identities:
        train_ids = test_ids = all_ids
    else:
        half = cfg.num_ids // 2
        train_ids, test_ids = all_ids[:half], all_ids[half:]
    train = _render_split(cfg, "train", train_ids, looks, rng)
    test = _render_split(cfg, "test", test_ids, looks, rng)
    return train, test


def write_synthetic(train: AnnotationSet, test: AnnotationSet, out_dir) -> dict[str, Path]:
    """Write PNG images and ``train.jsonl`` / ``test.jsonl`` under ``out_dir``."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    paths = {}
    for aset in (train, test):
        for rec in aset.records:
            Image.fromarray(aset.images[rec.image_id]).save(out / rec.file)
        paths[aset.split] = out / f"{aset.split}.jsonl"
        save_annotations(aset, paths[aset.split])
        aset.root = out
    return paths
