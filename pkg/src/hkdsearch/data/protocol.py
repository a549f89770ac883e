"""Query/gallery search protocol: one ground-camera query per test identity,
searched against a gallery of UAV images of which a fixed number contain
the identity."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import SchemaError
from .annotations import ALTITUDE_BUCKETS, AnnotationSet, BoundingBox

PROTOCOL_VERSION = 1


@dataclass(frozen=True)
class ProtocolEntry:
    query_image: str
    query_box: BoundingBox
    identity: int
    gallery: tuple[str, ...]


@dataclass
class SearchProtocol:
    entries: list[ProtocolEntry]
    seed: int | None = None
    gallery_size: int = 50
    positives: int = 10
    skipped: list[dict] = field(default_factory=list)
    annotations: str | None = None

    def __len__(self):
        return len(self.entries)

    def to_json(self) -> dict:
        return {
            "version": PROTOCOL_VERSION,
            "seed": self.seed,
            "gallery_size": self.gallery_size,
            "positives": self.positives,
            "annotations": self.annotations,
            "entries": [
                {
                    "query": {"image_id": e.query_image, "box": e.query_box.to_json()},
                    "identity": e.identity,
                    "gallery": list(e.gallery),
                }
                for e in self.entries
            ],
            "skipped": self.skipped,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SearchProtocol":
        if obj.get("version") != PROTOCOL_VERSION:
            raise SchemaError("protocol", "version", f"unsupported version {obj.get('version')!r}")
        entries = []
        for k, e in enumerate(obj.get("entries", [])):
            try:
                b = e["query"]["box"]
                box = BoundingBox(b["x"], b["y"], b["w"], b["h"], b["id"])
                entries.append(ProtocolEntry(e["query"]["image_id"], box, int(e["identity"]), tuple(e["gallery"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"entry {k}", str(exc), "malformed protocol entry") from None
        return cls(
            entries=entries,
            seed=obj.get("seed"),
            gallery_size=obj.get("gallery_size", 50),
            positives=obj.get("positives", 10),
            skipped=list(obj.get("skipped", [])),
            annotations=obj.get("annotations"),
        )


def dumps_protocol(protocol: SearchProtocol) -> str:
    return json.dumps(protocol.to_json(), sort_keys=True, indent=1) + "\n"


def save_protocol(protocol: SearchProtocol, path) -> None:
    Path(path).write_text(dumps_protocol(protocol))


def load_protocol(path) -> SearchProtocol:
    return SearchProtocol.from_json(json.loads(Path(path).read_text()))


def build_search_protocol(
    test: AnnotationSet, gallery_size: int = 50, positives: int = 10, seed: int = 0
) -> SearchProtocol:
    """Build one entry per eligible identity.

    An identity is eligible when it appears in at least one ground image,
    in at least ``positives`` UAV images, and enough UAV images lack it to
    fill the rest of the gallery. Ineligible identities land in
    ``protocol.skipped`` with the reason.
    """
    if positives < 1 or gallery_size < positives:
        raise ValueError("need 1 <= positives <= gallery_size")
    rng = np.random.default_rng(seed)
    ground = sorted(test.by_camera("ground"), key=lambda r: r.image_id)
    uav = sorted(test.by_camera("uav"), key=lambda r: r.image_id)
    uav_ids = [r.image_id for r in uav]

    entries, skipped = [], []
    for pid in sorted(test.identity_universe):
        queries = [r for r in ground if pid in r.identities()]
        with_id = [r.image_id for r in uav if pid in r.identities()]
        without = [i for i, r in zip(uav_ids, uav) if pid not in r.identities()]
        if not queries:
            skipped.append({"identity": pid, "reason": "no ground-camera appearance"})
            continue
        if len(with_id) < positives:
            skipped.append({"identity": pid, "reason": f"only {len(with_id)} UAV images (< {positives})"})
            continue
        if len(without) < gallery_size - positives:
            skipped.append({"identity": pid, "reason": f"only {len(without)} distractor UAV images"})
            continue
        query_rec = queries[int(rng.integers(len(queries)))]
        pos = rng.choice(len(with_id), size=positives, replace=False)
        neg = rng.choice(len(without), size=gallery_size - positives, replace=False)
        gallery = sorted([with_id[i] for i in pos] + [without[i] for i in neg])
        entries.append(ProtocolEntry(query_rec.image_id, query_rec.boxes_of(pid)[0], pid, tuple(gallery)))
    return SearchProtocol(entries, seed=seed, gallery_size=gallery_size, positives=positives, skipped=skipped)


def positive_images(entry: ProtocolEntry, aset: AnnotationSet) -> list[str]:
    return [g for g in entry.gallery if entry.identity in aset[g].identities()]


def stratify_by_altitude(protocol: SearchProtocol, aset: AnnotationSet, bucket: str) -> SearchProtocol:
    """Restrict every gallery to images of one altitude bucket.

    Entries left without a positive image are dropped and reported.
    """
    if bucket not in ALTITUDE_BUCKETS:
        raise ValueError(f"unknown altitude bucket {bucket!r}; expected one of {ALTITUDE_BUCKETS}")
    entries, skipped = [], []
    for e in protocol.entries:
        gallery = tuple(g for g in e.gallery if aset[g].altitude_bucket == bucket)
        if not any(e.identity in aset[g].identities() for g in gallery):
            skipped.append({"identity": e.identity, "reason": f"no positive gallery image at {bucket}"})
            continue
        entries.append(ProtocolEntry(e.query_image, e.query_box, e.identity, gallery))
    return SearchProtocol(
        entries,
        seed=protocol.seed,
        gallery_size=protocol.gallery_size,
        positives=protocol.positives,
        skipped=skipped,
        annotations=protocol.annotations,
    )
