"""Detection (Recall / AP) and person search (mAP / CMC) metrics.

A gallery detection is a true match for a query when its IoU with a
ground-truth box of the query identity exceeds 0.5. Within one gallery
image each such ground-truth box is claimed by at most one detection, the
most similar one that overlaps it. Search AP is the mean precision at the
true-match ranks, normalised by the number of ground-truth boxes of the
query identity in the gallery, so positives that were never detected
count against the query. Detection AP uses all-point interpolation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..data.annotations import ALTITUDE_BUCKETS, AnnotationSet, BoundingBox
from ..data.protocol import ProtocolEntry, SearchProtocol, stratify_by_altitude
from . import kernels

log = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5
TOP_K = (1, 5, 10)


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BoundingBox
    score: float
    embedding: np.ndarray


@dataclass
class ImageDetections:
    """All detections of one image as arrays; boxes are ``x1, y1, x2, y2``."""

    boxes: np.ndarray
    scores: np.ndarray
    embeddings: np.ndarray

    @classmethod
    def empty(cls, dim: int = 256) -> "ImageDetections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros((0, dim)))

    @classmethod
    def from_detections(cls, dets: Sequence[Detection], dim: int = 256) -> "ImageDetections":
        if not dets:
            return cls.empty(dim)
        return cls(
            np.array([d.box.xyxy() for d in dets], dtype=np.float64),
            np.array([d.score for d in dets], dtype=np.float64),
            np.stack([np.asarray(d.embedding, dtype=np.float64) for d in dets]),
        )

    def __len__(self):
        return len(self.scores)


def as_image_detections(dets) -> dict[str, ImageDetections]:
    """Accept ``{image_id: ImageDetections}``, ``{image_id: [Detection]}`` or a flat list of Detection."""
    if isinstance(dets, Mapping):
        return {k: v if isinstance(v, ImageDetections) else ImageDetections.from_detections(v) for k, v in dets.items()}
    grouped: dict[str, list[Detection]] = {}
    for d in dets:
        grouped.setdefault(d.image_id, []).append(d)
    return {k: ImageDetections.from_detections(v) for k, v in grouped.items()}


def iou(a: BoundingBox | Sequence[float], b: BoundingBox | Sequence[float]) -> float:
    """IoU of two boxes, given as BoundingBox or ``(x, y, w, h)`` tuples."""
    boxes = []
    for box in (a, b):
        x, y, w, h = (box.x, box.y, box.w, box.h) if isinstance(box, BoundingBox) else tuple(box)
        if not (w > 0 and h > 0):
            raise ValueError(f"zero-area box {(x, y, w, h)}")
        boxes.append((x, y, x + w, y + h))
    a, b = boxes
    return float(kernels.iou_matrix(np.array([a]), np.array([b]))[0, 0])


def match_detections(dets: np.ndarray, gts: np.ndarray, threshold: float = IOU_THRESHOLD) -> np.ndarray:
    """One-to-one greedy matching; ``dets`` must already be in descending score order.

    Returns, per detection, the index of the matched ground truth or -1.
    """
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if len(dets) == 0 or len(gts) == 0:
        return np.full(len(dets), -1, dtype=np.int64)
    return kernels.greedy_match(dets, gts, threshold)


def _gt_array(rec_boxes) -> np.ndarray:
    return np.array([b.xyxy() for b in rec_boxes], dtype=np.float64).reshape(-1, 4)


def detection_recall_ap(dets, gts: AnnotationSet | Mapping[str, np.ndarray], threshold: float = IOU_THRESHOLD):
    """Return ``(recall, ap)`` over all images; ``(None, None)`` when there is no ground truth."""
    dets = as_image_detections(dets)
    if isinstance(gts, AnnotationSet):
        gt_map = {r.image_id: _gt_array(r.boxes) for r in gts.records}
    else:
        gt_map = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in gts.items()}
    n_gt = sum(len(v) for v in gt_map.values())
    if n_gt == 0:
        log.warning("detection_recall_ap: no ground-truth boxes; metrics undefined")
        return None, None
    scores, flags = [], []
    matched = 0
    for image_id in sorted(gt_map):
        d = dets.get(image_id)
        if d is None or len(d) == 0:
            continue
        order = np.argsort(-d.scores, kind="stable")
        m = match_detections(d.boxes[order], gt_map[image_id], threshold)
        scores.append(d.scores[order])
        flags.append(m >= 0)
        matched += int(np.sum(m >= 0))
    if not scores:
        return 0.0, 0.0
    scores = np.concatenate(scores)
    flags = np.concatenate(flags)
    order = np.argsort(-scores, kind="stable")
    ap = kernels.interpolated_ap(flags[order].astype(np.uint8), n_gt)
    return matched / n_gt, float(ap)


@dataclass
class QueryResult:
    identity: int
    ap: float
    first_hit: int | None  # 1-based rank of the first true match
    num_gt: int
    num_candidates: int


@dataclass
class MetricReport:
    map: float
    top_k: dict[int, float]
    num_queries: int
    flagged: list[int] = field(default_factory=list)
    recall: float | None = None
    ap: float | None = None
    queries: list[QueryResult] = field(default_factory=list, repr=False)
    strata: dict[str, "MetricReport | None"] = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {
            "ap_interpolation": "search: non-interpolated; detection: all-point",
            "map": self.map,
            "top_k": {str(k): v for k, v in self.top_k.items()},
            "num_queries": self.num_queries,
            "flagged_zero_positive_queries": self.flagged,
            "recall": self.recall,
            "ap": self.ap,
        }
        if self.strata:
            d["strata"] = {k: (v.to_json() if v is not None else None) for k, v in self.strata.items()}
        return d


def rank_gallery(
    entry: ProtocolEntry,
    aset: AnnotationSet,
    gallery_dets: Mapping[str, ImageDetections],
    query_vec: np.ndarray,
    threshold: float = IOU_THRESHOLD,
):
    """Similarity-ranked true-match flags for one query.

    Returns ``(flags_in_rank_order, num_gt)``. Ties in similarity keep the
    gallery order (image order, then detection index).
    """
    sims_all, flags_all = [], []
    num_gt = 0
    for g in entry.gallery:
        gt = _gt_array(aset[g].boxes_of(entry.identity))
        num_gt += len(gt)
        d = gallery_dets.get(g)
        if d is None or len(d) == 0:
            continue
        sims = d.embeddings @ query_vec
        flags = np.zeros(len(d), dtype=bool)
        if len(gt):
            by_sim = np.argsort(-sims, kind="stable")
            ious = kernels.iou_matrix(d.boxes[by_sim], gt)
            taken = np.zeros(len(by_sim), dtype=bool)
            for j in range(len(gt)):
                hit = np.flatnonzero((ious[:, j] > threshold) & ~taken)
                if hit.size:
                    taken[hit[0]] = True
                    flags[by_sim[hit[0]]] = True
        sims_all.append(sims)
        flags_all.append(flags)
    if not sims_all:
        return np.zeros(0, dtype=bool), num_gt
    sims = np.concatenate(sims_all)
    flags = np.concatenate(flags_all)
    order = np.argsort(-sims, kind="stable")
    return flags[order], num_gt


def search_map_cmc(
    protocol: SearchProtocol,
    aset: AnnotationSet,
    gallery_dets,
    query_embedding: Callable[[ProtocolEntry], np.ndarray] | Mapping[int, np.ndarray],
    top_k: Sequence[int] = TOP_K,
    threshold: float = IOU_THRESHOLD,
) -> MetricReport:
    """Mean AP and CMC top-k over the protocol.

    ``query_embedding`` maps an entry (callable) or an identity (mapping) to
    its query vector. A query whose positives were never detected scores
    AP 0 and a CMC miss, and its identity is listed in ``flagged``.
    """
    gallery_dets = as_image_detections(gallery_dets)
    lookup = query_embedding if callable(query_embedding) else (lambda e: query_embedding[e.identity])
    results = []
    for entry in protocol.entries:
        q = np.asarray(lookup(entry), dtype=np.float64)
        flags, num_gt = rank_gallery(entry, aset, gallery_dets, q, threshold)
        hits = np.flatnonzero(flags)
        ap = kernels.average_precision(flags.astype(np.uint8), num_gt) if hits.size else 0.0
        results.append(QueryResult(entry.identity, float(ap), int(hits[0]) + 1 if hits.size else None, num_gt, len(flags)))
    n = len(results)
    flagged = [r.identity for r in results if r.first_hit is None]
    if flagged:
        log.info("%d queries have no detected positive; counted as misses", len(flagged))
    return MetricReport(
        map=float(np.mean([r.ap for r in results])) if n else 0.0,
        top_k={k: (sum(r.first_hit is not None and r.first_hit <= k for r in results) / n if n else 0.0) for k in top_k},
        num_queries=n,
        flagged=flagged,
        queries=results,
    )


def evaluate_stratified(
    protocol: SearchProtocol,
    aset: AnnotationSet,
    gallery_dets,
    query_embedding,
    buckets: Sequence[str] = ALTITUDE_BUCKETS,
) -> dict[str, MetricReport | None]:
    """Per-altitude-bucket reports plus ``"full"``; buckets without entries map to None."""
    gallery_dets = as_image_detections(gallery_dets)
    out: dict[str, MetricReport | None] = {}
    for b in buckets:
        sub = stratify_by_altitude(protocol, aset, b)
        out[b] = search_map_cmc(sub, aset, gallery_dets, query_embedding) if len(sub) else None
    out["full"] = search_map_cmc(protocol, aset, gallery_dets, query_embedding)
    return out


def format_stratified(rows: Mapping[str, Mapping[str, MetricReport | None]]) -> str:
    """Per-height table: one row per method, mAP / top-1 per bucket and on the full test set."""
    cols = [c for c in ALTITUDE_BUCKETS if any(r.get(c) is not None for r in rows.values())] + ["full"]
    head = f"{'Method':<20}" + "".join(f"{('full test dataset' if c == 'full' else c):>20}" for c in cols)
    sub = f"{'':<20}" + "".join(f"{'mAP':>10}{'top-1':>10}" for _ in cols)
    lines = [head, sub]
    for name, strata in rows.items():
        cells = []
        for c in cols:
            r = strata.get(c)
            cells.append(f"{'-':>10}{'-':>10}" if r is None else f"{100 * r.map:>10.2f}{100 * r.top_k[1]:>10.2f}")
        lines.append(f"{name:<20}" + "".join(cells))
    return "\n".join(lines)


def format_report(report: MetricReport, name: str = "model") -> str:
    lines = ["(search AP: non-interpolated; detection AP: all-point interpolation)"]
    lines.append(f"{'':<20}{'mAP':>10}" + "".join(f"{'top-' + str(k):>10}" for k in report.top_k) + f"{'Recall':>10}{'AP':>10}")
    det = "".join(f"{'-':>10}" if v is None else f"{100 * v:>10.2f}" for v in (report.recall, report.ap))
    lines.append(f"{name:<20}{100 * report.map:>10.2f}" + "".join(f"{100 * v:>10.2f}" for v in report.top_k.values()) + det)
    if report.flagged:
        lines.append(f"queries without a detected positive (counted as misses): {len(report.flagged)}")
    return "\n".join(lines)
