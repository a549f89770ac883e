import importlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hkdsearch.data import AnnotationSet, BoundingBox, ImageRecord, ProtocolEntry, SearchProtocol
from hkdsearch.eval import (
    ImageDetections,
    detection_recall_ap,
    evaluate_stratified,
    format_report,
    format_stratified,
    iou,
    kernels,
    match_detections,
    search_map_cmc,
)
from hkdsearch.eval import _kernels_py

from .oracles import best_assignment_size, box_iou_xyxy, brute_force_ap


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 2, 2), (5, 5, 2, 2)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-12)
    assert iou(BoundingBox(0, 0, 2, 2), BoundingBox(1, 1, 2, 2)) == pytest.approx(0.1429, abs=1e-4)
    with pytest.raises(ValueError):
        iou((0, 0, 0, 2), (0, 0, 2, 2))


def test_match_examples():
    gt = np.array([[0, 0, 10, 10]])
    assert match_detections(np.array([[0, 0, 10, 10]]), gt).tolist() == [0]
    assert match_detections(np.array([[0, 0, 10, 10], [0, 0, 10, 9]]), gt).tolist() == [0, -1]
    assert match_detections(np.zeros((0, 4)), gt).tolist() == []
    assert match_detections(gt, np.zeros((0, 4))).tolist() == [-1]


def _rand_boxes(rng, n, span=30):
    xy = rng.uniform(0, span, (n, 2))
    wh = rng.uniform(4, 14, (n, 2))
    return np.hstack([xy, xy + wh])


@pytest.mark.parametrize("seed", range(40))
def test_match_equals_exhaustive_optimum_small(seed):
    rng = np.random.default_rng(seed)
    gts = _rand_boxes(rng, 3, span=25)
    # three detections jittered around the ground truth
    dets = gts[rng.permutation(3)] + rng.normal(0, 1.0, (3, 4))
    m = match_detections(dets, gts)
    assert len(set(m[m >= 0])) == int(np.sum(m >= 0))
    assert all(box_iou_xyxy(dets[i], gts[j]) > 0.5 for i, j in enumerate(m) if j >= 0)
    assert int(np.sum(m >= 0)) == best_assignment_size(dets.tolist(), gts.tolist())


# ---------------------------------------------------------------- detection


def test_detection_perfect():
    gts = {"a": np.array([[0, 0, 10, 10]]), "b": np.array([[5, 5, 15, 25]])}
    dets = {k: ImageDetections(v.copy(), np.array([0.9]), np.zeros((1, 4))) for k, v in gts.items()}
    assert detection_recall_ap(dets, gts) == (1.0, 1.0)


def test_detection_half_recall():
    gts = {"a": np.array([[0, 0, 10, 10], [20, 20, 30, 30]])}
    dets = {"a": ImageDetections(np.array([[0, 0, 10, 10]]), np.array([0.8]), np.zeros((1, 4)))}
    assert detection_recall_ap(dets, gts)[0] == 0.5


def test_detection_pr_curve_example():
    gts = {"a": np.array([[0, 0, 10, 10], [20, 0, 30, 10]])}
    boxes = np.array([[0, 0, 10, 10], [50, 50, 60, 60], [20, 0, 30, 10], [70, 0, 80, 10]], dtype=float)
    dets = {"a": ImageDetections(boxes, np.array([0.9, 0.8, 0.7, 0.6]), np.zeros((4, 4)))}
    recall, ap = detection_recall_ap(dets, gts)
    assert recall == 1.0
    assert ap == pytest.approx((1 + 2 / 3) / 2, abs=1e-6)
    assert ap == pytest.approx(0.8333, abs=1e-4)


def test_detection_no_gt_is_null():
    assert detection_recall_ap({}, {"a": np.zeros((0, 4))}) == (None, None)


# ------------------------------------------------------------------- search


def _search_instance(rng, n_images=3, max_dets=6, dim=4, identity=0):
    """Random gallery with <= max_dets detections in total; returns (aset, entry, dets, query)."""
    records = [ImageRecord("q", "q.png", "ground", "not-applicable", 100, 100, (BoundingBox(1, 1, 10, 20, identity),))]
    dets = {}
    remaining = max_dets
    for k in range(n_images):
        n_gt = int(rng.integers(0, 3))
        boxes = []
        for j in range(n_gt):
            boxes.append(BoundingBox(5 + 30 * j, 10, 12, 24, identity if rng.random() < 0.7 else int(rng.integers(-1, 3))))
        records.append(ImageRecord(f"g{k}", f"g{k}.png", "uav", "20-30m", 100, 100, tuple(boxes)))
        n = int(rng.integers(0, remaining + 1)) if k < n_images - 1 else remaining
        remaining -= n
        rows = []
        for _ in range(n):
            if boxes and rng.random() < 0.7:
                b = boxes[int(rng.integers(len(boxes)))]
                jit = rng.normal(0, 1.5, 4)
                rows.append([b.x + jit[0], b.y + jit[1], b.x + b.w + jit[2], b.y + b.h + jit[3]])
            else:
                x, y = rng.uniform(0, 80, 2)
                rows.append([x, y, x + 12, y + 24])
        emb = rng.normal(size=(n, dim))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True) + 1e-12
        dets[f"g{k}"] = ImageDetections(np.array(rows).reshape(-1, 4), rng.uniform(0.5, 1, n), emb.reshape(-1, dim))
    aset = AnnotationSet(records, split="test")
    entry = ProtocolEntry("q", records[0].boxes[0], identity, tuple(f"g{k}" for k in range(n_images)))
    q = rng.normal(size=dim)
    return aset, entry, dets, q / np.linalg.norm(q)


def _oracle_query_ap(aset, entry, dets, q):
    """Flags from an independent scan: per image, each ground-truth box of the
    query identity goes to the most similar unclaimed detection with IoU > 0.5."""
    sims, labels, num_gt = [], [], 0
    for g in entry.gallery:
        gts = [b.xyxy() for b in aset[g].boxes if b.identity == entry.identity]
        num_gt += len(gts)
        d = dets[g]
        s = [float(np.dot(e, q)) for e in d.embeddings]
        lab = [False] * len(s)
        order = sorted(range(len(s)), key=lambda i: (-s[i], i))
        for gt in gts:
            for i in order:
                if not lab[i] and box_iou_xyxy(d.boxes[i], gt) > 0.5:
                    lab[i] = True
                    break
        sims += s
        labels += lab
    return brute_force_ap(sims, labels, num_gt), labels, sims


def test_search_ap_example():
    flags = np.array([1, 0, 1, 0], dtype=np.uint8)
    assert kernels.average_precision(flags, 2) == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)
    assert _kernels_py.average_precision(flags, 2) == pytest.approx(0.8333, abs=1e-4)


def test_search_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        aset, entry, dets, q = _search_instance(rng)
        proto = SearchProtocol([entry], seed=0, gallery_size=len(entry.gallery), positives=0)
        report = search_map_cmc(proto, aset, dets, {entry.identity: q})
        expected, labels, _ = _oracle_query_ap(aset, entry, dets, q)
        assert abs(report.map - expected) <= 1e-9
        assert (report.flagged == [entry.identity]) == (not any(labels))


def _two_query_setup():
    recs = [
        ImageRecord("q0", "q0.png", "ground", "not-applicable", 100, 100, (BoundingBox(1, 1, 10, 20, 0),)),
        ImageRecord("q1", "q1.png", "ground", "not-applicable", 100, 100, (BoundingBox(1, 1, 10, 20, 1),)),
        ImageRecord("a", "a.png", "uav", "20-30m", 100, 100, (BoundingBox(0, 0, 10, 20, 0), BoundingBox(40, 0, 10, 20, 1))),
        ImageRecord("b", "b.png", "uav", "20-30m", 100, 100, (BoundingBox(0, 0, 10, 20, 1), BoundingBox(40, 0, 10, 20, -1))),
        ImageRecord("c", "c.png", "uav", "30-40m", 100, 100, (BoundingBox(0, 0, 10, 20, 0),)),
    ]
    aset = AnnotationSet(recs, split="test")
    e = np.eye(3)
    dets = {
        "a": ImageDetections(np.array([[0, 0, 10, 20], [40, 0, 50, 20]], float), np.array([0.9, 0.9]), e[[0, 1]]),
        "b": ImageDetections(np.array([[0, 0, 10, 20], [40, 0, 50, 20]], float), np.array([0.9, 0.9]), e[[1, 2]]),
        "c": ImageDetections(np.array([[0, 0, 10, 20]], float), np.array([0.9]), (e[0] + e[2])[None] / math.sqrt(2)),
    }
    entries = [
        ProtocolEntry("q0", recs[0].boxes[0], 0, ("a", "b", "c")),
        ProtocolEntry("q1", recs[1].boxes[0], 1, ("a", "b", "c")),
    ]
    proto = SearchProtocol(entries, seed=0, gallery_size=3, positives=2)
    queries = {0: e[0], 1: e[1]}
    return aset, proto, dets, queries


def test_search_hand_example_and_cmc():
    aset, proto, dets, queries = _two_query_setup()
    report = search_map_cmc(proto, aset, dets, queries)
    # both queries rank their two positives first
    assert report.map == 1.0
    assert report.top_k == {1: 1.0, 5: 1.0, 10: 1.0}
    assert report.num_queries == 2 and report.flagged == []
    text = format_report(report)
    assert "non-interpolated" in text


def test_zero_positive_query_flagged():
    aset, proto, dets, queries = _two_query_setup()
    dets = dict(dets, a=ImageDetections.empty(3), c=ImageDetections.empty(3))
    report = search_map_cmc(proto, aset, dets, queries)
    assert report.queries[0].ap == 0.0 and report.flagged == [0]
    assert report.top_k[1] == 0.5


def test_stratified_rows():
    aset, proto, dets, queries = _two_query_setup()
    rows = evaluate_stratified(proto, aset, dets, queries)
    assert rows["50-60m"] is None and rows["40-50m"] is None
    assert rows["20-30m"].num_queries == 2 and rows["30-40m"].num_queries == 1
    assert rows["full"].map == 1.0
    table = format_stratified({"model": rows})
    assert "full test dataset" in table and "50-60m" not in table


def test_stratified_single_bucket_equals_full():
    aset, proto, dets, queries = _two_query_setup()
    only_ab = SearchProtocol(
        [ProtocolEntry(e.query_image, e.query_box, e.identity, ("a", "b")) for e in proto.entries], 0, 2, 1
    )
    rows = evaluate_stratified(only_ab, aset, dets, queries)
    assert rows["20-30m"].map == rows["full"].map
    assert rows["20-30m"].top_k == rows["full"].top_k


def test_stratified_full_between_buckets():
    # same query in both strata: easy bucket ranks its positive first, hard bucket last
    recs = [ImageRecord("q", "q.png", "ground", "not-applicable", 100, 100, (BoundingBox(1, 1, 10, 20, 0),))]
    dets = {}
    e = np.eye(2)
    for name, bucket, emb in (("easy", "20-30m", [e[0], e[1]]), ("hard", "40-50m", [e[1], e[0] * 0.5 + e[1] * 0.5])):
        recs.append(ImageRecord(name, f"{name}.png", "uav", bucket, 100, 100, (BoundingBox(0, 0, 10, 20, 0), BoundingBox(40, 0, 10, 20, -1))))
        v = np.array(emb)
        dets[name] = ImageDetections(np.array([[0, 0, 10, 20], [40, 0, 50, 20]], float), np.ones(2), v / np.linalg.norm(v, axis=1, keepdims=True))
    aset = AnnotationSet(recs, split="test")
    proto = SearchProtocol([ProtocolEntry("q", recs[0].boxes[0], 0, ("easy", "hard"))], 0, 2, 2)
    rows = evaluate_stratified(proto, aset, dets, {0: e[0]})
    lo, hi = sorted([rows["20-30m"].map, rows["40-50m"].map])
    assert lo < hi and lo <= rows["full"].map <= hi


# -------------------------------------------------------------- properties


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_search_permutation_invariance_and_bounds(seed):
    rng = np.random.default_rng(seed)
    aset, entry, dets, q = _search_instance(rng)
    proto = SearchProtocol([entry], 0, len(entry.gallery), 0)
    base = search_map_cmc(proto, aset, dets, {entry.identity: q})
    shuffled = {}
    for k, d in dets.items():
        p = rng.permutation(len(d))
        shuffled[k] = ImageDetections(d.boxes[p], d.scores[p], d.embeddings[p])
    again = search_map_cmc(proto, aset, shuffled, {entry.identity: q})
    assert again.map == pytest.approx(base.map, abs=1e-12)
    assert again.top_k == base.top_k
    assert 0.0 <= base.map <= 1.0 and all(0.0 <= v <= 1.0 for v in base.top_k.values())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_detection_permutation_invariance_and_bounds(seed):
    rng = np.random.default_rng(seed)
    gts = {f"i{k}": _rand_boxes(rng, int(rng.integers(1, 4))) for k in range(3)}
    dets = {}
    for k, g in gts.items():
        n = int(rng.integers(0, 5))
        boxes = np.vstack([g + rng.normal(0, 1, g.shape), _rand_boxes(rng, n)])
        dets[k] = ImageDetections(boxes, rng.uniform(0, 1, len(boxes)), np.zeros((len(boxes), 2)))
    r1 = detection_recall_ap(dets, gts)
    shuffled = {}
    for k, d in dets.items():
        p = rng.permutation(len(d))
        shuffled[k] = ImageDetections(d.boxes[p], d.scores[p], d.embeddings[p])
    assert detection_recall_ap(shuffled, gts) == pytest.approx(r1, abs=1e-12)
    assert all(0.0 <= v <= 1.0 for v in r1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=12), st.integers(0, 12), st.integers(0, 3))
def test_false_positive_never_increases_ap(flags, pos, extra):
    n_gt = sum(flags) + extra
    f = np.array(flags, dtype=np.uint8)
    pos = min(pos, len(f))
    worse = np.insert(f, pos, 0)
    assert kernels.average_precision(worse, max(n_gt, 1)) <= kernels.average_precision(f, max(n_gt, 1)) + 1e-15
    assert kernels.interpolated_ap(worse, max(n_gt, 1)) <= kernels.interpolated_ap(f, max(n_gt, 1)) + 1e-15


def test_true_match_at_rank_one_keeps_top1():
    aset, proto, dets, queries = _two_query_setup()
    before = search_map_cmc(proto, aset, dets, queries).top_k[1]
    a = dets["a"]
    boosted = dict(dets, a=ImageDetections(np.vstack([a.boxes, [[0, 0, 10, 20]]]), np.r_[a.scores, 1.0], np.vstack([a.embeddings, [[1, 0, 0]]])))
    assert search_map_cmc(proto, aset, boosted, queries).top_k[1] >= before


# ------------------------------------------------------------------ kernels


def test_backend_reports_compiled_or_fallback():
    assert kernels.BACKEND in ("cython", "python")


def test_pure_python_switch(monkeypatch):
    monkeypatch.setenv("HKDSEARCH_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("HKDSEARCH_PURE_PYTHON")
        importlib.reload(kernels)


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_compiled_kernels_match_numpy(seed):
    from hkdsearch.eval import _kernels

    rng = np.random.default_rng(seed)
    a = _rand_boxes(rng, int(rng.integers(0, 8)))
    b = _rand_boxes(rng, int(rng.integers(0, 8)))
    np.testing.assert_allclose(_kernels.iou_matrix(a, b), _kernels_py.iou_matrix(a, b), atol=1e-12)
    if len(a) and len(b):
        assert _kernels.greedy_match(a, b, 0.5).tolist() == _kernels_py.greedy_match(a, b, 0.5).tolist()
    flags = (rng.random(int(rng.integers(0, 15))) < 0.4).astype(np.uint8)
    n = int(flags.sum()) + int(rng.integers(0, 3))
    assert _kernels.average_precision(flags, n) == pytest.approx(_kernels_py.average_precision(flags, n), abs=1e-12)
    assert _kernels.interpolated_ap(flags, n) == pytest.approx(_kernels_py.interpolated_ap(flags, n), abs=1e-12)
