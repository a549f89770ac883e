import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torchvision.models.detection.image_list import ImageList

from hkdsearch.errors import ConfigurationError
from hkdsearch.losses import OimState, oim_loss
from hkdsearch.model import FeatureMap, SearchNet, detach_features, pool_rois, tiny_config


def _model(**kw):
    torch.manual_seed(kw.pop("seed", 0))
    return SearchNet(tiny_config(**kw))


def _scene(n=2, size=64):
    g = torch.Generator().manual_seed(1)
    imgs = torch.rand(n, 3, size, size, generator=g) * 0.2
    targets = []
    for k in range(n):
        imgs[k, :, 10:34, 20:32] = torch.tensor([0.9, 0.1, 0.1]).view(3, 1, 1)
        imgs[k, :, 30:50, 40:50] = torch.tensor([0.1, 0.2, 0.9]).view(3, 1, 1)
        targets.append(
            dict(boxes=torch.tensor([[20.0, 10.0, 32.0, 34.0], [40.0, 30.0, 50.0, 50.0]]), labels=torch.tensor([0, -1]))
        )
    return imgs, targets


# ---------------------------------------------------------------- backbone


def test_backbone_shape_and_stride():
    m = _model(tiny_channels=(32, 64, 96)).eval()
    fm = m.backbone_forward(torch.rand(1, 3, 64, 64))
    assert fm.stride == 8
    assert fm.values.shape[-2:] == (8, 8)
    m = _model().eval()
    assert m.backbone_forward(torch.rand(1, 3, 64, 64)).values.shape[-2:] == (64 // m.cfg.stride,) * 2


def test_backbone_deterministic_and_finite():
    m = _model().eval()
    x = torch.rand(1, 3, 64, 64).repeat(2, 1, 1, 1)
    fm = m.backbone_forward(x)
    assert torch.equal(fm.values[0], fm.values[1])
    assert torch.isfinite(m.backbone_forward(torch.zeros(1, 3, 64, 64)).values).all()


def test_backbone_rejects_non_finite():
    m = _model().eval()
    x = torch.zeros(1, 3, 64, 64)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        m.backbone_forward(x)


# --------------------------------------------------------------------- RPN


def test_proposal_cap_and_bounds():
    m = _model(rpn_post_nms_top_n_test=10).eval()
    fm = m.backbone_forward(torch.rand(2, 3, 64, 80))
    props, losses = m.propose_regions(fm)
    assert losses == {}
    for p in props:
        assert len(p) <= 10
        assert (p[:, 0] >= 0).all() and (p[:, 2] <= 80).all() and (p[:, 1] >= 0).all() and (p[:, 3] <= 64).all()
    again, _ = m.propose_regions(m.backbone_forward(torch.rand(2, 3, 64, 80).copy_(fm.image_list.tensors * 0)))
    assert all(len(p) <= 10 for p in again)


def test_proposals_deterministic():
    m = _model().eval()
    x = torch.rand(1, 3, 64, 64)
    a, _ = m.propose_regions(m.backbone_forward(x))
    b, _ = m.propose_regions(m.backbone_forward(x))
    assert torch.equal(a[0], b[0])


def test_proposals_empty_feature_map():
    m = _model().eval()
    fm = FeatureMap(torch.zeros(1, 96, 0, 0), 8, ImageList(torch.zeros(1, 3, 0, 0), [(0, 0)]))
    with pytest.raises(ConfigurationError):
        m.propose_regions(fm)


# ---------------------------------------------------------- detection head


def test_detection_head_fixed_point():
    m = _model(box_batch_size_per_image=8, box_positive_fraction=1.0).train()
    imgs, targets = _scene(1)
    fm = m.backbone_forward(imgs)
    gt = targets[0]["boxes"]
    boxes, fg, gt_idx = [gt.clone()], [torch.ones(2, dtype=torch.bool)], [torch.tensor([0, 1])]
    assert torch.equal(m._reg_targets(boxes, fg, gt_idx, targets), torch.zeros(2, 4))
    with torch.no_grad():
        m.box_head.bbox_pred.weight.zero_()
        m.box_head.bbox_pred.bias.zero_()
    out = m.detection_head(fm, [gt.clone()], targets)
    assert out.losses["l_reg1"].item() == 0.0


def test_detection_head_background_cross_entropy():
    m = _model(box_batch_size_per_image=1000).train()
    fm = m.backbone_forward(torch.rand(1, 3, 64, 64))
    props = [torch.tensor([[2.0, 2.0, 14.0, 30.0], [30.0, 20.0, 44.0, 50.0], [5.0, 40.0, 20.0, 60.0]])]
    targets = [dict(boxes=torch.zeros(0, 4), labels=torch.zeros(0, dtype=torch.long))]
    out = m.detection_head(fm, props, targets)
    logits, _ = m.box_head(pool_rois(fm, props, 7).values)
    l = logits.detach().double()
    expected = float(np.mean([math.log(math.exp(a) + math.exp(b)) - a for a, b in l.tolist()]))
    assert out.losses["l_cls1"].item() == pytest.approx(expected, abs=1e-5)
    assert out.losses["l_reg1"].item() == 0.0


def test_detection_head_eval_has_no_losses():
    m = _model().eval()
    fm = m.backbone_forward(torch.rand(1, 3, 64, 64))
    out = m.detection_head(fm, [torch.tensor([[2.0, 2.0, 14.0, 30.0]])])
    assert out.losses == {}
    b = out.boxes[0]
    assert (b[:, 0] >= 0).all() and (b[:, 2] <= 64).all()


# ------------------------------------------------------------------ pooling


def _fm(values, stride=1):
    h, w = values.shape[-2:]
    return FeatureMap(values, stride, ImageList(torch.zeros(1, 3, h * stride, w * stride), [(h * stride, w * stride)]))


def test_pool_constant_map():
    fm = _fm(torch.full((1, 3, 10, 12), 2.5))
    out = pool_rois(fm, [torch.tensor([[1.0, 2.0, 9.0, 7.0], [0.0, 0.0, 12.0, 10.0]])], 4)
    assert out.values.shape == (2, 3, 4, 4)
    assert torch.allclose(out.values, torch.full_like(out.values, 2.5))


def test_pool_identity_case():
    v = torch.randn(1, 2, 6, 6)
    out = pool_rois(_fm(v), [torch.tensor([[0.0, 0.0, 6.0, 6.0]])], 6, sampling_ratio=1)
    assert torch.allclose(out.values[0], v[0], atol=1e-6)


def _bilinear(img, y, x):
    h, w = img.shape
    y, x = min(max(y, 0.0), h - 1), min(max(x, 0.0), w - 1)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    dy, dx = y - y0, x - x0
    return (img[y0, x0] * (1 - dy) * (1 - dx) + img[y0, x1] * (1 - dy) * dx + img[y1, x0] * dy * (1 - dx) + img[y1, x1] * dy * dx)


@pytest.mark.parametrize("shift", [(0.0, 0.0), (1.3, 0.7), (2.25, 3.5)])
def test_pool_ramp_matches_dense_sampling(shift):
    h, w, stride, p = 12, 14, 2, 3
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ramp = 0.7 * xx - 0.3 * yy + 1.0
    fm = _fm(torch.tensor(ramp, dtype=torch.float64)[None, None], stride)
    x1, y1 = 4.0 + shift[0], 5.0 + shift[1]
    box = [x1, y1, x1 + 12.0, y1 + 9.0]
    out = pool_rois(fm, [torch.tensor([box], dtype=torch.float64)], p).values[0, 0].numpy()
    # pixel-centre aligned: feature coordinate = image coordinate / stride - 0.5
    fx1, fy1, fx2, fy2 = (c / stride - 0.5 for c in box)
    bw, bh = (fx2 - fx1) / p, (fy2 - fy1) / p
    dense = 40
    for i in range(p):
        for j in range(p):
            ys = fy1 + bh * (i + (np.arange(dense) + 0.5) / dense)
            xs = fx1 + bw * (j + (np.arange(dense) + 0.5) / dense)
            ref = np.mean([_bilinear(ramp, y, x) for y in ys for x in xs])
            assert out[i, j] == pytest.approx(ref, abs=1e-6)


def test_pool_zero_area():
    with pytest.raises(ValueError):
        pool_rois(_fm(torch.zeros(1, 1, 4, 4)), [torch.tensor([[1.0, 1.0, 1.0, 3.0]])], 2)


# ---------------------------------------------------------------- ReID heads


def _rois(m, n=3):
    fm = m.backbone_forward(torch.rand(1, 3, 64, 64))
    boxes = torch.tensor([[2.0, 2.0, 14.0, 30.0], [30.0, 20.0, 44.0, 50.0], [5.0, 40.0, 20.0, 60.0]])[:n]
    return pool_rois(fm, [boxes], 7)


def test_embeddings_shape_and_norm():
    m = _model().eval()
    emb, (logit, deltas) = m.reid_head_forward("student", _rois(m))
    assert emb.embeddings.shape == (3, 256) and emb.branch == "student"
    assert torch.allclose(emb.embeddings.norm(dim=1), torch.ones(3), atol=1e-5)
    assert logit.shape == (3,) and deltas.shape == (3, 4)


def test_student_teacher_independent():
    m = _model().eval()
    rois = _rois(m)
    s, _ = m.reid_head_forward("student", rois)
    t, _ = m.reid_head_forward("teacher", rois)
    s2, _ = m.reid_head_forward("student", rois)
    assert torch.equal(s.embeddings, s2.embeddings)
    assert (s.embeddings * t.embeddings).sum(1).max().item() < 1 - 1e-3
    assert [p.shape for p in m.student_head.parameters()] == [p.shape for p in m.teacher_head.parameters()]


def test_detach_values_identical():
    m = _model().eval()
    rois = _rois(m)
    d = detach_features(rois)
    assert torch.equal(d.values, rois.values) and not d.values.requires_grad


def _teacher_oim_grads(detach):
    m = _model(seed=3).train()
    m.detach_teacher = detach
    imgs, targets = _scene(2)
    out = m.forward_train(imgs, targets)
    state = OimState(3, 4, 256, seed=0)
    loss = oim_loss(out.teacher.embeddings, out.teacher.identities, state)
    m.zero_grad(set_to_none=True)
    loss.backward()
    return m, loss


def test_detach_soundness_exact():
    m, loss = _teacher_oim_grads(True)
    assert loss.item() > 0
    for name, p in m.named_parameters():
        if not name.startswith("teacher_head."):
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, name
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in m.teacher_head.parameters())


def test_no_detach_reaches_backbone():
    m, _ = _teacher_oim_grads(False)
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in m.backbone.parameters())


# ---------------------------------------------------------------- inference


def test_inference_never_calls_teacher():
    m = _model().eval()
    imgs, _ = _scene(2)
    for thresh in (0.0, 0.5):
        res = m.inference(imgs, score_thresh=thresh)
        assert len(res) == 2
        for r in res:
            assert r["embeddings"].shape[1] == 256 and len(r["boxes"]) == len(r["scores"])
            if len(r["embeddings"]):
                assert torch.allclose(r["embeddings"].norm(dim=1), torch.ones(len(r["embeddings"])), atol=1e-5)
    m.extract_query(imgs[:1], [torch.tensor([[20.0, 10.0, 32.0, 34.0]])])
    assert m.teacher_head.calls == 0
    assert m.student_head.calls > 0


def test_inference_empty():
    m = _model().eval()
    res = m.inference(torch.rand(1, 3, 64, 64), score_thresh=1.1)
    assert res[0]["boxes"].shape == (0, 4) and res[0]["embeddings"].shape == (0, 256)


def test_inference_parameters_match_baseline():
    with_teacher = _model()
    baseline = SearchNet(tiny_config(use_teacher=False))
    a = {k: tuple(v.shape) for k, v in with_teacher.inference_parameters().items()}
    b = {k: tuple(v.shape) for k, v in baseline.named_parameters()}
    assert a == b
    assert sum(math.prod(s) for s in a.values()) == sum(p.numel() for p in baseline.parameters())
    assert baseline.teacher_parameters() == []


def test_train_mode_requires_targets():
    m = _model().train()
    with pytest.raises(ValueError):
        m(torch.rand(1, 3, 64, 64))


def test_train_outputs_foreground_embeddings():
    m = _model().train()
    imgs, targets = _scene(2)
    out = m.forward_train(imgs, targets)
    assert set(out.losses) == {"l_rpn_cls", "l_rpn_reg", "l_cls1", "l_reg1", "l_cls2", "l_reg2"}
    assert all(torch.isfinite(v) for v in out.losses.values())
    assert len(out.student) == len(out.teacher) > 0
    assert set(out.student.identities.tolist()) <= {0, -1}
    assert torch.equal(out.student.identities, out.teacher.identities)
