"""Two-stage person search network with a student and a detached teacher ReID head.

Pipeline: backbone -> RPN proposals -> detection head (box refinement and
person/background scores) -> RoI-Align on the refined boxes -> ReID heads.
The student head also re-scores and re-regresses boxes. The teacher head
sees the same pooled features, detached by default, and is used only
during training.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models.detection import _utils as det_utils
from torchvision.models.detection.anchor_utils import AnchorGenerator
from torchvision.models.detection.image_list import ImageList
from torchvision.models.detection.rpn import RegionProposalNetwork, RPNHead
from torchvision.ops import batched_nms, box_iou, clip_boxes_to_image, remove_small_boxes, roi_align

from ..errors import ConfigurationError
from .backbone import build_backbone
from .config import ModelConfig

log = logging.getLogger(__name__)


@dataclass
class FeatureMap:
    values: torch.Tensor  # (B, C, H / stride, W / stride)
    stride: int
    image_list: ImageList


@dataclass
class RoiFeatures:
    values: torch.Tensor  # (K, C, P, P)
    boxes: list[torch.Tensor]  # per image, x1 y1 x2 y2 in image pixels
    assigned_identity: torch.Tensor  # (K,) class index, -1 unlabeled person
    foreground: torch.Tensor | None = None  # (K,) bool; training samples only

    @property
    def num_boxes(self) -> int:
        return self.values.shape[0]


@dataclass
class EmbeddingBatch:
    embeddings: torch.Tensor  # (N, D), unit rows
    identities: torch.Tensor  # (N,)
    branch: str  # "student" or "teacher"

    def __len__(self):
        return self.embeddings.shape[0]


def pool_rois(
    fm: FeatureMap,
    boxes: list[torch.Tensor],
    pool_size: int,
    sampling_ratio: int = 0,
    identities: torch.Tensor | None = None,
) -> RoiFeatures:
    """Bilinear RoI-Align of image-space boxes onto the feature map (pixel-centre aligned)."""
    for b in boxes:
        if b.numel() and bool(((b[:, 2] <= b[:, 0]) | (b[:, 3] <= b[:, 1])).any()):
            raise ValueError("zero-area box passed to pool_rois")
    values = roi_align(
        fm.values,
        [b.to(fm.values.dtype) for b in boxes],
        output_size=pool_size,
        spatial_scale=1.0 / fm.stride,
        sampling_ratio=sampling_ratio,
        aligned=True,
    )
    n = sum(len(b) for b in boxes)
    if identities is None:
        identities = torch.full((n,), -1, dtype=torch.long)
    return RoiFeatures(values, boxes, identities)


def detach_features(rois: RoiFeatures) -> RoiFeatures:
    """Same values, cut from the autograd graph (teacher input)."""
    return dataclasses.replace(rois, values=rois.values.detach())


class ReIDHead(nn.Module):
    """Res5-style trunk, global average pooling, FC + BN projection to a unit-norm embedding."""

    def __init__(self, trunk: nn.Module, dim: int = 256):
        super().__init__()
        self.trunk = trunk
        self.embed = nn.Linear(trunk.out_channels, dim)
        self.bn = nn.BatchNorm1d(dim)
        self.calls = 0

    def forward(self, x: torch.Tensor):
        self.calls += 1
        feat = F.adaptive_avg_pool2d(self.trunk(x), 1).flatten(1)
        emb = self.embed(feat)
        if emb.shape[0] > 1 or not self.training:
            emb = self.bn(emb)
        return F.normalize(emb, dim=1), feat


class BoxHead(nn.Module):
    def __init__(self, trunk: nn.Module, num_score_outputs: int):
        super().__init__()
        self.trunk = trunk
        self.cls_score = nn.Linear(trunk.out_channels, num_score_outputs)
        self.bbox_pred = nn.Linear(trunk.out_channels, 4)

    def forward(self, x: torch.Tensor):
        feat = F.adaptive_avg_pool2d(self.trunk(x), 1).flatten(1)
        return self.cls_score(feat), self.bbox_pred(feat)


@dataclass
class DetHeadOutput:
    boxes: list[torch.Tensor]
    scores: list[torch.Tensor]
    losses: dict


@dataclass
class TrainOutput:
    losses: dict  # l_rpn_cls, l_rpn_reg, l_cls1, l_reg1, l_cls2, l_reg2
    student: EmbeddingBatch
    teacher: EmbeddingBatch | None
    rois: RoiFeatures | None


class SearchNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.backbone, make_res5 = build_backbone(cfg)
        c = self.backbone.out_channels

        anchors = AnchorGenerator(sizes=(tuple(cfg.anchor_sizes),), aspect_ratios=(tuple(cfg.aspect_ratios),))
        self.rpn = RegionProposalNetwork(
            anchors,
            RPNHead(c, anchors.num_anchors_per_location()[0]),
            cfg.rpn_fg_iou_thresh,
            cfg.rpn_bg_iou_thresh,
            cfg.rpn_batch_size_per_image,
            cfg.rpn_positive_fraction,
            dict(training=cfg.rpn_pre_nms_top_n_train, testing=cfg.rpn_pre_nms_top_n_test),
            dict(training=cfg.rpn_post_nms_top_n_train, testing=cfg.rpn_post_nms_top_n_test),
            cfg.rpn_nms_thresh,
        )
        self.box_head = BoxHead(make_res5(), 2)
        self.student_head = ReIDHead(make_res5(), cfg.embedding_dim)
        trunk_out = self.student_head.trunk.out_channels
        self.student_cls = nn.Linear(trunk_out, 1)
        self.student_reg = nn.Linear(trunk_out, 4)
        self.teacher_head = ReIDHead(make_res5(), cfg.embedding_dim) if cfg.use_teacher else None

        self.box_coder = det_utils.BoxCoder((10.0, 10.0, 5.0, 5.0))
        self.box_matcher = det_utils.Matcher(cfg.box_fg_iou_thresh, cfg.box_bg_iou_thresh, False)
        self.box_sampler = det_utils.BalancedPositiveNegativeSampler(
            cfg.box_batch_size_per_image, cfg.box_positive_fraction
        )
        self.reid_sampler = det_utils.BalancedPositiveNegativeSampler(
            cfg.reid_batch_size_per_image, cfg.reid_positive_fraction
        )
        self.register_buffer("image_mean", torch.tensor(cfg.image_mean).view(1, 3, 1, 1))
        self.register_buffer("image_std", torch.tensor(cfg.image_std).view(1, 3, 1, 1))
        self.detach_teacher = True

    # ------------------------------------------------------------------ stages

    def preprocess(self, images) -> ImageList:
        if isinstance(images, torch.Tensor) and images.dim() == 4:
            images = list(images)
        sizes = [tuple(int(s) for s in im.shape[-2:]) for im in images]
        stride = self.cfg.stride
        h = -(-max(s[0] for s in sizes) // stride) * stride
        w = -(-max(s[1] for s in sizes) // stride) * stride
        batch = images[0].new_zeros((len(images), 3, h, w))
        for k, im in enumerate(images):
            if not bool(torch.isfinite(im).all()):
                raise FloatingPointError("non-finite pixel values in input image")
            batch[k, :, : im.shape[-2], : im.shape[-1]] = (im - self.image_mean[0]) / self.image_std[0]
        return ImageList(batch, sizes)

    def backbone_forward(self, images) -> FeatureMap:
        image_list = images if isinstance(images, ImageList) else self.preprocess(images)
        return FeatureMap(self.backbone(image_list.tensors), self.cfg.stride, image_list)

    def propose_regions(self, fm: FeatureMap, targets=None):
        """RPN proposals per image, plus objectness/regression losses when targets are given."""
        if min(fm.values.shape[-2:]) == 0:
            raise ConfigurationError("feature map is empty; image too small for the backbone stride")
        rpn_targets = [{"boxes": t["boxes"]} for t in targets] if targets is not None else None
        proposals, losses = self.rpn(fm.image_list, {"0": fm.values}, rpn_targets)
        return proposals, {"l_rpn_cls": losses["loss_objectness"], "l_rpn_reg": losses["loss_rpn_box_reg"]} if losses else {}

    def _match(self, proposals, gt_boxes):
        if gt_boxes.numel() == 0:
            idx = torch.full((len(proposals),), -1, dtype=torch.long)
            return idx, torch.zeros(len(proposals), dtype=torch.long)
        idx = self.box_matcher(box_iou(gt_boxes, proposals))
        fg = (idx >= 0).long()
        return idx, fg

    def _sample(self, proposals, targets, sampler):
        """Add ground truth to the candidates, match, and draw a balanced sample."""
        out_boxes, out_fg, out_gt = [], [], []
        for props, t in zip(proposals, targets):
            props = torch.cat([props.detach(), t["boxes"].to(props.dtype)])
            idx, fg = self._match(props, t["boxes"])
            pos, neg = sampler([fg])
            keep = torch.where(pos[0] | neg[0])[0]
            out_boxes.append(props[keep])
            out_fg.append(fg[keep].bool())
            out_gt.append(idx[keep])
        return out_boxes, out_fg, out_gt

    def detection_head(self, fm: FeatureMap, proposals, targets=None) -> DetHeadOutput:
        """First-stage refinement. Training returns the refined sampled boxes and L_cls1 / L_reg1."""
        cfg = self.cfg
        if targets is not None:
            proposals, fg, gt_idx = self._sample(proposals, targets, self.box_sampler)
        rois = pool_rois(fm, proposals, cfg.pool_size, cfg.sampling_ratio)
        if rois.num_boxes == 0:
            log.warning("detection head received no proposals")
            empty = [p.new_zeros((0, 4)) for p in proposals]
            return DetHeadOutput(empty, [p.new_zeros(0) for p in proposals], {})
        logits, deltas = self.box_head(rois.values)
        counts = [len(p) for p in proposals]
        refined = self.box_coder.decode(deltas.detach(), proposals).view(-1, 4)
        refined = [clip_boxes_to_image(b, s) for b, s in zip(refined.split(counts), fm.image_list.image_sizes)]
        scores = [s for s in F.softmax(logits.detach(), dim=1)[:, 1].split(counts)]
        losses = {}
        if targets is not None:
            labels = torch.cat(fg).long()
            reg_targets = self._reg_targets(proposals, fg, gt_idx, targets)
            losses["l_cls1"] = F.cross_entropy(logits, labels)
            losses["l_reg1"] = self._reg_loss(deltas, labels, reg_targets)
        return DetHeadOutput(refined, scores, losses)

    def _reg_targets(self, boxes, fg, gt_idx, targets):
        out = []
        for b, f, i, t in zip(boxes, fg, gt_idx, targets):
            matched = t["boxes"][i.clamp_min(0)] if t["boxes"].numel() else b
            out.append(self.box_coder.encode_single(matched.to(b.dtype), b))
        return torch.cat(out)

    @staticmethod
    def _reg_loss(deltas, labels, reg_targets):
        pos = labels > 0
        loss = F.smooth_l1_loss(deltas[pos], reg_targets[pos], beta=1 / 9, reduction="sum")
        return loss / max(labels.numel(), 1)

    def reid_head_forward(self, head: str, rois: RoiFeatures):
        """Embeddings from one ReID head; the student also returns (class logit, box deltas)."""
        module = self.student_head if head == "student" else self.teacher_head
        if module is None:
            raise ValueError("model was built without a teacher head")
        emb, feat = module(rois.values)
        batch = EmbeddingBatch(emb, rois.assigned_identity, head)
        if head == "student":
            return batch, (self.student_cls(feat).squeeze(1), self.student_reg(feat))
        return batch, None

    # ---------------------------------------------------------------- training

    def forward_train(self, images, targets) -> TrainOutput:
        fm = self.backbone_forward(images)
        proposals, rpn_losses = self.propose_regions(fm, targets)
        det = self.detection_head(fm, proposals, targets)
        losses = dict(rpn_losses, **det.losses)

        boxes, fg, gt_idx = self._sample([b.detach() for b in det.boxes], targets, self.reid_sampler)
        boxes_ok = [(b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1]) for b in boxes]
        boxes = [b[k] for b, k in zip(boxes, boxes_ok)]
        fg = [f[k] for f, k in zip(fg, boxes_ok)]
        gt_idx = [i[k] for i, k in zip(gt_idx, boxes_ok)]
        ident = torch.cat(
            [
                torch.where(f, t["labels"][i.clamp_min(0)] if t["labels"].numel() else -torch.ones_like(i), -1)
                for f, i, t in zip(fg, gt_idx, targets)
            ]
        ) if boxes else torch.zeros(0, dtype=torch.long)
        if sum(len(b) for b in boxes) == 0:
            log.warning("no boxes reached the ReID stage; skipping ReID losses")
            zero = fm.values.sum() * 0.0
            losses.update(l_cls2=zero, l_reg2=zero)
            empty = EmbeddingBatch(fm.values.new_zeros((0, self.cfg.embedding_dim)), ident, "student")
            return TrainOutput(losses, empty, None, None)

        rois = pool_rois(fm, boxes, self.cfg.pool_size, self.cfg.sampling_ratio, ident)
        rois.foreground = torch.cat(fg)
        student, (logit2, deltas2) = self.reid_head_forward("student", rois)
        labels2 = rois.foreground.long()
        losses["l_cls2"] = F.binary_cross_entropy_with_logits(logit2, labels2.to(logit2.dtype))
        losses["l_reg2"] = self._reg_loss(deltas2, labels2, self._reg_targets(boxes, fg, gt_idx, targets))

        keep = rois.foreground
        student = EmbeddingBatch(student.embeddings[keep], ident[keep], "student")
        teacher = None
        if self.teacher_head is not None:
            t_in = detach_features(rois) if self.detach_teacher else rois
            t_batch, _ = self.reid_head_forward("teacher", t_in)
            teacher = EmbeddingBatch(t_batch.embeddings[keep], ident[keep], "teacher")
        return TrainOutput(losses, student, teacher, rois)

    # --------------------------------------------------------------- inference

    @torch.no_grad()
    def inference(self, images, score_thresh: float | None = None):
        """Per image: dict of ``boxes`` (k, 4), ``scores`` (k,), ``embeddings`` (k, D). Student head only."""
        cfg = self.cfg
        score_thresh = cfg.det_score_thresh if score_thresh is None else score_thresh
        fm = self.backbone_forward(images)
        proposals, _ = self.propose_regions(fm)
        det = self.detection_head(fm, proposals)
        boxes1 = []
        for b, s, size in zip(det.boxes, det.scores, fm.image_list.image_sizes):
            keep = remove_small_boxes(b, 1.0)
            b, s = b[keep], s[keep]
            keep = s >= cfg.box_score_thresh
            b, s = b[keep], s[keep]
            keep = batched_nms(b, s, torch.zeros_like(s, dtype=torch.long), cfg.box_nms_thresh)[: cfg.detections_per_img]
            boxes1.append(b[keep])
        results = []
        if sum(len(b) for b in boxes1) == 0:
            d = cfg.embedding_dim
            return [dict(boxes=b.new_zeros((0, 4)), scores=b.new_zeros(0), embeddings=b.new_zeros((0, d))) for b in boxes1]
        rois = pool_rois(fm, boxes1, cfg.pool_size, cfg.sampling_ratio)
        emb, (logit2, deltas2) = self.reid_head_forward("student", rois)
        counts = [len(b) for b in boxes1]
        boxes2 = self.box_coder.decode(deltas2, boxes1).view(-1, 4)
        for b, s, e, size in zip(
            boxes2.split(counts), torch.sigmoid(logit2).split(counts), emb.embeddings.split(counts), fm.image_list.image_sizes
        ):
            b = clip_boxes_to_image(b, size)
            keep = (s >= score_thresh) & (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
            b, s, e = b[keep], s[keep], e[keep]
            keep = batched_nms(b, s, torch.zeros_like(s, dtype=torch.long), cfg.box_nms_thresh)
            results.append(dict(boxes=b[keep], scores=s[keep], embeddings=e[keep]))
        return results

    @torch.no_grad()
    def extract_query(self, images, boxes: list[torch.Tensor]) -> torch.Tensor:
        """Student embeddings for annotated boxes (query side)."""
        fm = self.backbone_forward(images)
        rois = pool_rois(fm, boxes, self.cfg.pool_size, self.cfg.sampling_ratio)
        return self.reid_head_forward("student", rois)[0].embeddings

    def forward(self, images, targets=None):
        if self.training:
            if targets is None:
                raise ValueError("targets are required in training mode")
            return self.forward_train(images, targets)
        return self.inference(images)

    def inference_parameters(self) -> dict[str, torch.Tensor]:
        """Parameters reachable from the inference path (everything but the teacher head)."""
        return {k: v for k, v in self.named_parameters() if not k.startswith("teacher_head.")}

    def teacher_parameters(self):
        return [] if self.teacher_head is None else list(self.teacher_head.parameters())
