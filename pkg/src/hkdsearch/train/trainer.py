"""Training loop, evaluation driver and checkpoint resume."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..data.annotations import AnnotationSet, load_annotations
from ..data.protocol import SearchProtocol, build_search_protocol, load_protocol
from ..data.synth import synth_generate
from ..errors import CheckpointError, NonFiniteLossError
from ..eval.metrics import (
    ImageDetections,
    MetricReport,
    detection_recall_ap,
    evaluate_stratified,
    search_map_cmc,
)
from ..losses import (
    LossReport,
    OimState,
    oim_loss,
    oim_probabilities,
    prob_distill_loss,
    relation_distill_loss,
    total_loss,
)
from ..model import SearchNet
from .batching import BatchIterator, class_map, image_tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, lr_schedule

log = logging.getLogger(__name__)


def select_device() -> torch.device:
    return torch.device(os.environ.get("HKDSEARCH_DEVICE", "cpu"))


def compute_losses(out, oim_student: OimState, oim_teacher: OimState | None, cfg: TrainConfig) -> dict:
    """Assemble every loss term from one training forward pass.

    Teacher embeddings enter the distillation terms detached: the teacher
    head learns from its own OIM loss only.
    """
    parts = dict(out.losses)
    s, t = out.student, out.teacher
    parts["l_oim_s"] = oim_loss(s.embeddings, s.identities, oim_student)
    if t is None:
        return parts
    parts["l_oim_t"] = oim_loss(t.embeddings, t.identities, oim_teacher)
    labeled = s.identities >= 0
    f_s, f_t = s.embeddings[labeled], t.embeddings[labeled].detach()
    if cfg.enable_prob_kd and cfg.lambda_prob != 0:
        parts["l_prob"] = prob_distill_loss(oim_probabilities(f_s, oim_student), oim_probabilities(f_t, oim_teacher))
    if cfg.enable_rela_kd and cfg.lambda_rela != 0:
        parts["l_rela"] = relation_distill_loss(f_s, f_t, cfg.relation_distance, cfg.relation_direction)
    return parts


def train_step(
    model: SearchNet,
    optimizer: torch.optim.Optimizer,
    images,
    targets,
    oim_student: OimState,
    oim_teacher: OimState | None,
    cfg: TrainConfig,
    batch_ids=(),
) -> LossReport:
    """One SGD update followed by one OIM state update.

    A non-finite loss aborts the step before any parameter or state change.
    """
    model.train()
    out = model(images, targets)
    parts = compute_losses(out, oim_student, oim_teacher, cfg)
    lam_p = cfg.lambda_prob if cfg.enable_prob_kd else 0.0
    lam_r = cfg.lambda_rela if cfg.enable_rela_kd else 0.0
    try:
        total, report = total_loss(parts, lam_p, lam_r, cfg.det_weights)
    except NonFiniteLossError as exc:
        raise NonFiniteLossError(exc.component, batch_ids) from None
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    oim_student.update(out.student.embeddings, out.student.identities)
    if out.teacher is not None and oim_teacher is not None:
        oim_teacher.update(out.teacher.embeddings, out.teacher.identities)
    report.extra["num_persons"] = int(len(out.student))
    report.extra["num_labeled"] = int((out.student.identities >= 0).sum())
    return report


def make_optimizer(model: SearchNet, cfg: TrainConfig) -> torch.optim.SGD:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.SGD(params, lr=cfg.initial_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def load_datasets(cfg: TrainConfig):
    """Return ``(train, test, protocol)`` from annotation files or the synthetic generator."""
    if cfg.dataset == "synthetic" and not cfg.train_annotations:
        train, test = synth_generate(cfg.synth_config())
    else:
        if not cfg.train_annotations:
            raise ValueError("train_annotations is required for non-synthetic datasets")
        train = load_annotations(cfg.train_annotations, split="train")
        test = load_annotations(cfg.test_annotations, split="test") if cfg.test_annotations else None
    protocol = None
    if cfg.protocol:
        protocol = load_protocol(cfg.protocol)
    elif test is not None:
        e = cfg.eval
        protocol = build_search_protocol(test, e.gallery_size, e.positives, e.protocol_seed)
    return train, test, protocol


@torch.no_grad()
def detect_images(model: SearchNet, aset: AnnotationSet, image_ids, batch_size: int = 8, device=None):
    device = device or next(model.parameters()).device
    model.eval()
    out = {}
    image_ids = list(image_ids)
    for start in range(0, len(image_ids), batch_size):
        chunk = image_ids[start : start + batch_size]
        images = [image_tensor(aset, i).to(device) for i in chunk]
        for image_id, r in zip(chunk, model.inference(images)):
            out[image_id] = ImageDetections(
                r["boxes"].double().cpu().numpy(), r["scores"].double().cpu().numpy(), r["embeddings"].double().cpu().numpy()
            )
    return out


@torch.no_grad()
def query_embeddings(model: SearchNet, aset: AnnotationSet, protocol: SearchProtocol, device=None) -> dict[int, np.ndarray]:
    device = device or next(model.parameters()).device
    model.eval()
    out = {}
    for e in protocol.entries:
        box = torch.tensor([e.query_box.xyxy()], dtype=torch.float32, device=device)
        emb = model.extract_query([image_tensor(aset, e.query_image).to(device)], [box])
        out[e.identity] = emb[0].double().cpu().numpy()
    return out


def evaluate_model(
    model: SearchNet, test: AnnotationSet, protocol: SearchProtocol, stratify: bool = False
) -> MetricReport:
    gallery_ids = sorted({g for e in protocol.entries for g in e.gallery})
    dets = detect_images(model, test, gallery_ids)
    queries = query_embeddings(model, test, protocol)
    if stratify:
        strata = evaluate_stratified(protocol, test, dets, queries)
        report = strata.pop("full")
        report.strata = strata
    else:
        report = search_map_cmc(protocol, test, dets, queries)
    gts = {g: np.array([b.xyxy() for b in test[g].boxes]).reshape(-1, 4) for g in gallery_ids}
    report.recall, report.ap = detection_recall_ap(dets, gts)
    return report


@dataclass
class TrainResult:
    checkpoints: list[Path] = field(default_factory=list)
    metrics_log: Path | None = None
    reports: list[LossReport] = field(default_factory=list)
    final: MetricReport | None = None
    model: SearchNet | None = None


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


class Trainer:
    def __init__(self, cfg: TrainConfig, train: AnnotationSet, test=None, protocol=None, out_dir=None):
        self.cfg = cfg
        self.train_set, self.test_set, self.protocol = train, test, protocol
        self.out_dir = Path(out_dir) if out_dir else None
        self.device = select_device()
        seed_everything(cfg.seed)
        self.classes = class_map(train)
        self.model = SearchNet(cfg.model).to(self.device)
        self.model.detach_teacher = cfg.detach_teacher
        o = cfg.oim
        dim = cfg.model.embedding_dim
        self.oim_student = OimState(len(self.classes), o.queue_size, dim, o.momentum, o.temperature, seed=cfg.seed)
        self.oim_teacher = (
            OimState(len(self.classes), o.queue_size, dim, o.momentum, o.temperature, seed=cfg.seed + 1)
            if cfg.model.use_teacher
            else None
        )
        for state in (self.oim_student, self.oim_teacher):
            if state is not None:
                state.to(device=self.device)
        self.optimizer = make_optimizer(self.model, cfg)
        self.batches = BatchIterator(train, cfg.batch_size, cfg.seed, cfg.hflip, self.classes)
        self.epoch = 0
        self.step = 0
        self.history: list[dict] = []

    # -------------------------------------------------------------- state io

    def state(self) -> dict:
        return {
            "config": self.cfg.to_json(),
            "model": self.model.state_dict(),
            "oim_student": self.oim_student.state_dict(),
            "oim_teacher": self.oim_teacher.state_dict() if self.oim_teacher else None,
            "optimizer": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "history": self.history,
            "classes": self.classes,
            "torch_rng": torch.get_rng_state(),
        }

    def load_state(self, ckpt: dict) -> None:
        missing = {"model", "oim_student", "optimizer", "epoch", "step"} - set(ckpt)
        if missing:
            raise CheckpointError(f"checkpoint lacks {sorted(missing)}")
        self.model.load_state_dict(ckpt["model"])
        self.oim_student.load_state_dict(ckpt["oim_student"])
        if self.oim_teacher is not None and ckpt.get("oim_teacher"):
            self.oim_teacher.load_state_dict(ckpt["oim_teacher"])
        self.optimizer.load_state_dict(ckpt["optimizer"])
        self.epoch, self.step = int(ckpt["epoch"]), int(ckpt["step"])
        self.history = list(ckpt.get("history", []))
        if "torch_rng" in ckpt:
            torch.set_rng_state(ckpt["torch_rng"])

    # ---------------------------------------------------------------- loops

    def train_epoch(self, log_fh=None, max_steps=None) -> list[LossReport]:
        cfg = self.cfg
        lr = lr_schedule(cfg, self.epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        reports = []
        limit = max_steps if max_steps is not None else cfg.max_steps_per_epoch
        for k, (images, targets, ids) in enumerate(self.batches.epoch(self.epoch)):
            if limit is not None and k >= limit:
                break
            images = [im.to(self.device) for im in images]
            targets = [{key: v.to(self.device) for key, v in t.items()} for t in targets]
            report = train_step(self.model, self.optimizer, images, targets, self.oim_student, self.oim_teacher, cfg, ids)
            self.step += 1
            reports.append(report)
            if log_fh is not None:
                rec = json.loads(report.to_json())
                rec.update(epoch=self.epoch, step=self.step, lr=lr)
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return reports

    def evaluate(self, stratify: bool | None = None) -> MetricReport | None:
        if self.test_set is None or self.protocol is None:
            return None
        stratify = self.cfg.eval.stratify if stratify is None else stratify
        return evaluate_model(self.model, self.test_set, self.protocol, stratify)

    def checkpoint_path(self, epoch: int) -> Path:
        return self.out_dir / f"epoch_{epoch:03d}.ckpt"

    def run(self, resume=None, evaluate: bool = True) -> TrainResult:
        result = TrainResult(model=self.model)
        metrics_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = self.out_dir / "metrics.jsonl"
            result.metrics_log = metrics_path
        if resume is not None:
            self.load_state(load_checkpoint(resume))
            log.info("resumed from %s at epoch %d", resume, self.epoch)
            if metrics_path is not None and metrics_path.exists():
                kept = [ln for ln in metrics_path.read_text().splitlines() if json.loads(ln).get("epoch", -1) < self.epoch]
                metrics_path.write_text("".join(ln + "\n" for ln in kept))
        log_fh = open(metrics_path, "a") if metrics_path is not None else None
        try:
            while self.epoch < self.cfg.total_epochs:
                t0 = time.time()
                reports = self.train_epoch(log_fh)
                result.reports.extend(reports)
                summary = {
                    "epoch": self.epoch,
                    "steps": len(reports),
                    "mean_total": float(np.mean([r.total for r in reports])) if reports else None,
                    "seconds": round(time.time() - t0, 2),
                }
                self.history.append(summary)
                log.info("epoch %d: %s", self.epoch, summary)
                self.epoch += 1
                if self.out_dir is not None:
                    result.checkpoints.append(save_checkpoint(self.state(), self.checkpoint_path(self.epoch - 1)))
                if log_fh is not None:
                    log_fh.flush()
            if evaluate:
                result.final = self.evaluate()
                if result.final is not None:
                    self.history.append({"final_eval": result.final.to_json()})
                    if log_fh is not None:
                        log_fh.write(json.dumps({"event": "final_eval", **result.final.to_json()}, sort_keys=True) + "\n")
                    if self.out_dir is not None:
                        (self.out_dir / "eval.json").write_text(json.dumps(result.final.to_json(), indent=1))
        finally:
            if log_fh is not None:
                log_fh.close()
        return result


def run_training(cfg: TrainConfig, out_dir=None, resume=None, datasets=None, evaluate: bool = True) -> TrainResult:
    """Train for ``cfg.total_epochs`` with a checkpoint per epoch, then evaluate on the test protocol."""
    train, test, protocol = datasets if datasets is not None else load_datasets(cfg)
    trainer = Trainer(cfg, train, test, protocol, out_dir)
    return trainer.run(resume=resume, evaluate=evaluate)


def load_trained(path) -> tuple[SearchNet, dict]:
    """Rebuild the model from a checkpoint (eval mode)."""
    ckpt = load_checkpoint(path)
    cfg = TrainConfig.from_json(ckpt["config"])
    model = SearchNet(cfg.model)
    model.load_state_dict(ckpt["model"])
    model.detach_teacher = cfg.detach_teacher
    model.eval()
    return model, ckpt
