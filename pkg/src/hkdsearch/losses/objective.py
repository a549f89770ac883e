"""Composite training objective and its per-step report."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import torch

from ..errors import NonFiniteLossError

DEFAULT_DET_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
DET_PARTS = ("l_reg1", "l_cls1", "l_reg2", "l_cls2")
RPN_PARTS = ("l_rpn_reg", "l_rpn_cls")
COMPONENTS = ("l_prob", "l_rela") + DET_PARTS + RPN_PARTS + ("l_oim_s", "l_oim_t")


def _value(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def detection_loss(parts: Mapping, weights: Sequence[float] = DEFAULT_DET_WEIGHTS):
    """``k1*reg1 + k2*cls1 + k3*reg2 + k4*cls2``, plus the RPN terms at unit weight when present."""
    k1, k2, k3, k4 = weights
    total = (
        k1 * parts.get("l_reg1", 0.0)
        + k2 * parts.get("l_cls1", 0.0)
        + k3 * parts.get("l_reg2", 0.0)
        + k4 * parts.get("l_cls2", 0.0)
    )
    for key in RPN_PARTS:
        if key in parts:
            total = total + parts[key]
    return total


@dataclass
class LossReport:
    l_prob: float = 0.0
    l_rela: float = 0.0
    l_reg1: float = 0.0
    l_cls1: float = 0.0
    l_reg2: float = 0.0
    l_cls2: float = 0.0
    l_rpn_reg: float = 0.0
    l_rpn_cls: float = 0.0
    l_oim_s: float = 0.0
    l_oim_t: float = 0.0
    l_det: float = 0.0
    total: float = 0.0
    lambda_prob: float = 1.0
    lambda_rela: float = 300.0
    det_weights: tuple[float, ...] = DEFAULT_DET_WEIGHTS
    extra: dict = field(default_factory=dict)

    def recompute_total(self) -> float:
        k1, k2, k3, k4 = self.det_weights
        det = (
            k1 * self.l_reg1 + k2 * self.l_cls1 + k3 * self.l_reg2 + k4 * self.l_cls2
            + self.l_rpn_reg + self.l_rpn_cls
        )
        return self.lambda_prob * self.l_prob + self.lambda_rela * self.l_rela + det + self.l_oim_s + self.l_oim_t

    def to_json(self) -> str:
        d = asdict(self)
        d["det_weights"] = list(self.det_weights)
        return json.dumps(d, sort_keys=True)


def total_loss(
    parts: Mapping,
    lambda_prob: float = 1.0,
    lambda_rela: float = 300.0,
    det_weights: Sequence[float] = DEFAULT_DET_WEIGHTS,
):
    """Weighted sum of the distillation, detection and both OIM losses.

    Returns ``(total, LossReport)``; ``total`` keeps the autograd graph when
    the parts are tensors. Raises NonFiniteLossError naming the offending part.
    """
    for key in COMPONENTS:
        if key in parts and not math.isfinite(_value(parts[key])):
            raise NonFiniteLossError(key)
    l_det = detection_loss(parts, det_weights)
    total = (
        lambda_prob * parts.get("l_prob", 0.0)
        + lambda_rela * parts.get("l_rela", 0.0)
        + l_det
        + parts.get("l_oim_s", 0.0)
        + parts.get("l_oim_t", 0.0)
    )
    report = LossReport(
        **{k: _value(parts.get(k, 0.0)) for k in COMPONENTS},
        l_det=_value(l_det),
        total=_value(total),
        lambda_prob=lambda_prob,
        lambda_rela=lambda_rela,
        det_weights=tuple(det_weights),
    )
    return total, report
