"""Head knowledge distillation losses between the student and teacher ReID heads."""
from __future__ import annotations

import torch
import torch.nn.functional as F

EPS = 1e-12
RELATION_DISTANCES = ("kl", "mse", "mutual_info")
DIRECTIONS = ("student_teacher", "teacher_student", "symmetric")


def _as_tensor(p) -> torch.Tensor:
    return p if isinstance(p, torch.Tensor) else torch.as_tensor(p, dtype=torch.float64)


def kl_divergence(p, q, eps: float = EPS) -> torch.Tensor:
    """``sum_j p_j log(p_j / q_j)`` along the last axis.

    ``0 log 0`` counts as 0 and ``q`` is floored at ``eps``.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if bool((p < 0).any()) or bool((q < 0).any()):
        raise ValueError("distributions must be non-negative")
    return (torch.xlogy(p, p) - p * torch.log(q.clamp_min(eps))).sum(dim=-1)


def prob_distill_loss(p_s, p_t) -> torch.Tensor:
    """Symmetric KL between student and teacher class distributions, averaged over rows."""
    p_s, p_t = _as_tensor(p_s), _as_tensor(p_t)
    if p_s.shape != p_t.shape:
        raise ValueError(f"shape mismatch {tuple(p_s.shape)} vs {tuple(p_t.shape)}")
    if p_s.shape[0] == 0:
        return p_s.sum() * 0.0
    return (kl_divergence(p_t, p_s) + kl_divergence(p_s, p_t)).mean()


def similarity_matrix(f) -> torch.Tensor:
    f = _as_tensor(f)
    m = f @ f.t()
    return 0.5 * (m + m.t())


def _directed_kl(d_s, d_t, direction):
    if direction == "student_teacher":
        return kl_divergence(d_s, d_t)
    if direction == "teacher_student":
        return kl_divergence(d_t, d_s)
    if direction == "symmetric":
        return kl_divergence(d_s, d_t) + kl_divergence(d_t, d_s)
    raise ValueError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")


def relation_loss_from_similarity(m_s, m_t, distance: str = "kl", direction: str = "student_teacher") -> torch.Tensor:
    """Relation loss given precomputed ``(N, N)`` similarity matrices."""
    if distance == "kl":
        return _directed_kl(F.softmax(m_s, dim=1), F.softmax(m_t, dim=1), direction).mean()
    if distance == "mse":
        return ((F.softmax(m_s, dim=1) - F.softmax(m_t, dim=1)) ** 2).sum(dim=1).mean()
    if distance == "mutual_info":
        k_s, k_t = (m_s + 1.0) / 2.0, (m_t + 1.0) / 2.0
        d_s = k_s / k_s.sum(dim=1, keepdim=True)
        d_t = k_t / k_t.sum(dim=1, keepdim=True)
        return _directed_kl(d_s, d_t, direction).mean()
    raise ValueError(f"unknown relation distance {distance!r}; expected one of {RELATION_DISTANCES}")


def relation_distill_loss(f_s, f_t, distance: str = "kl", direction: str = "student_teacher") -> torch.Tensor:
    """Distance between the row distributions of the two in-batch similarity matrices.

    ``kl`` and ``mse`` compare row-softmaxed similarity matrices.
    ``mutual_info`` compares rows of the cosine kernel ``(1 + cos) / 2``
    normalised to sum to one, by KL. Every variant averages over rows.
    """
    f_s, f_t = _as_tensor(f_s), _as_tensor(f_t)
    if f_s.shape[0] != f_t.shape[0]:
        raise ValueError(f"batch size mismatch: {f_s.shape[0]} vs {f_t.shape[0]}")
    if f_s.shape[0] == 0:
        return f_s.sum() * 0.0
    return relation_loss_from_similarity(similarity_matrix(f_s), similarity_matrix(f_t), distance, direction)
