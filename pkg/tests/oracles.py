"""Independent reference computations used by the tests.

Nothing here imports the code under test's math: finite differences use
plain float64 function evaluations, AP and matching are brute force.
"""
import itertools
import math

import numpy as np
import torch


def central_difference(fn, x: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Numerical gradient of the scalar ``fn`` at ``x`` (float64)."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn(x))
            flat[i] = orig - step
            lo = float(fn(x))
            flat[i] = orig
            g[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def random_unit(n, d, gen):
    x = torch.randn(n, d, generator=gen, dtype=torch.float64)
    return x / x.norm(dim=1, keepdim=True)


def brute_force_ap(sims, labels, num_gt):
    """AP by definition: walk the ranking (similarity desc, index asc) and
    average precision at each true match over all ground-truth positives."""
    ranking = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    hits, total = 0, 0.0
    for rank, i in enumerate(ranking, 1):
        if labels[i]:
            hits += 1
            total += hits / rank
    return total / num_gt if num_gt else 0.0


def box_iou_xyxy(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def best_assignment_size(dets, gts, thr=0.5):
    """Largest one-to-one matching with IoU > thr, by exhaustive search."""
    best = 0
    n = len(dets)
    for perm in itertools.permutations(range(len(gts)) if len(gts) >= n else list(range(len(gts))) + [None] * (n - len(gts)), n):
        size = sum(1 for i, j in enumerate(perm) if j is not None and box_iou_xyxy(dets[i], gts[j]) > thr)
        best = max(best, size)
    return best


def softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def np_kl(p, q):
    return float(sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0))
