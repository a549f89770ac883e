"""Online instance matching (OIM).

The classifier has no trainable weights. Labeled identities are scored
against a lookup table of momentum-averaged prototypes, and unlabeled
persons serve as extra negatives through a circular queue of their
recent embeddings.
"""
from __future__ import annotations

import logging

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)


class OimState:
    """Lookup table ``(C, D)`` plus circular queue ``(Q, D)``.

    LUT rows start as random unit vectors so every row stays unit-norm.
    Queue rows only join the softmax once they have been written.
    """

    def __init__(
        self,
        num_classes: int,
        queue_size: int,
        dim: int = 256,
        momentum: float = 0.5,
        temperature: float = 1.0 / 30,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        gen = torch.Generator().manual_seed(seed)
        self.lut = F.normalize(torch.randn(num_classes, dim, generator=gen, dtype=dtype), dim=1)
        self.queue = torch.zeros(queue_size, dim, dtype=dtype)
        self.cursor = 0
        self.filled = 0
        self.momentum = momentum
        self.temperature = temperature
        self.empty_batches = 0

    @property
    def num_classes(self) -> int:
        return self.lut.shape[0]

    @property
    def queue_size(self) -> int:
        return self.queue.shape[0]

    @property
    def dim(self) -> int:
        return self.lut.shape[1]

    def active_queue(self) -> torch.Tensor:
        return self.queue[: self.filled]

    def push(self, x: torch.Tensor) -> None:
        """FIFO insert; once full the oldest entry is overwritten."""
        if self.queue_size == 0:
            return
        for row in x.detach().to(self.queue.dtype):
            self.queue[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.queue_size
            self.filled = min(self.filled + 1, self.queue_size)

    @torch.no_grad()
    def update(self, x: torch.Tensor, labels: torch.Tensor) -> None:
        x = x.detach().to(self.lut.dtype)
        for xi, y in zip(x, labels.tolist()):
            if y >= 0:
                v = self.momentum * self.lut[y] + (1.0 - self.momentum) * xi
                self.lut[y] = v / v.norm().clamp_min(1e-12)
        self.push(x[labels < 0])

    def to(self, dtype=None, device=None) -> "OimState":
        self.lut = self.lut.to(dtype=dtype, device=device)
        self.queue = self.queue.to(dtype=dtype, device=device)
        return self

    def state_dict(self) -> dict:
        return {
            "lut": self.lut.clone(),
            "queue": self.queue.clone(),
            "cursor": self.cursor,
            "filled": self.filled,
            "momentum": self.momentum,
            "temperature": self.temperature,
        }

    def load_state_dict(self, state: dict) -> None:
        self.lut = state["lut"].clone()
        self.queue = state["queue"].clone()
        self.cursor = int(state["cursor"])
        self.filled = int(state["filled"])
        self.momentum = float(state["momentum"])
        self.temperature = float(state["temperature"])

    @classmethod
    def from_state_dict(cls, state: dict) -> "OimState":
        obj = cls(state["lut"].shape[0], state["queue"].shape[0], state["lut"].shape[1])
        obj.load_state_dict(state)
        return obj


def _check(x: torch.Tensor, state: OimState):
    if x.dim() != 2 or x.shape[1] != state.dim:
        raise ValueError(f"embeddings of shape {tuple(x.shape)} do not match OIM dim {state.dim}")


def oim_logits(x: torch.Tensor, state: OimState) -> torch.Tensor:
    """Scaled similarities to every LUT row followed by every filled queue row."""
    _check(x, state)
    bank = torch.cat([state.lut, state.active_queue()], dim=0).to(x.dtype)
    return x @ bank.t() / state.temperature


def oim_probabilities(x: torch.Tensor, state: OimState) -> torch.Tensor:
    """Class distribution over the C labeled identities only (queue excluded)."""
    _check(x, state)
    return F.softmax(x @ state.lut.to(x.dtype).t() / state.temperature, dim=1)


def oim_loss(x: torch.Tensor, labels: torch.Tensor, state: OimState) -> torch.Tensor:
    """Mean cross-entropy of labeled rows over LUT + queue; no state change."""
    _check(x, state)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < -1 or labels.max() >= state.num_classes):
        raise ValueError(f"labels must lie in {{-1}} U [0, {state.num_classes})")
    mask = labels >= 0
    if not bool(mask.any()):
        return x.sum() * 0.0
    return F.cross_entropy(oim_logits(x[mask], state), labels[mask])


def oim_loss_and_update(x: torch.Tensor, labels: torch.Tensor, state: OimState):
    """Loss first, then the momentum LUT update and queue push.

    A batch without labeled rows yields a zero loss (still attached to the
    graph) and bumps ``state.empty_batches``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    loss = oim_loss(x, labels, state)
    if not bool((labels >= 0).any()):
        state.empty_batches += 1
        log.debug("OIM batch without labeled samples; loss contribution is 0")
    state.update(x, labels)
    return loss, state
