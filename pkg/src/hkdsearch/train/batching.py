"""Turn annotation records into model inputs."""
from __future__ import annotations

import numpy as np
import torch

from ..data.annotations import AnnotationSet, ImageRecord


def class_map(aset: AnnotationSet) -> dict[int, int]:
    """Dataset identity -> OIM class index, in sorted identity order."""
    return {pid: k for k, pid in enumerate(sorted(aset.identity_universe))}


def image_tensor(aset: AnnotationSet, image_id: str) -> torch.Tensor:
    arr = aset.load_image(image_id)
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).float().div_(255.0)


def record_target(rec: ImageRecord, classes: dict[int, int], flip: bool = False) -> dict:
    boxes = torch.tensor([b.xyxy() for b in rec.boxes], dtype=torch.float32).reshape(-1, 4)
    if flip and len(boxes):
        boxes = torch.stack([rec.width - boxes[:, 2], boxes[:, 1], rec.width - boxes[:, 0], boxes[:, 3]], dim=1)
    labels = torch.tensor([classes.get(b.identity, -1) for b in rec.boxes], dtype=torch.long)
    return {"boxes": boxes, "labels": labels}


class BatchIterator:
    """Seeded per-epoch shuffling; the order of epoch ``e`` depends only on ``(seed, e)``."""

    def __init__(self, aset: AnnotationSet, batch_size: int, seed: int, hflip: bool = True, classes=None):
        self.aset = aset
        self.batch_size = batch_size
        self.seed = seed
        self.hflip = hflip
        self.classes = classes if classes is not None else class_map(aset)
        self._cache: dict[str, torch.Tensor] = {}

    def __len__(self):
        return -(-len(self.aset.records) // self.batch_size)

    def _image(self, image_id):
        if image_id not in self._cache:
            self._cache[image_id] = image_tensor(self.aset, image_id)
        return self._cache[image_id]

    def epoch(self, epoch: int):
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.aset.records))
        flips = rng.random(len(order)) < 0.5 if self.hflip else np.zeros(len(order), dtype=bool)
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            images, targets, ids = [], [], []
            for i in idx:
                rec = self.aset.records[i]
                im = self._image(rec.image_id)
                if flips[i]:
                    im = im.flip(-1)
                images.append(im)
                targets.append(record_target(rec, self.classes, bool(flips[i])))
                ids.append(rec.image_id)
            yield images, targets, ids
