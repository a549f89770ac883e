from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class ModelConfig:
    """Network hyperparameters; every field round-trips through JSON config files."""

    backbone: str = "resnet50"  # "resnet50" or "tiny"
    pretrained: str | None = None  # optional path to a backbone state dict
    tiny_channels: tuple[int, ...] = (32, 64, 128)
    tiny_head_channels: int = 256
    embedding_dim: int = 256
    pool_size: int = 7
    sampling_ratio: int = 0  # 0: adaptive, ceil(bin size) samples per bin
    anchor_sizes: tuple[int, ...] = (32, 64, 128, 256, 512)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pre_nms_top_n_train: int = 12000
    rpn_post_nms_top_n_train: int = 2000
    rpn_pre_nms_top_n_test: int = 6000
    rpn_post_nms_top_n_test: int = 300
    rpn_nms_thresh: float = 0.7
    rpn_fg_iou_thresh: float = 0.7
    rpn_bg_iou_thresh: float = 0.3
    rpn_batch_size_per_image: int = 256
    rpn_positive_fraction: float = 0.5
    box_fg_iou_thresh: float = 0.5
    box_bg_iou_thresh: float = 0.5
    box_batch_size_per_image: int = 128
    box_positive_fraction: float = 0.5
    reid_batch_size_per_image: int = 128
    reid_positive_fraction: float = 0.5
    box_score_thresh: float = 0.05
    box_nms_thresh: float = 0.4
    detections_per_img: int = 300
    det_score_thresh: float = 0.5
    image_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    image_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    use_teacher: bool = True

    @property
    def stride(self) -> int:
        return 16 if self.backbone == "resnet50" else 2 ** len(self.tiny_channels)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        obj = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        return cls(**obj)


def tiny_config(**overrides) -> ModelConfig:
    """CPU-scale network for the synthetic data (persons 10-25 px wide), stride 4."""
    base = dict(
        backbone="tiny",
        tiny_channels=(32, 64),
        tiny_head_channels=128,
        anchor_sizes=(12, 24, 48),
        aspect_ratios=(2.0,),
        rpn_pre_nms_top_n_train=600,
        rpn_post_nms_top_n_train=128,
        rpn_pre_nms_top_n_test=300,
        rpn_post_nms_top_n_test=64,
        box_batch_size_per_image=64,
        reid_batch_size_per_image=32,
        detections_per_img=32,
        # the small second-stage classifier is under-confident after a short schedule
        det_score_thresh=0.2,
    )
    base.update(overrides)
    return ModelConfig(**base)
