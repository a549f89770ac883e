from .config import ModelConfig, tiny_config
from .network import (
    EmbeddingBatch,
    FeatureMap,
    ReIDHead,
    RoiFeatures,
    SearchNet,
    TrainOutput,
    detach_features,
    pool_rois,
)
