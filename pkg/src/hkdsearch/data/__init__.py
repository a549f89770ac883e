from .annotations import (
    ALTITUDE_BUCKETS,
    CAMERAS,
    NOT_APPLICABLE,
    AnnotationSet,
    BoundingBox,
    ImageRecord,
    dataset_stats,
    format_stats,
    load_annotations,
    save_annotations,
)
from .protocol import (
    ProtocolEntry,
    SearchProtocol,
    build_search_protocol,
    dumps_protocol,
    load_protocol,
    positive_images,
    save_protocol,
    stratify_by_altitude,
)
from .synth import SynthConfig, synth_generate, write_synthetic
