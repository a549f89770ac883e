from .kernels import BACKEND
from .metrics import (
    Detection,
    ImageDetections,
    MetricReport,
    QueryResult,
    as_image_detections,
    detection_recall_ap,
    evaluate_stratified,
    format_report,
    format_stratified,
    iou,
    match_detections,
    rank_gallery,
    search_map_cmc,
)
