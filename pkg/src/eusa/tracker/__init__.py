from .boxes import AnchorSet, clamp_box, decode, encode, iou
from .model import (
    SEARCH_SIZE,
    TEMPLATE_SIZE,
    ClassificationOutput,
    RegressionOutput,
    TrackerModel,
    WeightsError,
)
from .tracking import (
    OTB,
    VOT,
    CropTransform,
    SiameseTracker,
    TrackResult,
    apply_perturbation,
    extract_search_region,
    extract_template,
    select_box,
    template_embed,
    track_sequence,
)
from .train import TrainConfig, TrainHistory, train_toy_tracker
