"""Few-shot sequence classification by compound prototype matching.

Videos arrive as precomputed per-frame global features and per-object
features. A multi-relation transformer encoder and a prototype decoder turn
each video into two prototype groups; similarity between videos combines an
index-aligned comparison of the global group with an optimal bipartite
alignment of the focused group, and episodic training fits the whole stack
end to end on a built-in reverse-mode autodiff engine.
"""

from fsar.data import (
    Episode,
    FeatureSet,
    SynthSpec,
    VideoFeatures,
    load_feature_set,
    philox,
    sample_episode,
    save_feature_set,
    split_classes,
    synth_dataset,
)
from fsar.engine import (
    Checkpoint,
    EvalReport,
    RunConfig,
    build_model,
    evaluate,
    inspect_attention,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from fsar.matching import hungarian_max, video_similarity
from fsar.tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "Episode",
    "EvalReport",
    "FeatureSet",
    "RunConfig",
    "SynthSpec",
    "Tensor",
    "VideoFeatures",
    "build_model",
    "evaluate",
    "hungarian_max",
    "inspect_attention",
    "load_checkpoint",
    "load_feature_set",
    "no_grad",
    "philox",
    "predict",
    "sample_episode",
    "save_checkpoint",
    "save_feature_set",
    "split_classes",
    "synth_dataset",
    "train",
    "video_similarity",
]
