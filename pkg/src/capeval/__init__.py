"""Reference-free, token-level image caption evaluation toolkit."""

from .backbone import EmbeddingBackbone, PretrainedClipBackbone, SyntheticBackbone, build_backbone
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .encoding import (
    EVAL_SEMANTIC_POS,
    MAX_TEXT_LEN,
    TRAIN_SEMANTIC_POS,
    CaptionTokenFeatures,
    ImageTokenFeatures,
    RegionSet,
    dedup_regions,
    extract_caption_tokens,
    extract_image_tokens,
)
from .fusion import FusedFeatures, FusionConfig, FusionModule, collate_pairs, fuse
from .model import EvaluationModel, ModelConfig, cross_score_matrix, score_corpus, score_pair
from .scoring import (
    ScoreReport,
    ScoringHead,
    TokenScores,
    baseline_clip_s,
    baseline_infoclip,
    overall_score,
    plus_score,
    precision_score,
    recall_score,
    text_token_scores,
    token_decisions,
    vision_token_scores,
)
from .training import (
    TrainConfig,
    Trainer,
    TrainingData,
    fine_text_loss,
    fine_vision_loss,
    htn_loss,
    nce_loss,
    prepare_training_data,
    train,
)

__version__ = "0.1.0"
