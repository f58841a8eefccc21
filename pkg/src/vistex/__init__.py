"""Few-shot image prompting for a frozen toy grounded detector.

The package generates a synthetic shapes benchmark, pretrains a miniature
multi-scale multi-stage grounded detector on its base classes, and then
teaches a lightweight textualizer to project K-shot visual exemplars into
the detector's text-token space so novel classes become detectable without
touching a single detector weight.
"""

from .config import DataConfig, OVLMConfig, NO_OBJECT, config_hash
from .decode import Detection, decode_detections, greedy_nms
from .errors import (
    CheckpointCorruptionError,
    ContaminationError,
    FeatureShapeError,
    InsufficientDataError,
    InvalidConfigError,
    InvalidInputError,
    InvalidPromptError,
    InvalidSplitError,
    InvalidStageError,
    NumericError,
    ProtocolError,
    VistexError,
)
from .evaluation import (
    AlignmentReport,
    MetricsReport,
    alignment_histogram,
    average_precision,
    collect_alignment_samples,
    evaluate_fsod,
    iou,
)
from .fusion import TextualizedToken, fuse_shots, fuse_stages
from .mstb import MultiScaleTextualizer, TextualizedStageToken, mstb_param_count
from .ovlm import (
    GroundingOutput,
    MultiScaleFeatures,
    TokenSequence,
    ToyOVLM,
    build_vocab,
)
from .prompting import (
    SupportExemplar,
    assemble_prompt,
    engineer_prompt,
    textualize_supports,
)
from .synthdata import (
    AnnotatedImage,
    ClassSpec,
    DatasetManifest,
    EpisodeSpec,
    generate_dataset,
    load_manifest,
    sample_episode,
    split_classes,
    validate_manifest,
)
from .training import (
    compute_grounding_loss,
    finite_diff_grad_check,
    pretrain,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
