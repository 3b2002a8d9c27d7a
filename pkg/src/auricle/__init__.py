"""auricle: ear-biometrics verification pipeline and longitudinal evaluation toolkit."""

__version__ = "0.1.0"

from .dataset import (
    ImageRecord,
    Manifest,
    SynthConfig,
    generate_synthetic,
    parse_manifest,
    rasterize_polygon,
    write_manifest,
)
from .embed import (
    BackendSpec,
    EmbeddingVector,
    Standardizer,
    builtin_descriptor,
    embed_image,
    load_backend,
    load_store,
    save_store,
)
from .evaluate import (
    EvalReport,
    ScoreSet,
    Trial,
    build_trials,
    calibrate_threshold,
    compute_rates,
    pairwise_distances,
    roc_curve,
    run_protocol,
)
from .fuse import FeatureSelector, FusedVector, SelectorConfig, fisher_scores
from .preprocess import (
    ClaheParams,
    EarImage,
    EarPreprocessor,
    OrientationEstimate,
    align_and_crop,
    apply_mask,
    clahe,
    estimate_orientation,
    normalize_side,
    preprocess_record,
    resize_bilinear,
)
from .project import ProjectionResult, TsneEmbedding, TsneParams, project_or_bypass, tsne_embed
