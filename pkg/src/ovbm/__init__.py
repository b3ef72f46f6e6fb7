"""Explainable voice screening: MFCC features, a Poisson degradation
mask, a residual-CNN biomarker ensemble with metadata fusion, and
per-subject saliency reports."""

from .aggregation import AggregationScheme, Diagnosis, aggregate, decide, diagnose
from .audio_io import (
    AudioClip,
    SubjectRecord,
    SynthSpec,
    load_wav,
    parse_manifest,
    synth_clip,
    write_wav,
)
from .chunker import Chunk, ChunkPlan, brainos_sizes, chunk_plan, extract_chunks
from .degradation import PoissonMaskConfig, apply_poisson_mask, poisson_pmf
from .fusion import (
    FusionModel,
    FusionSample,
    build_fusion,
    fuse_forward,
    load_ensemble,
    metadata_vector,
    save_ensemble,
    train_fusion,
)
from .mfcc import MfccImage, MfccParams, load_mfcc, mfcc, mfcc_oracle, save_mfcc
from .models import (
    BiomarkerModel,
    BiomarkerRegistry,
    CnnArch,
    TrainConfig,
    TransferStrategy,
    build_registry,
    init_cnn,
    load_model,
    save_model,
    train,
)
from .pipeline import (
    RunConfig,
    TrainedPipeline,
    load_pipeline,
    run_training,
    save_pipeline,
    subject_saliency,
)
from .saliency import (
    SaliencyMap,
    ablation_report,
    compare_maps,
    saliency_map,
    uniqueness_report,
)
from .synthesis import surrogate_dataset, write_corpus
from .util import derive_seed

__version__ = "0.1.0"

__all__ = [
    "AggregationScheme", "Diagnosis", "aggregate", "decide", "diagnose",
    "AudioClip", "SubjectRecord", "SynthSpec", "load_wav", "parse_manifest",
    "synth_clip", "write_wav",
    "Chunk", "ChunkPlan", "brainos_sizes", "chunk_plan", "extract_chunks",
    "PoissonMaskConfig", "apply_poisson_mask", "poisson_pmf",
    "FusionModel", "FusionSample", "build_fusion", "fuse_forward",
    "load_ensemble", "metadata_vector", "save_ensemble", "train_fusion",
    "MfccImage", "MfccParams", "load_mfcc", "mfcc", "mfcc_oracle", "save_mfcc",
    "BiomarkerModel", "BiomarkerRegistry", "CnnArch", "TrainConfig",
    "TransferStrategy", "build_registry", "init_cnn", "load_model",
    "save_model", "train",
    "RunConfig", "TrainedPipeline", "load_pipeline", "run_training",
    "save_pipeline", "subject_saliency",
    "SaliencyMap", "ablation_report", "compare_maps", "saliency_map",
    "uniqueness_report",
    "surrogate_dataset", "write_corpus",
    "derive_seed",
    "__version__",
]
