"""End-to-end training runs: corpus in, trained ensemble + metrics out.

A run is fully described by a RunConfig. The stages are

  1. subject-level stratified split of the manifest,
  2. surrogate pretraining of the eight CNN members,
  3. per-member fine-tune to the 2-way target task (own heads),
  4. joint fusion training over the pretrained members (main ensemble)
     and over the tuned members (pretuned variant),
  5. subject-level evaluation via chunk aggregation.

Every random draw comes from a sub-seed named after its stage, so one
(config, manifest) pair always produces byte-identical artifacts.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import models as M
from .aggregation import AggregationScheme, Diagnosis, aggregate, decide
from .audio_io import AudioClip, SubjectRecord, load_wav, parse_manifest, resample_linear
from .chunker import chunk_plan, extract_chunks
from .degradation import PoissonMaskConfig
from .fusion import (
    FusionSample,
    FusionTrainResult,
    build_fusion,
    fuse_from_embeddings,
    load_ensemble,
    member_embeddings,
    member_input_image,
    metadata_vector,
    save_ensemble,
    train_fusion,
)
from .mfcc import MfccParams
from .saliency import SaliencyMap, saliency_map
from .synthesis import surrogate_dataset
from .util import atomic_write_text, config_digest, derive_seed

FORMAT_VERSION = 1


class UnknownConfigKey(ValueError):
    """Config source contains a key RunConfig does not define."""


@dataclass
class RunConfig:
    """Everything a training run depends on, flat and JSON-friendly."""

    manifest: str = ""
    seed: int = 0
    label: str = "run"
    # chunking / aggregation
    chunk_size: float = 4.0
    stride: float = 2.0
    poisson_mask: bool = True
    scheme: str = "average"
    threshold: float = 0.5
    # training
    strategy: str = "frozen"
    learning_rate: float = 1e-3
    batch_size: int = 8
    pretrain_epochs: int = 12
    tune_epochs: int = 10
    fusion_epochs: int = 25
    surrogate_per_class: int = 16
    split_fraction: float = 0.7
    # features (lighter than the extractor's reference defaults)
    sample_rate: int = 16000
    window_len: float = 0.020
    window_step: float = 0.010
    num_cepstra: int = 13
    num_filters: int = 26
    fft_size: int = 512
    # member architecture
    arch_frames: int = 64
    stem_channels: int = 8
    num_blocks: int = 3
    embedding_dim: int = 32

    def mfcc_params(self) -> MfccParams:
        return MfccParams(
            window_len=self.window_len, window_step=self.window_step,
            num_cepstra=self.num_cepstra, num_filters=self.num_filters,
            fft_size=self.fft_size, sample_rate=self.sample_rate,
        )

    def arch(self) -> M.CnnArch:
        return M.CnnArch(
            input_shape=(self.arch_frames, self.num_cepstra),
            stem_channels=self.stem_channels, num_blocks=self.num_blocks,
            embedding_dim=self.embedding_dim,
        )

    def mask(self) -> PoissonMaskConfig | None:
        return PoissonMaskConfig() if self.poisson_mask else None

    def parsed_scheme(self) -> AggregationScheme:
        return AggregationScheme.parse(self.scheme)

    def parsed_strategy(self) -> M.TransferStrategy:
        return M.TransferStrategy.parse(self.strategy)

    def validate(self) -> None:
        if not self.manifest:
            raise ValueError("manifest path is required")
        if self.chunk_size <= 0 or self.stride <= 0:
            raise ValueError("chunk size and stride must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        for name in ("pretrain_epochs", "tune_epochs", "fusion_epochs",
                     "surrogate_per_class", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")
        self.parsed_scheme()
        self.parsed_strategy()
        self.mfcc_params().validate()
        self.arch().validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UnknownConfigKey(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def train_config(self, epochs: int, seed: int) -> M.TrainConfig:
        return M.TrainConfig(
            learning_rate=self.learning_rate, epochs=epochs,
            batch_size=self.batch_size, seed=seed,
            split_fraction=self.split_fraction,
        )


def resolve_wav_path(manifest_path: str, wav_path: str) -> str:
    if os.path.isabs(wav_path):
        return wav_path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), wav_path)


def load_clip(manifest_path: str, record: SubjectRecord,
              sample_rate: int) -> AudioClip:
    clip = load_wav(resolve_wav_path(manifest_path, record.wav_path))
    return resample_linear(clip, sample_rate)


class FeatureStore:
    """Per-subject clip and chunk cache for one run."""

    def __init__(self, manifest_path: str, params: MfccParams,
                 mask: PoissonMaskConfig | None):
        self.manifest_path = manifest_path
        self.params = params
        self.mask = mask
        self._clips: dict = {}
        self._chunks: dict = {}

    def clip(self, record: SubjectRecord) -> AudioClip:
        if record.subject_id not in self._clips:
            self._clips[record.subject_id] = load_clip(
                self.manifest_path, record, self.params.sample_rate)
        return self._clips[record.subject_id]

    def chunks(self, record: SubjectRecord, chunk_size: float,
               stride: float) -> list:
        key = (record.subject_id, chunk_size, stride)
        if key not in self._chunks:
            clip = self.clip(record)
            plan = chunk_plan(clip.duration, chunk_size, stride)
            self._chunks[key] = extract_chunks(clip, plan, self.params, self.mask)
        return self._chunks[key]


@dataclass
class TrainedPipeline:
    config: RunConfig
    registry: M.BiomarkerRegistry
    pretrained: dict            # biomarker_id -> surrogate-task model
    tuned: dict                 # biomarker_id -> 2-way fine-tuned model
    main_fusion: object
    main_members: list
    pt_fusion: object
    pt_members: list
    metrics: dict = field(default_factory=dict)

    @property
    def member_ids(self) -> list:
        return [e.biomarker_id for e in self.registry.model_entries()]

    @property
    def tuned_members(self) -> list:
        return [self.tuned[mid] for mid in self.member_ids]


def _ensemble_chunk_probs(fusion, members, chunks, metadata) -> list:
    emb = np.concatenate([member_embeddings(m, chunks) for m in members], axis=1)
    meta = np.broadcast_to(metadata, (len(chunks), metadata.size)).copy()
    probs, _ = fuse_from_embeddings(fusion, emb, meta)
    return [float(p) for p in probs[:, 1]]


def _member_chunk_probs(member, chunks) -> list:
    """P(positive) per chunk from a tuned member's own head."""
    x = np.stack([M.prepare_input(member, member_input_image(member, c))
                  for c in chunks])
    _, probs, _ = M.forward_batch(member, x)
    return [float(p) for p in probs[:, 1]]


def _subject_metrics(diagnoses: list, records: list, threshold: float) -> dict:
    labels = {r.subject_id: r.label for r in records}
    subj_hits = chunk_hits = chunk_total = 0
    for d in diagnoses:
        want = labels[d.subject_id]
        subj_hits += int((d.label == "positive") == bool(want))
        for p in d.chunk_probabilities:
            chunk_hits += int((decide(p, threshold) == "positive") == bool(want))
            chunk_total += 1
    return {
        "num_subjects": len(diagnoses),
        "subject_accuracy": subj_hits / len(diagnoses) if diagnoses else 0.0,
        "chunk_accuracy": chunk_hits / chunk_total if chunk_total else 0.0,
    }


def run_training(config: RunConfig) -> TrainedPipeline:
    config.validate()
    records = parse_manifest(config.manifest)
    registry = M.build_registry()
    entries = registry.model_entries()
    params = config.mfcc_params()
    arch = config.arch()
    strategy = config.parsed_strategy()
    store = FeatureStore(config.manifest, params, config.mask())

    # 1. hold out whole subjects, stratified by label
    labels = [r.label for r in records]
    split_rng = np.random.default_rng(derive_seed(config.seed, "subject_split"))
    train_idx, test_idx = M.stratified_split(labels, config.split_fraction,
                                             split_rng)
    train_records = [records[i] for i in train_idx]
    test_records = [records[i] for i in test_idx]

    # 2. surrogate pretraining, one task per member recipe
    pretrained: dict = {}
    for entry in entries:
        data = surrogate_dataset(entry, params,
                                 derive_seed(config.seed, "surrogate",
                                             entry.biomarker_id),
                                 config.surrogate_per_class)
        model0 = M.init_cnn(arch, entry.num_classes,
                            derive_seed(config.seed, "init", entry.biomarker_id),
                            entry.biomarker_id)
        result = M.train(model0, data,
                         config.train_config(
                             config.pretrain_epochs,
                             derive_seed(config.seed, "pretrain",
                                         entry.biomarker_id)),
                         M.TransferStrategy.all_layers())
        pretrained[entry.biomarker_id] = result.model

    # chunk-level target dataset from the training subjects
    samples = []
    for rec in train_records:
        metadata = metadata_vector(rec.gender, rec.age)
        for chunk in store.chunks(rec, config.chunk_size, config.stride):
            samples.append(FusionSample(chunk, metadata, rec.label,
                                        rec.subject_id))

    # 3. per-member fine-tune on the target task (kept for saliency and
    # the pretuned ensemble; their own heads never see joint gradients)
    tuned: dict = {}
    for entry in entries:
        mid = entry.biomarker_id
        member = M.replace_head(pretrained[mid], 2,
                                derive_seed(config.seed, "tune_head", mid))
        data = [(member_input_image(member, s.chunk), s.label) for s in samples]
        result = M.train(member, data,
                         config.train_config(
                             config.tune_epochs,
                             derive_seed(config.seed, "tune", mid)),
                         strategy)
        tuned[mid] = result.model

    # 4. joint fusion training
    member_order = [pretrained[e.biomarker_id] for e in entries]
    fusion0 = build_fusion(member_order,
                           seed=derive_seed(config.seed, "fusion", "main"))
    main = train_fusion(fusion0, member_order, samples,
                        config.train_config(
                            config.fusion_epochs,
                            derive_seed(config.seed, "fusion_train", "main")),
                        strategy)

    tuned_order = [tuned[e.biomarker_id] for e in entries]
    fusion_pt0 = build_fusion(tuned_order,
                              seed=derive_seed(config.seed, "fusion", "pt"))
    pt = train_fusion(fusion_pt0, tuned_order, samples,
                      config.train_config(
                          config.fusion_epochs,
                          derive_seed(config.seed, "fusion_train", "pt")),
                      strategy)

    pipe = TrainedPipeline(config, registry, pretrained, tuned,
                           main.fusion, main.members, pt.fusion, pt.members)
    pipe.metrics = _run_metrics(pipe, store, train_records, test_records,
                                main, pt)
    return pipe


def _run_metrics(pipe: TrainedPipeline, store: FeatureStore,
                 train_records: list, test_records: list,
                 main: FusionTrainResult, pt: FusionTrainResult) -> dict:
    config = pipe.config
    scheme = config.parsed_scheme()

    def ensemble_diagnoses(fusion, members, recs):
        out = []
        for rec in recs:
            chunks = store.chunks(rec, config.chunk_size, config.stride)
            metadata = metadata_vector(rec.gender, rec.age)
            probs = _ensemble_chunk_probs(fusion, members, chunks, metadata)
            p = aggregate(probs, scheme)
            out.append(Diagnosis(rec.subject_id, p, decide(p, config.threshold),
                                 config.threshold, scheme.value, probs,
                                 config.chunk_size, config.stride))
        return out

    train_diag = ensemble_diagnoses(pipe.main_fusion, pipe.main_members,
                                    train_records)
    test_diag = ensemble_diagnoses(pipe.main_fusion, pipe.main_members,
                                   test_records)
    pt_test = ensemble_diagnoses(pipe.pt_fusion, pipe.pt_members, test_records)

    member_acc: dict = {}
    detections: dict = {}
    test_positives = sorted(r.subject_id for r in test_records if r.label == 1)
    for mid in pipe.member_ids:
        member = pipe.tuned[mid]
        hits = 0
        detected = []
        for rec in test_records:
            chunks = store.chunks(rec, config.chunk_size, config.stride)
            p = aggregate(_member_chunk_probs(member, chunks), scheme)
            positive = decide(p, config.threshold) == "positive"
            hits += int(positive == bool(rec.label))
            if positive and rec.subject_id in test_positives:
                detected.append(rec.subject_id)
        member_acc[mid] = hits / len(test_records) if test_records else 0.0
        detections[mid] = sorted(detected)
    best_id = max(member_acc, key=lambda k: (member_acc[k], k))

    return {
        "format_version": FORMAT_VERSION,
        "seed": config.seed,
        "config_digest": config.digest(),
        "label": config.label,
        "counts": {
            "subjects": len(train_records) + len(test_records),
            "train_subjects": len(train_records),
            "test_subjects": len(test_records),
            "fusion_samples": sum(
                len(store.chunks(r, config.chunk_size, config.stride))
                for r in train_records),
        },
        "train": _subject_metrics(train_diag, train_records, config.threshold),
        "test": _subject_metrics(test_diag, test_records, config.threshold),
        "pt_test": _subject_metrics(pt_test, test_records, config.threshold),
        "fusion": {
            "chunk_train_accuracy": main.train_accuracy,
            "chunk_test_accuracy": main.test_accuracy,
            "final_epoch_loss": main.epoch_losses[-1] if main.epoch_losses else None,
        },
        "pt_fusion": {
            "chunk_train_accuracy": pt.train_accuracy,
            "chunk_test_accuracy": pt.test_accuracy,
        },
        "members": {mid: {"test_subject_accuracy": member_acc[mid]}
                    for mid in member_acc},
        "best_member": {
            "biomarker_id": best_id,
            "test_subject_accuracy": member_acc[best_id],
        },
        "detections": detections,
        "test_positives": test_positives,
        "train_subjects": sorted(r.subject_id for r in train_records),
        "test_subjects": sorted(r.subject_id for r in test_records),
    }


# ---------------------------------------------------------- persistence

def _artifact_meta(config: RunConfig) -> dict:
    return {"format_version": FORMAT_VERSION, "seed": config.seed,
            "config_digest": config.digest()}


def save_pipeline(pipe: TrainedPipeline, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    models_dir = os.path.join(out_dir, "models")
    os.makedirs(models_dir, exist_ok=True)
    meta = _artifact_meta(pipe.config)

    payload = dict(meta)
    payload["config"] = pipe.config.to_dict()
    atomic_write_text(os.path.join(out_dir, "config.json"),
                      json.dumps(payload, indent=2, sort_keys=True) + "\n")
    atomic_write_text(os.path.join(out_dir, "metrics.json"),
                      json.dumps(pipe.metrics, indent=2, sort_keys=True) + "\n")
    for mid in pipe.member_ids:
        M.save_model(os.path.join(models_dir, f"member_pre_{mid}.ovbm"),
                     pipe.pretrained[mid], meta)
        M.save_model(os.path.join(models_dir, f"member_tuned_{mid}.ovbm"),
                     pipe.tuned[mid], meta)
    save_ensemble(os.path.join(out_dir, "ensemble_main"),
                  pipe.main_fusion, pipe.main_members, meta)
    save_ensemble(os.path.join(out_dir, "ensemble_pt"),
                  pipe.pt_fusion, pipe.pt_members, meta)


def load_pipeline(out_dir: str) -> TrainedPipeline:
    config_path = os.path.join(out_dir, "config.json")
    if not os.path.exists(config_path):
        raise FileNotFoundError(f"missing run config {config_path}")
    with open(config_path) as fh:
        payload = json.load(fh)
    config = RunConfig.from_dict(payload["config"])
    metrics_path = os.path.join(out_dir, "metrics.json")
    metrics = {}
    if os.path.exists(metrics_path):
        with open(metrics_path) as fh:
            metrics = json.load(fh)

    registry = M.build_registry()
    pretrained: dict = {}
    tuned: dict = {}
    for entry in registry.model_entries():
        mid = entry.biomarker_id
        for kind, dest in (("pre", pretrained), ("tuned", tuned)):
            path = os.path.join(out_dir, "models", f"member_{kind}_{mid}.ovbm")
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing weight file {path}")
            dest[mid] = M.load_model(path)
    main_fusion, main_members = load_ensemble(os.path.join(out_dir, "ensemble_main"))
    pt_fusion, pt_members = load_ensemble(os.path.join(out_dir, "ensemble_pt"))
    return TrainedPipeline(config, registry, pretrained, tuned,
                           main_fusion, main_members, pt_fusion, pt_members,
                           metrics)


# ----------------------------------------------------------- per-subject

def evaluate_manifest(pipe: TrainedPipeline, manifest_path: str) -> dict:
    """Subject accuracy of the saved main ensemble on a manifest."""
    config = pipe.config
    records = parse_manifest(manifest_path)
    store = FeatureStore(manifest_path, config.mfcc_params(), config.mask())
    scheme = config.parsed_scheme()
    diagnoses = []
    for rec in records:
        chunks = store.chunks(rec, config.chunk_size, config.stride)
        probs = _ensemble_chunk_probs(pipe.main_fusion, pipe.main_members,
                                      chunks, metadata_vector(rec.gender, rec.age))
        p = aggregate(probs, scheme)
        diagnoses.append(Diagnosis(rec.subject_id, p,
                                   decide(p, config.threshold),
                                   config.threshold, scheme.value, probs,
                                   config.chunk_size, config.stride))
    out = _subject_metrics(diagnoses, records, config.threshold)
    out["subjects"] = {
        d.subject_id: {"probability": d.probability, "label": d.label}
        for d in diagnoses
    }
    return out


def diagnose_subject(pipe: TrainedPipeline, record: SubjectRecord,
                     clip: AudioClip) -> Diagnosis:
    from .aggregation import diagnose

    config = pipe.config
    return diagnose(record, clip, pipe.main_fusion, pipe.main_members,
                    config.mfcc_params(), config.chunk_size, config.stride,
                    config.parsed_scheme(), config.threshold, config.mask())


def subject_saliency(pipe: TrainedPipeline, record: SubjectRecord,
                     clip: AudioClip) -> SaliencyMap:
    config = pipe.config
    return saliency_map(record, clip, pipe.tuned_members,
                        pipe.main_fusion, pipe.main_members,
                        pipe.pt_fusion, pipe.pt_members,
                        config.mfcc_params(), config.chunk_size, config.stride,
                        config.parsed_scheme(), config.mask())
