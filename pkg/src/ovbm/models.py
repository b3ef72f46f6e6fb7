"""Residual micro-CNN biomarker models: init, forward/backward, transfer
strategies, Adam training, the biomarker registry, and weight-file IO.

Topology: stem 3x3 conv -> N residual blocks (conv-ReLU-conv + identity
skip, ReLU, 2x2 average pool) -> global average pool -> linear embedding
-> linear classification head -> softmax. All passes are written by
hand in numpy so gradients can be checked against finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .mfcc import MfccImage
from .util import derive_seed

WEIGHT_MAGIC = b"OVBM"
WEIGHT_FORMAT_VERSION = 1


class ShapeMismatch(ValueError):
    """Input image shape is incompatible with the model architecture."""


class NonFiniteActivation(FloatingPointError):
    """Forward pass produced NaN/Inf; weights are corrupt."""


class NTooLarge(ValueError):
    """FineTuneLastN asked for more conv layers than the arch has."""


class SingleClassDataset(ValueError):
    """Training data contains fewer than two classes."""


@dataclass(frozen=True)
class CnnArch:
    """input_shape: (frames, coefficients). Images whose frame count
    differs are center-cropped/padded along the frame axis."""

    input_shape: tuple
    stem_channels: int = 8
    num_blocks: int = 3
    embedding_dim: int = 64

    def validate(self) -> None:
        frames, coeffs = self.input_shape
        if frames < 1 or coeffs < 1:
            raise ShapeMismatch("input_shape must be positive")
        if self.stem_channels < 1 or self.num_blocks < 1 or self.embedding_dim < 1:
            raise ValueError("arch sizes must be positive")
        h, w = frames, coeffs
        for b in range(self.num_blocks):
            if h < 2 or w < 2:
                raise ShapeMismatch(
                    f"block {b + 1} would pool a {h}x{w} map; input too small"
                )
            h, w = h // 2, w // 2

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "stem_channels": self.stem_channels,
            "num_blocks": self.num_blocks,
            "embedding_dim": self.embedding_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "CnnArch":
        return CnnArch(
            tuple(d["input_shape"]), d["stem_channels"],
            d["num_blocks"], d["embedding_dim"],
        )


def conv_layer_names(arch: CnnArch) -> list:
    """Conv layers ordered input -> output."""
    names = ["stem"]
    for b in range(1, arch.num_blocks + 1):
        names += [f"block{b}.conv1", f"block{b}.conv2"]
    return names


def layer_names(arch: CnnArch) -> list:
    return conv_layer_names(arch) + ["embed", "head"]


@dataclass(frozen=True)
class TransferStrategy:
    """Which layers fine-tuning may touch.

    kind "frozen": only the classification head trains. kind "last_n":
    the head plus the last n conv layers (counted from the output side).
    kind "all": everything.
    """

    kind: str
    n: int = 0

    @staticmethod
    def frozen() -> "TransferStrategy":
        return TransferStrategy("frozen")

    @staticmethod
    def last_n(n: int) -> "TransferStrategy":
        return TransferStrategy("last_n", int(n))

    @staticmethod
    def all_layers() -> "TransferStrategy":
        return TransferStrategy("all")

    @staticmethod
    def parse(text: str) -> "TransferStrategy":
        text = text.strip().lower()
        if text == "frozen":
            return TransferStrategy.frozen()
        if text == "all":
            return TransferStrategy.all_layers()
        if text.startswith("last:"):
            return TransferStrategy.last_n(int(text.split(":", 1)[1]))
        raise ValueError(f"unknown strategy {text!r} (frozen | last:N | all)")

    def describe(self) -> str:
        return {"frozen": "frozen", "all": "all"}.get(self.kind, f"last:{self.n}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    split_fraction: float = 0.7


@dataclass
class BiomarkerModel:
    biomarker_id: str
    arch: CnnArch
    num_classes: int
    weights: dict
    trainable: dict  # layer name -> bool

    def validate(self) -> None:
        self.arch.validate()
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        expected = layer_names(self.arch)
        if sorted(self.trainable) != sorted(expected):
            raise ValueError("trainability mask must cover every layer exactly once")
        for k, w in self.weights.items():
            if not np.isfinite(w).all():
                raise ValueError(f"non-finite weights in {k}")


def init_cnn(arch: CnnArch, num_classes: int, seed: int,
             biomarker_id: str = "") -> BiomarkerModel:
    """He-style uniform weights (scaled by fan-in), zero biases. The
    draw order is fixed so one seed always produces one network."""
    arch.validate()
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    C = arch.stem_channels
    weights: dict = {}
    weights["stem.w"] = nn.he_uniform(rng, (C, 1, 3, 3), fan_in=9)
    weights["stem.b"] = np.zeros(C)
    for b in range(1, arch.num_blocks + 1):
        for conv in ("conv1", "conv2"):
            weights[f"block{b}.{conv}.w"] = nn.he_uniform(rng, (C, C, 3, 3),
                                                          fan_in=9 * C)
            weights[f"block{b}.{conv}.b"] = np.zeros(C)
    weights["embed.w"] = nn.he_uniform(rng, (arch.embedding_dim, C), fan_in=C)
    weights["embed.b"] = np.zeros(arch.embedding_dim)
    weights["head.w"] = nn.he_uniform(rng, (num_classes, arch.embedding_dim),
                                      fan_in=arch.embedding_dim)
    weights["head.b"] = np.zeros(num_classes)
    trainable = {name: True for name in layer_names(arch)}
    return BiomarkerModel(biomarker_id, arch, num_classes, weights, trainable)


def clone_model(model: BiomarkerModel) -> BiomarkerModel:
    return BiomarkerModel(
        model.biomarker_id, model.arch, model.num_classes,
        {k: w.copy() for k, w in model.weights.items()},
        dict(model.trainable),
    )


def replace_head(model: BiomarkerModel, num_classes: int, seed: int) -> BiomarkerModel:
    """Fresh classification head for a new target task; every other
    tensor is carried over unchanged."""
    out = clone_model(model)
    rng = np.random.default_rng(seed)
    out.weights["head.w"] = nn.he_uniform(
        rng, (num_classes, model.arch.embedding_dim), fan_in=model.arch.embedding_dim
    )
    out.weights["head.b"] = np.zeros(num_classes)
    out.num_classes = num_classes
    return out


def apply_transfer_strategy(model: BiomarkerModel,
                            strategy: TransferStrategy) -> BiomarkerModel:
    """Return a copy whose trainability mask reflects the strategy."""
    convs = conv_layer_names(model.arch)
    out = clone_model(model)
    if strategy.kind == "frozen":
        trainable_convs: set = set()
        embed = False
    elif strategy.kind == "all":
        trainable_convs = set(convs)
        embed = True
    elif strategy.kind == "last_n":
        if strategy.n < 0:
            raise ValueError("n must be nonnegative")
        if strategy.n > len(convs):
            raise NTooLarge(f"n={strategy.n} but arch has {len(convs)} conv layers")
        trainable_convs = set(convs[len(convs) - strategy.n:])
        embed = False
    else:
        raise ValueError(f"unknown strategy kind {strategy.kind!r}")
    out.trainable = {name: name in trainable_convs for name in convs}
    out.trainable["embed"] = embed
    out.trainable["head"] = True
    return out


# ------------------------------------------------------------- forward

def fit_frames(values: np.ndarray, target_frames: int) -> np.ndarray:
    """Center-crop or zero-pad along axis 0 to `target_frames` rows."""
    frames = values.shape[0]
    if frames == target_frames:
        return values
    if frames > target_frames:
        start = (frames - target_frames) // 2
        return values[start:start + target_frames]
    before = (target_frames - frames) // 2
    after = target_frames - frames - before
    return np.pad(values, ((before, after), (0, 0)))


def prepare_input(model: BiomarkerModel, image) -> np.ndarray:
    values = image.values if isinstance(image, MfccImage) else np.asarray(image)
    if values.ndim != 2:
        raise ShapeMismatch("expected a 2-D feature image")
    frames, coeffs = model.arch.input_shape
    if values.shape[1] != coeffs:
        raise ShapeMismatch(
            f"image has {values.shape[1]} coefficients, arch expects {coeffs}"
        )
    return fit_frames(values, frames)


def forward_batch(model: BiomarkerModel, x: np.ndarray, want_cache: bool = False):
    """x: [B, H, W] already fitted. Returns (embeddings, probs, cache)."""
    w = model.weights
    a = x[:, None, :, :]
    cache: dict = {"x": a} if want_cache else None

    stem_out = nn.relu(nn.conv3x3(a, w["stem.w"], w["stem.b"]))
    if want_cache:
        cache["stem_relu"] = stem_out
    a = stem_out

    blocks = []
    for b in range(1, model.arch.num_blocks + 1):
        block_in = a
        r1 = nn.relu(nn.conv3x3(block_in, w[f"block{b}.conv1.w"],
                                w[f"block{b}.conv1.b"]))
        z2 = nn.conv3x3(r1, w[f"block{b}.conv2.w"], w[f"block{b}.conv2.b"])
        s = nn.relu(z2 + block_in)
        a = nn.avgpool2(s)
        if want_cache:
            blocks.append({"in": block_in, "r1": r1, "s": s})
    if want_cache:
        cache["blocks"] = blocks
        cache["gap_in_shape"] = a.shape

    g = nn.global_avgpool(a)
    emb = nn.linear(g, w["embed.w"], w["embed.b"])
    logits = nn.linear(emb, w["head.w"], w["head.b"])
    if not (np.isfinite(emb).all() and np.isfinite(logits).all()):
        raise NonFiniteActivation("non-finite activation; weights corrupt")
    probs = nn.softmax(logits)
    if want_cache:
        cache["g"] = g
        cache["emb"] = emb
        cache["logits"] = logits
        cache["probs"] = probs
    return emb, probs, cache


def forward(model: BiomarkerModel, image):
    """Single-image inference. Returns (embedding [E], probs [K])."""
    x = prepare_input(model, image)[None, :, :]
    emb, probs, _ = forward_batch(model, x)
    return emb[0], probs[0]


def _conv_index(name: str, convs: list) -> int:
    return convs.index(name)


def backward_from_embedding(model: BiomarkerModel, cache: dict,
                            d_emb: np.ndarray, needed: set) -> dict:
    """Backprop from an embedding gradient. `needed` is the set of layer
    names whose weight gradients the caller wants; the walk stops as
    soon as nothing deeper is required."""
    w = model.weights
    convs = conv_layer_names(model.arch)
    grads: dict = {}

    g = cache["g"]
    if "embed" in needed:
        grads["embed.w"] = d_emb.T @ g
        grads["embed.b"] = d_emb.sum(axis=0)

    needed_conv_idx = [_conv_index(c, convs) for c in needed if c in convs]
    if not needed_conv_idx:
        return grads
    min_needed = min(needed_conv_idx)

    dg = d_emb @ w["embed.w"]
    da = nn.global_avgpool_backward(dg, cache["gap_in_shape"])

    for b in range(model.arch.num_blocks, 0, -1):
        idx1, idx2 = 2 * b - 1, 2 * b
        if min_needed > idx2:
            break
        blk = cache["blocks"][b - 1]
        da = nn.avgpool2_backward(da, blk["s"].shape)
        ds = nn.relu_backward(da, blk["s"])
        need_below_conv2 = min_needed < idx2
        dx2, dw2, db2 = nn.conv3x3_backward(
            ds, blk["r1"], w[f"block{b}.conv2.w"], need_dx=need_below_conv2
        )
        if f"block{b}.conv2" in needed:
            grads[f"block{b}.conv2.w"] = dw2
            grads[f"block{b}.conv2.b"] = db2
        if not need_below_conv2:
            break
        dr1 = nn.relu_backward(dx2, blk["r1"])
        need_below_conv1 = min_needed < idx1
        dx1, dw1, db1 = nn.conv3x3_backward(
            dr1, blk["in"], w[f"block{b}.conv1.w"], need_dx=need_below_conv1
        )
        if f"block{b}.conv1" in needed:
            grads[f"block{b}.conv1.w"] = dw1
            grads[f"block{b}.conv1.b"] = db1
        if not need_below_conv1:
            break
        da = dx1 + ds  # identity skip joins here

    if "stem" in needed:
        dpre = nn.relu_backward(da, cache["stem_relu"])
        _, dw, db = nn.conv3x3_backward(dpre, cache["x"], w["stem.w"],
                                        need_dx=False)
        grads["stem.w"] = dw
        grads["stem.b"] = db
    return grads


def backward_batch(model: BiomarkerModel, cache: dict, targets: np.ndarray,
                   needed: set) -> dict:
    """Gradients of mean cross-entropy w.r.t. the layers in `needed`."""
    dlogits = nn.softmax_ce_backward(cache["probs"], targets)
    grads: dict = {}
    if "head" in needed:
        grads["head.w"] = dlogits.T @ cache["emb"]
        grads["head.b"] = dlogits.sum(axis=0)
    rest = {n for n in needed if n != "head"}
    if rest:
        d_emb = dlogits @ model.weights["head.w"]
        grads.update(backward_from_embedding(model, cache, d_emb, rest))
    return grads


def backward(model: BiomarkerModel, image, target: int) -> dict:
    """Spec-level single-sample gradient: one tensor per weight, with
    exact zeros for layers the trainability mask freezes."""
    x = prepare_input(model, image)[None, :, :]
    _, _, cache = forward_batch(model, x, want_cache=True)
    needed = {name for name, on in model.trainable.items() if on}
    grads = backward_batch(model, cache, np.array([int(target)]), needed)
    for name in layer_names(model.arch):
        for suffix in (".w", ".b"):
            key = name + suffix
            if key not in grads:
                grads[key] = np.zeros_like(model.weights[key])
    return grads


def cross_entropy_loss(model: BiomarkerModel, image, target: int) -> float:
    x = prepare_input(model, image)[None, :, :]
    _, _, cache = forward_batch(model, x, want_cache=True)
    return nn.cross_entropy(cache["logits"], np.array([int(target)]))


# -------------------------------------------------------------- train

def adam_step(weights: dict, grads: dict, state: nn.AdamState,
              config: TrainConfig, t: int):
    """One Adam update over every tensor present in `grads`."""
    if t < 1:
        raise ValueError("step index starts at 1")
    for key, g in grads.items():
        weights[key], state.m[key], state.v[key] = nn.adam_update(
            weights[key], g, state.m[key], state.v[key], t,
            config.learning_rate, config.beta1, config.beta2, config.eps,
        )
    return weights, state


def stratified_split(labels, fraction: float, rng: np.random.Generator):
    """Per-class shuffled split. Every class keeps at least one item on
    each side when it has two or more."""
    labels = np.asarray(labels)
    train_idx: list = []
    test_idx: list = []
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(fraction * idx.size))
        if idx.size >= 2:
            n_train = min(max(n_train, 1), idx.size - 1)
        else:
            n_train = idx.size
        train_idx.extend(idx[:n_train].tolist())
        test_idx.extend(idx[n_train:].tolist())
    return sorted(train_idx), sorted(test_idx)


@dataclass
class TrainResult:
    model: BiomarkerModel
    train_accuracy: float
    test_accuracy: float
    epoch_losses: list
    train_indices: list = field(default_factory=list)
    test_indices: list = field(default_factory=list)


def _accuracy_from_probs(probs: np.ndarray, labels: np.ndarray) -> float:
    if probs.shape[0] == 0:
        return float("nan")
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def _eval_probs(model: BiomarkerModel, x: np.ndarray,
                batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, x.shape[0], batch):
        _, probs, _ = forward_batch(model, x[i:i + batch])
        out.append(probs)
    return np.concatenate(out, axis=0)


def train(model: BiomarkerModel, dataset: list, config: TrainConfig,
          strategy: TransferStrategy) -> TrainResult:
    """Mini-batch Adam on a labeled image dataset.

    The input model is not mutated. Dataset order, the stratified
    70/30 split, and per-epoch shuffles are all driven by sub-seeds of
    config.seed, so a (model, dataset, config) triple trains the same
    way every time.
    """
    labels = np.array([int(y) for _, y in dataset])
    if len(set(labels.tolist())) < 2:
        raise SingleClassDataset("training data has fewer than two classes")
    model = apply_transfer_strategy(model, strategy)
    if int(labels.max()) >= model.num_classes:
        raise ValueError("label outside the model's class range")

    x_all = np.stack([prepare_input(model, img) for img, _ in dataset])
    split_rng = np.random.default_rng(derive_seed(config.seed, "split"))
    train_idx, test_idx = stratified_split(labels, config.split_fraction, split_rng)
    x_train, y_train = x_all[train_idx], labels[train_idx]
    x_test, y_test = x_all[test_idx], labels[test_idx]

    needed = {name for name, on in model.trainable.items() if on}
    head_only = needed == {"head"}
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    state = nn.AdamState(model.weights)
    epoch_losses: list = []
    t = 0

    if head_only:
        # Frozen feature extractor: embeddings never change, so compute
        # them once and train the head as a small softmax regression.
        emb_train = _eval_embeddings(model, x_train)
        emb_test = _eval_embeddings(model, x_test)
        for _ in range(config.epochs):
            order = shuffle_rng.permutation(len(train_idx))
            losses = []
            for start in range(0, len(order), config.batch_size):
                sel = order[start:start + config.batch_size]
                e, y = emb_train[sel], y_train[sel]
                logits = nn.linear(e, model.weights["head.w"], model.weights["head.b"])
                probs = nn.softmax(logits)
                losses.append(nn.cross_entropy(logits, y) * len(sel))
                dlogits = nn.softmax_ce_backward(probs, y)
                grads = {"head.w": dlogits.T @ e, "head.b": dlogits.sum(axis=0)}
                t += 1
                adam_step(model.weights, grads, state, config, t)
            epoch_losses.append(float(np.sum(losses) / len(order)))
        train_probs = nn.softmax(nn.linear(emb_train, model.weights["head.w"],
                                           model.weights["head.b"]))
        test_probs = nn.softmax(nn.linear(emb_test, model.weights["head.w"],
                                          model.weights["head.b"]))
    else:
        for _ in range(config.epochs):
            order = shuffle_rng.permutation(len(train_idx))
            losses = []
            for start in range(0, len(order), config.batch_size):
                sel = order[start:start + config.batch_size]
                xb, yb = x_train[sel], y_train[sel]
                _, _, cache = forward_batch(model, xb, want_cache=True)
                losses.append(nn.cross_entropy(cache["logits"], yb) * len(sel))
                grads = backward_batch(model, cache, yb, needed)
                t += 1
                adam_step(model.weights, grads, state, config, t)
            epoch_losses.append(float(np.sum(losses) / len(order)))
        train_probs = _eval_probs(model, x_train)
        test_probs = _eval_probs(model, x_test)

    return TrainResult(
        model,
        _accuracy_from_probs(train_probs, y_train),
        _accuracy_from_probs(test_probs, y_test),
        epoch_losses,
        train_idx,
        test_idx,
    )


def _eval_embeddings(model: BiomarkerModel, x: np.ndarray,
                     batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, x.shape[0], batch):
        emb, _, _ = forward_batch(model, x[i:i + batch])
        out.append(emb)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.arch.embedding_dim))


# ----------------------------------------------------------- registry

@dataclass(frozen=True)
class RegistryEntry:
    biomarker_id: str
    family: str  # sensory | brainos | cognitive | symbolic
    kind: str
    num_classes: int | None = None
    chunk_seconds: float | None = None
    keyword: str | None = None
    chunk_size: float | None = None
    scheme: str | None = None
    always_mask: bool = False

    @property
    def trainable_model(self) -> bool:
        """True for entries backed by their own CNN (sensory/cognitive)."""
        return self.family in ("sensory", "cognitive")


@dataclass
class BiomarkerRegistry:
    entries: list

    def by_id(self, biomarker_id: str) -> RegistryEntry:
        for e in self.entries:
            if e.biomarker_id == biomarker_id:
                return e
        raise KeyError(biomarker_id)

    def family(self, name: str) -> list:
        return [e for e in self.entries if e.family == name]

    def model_entries(self) -> list:
        return [e for e in self.entries if e.trainable_model]

    def ids(self) -> list:
        return [e.biomarker_id for e in self.entries]


def build_registry() -> BiomarkerRegistry:
    """The fixed 16-entry biomarker roster: four per family.

    Sensory and cognitive entries are model-backed (each pretrains on a
    synthetic surrogate task); the brainos family probes the full
    ensemble at fixed chunk sizes; the symbolic family scores the
    ensemble under each aggregation scheme plus the per-member-pretuned
    ensemble variant.
    """
    e = RegistryEntry
    entries = [
        e("poisson_muscular", "sensory", "masked_spectral", num_classes=2,
          chunk_seconds=4.0, always_mask=True),
        e("vocal_cords_ww_them", "sensory", "wake_word", num_classes=2,
          chunk_seconds=3.0, keyword="them"),
        e("sentiment_8class", "sensory", "sentiment", num_classes=8,
          chunk_seconds=4.0),
        e("cough_origin", "sensory", "cough", num_classes=2, chunk_seconds=6.0),
        e("brainos_chunk2", "brainos", "ensemble_chunk_size", chunk_size=2.0),
        e("brainos_chunk8", "brainos", "ensemble_chunk_size", chunk_size=8.0),
        e("brainos_chunk14", "brainos", "ensemble_chunk_size", chunk_size=14.0),
        e("brainos_chunk20", "brainos", "ensemble_chunk_size", chunk_size=20.0),
        e("ww_context_kitchen", "cognitive", "wake_word", num_classes=2,
          chunk_seconds=3.0, keyword="kitchen"),
        e("ww_unique_tipping", "cognitive", "wake_word", num_classes=2,
          chunk_seconds=3.0, keyword="tipping"),
        e("ww_inferred_jar", "cognitive", "wake_word", num_classes=2,
          chunk_seconds=3.0, keyword="jar"),
        e("ww_salient_overflow", "cognitive", "wake_word", num_classes=2,
          chunk_seconds=3.0, keyword="overflow"),
        e("symbolic_average", "symbolic", "ensemble_scheme", scheme="average"),
        e("symbolic_linear_positive", "symbolic", "ensemble_scheme",
          scheme="linear_positive"),
        e("symbolic_linear_negative", "symbolic", "ensemble_scheme",
          scheme="linear_negative"),
        e("symbolic_pretuned", "symbolic", "ensemble_pt"),
    ]
    return BiomarkerRegistry(entries)


# ---------------------------------------------------------- weight IO

def pack_tensor_records(weights: dict, order: list) -> bytes:
    """name length, name, u32 rank, u32 dims, float32 LE payload."""
    parts = []
    for name in order:
        w = np.ascontiguousarray(weights[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", w.ndim))
        parts.append(struct.pack(f"<{w.ndim}I", *w.shape))
        parts.append(w.tobytes())
    return b"".join(parts)


def unpack_tensor_records(buf: bytes, offset: int) -> dict:
    weights: dict = {}
    n = len(buf)

    def need(nbytes: int) -> None:
        if offset + nbytes > n:
            raise ValueError("truncated weight file")

    while offset < n:
        need(4)
        (name_len,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        need(name_len)
        name = buf[offset:offset + name_len].decode("utf-8")
        offset += name_len
        need(4)
        (rank,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(4 * count)
        data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        weights[name] = data.reshape(dims).astype(np.float64)
    return weights


def _weight_file_bytes(descriptor: dict, weights: dict, order: list) -> bytes:
    desc = json.dumps(descriptor, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    header = WEIGHT_MAGIC + struct.pack("<II", WEIGHT_FORMAT_VERSION, len(desc))
    return header + desc + pack_tensor_records(weights, order)


def read_weight_file(path):
    """Returns (descriptor dict, weights dict)."""
    from pathlib import Path

    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != WEIGHT_MAGIC:
        raise ValueError(f"{path}: not a weight file")
    version, desc_len = struct.unpack_from("<II", buf, 4)
    if version != WEIGHT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported weight format version {version}")
    if 12 + desc_len > len(buf):
        raise ValueError(f"{path}: truncated weight file")
    descriptor = json.loads(buf[12:12 + desc_len].decode("utf-8"))
    weights = unpack_tensor_records(buf, 12 + desc_len)
    return descriptor, weights


def model_file_bytes(model: BiomarkerModel, meta: dict | None = None) -> bytes:
    order = []
    for name in layer_names(model.arch):
        order += [name + ".w", name + ".b"]
    descriptor = {
        "kind": "biomarker",
        "biomarker_id": model.biomarker_id,
        "num_classes": model.num_classes,
        "arch": model.arch.to_dict(),
        "trainable": {k: bool(v) for k, v in sorted(model.trainable.items())},
        "tensors": order,
        "meta": meta or {},
    }
    return _weight_file_bytes(descriptor, model.weights, order)


def save_model(path, model: BiomarkerModel, meta: dict | None = None) -> None:
    from .util import atomic_write_bytes

    atomic_write_bytes(path, model_file_bytes(model, meta))


def load_model(path) -> BiomarkerModel:
    descriptor, weights = read_weight_file(path)
    if descriptor.get("kind") != "biomarker":
        raise ValueError(f"{path}: not a biomarker model file")
    arch = CnnArch.from_dict(descriptor["arch"])
    model = BiomarkerModel(
        descriptor["biomarker_id"], arch, descriptor["num_classes"],
        weights, {k: bool(v) for k, v in descriptor["trainable"].items()},
    )
    model.validate()
    return model
