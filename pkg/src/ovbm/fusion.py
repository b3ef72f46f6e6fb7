"""Late fusion of biomarker embeddings with subject metadata.

Member embeddings are concatenated with a metadata vector (gender
one-hot + age/100) and fed through one 1024-unit ReLU layer into a
two-way softmax head. Joint training backpropagates through members via
their embeddings, honoring each member's transfer strategy; member
classification heads sit off the fusion loss path and never move here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models as M
from . import nn
from .chunker import Chunk
from .degradation import PoissonMaskConfig, apply_poisson_mask
from .util import atomic_write_bytes, derive_seed, sha256_file

HIDDEN_DIM = 1024
METADATA_DIM = 3  # gender one-hot (F, M) + age/100
NUM_CLASSES = 2


class EmptyMembers(ValueError):
    """A fusion network needs at least one member."""


class MemberOrderMismatch(ValueError):
    """Members were supplied in a different order than at build time."""


class UnknownMember(ValueError):
    pass


class DimMismatch(ValueError):
    pass


class EnsembleDigestMismatch(ValueError):
    """A member weight file does not match the digest the fusion file
    recorded for it."""


def metadata_vector(gender: str = "unknown", age: int | None = None) -> np.ndarray:
    """[is_F, is_M, age/100]; unknowns encode as zeros."""
    vec = np.zeros(METADATA_DIM, dtype=np.float64)
    if gender == "F":
        vec[0] = 1.0
    elif gender == "M":
        vec[1] = 1.0
    if age is not None:
        vec[2] = min(max(int(age), 0), 100) / 100.0
    return vec


@dataclass
class FusionModel:
    member_ids: list
    member_dims: list
    metadata_dim: int
    weights: dict  # hidden.w/b, head.w/b

    @property
    def input_dim(self) -> int:
        return int(sum(self.member_dims) + self.metadata_dim)


def build_fusion(members: list, metadata_dim: int = METADATA_DIM,
                 seed: int = 0) -> FusionModel:
    if not members:
        raise EmptyMembers("no members")
    member_ids = [m.biomarker_id for m in members]
    member_dims = [m.arch.embedding_dim for m in members]
    input_dim = sum(member_dims) + metadata_dim
    rng = np.random.default_rng(seed)
    weights = {
        "hidden.w": nn.he_uniform(rng, (HIDDEN_DIM, input_dim), fan_in=input_dim),
        "hidden.b": np.zeros(HIDDEN_DIM),
        "head.w": nn.he_uniform(rng, (NUM_CLASSES, HIDDEN_DIM), fan_in=HIDDEN_DIM),
        "head.b": np.zeros(NUM_CLASSES),
    }
    return FusionModel(member_ids, member_dims, metadata_dim, weights)


def clone_fusion(fusion: FusionModel) -> FusionModel:
    return FusionModel(
        list(fusion.member_ids), list(fusion.member_dims), fusion.metadata_dim,
        {k: w.copy() for k, w in fusion.weights.items()},
    )


def _check_member_order(fusion: FusionModel, members: list) -> None:
    ids = [m.biomarker_id for m in members]
    if ids != fusion.member_ids:
        raise MemberOrderMismatch(f"expected {fusion.member_ids}, got {ids}")


def fuse_from_embeddings(fusion: FusionModel, emb: np.ndarray,
                         metadata: np.ndarray, want_cache: bool = False):
    """emb: [B, sum(member_dims)], metadata: [B, metadata_dim].
    Returns (probs [B, 2], cache)."""
    x = np.concatenate([emb, metadata], axis=1)
    if x.shape[1] != fusion.input_dim:
        raise DimMismatch(f"fusion input is {x.shape[1]}, expected {fusion.input_dim}")
    w = fusion.weights
    hidden = nn.relu(nn.linear(x, w["hidden.w"], w["hidden.b"]))
    logits = nn.linear(hidden, w["head.w"], w["head.b"])
    probs = nn.softmax(logits)
    cache = {"x": x, "hidden": hidden, "logits": logits, "probs": probs} \
        if want_cache else None
    return probs, cache


def fusion_backward(fusion: FusionModel, cache: dict, targets: np.ndarray):
    """Returns (fusion grads, d_input [B, input_dim])."""
    w = fusion.weights
    dlogits = nn.softmax_ce_backward(cache["probs"], targets)
    dhidden, dhw, dhb = nn.linear_backward(dlogits, cache["hidden"], w["head.w"])
    dhidden = nn.relu_backward(dhidden, cache["hidden"])
    dx, dw, db = nn.linear_backward(dhidden, cache["x"], w["hidden.w"])
    grads = {"head.w": dhw, "head.b": dhb, "hidden.w": dw, "hidden.b": db}
    return grads, dx


_REGISTRY = None


def _registry():
    global _REGISTRY
    if _REGISTRY is None:
        _REGISTRY = M.build_registry()
    return _REGISTRY


def member_input_image(member: M.BiomarkerModel, chunk: Chunk):
    """Per-member preprocessing: the degradation-sensitive member always
    sees masked features; others take the chunk image as produced."""
    try:
        entry = _registry().by_id(member.biomarker_id)
    except KeyError:
        return chunk.features
    if entry.always_mask and not chunk.masked:
        return apply_poisson_mask(chunk.features, PoissonMaskConfig())
    return chunk.features


def member_embeddings(member: M.BiomarkerModel, chunks: list,
                      batch: int = 64) -> np.ndarray:
    """[N, E] embeddings of a member over a chunk list."""
    x = np.stack([M.prepare_input(member, member_input_image(member, c))
                  for c in chunks])
    out = []
    for i in range(0, x.shape[0], batch):
        emb, _, _ = M.forward_batch(member, x[i:i + batch])
        out.append(emb)
    return np.concatenate(out, axis=0)


def fuse_forward(fusion: FusionModel, chunk: Chunk, members: list,
                 metadata: np.ndarray) -> float:
    """P(positive) for one chunk through the full ensemble."""
    _check_member_order(fusion, members)
    embs = []
    for m in members:
        emb, _ = M.forward(m, member_input_image(m, chunk))
        embs.append(emb)
    emb = np.concatenate(embs)[None, :]
    probs, _ = fuse_from_embeddings(fusion, emb, np.asarray(metadata)[None, :])
    return float(probs[0, 1])


# -------------------------------------------------------------- train

@dataclass
class FusionSample:
    chunk: Chunk
    metadata: np.ndarray
    label: int
    subject_id: str = ""


@dataclass
class FusionTrainResult:
    fusion: FusionModel
    members: list
    train_accuracy: float
    test_accuracy: float
    epoch_losses: list = field(default_factory=list)


def _member_inputs(member: M.BiomarkerModel, samples: list) -> np.ndarray:
    return np.stack([
        M.prepare_input(member, member_input_image(member, s.chunk))
        for s in samples
    ])


def train_fusion(fusion: FusionModel, members: list, samples: list,
                 config: M.TrainConfig, member_strategy: M.TransferStrategy,
                 pt: bool = False) -> FusionTrainResult:
    """Jointly train the fusion layer and whatever member layers the
    strategy permits, on a chunk-level labeled dataset.

    With pt=True each member is first fine-tuned individually on the
    same data (fresh two-way head) before the joint phase; this is the
    training-order variant, and it produces different final weights
    than joint-only training.
    """
    _check_member_order(fusion, members)
    labels = np.array([int(s.label) for s in samples])
    if len(set(labels.tolist())) < 2:
        raise M.SingleClassDataset("fusion training data has fewer than two classes")

    if pt:
        tuned = []
        for m in members:
            head_seed = derive_seed(config.seed, "pt_head", m.biomarker_id)
            m2 = M.replace_head(m, NUM_CLASSES, head_seed)
            member_data = [(member_input_image(m2, s.chunk), s.label)
                           for s in samples]
            member_config = M.TrainConfig(
                learning_rate=config.learning_rate, epochs=config.epochs,
                batch_size=config.batch_size,
                seed=derive_seed(config.seed, "pt_train", m.biomarker_id),
                split_fraction=config.split_fraction,
            )
            tuned.append(M.train(m2, member_data, member_config,
                                 member_strategy).model)
        members = tuned

    members = [M.apply_transfer_strategy(m, member_strategy) for m in members]
    fusion = clone_fusion(fusion)

    # Member layers the joint loss can actually reach: everything the
    # strategy unfroze except the member's own classification head.
    member_needed = []
    for m in members:
        needed = {name for name, on in m.trainable.items() if on and name != "head"}
        member_needed.append(needed)
    joint_members_move = any(member_needed)

    split_rng = np.random.default_rng(derive_seed(config.seed, "split"))
    train_idx, test_idx = M.stratified_split(labels, config.split_fraction,
                                             split_rng)
    meta = np.stack([np.asarray(s.metadata, dtype=np.float64) for s in samples])
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    fusion_state = nn.AdamState(fusion.weights)
    epoch_losses: list = []
    t = 0

    if not joint_members_move:
        # Members frozen below the embedding: compute embeddings once.
        emb_all = np.concatenate(
            [member_embeddings(m, [s.chunk for s in samples]) for m in members],
            axis=1,
        )
        for _ in range(config.epochs):
            order = shuffle_rng.permutation(len(train_idx))
            losses = []
            for start in range(0, len(order), config.batch_size):
                sel = [train_idx[i] for i in order[start:start + config.batch_size]]
                probs, cache = fuse_from_embeddings(fusion, emb_all[sel], meta[sel],
                                                    want_cache=True)
                losses.append(nn.cross_entropy(cache["logits"], labels[sel])
                              * len(sel))
                grads, _ = fusion_backward(fusion, cache, labels[sel])
                t += 1
                M.adam_step(fusion.weights, grads, fusion_state, config, t)
            epoch_losses.append(float(np.sum(losses) / len(order)))
        train_probs, _ = fuse_from_embeddings(fusion, emb_all[train_idx],
                                              meta[train_idx])
        test_probs, _ = fuse_from_embeddings(fusion, emb_all[test_idx],
                                             meta[test_idx])
    else:
        inputs = [_member_inputs(m, samples) for m in members]
        member_states = [nn.AdamState(m.weights) for m in members]
        dims = np.cumsum([0] + [m.arch.embedding_dim for m in members])
        for _ in range(config.epochs):
            order = shuffle_rng.permutation(len(train_idx))
            losses = []
            for start in range(0, len(order), config.batch_size):
                sel = [train_idx[i] for i in order[start:start + config.batch_size]]
                caches = []
                embs = []
                for m, x in zip(members, inputs):
                    emb, _, cache = M.forward_batch(m, x[sel], want_cache=True)
                    caches.append(cache)
                    embs.append(emb)
                emb_cat = np.concatenate(embs, axis=1)
                probs, fcache = fuse_from_embeddings(fusion, emb_cat, meta[sel],
                                                     want_cache=True)
                losses.append(nn.cross_entropy(fcache["logits"], labels[sel])
                              * len(sel))
                fgrads, dx = fusion_backward(fusion, fcache, labels[sel])
                t += 1
                M.adam_step(fusion.weights, fgrads, fusion_state, config, t)
                for i, (m, cache, needed) in enumerate(
                        zip(members, caches, member_needed)):
                    if not needed:
                        continue
                    d_emb = dx[:, dims[i]:dims[i + 1]]
                    grads = M.backward_from_embedding(m, cache, d_emb, needed)
                    M.adam_step(m.weights, grads, member_states[i], config, t)
            epoch_losses.append(float(np.sum(losses) / len(order)))
        emb_all = np.concatenate(
            [member_embeddings(m, [s.chunk for s in samples]) for m in members],
            axis=1,
        )
        train_probs, _ = fuse_from_embeddings(fusion, emb_all[train_idx],
                                              meta[train_idx])
        test_probs, _ = fuse_from_embeddings(fusion, emb_all[test_idx],
                                             meta[test_idx])

    def acc(probs, idx):
        if not idx:
            return float("nan")
        return float(np.mean(np.argmax(probs, axis=1) == labels[idx]))

    return FusionTrainResult(fusion, members, acc(train_probs, train_idx),
                             acc(test_probs, test_idx), epoch_losses)


def ablate_member(fusion: FusionModel, members: list, member_id: str,
                  replacement: M.BiomarkerModel):
    """Swap one member for a replacement with the same embedding width.
    Returns (fusion', members'); inputs are left untouched."""
    _check_member_order(fusion, members)
    if member_id not in fusion.member_ids:
        raise UnknownMember(member_id)
    idx = fusion.member_ids.index(member_id)
    if replacement.arch.embedding_dim != fusion.member_dims[idx]:
        raise DimMismatch(
            f"replacement embeds {replacement.arch.embedding_dim} dims, "
            f"slot expects {fusion.member_dims[idx]}"
        )
    new_fusion = clone_fusion(fusion)
    new_fusion.member_ids[idx] = replacement.biomarker_id
    new_members = list(members)
    new_members[idx] = replacement
    return new_fusion, new_members


# --------------------------------------------------------- persistence

def fusion_file_bytes(fusion: FusionModel, member_digests: dict,
                      meta: dict | None = None) -> bytes:
    order = ["hidden.w", "hidden.b", "head.w", "head.b"]
    descriptor = {
        "kind": "fusion",
        "member_ids": fusion.member_ids,
        "member_dims": fusion.member_dims,
        "metadata_dim": fusion.metadata_dim,
        "hidden_dim": HIDDEN_DIM,
        "member_digests": dict(sorted(member_digests.items())),
        "tensors": order,
        "meta": meta or {},
    }
    return M._weight_file_bytes(descriptor, fusion.weights, order)


def save_ensemble(dir_path, fusion: FusionModel, members: list,
                  meta: dict | None = None) -> None:
    """One weight file per member plus a fusion file that records each
    member file's digest, so mismatched mixtures refuse to load."""
    from pathlib import Path

    _check_member_order(fusion, members)
    dir_path = Path(dir_path)
    digests = {}
    for m in members:
        path = dir_path / f"member_{m.biomarker_id}.ovbm"
        atomic_write_bytes(path, M.model_file_bytes(m, meta))
        digests[m.biomarker_id] = sha256_file(path)
    atomic_write_bytes(dir_path / "fusion.ovbm",
                       fusion_file_bytes(fusion, digests, meta))


def load_ensemble(dir_path):
    """Returns (fusion, members) after digest verification."""
    from pathlib import Path

    dir_path = Path(dir_path)
    descriptor, weights = M.read_weight_file(dir_path / "fusion.ovbm")
    if descriptor.get("kind") != "fusion":
        raise ValueError(f"{dir_path}: fusion.ovbm is not a fusion file")
    members = []
    for mid in descriptor["member_ids"]:
        path = dir_path / f"member_{mid}.ovbm"
        if not path.exists():
            raise FileNotFoundError(f"missing member weight file {path}")
        digest = sha256_file(path)
        expected = descriptor["member_digests"].get(mid)
        if digest != expected:
            raise EnsembleDigestMismatch(
                f"{path}: digest {digest[:12]}... does not match the "
                f"fusion manifest"
            )
        members.append(M.load_model(path))
    fusion = FusionModel(descriptor["member_ids"], descriptor["member_dims"],
                         descriptor["metadata_dim"], weights)
    return fusion, members
