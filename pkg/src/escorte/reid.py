"""Subject re-identification: embedding head, triplet loss, threshold matcher."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1.5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingModel:
    """Two linear layers with a ReLU between: ``W2 relu(W1 x + b1) + b2``.

    Weights are stored as (in, out) so row vectors multiply on the left.
    """

    params: dict[str, np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def out_dim(self) -> int:
        return self.params["W2"].shape[1]

    @property
    def fingerprint(self) -> str:
        return nc.fingerprint(self.params)

    @classmethod
    def init(cls, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        return cls(
            {
                "W1": nc.uniform_init(rng, in_dim, (in_dim, hidden)),
                "b1": nc.uniform_init(rng, in_dim, (hidden,)),
                "W2": nc.uniform_init(rng, hidden, (hidden, out_dim)),
                "b2": nc.uniform_init(rng, hidden, (out_dim,)),
            }
        )

    def to_bytes(self) -> bytes:
        dims = {"in_dim": self.in_dim, "hidden": self.hidden, "out_dim": self.out_dim}
        return nc.dumps_checkpoint("reid", dims, self.params)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingModel":
        kind, _, params = nc.loads_checkpoint(data)
        if kind != "reid":
            raise nc.CheckpointError(f"expected a reid checkpoint, got {kind!r}")
        return cls(params)


def embed_forward(p: dict, x):
    """Forward pass over ``Var``/array params; ``x`` is (..., in_dim)."""
    return nc.add(nc.matmul(nc.relu(nc.add(nc.matmul(x, p["W1"]), p["b1"])), p["W2"]), p["b2"])


def embed(model: EmbeddingModel, feature) -> np.ndarray:
    """Embed one feature vector, or a stack of them along the first axis."""
    x = np.asarray(feature, dtype=nc.DTYPE)
    if x.shape[-1] != model.in_dim:
        raise nc.ShapeError(f"feature dim {x.shape[-1]} != model input dim {model.in_dim}")
    single = x.ndim == 1
    out = embed_forward(model.params, x[None, :] if single else x)
    return out[0] if single else out


def triplet_loss(a, p, n, margin: float):
    """``max(|a-p| - |a-n| + margin, 0)``; batches (rows) are averaged."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    av, pv, nv = (nc.value_of(v) for v in (a, p, n))
    if not (av.shape == pv.shape == nv.shape):
        raise nc.ShapeError(f"triplet shapes differ: {av.shape}, {pv.shape}, {nv.shape}")
    per = nc.relu(nc.add(nc.sub(nc.l2norm(nc.sub(a, p)), nc.l2norm(nc.sub(a, n))), margin))
    if av.ndim == 1:
        return per
    return nc.mean(per)


@dataclass(frozen=True)
class ReferenceAnchor:
    embedding: np.ndarray
    frame: int
    model_fingerprint: str


@dataclass(frozen=True)
class MatchResult:
    index: int | None
    distance: float

    @property
    def absent(self) -> bool:
        return self.index is None


def make_anchor(model: EmbeddingModel, feature, frame: int) -> ReferenceAnchor:
    return ReferenceAnchor(embed(model, feature), frame, model.fingerprint)


def match_subject(
    reference: ReferenceAnchor | np.ndarray,
    candidates,
    threshold: float = DEFAULT_THRESHOLD,
) -> MatchResult:
    """Nearest candidate by L2 distance if within ``threshold``.

    Ties go to the lowest index. No candidates, or a nearest distance above
    the threshold, gives an absent result.
    """
    ref = reference.embedding if isinstance(reference, ReferenceAnchor) else np.asarray(reference)
    cands = np.asarray(candidates, dtype=nc.DTYPE)
    if cands.size == 0:
        return MatchResult(None, float("inf"))
    cands = cands.reshape(-1, ref.shape[-1]) if cands.ndim == 1 else cands
    if cands.shape[1] != ref.shape[-1]:
        raise nc.ShapeError(f"candidate dim {cands.shape[1]} != reference dim {ref.shape[-1]}")
    dist = np.sqrt(((cands - ref) ** 2).sum(axis=1))
    i = int(np.argmin(dist))  # first occurrence on ties
    best = float(dist[i])
    return MatchResult(i if best <= threshold else None, best)


def identify(model: EmbeddingModel, reference: ReferenceAnchor, features, threshold=DEFAULT_THRESHOLD):
    if reference.model_fingerprint != model.fingerprint:
        raise ValueError("reference anchor was embedded by a different model")
    feats = np.asarray(features, dtype=nc.DTYPE)
    if feats.size == 0:
        return MatchResult(None, float("inf"))
    return match_subject(reference, embed(model, feats.reshape(-1, model.in_dim)), threshold)


# --------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    margin: float = 1.0


@dataclass
class TripletPool:
    """Per-sequence subject observations and negatives drawn from a corpus.

    Subject detections within one sequence share an identity; every
    non-subject detection in that sequence is a different person.
    """

    subjects: list[np.ndarray] = field(default_factory=list)   # (k_i, D) per group
    negatives: list[np.ndarray] = field(default_factory=list)  # (m_i, D) per group

    @classmethod
    def from_sequences(cls, sequences) -> "TripletPool":
        pool = cls()
        for seq in sequences:
            subj, neg = [], []
            for fr in seq.frames:
                for det in fr.detections:
                    (subj if det.is_subject else neg).append(det.feature)
            if len(subj) >= 2 and neg:
                pool.subjects.append(np.asarray(subj))
                pool.negatives.append(np.asarray(neg))
        return pool


def sample_triplets(pool: TripletPool, rng: np.random.Generator, batch: int, margin: float = 1.0):
    """Uniformly sample (anchor, positive, negative) feature triplets."""
    if not pool.subjects:
        raise ConfigError("need a group with >= 2 subject observations and >= 1 other identity")
    g = rng.integers(0, len(pool.subjects), size=batch)
    a, p, n = [], [], []
    for gi in g:
        subj, neg = pool.subjects[gi], pool.negatives[gi]
        i, j = rng.choice(len(subj), size=2, replace=False)
        a.append(subj[i])
        p.append(subj[j])
        n.append(neg[rng.integers(0, len(neg))])
    return TripletBatch(np.asarray(a), np.asarray(p), np.asarray(n), margin)


@dataclass(frozen=True)
class ReidConfig:
    in_dim: int = 64
    hidden: int = 128
    out_dim: int = 64
    margin: float = 1.0
    lr: float = 1e-3
    steps: int = 1000
    batch: int = 64
    seed: int = 0


def batch_loss(params: dict, batch: TripletBatch):
    ea = embed_forward(params, batch.anchors)
    ep = embed_forward(params, batch.positives)
    en = embed_forward(params, batch.negatives)
    return triplet_loss(ea, ep, en, batch.margin)


def train_reid(
    pool: TripletPool, config: ReidConfig, rng: np.random.Generator | None = None
) -> tuple[EmbeddingModel, list[float]]:
    rng = nc.make_rng(config.seed) if rng is None else rng
    model = EmbeddingModel.init(config.in_dim, config.hidden, config.out_dim, rng)
    names = list(model.params)
    values = [model.params[k] for k in names]
    state = nc.AdamState(lr=config.lr)
    history = []
    for step in range(config.steps):
        batch = sample_triplets(pool, rng, config.batch, config.margin)
        tape = nc.Tape()
        leaves = dict(zip(names, (tape.leaf(v) for v in values)))
        loss = batch_loss(leaves, batch)
        lv = float(loss.value)
        if not np.isfinite(lv):
            raise FloatingPointError(f"re-ID training diverged at step {step}: loss={lv}")
        history.append(lv)
        grads = nc.backward(tape, loss)
        values, state = nc.adam_step(values, [grads[leaves[k]] for k in names], state)
        if step % 100 == 0:
            log.debug("reid step %d loss %.5f", step, lv)
    return EmbeddingModel(dict(zip(names, values))), history
