"""End-to-end pipeline evaluation: matcher -> window buffer -> classifier.

Metric definitions used throughout:

* re-ID precision: over frames where the subject was detected, the fraction
  in which the matcher picked the subject's detection.
* action AP/mAP: frame level; each frame with a prediction contributes its
  probability for every class, ranked per class.
* joint precision: over frames with a prediction where the subject was
  detected, the fraction with both the right detection and the right class.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import action, numcore as nc, reid
from ..action import ActionModel, ActionState, N_CLASSES
from ..reid import EmbeddingModel, ReferenceAnchor
from ..simworld import FrameRecord, Sequence_
from .metrics import confusion_matrix, mean_ap, per_class_ap

log = logging.getLogger(__name__)

Matcher = Callable[[FrameRecord, np.ndarray, ReferenceAnchor], "int | None"]
Predictor = Callable[[np.ndarray, np.ndarray, Sequence[FrameRecord]], np.ndarray]


@dataclass
class EvalReport:
    per_class_ap: dict[str, float]
    map: float
    confusion: list[list[int]]
    reid_precision: float
    joint_precision: float
    frames: int = 0
    subject_visible_frames: int = 0
    latency: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def frame_vectors(reid_model: EmbeddingModel, frame: FrameRecord, input_kind: str) -> np.ndarray:
    feats = np.array([d.feature for d in frame.detections]).reshape(-1, reid_model.in_dim)
    if input_kind == "raw":
        return feats
    return reid.embed(reid_model, feats) if len(feats) else np.zeros((0, reid_model.out_dim))


def sequence_embeddings(reid_model: EmbeddingModel, seq: Sequence_) -> list[np.ndarray]:
    """Embeddings for every detection, one (k, out_dim) array per frame."""
    feats = [d.feature for f in seq.frames for d in f.detections]
    if not feats:
        return [np.zeros((0, reid_model.out_dim)) for _ in seq.frames]
    emb = reid.embed(reid_model, np.asarray(feats))
    out, i = [], 0
    for f in seq.frames:
        out.append(emb[i : i + len(f.detections)])
        i += len(f.detections)
    return out


def token_dim(reid_model: EmbeddingModel, input_kind: str) -> int:
    base = reid_model.in_dim if input_kind == "raw" else reid_model.out_dim
    return base + action.BOX_FEATURES


def _check_dims(reid_model: EmbeddingModel, action_model: ActionModel | None, seqs: Sequence[Sequence_]):
    for s in seqs:
        for f in s.frames:
            for d in f.detections:
                if len(d.feature) != reid_model.in_dim:
                    raise nc.ShapeError(
                        f"{s.seq_id}: feature dim {len(d.feature)} != re-ID input dim {reid_model.in_dim}"
                    )
                break
            else:
                continue
            break
    if action_model is not None:
        want = token_dim(reid_model, action_model.config.input)
        if action_model.config.d_in != want:
            raise nc.ShapeError(f"action model expects d_in={action_model.config.d_in}, pipeline gives {want}")


def ground_truth_streams(
    reid_model: EmbeddingModel, seqs: Sequence[Sequence_], input_kind: str = "embed"
) -> list[action.LabeledStream]:
    """Token streams built from annotated subject boxes (no matcher)."""
    streams = []
    dim = token_dim(reid_model, input_kind)
    for s in seqs:
        embs = sequence_embeddings(reid_model, s) if input_kind == "embed" else None
        tokens = np.zeros((len(s.frames), dim))
        mask = np.zeros(len(s.frames), bool)
        for k, f in enumerate(s.frames):
            i = f.subject_index
            if i is None:
                continue
            vec = embs[k][i] if embs is not None else f.detections[i].feature
            tokens[k] = action.subject_token(vec, f.detections[i].bbox)
            mask[k] = True
        streams.append(action.LabeledStream(tokens, mask, np.array([int(f.action) for f in s.frames])))
    return streams


def reference_anchor(reid_model: EmbeddingModel, seq: Sequence_) -> ReferenceAnchor | None:
    """Anchor from the first frame that shows the subject."""
    for f in seq.frames:
        i = f.subject_index
        if i is not None:
            return reid.make_anchor(reid_model, f.detections[i].feature, f.frame)
    return None


@dataclass
class SequenceTrace:
    seq_id: str
    chosen: list[int | None]
    probs: np.ndarray          # (n - w + 1, 3); row k is frame w - 1 + k
    first_pred_frame: int
    frames: list[FrameRecord] = field(repr=False, default_factory=list)


def run_pipeline(
    reid_model: EmbeddingModel,
    action_model: ActionModel,
    seq: Sequence_,
    threshold: float = reid.DEFAULT_THRESHOLD,
    matcher: Matcher | None = None,
    predictor: Predictor | None = None,
) -> SequenceTrace | None:
    anchor = reference_anchor(reid_model, seq)
    if anchor is None:
        log.warning("%s: subject never visible; skipped", seq.seq_id)
        return None
    kind = action_model.config.input
    embs = sequence_embeddings(reid_model, seq)
    n = len(seq.frames)
    tokens = np.zeros((n, action_model.config.d_in))
    mask = np.zeros(n, bool)
    chosen: list[int | None] = []
    for k, f in enumerate(seq.frames):
        if matcher is None:
            idx = reid.match_subject(anchor, embs[k], threshold).index
        else:
            idx = matcher(f, embs[k], anchor)
        chosen.append(idx)
        if idx is not None:
            vec = embs[k][idx] if kind == "embed" else f.detections[idx].feature
            tokens[k] = action.subject_token(vec, f.detections[idx].bbox)
            mask[k] = True
    w = action_model.config.w
    if predictor is None:
        preds = action.detect_stream(action_model, tokens, mask)
        probs = np.array([p.probs for p in preds]).reshape(-1, N_CLASSES)
    else:
        probs = np.asarray(predictor(tokens, mask, seq.frames)).reshape(-1, N_CLASSES)
    return SequenceTrace(seq.seq_id, chosen, probs, w - 1, seq.frames)


def evaluate_joint(
    reid_model: EmbeddingModel,
    action_model: ActionModel,
    seqs: Sequence[Sequence_],
    threshold: float = reid.DEFAULT_THRESHOLD,
    matcher: Matcher | None = None,
    predictor: Predictor | None = None,
) -> EvalReport:
    if not seqs:
        raise ValueError("no sequences to evaluate")
    _check_dims(reid_model, action_model, seqs)
    vis = vis_ok = joint_n = joint_ok = 0
    all_probs, all_truth = [], []
    for seq in seqs:
        tr = run_pipeline(reid_model, action_model, seq, threshold, matcher, predictor)
        if tr is None:
            continue
        for k, f in enumerate(seq.frames):
            subj = f.subject_index
            id_ok = subj is not None and tr.chosen[k] == subj
            if subj is not None:
                vis += 1
                vis_ok += id_ok
            j = k - tr.first_pred_frame
            if 0 <= j < len(tr.probs):
                all_probs.append(tr.probs[j])
                all_truth.append(int(f.action))
                if subj is not None:
                    joint_n += 1
                    joint_ok += id_ok and int(np.argmax(tr.probs[j])) == int(f.action)
    probs = np.array(all_probs).reshape(-1, N_CLASSES)
    truth = np.array(all_truth, dtype=int)
    aps = per_class_ap(probs, truth) if len(truth) else {}
    return EvalReport(
        per_class_ap={ActionState(c).tag: v for c, v in aps.items()},
        map=mean_ap(list(aps.values())) if aps else float("nan"),
        confusion=confusion_matrix(probs.argmax(axis=1), truth).tolist(),
        reid_precision=vis_ok / vis if vis else float("nan"),
        joint_precision=joint_ok / joint_n if joint_n else float("nan"),
        frames=len(truth),
        subject_visible_frames=vis,
    )
