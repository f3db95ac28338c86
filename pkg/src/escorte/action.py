"""Online action detection: window buffer, transformer encoder, attention
pooling and a three-way classifier over the escortee's movement."""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numcore as nc

log = logging.getLogger(__name__)

N_LAYERS = 4
N_CLASSES = 3
IMAGE_W, IMAGE_H = 1280, 720
BOX_FEATURES = 5


class ActionState(enum.IntEnum):
    FOLLOWING = 0
    LAGGING = 1
    STOPPING = 2

    @property
    def tag(self) -> str:
        return self.name.lower()

    @classmethod
    def from_tag(cls, tag: str) -> "ActionState":
        try:
            return cls[tag.upper()]
        except KeyError:
            raise ValueError(f"unknown action {tag!r}") from None


class NotReady(RuntimeError):
    """The window buffer holds fewer than ``w`` frames."""


def box_features(bbox) -> np.ndarray:
    """Geometry channels appended to a detection vector.

    Center offsets and size normalized by the frame, plus 360/h, which is
    the subject distance in units of 2 m under the simulated camera.
    """
    x, y, w, h = (float(v) for v in bbox)
    return np.array(
        [
            (x + w / 2) / IMAGE_W - 0.5,
            (y + h / 2) / IMAGE_H - 0.5,
            w / IMAGE_W,
            h / IMAGE_H,
            360.0 / max(h, 1.0),
        ]
    )


def subject_token(vector, bbox) -> np.ndarray:
    return np.concatenate([np.asarray(vector, dtype=nc.DTYPE), box_features(bbox)])


class WindowBuffer:
    """The last ``capacity`` subject vectors, oldest first, with a presence mask."""

    def __init__(self, capacity: int = 60, dim: int = 69):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._vecs: deque[np.ndarray] = deque(maxlen=capacity)
        self._mask: deque[bool] = deque(maxlen=capacity)

    def push(self, vector=None) -> "WindowBuffer":
        if vector is None:
            self._vecs.append(np.zeros(self.dim))
            self._mask.append(False)
        else:
            v = np.asarray(vector, dtype=nc.DTYPE)
            if v.shape != (self.dim,):
                raise nc.ShapeError(f"vector shape {v.shape} != ({self.dim},)")
            self._vecs.append(v)
            self._mask.append(True)
        return self

    def __len__(self):
        return len(self._vecs)

    @property
    def full(self) -> bool:
        return len(self._vecs) == self.capacity

    @property
    def vectors(self) -> np.ndarray:
        return np.array(self._vecs).reshape(len(self._vecs), self.dim)

    @property
    def mask(self) -> np.ndarray:
        return np.array(self._mask, dtype=bool)


def push_frame(buffer: WindowBuffer, subject_vector=None) -> WindowBuffer:
    return buffer.push(subject_vector)


def positional_encoding(w: int, d: int) -> np.ndarray:
    pos = np.arange(w)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass(frozen=True)
class ActionConfig:
    w: int = 60
    d: int = 64
    d_in: int = 64 + BOX_FEATURES
    heads: int = 4
    ff_width: int = 256
    lr: float = 1e-3
    steps: int = 1000
    batch: int = 16
    seed: int = 0
    input: str = "embed"  # "embed" (re-ID embeddings) or "raw" (detector features)

    def dims(self) -> dict:
        return {
            "w": self.w,
            "d": self.d,
            "d_in": self.d_in,
            "heads": self.heads,
            "ff_width": self.ff_width,
            "layers": N_LAYERS,
            "input": self.input,
        }


def _layer_shapes(cfg: ActionConfig, i: int) -> dict[str, tuple]:
    d, f = cfg.d, cfg.ff_width
    return {
        f"l{i}.ln1.g": (d,),
        f"l{i}.ln1.b": (d,),
        f"l{i}.wq": (d, d),
        f"l{i}.bq": (d,),
        f"l{i}.wk": (d, d),
        f"l{i}.bk": (d,),
        f"l{i}.wv": (d, d),
        f"l{i}.bv": (d,),
        f"l{i}.wo": (d, d),
        f"l{i}.bo": (d,),
        f"l{i}.ln2.g": (d,),
        f"l{i}.ln2.b": (d,),
        f"l{i}.w1": (d, f),
        f"l{i}.b1": (f,),
        f"l{i}.w2": (f, d),
        f"l{i}.b2": (d,),
    }


def param_shapes(cfg: ActionConfig) -> dict[str, tuple]:
    shapes = {"in.w": (cfg.d_in, cfg.d), "in.b": (cfg.d,)}
    for i in range(N_LAYERS):
        shapes.update(_layer_shapes(cfg, i))
    shapes.update(
        {
            "pool.A": (cfg.d, 1),
            "pool.w": (cfg.d, cfg.d),
            "pool.b": (cfg.d,),
            "cls.w": (cfg.d, N_CLASSES),
            "cls.b": (N_CLASSES,),
        }
    )
    return shapes


@dataclass(frozen=True)
class ActionModel:
    config: ActionConfig
    params: dict[str, np.ndarray]
    pe: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.config.d % self.config.heads:
            raise ValueError(f"d={self.config.d} not divisible by heads={self.config.heads}")
        expected = param_shapes(self.config)
        for k, shape in expected.items():
            if k not in self.params or self.params[k].shape != shape:
                got = self.params[k].shape if k in self.params else None
                raise nc.ShapeError(f"parameter {k}: expected {shape}, got {got}")
        object.__setattr__(self, "pe", positional_encoding(self.config.w, self.config.d))

    @classmethod
    def init(cls, cfg: ActionConfig, rng: np.random.Generator) -> "ActionModel":
        params = {}
        for k, shape in param_shapes(cfg).items():
            if ".ln" in k:
                params[k] = np.ones(shape) if k.endswith(".g") else np.zeros(shape)
            elif len(shape) == 1:
                params[k] = np.zeros(shape)
            else:
                params[k] = nc.uniform_init(rng, shape[0], shape)
        return cls(cfg, params)

    @classmethod
    def zeros(cls, cfg: ActionConfig) -> "ActionModel":
        return cls(cfg, {k: np.zeros(s) for k, s in param_shapes(cfg).items()})

    def to_bytes(self) -> bytes:
        return nc.dumps_checkpoint("action", self.config.dims(), self.params)

    @classmethod
    def from_bytes(cls, data: bytes, **train_keys) -> "ActionModel":
        kind, dims, params = nc.loads_checkpoint(data)
        if kind != "action":
            raise nc.CheckpointError(f"expected an action checkpoint, got {kind!r}")
        dims = {k: v for k, v in dims.items() if k != "layers"}
        return cls(ActionConfig(**dims, **train_keys), params)


# --------------------------------------------------------------------------
# Forward pass (works on Var or ndarray parameters)


def _affine_ln(x, g, b):
    return nc.add(nc.mul(nc.layer_norm(x), g), b)


def _attention(p, i, x, valid, heads):
    bsz, w, d = nc.value_of(x).shape
    dk = d // heads

    def split(t):
        return nc.transpose(nc.reshape(t, (bsz, w, heads, dk)), (0, 2, 1, 3))

    q = split(nc.add(nc.matmul(x, p[f"l{i}.wq"]), p[f"l{i}.bq"]))
    k = split(nc.add(nc.matmul(x, p[f"l{i}.wk"]), p[f"l{i}.bk"]))
    v = split(nc.add(nc.matmul(x, p[f"l{i}.wv"]), p[f"l{i}.bv"]))
    scores = nc.mul(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    attn = nc.softmax(scores, None if valid is None else valid[:, None, None, :])
    o = nc.reshape(nc.transpose(nc.matmul(attn, v), (0, 2, 1, 3)), (bsz, w, d))
    return nc.add(nc.matmul(o, p[f"l{i}.wo"]), p[f"l{i}.bo"])


def encode(p, tokens, valid, pe, heads: int):
    """Pre-norm encoder stack over (batch, w, d) tokens; returns H."""
    x = nc.add(tokens, pe)
    for i in range(N_LAYERS):
        x = nc.add(x, _attention(p, i, _affine_ln(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"]), valid, heads))
        h = _affine_ln(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
        f = nc.add(nc.matmul(nc.relu(nc.add(nc.matmul(h, p[f"l{i}.w1"]), p[f"l{i}.b1"])), p[f"l{i}.w2"]), p[f"l{i}.b2"])
        x = nc.add(x, f)
    return x


def pool(H, A):
    """Batched attention pooling: B = H A, C = softmax(B), u = H^T C.

    u is evaluated as h_0 + (H - h_0)^T C, which equals H^T C because C sums
    to one, and reproduces h_0 exactly when every row is the same.
    """
    bsz, w, d = nc.value_of(H).shape
    B = nc.reshape(nc.matmul(H, A), (bsz, w))
    C = nc.softmax(B)
    h0 = nc.take(H, 0, axis=1)
    spread = nc.matmul(nc.transpose(nc.sub(H, h0), (0, 2, 1)), nc.reshape(C, (bsz, w, 1)))
    u = nc.add(nc.reshape(h0, (bsz, d)), nc.reshape(spread, (bsz, d)))
    return u, B, C


def head(p, u):
    z = nc.relu(nc.add(nc.matmul(u, p["pool.w"]), p["pool.b"]))
    return nc.add(nc.matmul(z, p["cls.w"]), p["cls.b"])


def forward_logits(p, X, valid, cfg: ActionConfig, pe):
    """(batch, w, d_in) window tokens -> (batch, 3) logits."""
    tokens = nc.add(nc.matmul(X, p["in.w"]), p["in.b"])
    H = encode(p, tokens, valid, pe, cfg.heads)
    u, _, _ = pool(H, p["pool.A"])
    return head(p, u)


# --------------------------------------------------------------------------
# Public single-window API


@dataclass(frozen=True)
class ActionPrediction:
    probs: np.ndarray
    frame: int

    @property
    def state(self) -> ActionState:
        return ActionState(int(np.argmax(self.probs)))


def transformer_forward(model: ActionModel, window: WindowBuffer) -> np.ndarray:
    """Encoder outputs H (w x d) for a full buffer."""
    if len(window) < model.config.w:
        raise NotReady(f"buffer holds {len(window)} of {model.config.w} frames")
    X = window.vectors[None]
    tokens = nc.add(nc.matmul(X, model.params["in.w"]), model.params["in.b"])
    return encode(model.params, tokens, window.mask[None], model.pe, model.config.heads)[0]


def attention_pool(H, A) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(u, B, C)`` for H (w x d) and A (d x 1); u and B, C are columns."""
    H = np.asarray(H, dtype=nc.DTYPE)
    A = np.asarray(A, dtype=nc.DTYPE).reshape(-1, 1)
    if H.ndim != 2 or H.shape[1] != A.shape[0]:
        raise nc.ShapeError(f"attention_pool shape mismatch: H {H.shape}, A {A.shape}")
    u, B, C = pool(H[None], A)
    return u.reshape(-1, 1), B.reshape(-1, 1), C.reshape(-1, 1)


def classify(model: ActionModel, u, frame: int = -1) -> ActionPrediction:
    logits = head(model.params, np.asarray(u, dtype=nc.DTYPE).reshape(1, -1))
    return ActionPrediction(nc.row_softmax(logits)[0], frame)


def predict_window(model: ActionModel, window: WindowBuffer, frame: int = -1) -> ActionPrediction:
    H = transformer_forward(model, window)
    u, _, _ = attention_pool(H, model.params["pool.A"])
    return classify(model, u.ravel(), frame)


def cross_entropy(probs, label: ActionState | int) -> float:
    """Categorical cross-entropy ``-log p[label]`` of a probability vector."""
    p = np.asarray(probs, dtype=nc.DTYPE)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"not a probability vector: {p}")
    return float(-np.log(max(p[int(label)], 1e-300)))


def _windows(tokens: np.ndarray, mask: np.ndarray, w: int):
    X = np.lib.stride_tricks.sliding_window_view(tokens, w, axis=0).transpose(0, 2, 1)
    M = np.lib.stride_tricks.sliding_window_view(mask, w, axis=0)
    return X, M


def predict_windows(model: ActionModel, X: np.ndarray, M: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Class probabilities for a stack of windows (n, w, d_in)."""
    out = []
    for s in range(0, len(X), chunk):
        logits = forward_logits(model.params, X[s : s + chunk], M[s : s + chunk], model.config, model.pe)
        out.append(nc.softmax(logits))
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES))


def detect_stream(model: ActionModel, tokens, mask=None) -> list[ActionPrediction]:
    """Stride-1 online predictions; the first one lands on frame ``w - 1``.

    ``tokens`` is (n, d_in); ``mask`` marks frames where the subject was
    found (absent frames should carry zero vectors).
    """
    tokens = np.asarray(tokens, dtype=nc.DTYPE).reshape(-1, model.config.d_in)
    mask = np.ones(len(tokens), bool) if mask is None else np.asarray(mask, bool)
    w = model.config.w
    if len(tokens) < w:
        return []
    X, M = _windows(tokens, mask, w)
    probs = predict_windows(model, X, M)
    return [ActionPrediction(pr, w - 1 + k) for k, pr in enumerate(probs)]


# --------------------------------------------------------------------------
# Training


@dataclass
class LabeledStream:
    tokens: np.ndarray   # (n, d_in)
    mask: np.ndarray     # (n,) bool
    labels: np.ndarray   # (n,) int


def batch_loss(p, X, M, y, cfg: ActionConfig, pe):
    logits = forward_logits(p, X, M, cfg, pe)
    onehot = np.eye(N_CLASSES)[y]
    return nc.mul(nc.sum_(nc.mul(nc.log_softmax(logits), onehot)), -1.0 / len(y))


def train_action(
    streams: Sequence[LabeledStream], config: ActionConfig, rng: np.random.Generator | None = None
) -> tuple[ActionModel, list[float]]:
    """Cross-entropy training on windows labeled by their last frame.

    Each batch draws a class uniformly, then a window ending on a frame of
    that class, so rare classes are not starved.
    """
    rng = nc.make_rng(config.seed) if rng is None else rng
    w = config.w
    usable = [s for s in streams if len(s.tokens) >= w]
    if not usable:
        raise ValueError(f"no training sequence has >= w={w} frames")
    ends: dict[int, list[tuple[int, int]]] = {c: [] for c in range(N_CLASSES)}
    for si, s in enumerate(usable):
        for t in range(w - 1, len(s.tokens)):
            ends[int(s.labels[t])].append((si, t))
    classes = [c for c in range(N_CLASSES) if ends[c]]
    ends_arr = {c: np.asarray(ends[c]) for c in classes}

    model = ActionModel.init(config, rng)
    names = list(model.params)
    values = [model.params[k] for k in names]
    state = nc.AdamState(lr=config.lr)
    history = []
    for step in range(config.steps):
        cls_draw = rng.choice(classes, size=config.batch)
        X = np.empty((config.batch, w, config.d_in))
        M = np.empty((config.batch, w), bool)
        y = np.empty(config.batch, int)
        for b, c in enumerate(cls_draw):
            si, t = ends_arr[c][rng.integers(0, len(ends_arr[c]))]
            s = usable[si]
            X[b] = s.tokens[t - w + 1 : t + 1]
            M[b] = s.mask[t - w + 1 : t + 1]
            y[b] = s.labels[t]
        tape = nc.Tape()
        leaves = dict(zip(names, (tape.leaf(v) for v in values)))
        loss = batch_loss(leaves, X, M, y, config, model.pe)
        lv = float(loss.value)
        if not np.isfinite(lv):
            raise FloatingPointError(f"action training diverged at step {step}: loss={lv}")
        history.append(lv)
        grads = nc.backward(tape, loss)
        values, state = nc.adam_step(values, [grads[leaves[k]] for k in names], state)
        if step % 100 == 0:
            log.debug("action step %d loss %.5f", step, lv)
    return ActionModel(config, dict(zip(names, values))), history
