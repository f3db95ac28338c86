from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .. import action, reid


@dataclass(frozen=True)
class LatencyInputs:
    w: int
    t_r: float  # re-identification time per frame, s
    t_f: float  # time between frames (1/fps), s
    t_a: float  # action recognition time per window, s

    def __post_init__(self):
        if self.w < 1 or min(self.t_r, self.t_f, self.t_a) <= 0:
            raise ValueError(f"latency inputs must be positive: {self}")


def inference_time(inp: LatencyInputs, alpha_as_prose: bool = False) -> float:
    """``alpha * (w - 1) * t_r - t_f + t_r + t_a``.

    ``alpha`` is 1 when ``t_r <= t_f`` and 0 otherwise. ``alpha_as_prose``
    flips the gate (1 when re-ID cannot keep up with the frame rate).
    """
    alpha = 1.0 if inp.t_r <= inp.t_f else 0.0
    if alpha_as_prose:
        alpha = 1.0 - alpha
    return alpha * ((inp.w - 1) * inp.t_r) - inp.t_f + inp.t_r + inp.t_a


@dataclass(frozen=True)
class LatencyReport:
    t_r: float
    t_a: float
    t_f: float
    w: int
    t_i: float


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def measure_latency(
    reid_model: reid.EmbeddingModel,
    action_model: action.ActionModel,
    frames: int,
    rng: np.random.Generator,
    fps: float = 30.0,
    candidates: int = 4,
    threshold: float = reid.DEFAULT_THRESHOLD,
    alpha_as_prose: bool = False,
) -> LatencyReport:
    """Median wall-clock of per-frame embed+match and of one window forward."""
    anchor = reid.make_anchor(reid_model, rng.normal(size=reid_model.in_dim), 0)
    feats = rng.normal(size=(frames, candidates, reid_model.in_dim))
    it = iter(feats)

    def reid_frame():
        reid.identify(reid_model, anchor, next(it), threshold)

    reid_frame()  # warm-up
    it = iter(feats)
    t_r = _median_time(reid_frame, frames)

    cfg = action_model.config
    buf = action.WindowBuffer(cfg.w, cfg.d_in)
    for v in rng.normal(size=(cfg.w, cfg.d_in)):
        buf.push(v)
    action.predict_window(action_model, buf)
    t_a = _median_time(lambda: action.predict_window(action_model, buf), max(5, frames // 10))

    t_f = 1.0 / fps
    t_i = inference_time(LatencyInputs(cfg.w, t_r, t_f, t_a), alpha_as_prose)
    return LatencyReport(t_r, t_a, t_f, cfg.w, t_i)
