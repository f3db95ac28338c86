"""Synthetic escort scenarios: kinematics, a pinhole person detector and
frame labels, standing in for recorded video plus a detection backbone.

Geometry: the robot drives along +x with its camera looking backwards at
the escortee. A person's depth is ``robot_x - person_x``; lateral offset is
``y``. Latent identity vectors are unit-norm and the emitted feature is the
renormalized latent plus per-component Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numcore as nc
from .action import ActionState

IMAGE_W, IMAGE_H = 1280, 720
HFOV_DEG = 90.0
FOCAL_PX = (IMAGE_W / 2) / np.tan(np.radians(HFOV_DEG / 2))  # 640 px
VISIBLE_HEIGHT_M = 1.125  # framed body extent; 360 px tall at 2 m
BOX_ASPECT = 0.4
MIN_DEPTH_M, MAX_DEPTH_M = 0.3, 15.0
OCCLUSION_LATERAL_M = 0.4
BOX_JITTER_PX = 1.0

GAP_RULE_M = 2.0
FOLLOW_GAP_MAX_M = 1.8   # kinematics keep Following gaps below this
LAG_GAP_MIN_M = 2.2      # and settled Lagging gaps above this
STILL_SPEED = 0.05
STILL_FRAMES = 5

# default train/dev/test proportions, from a 250/49/60 sequence split
DEFAULT_SPLITS = (250, 49, 60)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    script: tuple[tuple[ActionState, float], ...] = ((ActionState.FOLLOWING, 10.0),)
    fps: float = 30.0
    distractors: int = 2
    sigma: float = 0.1
    occlusion: float = 0.1
    identities: int = 10
    dim: int = 64
    robot_speed: float = 1.0
    seed: int = 0

    @property
    def duration(self) -> float:
        return float(sum(d for _, d in self.script))

    def validate(self) -> None:
        if self.fps <= 0:
            raise ConfigError("fps must be > 0")
        if not self.script or any(d <= 0 for _, d in self.script):
            raise ConfigError("script durations must be > 0")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if not 0 <= self.occlusion <= 1:
            raise ConfigError("occlusion probability must be in [0, 1]")
        if self.identities < 1 or self.dim < 1 or self.distractors < 0:
            raise ConfigError("identities and dim must be >= 1, distractors >= 0")
        if self.robot_speed <= 0:
            raise ConfigError("robot_speed must be > 0")


@dataclass(frozen=True)
class Person:
    identity: int
    x: float
    y: float
    vx: float
    vy: float


@dataclass(frozen=True)
class WorldState:
    """Person 0 is the escortee."""

    t: float
    robot_x: float
    robot_speed: float
    persons: tuple[Person, ...]
    still_frames: int = 0
    follow_gap: float = 1.4
    lag_gap: float = 3.5

    @property
    def escortee(self) -> Person:
        return self.persons[0]

    @property
    def gap(self) -> float:
        return self.robot_x - self.escortee.x

    def depth(self, i: int) -> float:
        return self.robot_x - self.persons[i].x


@dataclass(frozen=True)
class Detection:
    bbox: tuple[float, float, float, float]  # x, y, w, h in pixels
    feature: np.ndarray
    is_subject: bool

    def __eq__(self, other):
        if not isinstance(other, Detection):
            return NotImplemented
        return (
            self.bbox == other.bbox
            and self.is_subject == other.is_subject
            and np.array_equal(self.feature, other.feature)
        )

    __hash__ = None


@dataclass(frozen=True)
class FrameRecord:
    frame: int
    t: float
    detections: tuple[Detection, ...]
    action: ActionState
    gap_m: float

    @property
    def subject_index(self) -> int | None:
        for i, d in enumerate(self.detections):
            if d.is_subject:
                return i
        return None

    @property
    def subject_visible(self) -> bool:
        return self.subject_index is not None


@dataclass
class Sequence_:
    seq_id: str
    frames: list[FrameRecord]
    split: str = "train"


@dataclass
class Corpus:
    sequences: list[Sequence_] = field(default_factory=list)

    def split(self, name: str) -> list[Sequence_]:
        return [s for s in self.sequences if s.split == name]


# --------------------------------------------------------------------------
# Kinematics


def kinematics_step(
    state: WorldState, action: ActionState, dt: float, rng: np.random.Generator
) -> WorldState:
    if dt <= 0:
        raise ValueError("dt must be > 0")
    vr = state.robot_speed
    robot_x = state.robot_x + vr * dt
    e = state.escortee
    gap = state.gap
    if action == ActionState.STOPPING:
        speed = 0.0
    elif action == ActionState.FOLLOWING:
        # close in on the preferred gap; jitter stays well above the still threshold
        speed = vr + 1.5 * (gap - state.follow_gap) + rng.normal(0.0, 0.03)
        speed = float(np.clip(speed, 0.3, 2.2))
        if gap + (vr - speed) * dt >= FOLLOW_GAP_MAX_M and gap < FOLLOW_GAP_MAX_M:
            speed = vr + (gap - FOLLOW_GAP_MAX_M + 0.05) / dt
    else:
        if gap < state.lag_gap:
            speed = 0.55 * vr + rng.normal(0.0, 0.03)
        else:
            speed = vr + 0.5 * (state.lag_gap - gap) + rng.normal(0.0, 0.03)
        speed = float(np.clip(speed, 0.3, 1.5 * vr))
    vy = float(np.clip(0.8 * e.vy + rng.normal(0.0, 0.05), -0.3, 0.3)) if speed > 0 else 0.0
    y = float(np.clip(e.y + vy * dt, -0.6, 0.6))
    escortee = Person(e.identity, e.x + speed * dt, y if speed > 0 else e.y, speed, vy)

    others = []
    for p in state.persons[1:]:
        # relative random walk, reflected into the camera's working volume
        rel_v = float(np.clip((p.vx - vr) + rng.normal(0.0, 0.15), -0.8, 0.8))
        vy = float(np.clip(p.vy + rng.normal(0.0, 0.15), -0.8, 0.8))
        depth = state.robot_x - p.x - rel_v * dt
        if depth < 0.8 or depth > 9.0:
            rel_v = -rel_v
            depth = float(np.clip(depth, 0.8, 9.0))
        y = p.y + vy * dt
        if abs(y) > 3.0:
            vy = -vy
            y = float(np.clip(y, -3.0, 3.0))
        x = robot_x - depth
        others.append(Person(p.identity, x, y, vr + rel_v, vy))

    still = state.still_frames + 1 if speed < STILL_SPEED else 0
    return replace(
        state,
        t=state.t + dt,
        robot_x=robot_x,
        persons=(escortee, *others),
        still_frames=still,
    )


def label_frame(state: WorldState) -> ActionState:
    if state.still_frames >= STILL_FRAMES:
        return ActionState.STOPPING
    if state.gap < GAP_RULE_M:
        return ActionState.FOLLOWING
    return ActionState.LAGGING


# --------------------------------------------------------------------------
# Camera


def project_box(depth: float, lateral: float) -> tuple[float, float, float, float] | None:
    """Pinhole box for a person, or None when outside the field of view."""
    if depth < MIN_DEPTH_M or depth > MAX_DEPTH_M:
        return None
    cx = IMAGE_W / 2 + FOCAL_PX * lateral / depth
    if not 0 <= cx <= IMAGE_W:
        return None
    h = FOCAL_PX * VISIBLE_HEIGHT_M / depth
    w = BOX_ASPECT * h
    x0, x1 = max(cx - w / 2, 0.0), min(cx + w / 2, float(IMAGE_W))
    y0, y1 = max(IMAGE_H / 2 - h / 2, 0.0), min(IMAGE_H / 2 + h / 2, float(IMAGE_H))
    return (x0, y0, x1 - x0, y1 - y0)


def noisy_feature(z: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return z.copy()
    f = z + sigma * rng.normal(size=z.shape)
    return f / np.linalg.norm(f)


def is_occluded(state: WorldState, i: int) -> bool:
    di, yi = state.depth(i), state.persons[i].y
    return any(
        j != i and state.depth(j) < di and abs(state.persons[j].y - yi) < OCCLUSION_LATERAL_M
        for j in range(len(state.persons))
    )


def project_detection(
    state: WorldState,
    person: int,
    latents: np.ndarray,
    sigma: float,
    occlusion: float,
    rng: np.random.Generator,
    jitter: float = BOX_JITTER_PX,
) -> Detection | None:
    p = state.persons[person]
    box = project_box(state.depth(person), p.y)
    if box is None:
        return None
    if occlusion > 0 and is_occluded(state, person) and rng.random() < occlusion:
        return None
    if jitter > 0:
        x, y, w, h = box
        dx, dy = rng.normal(0.0, jitter, size=2)
        x = float(np.clip(x + dx, 0.0, IMAGE_W - w))
        y = float(np.clip(y + dy, 0.0, IMAGE_H - h))
        box = (x, y, w, h)
    return Detection(box, noisy_feature(latents[p.identity], sigma, rng), person == 0)


# --------------------------------------------------------------------------
# Sequences and corpora


def identity_bank(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.normal(size=(n, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def initial_state(spec: ScenarioSpec, subject: int, others: Sequence[int], rng) -> WorldState:
    gap = rng.uniform(1.3, 1.6)
    persons = [Person(subject, -gap, rng.uniform(-0.2, 0.2), spec.robot_speed, 0.0)]
    for ident in others:
        depth = rng.uniform(1.5, 8.0)
        y = rng.uniform(-3.0, 3.0)
        if abs(y) < OCCLUSION_LATERAL_M + 0.1:
            y = float(np.sign(y) or 1.0) * (OCCLUSION_LATERAL_M + 0.1)
        persons.append(Person(ident, -depth, y, spec.robot_speed + rng.normal(0, 0.2), rng.normal(0, 0.2)))
    return WorldState(
        0.0,
        0.0,
        spec.robot_speed,
        tuple(persons),
        follow_gap=gap,
        lag_gap=rng.uniform(3.0, 4.0),
    )


def generate_sequence(
    spec: ScenarioSpec,
    latents: np.ndarray,
    subject: int,
    others: Sequence[int],
    rng: np.random.Generator,
    seq_id: str = "seq0000",
    states: list | None = None,
) -> Sequence_:
    """Simulate one scripted sequence. ``states``, if given, collects the
    world state behind every frame."""
    spec.validate()
    dt = 1.0 / spec.fps
    state = initial_state(spec, subject, others, rng)
    bounds = np.cumsum([d for _, d in spec.script])
    n = int(round(spec.duration * spec.fps))
    frames = []
    for k in range(n):
        if k > 0:
            seg = int(np.searchsorted(bounds, k * dt, side="right"))
            state = kinematics_step(state, spec.script[min(seg, len(bounds) - 1)][0], dt, rng)
        dets = []
        for i in range(len(state.persons)):
            # the reference frame always shows the subject
            occ = 0.0 if (k == 0 and i == 0) else spec.occlusion
            det = project_detection(state, i, latents, spec.sigma, occ, rng)
            if det is not None:
                dets.append(det)
        dets.sort(key=lambda d: d.bbox[0])
        if states is not None:
            states.append(state)
        frames.append(FrameRecord(k, k * dt, tuple(dets), label_frame(state), state.gap))
    return Sequence_(seq_id, frames)


def random_script(rng: np.random.Generator, duration: float) -> tuple[tuple[ActionState, float], ...]:
    """Single, double, triple or repeated action patterns over ``duration`` s."""
    kind = rng.integers(0, 4)
    acts = list(ActionState)
    if kind == 0:
        seq = [acts[rng.integers(0, 3)]]
    elif kind == 1:
        a, b = rng.choice(3, size=2, replace=False)
        seq = [acts[a], acts[b]]
    elif kind == 2:
        seq = [acts[i] for i in rng.permutation(3)]
    else:
        n = int(rng.integers(4, 6))
        seq = [acts[rng.integers(0, 3)]]
        while len(seq) < n:
            nxt = acts[rng.integers(0, 3)]
            if nxt != seq[-1]:
                seq.append(nxt)
    w = rng.uniform(0.6, 1.4, size=len(seq))
    durs = duration * w / w.sum()
    return tuple((a, float(d)) for a, d in zip(seq, durs))


def assign_splits(n: int, ratios: Sequence[float], rng: np.random.Generator) -> list[str]:
    names = ("train", "dev", "test")
    r = np.asarray(ratios, dtype=float)
    if r.shape != (3,) or np.any(r < 0) or r.sum() <= 0:
        raise ConfigError("split ratios must be three non-negative numbers")
    counts = np.floor(n * r / r.sum()).astype(int)
    # largest remainders get the leftover sequences
    rem = n * r / r.sum() - counts
    for i in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    labels = [names[i] for i in range(3) for _ in range(counts[i])]
    return [labels[i] for i in rng.permutation(n)]


@dataclass(frozen=True)
class CorpusSpec:
    sequences: int = 120
    fps: float = 30.0
    min_duration: float = 10.0
    max_duration: float = 16.0
    max_distractors: int = 4
    sigma: float = 0.1
    occlusion: float = 0.1
    identities: int = 10
    dim: int = 64
    robot_speed: float = 1.0
    splits: tuple[float, float, float] = DEFAULT_SPLITS

    def validate(self):
        if self.sequences <= 0:
            raise ConfigError("sequences must be > 0")
        if self.min_duration < 10.0 or self.max_duration < self.min_duration:
            raise ConfigError("durations must satisfy 10 <= min_duration <= max_duration")
        if self.identities < 2:
            raise ConfigError("need at least 2 identities")
        if self.max_distractors < 0:
            raise ConfigError("max_distractors must be >= 0")


def generate_corpus(spec: CorpusSpec, seed: int) -> Corpus:
    """Deterministic corpus; sequence ``i`` draws from its own child stream."""
    spec.validate()
    latents = identity_bank(spec.identities, spec.dim, nc.make_rng(seed, 0))
    splits = assign_splits(spec.sequences, spec.splits, nc.make_rng(seed, 1))
    corpus = Corpus()
    for i in range(spec.sequences):
        rng = nc.make_rng(seed, 2, i)
        duration = float(rng.uniform(spec.min_duration, spec.max_duration))
        subject = int(rng.integers(0, spec.identities))
        n_dis = int(rng.integers(0, spec.max_distractors + 1))
        pool = [k for k in range(spec.identities) if k != subject]
        others = [int(k) for k in rng.choice(pool, size=min(n_dis, len(pool)), replace=False)]
        scen = ScenarioSpec(
            script=random_script(rng, duration),
            fps=spec.fps,
            distractors=len(others),
            sigma=spec.sigma,
            occlusion=spec.occlusion,
            identities=spec.identities,
            dim=spec.dim,
            robot_speed=spec.robot_speed,
            seed=seed,
        )
        seq = generate_sequence(scen, latents, subject, others, rng, seq_id=f"seq{i:04d}")
        seq.split = splits[i]
        corpus.sequences.append(seq)
    return corpus
