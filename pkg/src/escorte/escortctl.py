"""Escort control: a debounced state machine from detected escortee actions
to robot speed commands and spoken prompts."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from typing import IO, Iterable

from .action import ActionState


class Mode(enum.Enum):
    PROCEEDING = "proceeding"
    SLOWED = "slowed"
    HALTED = "halted"
    PROMPTED = "prompted"
    ABORTED = "aborted"


class Prompt(enum.Enum):
    NONE = "none"
    KEEP_UP = "keep-up"
    PLEASE_PROCEED = "please-proceed"


ABSENT = None  # observation when the subject is not found


@dataclass(frozen=True)
class ControlConfig:
    cruise_speed: float = 1.0
    slowed_speed: float = 0.5
    lag_confirm: int = 15
    stop_confirm: int = 30
    prompt_timeout: float = 3.0
    abort_timeout: float = 30.0

    def validate(self) -> None:
        if not 0 < self.slowed_speed < self.cruise_speed:
            raise ValueError("need 0 < slowed_speed < cruise_speed")
        if self.prompt_timeout <= 0 or self.abort_timeout <= 0:
            raise ValueError("timeouts must be > 0")
        if self.lag_confirm < 1 or self.stop_confirm < 1:
            raise ValueError("confirm counts must be >= 1")


@dataclass(frozen=True)
class RobotCommand:
    speed: float
    prompt: Prompt = Prompt.NONE
    terminate: bool = False


@dataclass(frozen=True)
class ControlState:
    mode: Mode
    time_in_state: float = 0.0
    time_since_prompt: float = 0.0
    run_action: ActionState | None = None  # action of the current consecutive run
    run_length: int = 0
    command: RobotCommand = RobotCommand(0.0)


class ControlError(RuntimeError):
    pass


def reset(config: ControlConfig) -> ControlState:
    config.validate()
    return ControlState(Mode.PROCEEDING, command=RobotCommand(config.cruise_speed))


def _enter(mode: Mode, run: ActionState | None, n: int, cmd: RobotCommand) -> ControlState:
    return ControlState(mode, 0.0, 0.0, run, n, cmd)


def control_step(
    state: ControlState, observation: ActionState | None, dt: float, config: ControlConfig
) -> tuple[ControlState, RobotCommand]:
    """Advance one frame.

    ``observation`` is the predicted action, or ``None`` when the subject is
    absent. Absent frames freeze timers and run counters and repeat the last
    speed without re-issuing a prompt.
    """
    if state.mode is Mode.ABORTED:
        raise ControlError("machine is aborted")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if observation is None:
        held = replace(state.command, prompt=Prompt.NONE)
        return replace(state, command=held), held

    obs = ActionState(observation)
    n = state.run_length + 1 if obs == state.run_action else 1
    mode = state.mode
    cruise = RobotCommand(config.cruise_speed)

    if obs == ActionState.FOLLOWING and n >= config.lag_confirm and mode is not Mode.PROCEEDING:
        s = _enter(Mode.PROCEEDING, obs, n, cruise)
        return s, s.command
    if obs == ActionState.STOPPING and n >= config.stop_confirm and mode in (Mode.PROCEEDING, Mode.SLOWED):
        s = _enter(Mode.HALTED, obs, n, RobotCommand(0.0))
        return s, s.command
    if obs == ActionState.LAGGING and n >= config.lag_confirm and mode is Mode.PROCEEDING:
        cmd = RobotCommand(config.slowed_speed, Prompt.KEEP_UP)
        s = _enter(Mode.SLOWED, obs, n, cmd)
        return s, cmd

    t_state = state.time_in_state + dt
    t_prompt = state.time_since_prompt + dt
    if mode is Mode.HALTED and t_state >= config.prompt_timeout:
        cmd = RobotCommand(0.0, Prompt.PLEASE_PROCEED)
        s = _enter(Mode.PROMPTED, obs, n, cmd)
        return s, cmd
    if mode is Mode.PROMPTED:
        if obs == ActionState.FOLLOWING:
            t_prompt = 0.0  # the escortee is responding
        elif t_prompt >= config.abort_timeout:
            cmd = RobotCommand(0.0, terminate=True)
            s = _enter(Mode.ABORTED, obs, n, cmd)
            return s, cmd
    steady = replace(state.command, prompt=Prompt.NONE)
    s = ControlState(mode, t_state, t_prompt, obs, n, steady)
    return s, steady


# --------------------------------------------------------------------------
# Command log: one JSON object per line with keys t, state, speed, prompt,
# terminate (seq_id is added when replaying a corpus).


def command_record(t: float, state: ControlState, cmd: RobotCommand, **extra) -> dict:
    rec = dict(extra)
    rec.update(
        t=round(t, 6),
        state=state.mode.value,
        speed=cmd.speed,
        prompt=cmd.prompt.value,
        terminate=cmd.terminate,
    )
    return rec


def write_command_log(records: Iterable[dict], fh: IO[str]) -> None:
    for rec in records:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_command_log(fh: IO[str]) -> list[dict]:
    return [json.loads(line) for line in fh if line.strip()]


def run(
    observations: Iterable[ActionState | None], config: ControlConfig, dt: float
) -> list[tuple[ControlState, RobotCommand]]:
    state = reset(config)
    trace = []
    for obs in observations:
        if state.mode is Mode.ABORTED:
            break
        state, cmd = control_step(state, obs, dt, config)
        trace.append((state, cmd))
    return trace
