import io

import pytest

from escorte import escortctl as ec
from escorte.action import ActionState as A

F, L, S, X = A.FOLLOWING, A.LAGGING, A.STOPPING, None

CFG = ec.ControlConfig(cruise_speed=1.0, slowed_speed=0.4, lag_confirm=3, stop_confirm=3, prompt_timeout=1.0, abort_timeout=2.0)
DT = 0.5


def drive(obs, cfg=CFG, dt=DT):
    return ec.run(obs, cfg, dt)


def test_reset():
    s = ec.reset(CFG)
    assert s.mode is ec.Mode.PROCEEDING and s.time_in_state == 0 and s.time_since_prompt == 0
    assert ec.reset(CFG) == s
    s2, cmd = ec.control_step(s, F, DT, CFG)
    assert s2.mode is ec.Mode.PROCEEDING and cmd.speed == CFG.cruise_speed


def test_reset_invalid_config():
    with pytest.raises(ValueError):
        ec.reset(ec.ControlConfig(cruise_speed=0.5, slowed_speed=0.6))


def test_lagging_confirmed_slows_and_prompts():
    trace = drive([L, L, L])
    assert [s.mode for s, _ in trace] == [ec.Mode.PROCEEDING] * 2 + [ec.Mode.SLOWED]
    cmd = trace[-1][1]
    assert cmd.speed == CFG.slowed_speed and cmd.prompt is ec.Prompt.KEEP_UP


def test_isolated_lagging_is_ignored():
    trace = drive([F, L, F, F, L, F])
    assert all(s.mode is ec.Mode.PROCEEDING for s, _ in trace)


def test_halted_then_following_resumes():
    trace = drive([S, S, S, F, F, F])
    assert trace[2][0].mode is ec.Mode.HALTED and trace[2][1].speed == 0.0
    assert trace[-1][0].mode is ec.Mode.PROCEEDING and trace[-1][1].speed == CFG.cruise_speed


def test_prompt_then_abort():
    # halted at step 3; prompt after 1 s (2 steps); abort after 2 s more (4 steps)
    trace = drive([S] * 3 + [S] * 2 + [S] * 4)
    modes = [s.mode for s, _ in trace]
    assert modes[2] is ec.Mode.HALTED
    assert modes[4] is ec.Mode.PROMPTED and trace[4][1].prompt is ec.Prompt.PLEASE_PROCEED
    assert modes[-1] is ec.Mode.ABORTED
    last = trace[-1][1]
    assert last.terminate and last.speed == 0.0


def test_stepping_aborted_machine_is_error():
    state = drive([S] * 9)[-1][0]
    with pytest.raises(ec.ControlError):
        ec.control_step(state, F, DT, CFG)


def test_absent_freezes_timers_and_holds_command():
    trace = drive([S, S, S, X, X, X, X, X, X])
    assert all(s.mode is ec.Mode.HALTED for s, _ in trace[2:])
    assert trace[-1][0].time_in_state == trace[2][0].time_in_state
    assert all(c.speed == 0.0 for _, c in trace[2:])


def test_following_in_prompted_resets_abort_timer():
    trace = drive([S] * 5 + [S, F, S, S, F, S, S])
    assert ec.Mode.ABORTED not in [s.mode for s, _ in trace]


def test_determinism():
    obs = [F, L, L, L, S, S, X, S, S, F, F, F, L]
    assert drive(obs) == drive(obs)


def test_command_log_round_trip():
    trace = drive([L, L, L, S, S, S])
    recs = [ec.command_record(k * DT, s, c, seq_id="a") for k, (s, c) in enumerate(trace)]
    buf = io.StringIO()
    ec.write_command_log(recs, buf)
    buf.seek(0)
    back = ec.read_command_log(buf)
    assert back == recs
    assert set(back[0]) == {"seq_id", "t", "state", "speed", "prompt", "terminate"}
