import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvensemble import dsl
from nvensemble.protocols import PropiConfig, echo_program, fid_program, propi_program, rabi_program, t1_program

PROPI = """
rabi mw 10000 kHz
block up repeat 2 { laser 3; mw pi/2; mw lock 20 phase 270 rabi 503.8; mw pi/2 }
block down repeat 2 { laser 3; mw pi/2 phase 180; mw lock 20 phase 270 rabi 503.8; mw pi/2 phase 180 }
"""


def test_expansion_times():
    tl = dsl.compile_program(PROPI)
    assert len(tl.events) == 16
    pi2 = 0.25 / 10000 * 1e3
    step = 3 + 2 * pi2 + 20
    assert tl.total_duration == pytest.approx(4 * step)
    second_laser = tl.on("LASER")[1]
    assert second_laser.start == pytest.approx(step)
    lock = [e for e in tl.on("MW") if e.duration == 20][0]
    assert (lock.amplitude, lock.phase) == (503.8, 270.0)
    assert tl.on("MW")[-1].phase == 180.0


def test_parameters_and_overrides():
    src = "param tau 2\nblock b repeat 1 { rf pulse dur $tau rabi 5; wait $tau }"
    assert dsl.compile_program(src).total_duration == 4.0
    assert dsl.compile_program(src, {"tau": 3.0}).total_duration == 6.0
    with pytest.raises(dsl.DslError, match="unresolved parameter"):
        dsl.compile_program("block b repeat 1 { wait $nope }")


def test_pinned_events_run_in_parallel_on_different_channels():
    tl = dsl.compile_program("block b repeat 1 { mw pulse dur 5 rabi 1 at 0; rf pulse dur 5 rabi 1 at 0 }")
    assert [e.start for e in tl.events] == [0.0, 0.0]
    assert tl.total_duration == 5.0


def test_overlap_diagnostic_names_both_events():
    src = "block b repeat 1 {\n  mw pulse dur 5 rabi 1;\n  mw pulse dur 5 rabi 1 at 2\n}"
    with pytest.raises(dsl.OverlapError) as info:
        dsl.compile_program(src)
    msg = str(info.value)
    assert "MW" in msg and "[0, 5]" in msg and "[2, 7]" in msg
    assert info.value.line == 3


@pytest.mark.parametrize(
    "src, fragment",
    [
        ("block b repeat 1 { mw pi }", "Rabi frequency"),
        ("block b repeat 1 { mw warp 3 }", ""),
        ("block b repeat 1 { laser 3 ", "end of input"),
        ("rabi laser 3\nblock b repeat 1 { laser 3 }", "laser has no Rabi"),
        ("block b repeat 1 { laser 3 }\nblock b repeat 1 { laser 3 }", "duplicate block"),
        ("param a 1\nparam a 2", "duplicate parameter"),
        ("block b repeat 1 { laser 3 } @", "unexpected character"),
        ("block b repeat 1 { wait -1 }", "invalid duration"),
        ("rabi mw 0\nblock b repeat 1 { mw pi }", "zero Rabi"),
    ],
)
def test_diagnostics_carry_locations(src, fragment):
    with pytest.raises(dsl.DslError) as info:
        dsl.compile_program(src)
    assert fragment in str(info.value)
    assert info.value.line is not None


def test_zero_length_events_are_dropped_and_trailing_wait_counts():
    tl = dsl.compile_program("block b repeat 2 { laser 0; laser 1; wait 4 }")
    assert len(tl.events) == 2
    assert tl.total_duration == 10.0


def test_timeline_csv():
    tl = dsl.compile_program(PROPI)
    rows = dsl.read_timeline_csv(tl.to_csv())
    assert len(rows) == len(tl.events)
    assert rows[0]["channel"] == "LASER" and rows[0]["duration_us"] == 3.0


def _generated():
    cfg = PropiConfig(M=2, N=2)
    om = 503.8
    return [propi_program(cfg, om), t1_program(cfg, om, 2.0), rabi_program(cfg, om, 17.5, 5.0),
            fid_program(cfg, om, 0.1, "ms0"), fid_program(cfg, om, 0.1, "ms-1"), echo_program(cfg, om, 0.1)]


@pytest.mark.parametrize("src", [PROPI, *_generated()])
def test_round_trip(src):
    ast = dsl.parse(src)
    text = dsl.serialize(ast)
    assert dsl.parse(text) == ast
    assert dsl.serialize(dsl.parse(text)) == text
    assert dsl.validate(dsl.parse(text)) == dsl.validate(ast)


_NUM = st.sampled_from([0.5, 1, 2.25, 3, 10, 1e-3, 123.456])


@st.composite
def _ast(draw):
    events = []
    for _ in range(draw(st.integers(1, 6))):
        ch = draw(st.sampled_from(["MW", "RF", "LASER", "WAIT"]))
        if ch == "WAIT":
            events.append(dsl.EventSpec("WAIT", "wait", draw(_NUM)))
        elif ch == "LASER":
            events.append(dsl.EventSpec("LASER", "laser", draw(_NUM)))
        else:
            kind = draw(st.sampled_from(["pi", "pi/2", "lock", "pulse"]))
            dur = None if kind.startswith("pi") else (draw(_NUM) if kind == "lock" else dsl.ParamRef("t"))
            events.append(dsl.EventSpec(ch, kind, dur, phase=draw(st.one_of(st.none(), _NUM)),
                                        rabi=draw(st.one_of(st.none(), _NUM)),
                                        detuning=draw(st.one_of(st.none(), _NUM))))
    return dsl.SequenceAST((dsl.Block("b", tuple(events), draw(st.integers(1, 4))),),
                           {"t": draw(_NUM)}, {"MW": 1000.0, "RF": 5.0})


@settings(max_examples=200, deadline=None)
@given(_ast())
def test_serialize_parse_identity_on_random_asts(ast):
    assert dsl.parse(dsl.serialize(ast)) == ast
