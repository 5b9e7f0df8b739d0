"""A small text language for pulse sequences.

Example::

    rabi mw 10000 kHz
    param tau 1.5
    block init repeat 100 { laser 3; mw pi/2; mw lock 20 phase 270 rabi 503.8; mw pi/2; laser 3 }
    block probe repeat 1 { rf pulse dur $tau; wait 2.5 }

Grammar (times in µs, frequencies in kHz, phases in degrees)::

    program := (header | param)* block*
    header  := "rabi" channel NUMBER ["kHz"]
    param   := "param" IDENT NUMBER
    block   := "block" IDENT "repeat" INT "{" event (";" event)* "}"
    event   := channel spec | "wait" expr
    channel := "mw" | "rf" | "laser"
    spec    := ("pi/2" | "pi" | "lock" NUMBER | "pulse" "dur" expr) option*
             | NUMBER ["at" expr]                       (laser duration)
    option  := "phase" NUMBER | "rabi" NUMBER | "detuning" NUMBER | "at" expr
    expr    := NUMBER | "$" IDENT

Events in a block run back to back unless ``at`` pins a block-local start
time.  ``#`` starts a comment.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

CHANNELS = {"mw": "MW", "rf": "RF", "laser": "LASER"}
_CHANNEL_NAMES = {v: k for k, v in CHANNELS.items()}
_OPTIONS = ("phase", "rabi", "detuning", "at")
_KEYWORDS = {"block", "repeat", "rabi", "param", "wait", "pi", "pi/2", "lock", "pulse", "dur",
             "phase", "detuning", "at", "kHz", *CHANNELS}
_EPS = 1e-9


class DslError(Exception):
    """Any parse or validation failure, with a source location when known."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.message = message
        self.line = line
        self.col = col
        loc = f"{line}:{col}: " if line is not None else ""
        super().__init__(loc + message)


class OverlapError(DslError):
    def __init__(self, first: "PulseEvent", second: "PulseEvent"):
        self.events = (first, second)
        super().__init__(
            f"{first.channel} events overlap: {first.describe()} and {second.describe()}",
            second.line,
            second.col,
        )


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamRef:
    name: str


Expr = Union[float, ParamRef]


@dataclass(frozen=True)
class EventSpec:
    """One event as written.  ``kind`` is pi/2, pi, lock, pulse, laser or wait."""

    channel: str  # MW, RF, LASER, or WAIT
    kind: str
    duration: Expr | None = None  # None for angle macros
    phase: float | None = None
    rabi: float | None = None
    detuning: float | None = None
    at: Expr | None = None
    line: int | None = field(default=None, compare=False)
    col: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Block:
    name: str
    events: tuple[EventSpec, ...]
    repeat: int = 1
    line: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class SequenceAST:
    blocks: tuple[Block, ...] = ()
    parameters: Mapping[str, float] = field(default_factory=dict)
    rabi: Mapping[str, float] = field(default_factory=dict)  # channel -> kHz

    def __eq__(self, other):
        if not isinstance(other, SequenceAST):
            return NotImplemented
        return (self.blocks == other.blocks and dict(self.parameters) == dict(other.parameters)
                and dict(self.rabi) == dict(other.rabi))

    def resolve(self, expr: Expr | None) -> float | None:
        if isinstance(expr, ParamRef):
            return float(self.parameters[expr.name])
        return expr


# ---------------------------------------------------------------------------
# Timeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PulseEvent:
    channel: str
    start: float  # µs
    duration: float  # µs
    amplitude: float = 0.0  # Rabi frequency kHz; 1.0 for LASER
    phase: float = 0.0  # degrees, [0, 360)
    detuning: float = 0.0  # kHz
    block: str = ""
    repetition: int = 0
    index: int = 0
    line: int | None = field(default=None, compare=False)
    col: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"event duration must be > 0, got {self.duration}")
        if self.start < 0:
            raise ValueError(f"event start must be >= 0, got {self.start}")
        object.__setattr__(self, "phase", float(self.phase) % 360.0)

    @property
    def end(self) -> float:
        return self.start + self.duration

    def describe(self) -> str:
        where = f" (line {self.line})" if self.line is not None else ""
        return (f"{self.block}[{self.repetition}].{self.index} "
                f"[{self.start:g}, {self.end:g}] us{where}")


@dataclass(frozen=True)
class Timeline:
    events: tuple[PulseEvent, ...] = ()
    total_duration: float = 0.0

    def on(self, channel: str) -> list[PulseEvent]:
        return [e for e in self.events if e.channel == channel]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel", "start_us", "duration_us", "rabi_khz", "phase_deg", "detuning_khz"])
        for e in self.events:
            w.writerow([e.channel, _fmt(e.start), _fmt(e.duration), _fmt(e.amplitude),
                        _fmt(e.phase), _fmt(e.detuning)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Lexer / parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<number>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<word>pi/2|[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[{};$])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(source: str) -> list[_Tok]:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise DslError(f"unexpected character {source[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        text = m.group()
        if kind not in ("ws", "comment"):
            toks.append(_Tok(kind, text, line, pos - line_start + 1))
        nl = text.count("\n")
        if nl:
            line += nl
            line_start = pos + text.rfind("\n") + 1
        pos = m.end()
    return toks


class _Parser:
    def __init__(self, source: str, parameters: Mapping[str, float] | None):
        self.toks = _tokenize(source)
        self.i = 0
        self.params: dict[str, float] = {}
        self.external = dict(parameters or {})
        self.rabi: dict[str, float] = {}

    # -- token helpers
    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def next(self, what: str) -> _Tok:
        tok = self.peek()
        if tok is None:
            last = self.toks[-1] if self.toks else _Tok("", "", 1, 1)
            raise DslError(f"unexpected end of input, expected {what}", last.line, last.col + len(last.text))
        self.i += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.next(repr(text))
        if tok.text != text:
            raise DslError(f"expected {text!r}, found {tok.text!r}", tok.line, tok.col)
        return tok

    def number(self, what: str = "number") -> float:
        tok = self.next(what)
        if tok.kind != "number":
            raise DslError(f"expected {what}, found {tok.text!r}", tok.line, tok.col)
        return float(tok.text)

    def ident(self, what: str = "identifier") -> _Tok:
        tok = self.next(what)
        if tok.kind != "word" or tok.text in _KEYWORDS:
            raise DslError(f"expected {what}, found {tok.text!r}", tok.line, tok.col)
        return tok

    def channel(self) -> str:
        tok = self.next("channel")
        if tok.text not in CHANNELS:
            raise DslError(f"unknown channel {tok.text!r}", tok.line, tok.col)
        return CHANNELS[tok.text]

    def expr(self) -> Expr:
        tok = self.peek()
        if tok is not None and tok.text == "$":
            self.i += 1
            name = self.ident("parameter name")
            self._refs.append(name)
            return ParamRef(name.text)
        return self.number("number or $parameter")

    # -- grammar
    def program(self) -> SequenceAST:
        self._refs: list[_Tok] = []
        blocks: list[Block] = []
        names: set[str] = set()
        while (tok := self.peek()) is not None:
            if tok.text == "rabi" and not blocks:
                self.i += 1
                ch = self.channel()
                if ch == "LASER":
                    raise DslError("laser has no Rabi frequency", tok.line, tok.col)
                if ch in self.rabi:
                    raise DslError(f"duplicate rabi header for {_CHANNEL_NAMES[ch]}", tok.line, tok.col)
                self.rabi[ch] = self.number("Rabi frequency")
                if (unit := self.peek()) is not None and unit.text == "kHz":
                    self.i += 1
            elif tok.text == "param" and not blocks:
                self.i += 1
                name = self.ident("parameter name")
                if name.text in self.params:
                    raise DslError(f"duplicate parameter {name.text!r}", name.line, name.col)
                self.params[name.text] = self.number("parameter value")
            elif tok.text == "block":
                b = self.block()
                if b.name in names:
                    raise DslError(f"duplicate block name {b.name!r}", b.line, tok.col)
                names.add(b.name)
                blocks.append(b)
            else:
                raise DslError(f"expected 'block', found {tok.text!r}", tok.line, tok.col)
        params = {**self.params, **self.external}
        for ref in self._refs:
            if ref.text not in params:
                raise DslError(f"unresolved parameter ${ref.text}", ref.line, ref.col)
        return SequenceAST(tuple(blocks), params, dict(self.rabi))

    def block(self) -> Block:
        start = self.expect("block")
        name = self.ident("block name").text
        self.expect("repeat")
        tok = self.peek()
        rep = self.number("repeat count")
        if rep != int(rep) or rep < 1:
            raise DslError(f"repeat count must be a positive integer, got {tok.text}", tok.line, tok.col)
        self.expect("{")
        events = [self.event()]
        while True:
            tok = self.next("';' or '}'")
            if tok.text == "}":
                break
            if tok.text != ";":
                raise DslError(f"expected ';' or '}}', found {tok.text!r}", tok.line, tok.col)
            events.append(self.event())
        return Block(name, tuple(events), int(rep), start.line)

    def event(self) -> EventSpec:
        tok = self.peek()
        if tok is None:
            self.next("event")
        if tok.text == "wait":
            self.i += 1
            return EventSpec("WAIT", "wait", duration=self.expr(), line=tok.line, col=tok.col)
        ch = self.channel()
        if ch == "LASER":
            dur = self.number("laser duration")
            at = None
            if (nxt := self.peek()) is not None and nxt.text == "at":
                self.i += 1
                at = self.expr()
            return EventSpec(ch, "laser", duration=dur, at=at, line=tok.line, col=tok.col)
        kw = self.next("pulse spec")
        if kw.text in ("pi/2", "pi"):
            kind, dur = kw.text, None
        elif kw.text == "lock":
            kind, dur = "lock", self.number("lock duration")
        elif kw.text == "pulse":
            self.expect("dur")
            kind, dur = "pulse", self.expr()
        else:
            raise DslError(f"expected pi/2, pi, lock or pulse, found {kw.text!r}", kw.line, kw.col)
        opts: dict[str, Expr] = {}
        while (nxt := self.peek()) is not None and nxt.text in _OPTIONS:
            self.i += 1
            if nxt.text in opts:
                raise DslError(f"duplicate option {nxt.text!r}", nxt.line, nxt.col)
            opts[nxt.text] = self.expr() if nxt.text == "at" else self.number(nxt.text)
        return EventSpec(ch, kind, duration=dur, line=tok.line, col=tok.col, **opts)


def parse(source: str, parameters: Mapping[str, float] | None = None) -> SequenceAST:
    """Parse program text.  ``parameters`` add to (and override) ``param`` lines."""
    return _Parser(source, parameters).program()


# ---------------------------------------------------------------------------
# Serializer
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    x = float(x)
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _fmt_expr(e: Expr) -> str:
    return f"${e.name}" if isinstance(e, ParamRef) else _fmt(e)


def _event_text(ev: EventSpec) -> str:
    if ev.kind == "wait":
        return f"wait {_fmt_expr(ev.duration)}"
    if ev.kind == "laser":
        text = f"laser {_fmt(ev.duration)}"
        return text + (f" at {_fmt_expr(ev.at)}" if ev.at is not None else "")
    parts = [_CHANNEL_NAMES[ev.channel]]
    if ev.kind in ("pi/2", "pi"):
        parts.append(ev.kind)
    elif ev.kind == "lock":
        parts += ["lock", _fmt(ev.duration)]
    else:
        parts += ["pulse", "dur", _fmt_expr(ev.duration)]
    for name in _OPTIONS:
        v = getattr(ev, name)
        if v is not None:
            parts += [name, _fmt_expr(v)]
    return " ".join(parts)


def serialize(ast: SequenceAST) -> str:
    """Canonical text: headers, params (sorted), then one block per line."""
    lines = []
    for ch in ("MW", "RF"):
        if ch in ast.rabi:
            lines.append(f"rabi {_CHANNEL_NAMES[ch]} {_fmt(ast.rabi[ch])}")
    for name in sorted(ast.parameters):
        lines.append(f"param {name} {_fmt(ast.parameters[name])}")
    for b in ast.blocks:
        body = "; ".join(_event_text(e) for e in b.events)
        lines.append(f"block {b.name} repeat {b.repeat} {{ {body} }}")
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# Validation / expansion
# ---------------------------------------------------------------------------

_ANGLE_TURNS = {"pi/2": 0.25, "pi": 0.5}


def _event_rabi(ast: SequenceAST, ev: EventSpec) -> float | None:
    return ev.rabi if ev.rabi is not None else ast.rabi.get(ev.channel)


def _duration(ast: SequenceAST, ev: EventSpec) -> float:
    if ev.kind in _ANGLE_TURNS:
        rabi = _event_rabi(ast, ev)
        if rabi is None:
            raise DslError(f"{ev.kind} on {_CHANNEL_NAMES[ev.channel]} needs a Rabi frequency "
                           "(header or 'rabi' option)", ev.line, ev.col)
        if rabi == 0:
            raise DslError(f"{ev.kind} macro with zero Rabi frequency", ev.line, ev.col)
        # turns / (kHz) gives ms; report µs
        return _ANGLE_TURNS[ev.kind] / abs(rabi) * 1e3
    d = ast.resolve(ev.duration)
    if d is None or not math.isfinite(d) or d < 0:
        raise DslError(f"invalid duration {d}", ev.line, ev.col)
    return d


def validate(ast: SequenceAST) -> Timeline:
    """Expand repeats into absolute time and check per-channel overlap.

    Zero-length pulses and waits are dropped (they are the identity).
    """
    events: list[PulseEvent] = []
    offset = 0.0
    for block in ast.blocks:
        local: list[tuple[float, float, EventSpec, int]] = []
        cursor = 0.0
        for idx, ev in enumerate(block.events):
            dur = _duration(ast, ev)
            if ev.kind == "wait":
                cursor += dur
                continue
            start = cursor if ev.at is None else ast.resolve(ev.at)
            if start < 0:
                raise DslError(f"negative start time {start}", ev.line, ev.col)
            cursor = max(cursor, start + dur)
            if dur > 0:
                local.append((start, dur, ev, idx))
        length = cursor
        for rep in range(block.repeat):
            for start, dur, ev, idx in local:
                if ev.kind == "laser":
                    amp, phase, det = 1.0, 0.0, 0.0
                else:
                    amp = _event_rabi(ast, ev)
                    if amp is None:
                        amp = 0.0
                    phase = ev.phase or 0.0
                    det = ev.detuning or 0.0
                events.append(PulseEvent(ev.channel, offset + rep * length + start, dur, float(amp),
                                         phase, det, block.name, rep, idx, ev.line, ev.col))
        offset += block.repeat * length
    events.sort(key=lambda e: (e.start, e.channel))
    last: dict[str, PulseEvent] = {}
    for e in events:
        prev = last.get(e.channel)
        if prev is not None and e.start < prev.end - _EPS:
            raise OverlapError(prev, e)
        if prev is None or e.end > prev.end:
            last[e.channel] = e
    total = max(offset, max((e.end for e in events), default=0.0))
    return Timeline(tuple(events), total)


def compile_program(source: str, parameters: Mapping[str, float] | None = None) -> Timeline:
    return validate(parse(source, parameters))


def read_timeline_csv(text: str) -> list[dict[str, float | str]]:
    """Rows of a CSV produced by :meth:`Timeline.to_csv`."""
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({k: (v if k == "channel" else float(v)) for k, v in row.items()})
    return rows


def expanded_event_count(ast: SequenceAST) -> int:
    return sum(b.repeat * sum(1 for e in b.events if e.kind != "wait") for b in ast.blocks)


def iter_events(ast: SequenceAST) -> Iterable[EventSpec]:
    for b in ast.blocks:
        yield from b.events
