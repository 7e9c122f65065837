"""The prober instrument aggregate: stimulus source, synchronized meter,
and protection, executing waveforms against a simulated bench.

Every capture keeps applied level, measured voltage, and measured current
aligned on one shared time base: index i of every series refers to the same
instant.  Protection clamps the source at the offending sample (exactly at
the limit) and keeps capturing in clamped mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

from .circuit import Bench, Stimulus, solve_dc, step_transient
from .errors import LengthMismatch, NonConvergence, ProtocolError, SimulationFailure


@dataclass(frozen=True)
class StimulusWaveform:
    mode: str  # "current" | "voltage"
    samples: tuple
    dt: float
    target_pads: tuple
    source_ohms: float = 0.0

    def __post_init__(self):
        if self.mode not in ("current", "voltage"):
            raise ValueError("mode must be 'current' or 'voltage'")
        if len(self.samples) == 0:
            raise ValueError("waveform must have at least one sample")
        if not all(math.isfinite(s) for s in self.samples):
            raise ValueError("waveform levels must be finite")
        if not self.dt > 0.0:
            raise ValueError("dt must be > 0")
        if len(self.target_pads) == 0:
            raise ValueError("waveform must target at least one pad")
        if len(set(self.target_pads)) != len(self.target_pads):
            raise ValueError("target pads must be unique")
        if self.source_ohms < 0.0:
            raise ValueError("source_ohms must be >= 0")


@dataclass(frozen=True)
class ProtectionLimits:
    max_abs_voltage: float
    max_abs_current: float

    def __post_init__(self):
        if not self.max_abs_voltage > 0.0 or not self.max_abs_current > 0.0:
            raise ValueError("protection limits must be > 0")


@dataclass(frozen=True)
class CaptureRecord:
    pad_id: str
    dt: float
    applied: tuple
    measured_voltage: tuple
    measured_current: tuple
    protection_tripped: bool = False
    trip_index: Optional[int] = None

    def __post_init__(self):
        n = len(self.applied)
        if n == 0:
            raise ValueError("capture must have at least one sample")
        if len(self.measured_voltage) != n or len(self.measured_current) != n:
            raise ValueError("capture series must share one length")
        if self.protection_tripped != (self.trip_index is not None):
            raise ValueError("protection_tripped iff trip_index present")

    def __len__(self):
        return len(self.applied)


def _solve_sample(bench, stimuli, state, dt, transient):
    try:
        if transient:
            return step_transient(bench.uut, bench.contacts, stimuli, state, dt)
        return state, solve_dc(bench.uut, bench.contacts, stimuli)
    except NonConvergence as exc:
        raise SimulationFailure(str(exc)) from exc


def execute(waveform: StimulusWaveform, limits: ProtectionLimits, bench: Bench) -> list:
    """Run the waveform against the bench; one CaptureRecord per target pad.

    Current-mode samples that would exceed the voltage limit (including an
    open needle, which an ideal current source would rail against) are
    re-run with the source clamped to +/-max_abs_voltage; voltage-mode
    samples that would exceed the current limit are clamped to
    +/-max_abs_current.  The clamp is exact: no recorded magnitude exceeds
    its limit.
    """
    for pid in waveform.target_pads:
        bench.uut.pad(pid)  # raises UnknownPad
    transient = any(pc.shunt_capacitance > 0.0 for _, pc in bench.uut.pads)

    series = {pid: {"v": [], "i": [], "trip": None} for pid in waveform.target_pads}
    state = None
    for k, level in enumerate(waveform.samples):
        stimuli = {
            pid: Stimulus(waveform.mode, level, waveform.source_ohms)
            for pid in waveform.target_pads
        }
        # Pre-clamp levels that already exceed their own limit.
        if waveform.mode == "current" and abs(level) > limits.max_abs_current:
            lim = math.copysign(limits.max_abs_current, level)
            stimuli = {pid: Stimulus("current", lim) for pid in waveform.target_pads}
            for pid in waveform.target_pads:
                if series[pid]["trip"] is None:
                    series[pid]["trip"] = k
        if waveform.mode == "voltage" and abs(level) > limits.max_abs_voltage:
            lim = math.copysign(limits.max_abs_voltage, level)
            stimuli = {
                pid: Stimulus("voltage", lim, waveform.source_ohms)
                for pid in waveform.target_pads
            }
            for pid in waveform.target_pads:
                if series[pid]["trip"] is None:
                    series[pid]["trip"] = k

        # Clamp-and-resolve until no reading violates its limits.  Each pass
        # converts at least one pad's source to its clamped form, so the
        # loop is bounded by the pad count.
        for _ in range(len(waveform.target_pads) + 1):
            next_state, result = _solve_sample(bench, stimuli, state, waveform.dt, transient)
            offenders = []
            for pid in waveform.target_pads:
                reading = result[pid]
                stim = stimuli[pid]
                contact_open = bench.contact(pid).is_open
                if stim.mode == "current" and stim.level != 0.0:
                    railed = contact_open or abs(reading.volts) > limits.max_abs_voltage
                    if railed:
                        sign = math.copysign(1.0, stim.level)
                        offenders.append(
                            (pid, Stimulus("voltage", sign * limits.max_abs_voltage))
                        )
                elif stim.mode == "voltage":
                    if abs(reading.amperes) > limits.max_abs_current:
                        sign = math.copysign(1.0, reading.amperes)
                        offenders.append(
                            (pid, Stimulus("current", sign * limits.max_abs_current))
                        )
            if not offenders:
                break
            for pid, clamped in offenders:
                stimuli[pid] = clamped
                if series[pid]["trip"] is None:
                    series[pid]["trip"] = k

        state = next_state
        for pid in waveform.target_pads:
            reading = result[pid]
            # A clamped source has zero source resistance, so the needle
            # reading equals the clamp level exactly.
            series[pid]["v"].append(reading.volts)
            series[pid]["i"].append(reading.amperes)

    captures = []
    for pid in waveform.target_pads:
        trip = series[pid]["trip"]
        captures.append(
            CaptureRecord(
                pad_id=pid,
                dt=waveform.dt,
                applied=tuple(waveform.samples),
                measured_voltage=tuple(series[pid]["v"]),
                measured_current=tuple(series[pid]["i"]),
                protection_tripped=trip is not None,
                trip_index=trip,
            )
        )
    return captures


def measure_charge(capture: CaptureRecord) -> float:
    """Charge moved over the capture window, in coulombs.

    Each measured current sample is held over its dt slot (the meter reports
    one value per slot), so the integral is the held-sample sum times dt.
    """
    return capture.dt * math.fsum(capture.measured_current)


# --- waveform file format -------------------------------------------------
#
# Plain text, one sample per line, after a single header line:
#
#   <mode> <dt> <pad> [<pad> ...]
#
# Blank lines and lines starting with '#' are ignored.

def format_waveform(waveform: StimulusWaveform) -> str:
    header = " ".join([waveform.mode, repr(waveform.dt), *waveform.target_pads])
    lines = [header] + [repr(s) for s in waveform.samples]
    return "\n".join(lines) + "\n"


def parse_waveform(text: str) -> StimulusWaveform:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ProtocolError("empty waveform file")
    head = lines[0].split()
    if len(head) < 3:
        raise ProtocolError("waveform header must be: mode dt pads...")
    mode = head[0]
    try:
        dt = float(head[1])
    except ValueError:
        raise ProtocolError(f"bad dt in waveform header: {head[1]!r}") from None
    pads = tuple(head[2:])
    try:
        samples = tuple(float(ln) for ln in lines[1:])
    except ValueError as exc:
        raise ProtocolError(f"bad waveform sample: {exc}") from None
    try:
        return StimulusWaveform(mode=mode, samples=samples, dt=dt, target_pads=pads)
    except ValueError as exc:
        raise ProtocolError(str(exc)) from None


# --- capture serialization ------------------------------------------------
#
# Text block used by the bus READ reply and for on-disk records:
#
#   capture <pad_id> <dt> <n> <tripped 0|1> <trip_index|->
#   <applied> <voltage> <current>        (n lines)

def format_capture(capture: CaptureRecord) -> str:
    trip = "-" if capture.trip_index is None else str(capture.trip_index)
    head = " ".join(
        [
            "capture",
            capture.pad_id,
            repr(capture.dt),
            str(len(capture)),
            "1" if capture.protection_tripped else "0",
            trip,
        ]
    )
    rows = [
        f"{a!r} {v!r} {i!r}"
        for a, v, i in zip(capture.applied, capture.measured_voltage, capture.measured_current)
    ]
    return "\n".join([head] + rows) + "\n"


def parse_capture_lines(lines: list) -> CaptureRecord:
    head = lines[0].split()
    if len(head) != 6 or head[0] != "capture":
        raise ProtocolError(f"bad capture header: {lines[0]!r}")
    pad_id, dt_s, n_s, trip_flag, trip_s = head[1], head[2], head[3], head[4], head[5]
    try:
        dt = float(dt_s)
        n = int(n_s)
    except ValueError:
        raise ProtocolError(f"bad capture header: {lines[0]!r}") from None
    if len(lines) != n + 1:
        raise LengthMismatch(f"capture declares {n} samples, got {len(lines) - 1}")
    applied, volts, amps = [], [], []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 3:
            raise ProtocolError(f"bad capture row: {ln!r}")
        a, v, i = (float(p) for p in parts)
        applied.append(a)
        volts.append(v)
        amps.append(i)
    return CaptureRecord(
        pad_id=pad_id,
        dt=dt,
        applied=tuple(applied),
        measured_voltage=tuple(volts),
        measured_current=tuple(amps),
        protection_tripped=trip_flag == "1",
        trip_index=None if trip_s == "-" else int(trip_s),
    )
