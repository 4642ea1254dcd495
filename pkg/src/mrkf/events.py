"""Measurement events and the CSV interchange formats.

An event stream is a time-ordered list of online readings, offline
sample-drawn markers and offline returns, all on the online time grid.
The CSV schema (one header row, comma separated, days as float) is the
interchange contract between the scenario generator, the filters and the
command-line tools: columns ``t_days, kind, id, signal_mask, v1..v6``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

N_SIGNALS = 6
ONLINE_SIGNALS = (0, 1, 2, 3)
OFFLINE_IN = 4
OFFLINE_AC = 5

FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class OnlineMeasurement:
    t: float
    values: tuple  # 4 online signal values


@dataclass(frozen=True)
class SampleDrawn:
    t: float
    sample_id: str
    signals: tuple  # output indices, e.g. (4,) for IN or (5,) for AC


@dataclass(frozen=True)
class OfflineReturn:
    t: float
    sample_id: str
    signals: tuple
    values: tuple

    def __post_init__(self):
        if len(self.values) != len(self.signals):
            raise ValueError("return values must match the sample's signals")


MeasurementEvent = OnlineMeasurement | SampleDrawn | OfflineReturn


def grid_index(t: float, dt_days: float) -> int:
    return int(round(t / dt_days))


def ceil_to_grid(t: float, dt_days: float) -> float:
    """Round a time stamp up to the next online grid entry."""
    k = math.ceil(t / dt_days - 1e-9)
    return k * dt_days


def _kind_rank(ev) -> int:
    # within one grid step: online first, then returns, then new samples
    if isinstance(ev, OnlineMeasurement):
        return 0
    if isinstance(ev, OfflineReturn):
        return 1
    return 2


def sort_events(events) -> list:
    return sorted(events, key=lambda ev: (ev.t, _kind_rank(ev), getattr(ev, "sample_id", "")))


def resolve_collisions(events, dt_days: float) -> list:
    """Enforce at most one sample-drawn and one return per grid step.

    Colliding events of the same kind are distributed across consecutive
    grid steps; the IN-signal event keeps the earlier slot. A shifted
    sample pushes its own return if the order would invert.
    """
    samples = [ev for ev in events if isinstance(ev, SampleDrawn)]
    returns = {ev.sample_id: ev for ev in events if isinstance(ev, OfflineReturn)}
    online = [ev for ev in events if isinstance(ev, OnlineMeasurement)]

    def assign_slots(evs):
        taken = set()
        moved = {}
        order = sorted(evs, key=lambda e: (grid_index(e.t, dt_days),
                                           0 if OFFLINE_IN in e.signals else 1,
                                           e.sample_id))
        for ev in order:
            k = grid_index(ev.t, dt_days)
            while k in taken:
                k += 1
            taken.add(k)
            moved[ev.sample_id] = k * dt_days
        return moved

    sample_slot = assign_slots(samples)
    new_samples = []
    shifted_returns = {}
    for ev in samples:
        t_new = sample_slot[ev.sample_id]
        new_samples.append(SampleDrawn(t_new, ev.sample_id, ev.signals))
        ret = returns.get(ev.sample_id)
        if ret is not None:
            t_ret = max(ret.t, t_new)
            shifted_returns[ev.sample_id] = OfflineReturn(
                t_ret, ret.sample_id, ret.signals, ret.values)
    # orphan returns (no matching sample event) pass through untouched
    for sid, ret in returns.items():
        shifted_returns.setdefault(sid, ret)

    return_slot = assign_slots(list(shifted_returns.values()))
    new_returns = []
    for sid, ret in shifted_returns.items():
        t_new = max(return_slot[sid], sample_slot.get(sid, -np.inf))
        new_returns.append(OfflineReturn(t_new, sid, ret.signals, ret.values))

    return sort_events(online + new_samples + new_returns)


def signal_mask(signals) -> str:
    mask = ["0"] * N_SIGNALS
    for s in signals:
        mask[s] = "1"
    return "".join(mask)


def parse_mask(mask: str) -> tuple:
    return tuple(i for i, c in enumerate(mask) if c == "1")


def write_events_csv(path, events) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_days", "kind", "id", "signal_mask"]
                   + [f"v{i+1}" for i in range(N_SIGNALS)])
        for ev in sort_events(events):
            vals = [""] * N_SIGNALS
            if isinstance(ev, OnlineMeasurement):
                positions = tuple(range(len(ev.values)))
                kind, sid, mask = "online", "", signal_mask(positions)
                for i, v in zip(positions, ev.values):
                    vals[i] = FLOAT_FMT % v
            elif isinstance(ev, SampleDrawn):
                kind, sid, mask = "sample", ev.sample_id, signal_mask(ev.signals)
            else:
                kind, sid, mask = "return", ev.sample_id, signal_mask(ev.signals)
                for i, v in zip(ev.signals, ev.values):
                    vals[i] = FLOAT_FMT % v
            w.writerow([FLOAT_FMT % ev.t, kind, sid, mask] + vals)


def read_events_csv(path) -> list:
    events = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"t_days", "kind", "id", "signal_mask"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(
                f"event CSV must have columns {sorted(required)} + v1..v6")
        for row in reader:
            t = float(row["t_days"])
            kind = row["kind"]
            signals = parse_mask(row["signal_mask"])
            if kind == "online":
                values = tuple(float(row[f"v{i+1}"]) for i in signals)
                events.append(OnlineMeasurement(t, values))
            elif kind == "sample":
                events.append(SampleDrawn(t, row["id"], signals))
            elif kind == "return":
                values = tuple(float(row[f"v{i+1}"]) for i in signals)
                events.append(OfflineReturn(t, row["id"], signals, values))
            else:
                raise ValueError(f"unknown event kind {kind!r}")
    return sort_events(events)


def write_truth_csv(path, t, states, outputs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i+1}" for i in range(states.shape[1])]
                   + [f"y{i+1}" for i in range(outputs.shape[1])])
        for k in range(len(t)):
            w.writerow([FLOAT_FMT % t[k]]
                       + [FLOAT_FMT % v for v in states[k]]
                       + [FLOAT_FMT % v for v in outputs[k]])


def read_truth_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        nx = sum(1 for h in header if h.startswith("x"))
        ny = sum(1 for h in header if h.startswith("y"))
        rows = [list(map(float, row)) for row in reader]
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1:1 + nx], arr[:, 1 + nx:1 + nx + ny]
