"""Link per-timestep segments into rainstorm events.

Tracking runs forward in time. A segment at ``t`` may continue any event
that had segments at ``t - 1`` when

* its overlap with the event's composite footprint at ``t - 1`` (union of
  the event's segments there), measured as intersection over the smaller
  set, reaches ``min_overlap_fraction``;
* its centroid moved at most ``max_centroid_jump_km`` from its parent, the
  event segment at ``t - 1`` it overlaps most;
* the direction of that move differs from the parent's own move by at most
  ``max_turn_deg`` (skipped while the parent has no recorded move, or
  when either move is shorter than ``turn_min_move_km``).

Among several qualifying events the one with the largest footprint at
``t - 1`` wins. Several segments can continue one event, which is how splits
are represented. Unmatched segments start new events; events that receive
nothing at ``t`` end at ``t - 1``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .gridio import GridGeometry
from .ident import Region, Segment


class TrackInputError(ValueError):
    pass


@dataclass(frozen=True)
class TrackParams:
    min_overlap_fraction: float = 0.3
    max_centroid_jump_km: float = 120.0
    max_turn_deg: float = 120.0
    # moves shorter than this have no meaningful direction
    turn_min_move_km: float = 12.0

    def __post_init__(self):
        if not 0 < self.min_overlap_fraction <= 1:
            raise ValueError("min_overlap_fraction must lie in (0, 1]")
        if min(self.max_centroid_jump_km, self.max_turn_deg, self.turn_min_move_km) < 0:
            raise ValueError("distances and angles must be >= 0")


@dataclass(eq=False)
class StormEvent:
    id: int
    birth_t: int
    steps: list = dc_field(default_factory=list)   # list[list[Segment]], one per timestep

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def death_t(self) -> int:
        return self.birth_t + len(self.steps) - 1

    def segments(self):
        for step in self.steps:
            yield from step

    def step_cells(self, i):
        """Cells and values of all segments at the ``i``-th step of the event."""
        segs = self.steps[i]
        return (np.concatenate([s.cells for s in segs]),
                np.concatenate([s.values for s in segs]))


def similarity(a: Segment, b: Segment) -> float:
    """Intersection over the smaller of the two cell sets."""
    return _overlap(a.keys, b.keys)


def _overlap(ka, kb):
    if ka.size == 0 or kb.size == 0:
        return 0.0
    inter = np.intersect1d(ka, kb, assume_unique=True).size
    return inter / min(ka.size, kb.size)


def _turn_deg(u, v, min_move=0.0):
    nu, nv = np.hypot(*u), np.hypot(*v)
    if nu == 0 or nv == 0 or nu < min_move or nv < min_move:
        return 0.0
    c = float(np.dot(u, v) / (nu * nv))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def _as_timeline(segments_by_t):
    if isinstance(segments_by_t, dict):
        keys = sorted(segments_by_t)
        if keys and keys != list(range(keys[0], keys[0] + len(keys))):
            raise TrackInputError(f"timesteps are not consecutive: {keys}")
        t0 = keys[0] if keys else 0
        steps = [list(segments_by_t[k]) for k in keys]
    else:
        steps = [list(s) for s in segments_by_t]
        t0 = next((s[0].t for s in steps if s), 0) - next(
            (i for i, s in enumerate(steps) if s), 0)
    for i, segs in enumerate(steps):
        for s in segs:
            if s.t != t0 + i:
                raise TrackInputError(f"segment with t={s.t} found at position of "
                                      f"t={t0 + i}; timesteps must be consecutive")
    return t0, steps


def track(segments_by_t, geometry: GridGeometry,
          params: TrackParams = TrackParams()) -> list[StormEvent]:
    """Assign every segment to exactly one event.

    ``segments_by_t`` is either a list of per-timestep segment lists (as
    returned by :func:`rainstorm.ident.identify_field`) or a dict keyed by
    consecutive integer timesteps.
    """
    t0, steps = _as_timeline(segments_by_t)
    events: list[StormEvent] = []
    alive: list[StormEvent] = []
    # per segment (by object id): centroid (km) and displacement from parent
    centroid = {}
    motion = {}

    for i, segs in enumerate(steps):
        segs = sorted(segs, key=lambda s: s.id)
        for s in segs:
            centroid[id(s)] = s.centroid_km(geometry)
        footprints = []
        for ev in alive:
            prev = ev.steps[-1]
            keys = np.unique(np.concatenate([p.keys for p in prev]))
            size = sum(p.n_cells for p in prev)
            footprints.append((ev, prev, keys, size))

        assigned: dict[int, list] = {}
        for s in segs:
            best = None
            for ev, prev, keys, size in footprints:
                if _overlap(s.keys, keys) < params.min_overlap_fraction:
                    continue
                # parent: the previous segment sharing most cells
                shared = [np.intersect1d(s.keys, p.keys, assume_unique=True).size for p in prev]
                parent = max(range(len(prev)),
                             key=lambda k: (shared[k], prev[k].n_cells, -prev[k].id))
                parent = prev[parent]
                move = centroid[id(s)] - centroid[id(parent)]
                if np.hypot(*move) > params.max_centroid_jump_km + 1e-9:
                    continue
                last = motion.get(id(parent))
                turn = 0.0 if last is None else _turn_deg(last, move, params.turn_min_move_km)
                if turn > params.max_turn_deg + 1e-9:
                    continue
                key = (size, -ev.id)
                if best is None or key > best[0]:
                    best = (key, ev, move)
            if best is None:
                ev = StormEvent(id=len(events), birth_t=t0 + i)
                events.append(ev)
                motion[id(s)] = None
                assigned.setdefault(ev.id, [ev])
                assigned[ev.id].append(s)
            else:
                _, ev, move = best
                motion[id(s)] = move
                assigned.setdefault(ev.id, [ev])
                assigned[ev.id].append(s)

        alive = []
        for ev_id in sorted(assigned):
            ev, *new = assigned[ev_id]
            ev.steps.append(new)
            alive.append(ev)
    return events


def check_events(events, segments_by_t=None):
    """Raise if events have gaps or segments are lost or duplicated."""
    seen = set()
    for ev in events:
        if ev.length < 1:
            raise AssertionError(f"event {ev.id} is empty")
        for k, step in enumerate(ev.steps):
            if not step:
                raise AssertionError(f"event {ev.id} has a gap at t={ev.birth_t + k}")
            for s in step:
                if s.t != ev.birth_t + k:
                    raise AssertionError(f"event {ev.id} holds segment of t={s.t} at "
                                         f"t={ev.birth_t + k}")
                if id(s) in seen:
                    raise AssertionError("segment assigned twice")
                seen.add(id(s))
    if segments_by_t is not None:
        _, steps = _as_timeline(segments_by_t)
        total = sum(len(s) for s in steps)
        if total != len(seen):
            raise AssertionError(f"{total} segments in, {len(seen)} assigned")


def trajectories(metrics_list):
    """Central-location polylines, one (l, 2) array of (lat, lon) per event."""
    return [np.asarray(m.central_locations, dtype=float) for m in metrics_list]


# ---------------------------------------------------------------- event files

def write_events(events, path) -> None:
    """One JSON object per line, ordered by id; one step entry per segment."""
    lines = []
    for ev in sorted(events, key=lambda e: e.id):
        steps = []
        for step in ev.steps:
            for s in sorted(step, key=lambda s: s.id):
                steps.append({"t": int(s.t), "cells": s.cells.tolist(),
                              "values": [float(v) for v in s.values]})
        lines.append(json.dumps({"id": int(ev.id), "birth_t": int(ev.birth_t),
                                 "death_t": int(ev.death_t), "steps": steps},
                                separators=(",", ":")))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_events(path) -> list[StormEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ev = StormEvent(id=int(obj["id"]), birth_t=int(obj["birth_t"]))
                n = int(obj["death_t"]) - ev.birth_t + 1
                ev.steps = [[] for _ in range(n)]
                for entry in obj["steps"]:
                    k = int(entry["t"]) - ev.birth_t
                    cells = np.asarray(entry["cells"], dtype=np.int64).reshape(-1, 2)
                    values = np.asarray(entry["values"], dtype=np.float64)
                    seg = Segment([Region(cells, values)], t=int(entry["t"]),
                                  id=len(ev.steps[k]))
                    ev.steps[k].append(seg)
            except (KeyError, ValueError, IndexError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed event: {exc}") from None
            if any(not step for step in ev.steps):
                raise ValueError(f"{path}: line {lineno}: event {ev.id} has empty timesteps")
            events.append(ev)
    return events
