"""Crowd-recording ingestion and ego-centric sample extraction.

Scene files are plain text, one record per line:

    <frame:int> <ped_id:int> <x:float> <y:float>

with positions in meters. A sidecar (or explicit SceneFormat) declares the
native frame step that corresponds to one 0.4 s timestep. Records are
grouped per pedestrian, aligned to the timestep grid, and tracks with
missing steps are split into separate gap-free tracks.

Samples put the ego agent at the origin (translation only; the anchor
heading is carried separately) and pair 8-step neighbor histories with the
ego's 8-step future and its endpoint as the goal.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .stl import EPS_DISP

log = logging.getLogger(__name__)


class ParseError(ValueError):
    """A scene file line failed to parse."""


@dataclass(frozen=True)
class SceneFormat:
    """Native frame step per 0.4 s timestep (ETH/UCY annotate every 10th frame)."""

    frame_step: int = 10
    dt: float = 0.4

    def __post_init__(self):
        if self.frame_step < 1 or self.dt <= 0.0:
            raise ValueError("frame_step must be >= 1 and dt positive")


@dataclass
class Track:
    """One gap-free pedestrian track starting at timestep t0."""

    ped_id: int
    t0: int
    points: np.ndarray  # (T, 2)

    def __len__(self):
        return len(self.points)

    @property
    def t_end(self) -> int:
        return self.t0 + len(self.points) - 1

    def at(self, t: int) -> np.ndarray:
        return self.points[t - self.t0]

    def covers(self, t: int) -> bool:
        return self.t0 <= t <= self.t_end


@dataclass
class Scene:
    name: str
    dt: float
    tracks: dict[int, Track] = field(default_factory=dict)

    def tracks_of(self, ped_id: int) -> list[Track]:
        return [tr for tr in self.tracks.values() if tr.ped_id == ped_id]


@dataclass(frozen=True)
class SplitSpec:
    holdout: str
    train: tuple[str, ...]

    def __post_init__(self):
        if self.holdout in self.train:
            raise ValueError(f"holdout scene {self.holdout!r} also in train set")


@dataclass
class SocialSample:
    """One planner training/eval instance, everything in the ego frame.

    The ego position at the anchor step maps to (0, 0); neighbor histories
    and the ego future are translated the same way. theta0 is the ego's
    world-frame heading at the anchor, kept for signal extraction.
    """

    ego_id: int
    t_anchor: int
    neighbors: list[np.ndarray]  # each (n_obs, 2)
    goal: np.ndarray             # (2,)
    ego_future: np.ndarray       # (n_pred, 2)
    theta0: float


def parse_scene(path, fmt: SceneFormat, name: str | None = None) -> Scene:
    """Read a scene file, align frames to the timestep grid, split gapped tracks."""
    path = Path(path)
    name = name if name is not None else path.stem
    raw: dict[int, list[tuple[int, int, float, float]]] = {}
    n_records = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if len(parts) != 4:
                    raise ValueError("expected 4 fields")
                frame = int(float(parts[0]))
                ped = int(float(parts[1]))
                x, y = float(parts[2]), float(parts[3])
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from None
            n_records += 1
            step = int(round(frame / fmt.frame_step))
            offset = abs(frame - step * fmt.frame_step)
            raw.setdefault(ped, []).append((step, offset, x, y))
    if n_records == 0:
        raise ParseError(f"{path}: empty scene file")

    scene = Scene(name=name, dt=fmt.dt)
    next_id = 0
    for ped in sorted(raw):
        # nearest-frame alignment: keep the record closest to each grid step
        best: dict[int, tuple[int, float, float]] = {}
        for step, offset, x, y in raw[ped]:
            if step not in best or offset < best[step][0]:
                best[step] = (offset, x, y)
        steps = sorted(best)
        run_start = 0
        for i in range(1, len(steps) + 1):
            if i == len(steps) or steps[i] != steps[i - 1] + 1:
                run = steps[run_start:i]
                pts = np.array([[best[s][1], best[s][2]] for s in run])
                scene.tracks[next_id] = Track(ped_id=ped, t0=run[0], points=pts)
                next_id += 1
                run_start = i
    return scene


def load_scene(path) -> Scene:
    """parse_scene with format taken from the JSON sidecar `<stem>.json`."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        fmt = SceneFormat(frame_step=int(meta.get("frame_step", 10)),
                          dt=float(meta.get("dt", 0.4)))
        name = meta.get("name")
    else:
        fmt, name = SceneFormat(), None
    return parse_scene(path, fmt, name=name)


def _anchor_heading(points: np.ndarray, anchor: int) -> float:
    """Heading of the most recent non-degenerate displacement into the anchor."""
    for i in range(anchor, 0, -1):
        d = points[i] - points[i - 1]
        if math.hypot(d[0], d[1]) >= EPS_DISP:
            return math.atan2(d[1], d[0])
    return 0.0


def _history_window(track: Track, t: int, n_obs: int) -> np.ndarray:
    """World-frame history ending at t, back-padded with the earliest point."""
    lo = max(track.t0, t - n_obs + 1)
    window = track.points[lo - track.t0: t - track.t0 + 1]
    pad = n_obs - len(window)
    if pad > 0:
        window = np.vstack([np.repeat(window[:1], pad, axis=0), window])
    return window


def extract_samples(scene: Scene, n_obs: int = 8, n_pred: int = 8,
                    radius: float = 4.0) -> list[SocialSample]:
    """Window every track into ego-centric samples.

    An anchor is valid when the ego track covers n_obs steps of history
    (anchor included) and n_pred steps of future; the goal is the ego's
    ground-truth position at the end of the prediction window. Neighbors
    are all other pedestrians present at the anchor within `radius`, with
    short histories back-padded.
    """
    samples: list[SocialSample] = []
    skipped = 0
    track_items = sorted(scene.tracks.items())
    for _, ego in track_items:
        if len(ego) < n_obs + n_pred:
            skipped += 1
            continue
        for i in range(n_obs - 1, len(ego) - n_pred):
            t = ego.t0 + i
            origin = ego.points[i]
            neighbors = []
            for _, other in track_items:
                if other.ped_id == ego.ped_id or not other.covers(t):
                    continue
                if np.linalg.norm(other.at(t) - origin) > radius:
                    continue
                neighbors.append(_history_window(other, t, n_obs) - origin)
            samples.append(SocialSample(
                ego_id=ego.ped_id,
                t_anchor=t,
                neighbors=neighbors,
                goal=ego.points[i + n_pred] - origin,
                ego_future=ego.points[i + 1:i + n_pred + 1] - origin,
                theta0=_anchor_heading(ego.points, i),
            ))
    if skipped:
        log.debug("%s: %d tracks too short for any sample", scene.name, skipped)
    return samples


def leave_one_out(scenes: list[Scene], holdout_name: str,
                  n_obs: int = 8, n_pred: int = 8, radius: float = 4.0
                  ) -> tuple[list[SocialSample], list[SocialSample]]:
    """Split extracted samples: test from the holdout scene, train from the rest."""
    names = [s.name for s in scenes]
    if holdout_name not in names:
        raise KeyError(f"holdout scene {holdout_name!r} not among {names}")
    train: list[SocialSample] = []
    test: list[SocialSample] = []
    for scene in scenes:
        out = extract_samples(scene, n_obs=n_obs, n_pred=n_pred, radius=radius)
        (test if scene.name == holdout_name else train).extend(out)
    if not train:
        warnings.warn(f"leave-one-out with holdout {holdout_name!r} "
                      "leaves an empty training set", stacklevel=2)
    return train, test


def to_world_frame(points, anchor_xy) -> np.ndarray:
    """Invert the sample transform: translate ego-frame points back to world."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return pts + np.asarray(anchor_xy, dtype=float).reshape(1, 2)


# ---- sample archive (line-oriented) ----

ARCHIVE_HEADER = "socialstep-samples v1"


def save_samples(path, samples: list[SocialSample]) -> None:
    """Write samples to a line-oriented archive.

    Line layout after the header: ego_id t_anchor theta0 n_neighbors n_obs
    n_pred, then the goal, each neighbor history row-major, and the ego
    future row-major, all space-separated.
    """
    with open(path, "w") as fh:
        fh.write(ARCHIVE_HEADER + "\n")
        for s in samples:
            n_obs = len(s.neighbors[0]) if s.neighbors else len(s.ego_future)
            fields = [str(s.ego_id), str(s.t_anchor), repr(float(s.theta0)),
                      str(len(s.neighbors)), str(n_obs), str(len(s.ego_future))]
            coords = list(np.asarray(s.goal, dtype=float).ravel())
            for nb in s.neighbors:
                coords.extend(np.asarray(nb, dtype=float).ravel())
            coords.extend(np.asarray(s.ego_future, dtype=float).ravel())
            fh.write(" ".join(fields + [repr(float(c)) for c in coords]) + "\n")


def load_samples(path) -> list[SocialSample]:
    samples = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != ARCHIVE_HEADER:
            raise ParseError(f"{path}: unknown archive header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            try:
                ego_id, t_anchor = int(parts[0]), int(parts[1])
                theta0 = float(parts[2])
                n_nb, n_obs, n_pred = int(parts[3]), int(parts[4]), int(parts[5])
                vals = np.array([float(v) for v in parts[6:]])
                expect = 2 + n_nb * n_obs * 2 + n_pred * 2
                if len(vals) != expect:
                    raise ValueError(f"expected {expect} coordinates, got {len(vals)}")
            except (ValueError, IndexError) as e:
                raise ParseError(f"{path}:{lineno}: {e}") from None
            goal = vals[:2]
            off = 2
            neighbors = []
            for _ in range(n_nb):
                neighbors.append(vals[off:off + n_obs * 2].reshape(n_obs, 2))
                off += n_obs * 2
            future = vals[off:].reshape(n_pred, 2)
            samples.append(SocialSample(ego_id, t_anchor, neighbors, goal,
                                        future, theta0))
    return samples
