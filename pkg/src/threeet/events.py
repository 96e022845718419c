"""DVS events: framing, a synthetic pupil scene, clip slicing and dataset files.

Event streams are held as numpy structured arrays with the same 16-byte
record layout used on disk (``EVENT_DTYPE``).  Timestamps are integer
microseconds.
"""

from __future__ import annotations

import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DatasetError

EVENT_MAGIC = b"EVT3ET01"
HEADER_SIZE = 16
EVENT_DTYPE = np.dtype(
    [("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3"), ("t", "<u8")]
)
assert EVENT_DTYPE.itemsize == 16

DEFAULT_DELTA_T_US = 4400
DEFAULT_WIDTH = 80
DEFAULT_HEIGHT = 60


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


def events_array(events) -> np.ndarray:
    """Coerce a list of :class:`Event` (or an event array) to ``EVENT_DTYPE``."""
    if isinstance(events, np.ndarray) and events.dtype == EVENT_DTYPE:
        return events
    arr = np.zeros(len(events), dtype=EVENT_DTYPE)
    if len(events):
        x, y, t, p = zip(*events)
        arr["x"] = x
        arr["y"] = y
        arr["t"] = t
        arr["p"] = p
    return arr


@dataclass
class VoxelFrame:
    values: np.ndarray  # [1, H, W] signed counts
    t_start: int
    t_end: int


# ---------------------------------------------------------------------------
# framing


def accumulate_frames(events, delta_t_us, width, height, t0=0, num_frames=None):
    """Signed per-pixel polarity sums in bins ``(t0 + k*dt, t0 + (k+1)*dt]``.

    Returns an int32 array ``[num_frames, height, width]``.  Events at or
    before ``t0`` or past the last bin are ignored.  When ``num_frames`` is
    omitted, enough bins are made to hold the last event.
    """
    if delta_t_us <= 0:
        raise ValueError("delta_t_us must be positive")
    ev = events_array(events)
    if ev.size and (ev["x"].max() >= width or ev["y"].max() >= height):
        bad = int(np.flatnonzero((ev["x"] >= width) | (ev["y"] >= height))[0])
        raise DatasetError(
            f"event {bad} at ({ev['x'][bad]}, {ev['y'][bad]}) outside {width}x{height} frame"
        )
    t = ev["t"].astype(np.int64)
    if num_frames is None:
        num_frames = int(-(-(int(t.max()) - t0) // delta_t_us)) if ev.size and t.max() > t0 else 0
    in_range = t > t0
    k = np.where(in_range, (t - t0 - 1) // delta_t_us, -1)
    keep = in_range & (k < num_frames)
    flat = (k[keep] * height + ev["y"][keep].astype(np.int64)) * width + ev["x"][keep]
    sums = np.bincount(
        flat, weights=ev["p"][keep].astype(np.float64), minlength=num_frames * height * width
    )
    return np.rint(sums).astype(np.int32).reshape(num_frames, height, width)


def frame_events(stream, delta_t_us, width, height, t0=0, num_frames=None):
    """Frame an event stream into a list of :class:`VoxelFrame`."""
    ev = events_array(stream)
    if ev.size > 1 and np.any(np.diff(ev["t"].astype(np.int64)) < 0):
        raise DatasetError("event stream is not sorted by timestamp")
    grid = accumulate_frames(ev, delta_t_us, width, height, t0, num_frames)
    return [
        VoxelFrame(grid[k][None], t0 + k * delta_t_us, t0 + (k + 1) * delta_t_us)
        for k in range(grid.shape[0])
    ]


# ---------------------------------------------------------------------------
# synthetic scene


@dataclass
class SyntheticSceneConfig:
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT
    pupil_radius: tuple = (5.0, 8.0)
    radius_period_s: float = 7.0
    iris_scale: float = 1.9
    # linear intensities in (0, 1]
    background: float = 0.75
    iris: float = 0.42
    pupil: float = 0.06
    # smooth drift: Ornstein-Uhlenbeck velocity, clipped to drift_speed_max
    drift_speed_max: float = 40.0
    drift_tau_s: float = 0.25
    drift_sigma: float = 60.0
    saccade_rate_hz: float = 1.2
    saccade_amplitude: tuple = (8.0, 30.0)
    saccade_duration_s: float = 0.035
    event_threshold: float = 0.1
    noise_rate_hz: float = 0.3
    sim_step_us: int = 500
    seed: int = 0

    def validate(self):
        lo, hi = self.pupil_radius
        if not 0 < lo <= hi:
            raise ValueError("pupil_radius must satisfy 0 < min <= max")
        if 2 * (hi + 1) >= min(self.width, self.height):
            raise ValueError("pupil does not fit inside the frame")
        if self.event_threshold <= 0 or self.sim_step_us <= 0:
            raise ValueError("event_threshold and sim_step_us must be positive")


class Trajectory:
    """Piecewise-linear pupil-centre trajectory sampled at simulator steps."""

    def __init__(self, times_us, centers):
        self.times_us = np.asarray(times_us, dtype=np.float64)
        self.centers = np.asarray(centers, dtype=np.float64)

    def __call__(self, t_us):
        t = np.asarray(t_us, dtype=np.float64)
        x = np.interp(t, self.times_us, self.centers[:, 0])
        y = np.interp(t, self.times_us, self.centers[:, 1])
        return np.stack([x, y], axis=-1)


def _render_log(cfg, cx, cy, radius, xs, ys):
    d = np.hypot(xs - cx, ys - cy)
    pupil_cov = np.clip(radius + 0.5 - d, 0.0, 1.0)
    iris_cov = np.clip(cfg.iris_scale * radius + 0.5 - d, 0.0, 1.0)
    img = cfg.background + (cfg.iris - cfg.background) * iris_cov
    img = img + (cfg.pupil - cfg.iris) * pupil_cov
    return np.log(img)


def _simulate_trajectory(cfg, n_steps, rng):
    dt = cfg.sim_step_us * 1e-6
    r_lo, r_hi = cfg.pupil_radius
    margin = r_hi + 1.0
    lo = np.array([margin, margin])
    hi = np.array([cfg.width - margin, cfg.height - margin])
    pos = rng.uniform(lo, hi)
    vel = np.zeros(2)
    centers = np.empty((n_steps + 1, 2))
    centers[0] = pos
    saccade_left = 0
    saccade_step = np.zeros(2)
    for k in range(1, n_steps + 1):
        if saccade_left > 0:
            pos = pos + saccade_step
            saccade_left -= 1
        else:
            vel = vel - vel * dt / cfg.drift_tau_s + cfg.drift_sigma * math.sqrt(dt) * rng.standard_normal(2)
            speed = np.hypot(*vel)
            if speed > cfg.drift_speed_max:
                vel *= cfg.drift_speed_max / speed
            pos = pos + vel * dt
            if rng.random() < cfg.saccade_rate_hz * dt:
                amp = rng.uniform(*cfg.saccade_amplitude)
                ang = rng.uniform(0.0, 2 * math.pi)
                target = np.clip(pos + amp * np.array([math.cos(ang), math.sin(ang)]), lo, hi)
                steps = max(1, int(round(cfg.saccade_duration_s / dt)))
                saccade_step = (target - pos) / steps
                saccade_left = steps
                vel = np.zeros(2)
        # reflect off the safe box
        for a in range(2):
            if pos[a] < lo[a]:
                pos[a] = 2 * lo[a] - pos[a]
                vel[a] = abs(vel[a])
            elif pos[a] > hi[a]:
                pos[a] = 2 * hi[a] - pos[a]
                vel[a] = -abs(vel[a])
        pos = np.clip(pos, lo, hi)
        centers[k] = pos
    return centers


def generate_synthetic_stream(config: SyntheticSceneConfig, duration_us, trajectory=None):
    """Render a dark pupil disk on a brighter iris/background and emit DVS events.

    A pixel fires when its log intensity has moved by at least
    ``event_threshold`` since the last event it emitted; polarity is the
    sign of the change.  Poisson background noise is added on top.
    Returns ``(events, trajectory)`` where ``trajectory(t_us)`` gives the
    true pupil centre in pixel coordinates (pixel ``i`` spans ``[i, i+1)``).

    ``trajectory`` may be an ``(n_steps + 1, 2)`` array of centres to
    override the random motion model.
    """
    cfg = config
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    step = int(cfg.sim_step_us)
    n_steps = int(duration_us) // step
    times = np.arange(n_steps + 1, dtype=np.int64) * step
    if trajectory is None:
        centers = _simulate_trajectory(cfg, n_steps, rng)
    else:
        centers = np.asarray(trajectory, dtype=np.float64)
        if centers.shape != (n_steps + 1, 2):
            raise ValueError(f"trajectory must have shape {(n_steps + 1, 2)}")
    r_lo, r_hi = cfg.pupil_radius
    phase = rng.uniform(0.0, 2 * math.pi)
    radii = r_lo + (r_hi - r_lo) * 0.5 * (
        1 + np.sin(2 * math.pi * times * 1e-6 / cfg.radius_period_s + phase)
    )

    ys, xs = np.mgrid[0 : cfg.height, 0 : cfg.width] + 0.5
    ref = _render_log(cfg, centers[0, 0], centers[0, 1], radii[0], xs, ys)
    thr = cfg.event_threshold
    noise_per_step = cfg.noise_rate_hz * cfg.width * cfg.height * step * 1e-6
    chunks = []
    for k in range(1, n_steps + 1):
        t_prev = int(times[k - 1])
        cur = _render_log(cfg, centers[k, 0], centers[k, 1], radii[k], xs, ys)
        diff = cur - ref
        n = np.floor(np.abs(diff) / thr).astype(np.int64)
        iy, ix = np.nonzero(n)
        if iy.size:
            counts = n[iy, ix]
            sign = np.sign(diff[iy, ix]).astype(np.int8)
            ref[iy, ix] += sign * counts * thr
            rep = np.repeat(np.arange(iy.size), counts)
            # j-th of n events lands at j/n of the way through the step
            j = np.arange(rep.size) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            ev = np.zeros(rep.size, dtype=EVENT_DTYPE)
            ev["x"] = ix[rep]
            ev["y"] = iy[rep]
            ev["p"] = sign[rep]
            ev["t"] = t_prev + np.maximum(1, (j * step) // counts[rep])
            chunks.append(ev)
        m = rng.poisson(noise_per_step)
        if m:
            ev = np.zeros(m, dtype=EVENT_DTYPE)
            ev["x"] = rng.integers(0, cfg.width, m)
            ev["y"] = rng.integers(0, cfg.height, m)
            ev["p"] = rng.choice(np.array([-1, 1], dtype=np.int8), m)
            ev["t"] = t_prev + rng.integers(1, step + 1, m)
            chunks.append(ev)
    events = np.concatenate(chunks) if chunks else np.zeros(0, dtype=EVENT_DTYPE)
    events = events[np.argsort(events["t"], kind="stable")]
    return events, Trajectory(times, centers)


def frame_labels(trajectory, num_frames, delta_t_us, t0=0):
    """Pupil centres sampled at each bin's end time."""
    t_end = t0 + (np.arange(num_frames) + 1) * delta_t_us
    return trajectory(t_end)


# ---------------------------------------------------------------------------
# clips


@dataclass
class SequenceSample:
    frames: np.ndarray  # [T, H, W]
    labels: np.ndarray  # [T, 2] pixel (x, y)
    start: int = 0

    def __post_init__(self):
        if len(self.frames) != len(self.labels):
            raise ValueError("frames and labels must have the same length")

    @property
    def length(self):
        return len(self.frames)


def num_clips(n, seq_len, stride):
    if n < seq_len:
        return 0
    return (n - seq_len) // stride + 1


def slice_clips(frames, labels, seq_len, stride=1, offset=0):
    """Overlapping windows ``[i*stride, i*stride + seq_len)``; overruns are dropped."""
    if seq_len < 1 or stride < 1:
        raise ValueError("seq_len and stride must be >= 1")
    if len(frames) != len(labels):
        raise ValueError("frames and labels must have the same length")
    return [
        SequenceSample(frames[s : s + seq_len], labels[s : s + seq_len], offset + s)
        for s in range(0, num_clips(len(frames), seq_len, stride) * stride, stride)
    ]


# ---------------------------------------------------------------------------
# dataset files


@dataclass
class Dataset:
    events: np.ndarray
    labels: np.ndarray  # [N, 2]
    delta_t_us: int = DEFAULT_DELTA_T_US
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT
    seed: int = 0
    t0_us: int = 0
    extra_meta: dict = field(default_factory=dict)

    @property
    def num_frames(self):
        return len(self.labels)

    def frames(self):
        return accumulate_frames(
            self.events, self.delta_t_us, self.width, self.height, self.t0_us, self.num_frames
        )


def make_synthetic_dataset(config: SyntheticSceneConfig, duration_us, delta_t_us=DEFAULT_DELTA_T_US):
    events, traj = generate_synthetic_stream(config, duration_us)
    n = int(duration_us) // int(delta_t_us)
    labels = frame_labels(traj, n, delta_t_us)
    return Dataset(events, labels, int(delta_t_us), config.width, config.height, config.seed)


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_events(events, width, height) -> bytes:
    head = EVENT_MAGIC + np.array([width, height], "<u2").tobytes() + b"\0\0\0\0"
    return head + np.ascontiguousarray(events_array(events)).tobytes()


def write_dataset(path, dataset: Dataset):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _atomic_write(path / "events.evt", encode_events(dataset.events, dataset.width, dataset.height))
    buf = io.StringIO()
    buf.write("frame_index,x,y\n")
    for i, (x, y) in enumerate(dataset.labels):
        buf.write(f"{i},{float(x)!r},{float(y)!r}\n")
    _atomic_write(path / "labels.csv", buf.getvalue().encode())
    meta = {
        "delta_t_us": dataset.delta_t_us,
        "width": dataset.width,
        "height": dataset.height,
        "seed": dataset.seed,
        "num_frames": dataset.num_frames,
        "t0_us": dataset.t0_us,
        **dataset.extra_meta,
    }
    text = "".join(f"{k}={v}\n" for k, v in meta.items())
    _atomic_write(path / "meta.txt", text.encode())


def decode_events(raw: bytes, path=None):
    """Parse an ``events.evt`` payload; returns ``(events, width, height)``."""
    if len(raw) < HEADER_SIZE:
        raise DatasetError("truncated header", path=path, offset=len(raw))
    if raw[:8] != EVENT_MAGIC:
        raise DatasetError(f"bad magic {raw[:8]!r}", path=path, offset=0)
    width, height = np.frombuffer(raw, "<u2", 2, 8)
    body = len(raw) - HEADER_SIZE
    whole = body // EVENT_DTYPE.itemsize
    if body % EVENT_DTYPE.itemsize:
        raise DatasetError(
            "truncated event record", path=path, offset=HEADER_SIZE + whole * EVENT_DTYPE.itemsize
        )
    events = np.frombuffer(raw, EVENT_DTYPE, whole, HEADER_SIZE).copy()

    def fail(msg, idx):
        raise DatasetError(msg, path=path, offset=HEADER_SIZE + int(idx) * EVENT_DTYPE.itemsize)

    bad = np.flatnonzero((events["x"] >= width) | (events["y"] >= height))
    if bad.size:
        fail("event coordinates out of bounds", bad[0])
    bad = np.flatnonzero((events["p"] != 1) & (events["p"] != -1))
    if bad.size:
        fail("polarity must be +1 or -1", bad[0])
    if whole > 1:
        bad = np.flatnonzero(np.diff(events["t"].astype(np.int64)) < 0)
        if bad.size:
            fail("timestamps are not sorted", bad[0] + 1)
    return events, int(width), int(height)


def read_meta(path):
    meta = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"malformed line {lineno} (expected key=value)", path=path)
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def read_labels(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "frame_index,x,y":
        raise DatasetError("labels header must be 'frame_index,x,y'", path=path)
    rows = []
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            idx, x, y = int(parts[0]), float(parts[1]), float(parts[2])
        except (ValueError, IndexError):
            raise DatasetError(f"malformed labels row at line {n}", path=path) from None
        if idx != len(rows):
            raise DatasetError(f"labels row at line {n} has frame_index {idx}, expected {len(rows)}", path=path)
        rows.append((x, y))
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def read_dataset(path) -> Dataset:
    path = Path(path)
    for name in ("events.evt", "labels.csv", "meta.txt"):
        if not (path / name).is_file():
            raise DatasetError(f"missing {name}", path=path)
    meta = read_meta(path / "meta.txt")
    try:
        delta_t = int(meta["delta_t_us"])
        width = int(meta["width"])
        height = int(meta["height"])
        seed = int(meta.get("seed", 0))
        t0 = int(meta.get("t0_us", 0))
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"bad or missing meta key: {exc}", path=path / "meta.txt") from None
    events, w, h = decode_events((path / "events.evt").read_bytes(), path / "events.evt")
    if (w, h) != (width, height):
        raise DatasetError(f"events header is {w}x{h} but meta says {width}x{height}", path=path)
    labels = read_labels(path / "labels.csv")
    expected = int(meta.get("num_frames", -1))
    if expected < 0:
        expected = int(-(-(int(events["t"].max()) - t0) // delta_t)) if events.size else 0
    if len(labels) != expected:
        raise DatasetError(
            f"labels.csv has {len(labels)} rows but the stream has {expected} frames",
            path=path / "labels.csv",
        )
    if len(labels) and (
        np.any(labels < 0) or np.any(labels[:, 0] >= width) or np.any(labels[:, 1] >= height)
    ):
        raise DatasetError("labels outside the frame", path=path / "labels.csv")
    known = {"delta_t_us", "width", "height", "seed", "num_frames", "t0_us"}
    extra = {k: v for k, v in meta.items() if k not in known}
    return Dataset(events, labels, delta_t, width, height, seed, t0, extra)
