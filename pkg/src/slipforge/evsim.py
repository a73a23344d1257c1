"""Contrast-threshold event camera simulation.

Converts a 60 Hz frame sequence into an asynchronous event stream the way a
DAVIS-style sensor would see it: per pixel the log intensity is tracked
against a reference level, every crossing of +/- one threshold emits an
event and moves the reference by one threshold step, so sub-threshold
residuals carry over.  Log intensity is interpolated linearly between frames
at `upsample_factor` sub-steps, which keeps the whole model closed under an
independent scalar re-implementation (`reference_frames_to_events`).

Both routes share the same parameter draws (threshold map, noise arrivals);
the per-pixel event logic is implemented twice and must agree bitwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputError, ParamError, ParseError

# relative slack on the per-interval activity test; a pixel whose endpoint
# log change stays below threshold * (1 - slack) cannot produce a crossing
# even after interpolation round-off (margin is ~20x the worst-case wobble)
_ACTIVE_SLACK = 1e-12

_LEAK_TAG = 2
_SHOT_TAG = 3
_THRESH_TAG = 1


@dataclass
class EventModelParams:
    contrast_threshold: float = 0.2
    threshold_sigma: float = 0.0
    refractory: float = 0.0005
    leak_rate: float = 0.0
    shot_noise_rate: float = 0.0
    upsample_factor: int = 10
    log_eps: float = 1e-3

    def validate(self):
        if not self.contrast_threshold > 0:
            raise ParamError("contrast_threshold must be positive")
        if self.threshold_sigma < 0:
            raise ParamError("threshold_sigma must be >= 0")
        if self.refractory < 0:
            raise ParamError("refractory must be >= 0")
        if self.leak_rate < 0 or self.shot_noise_rate < 0:
            raise ParamError("noise rates must be >= 0")
        if int(self.upsample_factor) != self.upsample_factor or self.upsample_factor < 1:
            raise ParamError("upsample_factor must be an integer >= 1")
        if not self.log_eps > 0:
            raise ParamError("log_eps must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EventStream:
    """Time-ordered event arrays plus the sensor geometry they live on."""

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    @classmethod
    def empty(cls, width, height):
        return cls(
            width,
            height,
            np.empty(0, dtype=np.float64),
            np.empty(0, dtype=np.uint16),
            np.empty(0, dtype=np.uint16),
            np.empty(0, dtype=np.int8),
        )

    def __len__(self):
        return self.t.size

    def validate(self):
        n = len(self)
        if not (self.x.size == self.y.size == self.p.size == n):
            raise InputError("event arrays have mismatched lengths")
        if n == 0:
            return
        if not np.all(np.isfinite(self.t)) or self.t[0] < 0:
            raise InputError("event timestamps must be finite and >= 0")
        if np.any(self.t[1:] < self.t[:-1]):
            raise InputError("event timestamps must be non-decreasing")
        if np.any(self.x >= self.width) or np.any(self.y >= self.height):
            raise InputError("event coordinates out of sensor bounds")
        if not np.all((self.p == 1) | (self.p == -1)):
            raise InputError("event polarity must be +1 or -1")
        order = np.lexsort((self.p, self.x, self.y, self.t))
        if np.any(order != np.arange(n)):
            raise InputError("events with equal timestamps must be (y, x, p) ordered")


def log_intensity(pixels: np.ndarray, log_eps: float) -> np.ndarray:
    return np.log(pixels + log_eps)


def _frame_fields(frame):
    if hasattr(frame, "pixels"):
        return np.asarray(frame.pixels, dtype=np.float64), float(frame.timestamp)
    pixels, t = frame
    return np.asarray(pixels, dtype=np.float64), float(t)


def _threshold_map(params: EventModelParams, seed: int, shape) -> np.ndarray:
    c = params.contrast_threshold
    if params.threshold_sigma == 0:
        return np.full(shape, c)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _THRESH_TAG]))
    draw = c + params.threshold_sigma * rng.standard_normal(shape)
    return np.clip(draw, c / 4.0, 4.0 * c)


def _noise_arrivals(rng, rate, n_pixels, duration):
    """Per-pixel exponential inter-arrival times, vectorized in rounds.

    Round r draws one waiting time for every pixel whose arrival chain is
    still inside `duration`, in pixel index order, so the result depends
    only on the generator state."""
    pix_out = []
    t_out = []
    alive = np.arange(n_pixels)
    clock = np.zeros(n_pixels)
    while alive.size:
        clock[alive] += rng.exponential(1.0 / rate, size=alive.size)
        hit = clock[alive] < duration
        alive = alive[hit]
        if alive.size:
            pix_out.append(alive.copy())
            t_out.append(clock[alive].copy())
    if not pix_out:
        return np.empty(0, dtype=np.int64), np.empty(0)
    return np.concatenate(pix_out), np.concatenate(t_out)


def _noise_events(params: EventModelParams, seed: int, width, height, t_start, duration):
    """Leak (ON) and shot (balanced) Poisson noise shared by both routes."""
    n = width * height
    chunks = []
    if params.leak_rate > 0 and duration > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, _LEAK_TAG]))
        pix, dt = _noise_arrivals(rng, params.leak_rate, n, duration)
        if pix.size:
            chunks.append(
                (t_start + dt, pix % width, pix // width, np.ones(pix.size, dtype=np.int8))
            )
    if params.shot_noise_rate > 0 and duration > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, _SHOT_TAG]))
        pix, dt = _noise_arrivals(rng, params.shot_noise_rate, n, duration)
        if pix.size:
            pol = (rng.integers(0, 2, size=pix.size) * 2 - 1).astype(np.int8)
            chunks.append((t_start + dt, pix % width, pix // width, pol))
    return chunks


def _finalize(chunks, width, height):
    if not chunks:
        return EventStream.empty(width, height)
    t = np.concatenate([c[0] for c in chunks])
    x = np.concatenate([np.asarray(c[1], dtype=np.uint16) for c in chunks])
    y = np.concatenate([np.asarray(c[2], dtype=np.uint16) for c in chunks])
    p = np.concatenate([np.asarray(c[3], dtype=np.int8) for c in chunks])
    order = np.lexsort((p, x, y, t))
    return EventStream(width, height, t[order], x[order], y[order], p[order])


def _check_frame(pixels, shape):
    if pixels.shape != shape:
        raise InputError(f"frame resolution {pixels.shape} != {shape}")
    if not np.all(np.isfinite(pixels)) or np.any(pixels < 0):
        raise InputError("frame pixels must be finite and >= 0")


def frames_to_events(frames, params: EventModelParams, seed: int = 0) -> EventStream:
    """Vectorized contrast-threshold conversion of frames to events.

    Per inter-frame interval only pixels whose endpoint log change can reach
    the threshold are swept through the sub-steps; the per-pixel arithmetic
    is kept identical to the scalar reference so the two agree bitwise.
    """
    params.validate()
    it = iter(frames)
    try:
        first = next(it)
    except StopIteration:
        raise InputError("need at least 2 frames") from None
    pixels, t_first = _frame_fields(first)
    if pixels.ndim != 2:
        raise InputError("frames must be 2-d arrays")
    shape = pixels.shape
    _check_frame(pixels, shape)
    h, w = shape
    n = h * w
    u = int(params.upsample_factor)
    refr = params.refractory

    cp = _threshold_map(params, seed, shape).ravel()
    cp_gate = cp * (1.0 - _ACTIVE_SLACK)
    l_prev = log_intensity(pixels, params.log_eps).ravel()
    l_ref = l_prev.copy()
    last_emit = np.full(n, -np.inf)
    t_prev = t_first
    dt_first = None

    chunks = []
    n_frames = 1
    for frame in it:
        pixels, t_cur = _frame_fields(frame)
        _check_frame(pixels, shape)
        dt = t_cur - t_prev
        if dt_first is None:
            if dt <= 0:
                raise InputError("frame timestamps must be increasing")
            dt_first = dt
        elif abs(dt - dt_first) > 1e-9 * max(1.0, dt_first):
            raise InputError("frames must be uniformly spaced")
        n_frames += 1

        l_cur = log_intensity(pixels, params.log_eps).ravel()
        idx = np.nonzero(np.abs(l_cur - l_ref) >= cp_gate)[0]
        if idx.size:
            l0 = l_prev[idx]
            dl = l_cur[idx] - l0
            cpa = cp[idx]
            ref = l_ref[idx]
            last = last_emit[idx]
            span = t_cur - t_prev
            for j in range(u):
                fa = j / u
                ta = t_prev + span * fa
                la = l0 + dl * fa
                if j == u - 1:
                    tb = t_cur
                    lb = l_cur[idx]
                else:
                    fb = (j + 1) / u
                    tb = t_prev + span * fb
                    lb = l0 + dl * fb
                rising = lb > la
                falling = lb < la
                k = np.zeros(idx.size, dtype=np.int64)
                if rising.any():
                    kr = np.floor((lb[rising] - ref[rising]) / cpa[rising]).astype(np.int64)
                    k[rising] = np.maximum(kr, 0)
                if falling.any():
                    kf = np.floor((ref[falling] - lb[falling]) / cpa[falling]).astype(np.int64)
                    k[falling] = -np.maximum(kf, 0)
                fired = np.nonzero(k != 0)[0]
                if fired.size:
                    kk = np.abs(k[fired])
                    ends = np.cumsum(kk)
                    total = int(ends[-1])
                    step = np.arange(1, total + 1) - np.repeat(ends - kk, kk)
                    who = np.repeat(fired, kk)
                    sign = np.where(k[who] > 0, 1.0, -1.0)
                    level = ref[who] + sign * step * cpa[who]
                    ts = ta + (tb - ta) * ((level - la[who]) / (lb[who] - la[who]))
                    pol = np.where(k[who] > 0, 1, -1).astype(np.int8)
                    keep = np.zeros(total, dtype=bool)
                    single = np.nonzero(kk == 1)[0]
                    if single.size:
                        at = ends[single] - 1
                        ok = ts[at] - last[fired[single]] >= refr
                        keep[at[ok]] = True
                        upd = fired[single][ok]
                        last[upd] = ts[at[ok]]
                    for m in np.nonzero(kk > 1)[0]:
                        pix = fired[m]
                        for e in range(int(ends[m] - kk[m]), int(ends[m])):
                            if ts[e] - last[pix] >= refr:
                                keep[e] = True
                                last[pix] = ts[e]
                    if keep.any():
                        gi = idx[who[keep]]
                        chunks.append((ts[keep], gi % w, gi // w, pol[keep]))
                ref = ref + k * cpa
            l_ref[idx] = ref
            last_emit[idx] = last
        l_prev = l_cur
        t_prev = t_cur

    if n_frames < 2:
        raise InputError("need at least 2 frames")
    chunks.extend(_noise_events(params, seed, w, h, t_first, t_prev - t_first))
    return _finalize(chunks, w, h)


def reference_frames_to_events(frames, params: EventModelParams, seed: int = 0) -> EventStream:
    """Scalar per-pixel brute-force twin of `frames_to_events`.

    Same contract, no batching and no candidate filtering: every pixel walks
    every sub-step of every interval.  Kept deliberately naive so it can
    serve as the equivalence oracle."""
    params.validate()
    frames = [_frame_fields(f) for f in frames]
    if len(frames) < 2:
        raise InputError("need at least 2 frames")
    shape = frames[0][0].shape
    if len(shape) != 2:
        raise InputError("frames must be 2-d arrays")
    for pixels, _ in frames:
        _check_frame(pixels, shape)
    times = [t for _, t in frames]
    dt0 = times[1] - times[0]
    if dt0 <= 0:
        raise InputError("frame timestamps must be increasing")
    for a, b in zip(times, times[1:]):
        if abs((b - a) - dt0) > 1e-9 * max(1.0, dt0):
            raise InputError("frames must be uniformly spaced")

    h, w = shape
    u = int(params.upsample_factor)
    refr = params.refractory
    cp_map = _threshold_map(params, seed, shape)
    logs = [log_intensity(pixels, params.log_eps) for pixels, _ in frames]

    ev_t, ev_x, ev_y, ev_p = [], [], [], []
    for y in range(h):
        for x in range(w):
            cp = cp_map[y, x]
            l_ref = logs[0][y, x]
            last = -math.inf
            for fi in range(len(frames) - 1):
                t0, t1 = times[fi], times[fi + 1]
                l0 = logs[fi][y, x]
                l1 = logs[fi + 1][y, x]
                for j in range(u):
                    fa = j / u
                    ta = t0 + (t1 - t0) * fa
                    la = l0 + (l1 - l0) * fa
                    if j == u - 1:
                        tb = t1
                        lb = l1
                    else:
                        fb = (j + 1) / u
                        tb = t0 + (t1 - t0) * fb
                        lb = l0 + (l1 - l0) * fb
                    if lb > la:
                        kr = math.floor((lb - l_ref) / cp)
                        kr = kr if kr > 0 else 0
                        for i in range(1, kr + 1):
                            level = l_ref + i * cp
                            ts = ta + (tb - ta) * ((level - la) / (lb - la))
                            if ts - last >= refr:
                                ev_t.append(ts)
                                ev_x.append(x)
                                ev_y.append(y)
                                ev_p.append(1)
                                last = ts
                        l_ref = l_ref + kr * cp
                    elif lb < la:
                        kf = math.floor((l_ref - lb) / cp)
                        kf = kf if kf > 0 else 0
                        for i in range(1, kf + 1):
                            level = l_ref - i * cp
                            ts = ta + (tb - ta) * ((level - la) / (lb - la))
                            if ts - last >= refr:
                                ev_t.append(ts)
                                ev_x.append(x)
                                ev_y.append(y)
                                ev_p.append(-1)
                                last = ts
                        l_ref = l_ref - kf * cp

    chunks = []
    if ev_t:
        chunks.append((np.array(ev_t), np.array(ev_x), np.array(ev_y), np.array(ev_p)))
    chunks.extend(_noise_events(params, seed, w, h, times[0], times[-1] - times[0]))
    return _finalize(chunks, w, h)


def streams_equal(a: EventStream, b: EventStream) -> bool:
    return (
        a.width == b.width
        and a.height == b.height
        and np.array_equal(a.t, b.t)
        and np.array_equal(a.x, b.x)
        and np.array_equal(a.y, b.y)
        and np.array_equal(a.p, b.p)
    )


_BINARY_DTYPE = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


def write_events(stream: EventStream, path, format: str = "binary"):
    if format == "text":
        with open(path, "w") as f:
            for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
                f.write(f"{t:.9f} {x} {y} {p}\n")
    elif format == "binary":
        rec = np.empty(len(stream), dtype=_BINARY_DTYPE)
        rec["t"] = stream.t
        rec["x"] = stream.x
        rec["y"] = stream.y
        rec["p"] = stream.p
        with open(path, "wb") as f:
            f.write(rec.tobytes())
    else:
        raise ParamError(f"unknown event format {format!r}")


def read_events(path, format: str = "binary", width: int = 346, height: int = 260) -> EventStream:
    if format == "text":
        ts, xs, ys, ps = [], [], [], []
        with open(path) as f:
            for ln, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise ParseError("expected 4 fields per event", line=ln)
                try:
                    t = float(parts[0])
                    x = int(parts[1])
                    y = int(parts[2])
                    p = int(parts[3])
                except ValueError:
                    raise ParseError("malformed event fields", line=ln) from None
                if not math.isfinite(t) or t < 0:
                    raise ParseError("bad timestamp", line=ln)
                if x < 0 or x >= width or y < 0 or y >= height:
                    raise ParseError("coordinate out of range", line=ln)
                if p not in (1, -1):
                    raise ParseError("polarity must be 1 or -1", line=ln)
                ts.append(t)
                xs.append(x)
                ys.append(y)
                ps.append(p)
        stream = EventStream(
            width,
            height,
            np.array(ts, dtype=np.float64),
            np.array(xs, dtype=np.uint16),
            np.array(ys, dtype=np.uint16),
            np.array(ps, dtype=np.int8),
        )
    elif format == "binary":
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % _BINARY_DTYPE.itemsize != 0:
            good = len(raw) - len(raw) % _BINARY_DTYPE.itemsize
            raise ParseError("truncated event record", offset=good)
        rec = np.frombuffer(raw, dtype=_BINARY_DTYPE)
        stream = EventStream(
            width,
            height,
            rec["t"].astype(np.float64),
            rec["x"].astype(np.uint16),
            rec["y"].astype(np.uint16),
            rec["p"].astype(np.int8),
        )
        bad = np.nonzero(~((stream.p == 1) | (stream.p == -1)))[0]
        if bad.size:
            raise ParseError("polarity must be 1 or -1", offset=int(bad[0]) * _BINARY_DTYPE.itemsize)
        oob = np.nonzero((stream.x >= width) | (stream.y >= height))[0]
        if oob.size:
            raise ParseError("coordinate out of range", offset=int(oob[0]) * _BINARY_DTYPE.itemsize)
    else:
        raise ParamError(f"unknown event format {format!r}")
    stream.validate()
    return stream


def write_event_params(params: EventModelParams, seed: int, path):
    """Sidecar file documenting the event model configuration."""
    doc = params.to_dict()
    doc["seed"] = int(seed)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def read_event_params(path):
    with open(path) as f:
        doc = json.load(f)
    seed = doc.pop("seed")
    return EventModelParams.from_dict(doc), seed
