"""Event stream slicing, labeling, cropping, binning, balance and split.

Turns one simulated sample (event stream + per-frame rotation-difference
series) into fixed 0.16 s windows labeled slip / nonslip / excluded, cropped
to the central 200x250 region and binned into polarity-time-space count
tensors that the classifiers consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignmentError,
    BalanceError,
    InternalError,
    ParamError,
    ParseError,
    SplitError,
)
from .evsim import EventStream, _BINARY_DTYPE

FRAME_RATE = 60.0
FRAMES_PER_WINDOW = 10
WINDOW_DURATION = 0.16
WINDOW_STRIDE = FRAMES_PER_WINDOW / FRAME_RATE

CROP_X0 = 73
CROP_Y0 = 5
CROP_WIDTH = 200
CROP_HEIGHT = 250

LABEL_SLIP = "slip"
LABEL_NONSLIP = "nonslip"
LABEL_EXCLUDED = "excluded"

# filename tokens for the two classes
CLASS_TOKEN = {LABEL_SLIP: "rotation", LABEL_NONSLIP: "stable"}


@dataclass
class LabelThresholds:
    theta_slip: float = 1.0
    theta_nonslip: float = 0.1

    def validate(self):
        if not self.theta_nonslip > 0:
            raise ParamError("theta_nonslip must be positive")
        if self.theta_slip < self.theta_nonslip:
            raise ParamError("theta_slip must be >= theta_nonslip")


@dataclass
class Subsample:
    sample_id: str
    index: int
    start_time: float
    duration: float
    events: EventStream
    delta_theta: float
    label: str

    @property
    def uid(self):
        return f"{self.sample_id}:{self.index:04d}"


@dataclass
class BinnedTensor:
    bins: int
    counts: np.ndarray  # (2, bins, CROP_HEIGHT, CROP_WIDTH)
    label: str = LABEL_EXCLUDED
    meta: dict = field(default_factory=dict)


def crop(stream: EventStream) -> EventStream:
    """Central 200x250 cut-out with re-origined coordinates.

    Streams already living on the crop geometry pass through unchanged,
    which makes the operation idempotent."""
    if (stream.width, stream.height) == (CROP_WIDTH, CROP_HEIGHT):
        return stream
    x = stream.x.astype(np.int64)
    y = stream.y.astype(np.int64)
    keep = (
        (x >= CROP_X0)
        & (x < CROP_X0 + CROP_WIDTH)
        & (y >= CROP_Y0)
        & (y < CROP_Y0 + CROP_HEIGHT)
    )
    return EventStream(
        CROP_WIDTH,
        CROP_HEIGHT,
        stream.t[keep],
        (x[keep] - CROP_X0).astype(np.uint16),
        (y[keep] - CROP_Y0).astype(np.uint16),
        stream.p[keep],
    )


def label_for(delta_theta: float, thresholds: LabelThresholds) -> str:
    if delta_theta > thresholds.theta_slip:
        return LABEL_SLIP
    if delta_theta < thresholds.theta_nonslip:
        return LABEL_NONSLIP
    return LABEL_EXCLUDED


def slice_and_label(
    stream: EventStream,
    theta,
    thresholds: LabelThresholds,
    sample_id: str = "",
    stat: str = "range",
) -> list[Subsample]:
    """Cut the stream into consecutive 0.16 s windows, one per 10 frames.

    Windows start every 10 frame intervals; events in the remaining
    (1/6 - 0.16) s tail of each stride belong to no window.  delta_theta is
    the max-min of the window's 10 rotation-difference samples (degrees);
    `stat="endpoints"` uses |last - first| instead.
    """
    thresholds.validate()
    if stat not in ("range", "endpoints"):
        raise ParamError(f"unknown window statistic {stat!r}")
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1:
        raise AlignmentError("theta series must be 1-d")
    covered = theta.size / FRAME_RATE
    if len(stream) and stream.t[-1] > covered + 1e-9:
        raise AlignmentError(
            f"theta covers {covered:.4f} s but events extend to {stream.t[-1]:.4f} s"
        )
    out = []
    n_windows = theta.size // FRAMES_PER_WINDOW
    for wi in range(n_windows):
        start = wi * WINDOW_STRIDE
        stop = start + WINDOW_DURATION
        a = np.searchsorted(stream.t, start, side="left")
        b = np.searchsorted(stream.t, stop, side="right")
        window = EventStream(
            stream.width, stream.height, stream.t[a:b], stream.x[a:b], stream.y[a:b], stream.p[a:b]
        )
        th = theta[wi * FRAMES_PER_WINDOW : (wi + 1) * FRAMES_PER_WINDOW]
        if stat == "range":
            delta = float(th.max() - th.min())
        else:
            delta = float(abs(th[-1] - th[0]))
        out.append(
            Subsample(
                sample_id=sample_id,
                index=wi,
                start_time=start,
                duration=WINDOW_DURATION,
                events=crop(window),
                delta_theta=delta,
                label=label_for(delta, thresholds),
            )
        )
    return out


def bin_subsample(sub: Subsample, bins: int = 150) -> BinnedTensor:
    """Count events into (polarity, time bin, y, x); ON is channel 0.

    An event's offset tau = t - start lands in bin floor(tau*bins/duration);
    tau equal to the duration goes to the last bin."""
    if bins < 1:
        raise ParamError("bins must be >= 1")
    tau = sub.events.t - sub.start_time
    if tau.size and (tau.min() < 0 or tau.max() > sub.duration):
        raise InternalError("event outside its subsample window")
    counts = np.zeros((2, bins, CROP_HEIGHT, CROP_WIDTH), dtype=np.int64)
    if tau.size:
        b = np.floor(tau * bins / sub.duration).astype(np.int64)
        b = np.minimum(b, bins - 1)
        ch = (sub.events.p < 0).astype(np.int64)
        np.add.at(counts, (ch, b, sub.events.y.astype(np.int64), sub.events.x.astype(np.int64)), 1)
    return BinnedTensor(
        bins=bins,
        counts=counts,
        label=sub.label,
        meta={"sample_id": sub.sample_id, "index": sub.index, "delta_theta": sub.delta_theta},
    )


def balance(subs, seed: int):
    """Equalize class sizes by seeded removal from the larger class."""
    slips = [s for s in subs if s.label == LABEL_SLIP]
    stables = [s for s in subs if s.label == LABEL_NONSLIP]
    if not slips or not stables:
        raise BalanceError(
            f"cannot balance: {len(slips)} slip vs {len(stables)} nonslip windows"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    big, small = (slips, stables) if len(slips) > len(stables) else (stables, slips)
    keep_idx = set(rng.choice(len(big), size=len(small), replace=False).tolist())
    kept_big = [s for i, s in enumerate(big) if i in keep_idx]
    merged = {id(s) for s in kept_big} | {id(s) for s in small}
    return [s for s in subs if id(s) in merged]


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int


def split(subs, seed: int, ratio: float = 0.8) -> DatasetSplit:
    """Stratified seeded shuffle into train/val (class counts within one)."""
    if len(subs) < 5:
        raise SplitError(f"need at least 5 subsamples, got {len(subs)}")
    if not 0.0 < ratio < 1.0:
        raise ParamError("split ratio must be in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    train, val = [], []
    for label in (LABEL_SLIP, LABEL_NONSLIP):
        members = [s for s in subs if s.label == label]
        order = rng.permutation(len(members))
        n_train = int(round(ratio * len(members)))
        chosen = {int(i) for i in order[:n_train]}
        for i, s in enumerate(members):
            (train if i in chosen else val).append(s)
    return DatasetSplit(train=train, val=val, test=[], seed=seed)


def write_subsample(sub: Subsample, path):
    header = {
        "sample_id": sub.sample_id,
        "index": sub.index,
        "start_time": sub.start_time,
        "duration": sub.duration,
        "label": sub.label,
        "delta_theta": sub.delta_theta,
        "crop": {
            "x0": CROP_X0,
            "y0": CROP_Y0,
            "width": sub.events.width,
            "height": sub.events.height,
        },
        "n_events": int(len(sub.events)),
    }
    rec = np.empty(len(sub.events), dtype=_BINARY_DTYPE)
    rec["t"] = sub.events.t
    rec["x"] = sub.events.x
    rec["y"] = sub.events.y
    rec["p"] = sub.events.p
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(rec.tobytes())


def read_subsample(path) -> Subsample:
    with open(path, "rb") as f:
        head = f.readline()
        blob = f.read()
    try:
        header = json.loads(head.decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ParseError(f"bad subsample header in {path}", line=1) from None
    for key in ("sample_id", "index", "start_time", "duration", "label", "n_events", "crop"):
        if key not in header:
            raise ParseError(f"subsample header missing {key!r}", line=1)
    if len(blob) != header["n_events"] * _BINARY_DTYPE.itemsize:
        raise ParseError("subsample event payload truncated", offset=len(head) + len(blob))
    rec = np.frombuffer(blob, dtype=_BINARY_DTYPE)
    events = EventStream(
        header["crop"]["width"],
        header["crop"]["height"],
        rec["t"].astype(np.float64),
        rec["x"].astype(np.uint16),
        rec["y"].astype(np.uint16),
        rec["p"].astype(np.int8),
    )
    return Subsample(
        sample_id=header["sample_id"],
        index=header["index"],
        start_time=header["start_time"],
        duration=header["duration"],
        events=events,
        delta_theta=header["delta_theta"],
        label=header["label"],
    )
