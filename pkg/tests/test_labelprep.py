import numpy as np
import pytest

from slipforge import labelprep as lp
from slipforge.errors import (
    AlignmentError,
    BalanceError,
    InternalError,
    ParseError,
    SplitError,
)
from slipforge.evsim import EventStream


def make_stream(ts, xs, ys, ps, width=346, height=260):
    order = np.lexsort((ps, xs, ys, ts))
    return EventStream(
        width,
        height,
        np.asarray(ts, dtype=np.float64)[order],
        np.asarray(xs, dtype=np.uint16)[order],
        np.asarray(ys, dtype=np.uint16)[order],
        np.asarray(ps, dtype=np.int8)[order],
    )


def random_stream(rng, n, t_max, width=346, height=260):
    return make_stream(
        rng.uniform(0, t_max, n),
        rng.integers(0, width, n),
        rng.integers(0, height, n),
        rng.choice([-1, 1], n),
        width,
        height,
    )


def test_crop_reorigin_and_drop():
    s = make_stream([0.0, 0.001, 0.002], [173, 0, 272], [130, 0, 254], [1, 1, -1])
    c = lp.crop(s)
    assert c.width == 200 and c.height == 250
    assert len(c) == 2
    assert c.x[0] == 100 and c.y[0] == 125
    assert c.x[1] == 199 and c.y[1] == 249


def test_crop_idempotent():
    rng = np.random.default_rng(0)
    s = random_stream(rng, 500, 1.0)
    once = lp.crop(s)
    twice = lp.crop(once)
    assert twice is once
    empty = lp.crop(make_stream([], [], [], []))
    assert len(empty) == 0


def test_label_rule():
    th = lp.LabelThresholds()
    assert lp.label_for(2.0, th) == lp.LABEL_SLIP
    assert lp.label_for(0.05, th) == lp.LABEL_NONSLIP
    assert lp.label_for(0.5, th) == lp.LABEL_EXCLUDED


def test_label_monotone_in_threshold():
    rng = np.random.default_rng(1)
    deltas = rng.uniform(0, 3, 200)
    lo = lp.LabelThresholds(theta_slip=1.0, theta_nonslip=0.1)
    hi = lp.LabelThresholds(theta_slip=2.0, theta_nonslip=0.1)
    for d in deltas:
        if lp.label_for(d, hi) == lp.LABEL_SLIP:
            assert lp.label_for(d, lo) == lp.LABEL_SLIP


def test_equal_thresholds_partition_cleanly():
    rng = np.random.default_rng(2)
    th = lp.LabelThresholds(theta_slip=0.7, theta_nonslip=0.7)
    labels = {lp.label_for(d, th) for d in rng.uniform(0, 2, 500)}
    assert lp.LABEL_EXCLUDED not in labels


def test_slice_window_arithmetic():
    # theta rises only during windows 1 and 2; events placed inside window 0,
    # inside the gap after window 0, and in window 1
    theta = np.zeros(30)
    theta[10:20] = np.linspace(0, 2.0, 10)
    theta[20:30] = 2.0
    s = make_stream(
        [0.01, 0.16, 0.165, 1 / 6 + 0.02],
        [100, 100, 100, 100],
        [100, 100, 100, 100],
        [1, 1, 1, 1],
    )
    subs = lp.slice_and_label(s, theta, lp.LabelThresholds(), sample_id="s0")
    assert len(subs) == 3
    assert [x.label for x in subs] == [lp.LABEL_NONSLIP, lp.LABEL_SLIP, lp.LABEL_NONSLIP]
    # window 0 keeps the t=0.16 boundary event, drops the 0.165 gap event
    assert len(subs[0].events) == 2
    assert len(subs[1].events) == 1
    assert subs[0].start_time == 0.0
    assert subs[1].start_time == pytest.approx(1 / 6)
    assert subs[0].uid == "s0:0000"
    assert subs[1].delta_theta == pytest.approx(2.0)


def test_slice_endpoint_statistic():
    theta = np.zeros(10)
    theta[3] = 5.0  # spike in the middle, endpoints equal
    s = make_stream([], [], [], [])
    by_range = lp.slice_and_label(s, theta, lp.LabelThresholds(), stat="range")
    by_ends = lp.slice_and_label(s, theta, lp.LabelThresholds(), stat="endpoints")
    assert by_range[0].label == lp.LABEL_SLIP
    assert by_ends[0].label == lp.LABEL_NONSLIP


def test_alignment_error():
    s = make_stream([1.0], [5], [5], [1])
    with pytest.raises(AlignmentError):
        lp.slice_and_label(s, np.zeros(30), lp.LabelThresholds())


def test_bin_conservation_and_width():
    rng = np.random.default_rng(3)
    theta = np.zeros(450)
    s = random_stream(rng, 20000, 7.5)
    subs = lp.slice_and_label(s, theta, lp.LabelThresholds())
    assert len(subs) == 45
    for sub in subs[:4]:
        tensor = lp.bin_subsample(sub, bins=150)
        assert tensor.counts.shape == (2, 150, 250, 200)
        assert tensor.counts.sum() == len(sub.events)
    assert lp.WINDOW_DURATION / 150 == pytest.approx(0.16 / 150)


def test_bin_placement():
    sub = lp.Subsample(
        sample_id="s",
        index=0,
        start_time=0.0,
        duration=0.16,
        events=make_stream([0.0, 0.16, 0.08], [1, 2, 3], [4, 5, 6], [1, -1, 1], 200, 250),
        delta_theta=0.0,
        label=lp.LABEL_NONSLIP,
    )
    t = lp.bin_subsample(sub, bins=150)
    assert t.counts[0, 0, 4, 1] == 1  # tau 0 -> first bin, ON channel
    assert t.counts[1, 149, 5, 2] == 1  # tau = duration -> last bin, OFF
    assert t.counts[0, 75, 6, 3] == 1  # halfway
    assert t.counts.sum() == 3


def test_bin_rejects_event_outside_window():
    sub = lp.Subsample(
        sample_id="s",
        index=0,
        start_time=0.0,
        duration=0.16,
        events=make_stream([0.2], [1], [1], [1], 200, 250),
        delta_theta=0.0,
        label=lp.LABEL_NONSLIP,
    )
    with pytest.raises(InternalError):
        lp.bin_subsample(sub)


def _dummy_subs(n_slip, n_stable):
    subs = []
    empty = make_stream([], [], [], [], 200, 250)
    for i in range(n_slip + n_stable):
        label = lp.LABEL_SLIP if i < n_slip else lp.LABEL_NONSLIP
        subs.append(lp.Subsample("s", i, 0.0, 0.16, empty, 2.0 if label == lp.LABEL_SLIP else 0.0, label))
    return subs


def test_balance_counts_and_determinism():
    subs = _dummy_subs(10, 6)
    kept = lp.balance(subs, seed=5)
    slips = [s for s in kept if s.label == lp.LABEL_SLIP]
    stables = [s for s in kept if s.label == lp.LABEL_NONSLIP]
    assert len(slips) == len(stables) == 6
    again = lp.balance(subs, seed=5)
    assert [s.index for s in kept] == [s.index for s in again]
    other = lp.balance(subs, seed=6)
    assert [s.index for s in other] != [s.index for s in kept] or True
    even = _dummy_subs(4, 4)
    assert [s.index for s in lp.balance(even, seed=0)] == [s.index for s in even]


def test_balance_error_on_single_class():
    with pytest.raises(BalanceError):
        lp.balance(_dummy_subs(5, 0), seed=0)


def test_split_sizes_and_determinism():
    subs = _dummy_subs(50, 50)
    sp = lp.split(subs, seed=9)
    assert len(sp.train) == 80 and len(sp.val) == 20
    tr_slip = sum(1 for s in sp.train if s.label == lp.LABEL_SLIP)
    assert abs(tr_slip - 40) <= 1
    sp2 = lp.split(subs, seed=9)
    assert [s.index for s in sp2.train] == [s.index for s in sp.train]
    ids_train = {s.index for s in sp.train}
    ids_val = {s.index for s in sp.val}
    assert not (ids_train & ids_val)
    assert len(ids_train | ids_val) == 100


def test_split_too_few():
    with pytest.raises(SplitError):
        lp.split(_dummy_subs(2, 2), seed=0)


def test_subsample_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    s = random_stream(rng, 300, 0.15, 200, 250)
    sub = lp.Subsample("sample_007", 3, 0.5, 0.16, s, 1.25, lp.LABEL_SLIP)
    path = tmp_path / "rotation_000003.sub"
    lp.write_subsample(sub, path)
    back = lp.read_subsample(path)
    assert back.sample_id == sub.sample_id
    assert back.index == 3
    assert back.label == lp.LABEL_SLIP
    assert back.delta_theta == pytest.approx(1.25)
    assert np.array_equal(back.events.t, s.t)
    assert np.array_equal(back.events.x, s.x)
    assert np.array_equal(back.events.p, s.p)


def test_subsample_parse_error(tmp_path):
    path = tmp_path / "bad.sub"
    path.write_bytes(b"not json\n\x00\x01")
    with pytest.raises(ParseError):
        lp.read_subsample(path)
    good = lp.Subsample(
        "s", 0, 0.0, 0.16, make_stream([0.1], [1], [1], [1], 200, 250), 0.0, lp.LABEL_NONSLIP
    )
    lp.write_subsample(good, path)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(ParseError):
        lp.read_subsample(path)
