"""Dataset orchestration: parameter sweeps, sample generation, labeling.

A SweepSpec describes which scenario parameters vary; every sample then
runs dynamics -> rendering -> event synthesis and lands in its own
directory (written atomically via a temp dir so interrupted runs can
resume).  A manifest indexes every file the pipeline produced, and all
randomness fans out from one master seed, so any parallelism degree
produces byte-identical outputs.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import multiprocessing
import os
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InternalError, IoError, NumericalDivergence, SpecError
from .evsim import EventModelParams, frames_to_events, read_events, write_events
from .geometry import read_pose_log, theta_series, write_pose_log
from .labelprep import (
    LABEL_EXCLUDED,
    LABEL_NONSLIP,
    LABEL_SLIP,
    LabelThresholds,
    balance,
    read_subsample,
    slice_and_label,
    split,
    write_subsample,
)
from .render import make_camera, render_frame, scene_from_params, write_pgm
from .slipdyn import ScenarioParams, build_trajectory, simulate_slip
from . import learn

TEXTURE_POOL_RATIO = 0.8


def derive_seed(master: int, index: int) -> int:
    """Counter-based per-sample seed; adding samples never shifts existing ones."""
    digest = hashlib.sha256(f"{master}:{index}".encode()).digest()
    return int.from_bytes(digest[:6], "big")


@dataclass
class SweepSpec:
    """What varies across a dataset and how.

    Each entry of `params` is keyed by a ScenarioParams field name and holds
    either {"values": [...]} (exhaustive mode), {"range": [lo, hi]} for a
    uniform draw, or {"choices": [...]} for a seeded pick (random mode).
    For texture_ids, choices are single texture numbers and every sample
    draws three of them.
    """

    mode: str = "exhaustive"
    params: dict = field(default_factory=dict)
    n_samples: int = 0
    n_test: int = 0
    split: bool = False
    seed: int = 0

    def validate(self):
        if self.mode not in ("exhaustive", "random"):
            raise SpecError(f"unknown sweep mode {self.mode!r}")
        if not self.params:
            raise SpecError("sweep has no parameters")
        base_fields = set(ScenarioParams().to_dict())
        for name, entry in self.params.items():
            if name == "seed" or name not in base_fields:
                raise SpecError(f"unknown scenario parameter {name!r}")
            if self.mode == "exhaustive":
                if "values" not in entry or len(entry["values"]) == 0:
                    raise SpecError(f"parameter {name!r} needs a non-empty values list")
            else:
                if "range" in entry:
                    lo, hi = entry["range"]
                    if not lo < hi:
                        raise SpecError(f"parameter {name!r} has an empty range")
                elif "choices" in entry:
                    if len(entry["choices"]) == 0:
                        raise SpecError(f"parameter {name!r} has no choices")
                    if self.split and self.n_test > 0 and len(set(entry["choices"])) < 2:
                        raise SpecError(
                            f"parameter {name!r} cannot be split into disjoint pools"
                        )
                else:
                    raise SpecError(f"parameter {name!r} needs a range or choices")
        if self.mode == "random":
            if self.n_samples < 1:
                raise SpecError("random mode needs n_samples >= 1")
            if self.n_test > 0 and not self.split:
                raise SpecError("n_test requires the split flag")

    def size(self) -> int:
        self.validate()
        if self.mode == "exhaustive":
            n = 1
            for entry in self.params.values():
                n *= len(entry["values"])
            return n
        return self.n_samples + (self.n_test if self.split else 0)

    def to_dict(self):
        return {
            "mode": self.mode,
            "params": self.params,
            "n_samples": self.n_samples,
            "n_test": self.n_test,
            "split": self.split,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _apply(base: ScenarioParams, assignment: dict) -> ScenarioParams:
    kw = dict(assignment)
    if "texture_ids" in kw:
        kw["texture_ids"] = tuple(int(t) for t in kw["texture_ids"])
    p = replace(base, **kw)
    p.validate()
    return p


def _split_pool(values, rng):
    """Disjoint train/test pools at the 80:20 ratio, seeded shuffle."""
    vals = list(values)
    order = rng.permutation(len(vals))
    n_train = int(round(TEXTURE_POOL_RATIO * len(vals)))
    n_train = min(max(n_train, 1), len(vals) - 1)
    train = [vals[i] for i in order[:n_train]]
    test = [vals[i] for i in order[n_train:]]
    return train, test


def _draw(name, entry, pool, rng):
    if "range" in entry:
        lo, hi = entry["range"]
        return float(rng.uniform(lo, hi))
    if name == "texture_ids":
        return tuple(pool[int(rng.integers(0, len(pool)))] for _ in range(3))
    return pool[int(rng.integers(0, len(pool)))]


def _collect_values(assignment):
    """Flatten an assignment into per-parameter value sets for disjointness."""
    out = {}
    for name, v in assignment.items():
        out[name] = set(v) if isinstance(v, tuple) else {v}
    return out


def gen_params(spec: SweepSpec) -> list[ScenarioParams]:
    """Deterministic parameter sets; train samples first, then test samples."""
    spec.validate()
    base = ScenarioParams()
    if spec.mode == "exhaustive":
        names = list(spec.params)
        out = []
        for combo in itertools.product(*(spec.params[n]["values"] for n in names)):
            out.append(_apply(base, dict(zip(names, combo))))
        return out

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 404]))
    pools = {}
    for name, entry in spec.params.items():
        if "choices" in entry:
            if spec.split and spec.n_test > 0:
                pools[name] = _split_pool(entry["choices"], rng)
            else:
                pools[name] = (list(entry["choices"]), list(entry["choices"]))
    assignments = []
    seen = {name: set() for name in spec.params}
    for i in range(spec.n_samples + (spec.n_test if spec.split else 0)):
        is_test = i >= spec.n_samples
        assignment = {}
        for name, entry in spec.params.items():
            pool = pools.get(name, (None, None))[1 if is_test else 0]
            value = _draw(name, entry, pool, rng)
            if is_test and "range" in entry:
                while value in seen[name]:
                    value = _draw(name, entry, pool, rng)
            assignment[name] = value
        if not is_test:
            for name, vals in _collect_values(assignment).items():
                seen[name] |= vals
        assignments.append(assignment)
    return [_apply(base, a) for a in assignments]


def sample_subsets(spec: SweepSpec) -> list[str]:
    """Role of each generated sample, aligned with gen_params order."""
    n = spec.size()
    if spec.mode == "random" and spec.split:
        return ["train"] * spec.n_samples + ["test"] * spec.n_test
    return ["train"] * n


def simple_set_spec(seed: int = 0) -> SweepSpec:
    """32 samples from the extremes of mass, both grip offsets, friction,
    and two texture assignments.  Light centered grips never break loose,
    heavy offset grips always do."""
    return SweepSpec(
        mode="exhaustive",
        params={
            "cuboid_mass": {"values": [0.1, 3.0]},
            "grip_offset_horizontal": {"values": [0.0, 0.048]},
            "grip_offset_vertical": {"values": [0.005, 0.02]},
            "friction_torque_max": {"values": [0.08, 0.12]},
            "texture_ids": {"values": [[0, 9, 18], [27, 36, 45]]},
            "cuboid_width": {"values": [0.12]},
        },
        seed=seed,
    )


def table_spec(seed: int = 0) -> SweepSpec:
    """Exhaustive shape (2,2,2,2,2,1,1,3,2): 192 parameter sets."""
    return SweepSpec(
        mode="exhaustive",
        params={
            "cuboid_mass": {"values": [0.1, 3.0]},
            "cuboid_width": {"values": [0.1, 0.12]},
            "grip_offset_horizontal": {"values": [0.0, 0.04]},
            "grip_offset_vertical": {"values": [0.005, 0.02]},
            "friction_torque_max": {"values": [0.08, 0.12]},
            "light_intensity": {"values": [0.8]},
            "background_brightness": {"values": [0.5]},
            "texture_ids": {"values": [[0, 9, 18], [27, 36, 45], [5, 14, 23]]},
            "light_elevation": {"values": [0.7, 1.2]},
        },
        seed=seed,
    )


def complex_set_spec(n_train: int = 60, n_test: int = 12, seed: int = 0) -> SweepSpec:
    """Randomized analogue with disjoint train/test values per parameter."""
    return SweepSpec(
        mode="random",
        params={
            "cuboid_mass": {"range": [0.1, 3.0]},
            "cuboid_width": {"range": [0.08, 0.16]},
            "cuboid_height": {"range": [0.08, 0.12]},
            "grip_offset_horizontal": {"range": [-0.04, 0.04]},
            "grip_offset_vertical": {"range": [0.0, 0.03]},
            "friction_torque_max": {"range": [0.05, 0.15]},
            "light_azimuth": {"range": [0.0, 6.28]},
            "light_elevation": {"range": [0.2, 1.4]},
            "light_intensity": {"range": [0.5, 1.0]},
            "background_brightness": {"range": [0.2, 0.8]},
            "texture_ids": {"choices": list(range(48))},
        },
        n_samples=n_train,
        n_test=n_test,
        split=True,
        seed=seed,
    )


def default_event_params() -> EventModelParams:
    return EventModelParams(
        contrast_threshold=0.2,
        threshold_sigma=0.03,
        refractory=0.0005,
        leak_rate=0.1,
        shot_noise_rate=1.0,
        upsample_factor=10,
    )


@dataclass
class SampleRecord:
    sample_id: str
    seed: int
    subset: str
    status: str  # ok | diverged | failed
    params: dict
    files: list
    n_events: int = 0
    max_theta_deg: float = 0.0
    error: str = ""

    def to_dict(self):
        return {
            "sample_id": self.sample_id,
            "seed": self.seed,
            "subset": self.subset,
            "status": self.status,
            "params": self.params,
            "files": self.files,
            "n_events": self.n_events,
            "max_theta_deg": self.max_theta_deg,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Manifest:
    sweep: dict
    event_model: dict
    records: list = field(default_factory=list)

    META_FILES = ("manifest.json", "config.json")

    def ok_records(self):
        return [r for r in self.records if r.status == "ok"]

    def validate(self):
        ids = [r.sample_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise InternalError("manifest sample ids are not unique")

    def to_dict(self):
        return {
            "version": 1,
            "sweep": self.sweep,
            "event_model": self.event_model,
            "records": [r.to_dict() for r in self.records],
        }

    def save(self, path):
        self.validate()
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            d = json.load(f)
        return cls(
            sweep=d["sweep"],
            event_model=d["event_model"],
            records=[SampleRecord.from_dict(r) for r in d["records"]],
        )

    def verify_complete_index(self, root):
        """Every file under root is referenced exactly once, and vice versa."""
        root = Path(root)
        on_disk = {str(p.relative_to(root)) for p in root.rglob("*") if p.is_file()}
        referenced = set(self.META_FILES)
        for r in self.records:
            for name in r.files:
                rel = f"{r.sample_id}/{name}"
                if rel in referenced:
                    raise InternalError(f"{rel} referenced twice in the manifest")
                referenced.add(rel)
        if on_disk != referenced:
            extra = sorted(on_disk - referenced)[:5]
            missing = sorted(referenced - on_disk)[:5]
            raise InternalError(
                f"manifest incomplete: unreferenced files {extra}, missing files {missing}"
            )


def _run_one(args):
    """Generate one sample into root/sample_id via a temp dir rename."""
    (root, sid, params_dict, seed, subset, ep_dict, dump, durations) = args
    root = Path(root)
    params = ScenarioParams.from_dict(params_dict)
    params = replace(params, seed=seed)
    ep = EventModelParams.from_dict(ep_dict)
    tmp = root / f".tmp-{sid}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    record = SampleRecord(
        sample_id=sid,
        seed=seed,
        subset=subset,
        status="failed",
        params=params.to_dict(),
        files=["record.json", "params.json"],
    )
    try:
        with open(tmp / "params.json", "w") as f:
            json.dump(params.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")
        phases = build_trajectory(params, durations)
        log = simulate_slip(params, phases)
        theta_deg = np.degrees(theta_series(log))
        scene = scene_from_params(params)
        camera = make_camera()
        frame_files = []

        def frames():
            for entry in log:
                frame = render_frame(scene, camera, entry.gripper, entry.cube, entry.t)
                if dump:
                    name = f"frames/{entry.index:04d}.pgm"
                    (tmp / "frames").mkdir(exist_ok=True)
                    write_pgm(frame, tmp / name)
                    frame_files.append(name)
                yield frame

        stream = frames_to_events(frames(), ep, seed=seed)
        write_pose_log(log, tmp / "poses.txt")
        write_events(stream, tmp / "events.bin", format="binary")
        record.status = "ok"
        record.n_events = len(stream)
        record.max_theta_deg = float(theta_deg.max())
        record.files += ["poses.txt", "events.bin"] + frame_files
    except NumericalDivergence as e:
        record.status = "diverged"
        record.error = str(e)
        record.files = ["record.json", "params.json"]
    except Exception as e:  # isolate the sample, keep the run going
        record.status = "failed"
        record.error = f"{type(e).__name__}: {e}"
        record.files = ["record.json", "params.json"]
    for stale in tmp.iterdir():
        rel = str(stale.relative_to(tmp))
        if stale.is_file() and rel not in record.files and not rel.startswith("frames/"):
            stale.unlink()
    with open(tmp / "record.json", "w") as f:
        json.dump(record.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    dst = root / sid
    if dst.exists():
        shutil.rmtree(dst)
    os.replace(tmp, dst)
    return record.to_dict()


def run_dataset(
    spec: SweepSpec,
    out_dir,
    event_params: EventModelParams | None = None,
    parallelism: int = 1,
    resume: bool = False,
    dump_frames: bool = False,
    phase_durations: dict | None = None,
) -> Manifest:
    """Generate every sample of a sweep into out_dir and index it."""
    if parallelism < 1:
        raise SpecError("parallelism must be >= 1")
    ep = event_params if event_params is not None else default_event_params()
    ep.validate()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise IoError(f"output directory {out_dir} is not writable: {e}") from e
    for stale in root.glob(".tmp-*"):
        shutil.rmtree(stale)

    all_params = gen_params(spec)
    subsets = sample_subsets(spec)
    with open(root / "config.json", "w") as f:
        json.dump(
            {"version": 1, "sweep": spec.to_dict(), "event_model": ep.to_dict()},
            f,
            indent=1,
            sort_keys=True,
        )
        f.write("\n")

    records = {}
    jobs = []
    for i, params in enumerate(all_params):
        sid = f"s{i:04d}"
        seed = derive_seed(spec.seed, i)
        marker = root / sid / "record.json"
        if resume and marker.exists():
            with open(marker) as f:
                records[sid] = SampleRecord.from_dict(json.load(f))
            continue
        jobs.append(
            (str(root), sid, params.to_dict(), seed, subsets[i], ep.to_dict(),
             dump_frames, phase_durations)
        )

    if jobs:
        if parallelism == 1:
            results = [_run_one(j) for j in jobs]
        else:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(parallelism) as pool:
                results = pool.map(_run_one, jobs)
        for d in results:
            records[d["sample_id"]] = SampleRecord.from_dict(d)

    manifest = Manifest(
        sweep=spec.to_dict(),
        event_model=ep.to_dict(),
        records=[records[sid] for sid in sorted(records)],
    )
    manifest.save(root / "manifest.json")
    manifest.verify_complete_index(root)
    return manifest


def _sample_subsamples(root, rec, thresholds, stat):
    stream = read_events(root / rec.sample_id / "events.bin", format="binary")
    log = read_pose_log(root / rec.sample_id / "poses.txt")
    theta_deg = np.degrees(theta_series(log))
    return slice_and_label(stream, theta_deg, thresholds, sample_id=rec.sample_id, stat=stat)


def run_labelprep(
    dataset_dir,
    out_dir,
    thresholds: LabelThresholds | None = None,
    bins: int = 150,
    seed: int = 0,
    stat: str = "range",
) -> dict:
    """Window, label, balance, and split a generated dataset.

    Windows from train-subset samples get balanced and split 80:20 into
    train/val; windows from test-subset samples are balanced into the test
    directory.  Returns (and writes) the summary counts."""
    thresholds = thresholds if thresholds is not None else LabelThresholds()
    root = Path(dataset_dir)
    manifest = Manifest.load(root / "manifest.json")
    ok = manifest.ok_records()
    if not ok:
        raise SpecError("dataset has no ok samples to label")
    train_subs, test_subs = [], []
    counts = {LABEL_SLIP: 0, LABEL_NONSLIP: 0, LABEL_EXCLUDED: 0}
    for rec in ok:
        subs = _sample_subsamples(root, rec, thresholds, stat)
        for s in subs:
            counts[s.label] += 1
        (test_subs if rec.subset == "test" else train_subs).extend(subs)

    ds = split(balance(train_subs, seed), seed)
    out = {"train": ds.train, "val": ds.val, "test": []}
    if test_subs:
        out["test"] = balance(test_subs, seed)

    out_root = Path(out_dir)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"label output directory {out_dir} is not writable: {e}") from e
    for name, subs in out.items():
        d = out_root / name
        if d.exists():
            shutil.rmtree(d)
        d.mkdir()
        for s in subs:
            write_subsample(s, d / f"{s.sample_id}_{s.index:04d}.sub")
    summary = {
        "bins": bins,
        "thresholds": {"slip": thresholds.theta_slip, "nonslip": thresholds.theta_nonslip},
        "windows": {
            "slip": counts[LABEL_SLIP],
            "nonslip": counts[LABEL_NONSLIP],
            "excluded": counts[LABEL_EXCLUDED],
        },
        "train": len(out["train"]),
        "val": len(out["val"]),
        "test": len(out["test"]),
    }
    with open(out_root / "summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    return summary


def load_featuresets(label_dir) -> dict:
    """Pooled FeatureSets for each split directory under label_dir."""
    root = Path(label_dir)
    with open(root / "summary.json") as f:
        bins = json.load(f)["bins"]
    out = {}
    for name in ("train", "val", "test"):
        d = root / name
        if not d.is_dir():
            continue
        subs = [read_subsample(p) for p in sorted(d.glob("*.sub"))]
        if subs:
            out[name] = learn.features_from_subsamples(subs, bins)
    return out


def run_experiment(kind, label_dir, space, n_runs, seed, out_dir=None, epochs=20):
    """Sweep a model on a labeled dataset; evaluate the winner on test.

    Returns (records, best_record, best_model); best_record.test_accuracy is
    filled in when a test split exists."""
    sets = load_featuresets(label_dir)
    records, best, model = learn.sweep(
        kind, sets["train"], sets["val"], space, n_runs, seed, out_dir=out_dir, epochs=epochs
    )
    if best is not None and model is not None and "test" in sets:
        acc, _ = learn.evaluate(model, sets["test"])
        best.test_accuracy = acc
        if out_dir is not None:
            best.save(Path(out_dir) / f"{kind}_best.json")
    return records, best, model
