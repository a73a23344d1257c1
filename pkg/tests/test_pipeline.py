import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from slipforge import cli, pipeline
from slipforge.errors import (
    BalanceError,
    InternalError,
    IoError,
    NumericalDivergence,
    SpecError,
)
from slipforge.evsim import EventModelParams, read_events
from slipforge.render import Frame, write_pgm

# 1.7 s trajectory: 102 frames, enough for 10 windows
SHORT_PHASES = {
    "approach": 0.1,
    "grasp": 0.1,
    "lift": 0.3,
    "tilt": 0.4,
    "untilt": 0.4,
    "place": 0.3,
    "release": 0.1,
}


def quick_event_params():
    return EventModelParams(
        contrast_threshold=0.2,
        threshold_sigma=0.0,
        refractory=0.0005,
        leak_rate=0.0,
        shot_noise_rate=0.0,
        upsample_factor=4,
    )


def tiny_spec(seed=0):
    # one stable light grip, one heavy grip that breaks loose during lift
    return pipeline.SweepSpec(
        mode="exhaustive",
        params={
            "cuboid_mass": {"values": [0.1, 3.0]},
            "cuboid_width": {"values": [0.12]},
            "grip_offset_horizontal": {"values": [0.048]},
        },
        seed=seed,
    )


def tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(Path(root).rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    manifest = pipeline.run_dataset(
        tiny_spec(),
        root,
        event_params=quick_event_params(),
        parallelism=1,
        phase_durations=SHORT_PHASES,
    )
    return root, manifest


@pytest.fixture(scope="module")
def tiny_labels(tiny_dataset, tmp_path_factory):
    root, _ = tiny_dataset
    out = tmp_path_factory.mktemp("labels")
    summary = pipeline.run_labelprep(root, out, seed=3)
    return out, summary


def test_derive_seed_stable_and_distinct():
    a = pipeline.derive_seed(7, 0)
    assert a == pipeline.derive_seed(7, 0)
    seeds = {pipeline.derive_seed(7, i) for i in range(200)}
    assert len(seeds) == 200
    assert all(0 <= s < 2**48 for s in seeds)
    assert pipeline.derive_seed(8, 0) != a


def test_table_spec_yields_192():
    spec = pipeline.table_spec()
    sets = pipeline.gen_params(spec)
    assert len(sets) == 192
    assert spec.size() == 192
    assert len({json.dumps(p.to_dict(), sort_keys=True) for p in sets}) == 192


def test_simple_set_spec_yields_32():
    sets = pipeline.gen_params(pipeline.simple_set_spec())
    assert len(sets) == 32
    masses = {p.cuboid_mass for p in sets}
    assert masses == {0.1, 3.0}


def test_exhaustive_order_is_lexicographic_and_stable():
    spec = pipeline.SweepSpec(
        mode="exhaustive",
        params={
            "cuboid_mass": {"values": [0.1, 0.2]},
            "grip_offset_vertical": {"values": [0.01, 0.02, 0.03]},
        },
    )
    sets = pipeline.gen_params(spec)
    assert [p.cuboid_mass for p in sets] == [0.1, 0.1, 0.1, 0.2, 0.2, 0.2]
    assert [p.grip_offset_vertical for p in sets] == [0.01, 0.02, 0.03] * 2
    again = pipeline.gen_params(spec)
    assert [p.to_dict() for p in again] == [p.to_dict() for p in sets]


def test_single_point_spec():
    spec = pipeline.SweepSpec(mode="exhaustive", params={"cuboid_mass": {"values": [0.5]}})
    sets = pipeline.gen_params(spec)
    assert len(sets) == 1
    assert sets[0].cuboid_mass == 0.5


def scan_disjoint(spec):
    sets = pipeline.gen_params(spec)
    subsets = pipeline.sample_subsets(spec)
    train_vals = {name: set() for name in spec.params}
    test_vals = {name: set() for name in spec.params}
    for p, subset in zip(sets, subsets):
        d = p.to_dict()
        for name in spec.params:
            v = d[name]
            vals = set(v) if isinstance(v, list) else {v}
            (test_vals if subset == "test" else train_vals)[name] |= vals
    return sets, subsets, train_vals, test_vals


def test_random_split_values_disjoint_per_parameter():
    spec = pipeline.complex_set_spec(n_train=10, n_test=2, seed=5)
    sets, subsets, train_vals, test_vals = scan_disjoint(spec)
    assert len(sets) == 12
    assert subsets == ["train"] * 10 + ["test"] * 2
    for name in spec.params:
        assert not (train_vals[name] & test_vals[name]), name
    lo, hi = spec.params["cuboid_mass"]["range"]
    assert all(lo <= p.cuboid_mass <= hi for p in sets)


def test_random_draws_are_seeded():
    a = pipeline.gen_params(pipeline.complex_set_spec(n_train=4, n_test=1, seed=9))
    b = pipeline.gen_params(pipeline.complex_set_spec(n_train=4, n_test=1, seed=9))
    c = pipeline.gen_params(pipeline.complex_set_spec(n_train=4, n_test=1, seed=10))
    assert [p.to_dict() for p in a] == [p.to_dict() for p in b]
    assert [p.to_dict() for p in a] != [p.to_dict() for p in c]


def test_spec_validation_errors():
    with pytest.raises(SpecError):
        pipeline.gen_params(pipeline.SweepSpec(mode="exhaustive", params={}))
    with pytest.raises(SpecError):
        pipeline.gen_params(
            pipeline.SweepSpec(mode="exhaustive", params={"cuboid_mass": {"values": []}})
        )
    with pytest.raises(SpecError):
        pipeline.gen_params(
            pipeline.SweepSpec(mode="exhaustive", params={"bogus": {"values": [1]}})
        )
    with pytest.raises(SpecError):
        pipeline.gen_params(
            pipeline.SweepSpec(mode="sideways", params={"cuboid_mass": {"values": [1.0]}})
        )
    with pytest.raises(SpecError):
        pipeline.gen_params(
            pipeline.SweepSpec(
                mode="random",
                params={"cuboid_mass": {"range": [0.5, 0.4]}},
                n_samples=2,
            )
        )
    with pytest.raises(SpecError):
        pipeline.gen_params(
            pipeline.SweepSpec(
                mode="random",
                params={"texture_ids": {"choices": [3]}},
                n_samples=2,
                n_test=1,
                split=True,
            )
        )
    # n_test without the split flag makes no sense
    with pytest.raises(SpecError):
        pipeline.SweepSpec(
            mode="random",
            params={"cuboid_mass": {"range": [0.1, 1.0]}},
            n_samples=2,
            n_test=1,
        ).validate()


def test_run_dataset_outputs_and_manifest(tiny_dataset):
    root, manifest = tiny_dataset
    assert [r.sample_id for r in manifest.records] == ["s0000", "s0001"]
    assert all(r.status == "ok" for r in manifest.records)
    for r in manifest.records:
        for name in r.files:
            assert (root / r.sample_id / name).is_file()
    light, heavy = manifest.records
    assert light.max_theta_deg == 0.0
    assert heavy.max_theta_deg > 1.0
    assert heavy.n_events > 0
    loaded = pipeline.Manifest.load(root / "manifest.json")
    assert loaded.to_dict() == manifest.to_dict()
    loaded.verify_complete_index(root)
    stream = read_events(root / "s0001" / "events.bin", format="binary")
    assert len(stream) == heavy.n_events
    config = json.loads((root / "config.json").read_text())
    assert config["sweep"]["mode"] == "exhaustive"


def test_complete_index_detects_drift(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    manifest = pipeline.Manifest.load(copy / "manifest.json")
    (copy / "stray.txt").write_text("boo")
    with pytest.raises(InternalError):
        manifest.verify_complete_index(copy)
    (copy / "stray.txt").unlink()
    (copy / "s0000" / "poses.txt").unlink()
    with pytest.raises(InternalError):
        manifest.verify_complete_index(copy)


def test_parallelism_degree_is_invisible(tmp_path):
    spec = tiny_spec(seed=2)
    a = tmp_path / "p1"
    b = tmp_path / "p2"
    pipeline.run_dataset(spec, a, event_params=quick_event_params(),
                         parallelism=1, phase_durations=SHORT_PHASES)
    pipeline.run_dataset(spec, b, event_params=quick_event_params(),
                         parallelism=2, phase_durations=SHORT_PHASES)
    ta, tb = tree_bytes(a), tree_bytes(b)
    assert sorted(ta) == sorted(tb)
    for name in ta:
        assert ta[name] == tb[name], name


def test_resume_skips_existing_samples(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    copy = tmp_path / "resume"
    shutil.copytree(root, copy)
    marker = b"do not touch"
    (copy / "s0000" / "events.bin").write_bytes(marker)
    shutil.rmtree(copy / "s0001")
    manifest = pipeline.run_dataset(
        tiny_spec(),
        copy,
        event_params=quick_event_params(),
        parallelism=1,
        resume=True,
        phase_durations=SHORT_PHASES,
    )
    assert (copy / "s0000" / "events.bin").read_bytes() == marker
    assert (copy / "s0001" / "events.bin").is_file()
    assert all(r.status == "ok" for r in manifest.records)
    manifest.verify_complete_index(copy)


def test_diverged_sample_is_isolated(tmp_path, monkeypatch):
    real = pipeline.simulate_slip

    def sometimes(params, phases=None, **kw):
        if params.cuboid_mass > 1.0:
            raise NumericalDivergence("synthetic blow-up")
        return real(params, phases, **kw)

    monkeypatch.setattr(pipeline, "simulate_slip", sometimes)
    manifest = pipeline.run_dataset(
        tiny_spec(),
        tmp_path / "ds",
        event_params=quick_event_params(),
        parallelism=1,
        phase_durations=SHORT_PHASES,
    )
    statuses = {r.sample_id: r.status for r in manifest.records}
    assert statuses == {"s0000": "ok", "s0001": "diverged"}
    diverged = manifest.records[1]
    assert "blow-up" in diverged.error
    assert diverged.files == ["record.json", "params.json"]
    manifest.verify_complete_index(tmp_path / "ds")


def test_failed_sample_is_isolated(tmp_path, monkeypatch):
    real = pipeline.simulate_slip

    def sometimes(params, phases=None, **kw):
        if params.cuboid_mass > 1.0:
            raise ValueError("synthetic crash")
        return real(params, phases, **kw)

    monkeypatch.setattr(pipeline, "simulate_slip", sometimes)
    manifest = pipeline.run_dataset(
        tiny_spec(),
        tmp_path / "ds",
        event_params=quick_event_params(),
        parallelism=1,
        phase_durations=SHORT_PHASES,
    )
    statuses = [r.status for r in manifest.records]
    assert statuses == ["ok", "failed"]
    assert "ValueError" in manifest.records[1].error
    manifest.verify_complete_index(tmp_path / "ds")


def test_unwritable_output_dir_raises(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        pipeline.run_dataset(tiny_spec(), blocker / "nested", parallelism=1)


def test_run_labelprep_balances_and_splits(tiny_labels):
    out, summary = tiny_labels
    w = summary["windows"]
    assert w["slip"] > 0 and w["nonslip"] > 0
    n_balanced = 2 * min(w["slip"], w["nonslip"])
    assert summary["train"] + summary["val"] == n_balanced
    assert summary["test"] == 0
    train_files = sorted((out / "train").glob("*.sub"))
    val_files = sorted((out / "val").glob("*.sub"))
    assert len(train_files) == summary["train"]
    assert len(val_files) == summary["val"]
    assert not set(f.name for f in train_files) & set(f.name for f in val_files)


def test_run_labelprep_deterministic(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    a = tmp_path / "la"
    b = tmp_path / "lb"
    pipeline.run_labelprep(root, a, seed=3)
    pipeline.run_labelprep(root, b, seed=3)
    assert tree_bytes(a) == tree_bytes(b)


def test_run_labelprep_propagates_balance_error(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    copy = tmp_path / "only-stable"
    shutil.copytree(root, copy)
    # drop the slipping sample so one class is empty
    manifest = pipeline.Manifest.load(copy / "manifest.json")
    manifest.records = [r for r in manifest.records if r.sample_id == "s0000"]
    manifest.save(copy / "manifest.json")
    shutil.rmtree(copy / "s0001")
    with pytest.raises(BalanceError):
        pipeline.run_labelprep(copy, tmp_path / "out", seed=0)


def test_load_featuresets_shapes(tiny_labels):
    out, summary = tiny_labels
    sets = pipeline.load_featuresets(out)
    assert set(sets) == {"train", "val"}
    fs = sets["train"]
    assert fs.features.shape == (summary["train"], 2 * 150 * 500 + 2 * 150)
    assert fs.bins == 150
    assert set(np.unique(fs.labels)) <= {0, 1}


def test_run_experiment_smoke(tiny_labels, tmp_path):
    out, _ = tiny_labels
    records, best, model = pipeline.run_experiment(
        "mlp", out, {"lr": [1e-3], "batch_size": [4]}, n_runs=2, seed=1,
        out_dir=str(tmp_path), epochs=3,
    )
    assert len(records) == 2
    assert best.test_accuracy is None
    assert model is not None
    assert (tmp_path / "mlp_run_000.json").is_file()


def test_cli_gen_params(tmp_path, capsys):
    out = tmp_path / "params.json"
    rc = cli.main(["gen-params", "--preset", "table", "--output", str(out)])
    assert rc == 0
    assert "192 parameter sets" in capsys.readouterr().out
    doc = json.loads(out.read_text())
    assert len(doc) == 192
    assert all(d["subset"] == "train" for d in doc)


def test_cli_events_from_pgm_frames(tmp_path, capsys):
    frames = tmp_path / "frames"
    frames.mkdir()
    rng = np.random.default_rng(0)
    base = rng.uniform(0.2, 0.8, (16, 16))
    for i in range(3):
        write_pgm(Frame(np.clip(base * (1 + 0.4 * i), 0, 1), i / 60), frames / f"{i:03d}.pgm")
    out = tmp_path / "ev.txt"
    rc = cli.main(
        ["events", "--frames", str(frames), "--output", str(out), "--format", "text"]
    )
    assert rc == 0
    assert "events from 3 frames" in capsys.readouterr().out
    assert out.read_text().count("\n") > 0


def test_cli_label_train_eval_chain(tiny_dataset, tmp_path, capsys):
    root, _ = tiny_dataset
    labels = tmp_path / "labels"
    rc = cli.main(["label", "--dataset", str(root), "--output", str(labels), "--seed", "3"])
    assert rc == 0
    assert "split train=" in capsys.readouterr().out
    run_dir = tmp_path / "run"
    rc = cli.main(
        ["train", "--dataset", str(labels), "--kind", "mlp", "--epochs", "3",
         "--batch-size", "4", "--output", str(run_dir)]
    )
    assert rc == 0
    assert (run_dir / "mlp.ckpt").is_file()
    rc = cli.main(
        ["eval", "--checkpoint", str(run_dir / "mlp.ckpt"), "--dataset", str(labels),
         "--split", "val"]
    )
    assert rc == 0
    assert "val accuracy" in capsys.readouterr().out


def test_cli_simulate_exit_codes(tmp_path, monkeypatch, capsys):
    spec_doc = {"sweep": tiny_spec().to_dict(), "event_model": quick_event_params().to_dict()}
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(spec_doc))
    real = pipeline.run_dataset

    def shortened(spec, out_dir, **kw):
        kw["phase_durations"] = SHORT_PHASES
        return real(spec, out_dir, **kw)

    monkeypatch.setattr(pipeline, "run_dataset", shortened)
    rc = cli.main(["simulate", "--config", str(cfg), "--output", str(tmp_path / "ds")])
    assert rc == 0
    assert "ok=2" in capsys.readouterr().out

    def broken(params, phases=None, **kw):
        raise NumericalDivergence("synthetic")

    monkeypatch.setattr(pipeline, "simulate_slip", broken)
    rc = cli.main(["simulate", "--config", str(cfg), "--output", str(tmp_path / "ds2")])
    assert rc == 1


def test_cli_reports_errors_cleanly(tmp_path, capsys):
    rc = cli.main(["label", "--dataset", str(tmp_path / "nope"), "--output", str(tmp_path / "o")])
    assert rc == 1
    assert "error" in capsys.readouterr().err
