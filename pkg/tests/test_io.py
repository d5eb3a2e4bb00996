import csv
import io
import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mind2mind.gan import HISTORY_COLUMNS, HistoryRecord, TrainHistory
from mind2mind.io.checkpoint import (
    FORMAT_VERSION,
    CheckpointError,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from mind2mind.io.config import ConfigError, ExperimentConfig, load_config, save_config
from mind2mind.io.datasets import (
    DatasetSpec,
    FormatError,
    load_dataset,
    load_idx,
    read_idx,
    ring_centres,
    synth_dataset,
    write_idx,
)
from mind2mind.io.report import (
    LOCK_NAME,
    OutputLocked,
    ReportBundle,
    RunResult,
    emit_report,
    history_csv,
    measure_csv,
    output_lock,
    parse_history_csv,
    read_measure_csv,
    read_report,
)

from conftest import random_measure, random_mlp

FIXTURES = Path(__file__).parent / "fixtures"
CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def oracle_idx(path):
    """Independent reader: struct header walk, then a plain byte list."""
    raw = Path(path).read_bytes()
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    assert zero == 0 and dtype == 0x08
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    return dims, list(raw[4 + 4 * ndim:])


# ------------------------------------------------------------------- IDX

def test_idx_fixture_matches_oracle():
    images = FIXTURES / "two_images.idx3-ubyte"
    dims, pixels = oracle_idx(images)
    m = load_idx(images)
    assert dims == (2, 28, 28)
    assert m.n == 2 and m.dim == 784
    want = np.array([p / 127.5 - 1.0 for p in pixels]).reshape(2, 784)
    np.testing.assert_array_equal(m.atoms, want)
    np.testing.assert_array_equal(m.weights, [0.5, 0.5])


def test_idx_endpoints_are_exact():
    m = load_idx(FIXTURES / "two_images.idx3-ubyte")
    assert m.atoms[0, 0] == -1.0 and m.atoms[0, -1] == 1.0
    assert m.atoms[1, 0] == 1.0 and m.atoms[1, -1] == -1.0
    assert m.atoms.min() >= -1.0 and m.atoms.max() <= 1.0


def test_idx_labels():
    m = load_idx(FIXTURES / "two_images.idx3-ubyte", FIXTURES / "two_labels.idx1-ubyte")
    assert m.dim == 784 + 8
    np.testing.assert_array_equal(m.atoms[:, 784:].argmax(axis=1), [3, 7])
    m10 = load_idx(FIXTURES / "two_images.idx3-ubyte", FIXTURES / "two_labels.idx1-ubyte", 10)
    assert m10.dim == 794
    with pytest.raises(FormatError):
        load_idx(FIXTURES / "two_images.idx3-ubyte", FIXTURES / "two_labels.idx1-ubyte", 5)


def test_idx_errors(tmp_path):
    raw = (FIXTURES / "two_images.idx3-ubyte").read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(b"\x00\x00\x09\x03" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_idx(bad)
    short = tmp_path / "short"
    short.write_bytes(raw[:-1])
    with pytest.raises(FormatError, match="payload"):
        load_idx(short)
    with pytest.raises(FormatError):
        load_idx(FIXTURES / "two_labels.idx1-ubyte")
    labels3 = tmp_path / "labels3"
    write_idx(labels3, np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(FormatError, match="labels for"):
        load_idx(FIXTURES / "two_images.idx3-ubyte", labels3)
    tiny = tmp_path / "tiny"
    tiny.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        read_idx(tiny)


def test_write_idx_roundtrip(tmp_path, rng):
    arr = rng.integers(0, 256, size=(3, 4, 5)).astype(np.uint8)
    write_idx(tmp_path / "x", arr)
    np.testing.assert_array_equal(read_idx(tmp_path / "x"), arr)
    assert oracle_idx(tmp_path / "x")[0] == (3, 4, 5)


def test_idx_dataset_spec():
    spec = DatasetSpec("idx", images_path=str(FIXTURES / "two_images.idx3-ubyte"))
    assert load_dataset(spec).n == 2
    assert DatasetSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        DatasetSpec("idx")


# ------------------------------------------------------------- synthetic

def test_point_mass_and_determinism():
    m = synth_dataset(DatasetSpec(family="point-mass", n=5, params={"point": [0.2, -0.4]}))
    assert m.n == 5 and np.all(m.atoms == [0.2, -0.4])
    spec = DatasetSpec(family="ring", n=100, seed=3, params={"sigma": 0.1})
    np.testing.assert_array_equal(synth_dataset(spec).atoms, synth_dataset(spec).atoms)
    with pytest.raises(ValueError):
        DatasetSpec(family="spiral")
    with pytest.raises(ValueError):
        synth_dataset(DatasetSpec(family="ring", params={"k": 0}))


def test_ring_blob_means():
    sigma = 0.05
    spec = DatasetSpec(family="ring", n=4000, seed=0, params={"k": 4, "sigma": sigma, "radius": 0.6})
    m = synth_dataset(spec)
    centres = ring_centres(4, 0.6)
    for j in range(4):
        blob = m.atoms[j::4]
        assert len(blob) == 1000
        assert np.abs(blob.mean(axis=0) - centres[j]).max() < 3 * sigma / np.sqrt(1000)


def test_rotation_moves_centres():
    c = ring_centres(4, 0.6, 45.0)
    np.testing.assert_allclose(c[0], [0.6 / np.sqrt(2), 0.6 / np.sqrt(2)], rtol=1e-12)


@pytest.mark.parametrize("family", ["ring", "grid", "moons", "point-mass"])
def test_synthetic_atoms_in_cube(family):
    m = synth_dataset(DatasetSpec(family=family, n=500, params={"sigma": 0.8, "noise": 0.8}))
    assert np.abs(m.atoms).max() <= 1.0


def test_labelled_ring():
    m = synth_dataset(DatasetSpec(family="ring", n=8, params={"k": 4, "labels": True}))
    assert m.dim == 6
    np.testing.assert_array_equal(m.atoms[:, 2:].argmax(axis=1), np.arange(8) % 4)


# -------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip(tmp_path, rng):
    nets = {"encoder": random_mlp(rng, 3, 2), "decoder": random_mlp(rng, 2, 3, batch_norm=True)}
    save_checkpoint(nets, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert set(back) == set(nets)
    for k in nets:
        assert back[k].equals(nets[k])
    manifest = read_manifest(tmp_path / "ck")
    assert manifest["format_version"] == FORMAT_VERSION == 1
    spans = sorted((a["offset"], a["offset"] + a["nbytes"])
                   for e in manifest["networks"] for a in e["arrays"])
    assert all(hi <= lo for (_, hi), (lo, _) in zip(spans, spans[1:]))


def test_checkpoint_bytes_are_deterministic(tmp_path, rng):
    nets = {"g": random_mlp(rng, 3, 2)}
    save_checkpoint(nets, tmp_path / "a")
    save_checkpoint(nets, tmp_path / "b")
    for name in ("manifest.json", "weights.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_blob_is_little_endian(tmp_path, rng):
    net = random_mlp(rng, 2, 2, depth=1)
    save_checkpoint({"n": net}, tmp_path)
    manifest = read_manifest(tmp_path)
    blob = (tmp_path / "weights.bin").read_bytes()
    entry = next(a for a in manifest["networks"][0]["arrays"] if a["key"] == "W0")
    raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
    values = struct.unpack("<4d", raw)
    np.testing.assert_array_equal(np.array(values).reshape(2, 2), net.params["W0"])


def test_checkpoint_corruption(tmp_path, rng):
    save_checkpoint({"n": random_mlp(rng, 3, 2)}, tmp_path)
    blob = bytearray((tmp_path / "weights.bin").read_bytes())
    blob[5] ^= 0xFF
    (tmp_path / "weights.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path)


def test_checkpoint_bad_version(tmp_path, rng):
    save_checkpoint({"n": random_mlp(rng, 3, 2)}, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["format_version"] = 2
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(tmp_path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


# ---------------------------------------------------------------- config

def test_shipped_configs_load(tmp_path):
    for path in sorted(CONFIGS.glob("*.json")):
        cfg = load_config(path)
        save_config(cfg, tmp_path / path.name)
        assert load_config(tmp_path / path.name).to_dict() == cfg.to_dict()


def test_config_validation():
    base = json.loads((CONFIGS / "tiny.json").read_text())
    bad = [
        {"methods": ["mind2mind", "gan"]},
        {"methods": ["vanilla", "vanilla"]},
        {"seeds": [1, 1]},
        {"mind_critic": {"layer_widths": [5, 16, 1], "activations": ["relu", "none"]}},
        {"mind_critic": {"layer_widths": [4, 16, 1], "activations": ["relu", "none"],
                         "batch_norm": [True, False]}},
        {"baseline_train": {"prior": {"dim": 3}}},
        {"source": {"kind": "synthetic", "family": "ring", "params": {"labels": True}}},
        {"methods": ["conditional"]},
        {"unknown_key": 1},
        {"eval": {"bound": "maybe"}},
        {"autoencoder": {**base["autoencoder"], "loss": "bce"}},
    ]
    for patch in bad:
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({**base, **patch})


def test_autoencoder_loss_is_recorded():
    cfg = load_config(CONFIGS / "tiny.json")
    assert cfg.autoencoder.loss == "mse"
    assert cfg.to_dict()["autoencoder"]["loss"] == "mse"


def test_config_overrides():
    cfg = load_config(CONFIGS / "tiny.json")
    new = cfg.with_overrides(lr=5e-4, epochs=7, batch_size=None)
    assert new.mind_train.lr == new.baseline_train.lr == 5e-4
    assert new.mind_train.epochs == 7 and new.ae_train.epochs == cfg.ae_train.epochs
    with pytest.raises(ConfigError):
        cfg.with_overrides(batch_size=1)


# ---------------------------------------------------------------- reports

def _history(rng, n=5, with_wall=True):
    h = TrainHistory()
    for step in range(1, n + 1):
        h.log(HistoryRecord(step * 10, *rng.normal(size=4), 0.1 * step if with_wall else None,
                            float(rng.uniform()) if step % 2 else None))
    return h


def _bundle(rng, methods=("mind2mind", "vanilla"), seeds=(0, 1)):
    b = ReportBundle({"methods": list(methods), "seeds": list(seeds)})
    for m in methods:
        for s in seeds:
            b.runs.append(RunResult(m, s, _history(rng), {"sliced_w1": float(rng.uniform())},
                                    {"holds": True, "slack": 0.5} if m == "mind2mind" else None,
                                    {"train_s": 1.25}))
    return b


def test_emit_report_files(tmp_path, rng):
    emit_report(_bundle(rng), tmp_path)
    csvs = sorted(p.name for p in tmp_path.glob("*.csv"))
    assert csvs == ["history_mind2mind_seed0.csv", "history_mind2mind_seed1.csv",
                    "history_vanilla_seed0.csv", "history_vanilla_seed1.csv"]
    assert not (tmp_path / LOCK_NAME).exists()
    for p in tmp_path.glob("*.csv"):
        rows = list(csv.reader(io.StringIO(p.read_text())))
        assert tuple(rows[0]) == HISTORY_COLUMNS
        assert all(len(r) == len(HISTORY_COLUMNS) for r in rows)


def test_empty_bundle(tmp_path):
    emit_report(ReportBundle({"methods": []}), tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["config.json"]


def test_reemit_is_byte_identical(tmp_path, rng):
    b = _bundle(rng)
    emit_report(b, tmp_path / "a")
    emit_report(b, tmp_path / "b")
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_report_roundtrip(tmp_path, rng):
    b = _bundle(rng)
    emit_report(b, tmp_path, record_wall_clock=True)
    back = read_report(tmp_path)
    assert back.config == b.config
    for x, y in zip(b.runs, back.runs):
        assert (x.method, x.seed, x.metrics, x.bound, x.timing) == (y.method, y.seed, y.metrics, y.bound, y.timing)
        assert x.history == y.history
    emit_report(b, tmp_path / "plain")
    plain = read_report(tmp_path / "plain")
    assert plain.runs[0].history == b.runs[0].history.without_timing()
    assert plain.runs[0].timing == {}


def test_history_csv_rejects_garbage():
    with pytest.raises(ValueError):
        parse_history_csv("a,b\n1,2\n")
    head = ",".join(HISTORY_COLUMNS)
    with pytest.raises(ValueError):
        parse_history_csv(head + "\n1,2\n")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_history_csv_roundtrip(seed):
    h = _history(np.random.default_rng(seed), n=int(seed % 7))
    assert parse_history_csv(history_csv(h, True)) == h


def test_measure_csv_roundtrip(tmp_path, rng):
    m = random_measure(rng, 9, 3)
    (tmp_path / "m.csv").write_text(measure_csv(m.atoms, m.weights))
    back = read_measure_csv(tmp_path / "m.csv")
    np.testing.assert_array_equal(back.atoms, m.atoms)
    np.testing.assert_array_equal(back.weights, m.weights)


def test_output_lock(tmp_path):
    with output_lock(tmp_path):
        assert (tmp_path / LOCK_NAME).exists()
        with pytest.raises(OutputLocked):
            with output_lock(tmp_path):
                pass
        with pytest.raises(OutputLocked):
            emit_report(ReportBundle({}), tmp_path)
    assert not (tmp_path / LOCK_NAME).exists()
