import json

import numpy as np
import pytest

from miad.crystal import Crystal
from miad.engine import Model, TrainConfig, step_rng, train, train_step
from miad.io import (
    CheckpointError,
    DatasetError,
    RunConfig,
    crystal_to_record,
    load_checkpoint,
    load_config,
    load_dataset,
    save_checkpoint,
    write_crystals,
)
from miad.network import ModelConfig
from miad.toy import make_toy_dataset


def write_lines(path, records):
    path.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in records) + "\n")


GOOD = {"lattice": np.eye(3).tolist(), "frac_coords": [[0, 0, 0], [0.5, 0.5, 0.5]], "atom_types": [1, 2]}


def test_well_formed_file(tmp_path):
    p = tmp_path / "d.jsonl"
    write_lines(p, [GOOD] * 3)
    crystals, rejected = load_dataset(p)
    assert len(crystals) == 3 and rejected == []


def test_invalid_lines_logged_with_reason(tmp_path, caplog):
    p = tmp_path / "d.jsonl"
    mirage = dict(GOOD, atom_types=[0, 2])
    unwrapped = dict(GOOD, frac_coords=[[1.3, 0, 0], [0.5, 0.5, 0.5]])
    write_lines(p, [GOOD, mirage, "{not json", unwrapped, {"lattice": [[1]]}])
    crystals, rejected = load_dataset(p)
    assert len(crystals) == 1
    assert [r[0] for r in rejected] == [2, 3, 4, 5]
    assert rejected[0][1] == "mirage type in input"
    assert "d.jsonl:2" in caplog.text


def test_dataset_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "missing.jsonl")
    p = tmp_path / "bad.jsonl"
    write_lines(p, ["[]"])
    with pytest.raises(DatasetError):
        load_dataset(p)


def test_samples_feed_back_into_loader(tmp_path):
    data = make_toy_dataset(5)
    p = tmp_path / "s.jsonl"
    write_crystals(data, p)
    back, rejected = load_dataset(p)
    assert back == data and rejected == []
    assert json.loads(p.read_text().splitlines()[0])["id"] == "sample-0"


def test_record_round_trip_is_exact():
    rng = np.random.default_rng(0)
    c = Crystal(rng.standard_normal((3, 3)) + 4 * np.eye(3), rng.random((4, 3)), [1, 2, 3, 4])
    rec = json.loads(json.dumps(crystal_to_record(c)))
    from miad.io import crystal_from_record

    assert crystal_from_record(rec) == c


def test_config_sections(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"n_m": 9, "n_types": 3, "kappas": [2, 1, 4]}, "schedule": {"sigma_max": 0.5}}))
    cfg = load_config(p)
    assert cfg.train.n_m == 9 and cfg.train.kappas == (2.0, 1.0, 4.0)
    assert cfg.train.schedule.sigma_max == 0.5
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        RunConfig.from_dict({"optimizer": {}})


@pytest.fixture()
def trained(tmp_path):
    model = Model(TrainConfig(n_m=10, n_types=3, T=20, batch_size=8, seed=3), ModelConfig(hidden_dim=16, n_layers=2, n_freqs=8))
    data = make_toy_dataset(16, seed=2)
    state, _ = train(data, model, max_steps=3)
    path = tmp_path / "ck.json"
    save_checkpoint(model, state, path)
    return model, state, data, path


def test_checkpoint_round_trip_bit_exact(trained):
    model, state, _, path = trained
    model2, state2 = load_checkpoint(path)
    assert state2.step == state.step and state2.epoch == state.epoch
    for k in state.params:
        assert np.array_equal(state.params[k], state2.params[k])
        assert np.array_equal(state.adam.v[k], state2.adam.v[k])
    assert model2.config.to_dict() == model.config.to_dict()


def test_resume_step_is_bitwise_identical(trained):
    model, state, data, path = trained
    model2, state2 = load_checkpoint(path)
    a = train_step(state, data[:8], model, step_rng(3, state.step))
    b = train_step(state2, data[:8], model2, step_rng(3, state2.step))
    assert a[1] == b[1]
    assert all(np.array_equal(a[0].params[k], b[0].params[k]) for k in a[0].params)


def test_corrupted_checkpoint_reports_offset(trained, tmp_path):
    *_, path = trained
    bad = tmp_path / "bad.json"
    bad.write_bytes(path.read_bytes()[:500])
    with pytest.raises(CheckpointError, match="byte offset"):
        load_checkpoint(bad)


def test_version_checks(trained, tmp_path):
    *_, path = trained
    doc = json.loads(path.read_text())
    del doc["version"]
    p = tmp_path / "nov.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="missing format version"):
        load_checkpoint(p)
    doc["version"] = 99
    p.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="unsupported version"):
        load_checkpoint(p)


def test_tampered_schedule_rejected(trained, tmp_path):
    *_, path = trained
    doc = json.loads(path.read_text())
    doc["schedule_tables"]["sigma"][0] += 1e-3
    p = tmp_path / "t.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="sigma"):
        load_checkpoint(p)
