import json

import numpy as np
import pytest

from conftest import pathloss_cfg
from gnnrrm import persist, wcgcn
from gnnrrm.nngrad import CheckpointError
from gnnrrm.scenario import RAYLEIGH, SystemConfig, make_dataset


@pytest.fixture
def ds():
    return make_dataset(pathloss_cfg(K=5, nt=2), 6, seed=3)


def same_dataset(a, b):
    return (a.cfg == b.cfg and a.meta == b.meta
            and all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("tx", "rx", "H", "weights", "noise")))


def test_dataset_binary_round_trip_is_byte_identical(ds, tmp_path):
    path = persist.save_dataset(ds, tmp_path / "d.bin")
    back = persist.load_dataset(path)
    assert same_dataset(ds, back)
    assert persist.dataset_to_bytes(back) == path.read_bytes()


def test_dataset_json_round_trip(ds, tmp_path):
    back = persist.load_dataset(persist.save_dataset(ds, tmp_path / "d.json"))
    assert same_dataset(ds, back)


def test_dataset_format_errors(ds):
    blob = persist.dataset_to_bytes(ds)
    with pytest.raises(persist.FormatError, match="magic"):
        persist.dataset_from_bytes(b"X" + blob[1:])
    with pytest.raises(persist.FormatError):
        persist.dataset_from_bytes(blob[:-8])
    with pytest.raises(persist.FormatError):
        persist.dataset_from_bytes(blob + b"\0")
    bumped = blob.replace(b'"version": 1', b'"version": 2', 1)
    with pytest.raises(persist.FormatError, match="version"):
        persist.dataset_from_bytes(bumped)
    d = json.loads(persist.dataset_to_json(ds))
    d["version"] = 9
    with pytest.raises(persist.FormatError):
        persist.dataset_from_json(json.dumps(d))


def test_checkpoint_round_trip_gives_identical_inference(tmp_path):
    params = wcgcn.init_wcgcn(1, np.random.default_rng(0), num_layers=2)
    ds = make_dataset(SystemConfig(num_pairs=6, channel_model=RAYLEIGH), 5, seed=1)
    path = persist.save_checkpoint(params, tmp_path / "m.ckpt")
    back = persist.load_checkpoint(path)
    assert back.meta() == params.meta()
    assert np.array_equal(wcgcn.evaluate(params, ds), wcgcn.evaluate(back, ds))
    first = path.read_bytes()
    persist.save_checkpoint(back, path)
    assert path.read_bytes() == first


def test_checkpoint_errors(tmp_path):
    params = wcgcn.init_wcgcn(2, np.random.default_rng(0))
    path = persist.save_checkpoint(params, tmp_path / "m.ckpt")
    side = tmp_path / "m.ckpt.json"
    meta = json.loads(side.read_text())
    side.write_text(json.dumps({**meta, "version": 7}))
    with pytest.raises(CheckpointError, match="version"):
        persist.load_checkpoint(path)
    side.write_text(json.dumps({**meta, "mlp2": [74, 16, 4]}))
    with pytest.raises(CheckpointError):
        persist.load_checkpoint(path)
    side.unlink()
    with pytest.raises(CheckpointError, match="sidecar"):
        persist.load_checkpoint(path)
    path.write_bytes(b"nonsense")
    side.write_text(json.dumps(meta))
    with pytest.raises(CheckpointError, match="magic"):
        persist.load_checkpoint(path)


def test_csv_round_trip_keeps_floats(tmp_path):
    rows = [{"method": "wcgcn", "K": 10, "setting": "test", "mean_objective": 0.1 + 0.2, "ratio": 1 / 3}]
    path = persist.write_csv(rows, tmp_path / "r.csv")
    back = persist.read_csv(path)
    assert float(back[0]["mean_objective"]) == 0.1 + 0.2 and float(back[0]["ratio"]) == 1 / 3
    assert path.read_text().splitlines()[0] == ",".join(persist.RESULT_FIELDS)


def test_json_writer_handles_numpy(tmp_path):
    path = persist.write_json({"a": np.float64(1.5), "b": np.arange(3), "c": np.bool_(True)}, tmp_path / "x.json")
    assert json.loads(path.read_text()) == {"a": 1.5, "b": [0, 1, 2], "c": True}
    with pytest.raises(TypeError):
        persist.write_json({"a": object()}, tmp_path / "y.json")
