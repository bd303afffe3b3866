import json
import struct

import numpy as np
import pytest

from icdetect.model import convnet
from icdetect.model.forest import ForestConfig, train_forest
from icdetect.model.hybrid import HybridModel
from icdetect.model.io import (MAGIC, VERSION, ModelFormatError, ModelVersionError, dumps,
                               load_model, loads, save_model)


@pytest.fixture
def model():
    params = {k: v.astype(np.float32) for k, v in convnet.init_params(3).items()}
    rng = np.random.default_rng(0)
    X = rng.normal(size=(80, 32))
    y = (X[:, 0] > 0).astype(float)
    forest = train_forest(X, y, ForestConfig(n_trees=7, max_depth=5), seed=4)
    return HybridModel(params, forest, 0.375, 0.125, "calibrated:target", input_side=32, seed=4,
                       meta={"train_patches": 80})


def test_roundtrip_is_bit_exact(model, tmp_path):
    path = save_model(model, tmp_path / "m.icd")
    again = load_model(path)
    assert dumps(again) == path.read_bytes()
    for k, v in model.params.items():
        assert again.params[k].dtype == v.dtype and np.array_equal(again.params[k], v)
    assert (again.patch_threshold, again.slide_threshold) == (0.375, 0.125)
    assert again.provenance == "calibrated:target" and again.seed == 4 and again.input_side == 32
    assert again.meta == {"train_patches": 80}
    x = np.random.default_rng(1).integers(0, 256, (5, 32, 32, 3), dtype=np.uint8)
    assert np.array_equal(again.predict_proba(x), model.predict_proba(x))


def test_layout(model):
    data = dumps(model)
    assert data[:8] == MAGIC
    version, hlen = struct.unpack_from("<IQ", data, 8)
    assert version == VERSION
    header = json.loads(data[20:20 + hlen])
    assert header["architecture"]["channels"] == [3, 8, 16, 32]
    start = 20 + hlen + (-(20 + hlen)) % 8
    for entry in header["arrays"]:
        assert (start + entry["offset"]) % 8 == 0
    names = [e["name"] for e in header["arrays"]]
    assert "param/conv1_w" in names and "forest/offsets" in names
    assert len(data) >= start + sum(e["nbytes"] for e in header["arrays"])


def test_version_mismatch(model):
    data = bytearray(dumps(model))
    struct.pack_into("<I", data, 8, VERSION + 1)
    with pytest.raises(ModelVersionError):
        loads(bytes(data))


def test_bad_magic(model):
    with pytest.raises(ModelFormatError):
        loads(b"NOTMODEL" + dumps(model)[8:])
