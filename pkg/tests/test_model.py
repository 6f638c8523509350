import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segmini import model as M
from segmini.errors import ConfigError, FormatError, ShapeError
from segmini.model import LayerSpec, ModelConfig
from segmini.tensor import approx_eq


@pytest.fixture(scope="module")
def default_model():
    return M.init_model(M.default_config(2), seed=3)


# -- configs -----------------------------------------------------------------

def test_default_config_validates():
    assert M.validate(M.default_config(2)) == []


def test_default_config_structure():
    cfg = M.default_config(2)
    kinds = [l.kind for l in cfg.layers]
    assert kinds.count("maxpool") == 3 and kinds.count("upsample") == 3
    assert kinds[0] == "batchnorm" and kinds[-1] == "softmax"
    assert cfg.divisor == 8
    assert all(l.kernel_size == 3 for l in cfg.layers if l.kind == "sepconv_relu")


def test_default_channel_ladder():
    cfg = M.default_config(2)
    ladder = [3] + [l.channels_out for l in cfg.layers if l.kind == "sepconv_relu"]
    assert ladder == [3, 8, 16, 32, 64, 64, 32, 16, 2]


def test_default_config_rejects_one_class():
    with pytest.raises(ConfigError):
        M.default_config(1)


def test_strided_mode_has_no_pools():
    cfg = M.default_config(2, downsample_mode="strided_conv")
    assert M.validate(cfg) == []
    assert not any(l.kind == "maxpool" for l in cfg.layers)
    assert sum(l.stride == 2 for l in cfg.layers if l.kind == "sepconv_relu") == 3
    assert cfg.divisor == 8


def test_validate_resolution_factor():
    layers = M.default_config(2).layers
    cfg = ModelConfig(2, tuple(l for l in layers if l.kind != "upsample"))
    assert any("resolution factor" in e for e in M.validate(cfg))


def test_validate_softmax_order():
    layers = list(M.default_config(2).layers)
    layers.insert(3, LayerSpec("softmax"))
    errors = M.validate(ModelConfig(2, tuple(layers)))
    assert any("softmax must be the final layer" in e for e in errors)


def test_validate_lists_every_violation():
    cfg = ModelConfig(2, (LayerSpec("sepconv_relu", 4, kernel_size=2), LayerSpec("maxpool")))
    errors = M.validate(cfg)
    assert len(errors) >= 3  # even kernel, resolution factor, missing softmax


def test_validate_channels_entering_softmax():
    cfg = ModelConfig(3, (LayerSpec("sepconv_relu", 2), LayerSpec("softmax")))
    assert any("class_count" in e for e in M.validate(cfg))


def test_config_text_round_trip():
    for cfg in (M.default_config(3), M.default_config(2, downsample_mode="strided_conv")):
        assert M.parse_config(cfg.to_text()) == cfg


def test_parse_config_short_form():
    cfg = M.parse_config("class_count=4\nwidths=4,8,8,16\n")
    assert cfg == M.default_config(4, (4, 8, 8, 16))


def test_parse_config_rejects_unknown_key():
    with pytest.raises(ConfigError):
        M.parse_config("colour=blue\n")


def test_init_model_rejects_invalid_config():
    with pytest.raises(ConfigError):
        M.init_model(ModelConfig(2, (LayerSpec("maxpool"),)), 0)


# -- initialization ----------------------------------------------------------

def test_init_deterministic():
    cfg = M.default_config(2)
    assert M.dumps_model(M.init_model(cfg, 11)) == M.dumps_model(M.init_model(cfg, 11))
    assert M.dumps_model(M.init_model(cfg, 11)) != M.dumps_model(M.init_model(cfg, 12))


def test_init_values(default_model):
    for i, spec in enumerate(default_model.config.layers):
        p = default_model.params[i]
        if spec.kind == "batchnorm":
            assert np.all(p["gamma"] == 1) and np.all(p["beta"] == 0)
            assert np.all(p["running_mean"] == 0) and np.all(p["running_var"] == 1)
        elif spec.kind == "sepconv_relu":
            for name in ("dw_weight", "pw_weight"):
                w = p[name]
                bound = np.sqrt(6.0 / (w.shape[1] * w.shape[2] * w.shape[3]))
                assert np.abs(w).max() <= bound
            assert np.all(p["pw_bias"] == 0)
        else:
            assert p is None


def test_param_count(default_model):
    assert default_model.param_count() == 12219


# -- forward -----------------------------------------------------------------

@pytest.mark.parametrize("h,w", [(32, 32), (64, 64), (64, 48)])
def test_forward_resolution_independent(default_model, h, w):
    x = np.random.default_rng(0).random((1, 3, h, w)).astype(np.float32)
    before = M.dumps_model(default_model)
    probs = M.forward(default_model, x)
    assert probs.shape == (1, 2, h, w)
    assert np.abs(probs.sum(axis=1) - 1).max() < 1e-6
    assert M.dumps_model(default_model) == before


def test_forward_rejects_indivisible_size(default_model):
    with pytest.raises(ShapeError, match="divisible by 8"):
        M.forward(default_model, np.zeros((1, 3, 30, 30), np.float32))


def test_forward_rejects_wrong_channels(default_model):
    with pytest.raises(ShapeError):
        M.forward(default_model, np.zeros((1, 1, 32, 32), np.float32))


def test_forward_infer_is_pure(default_model):
    x = np.random.default_rng(1).random((2, 3, 32, 32)).astype(np.float32)
    assert np.array_equal(M.forward(default_model, x), M.forward(default_model, x))


def test_forward_train_mode_uses_batch_stats(default_model):
    x = np.random.default_rng(2).random((2, 3, 16, 16)).astype(np.float32)
    assert not np.array_equal(M.forward(default_model, x, "train"), M.forward(default_model, x, "infer"))


def test_strided_model_forward():
    m = M.init_model(M.default_config(3, downsample_mode="strided_conv"), 0)
    assert M.forward(m, np.zeros((1, 3, 24, 40), np.float32)).shape == (1, 3, 24, 40)


def test_update_running_stats_changes_only_bn(default_model):
    x = np.random.default_rng(3).random((2, 3, 16, 16)).astype(np.float32)
    _, trace = M.forward_cached(default_model, x, "train")
    m2 = M.update_running_stats(default_model, trace)
    first = m2.params[0]
    assert not np.array_equal(first["running_mean"], default_model.params[0]["running_mean"])
    assert np.array_equal(first["gamma"], default_model.params[0]["gamma"])


# -- labels ------------------------------------------------------------------

def test_predict_labels_examples():
    p = np.array([0.25, 0.5, 0.3, 0.75, 0.5, 0.7], np.float32).reshape(1, 2, 1, 3)
    assert M.predict_labels(p).tolist() == [[1, 0, 1]]  # middle pixel is a tie
    assert M.predict_labels(p).dtype == M.LABEL_DTYPE


def test_predict_labels_one_hot():
    labels = np.array([[0, 2], [1, 2]])
    p = np.eye(3, dtype=np.float32)[labels].transpose(2, 0, 1)[None]
    assert np.array_equal(M.predict_labels(p), labels)


def test_predict_labels_requires_batch_one():
    with pytest.raises(ShapeError):
        M.predict_labels(np.zeros((2, 2, 2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["exp", "cube", "affine", "log"]))
def test_predict_labels_monotone_invariance(seed, kind):
    rng = np.random.default_rng(seed)
    s = rng.random((1, 3, 5, 7)) + 0.01
    f = {"exp": np.exp, "cube": lambda v: v ** 3, "affine": lambda v: 3 * v - 7, "log": np.log}[kind]
    assert np.array_equal(M.predict_labels(s), M.predict_labels(f(s)))


# -- serialization -----------------------------------------------------------

def test_save_load_round_trip(default_model, tmp_path):
    path = tmp_path / "m.bin"
    M.save_model(default_model, path)
    loaded = M.load_model(path)
    assert loaded.config == default_model.config
    for a, b in zip(default_model.params, loaded.params):
        if a is None:
            assert b is None
            continue
        for k in a:
            assert approx_eq(a[k], b[k], 0.0)
    assert path.read_bytes() == M.dumps_model(loaded)


def test_file_header(default_model):
    blob = M.dumps_model(default_model)
    assert blob[:7] == b"BBSEG1\0" and blob[7] == 1
    (n,) = struct.unpack("<I", blob[8:12])
    assert blob[12:12 + n].decode() == default_model.config.to_text()


def test_load_bad_magic(default_model):
    blob = bytearray(M.dumps_model(default_model))
    blob[0:2] = b"XX"
    with pytest.raises(FormatError):
        M.loads_model(bytes(blob))


@pytest.mark.parametrize("cut", [3, 10, 100, -1])
def test_load_truncated(default_model, cut):
    with pytest.raises(FormatError):
        M.loads_model(M.dumps_model(default_model)[:cut])


def test_load_trailing_bytes(default_model):
    with pytest.raises(FormatError):
        M.loads_model(M.dumps_model(default_model) + b"\0")


def test_load_parameter_count_mismatch(default_model):
    blob = bytearray(M.dumps_model(default_model))
    (n,) = struct.unpack("<I", blob[8:12])
    off = 12 + n
    (count,) = struct.unpack("<I", blob[off:off + 4])
    blob[off:off + 4] = struct.pack("<I", count + 1)
    with pytest.raises(FormatError):
        M.loads_model(bytes(blob))


def test_load_missing_file(tmp_path):
    with pytest.raises(FormatError):
        M.load_model(tmp_path / "absent.bin")
