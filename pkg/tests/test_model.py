import struct

import numpy as np
import pytest

from ppmseg.checkpoint import (
    MAGIC,
    decode,
    encode,
    load_checkpoint,
    model_checkpoint,
    model_from_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from ppmseg.errors import ConfigError, FormatError, ShapeError
from ppmseg.gradcheck import CASES, TOLERANCE
from ppmseg.model import (
    ModelConfig,
    PPMConfig,
    build_model,
    encoder_forward,
    forward,
    parameter_count,
    ppm_forward,
    predict_proba,
    reduced_config,
)
from ppmseg.tensor import Tensor, no_grad

TINY = dict(
    input_size=(48, 64),
    encoder_stage_channels=(4, 4, 6, 6, 6),
    decoder_channels=(6, 4, 4, 4),
    ppm=PPMConfig(bins=(1, 2, 3)),
)


@pytest.fixture(scope="module")
def default_model():
    return build_model(ModelConfig(seed=1)).eval()


def _tiny(**kw):
    return build_model(ModelConfig(**{**TINY, **kw}))


def test_build_is_deterministic():
    a, b = build_model(ModelConfig(seed=1)), build_model(ModelConfig(seed=1))
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    c = _tiny(seed=2).state_dict()
    d = _tiny(seed=3).state_dict()
    assert not np.array_equal(c["enc1.0.conv.weight"], d["enc1.0.conv.weight"])


def test_initialisation_rules(default_model):
    p = default_model.parameters()
    assert parameter_count(default_model) > 0
    assert all(np.isfinite(t.data).all() for t in p.values())
    assert not p["enc1.0.conv.bias"].data.any()
    assert np.all(p["enc3.1.bn.gamma"].data == 1) and not p["enc3.1.bn.beta"].data.any()
    # kaiming-uniform bound for a 3x3 conv from 256 channels
    w = p["enc4.0.conv.weight"].data
    assert np.abs(w).max() <= np.sqrt(6 / (256 * 9))
    assert np.abs(w).max() > 0.9 * np.sqrt(6 / (256 * 9))


@pytest.mark.parametrize(
    "bad",
    [
        dict(input_size=(190, 256)),
        dict(encoder_stage_channels=(1, 2, 3, 4)),
        dict(decoder_channels=(8, 4)),
        dict(decoder_dilation=0),
        dict(ppm=PPMConfig(bins=(2, 1))),
        dict(input_size=(64, 64), ppm=PPMConfig(bins=(1, 6))),
    ],
)
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        build_model(ModelConfig(**bad))


def test_encoder_shapes(default_model):
    with no_grad():
        feats = encoder_forward(default_model, Tensor(np.random.default_rng(0).random((1, 3, 192, 256))))
    assert [f.shape for f in feats] == [
        (1, 64, 192, 256),
        (1, 128, 96, 128),
        (1, 256, 48, 64),
        (1, 512, 24, 32),
        (1, 512, 12, 16),
    ]


def test_encoder_structure_counts(default_model):
    convs = [n for n in default_model.convs if n.startswith("enc")]
    per_stage = [sum(n.startswith(f"enc{s}.") for n in convs) for s in range(1, 6)]
    assert per_stage == [1, 1, 2, 2, 2]
    assert all(n.replace(".conv", ".bn") in default_model.bns for n in convs)


def test_encoder_zero_input_gives_zero_features():
    m = _tiny().eval()
    with no_grad():
        feats = encoder_forward(m, Tensor(np.zeros((1, 3, 48, 64))))
    assert all(not f.data.any() for f in feats)


def test_encoder_batch_scales_only_n():
    m = _tiny().eval()
    x = np.random.default_rng(0).random((1, 3, 48, 64))
    with no_grad():
        one = encoder_forward(m, Tensor(x))
        two = encoder_forward(m, Tensor(np.concatenate([x, x])))
    for a, b in zip(one, two):
        assert b.shape == (2,) + a.shape[1:]


def test_ppm_prefusion_channel_arithmetic():
    cfg = PPMConfig()
    assert cfg.branches_for(512) == 128
    raw = PPMConfig(fused=False)
    assert raw.out_channels(512) == 1024
    assert cfg.out_channels(512) == 512
    built = build_model(ModelConfig(ppm=raw, seed=0)).eval()
    with no_grad():
        out = ppm_forward(built, Tensor(np.random.default_rng(0).random((1, 512, 12, 16))), "ppm_bottleneck")
    assert out.shape == (1, 1024, 12, 16)


def test_ppm_fused_preserves_shape(default_model):
    x = Tensor(np.random.default_rng(0).random((1, 512, 24, 32)))
    with no_grad():
        assert ppm_forward(default_model, x, "ppm_skip4").shape == (1, 512, 24, 32)


def test_ppm_global_branch_is_constant():
    m = build_model(ModelConfig(**{**TINY, "ppm": PPMConfig(bins=(1,), fused=False)})).eval()
    x = Tensor(np.random.default_rng(0).random((1, 6, 3, 4)))
    with no_grad():
        out = ppm_forward(m, x, "ppm_bottleneck").data
    branch = out[0, 6:]
    assert np.allclose(branch, branch[:, :1, :1])
    with pytest.raises(ShapeError):
        ppm_forward(build_model(ModelConfig(**TINY)).eval(), Tensor(np.ones((1, 6, 2, 2))), "ppm_bottleneck")


def test_forward_shape_and_range(default_model):
    x = np.random.default_rng(0).random((1, 3, 192, 256))
    y = predict_proba(default_model, x)
    assert y.shape == (1, 1, 192, 256)
    assert np.all(y > 0) and np.all(y < 1)


@pytest.mark.parametrize("size", [(48, 64), (64, 48), (96, 80)])
def test_forward_any_size_divisible_by_16(size):
    m = _tiny().eval()
    y = predict_proba(m, np.random.default_rng(0).random((2, 3) + size))
    assert y.shape == (2, 1) + size


def test_forward_rejects_bad_input():
    m = _tiny().eval()
    with pytest.raises(ShapeError):
        forward(m, Tensor(np.zeros((1, 3, 50, 64))))
    with pytest.raises(ShapeError):
        forward(m, Tensor(np.zeros((1, 1, 48, 64))))


def test_identical_inputs_identical_outputs():
    m = _tiny().eval()
    x = np.random.default_rng(0).random((1, 3, 48, 64))
    y = predict_proba(m, np.concatenate([x, x]))
    assert np.array_equal(y[0], y[1])


def test_predict_restores_training_mode():
    m = _tiny()
    predict_proba(m, np.zeros((1, 3, 48, 64)))
    assert m.training and all(bn.training for bn in m.bns.values())


def test_training_forward_updates_running_stats():
    m = _tiny()
    before = m.bns["enc1.0.bn"].running_mean.copy()
    forward(m, Tensor(np.random.default_rng(0).random((2, 3, 48, 64))))
    assert not np.array_equal(before, m.bns["enc1.0.bn"].running_mean)


def test_model_head_gradient():
    assert CASES["model_head"](np.random.default_rng(5)) < TOLERANCE


def test_reduced_config_matches_toy_recipe():
    cfg = reduced_config()
    assert cfg.input_size == (96, 128)
    assert cfg.encoder_stage_channels == (16, 32, 64, 128, 128)
    assert cfg.ppm.bins == (1, 2, 3)


def _trained_tiny():
    m = _tiny(seed=4)
    forward(m, Tensor(np.random.default_rng(1).random((2, 3, 48, 64))))
    m.epoch = 7
    return m.eval()


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = _trained_tiny()
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, optimizer={"adam.t": np.array([3.0], np.float32)})
    back = load_checkpoint(path)
    assert back.epoch == 7 and not back.training
    assert back.config == m.config
    sa, sb = m.state_dict(), back.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    x = np.random.default_rng(2).random((2, 3, 48, 64))
    assert np.array_equal(predict_proba(m, x), predict_proba(back, x))
    assert read_checkpoint(path).optimizer["adam.t"][0] == 3.0
    assert encode(decode(path.read_bytes())) == path.read_bytes()


def test_checkpoint_layout_header():
    buf = encode(model_checkpoint(_tiny()))
    assert buf[:8] == MAGIC
    assert struct.unpack("<I", buf[8:12])[0] == 1
    assert buf[-5] == 0  # no optimizer block, then u32 epoch
    assert struct.unpack("<I", buf[-4:])[0] == 0


@pytest.mark.parametrize("cut", [4, 10, 100, -3])
def test_truncated_checkpoint(cut):
    buf = encode(model_checkpoint(_tiny()))
    with pytest.raises(FormatError, match="truncated"):
        decode(buf[:cut])


def test_corrupt_header_fields():
    buf = encode(model_checkpoint(_tiny()))
    with pytest.raises(FormatError, match="magic"):
        decode(b"XXXXXXXX" + buf[8:])
    with pytest.raises(FormatError, match="version"):
        decode(buf[:8] + struct.pack("<I", 9) + buf[12:])
    with pytest.raises(FormatError, match="trailing"):
        decode(buf + b"\x00")


def test_unknown_tensor_name_is_reported():
    ckpt = model_checkpoint(_tiny())
    ckpt.tensors["mystery.weight"] = np.zeros(3, np.float32)
    with pytest.raises(FormatError, match="mystery.weight"):
        model_from_checkpoint(decode(encode(ckpt)))


def test_wrong_tensor_shape_is_reported():
    ckpt = model_checkpoint(_tiny())
    ckpt.tensors["head.bias"] = np.zeros(2, np.float32)
    with pytest.raises(FormatError, match="head.bias"):
        model_from_checkpoint(ckpt)
