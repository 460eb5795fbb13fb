import struct
import zlib

import numpy as np
import pytest

from abnnlab.layers import BNL, NormKind, VILinear
from abnnlab.model import (
    ABNN,
    ArchSpec,
    Checkpoint,
    CheckpointChecksumError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConversionError,
    HiddenSpec,
    build,
    checkpoint_bytes,
    checkpoint_from_bytes,
    convert_to_abnn,
    load,
    save,
)

SMALL = ArchSpec(2, [HiddenSpec(8, NormKind.BATCH, "relu")], 2)
DEEP = ArchSpec(3, [HiddenSpec(6, "batch", "relu"), HiddenSpec(5, "layer", "gelu")], 4)


def _params(net):
    return [t.data.tobytes() for t in net.parameters()]


def test_parameter_count_small_spec():
    net = build(SMALL, seed=0)
    assert net.num_parameters() == 2 * 8 + 8 * 2 + 8 + 8
    assert sum(t.data.size for t in net.param_groups["linear_weights"]) == 32


def test_build_is_deterministic():
    assert _params(build(DEEP, 3)) == _params(build(DEEP, 3))
    assert _params(build(DEEP, 3)) != _params(build(DEEP, 4))


def test_gamma_starts_at_one_and_beta_at_zero():
    net = build(DEEP, 1)
    for layer in net.norm_layers():
        assert np.all(layer.gamma.data == 1.0) and np.all(layer.beta.data == 0.0)


def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        ArchSpec(2, [HiddenSpec(8)], 1)
    with pytest.raises(ValueError):
        ArchSpec(2, [HiddenSpec(0)], 2)
    assert ArchSpec.from_dict(DEEP.to_dict()) == DEEP


def test_forward_shapes():
    net = build(DEEP, 0)
    assert net.predict_logits(np.zeros((7, 3))).shape == (7, 4)


def test_variational_build_shares_mean_initialization():
    det, vi = build(DEEP, 2), build(DEEP, 2, variational=True)
    vi_layers = [layer for layer in vi.layers if isinstance(layer, VILinear)]
    assert len(vi_layers) == 3
    det_w = det.param_groups["linear_weights"]
    for w, layer in zip(det_w, vi_layers):
        assert np.array_equal(w.data, layer.w_mu.data)


# -- conversion -----------------------------------------------------------------


def _trained_like(spec, seed):
    """Network with non-trivial gamma, beta and running statistics."""
    net = build(spec, seed)
    rng = np.random.default_rng(seed + 100)
    for layer in net.norm_layers():
        layer.gamma.data = rng.uniform(0.5, 1.5, layer.features)
        layer.beta.data = rng.normal(size=layer.features)
        layer.running_mean = rng.normal(size=layer.features)
        layer.running_var = rng.uniform(0.5, 2.0, layer.features)
    return net


def test_conversion_with_zero_noise_matches_deterministic_bitwise():
    net = _trained_like(DEEP, 0)
    abnn = convert_to_abnn(net, alpha=0.5)
    x = np.random.default_rng(1).normal(size=(50, 3))
    zeros = [np.zeros(layer.features) for layer in abnn.bnl_layers()]
    for mode in ("eval", "train"):
        a = net.clone().predict_logits(x, mode=mode)
        b = abnn.clone().predict_logits(x, mode=mode, epsilons=zeros)
        assert a.tobytes() == b.tobytes()


def test_conversion_freezes_everything_but_norm_parameters():
    abnn = convert_to_abnn(build(SMALL, 0))
    assert abnn.num_parameters(trainable_only=True) == 16
    assert abnn.form == ABNN and all(isinstance(layer, BNL) for layer in abnn.norm_layers())


def test_conversion_train_all_keeps_weights_trainable():
    abnn = convert_to_abnn(build(SMALL, 0), train_all=True)
    assert abnn.num_parameters(trainable_only=True) == abnn.num_parameters()


def test_conversion_does_not_touch_the_source():
    net = build(SMALL, 0)
    before = _params(net)
    abnn = convert_to_abnn(net)
    abnn.norm_layers()[0].gamma.data[:] = 3.0
    assert _params(net) == before and net.form != ABNN


def test_double_conversion_is_an_error():
    with pytest.raises(ConversionError, match="already"):
        convert_to_abnn(convert_to_abnn(build(SMALL, 0)))


def test_conversion_requires_normalization():
    with pytest.raises(ConversionError, match="normalization"):
        convert_to_abnn(build(ArchSpec(2, [HiddenSpec(4, None)], 2), 0))


def test_modes_draw_different_noise_after_reseeding():
    a = convert_to_abnn(build(SMALL, 0), alpha=0.5)
    b = a.clone()
    a.set_noise_seeds(1)
    b.set_noise_seeds(2)
    x = np.ones((3, 2))
    assert not np.array_equal(a.predict_logits(x), b.predict_logits(x))


# -- checkpoints ---------------------------------------------------------------


def _checkpoints():
    net = _trained_like(DEEP, 5)
    yield Checkpoint(net, {"stage": "pretrain", "loss_curve": [0.5, 0.25]})
    yield Checkpoint(convert_to_abnn(net, alpha=0.2), {"stage": "finetune"})
    yield Checkpoint(build(DEEP, 1, variational=True, vi_sigma_init=0.05))


@pytest.mark.parametrize("ckpt", list(_checkpoints()))
def test_save_load_save_is_byte_identical(tmp_path, ckpt):
    save(ckpt, tmp_path / "a.abnn")
    loaded = load(tmp_path / "a.abnn")
    save(loaded, tmp_path / "b.abnn")
    assert (tmp_path / "a.abnn").read_bytes() == (tmp_path / "b.abnn").read_bytes()
    assert loaded.metadata == ckpt.metadata
    assert loaded.network.trainable_mask == ckpt.network.trainable_mask
    x = np.random.default_rng(0).normal(size=(4, 3))
    zeros = [np.zeros(layer.features) for layer in ckpt.network.bnl_layers()] or None
    if not isinstance(ckpt.network.layers[0], VILinear):
        assert np.array_equal(
            ckpt.network.clone().predict_logits(x, epsilons=zeros),
            loaded.network.predict_logits(x, epsilons=zeros),
        )


def test_running_statistics_survive_round_trip():
    ckpt = next(_checkpoints())
    loaded = checkpoint_from_bytes(checkpoint_bytes(ckpt))
    for a, b in zip(ckpt.network.norm_layers(), loaded.network.norm_layers()):
        assert np.array_equal(a.running_mean, b.running_mean)
        assert np.array_equal(a.running_var, b.running_var)


def test_layout_is_little_endian_with_trailing_crc():
    raw = checkpoint_bytes(Checkpoint(build(SMALL, 0)))
    assert raw[:4] == b"ABNN"
    version, hlen = struct.unpack("<II", raw[4:12])
    assert version == 1
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])
    assert (len(raw) - 12 - hlen - 4) % 8 == 0


def _with_version(raw, version):
    body = raw[:4] + struct.pack("<I", version) + raw[8:-4]
    return body + struct.pack("<I", zlib.crc32(body))


def test_unknown_version_is_rejected():
    raw = checkpoint_bytes(Checkpoint(build(SMALL, 0)))
    with pytest.raises(CheckpointVersionError):
        checkpoint_from_bytes(_with_version(raw, 99))


@pytest.mark.parametrize("cut", [3, 11, 40, -5, -1])
def test_truncated_file_is_rejected(tmp_path, cut):
    raw = checkpoint_bytes(Checkpoint(build(SMALL, 0)))
    (tmp_path / "t.abnn").write_bytes(raw[:cut])
    with pytest.raises(CheckpointIntegrityError):
        load(tmp_path / "t.abnn")


def test_bad_magic_and_flipped_bit():
    raw = bytearray(checkpoint_bytes(Checkpoint(build(SMALL, 0))))
    with pytest.raises(CheckpointIntegrityError):
        checkpoint_from_bytes(b"XXXX" + bytes(raw[4:]))
    raw[-12] ^= 0x01
    with pytest.raises(CheckpointChecksumError):
        checkpoint_from_bytes(bytes(raw))
