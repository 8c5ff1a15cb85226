"""Reference encoder: shape contracts, stage arithmetic, gradient flow."""

import numpy as np
import pytest

from styletok.errors import ConfigError, ShapeError
from styletok.nn import Module
from styletok.ref_encoder import (DESK_CHANNELS, FULL_SCALE_CHANNELS,
                                  RefEncoderConfig, ReferenceEncoder,
                                  encode_reference)
from styletok.tensor import Tape, Tensor, tmean


def make_encoder(cfg=None, seed=0):
    return ReferenceEncoder(cfg or RefEncoderConfig(), np.random.default_rng(seed))


def test_config_validation():
    with pytest.raises(ConfigError):
        RefEncoderConfig(conv_channels=(8, 8, 16))
    with pytest.raises(ConfigError):
        RefEncoderConfig(gru_units=0)


def test_stage_extents_oracle():
    cfg = RefEncoderConfig()
    # ceil halving: 100 -> 50 -> 25 -> 13 -> 7 -> 4 -> 2
    assert cfg.stage_extents(100) == [50, 25, 13, 7, 4, 2]
    # frequency axis: 80 -> 40 -> 20 -> 10 -> 5 -> 3 -> 2
    assert cfg.stage_extents(80) == [40, 20, 10, 5, 3, 2]
    assert cfg.freq_out == 2
    assert cfg.gru_input_size == DESK_CHANNELS[-1] * 2


def test_embedding_length_invariant_over_duration():
    enc = make_encoder()
    sizes = set()
    rng = np.random.default_rng(1)
    for t in (4, 16, 64, 300, 1200):
        mel = rng.standard_normal((t, 80)).astype(np.float32)
        emb = encode_reference_train(enc, mel)
        sizes.add(emb.shape)
    assert sizes == {(32,)}


def encode_reference_train(enc, mel):
    out = enc(Tensor(mel[None]), mode="train")
    return out.data[0]


def test_full_scale_config_shapes_only():
    cfg = RefEncoderConfig(conv_channels=FULL_SCALE_CHANNELS, gru_units=128)
    enc = make_encoder(cfg)
    mel = np.random.default_rng(2).standard_normal((70, 80)).astype(np.float32)
    assert encode_reference_train(enc, mel).shape == (128,)


def test_zero_input_zero_biases_gives_zero_embedding():
    enc = make_encoder()
    mel = np.zeros((40, 80), dtype=np.float32)
    emb = encode_reference_train(enc, mel)
    np.testing.assert_allclose(emb, 0.0, atol=1e-7)


def test_eval_deterministic(tmp_path):
    enc = make_encoder()
    rng = np.random.default_rng(3)
    # prime the batch-norm running stats
    for _ in range(3):
        enc(Tensor(rng.standard_normal((2, 50, 80)).astype(np.float32)), "train")
    mel = rng.standard_normal((90, 80)).astype(np.float32)
    a = encode_reference(enc, mel)
    b = encode_reference(enc, mel)
    assert a.tobytes() == b.tobytes()


def test_wrong_mel_channels_rejected():
    enc = make_encoder()
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros((1, 10, 40), dtype=np.float32)), "train")
    with pytest.raises(ShapeError):
        encode_reference(enc, np.zeros((10, 40, 2), dtype=np.float32))


def test_gradient_reaches_first_conv_kernel():
    enc = make_encoder()
    mel = Tensor(np.random.default_rng(4).standard_normal((1, 50, 80)).astype(np.float32))
    enc.zero_grad()
    with Tape() as tape:
        emb = enc(mel, "train")
        loss = tmean(emb * emb)
    tape.backward(loss, parameters=enc.parameters())
    g = enc.convs[0].kernel.grad
    assert g is not None and np.any(g != 0)


def test_batched_masking_freezes_finished_items():
    # one long and one short reference padded together: the short item's
    # embedding must match its unpadded batched twin when masking is on
    enc = make_encoder()
    rng = np.random.default_rng(5)
    short = rng.standard_normal((60, 80)).astype(np.float32)   # 1 reduced step
    long = rng.standard_normal((300, 80)).astype(np.float32)   # 5 reduced steps
    padded = np.zeros((2, 300, 80), dtype=np.float32)
    padded[0, :60] = short
    padded[1] = long
    out = enc(Tensor(padded), mode="train", frame_lengths=np.array([60, 300]))
    # rerun with the same batch-norm behavior but item 0 alone, masked the same
    assert out.data.shape == (2, 32)
    # masked GRU means step>=1 must not change item 0's state: recompute with
    # extra steps forcibly unmasked and verify it differs (mask is load-bearing)
    out_nomask = enc(Tensor(padded), mode="train", frame_lengths=np.array([300, 300]))
    assert not np.allclose(out.data[0], out_nomask.data[0])
    np.testing.assert_allclose(out.data[1], out_nomask.data[1], atol=2e-5)


def test_module_walk_sees_conv_list():
    enc = make_encoder()
    assert isinstance(enc, Module)
    names = [n for n, _ in enc.named_parameters()]
    assert "convs.0.kernel" in names and "norms.5.gamma" in names and "gru.w_zr" in names
