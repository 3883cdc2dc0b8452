import math
import struct

import numpy as np
import pytest
import torch

from octpad import autoencoder as ae
from octpad.bscan_io import BScan, ScanVolume
from octpad.errors import ConfigError, CorruptionError, DivergenceError, IncompatibleCheckpointError, ZeroPAViolation
from octpad.preprocess import PreprocessConfig, preprocess_volume
from octpad.synth import SynthParams, generate_volume

TINY = ae.AEConfig(input_height=16, input_width=32, encoder_blocks=2, decoder_blocks=3,
                   base_channels=2, epochs=2, batch_size=2, seed=5)


def _volume(cfg, n=4, label="Bonafide", seed=1):
    rng = np.random.default_rng(seed)
    return ScanVolume.from_arrays(f"v{seed}", label, rng.random((n, cfg.input_height, cfg.input_width)))


def test_default_architecture_and_optimiser():
    cfg = ae.AEConfig()
    assert (cfg.encoder_blocks, cfg.decoder_blocks) == (5, 6)
    assert cfg.atrous_rates == (1, 2, 5) and cfg.kernel == 3
    assert cfg.init_std == 0.02
    assert (cfg.adam_beta1, cfg.adam_beta2) == (0.9, 0.999)


@pytest.mark.parametrize("kw", [dict(decoder_blocks=4), dict(input_height=60), dict(atrous_rates=(0, 1)),
                                dict(learning_rate=0.0), dict(kernel=4), dict(batch_size=0)])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        ae.AEConfig(**kw)


def test_bottleneck_dims():
    model = ae.build_model(ae.AEConfig())
    x = torch.zeros(1, 1, 64, 192)
    h = model.net.stem(x)
    for res, down in zip(model.net.res_blocks, model.net.downs):
        h = down(res(h))
    assert tuple(h.shape[-2:]) == (2, 6)


def test_forward_zeros_finite():
    model = ae.build_model(ae.AEConfig())
    out = model.forward(np.zeros((64, 192)))
    assert out.shape == (1, 64, 192)
    assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1


def test_same_seed_same_weights():
    a, b = ae.build_model(TINY).weights, ae.build_model(TINY).weights
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = ae.build_model(ae.AEConfig(**{**TINY.to_dict(), "seed": 6})).weights
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_init_distribution():
    w = torch.cat([t.flatten() for k, t in ae.build_model(ae.AEConfig()).weights.items() if k.endswith("weight")])
    assert abs(float(w.mean())) < 1e-3
    assert float(w.std()) == pytest.approx(0.02, rel=0.02)


def test_training_converges_on_eight_bscans():
    # shallow variant: a 0.02-std init makes the full-depth stack nearly
    # input-blind, and 20 epochs of 8 images are too few steps to escape that
    cfg = ae.AEConfig(encoder_blocks=3, decoder_blocks=3, batch_size=1, seed=0)
    vol = preprocess_volume(generate_volume(SynthParams(seed=1, bscans_per_volume=8)),
                            PreprocessConfig(target_height=64, target_width=192))
    model = ae.train(ae.build_model(cfg), [vol])
    assert len(model.history) == 20 and model.trained
    assert model.history[-1] < 0.5 * model.history[0]


def test_training_rejects_pa():
    with pytest.raises(ZeroPAViolation):
        ae.train(ae.build_model(TINY), [_volume(TINY), _volume(TINY, label="PA", seed=2)])


def test_training_rejects_empty_set():
    with pytest.raises(ValueError, match="empty model set"):
        ae.train(ae.build_model(TINY), [])


def test_training_rejects_wrong_size():
    with pytest.raises(ValueError):
        ae.train(ae.build_model(TINY), [ScanVolume.from_arrays("w", "Bonafide", [np.zeros((8, 8))])])


def test_zero_epochs_is_noop():
    cfg = ae.AEConfig(**{**TINY.to_dict(), "epochs": 0})
    before = {k: t.clone() for k, t in ae.build_model(cfg).weights.items()}
    model = ae.train(ae.build_model(cfg), [_volume(cfg)])
    assert all(torch.equal(before[k], model.weights[k]) for k in before)
    assert model.history == []


def test_training_is_reproducible():
    vols = [_volume(TINY, seed=1), _volume(TINY, seed=2)]
    a = ae.train(ae.build_model(TINY), vols)
    b = ae.train(ae.build_model(TINY), vols)
    assert a.history == b.history
    assert all(torch.equal(a.weights[k], b.weights[k]) for k in a.weights)


def test_divergence_reports_epoch_and_batch():
    model = ae.build_model(TINY)
    with torch.no_grad():
        model.net.stem.bias.fill_(float("nan"))
    with pytest.raises(DivergenceError) as info:
        ae.train(model, [_volume(TINY)])
    assert (info.value.epoch, info.value.batch) == (0, 0)


def test_epoch_callback():
    seen = []
    ae.train(ae.build_model(TINY), [_volume(TINY)], on_epoch=lambda e, loss: seen.append((e, loss)))
    assert [e for e, _ in seen] == [0, 1]


def test_reconstruct_contract():
    model = ae.build_model(TINY)
    x = BScan(np.random.default_rng(0).random((16, 32)))
    xhat, fs = ae.reconstruct(model, x)
    assert xhat.pixels.shape == x.pixels.shape
    assert len(fs) == TINY.decoder_blocks
    assert fs.shapes[-1] == (16, 32, 1)
    again, fs2 = ae.reconstruct(model, x)
    np.testing.assert_array_equal(again.pixels, xhat.pixels)
    for a, b in zip(fs, fs2):
        np.testing.assert_array_equal(a, b)


def test_reconstruct_rejects_wrong_dims():
    with pytest.raises(ValueError):
        ae.reconstruct(ae.build_model(TINY), BScan(np.zeros((16, 16))))


def test_feature_shapes_grow_to_input():
    _, fs = ae.reconstruct(ae.build_model(ae.AEConfig()), BScan(np.zeros((64, 192))))
    assert [s[:2] for s in fs.shapes] == [(4, 12), (8, 24), (16, 48), (32, 96), (64, 192), (64, 192)]


def test_raw_error_examples():
    assert ae.raw_error(np.full((3, 3), 0.4), np.full((3, 3), 0.4)) == 0.0
    n = 12 * 7
    assert ae.raw_error(np.ones((12, 7)), np.zeros((12, 7))) == pytest.approx(1 / math.sqrt(n), abs=1e-15)
    assert ae.raw_error(np.array([[0.3, 0.0], [0.0, 0.4]]), np.zeros((2, 2))) == pytest.approx(0.125, abs=1e-15)
    with pytest.raises(ValueError):
        ae.raw_error(np.zeros((2, 2)), np.zeros((2, 3)))


def test_loss_zero_iff_perfect():
    x = torch.rand(3, 1, 4, 4, generator=torch.Generator().manual_seed(1))
    assert ae.reconstruction_loss(x, x).item() == 0.0
    y = x.clone()
    y[0, 0, 0, 0] += 1e-3
    assert ae.reconstruction_loss(y, x).item() > 0.0


def test_checkpoint_round_trip(tmp_path):
    model = ae.train(ae.build_model(TINY), [_volume(TINY)])
    digest = ae.save_model(model, tmp_path / "m.ckpt")
    back = ae.load_model(tmp_path / "m.ckpt")
    assert back.config == model.config and back.trained
    probe = np.random.default_rng(3).random((2, 16, 32))
    np.testing.assert_array_equal(back.forward(probe), model.forward(probe))
    assert ae.model_digest(back) == digest


def test_checkpoint_truncated(tmp_path):
    data = ae.model_to_bytes(ae.build_model(TINY))
    for cut in (4, 15, len(data) // 2, len(data) - 1):
        (tmp_path / "t.ckpt").write_bytes(data[:cut])
        with pytest.raises(CorruptionError):
            ae.load_model(tmp_path / "t.ckpt")


def test_checkpoint_future_version(tmp_path):
    data = bytearray(ae.model_to_bytes(ae.build_model(TINY)))
    struct.pack_into("<I", data, len(ae.CHECKPOINT_MAGIC), ae.CHECKPOINT_VERSION + 1)
    (tmp_path / "f.ckpt").write_bytes(bytes(data))
    with pytest.raises(IncompatibleCheckpointError):
        ae.load_model(tmp_path / "f.ckpt")


def test_checkpoint_trailing_bytes(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(ae.model_to_bytes(ae.build_model(TINY)) + b"\0")
    with pytest.raises(CorruptionError):
        ae.load_model(tmp_path / "x.ckpt")


def test_gradient_matches_finite_differences():
    cfg = ae.AEConfig(input_height=8, input_width=8, encoder_blocks=1, decoder_blocks=1,
                      base_channels=2, init_std=0.3, seed=8)
    net = ae.build_model(cfg).net.double()
    x = torch.from_numpy(np.random.default_rng(2).random((3, 1, 8, 8)))
    net.zero_grad()
    ae.reconstruction_loss(net(x), x).backward()
    rel = []
    with torch.no_grad():
        for p in net.parameters():
            flat, grad = p.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                keep = flat[i].item()
                flat[i] = keep + 1e-4
                up = ae.reconstruction_loss(net(x), x).item()
                flat[i] = keep - 1e-4
                down = ae.reconstruction_loss(net(x), x).item()
                flat[i] = keep
                num, ana = (up - down) / 2e-4, grad[i].item()
                rel.append(abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    assert np.mean(np.array(rel) <= 1e-3) >= 0.95
