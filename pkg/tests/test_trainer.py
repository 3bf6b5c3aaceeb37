import numpy as np
import pytest
import torch

import dvn.trainer as trainer
from dvn.checkpoint import CheckpointFormatError
from dvn.datasets import make_noise_ood, make_synthetic_id
from dvn.errors import NumericError, TrainingError
from dvn.model import encode_for, mi_pairs, mi_estimate, reparameterized_sample
from dvn.nets import flat_parameters, generator
from dvn.scoring import iwae_scores
from dvn.trainer import (
    TrainConfig,
    fit_prior_discriminator,
    load_checkpoint,
    save_checkpoint,
    train_dvn,
)

SMALL = dict(batch_size=64, latent_dim=2, hidden=(16, 16), critic_hidden=16, disc_hidden=16,
             d_z_finetune_epochs=2)


@pytest.fixture(scope="module")
def gmm():
    return make_synthetic_id(3, 2, 600, 6.0, seed=0)


@pytest.fixture(scope="module")
def trained(gmm):
    return train_dvn(gmm, TrainConfig(epochs=8, **SMALL))


def test_zero_epochs_returns_initial_model(gmm):
    model, log = train_dvn(gmm, TrainConfig(epochs=0, **SMALL))
    assert len(log) == 0
    fresh = trainer.VerifierModel(TrainConfig(**SMALL).arch_for(gmm), seed=0)
    np.testing.assert_array_equal(flat_parameters(model), flat_parameters(fresh))


def test_loss_decreases(trained):
    _, log = trained
    total = log.column("total")
    assert total[-1] <= total[0]
    assert list(log.rows[0]) == list(trainer.TrainLog.COLUMNS)


def test_identical_runs_give_identical_checkpoints(gmm, tmp_path):
    cfg = TrainConfig(epochs=2, **SMALL)
    a, _ = train_dvn(gmm, cfg)
    b, _ = train_dvn(gmm, cfg)
    save_checkpoint(a, tmp_path / "a.ckpt", cfg)
    save_checkpoint(b, tmp_path / "b.ckpt", cfg)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def _batch_mi(model, data, seed=0):
    x, y = torch.as_tensor(data.x), torch.as_tensor(data.y)
    g = generator(seed)
    with torch.no_grad():
        z = reparameterized_sample(encode_for(model, x, y), g)
        return mi_estimate(model, *mi_pairs(y, z, g)).item()


def test_mi_penalty_lowers_estimated_mi(gmm):
    cfg = dict(SMALL, epochs=10)
    with_penalty, _ = train_dvn(gmm, TrainConfig(lam=5.0, **cfg))
    without, _ = train_dvn(gmm, TrainConfig(lam=0.0, **cfg))
    assert _batch_mi(with_penalty, gmm) < _batch_mi(without, gmm)


def test_rejects_non_id_training_data():
    with pytest.raises(ValueError):
        train_dvn(make_noise_ood("uniform", 50, 2, seed=0), TrainConfig(epochs=1, **SMALL))


def test_numeric_failure_keeps_last_good(gmm, monkeypatch):
    calls = {"n": 0}
    real = trainer.total_loss
    batches_per_epoch = int(np.ceil(len(gmm) / SMALL["batch_size"]))

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > batches_per_epoch:
            raise NumericError("non-finite reconstruction")
        return real(*args, **kwargs)

    monkeypatch.setattr(trainer, "total_loss", flaky)
    with pytest.raises(TrainingError) as info:
        train_dvn(gmm, TrainConfig(epochs=3, **SMALL))
    assert info.value.epoch == 1
    assert info.value.last_good is not None
    assert np.all(np.isfinite(flat_parameters(info.value.last_good)))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_final_ratio=0.0)
    cfg = TrainConfig(lam=2.5, hidden=(8, 4))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# -- prior discriminator -------------------------------------------------------------

def _disc_prob(disc, z):
    with torch.no_grad():
        return torch.sigmoid(disc(z).squeeze(-1))


def _gaussian_sampler(shift):
    return lambda n, g: shift + torch.randn((n, 2), generator=g, dtype=torch.float64)


def test_discriminator_half_when_distributions_match():
    disc = fit_prior_discriminator(_gaussian_sampler(0.0), 2, steps=400, seed=0)
    z = torch.randn((1000, 2), generator=generator(99), dtype=torch.float64)
    assert torch.all((_disc_prob(disc, z) - 0.5).abs() <= 0.05)
    assert abs(_disc_prob(disc, z).mean().item() - 0.5) <= 0.05


def test_discriminator_separates_shifted_pushforward():
    disc = fit_prior_discriminator(_gaussian_sampler(3.0), 2, steps=600, seed=0)
    g = generator(5)
    prior = torch.randn((1000, 2), generator=g, dtype=torch.float64)
    push = 3.0 + torch.randn((1000, 2), generator=g, dtype=torch.float64)
    acc = 0.5 * ((_disc_prob(disc, prior) > 0.5).double().mean() + (_disc_prob(disc, push) < 0.5).double().mean())
    assert acc.item() >= 0.95


def test_discriminator_label_swap_inverts():
    sampler = _gaussian_sampler(1.0)
    a = fit_prior_discriminator(sampler, 2, steps=1500, seed=0)
    b = fit_prior_discriminator(sampler, 2, steps=1500, seed=0, prior_label=0.0)
    z = torch.randn((1000, 2), generator=generator(3), dtype=torch.float64)
    assert (_disc_prob(a, z) - (1 - _disc_prob(b, z))).abs().mean().item() <= 0.05


# -- checkpoints ---------------------------------------------------------------------

def test_checkpoint_roundtrip_scores_exactly(trained, gmm, tmp_path):
    model, _ = trained
    save_checkpoint(model, tmp_path / "v.ckpt")
    back = load_checkpoint(tmp_path / "v.ckpt")
    a = iwae_scores(model, gmm.x[:20], gmm.y[:20], k=10, seed=4)
    b = iwae_scores(back, gmm.x[:20], gmm.y[:20], k=10, seed=4)
    assert a.tobytes() == b.tobytes()


def test_checkpoint_header_records_hyperparameters(gmm, tmp_path):
    from dvn.checkpoint import read_container

    cfg = TrainConfig(epochs=0, lam=3.25, encoder_conditioning="x_and_y", **SMALL)
    model, _ = train_dvn(gmm, cfg)
    save_checkpoint(model, tmp_path / "v.ckpt", cfg)
    header, _ = read_container(tmp_path / "v.ckpt")
    assert header["lam"] == 3.25
    assert header["latent_dim"] == 2
    assert header["encoder_conditioning"] == "x_and_y"


@pytest.mark.parametrize("cut", [4, 12, 40, -8, -1])
def test_truncated_checkpoint_rejected(trained, tmp_path, cut):
    model, _ = trained
    save_checkpoint(model, tmp_path / "v.ckpt")
    blob = (tmp_path / "v.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:cut])
    with pytest.raises(CheckpointFormatError) as info:
        load_checkpoint(tmp_path / "t.ckpt")
    assert info.value.offset >= 0


def test_corrupted_checkpoint_rejected(trained, tmp_path):
    model, _ = trained
    save_checkpoint(model, tmp_path / "v.ckpt")
    blob = bytearray((tmp_path / "v.ckpt").read_bytes())
    blob[-3] ^= 0xFF
    (tmp_path / "c.ckpt").write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError, match="checksum"):
        load_checkpoint(tmp_path / "c.ckpt")
    blob[0:8] = b"NOTACKPT"
    (tmp_path / "m.ckpt").write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(tmp_path / "m.ckpt")
