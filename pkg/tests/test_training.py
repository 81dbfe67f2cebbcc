import numpy as np
import pytest
import torch

from udeblur.blur import TrajectoryParams
from udeblur.checkpoint import CheckpointError, load_model, read_checkpoint, save_checkpoint
from udeblur.config import ABLATIONS, TrainConfig
from udeblur.networks import SHARED_NAME, init_model
from udeblur.toydata import make_toy_corpus
from udeblur.training import (
    DivergenceError,
    ImagePool,
    TranslationBundle,
    deblur,
    deblur_image,
    draw_noise,
    forward_backward_translate,
    generator_losses,
    make_extractor,
    make_optimizers,
    train,
    train_step,
)

TINY = TrainConfig(image_channels=1, base_width=4, latent_dim=4, crop_size=16, batch_size=2,
                   epochs_flat=1, epochs_decay=1, iters_per_epoch=2)


def batch(seed, n=2, size=16, channels=1):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, channels, size, size, generator=g) * 2 - 1


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return make_toy_corpus(tmp_path_factory.mktemp("toy"), n_images=12, n_train=8, size=16,
                           params=TrajectoryParams(max_len=2.0), kernel_size=7)


class TestTranslate:
    def test_full_bundle(self):
        m = init_model(TINY.net, 0)
        out = forward_backward_translate(m, batch(0), batch(1), generator=torch.Generator().manual_seed(0))
        for name in ("s_b", "b_hat", "b_s", "s_hat"):
            assert getattr(out, name).shape == (2, 1, 16, 16)
        assert out.posterior_b is not None and out.posterior_bs is not None

    def test_explicit_noise_reproducible(self):
        m = init_model(TINY.net, 0)
        noise = draw_noise(m, 2, torch.Generator().manual_seed(3))
        a = forward_backward_translate(m, batch(0), batch(1), noise)
        b = forward_backward_translate(m, batch(0), batch(1), noise)
        assert torch.equal(a.s_hat, b.s_hat)

    def test_deblur_only_ablation(self):
        m = init_model(TINY.net, 0)
        out = forward_backward_translate(m, batch(0), batch(1), ablation=ABLATIONS["deblur_only"])
        assert out.b_s is None and out.s_hat is None and out.posterior_b is None
        assert out.b_hat is not None

    def test_shape_mismatch(self):
        m = init_model(TINY.net, 0)
        with pytest.raises(ValueError):
            forward_backward_translate(m, batch(0), batch(1, size=24))


class TestTrainStep:
    def test_zero_lr_leaves_model_unchanged(self):
        m = init_model(TINY.net, 0)
        before = {k: v.clone() for k, v in m.state_dict().items()}
        opts = make_optimizers(m, TINY, lr=0.0)
        train_step(m, batch(0), batch(1), opts, TINY, make_extractor(TINY), torch.Generator().manual_seed(0))
        for k, v in m.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_updates_and_tie(self):
        m = init_model(TINY.net, 0)
        opts = make_optimizers(m, TINY)
        start = m.shared_content.body[0].weight.clone()
        losses = train_step(m, batch(0), batch(1), opts, TINY, make_extractor(TINY), torch.Generator().manual_seed(0))
        assert set(losses.as_floats()) == {"kl", "adv_ds", "adv_db", "cycle", "perceptual", "total"}
        assert not torch.equal(m.shared_content.body[0].weight, start)
        assert m.enc_content_blur.shared is m.enc_content_sharp.shared
        assert all(p.requires_grad for p in m.parameters())

    def test_step_deterministic(self):
        outs = []
        for _ in range(2):
            m = init_model(TINY.net, 1)
            l = train_step(m, batch(0), batch(1), make_optimizers(m, TINY), TINY, make_extractor(TINY),
                           torch.Generator().manual_seed(5))
            outs.append((l.as_floats(), m.gen_sharp.up[0].weight.clone()))
        assert outs[0][0] == outs[1][0]
        assert torch.equal(outs[0][1], outs[1][1])

    @pytest.mark.parametrize("preset", list(ABLATIONS))
    def test_every_ablation_runs(self, preset):
        from dataclasses import replace
        cfg = replace(TINY, ablation_preset=preset)
        m = init_model(cfg.net, 0)
        l = train_step(m, batch(0), batch(1), make_optimizers(m, cfg), cfg, make_extractor(cfg),
                       torch.Generator().manual_seed(0))
        assert np.isfinite(list(l.as_floats().values())).all()
        if preset != "full":
            assert l.perceptual.item() == 0.0

    def test_non_finite_posterior_is_divergence(self):
        m = init_model(TINY.net, 0)
        bundle = forward_backward_translate(m, batch(0), batch(1))
        bundle.posterior_b.mu[0, 0] = float("nan")
        with pytest.raises(DivergenceError, match="kl"):
            generator_losses(m, bundle, TINY, make_extractor(TINY))


class TestPool:
    def test_sample_shape_and_determinism(self):
        imgs = [np.random.default_rng(i).uniform(-1, 1, (20, 18, 1)) for i in range(3)]
        pool = ImagePool(imgs, 16)
        a = pool.sample(np.random.default_rng(0), 4)
        b = pool.sample(np.random.default_rng(0), 4)
        assert a.shape == (4, 1, 16, 16) and torch.equal(a, b)

    def test_too_small(self):
        with pytest.raises(Exception):
            ImagePool([np.zeros((8, 8, 1))], 16)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = init_model(TINY.net, 3)
        opts = make_optimizers(m, TINY)
        train_step(m, batch(0), batch(1), opts, TINY, make_extractor(TINY), torch.Generator().manual_seed(0))
        path = save_checkpoint(tmp_path / "c.safetensors", m, opts.as_dict(), epoch=4, train_config=TINY)
        m2, tensors, meta = load_model(path)
        for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
            assert n1 == n2 and torch.equal(p1, p2)
        assert m2.enc_content_blur.shared is m2.enc_content_sharp.shared
        assert meta["epoch"] == "4" and meta["config_hash"] == TINY.digest()
        assert not any(".shared." in k for k in tensors)
        assert any(k.startswith(f"model/{SHARED_NAME}.") for k in tensors)
        assert "optim/gen/exp_avg/gen_sharp.up.0.weight" in tensors

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "none.safetensors")

    def test_config_mismatch(self, tmp_path):
        path = save_checkpoint(tmp_path / "c.safetensors", init_model(TINY.net, 0))
        from dataclasses import replace
        with pytest.raises(CheckpointError):
            load_model(path, replace(TINY.net, base_width=8))


class TestTrainLoop:
    def test_resume_matches_uninterrupted(self, corpus, tmp_path):
        full = train(TINY, corpus.sharp_train, corpus.blurred_train, tmp_path / "a")
        first = train(TINY, corpus.sharp_train, corpus.blurred_train, tmp_path / "b", max_epochs=1)
        resumed = train(TINY, corpus.sharp_train, corpus.blurred_train, tmp_path / "b", resume=first)
        assert (tmp_path / "a" / "metrics.tsv").read_text() == (tmp_path / "b" / "metrics.tsv").read_text()
        a, _ = read_checkpoint(full)
        b, _ = read_checkpoint(resumed)
        assert a.keys() == b.keys()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_config_echo_written(self, corpus, tmp_path):
        train(TINY, corpus.sharp_train, corpus.blurred_train, tmp_path, max_epochs=1)
        assert (tmp_path / "config.txt").read_text() == TINY.echo()
        assert [p.name for p in tmp_path.glob("*.safetensors")] == ["ckpt_epoch000.safetensors"]
        header, *rows = (tmp_path / "metrics.tsv").read_text().splitlines()
        assert header.lstrip("#").split("\t") == ["epoch", "iter", "kl", "adv_ds", "adv_db", "cycle",
                                                   "perceptual", "total", "lr"]
        assert len(rows) == TINY.iters_per_epoch

    def test_resume_with_other_config_rejected(self, corpus, tmp_path):
        from dataclasses import replace
        ck = train(TINY, corpus.sharp_train, corpus.blurred_train, tmp_path, max_epochs=1)
        with pytest.raises(CheckpointError):
            train(replace(TINY, lambda_cc=5.0), corpus.sharp_train, corpus.blurred_train, tmp_path, resume=ck)


class TestDeblur:
    def test_any_size(self):
        m = init_model(TINY.net, 0)
        img = np.random.default_rng(0).uniform(-1, 1, (13, 21, 1))
        out = deblur_image(m, img)
        assert out.shape == img.shape and np.all(np.abs(out) <= 1)

    def test_uses_posterior_mean(self):
        m = init_model(TINY.net, 0)
        x = batch(2, size=16)
        with torch.no_grad():
            from udeblur.networks import blur_encode, content_encode, generate
            expected = generate(m, "sharp", content_encode(m, "blurred", x), blur_encode(m, x).mu)
        assert torch.equal(deblur(m, x), expected)


def test_flat_crops_redrawn():
    flat = np.full((16, 16, 1), 0.5)
    textured = np.random.default_rng(0).uniform(-1, 1, (16, 16, 1))
    batch = ImagePool([flat, textured], 16, flip=False).sample(np.random.default_rng(1), 8)
    assert all(b.std() > 0 for b in batch)
    with pytest.raises(Exception, match="no crop"):
        ImagePool([flat], 16).sample(np.random.default_rng(0), 1)
