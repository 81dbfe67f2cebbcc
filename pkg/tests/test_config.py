import pytest
import torch

from udeblur.config import ABLATIONS, TrainConfig, config_from_dict, lr_at, parse_config
from udeblur.networks import ConfigError
from udeblur.optim import Adam

from oracles import lr_reference


class TestSchedule:
    def test_defaults(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 2e-4
        assert lr_at(39, cfg) == 2e-4
        assert lr_at(79, cfg) == pytest.approx(2e-6, rel=1e-12)

    def test_matches_reference(self):
        cfg = TrainConfig()
        for e in range(cfg.total_epochs):
            assert lr_at(e, cfg) == pytest.approx(lr_reference(e), rel=1e-12)

    def test_monotone(self):
        cfg = TrainConfig(epochs_flat=3, epochs_decay=7)
        lrs = [lr_at(e, cfg) for e in range(10)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert lrs[-1] == pytest.approx(cfg.lr0 / 100)

    def test_no_decay_phase(self):
        cfg = TrainConfig(epochs_flat=5, epochs_decay=0)
        assert [lr_at(e, cfg) for e in range(5)] == [2e-4] * 5

    @pytest.mark.parametrize("epoch", [-1, 80])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError):
            lr_at(epoch, TrainConfig())


class TestConfig:
    def test_echo_roundtrip(self):
        cfg = TrainConfig(lambda_p=0.01, base_width=16, task_preset="text", ablation_preset="kl")
        assert parse_config(cfg.echo()) == cfg
        assert parse_config(cfg.echo()).digest() == cfg.digest()

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# toy\n\nbase_width = 8  # narrow\ncrop_size=32\n")
        assert cfg.base_width == 8 and cfg.crop_size == 32

    @pytest.mark.parametrize(
        "text",
        ["nonsense=1", "batch_size=0", "lambda_cc=-1", "crop_size=36", "task_preset=audio",
         "ablation_preset=none", "batch_size=two", "batch_size=4\nbatch_size=8", "justtext"],
    )
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_ablation_weights(self):
        assert TrainConfig(ablation_preset="disentangle").effective_weights().lambda_kl == 0.0
        assert TrainConfig(ablation_preset="kl").effective_weights().lambda_p == 0.0
        assert TrainConfig(ablation_preset="full").effective_weights() == TrainConfig().weights

    def test_ablations_cumulative(self):
        rows = [ABLATIONS[k] for k in ("deblur_only", "blur_branch", "disentangle", "kl", "full")]
        flags = [sum(vars(a).values()) for a in rows]
        assert flags == [0, 1, 2, 3, 4]

    def test_dict_values_coerced(self):
        assert config_from_dict({"lr0": "1e-3"}).lr0 == 1e-3


class TestAdam:
    def _pair(self):
        g = torch.Generator().manual_seed(0)
        w = torch.randn(5, 3, generator=g, dtype=torch.float64)
        return w.clone().requires_grad_(True), w.clone().requires_grad_(True)

    def test_matches_torch(self):
        a, b = self._pair()
        ours = Adam([("w", a)], lr=1e-2, betas=(0.5, 0.999))
        ref = torch.optim.Adam([b], lr=1e-2, betas=(0.5, 0.999), eps=1e-8)
        for k in range(10):
            for p, opt in ((a, ours), (b, ref)):
                opt.zero_grad()
                ((p - k * 0.1) ** 3).sum().backward()
                opt.step()
        torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-14)

    def test_first_moment_only_first_step(self):
        a, _ = self._pair()
        start = a.detach().clone()
        opt = Adam([("w", a)], lr=0.3, second_moment=False)
        (a**2).sum().backward()
        grad = a.grad.clone()
        opt.step()
        torch.testing.assert_close(a.detach(), start - 0.3 * grad, rtol=0, atol=1e-15)

    def test_zero_lr_keeps_params(self):
        a, _ = self._pair()
        start = a.detach().clone()
        opt = Adam([("w", a)], lr=0.0)
        (a**2).sum().backward()
        opt.step()
        assert torch.equal(a.detach(), start)

    def test_state_roundtrip(self):
        a, b = self._pair()
        opt = Adam([("w", a)], lr=1e-2)
        (a**2).sum().backward()
        opt.step()
        clone = Adam([("w", b)], lr=1e-2)
        clone.load_state_tensors("g", opt.state_tensors("g"), opt.step_count)
        assert clone.step_count == 1
        assert torch.equal(clone.exp_avg[0], opt.exp_avg[0])
        assert set(opt.state_tensors("g")) == {"g/exp_avg/w", "g/exp_avg_sq/w"}

    def test_single_parameter_probe(self):
        w = torch.tensor([0.75], requires_grad=True)
        opt = Adam([("w", w)], lr=0.01, second_moment=False)
        (w * 3.0).sum().backward()
        opt.step()
        assert abs(w.item() - (0.75 - 0.01 * 3.0)) < 1e-7
