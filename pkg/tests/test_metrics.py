import numpy as np
import pytest
from PIL import Image
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from udeblur.features import RandomFeatures
from udeblur.metrics import (
    MetricError,
    MetricsReport,
    character_error_rate,
    cer,
    evaluate,
    feature_distance,
    levenshtein,
    mean_psnr_gain,
    psnr,
    render_summary,
    ssim,
)

from oracles import edit_distance, psnr_reference, ssim_brute_force


def pair(seed, shape=(24, 20, 3)):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 256, shape).astype(np.uint8)
    noise = rng.integers(-30, 31, shape)
    return x, np.clip(x.astype(int) + noise, 0, 255).astype(np.uint8)


class TestPSNR:
    def test_identical_is_capped(self):
        x, _ = pair(0)
        assert psnr(x, x) == 100.0

    @pytest.mark.parametrize("seed", range(5))
    def test_reference(self, seed):
        x, y = pair(seed)
        assert psnr(x, y) == pytest.approx(psnr_reference(x, y), abs=1e-9)
        assert psnr(x, y) == pytest.approx(peak_signal_noise_ratio(x, y, data_range=255), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSSIM:
    def test_identical(self):
        x, _ = pair(1)
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_brute_force(self, seed):
        x, y = pair(seed, (16, 14, 2))
        assert ssim(x, y) == pytest.approx(ssim_brute_force(x, y), abs=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_skimage(self, seed):
        x, y = pair(seed)
        ref = structural_similarity(x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=255, channel_axis=2)
        assert ssim(x, y) == pytest.approx(ref, abs=1e-4)

    def test_grayscale(self):
        x, y = pair(2, (12, 12))
        assert ssim(x, y) == pytest.approx(ssim_brute_force(x, y), abs=1e-9)

    def test_too_small(self):
        with pytest.raises(MetricError):
            ssim(np.zeros((10, 10)), np.zeros((10, 10)))


class TestText:
    def test_kitten(self):
        assert character_error_rate("kitten", "sitting") == 3 / 7

    def test_empty_truth(self):
        with pytest.raises(MetricError):
            character_error_rate("abc", "")

    @pytest.mark.parametrize("a,b", [("", "abc"), ("flaw", "lawn"), ("abcdef", "azced"), ("same", "same")])
    def test_against_recursive(self, a, b):
        assert levenshtein(a, b) == edit_distance(a, b)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(0)
        words = ["".join(rng.choice(list("abc"), rng.integers(0, 7))) for _ in range(15)]
        for a in words:
            for b in words:
                for c in words[:5]:
                    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)

    def test_cer_without_ocr(self, tmp_path):
        assert cer(None, tmp_path / "x.png", "abc") is None

    def test_cer_with_callable(self, tmp_path):
        assert cer(lambda p: "kitten", tmp_path / "x.png", "sitting") == 3 / 7


def test_feature_distance_basic():
    ext = RandomFeatures(in_channels=3, seed=0)
    x, y = pair(3, (16, 16, 3))
    assert feature_distance(ext, x, x) == 0.0
    assert feature_distance(ext, x, y) == pytest.approx(feature_distance(ext, y, x))
    assert feature_distance(ext, x, y) > 0


class TestEvaluate:
    def _dirs(self, tmp_path, n=3):
        res, tru = tmp_path / "res", tmp_path / "tru"
        res.mkdir(), tru.mkdir()
        for i in range(n):
            x, y = pair(i, (16, 16, 3))
            Image.fromarray(x).save(tru / f"{i}.png")
            Image.fromarray(y).save(res / f"{i}.png")
        Image.fromarray(x).save(res / "extra.png")
        return res, tru

    def test_report(self, tmp_path):
        res, tru = self._dirs(tmp_path)
        report = evaluate(res, tru, extractor=RandomFeatures(seed=0))
        assert [m.path for m in report.per_image] == ["0.png", "1.png", "2.png"]
        assert report.unmatched == ["extra"]
        agg = report.aggregates()
        assert agg["psnr"] == pytest.approx(np.mean([m.psnr for m in report.per_image]))
        assert agg["cer"] is None
        text = report.render()
        assert text.splitlines()[-1].startswith("mean\t")
        report.write(tmp_path / "m.tsv")
        assert len((tmp_path / "m.tsv").read_text().splitlines()) == 4

    def test_cer_from_truth_text(self, tmp_path):
        res, tru = self._dirs(tmp_path, 1)
        (tru / "0.txt").write_text("sitting\n")
        report = evaluate(res, tru, preset="text", ocr=lambda p: "kitten")
        assert report.per_image[0].cer == 3 / 7

    def test_nothing_matched(self, tmp_path):
        (tmp_path / "a").mkdir(), (tmp_path / "b").mkdir()
        with pytest.raises(MetricError):
            evaluate(tmp_path / "a", tmp_path / "b")

    def test_summary(self):
        text = render_summary([("full", {"psnr": 20.0, "ssim": 0.5, "d_feat": 1.0})])
        assert text.splitlines()[0] == "Method\tPSNR\tSSIM\td_feat"
        assert MetricsReport([]).aggregates()["psnr"] is None


def test_mean_psnr_gain():
    x, y = pair(0, (12, 12))
    assert mean_psnr_gain([x], [y], [x]) == pytest.approx(100.0 - psnr(y, x))


class TestSpecialCases:
    def test_constant_offset(self):
        x = np.full((12, 12), 100, np.uint8)
        assert psnr(x, x + 5) == pytest.approx(20 * np.log10(255 / 5), abs=1e-9)

    def test_checker_inverse(self):
        x = ((np.indices((12, 12)).sum(0) % 2) * 255).astype(np.uint8)
        assert psnr(x, 255 - x) == pytest.approx(0.0, abs=1e-12)
        assert ssim(x, 255 - x) < 0

    def test_empty_recognition(self):
        assert character_error_rate("", "hello") == 1.0

    def test_same_directory(self, tmp_path):
        for i in range(2):
            x, _ = pair(i, (16, 16, 3))
            Image.fromarray(x).save(tmp_path / f"{i}.png")
        agg = evaluate(tmp_path, tmp_path, extractor=RandomFeatures(seed=0)).aggregates()
        assert agg["psnr"] == 100.0 and agg["ssim"] == pytest.approx(1.0) and agg["d_feat"] == 0.0

    def test_feature_triangle_inequality(self):
        ext = RandomFeatures(in_channels=1, layer="pool5", seed=1)
        rng = np.random.default_rng(0)
        for _ in range(100):
            x, y, z = (rng.integers(0, 256, (16, 16, 1), dtype=np.uint8) for _ in range(3))
            assert feature_distance(ext, x, z) <= feature_distance(ext, x, y) + feature_distance(ext, y, z) + 1e-9
