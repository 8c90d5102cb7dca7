import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffunfold.data import (DataError, denormalize, gen_synthetic, load_images, normalize_percentile,
                             save_png)
from diffunfold.metrics import MetricReport, psnr, ssim
from diffunfold.numerics import Rng
from diffunfold.oracle import GaussianPriorSpec


def test_psnr_values():
    ref = np.zeros((10, 10))
    exact = psnr(ref, ref)
    assert exact == 99.0 and exact.capped
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-12)
    assert not psnr(ref + 0.1, ref).capped
    assert psnr(ref + 1.0, ref) == pytest.approx(0.0, abs=1e-12)
    assert psnr(ref + 2.0, ref, peak=2.0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


def test_ssim_identity_and_near_identity():
    x = Rng(0).uniform(size=(16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    flat = np.full((16, 16), 0.5)
    v = ssim(flat + 1e-6 * Rng(1).normal((16, 16)), flat)
    assert 0.9 < v <= 1.0
    with pytest.raises(ValueError):
        ssim(np.zeros((6, 6)), np.zeros((6, 6)))


def test_ssim_single_window_brute_force():
    rng = Rng(2)
    x, r = rng.uniform(size=(7, 7)), rng.uniform(size=(7, 7))
    n = 49
    mx, mr = x.mean(), r.mean()
    vx = np.sum((x - mx) ** 2) / (n - 1)
    vr = np.sum((r - mr) ** 2) / (n - 1)
    cxr = np.sum((x - mx) * (r - mr)) / (n - 1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ref = (2 * mx * mr + c1) * (2 * cxr + c2) / ((mx ** 2 + mr ** 2 + c1) * (vx + vr + c2))
    assert abs(ssim(x, r) - ref) < 1e-10


def test_ssim_matches_scikit_image():
    from skimage.metrics import structural_similarity

    rng = Rng(3)
    x = rng.uniform(size=(32, 40))
    r = np.clip(x + 0.1 * rng.normal((32, 40)), 0, 1)
    ref = structural_similarity(x, r, win_size=7, data_range=1.0, gaussian_weights=False,
                                use_sample_covariance=True)
    assert abs(ssim(x, r) - ref) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_metrics_symmetric_and_bounded(seed):
    rng = Rng(seed)
    x, r = rng.uniform(size=(1, 12, 12)), rng.uniform(size=(1, 12, 12))
    assert psnr(x, r) == psnr(r, x)
    s = ssim(x, r)
    assert s == pytest.approx(ssim(r, x), abs=1e-14)
    assert -1.0 <= s <= 1.0


def test_metric_report_outputs(tmp_path):
    rep = MetricReport(fingerprint="abc")
    x = Rng(4).uniform(size=(1, 8, 8))
    rep.add("same", x, x)
    rep.add("noisy", np.clip(x + 0.05, 0, 1), x)
    s = rep.summary()
    assert s["n"] == 2 and s["any_capped"] and s["fingerprint"] == "abc"
    rep.to_csv(tmp_path / "m.csv")
    rep.to_jsonl(tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["capped"] is True
    assert json.loads(lines[-1])["summary"]["n"] == 2
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "name,psnr,ssim,capped"


@pytest.mark.parametrize("kind", ["grf", "shapes"])
def test_synthetic_images_in_range_and_deterministic(kind):
    a = gen_synthetic(kind, 6, 32, Rng(5)).items
    b = gen_synthetic(kind, 6, 32, Rng(5)).items
    assert a.shape == (6, 1, 32, 32)
    assert a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, b)
    assert a.std() > 0.01


def test_gauss1d_covariance():
    B = Rng(6).normal((3, 3))
    prior = GaussianPriorSpec([0.1, 0.2, -0.3], B @ B.T + 0.5 * np.eye(3))
    items = gen_synthetic("gauss1d", 10 ** 5, 0, Rng(7), prior=prior).items
    emp = np.cov(items.T)
    assert np.linalg.norm(emp - prior.cov) / np.linalg.norm(prior.cov) < 0.05
    with pytest.raises(ValueError):
        gen_synthetic("noise", 2, 8, Rng(0))


def test_normalize_percentile():
    x = Rng(8).uniform(size=1000) * 3
    n = normalize_percentile(x)
    np.testing.assert_allclose(denormalize(n.data, n.scale), x, atol=1e-12)
    np.testing.assert_allclose(normalize_percentile(10 * x).data, n.data, atol=1e-12)
    np.testing.assert_allclose(normalize_percentile(n.data).data, n.data, atol=1e-12)
    with pytest.raises(DataError):
        normalize_percentile(np.zeros(10))


def test_png_round_trips(tmp_path):
    img = Rng(9).uniform(size=(1, 12, 10))
    save_png(tmp_path / "a.png", img)
    save_png(tmp_path / "b.png", np.zeros((12, 10)))
    ds = load_images(tmp_path)
    assert ds.items.shape == (2, 1, 12, 10)
    assert np.max(np.abs(ds.items[0] - img)) <= 1 / 255
    assert np.all(ds.items[1] == 0)


def test_png_full_scale(tmp_path):
    save_png(tmp_path / "w8.png", np.ones((4, 4)), bits=8)
    assert load_images(tmp_path).items.max() == 1.0
    (tmp_path / "w8.png").unlink()
    save_png(tmp_path / "w16.png", np.ones((4, 4)), bits=16)
    assert load_images(tmp_path).items.max() == 1.0


def test_load_images_errors(tmp_path):
    save_png(tmp_path / "a.png", np.zeros((4, 4)))
    save_png(tmp_path / "b.png", np.zeros((5, 4)))
    with pytest.raises(DataError, match="b.png"):
        load_images(tmp_path)
    (tmp_path / "b.png").write_bytes(b"not an image")
    with pytest.raises(DataError, match="b.png"):
        load_images(tmp_path)
    with pytest.raises(DataError):
        load_images(tmp_path / "missing")
