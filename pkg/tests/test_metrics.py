import math

import numpy as np
import pytest

from derender.color import ColorState
from derender.image import Image
from derender.mapping import init_baseline
from derender.metrics import COLUMNS, PSNR_CAP, evaluate_protocol, format_report, psnr, psnr_stats, ssim
from derender.synth import SceneSpec, apply_pipeline, embed_pipeline, render_scene, sample_pipeline


def naive_psnr(a, b):
    total, n = 0.0, 0
    for c in range(a.shape[0]):
        for i in range(a.shape[1]):
            for j in range(a.shape[2]):
                total += (a[c, i, j] - b[c, i, j]) ** 2
                n += 1
    return 10 * math.log10(1.0 / (total / n))


def naive_ssim(a, b, size=11, sigma=1.5):
    c1, c2 = 0.01**2, 0.03**2
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * sigma**2))
    g /= g.sum()
    per_ch = []
    for ch in range(a.shape[0]):
        vals = []
        for i in range(a.shape[1] - size + 1):
            for j in range(a.shape[2] - size + 1):
                pa, pb = a[ch, i : i + size, j : j + size], b[ch, i : i + size, j : j + size]
                ma, mb = (g * pa).sum(), (g * pb).sum()
                va = (g * (pa - ma) ** 2).sum()
                vb = (g * (pb - mb) ** 2).sum()
                cov = (g * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
        per_ch.append(np.mean(vals))
    return float(np.mean(per_ch))


def test_psnr_values(rng):
    a = np.full((3, 4, 4), 0.5)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == math.inf
    x, y = rng.uniform(size=(3, 9, 7)), rng.uniform(size=(3, 9, 7))
    assert psnr(x, y) == pytest.approx(naive_psnr(x, y), abs=1e-9)
    assert psnr(x, y) == psnr(y, x)
    assert psnr(x, x + 1.5 * (y - x)) < psnr(x, y)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 2, 2)), np.zeros((3, 2, 3)))
    with pytest.raises(ValueError):
        psnr(Image(np.zeros((3, 2, 2)), ColorState.SRGB), Image(np.zeros((3, 2, 2)), ColorState.XYZ))


def test_psnr_stats():
    r = psnr_stats([10, 20, 30, 40])
    assert (r.avg, r.q1, r.q2, r.q3) == (25, 17.5, 25, 32.5)
    r = psnr_stats([7.5])
    assert r.avg == r.q1 == r.q2 == r.q3 == 7.5
    r = psnr_stats([math.inf, 30.0])
    assert r.per_image[0] == math.inf and r.avg == pytest.approx((PSNR_CAP + 30) / 2)
    with pytest.raises(ValueError):
        psnr_stats([])


def test_quartiles_brute_force(rng):
    for n in range(1, 101):
        v = rng.uniform(10, 60, n)
        s = sorted(v)
        r = psnr_stats(v)
        perm = psnr_stats(rng.permutation(v))
        assert (r.avg, r.q1, r.q2, r.q3) == pytest.approx((perm.avg, perm.q1, perm.q2, perm.q3), abs=1e-12)
        for q, got in ((0.25, r.q1), (0.5, r.q2), (0.75, r.q3)):
            pos = q * (n - 1)
            lo = int(pos)
            expect = s[lo] + (pos - lo) * (s[min(lo + 1, n - 1)] - s[lo])
            assert got == pytest.approx(expect, abs=1e-12)
        assert r.q1 <= r.q2 <= r.q3


def test_ssim_values(rng):
    a = np.full((3, 16, 16), 0.25)
    b = np.full((3, 16, 16), 0.75)
    c1 = 0.01**2
    closed = (2 * 0.25 * 0.75 + c1) / (0.25**2 + 0.75**2 + c1)
    assert ssim(a, b) == pytest.approx(closed, abs=1e-12)
    assert ssim(a, b) == pytest.approx(0.60007, abs=1e-4)
    x, y = rng.uniform(size=(3, 15, 14)), rng.uniform(size=(3, 15, 14))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)
    assert ssim(x, y) == pytest.approx(naive_ssim(x, y), abs=1e-6)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-9)
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 10, 20)), np.zeros((3, 10, 20)))


def test_protocol_shape_and_oracle_models():
    p = sample_pipeline(2)
    f, g = embed_pipeline(p)
    pairs = []
    for i in range(3):
        xyz = render_scene(SceneSpec(32, 32, seed=i))
        pairs.append((apply_pipeline(p, xyz), xyz))
    rep = evaluate_protocol(f, g, pairs)
    assert tuple(rep.columns) == COLUMNS
    for col in COLUMNS:
        assert rep.columns[col].avg == PSNR_CAP
    assert rep.ssim_avg == pytest.approx(1.0, abs=1e-9)
    text = format_report(rep, "oracle").splitlines()
    assert len(text) == 3 and len(text[0].split("\t")) == 13 and text[2].startswith("Average SSIM")


def test_protocol_empty():
    with pytest.raises(ValueError):
        evaluate_protocol(init_baseline("srgb2xyz"), init_baseline("xyz2srgb"), [])
