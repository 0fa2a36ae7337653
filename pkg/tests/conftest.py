import numpy as np
import pytest

from derender.chart import ChartAnnotation, ChartReference, chart_delta_e
from derender.color import ColorState
from derender.image import Image
from derender.mapping import _curve_forward, init_baseline, poly_basis
from derender.training import prepare_chart_item


def perturbed_models(seed: int, scale: float = 0.05):
    """Baseline F and G nudged off the identity so G(F(x)) - x is not exactly zero."""
    rng = np.random.default_rng(seed)
    f = init_baseline("srgb2xyz")
    g = init_baseline("xyz2srgb")
    f = f.with_params(f.param_vector + scale * rng.standard_normal(f.n_params))
    g = g.with_params(g.param_vector + scale * rng.standard_normal(g.n_params))
    return f, g


def _far_from(values, knots, margin):
    return np.min(np.abs(values[..., None] - knots), axis=-1) > margin


def kink_free(f, g, xs, xt, margin=5e-3):
    """Column mask of pixels where every piecewise-linear/clamp/sign kink is at least ``margin`` away."""
    grid = np.linspace(0.0, 1.0, f.knots + 1)
    ok = np.all(_far_from(xs, grid, margin), axis=0)
    yf_raw = f.matrix @ poly_basis(_curve_forward(f.ordinates(), xs)[0])
    ok &= np.all(yf_raw > margin, axis=0)
    yf = np.maximum(yf_raw, 0.0)
    v = g.matrix @ poly_basis(yf)
    ok &= np.all((v > margin) & (v < 1 - margin), axis=0)
    yg = g.ordinates()
    for ch in range(3):
        ok &= _far_from(v[ch], yg[ch], margin)
    ys = g(yf)
    ok &= np.all(np.abs(ys - xs) > margin, axis=0)
    if xt is not None:
        ok &= np.all(np.abs(yf - xt) > margin, axis=0)
    return ok


def relative_error(fd, an, floor=1e-6):
    return float(np.max(np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)))


def supervised_fixture(seed: int, n: int = 400):
    """(f, g, batch) with a kink-free paired batch of 1-row images."""
    rng = np.random.default_rng(seed)
    f, g = perturbed_models(seed)
    xs = rng.uniform(0.05, 0.95, (3, n))
    xt = xs ** 2.0 * 0.9 + 0.02 * rng.standard_normal((3, n))
    keep = kink_free(f, g, xs, xt)
    xs, xt = xs[:, keep], xt[:, keep]
    batch = [(Image(xs[:, None, :], ColorState.SRGB), Image(xt[:, None, :], ColorState.XYZ))]
    return f, g, batch


def ssl_fixture(seed: int):
    """An 8x8 chart: four 4x4 patches whose 75th-percentile order statistics are well separated.

    The reference sits far from the reconstruction so PaperL1 signs stay fixed, and the
    XYZ values stay far above the LAB linear-segment threshold.
    """
    rng = np.random.default_rng(seed)
    f, g = perturbed_models(seed, scale=0.02)
    for _ in range(1000):
        cand = rng.uniform(0.3, 0.9, (3, 2000))
        xs = cand[:, kink_free(f, g, cand, None)][:, :64]
        data = xs.reshape(3, 8, 8)
        xyz = f(xs).reshape(3, 8, 8)
        quads, ok = [], True
        for r0, c0 in ((0, 0), (0, 4), (4, 0), (4, 4)):
            patch = np.sort(xyz[:, r0:r0 + 4, c0:c0 + 4].reshape(3, -1), axis=1)
            # with shrink 1.0 each mask is exactly the 4x4 block; order gaps keep the percentile smooth
            ok &= bool(np.min(np.diff(patch, axis=1)[:, 10:13]) > 2e-3)
            quads.append(np.array([[c0, r0], [c0 + 4, r0], [c0 + 4, r0 + 4], [c0, r0 + 4]], float))
        if ok:
            break
    else:
        raise RuntimeError("no kink-free chart fixture found")
    ann = ChartAnnotation("fixture", quads)
    placeholder = ChartReference("fixture", "D65", np.zeros((4, 3)))
    lab = chart_delta_e(Image(xyz, ColorState.XYZ), ann, placeholder, shrink_factor=1.0).lab
    ref = ChartReference("fixture", "D65", lab + np.array([8.0, -9.0, 7.0]))
    item = prepare_chart_item(Image(data, ColorState.SRGB), ann, ref, shrink_factor=1.0)
    return f, g, item


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {detail}")
