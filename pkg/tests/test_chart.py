import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from derender.chart import (
    ChartAnnotation,
    ChartError,
    chart_delta_e,
    default_reference,
    extract_patch_color,
    format_annotation,
    format_reference,
    parse_annotation,
    parse_reference,
    percentile_weights,
    rasterize_patch_mask,
)
from derender.color import ColorState, DeltaEVariant
from derender.image import Image

SQUARE = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], float)


def pnpoly(quad, x, y):
    """Classic crossing-number test (half-open in y)."""
    inside = False
    n = len(quad)
    for i in range(n):
        xi, yi = quad[i]
        xj, yj = quad[i - 1]
        if (yi > y) != (yj > y) and x < (xj - xi) * (y - yi) / (yj - yi) + xi:
            inside = not inside
    return inside


def brute_mask(quad, shrink, h, w):
    c = quad.mean(axis=0)
    q = c + shrink * (quad - c)
    return {(r, col) for r in range(h) for col in range(w) if pnpoly(q, col + 0.5, r + 0.5)}


def test_square_counts():
    full = rasterize_patch_mask(SQUARE, 1.0)
    half = rasterize_patch_mask(SQUARE, 0.5)
    assert len(full) == 100 and len(half) == 25
    assert {tuple(p) for p in full} == brute_mask(SQUARE, 1.0, 12, 12)
    assert {tuple(p) for p in half} == brute_mask(SQUARE, 0.5, 12, 12)
    assert half[:, 0].min() == 2 and half[:, 0].max() == 6  # centers 2.5 .. 6.5


def test_random_quads_match_oracle(rng):
    for _ in range(30):
        c = rng.uniform(10, 30, 2)
        ang = np.sort(rng.uniform(0, 2 * np.pi, 4))
        if np.max(np.diff(np.r_[ang, ang[0] + 2 * np.pi])) > 2.5:
            continue
        quad = c + rng.uniform(4, 9, (4, 1)) * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        for s in (1.0, 0.5):
            got = {tuple(p) for p in rasterize_patch_mask(quad, s, (40, 40))}
            assert got == brute_mask(quad, s, 40, 40)


def test_shrink_monotone(rng):
    quad = np.array([[3.2, 4.1], [20.7, 2.9], [22.3, 18.8], [2.1, 17.5]])
    prev = None
    for s in (1.0, 0.8, 0.6, 0.4, 0.2):
        m = {tuple(p) for p in rasterize_patch_mask(quad, s)}
        if prev is not None:
            assert m <= prev
        prev = m


def test_empty_mask_and_bad_shrink():
    tiny = np.array([[0.1, 0.1], [0.3, 0.1], [0.3, 0.3], [0.1, 0.3]])
    with pytest.raises(ChartError):
        rasterize_patch_mask(tiny, 1.0)
    with pytest.raises(ChartError):
        rasterize_patch_mask(SQUARE, 0.0)


def test_percentile_oracle():
    v = np.tile(np.array([3.0, 0.0, 2.0, 1.0]), (3, 1))
    res = percentile_weights(v)[0]
    np.testing.assert_allclose(res, 2.25)
    im = Image(v.reshape(3, 2, 2), ColorState.XYZ)
    mask = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
    np.testing.assert_allclose(extract_patch_color(im, mask), 2.25)


def test_percentile_matches_numpy(rng):
    v = rng.uniform(size=(3, 57))
    np.testing.assert_allclose(percentile_weights(v)[0], np.percentile(v, 75, axis=1), rtol=0, atol=1e-15)


@settings(max_examples=30)
@given(st.permutations(list(range(16))))
def test_percentile_permutation_invariant(perm):
    v = np.random.default_rng(7).uniform(size=(3, 16))
    a = percentile_weights(v)[0]
    b = percentile_weights(v[:, perm])[0]
    assert np.array_equal(a, b)


ANN = """# idx x1 y1 x2 y2 x3 y3 x4 y4
0 0 0 10 0 10 10 0 10
1 12 0 22 0 22 10 12 10
"""


def test_annotation_round_trip():
    ann = parse_annotation(ANN, "img")
    assert len(ann) == 2
    again = parse_annotation(format_annotation(ann), "img")
    for a, b in zip(ann.quads, again.quads):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize(
    "text",
    [
        "",
        "# only comments\n",
        "0 0 0 10 0 10 10 0\n",  # 8 fields
        "0 0 0 10 0 10 10 0 10\n0 0 0 10 0 10 10 0 10\n",  # duplicate index
        "0 0 0 10 0 0 10 10 10\n",  # self-intersecting (bow tie)
        "0 0 0 5 0 10 0 15 0\n",  # collinear
        "0 a 0 10 0 10 10 0 10\n",
    ],
)
def test_annotation_errors(text):
    with pytest.raises(ChartError):
        parse_annotation(text)


def test_reference_parse():
    ref = default_reference()
    assert len(ref) == 24 and ref.illuminant == "D65"
    again = parse_reference(format_reference(ref))
    np.testing.assert_array_equal(again.lab, ref.lab)
    with pytest.raises(ChartError):
        parse_reference("illuminant D65\n0 50 0\n")
    with pytest.raises(ChartError):
        parse_reference("illuminant XYZ\n0 50 0 0\n")


def _naive_lab(xyz, white):
    def f(t):
        return t ** (1 / 3) if t > (6 / 29) ** 3 else t / (3 * (6 / 29) ** 2) + 4 / 29

    fx, fy, fz = (f(xyz[i] / white[i]) for i in range(3))
    return np.array([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)])


def test_chart_delta_e_matches_naive(rng):
    h, w = 30, 46
    ref = default_reference()
    quads = []
    for i in range(24):
        r, c = divmod(i, 6)
        x0, y0 = 1 + 7.5 * c + rng.uniform(-0.4, 0.4), 1 + 7 * r + rng.uniform(-0.4, 0.4)
        quads.append(np.array([[x0, y0], [x0 + 6.2, y0 + 0.3], [x0 + 6.0, y0 + 6.1], [x0 - 0.2, y0 + 5.8]]))
    ann = ChartAnnotation("t", quads)
    data = rng.uniform(0.02, 0.9, (3, h, w))
    image = Image(data, ColorState.XYZ)
    white = ref.white.as_array()
    for variant in DeltaEVariant:
        got = chart_delta_e(image, ann, ref, variant)
        des = []
        for i, q in enumerate(quads):
            pix = sorted(brute_mask(q, 0.5, h, w))
            vals = np.array([data[:, r, c] for r, c in pix]).T
            p75 = []
            for ch in range(3):
                s = sorted(vals[ch])
                pos = 0.75 * (len(s) - 1)
                lo = int(pos)
                p75.append(s[lo] + (pos - lo) * (s[min(lo + 1, len(s) - 1)] - s[lo]))
            d = _naive_lab(np.array(p75), white) - ref.lab[i]
            des.append(np.abs(d).sum() if variant is DeltaEVariant.PAPER_L1 else np.sqrt(d @ d))
        np.testing.assert_allclose(got.per_patch, des, atol=1e-9)
        assert got.mean == pytest.approx(np.mean(des), abs=1e-9)


def test_chart_errors():
    ref = default_reference()
    ann = ChartAnnotation("t", [SQUARE])
    img = Image(np.full((3, 20, 20), 0.3), ColorState.XYZ)
    with pytest.raises(ChartError):
        chart_delta_e(img, ann, ref)  # patch count mismatch
    ann = ChartAnnotation("t", [SQUARE + 15] * 24)
    with pytest.raises(ChartError, match="patch 0"):
        chart_delta_e(img, ann, ref, shrink_factor=1.0)
