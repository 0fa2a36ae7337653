import json

import numpy as np
import pytest

from derender.chart import chart_delta_e, default_reference
from derender.color import D65, XYZ_TO_SRGB, ColorState, lab_to_xyz
from derender.fileio import load_chart_items, load_image, quantize_image, read_manifest
from derender.image import Image
from derender.mapping import apply
from derender.synth import (
    Family,
    SceneSpec,
    SynthConfig,
    apply_pipeline,
    apply_pipeline_array,
    embed_pipeline,
    generate_dataset,
    invert_pipeline_array,
    make_chart_item,
    render_scene,
    sample_pipeline,
    standard_pipeline,
    synthetic_reference,
)


def test_sample_pipeline_deterministic_and_valid():
    a, b = sample_pipeline(42), sample_pipeline(42)
    assert np.array_equal(a.wb, b.wb) and np.array_equal(a.cst, b.cst) and np.array_equal(a.ordinates, b.ordinates)
    assert not np.array_equal(a.cst, sample_pipeline(43).cst)
    for seed in range(1000):
        p = sample_pipeline(seed)
        assert np.all((p.wb >= 0.5) & (p.wb <= 2.0))
        assert np.linalg.cond(p.cst) < 50
    assert np.all(np.diff(p.ordinates, axis=1) > 0)
    assert p.ordinates[0, 0] == 0 and p.ordinates[0, -1] == 1


def test_standard_pipeline_white():
    out = apply_pipeline_array(standard_pipeline(), D65.as_array()[:, None])
    np.testing.assert_allclose(out[:, 0], 1.0, atol=1e-3)
    assert np.all(apply_pipeline_array(standard_pipeline(), np.zeros((3, 1))) == 0)


@pytest.mark.parametrize("seed", [0, 1, 7, 19])
def test_embedding_reproduces_pipeline(seed, rng):
    p = sample_pipeline(seed)
    f, g = embed_pipeline(p)
    xyz = rng.uniform(0.05, 0.8, (3, 2000))
    srgb = apply_pipeline_array(p, xyz)
    lin = p.linear_matrix @ xyz
    ok = np.all((lin > 1e-6) & (lin < 1 - 1e-6), axis=0)
    # G is the pipeline, F its inverse
    assert np.max(np.abs(g(xyz[:, ok]) - srgb[:, ok])) < 1e-9
    assert np.max(np.abs(f(srgb[:, ok]) - xyz[:, ok])) < 1e-9
    np.testing.assert_allclose(invert_pipeline_array(p, srgb[:, ok]), xyz[:, ok], atol=1e-9)
    assert np.max(np.abs(f(g(xyz[:, ok])) - xyz[:, ok])) < 1e-6


def test_out_of_family_not_embeddable():
    p = sample_pipeline(3, Family.OUT_OF_FAMILY)
    assert p.smooth_weight > 0
    with pytest.raises(ValueError):
        embed_pipeline(p)


def test_scene_deterministic_in_range():
    a = render_scene(SceneSpec(64, 64, seed=5))
    b = render_scene(SceneSpec(64, 64, seed=5))
    assert np.array_equal(a.data, b.data)
    assert a.state is ColorState.XYZ and a.data.min() >= 0 and a.data.max() <= 1


@pytest.mark.parametrize("ref", [default_reference(), synthetic_reference()])
def test_chart_scene_scores_zero(ref):
    xyz, ann, ref2 = render_scene(SceneSpec(128, 128, seed=8, chart=True), ref)
    assert chart_delta_e(xyz, ann, ref2).mean < 1e-9


def test_chart_too_large():
    with pytest.raises(ValueError):
        render_scene(SceneSpec(40, 40, seed=1, chart=True), default_reference())


def test_exact_inverse_scores_zero_through_pipeline():
    p = sample_pipeline(17)
    f, _ = embed_pipeline(p)
    srgb, ann, ref = make_chart_item(p, SceneSpec(128, 128, seed=2, chart=True), synthetic_reference(), quantize=False)
    assert chart_delta_e(apply(f, srgb), ann, ref).mean < 1e-9


def test_synthetic_reference_in_gamut():
    ref = synthetic_reference()
    rgb = XYZ_TO_SRGB @ lab_to_xyz(ref.lab.T)
    assert rgb.min() > 0 and rgb.max() <= 0.8 + 1e-12


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    cfg = SynthConfig(seed=4, n_train=3, n_test=2, n_charts=2, height=32, width=32)
    return cfg, generate_dataset(cfg, tmp_path_factory.mktemp("a")), generate_dataset(cfg, tmp_path_factory.mktemp("b"))


def test_dataset_counts_and_idempotent(dataset):
    cfg, a, b = dataset
    assert len(read_manifest(a.train, 2)) == 3 and len(read_manifest(a.test, 2)) == 2
    assert len(read_manifest(a.charts, 3)) == 2
    for fa in a.files:
        fb = b.root / fa.relative_to(a.root)
        assert fa.read_bytes() == fb.read_bytes(), fa.name


def test_dataset_regeneration_oracle(dataset):
    cfg, a, _ = dataset
    audit = json.loads((a.root / "generation.json").read_text())
    p = sample_pipeline(cfg.seed)
    assert audit["pipelines"][0]["wb"] == p.wb.tolist()
    for s_path, x_path in read_manifest(a.train, 2) + read_manifest(a.test, 2):
        xyz = load_image(x_path, ColorState.XYZ)
        srgb = load_image(s_path, ColorState.SRGB)
        assert np.array_equal(quantize_image(apply_pipeline(p, xyz)).data, srgb.data)


def test_dataset_charts_load(dataset):
    _, a, _ = dataset
    items = load_chart_items(a.charts)
    srgb, ann, ref = items[0]
    assert srgb.state is ColorState.SRGB and len(ann) == len(ref) == 24


def test_default_counts():
    cfg = SynthConfig()
    assert (cfg.n_train, cfg.n_test, cfg.n_charts) == (64, 16, 32)


def test_apply_pipeline_state():
    with pytest.raises(ValueError):
        apply_pipeline(standard_pipeline(), Image(np.zeros((3, 2, 2)), ColorState.SRGB))
