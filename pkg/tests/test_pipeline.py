import numpy as np
import pytest
import torch

from wtmvs.ablation import scene_samples
from wtmvs.config import PipelineConfig
from wtmvs.numeric import DTYPE, upsample
from wtmvs.pipeline import (PipelineError, TrainingDiverged, TrainingSample, build_model, infer,
                            learning_rate, train)
from wtmvs.scenes import SceneSpec, generate

SMALL = dict(height=32, width=40, focal=40.0, depth_range=(2.0, 8.0))
FAST = PipelineConfig(reg="none", use_wet=True, wet_window=(4, 5))


@pytest.fixture(scope="module")
def scene():
    return generate(SceneSpec(**SMALL), 0)


@pytest.fixture(scope="module")
def default_run():
    scene = generate(SceneSpec(), 0)
    images, cams, _ = scene.sample(0)
    model = build_model(PipelineConfig())
    with torch.no_grad():
        out = model(images, cams)
    return out, infer(images, cams, model)


def test_default_shapes(default_run):
    out, res = default_run
    assert res.depth.shape == (64, 80) and res.confidence.shape == (64, 80)
    assert [d.shape for d in res.stage_depths] == [(16, 20), (32, 40), (64, 80)]
    assert [s.prob.shape for s in out.stages] == [(48, 16, 20), (32, 32, 40), (8, 64, 80)]


def test_stage1_runs_twice_first_without_wet(default_run):
    out, res = default_run
    assert res.stage1_iterations == 2 and res.stage1_wet == [False, True]
    assert out.stages[0] is out.stage1_iterations[1]


def test_hypothesis_counts_and_intervals(default_run):
    out, _ = default_run
    base = (21.0 - 2.0) / 47
    assert [s.hyps.count for s in out.stages] == [48, 32, 8]
    np.testing.assert_allclose([s.hyps.interval for s in out.stages], [base, base / 4, base / 8], rtol=1e-15)


def test_later_stages_bracket_upsampled_previous(default_run):
    out, _ = default_run
    for prev, cur in zip(out.stages, out.stages[1:]):
        up = upsample(prev.depth, 2, tuple(cur.depth.shape)).clamp(2.0, 21.0)
        v = cur.hyps.values
        assert bool((v[0] <= up + 1e-12).all()) and bool((v[-1] >= up - 1e-12).all())


def test_probability_volumes_normalised(default_run):
    out, _ = default_run
    for s in out.stages + out.stage1_iterations:
        assert float((s.prob.sum(dim=0) - 1).abs().max()) <= 1e-5


def test_infer_deterministic_and_hwc(scene):
    images, cams, _ = scene.sample(1)
    model = build_model(FAST, seed=3)
    a = infer(images, cams, model)
    b = infer(scene.images[scene.view_order(1)], cams, build_model(FAST, seed=3))
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.confidence, b.confidence)


def test_view_count_mismatch(scene):
    images, cams, _ = scene.sample(0)
    with pytest.raises(PipelineError):
        build_model(FAST)(images[:3], cams)


def test_fewer_stages(scene):
    images, cams, _ = scene.sample(0)
    res = infer(images, cams, build_model(FAST.replace(stages=1)))
    assert res.depth.shape == (32, 40) and len(res.stage_depths) == 1


def test_without_wet_still_two_iterations(scene):
    images, cams, _ = scene.sample(0)
    res = infer(images, cams, build_model(FAST.replace(use_wet=False)))
    assert res.stage1_iterations == 2 and res.stage1_wet == [False, False]


def test_learning_rate_schedule():
    cfg = PipelineConfig(steps=160)
    assert [learning_rate(cfg, s) for s in (0, 59, 60, 79, 80, 119, 120, 159)] == \
        [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4, 1.25e-4, 1.25e-4]


def test_zero_steps_leaves_weights(scene):
    model = build_model(FAST)
    before = model.state_arrays()
    after, history = train(scene_samples(scene), FAST, model, steps=0)
    assert history == []
    for k, v in after.state_dict().items():
        assert torch.equal(v, before[k])


def test_training_is_deterministic_and_logs(scene):
    samples = scene_samples(scene, refs=[0, 1])
    runs = [train(samples, FAST, build_model(FAST, seed=4), steps=3) for _ in range(2)]
    (m1, h1), (m2, h2) = runs
    assert h1 == h2
    assert [(r["step"], r["stage"]) for r in h1] == [(s, k) for s in range(3) for k in (1, 2, 3)]
    assert all(np.isfinite(r["total"]) for r in h1)
    for k, v in m1.state_dict().items():
        assert torch.equal(v, m2.state_dict()[k])


def test_divergence_raises_with_dump(scene):
    images, cams, depths = scene.sample(0)
    bad = TrainingSample(images * float("nan"), cams, depths)
    with pytest.raises(TrainingDiverged) as exc:
        train([bad], FAST, build_model(FAST), steps=1)
    assert exc.value.dump["step"] == 0


def test_checkpoint_roundtrip(tmp_path, scene):
    images, cams, _ = scene.sample(0)
    model = build_model(FAST, seed=5)
    model.save(tmp_path / "model")
    other = build_model(FAST, seed=6).load(tmp_path / "model")
    assert np.array_equal(infer(images, cams, model).depth, infer(images, cams, other).depth)
    assert (tmp_path / "model.bin").exists() and (tmp_path / "model.manifest").exists()


def test_depth_type():
    assert DTYPE == torch.float64
