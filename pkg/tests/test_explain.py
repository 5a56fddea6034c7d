"""Heatmap tests: cam construction oracles, score invariances,
branch zero-dependence, and overlay files."""

import os

import numpy as np
import pytest

from aarlogo import explain, model, pairs, retrieval
from aarlogo import numeric as nm
from aarlogo.numeric import Tensor


@pytest.fixture(scope="module")
def gallery(trained, dataset_manifest, dataset_dir):
    bundle, _, _ = trained
    records = pairs.object_records(dataset_manifest, "train")[:12]
    return retrieval.build_gallery(bundle, records, dataset_dir)


@pytest.fixture(scope="module")
def sample_pair(trained, dataset_manifest, dataset_dir):
    bundle, _, _ = trained
    return next(iter(pairs.make_pairs(
        dataset_manifest, dataset_dir, "test", s03=bundle.cfg["s03"],
        seed=0, target=bundle.cfg["input_size"])))


# -- _cam oracles -------------------------------------------------------------


def test_cam_single_channel_construction(rng):
    # grads averaging to e_c* make the cam proportional to ReLU(A[:, c*])
    tokens = rng.normal(size=(16, 8)).astype(np.float32)
    cstar = 3
    grads = np.zeros((16, 8), dtype=np.float32)
    grads[:, cstar] = 1.0
    cam = explain._cam(tokens, grads)
    want = np.maximum(tokens[:, cstar], 0.0)
    want = (want / want.max()).reshape(4, 4)
    np.testing.assert_allclose(cam, want, atol=1e-6)


def test_cam_row_major_token_to_cell(rng):
    # token t = 4r + c within the 16-patch slice lands on grid cell (r, c)
    for t, (r, c) in [(0, (0, 0)), (7, (1, 3)), (9, (2, 1)), (15, (3, 3))]:
        tokens = np.zeros((16, 4), dtype=np.float32)
        tokens[t, :] = 1.0
        grads = np.ones((16, 4), dtype=np.float32)
        cam = explain._cam(tokens, grads)
        assert cam[r, c] == 1.0
        assert cam.sum() == 1.0


def test_cam_all_negative_is_zero_grid():
    tokens = -np.ones((16, 4), dtype=np.float32)
    grads = np.ones((16, 4), dtype=np.float32)
    cam = explain._cam(tokens, grads)
    np.testing.assert_array_equal(cam, np.zeros((4, 4)))


def test_cam_range_and_shape(rng):
    cam = explain._cam(rng.normal(size=(16, 6)).astype(np.float32),
                       rng.normal(size=(16, 6)).astype(np.float32))
    assert cam.shape == (4, 4)
    assert cam.min() >= 0.0 and cam.max() <= 1.0


# -- full pipeline ---------------------------------------------------------------


def test_gradcam_output_contract(trained, sample_pair, gallery):
    bundle, _, _ = trained
    heat = explain.gradcam(bundle, sample_pair, gallery)
    assert set(heat.grids) == {(b, s) for b in explain.BRANCHES
                               for s in explain.SCALES}
    size = bundle.cfg["input_size"]
    for key, grid in heat.grids.items():
        assert grid.shape == (4, 4)
        assert grid.min() >= 0.0 and grid.max() <= 1.0
        assert heat.upsampled[key].shape == (size, size)
    assert heat.matched_uid in gallery.uids
    assert -1.0 - 1e-5 <= heat.score <= 1.0 + 1e-5
    # a trained model's maps should not all be degenerate
    assert any(g.max() > 0 for g in heat.grids.values())


def test_gradcam_deterministic(trained, sample_pair, gallery):
    bundle, _, _ = trained
    a = explain.gradcam(bundle, sample_pair, gallery)
    b = explain.gradcam(bundle, sample_pair, gallery)
    for key in a.grids:
        np.testing.assert_array_equal(a.grids[key], b.grids[key])


def test_gradcam_invariant_to_positive_score_rescale(trained, sample_pair,
                                                     gallery):
    bundle, _, _ = trained
    g = gallery.embeddings[0].copy()

    def score(scale):
        def fn(outputs, p2n):
            return nm.tensor_sum(nm.mul(p2n, Tensor(scale * g[None])))
        return fn

    base = explain.gradcam(bundle, sample_pair, gallery, score_fn=score(1.0))
    scaled = explain.gradcam(bundle, sample_pair, gallery,
                             score_fn=score(3.7))
    for key in base.grids:
        np.testing.assert_allclose(base.grids[key], scaled.grids[key],
                                   atol=1e-6)


def test_gradcam_zero_dependence_branch_is_zero(trained, sample_pair,
                                                gallery):
    # a score built only from block A's cls output cannot reach block B
    bundle, _, _ = trained
    g = gallery.embeddings[0].copy()

    def fn(outputs, p2n):
        p = nm.add(nm.matmul(outputs.z17_o1, bundle.params["proj.w"]),
                   bundle.params["proj.b"])
        return nm.tensor_sum(nm.mul(nm.l2_normalize(p), Tensor(g[None])))

    heat = explain.gradcam(bundle, sample_pair, gallery, score_fn=fn)
    for scale in explain.SCALES:
        np.testing.assert_array_equal(heat.grids[("neg", scale)],
                                      np.zeros((4, 4)))
    assert any(heat.grids[("pos", s)].max() > 0 for s in explain.SCALES)


def test_gradcam_rejects_baseline(trained, sample_pair, gallery, tiny_cfg,
                                  dataset_manifest):
    from aarlogo import runconfig, trainer
    cfg = runconfig.make_config(dict(tiny_cfg, mode="baseline_arcface_00"))
    bundle = trainer.build_bundle(
        cfg, dataset_manifest.class_ids(distractor=False),
        np.random.default_rng(0))
    with pytest.raises(ValueError):
        explain.gradcam(bundle, sample_pair, gallery)


def test_write_overlays_files(trained, sample_pair, gallery, tmp_path):
    bundle, _, _ = trained
    heat = explain.gradcam(bundle, sample_pair, gallery)
    written = explain.write_overlays(heat, sample_pair, str(tmp_path))
    assert len(written) == 4
    names = {os.path.basename(p) for p in written}
    assert names == {f"{sample_pair.uid}_{b}_{s}.png"
                     for b in explain.BRANCHES for s in explain.SCALES}
    from PIL import Image
    for path in written:
        with Image.open(path) as im:
            size = bundle.cfg["input_size"]
            assert im.size == (size, size)
