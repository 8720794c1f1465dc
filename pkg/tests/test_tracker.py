import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fanbench.geometry import BBox, Trajectory
from fanbench.tracker import (EXEMPLAR_SIZE, RESPONSE_SIZE, SEARCH_SIZE, PatchPair,
                              TrackerConfig, TrackerModel, TrackerTrainingError,
                              apply_frame_perturbations, balanced_logistic_loss, box_to_patch,
                              context_side, cosine_window_penalty, crop_patch, frame_to_patch,
                              load_tracker, make_labels, patch_to_frame, response, save_tracker,
                              track_video, train_tracker)
from fanbench.video import VideoClip


def ramp_frame(h=120, w=160, a=(0.003, 0.001, 0.002), b=(0.001, 0.004, 0.0005)):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([0.1 + a[k] * xx + b[k] * yy for k in range(3)], -1).astype(np.float32), a, b


def test_labels_disc_has_thirteen_cells():
    lab = make_labels()
    assert lab.shape == (RESPONSE_SIZE, RESPONSE_SIZE)
    assert int((lab > 0).sum()) == 13
    assert lab[8, 8] == 1 and lab[8, 10] == 1 and lab[9, 10] == -1
    np.testing.assert_array_equal(lab, lab.T)
    np.testing.assert_array_equal(lab, lab[::-1])


def test_context_side_formula():
    b = BBox(0, 0, 30, 10)
    m = 0.5 * 40
    assert context_side(b) == pytest.approx(np.sqrt((30 + m) * (10 + m)))


def test_crop_patch_resamples_linear_ramp_exactly():
    frame, a, b = ramp_frame()
    box = BBox.from_center(80.0, 60.0, 20.0, 16.0)
    patch, scale = crop_patch(frame, box, out_size=EXEMPLAR_SIZE)
    assert patch.shape == (EXEMPLAR_SIZE, EXEMPLAR_SIZE, 3)
    assert scale == pytest.approx(context_side(box) / EXEMPLAR_SIZE)
    c = np.arange(EXEMPLAR_SIZE)
    X = 80.0 + (c + 0.5 - EXEMPLAR_SIZE / 2) * scale - 0.5
    Y = 60.0 + (c + 0.5 - EXEMPLAR_SIZE / 2) * scale - 0.5
    for k in range(3):
        expected = 0.1 + a[k] * X[None, :] + b[k] * Y[:, None]
        # bilinear weights are quantised to 1/32 pixel
        np.testing.assert_allclose(patch[..., k], expected, atol=(a[k] + b[k]) / 16)


def test_crop_patch_pads_with_frame_mean():
    frame, _, _ = ramp_frame()
    box = BBox.from_center(2.0, 2.0, 30.0, 30.0)
    patch, _ = crop_patch(frame, box, out_size=SEARCH_SIZE, side_scale=SEARCH_SIZE / EXEMPLAR_SIZE)
    np.testing.assert_allclose(patch[0, 0], frame.reshape(-1, 3).mean(0), atol=1e-6)


def test_crop_patch_rejects_center_outside_frame():
    frame, _, _ = ramp_frame()
    with pytest.raises(ValueError, match="outside"):
        crop_patch(frame, BBox(-50, 10, 10, 10))


@given(st.floats(-200, 400), st.floats(-200, 400), st.floats(10, 300), st.floats(0.1, 5))
def test_frame_patch_maps_are_inverse(px, py, cx, scale):
    p = frame_to_patch((px, py), (cx, cx * 0.5), scale, SEARCH_SIZE)
    back = patch_to_frame(p, (cx, cx * 0.5), scale, SEARCH_SIZE)
    assert back == pytest.approx((px, py), abs=1e-7)


def test_box_to_patch_centres_object():
    box = BBox(40, 30, 24, 18)
    side = context_side(box)
    inner = box_to_patch(box, BBox.from_center(*box.center(), side, side), EXEMPLAR_SIZE)
    assert inner.center() == pytest.approx((EXEMPLAR_SIZE / 2, EXEMPLAR_SIZE / 2))
    assert inner.w == pytest.approx(24 * EXEMPLAR_SIZE / side)


def test_model_shapes_and_size_validation():
    model = TrackerModel("A", seed=0).eval()
    z = torch.rand(2, 3, EXEMPLAR_SIZE, EXEMPLAR_SIZE)
    x = torch.rand(2, 3, SEARCH_SIZE, SEARCH_SIZE)
    with torch.no_grad():
        assert model(z, x).shape == (2, 1, RESPONSE_SIZE, RESPONSE_SIZE)
    with pytest.raises(ValueError):
        model.forward_features(torch.rand(1, 3, 100, 100))
    with pytest.raises(ValueError):
        model.forward_features(torch.rand(1, 1, 127, 127))
    with pytest.raises(ValueError):
        TrackerModel("C")


def test_model_init_is_seeded():
    a, b, c = TrackerModel("B", 3), TrackerModel("B", 3), TrackerModel("B", 4)
    for (k, pa), pb, pc in zip(a.state_dict().items(), b.state_dict().values(), c.state_dict().values()):
        assert torch.equal(pa, pb)
    assert not torch.equal(a.features[0].weight, c.features[0].weight)


def test_correlate_matches_explicit_loop():
    torch.manual_seed(0)
    model = TrackerModel("A")
    zf = torch.randn(2, 4, 3, 3)
    xf = torch.randn(2, 4, 7, 7)
    out = model.correlate(zf, xf)
    expected = torch.zeros(2, 1, 5, 5)
    for b in range(2):
        for i in range(5):
            for j in range(5):
                expected[b, 0, i, j] = (zf[b] * xf[b, :, i:i + 3, j:j + 3]).sum()
    expected = expected * model.response_scale + model.response_bias
    torch.testing.assert_close(out, expected, rtol=1e-5, atol=1e-6)


def test_window_penalty_maps_cells_to_frame_pixels():
    prev = BBox.from_center(100.0, 80.0, 20.0, 20.0)
    scores = np.zeros((17, 17))
    scores[8, 10] = 5.0  # two cells right of centre
    box = cosine_window_penalty(scores, prev, scale_factor=0.5, window_weight=0.0)
    # 2 cells * stride 8 * 0.5 frame px per patch px
    assert box.center() == pytest.approx((108.0, 80.0))
    assert (box.w, box.h) == (prev.w, prev.h)
    centred = np.zeros((17, 17))
    centred[8, 8] = 1.0
    assert cosine_window_penalty(centred, prev, 0.5).center() == pytest.approx(prev.center())


def test_window_penalty_pulls_toward_centre():
    prev = BBox.from_center(100.0, 80.0, 20.0, 20.0)
    flat = np.full((17, 17), 0.3)
    assert cosine_window_penalty(flat, prev, 1.0, 0.3).center() == pytest.approx(prev.center())
    twin = np.zeros((17, 17))
    twin[8, 11] = twin[8, 2] = 1.0  # equal peaks, 3 and 6 cells from centre
    assert cosine_window_penalty(twin, prev, 1.0, 0.3).center() == pytest.approx((124.0, 80.0))
    with pytest.raises(ValueError):
        cosine_window_penalty(flat, prev, 1.0, 1.5)


def test_frame_writeback_constant_delta_and_overlap_average():
    frame = np.full((100, 120, 3), 0.5, np.float32)
    region = BBox.from_center(60.0, 50.0, 40.0, 40.0)
    delta = np.full((20, 20, 3), 0.1, np.float32)
    out = apply_frame_perturbations(frame, [(delta, region)])
    np.testing.assert_allclose(out[45:55, 55:65], 0.6, atol=1e-6)
    np.testing.assert_array_equal(out[:20], frame[:20])
    twice = apply_frame_perturbations(frame, [(delta, region), (delta, region)])
    np.testing.assert_allclose(twice, out, atol=1e-6)
    assert out.max() <= 1.0 and out.min() >= 0.0


def _still_clip(n=6):
    rng = np.random.default_rng(0)
    frame = rng.uniform(0, 1, (90, 120, 3)).astype(np.float32)
    box = BBox.from_center(60.0, 45.0, 20.0, 20.0)
    return VideoClip(np.repeat(frame[None], n, 0), Trajectory([box] * n), "still")


def test_identity_hook_equals_no_hook_and_hook_sees_patch_pairs():
    model = TrackerModel("A").eval()
    clip = _still_clip()
    seen = []

    def hook(pair, idx):
        assert isinstance(pair, PatchPair)
        assert pair.search.shape == (SEARCH_SIZE, SEARCH_SIZE, 3)
        seen.append(idx)
        return pair.exemplar, pair.search

    a = track_video(model, clip)
    b = track_video(model, clip, perturb_hook=hook)
    np.testing.assert_array_equal(a.as_array(), b.as_array())
    assert seen == list(range(1, len(clip)))


def test_hook_shape_violation_raises():
    model = TrackerModel("A").eval()
    with pytest.raises(ValueError, match="search"):
        track_video(model, _still_clip(3), perturb_hook=lambda p, i: (p.exemplar, p.search[:-1]))


def test_response_requires_smaller_exemplar():
    model = TrackerModel("A").eval()
    z = np.zeros((EXEMPLAR_SIZE, EXEMPLAR_SIZE, 3), np.float32)
    x = np.zeros((SEARCH_SIZE, SEARCH_SIZE, 3), np.float32)
    assert response(model, z, x).scores.shape == (17, 17)
    with pytest.raises(ValueError):
        response(model, x, z)


def test_checkpoint_round_trip(tmp_path):
    model = TrackerModel("B", seed=7)
    save_tracker(model, tmp_path / "t.pt")
    back = load_tracker(tmp_path / "t.pt")
    assert back.variant == "B" and back.seed == 7
    for pa, pb in zip(model.state_dict().values(), back.state_dict().values()):
        assert torch.equal(pa, pb)
    meta = (tmp_path / "t.json").read_text()
    assert '"stride": 8' in meta and '"exemplar_size": 127' in meta


def test_balanced_loss_weights_classes_equally():
    lab = torch.from_numpy(make_labels())[None, None]
    s = torch.where(lab > 0, torch.tensor(2.0), torch.tensor(0.0))
    pos = torch.nn.functional.softplus(torch.tensor(-2.0))
    neg = torch.nn.functional.softplus(torch.tensor(0.0))
    assert balanced_logistic_loss(s, lab) == pytest.approx(float(0.5 * pos + 0.5 * neg))


class _Pairs:
    def __init__(self, n, bad=False):
        rng = np.random.default_rng(0)
        self.items = [(rng.uniform(0, 1, (127, 127, 3)).astype(np.float32),
                       rng.uniform(0, 1, (255, 255, 3)).astype(np.float32), make_labels())
                      for _ in range(n)]
        if bad:
            self.items[0][0][:] = np.nan

    def __len__(self):
        return len(self.items)

    def __getitem__(self, k):
        return self.items[k]


def test_training_divergence_raises_with_curve():
    with pytest.raises(TrackerTrainingError) as info:
        train_tracker(_Pairs(4, bad=True), TrackerConfig(epochs=1, batch_size=4))
    assert isinstance(info.value.loss_curve, list)


def test_training_records_finite_loss_curve():
    model = train_tracker(_Pairs(4), TrackerConfig(epochs=2, batch_size=2))
    assert len(model.loss_history) == 4
    assert np.all(np.isfinite(model.loss_history))
    assert not model.training


def test_labels_offset_moves_disc():
    lab = make_labels(offset=(3.0, -2.0))
    ys, xs = np.nonzero(lab > 0)
    assert (xs.mean(), ys.mean()) == (11.0, 6.0) and len(xs) == 13
