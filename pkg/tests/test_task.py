import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import TOL, rel_err, smooth_numeric_grad
from machina import task as K
from machina import tensor as T
from machina.params import SGD


@pytest.fixture(scope="module")
def scenes():
    return K.generate_dataset(40, seed=5)


# ----------------------------------------------------------------- dataset


def test_generation_is_deterministic():
    a, b = K.generate_dataset(6, 9), K.generate_dataset(6, 9)
    for s, t in zip(a, b):
        assert s.image.tobytes() == t.image.tobytes() and s.boxes == t.boxes and s.labels == t.labels
    assert K.generate_dataset(1, 10)[0].image.tobytes() != a[0].image.tobytes()


def test_non_positive_size_rejected():
    with pytest.raises(ValueError):
        K.generate_dataset(0, 1)


def test_class_balance_over_3000_scenes():
    labels = [lab for s in K.generate_dataset(3000, 0) for lab in s.labels]
    freq = np.bincount(labels, minlength=3) / len(labels)
    assert ((freq >= 0.283) & (freq <= 0.383)).all(), freq


def test_scene_invariants(scenes):
    for s in scenes:
        assert 1 <= len(s.boxes) <= 3 and len(s.labels) == len(s.boxes)
        assert s.image.shape == (64, 64, 3) and s.image.min() >= 0 and s.image.max() <= 1
        assert np.array_equal(np.round(s.image * 255) / 255, s.image)
        for (x0, y0, x1, y1), lab in zip(s.boxes, s.labels):
            assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64
            assert 8 <= x1 - x0 <= 28 and lab in (0, 1, 2)


def test_rendered_mask_lies_inside_box(scenes):
    for s in scenes:
        for mask, (x0, y0, x1, y1) in zip(s.masks, s.boxes):
            rows, cols = np.nonzero(mask)
            assert rows.size > 0
            assert cols.min() >= x0 and cols.max() + 1 <= x1
            assert rows.min() >= y0 and rows.max() + 1 <= y1


@pytest.mark.parametrize("label", [0, 1, 2])
def test_shape_masks_touch_their_box(label):
    m = K.shape_mask(label, 10, 20, 16)
    rows, cols = np.nonzero(m)
    assert cols.min() >= 10 and cols.max() + 1 <= 26 and rows.min() >= 20 and rows.max() + 1 <= 36
    assert cols.max() + 1 - cols.min() >= 15 and rows.max() + 1 - rows.min() >= 15  # a sub-pixel apex row may be empty


def test_dataset_round_trip(tmp_path, scenes):
    K.save_dataset(scenes[:5], tmp_path)
    back = K.load_dataset(tmp_path)
    assert len(back) == 5
    for s, t in zip(scenes, back):
        assert np.array_equal(s.image, t.image) and s.boxes == t.boxes and s.labels == t.labels
    first = (tmp_path / K.ANNOTATION_FILE).read_text().splitlines()[0].split()
    assert first[0] == "scene_00000.ppm" and len(first) == 6


def test_malformed_annotation_line(tmp_path, scenes):
    K.save_dataset(scenes[:1], tmp_path)
    (tmp_path / K.ANNOTATION_FILE).write_text("scene_00000.ppm 1 2 3\n")
    with pytest.raises(ValueError, match=":1: expected 6 fields"):
        K.load_dataset(tmp_path)


# ---------------------------------------------------------------- detector


def test_detector_output_shape(scenes):
    p = K.init_detector_params(0)
    out = K.detector_forward(T.constant(K.images_nchw(scenes[:1])), p)
    assert out.shape == (1, 8, 8, 8) and np.isfinite(out.data).all()


def test_zero_weights_give_half_objectness(scenes):
    p = K.init_detector_params(0)
    for name in p:
        p[name].data[...] = 0.0
    out = K.detector_forward(T.constant(K.images_nchw(scenes[:2])), p).data
    assert not out.any()
    assert np.all(1.0 / (1.0 + np.exp(-out[:, 0])) == 0.5)


def test_detector_rejects_wrong_size():
    with pytest.raises(T.ShapeError):
        K.detector_forward(T.constant(np.zeros((1, 3, 32, 32))), K.init_detector_params(0))


@pytest.mark.parametrize("seed", range(3))
def test_detector_loss_gradient_matches_finite_differences(scenes, seed):
    p = K.init_detector_params(seed, widths=(4, 4, 4, 4))
    rng = np.random.default_rng(seed)
    p["task.head.weight"].data[...] = rng.normal(0.0, 0.5, p["task.head.weight"].shape)
    batch = scenes[2 * seed:2 * seed + 2]
    x = K.images_nchw(batch)

    def loss():
        return K.task_loss(K.detector_forward(T.constant(x), p), batch).total

    T.backward(loss())
    for name in p:
        arr = p[name].data
        flat = rng.choice(arr.size, size=min(arr.size, 8), replace=False)
        coords = [np.unravel_index(i, arr.shape) for i in flat]

        def f():
            with T.no_grad():
                return loss().item()

        num, smooth = smooth_numeric_grad(f, arr, coords)
        assert smooth.sum() >= len(coords) - 2, name
        ana = np.array([p[name].grad[c] for c in coords])
        assert rel_err(ana[smooth], num[smooth]) < TOL, name


# -------------------------------------------------------------------- loss


def perfect_prediction(scene, sharp=10.0):
    pred = np.full((1, 8, 8, 8), 0.0)
    pred[0, 0] = -sharp
    pred[0, 5:8] = -sharp
    obj, cells, offs, labels = K.encode_targets(scene)
    for (r, c), off, lab in zip(cells, offs, labels):
        pred[0, 0, r, c] = sharp
        pred[0, 1:5, r, c] = off
        pred[0, 5 + lab, r, c] = sharp
    return pred


def test_perfect_prediction_has_near_zero_loss(scenes):
    for s in scenes[:10]:
        loss = K.task_loss(T.constant(perfect_prediction(s)), [s])
        assert loss.total.item() < 0.01
        assert min(loss.objectness.item(), loss.box.item(), loss.classification.item()) >= 0


def test_uniform_objectness_costs_64_ln2():
    s = K.Scene(np.zeros((64, 64, 3)), [(10.0, 10.0, 20.0, 20.0)], [1])
    loss = K.task_loss(T.constant(np.zeros((1, 8, 8, 8))), [s])
    assert loss.objectness.item() == pytest.approx(64 * math.log(2), abs=1e-12)
    assert 64 * math.log(2) == pytest.approx(44.36, abs=0.01)


def scalar_loss(pred, scenes):
    """Loop-by-loop re-implementation of the detection loss."""
    total = 0.0
    for i, s in enumerate(scenes):
        positives = {}
        for (x0, y0, x1, y1), lab in zip(s.boxes, s.labels):
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            r, c = min(int(cy // 8), 7), min(int(cx // 8), 7)
            positives[(r, c)] = ((cx / 8 - c, cy / 8 - r, (x1 - x0) / 8, (y1 - y0) / 8), lab)
        for r in range(8):
            for c in range(8):
                z = pred[i, 0, r, c]
                t = 1.0 if (r, c) in positives else 0.0
                p = 1 / (1 + math.exp(-z))
                total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
                if (r, c) not in positives:
                    continue
                off, lab = positives[(r, c)]
                for k in range(4):
                    d = abs(pred[i, 1 + k, r, c] - off[k])
                    total += 0.5 * d * d if d < 1 else d - 0.5
                logits = pred[i, 5:8, r, c]
                total += -logits[lab] + math.log(sum(math.exp(v) for v in logits))
    return total / len(scenes)


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_scalar_oracle(scenes, seed):
    batch = scenes[seed * 3:seed * 3 + 3]
    pred = np.random.default_rng(seed).normal(0, 2, (3, 8, 8, 8))
    loss = K.task_loss(T.constant(pred), batch)
    assert loss.total.item() == pytest.approx(scalar_loss(pred, batch), rel=1e-12)


def test_scene_without_objects_is_contract_error():
    with pytest.raises(T.ContractError):
        K.task_loss(T.constant(np.zeros((1, 8, 8, 8))), [K.Scene(np.zeros((64, 64, 3)), [], [])])


def test_sgd_halves_loss_on_fixed_batch():
    batch = K.generate_dataset(64, 11)
    x = T.constant(K.images_nchw(batch))
    p = K.init_detector_params(0)
    opt = SGD(0.01)
    losses = []
    for _ in range(200):
        p.zero_grad()
        loss = K.task_loss(K.detector_forward(x, p), batch).total
        T.backward(loss)
        opt.step(p, ["task"])
        losses.append(loss.item())
    final = K.task_loss(K.detector_forward(x, p), batch).total.item()
    assert final <= 0.5 * losses[0], (losses[0], final)


# ----------------------------------------------------------------- iou/map


def test_iou_examples():
    assert K.iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert K.iou((0, 0, 2, 2), (3, 3, 4, 4)) == 0.0
    assert K.iou((0, 0, 2, 2), (2, 0, 4, 2)) == 0.0
    assert K.iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)


@given(st.lists(st.floats(0, 50), min_size=4, max_size=4), st.lists(st.floats(0, 50), min_size=4, max_size=4))
def test_iou_bounded_and_symmetric(a, b):
    a = (min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]), max(a[1], a[3]))
    b = (min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3]))
    v = K.iou(a, b)
    assert 0.0 <= v <= 1.0 and v == K.iou(b, a)


def gt_detections(scenes):
    return [[K.Detection(b, lab, 1.0) for b, lab in zip(s.boxes, s.labels)] for s in scenes]


def test_map_perfect_and_empty(scenes):
    assert K.evaluate_map(gt_detections(scenes), scenes) == {"map50": 1.0, "map5095": 1.0}
    assert K.evaluate_map([[] for _ in scenes], scenes)["map50"] == 0.0


def brute_force_ap(dets, scenes, label, thr):
    """PR curve by thresholding at every distinct confidence, then all-points interpolation."""
    n_gt = sum(s.labels.count(label) for s in scenes)
    confs = sorted({d.confidence for ds in dets for d in ds if d.label == label}, reverse=True)
    curve = []
    for t in confs:
        tp = fp = 0
        for ds, s in zip(dets, scenes):
            gts = [b for b, lab in zip(s.boxes, s.labels) if lab == label]
            taken = set()
            for d in sorted((d for d in ds if d.label == label and d.confidence >= t), key=lambda d: -d.confidence):
                cands = [(K.iou(d.box, g), j) for j, g in enumerate(gts) if j not in taken]
                cands = [c for c in cands if c[0] >= thr]
                if cands:
                    taken.add(max(cands)[1])
                    tp += 1
                else:
                    fp += 1
        curve.append((tp / n_gt, tp / (tp + fp)))
    ap, prev = 0.0, 0.0
    for r, _ in curve:
        ap += (r - prev) * max(p for rr, p in curve if rr >= r)
        prev = r
    return ap


def mixed_case():
    scenes = [
        K.Scene(None, [(0, 0, 10, 10), (20, 20, 40, 40)], [0, 1]),
        K.Scene(None, [(5, 5, 25, 25)], [2]),
        K.Scene(None, [(30, 0, 50, 16), (0, 40, 12, 52), (40, 40, 60, 60)], [0, 0, 2]),
        K.Scene(None, [(10, 10, 30, 30)], [1]),
        K.Scene(None, [(0, 0, 20, 20), (32, 32, 48, 48)], [2, 1]),
    ]
    D = K.Detection
    dets = [
        [D((0, 0, 10, 10), 0, 0.9), D((21, 21, 40, 40), 1, 0.8), D((0, 0, 9, 10), 0, 0.6), D((50, 50, 60, 60), 1, 0.7)],
        [D((5, 5, 24, 25), 2, 0.95), D((5, 5, 25, 25), 0, 0.5)],
        [D((30, 0, 50, 16), 0, 0.4), D((0, 30, 12, 42), 0, 0.85), D((40, 40, 60, 60), 2, 0.6)],
        [D((12, 12, 30, 30), 1, 0.6), D((0, 0, 5, 5), 1, 0.9)],
        [D((0, 0, 20, 20), 2, 0.3), D((33, 33, 48, 48), 1, 0.8), D((0, 0, 19, 20), 2, 0.7)],
    ]
    return dets, scenes


@pytest.mark.parametrize("thr", [0.5, 0.75, 0.9])
def test_map_matches_brute_force(thr):
    dets, scenes = mixed_case()
    got = K.evaluate_map(dets, scenes, [thr])["map50" if thr == 0.5 else "map5095"]
    ref = float(np.mean([brute_force_ap(dets, scenes, lab, thr) for lab in range(3)]))
    assert got == pytest.approx(ref, abs=1e-12)
    assert 0.0 < got < 1.0


def test_map_primary_and_secondary_keys():
    dets, scenes = mixed_case()
    out = K.evaluate_map(dets, scenes)
    ref = np.mean([np.mean([brute_force_ap(dets, scenes, lab, t) for lab in range(3)])
                   for t in np.linspace(0.5, 0.95, 10)])
    assert out["map5095"] == pytest.approx(ref, abs=1e-12)
    assert out["map50"] == pytest.approx(np.mean([brute_force_ap(dets, scenes, lab, 0.5) for lab in range(3)]))


def test_average_precision_ties_form_one_point():
    assert K.average_precision([(0.5, True), (0.5, False)], 1) == pytest.approx(0.5)
    assert K.average_precision([(0.6, True), (0.5, False)], 1) == pytest.approx(1.0)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_map_in_unit_interval_and_permutation_invariant(seed):
    dets, scenes = mixed_case()
    rng = np.random.default_rng(seed)
    noisy = [[K.Detection(d.box, int(rng.integers(3)) if rng.random() < 0.3 else d.label, float(rng.random()))
              for d in ds] for ds in dets]
    out = K.evaluate_map(noisy, scenes)
    assert 0.0 <= out["map50"] <= 1.0 and 0.0 <= out["map5095"] <= 1.0
    order = rng.permutation(len(scenes))
    shuffled = K.evaluate_map([noisy[i] for i in order], [scenes[i] for i in order])
    assert shuffled == pytest.approx(out, abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_adding_correct_top_detection_never_lowers_map(seed):
    dets, scenes = mixed_case()
    rng = np.random.default_rng(seed)
    dets = [[d for d in ds if rng.random() < 0.6] for ds in dets]
    before = K.evaluate_map(dets, scenes)["map50"]
    i = int(rng.integers(len(scenes)))
    missing = [(b, lab) for b, lab in zip(scenes[i].boxes, scenes[i].labels)
               if not any(d.label == lab and K.iou(d.box, b) >= 0.5 for d in dets[i])]
    if not missing:
        return
    box, lab = missing[0]
    dets[i] = dets[i] + [K.Detection(box, lab, 1.0)]
    assert K.evaluate_map(dets, scenes)["map50"] >= before - 1e-12


def test_decode_detections_threshold_and_geometry():
    s = K.Scene(None, [(8.0, 16.0, 24.0, 32.0)], [2])
    pred = perfect_prediction(s, sharp=10.0)
    dets = K.decode_detections(pred)[0]
    assert len(dets) == 1 and dets[0].label == 2
    assert dets[0].box == pytest.approx((8.0, 16.0, 24.0, 32.0))
    assert 0.0 <= dets[0].confidence <= 1.0
    assert K.decode_detections(np.zeros((1, 8, 8, 8)))[0] == []
