import numpy as np
import pytest

from machina import codec as C
from machina import metrics as M
from machina import regimes as R
from machina import task as K
from machina import tensor as T
from machina.params import CODEC_GROUPS, GROUPS, save_checkpoint

SMALL = C.CodecConfig(n_latent_channels=8, n_hyper_channels=4, n_filters=8)


@pytest.fixture(scope="module")
def tiny():
    scenes = K.generate_dataset(4, 3)
    return scenes, C.init_codec_params(SMALL, 0), K.init_detector_params(0, widths=(4, 4, 4, 4))


def digests(codec, task):
    d = {g: codec.digest([g]) for g in CODEC_GROUPS}
    d["task"] = task.digest(["task"])
    return d


# ------------------------------------------------------------------ groups


def test_trainable_groups():
    assert R.trainable_groups("BASELINE") == set()
    assert R.trainable_groups("T_FT") == {"task"}
    assert R.trainable_groups("C_FT") == {"encoder", "decoder", "hyper_encoder", "hyper_decoder", "entropy_model"}
    assert "task" not in R.trainable_groups("C_FT")
    assert R.trainable_groups("J_FT") == set(GROUPS) and len(GROUPS) == 6
    assert R.trainable_groups("J-FT-FD") == set(GROUPS) - {"decoder"}


def test_unknown_regime():
    with pytest.raises(ValueError, match="unknown regime"):
        R.Regime.parse("E2E")


def test_operating_points_match_fine_tuning_table():
    assert R.OPERATING_POINTS == ((1, 1.0), (2, 0.6675), (4, 0.3186), (4, 0.1))


# ------------------------------------------------------------------- losses


def test_combine_arithmetic():
    lb = R.combine_losses(T.constant(np.array(2.0)), T.constant(np.array(3.0)), 0.1)
    assert lb.total.item() == pytest.approx(2.3, abs=1e-15)
    lb0 = R.combine_losses(T.constant(np.array(2.0)), T.constant(np.array(3.0)), 0.0)
    assert lb0.total.item() == 2.0


def test_rate_reported_but_not_optimized_when_excluded():
    task = T.tensor(np.array(2.0), requires_grad=True)
    rate = T.tensor(np.array(3.0), requires_grad=True)
    lb = R.combine_losses(task, rate, 0.5, include_rate=False)
    assert lb.total.item() == 3.5 and lb.objective is task
    T.backward(lb.objective)
    assert rate.grad is None


@pytest.mark.parametrize("term", ["task", "rate"])
def test_non_finite_term_is_named(term):
    vals = {"task": T.constant(np.array(1.0)), "rate": T.constant(np.array(1.0))}
    vals[term] = T.constant(np.array(np.nan))
    with pytest.raises(T.NumericError, match=term):
        R.combine_losses(vals["task"], vals["rate"], 0.5)


def test_total_gradient_is_linear_in_its_parts(tiny):
    scenes, codec, task = tiny
    x = T.constant(K.images_nchw(scenes[:2]))
    beta = 0.37
    joint = codec.copy()
    joint.update(task.copy())

    def grad_of(pick):
        joint.zero_grad()
        lb = R.total_loss(x, scenes[:2], joint, joint, beta, C.Mode.TRAIN, rng=5)
        T.backward(pick(lb))
        return joint["encoder.conv0.weight"].grad.copy()

    g_total = grad_of(lambda lb: lb.total)
    g_task = grad_of(lambda lb: lb.task)
    g_rate = grad_of(lambda lb: lb.rate)
    assert np.allclose(g_total, g_task + beta * g_rate, rtol=1e-10, atol=1e-13)
    assert np.abs(g_rate).max() > 0 and np.abs(g_task).max() > 0


# ------------------------------------------------------------------- config


def test_config_round_trip_and_defaults():
    cfg = R.RegimeConfig.from_text("regime = J_FT  # joint\nq = 2\nbeta = 0.6675\n\nseed=3\n")
    assert (cfg.regime, cfg.q, cfg.beta, cfg.seed) == (R.Regime.J_FT, 2, 0.6675, 3)
    assert (cfg.epochs_codec, cfg.epochs_task, cfg.lr_task, cfg.lr_codec, cfg.batch_size) == (5, 6, 0.01, 1e-4, 2)
    assert R.RegimeConfig.from_text(cfg.to_text()) == cfg
    assert R.RegimeConfig(regime="C_FT").epochs_codec == 6
    assert R.RegimeConfig(regime="T_FT").epochs_codec == 0


@pytest.mark.parametrize("text,match", [
    ("regime = J_FT\nlearning_rate = 1\n", "unknown key"),
    ("regime J_FT\n", "line 1"),
    ("regime = C_FT\nbeta = 0\n", "beta"),
    ("batch_size = 0\n", "batch_size"),
])
def test_config_errors(text, match):
    with pytest.raises(R.ConfigError, match=match):
        R.RegimeConfig.from_text(text)


def test_t_ft_accepts_zero_beta():
    assert R.RegimeConfig(regime="T_FT", beta=0.0).beta == 0.0


def test_missing_checkpoint_is_config_error(tmp_path, tiny):
    _, codec, _ = tiny
    save_checkpoint(tmp_path / "c.mckpt", codec)
    cfg = R.RegimeConfig(regime="J_FT", init_codec=str(tmp_path / "c.mckpt"), init_task=str(tmp_path / "nope"))
    with pytest.raises(R.ConfigError, match="init_task"):
        R.load_inputs(cfg)


# ------------------------------------------------------------------ training


def run(regime, tiny, seed=0, **kw):
    scenes, codec, task = tiny
    cfg = R.RegimeConfig(regime=regime, beta=0.5, seed=seed, epochs_codec=kw.pop("epochs_codec", 1),
                         epochs_task=kw.pop("epochs_task", 2), **kw)
    return R.run_regime(cfg, scenes, codec, task)


def test_baseline_is_a_no_op(tiny):
    _, codec, task = tiny
    report, c2, t2 = run("BASELINE", tiny)
    assert report.digests == digests(codec, task) and report.epochs == []
    assert c2.digest() == codec.digest() and t2.digest() == task.digest()


def test_c_ft_leaves_task_untouched(tiny):
    _, codec, task = tiny
    report, c2, t2 = run("C_FT", tiny)
    assert report.digests["task"] == task.digest(["task"])
    assert any(report.digests[g] != codec.digest([g]) for g in CODEC_GROUPS)
    assert len(report.epochs) == 1 and report.epochs[0].bpp > 0


def test_inputs_are_never_modified(tiny):
    _, codec, task = tiny
    before = digests(codec, task)
    run("J_FT", tiny)
    assert digests(codec, task) == before


def test_j_ft_is_deterministic(tiny):
    a = run("J_FT", tiny, seed=4)[0]
    b = run("J_FT", tiny, seed=4)[0]
    assert a == b and a.to_dict()["epochs"] == b.to_dict()["epochs"]
    assert run("J_FT", tiny, seed=5)[0] != a


def test_j_ft_schedule_is_joint_then_task_only(tiny):
    report = run("J_FT", tiny, epochs_codec=1, epochs_task=3)[0]
    assert len(report.epochs) == 3
    assert R.TrainReport.from_dict(report.to_dict()) == report


@pytest.mark.parametrize("regime", [r.value for r in R.Regime])
@pytest.mark.parametrize("seed", [0, 1])
def test_frozen_groups_bit_identical(tiny, regime, seed):
    _, codec, task = tiny
    before = digests(codec, task)
    report, _, _ = run(regime, tiny, seed=seed)
    trainable = R.trainable_groups(regime)
    assert set(report.digests) == set(GROUPS)
    for g in GROUPS:
        if g not in trainable:
            assert report.digests[g] == before[g], g
    if trainable:
        assert any(report.digests[g] != before[g] for g in trainable)


def test_outputs_written(tmp_path, tiny):
    from machina.params import load_checkpoint
    report, codec, task = run("J_FT_FD", tiny, out_dir=str(tmp_path / "out"))
    c, _, meta = load_checkpoint(tmp_path / "out" / "codec.mckpt")
    assert meta["regime"] == "J_FT_FD" and meta["q"] == "1" and c.digest() == codec.digest()
    assert (tmp_path / "out" / "report.json").exists()


def test_reconstruct_is_8_bit_and_clamped(tiny):
    scenes, codec, _ = tiny
    recs, bpp = R.reconstruct(K.images_nchw(scenes), codec)
    assert recs.shape == (4, 3, 64, 64) and recs.min() >= 0 and recs.max() <= 1
    assert np.array_equal(np.round(recs * 255) / 255, recs)
    assert bpp.shape == (4,) and (bpp > 0).all()


def test_pretrain_task_deterministic(tiny):
    scenes, _, _ = tiny
    cfg = R.PretrainConfig(epochs=1, lr=1e-3, batch_size=2, seed=3)
    a, ra = R.pretrain_task(scenes, cfg)
    b, rb = R.pretrain_task(scenes, cfg)
    assert a.digest() == b.digest() and ra == rb


def test_pretrain_codec_recovers_from_divergence(tiny):
    scenes, codec, _ = tiny
    bad = codec.copy()
    bad["decoder.deconv2.bias"].data[...] = np.nan
    params, report = R.pretrain_codec(1, scenes, R.PretrainConfig(epochs=2, batch_size=2), config=SMALL, init=bad)
    assert report.diverged and report.epochs == []
    assert params.digest() == bad.digest()


# ------------------------------------------------- trained models (cached)


@pytest.fixture(scope="module")
def study():
    from study import Study
    return Study()


@pytest.mark.slow
def test_q1_bpp_decreases_over_first_five_epochs(study):
    bpp = [e["bpp"] for e in study.codec(1)[1]["epochs"][:5]]
    assert all(b < a for a, b in zip(bpp, bpp[1:])), bpp


@pytest.mark.slow
def test_codec_pretraining_improves_training_image_by_3_db(study):
    x = K.images_nchw(study.train[:1])
    before = R.reconstruct(x, C.init_codec_params(C.CodecConfig(q=1), 0))[0]
    after = R.reconstruct(x, study.codec(1)[0])[0]
    gain = M.psnr(x, after) - M.psnr(x, before)
    assert gain >= 3.0, gain


@pytest.mark.slow
def test_task_train_split_not_worse_than_eval_split(study):
    params = study.task_rq()[0]
    train = study.train[:len(study.eval)]
    m_train = K.evaluate_map(K.detect(K.images_nchw(train), params), train)["map50"]
    m_eval = study.clean_map()["map50"]
    assert m_train >= m_eval - 0.15, (m_train, m_eval)


@pytest.mark.slow
def test_task_loss_moving_average_decreases(study):
    losses = np.array([e["task_loss"] for e in study.task_rq()[1]["epochs"]])
    ma = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert (np.diff(ma) < 0).all(), ma


@pytest.mark.slow
def test_c_ft_rate_non_increasing_in_beta(study):
    bpps = [study.point("C_FT", q, beta, 0).bpp for q, beta in R.OPERATING_POINTS]
    rises = [b - a for a, b in zip(bpps, bpps[1:])]  # beta decreases along OPERATING_POINTS
    inversions = [r for r in rises if r < 0]
    assert len(inversions) <= 1 and all(r >= -0.01 for r in inversions), bpps



def test_clip_grad_norm_bounds_joint_norm(tiny):
    from machina.params import clip_grad_norm
    p = tiny[1].copy()
    rng = np.random.default_rng(0)
    for n in p:
        p[n].grad = rng.normal(0, 1, p[n].shape)
    names = p.names(CODEC_GROUPS)
    before = {n: p[n].grad.copy() for n in names}
    norm = np.sqrt(sum((g ** 2).sum() for g in before.values()))
    assert clip_grad_norm(p, CODEC_GROUPS, 1.0) == pytest.approx(norm)
    for n in names:
        assert np.allclose(p[n].grad, before[n] / norm)
    assert clip_grad_norm(p, CODEC_GROUPS, 10.0) == pytest.approx(1.0)
    assert np.allclose(p[names[0]].grad, before[names[0]] / norm)


def test_task_steps_are_norm_bounded(tiny):
    scenes, codec, task = tiny
    cfg = R.RegimeConfig(regime="T_FT", seed=0, epochs_task=1, batch_size=4)  # 4 scenes -> one SGD step
    _, _, t2 = R.run_regime(cfg, scenes, codec, task)
    step = np.sqrt(sum(((t2[n].data - task[n].data) ** 2).sum() for n in task.names(["task"])))
    assert 0 < step <= cfg.lr_task * R.TASK_GRAD_CLIP * (1 + 1e-12)
