import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbcdlab import mbcd as A
from mbcdlab import model as M
from mbcdlab import synthdata as D
from mbcdlab import tensor as T


from oracles import scalar_confidence_oracle, scalar_speed_oracle


def small_model(seed=0, m=2):
    return M.ModelConfig(input_dims=(5, 4, 6)[:m], hidden_dims=(8,) * m,
                         feature_dims=(6,) * m, num_classes=3, init_seed=seed)


def random_batch(rng, mcfg, n=8):
    xs = [rng.normal(size=(n, d)) for d in mcfg.input_dims]
    y = rng.integers(0, mcfg.num_classes, size=n)
    return xs, y


def test_confidence_uniform_logits():
    s = A.confidence_scores([np.zeros((4, 8)), np.zeros((4, 8))])
    assert np.allclose(s, 0.5, atol=1e-15)


def test_confidence_saturates_at_batch_size():
    hot = np.full((6, 4), -1e3)
    hot[:, 2] = 1e3
    s = A.confidence_scores([hot])
    assert abs(s[0] - 6.0) < 1e-12


def test_confidence_matches_scalar_oracle():
    rng = np.random.default_rng(8)
    for _ in range(25):
        logits = [rng.normal(scale=3.0, size=(rng.integers(1, 12), rng.integers(2, 9)))
                  for _ in range(3)]
        s = A.confidence_scores(logits)
        oracle = scalar_confidence_oracle(logits)
        assert np.abs(s - np.array(oracle)).max() < 1e-12


def test_confidence_rejects_empty_batch():
    with pytest.raises(ValueError):
        A.confidence_scores([np.zeros((0, 4))])


def test_relative_speed_examples():
    assert np.allclose(A.relative_speed(np.array([3.0, 3.0])), [1.0, 1.0])
    r = A.relative_speed(np.array([3.0, 3.0, 1.0]))
    assert np.allclose(r, [2.0, 2.0, 1.0 / 3.0], atol=1e-15)


def test_relative_speed_matches_scalar_oracle():
    rng = np.random.default_rng(9)
    for _ in range(25):
        s = rng.uniform(0.3, 5.0, size=rng.integers(2, 6))
        assert np.abs(A.relative_speed(s) - np.array(scalar_speed_oracle(list(s)))).max() < 1e-12


def test_relative_speed_permutation_equivariant():
    s = np.array([0.8, 2.5, 1.1, 3.0])
    perm = np.array([2, 0, 3, 1])
    assert np.allclose(A.relative_speed(s)[perm], A.relative_speed(s[perm]), atol=1e-15)


def test_relative_speed_rejects_zero_confidence():
    with pytest.raises(ValueError, match="positive"):
        A.relative_speed(np.array([1.0, 0.0]))
    with pytest.raises(ValueError, match="two"):
        A.relative_speed(np.array([1.0]))


def test_dropout_probability_values():
    p = A.dropout_probs(np.array([2.0, 0.5]))
    assert abs(p[0] - math.tanh(1.0)) < 1e-15
    assert p[1] == 0.0


def test_balanced_speeds_never_drop():
    rng = np.random.default_rng(10)
    for _ in range(200):
        mask = A.sample_dropout_mask(np.array([1.0, 1.0]), rng)
        assert mask.tolist() == [1.0, 1.0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.05, 20.0), min_size=2, max_size=4), st.integers(0, 2**32 - 1))
def test_slowest_modality_never_dropped(s_list, seed):
    s = np.array(s_list)
    r = A.relative_speed(s)
    assert A.dropout_probs(r)[np.argmin(s)] == 0.0
    mask = A.sample_dropout_mask(r, np.random.default_rng(seed))
    assert mask[np.argmin(s)] == 1.0
    assert mask.sum() >= 1.0


def test_dropout_prob_monotone_in_speed():
    r = np.linspace(0.0, 4.0, 50)
    p = A.dropout_probs(r)
    assert (np.diff(p) >= 0).all()
    assert (p[r <= 1.0] == 0.0).all()
    assert (p < 1.0).all()


def test_mask_frequency_matches_probability():
    rng = np.random.default_rng(11)
    p = math.tanh(1.0)
    draws = np.array([A.sample_dropout_mask(np.array([2.0, 0.5]), rng) for _ in range(4000)])
    drop_rate = 1.0 - draws[:, 0].mean()
    assert abs(drop_rate - p) < 3 * math.sqrt(p * (1 - p) / 4000)
    assert (draws[:, 1] == 1.0).all()


def test_inner_update_zero_alpha_is_identity():
    mcfg = small_model()
    params = M.init_params(mcfg)
    batch = random_batch(np.random.default_rng(3), mcfg)
    out = A.inner_update(params, 0, batch, alpha=0.0)
    for name in M.encoder_param_names(mcfg, 0):
        assert out[name].tobytes() == params.arrays[name].tobytes()


def test_inner_update_zero_gradient_is_identity():
    mcfg = small_model()
    params = M.init_params(mcfg)
    for name in params.arrays:
        params.arrays[name] = np.zeros_like(params.arrays[name])
    batch = random_batch(np.random.default_rng(4), mcfg)
    out = A.inner_update(params, 1, batch, alpha=0.5)
    for name in M.encoder_param_names(mcfg, 1):
        assert out[name].tobytes() == params.arrays[name].tobytes()


def test_inner_update_leaves_head_and_other_encoders_alone():
    mcfg = small_model()
    params = M.init_params(mcfg)
    batch = random_batch(np.random.default_rng(5), mcfg)
    out = A.inner_update(params, 0, batch, alpha=0.1)
    assert set(out) == set(M.encoder_param_names(mcfg, 0))
    assert any(not np.array_equal(out[n], params.arrays[n]) for n in out)


def test_inner_step_scalar_toy():
    # L(theta) = theta^2 / 2 at theta=1 with alpha=0.1 steps to 0.9
    with T.Tape() as tape:
        theta = tape.leaf([[1.0]])
        loss = T.scalar_mul(T.reduce_sum(T.matmul(theta, theta)), 0.5)
        grad = tape.gradients(loss)[theta.node_id].values
    stepped = 1.0 - 0.1 * grad[0, 0]
    assert stepped == pytest.approx(0.9, abs=1e-15)


def test_alignment_residual_closed_form_quadratic():
    theta = {"x": np.array([1.0])}
    g = {"x": np.array([1.0])}  # gradient of x^2/2 at 1

    def loss(arrays):
        return 0.5 * float(arrays["x"][0] ** 2)

    res = A.alignment_residual(loss, theta, g, g, alpha=0.1)
    assert abs(res - 0.005) < 1e-12
    assert A.alignment_residual(loss, theta, g, g, alpha=0.0) == 0.0


def test_taylor_residual_quadratic_scaling():
    ratios = []
    for seed in range(20):
        mcfg = small_model(seed=seed)
        params = M.init_params(mcfg)
        batch = random_batch(np.random.default_rng([21, seed]), mcfg)
        hi = A.taylor_residual(params, batch, alpha=1e-2)
        lo = A.taylor_residual(params, batch, alpha=5e-3)
        ratios.append(hi / lo)
    assert 3.5 <= float(np.median(ratios)) <= 4.5


def test_ema_single_step_value():
    out = A.ema_update({"w": np.array([2.0])}, {"w": np.array([1.0])}, beta=0.9)
    assert out["w"][0] == pytest.approx(1.9, abs=1e-15)


def test_ema_beta_zero_tracks_student():
    student = {"w": np.array([3.3, -1.0])}
    out = A.ema_update({"w": np.array([7.0, 7.0])}, student, beta=0.0)
    assert out["w"].tolist() == student["w"].tolist()


def test_ema_closed_form_equivalence():
    rng = np.random.default_rng(12)
    thetas = [rng.normal(size=(3, 2)) for _ in range(101)]
    for beta in (0.0, 0.9, 0.999):
        teacher = {"w": thetas[0].copy()}
        for t in range(1, 101):
            teacher = A.ema_update(teacher, {"w": thetas[t]}, beta)
        closed = beta**100 * thetas[0]
        for i in range(1, 101):
            closed = closed + (1 - beta) * beta ** (100 - i) * thetas[i]
        assert np.abs(teacher["w"] - closed).max() < 1e-10


def test_ema_shape_drift_rejected():
    with pytest.raises(ValueError, match="shape drift"):
        A.ema_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.5)


def test_distillation_identity_is_zero():
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    val = A.distillation_loss(p, T.constant(p), [T.constant(p)]).item()
    assert val == 0.0


def test_distillation_hand_value():
    p_ema = np.array([[1.0, 0.0]])
    student = T.constant([[0.5, 0.5]])
    val = A.distillation_loss(p_ema, student, [student]).item()
    assert abs(val - 2.0 * math.log(2.0)) < 1e-9


def test_distillation_nonnegative_random():
    rng = np.random.default_rng(13)
    for _ in range(200):
        n, c = rng.integers(1, 6), rng.integers(2, 7)
        def dist():
            raw = rng.uniform(0.05, 1.0, size=(n, c))
            return raw / raw.sum(axis=1, keepdims=True)
        val = A.distillation_loss(dist(), T.constant(dist()),
                                  [T.constant(dist()) for _ in range(2)]).item()
        assert val >= 0.0


def test_distillation_validates_rows():
    bad = T.constant([[0.7, 0.7]])
    good = np.array([[0.5, 0.5]])
    with pytest.raises(ValueError, match="sum to 1"):
        A.distillation_loss(good, bad, [])


def test_distillation_gradient_ignores_teacher_parameters():
    # gradients depend on the teacher only through its emitted probabilities
    rng = np.random.default_rng(14)
    logits = rng.normal(size=(4, 3))
    p_ema = np.asarray(T.softmax_last_axis(T.constant(rng.normal(size=(4, 3)))).values)

    def student_grads(teacher_probs):
        with T.Tape() as tape:
            leaf = tape.leaf(logits)
            loss = A.distillation_loss(teacher_probs, T.softmax_last_axis(leaf), [])
            return tape.gradients(loss)[leaf.node_id].values.tobytes()

    assert student_grads(p_ema) == student_grads(p_ema.copy())


def _mk_trainer(mcfg, tcfg, seed=1):
    return A.init_trainer(mcfg, tcfg, train_seed=seed)


def _run_steps(state, batches, step_fn=A.train_step):
    out = []
    for b in batches:
        out.append(step_fn(state, b))
    return out


def _batches_for(mcfg, n_steps, seed=6, n=8):
    rng = np.random.default_rng(seed)
    return [random_batch(rng, mcfg, n) for _ in range(n_steps)]


def test_lambda_zero_collapses_total_loss():
    mcfg = small_model()
    state = _mk_trainer(mcfg, A.MbcdConfig(lambda_distill=0.0))
    (sm,) = _run_steps(state, _batches_for(mcfg, 1))
    assert abs(sm.loss_total - (sm.loss_mm + sum(sm.loss_uni))) < 1e-12


def test_ablation_collapse_matches_erm_bitwise():
    mcfg = small_model(m=3)
    batches = _batches_for(mcfg, 30)
    ablated = _mk_trainer(mcfg, replace(A.MbcdConfig(), amd_enabled=False,
                                        gcc_enabled=False, distill_enabled=False),
                          seed=2)
    erm = _mk_trainer(mcfg, A.erm_config(), seed=2)
    _run_steps(ablated, batches)
    _run_steps(erm, batches, step_fn=A.train_step_erm)
    for name in ablated.student.arrays:
        assert ablated.student.arrays[name].tobytes() == erm.student.arrays[name].tobytes()


def test_ema_only_beta_zero_equals_erm_student():
    mcfg = small_model()
    batches = _batches_for(mcfg, 10)
    ema = _mk_trainer(mcfg, A.ema_only_config(A.MbcdConfig(beta_ema=0.0)), seed=3)
    erm = _mk_trainer(mcfg, A.erm_config(), seed=3)
    _run_steps(ema, batches)
    _run_steps(erm, batches, step_fn=A.train_step_erm)
    for name in erm.student.arrays:
        assert ema.student.arrays[name].tobytes() == erm.student.arrays[name].tobytes()
    for name in ema.teacher:
        assert ema.teacher[name].tobytes() == ema.student.arrays[name].tobytes()


def test_fresh_teacher_first_distill_term_is_zero():
    mcfg = small_model()
    cfg = replace(A.MbcdConfig(), amd_enabled=False, gcc_enabled=False)
    state = _mk_trainer(mcfg, cfg, seed=4)
    xs, _ = _batches_for(mcfg, 1, seed=9)[0]
    p_ema = A.teacher_fused_probs(state, xs)
    _, _, fused = M.forward_all(state.student, xs)
    p_mm = T.softmax_last_axis(T.constant(fused))
    assert T.kl_divergence(T.constant(p_ema), p_mm).item() == 0.0


def test_nan_input_aborts_with_term_name():
    mcfg = small_model()
    state = _mk_trainer(mcfg, A.MbcdConfig(), seed=5)
    xs, y = _batches_for(mcfg, 1)[0]
    xs[0] = xs[0].copy()
    xs[0][0, 0] = np.nan
    with pytest.raises(A.NanLossError, match="loss_uni_1"):
        A.train_step(state, (xs, y))


def test_train_step_reports_stats_and_advances():
    mcfg = small_model(m=3)
    state = _mk_trainer(mcfg, A.MbcdConfig(), seed=6)
    before = {k: v.copy() for k, v in state.student.arrays.items()}
    (sm,) = _run_steps(state, _batches_for(mcfg, 1))
    assert state.step == 1 and state.opt.step == 1
    assert sm.s.shape == (3,) and sm.r.shape == (3,) and sm.mask.shape == (3,)
    assert ((sm.mask == 0) | (sm.mask == 1)).all()
    assert any(not np.array_equal(state.student.arrays[k], before[k]) for k in before)


def test_teacher_stays_fixed_without_ema():
    mcfg = small_model()
    cfg = replace(A.MbcdConfig(), ema_enabled=False)  # distillation from a frozen teacher
    state = _mk_trainer(mcfg, cfg, seed=7)
    frozen = {k: v.copy() for k, v in state.teacher.items()}
    _run_steps(state, _batches_for(mcfg, 3))
    for name in frozen:
        assert state.teacher[name].tobytes() == frozen[name].tobytes()


def test_mbcd_step_updates_teacher_toward_student():
    mcfg = small_model()
    state = _mk_trainer(mcfg, A.MbcdConfig(beta_ema=0.9), seed=8)
    init = {k: v.copy() for k, v in state.teacher.items()}
    _run_steps(state, _batches_for(mcfg, 5))
    moved = sum(
        float(np.abs(state.teacher[k] - init[k]).max()) for k in init)
    assert moved > 0
    for name in state.teacher:
        expected_between = (state.teacher[name] - state.student.arrays[name]) * \
                           (state.teacher[name] - init[name])
        assert np.all(np.sign(expected_between) <= 1)  # teacher sits between init and student


def test_evaluate_perfect_and_chance():
    mcfg = small_model()
    params = M.init_params(mcfg)
    rng = np.random.default_rng(15)
    xs, y = random_batch(rng, mcfg, 30)
    report = A.evaluate(params, xs, y)
    assert set(report) == {"accuracy_fused", "accuracy_uni", "loss_mm", "loss_uni"}
    for name in params.arrays:
        params.arrays[name] = np.zeros_like(params.arrays[name])
    chance = A.evaluate(params, xs, y)
    assert chance["accuracy_fused"] == float((y == 0).mean())  # argmax tie -> class 0


def test_evaluate_matches_confusion_recount():
    mcfg = small_model()
    params = M.init_params(mcfg)
    rng = np.random.default_rng(16)
    xs, y = random_batch(rng, mcfg, 64)
    report = A.evaluate(params, xs, y)
    _, _, fused = M.forward_all(params, xs)
    pred = fused.argmax(axis=1)
    confusion = np.zeros((3, 3), dtype=int)
    for t, p in zip(y, pred):
        confusion[t, p] += 1
    assert report["accuracy_fused"] == confusion.trace() / confusion.sum()


def test_evaluate_rejects_empty_split():
    mcfg = small_model()
    params = M.init_params(mcfg)
    with pytest.raises(ValueError, match="empty"):
        A.evaluate(params, [np.zeros((0, 5)), np.zeros((0, 4))], np.zeros(0, dtype=int))


def test_eval_params_resolution():
    mcfg = small_model()
    mbcd_state = _mk_trainer(mcfg, A.MbcdConfig(), seed=9)
    _run_steps(mbcd_state, _batches_for(mcfg, 2))
    teacher_eval = A.eval_params_for(mbcd_state, "auto")
    assert teacher_eval.arrays["fused.W"].tobytes() == mbcd_state.teacher["fused.W"].tobytes()
    assert teacher_eval.arrays["uni0.W"].tobytes() == mbcd_state.student.arrays["uni0.W"].tobytes()
    erm_state = _mk_trainer(mcfg, A.erm_config(), seed=9)
    assert A.eval_params_for(erm_state, "auto") is erm_state.student
    with pytest.raises(ValueError):
        A.eval_params_for(erm_state, "teacher")
