"""Modality-balanced collaborative distillation training.

One training step, in order: uni-modal forward with confidence scoring and
adaptive dropout mask sampling; a first-order inner step per modality on its
own cross-entropy; fused forward at the inner-updated encoders with the
dropout mask; teacher fused forward (no gradient); total loss = fused CE +
sum of uni CEs + lambda * distillation; one Adam step on every student
parameter; EMA update of the teacher.

The inner gradient is treated as a constant during the outer backward pass
(first-order), so the whole algorithm needs first derivatives only. The EMA
teacher tracks encoder and fused-head parameters, never the uni-modal heads,
and its predictions enter the loss purely as constants.

ERM and the EMA-only baseline are the same step with feature flags off,
which is what makes the ablation-collapse equivalence exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels as K
from . import model as M
from . import tensor as T
from .optim import AdamState, adam_step, init_adam


class NanLossError(FloatingPointError):
    """A loss term came out NaN; carries the term name."""

    def __init__(self, term: str):
        self.term = term
        super().__init__(f"NaN loss in term {term!r}")


@dataclass(frozen=True)
class MbcdConfig:
    lambda_distill: float = 1.0
    alpha_inner: float = 1e-4
    beta_ema: float = 0.999
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    eval_model: str = "auto"  # auto | student | teacher | both
    amd_enabled: bool = True
    gcc_enabled: bool = True
    distill_enabled: bool = True
    ema_enabled: bool = True

    def __post_init__(self):
        if self.lambda_distill < 0:
            raise ValueError("lambda_distill must be >= 0")
        if self.alpha_inner <= 0:
            raise ValueError("alpha_inner must be > 0")
        if not (0.0 <= self.beta_ema < 1.0):
            raise ValueError("beta_ema must be in [0, 1)")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("invalid optimizer settings")
        if self.eval_model not in ("auto", "student", "teacher", "both"):
            raise ValueError(f"unknown eval_model {self.eval_model!r}")


def erm_config(base: MbcdConfig | None = None, **overrides) -> MbcdConfig:
    base = base or MbcdConfig()
    return replace(base, amd_enabled=False, gcc_enabled=False,
                   distill_enabled=False, ema_enabled=False, **overrides)


def ema_only_config(base: MbcdConfig | None = None, **overrides) -> MbcdConfig:
    base = base or MbcdConfig()
    return replace(base, amd_enabled=False, gcc_enabled=False,
                   distill_enabled=False, ema_enabled=True, **overrides)


@dataclass
class TrainerState:
    student: M.ModelParams
    teacher: dict[str, np.ndarray] | None
    opt: AdamState
    step: int
    mask_rng: np.random.Generator
    config: MbcdConfig


def init_trainer(model_config: M.ModelConfig, config: MbcdConfig,
                 train_seed: int = 0) -> TrainerState:
    student = M.init_params(model_config)
    teacher = None
    if config.ema_enabled or config.distill_enabled:
        teacher = {name: student.arrays[name].copy()
                   for name in M.teacher_tracked_names(model_config)}
    opt = init_adam(student.arrays, lr=config.learning_rate)
    return TrainerState(student=student, teacher=teacher, opt=opt, step=0,
                        mask_rng=np.random.default_rng([train_seed, 6]),
                        config=config)


@dataclass
class StepMetrics:
    loss_total: float
    loss_mm: float
    loss_uni: list[float]
    loss_dis: float
    s: np.ndarray
    r: np.ndarray
    drop_prob: np.ndarray
    mask: np.ndarray  # 1 = kept, 0 = dropped


@dataclass
class ConfidenceStats:
    s: np.ndarray
    r: np.ndarray
    drop_prob: np.ndarray
    mask: np.ndarray


def confidence_scores(uni_logits: list[np.ndarray]) -> np.ndarray:
    """Per modality, the batch sum of maximum softmax probabilities."""
    if any(l.ndim != 2 or l.shape[0] == 0 for l in uni_logits):
        raise ValueError("confidence_scores: need non-empty 2-D logits per modality")
    out = np.empty(len(uni_logits))
    for k, logits in enumerate(uni_logits):
        probs = K.softmax_fwd(np.ascontiguousarray(logits, dtype=np.float64))
        vals, _ = K.max_last_fwd(probs)
        out[k] = vals.sum()
    return out


def relative_speed(s: np.ndarray) -> np.ndarray:
    """r_k: mean of s_k / s_j over the other modalities."""
    s = np.asarray(s, dtype=np.float64)
    m = s.shape[0]
    if m < 2:
        raise ValueError("relative_speed: need at least two modalities")
    if (s <= 0).any():
        raise ValueError("relative_speed: confidence scores must be positive")
    ratios = s[:, None] / s[None, :]
    return (ratios.sum(axis=1) - 1.0) / (m - 1)


def dropout_probs(r: np.ndarray) -> np.ndarray:
    return np.tanh(np.maximum(np.asarray(r, dtype=np.float64) - 1.0, 0.0))


def sample_dropout_mask(r: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Keep-mask: entry k is 0 (dropped) with probability tanh(max(r_k-1, 0)).

    The slowest modality has r <= 1 by construction, so it is never dropped
    and the mask always keeps at least one modality.
    """
    p = dropout_probs(r)
    return np.where(rng.random(p.shape[0]) < p, 0.0, 1.0)


def batch_confidence(uni_logits_values: list[np.ndarray], rng: np.random.Generator | None,
                     amd_enabled: bool) -> ConfidenceStats:
    s = confidence_scores(uni_logits_values)
    r = relative_speed(s)
    p = dropout_probs(r)
    if amd_enabled:
        if rng is None:
            raise ValueError("adaptive dropout needs an RNG")
        mask = sample_dropout_mask(r, rng)
    else:
        mask = np.ones(s.shape[0])
    return ConfidenceStats(s=s, r=r, drop_prob=p, mask=mask)


def _uni_grads(tape: T.Tape, leaves: dict[str, T.Tensor], loss_uni_sum: T.Tensor):
    grads = tape.gradients(loss_uni_sum)
    return {name: grads[t.node_id].values for name, t in leaves.items()}


def inner_update(student: M.ModelParams, k: int, batch, alpha: float) -> dict[str, np.ndarray]:
    """One plain gradient step on modality k's uni-modal cross-entropy.

    Returns the updated encoder arrays for modality k; the head is read but
    never updated.
    """
    if alpha < 0:
        raise ValueError("inner_update: alpha must be non-negative")
    xs, y = batch
    with T.Tape() as tape:
        leaves = M.leaf_tensors(tape, student.arrays)
        feat = M.encode_t(leaves, T.Tensor(xs[k]), k)
        loss = T.cross_entropy(M.uni_logits_t(leaves, feat, k), y)
        if np.isnan(loss.item()):
            raise NanLossError(f"loss_uni_{k + 1}")
        grads = tape.gradients(loss)
    out = {}
    for name in M.encoder_param_names(student.config, k):
        g = grads[leaves[name].node_id].values
        if np.isnan(g).any():
            raise NanLossError(f"inner_grad_{k + 1}")
        out[name] = student.arrays[name] - alpha * g
    return out


def ema_update(teacher: dict[str, np.ndarray], student_arrays: dict[str, np.ndarray],
               beta: float) -> dict[str, np.ndarray]:
    """teacher <- beta * teacher + (1 - beta) * student, elementwise."""
    out = {}
    for name, t in teacher.items():
        s = student_arrays[name]
        if s.shape != t.shape:
            raise ValueError(f"ema_update: shape drift for {name!r}: {t.shape} vs {s.shape}")
        out[name] = beta * t + (1.0 - beta) * s
    return out


def _check_prob_rows(name: str, arr: np.ndarray) -> None:
    rows = np.atleast_2d(arr)
    if not np.allclose(rows.sum(axis=1), 1.0, atol=1e-6, rtol=0.0):
        raise ValueError(f"distillation_loss: {name} rows must sum to 1")


def distillation_loss(teacher_fused_probs: np.ndarray, student_fused_probs: T.Tensor,
                      student_uni_probs: list[T.Tensor]) -> T.Tensor:
    """KL(teacher || student fused) plus KL(teacher || each uni branch),
    batch-mean. The teacher side enters as a constant, so gradients reach
    student parameters only."""
    _check_prob_rows("teacher", teacher_fused_probs)
    _check_prob_rows("student_fused", student_fused_probs.values)
    for k, p in enumerate(student_uni_probs):
        _check_prob_rows(f"student_uni_{k + 1}", p.values)
    p_ema = T.constant(teacher_fused_probs)
    total = T.kl_divergence(p_ema, student_fused_probs)
    for p_uni in student_uni_probs:
        total = T.add(total, T.kl_divergence(p_ema, p_uni))
    return total


def teacher_fused_probs(state: TrainerState, xs: list[np.ndarray]) -> np.ndarray:
    """Teacher fused softmax prediction, all-ones mask, values only."""
    if state.teacher is None:
        raise ValueError("no teacher in this trainer state")
    view = teacher_view(state)
    _, _, fused = M.forward_all(view, xs)
    return K.softmax_fwd(np.ascontiguousarray(fused))


def teacher_view(state: TrainerState) -> M.ModelParams:
    """Teacher parameters completed with the student's uni heads (the teacher
    itself never tracks them)."""
    arrays = dict(state.student.arrays)
    arrays.update(state.teacher)
    return M.ModelParams(state.student.config, arrays)


def train_step(state: TrainerState, batch, config: MbcdConfig | None = None) -> StepMetrics:
    """One optimizer step of the full algorithm; feature flags turn the same
    code path into the ERM / EMA-only baselines."""
    cfg = config or state.config
    xs, y = batch
    student = state.student
    mcfg = student.config
    m = mcfg.num_modalities

    with T.Tape() as tape:
        base = M.leaf_tensors(tape, student.arrays)

        # (1) uni-modal branches at current parameters
        feats = [M.encode_t(base, T.Tensor(xs[k]), k) for k in range(m)]
        uni_logits = [M.uni_logits_t(base, feats[k], k) for k in range(m)]
        uni_losses = [T.cross_entropy(uni_logits[k], y) for k in range(m)]
        loss_uni_sum = uni_losses[0]
        for k in range(1, m):
            loss_uni_sum = T.add(loss_uni_sum, uni_losses[k])
        loss_uni_vals = [l.item() for l in uni_losses]
        for k, v in enumerate(loss_uni_vals):
            if np.isnan(v):
                raise NanLossError(f"loss_uni_{k + 1}")

        stats = batch_confidence([l.values for l in uni_logits],
                                 state.mask_rng, cfg.amd_enabled)

        # pure uni-CE gradients: drive the inner step and the uni loss term
        g_uni = _uni_grads(tape, base, loss_uni_sum)

        # (2) first-order inner step per modality
        if cfg.gcc_enabled:
            prime: dict[str, T.Tensor] = {}
            for k in range(m):
                for name in M.encoder_param_names(mcfg, k):
                    g = g_uni[name]
                    if np.isnan(g).any():
                        raise NanLossError(f"inner_grad_{k + 1}")
                    prime[name] = tape.leaf(student.arrays[name] - cfg.alpha_inner * g)
        else:
            prime = {name: base[name] for k in range(m)
                     for name in M.encoder_param_names(mcfg, k)}

        # (3) fused forward at the stepped encoders, dropout mask applied
        fused_env = dict(base)
        fused_env.update(prime)
        feats_prime = [M.encode_t(fused_env, T.Tensor(xs[k]), k) for k in range(m)]
        fused_logits = M.fused_logits_t(fused_env, feats_prime, stats.mask)
        loss_mm = T.cross_entropy(fused_logits, y)
        if np.isnan(loss_mm.item()):
            raise NanLossError("loss_mm")

        # (4) teacher fused forward (values only) and distillation terms
        loss_dis_val = 0.0
        if cfg.distill_enabled:
            p_ema = teacher_fused_probs(state, xs)
            p_mm = T.softmax_last_axis(fused_logits)
            p_unis = [T.softmax_last_axis(l) for l in uni_logits]
            loss_dis = distillation_loss(p_ema, p_mm, p_unis)
            loss_dis_val = loss_dis.item()
            if np.isnan(loss_dis_val):
                raise NanLossError("loss_dis")
            objective = T.add(loss_mm, T.scalar_mul(loss_dis, cfg.lambda_distill))
        else:
            objective = loss_mm

        # (5)+(6) combined gradient of the remaining terms
        g_rest = tape.gradients(objective)

    grads: dict[str, np.ndarray] = {}
    for name, leaf in base.items():
        g = g_uni[name] + g_rest[leaf.node_id].values
        p_leaf = prime.get(name)
        if p_leaf is not None and p_leaf is not leaf:
            g = g + g_rest[p_leaf.node_id].values
        grads[name] = g

    new_arrays, _ = adam_step(student.arrays, grads, state.opt)
    state.student = M.ModelParams(mcfg, new_arrays)
    state.step += 1

    # (7) teacher update trails the optimizer step
    if cfg.ema_enabled:
        if state.teacher is None:
            raise ValueError("ema_enabled but the trainer state has no teacher")
        state.teacher = ema_update(state.teacher, new_arrays, cfg.beta_ema)

    loss_total = loss_mm.item() + sum(loss_uni_vals) + cfg.lambda_distill * loss_dis_val
    return StepMetrics(loss_total=loss_total, loss_mm=loss_mm.item(),
                       loss_uni=loss_uni_vals, loss_dis=loss_dis_val,
                       s=stats.s, r=stats.r, drop_prob=stats.drop_prob, mask=stats.mask)


def train_step_mbcd(state: TrainerState, batch, config: MbcdConfig | None = None) -> StepMetrics:
    return train_step(state, batch, config)


def train_step_erm(state: TrainerState, batch) -> StepMetrics:
    return train_step(state, batch, erm_config(state.config))


def train_step_ema_only(state: TrainerState, batch, beta_ema: float | None = None) -> StepMetrics:
    cfg = ema_only_config(state.config)
    if beta_ema is not None:
        cfg = replace(cfg, beta_ema=beta_ema)
    return train_step(state, batch, cfg)


def alignment_residual(loss_mm_fn, theta: dict[str, np.ndarray],
                       g_uni: dict[str, np.ndarray], g_mm: dict[str, np.ndarray],
                       alpha: float) -> float:
    """|L(theta') - [L(theta) - alpha * sum_k <g_uni_k, g_mm_k>]| with
    theta' = theta - alpha * g_uni: the first-order expansion error that the
    gradient-consistency objective relies on."""
    theta_prime = {n: theta[n] - alpha * g_uni[n] for n in theta}
    inner = sum(float(np.sum(g_uni[n] * g_mm[n])) for n in theta)
    predicted = loss_mm_fn(theta) - alpha * inner
    return abs(loss_mm_fn(theta_prime) - predicted)


def taylor_residual(student: M.ModelParams, batch, alpha: float) -> float:
    """Numerical check of the first-order expansion on a real model: the
    residual between the fused loss at the inner-updated encoders and its
    linearization, which must shrink as O(alpha^2)."""
    if alpha <= 0:
        raise ValueError("taylor_residual: alpha must be positive")
    xs, y = batch
    cfg = student.config
    m = cfg.num_modalities
    enc_names = [n for k in range(m) for n in M.encoder_param_names(cfg, k)]

    with T.Tape() as tape:
        leaves = M.leaf_tensors(tape, student.arrays)
        feats = [M.encode_t(leaves, T.Tensor(xs[k]), k) for k in range(m)]
        loss_uni_sum = T.cross_entropy(M.uni_logits_t(leaves, feats[0], 0), y)
        for k in range(1, m):
            loss_uni_sum = T.add(loss_uni_sum, T.cross_entropy(M.uni_logits_t(leaves, feats[k], k), y))
        g_uni_all = tape.gradients(loss_uni_sum)
        fused = M.fused_logits_t(leaves, feats, [1.0] * m)
        loss_mm = T.cross_entropy(fused, y)
        g_mm_all = tape.gradients(loss_mm)

    theta = {n: student.arrays[n] for n in enc_names}
    g_uni = {n: g_uni_all[leaves[n].node_id].values for n in enc_names}
    g_mm = {n: g_mm_all[leaves[n].node_id].values for n in enc_names}

    def fused_loss(enc_arrays: dict[str, np.ndarray]) -> float:
        arrays = dict(student.arrays)
        arrays.update(enc_arrays)
        view = M.ModelParams(cfg, arrays)
        _, _, logits = M.forward_all(view, xs)
        loss, _ = K.cross_entropy_fwd(np.ascontiguousarray(logits),
                                      np.ascontiguousarray(y, dtype=np.int64))
        return float(loss)

    return alignment_residual(fused_loss, theta, g_uni, g_mm, alpha)


def evaluate(params: M.ModelParams, xs: list[np.ndarray], y: np.ndarray,
             mask=None, uni_params: M.ModelParams | None = None) -> dict:
    """Top-1 accuracies and mean CE losses for the fused and uni branches.

    Argmax ties break toward the lowest class index. No dropout at
    evaluation time: the default mask is all ones. When evaluating an EMA
    teacher, pass the student as uni_params: the teacher tracks no uni
    heads, so the uni branches are the student's.
    """
    if y.shape[0] == 0:
        raise ValueError("evaluate: empty split")
    _, unis, fused = M.forward_all(params, xs, mask)
    if uni_params is not None:
        _, unis, _ = M.forward_all(uni_params, xs)
    y64 = np.ascontiguousarray(y, dtype=np.int64)
    acc_fused = float((fused.argmax(axis=1) == y64).mean())
    loss_mm, _ = K.cross_entropy_fwd(np.ascontiguousarray(fused), y64)
    acc_uni, loss_uni = [], []
    for logits in unis:
        acc_uni.append(float((logits.argmax(axis=1) == y64).mean()))
        l, _ = K.cross_entropy_fwd(np.ascontiguousarray(logits), y64)
        loss_uni.append(float(l))
    return {"accuracy_fused": acc_fused, "accuracy_uni": acc_uni,
            "loss_mm": float(loss_mm), "loss_uni": loss_uni}


def eval_params_for(state: TrainerState, which: str) -> M.ModelParams:
    """Resolve the evaluation model: 'auto' means teacher when EMA is on."""
    if which == "auto":
        which = "teacher" if (state.config.ema_enabled and state.teacher is not None) else "student"
    if which == "student":
        return state.student
    if which == "teacher":
        if state.teacher is None:
            raise ValueError("no teacher to evaluate")
        return teacher_view(state)
    raise ValueError(f"unknown eval model {which!r}")


def eval_views(state: TrainerState, which: str) -> tuple[M.ModelParams, M.ModelParams]:
    """(fused_view, uni_view): the fused prediction comes from the chosen
    model, uni-branch predictions always from the student (the teacher has
    no uni heads of its own)."""
    fused_view = eval_params_for(state, which)
    return fused_view, state.student


def evaluate_state(state: TrainerState, xs, y, which: str = "auto") -> dict:
    fused_view, uni_view = eval_views(state, which)
    return evaluate(fused_view, xs, y, uni_params=uni_view)
