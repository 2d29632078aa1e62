"""Per-modality MLP encoders, uni-modal heads, and concatenation fusion.

Each encoder is linear-relu-linear followed by LayerNorm; the normalized
feature feeds both the modality's own head and the fused head. Dropped
modalities are zeroed (via masked_scale) before concatenation so the fused
input dimension never changes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple[int, ...]
    hidden_dims: tuple[int, ...]
    feature_dims: tuple[int, ...]
    num_classes: int
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, "feature_dims", tuple(int(d) for d in self.feature_dims))
        m = len(self.input_dims)
        if m < 2:
            raise ValueError("ModelConfig: need at least two modalities")
        if len(self.hidden_dims) != m or len(self.feature_dims) != m:
            raise ValueError("ModelConfig: dim lists must all have length M")
        dims = self.input_dims + self.hidden_dims + self.feature_dims + (self.num_classes,)
        if any(d <= 0 for d in dims):
            raise ValueError("ModelConfig: all dimensions must be positive")

    @property
    def num_modalities(self) -> int:
        return len(self.input_dims)

    @property
    def fused_dim(self) -> int:
        return sum(self.feature_dims)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; also fixes parameter ordering."""
    shapes: dict[str, tuple[int, ...]] = {}
    for k in range(config.num_modalities):
        i, h, f = config.input_dims[k], config.hidden_dims[k], config.feature_dims[k]
        shapes[f"enc{k}.W1"] = (i, h)
        shapes[f"enc{k}.b1"] = (1, h)
        shapes[f"enc{k}.W2"] = (h, f)
        shapes[f"enc{k}.b2"] = (1, f)
    for k in range(config.num_modalities):
        f, c = config.feature_dims[k], config.num_classes
        shapes[f"uni{k}.W"] = (f, c)
        shapes[f"uni{k}.b"] = (1, c)
    shapes["fused.W"] = (config.fused_dim, config.num_classes)
    shapes["fused.b"] = (1, config.num_classes)
    return shapes


def encoder_param_names(config: ModelConfig, k: int) -> tuple[str, ...]:
    return (f"enc{k}.W1", f"enc{k}.b1", f"enc{k}.W2", f"enc{k}.b2")


def teacher_tracked_names(config: ModelConfig) -> tuple[str, ...]:
    """The EMA teacher follows encoders and the fused head only."""
    names: list[str] = []
    for k in range(config.num_modalities):
        names.extend(encoder_param_names(config, k))
    names.extend(("fused.W", "fused.b"))
    return tuple(names)


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def init_params(config: ModelConfig) -> ModelParams:
    """Xavier-uniform weights, zero biases, reproducible from init_seed."""
    rng = np.random.default_rng([config.init_seed, 4])
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(config, arrays)


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def _linear(x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    # Bias broadcast as ones @ b keeps the engine free of row broadcasting.
    ones = T.constant(np.ones((x.shape[0], 1)))
    return T.add(T.matmul(x, w), T.matmul(ones, b))


def encode_t(params: dict[str, T.Tensor], x: T.Tensor, k: int) -> T.Tensor:
    """Tape-aware encoder forward for modality k (params given as tensors)."""
    h = T.relu(_linear(x, params[f"enc{k}.W1"], params[f"enc{k}.b1"]))
    f = _linear(h, params[f"enc{k}.W2"], params[f"enc{k}.b2"])
    return T.layer_norm_last_axis(f)


def uni_logits_t(params: dict[str, T.Tensor], feature: T.Tensor, k: int) -> T.Tensor:
    return _linear(feature, params[f"uni{k}.W"], params[f"uni{k}.b"])


def fused_logits_t(params: dict[str, T.Tensor], features: list[T.Tensor], mask) -> T.Tensor:
    mask = list(mask)
    if len(mask) != len(features):
        raise ValueError("fused_logits: mask length must equal modality count")
    gated = [T.masked_scale(f, m) for f, m in zip(features, mask)]
    joint = T.concat_last_axis(*gated)
    return _linear(joint, params["fused.W"], params["fused.b"])


def as_tensors(params: ModelParams) -> dict[str, T.Tensor]:
    """Constant (untracked) tensor view of the parameter arrays."""
    return {name: T.Tensor(arr) for name, arr in params.arrays.items()}


def leaf_tensors(tape: T.Tape, arrays: dict[str, np.ndarray]) -> dict[str, T.Tensor]:
    """Register every array as a differentiable leaf on the tape, in
    canonical insertion order."""
    return {name: tape.leaf(arr) for name, arr in arrays.items()}


def encode(params: ModelParams, x: np.ndarray, k: int) -> np.ndarray:
    """Value-level encoder forward (no tape)."""
    if k >= params.config.num_modalities:
        raise ValueError(f"encode: modality {k} out of range")
    if x.ndim != 2 or x.shape[1] != params.config.input_dims[k]:
        raise T.ShapeError("encode", x.shape, (x.shape[0], params.config.input_dims[k]))
    return encode_t(as_tensors(params), T.Tensor(x), k).values


def uni_logits(params: ModelParams, feature: np.ndarray, k: int) -> np.ndarray:
    return uni_logits_t(as_tensors(params), T.Tensor(feature), k).values


def fused_logits(params: ModelParams, features: list[np.ndarray], mask) -> np.ndarray:
    return fused_logits_t(as_tensors(params), [T.Tensor(f) for f in features], mask).values


def forward_all(params: ModelParams, xs: list[np.ndarray], mask=None):
    """Values-only forward of every branch: (features, uni_logits, fused)."""
    cfg = params.config
    if mask is None:
        mask = [1.0] * cfg.num_modalities
    pt = as_tensors(params)
    feats = [encode_t(pt, T.Tensor(xs[k]), k) for k in range(cfg.num_modalities)]
    unis = [uni_logits_t(pt, feats[k], k).values for k in range(cfg.num_modalities)]
    fused = fused_logits_t(pt, feats, mask).values
    return [f.values for f in feats], unis, fused


def _config_to_dict(config: ModelConfig) -> dict:
    return {
        "input_dims": list(config.input_dims),
        "hidden_dims": list(config.hidden_dims),
        "feature_dims": list(config.feature_dims),
        "num_classes": config.num_classes,
        "init_seed": config.init_seed,
    }


def _config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        input_dims=tuple(d["input_dims"]),
        hidden_dims=tuple(d["hidden_dims"]),
        feature_dims=tuple(d["feature_dims"]),
        num_classes=int(d["num_classes"]),
        init_seed=int(d["init_seed"]),
    )


def arrays_to_manifest(arrays: dict[str, np.ndarray]) -> dict:
    """Textual exact-roundtrip encoding: repr() of each float64."""
    return {
        name: {"shape": list(arr.shape), "data": [repr(float(v)) for v in arr.ravel()]}
        for name, arr in arrays.items()
    }


def arrays_from_manifest(entry: dict) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, spec in entry.items():
        arr = np.array([float(v) for v in spec["data"]], dtype=np.float64)
        out[name] = arr.reshape(spec["shape"])
    return out


def save_checkpoint(path, student: ModelParams, teacher: dict[str, np.ndarray] | None = None,
                    step: int = 0) -> None:
    """Single-file JSON checkpoint with student and optional teacher section."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model": _config_to_dict(student.config),
        "step": int(step),
        "student": arrays_to_manifest(student.arrays),
    }
    if teacher is not None:
        doc["teacher"] = arrays_to_manifest(teacher)
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path):
    """Returns (student: ModelParams, teacher: dict | None, step: int)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    config = _config_from_dict(doc["model"])
    loaded = arrays_from_manifest(doc["student"])
    expected = param_shapes(config)
    if {k: tuple(v.shape) for k, v in loaded.items()} != expected:
        raise ValueError("checkpoint arrays do not match the model config")
    # restore canonical parameter order; the JSON container sorts keys
    student = ModelParams(config, {name: loaded[name] for name in expected})
    teacher = None
    if "teacher" in doc:
        raw = arrays_from_manifest(doc["teacher"])
        teacher = {name: raw[name] for name in teacher_tracked_names(config) if name in raw}
        if set(teacher) != set(raw):
            raise ValueError("checkpoint teacher section holds unexpected arrays")
    return student, teacher, int(doc.get("step", 0))
