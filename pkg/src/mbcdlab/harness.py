"""Experiment orchestration: configs, protocols, seeds, metrics, sweeps.

Every run is a pure function of (config file, seed list): datasets, inits
and RNG streams all derive from documented SeedSequence mixes, so reruns are
byte-identical. The only file excluded from that contract is timing.txt.
"""

from __future__ import annotations

import configparser
import io
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import flatness as F
from . import kernels as K
from . import mbcd as A
from . import model as M
from . import synthdata as D

SUMMARY_VERSION = 1
METHODS = ("mbcd", "erm", "ema_only")
PROTOCOLS = ("multi_source", "single_source", "in_domain")

# The stock benchmark: three domains, three modalities with one dominant
# (high-snr) channel that carries all of the domain shift, weak channels
# that only pay off when fused. Desk-scale: a full 30-epoch run takes
# seconds. The learning rate is raised above the trainer dataclass default
# because 2250 steps cannot converge at 1e-4 without pretrained features.
BENCHMARK_CONFIG = """\
[run]
version = 1
method = mbcd
protocol = multi_source
target_domain = 0
seeds = 0,1,2,3,4
output_dir = runs/benchmark

[data]
modalities = 3
domains = 3
classes = 4
latent_dim = 6
input_dims = 16,12,10
snr = 3.0,1.08,0.9
noise_std = 1.0
mean_shift_scale = 1.9,0.0,0.0
rotation_strength = 0.2,0.0,0.0
class_sep = 2.6
train_per_domain = 600
val_per_domain = 150
test_per_domain = 750
seed = 0

[model]
hidden_dims = 20,20,20
feature_dims = 8,8,8
init_seed = 0

[trainer]
learning_rate = 0.0016
epochs = 30
batch_size = 16

[flatness]
enabled = true
n_directions = 128
split = train
seed = 0
"""


def benchmark_config(method: str = "mbcd", **overrides) -> "ExperimentConfig":
    """The stock benchmark config with optional field overrides."""
    cfg = parse_config_text(BENCHMARK_CONFIG)
    cfg = replace(cfg, method=method)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg

# SeedSequence stream tags for per-run derivation
_STREAM_DATA = 10
_STREAM_INIT = 11
_STREAM_TRAIN = 12
_STREAM_SHUFFLE = 5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    protocol: str
    target_domain: int
    source_domain: int
    seeds: tuple[int, ...]
    output_dir: str
    data: D.DataGenConfig
    hidden_dims: tuple[int, ...]
    feature_dims: tuple[int, ...]
    init_seed: int
    trainer: A.MbcdConfig
    flatness_enabled: bool
    flatness_radii: tuple[float, ...]
    flatness_directions: int
    flatness_split: str
    flatness_seed: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.flatness_split not in ("train", "val", "test"):
            raise ConfigError("flatness split must be train, val or test")
        nd = self.data.num_domains
        if self.protocol in ("multi_source", "in_domain") and not (0 <= self.target_domain < nd):
            raise ConfigError(f"target_domain {self.target_domain} out of range")
        if self.protocol == "single_source" and not (0 <= self.source_domain < nd):
            raise ConfigError(f"source_domain {self.source_domain} out of range")
        if len(self.hidden_dims) != self.data.num_modalities or \
           len(self.feature_dims) != self.data.num_modalities:
            raise ConfigError("hidden_dims/feature_dims must have one entry per modality")

    def model_config(self, init_seed: int | None = None) -> M.ModelConfig:
        return M.ModelConfig(input_dims=self.data.input_dims,
                             hidden_dims=self.hidden_dims,
                             feature_dims=self.feature_dims,
                             num_classes=self.data.num_classes,
                             init_seed=self.init_seed if init_seed is None else init_seed)

    def trainer_config(self) -> A.MbcdConfig:
        if self.method == "erm":
            return A.erm_config(self.trainer)
        if self.method == "ema_only":
            return A.ema_only_config(self.trainer)
        return self.trainer


_SCHEMA: dict[str, dict[str, str]] = {
    "run": {"version": "int", "method": "str", "protocol": "str",
            "target_domain": "int", "source_domain": "int", "seeds": "ints",
            "output_dir": "str"},
    "data": {"modalities": "int", "domains": "int", "classes": "int",
             "latent_dim": "int", "input_dims": "ints", "snr": "floats",
             "noise_std": "float", "mean_shift_scale": "floats",
             "rotation_strength": "floats", "class_sep": "float",
             "train_per_domain": "int",
             "val_per_domain": "int", "test_per_domain": "int", "seed": "int"},
    "model": {"hidden_dims": "ints", "feature_dims": "ints", "init_seed": "int"},
    "trainer": {"lambda_distill": "float", "alpha_inner": "float",
                "beta_ema": "float", "learning_rate": "float",
                "batch_size": "int", "epochs": "int", "eval_model": "str",
                "amd_enabled": "bool", "gcc_enabled": "bool",
                "distill_enabled": "bool", "ema_enabled": "bool"},
    "flatness": {"enabled": "bool", "radii": "floats", "n_directions": "int",
                 "split": "str", "seed": "int"},
}


def _parse_value(kind: str, raw: str):
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "str":
        return raw
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind == "ints":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if kind == "floats":
        return tuple(float(v) for v in raw.split(",") if v.strip())
    raise AssertionError(kind)


def parse_config_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        values[section] = {}
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                values[section][key] = _parse_value(_SCHEMA[section][key], raw)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {exc}") from exc
    for required in ("run", "data"):
        if required not in values:
            raise ConfigError(f"missing required section [{required}]")
    run = values["run"]
    if run.get("version") != 1:
        raise ConfigError("config must declare version = 1 in [run]")
    data_v = values["data"]
    for key in ("modalities", "domains", "classes", "latent_dim", "input_dims", "snr"):
        if key not in data_v:
            raise ConfigError(f"missing [data] key {key!r}")
    try:
        data = D.DataGenConfig(
            num_modalities=data_v["modalities"],
            num_domains=data_v["domains"],
            num_classes=data_v["classes"],
            latent_dim=data_v["latent_dim"],
            input_dims=data_v["input_dims"],
            snr=data_v["snr"],
            train_per_domain=data_v.get("train_per_domain", 600),
            val_per_domain=data_v.get("val_per_domain", 150),
            test_per_domain=data_v.get("test_per_domain", 750),
            noise_std=data_v.get("noise_std", 1.0),
            mean_shift_scale=data_v.get("mean_shift_scale", (0.0,)),
            rotation_strength=data_v.get("rotation_strength", (0.0,)),
            class_sep=data_v.get("class_sep", 3.0),
            seed=data_v.get("seed", 0),
        )
    except D.DataConfigError as exc:
        raise ConfigError(str(exc)) from exc
    model_v = values.get("model", {})
    trainer_v = dict(values.get("trainer", {}))
    try:
        trainer = A.MbcdConfig(**trainer_v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [trainer] settings: {exc}") from exc
    flat_v = values.get("flatness", {})
    try:
        return ExperimentConfig(
            method=run.get("method", "mbcd"),
            protocol=run.get("protocol", "multi_source"),
            target_domain=run.get("target_domain", 0),
            source_domain=run.get("source_domain", 0),
            seeds=tuple(run.get("seeds", (0,))),
            output_dir=run.get("output_dir", "runs/experiment"),
            data=data,
            hidden_dims=model_v.get("hidden_dims", tuple([32] * data.num_modalities)),
            feature_dims=model_v.get("feature_dims", tuple([16] * data.num_modalities)),
            init_seed=model_v.get("init_seed", 0),
            trainer=trainer,
            flatness_enabled=flat_v.get("enabled", False),
            flatness_radii=flat_v.get("radii", F.DEFAULT_RADII),
            flatness_directions=flat_v.get("n_directions", F.DEFAULT_DIRECTIONS),
            flatness_split=flat_v.get("split", "test"),
            flatness_seed=flat_v.get("seed", 0),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def config_to_text(cfg: ExperimentConfig) -> str:
    """Canonical echo of a config; parsing it back yields an equal config."""
    d, t = cfg.data, cfg.trainer

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, tuple):
            return ",".join(fmt(x) for x in v)
        return str(v)

    out = io.StringIO()
    sections = {
        "run": {"version": 1, "method": cfg.method, "protocol": cfg.protocol,
                "target_domain": cfg.target_domain, "source_domain": cfg.source_domain,
                "seeds": cfg.seeds, "output_dir": cfg.output_dir},
        "data": {"modalities": d.num_modalities, "domains": d.num_domains,
                 "classes": d.num_classes, "latent_dim": d.latent_dim,
                 "input_dims": d.input_dims, "snr": d.snr, "noise_std": d.noise_std,
                 "mean_shift_scale": d.mean_shift_scale,
                 "rotation_strength": d.rotation_strength,
                 "class_sep": d.class_sep,
                 "train_per_domain": d.train_per_domain,
                 "val_per_domain": d.val_per_domain,
                 "test_per_domain": d.test_per_domain, "seed": d.seed},
        "model": {"hidden_dims": cfg.hidden_dims, "feature_dims": cfg.feature_dims,
                  "init_seed": cfg.init_seed},
        "trainer": {"lambda_distill": t.lambda_distill, "alpha_inner": t.alpha_inner,
                    "beta_ema": t.beta_ema, "learning_rate": t.learning_rate,
                    "batch_size": t.batch_size, "epochs": t.epochs,
                    "eval_model": t.eval_model, "amd_enabled": t.amd_enabled,
                    "gcc_enabled": t.gcc_enabled, "distill_enabled": t.distill_enabled,
                    "ema_enabled": t.ema_enabled},
        "flatness": {"enabled": cfg.flatness_enabled, "radii": cfg.flatness_radii,
                     "n_directions": cfg.flatness_directions,
                     "split": cfg.flatness_split, "seed": cfg.flatness_seed},
    }
    for name, kv in sections.items():
        out.write(f"[{name}]\n")
        for key, value in kv.items():
            out.write(f"{key} = {fmt(value)}\n")
        out.write("\n")
    return out.getvalue()


def mix_seed(*parts: int) -> int:
    """Documented seed mixing: SeedSequence over the part list."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0] >> 1)


def splits_for(cfg: ExperimentConfig, dataset: D.MultiModalDataset) -> D.ProtocolSplits:
    if cfg.protocol == "multi_source":
        return D.protocol_splits(dataset, cfg.target_domain)
    if cfg.protocol == "single_source":
        return D.single_source_splits(dataset, cfg.source_domain)
    return D.in_domain_splits(dataset, cfg.target_domain)


def dataset_for_seed(cfg: ExperimentConfig, run_seed: int) -> D.MultiModalDataset:
    return D.generate(replace(cfg.data, seed=mix_seed(cfg.data.seed, run_seed, _STREAM_DATA)))


def metric_columns(m: int) -> list[str]:
    cols = ["step", "epoch", "split", "loss_total", "loss_mm"]
    cols += [f"loss_uni_{k + 1}" for k in range(m)]
    cols += ["loss_dis", "acc_mm"]
    cols += [f"acc_uni_{k + 1}" for k in range(m)]
    cols += [f"s_{k + 1}" for k in range(m)]
    cols += [f"r_{k + 1}" for k in range(m)]
    cols += [f"p_{k + 1}" for k in range(m)]
    cols += [f"dropped_{k + 1}" for k in range(m)]
    return cols


def _fmt_cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _eval_stats_row(params: M.ModelParams, xs, y, step, epoch, split,
                    uni_params: M.ModelParams | None = None) -> dict:
    """Evaluation row: losses/accuracies plus confidence diagnostics; no
    dropout at evaluation time so the dropped columns are zero. Fused
    metrics come from params, uni-branch metrics from uni_params (the
    student) when given."""
    _, unis, fused = M.forward_all(params, xs)
    if uni_params is not None:
        _, unis, _ = M.forward_all(uni_params, xs)
    y64 = np.ascontiguousarray(y, dtype=np.int64)
    loss_mm, _ = K.cross_entropy_fwd(np.ascontiguousarray(fused), y64)
    s = A.confidence_scores(unis)
    r = A.relative_speed(s)
    p = A.dropout_probs(r)
    row = {"step": step, "epoch": epoch, "split": split,
           "loss_mm": float(loss_mm), "loss_dis": 0.0,
           "acc_mm": float((fused.argmax(axis=1) == y64).mean())}
    loss_uni_total = 0.0
    for k, logits in enumerate(unis):
        l, _ = K.cross_entropy_fwd(np.ascontiguousarray(logits), y64)
        loss_uni_total += float(l)
        row[f"loss_uni_{k + 1}"] = float(l)
        row[f"acc_uni_{k + 1}"] = float((logits.argmax(axis=1) == y64).mean())
        row[f"s_{k + 1}"] = float(s[k])
        row[f"r_{k + 1}"] = float(r[k])
        row[f"p_{k + 1}"] = float(p[k])
        row[f"dropped_{k + 1}"] = 0.0
    row["loss_total"] = float(loss_mm) + loss_uni_total
    return row


def _train_epoch_row(step_metrics: list[A.StepMetrics], train_eval_row: dict,
                     step, epoch) -> dict:
    m = len(step_metrics[0].loss_uni)
    row = dict(train_eval_row)
    row.update({"step": step, "epoch": epoch, "split": "train"})
    row["loss_total"] = float(np.mean([sm.loss_total for sm in step_metrics]))
    row["loss_mm"] = float(np.mean([sm.loss_mm for sm in step_metrics]))
    row["loss_dis"] = float(np.mean([sm.loss_dis for sm in step_metrics]))
    for k in range(m):
        row[f"loss_uni_{k + 1}"] = float(np.mean([sm.loss_uni[k] for sm in step_metrics]))
        row[f"s_{k + 1}"] = float(np.mean([sm.s[k] for sm in step_metrics]))
        row[f"r_{k + 1}"] = float(np.mean([sm.r[k] for sm in step_metrics]))
        row[f"p_{k + 1}"] = float(np.mean([sm.drop_prob[k] for sm in step_metrics]))
        row[f"dropped_{k + 1}"] = float(np.mean([1.0 - sm.mask[k] for sm in step_metrics]))
    return row


def write_metrics_csv(path, rows: list[dict], m: int) -> None:
    cols = metric_columns(m)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(row[c]) for c in cols) + "\n")


def read_metrics_csv(path) -> list[dict]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            vals = line.split(",")
            row = {}
            for col, v in zip(header, vals):
                if col == "split":
                    row[col] = v
                elif col in ("step", "epoch"):
                    row[col] = int(v)
                else:
                    row[col] = float(v)
            rows.append(row)
    return rows


@dataclass
class SeedResult:
    seed: int
    selected_epoch: int
    selected_val_accuracy: float
    test: dict[str, dict]          # target name -> evaluate() metrics
    flatness: F.FlatnessCurve | None
    metrics_rows: list[dict]


@dataclass
class RunSummary:
    config: ExperimentConfig
    per_seed: list[SeedResult]
    aggregate: dict
    out_dir: str


def _batches(n: int, batch_size: int, order: np.ndarray):
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def train_one_seed(cfg: ExperimentConfig, run_seed: int, out_dir: Path) -> SeedResult:
    dataset = dataset_for_seed(cfg, run_seed)
    splits = splits_for(cfg, dataset)
    D.assert_no_leakage(splits)

    tcfg = cfg.trainer_config()
    model_cfg = cfg.model_config(init_seed=mix_seed(cfg.init_seed, run_seed, _STREAM_INIT))
    state = A.init_trainer(model_cfg, tcfg, train_seed=mix_seed(run_seed, _STREAM_TRAIN))
    shuffle_rng = np.random.default_rng([run_seed, _STREAM_SHUFFLE])

    xs_train, y_train = splits.train
    n_train = y_train.shape[0]
    m = model_cfg.num_modalities
    rows: list[dict] = []
    rows_student: list[dict] = []
    best: tuple[float, int, M.ModelParams, dict | None] | None = None
    step = 0
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(n_train)
        step_metrics = []
        for idx in _batches(n_train, tcfg.batch_size, order):
            batch = ([x[idx] for x in xs_train], y_train[idx])
            step_metrics.append(A.train_step(state, batch))
            step += 1
        which = "auto" if tcfg.eval_model == "both" else tcfg.eval_model
        fused_view, uni_view = A.eval_views(state, which)
        train_eval = _eval_stats_row(fused_view, xs_train, y_train, step, epoch,
                                     "train", uni_view)
        rows.append(_train_epoch_row(step_metrics, train_eval, step, epoch))
        val_row = _eval_stats_row(fused_view, *splits.val, step, epoch, "val", uni_view)
        rows.append(val_row)
        for name, (xs_t, y_t) in splits.test.items():
            rows.append(_eval_stats_row(fused_view, xs_t, y_t, step, epoch,
                                        f"test:{name}", uni_view))
        if tcfg.eval_model == "both":
            other = A.eval_params_for(state, "student")
            rows_student.append(_eval_stats_row(other, xs_train, y_train, step, epoch, "train"))
            rows_student.append(_eval_stats_row(other, *splits.val, step, epoch, "val"))
            for name, (xs_t, y_t) in splits.test.items():
                rows_student.append(_eval_stats_row(other, xs_t, y_t, step, epoch, f"test:{name}"))
        # model selection: best in-domain validation accuracy, earliest epoch on ties
        if best is None or val_row["acc_mm"] > best[0]:
            teacher_copy = None if state.teacher is None else {k: v.copy()
                                                               for k, v in state.teacher.items()}
            best = (val_row["acc_mm"], epoch, state.student.copy(), teacher_copy)

    val_acc, sel_epoch, sel_student, sel_teacher = best
    sel_state = A.TrainerState(student=sel_student, teacher=sel_teacher, opt=state.opt,
                               step=step, mask_rng=state.mask_rng, config=tcfg)
    which = "auto" if tcfg.eval_model == "both" else tcfg.eval_model
    sel_fused, sel_uni = A.eval_views(sel_state, which)
    test_metrics = {name: A.evaluate(sel_fused, xs_t, y_t, uni_params=sel_uni)
                    for name, (xs_t, y_t) in splits.test.items()}

    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_dir / "metrics.csv", rows, m)
    if rows_student:
        write_metrics_csv(out_dir / "metrics_student.csv", rows_student, m)
    M.save_checkpoint(out_dir / "checkpoint.json", sel_student, sel_teacher, step=sel_epoch)

    curve = None
    if cfg.flatness_enabled:
        curve = flatness_probe_for(cfg, sel_fused, splits)
        F.write_curve_csv(curve, out_dir / "flatness.csv")

    return SeedResult(seed=run_seed, selected_epoch=sel_epoch,
                      selected_val_accuracy=val_acc, test=test_metrics,
                      flatness=curve, metrics_rows=rows)


def flatness_probe_for(cfg: ExperimentConfig, params: M.ModelParams,
                       splits: D.ProtocolSplits) -> F.FlatnessCurve:
    if cfg.flatness_split == "train":
        xs, y = splits.train
    elif cfg.flatness_split == "val":
        xs, y = splits.val
    else:
        xs, y = D.concat_parts(list(splits.test.values()))
    y64 = np.ascontiguousarray(y, dtype=np.int64)
    mcfg = params.config

    def loss_fn(arrays: dict[str, np.ndarray]) -> float:
        view = M.ModelParams(mcfg, arrays)
        _, _, fused = M.forward_all(view, xs)
        loss, _ = K.cross_entropy_fwd(np.ascontiguousarray(fused), y64)
        return float(loss)

    return F.probe(params.arrays, loss_fn, radii=cfg.flatness_radii,
                   n_directions=cfg.flatness_directions, seed=cfg.flatness_seed)


def _aggregate(per_seed: list[SeedResult]) -> dict:
    """Mean and population std over seeds of the selected-epoch test metrics
    (multi-target protocols average over targets first)."""
    fused = [float(np.mean([t["accuracy_fused"] for t in sr.test.values()]))
             for sr in per_seed]
    m = len(next(iter(per_seed[0].test.values()))["accuracy_uni"])
    uni = [[float(np.mean([t["accuracy_uni"][k] for t in sr.test.values()]))
            for sr in per_seed] for k in range(m)]
    agg = {
        "test_accuracy_fused_mean": float(np.mean(fused)),
        "test_accuracy_fused_std": float(np.std(fused)),
        "test_accuracy_uni_mean": [float(np.mean(u)) for u in uni],
        "test_accuracy_uni_std": [float(np.std(u)) for u in uni],
        "selected_epochs": [sr.selected_epoch for sr in per_seed],
    }
    return agg


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunSummary:
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    started = time.perf_counter()
    per_seed = []
    try:
        for run_seed in cfg.seeds:
            per_seed.append(train_one_seed(cfg, run_seed, out / f"seed{run_seed}"))
    except Exception:
        (out / "FAILED").write_text("run aborted; partial results retained\n")
        raise
    agg = _aggregate(per_seed)
    summary = {
        "format_version": SUMMARY_VERSION,
        "method": cfg.method,
        "protocol": cfg.protocol,
        "seeds": list(cfg.seeds),
        "config": config_to_text(cfg),
        "aggregate": agg,
        "per_seed": [{
            "seed": sr.seed,
            "selected_epoch": sr.selected_epoch,
            "selected_val_accuracy": sr.selected_val_accuracy,
            "test": sr.test,
        } for sr in per_seed],
    }
    with open(out / "summary.json", "w", newline="\n") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    # wallclock lives outside the byte-deterministic surface
    with open(out / "timing.txt", "w", newline="\n") as fh:
        fh.write(f"wall_clock_seconds={time.perf_counter() - started:.3f}\n")
    return RunSummary(config=cfg, per_seed=per_seed, aggregate=agg, out_dir=str(out))


def load_run(out_dir) -> RunSummary:
    out = Path(out_dir)
    with open(out / "summary.json") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != SUMMARY_VERSION:
        raise ValueError(f"unsupported summary version in {out}")
    cfg = parse_config_text(doc["config"])
    per_seed = []
    for entry in doc["per_seed"]:
        seed_dir = out / f"seed{entry['seed']}"
        curve = None
        if (seed_dir / "flatness.csv").exists():
            curve = F.read_curve_csv(seed_dir / "flatness.csv")
        per_seed.append(SeedResult(
            seed=entry["seed"], selected_epoch=entry["selected_epoch"],
            selected_val_accuracy=entry["selected_val_accuracy"],
            test=entry["test"], flatness=curve,
            metrics_rows=read_metrics_csv(seed_dir / "metrics.csv")))
    return RunSummary(config=cfg, per_seed=per_seed, aggregate=doc["aggregate"],
                      out_dir=str(out))


_SWEEPABLE = {
    "trainer.lambda_distill": ("trainer", "lambda_distill", float),
    "trainer.alpha_inner": ("trainer", "alpha_inner", float),
    "trainer.beta_ema": ("trainer", "beta_ema", float),
    "trainer.learning_rate": ("trainer", "learning_rate", float),
    "trainer.epochs": ("trainer", "epochs", int),
    "trainer.batch_size": ("trainer", "batch_size", int),
    "data.noise_std": ("data", "noise_std", float),
    "data.mean_shift_scale": ("data", "mean_shift_scale", float),
    "data.rotation_strength": ("data", "rotation_strength", float),
    "data.class_sep": ("data", "class_sep", float),
}


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis not in _SWEEPABLE:
        raise ConfigError(f"unknown sweep axis {axis!r}; one of {sorted(_SWEEPABLE)}")
    section, key, typ = _SWEEPABLE[axis]
    value = typ(value)
    if section == "trainer":
        return replace(cfg, trainer=replace(cfg.trainer, **{key: value}))
    return replace(cfg, data=replace(cfg.data, **{key: value}))


def run_sweep(cfg: ExperimentConfig, axis: str, values, out_dir=None) -> list[RunSummary]:
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    rows = []
    for value in values:
        sub = apply_axis(cfg, axis, value)
        summary = run_experiment(sub, out / f"{axis.replace('.', '_')}={value}")
        summaries.append(summary)
        for sr in summary.per_seed:
            acc = float(np.mean([t["accuracy_fused"] for t in sr.test.values()]))
            rows.append((value, str(sr.seed), acc))
        rows.append((value, "mean", summary.aggregate["test_accuracy_fused_mean"]))
        rows.append((value, "std", summary.aggregate["test_accuracy_fused_std"]))
    with open(out / "sweep.csv", "w", newline="\n") as fh:
        fh.write(f"{axis},seed,test_accuracy_fused\n")
        for value, seed, acc in rows:
            fh.write(f"{_fmt_cell(value)},{seed},{repr(float(acc))}\n")
    return summaries


def _check_same_protocol(summaries: list[RunSummary]) -> None:
    protocols = {s.config.protocol for s in summaries}
    if len(protocols) > 1:
        raise ValueError(f"mixed protocols in plot emission: {sorted(protocols)}")


def emit_flatness_data(summaries: list[RunSummary], out_path) -> None:
    _check_same_protocol(summaries)
    with open(out_path, "w", newline="\n") as fh:
        fh.write("method,radius,mean_loss_increase,seed\n")
        for summary in summaries:
            per_radius: dict[float, list[float]] = {}
            for sr in summary.per_seed:
                if sr.flatness is None:
                    raise ValueError(f"run {summary.out_dir} has no flatness curves")
                for r, inc in zip(sr.flatness.radii, sr.flatness.mean_loss_increase):
                    fh.write(f"{summary.config.method},{repr(r)},{repr(inc)},{sr.seed}\n")
                    per_radius.setdefault(r, []).append(inc)
            for r in sorted(per_radius):
                fh.write(f"{summary.config.method},{repr(r)},"
                         f"{repr(float(np.mean(per_radius[r])))},mean\n")


def robustness_accuracy(summary: RunSummary, modality: int, variance: float,
                        perturb_seed: int = 97,
                        eval_split: str = "target") -> list[tuple[int, float]]:
    """Re-evaluate each seed's selected checkpoint with Gaussian noise of the
    given variance injected into one modality.

    eval_split "target" scores the protocol's test targets; "source_test"
    scores the source domains' held-out test rows, which the leave-one-out
    protocol never touches. The latter is the in-distribution robustness
    probe: it perturbs the modality where the model actually relies on it.
    """
    if eval_split not in ("target", "source_test"):
        raise ValueError(f"unknown robustness eval_split {eval_split!r}")
    cfg = summary.config
    out = []
    for sr in summary.per_seed:
        dataset = dataset_for_seed(cfg, sr.seed)
        perturbed = D.perturb_modality(dataset, modality, variance, perturb_seed)
        splits = splits_for(cfg, perturbed)
        student, teacher, _ = M.load_checkpoint(Path(summary.out_dir) / f"seed{sr.seed}" /
                                                "checkpoint.json")
        tcfg = cfg.trainer_config()
        state = A.TrainerState(student=student, teacher=teacher, opt=None, step=0,
                               mask_rng=np.random.default_rng(0), config=tcfg)
        which = "auto" if tcfg.eval_model == "both" else tcfg.eval_model
        fused_view, uni_view = A.eval_views(state, which)
        if eval_split == "target":
            parts = list(splits.test.values())
        else:
            if cfg.protocol != "multi_source":
                raise ValueError("source_test robustness needs the multi_source protocol")
            parts = [perturbed.data[d]["test"] for d in range(cfg.data.num_domains)
                     if d != cfg.target_domain]
        accs = [A.evaluate(fused_view, xs_t, y_t, uni_params=uni_view)["accuracy_fused"]
                for xs_t, y_t in parts]
        out.append((sr.seed, float(np.mean(accs))))
    return out


def emit_robustness_data(summaries: list[RunSummary], modality: int, variances,
                         out_path, perturb_seed: int = 97,
                         eval_split: str = "target") -> None:
    _check_same_protocol(summaries)
    with open(out_path, "w", newline="\n") as fh:
        fh.write("method,variance,accuracy,seed\n")
        for summary in summaries:
            for variance in variances:
                per_seed = robustness_accuracy(summary, modality, float(variance),
                                               perturb_seed, eval_split)
                for seed, acc in per_seed:
                    fh.write(f"{summary.config.method},{repr(float(variance))},{repr(acc)},{seed}\n")
                mean = float(np.mean([a for _, a in per_seed]))
                fh.write(f"{summary.config.method},{repr(float(variance))},{repr(mean)},mean\n")


def emit_modality_accuracy_data(summaries: list[RunSummary], out_path) -> None:
    _check_same_protocol(summaries)
    with open(out_path, "w", newline="\n") as fh:
        fh.write("method,branch,accuracy,seed\n")
        for summary in summaries:
            m = len(next(iter(summary.per_seed[0].test.values()))["accuracy_uni"])
            branches: dict[str, list[float]] = {}
            for sr in summary.per_seed:
                vals = {"fused": float(np.mean([t["accuracy_fused"] for t in sr.test.values()]))}
                for k in range(m):
                    vals[f"uni_{k + 1}"] = float(np.mean([t["accuracy_uni"][k]
                                                          for t in sr.test.values()]))
                for branch, acc in vals.items():
                    fh.write(f"{summary.config.method},{branch},{repr(acc)},{sr.seed}\n")
                    branches.setdefault(branch, []).append(acc)
            for branch, accs in branches.items():
                fh.write(f"{summary.config.method},{branch},{repr(float(np.mean(accs)))},mean\n")


def emit_training_curves_data(summaries: list[RunSummary], out_path) -> None:
    _check_same_protocol(summaries)
    with open(out_path, "w", newline="\n") as fh:
        fh.write("method,seed,epoch,split,acc_mm,loss_total\n")
        for summary in summaries:
            for sr in summary.per_seed:
                for row in sr.metrics_rows:
                    fh.write(f"{summary.config.method},{sr.seed},{row['epoch']},"
                             f"{row['split']},{repr(row['acc_mm'])},{repr(row['loss_total'])}\n")


def emit_plot_data(summaries: list[RunSummary], kind: str, out_dir, **kwargs) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{kind}.csv"
    if kind == "flatness":
        emit_flatness_data(summaries, path)
    elif kind == "robustness":
        emit_robustness_data(summaries, kwargs["modality"], kwargs["variances"], path,
                             perturb_seed=kwargs.get("perturb_seed", 97),
                             eval_split=kwargs.get("eval_split", "target"))
    elif kind == "modality_accuracy":
        emit_modality_accuracy_data(summaries, path)
    elif kind == "training_curves":
        emit_training_curves_data(summaries, path)
    else:
        raise ValueError(f"unknown plot kind {kind!r}")
    return path
