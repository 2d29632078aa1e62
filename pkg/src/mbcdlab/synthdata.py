"""Multi-domain multi-modal synthetic data with controllable dominance.

Generation model, per domain d and modality k:

    y ~ Uniform{0..C-1}
    z = mu_y + N(0, I_latent)
    x_k = snr_k * R_{d,k} (A_k z) + shift_{d,k} + N(0, noise_std_k^2)

A_k is a fixed column-orthonormal view map shared by all domains; R_{d,k}
is a per-domain orthogonal rotation and shift_{d,k} a per-domain mean
offset, so domains differ by a label-preserving covariate shift. snr_k is
the one dominance knob: it scales the signal against fixed noise.

Seed streams (all PCG64 via SeedSequence entropy lists, so per-domain
generation is order-independent):
    [seed, 1, k]            view map A_k
    [seed, 2, d, k]         domain rotation + mean shift
    [seed, 3, d, s]         samples for split s (0=train, 1=val, 2=test)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1


class DataConfigError(ValueError):
    pass


def _per_modality(value, m: int) -> tuple[float, ...]:
    """Broadcast a scalar (or length-1 sequence) to one value per modality."""
    try:
        values = tuple(float(v) for v in value)
    except TypeError:
        values = (float(value),)
    if len(values) == 1:
        values = values * m
    return values


@dataclass(frozen=True)
class DataGenConfig:
    num_modalities: int
    num_domains: int
    num_classes: int
    latent_dim: int
    input_dims: tuple[int, ...]
    snr: tuple[float, ...]
    train_per_domain: int
    val_per_domain: int
    test_per_domain: int
    noise_std: float = 1.0
    mean_shift_scale: tuple[float, ...] | float = 0.0
    rotation_strength: tuple[float, ...] | float = 0.0
    class_sep: float = 3.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "snr", tuple(float(s) for s in self.snr))
        for field_name in ("mean_shift_scale", "rotation_strength"):
            object.__setattr__(self, field_name,
                               _per_modality(getattr(self, field_name), len(self.input_dims)))
        m = self.num_modalities
        if m < 1 or self.num_domains < 1 or self.num_classes < 2:
            raise DataConfigError("need at least 1 modality, 1 domain, 2 classes")
        if len(self.input_dims) != m or len(self.snr) != m:
            raise DataConfigError("input_dims and snr must have length M")
        if self.latent_dim < self.num_classes - 1:
            raise DataConfigError(
                f"latent_dim {self.latent_dim} < C-1 = {self.num_classes - 1}: "
                "class centroids cannot be placed on a simplex")
        if any(d < self.latent_dim for d in self.input_dims):
            raise DataConfigError("each input_dim must be >= latent_dim for an orthonormal view")
        if min(self.train_per_domain, self.val_per_domain, self.test_per_domain) <= 0:
            raise DataConfigError("split sizes must be positive")
        if any(s < 0 for s in self.snr) or self.noise_std < 0:
            raise DataConfigError("snr and noise_std must be non-negative")
        for field_name in ("mean_shift_scale", "rotation_strength"):
            if len(getattr(self, field_name)) != self.num_modalities:
                raise DataConfigError(f"{field_name} must be a scalar or one value per modality")
        if self.class_sep < 2.0:
            raise DataConfigError("class_sep must be >= 2 (latent unit noise needs "
                                  "separated centroids for a learnable task)")

    @property
    def split_sizes(self) -> dict[str, int]:
        return {"train": self.train_per_domain, "val": self.val_per_domain,
                "test": self.test_per_domain}


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    mean_shifts: tuple[np.ndarray, ...]   # one vector per modality
    mixing: tuple[np.ndarray, ...]        # one orthogonal matrix per modality
    noise_std: tuple[float, ...]


@dataclass
class MultiModalDataset:
    config: DataGenConfig
    # data[d][split] = (xs: list of per-modality arrays, y: int array)
    data: list[dict[str, tuple[list[np.ndarray], np.ndarray]]]

    def copy(self) -> "MultiModalDataset":
        return MultiModalDataset(self.config, [
            {s: ([x.copy() for x in xs], y.copy()) for s, (xs, y) in dom.items()}
            for dom in self.data
        ])


def class_centroids(num_classes: int, latent_dim: int,
                    separation: float = 2.0) -> np.ndarray:
    """Deterministic centroids with the given pairwise distance (>= 2).

    Scaled one-hot corners when the latent space is large enough; for
    latent_dim == C-1 the corners are rotated into the sum-zero hyperplane
    (a regular simplex) via a Helmert basis.
    """
    c = num_classes
    corners = (separation / np.sqrt(2.0)) * np.eye(c)
    if latent_dim >= c:
        out = np.zeros((c, latent_dim))
        out[:, :c] = corners
        return out
    if latent_dim == c - 1:
        centered = corners - corners.mean(axis=0, keepdims=True)
        helmert = np.zeros((c - 1, c))
        for i in range(1, c):
            helmert[i - 1, :i] = 1.0
            helmert[i - 1, i] = -float(i)
            helmert[i - 1] /= np.sqrt(i * (i + 1.0))
        return centered @ helmert.T
    raise DataConfigError("latent_dim too small for the class simplex")


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q * np.sign(np.diag(r))


def _rotation(rng: np.random.Generator, dim: int, strength: float) -> np.ndarray:
    """Orthogonal matrix interpolating identity (strength 0) to fully random
    (strength 1) by re-orthonormalizing the blend."""
    g = rng.normal(size=(dim, dim))
    q, r = np.linalg.qr((1.0 - strength) * np.eye(dim) + strength * g)
    return q * np.sign(np.diag(r))


def view_maps(config: DataGenConfig) -> list[np.ndarray]:
    """Column-orthonormal latent->input map per modality."""
    return [
        _orthonormal_columns(np.random.default_rng([config.seed, 1, k]),
                             config.input_dims[k], config.latent_dim)
        for k in range(config.num_modalities)
    ]


def domain_specs(config: DataGenConfig) -> list[DomainSpec]:
    specs = []
    for d in range(config.num_domains):
        shifts, mixes = [], []
        for k in range(config.num_modalities):
            rng = np.random.default_rng([config.seed, 2, d, k])
            mixes.append(_rotation(rng, config.input_dims[k], config.rotation_strength[k]))
            shifts.append(rng.normal(0.0, 1.0, size=config.input_dims[k])
                          * config.mean_shift_scale[k])
        specs.append(DomainSpec(
            domain_id=d,
            mean_shifts=tuple(shifts),
            mixing=tuple(mixes),
            noise_std=tuple(config.noise_std for _ in range(config.num_modalities)),
        ))
    return specs


def generate(config: DataGenConfig) -> MultiModalDataset:
    mu = class_centroids(config.num_classes, config.latent_dim, config.class_sep)
    views = view_maps(config)
    specs = domain_specs(config)
    data = []
    for d in range(config.num_domains):
        spec = specs[d]
        dom: dict[str, tuple[list[np.ndarray], np.ndarray]] = {}
        for s_idx, split in enumerate(SPLITS):
            n = config.split_sizes[split]
            rng = np.random.default_rng([config.seed, 3, d, s_idx])
            y = rng.integers(0, config.num_classes, size=n)
            z = mu[y] + rng.normal(size=(n, config.latent_dim))
            xs = []
            for k in range(config.num_modalities):
                clean = (z @ views[k].T) @ spec.mixing[k].T
                noise = rng.normal(0.0, 1.0, size=(n, config.input_dims[k])) * spec.noise_std[k]
                xs.append(config.snr[k] * clean + spec.mean_shifts[k][None, :] + noise)
            dom[split] = (xs, y)
        data.append(dom)
    return MultiModalDataset(config, data)


def perturb_modality(dataset: MultiModalDataset, k: int, variance: float,
                     seed: int) -> MultiModalDataset:
    """Copy with N(0, variance) noise added elementwise to modality k in
    every domain and split; all other modalities untouched."""
    if k >= dataset.config.num_modalities:
        raise ValueError(f"perturb_modality: modality {k} out of range")
    if variance < 0:
        raise ValueError("perturb_modality: variance must be non-negative")
    out = dataset.copy()
    if variance == 0.0:
        return out
    std = np.sqrt(variance)
    for d, dom in enumerate(out.data):
        for s_idx, split in enumerate(SPLITS):
            xs, _ = dom[split]
            rng = np.random.default_rng([seed, 9, d, s_idx, k])
            xs[k] = xs[k] + rng.normal(0.0, std, size=xs[k].shape)
    return out


@dataclass
class ProtocolSplits:
    train: tuple[list[np.ndarray], np.ndarray]
    val: tuple[list[np.ndarray], np.ndarray]
    # test: one entry per evaluation target, keyed "d{id}" -> (xs, y)
    test: dict[str, tuple[list[np.ndarray], np.ndarray]]


def concat_parts(parts: list[tuple[list[np.ndarray], np.ndarray]]):
    m = len(parts[0][0])
    xs = [np.concatenate([p[0][k] for p in parts], axis=0) for k in range(m)]
    y = np.concatenate([p[1] for p in parts], axis=0)
    return xs, y


def full_domain(dataset: MultiModalDataset, d: int):
    """Every row of a domain (train+val+test), used when it is the target."""
    return concat_parts([dataset.data[d][s] for s in SPLITS])


def protocol_splits(dataset: MultiModalDataset, target_domain: int) -> ProtocolSplits:
    """Leave-one-domain-out: sources contribute train and val splits; the
    held-out target contributes its full data as the test set."""
    nd = dataset.config.num_domains
    if not (0 <= target_domain < nd):
        raise ValueError(f"unknown domain id {target_domain}")
    sources = [d for d in range(nd) if d != target_domain]
    if not sources:
        raise ValueError("protocol needs at least one source domain")
    train = concat_parts([dataset.data[d]["train"] for d in sources])
    val = concat_parts([dataset.data[d]["val"] for d in sources])
    return ProtocolSplits(train=train, val=val,
                          test={f"d{target_domain}": full_domain(dataset, target_domain)})


def single_source_splits(dataset: MultiModalDataset, source_domain: int) -> ProtocolSplits:
    nd = dataset.config.num_domains
    if not (0 <= source_domain < nd):
        raise ValueError(f"unknown domain id {source_domain}")
    train = dataset.data[source_domain]["train"]
    val = dataset.data[source_domain]["val"]
    tests = {f"d{d}": full_domain(dataset, d) for d in range(nd) if d != source_domain}
    if not tests:
        raise ValueError("single-source protocol needs a second domain to evaluate on")
    return ProtocolSplits(train=(list(train[0]), train[1]),
                          val=(list(val[0]), val[1]), test=tests)


def in_domain_splits(dataset: MultiModalDataset, domain: int) -> ProtocolSplits:
    nd = dataset.config.num_domains
    if not (0 <= domain < nd):
        raise ValueError(f"unknown domain id {domain}")
    dom = dataset.data[domain]
    return ProtocolSplits(train=(list(dom["train"][0]), dom["train"][1]),
                          val=(list(dom["val"][0]), dom["val"][1]),
                          test={f"d{domain}": (list(dom["test"][0]), dom["test"][1])})


def row_hashes(xs: list[np.ndarray], y: np.ndarray) -> set[bytes]:
    """One digest per sample over all modality rows plus the label."""
    out = set()
    for i in range(y.shape[0]):
        h = hashlib.sha256()
        for x in xs:
            h.update(np.ascontiguousarray(x[i]).tobytes())
        h.update(int(y[i]).to_bytes(8, "little", signed=True))
        out.add(h.digest())
    return out


def assert_no_leakage(splits: ProtocolSplits) -> None:
    """Hash-based check that no test row appears in train or val."""
    seen = row_hashes(*splits.train) | row_hashes(*splits.val)
    for name, (xs, y) in splits.test.items():
        overlap = seen & row_hashes(xs, y)
        if overlap:
            raise AssertionError(f"target leakage: {len(overlap)} test rows of {name} "
                                 "appear in train/val")


def _write_matrix(path: Path, arr: np.ndarray) -> None:
    with open(path, "w", newline="\n") as fh:
        for row in np.atleast_2d(arr):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_matrix(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    return np.array(rows, dtype=np.float64)


def export_dataset(dataset: MultiModalDataset, out_dir) -> None:
    """Directory of CSVs: one per (domain, split, modality) plus labels and a
    manifest echoing the generator config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    manifest = {
        "format_version": MANIFEST_VERSION,
        "num_modalities": cfg.num_modalities,
        "num_domains": cfg.num_domains,
        "num_classes": cfg.num_classes,
        "latent_dim": cfg.latent_dim,
        "input_dims": ",".join(str(d) for d in cfg.input_dims),
        "snr": ",".join(repr(s) for s in cfg.snr),
        "train_per_domain": cfg.train_per_domain,
        "val_per_domain": cfg.val_per_domain,
        "test_per_domain": cfg.test_per_domain,
        "noise_std": repr(cfg.noise_std),
        "mean_shift_scale": ",".join(repr(v) for v in cfg.mean_shift_scale),
        "rotation_strength": ",".join(repr(v) for v in cfg.rotation_strength),
        "class_sep": repr(cfg.class_sep),
        "seed": cfg.seed,
    }
    with open(out / "manifest.txt", "w", newline="\n") as fh:
        for key, value in manifest.items():
            fh.write(f"{key}={value}\n")
    for d in range(cfg.num_domains):
        for split in SPLITS:
            xs, y = dataset.data[d][split]
            for k in range(cfg.num_modalities):
                _write_matrix(out / f"d{d}_{split}_m{k}.csv", xs[k])
            with open(out / f"d{d}_{split}_labels.csv", "w", newline="\n") as fh:
                for v in y:
                    fh.write(f"{int(v)}\n")


def import_dataset(in_dir) -> MultiModalDataset:
    src = Path(in_dir)
    manifest: dict[str, str] = {}
    with open(src / "manifest.txt") as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                manifest[key] = value
    if int(manifest.get("format_version", -1)) != MANIFEST_VERSION:
        raise ValueError("unsupported dataset manifest version")
    cfg = DataGenConfig(
        num_modalities=int(manifest["num_modalities"]),
        num_domains=int(manifest["num_domains"]),
        num_classes=int(manifest["num_classes"]),
        latent_dim=int(manifest["latent_dim"]),
        input_dims=tuple(int(v) for v in manifest["input_dims"].split(",")),
        snr=tuple(float(v) for v in manifest["snr"].split(",")),
        train_per_domain=int(manifest["train_per_domain"]),
        val_per_domain=int(manifest["val_per_domain"]),
        test_per_domain=int(manifest["test_per_domain"]),
        noise_std=float(manifest["noise_std"]),
        mean_shift_scale=tuple(float(v) for v in manifest["mean_shift_scale"].split(",")),
        rotation_strength=tuple(float(v) for v in manifest["rotation_strength"].split(",")),
        class_sep=float(manifest["class_sep"]),
        seed=int(manifest["seed"]),
    )
    data = []
    for d in range(cfg.num_domains):
        dom = {}
        for split in SPLITS:
            xs = [_read_matrix(src / f"d{d}_{split}_m{k}.csv")
                  for k in range(cfg.num_modalities)]
            with open(src / f"d{d}_{split}_labels.csv") as fh:
                y = np.array([int(line.strip()) for line in fh if line.strip()], dtype=np.int64)
            dom[split] = (xs, y)
        data.append(dom)
    return MultiModalDataset(cfg, data)
