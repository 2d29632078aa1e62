"""Random-direction loss-landscape probe.

For each radius the probe reports the mean loss increase over unit-norm
Gaussian directions in the full flattened parameter space. Flat minima show
small increases; the probe never mutates the parameters it is given.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_RADII = tuple(round(0.05 * i, 2) for i in range(11))  # 0.0 .. 0.5
DEFAULT_DIRECTIONS = 32


@dataclass
class FlatnessCurve:
    radii: list[float]
    mean_loss_increase: list[float]
    n_nan_directions: list[int]
    n_directions: int
    seed: int


def _flatten(arrays: dict[str, np.ndarray]):
    names = list(arrays)
    vec = np.concatenate([arrays[n].ravel() for n in names])
    shapes = [(n, arrays[n].shape, arrays[n].size) for n in names]
    return vec, shapes


def _unflatten(vec: np.ndarray, shapes) -> dict[str, np.ndarray]:
    out, offset = {}, 0
    for name, shape, size in shapes:
        out[name] = vec[offset:offset + size].reshape(shape).copy()
        offset += size
    return out


def probe(arrays: dict[str, np.ndarray], loss_fn, radii=DEFAULT_RADII,
          n_directions: int = DEFAULT_DIRECTIONS, seed: int = 0) -> FlatnessCurve:
    """loss_fn maps a parameter-array dict to a scalar loss on a fixed split.

    Directions are drawn up front from one seeded stream and normalized to
    global unit L2 norm; the mean over directions accumulates in direction
    order for determinism. A NaN loss is recorded as +inf and counted.
    """
    radii = [float(r) for r in radii]
    if any(b < a for a, b in zip(radii, radii[1:])) or (radii and radii[0] < 0):
        raise ValueError("probe: radii must be ascending and non-negative")
    if n_directions < 1:
        raise ValueError("probe: need at least one direction")
    vec, shapes = _flatten(arrays)
    rng = np.random.default_rng([seed, 7])
    dirs = rng.normal(size=(n_directions, vec.size))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    base_loss = float(loss_fn(_unflatten(vec, shapes)))
    means, nan_counts = [], []
    for radius in radii:
        total, nans = 0.0, 0
        for d in range(n_directions):
            loss = float(loss_fn(_unflatten(vec + radius * dirs[d], shapes)))
            if np.isnan(loss):
                loss = np.inf
                nans += 1
            total += loss - base_loss
        means.append(total / n_directions)
        nan_counts.append(nans)
    return FlatnessCurve(radii=radii, mean_loss_increase=means,
                         n_nan_directions=nan_counts,
                         n_directions=n_directions, seed=seed)


def write_curve_csv(curve: FlatnessCurve, path) -> None:
    with open(Path(path), "w", newline="\n") as fh:
        fh.write("radius,mean_loss_increase,n_nan_directions\n")
        for r, inc, nn in zip(curve.radii, curve.mean_loss_increase, curve.n_nan_directions):
            fh.write(f"{repr(r)},{repr(inc)},{nn}\n")


def read_curve_csv(path) -> FlatnessCurve:
    radii, means, nans = [], [], []
    with open(Path(path)) as fh:
        header = fh.readline().strip()
        if header != "radius,mean_loss_increase,n_nan_directions":
            raise ValueError("unexpected flatness CSV header")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            r, inc, nn = line.split(",")
            radii.append(float(r))
            means.append(float(inc))
            nans.append(int(nn))
    return FlatnessCurve(radii=radii, mean_loss_increase=means, n_nan_directions=nans,
                         n_directions=-1, seed=-1)
