"""Observation schedules, noisy partial observations and dataset files.

Species indices are 0-based in memory and 1-based in files.  With a batch
size ``M > 1`` the observation vector at a time is the batch-major stack
``[s^(1)_J_h, s^(2)_J_h, ...]``, matching a selection matrix ``G_h`` built
from ``M`` copies of the rows ``e_j^T, j in J_h``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ssa import Trajectory, make_rng


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ObservationModel:
    times: np.ndarray
    observed_sets: tuple[tuple[int, ...], ...]
    batch_size: int
    noise_variances: dict[int, float]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        object.__setattr__(self, "times", times)
        sets = tuple(tuple(int(j) for j in js) for js in self.observed_sets)
        object.__setattr__(self, "observed_sets", sets)
        object.__setattr__(
            self, "noise_variances", {int(j): float(v) for j, v in self.noise_variances.items()}
        )
        if len(times) == 0:
            raise DatasetError("at least one observation time is required")
        if np.any(np.diff(times) <= 0):
            raise DatasetError("observation times must be strictly increasing")
        if len(sets) != len(times):
            raise DatasetError("one observed set per observation time is required")
        if any(len(js) == 0 for js in sets):
            raise DatasetError("observed sets must be non-empty")
        if any(len(set(js)) != len(js) for js in sets):
            raise DatasetError("observed sets must not repeat a species")
        if self.batch_size < 1:
            raise DatasetError("batch size must be >= 1")
        if set(self.noise_variances) != set(self.observed_species):
            raise DatasetError("noise variances must be given for exactly the observed species")
        if any(v < 0 for v in self.noise_variances.values()):
            raise DatasetError("noise variances must be non-negative")

    @classmethod
    def regular(cls, t0, dt, H, observed, batch_size=1, noise_variances=None):
        """``H + 1`` equally spaced times with the same observed set at each."""
        times = t0 + dt * np.arange(H + 1)
        observed = tuple(observed)
        return cls(times, (observed,) * (H + 1), batch_size, dict(noise_variances or {}))

    @property
    def observed_species(self) -> tuple[int, ...]:
        """Sorted union of the observed sets (J_y)."""
        return tuple(sorted(set().union(*self.observed_sets)))

    @property
    def intervals(self) -> np.ndarray:
        return np.diff(self.times)

    def obs_dim(self, h: int) -> int:
        return self.batch_size * len(self.observed_sets[h])

    def selection(self, h: int) -> np.ndarray:
        """Species index of every entry of ``y_h``."""
        return np.tile(np.array(self.observed_sets[h], dtype=np.int64), self.batch_size)

    def selection_matrix(self, h: int, n_species: int) -> np.ndarray:
        idx = self.selection(h)
        G = np.zeros((len(idx), n_species))
        G[np.arange(len(idx)), idx] = 1.0
        return G

    def noise_cov(self, h: int, variances: dict[int, float] | None = None) -> np.ndarray:
        var = self.noise_variances if variances is None else variances
        return np.diag([var[j] for j in self.selection(h)])

    def __eq__(self, other):
        if not isinstance(other, ObservationModel):
            return NotImplemented
        return (
            np.array_equal(self.times, other.times)
            and self.observed_sets == other.observed_sets
            and self.batch_size == other.batch_size
            and self.noise_variances == other.noise_variances
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    observations: tuple[np.ndarray, ...]
    model: ObservationModel
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        obs = tuple(np.asarray(y, dtype=float).reshape(-1) for y in self.observations)
        object.__setattr__(self, "observations", obs)
        if len(obs) != len(self.model.times):
            raise DatasetError("one observation vector per observation time is required")
        for h, y in enumerate(obs):
            if len(y) != self.model.obs_dim(h):
                raise DatasetError(
                    f"observation {h}: expected {self.model.obs_dim(h)} values, got {len(y)}"
                )

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.model == other.model
            and len(self.observations) == len(other.observations)
            and all(np.array_equal(a, b) for a, b in zip(self.observations, other.observations))
            and self.provenance == other.provenance
        )

    def flat(self):
        """Pointer, species index and value arrays for the filter kernel."""
        sizes = [len(y) for y in self.observations]
        ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        idx = np.concatenate([self.model.selection(h) for h in range(len(sizes))])
        y = np.concatenate(self.observations)
        return ptr, idx, y


def observe(
    trajectories: Trajectory | Sequence[Trajectory],
    model: ObservationModel,
    rng_seed=None,
    system_size: float = 1.0,
) -> Dataset:
    """Noisy partial observations ``y_h = G_h s(t_h) + eps_h`` of simulated paths.

    ``trajectories`` holds one path per batch element.  States are the
    cadlag values at ``t_h`` converted to concentrations ``x / Omega``.
    """
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    if len(trajectories) != model.batch_size:
        raise DatasetError(f"need {model.batch_size} trajectories, got {len(trajectories)}")
    rng = make_rng(rng_seed)
    ys = []
    for h, t in enumerate(model.times):
        js = list(model.observed_sets[h])
        clean = np.concatenate([tr.state_at(t)[js] / system_size for tr in trajectories])
        sd = np.sqrt([model.noise_variances[j] for j in model.selection(h)])
        ys.append(clean + sd * rng.standard_normal(len(clean)))
    return Dataset(tuple(ys), model)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

_REQUIRED = {"times", "observed", "batch", "sigma", "y"}
_OPTIONAL = {"seed", "theta", "config_hash"}


def dataset_to_dict(ds: Dataset) -> dict:
    m = ds.model
    doc = {
        "times": m.times.tolist(),
        "observed": [[j + 1 for j in js] for js in m.observed_sets],
        "batch": m.batch_size,
        "sigma": {str(j + 1): v for j, v in sorted(m.noise_variances.items())},
        "y": [y.tolist() for y in ds.observations],
    }
    for key in sorted(_OPTIONAL):
        if key in ds.provenance:
            doc[key] = ds.provenance[key]
    return doc


def dataset_from_dict(doc: dict) -> Dataset:
    if not isinstance(doc, dict):
        raise DatasetError("dataset document must be an object")
    missing = _REQUIRED - set(doc)
    if missing:
        raise DatasetError(f"missing dataset keys: {sorted(missing)}")
    unknown = set(doc) - _REQUIRED - _OPTIONAL
    if unknown:
        raise DatasetError(f"unknown dataset keys: {sorted(unknown)}")
    try:
        model = ObservationModel(
            doc["times"],
            [[int(j) - 1 for j in js] for js in doc["observed"]],
            int(doc["batch"]),
            {int(j) - 1: float(v) for j, v in doc["sigma"].items()},
        )
    except (TypeError, ValueError, AttributeError) as err:
        raise DatasetError(f"malformed dataset: {err}") from err
    if any(j < 0 for j in model.observed_species):
        raise DatasetError("species indices in files are 1-based")
    provenance = {k: doc[k] for k in _OPTIONAL if k in doc}
    return Dataset(tuple(doc["y"]), model, provenance)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(ds), indent=1) + "\n", encoding="utf-8")


def read_dataset(path) -> Dataset:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DatasetError(f"{path}: not valid JSON ({err})") from err
    return dataset_from_dict(doc)
