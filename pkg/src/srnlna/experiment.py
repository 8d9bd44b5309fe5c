"""Experiment configuration and the simulate / infer / gradcheck / evaluate pipeline.

Seeds are derived from the master seed with ``SeedSequence(master, spawn_key=...)``:

* ``(0, rep)`` data for replication ``rep``; its children drive the ``M``
  trajectories and then the measurement noise;
* ``(1, rep, cell)`` the chain of sampler cell ``cell`` on that replication;
* ``(2,)`` the prior draws of the gradient check.

Any single (replication, cell) chain can therefore be re-run on its own.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from .data import Dataset, ObservationModel, observe, read_dataset, write_dataset
from .lna import LnaPosterior, LnaState, Priors, SolverConfig, Uniform, log_likelihood
from .network import ReactionNetwork, load_network, network_from_dict
from .sampler import Chain, SamplerConfig, read_chain_csv, rmse, run_chain
from .ssa import make_rng, ssa_simulate

log = logging.getLogger(__name__)

WORKERS_ENV = "SRNLNA_WORKERS"
GRADCHECK_TOLERANCE = 1e-4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ObservationSpec:
    """Observation schedule; explicit ``times`` override ``t0 + dt * (0..H)``."""

    observed: tuple[int, ...]
    sigma: dict[str, float]
    H: int | None = None
    dt: float | None = None
    t0: float = 0.0
    times: tuple[float, ...] | None = None
    batch: int = 1

    def model(self) -> ObservationModel:
        noise = {int(j) - 1: float(v) for j, v in self.sigma.items()}
        observed = [j - 1 for j in self.observed]
        if self.times is not None:
            times = np.asarray(self.times, dtype=float)
            return ObservationModel(times, (tuple(observed),) * len(times), self.batch, noise)
        if self.H is None or self.dt is None:
            raise ConfigError("observation needs either times or both H and dt")
        return ObservationModel.regular(self.t0, self.dt, self.H, observed, self.batch, noise)


@dataclass(frozen=True)
class CellSpec:
    """One sampler configuration of the comparison grid."""

    name: str
    algorithm: str = "mala"
    likelihood: str = "bayesian_updating"
    step_size: float = 0.001
    burn_in: int = 10_000
    samples: int = 100
    thin: int = 10
    log_jacobian: bool = True
    drift_clip: float | None = None

    def sampler_config(self, seed) -> SamplerConfig:
        return SamplerConfig(
            self.step_size, self.burn_in, self.samples, self.thin,
            self.algorithm, self.likelihood, seed, self.drift_clip,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    network: str | dict
    theta_true: tuple[float, ...]
    x0: tuple[int, ...]
    t_end: float
    observation: ObservationSpec
    init_mean: tuple[float, ...]
    init_cov: tuple[tuple[float, ...], ...]
    priors_theta: tuple[tuple[float, float], ...]
    priors_sigma: dict[str, tuple[float, float]]
    samplers: tuple[CellSpec, ...]
    replications: int = 10
    seed: int = 0
    dz: float = 0.01
    substeps: int | None = None
    jitter: float = 1e-9
    init_pert: tuple[float, ...] | None = None
    output: str | None = None
    base_dir: str = field(default=".", compare=False)

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        net = self.load_network()
        J = net.species_count
        if len(self.theta_true) != net.param_count:
            raise ConfigError(f"theta_true needs {net.param_count} entries")
        if len(self.x0) != J or len(self.init_mean) != J:
            raise ConfigError(f"x0 and init_mean need {J} entries")
        if np.shape(self.init_cov) != (J, J):
            raise ConfigError(f"init_cov must be {J}x{J}")
        species = set(self.observation.observed) | {int(k) for k in self.observation.sigma}
        if any(not 1 <= j <= J for j in species):
            raise ConfigError(f"species indices must lie in 1..{J}")
        if set(self.priors_sigma) != set(self.observation.sigma):
            raise ConfigError("priors_sigma must cover exactly the observed species")
        if len(self.priors_theta) != net.param_count:
            raise ConfigError(f"priors_theta needs {net.param_count} entries")
        if not self.samplers:
            raise ConfigError("at least one sampler configuration is required")
        names = [c.name for c in self.samplers]
        if len(set(names)) != len(names):
            raise ConfigError("sampler names must be unique")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if max(self.observation.model().times) > self.t_end:
            raise ConfigError("observation times exceed t_end")
        for c in self.samplers:
            c.sampler_config(None)

    # -- derived objects ----------------------------------------------------

    def load_network(self) -> ReactionNetwork:
        if isinstance(self.network, dict):
            return network_from_dict(self.network)
        path = Path(self.network)
        if not path.is_absolute():
            path = Path(self.base_dir) / path
        return load_network(path)

    def init_state(self) -> LnaState:
        return LnaState(self.init_mean, self.init_cov, self.init_pert)

    def solver(self) -> SolverConfig:
        return SolverConfig(self.dz, self.substeps, self.jitter)

    def sigma_keys(self) -> list[str]:
        return sorted(self.observation.sigma, key=int)

    def priors(self) -> Priors:
        return Priors(
            tuple(Uniform(*b) for b in self.priors_theta),
            tuple(Uniform(*self.priors_sigma[k]) for k in self.sigma_keys()),
        )

    def eta_true(self) -> np.ndarray:
        sig = [self.observation.sigma[k] for k in self.sigma_keys()]
        return np.array(list(self.theta_true) + sig, dtype=float)

    def config_hash(self) -> str:
        doc = json.dumps(config_to_dict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(doc.encode()).hexdigest()[:16]

    def data_seed(self, rep: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(0, rep))

    def chain_seed(self, rep: int, cell: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(1, rep, cell))


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def _listify(x):
    if isinstance(x, tuple):
        return [_listify(v) for v in x]
    if isinstance(x, dict):
        return {k: _listify(v) for k, v in x.items()}
    return x


def _strict(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)} - {"base_dir"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def config_from_dict(doc: dict, base_dir=".") -> ExperimentConfig:
    _strict(ExperimentConfig, doc, "config")
    doc = dict(doc)
    try:
        obs = doc.pop("observation")
        _strict(ObservationSpec, obs, "observation")
        obs = ObservationSpec(**{k: _tuplify(v) for k, v in obs.items()})
        cells = []
        for c in doc.pop("samplers"):
            _strict(CellSpec, c, "sampler")
            cells.append(CellSpec(**c))
        kwargs = {k: (v if k in ("network", "priors_sigma") else _tuplify(v)) for k, v in doc.items()}
        if "priors_sigma" in kwargs:
            kwargs["priors_sigma"] = {k: tuple(v) for k, v in kwargs["priors_sigma"].items()}
        cfg = ExperimentConfig(observation=obs, samplers=tuple(cells), base_dir=str(base_dir), **kwargs)
    except (KeyError, TypeError) as err:
        raise ConfigError(f"malformed config: {err}") from err
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    doc = {}
    for f in fields(cfg):
        if f.name == "base_dir":
            continue
        v = getattr(cfg, f.name)
        if f.name == "observation":
            v = {k: _listify(x) for k, x in asdict(v).items()}
        elif f.name == "samplers":
            v = [asdict(c) for c in v]
        doc[f.name] = _listify(v)
    return doc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err})") from err
    cfg = config_from_dict(doc, base_dir=path.parent)
    cfg.validate()
    return cfg


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n", encoding="utf-8")


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as err:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from err
    return max(1, n)


def _header_line(cfg: ExperimentConfig, **extra) -> str:
    items = {"config_hash": cfg.config_hash(), "seed": cfg.seed, **extra}
    return "# " + " ".join(f"{k}={v}" for k, v in items.items()) + "\n"


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def dataset_path(data_dir, rep: int) -> Path:
    return Path(data_dir) / f"rep{rep:02d}.json"


def simulate_replication(cfg: ExperimentConfig, rep: int, net=None):
    """Trajectories and the noisy dataset of one replication."""
    net = net or cfg.load_network()
    model = cfg.observation.model()
    traj_seq, noise_seq = cfg.data_seed(rep).spawn(2)
    trajs = [
        ssa_simulate(net, cfg.theta_true, cfg.x0, cfg.t_end, s)
        for s in traj_seq.spawn(model.batch_size)
    ]
    ds = observe(trajs, model, noise_seq, net.system_size)
    prov = {"seed": cfg.seed, "theta": list(cfg.theta_true), "config_hash": cfg.config_hash()}
    return trajs, Dataset(ds.observations, ds.model, prov)


def write_truth(cfg: ExperimentConfig, path) -> None:
    doc = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "theta": list(cfg.theta_true),
        "sigma": {k: cfg.observation.sigma[k] for k in cfg.sigma_keys()},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_truth(path) -> np.ndarray:
    """Natural-scale ``eta`` from a truth file."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    sigma = doc.get("sigma", {})
    return np.array(list(doc["theta"]) + [sigma[k] for k in sorted(sigma, key=int)], dtype=float)


def cmd_simulate(cfg: ExperimentConfig, out_dir, trajectories: bool = False, diagnostics: bool = False):
    """One dataset file per replication plus ``truth.json``; returns the dataset paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = cfg.load_network()
    paths = []
    for rep in range(cfg.replications):
        trajs, ds = simulate_replication(cfg, rep, net)
        path = dataset_path(out, rep)
        write_dataset(ds, path)
        paths.append(path)
        if trajectories:
            for m, tr in enumerate(trajs):
                tr.to_csv(out / f"rep{rep:02d}_traj{m}.csv", net.species_names)
        if diagnostics:
            eta = cfg.eta_true()
            fo = log_likelihood(
                net, ds, eta[: net.param_count], eta[net.param_count:], cfg.init_state(), cfg.solver()
            )
            fo.to_csv(out / f"rep{rep:02d}_filter.csv")
            log.info("rep %d: loglik at truth %.6f", rep, fo.loglik)
    write_truth(cfg, out / "truth.json")
    return paths


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def chain_path(out_dir, cell: str, rep: int) -> Path:
    return Path(out_dir) / f"chain_{cell}_rep{rep:02d}.csv"


def summary_path(out_dir, cell: str, rep: int) -> Path:
    return Path(out_dir) / f"summary_{cell}_rep{rep:02d}.json"


def _infer_task(args):
    cfg, data_dir, out_dir, rep, cell_idx = args
    cell = cfg.samplers[cell_idx]
    net = cfg.load_network()
    ds = read_dataset(dataset_path(data_dir, rep))
    scfg = cell.sampler_config(cfg.chain_seed(rep, cell_idx))
    chain = run_chain(net, ds, cfg.priors(), cfg.init_state(), cfg.solver(), scfg, cell.log_jacobian)
    header = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "rep": rep, "cell": cell.name}
    chain.to_csv(chain_path(out_dir, cell.name, rep), header)
    truth_log = np.log(cfg.eta_true())
    summary = {
        **header,
        "param_names": list(chain.param_names),
        "acceptance_rate": chain.acceptance_rate,
        "accept_count": chain.accept_count,
        "total_proposals": chain.total_proposals,
        "rmse": dict(zip(chain.param_names, rmse(chain.log_samples, truth_log).tolist())),
        "posterior_mean_log": dict(zip(chain.param_names, chain.log_samples.mean(axis=0).tolist())),
        "sampler": asdict(cell),
    }
    summary_path(out_dir, cell.name, rep).write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    return rep, cell.name, chain.acceptance_rate


def cmd_infer(cfg: ExperimentConfig, data_dir, out_dir, cells=None, reps=None, workers=None):
    """Run every (replication, cell) chain; all cells of a replication share its dataset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [c.name for c in cfg.samplers]
    if cells is not None:
        unknown = set(cells) - set(names)
        if unknown:
            raise ConfigError(f"unknown sampler cells: {sorted(unknown)}")
    cell_ids = [i for i, n in enumerate(names) if cells is None or n in cells]
    rep_ids = list(range(cfg.replications)) if reps is None else list(reps)
    for rep in rep_ids:
        if not dataset_path(data_dir, rep).exists():
            raise FileNotFoundError(f"missing dataset {dataset_path(data_dir, rep)}")
    tasks = [(cfg, str(data_dir), str(out), r, c) for r in rep_ids for c in cell_ids]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        results = [_infer_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_infer_task, tasks))
    for rep, name, rate in results:
        log.info("rep %d %s: acceptance %.3f", rep, name, rate)
    return results


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def relative_error(analytic, numeric) -> float:
    """Max componentwise ``|a - n| / max(|a|, |n|, 1e-8)``."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


def central_difference(f, x, step: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def richardson_difference(f, x, step: float) -> np.ndarray:
    """Central differences at ``step`` and ``step / 2`` combined to cancel the h^2 term."""
    coarse = central_difference(f, x, step)
    fine = central_difference(f, x, step / 2)
    return (4 * fine - coarse) / 3, coarse


def gradient_check(target: LnaPosterior, priors: Priors, draws: int, rng, step: float = 1e-5):
    """Analytic vs finite-difference gradients of the log-scale target at prior draws.

    The reference is Richardson-extrapolated central differences with base
    step ``step``; far from the data the log posterior is curved enough that
    the plain h^2 truncation error alone can exceed the tolerance.  The plain
    central-difference error is reported alongside.
    """
    rows = []
    tries = 0
    while len(rows) < draws:
        tries += 1
        if tries > 1000 * max(draws, 1):
            raise RuntimeError("too many prior draws with non-finite density")
        x = np.log(priors.sample(rng))
        lp, g = target(x)
        if not np.isfinite(lp) or g is None:
            continue
        fd, plain = richardson_difference(lambda v: target(v, grad=False)[0], x, step)
        if not (np.all(np.isfinite(fd)) and np.all(np.isfinite(plain))):
            continue
        rows.append({"eta": np.exp(x).tolist(), "analytic": g.tolist(), "numeric": fd.tolist(),
                     "rel_error": relative_error(g, fd), "rel_error_plain": relative_error(g, plain)})
    worst = max((r["rel_error"] for r in rows), default=0.0)
    return {"draws": rows, "max_rel_error": worst, "tolerance": GRADCHECK_TOLERANCE,
            "passed": worst <= GRADCHECK_TOLERANCE}


def cmd_gradcheck(cfg: ExperimentConfig, dataset, draws: int, variant: str = "bayesian_updating"):
    ds = read_dataset(dataset) if not isinstance(dataset, Dataset) else dataset
    net = cfg.load_network()
    target = LnaPosterior(net, ds, cfg.priors(), cfg.init_state(), cfg.solver(), variant)
    rng = make_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    report = gradient_check(target, cfg.priors(), draws, rng)
    report["config_hash"] = cfg.config_hash()
    report["seed"] = cfg.seed
    return report


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def mean_ci(values, level: float = 0.95):
    """Sample mean and t-based half-width over replications (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    n = v.shape[0]
    mean = v.mean(axis=0)
    if n < 2:
        return mean, np.zeros_like(mean)
    q = stats.t.ppf(0.5 + level / 2, n - 1)
    half = q * v.std(axis=0, ddof=1) / math.sqrt(n)
    # the mean of identical values can round away from them; report no spread
    return mean, np.where(np.ptp(v, axis=0) == 0, 0.0, half)


def _load_runs(in_dir):
    runs: dict[str, list] = {}
    for sp in sorted(Path(in_dir).glob("summary_*_rep*.json")):
        summ = json.loads(sp.read_text(encoding="utf-8"))
        cp = chain_path(in_dir, summ["cell"], summ["rep"])
        header, names, trace, _, _ = read_chain_csv(cp)
        s = summ["sampler"]
        scfg = SamplerConfig(s["step_size"], s["burn_in"], s["samples"], s["thin"], s["algorithm"], s["likelihood"])
        runs.setdefault(summ["cell"], []).append((summ, header, names, trace, scfg))
    if not runs:
        raise FileNotFoundError(f"no chain summaries in {in_dir}")
    return runs


def cmd_evaluate(in_dir, truth, out_dir):
    """RMSE table with t-based 95% CIs, per-replication RMSE and per-iteration traces."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth_log = np.log(read_truth(truth))
    runs = _load_runs(in_dir)
    hashes = {r[1].get("config_hash") for cell in runs.values() for r in cell}
    seeds = {r[1].get("seed") for cell in runs.values() for r in cell}
    head = "# " + f"config_hash={','.join(sorted(map(str, hashes)))} seed={','.join(sorted(map(str, seeds)))}" + "\n"
    table = []
    per_rep = []
    for cell, items in sorted(runs.items()):
        items.sort(key=lambda r: r[0]["rep"])
        shapes = {r[3].shape for r in items}
        names = {r[2] for r in items}
        if len(shapes) != 1 or len(names) != 1:
            raise ValueError(f"cell {cell}: chains have mismatched shapes {sorted(shapes)}")
        names = items[0][2]
        if len(truth_log) != len(names):
            raise ValueError(f"truth has {len(truth_log)} entries, chains have {len(names)}")
        errs = np.array([rmse(r[3][r[4].retained_iterations], truth_log) for r in items])
        mean, half = mean_ci(errs)
        for j, n in enumerate(names):
            table.append([cell, n, repr(float(mean[j])), repr(float(half[j])), len(items)])
        for r, e in zip(items, errs):
            per_rep.append([cell, r[0]["rep"], *[repr(float(x)) for x in e]])
        traces = np.stack([r[3] for r in items])
        tm, th = mean_ci(traces)
        with open(out / f"trace_{cell}.csv", "w", newline="", encoding="utf-8") as fh:
            fh.write(head)
            w = csv.writer(fh)
            w.writerow(["iter"] + [f"{c}_log_{n}" for n in names for c in ("mean", "lo", "hi")])
            for i in range(tm.shape[0]):
                row = [i]
                for j in range(len(names)):
                    row += [repr(float(tm[i, j])), repr(float(tm[i, j] - th[i, j])), repr(float(tm[i, j] + th[i, j]))]
                w.writerow(row)
    with open(out / "rmse_table.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(head)
        w = csv.writer(fh)
        w.writerow(["cell", "param", "rmse_mean", "ci95_halfwidth", "replications"])
        w.writerows(table)
    width = max(len(r) for r in per_rep) - 2
    with open(out / "rmse_replications.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(head)
        w = csv.writer(fh)
        first = next(iter(runs.values()))[0][2]
        w.writerow(["cell", "rep", *[f"rmse_log_{n}" for n in first[:width]]])
        w.writerows(per_rep)
    return table, per_rep
