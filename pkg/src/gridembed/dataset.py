"""Perturbed-load OPF corpus: generation, embedding, splitting and persistence.

Loads are swept over a range of uniform scale factors, each scaled vector
gets per-load polar Laplace noise, and every instance that solves to local
optimality is kept with its dispatch, voltages and (optionally) a load
embedding.  On disk a dataset is a directory holding ``manifest.json`` and
``instances.jsonl``; floats are written with ``repr`` precision so a save/load
round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import acopf
from .acopf import SolverConfig, check_feasibility
from .embedding import EmbeddingConfig, EmbeddingError, encode_loads, pattern_start, reference_solution
from .grid import LoadVector, Network, OperatingPoint, to_matpower


@dataclass(frozen=True)
class DatasetConfig:
    scale_min: float = 0.80
    scale_max: float = 1.20
    scale_step: float = 0.0002
    laplace_lambda_frac: float = 0.10
    split_ratio: float = 0.80
    seed: int = 0
    max_instances: int | None = None
    min_feasible: int = 10

    def __post_init__(self):
        if not self.scale_min < self.scale_max:
            raise ValueError("scale_min must be below scale_max")
        if self.scale_step <= 0:
            raise ValueError("scale_step must be positive")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.laplace_lambda_frac < 0:
            raise ValueError("laplace_lambda_frac must be >= 0")
        if self.max_instances is not None and self.max_instances < 1:
            raise ValueError("max_instances must be >= 1")


class DatasetError(RuntimeError):
    pass


def scale_sweep(cfg: DatasetConfig) -> np.ndarray:
    """Factors ``scale_min + k * scale_step`` strictly below ``scale_max``.

    Integer stepping avoids accumulated rounding; the count is computed
    with a small slack so ``[0.8, 1.2)`` at ``2e-4`` gives exactly 2000.
    With ``max_instances`` set, that many factors are taken evenly across
    the sweep.
    """
    n = int(np.ceil((cfg.scale_max - cfg.scale_min) / cfg.scale_step - 1e-9))
    factors = cfg.scale_min + cfg.scale_step * np.arange(max(n, 1))
    if cfg.max_instances is not None and cfg.max_instances < len(factors):
        idx = np.round(np.linspace(0, len(factors) - 1, cfg.max_instances)).astype(int)
        factors = factors[idx]
    return factors


def perturb_loads(loads: LoadVector, lambda_frac: float, rng: np.random.Generator) -> LoadVector:
    """Add polar Laplace noise ``r * exp(j phi)`` to every nonzero complex load.

    ``r = lambda_frac * |S_i| * Exp(1)`` and ``phi ~ U[0, 2 pi)``.  Draws are
    made for every bus so the random stream does not depend on the sparsity
    pattern.
    """
    if lambda_frac < 0:
        raise ValueError("lambda_frac must be >= 0")
    s = loads.s
    r = lambda_frac * np.abs(s) * rng.exponential(1.0, len(s))
    phi = rng.uniform(0.0, 2 * np.pi, len(s))
    noisy = np.where(s != 0, s + r * np.exp(1j * phi), 0)
    return LoadVector.from_complex(noisy)


@dataclass
class Instance:
    id: int
    scale: float
    loads: LoadVector
    pg: np.ndarray
    qg: np.ndarray
    vm: np.ndarray
    va: np.ndarray
    gen_vm: np.ndarray
    cost: float
    embedded_loads: LoadVector | None = None
    embedding_converged: bool = False
    embedding_iterations: int = 0
    embedded_vm: np.ndarray | None = None
    embedded_va: np.ndarray | None = None
    tag: str = "train"

    @property
    def dispatch(self) -> np.ndarray:
        return self.pg + 1j * self.qg

    @property
    def voltage(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    def operating_point(self, net: Network) -> OperatingPoint:
        return OperatingPoint.from_voltage(net, self.voltage, self.dispatch)

    def to_dict(self) -> dict:
        out = {"id": self.id, "scale": self.scale, "tag": self.tag, "cost": self.cost,
               "pd": self.loads.p.tolist(), "qd": self.loads.q.tolist(),
               "pg": self.pg.tolist(), "qg": self.qg.tolist(),
               "vm": self.vm.tolist(), "va": self.va.tolist(), "gen_vm": self.gen_vm.tolist(),
               "embedding_converged": self.embedding_converged,
               "embedding_iterations": self.embedding_iterations}
        if self.embedded_loads is not None:
            out["embedded_pd"] = self.embedded_loads.p.tolist()
            out["embedded_qd"] = self.embedded_loads.q.tolist()
        if self.embedded_vm is not None:
            out["embedded_vm"] = self.embedded_vm.tolist()
            out["embedded_va"] = self.embedded_va.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        arr = lambda key: np.asarray(d[key], dtype=float) if key in d else None  # noqa: E731
        emb = None
        if "embedded_pd" in d:
            emb = LoadVector(arr("embedded_pd"), arr("embedded_qd"))
        return cls(d["id"], d["scale"], LoadVector(arr("pd"), arr("qd")), arr("pg"), arr("qg"),
                   arr("vm"), arr("va"), arr("gen_vm"), d["cost"], emb,
                   d.get("embedding_converged", False), d.get("embedding_iterations", 0),
                   arr("embedded_vm"), arr("embedded_va"), d["tag"])


def case_hash(net: Network, loads: LoadVector) -> str:
    return hashlib.sha256(to_matpower(net, loads).encode()).hexdigest()


@dataclass
class Dataset:
    case_name: str
    case_hash: str
    config: DatasetConfig
    instances: list[Instance]
    embed_config: EmbeddingConfig | None = None
    support_mask: dict | None = None
    swept: int = 0

    def split(self, tag: str) -> list[Instance]:
        return [inst for inst in self.instances if inst.tag == tag]

    @property
    def train(self) -> list[Instance]:
        return self.split("train")

    @property
    def validation(self) -> list[Instance]:
        return self.split("validation")

    def manifest(self) -> dict:
        return {
            "case_name": self.case_name,
            "case_hash": self.case_hash,
            "config": asdict(self.config),
            "embed_config": _embed_to_dict(self.embed_config),
            "counts": {"swept": self.swept, "feasible": len(self.instances),
                       "train": len(self.train), "validation": len(self.validation),
                       "embedded": sum(i.embedded_loads is not None for i in self.instances),
                       "embedding_converged": sum(i.embedding_converged for i in self.instances)},
            "split": {"train": [i.id for i in self.train],
                      "validation": [i.id for i in self.validation]},
            "support_mask": self.support_mask,
        }


def _embed_to_dict(cfg: EmbeddingConfig | None) -> dict | None:
    return None if cfg is None else asdict(cfg)


def embed_config_from_dict(d: dict | None) -> EmbeddingConfig | None:
    if d is None:
        return None
    d = dict(d)
    solver = SolverConfig(**d.pop("solver", {}))
    return EmbeddingConfig(**d, solver=solver)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _solve_instance(net: Network, idx: int, scale: float, loads: LoadVector,
                    solver: SolverConfig, embed_cfg: EmbeddingConfig | None,
                    warm: OperatingPoint | None, pattern: LoadVector | None = None) -> Instance | None:
    res = acopf.solve_acopf(net, loads, solver, warm=warm)
    if not res.optimal:
        return None
    op = res.point
    inst = Instance(idx, float(scale), loads, op.gen_injection.real.copy(), op.gen_injection.imag.copy(),
                    op.vm.copy(), op.va.copy(), op.vm[net.gen_bus].copy(), float(res.objective))
    if embed_cfg is not None:
        try:
            ref = reference_solution(net, loads, embed_cfg, solved=res)
            start = pattern_start(pattern, ref) if pattern is not None else None
            emb = encode_loads(net, loads, embed_cfg, reference=ref, start=start)
        except EmbeddingError:
            return inst
        inst.embedded_loads = emb.embedded
        inst.embedding_converged = emb.converged
        inst.embedding_iterations = emb.iterations
        if emb.point is not None:
            inst.embedded_vm = emb.point.vm.copy()
            inst.embedded_va = emb.point.va.copy()
    return inst


def _job(args):
    return _solve_instance(*args)


def generate_dataset(net: Network, base_loads: LoadVector, cfg: DatasetConfig = DatasetConfig(),
                     embed_cfg: EmbeddingConfig | None = EmbeddingConfig(),
                     solver: SolverConfig | None = None, workers: int = 1) -> Dataset:
    """Sweep, perturb, solve, embed and split.

    Noise is drawn up front in sweep order from one seeded generator, and
    results are collected in sweep order, so the output does not depend on
    ``workers``.  Non-optimal instances are dropped.  Every embedding starts
    from the nominal-load embedding rescaled to the instance's totals, which
    keeps instances on a common sparsity pattern where the subproblem has
    several local maxima.  Pass ``embed_cfg=None`` to skip embedding.
    """
    solver = solver or (embed_cfg.solver if embed_cfg is not None else SolverConfig())
    rng = np.random.default_rng(cfg.seed)
    factors = scale_sweep(cfg)
    nominal = acopf.solve_acopf(net, base_loads, solver)
    warm = nominal.point if nominal.optimal else None
    pattern = None
    if embed_cfg is not None and nominal.optimal:
        ref = reference_solution(net, base_loads, embed_cfg, solved=nominal)
        pattern = encode_loads(net, base_loads, embed_cfg, reference=ref).embedded
    jobs = [(net, k, float(f), perturb_loads(base_loads.scaled(f), cfg.laplace_lambda_frac, rng),
             solver, embed_cfg, warm, pattern) for k, f in enumerate(factors)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_job(j) for j in jobs]
    instances = [r for r in results if r is not None]
    if len(instances) < cfg.min_feasible:
        raise DatasetError(f"only {len(instances)} feasible instances (< {cfg.min_feasible})")
    assign_split(instances, cfg.split_ratio, cfg.seed)
    return Dataset(net.name, case_hash(net, base_loads), cfg, instances, embed_cfg, swept=len(factors))


def assign_split(instances: list[Instance], ratio: float, seed: int) -> None:
    """Tag ``round(ratio * n)`` randomly chosen instances as train, the rest validation."""
    n = len(instances)
    n_train = int(round(ratio * n))
    order = np.random.default_rng(seed).permutation(n)
    train = set(order[:n_train].tolist())
    for k, inst in enumerate(instances):
        inst.tag = "train" if k in train else "validation"


def replay(net: Network, inst: Instance, tol: float = 1e-5):
    """Re-check a stored instance's operating point against its loads."""
    return check_feasibility(net, inst.loads, inst.operating_point(net), tol)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"
INSTANCES = "instances.jsonl"


def save_dataset(ds: Dataset, directory) -> Path:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    (path / MANIFEST).write_text(json.dumps(ds.manifest(), indent=2, allow_nan=False) + "\n")
    with open(path / INSTANCES, "w") as fh:
        for inst in ds.instances:
            fh.write(json.dumps(inst.to_dict(), allow_nan=False) + "\n")
    return path


def load_dataset(directory) -> Dataset:
    path = Path(directory)
    if not (path / MANIFEST).is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {path}")
    man = json.loads((path / MANIFEST).read_text())
    known = {f.name for f in fields(DatasetConfig)}
    cfg = DatasetConfig(**{k: v for k, v in man["config"].items() if k in known})
    with open(path / INSTANCES) as fh:
        instances = [Instance.from_dict(json.loads(line)) for line in fh if line.strip()]
    return Dataset(man["case_name"], man["case_hash"], cfg, instances,
                   embed_config_from_dict(man.get("embed_config")), man.get("support_mask"),
                   man["counts"]["swept"])


def worker_count(default: int = 1) -> int:
    """Worker cap from ``GRIDEMBED_THREADS`` (falls back to ``default``)."""
    raw = os.environ.get("GRIDEMBED_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"GRIDEMBED_THREADS must be an integer, got {raw!r}") from None
