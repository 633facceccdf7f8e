"""Command-line entry point: one subcommand per workflow stage.

Exit codes: 0 success, 1 bad input (unparsable case, missing path, bad
flag), 2 infeasible OPF, 3 OPF iteration limit, 4 embedding did not
converge (result still written), 5 a pipeline stage failed.

Every command accepts ``--config FILE`` (a RunConfig JSON document) and
``--seed``; flags given on the command line override the file.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import acopf
from .dataset import (Dataset, DatasetConfig, DatasetError, embed_config_from_dict, generate_dataset,
                      load_dataset, save_dataset, worker_count)
from .embedding import Compression, EmbeddingConfig, EmbeddingError, compression_report, encode_loads
from .encoders import (KINDS, input_support, load_encoder, load_encoder_history, save_encoder, support_mask,
                       train_encoder)
from .grid import CaseParseError, LoadVector, Network, case_paths, read_case
from .metrics import VARIANTS, CaseEval, combined_mse, dispatch_l1, emit_report, gen_voltage_l1, opf_cost_error
from .neural import TrainConfig, TrainingDiverged, predict
from .opfdnn import (HEAD_TARGETS, Bundle, dispatch_targets, load_bundle, predict_dispatch_rows, save_bundle,
                     train_opf_dnn, train_voltage_head)

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_ITERLIMIT, EXIT_NOT_CONVERGED, EXIT_STAGE = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    """Bad input detected before any work starts (exit 1)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def desk_train_config() -> TrainConfig:
    # 300 epochs instead of 3000, so a 10x larger step to reach the same
    # optimisation budget
    return TrainConfig(lr=0.01, epochs=300, batch_size=32, seed=0)


def desk_data_config() -> DatasetConfig:
    return DatasetConfig(max_instances=200)


@dataclass
class RunConfig:
    case_path: str = "case14"
    out_dir: str = "run"
    embed: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    data: DatasetConfig = field(default_factory=desk_data_config)
    train: TrainConfig = field(default_factory=desk_train_config)
    variants: tuple[str, ...] = VARIANTS
    physics_penalty_weight: float | None = None
    timings: bool = False

    def __post_init__(self):
        self.variants = tuple(self.variants)
        if not self.variants:
            raise ValueError("variants must be nonempty")
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise ValueError(f"unknown variants {sorted(bad)}; choose from {VARIANTS}")
        # canonical order keeps dumps and outputs independent of how the set was spelled
        self.variants = tuple(v for v in VARIANTS if v in self.variants)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = list(self.variants)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "embed" in d:
            d["embed"] = embed_config_from_dict(d["embed"])
        if "data" in d:
            d["data"] = DatasetConfig(**d["data"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def resolve_case(path: str) -> Path:
    """A file path, or the name of a bundled fixture (``case14``)."""
    p = Path(path)
    if p.is_file():
        return p
    bundled = case_paths()
    name = p.name[:-2] if p.name.endswith(".m") else p.name
    if not p.exists() and str(p.parent) == "." and name in bundled:
        return Path(bundled[name])
    raise UsageError(f"case file not found: {path}")


def _read_case(path: str) -> tuple[Network, LoadVector]:
    resolved = resolve_case(path)
    try:
        return read_case(resolved)
    except CaseParseError as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc


def _base_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            return RunConfig.from_dict(json.loads(path.read_text()))
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid config {args.config}: {exc}") from exc
    return RunConfig()


def _override(obj, **kw):
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(obj, **kw) if kw else obj


def _solver_from(args, base: acopf.SolverConfig) -> acopf.SolverConfig:
    return _override(base, feas_tol=args.feas_tol, opt_tol=args.opt_tol, max_outer=args.max_outer,
                     max_inner=args.max_inner, restarts=args.restarts, seed=args.seed)


def _embed_from(args, base: EmbeddingConfig) -> EmbeddingConfig:
    # --max-iter counts subproblem solves; the config stores the last index
    last = None if args.max_iter is None else args.max_iter - 1
    return _override(base, beta=args.beta, beta_v=args.beta_v, beta_s=args.beta_s, rho_v=args.rho_v,
                     rho_s=args.rho_s, max_iter=last, zero_tol=args.zero_tol,
                     solver=_solver_from(args, base.solver))


def _train_from(args, base: TrainConfig) -> TrainConfig:
    return _override(base, lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)


def _data_from(args, base: DatasetConfig) -> DatasetConfig:
    return _override(base, scale_min=args.scale_min, scale_max=args.scale_max, scale_step=args.scale_step,
                     laplace_lambda_frac=args.noise, split_ratio=args.split, seed=args.seed,
                     max_instances=args.max_instances)


def _write_json(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _print(line: str) -> None:
    print(line, flush=True)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def embedding_summary(net: Network, loads: LoadVector, result, zero_tol: float,
                      seconds: float | None = None) -> dict:
    """The embedding result plus its compression and signed OPF error."""
    comp = compression_report(loads, result.embedded, zero_tol)
    payload = result.to_dict()
    payload["case"] = net.name
    payload["compression"] = {"active": comp.active, "reactive": comp.reactive, "joint": comp.joint}
    payload["opf_error"] = opf_cost_error(result.reference.cost, result.embedded_cost)
    if seconds is not None:
        payload["seconds"] = seconds
    return payload


def summary_row(case: str, summary: dict | None, timings: bool = False) -> CaseEval:
    row = CaseEval(case)
    if summary is not None:
        c = summary["compression"]
        row.compression = Compression(c["active"], c["reactive"])
        row.opf_error = summary["opf_error"]
        row.embed_seconds = summary.get("seconds") if timings else None
    return row


def train_variant(ds: Dataset, variant: str, encoders: dict, cfg: TrainConfig, net: Network | None = None,
                  physics_weight: float | None = None, heads=HEAD_TARGETS):
    """Dispatch network plus voltage heads for one variant; returns (model, heads, histories)."""
    encoder = None if variant == "none" else encoders[variant]
    model, hist = train_opf_dnn(ds, encoder, cfg, net=net, physics_weight=physics_weight)
    out_heads, histories = {}, {"dispatch": hist}
    for target in heads:
        head, h = train_voltage_head(ds, model, cfg, target)
        out_heads[target] = head
        histories[f"head_{target}"] = h
    return model, out_heads, histories


def evaluate_bundle(bundle: Bundle, instances) -> dict[str, float]:
    """Validation metrics for one bundle; metrics needing an absent head are omitted."""
    model, heads = bundle.model, bundle.heads
    pred = predict_dispatch_rows(model, instances)
    truth = dispatch_targets(instances)
    ng = model.n_gen
    out = {"dispatch_l1": dispatch_l1(truth[:, :ng], truth[:, ng:], pred[:, :ng], pred[:, ng:])}
    if "bus" in heads:
        v = predict(heads["bus"].net, pred)
        nb = v.shape[1] // 2
        vm = np.array([i.vm for i in instances])
        va = np.array([i.va for i in instances])
        out["combined_mse"] = combined_mse(truth[:, :ng], truth[:, ng:], vm, va, pred[:, :ng], pred[:, ng:],
                                           v[:, :nb], v[:, nb:])
    if "gen_vm" in heads:
        vg = predict(heads["gen_vm"].net, pred)
        out["gen_voltage_l1"] = gen_voltage_l1(np.array([i.gen_vm for i in instances]), vg)
    return out


def evaluate_models(ds: Dataset, model_dir: Path, encoder_dir: Path | None = None,
                    nominal: dict | None = None, timings: bool = False) -> CaseEval:
    """Collect every bundle under ``model_dir`` into one report row."""
    row = summary_row(ds.case_name, nominal, timings)
    val = ds.validation
    if not val:
        raise DatasetError("dataset has no validation instances")
    try:
        orig = input_support(ds).reduced_dim
        row.dims = (orig, support_mask(ds).reduced_dim)
    except ValueError:
        row.dims = None
    for sub in sorted(p for p in model_dir.iterdir() if (p / "bundle.json").is_file()):
        bundle = load_bundle(sub)
        variant = bundle.model.variant
        metrics = evaluate_bundle(bundle, val)
        physics = sub.name.startswith("physics_")
        prefix = "physics_" if physics else ""
        getattr(row, prefix + "dispatch_l1")[variant] = metrics["dispatch_l1"]
        if "combined_mse" in metrics:
            getattr(row, prefix + "combined_mse")[variant] = metrics["combined_mse"]
        if "gen_voltage_l1" in metrics and not physics:
            row.gen_voltage_l1[variant] = metrics["gen_voltage_l1"]
        for key, hist in bundle.histories.items():
            row.curves[f"{sub.name}_{key}/{variant}"] = hist
    if encoder_dir is not None and encoder_dir.is_dir():
        for path in sorted(encoder_dir.glob("*.json")):
            hist = load_encoder_history(path)
            if hist is not None:
                row.curves[f"encoder/{path.stem}"] = hist
    return row


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_solve(args) -> int:
    net, loads = _read_case(args.case)
    cfg = _solver_from(args, _base_config(args).embed.solver)
    res = acopf.solve_acopf(net, loads, cfg)
    payload = res.to_dict()
    if args.out:
        _write_json(args.out, payload)
    else:
        sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    _print(f"{net.name}: status={res.status.value} objective={res.objective:.6f} "
           f"max_violation={res.max_violation:.3e}")
    return {acopf.Status.OPTIMAL: EXIT_OK, acopf.Status.INFEASIBLE: EXIT_INFEASIBLE,
            acopf.Status.ITERATION_LIMIT: EXIT_ITERLIMIT}[res.status]


def cmd_embed(args) -> int:
    net, loads = _read_case(args.case)
    cfg = _embed_from(args, _base_config(args).embed)
    t0 = time.process_time()
    try:
        result = encode_loads(net, loads, cfg)
    except EmbeddingError as exc:
        print(f"embedding failed: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    seconds = time.process_time() - t0 if args.timings else None
    payload = embedding_summary(net, loads, result, cfg.zero_tol, seconds)
    row = summary_row(net.name, payload, args.timings)
    if args.out:
        _write_json(args.out, payload)
    report = emit_report([row], timings=args.timings)
    sys.stdout.write(report.tables[0].text() + "\n")
    _print(f"converged={result.converged} iterations={result.iterations} "
           f"cost_error={100 * result.cost_error:.4f}%")
    if not result.converged:
        print("embedding did not reach the cost tolerance; best candidate written", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_gen_data(args) -> int:
    base = _base_config(args)
    net, loads = _read_case(args.case or base.case_path)
    dcfg = _data_from(args, base.data)
    ecfg = None if args.no_embed else _embed_from(args, base.embed)
    ds = generate_dataset(net, loads, dcfg, ecfg, workers=worker_count())
    save_dataset(ds, args.out)
    _print(f"{ds.case_name}: {len(ds.instances)}/{ds.swept} feasible "
           f"({len(ds.train)} train, {len(ds.validation)} validation) -> {args.out}")
    return EXIT_OK


def _load_dataset(path) -> Dataset:
    if not Path(path, "manifest.json").is_file():
        raise UsageError(f"no dataset at {path}")
    return load_dataset(path)


def cmd_train_encoder(args) -> int:
    ds = _load_dataset(args.dataset)
    cfg = _train_from(args, _base_config(args).train)
    model, hist = train_encoder(ds, args.kind, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_encoder(model, args.out, hist)
    final = hist.val[-1] if hist.val else hist.train[-1]
    _print(f"{args.kind} encoder: {model.input_dim} -> {model.output_dim}, final validation MSE {final:.6g}")
    return EXIT_OK


def cmd_train_opf(args) -> int:
    ds = _load_dataset(args.dataset)
    base = _base_config(args)
    cfg = _train_from(args, base.train)
    encoders = {}
    variant = "none"
    if args.encoder:
        if not Path(args.encoder).is_file():
            raise UsageError(f"encoder not found: {args.encoder}")
        enc = load_encoder(args.encoder)
        encoders[enc.kind] = enc
        variant = enc.kind
    weight = args.physics_weight if args.physics_weight is not None else base.physics_penalty_weight
    net = None
    if weight:
        net, _ = _read_case(args.case or base.case_path)
    heads = () if args.no_heads else HEAD_TARGETS
    model, out_heads, hist = train_variant(ds, variant, encoders, cfg, net, weight, heads)
    save_bundle(args.out, model, out_heads, ds.case_hash, hist)
    _print(f"{variant} OPF-DNN: {model.parameter_count()} parameters, "
           f"final validation MSE {hist['dispatch'].val[-1]:.6g} -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds = _load_dataset(args.dataset)
    model_dir = Path(args.models)
    if not model_dir.is_dir():
        raise UsageError(f"model directory not found: {args.models}")
    nominal = None
    if args.embedding:
        nominal = json.loads(Path(args.embedding).read_text())
    enc_dir = Path(args.encoders) if args.encoders else None
    row = evaluate_models(ds, model_dir, enc_dir, nominal, args.timings)
    report = emit_report([row], args.out, timings=args.timings)
    sys.stdout.write(report.text())
    return EXIT_OK


def run_pipeline(cfg: RunConfig, log=_print) -> Path:
    """Run every stage; raises ``StageError`` naming the stage that failed."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(cfg.dumps())

    with _stage("load-case"):
        net, loads = _read_case(cfg.case_path)

    with _stage("embed"):
        t0 = time.process_time()
        result = encode_loads(net, loads, cfg.embed)
        seconds = time.process_time() - t0 if cfg.timings else None
        nominal = embedding_summary(net, loads, result, cfg.embed.zero_tol, seconds)
        _write_json(out / "embedding.json", nominal)
        log(f"[embed] joint compression {nominal['compression']['joint']:.2f}%, "
            f"OPF error {nominal['opf_error']:.4f}%")

    with _stage("gen-data"):
        ds = generate_dataset(net, loads, cfg.data, cfg.embed, workers=worker_count())
        save_dataset(ds, out / "dataset")
        log(f"[gen-data] {len(ds.instances)}/{ds.swept} feasible")

    encoders = {}
    with _stage("train-encoder"):
        for kind in KINDS:
            if kind not in cfg.variants:
                continue
            enc, hist = train_encoder(ds, kind, cfg.train)
            (out / "encoders").mkdir(exist_ok=True)
            save_encoder(enc, out / "encoders" / f"{kind}.json", hist)
            encoders[kind] = enc
            log(f"[train-encoder] {kind}: validation MSE {hist.val[-1]:.6g}")

    with _stage("train-opf"):
        runs = [(v, None) for v in cfg.variants]
        if cfg.physics_penalty_weight:
            runs += [(v, cfg.physics_penalty_weight) for v in cfg.variants]
        for variant, weight in runs:
            model, heads, hist = train_variant(ds, variant, encoders, cfg.train, net, weight,
                                               HEAD_TARGETS if weight is None else ("bus",))
            name = variant if weight is None else f"physics_{variant}"
            save_bundle(out / "models" / name, model, heads, ds.case_hash, hist)
            log(f"[train-opf] {name}: validation MSE {hist['dispatch'].val[-1]:.6g}")

    with _stage("evaluate"):
        row = evaluate_models(ds, out / "models", out / "encoders", nominal, cfg.timings)
        report = emit_report([row], out / "report", timings=cfg.timings)
        log(report.text())
    return out


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def cmd_pipeline(args) -> int:
    cfg = _base_config(args)
    try:
        cfg = replace(cfg,
                      case_path=args.case or cfg.case_path,
                      out_dir=args.out or cfg.out_dir,
                      embed=_embed_from(args, cfg.embed),
                      data=_data_from(args, cfg.data),
                      train=_train_from(args, cfg.train),
                      variants=tuple(args.variants.split(",")) if args.variants else cfg.variants,
                      physics_penalty_weight=(args.physics_weight if args.physics_weight is not None
                                              else cfg.physics_penalty_weight),
                      timings=args.timings or cfg.timings)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    resolve_case(cfg.case_path)
    try:
        run_pipeline(cfg)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON file; flags override its values")
    p.add_argument("--seed", type=int, help="random seed for every stochastic step")


def _solver_flags(p) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--feas-tol", type=float, help="max constraint violation in p.u.")
    g.add_argument("--opt-tol", type=float, help="KKT stationarity tolerance")
    g.add_argument("--max-outer", type=int, help="outer iteration limit")
    g.add_argument("--max-inner", type=int, help="inner iteration limit")
    g.add_argument("--restarts", type=int, help="randomized restarts after a failed solve")


def _embed_flags(p) -> None:
    g = p.add_argument_group("embedding")
    g.add_argument("--beta", type=float, help="relative cost tolerance (0.005 = 0.5%%)")
    g.add_argument("--beta-v", type=float, help="initial voltage penalty weight")
    g.add_argument("--beta-s", type=float, help="initial thermal penalty weight")
    g.add_argument("--rho-v", type=float, help="voltage weight growth factor")
    g.add_argument("--rho-s", type=float, help="thermal weight growth factor")
    g.add_argument("--max-iter", type=int, help="maximum number of penalty subproblems solved")
    g.add_argument("--zero-tol", type=float, help="loads below this magnitude count as zero")


def _train_flags(p) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, help="SGD step size")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)


def _data_flags(p) -> None:
    g = p.add_argument_group("dataset")
    g.add_argument("--scale-min", type=float)
    g.add_argument("--scale-max", type=float)
    g.add_argument("--scale-step", type=float)
    g.add_argument("--noise", type=float, help="Laplace scale as a fraction of each load magnitude")
    g.add_argument("--split", type=float, help="train fraction")
    g.add_argument("--max-instances", type=int, help="evenly subsample the sweep to this many factors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridembed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve the AC-OPF for a case file")
    p.add_argument("case", help="MATPOWER case file or bundled case name")
    p.add_argument("--out", help="write the solution JSON here instead of stdout")
    _common(p)
    _solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("embed", help="compute a sparse load embedding at nominal load")
    p.add_argument("case")
    p.add_argument("--out", help="write the embedding result JSON here")
    p.add_argument("--timings", action="store_true", help="report CPU seconds (not reproducible)")
    _common(p)
    _solver_flags(p)
    _embed_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("gen-data", help="generate a perturbed, solved and embedded dataset")
    p.add_argument("case", nargs="?")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--no-embed", action="store_true", help="skip load embedding")
    _common(p)
    _data_flags(p)
    _solver_flags(p)
    _embed_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-encoder", help="train a load encoder on a dataset")
    p.add_argument("dataset")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--out", required=True, help="encoder JSON path")
    _common(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("train-opf", help="train an OPF-DNN with voltage heads")
    p.add_argument("dataset")
    p.add_argument("--encoder", help="frozen encoder JSON; omit for the no-encoder variant")
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--case", help="case file, needed only with a physics penalty")
    p.add_argument("--physics-weight", type=float, help="weight of the power-balance penalty")
    p.add_argument("--no-heads", action="store_true", help="skip the voltage heads")
    _common(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train_opf)

    p = sub.add_parser("evaluate", help="evaluate model bundles and write report tables")
    p.add_argument("dataset")
    p.add_argument("--models", required=True, help="directory of bundle subdirectories")
    p.add_argument("--encoders", help="directory of encoder JSON files (for curves)")
    p.add_argument("--embedding", help="embedding JSON from the embed command (compression table)")
    p.add_argument("--out", help="report directory")
    p.add_argument("--timings", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--case")
    p.add_argument("--out", help="output directory")
    p.add_argument("--variants", help="comma-separated subset of none,linear,full")
    p.add_argument("--physics-weight", type=float)
    p.add_argument("--timings", action="store_true")
    _common(p)
    _solver_flags(p)
    _embed_flags(p)
    _data_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags, which would collide with "infeasible"
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, DatasetError, TrainingDiverged, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
