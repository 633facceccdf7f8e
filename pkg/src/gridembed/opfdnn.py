"""OPF surrogates: loads (optionally encoded) to generator dispatch, plus voltage heads.

The dispatch network has two ReLU hidden layers of widths ``2 * in_dim`` and
``2 * out_dim`` and a linear output ``(p_g, q_g)`` ordered by generator
index.  When an encoder is attached it is frozen: its outputs are computed
once and used as fixed inputs.  Voltage heads read the dispatch network's
*predictions*, not the ground-truth dispatch.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset, Instance
from .encoders import EncoderModel, SupportMask, encode, input_support, load_features
from .grid import LoadVector, Network, OperatingPoint, power_balance_residual
from .neural import (History, Mlp, TrainConfig, build_mlp, mlp_from_dict, mlp_to_dict, parameter_count,
                     predict, train)


def hidden_dims(in_dim: int, out_dim: int) -> list[int]:
    return [in_dim, 2 * in_dim, 2 * out_dim, out_dim]


@dataclass
class OpfDnnModel:
    net: Mlp
    n_gen: int
    input_mask: SupportMask
    encoder: EncoderModel | None = None

    def __post_init__(self):
        if self.net.out_dim != 2 * self.n_gen:
            raise ValueError("dispatch network must output (p_g, q_g) per generator")
        expected = self.encoder.output_dim if self.encoder is not None else self.input_mask.reduced_dim
        if self.net.in_dim != expected:
            raise ValueError(f"dispatch network input is {self.net.in_dim}, expected {expected}")

    @property
    def in_dim(self) -> int:
        return self.net.in_dim

    @property
    def out_dim(self) -> int:
        return self.net.out_dim

    @property
    def variant(self) -> str:
        return "none" if self.encoder is None else self.encoder.kind

    def features(self, loads) -> np.ndarray:
        """Network inputs for a LoadVector or ``[p, q]`` rows over all buses."""
        if self.encoder is not None:
            return encode(self.encoder, loads)
        return self.input_mask.select(loads)

    def parameter_count(self) -> int:
        """Parameters of the dispatch network (the frozen encoder is not counted)."""
        return parameter_count(self.net)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "n_gen": self.n_gen, "target_order": "pg[0..G), qg[0..G)",
                "input_mask": self.input_mask.to_dict(), "net": mlp_to_dict(self.net),
                "encoder": None if self.encoder is None else self.encoder.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "OpfDnnModel":
        enc = EncoderModel.from_dict(d["encoder"]) if d.get("encoder") else None
        return cls(mlp_from_dict(d["net"]), d["n_gen"], SupportMask.from_dict(d["input_mask"]), enc)


def dispatch_targets(instances: Sequence[Instance]) -> np.ndarray:
    return np.array([np.concatenate([i.pg, i.qg]) for i in instances])


def encoder_fingerprint(encoder: EncoderModel | None) -> str:
    """Hash of the encoder record, used to assert it stays frozen."""
    if encoder is None:
        return ""
    return hashlib.sha256(json.dumps(encoder.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Physics penalty
# ---------------------------------------------------------------------------

def _incidence(net: Network) -> np.ndarray:
    c = np.zeros((net.n_bus, net.n_gen))
    c[net.gen_bus, np.arange(net.n_gen)] = 1.0
    return c


def _state(net: Network, inst: Instance) -> tuple[OperatingPoint, LoadVector]:
    # the embedded state (embedded loads at the reference dispatch) when
    # available, otherwise the OPF solution itself
    if inst.embedded_vm is not None and inst.embedded_loads is not None:
        v = inst.embedded_vm * np.exp(1j * inst.embedded_va)
        return OperatingPoint.from_voltage(net, v, inst.dispatch), inst.embedded_loads
    return inst.operating_point(net), inst.loads


def physics_penalty_loss(net: Network, instance: Instance, predictions, weight: float) -> float:
    """``weight * mean_i |balance residual_i|^2`` with predicted dispatch.

    Voltages and flows are the instance's stored ones, so only the
    generator injections differ from the recorded solution.
    ``predictions`` is ``(p_g, q_g)`` concatenated.
    """
    if weight == 0:
        return 0.0
    pred = np.asarray(predictions, dtype=float)
    ng = net.n_gen
    op, loads = _state(net, instance)
    op = OperatingPoint(op.voltage, pred[:ng] + 1j * pred[ng:2 * ng], op.flow)
    r = power_balance_residual(net, op, loads)
    return float(weight * np.mean(np.abs(r) ** 2))


def physics_hook(net: Network, instances: Sequence[Instance], weight: float):
    """Training hook adding the averaged physics penalty over a batch.

    The residual is affine in the dispatch, so each instance's residual at
    the ground truth is precomputed and shifted by the prediction error.
    """
    c = _incidence(net)
    ng, n = net.n_gen, net.n_bus
    base = []
    for inst in instances:
        op, loads = _state(net, inst)
        base.append(power_balance_residual(net, op, loads))
    base = np.array(base)
    truth = dispatch_targets(instances)

    def hook(pred: np.ndarray, idx: np.ndarray):
        err = pred - truth[idx]
        r = base[idx] + (err[:, :ng] + 1j * err[:, ng:]) @ c.T
        b = len(idx)
        loss = weight * float(np.mean(np.abs(r) ** 2))
        scale = 2.0 * weight / (n * b)
        grad = np.concatenate([scale * (r.real @ c), scale * (r.imag @ c)], axis=1)
        return loss, grad

    return hook


# ---------------------------------------------------------------------------
# Dispatch model
# ---------------------------------------------------------------------------

def train_opf_dnn(dataset: Dataset, encoder: EncoderModel | None = None, cfg: TrainConfig = TrainConfig(),
                  net: Network | None = None, physics_weight: float | None = None,
                  zero_tol: float = 1e-5) -> tuple[OpfDnnModel, History]:
    """Train the dispatch predictor on the dataset's train split.

    With ``physics_weight`` (and ``net``) the balance penalty is added to the
    MSE objective.
    """
    train_set, val_set = dataset.train, dataset.validation
    if not train_set:
        raise ValueError("empty training split")
    n_gen = len(train_set[0].pg)
    in_mask = encoder.input_mask if encoder is not None else input_support(train_set, zero_tol)
    feat = (lambda rows: encode(encoder, rows)) if encoder is not None else in_mask.select
    x = feat(load_features(train_set))
    y = dispatch_targets(train_set)
    xv = feat(load_features(val_set)) if val_set else None
    yv = dispatch_targets(val_set) if val_set else None
    mlp = build_mlp(hidden_dims(x.shape[1], 2 * n_gen), seed=cfg.seed)
    hook = None
    if physics_weight:
        if net is None:
            raise ValueError("physics penalty needs the network")
        hook = physics_hook(net, train_set, physics_weight)
    result = train(mlp, x, y, xv, yv, cfg, extra_loss=hook)
    return OpfDnnModel(result.model, n_gen, in_mask, encoder), result.history


def predict_dispatch(model: OpfDnnModel, loads) -> tuple[np.ndarray, np.ndarray]:
    """``(p_g, q_g)`` in p.u. for one LoadVector or a batch of ``[p, q]`` rows."""
    out = predict(model.net, model.features(loads))
    return out[..., :model.n_gen], out[..., model.n_gen:]


def predict_dispatch_rows(model: OpfDnnModel, instances: Sequence[Instance]) -> np.ndarray:
    return predict(model.net, model.features(load_features(instances)))


# ---------------------------------------------------------------------------
# Voltage heads
# ---------------------------------------------------------------------------

HEAD_TARGETS = ("gen_vm", "bus")


@dataclass
class VoltageHead:
    """Maps predicted dispatch to voltages.

    ``target`` is ``"gen_vm"`` (one magnitude per generator) or ``"bus"``
    (magnitudes then angles for every bus).
    """

    net: Mlp
    target: str = "gen_vm"

    def __post_init__(self):
        if self.target not in HEAD_TARGETS:
            raise ValueError(f"head target must be one of {HEAD_TARGETS}")

    def to_dict(self) -> dict:
        return {"target": self.target, "net": mlp_to_dict(self.net)}

    @classmethod
    def from_dict(cls, d: dict) -> "VoltageHead":
        return cls(mlp_from_dict(d["net"]), d["target"])


def head_targets(instances: Sequence[Instance], target: str) -> np.ndarray:
    if target == "gen_vm":
        return np.array([i.gen_vm for i in instances])
    return np.array([np.concatenate([i.vm, i.va]) for i in instances])


def train_voltage_head(dataset: Dataset, base: OpfDnnModel, cfg: TrainConfig = TrainConfig(),
                       target: str = "gen_vm") -> tuple[VoltageHead, History]:
    """Fit a head on the base model's dispatch predictions (base stays fixed)."""
    train_set, val_set = dataset.train, dataset.validation
    x = predict_dispatch_rows(base, train_set)
    y = head_targets(train_set, target)
    xv = predict_dispatch_rows(base, val_set) if val_set else None
    yv = head_targets(val_set, target) if val_set else None
    mlp = build_mlp(hidden_dims(x.shape[1], y.shape[1]), seed=cfg.seed)
    result = train(mlp, x, y, xv, yv, cfg)
    return VoltageHead(result.model, target), result.history


def predict_voltages(head: VoltageHead, base: OpfDnnModel, loads) -> np.ndarray:
    pg, qg = predict_dispatch(base, loads)
    return predict(head.net, np.concatenate([pg, qg], axis=-1))


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

def save_bundle(directory, model: OpfDnnModel, heads: dict[str, VoltageHead] | None = None,
                dataset_hash: str = "", histories: dict[str, History] | None = None) -> Path:
    """Write ``model.json`` (dispatch net with its encoder), one file per head,
    the training histories and a manifest."""
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    (path / "model.json").write_text(json.dumps(model.to_dict()))
    heads = heads or {}
    for name, head in sorted(heads.items()):
        (path / f"head_{name}.json").write_text(json.dumps(head.to_dict()))
    hist = {k: {"train": h.train, "val": h.val} for k, h in sorted((histories or {}).items())}
    (path / "history.json").write_text(json.dumps(hist))
    manifest = {"variant": model.variant, "dataset_hash": dataset_hash,
                "encoder_fingerprint": encoder_fingerprint(model.encoder),
                "parameters": model.parameter_count(), "heads": sorted(heads)}
    (path / "bundle.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


@dataclass
class Bundle:
    model: OpfDnnModel
    heads: dict[str, VoltageHead]
    manifest: dict
    histories: dict[str, History]


def load_bundle(directory) -> Bundle:
    path = Path(directory)
    manifest = json.loads((path / "bundle.json").read_text())
    model = OpfDnnModel.from_dict(json.loads((path / "model.json").read_text()))
    heads = {name: VoltageHead.from_dict(json.loads((path / f"head_{name}.json").read_text()))
             for name in manifest["heads"]}
    histories = {}
    if (path / "history.json").is_file():
        raw = json.loads((path / "history.json").read_text())
        histories = {k: History(v["train"], v["val"]) for k, v in raw.items()}
    return Bundle(model, heads, manifest, histories)
