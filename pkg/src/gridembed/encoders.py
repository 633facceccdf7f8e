"""Load encoders: learn the map from full load vectors to embedded loads.

Only load coordinates that are nonzero in some training instance are kept on
either side.  Inputs drop structurally empty buses; outputs drop every
coordinate the embedding emptied in all training instances.  The linear
encoder is one affine layer; the full encoder has two ReLU hidden layers
of twice the input and twice the output width and a linear output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import Dataset, Instance
from .grid import LoadVector
from .neural import History, Mlp, TrainConfig, build_mlp, mlp_from_dict, mlp_to_dict, predict, train

KINDS = ("linear", "full")


@dataclass
class SupportMask:
    keep_p: np.ndarray
    keep_q: np.ndarray

    def __post_init__(self):
        self.keep_p = np.asarray(self.keep_p, dtype=bool)
        self.keep_q = np.asarray(self.keep_q, dtype=bool)
        if self.keep_p.shape != self.keep_q.shape:
            raise ValueError("keep_p and keep_q must have one entry per bus")
        if self.reduced_dim < 1:
            raise ValueError("support mask keeps no coordinates")

    @property
    def reduced_dim(self) -> int:
        return int(self.keep_p.sum() + self.keep_q.sum())

    @property
    def n_bus(self) -> int:
        return len(self.keep_p)

    @property
    def keep(self) -> np.ndarray:
        return np.concatenate([self.keep_p, self.keep_q])

    def select(self, features) -> np.ndarray:
        """Restrict ``[p, q]`` feature rows (or a LoadVector) to the kept coordinates."""
        if isinstance(features, LoadVector):
            features = features.as_array()
        features = np.asarray(features, dtype=float)
        if features.shape[-1] != 2 * self.n_bus:
            raise ValueError(f"expected {2 * self.n_bus} load features, got {features.shape[-1]}")
        return features[..., self.keep]

    def to_dict(self) -> dict:
        return {"keep_p": self.keep_p.tolist(), "keep_q": self.keep_q.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SupportMask":
        return cls(d["keep_p"], d["keep_q"])

    @classmethod
    def full(cls, n_bus: int) -> "SupportMask":
        return cls(np.ones(n_bus, bool), np.ones(n_bus, bool))


def _union_support(vectors: Sequence[LoadVector], zero_tol: float) -> SupportMask:
    if not vectors:
        raise ValueError("no load vectors to build a support mask from")
    keep_p = np.zeros(len(vectors[0]), dtype=bool)
    keep_q = np.zeros_like(keep_p)
    for s in vectors:
        keep_p |= np.abs(s.p) > zero_tol
        keep_q |= np.abs(s.q) > zero_tol
    if not (keep_p.any() or keep_q.any()):
        raise ValueError("all-zero load corpus")
    return SupportMask(keep_p, keep_q)


def _training_instances(data) -> list[Instance]:
    # a Dataset contributes its train split; a plain list is taken as given
    return data.train if isinstance(data, Dataset) else list(data)


def encodable(instances: Sequence[Instance]) -> list[Instance]:
    return [i for i in instances if i.embedded_loads is not None and i.embedding_converged]


def support_mask(data, zero_tol: float = 1e-5) -> SupportMask:
    """Coordinates nonzero in at least one converged training embedding."""
    insts = encodable(_training_instances(data))
    if not insts:
        raise ValueError("no training instance has a converged embedding")
    return _union_support([i.embedded_loads for i in insts], zero_tol)


def input_support(data, zero_tol: float = 1e-5) -> SupportMask:
    """Coordinates nonzero in at least one training load vector."""
    return _union_support([i.loads for i in _training_instances(data)], zero_tol)


@dataclass
class EncoderModel:
    kind: str
    net: Mlp
    mask: SupportMask
    input_mask: SupportMask

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"encoder kind must be one of {KINDS}")
        if self.net.out_dim != self.mask.reduced_dim:
            raise ValueError("encoder output dimension must equal the mask's reduced_dim")
        if self.net.in_dim != self.input_mask.reduced_dim:
            raise ValueError("encoder input dimension must equal the input mask size")
        if self.kind == "linear" and (len(self.net.layers) != 1 or self.net.layers[0].activation != "identity"):
            raise ValueError("a linear encoder is a single identity layer")

    @property
    def input_dim(self) -> int:
        return self.net.in_dim

    @property
    def output_dim(self) -> int:
        return self.net.out_dim

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mask": self.mask.to_dict(),
                "input_mask": self.input_mask.to_dict(), "net": mlp_to_dict(self.net)}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderModel":
        return cls(d["kind"], mlp_from_dict(d["net"]), SupportMask.from_dict(d["mask"]),
                   SupportMask.from_dict(d["input_mask"]))


def encoder_dims(kind: str, in_dim: int, out_dim: int) -> list[int]:
    if kind == "linear":
        return [in_dim, out_dim]
    return [in_dim, 2 * in_dim, 2 * out_dim, out_dim]


def load_features(instances: Sequence[Instance], embedded: bool = False) -> np.ndarray:
    """``[p, q]`` rows of the original (or embedded) loads."""
    return np.array([(i.embedded_loads if embedded else i.loads).as_array() for i in instances])


def train_encoder(dataset: Dataset, kind: str, cfg: TrainConfig = TrainConfig(),
                  zero_tol: float = 1e-5) -> tuple[EncoderModel, History]:
    """Fit an encoder from full loads to mask-restricted embedded loads.

    Instances whose embedding did not converge are left out of both splits.
    """
    if kind not in KINDS:
        raise ValueError(f"encoder kind must be one of {KINDS}")
    train_set = encodable(dataset.train)
    val_set = encodable(dataset.validation)
    mask = support_mask(train_set, zero_tol)
    in_mask = input_support(train_set, zero_tol)
    x = in_mask.select(load_features(train_set))
    z = mask.select(load_features(train_set, embedded=True))
    xv = in_mask.select(load_features(val_set)) if val_set else None
    zv = mask.select(load_features(val_set, embedded=True)) if val_set else None
    net = build_mlp(encoder_dims(kind, in_mask.reduced_dim, mask.reduced_dim), seed=cfg.seed)
    result = train(net, x, z, xv, zv, cfg)
    return EncoderModel(kind, result.model, mask, in_mask), result.history


def encode(model: EncoderModel, loads) -> np.ndarray:
    """Reduced load vector ``(p_hat, q_hat)`` in mask order.

    ``loads`` is a LoadVector or ``[p, q]`` feature rows over all buses.
    """
    return predict(model.net, model.input_mask.select(loads))


def save_encoder(model: EncoderModel, path, history: History | None = None) -> None:
    record = model.to_dict()
    if history is not None:
        record["history"] = {"train": history.train, "val": history.val}
    with open(path, "w") as fh:
        json.dump(record, fh)


def load_encoder(path) -> EncoderModel:
    with open(path) as fh:
        return EncoderModel.from_dict(json.load(fh))


def load_encoder_history(path) -> History | None:
    with open(path) as fh:
        raw = json.load(fh).get("history")
    return None if raw is None else History(raw["train"], raw["val"])
