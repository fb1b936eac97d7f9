"""Semi-supervised optimization loop, Adam, gradient clipping and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor
from .data import GapScaler, MarkedSequence, batch_iter, cycle_batches
from .model import ModelConfig, SSLMTPPNet

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sslmtpp-checkpoint"
HISTORY_COLUMNS = ("epoch", "l_marker", "l_time", "l_recon", "l_total")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


class MissingGradientError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Every knob of a training run; also the flat config-file schema."""

    epochs: int = 100
    lr: float = 0.01
    batch_size: int = 1024
    lam: float = 0.1
    seed: int = 0
    unlabeled_ratio: int = 1
    clip_norm: float = 5.0
    baseline: bool = False
    # architecture
    num_classes: int = 3
    hidden_dim: int = 64
    num_layers: int = 5
    marker_embed_dim: int = 16
    encoder_dim: int = 32
    encoder_layers: int = 2
    head_dim: int = 32
    dropout: float = 0.1
    use_autoencoder: bool = True
    decoder_mode: str = "teacher"

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.unlabeled_ratio < 0:
            raise ValueError("epochs and batch_size must be positive, unlabeled_ratio non-negative")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        self.model_config().validate()

    @property
    def semi_supervised(self) -> bool:
        return self.use_autoencoder and not self.baseline

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        doc = {k: v for k, v in asdict(self).items() if k in names}
        if self.baseline:
            doc["lam"] = 0.0
        return ModelConfig(**doc)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg


def load_config(path: str | os.PathLike) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) for v in doc.values()):
        raise ValueError(f"{path}: config must be a flat JSON object")
    return TrainConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam with per-parameter step counts."""

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.state = OptimizerState(beta1, beta2, eps)

    def step(self, params: dict[str, Tensor]) -> None:
        optimizer_step(params, self.state, self.lr)


def optimizer_step(params: dict[str, Tensor], state: OptimizerState, lr: float) -> None:
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"no gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def global_norm(params: dict[str, Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None)))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: SSLMTPPNet
    config: TrainConfig
    scaler: GapScaler
    history: list[dict[str, float]]


def _descend(loss: Tensor, params: dict[str, Tensor], opt: Adam, clip: float) -> None:
    for p in params.values():
        p.zero_grad()
    loss.backward()
    clip_grad_norm(params, clip)
    opt.step(params)


def train(labeled: Sequence[MarkedSequence], unlabeled: Sequence[MarkedSequence],
          config: TrainConfig, scaler: GapScaler | None = None, model: SSLMTPPNet | None = None) -> TrainResult:
    """Fit a model on labeled sequences plus (in semi-supervised mode) unlabeled ones.

    Each epoch is one shuffled pass over the labeled sequences. Every labeled
    batch takes one step on the composite loss and is followed by
    ``unlabeled_ratio`` reconstruction-only steps on the cycling unlabeled
    stream. Baseline mode optimizes only the supervised parameters with the
    marker and time terms.
    """
    config.validate()
    if not labeled:
        raise ValueError("train: labeled set is empty")
    if any(s.markers is None for s in labeled):
        raise ValueError("train: labeled set contains a sequence without markers")
    unlabeled = [s.without_markers() if s.markers is not None else s for s in unlabeled]
    ssl = config.semi_supervised
    if scaler is None:
        scaler = GapScaler.fit(list(labeled) + list(unlabeled))
    if model is None:
        model = SSLMTPPNet(config.model_config(), seed=config.seed)
    lab_seed, unl_seed = np.random.SeedSequence([config.seed, 1]).spawn(2)
    lab_rng, unl_rng = np.random.default_rng(lab_seed), np.random.default_rng(unl_seed)

    sup_params = model.supervised_parameters()
    ae_params = model.autoencoder_parameters()
    step_params = {**sup_params, **ae_params} if ssl else sup_params
    opt = Adam(config.lr)
    stream = cycle_batches(unlabeled, config.batch_size, scaler, unl_rng) if ssl else iter(())

    history = []
    for epoch in range(1, config.epochs + 1):
        sums = {"marker": 0.0, "time": 0.0, "recon": 0.0}
        n_sup = n_rec = 0
        for b, batch in enumerate(batch_iter(labeled, config.batch_size, scaler, lab_rng)):
            try:
                terms = model.composite_loss(batch, training=True, include_reconstruction=ssl)
                _descend(terms["total"], step_params, opt, config.clip_norm)
            except NonFiniteError as exc:
                raise TrainingDivergedError(epoch, b, str(exc)) from None
            sums["marker"] += terms["marker"].item()
            sums["time"] += terms["time"].item()
            n_sup += 1
            if ssl:
                sums["recon"] += terms["recon"].item()
                n_rec += 1
                for _ in range(config.unlabeled_ratio):
                    ubatch = next(stream, None)
                    if ubatch is None:
                        break
                    try:
                        loss = model.reconstruction_loss(ubatch)
                        _descend(loss, ae_params, opt, config.clip_norm)
                    except NonFiniteError as exc:
                        raise TrainingDivergedError(epoch, b, f"unlabeled step: {exc}") from None
                    sums["recon"] += loss.item()
                    n_rec += 1
        row = {"epoch": epoch, "l_marker": sums["marker"] / n_sup, "l_time": sums["time"] / n_sup}
        if ssl:
            row["l_recon"] = sums["recon"] / n_rec
        row["l_total"] = row["l_marker"] + row["l_time"] + row.get("l_recon", 0.0)
        if not all(np.isfinite(v) for v in row.values()):
            raise TrainingDivergedError(epoch, -1, "non-finite epoch summary")
        history.append(row)
        logger.debug("epoch %d: %s", epoch, row)
    return TrainResult(model, config, scaler, history)


def write_history_csv(history: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) if c in row else "" for c in HISTORY_COLUMNS[1:]])


def read_history_csv(path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {"epoch": int(rec["epoch"])}
            for c in HISTORY_COLUMNS[1:]:
                if rec[c] != "":
                    row[c] = float(rec[c])
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_document(model: SSLMTPPNet, config: TrainConfig, scaler: GapScaler,
                        meta: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": config.to_dict(),
        "scaler": scaler.to_dict(),
        "meta": meta or {},
        "params": [
            {"name": name, "shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
            for name, p in model.parameters().items()
        ],
    }


def save_checkpoint(model: SSLMTPPNet, config: TrainConfig, scaler: GapScaler,
                    path: str | os.PathLike, meta: dict | None = None) -> None:
    """JSON container: config, scaler, metadata and row-major float64 parameters."""
    doc = checkpoint_document(model, config, scaler, meta)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


@dataclass
class Checkpoint:
    model: SSLMTPPNet
    config: TrainConfig
    scaler: GapScaler
    meta: dict


def load_checkpoint(path: str | os.PathLike, expected: TrainConfig | None = None) -> Checkpoint:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    try:
        config = TrainConfig.from_dict(doc["config"])
        scaler = GapScaler(float(doc["scaler"]["mean"]), float(doc["scaler"]["std"]))
        entries = doc["params"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if expected is not None:
        config = expected
    model = SSLMTPPNet(config.model_config(), seed=config.seed)
    state = {}
    for entry in entries:
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: {entry['name']} holds {values.size} values for shape {shape}")
        state[entry["name"]] = values.reshape(shape)
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if expected is not None:
        stored = TrainConfig.from_dict(doc["config"]).model_config().to_dict()
        wanted = expected.model_config().to_dict()
        diff = sorted(k for k in wanted if wanted[k] != stored[k])
        if diff:
            raise CheckpointError(f"{path}: config mismatch on {diff}")
    return Checkpoint(model, config, scaler, doc.get("meta", {}))
