"""Intervention-based invariance objective and the training loop.

Per epoch: one forward pass over the training graph, ``S`` variant summaries
sampled from the final-layer pool, one mixed loss per sampled summary with the
summary broadcast to every event, then a single optimizer step on
``L_task + lambda * L_inv``. Validation MAE (original units) drives early
stopping and best-checkpoint selection.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, NumericalError, TrainingError
from .model import (
    DisentangledDynamicGraphNet,
    DisentangledState,
    GraphIndex,
    ModelConfig,
    build_index,
)
from .preprocess import DynamicGraph

LAMBDA_GRID = (0.1, 1.0, 10.0)
INTERVENTIONS = ("global", "per-node")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    weight_decay: float = 5e-7
    max_epochs: int = 1000
    patience: int = 50
    n_variant_samples: int = 3
    lam: float = 1.0
    seed: int = 0
    deterministic: bool = True
    intervention: str = "global"

    def __post_init__(self):
        if self.n_variant_samples < 1:
            raise ConfigError("the number of sampled variant patterns must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.max_epochs < 1 or not 1 <= self.patience <= self.max_epochs:
            raise ConfigError("need 1 <= patience <= max_epochs")
        if self.intervention not in INTERVENTIONS:
            raise ConfigError(f"intervention must be one of {INTERVENTIONS}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    inv_loss: float | None
    val_mae: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    lam: float = 0.0

    @property
    def best_val_mae(self) -> float:
        return min(r.val_mae for r in self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def task_loss(predictions: Tensor, labels: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean squared error over the masked-in (node, day) pairs."""
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if not bool(mask.any()):
            raise ValueError("task loss needs at least one masked-in label")
        predictions, labels = predictions[mask], labels[mask]
    if predictions.numel() == 0:
        raise ValueError("task loss needs at least one label")
    return ((predictions - labels) ** 2).mean()


def sample_variant_indices(pool_size: int, n_samples: int, seed, per_node: int | None = None) -> np.ndarray:
    """Uniform draws with replacement from ``range(pool_size)``; ``seed`` may be a sequence.

    With ``per_node=M`` every sample is a row of ``M`` independent draws, one per event.
    """
    rng = np.random.default_rng(seed)
    size = n_samples if per_node is None else (n_samples, per_node)
    return rng.integers(0, pool_size, size=size)


def sample_variant_set(state: DisentangledState, n_samples: int, seed) -> list[Tensor]:
    pool = state.final_var
    if pool.shape[0] == 0:
        raise ValueError("empty variant pool")
    return [pool[i] for i in sample_variant_indices(pool.shape[0], n_samples, seed)]


def intervene(state: DisentangledState, s: Tensor) -> DisentangledState:
    """Replace the final-layer variant summary of every event by ``s``."""
    z_var = state.final_var
    if s.shape != z_var.shape[1:]:
        raise ValueError(f"variant vector has shape {tuple(s.shape)}, expected {tuple(z_var.shape[1:])}")
    return state.with_final_var(s.unsqueeze(0).expand_as(z_var))


def intervene_per_node(state: DisentangledState, donors) -> DisentangledState:
    """Give event ``i`` the final-layer variant summary of event ``donors[i]``."""
    donors = torch.as_tensor(np.asarray(donors), dtype=torch.long)
    z_var = state.final_var
    if donors.shape != (z_var.shape[0],):
        raise ValueError(f"need one donor per event ({z_var.shape[0]}), got shape {tuple(donors.shape)}")
    return state.with_final_var(z_var[donors])


def invariance_loss(mixed_losses: Sequence[Tensor] | Tensor) -> Tensor:
    """Mean plus population variance of the mixed losses."""
    if not isinstance(mixed_losses, Tensor):
        if len(mixed_losses) == 0:
            raise ValueError("need at least one mixed loss")
        mixed_losses = torch.stack([torch.as_tensor(m) for m in mixed_losses])
    losses = mixed_losses
    if losses.numel() == 0:
        raise ValueError("need at least one mixed loss")
    mean = losses.mean()
    return mean + ((losses - mean) ** 2).mean()


@dataclass
class Objective:
    total: Tensor
    task: Tensor
    inv: Tensor | None
    state: DisentangledState


def objective(
    model: DisentangledDynamicGraphNet,
    index: GraphIndex,
    lam: float,
    variant_indices: Sequence[int] | None,
) -> Objective:
    """``L_task + lam * L_inv`` for one full-graph pass.

    ``variant_indices`` selects the intervention vectors from the final-layer
    variant pool: one index per sample (global replacement) or one row of
    per-event donors per sample. ``None`` (or an entangled model) skips the
    invariance term.
    With ``lam == 0`` the total is exactly the task loss.
    """
    state = model(index)
    z_inv = state.final_inv[index.target_prev]
    l_task = task_loss(model.predict_invariant(z_inv), index.y)
    l_inv = None
    if variant_indices is not None and model.mixed_head is not None:
        mixed = []
        for i in variant_indices:
            if np.ndim(i) == 0:
                intervened = intervene(state, state.final_var[int(i)])
            else:
                intervened = intervene_per_node(state, i)
            pred = model.predict_mixed(intervened.final_inv[index.target_prev], intervened.final_var[index.target_prev])
            mixed.append(task_loss(pred, index.y))
        l_inv = invariance_loss(mixed)
    total = l_task if (l_inv is None or lam == 0) else l_task + lam * l_inv
    return Objective(total=total, task=l_task, inv=l_inv, state=state)


@torch.no_grad()
def evaluate_mae(model: DisentangledDynamicGraphNet, index: GraphIndex) -> float:
    pred = index.unscale(model.predict(index))
    return float(np.mean(np.abs(pred - index.y_raw)))


def _param_groups(model: DisentangledDynamicGraphNet) -> list[dict]:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if ".norm." in name or name.endswith("alpha"):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay}, {"params": no_decay, "weight_decay": 0.0}]


def train(
    train_graph: DynamicGraph,
    val_graph: DynamicGraph,
    model_config: ModelConfig = ModelConfig(),
    train_config: TrainConfig = TrainConfig(),
    *,
    val_metric: Callable[[DisentangledDynamicGraphNet, int], float] | None = None,
    log_path: str | Path | None = None,
    verbose: bool = False,
) -> tuple[DisentangledDynamicGraphNet, TrainHistory]:
    """Fit a model with Adam (decoupled weight decay) and early stopping on val MAE.

    Returns the parameters of the best-validation epoch. ``val_metric`` replaces
    the validation MAE (it receives the model and the 1-based epoch).
    """
    if train_config.deterministic:
        torch.set_num_threads(1)
    model = DisentangledDynamicGraphNet(train_graph.schema, model_config)
    train_index = build_index(train_graph, model_config.history_window)
    val_index = build_index(val_graph, model_config.history_window)
    if len(train_index.y) == 0 or (val_metric is None and len(val_index.y) == 0):
        raise ConfigError("training and validation graphs need labeled days with history")
    optimizer = torch.optim.AdamW(
        _param_groups(model), lr=train_config.lr, weight_decay=train_config.weight_decay
    )
    use_inv = model.mixed_head is not None
    history = TrainHistory(lam=train_config.lam)
    best_state, best_mae, stale = None, math.inf, 0
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, train_config.max_epochs + 1):
            model.train()
            variant_idx = None
            if use_inv:
                per_node = train_index.n_events if train_config.intervention == "per-node" else None
                variant_idx = sample_variant_indices(
                    train_index.n_events, train_config.n_variant_samples, [train_config.seed, epoch], per_node
                )
            try:
                obj = objective(model, train_index, train_config.lam, variant_idx)
            except NumericalError as exc:
                raise TrainingError(str(exc), epoch=epoch) from exc
            if not torch.isfinite(obj.total):
                raise TrainingError("non-finite training objective", epoch=epoch)
            optimizer.zero_grad()
            obj.total.backward()
            optimizer.step()

            model.eval()
            val_mae = val_metric(model, epoch) if val_metric else evaluate_mae(model, val_index)
            if not math.isfinite(val_mae):
                raise TrainingError("non-finite validation MAE", epoch=epoch)
            rec = EpochRecord(
                epoch=epoch,
                task_loss=float(obj.task.detach()),
                inv_loss=None if obj.inv is None else float(obj.inv.detach()),
                val_mae=float(val_mae),
            )
            history.records.append(rec)
            if log:
                log.write(json.dumps(asdict(rec)) + "\n")
            if verbose and epoch % 50 == 0:
                print(f"epoch {epoch}: task {rec.task_loss:.4f} val_mae {rec.val_mae:.4f}")
            if val_mae < best_mae:
                best_mae, stale = val_mae, 0
                history.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if stale >= train_config.patience:
                    history.stop_reason = "early-stop"
                    break
        else:
            history.stop_reason = "max-epochs"
    finally:
        if log:
            log.close()
    model.load_state_dict(best_state)
    model.eval()
    return model, history


@dataclass
class SweepResult:
    lam: float
    model: DisentangledDynamicGraphNet
    history: TrainHistory
    val_mae_by_lambda: dict


def sweep_lambda(
    train_graph: DynamicGraph,
    val_graph: DynamicGraph,
    model_config: ModelConfig = ModelConfig(),
    train_config: TrainConfig = TrainConfig(),
    lambdas: Sequence[float] = LAMBDA_GRID,
) -> SweepResult:
    """Train once per lambda and keep the run with the lowest best validation MAE."""
    best = None
    scores = {}
    for lam in lambdas:
        cfg = TrainConfig(**{**train_config.to_dict(), "lam": float(lam)})
        model, hist = train(train_graph, val_graph, model_config, cfg)
        scores[float(lam)] = hist.best_val_mae
        if best is None or hist.best_val_mae < best.history.best_val_mae:
            best = SweepResult(lam=float(lam), model=model, history=hist, val_mae_by_lambda=scores)
    best.val_mae_by_lambda = scores
    return best
