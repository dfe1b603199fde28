"""Plateau-driven learning-rate decay with a floor, plus early stopping."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.0
    best: float | None = None
    bad_epochs: int = 0
    best_state: dict | None = field(default=None, repr=False)
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, metric, lr)


class PlateauSchedule:
    """Multiply the rate by ``factor`` after any epoch without improvement.

    The rate never drops below ``min_lr_ratio`` times its initial value. Training
    should stop once ``patience`` consecutive epochs fail to improve the metric.
    """

    def __init__(
        self,
        optimizer: torch.optim.Optimizer,
        *,
        mode: str,
        factor: float,
        patience: int = 3,
        min_lr_ratio: float = 0.01,
    ):
        if mode not in ("min", "max"):
            raise ValueError(mode)
        self.optimizer = optimizer
        self.mode = mode
        self.patience = patience
        self.initial_lr = optimizer.param_groups[0]["lr"]
        self.min_lr = self.initial_lr * min_lr_ratio
        self._plateau = torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer,
            mode=mode,
            factor=factor,
            patience=0,
            threshold=0.0,
            min_lr=self.min_lr,
            eps=0.0,
        )
        self.state = TrainState(lr=self.initial_lr)

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def _better(self, metric: float) -> bool:
        best = self.state.best
        if best is None:
            return True
        return metric > best if self.mode == "max" else metric < best

    def step(self, metric: float, model: torch.nn.Module | None = None) -> bool:
        """Record one epoch's dev metric; returns True when it improved on the best."""
        st = self.state
        st.epoch += 1
        improved = self._better(metric)
        if improved:
            st.best = metric
            st.bad_epochs = 0
            if model is not None:
                st.best_state = copy.deepcopy(model.state_dict())
        else:
            st.bad_epochs += 1
        self._plateau.step(metric)
        st.lr = self.lr
        st.history.append((st.epoch, metric, st.lr))
        return improved

    @property
    def should_stop(self) -> bool:
        return self.state.bad_epochs >= self.patience

    def restore_best(self, model: torch.nn.Module) -> None:
        if self.state.best_state is not None:
            model.load_state_dict(self.state.best_state)
