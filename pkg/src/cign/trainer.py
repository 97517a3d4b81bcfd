"""Training loop, evaluation and grid search."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from . import dataio
from .graph import (
    CIGN,
    RoutingPolicy,
    TreeSpec,
    check_routing_invariants,
    classification_loss,
    ig_losses,
    total_loss,
)
from .schedules import ScheduleSet, lr_at, rho_at, tau_at
from .igmath import DomainError
from .substrate import NonFiniteError, backward, sgd_step

log = logging.getLogger(__name__)


class DivergedRun(RuntimeError):
    """Training produced a non-finite loss; ``record`` holds the history up to that point."""

    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


@dataclass
class RunRecord:
    seed: int
    config: dict
    iterations: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    status: str = "running"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "iterations": self.iterations,
            "epochs": self.epochs,
            "final": self.final,
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(d["seed"], d["config"], d["iterations"], d["epochs"], d["final"], d["status"])


@dataclass
class TrainResult:
    record: RunRecord
    model: CIGN


def evaluate(model: CIGN, dataset: dataio.LabeledDataset, batch_size: int = 500, tau: float = 1.0) -> dict:
    """Eval-mode accuracy: every sample follows its argmax path to a single leaf."""
    correct = 0
    leaf_counts: dict[int, int] = {}
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start:start + batch_size]
            y = torch.from_numpy(np.array(dataset.labels[start:start + batch_size]))
            logits, leaf = model.predict_logits(x, tau)
            correct += int((logits.argmax(dim=1) == y).sum())
            for idx, count in zip(*np.unique(leaf.numpy(), return_counts=True)):
                leaf_counts[int(idx)] = leaf_counts.get(int(idx), 0) + int(count)
    return {"accuracy": correct / len(dataset), "n": len(dataset), "leaf_counts": leaf_counts}


def train(
    tree: TreeSpec,
    dataset: dataio.LabeledDataset,
    schedule: ScheduleSet,
    seed: int = 0,
    test_set: dataio.LabeledDataset | None = None,
    dtype: torch.dtype = torch.float32,
    check_invariants: bool = False,
    config_snapshot: dict | None = None,
    on_step: Callable[[dict, "object"], None] | None = None,
    eval_every: int = 1,
) -> TrainResult:
    """SGD with momentum over shuffled minibatches, applying all schedules per step.

    ``check_invariants`` verifies the routing mask rules after every forward
    pass. ``on_step`` receives the iteration record and the forward result.
    """
    for node in tree.split_nodes:
        schedule.check_rho(node.k)
    torch.manual_seed(seed)
    model = CIGN(tree, seed=seed, dtype=dtype)
    gen = torch.Generator().manual_seed(seed + 1)
    record = RunRecord(seed=seed, config=dict(config_snapshot or {"schedule": schedule.to_dict()}))
    decay = {"F": schedule.lambda_f, "H": schedule.lambda_h}
    iteration = 0
    started = time.perf_counter()
    for epoch in range(schedule.epochs):
        rho = rho_at(schedule, epoch)
        policy = RoutingPolicy("train", rho)
        for xb, yb in dataio.batches(dataset, schedule.batch_size, seed, epoch):
            lr = lr_at(schedule, iteration)
            tau = tau_at(schedule, iteration)
            try:
                res = model.forward(xb, yb, policy, tau, gen)
            except (DomainError, NonFiniteError) as exc:
                record.status = "diverged"
                record.final = {"iteration": iteration, "epoch": epoch, "reason": str(exc)}
                raise DivergedRun(f"non-finite activations at iteration {iteration}: {exc}", record) from exc
            if check_invariants:
                check_routing_invariants(res.state, tree, "train", rho)
            cls = classification_loss(res.leaf_logits, res.leaf_rows, yb, len(yb))
            igl = ig_losses(res.joints, schedule.lambda_ig, schedule.lambda_balance)
            loss = total_loss(cls, igl)
            entry = {
                "iteration": iteration,
                "epoch": epoch,
                "lr": lr,
                "tau": tau,
                "rho": rho,
                "loss": float(loss.detach()),
                "classification_loss": float(cls.detach()),
                "ig": {
                    str(i): -float(v.detach()) / schedule.lambda_ig if schedule.lambda_ig else 0.0
                    for i, v in igl.items()
                },
                "starved": list(res.state.starved),
            }
            record.iterations.append(entry)
            if on_step is not None:
                on_step(entry, res)
            if not math.isfinite(entry["loss"]):
                record.status = "diverged"
                record.final = {"iteration": iteration, "epoch": epoch, "reason": "non-finite loss"}
                raise DivergedRun(f"loss became {entry['loss']} at iteration {iteration}", record)
            backward(loss, model.params)
            sgd_step(model.params, lr, schedule.momentum, decay)
            iteration += 1
        summary = {"epoch": epoch, "iterations": iteration}
        if test_set is not None and eval_every and ((epoch + 1) % eval_every == 0 or epoch + 1 == schedule.epochs):
            summary["test_accuracy"] = evaluate(model, test_set)["accuracy"]
        record.epochs.append(summary)
        log.info("epoch %d done in %.1fs: %s", epoch, time.perf_counter() - started, summary)
    record.status = "ok"
    record.final = {"iterations": iteration, "params": model.params.count()}
    if test_set is not None:
        record.final["test_accuracy"] = evaluate(model, test_set)["accuracy"]
    return TrainResult(record, model)


def grid_values(spec) -> list[float]:
    """Expand ``{"start", "stop", "step"}`` (inclusive) or pass through an explicit list."""
    if isinstance(spec, dict):
        start, stop, step = float(spec["start"]), float(spec["stop"]), float(spec["step"])
        if step <= 0 or stop < start:
            raise ValueError("grid needs step > 0 and stop >= start")
        count = int(round((stop - start) / step)) + 1
        values = [round(start + i * step, 12) for i in range(count)]
    else:
        values = [float(v) for v in spec]
    if not values:
        raise ValueError("empty grid")
    return values


@dataclass
class GridResult:
    axis: str
    rows: list[tuple[float, float]]
    best_value: float
    best_schedule: ScheduleSet


def grid_search(
    base: ScheduleSet,
    axis: str,
    grid,
    run: Callable[[ScheduleSet], float],
) -> GridResult:
    """One run per grid point; the value with the highest returned accuracy wins.

    Ties keep the earliest grid point.
    """
    if axis not in ScheduleSet.__dataclass_fields__:
        raise ValueError(f"{axis!r} is not a schedule field")
    values = grid_values(grid)
    rows = []
    for v in values:
        acc = float(run(base.replace(**{axis: v})))
        rows.append((v, acc))
        log.info("grid %s=%g -> %.4f", axis, v, acc)
    best_value = max(rows, key=lambda r: r[1])[0]
    return GridResult(axis, rows, best_value, base.replace(**{axis: best_value}))


def sequential_grid_search(
    base: ScheduleSet,
    axes: Sequence[tuple[str, object]],
    run: Callable[[ScheduleSet], float],
) -> list[GridResult]:
    """Optimize axes one at a time, fixing each winner before searching the next."""
    results = []
    current = base
    for axis, grid in axes:
        res = grid_search(current, axis, grid, run)
        results.append(res)
        current = res.best_schedule
    return results
