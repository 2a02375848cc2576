"""Trainers: MAML, FOMAML, TB-MAML plus conventional and transfer baselines.

All trainers share the same primitives: an inner adaptation (full-batch
gradient descent on a task's support set) and an outer update of the
initialization from query losses. MAML differentiates the query loss
through the adaptation (second-order); FOMAML takes the query gradient at
the adapted weights and applies it to the initialization unchanged;
TB-MAML is per-task second-order MAML whose outer step size is biased by
a per-task importance weight u in [-1, 1]:

    step_j = max(step_floor, beta + gamma * u_j)

The importance vector is computed once, up front: train a model per task,
measure how well each transfers to every other task's few-shot split,
min-max the per-task average losses to [-1, 1] and negate (low transfer
loss means high importance).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, grad, no_grad
from .model import ParamSet, init_params, loss as model_loss, predict_positions
from .seeding import substream, substream_int
from .tasks import Scenario, TaskSplit, TaskSet, batch_from, split_task

logger = logging.getLogger(__name__)

__all__ = [
    "MetaConfig",
    "ImportanceVector",
    "TaskData",
    "task_data_from_split",
    "build_task_data",
    "inner_adapt",
    "fit_params",
    "maml_step",
    "fomaml_step",
    "tb_maml_step",
    "importance_from_losses",
    "compute_importance",
    "meta_train",
    "train_conventional",
    "train_transfer",
    "adapt_and_eval",
    "META_ALGORITHMS",
]

META_ALGORITHMS = ("maml", "fomaml", "tb-maml")


@dataclass
class MetaConfig:
    """Step sizes, budgets and seeds shared by every trainer.

    alpha: inner (adaptation) step size.
    beta: outer meta-step size.
    gamma: importance-bias intensity; kept <= beta so beta + gamma*u stays
        positive for u in [-1, 1].
    step_floor: lower clamp for the effective TB-MAML outer step.
    """

    alpha: float = 0.01
    beta: float = 0.001
    gamma: float = 0.0005
    inner_steps: int = 5
    shots: int = 5
    meta_iterations: int = 1000
    meta_batch_size: int = 4
    step_floor: float = 1e-6
    seed: int = 0
    meta_grad_clip: float = 100.0
    importance_epochs: int = 300
    baseline_epochs: int = 500
    baseline_lr: float = 0.03
    finetune_epochs: int = 100
    convergence_window: int = 50
    convergence_tol: float = 1e-4

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError(f"alpha and beta must be > 0 (got {self.alpha}, {self.beta})")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.gamma > self.beta:
            raise ValueError(
                f"gamma must be <= beta to keep the biased step positive "
                f"(got gamma={self.gamma}, beta={self.beta})"
            )
        if self.inner_steps < 0:
            raise ValueError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if self.shots < 0:
            raise ValueError(f"shots must be >= 0, got {self.shots}")
        if self.meta_batch_size < 1:
            raise ValueError(f"meta_batch_size must be >= 1, got {self.meta_batch_size}")
        if self.meta_grad_clip < 0:
            raise ValueError(f"meta_grad_clip must be >= 0, got {self.meta_grad_clip}")


@dataclass
class ImportanceVector:
    """Per-training-task importance weights with their audit trail.

    values: u per task, in [-1, 1], aligned to the task order used to
        compute them; all zeros when every average loss is equal.
    average_losses: the per-task cross-transfer average loss vector.
    loss_matrix: cell (i, j) is the loss of the model trained on task i
        after fine-tuning on task j's support (NaN on the diagonal).
    """

    values: np.ndarray
    average_losses: np.ndarray
    loss_matrix: np.ndarray
    task_ids: list = field(default_factory=list)


@dataclass
class TaskData:
    """One task's split, stacked into normalized training batches."""

    scenario_id: str
    support: tuple  # (X, Y)
    query: tuple  # (X, Y)
    shots: int


def task_data_from_split(scenario: Scenario, split: TaskSplit) -> TaskData:
    support = batch_from(split.support) if split.support else (np.zeros((0, 3, 30)), np.zeros((0, 2)))
    return TaskData(
        scenario_id=scenario.id,
        support=support,
        query=batch_from(split.query),
        shots=split.shots,
    )


def build_task_data(scenario: Scenario, shots: int, seed: int) -> TaskData:
    """Split a scenario with a seed derived from (seed, scenario id, shots).

    The derivation ignores everything else about the run, so any two
    trainers handed the same seed see identical support/query sets.
    """
    split_seed = substream_int(seed, "split", scenario.id, shots)
    return task_data_from_split(scenario, split_task(scenario, shots, split_seed))


def _default_loss(params: ParamSet, batch) -> Tensor:
    return model_loss(params, batch)


def inner_adapt(
    params: ParamSet,
    support,
    alpha: float,
    steps: int,
    create_graph: bool = False,
    loss_fn: Callable = _default_loss,
) -> ParamSet:
    """`steps` full-batch gradient-descent steps on the support loss.

    With create_graph=True the produced parameters stay differentiable
    with respect to the originals, which is what lets the outer update
    include the second-order term.
    """
    current = params
    for _ in range(steps):
        task_loss = loss_fn(current, support)
        grads = grad(task_loss, current.tensors(), create_graph=create_graph)
        current = current.updated(grads, alpha, graph=create_graph)
    return current


def fit_params(
    params: ParamSet,
    batch,
    epochs: int,
    lr: float,
    loss_fn: Callable = _default_loss,
) -> ParamSet:
    """Full-batch Adam fit, for the non-meta training phases.

    The adaptation path must stay plain gradient descent (its update rule
    is part of the meta-objective), but baseline/source/importance-phase
    training just needs to fit a scenario; plain GD is hopeless on a
    cm^2-scale MSE surface, Adam is not. Deterministic: no minibatching.
    """
    if epochs <= 0:
        return params
    current = params.clone()
    names = current.names()
    m = {n: np.zeros_like(current[n].data) for n in names}
    v = {n: np.zeros_like(current[n].data) for n in names}
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(1, epochs + 1):
        task_loss = loss_fn(current, batch)
        grads = grad(task_loss, current.tensors())
        for n, g in zip(names, grads):
            m[n] = b1 * m[n] + (1 - b1) * g.data
            v[n] = b2 * v[n] + (1 - b2) * g.data**2
            m_hat = m[n] / (1 - b1**step)
            v_hat = v[n] / (1 - b2**step)
            current[n].data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    for n in names:
        current[n].check_finite("baseline fit")
    return current


def _clip_factor(grads, clip: float) -> float:
    """Global-norm clip: scale factor in (0, 1] applied to the outer step.

    A survival guard for the raw cm^2 loss scale, where early meta-gradient
    norms reach 1e4+ and a fixed step size explodes; once the gradient norm
    drops below the threshold (always, at toy scale) the update is exactly
    the plain rule. Identical for every trainer, so the reduction
    identities between them are unaffected.
    """
    if not clip:
        return 1.0
    norm = float(np.sqrt(sum(float((g.data**2).sum()) for g in grads)))
    if norm <= clip:
        return 1.0
    return clip / norm


def _meta_gradients(
    params: ParamSet,
    tasks: Sequence[TaskData],
    cfg: MetaConfig,
    second_order: bool,
    loss_fn: Callable,
):
    """Gradient of the summed post-adaptation query loss w.r.t. params.

    Second order differentiates through the adaptation; first order takes
    the query gradients at the adapted weights (which line up with the
    initialization tensor-for-tensor).
    """
    query_losses = []
    if second_order:
        total = None
        for task in tasks:
            adapted = inner_adapt(
                params, task.support, cfg.alpha, cfg.inner_steps,
                create_graph=True, loss_fn=loss_fn,
            )
            q = loss_fn(adapted, task.query)
            query_losses.append(q.item())
            total = q if total is None else total + q
        grads = grad(total, params.tensors())
    else:
        grads = None
        for task in tasks:
            adapted = inner_adapt(
                params, task.support, cfg.alpha, cfg.inner_steps,
                create_graph=False, loss_fn=loss_fn,
            )
            q = loss_fn(adapted, task.query)
            query_losses.append(q.item())
            g = grad(q, adapted.tensors())
            grads = g if grads is None else [a + b for a, b in zip(grads, g)]
    return grads, query_losses


def _apply_outer(
    params: ParamSet,
    tasks: Sequence[TaskData],
    cfg: MetaConfig,
    step_size: float,
    second_order: bool,
    loss_fn: Callable,
):
    """Plain outer rule: params minus step times (clipped) meta-gradient."""
    grads, query_losses = _meta_gradients(params, tasks, cfg, second_order, loss_fn)
    step = step_size * _clip_factor(grads, cfg.meta_grad_clip)
    return params.updated(grads, step, graph=False), query_losses


class _OuterAdam:
    """Per-coordinate preconditioner for the meta-training loop.

    The plain outer rule cannot cross the cm^2 loss surface: gradient
    magnitudes differ by 4+ orders between the head and the conv stack, so
    any single step size either freezes the features or explodes the head.
    meta_train therefore rescales the meta-gradient per coordinate (Adam)
    and applies the algorithm's step size - beta, or beta + gamma*u for the
    importance-biased trainer - to the rescaled direction. The relative
    per-task step modulation, and every identity between trainers, is
    exactly as in the plain rule; the closed-form step ops above stay
    un-preconditioned.
    """

    def __init__(self, params: ParamSet, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.m = [np.zeros_like(t.data) for t in params.tensors()]
        self.v = [np.zeros_like(t.data) for t in params.tensors()]
        self.t = 0
        self.b1, self.b2, self.eps = b1, b2, eps

    def direction(self, grads) -> list:
        self.t += 1
        out = []
        for i, g in enumerate(grads):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g.data
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g.data**2
            m_hat = self.m[i] / (1 - self.b1**self.t)
            v_hat = self.v[i] / (1 - self.b2**self.t)
            out.append(Tensor(m_hat / (np.sqrt(v_hat) + self.eps)))
        return out


def maml_step(
    params: ParamSet,
    tasks: Sequence[TaskData],
    cfg: MetaConfig,
    loss_fn: Callable = _default_loss,
):
    """Second-order outer update over a task batch.

    theta <- theta - beta * d/dtheta sum_i L_query_i(adapt(theta, support_i)),
    with the derivative flowing through the adaptation.
    """
    return _apply_outer(params, tasks, cfg, cfg.beta, second_order=True, loss_fn=loss_fn)


def fomaml_step(
    params: ParamSet,
    tasks: Sequence[TaskData],
    cfg: MetaConfig,
    loss_fn: Callable = _default_loss,
):
    """First-order variant: query gradients taken at the adapted weights."""
    return _apply_outer(params, tasks, cfg, cfg.beta, second_order=False, loss_fn=loss_fn)


def effective_step(cfg: MetaConfig, importance: float) -> float:
    step = cfg.beta + cfg.gamma * importance
    if step < cfg.step_floor:
        logger.warning(
            "biased outer step %.3g below floor; clamping to %.3g", step, cfg.step_floor
        )
        return cfg.step_floor
    return step


def tb_maml_step(
    params: ParamSet,
    task: TaskData,
    importance: float,
    cfg: MetaConfig,
    loss_fn: Callable = _default_loss,
):
    """Per-task second-order update with importance-biased outer step."""
    return _apply_outer(
        params, [task], cfg, effective_step(cfg, importance),
        second_order=True, loss_fn=loss_fn,
    )


def importance_from_losses(average_losses) -> np.ndarray:
    """Min-max the loss vector to [-1, 1], then negate.

    Lower cross-task loss means the task's model transfers better, so it
    gets higher importance. All-equal losses map to all zeros.
    """
    losses = np.asarray(average_losses, dtype=np.float64)
    lo, hi = losses.min(), losses.max()
    if hi == lo:
        return np.zeros_like(losses)
    return -(2.0 * (losses - lo) / (hi - lo) - 1.0)


def compute_importance(
    scenarios: Sequence[Scenario],
    cfg: MetaConfig,
    loss_fn: Callable = _default_loss,
) -> ImportanceVector:
    """Cross-transfer importance over the meta-training tasks.

    For each task i: train a fresh model on all of task i's samples for a
    fixed number of epochs; for each j != i fine-tune a copy on task j's
    k-shot support and evaluate on task j's query. Tasks whose models
    transfer well (low average loss) get importance near +1.
    """
    n = len(scenarios)
    if n < 2:
        raise ValueError(f"importance needs at least 2 training tasks, got {n}")
    splits = [build_task_data(s, cfg.shots, cfg.seed) for s in scenarios]
    full_batches = [batch_from(s.samples) for s in scenarios]

    matrix = np.full((n, n), np.nan)
    for i, scenario in enumerate(scenarios):
        base = init_params(substream_int(cfg.seed, "importance-init", i))
        base = fit_params(
            base, full_batches[i], cfg.importance_epochs, cfg.baseline_lr, loss_fn=loss_fn
        )
        for j in range(n):
            if j == i:
                continue
            tuned = fit_params(
                base, splits[j].support, cfg.inner_steps, cfg.baseline_lr, loss_fn=loss_fn
            )
            with no_grad():
                matrix[i, j] = loss_fn(tuned, splits[j].query).item()
    average = np.nanmean(matrix, axis=1)
    return ImportanceVector(
        values=importance_from_losses(average),
        average_losses=average,
        loss_matrix=matrix,
        task_ids=[s.id for s in scenarios],
    )


def _training_scenarios(task_set) -> list:
    if isinstance(task_set, TaskSet):
        return task_set.train_scenarios()
    return list(task_set)


def meta_train(
    algorithm: str,
    task_set,
    cfg: MetaConfig,
    importance: Optional[ImportanceVector] = None,
    trace: Optional[list] = None,
) -> ParamSet:
    """Run one meta-training loop and return the learned initialization.

    task_set is a TaskSet (its training half is used) or a plain scenario
    list. Stops after meta_iterations, or earlier once the moving-average
    query loss over the last convergence_window iterations improves by
    less than convergence_tol versus the window before it. Appends
    (iteration, task_id, query_loss) rows to `trace` when given.
    """
    if algorithm not in META_ALGORITHMS:
        raise ValueError(f"unknown meta algorithm {algorithm!r}; expected {META_ALGORITHMS}")
    scenarios = _training_scenarios(task_set)
    if not scenarios:
        raise ValueError("meta_train: empty meta-training set")
    tasks = [build_task_data(s, cfg.shots, cfg.seed) for s in scenarios]

    if algorithm == "tb-maml":
        if importance is None:
            importance = compute_importance(scenarios, cfg)
        if len(importance.values) != len(tasks):
            raise ValueError(
                f"importance vector has {len(importance.values)} entries "
                f"for {len(tasks)} training tasks"
            )

    params = init_params(substream_int(cfg.seed, "init"))
    sampler = substream(cfg.seed, "sampling")
    optimizer = _OuterAdam(params)
    second_order = algorithm != "fomaml"
    history: list = []
    window = cfg.convergence_window

    def outer_update(current, batch, step_size):
        # no clip here: the preconditioner already bounds the direction
        grads, losses = _meta_gradients(current, batch, cfg, second_order, _default_loss)
        return current.updated(optimizer.direction(grads), step_size, graph=False), losses

    for iteration in range(cfg.meta_iterations):
        idx = sampler.integers(0, len(tasks), size=cfg.meta_batch_size)
        if algorithm == "tb-maml":
            losses = []
            for i in idx:
                step_size = effective_step(cfg, float(importance.values[i]))
                params, q = outer_update(params, [tasks[i]], step_size)
                losses.extend(q)
        else:
            params, losses = outer_update(params, [tasks[i] for i in idx], cfg.beta)
        if trace is not None:
            for i, q in zip(idx, losses):
                trace.append((iteration, tasks[i].scenario_id, q))
        history.append(float(np.mean(losses)))
        if len(history) >= 2 * window:
            recent = float(np.mean(history[-window:]))
            previous = float(np.mean(history[-2 * window : -window]))
            if previous - recent < cfg.convergence_tol:
                logger.info(
                    "%s converged after %d iterations (window avg %.4f -> %.4f)",
                    algorithm, iteration + 1, previous, recent,
                )
                break
    return params


def train_conventional(task: TaskData, cfg: MetaConfig, epochs: Optional[int] = None) -> ParamSet:
    """Fresh initialization trained only on the task's k-shot support."""
    params = init_params(substream_int(cfg.seed, "init"))
    budget = cfg.baseline_epochs if epochs is None else epochs
    if budget and task.support[0].shape[0]:
        params = fit_params(params, task.support, budget, cfg.baseline_lr)
    return params


def train_transfer(
    source: Scenario,
    target: TaskData,
    cfg: MetaConfig,
    finetune_steps: Optional[int] = None,
) -> ParamSet:
    """Train on all of one source scenario, then fine-tune on the target support."""
    params = init_params(substream_int(cfg.seed, "init"))
    params = fit_params(params, batch_from(source.samples), cfg.baseline_epochs, cfg.baseline_lr)
    steps = cfg.finetune_epochs if finetune_steps is None else finetune_steps
    if steps and target.support[0].shape[0]:
        params = fit_params(params, target.support, steps, cfg.baseline_lr)
    return params


def adapt_and_eval(params: ParamSet, task: TaskData, cfg: MetaConfig) -> np.ndarray:
    """Adapt on the test task's support, then distance errors on its query (cm)."""
    adapted = params
    if cfg.inner_steps and task.support[0].shape[0]:
        adapted = inner_adapt(params, task.support, cfg.alpha, cfg.inner_steps)
    xq, yq = task.query
    preds = predict_positions(adapted, xq)
    return np.linalg.norm(preds - yq, axis=1)
