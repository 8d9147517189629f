"""Optimization loop: AdamW, warm-up schedule, accumulation, clipping and early stopping."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from glucose_iit.alignment import (
    AlignmentMap,
    CounterfactualOracle,
    Example,
    InterventionSample,
    LintRecord,
    LossWeights,
    TauMap,
    TrainingMode,
    append_lint_log,
    l_int_step,
    loss_coefficients,
    site_sampler,
)
from glucose_iit.cohort import DatasetSplit, StandardizationStats, build_features
from glucose_iit.errors import DivergedLoss, EmptySet, NonFiniteGradient
from glucose_iit.glucose_model import ModelVariant
from glucose_iit.neural import (
    Architecture,
    ModuleNetwork,
    NetworkSpec,
    ParameterGradients,
    backward,
    init,
    zero_gradients,
)
from glucose_iit.simulation import ScenarioSettings, cgm_history, simulate_target

logger = logging.getLogger(__name__)

ACCUMULATION_NOTE = (
    "gradients are mean-reduced over each accumulation window "
    "(grad_accumulation_steps micro-batches of batch_size patients)"
)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(default=2, ge=2, le=2)
    grad_accumulation_steps: int = Field(default=20, gt=0)
    max_epochs: int = Field(default=300, gt=0)
    early_stop_patience: int = Field(default=20, gt=0)
    clip_max_norm: float = Field(default=1.0, gt=0)
    warmup_fraction: float = Field(default=0.1, ge=0, le=1)
    lr: float = Field(default=0.01, gt=0)
    eps: float = Field(default=1e-6, gt=0)
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = Field(default=0.01, ge=0)
    mode: TrainingMode = TrainingMode.IIT
    ph: int = Field(default=30, gt=0)
    variant: ModelVariant = ModelVariant.AMENDED
    architecture: Architecture = Architecture.TREE
    hidden_size: int = Field(default=256, gt=0)
    leaky_slope: float = Field(default=0.01, gt=0)
    dropout: float = Field(default=0.3, ge=0, lt=1)
    tau_scale: float = Field(default=0.01, gt=0)
    loss_weights: LossWeights = LossWeights()
    excluded_sites: tuple[str, ...] = ("X7",)
    fixed_site: str | None = None

    @model_validator(mode="after")
    def _patience(self) -> "TrainConfig":
        if self.early_stop_patience >= self.max_epochs:
            raise ValueError("early_stop_patience must be smaller than max_epochs")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        return self

    @property
    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            architecture=self.architecture,
            hidden_size=self.hidden_size,
            leaky_slope=self.leaky_slope,
            dropout=self.dropout,
        )

    @property
    def tau(self) -> TauMap:
        return TauMap(self.tau_scale)

    def alignment(self) -> AlignmentMap:
        return AlignmentMap.for_architecture(self.architecture, self.excluded_sites)


@dataclass
class OptimizerState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr_t: float,
    *,
    betas: tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-6,
    weight_decay: float = 0.01,
) -> OptimizerState:
    """
    One AdamW update, in place on `params`.

    Decay is decoupled and applied first (p ← p − lr_t·wd·p); the Adam
    step then uses bias-corrected moments.

    Raises:
        NonFiniteGradient: Before any parameter is touched.
    """
    if lr_t < 0:
        raise ValueError("learning rate must be nonnegative")
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(name)
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, param in params.items():
        grad = grads[name]
        m = state.first_moment.setdefault(name, np.zeros_like(param))
        v = state.second_moment.setdefault(name, np.zeros_like(param))
        param *= 1.0 - lr_t * weight_decay
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        param -= lr_t * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear 0 → base_lr over the warm-up steps, then linear decay to 0 at `total_steps`."""
    if total_steps <= 0:
        return 0.0
    step = min(max(step, 0), total_steps)
    warmup = int(round(warmup_fraction * total_steps))
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * (total_steps - step) / max(total_steps - warmup, 1)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> ParameterGradients:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


@dataclass
class WindowAccumulator:
    """
    Sums of task and L_INT gradients over one accumulation window.

    The window's loss is causal·mean(L_INT) + task·mean(task squared error),
    so gradients are divided by the window's counts, not by the number of
    micro-batches.
    """

    task_grads: ParameterGradients
    lint_grads: ParameterGradients
    task_sse: float = 0.0
    task_count: int = 0
    lint: LintRecord = field(default_factory=LintRecord)

    @classmethod
    def empty(cls, net: ModuleNetwork) -> "WindowAccumulator":
        return cls(zero_gradients(net), zero_gradients(net))

    def loss(self, coefficients: tuple[float, float]) -> float:
        causal, task = coefficients
        task_mse = self.task_sse / self.task_count if self.task_count else 0.0
        return causal * self.lint.l_int + task * task_mse

    def gradients(self, coefficients: tuple[float, float]) -> ParameterGradients:
        causal, task = coefficients
        task_scale = task / self.task_count if self.task_count else 0.0
        lint_scale = causal / self.lint.total_count if self.lint.total_count else 0.0
        return {
            name: task_scale * self.task_grads[name] + lint_scale * self.lint_grads[name]
            for name in self.task_grads
        }


def _add(into: ParameterGradients, grads: ParameterGradients) -> None:
    for name, g in grads.items():
        into[name] += g


def intervention_pairs(
    batch: Sequence[Example], site: str, alignment: AlignmentMap
) -> list[InterventionSample]:
    """Consecutive patients form a pair, used in both orderings."""
    pairs = []
    for a, b in zip(batch[0::2], batch[1::2]):
        pairs.append(InterventionSample.create(a, b, site, alignment))
        pairs.append(InterventionSample.create(b, a, site, alignment))
    return pairs


def accumulate_micro_batch(
    window: WindowAccumulator,
    net: ModuleNetwork,
    batch: Sequence[Example],
    oracle: CounterfactualOracle,
    config: TrainConfig,
    alignment: AlignmentMap,
    dropout_rng: np.random.Generator,
    site_rng: np.random.Generator,
) -> None:
    """Forward and backward for one micro-batch; adds its sums to `window`."""
    tau = config.tau
    for example in batch:
        trace = net.forward(example.features, "train", rng=dropout_rng)
        residual = trace.prediction - tau(example.target_bg)
        window.task_sse += residual * residual
        window.task_count += 1
        _add(window.task_grads, backward(trace, 2.0 * residual))
    if len(batch) < 2:
        return
    site = config.fixed_site or site_sampler(alignment, site_rng)
    record, residuals = l_int_step(
        net, intervention_pairs(batch, site, alignment), oracle, dropout_rng, "train"
    )
    window.lint.merge(record)
    if loss_coefficients(config.mode, config.loss_weights)[0] > 0:
        for item in residuals:
            _add(window.lint_grads, backward(item.trace, 2.0 * item.residual))


@dataclass(frozen=True)
class ExampleSplit:
    train: list[Example]
    validation: list[Example]
    test: list[Example]


def make_examples(
    patients: Iterable,
    stats: StandardizationStats,
    ph: float,
    variant: ModelVariant,
    settings: ScenarioSettings = ScenarioSettings(),
    targets: Mapping[str, float] | None = None,
) -> list[Example]:
    """Features and task targets; `targets` (patient id → BG) skips the simulation."""
    examples = []
    for patient in patients:
        scenario = settings.scenario_for(patient)
        cgm = cgm_history(patient, scenario, settings.dt)
        if targets is not None and patient.id in targets:
            target = targets[patient.id]
        else:
            target = simulate_target(patient, scenario, ph, variant, settings.dt)
        examples.append(Example(patient, build_features(patient, cgm, scenario, stats), target))
    return examples


def prepare_examples(
    split: DatasetSplit,
    ph: float,
    variant: ModelVariant,
    settings: ScenarioSettings = ScenarioSettings(),
    targets: Mapping[str, float] | None = None,
) -> tuple[ExampleSplit, StandardizationStats]:
    """Standardize every partition with statistics of the training partition."""
    stats = StandardizationStats.from_patients(split.train)
    build = lambda ps: make_examples(ps, stats, ph, variant, settings, targets)  # noqa: E731
    return ExampleSplit(build(split.train), build(split.validation), build(split.test)), stats


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    validation_mse: float
    lint: LintRecord

    @property
    def l_int(self) -> float:
        return self.lint.l_int


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def last_epoch(self) -> int:
        return self.epochs[-1].epoch if self.epochs else 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "epoch": r.epoch,
                    "train_loss": r.train_loss,
                    "validation_mse": r.validation_mse,
                    "l_int": r.l_int,
                    "best": r.epoch == self.best_epoch,
                }
                for r in self.epochs
            ]
        )

    def to_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False)


def validation_mse(net: ModuleNetwork, examples: Sequence[Example], tau: TauMap) -> float:
    """Task MSE on the network's output scale, dropout off."""
    if not examples:
        raise EmptySet("validation partition is empty")
    errors = [net.forward(e.features, "eval").prediction - tau(e.target_bg) for e in examples]
    return float(np.mean(np.square(errors)))


def train(
    config: TrainConfig,
    data: ExampleSplit,
    seed: int,
    *,
    settings: ScenarioSettings = ScenarioSettings(),
    oracle: CounterfactualOracle | None = None,
    lint_log_path: str | Path | None = None,
) -> tuple[ModuleNetwork, TrainLog]:
    """
    Train one network and return it restored to its best-validation checkpoint.

    Data order, dropout masks and intervention sites each draw from their own
    stream spawned from `seed`, so two calls with the same arguments give the
    same log and the same parameters.

    Raises:
        DivergedLoss: If an epoch's training loss is not finite.
        EmptySet: If the training or validation partition is empty.
    """
    if not data.train:
        raise EmptySet("training partition is empty")
    net = init(config.network_spec, seed)
    alignment = config.alignment()
    oracle = oracle or CounterfactualOracle(config.variant, config.ph, config.tau, settings)
    order_rng, dropout_rng, site_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    )
    coefficients = loss_coefficients(config.mode, config.loss_weights)

    n_batches = math.ceil(len(data.train) / config.batch_size)
    windows_per_epoch = math.ceil(n_batches / config.grad_accumulation_steps)
    total_steps = windows_per_epoch * config.max_epochs
    state = OptimizerState()
    log = TrainLog()
    best_mse = math.inf
    best_params = net.snapshot()
    if lint_log_path is not None:
        Path(lint_log_path).unlink(missing_ok=True)

    for epoch in range(1, config.max_epochs + 1):
        order = order_rng.permutation(len(data.train))
        batches = [
            [data.train[i] for i in order[k : k + config.batch_size]]
            for k in range(0, len(order), config.batch_size)
        ]
        epoch_lint = LintRecord()
        window_losses = []
        for start in range(0, len(batches), config.grad_accumulation_steps):
            window = WindowAccumulator.empty(net)
            for batch in batches[start : start + config.grad_accumulation_steps]:
                accumulate_micro_batch(
                    window, net, batch, oracle, config, alignment, dropout_rng, site_rng
                )
            window_losses.append(window.loss(coefficients))
            epoch_lint.merge(window.lint)
            grads = clip_gradients(window.gradients(coefficients), config.clip_max_norm)
            lr_t = lr_schedule(state.step, total_steps, config.lr, config.warmup_fraction)
            adamw_step(
                state,
                net.parameters(),
                grads,
                lr_t,
                betas=config.betas,
                eps=config.eps,
                weight_decay=config.weight_decay,
            )
        train_loss = float(np.mean(window_losses))
        if not math.isfinite(train_loss):
            raise DivergedLoss(epoch)
        val_mse = validation_mse(net, data.validation, config.tau)
        log.epochs.append(EpochRecord(epoch, train_loss, val_mse, epoch_lint))
        if lint_log_path is not None and epoch_lint.total_count:
            append_lint_log(epoch_lint, lint_log_path, epoch, config.tau)
        logger.debug(
            "epoch %d: train %.6g, validation %.6g, L_INT %.6g",
            epoch,
            train_loss,
            val_mse,
            epoch_lint.l_int,
        )
        if val_mse < best_mse:
            best_mse = val_mse
            log.best_epoch = epoch
            best_params = net.snapshot()
        elif epoch - log.best_epoch >= config.early_stop_patience:
            log.stopped_early = True
            logger.info("Early stop at epoch %d (best %d)", epoch, log.best_epoch)
            break

    net.restore(best_params)
    return net, log


class MatrixCell(BaseModel):
    """One (variant, architecture, hidden size, PH, mode, seed) training run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    variant: ModelVariant
    architecture: Architecture
    hidden_size: int
    ph: int
    mode: TrainingMode
    seed: int

    @property
    def run_id(self) -> str:
        return (
            f"{self.variant.value}-{self.architecture.value}{self.hidden_size}"
            f"-ph{self.ph}-{self.mode.value}-s{self.seed}"
        )


def expand_grid(
    variants: Sequence[ModelVariant],
    architectures: Sequence[Architecture],
    hidden_sizes: Sequence[int],
    phs: Sequence[int],
    modes: Sequence[TrainingMode],
    seeds: Sequence[int],
) -> list[MatrixCell]:
    return [
        MatrixCell(variant=v, architecture=a, hidden_size=h, ph=p, mode=m, seed=s)
        for v, a, h, p, m, s in product(variants, architectures, hidden_sizes, phs, modes, seeds)
    ]


@dataclass(frozen=True)
class CellOutcome:
    cell: MatrixCell
    result: object | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _run_cell(runner: Callable[[MatrixCell], object], cell: MatrixCell) -> CellOutcome:
    try:
        return CellOutcome(cell, runner(cell))
    except Exception as exc:  # noqa: BLE001
        logger.warning("Cell %s failed: %s", cell.run_id, exc)
        return CellOutcome(cell, error=f"{type(exc).__name__}: {exc}")


def run_matrix(
    cells: Sequence[MatrixCell],
    runner: Callable[[MatrixCell], object],
    workers: int = 1,
) -> list[CellOutcome]:
    """
    Run every cell, isolating failures; outcomes keep the order of `cells`.

    With workers > 1 cells run in separate processes, so `runner` must be
    picklable (a module-level function or a functools.partial of one).
    """
    if workers <= 1:
        outcomes = [_run_cell(runner, cell) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_cell, [runner] * len(cells), cells))
    failed = sum(not o.ok for o in outcomes)
    logger.info("Matrix finished: %d cells, %d failed", len(outcomes), failed)
    return outcomes
