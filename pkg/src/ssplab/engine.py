"""Alternating search loop: an SGD epoch on shared weights, then REINFORCE steps on the controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ssplab.autodiff import AdamConfig, AdamState, SgdConfig, Tensor, adam_step, backward, no_grad, sgd_step, zero_grad
from ssplab.autodiff import functional as F
from ssplab.controller import (
    ControllerConfig,
    ControllerParams,
    RewardBaseline,
    reinforce_loss,
    sample_batch,
    update_baseline,
)
from ssplab.datasets import DataError, LabeledImageSet, iterate_minibatches
from ssplab.ops import Mode
from ssplab.search_space import SearchSpace
from ssplab.supergraph import ArchitectureDecision, SharedParamStore, child_forward, instantiate_child

METRICS_HEADER = "epoch,train_loss,valid_error,test_error,controller_entropy,baseline,poison_fraction"
RNG_STREAMS = ("shuffle", "sample", "dropout", "controller", "valid", "derive")


@dataclass(frozen=True)
class EngineConfig:
    num_layers: int = 12
    out_filters: int = 36
    batch_size: int = 128
    keep_prob: float = 0.9
    sgd: SgdConfig = SgdConfig()
    adam: AdamConfig = AdamConfig()
    controller: ControllerConfig = ControllerConfig()
    controller_train_steps: int = 50
    controller_num_aggregate: int = 20
    controller_train_every: int = 1
    eval_batch_size: int = 250
    derive_candidates: int = 10
    flip: bool = False


@dataclass
class TrainState:
    store: SharedParamStore
    theta: ControllerParams
    baseline: RewardBaseline
    epoch: int
    rngs: dict[str, np.random.Generator]
    velocity: dict = field(default_factory=dict)
    adam_state: AdamState = field(default_factory=AdamState)
    adam_steps: int = 0
    # per-epoch scratch filled by the two phases
    last_poison_fraction: float = float("nan")
    last_mean_reward: float = float("nan")
    last_entropy: float = float("nan")


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    valid_error_pct: float
    test_error_pct: float | None
    controller_entropy: float
    baseline: float
    sampled_poison_fraction: float

    def __post_init__(self):
        for name in ("valid_error_pct", "test_error_pct"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")

    def csv_row(self) -> str:
        test = "" if self.test_error_pct is None else f"{self.test_error_pct:.6f}"
        return (
            f"{self.epoch},{self.train_loss:.6f},{self.valid_error_pct:.6f},{test},"
            f"{self.controller_entropy:.6f},{self.baseline:.6f},{self.sampled_poison_fraction:.6f}"
        )


def init_state(space: SearchSpace, cfg: EngineConfig, num_classes: int, in_channels: int, seed: int) -> TrainState:
    store = SharedParamStore(
        space, cfg.num_layers, cfg.out_filters, num_classes, in_channels, seed=seed, keep_prob=cfg.keep_prob
    )
    theta = ControllerParams(space.num_slots, cfg.controller, seed=seed)
    rngs = {name: np.random.default_rng([seed, i]) for i, name in enumerate(RNG_STREAMS)}
    return TrainState(store, theta, RewardBaseline(0.0, cfg.controller.bl_dec), 0, rngs)


def _unique(params: list[Tensor]) -> list[Tensor]:
    seen, out = set(), []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def train_shared_epoch(state: TrainState, space: SearchSpace, train: LabeledImageSet, cfg: EngineConfig) -> float:
    """One pass over ``train``; each minibatch trains a freshly sampled child with SGD."""
    if len(train) == 0:
        raise DataError("training split is empty")
    losses = []
    poison_mask = space.poison_mask()
    poison_count = total_ops = 0
    batches = iterate_minibatches(train, cfg.batch_size, state.rngs["shuffle"], cfg.flip)
    for images, labels in batches:
        with no_grad():
            trace = sample_batch(state.theta, space, cfg.num_layers, state.rngs["sample"], 1)[0]
        slots = np.asarray(trace.decision.op_slot_per_layer)
        poison_count += int(poison_mask[slots].sum())
        total_ops += len(slots)
        net = instantiate_child(state.store, space, trace.decision, cfg.num_layers, cfg.out_filters)
        params = _unique(net.parameters())
        zero_grad(params)
        logits = child_forward(net, Tensor(images), Mode.TRAIN, state.rngs["dropout"])
        loss = F.cross_entropy(logits, labels)
        if not math.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss at epoch {state.epoch} for {trace.decision.describe()}")
        backward(loss)
        sgd_step(params, [p.grad for p in params], state.epoch, cfg.sgd, state.velocity)
        losses.append(loss.item())
    state.last_poison_fraction = poison_count / total_ops
    return float(np.mean(losses))


def _valid_batches(state: TrainState, valid: LabeledImageSet, batch_size: int):
    while True:
        yield from iterate_minibatches(valid, batch_size, state.rngs["valid"])


def child_accuracy(net, images: np.ndarray, labels: np.ndarray, cache: dict | None = None) -> float:
    with no_grad():
        logits = child_forward(net, Tensor(images), Mode.EVAL, cache=cache)
    return float(np.mean(np.argmax(logits.data, axis=1) == labels))


def train_controller_phase(
    state: TrainState,
    space: SearchSpace,
    valid: LabeledImageSet,
    cfg: EngineConfig,
    reward_fn: Callable[[ArchitectureDecision], float] | None = None,
) -> None:
    """Adam steps on the controller with shared weights frozen.

    Each step samples ``controller_num_aggregate`` children and rewards each
    with its accuracy on one shared validation minibatch. ``reward_fn``
    replaces that reward (used to test the policy-gradient loop in isolation).
    """
    if reward_fn is None and len(valid) == 0:
        raise DataError("validation split is empty")
    ccfg = cfg.controller
    params = state.theta.parameters()
    batches = _valid_batches(state, valid, cfg.batch_size) if reward_fn is None else None
    rewards_seen, entropies = [], []
    for _ in range(cfg.controller_train_steps):
        traces = sample_batch(state.theta, space, cfg.num_layers, state.rngs["controller"], cfg.controller_num_aggregate)
        if reward_fn is None:
            images, labels = next(batches)
            cache: dict = {}
            rewards = []
            for tr in traces:
                net = instantiate_child(state.store, space, tr.decision, cfg.num_layers, cfg.out_filters)
                rewards.append(child_accuracy(net, images, labels, cache))
        else:
            rewards = [float(reward_fn(tr.decision)) for tr in traces]
        state.baseline = update_baseline(state.baseline, float(np.mean(rewards)))
        zero_grad(params)
        loss = reinforce_loss(
            traces, rewards, state.baseline, ccfg.skip_target, ccfg.skip_weight, ccfg.entropy_weight
        )
        backward(loss)
        state.adam_steps += 1
        adam_step(params, [p.grad for p in params], state.adam_steps, state.adam_state, cfg.adam)
        rewards_seen.extend(rewards)
        entropies.extend(tr.entropy for tr in traces)
    state.last_mean_reward = float(np.mean(rewards_seen)) if rewards_seen else float("nan")
    state.last_entropy = float(np.mean(entropies)) if entropies else float("nan")


def evaluate(
    state: TrainState, space: SearchSpace, decision: ArchitectureDecision, dataset: LabeledImageSet, batch_size: int = 250
) -> float:
    """Error percentage of ``decision`` under eval mode and the current shared weights."""
    if len(dataset) == 0:
        raise DataError(f"{dataset.split} split is empty")
    net = instantiate_child(state.store, space, decision, state.store.num_layers, state.store.out_filters)
    correct = 0
    for images, labels in iterate_minibatches(dataset, batch_size):
        correct += child_accuracy(net, images, labels) * len(labels)
    return 100.0 * (1.0 - correct / len(dataset))


def derive_final(
    state: TrainState,
    space: SearchSpace,
    valid: LabeledImageSet,
    test: LabeledImageSet,
    n_candidates: int = 10,
    batch_size: int = 250,
) -> tuple[ArchitectureDecision, float, float]:
    """Best of ``n_candidates`` sampled architectures by validation error, with its test error."""
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    with no_grad():
        traces = sample_batch(state.theta, space, state.store.num_layers, state.rngs["derive"], n_candidates)
    scored = [(evaluate(state, space, tr.decision, valid, batch_size), i) for i, tr in enumerate(traces)]
    best_err, best = min(scored)
    decision = traces[best].decision
    return decision, best_err, evaluate(state, space, decision, test, batch_size)


def run_epoch(
    state: TrainState,
    space: SearchSpace,
    train: LabeledImageSet,
    valid: LabeledImageSet,
    cfg: EngineConfig,
) -> EpochMetrics:
    loss = train_shared_epoch(state, space, train, cfg)
    if (state.epoch + 1) % cfg.controller_train_every == 0:
        train_controller_phase(state, space, valid, cfg)
    metrics = EpochMetrics(
        epoch=state.epoch,
        train_loss=loss,
        valid_error_pct=100.0 * (1.0 - state.last_mean_reward),
        test_error_pct=None,
        controller_entropy=state.last_entropy,
        baseline=state.baseline.value,
        sampled_poison_fraction=state.last_poison_fraction,
    )
    state.epoch += 1
    return metrics


def moving_average(series: list[float], window: int = 20) -> list[float]:
    """Trailing mean over at most ``window`` points."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(series) == 0:
        raise ValueError("series is empty")
    sums = np.concatenate([[0.0], np.cumsum(np.asarray(series, dtype=np.float64))])
    idx = np.arange(len(series))
    lo = np.maximum(0, idx - window + 1)
    return list((sums[idx + 1] - sums[lo]) / (idx + 1 - lo))


def write_metrics_csv(path, rows: list[EpochMetrics]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(row.csv_row() + "\n")
