"""LSTM policy over macro architectures, trained with REINFORCE.

For every child layer the controller runs two LSTM steps: the first emits
logits over search-space slots, the second (fed the chosen slot's embedding)
scores skip connections to every earlier layer by additive attention against
the stored per-layer anchors. Samples are drawn for a whole batch at once so
that the log-probabilities of an aggregate share one graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ssplab.autodiff import Tensor, concat, parameter, where
from ssplab.autodiff import functional as F
from ssplab.search_space import SearchSpace
from ssplab.supergraph import ArchitectureDecision


@dataclass(frozen=True)
class ControllerConfig:
    lstm_size: int = 64
    tanh_constant: float | None = 1.5
    op_tanh_reduce: float = 2.5
    skip_target: float = 0.4
    skip_weight: float = 0.8
    entropy_weight: float = 0.0001
    bl_dec: float = 0.99
    init_range: float = 0.1


class ControllerParams:
    """Trainable controller state bound to one search space's slot count."""

    def __init__(self, num_slots: int, cfg: ControllerConfig = ControllerConfig(), seed: int = 0):
        if num_slots < 1:
            raise ValueError("controller needs at least one slot")
        self.num_slots = num_slots
        self.cfg = cfg
        hsz, r = cfg.lstm_size, cfg.init_range
        rng = np.random.default_rng([seed, 17])

        def uniform(*shape):
            return parameter(rng.uniform(-r, r, shape))

        self.params: dict[str, Tensor] = {
            "lstm_w_input": uniform(hsz, 4 * hsz),
            "lstm_w_hidden": uniform(hsz, 4 * hsz),
            "lstm_bias": parameter(np.zeros(4 * hsz)),
            "op_embed": uniform(num_slots + 1, hsz),
            # zero head: every slot starts equally likely
            "op_head_w": parameter(np.zeros((hsz, num_slots))),
            "op_head_b": parameter(np.zeros(num_slots)),
            "attn_query": uniform(hsz, hsz),
            "attn_key": uniform(hsz, hsz),
            "attn_v": uniform(hsz, 1),
        }

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def check_bound(self, space: SearchSpace) -> None:
        if space.num_slots != self.num_slots or self.params["op_head_b"].shape != (space.num_slots,):
            raise ValueError(
                f"controller head has {self.num_slots} outputs but the space has {space.num_slots} slots"
            )

    def records(self) -> dict[str, np.ndarray]:
        return {f"controller/{k}": v.data for k, v in self.params.items()}

    def load_records(self, records: dict[str, np.ndarray]) -> None:
        for key, value in records.items():
            name = key.split("/", 1)[1]
            target = self.params[name]
            if value.shape != target.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != {target.shape}")
            target.data = value.astype(target.data.dtype)


@dataclass
class _SampleBatch:
    log_prob: Tensor  # (B,)
    skip_scores: Tensor | None  # (B, number of skip decisions)


@dataclass
class SampleTrace:
    decision: ArchitectureDecision
    log_prob: float
    entropy: float
    skip_probs: np.ndarray
    _batch: _SampleBatch = field(repr=False, default=None)
    _index: int = field(repr=False, default=0)

    def log_prob_tensor(self) -> Tensor:
        return self._batch.log_prob[self._index]


@dataclass(frozen=True)
class RewardBaseline:
    value: float = 0.0
    decay: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("baseline decay must lie in (0, 1)")


def update_baseline(baseline: RewardBaseline, batch_mean_reward: float) -> RewardBaseline:
    value = baseline.decay * baseline.value + (1.0 - baseline.decay) * batch_mean_reward
    return RewardBaseline(value, baseline.decay)


def shape_op_logits(raw: Tensor, cfg: ControllerConfig) -> Tensor:
    if cfg.tanh_constant is None:
        return raw
    return (raw * (1.0 / cfg.op_tanh_reduce)).tanh() * cfg.tanh_constant


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs.astype(np.float64), axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((cdf <= u[:, None]).sum(axis=1), probs.shape[1] - 1)


def _op_step(theta: ControllerParams, hidden: Tensor) -> Tensor:
    p = theta.params
    return shape_op_logits(hidden @ p["op_head_w"] + p["op_head_b"], theta.cfg)


def op_distribution(theta: ControllerParams, num_layers: int = 1) -> Tensor:
    """Slot probabilities at layer 0 (does not depend on any sampled decision)."""
    p = theta.params
    hsz = theta.cfg.lstm_size
    zeros = Tensor(np.zeros((1, hsz)))
    x = p["op_embed"][np.array([theta.num_slots])]
    h, _ = F.lstm_cell(x, zeros, zeros, p["lstm_w_input"], p["lstm_w_hidden"], p["lstm_bias"])
    return F.softmax(_op_step(theta, h), axis=1)[0]


def sample_batch(
    theta: ControllerParams, space: SearchSpace, num_layers: int, rng: np.random.Generator, n: int
) -> list[SampleTrace]:
    """Draw ``n`` architectures; each trace keeps a differentiable handle on its log-probability."""
    theta.check_bound(space)
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    p = theta.params
    hsz = theta.cfg.lstm_size
    zeros = Tensor(np.zeros((n, hsz)))
    h, c = zeros, zeros
    x = p["op_embed"][np.full(n, theta.num_slots)]
    rows = np.arange(n)

    log_prob = Tensor(np.zeros(n))
    entropy = np.zeros(n)
    slots = np.zeros((n, num_layers), dtype=np.int64)
    masks: list[np.ndarray] = []
    scores: list[Tensor] = []
    anchors: list[Tensor] = []
    anchor_keys: list[Tensor] = []

    for layer in range(num_layers):
        h, c = F.lstm_cell(x, h, c, p["lstm_w_input"], p["lstm_w_hidden"], p["lstm_bias"])
        logp = F.log_softmax(_op_step(theta, h), axis=1)
        probs = np.exp(logp.data.astype(np.float64))
        choice = _categorical(probs, rng)
        slots[:, layer] = choice
        log_prob = log_prob + logp[rows, choice]
        entropy += -(probs * logp.data).sum(axis=1)

        op_emb = p["op_embed"][choice]
        h, c = F.lstm_cell(op_emb, h, c, p["lstm_w_input"], p["lstm_w_hidden"], p["lstm_bias"])
        if layer == 0:
            masks.append(np.zeros((n, 0), dtype=bool))
            x = op_emb
        else:
            query = h @ p["attn_query"]
            score = concat(
                [((key + query).tanh() @ p["attn_v"]) for key in anchor_keys], axis=1
            )  # (n, layer)
            sp = F.sigmoid(score).data.astype(np.float64)
            mask = rng.random(sp.shape) < sp
            masks.append(mask)
            scores.append(score)
            log_prob = log_prob + where(mask, F.log_sigmoid(score), F.log_sigmoid(-score)).sum(axis=1)
            q = np.clip(sp, 1e-12, 1 - 1e-12)
            entropy += -(q * np.log(q) + (1 - q) * np.log(1 - q)).sum(axis=1)
            count = mask.sum(axis=1, keepdims=True).astype(np.float64)
            weights = Tensor(mask / np.maximum(count, 1.0))
            pooled = None
            for j, anchor in enumerate(anchors):
                term = anchor * weights[:, j : j + 1]
                pooled = term if pooled is None else pooled + term
            x = where(count > 0, pooled, op_emb)
        anchors.append(h)
        anchor_keys.append(h @ p["attn_key"])

    skip_scores = concat(scores, axis=1) if scores else None
    batch = _SampleBatch(log_prob, skip_scores)
    skip_prob_data = F.sigmoid(skip_scores).data if skip_scores is not None else np.zeros((n, 0))
    traces = []
    for b in range(n):
        decision = ArchitectureDecision.build(slots[b], [m[b] for m in masks])
        traces.append(
            SampleTrace(decision, float(log_prob.data[b]), float(entropy[b]), skip_prob_data[b].copy(), batch, b)
        )
    return traces


def sample(theta: ControllerParams, space: SearchSpace, num_layers: int, rng: np.random.Generator) -> SampleTrace:
    return sample_batch(theta, space, num_layers, rng, 1)[0]


def reinforce_loss(
    traces: list[SampleTrace],
    rewards: list[float],
    baseline: RewardBaseline,
    skip_target: float,
    skip_weight: float,
    entropy_weight: float,
) -> Tensor:
    """Score-function surrogate whose gradient is the REINFORCE estimate.

    The advantage ``reward + entropy_weight * entropy - baseline`` is treated
    as a constant; the skip penalty is the mean binary cross-entropy between
    every skip probability and ``skip_target``.
    """
    if not traces:
        raise ValueError("reinforce_loss needs at least one trace")
    if len(traces) != len(rewards):
        raise ValueError(f"{len(traces)} traces but {len(rewards)} rewards")
    groups: dict[int, tuple[_SampleBatch, list[int], list[int]]] = {}
    for pos, tr in enumerate(traces):
        batch, idx, order = groups.setdefault(id(tr._batch), (tr._batch, [], []))
        idx.append(tr._index)
        order.append(pos)

    logps, skip_rows, order = [], [], []
    for batch, idx, positions in groups.values():
        idx = np.asarray(idx)
        logps.append(batch.log_prob[idx])
        if batch.skip_scores is not None:
            skip_rows.append(batch.skip_scores[idx])
        order.extend(positions)
    logp = concat(logps) if len(logps) > 1 else logps[0]
    advantage = np.array(
        [rewards[i] + entropy_weight * traces[i].entropy - baseline.value for i in order], dtype=np.float64
    )
    loss = -(logp * Tensor(advantage)).mean()
    if skip_weight and skip_rows:
        s = concat(skip_rows) if len(skip_rows) > 1 else skip_rows[0]
        bce = -(F.log_sigmoid(s) * skip_target + F.log_sigmoid(-s) * (1.0 - skip_target))
        loss = loss + bce.mean() * skip_weight
    return loss
