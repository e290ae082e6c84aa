"""The weight-sharing supergraph: one parameter bank per (layer, slot).

A child network is a view into the store. Instantiating a child lazily
creates any bank it needs; two children that pick the same slot at the same
layer read and write the same tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ssplab.autodiff import Tensor, parameter
from ssplab.autodiff import functional as F
from ssplab.checkpoint import load_records, save_records
from ssplab.ops import LayerInstance, Mode, OpKind, add_batch_norm, apply_batch_norm, forward_layer, he_uniform
from ssplab.search_space import SearchSpace, slot_to_layer


@dataclass(frozen=True)
class ArchitectureDecision:
    """Per-layer slot choice plus, for layer ``i``, a length-``i`` skip mask."""

    op_slot_per_layer: tuple[int, ...]
    skip_mask_per_layer: tuple[tuple[bool, ...], ...]

    @classmethod
    def build(cls, slots, skips=None) -> "ArchitectureDecision":
        slots = tuple(int(s) for s in slots)
        if skips is None:
            skips = [[False] * i for i in range(len(slots))]
        return cls(slots, tuple(tuple(bool(b) for b in m) for m in skips))

    @property
    def num_layers(self) -> int:
        return len(self.op_slot_per_layer)

    def validate(self, num_layers: int, num_slots: int) -> None:
        if num_layers < 1:
            raise ValueError("a child needs at least one layer")
        if self.num_layers != num_layers or len(self.skip_mask_per_layer) != num_layers:
            raise ValueError(f"decision has {self.num_layers} layers, expected {num_layers}")
        for i, (s, mask) in enumerate(zip(self.op_slot_per_layer, self.skip_mask_per_layer)):
            if not 0 <= s < num_slots:
                raise ValueError(f"layer {i}: slot {s} out of range for {num_slots} slots")
            if len(mask) != i:
                raise ValueError(f"layer {i}: skip mask must have length {i}, got {len(mask)}")

    def describe(self) -> str:
        parts = []
        for s, mask in zip(self.op_slot_per_layer, self.skip_mask_per_layer):
            skips = "".join("1" if b else "0" for b in mask)
            parts.append(f"{s}" + (f"[{skips}]" if skips else ""))
        return " ".join(parts)


@dataclass
class ParamGroup:
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())


def reduction_counts(num_layers: int) -> list[int]:
    """How many 2x spatial reductions precede each layer (at L//3 and 2L//3)."""
    counts = [0] * num_layers
    for at in (num_layers // 3, (2 * num_layers) // 3):
        counts[at] += 1
    return counts


class SharedParamStore:
    """Parameter bank of the supergraph.

    Banks are created on first use, seeded from ``(seed, layer, slot)`` so the
    initial values do not depend on visiting order. Identity slots never get
    a bank; every other visited slot does, even when it has no trainable
    tensors.
    """

    def __init__(
        self,
        space: SearchSpace,
        num_layers: int,
        out_filters: int,
        num_classes: int,
        in_channels: int = 3,
        seed: int = 0,
        batch_norm: bool = True,
        keep_prob: float = 1.0,
    ):
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        self.space = space
        self.num_layers = num_layers
        self.out_filters = out_filters
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.seed = seed
        self.batch_norm = batch_norm
        self.keep_prob = keep_prob
        self.bank: dict[tuple[int, int], LayerInstance] = {}
        self.skip_reducers: dict[int, ParamGroup] = {}

        rng = self._rng(-1, 0)
        self.stem = ParamGroup()
        self.stem.params["conv"] = parameter(
            he_uniform(rng, (out_filters, in_channels, 3, 3), in_channels * 9)
        )
        if batch_norm:
            add_batch_norm(self.stem, out_filters)
        rng = self._rng(-2, 0)
        self.classifier = ParamGroup()
        bound = 1.0 / np.sqrt(out_filters)
        self.classifier.params["weight"] = parameter(rng.uniform(-bound, bound, (out_filters, num_classes)))
        self.classifier.params["bias"] = parameter(np.zeros(num_classes))

    def _rng(self, layer: int, slot: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, layer + 2, slot])

    def get_bank(self, layer: int, slot: int) -> LayerInstance | None:
        if self.space.slot(slot).kind is OpKind.IDENTITY:
            return None
        key = (layer, slot)
        bank = self.bank.get(key)
        if bank is None:
            bank = slot_to_layer(
                self.space, slot, self.out_filters, self.out_filters, self._rng(layer, slot), wrapped=self.batch_norm
            )
            self.bank[key] = bank
        return bank

    def get_skip_reducer(self, layer: int) -> ParamGroup | None:
        if not self.batch_norm:
            return None
        group = self.skip_reducers.get(layer)
        if group is None:
            group = ParamGroup()
            add_batch_norm(group, self.out_filters)
            self.skip_reducers[layer] = group
        return group

    def parameters(self) -> list[Tensor]:
        params = self.stem.parameters() + self.classifier.parameters()
        for key in sorted(self.bank):
            params += self.bank[key].parameters()
        for key in sorted(self.skip_reducers):
            params += self.skip_reducers[key].parameters()
        return params

    # -- checkpointing -------------------------------------------------
    def records(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}

        def put(prefix, group):
            for name, t in group.params.items():
                out[f"{prefix}/{name}"] = t.data
            for name, b in group.buffers.items():
                out[f"{prefix}/{name}"] = b

        put("stem", self.stem)
        put("classifier", self.classifier)
        for (layer, slot) in sorted(self.bank):
            put(f"bank/{layer}/{slot}", self.bank[(layer, slot)])
            if not self.bank[(layer, slot)].params and not self.bank[(layer, slot)].buffers:
                out[f"bank/{layer}/{slot}/#"] = np.zeros(0)
        for layer in sorted(self.skip_reducers):
            put(f"skip/{layer}", self.skip_reducers[layer])
        return out

    def load_records(self, records: dict[str, np.ndarray]) -> None:
        for key, value in records.items():
            parts = key.split("/")
            if parts[0] == "bank":
                group = self.get_bank(int(parts[1]), int(parts[2]))
            elif parts[0] == "skip":
                group = self.get_skip_reducer(int(parts[1]))
            else:
                group = {"stem": self.stem, "classifier": self.classifier}[parts[0]]
            name = parts[-1]
            if name == "#":
                continue
            if name in group.params:
                target = group.params[name]
                target.data = value.astype(target.data.dtype).reshape(target.shape)
            else:
                group.buffers[name][...] = value

    def save(self, path) -> None:
        save_records(path, self.records())

    def load(self, path) -> None:
        self.load_records(load_records(path))


def count_store_entries(store: SharedParamStore) -> int:
    return len(store.bank)


@dataclass
class ChildNetwork:
    store: SharedParamStore
    decision: ArchitectureDecision
    layers: list[LayerInstance | None]
    num_layers: int
    out_filters: int

    def parameters(self) -> list[Tensor]:
        """Exactly the shared tensors this child reads (stem, banks, skip BNs, classifier)."""
        params = self.store.stem.parameters()
        for layer in self.layers:
            if layer is not None:
                params += layer.parameters()
        for i, mask in enumerate(self.decision.skip_mask_per_layer):
            if any(mask):
                reducer = self.store.get_skip_reducer(i)
                if reducer is not None:
                    params += reducer.parameters()
        return params + self.store.classifier.parameters()


def instantiate_child(
    store: SharedParamStore, space: SearchSpace, decision: ArchitectureDecision, num_layers: int, out_filters: int
) -> ChildNetwork:
    if num_layers != store.num_layers or out_filters != store.out_filters:
        raise ValueError("child geometry does not match the store")
    if space.num_slots != store.space.num_slots:
        raise ValueError("child search space does not match the store")
    decision.validate(num_layers, space.num_slots)
    layers = [store.get_bank(i, s) for i, s in enumerate(decision.op_slot_per_layer)]
    for i, mask in enumerate(decision.skip_mask_per_layer):
        if any(mask):
            store.get_skip_reducer(i)
    return ChildNetwork(store, decision, layers, num_layers, out_filters)


def _eval_signature(net: ChildNetwork, layer: int) -> tuple:
    """What layer ``layer`` computes in eval mode, up to equivalent parameter-free ops."""
    bank = net.layers[layer]
    if bank is None or bank.spec.kind is OpKind.DROPOUT:
        return ("id",)
    if not bank.params:
        return (bank.spec.kind.value,)
    return ("slot", net.decision.op_slot_per_layer[layer])


def child_forward(
    net: ChildNetwork,
    x: Tensor,
    mode: Mode,
    rng: np.random.Generator | None = None,
    cache: dict | None = None,
) -> Tensor:
    """Logits of ``net`` on the image batch ``x``.

    ``cache`` (eval mode only) memoises per-prefix activations for one fixed
    input batch under frozen parameters; children sharing an architecture
    prefix then reuse its activations.
    """
    store = net.store
    if x.ndim != 4 or x.shape[1] != store.in_channels:
        raise ValueError(f"expected N x {store.in_channels} x H x W input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h < 4 or w < 4 or h % 4 or w % 4:
        raise ValueError(f"spatial dims must be >= 4 and divisible by 4, got {h}x{w}")
    if cache is not None and mode is not Mode.EVAL:
        raise ValueError("activation caching is only valid in eval mode")
    reductions = reduction_counts(net.num_layers)

    sig: tuple = ("stem",)
    if cache is not None and sig in cache:
        out = cache[sig]
    else:
        out = F.conv2d(x, store.stem.params["conv"], 1, 1)
        if store.batch_norm:
            out = apply_batch_norm(store.stem, out, mode)
        if cache is not None:
            cache[sig] = out

    outputs: list[Tensor] = []
    sigs: list[tuple] = []
    local: dict = {} if cache is None else cache

    def reduced(j: int, times: int) -> Tensor:
        key = (sigs[j], "down", times)
        if key not in local:
            src = outputs[j]
            for _ in range(times):
                src = F.downsample2x(src)
            local[key] = src
        return local[key]

    for i in range(net.num_layers):
        mask = net.decision.skip_mask_per_layer[i]
        sig = (sig, _eval_signature(net, i), mask)
        sigs.append(sig)
        if cache is not None and sig in cache:
            out = cache[sig]
            outputs.append(out)
            continue
        inp = out
        for _ in range(reductions[i]):
            inp = F.downsample2x(inp)
        layer = net.layers[i]
        y = inp if layer is None else forward_layer(layer, inp, mode, rng)
        if any(mask):
            for j, chosen in enumerate(mask):
                if not chosen:
                    continue
                y = y + reduced(j, sum(reductions[j + 1 : i + 1]))
            reducer = store.get_skip_reducer(i)
            if reducer is not None:
                y = apply_batch_norm(reducer, y, mode)
        out = y
        outputs.append(out)
        if cache is not None:
            cache[sig] = out

    pooled = F.global_avg_pool(out)
    if mode is Mode.TRAIN and store.keep_prob < 1.0:
        pooled = F.dropout(pooled, 1.0 - store.keep_prob, training=True, rng=rng)
    logits = F.linear(pooled, store.classifier.params["weight"], store.classifier.params["bias"])
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError(f"non-finite logits for architecture {net.decision.describe()}")
    return logits
