"""Federated training driver: one-shot mask discovery, sparse FedAvg and baselines.

The server keeps the full ``d``-vector.  Under a shared mask the coordinates
outside the mask are never written, so they keep whatever value they had
when the mask was set (the initialization, for mask discovery at round 0).
The model that clients receive and that is evaluated is ``w * mask``.  This
keeps pruned weights available for a later mask refresh.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ssfl import masks as mk
from ssfl.comm import SCHEMES, CommLedger
from ssfl.data import (
    ClientShard,
    Dataset,
    EpochSampler,
    PartitionSpec,
    apply_partition,
    make_synthetic,
    partition,
    sample_balanced_minibatch,
)
from ssfl.nn import LayerLayout, backward, backward_stacked, forward, init_kaiming, lr_at_round, mlp_layout, sgd_step
from ssfl.seeding import substream

log = logging.getLogger(__name__)

VARIANTS = ("ssfl", "dense", "random_global", "random_local", "shuffled", "topk_weights", "warmup")
SHARED_MASK_VARIANTS = ("ssfl", "random_global", "shuffled", "warmup")


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    num_features: int = 32
    per_class: int = 500
    test_per_class: int = 500
    spread: float = 3.0


@dataclass
class OODSchedule:
    """Hold some classes out, then add clients holding them at ``refresh_round``."""

    holdout_classes: list[int] = field(default_factory=lambda: [8, 9])
    refresh_round: int = 30
    new_clients: int = 4


@dataclass
class FLConfig:
    K: int = 16
    R: int = 50
    local_epochs: float = 5.0
    local_steps: int | None = None
    client_fraction: float = 1.0
    sigma: float = 0.5
    batch_size: int = 16
    lr0: float = 0.1
    lr_decay: float = 0.998
    weight_decay: float = 5e-4
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    variant: str = "ssfl"
    warmup_rounds: int = 10
    hidden: tuple[int, ...] = (64, 64)
    mask_biases: bool = True
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    ood: OODSchedule | None = None
    seed: int = 0

    def validate(self) -> None:
        def bad(name, why):
            raise ValueError(f"{name}: {why}")

        if self.K < 1:
            bad("K", "need at least one client")
        if self.R < 0:
            bad("R", "must be >= 0")
        if not 0.0 < self.client_fraction <= 1.0:
            bad("client_fraction", "must lie in (0, 1]")
        if not 0.0 < self.sigma < 1.0:
            bad("sigma", "must lie in (0, 1)")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if self.lr0 <= 0 or self.lr_decay <= 0:
            bad("lr0", "learning rate and decay must be positive")
        if self.weight_decay < 0:
            bad("weight_decay", "must be >= 0")
        if self.variant not in VARIANTS:
            bad("variant", f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.local_steps is not None and self.local_steps < 0:
            bad("local_steps", "must be >= 0")
        if self.local_epochs < 0:
            bad("local_epochs", "must be >= 0")
        if self.variant == "warmup" and not 0 <= self.warmup_rounds:
            bad("warmup_rounds", "must be >= 0")
        if self.ood is not None:
            if self.variant not in SHARED_MASK_VARIANTS:
                bad("ood", f"mask refresh needs a shared-mask variant, not {self.variant!r}")
            if not 0 <= self.ood.refresh_round <= self.R:
                bad("ood.refresh_round", "must lie in [0, R]")
            if self.ood.new_clients < 1:
                bad("ood.new_clients", "must be >= 1")

    def steps_for(self, n_k: int) -> int:
        if self.local_steps is not None:
            return self.local_steps
        return math.ceil(self.local_epochs * n_k / self.batch_size)


@dataclass
class RoundMetrics:
    round: int
    global_acc: float
    mean_local_acc: float
    p10_local_acc: float
    median_local_acc: float
    lr: float
    uplink: dict[str, int]
    downlink: dict[str, int]
    seen_acc: float | None = None
    heldout_acc: float | None = None

    def as_row(self) -> dict:
        row = {
            "round": self.round,
            "global_acc": self.global_acc,
            "mean_local_acc": self.mean_local_acc,
            "p10_local_acc": self.p10_local_acc,
            "median_local_acc": self.median_local_acc,
        }
        for s in SCHEMES:
            row[f"uplink_bytes_{s}"] = self.uplink[s]
        for s in SCHEMES:
            row[f"downlink_bytes_{s}"] = self.downlink[s]
        row["lr"] = self.lr
        row["seen_acc"] = self.seen_acc
        row["heldout_acc"] = self.heldout_acc
        return row


@dataclass
class Client:
    shard: ClientShard
    test_indices: np.ndarray
    sampler: EpochSampler
    active: bool = True
    mask: np.ndarray | None = None  # per-client mask (random_local only)

    @property
    def id(self) -> int:
        return self.shard.client_id

    @property
    def n_k(self) -> int:
        return self.shard.n_k


def aggregate(models: Sequence[np.ndarray], sizes: Sequence[int]) -> np.ndarray:
    """FedAvg: ``sum_k n_k / sum_j n_j * w_k``, accumulated in list order."""
    if len(models) == 0:
        raise ValueError("nothing to aggregate")
    if len(models) != len(sizes):
        raise ValueError("one size per model required")
    if any(w.shape != models[0].shape for w in models):
        raise ValueError("models have different shapes")
    sizes = np.asarray(sizes, dtype=np.float64)
    if (sizes <= 0).any():
        raise ValueError("sizes must be positive")
    out = np.zeros_like(models[0], dtype=np.float64)
    if np.all(sizes == sizes[0]):
        for w in models:
            out += w
        return out / len(models)
    for w, p in zip(models, sizes / sizes.sum()):
        out += p * w
    return out


def local_train(
    params: np.ndarray,
    layout: LayerLayout,
    dataset: Dataset,
    sampler: EpochSampler,
    mask: np.ndarray | None,
    steps: int,
    lr: float,
    weight_decay: float,
    batch_size: int,
) -> np.ndarray:
    """``steps`` masked SGD steps from ``params`` on minibatches from ``sampler``."""
    w = params.copy()
    for _ in range(steps):
        batch = dataset.batch(sampler.next_indices(batch_size))
        w = sgd_step(w, backward(w, layout, batch, mask), lr, weight_decay, mask)
    return w


def local_train_many(
    starts: np.ndarray,
    layout: LayerLayout,
    dataset: Dataset,
    samplers: Sequence[EpochSampler],
    masks: np.ndarray | None,
    steps: Sequence[int],
    lr: float,
    weight_decay: float,
    batch_size: int,
) -> np.ndarray:
    """:func:`local_train` for several clients in lock-step.

    ``starts`` is ``(C, d)`` and must already be zero wherever the matching
    row of ``masks`` (``(C, d)``, ``(d,)`` or ``None``) is off.  A client stops
    updating after its own step count; each draws only from its own sampler,
    so the result matches running the clients one by one up to float rounding.
    """
    w = np.array(starts, dtype=np.float64)
    if masks is not None:
        masks = np.broadcast_to(masks, w.shape)
    order = np.argsort(-np.asarray(steps), kind="stable")
    w, steps_sorted = w[order], np.asarray(steps)[order]
    masks_sorted = masks[order] if masks is not None else None
    samplers = [samplers[i] for i in order]
    x, y = dataset.features, dataset.labels
    for t in range(int(steps_sorted.max(initial=0))):
        m = int(np.count_nonzero(steps_sorted > t))
        idx = np.stack([samplers[i].next_indices(batch_size) for i in range(m)])
        g = backward_stacked(w[:m], layout, x[idx], y[idx])
        if masks_sorted is not None:
            g *= masks_sorted[:m]
        g += weight_decay * w[:m]
        g *= lr
        w[:m] -= g
    out = np.empty_like(w)
    out[order] = w
    return out


def discover_mask(
    params: np.ndarray,
    layout: LayerLayout,
    dataset: Dataset,
    shards: Sequence[ClientShard],
    sigma: float,
    batch_size: int,
    rngs: Sequence[np.random.Generator],
    exempt: np.ndarray | None = None,
) -> np.ndarray:
    """One balanced minibatch of saliency per client, size-weighted, then top-k.

    ``exempt`` coordinates (e.g. biases when they are not prunable) are always
    kept and count toward ``k``.
    """
    pairs = []
    for shard, rng in zip(shards, rngs):
        batch = sample_balanced_minibatch(shard, dataset, batch_size, rng)
        pairs.append((mk.local_saliency(params, layout, batch), shard.n_k))
    scores = mk.aggregate_saliency(pairs)
    if exempt is not None:
        scores = np.where(exempt, np.inf, scores)
    return mk.topk_mask(scores, sigma)


class Simulation:
    """Mutable server state for one federated run.

    Use :meth:`run` for the whole schedule or drive :meth:`train_round` by hand.
    """

    def __init__(self, config: FLConfig, train: Dataset | None = None, test: Dataset | None = None):
        config.validate()
        self.config = cfg = config
        if train is None or test is None:
            s = cfg.data
            train, test = make_synthetic(s.num_classes, s.num_features, s.per_class, s.spread, cfg.seed,
                                         test_per_class=s.test_per_class)
        self.train, self.test = train, test
        self.layout = mlp_layout([train.num_features, *cfg.hidden, train.num_classes])
        self.d = self.layout.total_params
        self.w = init_kaiming(self.layout, cfg.seed)
        self.ledger = CommLedger(self.d)
        self.mask: np.ndarray | None = None
        self.refreshes = 0
        self.exempt = None
        if not cfg.mask_biases:
            self.exempt = np.zeros(self.d, dtype=bool)
            for layer in self.layout.layers:
                if layer.kind == "bias":
                    self.exempt[layer.slice] = True
        self._select_rng = substream(cfg.seed, "selection")
        self.clients = self._make_clients()
        self.holdout = np.array(cfg.ood.holdout_classes if cfg.ood else [], dtype=np.int64)
        self.metrics: list[RoundMetrics] = []

    # -- setup ---------------------------------------------------------------

    def _split(self, train_idx, test_idx, spec, tag):
        part = partition(self.train.subset(train_idx), spec)
        test_parts = apply_partition(self.test.labels[test_idx], part.weights, substream(spec.seed, "test-split", tag))
        return [(train_idx[s.indices], test_idx[t]) for s, t in zip(part.shards, test_parts)]

    def _make_clients(self) -> list[Client]:
        cfg = self.config
        base = cfg.partition
        all_train = np.arange(len(self.train))
        all_test = np.arange(len(self.test))
        if cfg.ood is None:
            groups = [(self._split(all_train, all_test, _with(base, K=cfg.K, seed=cfg.seed), 0), True)]
        else:
            held = np.isin(self.train.labels, cfg.ood.holdout_classes)
            held_t = np.isin(self.test.labels, cfg.ood.holdout_classes)
            groups = [
                (self._split(all_train[~held], all_test[~held_t], _with(base, K=cfg.K, seed=cfg.seed), 0), True),
                (self._split(all_train[held], all_test[held_t],
                             _with(base, K=cfg.ood.new_clients, seed=cfg.seed + 7919), 1), False),
            ]
        clients = []
        for members, active in groups:
            for tr, te in members:
                cid = len(clients)
                shard = ClientShard(cid, tr)
                clients.append(Client(shard, te, EpochSampler(shard, substream(cfg.seed, "sampling", cid)), active))
        return clients

    @property
    def active_clients(self) -> list[Client]:
        return [c for c in self.clients if c.active]

    def _random_mask(self, rng) -> np.ndarray:
        if self.exempt is None:
            return mk.random_mask(self.d, self.config.sigma, rng)
        k = mk.active_count(self.d, self.config.sigma)
        free = np.flatnonzero(~self.exempt)
        mask = self.exempt.copy()
        mask[rng.choice(free, size=k - int(self.exempt.sum()), replace=False)] = True
        return mask

    def discover(self, rnd: int) -> np.ndarray:
        """Saliency-based mask from the current stored vector, charged to the ledger."""
        clients = self.active_clients
        rngs = [substream(self.config.seed, "saliency", c.id, self.refreshes) for c in clients]
        mask = discover_mask(self.w, self.layout, self.train, [c.shard for c in clients], self.config.sigma,
                             self.config.batch_size, rngs, self.exempt)
        for c in clients:
            self.ledger.record_saliency_upload(rnd, c.id)
        self._broadcast_mask(rnd, clients)
        self.refreshes += 1
        return mask

    def _broadcast_mask(self, rnd, clients):
        for c in clients:
            self.ledger.record_mask_broadcast(rnd, c.id)

    def setup_masks(self) -> None:
        cfg = self.config
        v = cfg.variant
        mask_rng = substream(cfg.seed, "masks")
        if v == "ssfl":
            self.mask = self.discover(0)
        elif v == "shuffled":
            self.mask = mk.shuffle_within_layers(self.discover(0), self.layout, mask_rng)
        elif v == "random_global":
            self.mask = self._random_mask(mask_rng)
            self._broadcast_mask(0, self.active_clients)
        elif v == "random_local":
            for c in self.clients:
                c.mask = self._random_mask(substream(cfg.seed, "masks", c.id))
            self._broadcast_mask(0, self.active_clients)

    # -- OOD -------------------------------------------------------------------

    def introduce_new_clients(self) -> list[Client]:
        new = [c for c in self.clients if not c.active]
        for c in new:
            c.active = True
        return new

    def ood_adapt(self, rnd: int) -> np.ndarray:
        """Recompute saliency on the full stored vector over all clients and swap in the new mask.

        Coordinates that become active start from the value stored for them,
        i.e. their initialization if they were pruned since round 0.
        """
        self.mask = self.discover(rnd)
        return self.mask

    # -- rounds ----------------------------------------------------------------

    def effective(self) -> np.ndarray:
        return self.w if self.mask is None else self.w * self.mask

    def _client_start(self, c: Client):
        """(start params, training mask, downlink nonzeros) for client ``c``."""
        v = self.config.variant
        if v == "random_local":
            return self.w * c.mask, c.mask, int(c.mask.sum())
        if self.mask is not None:
            return self.w * self.mask, self.mask, int(self.mask.sum())
        return self.w.copy(), None, self.d

    def select(self) -> list[Client]:
        pool = self.active_clients
        m = math.ceil(self.config.client_fraction * len(pool))
        picked = self._select_rng.choice(len(pool), size=m, replace=False)
        return [pool[i] for i in sorted(picked)]

    def train_round(self, rnd: int) -> None:
        cfg = self.config
        if cfg.variant == "warmup" and self.mask is None and rnd >= cfg.warmup_rounds:
            self.mask = self.discover(rnd)
        lr = lr_at_round(rnd, cfg.lr0, cfg.lr_decay)
        k_topk = mk.active_count(self.d, cfg.sigma)
        chosen = self.select()
        starts, masks, downs = zip(*(self._client_start(c) for c in chosen))
        if cfg.variant == "random_local":
            train_masks = np.stack(masks)
        else:
            train_masks = masks[0]
        trained = local_train_many(np.stack(starts), self.layout, self.train, [c.sampler for c in chosen],
                                   train_masks, [cfg.steps_for(c.n_k) for c in chosen], lr, cfg.weight_decay,
                                   cfg.batch_size)
        models, sizes, sent = list(trained), [c.n_k for c in chosen], []
        for c, w_k, k_down in zip(chosen, models, downs):
            self.ledger.record_model(rnd, "downlink", c.id, k_down)
            if cfg.variant == "topk_weights":
                sent.append(mk.topk_magnitude(w_k, k_topk))
                self.ledger.record_model(rnd, "uplink", c.id, k_topk)
            else:
                self.ledger.record_model(rnd, "uplink", c.id, k_down)

        if cfg.variant == "topk_weights":
            sizes_a = np.asarray(sizes, dtype=np.float64)
            num = np.zeros(self.d)
            den = np.zeros(self.d)
            for w_k, keep, n in zip(models, sent, sizes_a):
                num += np.where(keep, n * w_k, 0.0)
                den += np.where(keep, n, 0.0)
            self.w = np.where(den > 0, num / np.where(den > 0, den, 1.0), self.w)
        elif self.mask is not None and cfg.variant != "random_local":
            self.w = np.where(self.mask, aggregate(models, sizes), self.w)
        else:
            self.w = aggregate(models, sizes)

    def evaluate(self, rnd: int, lr: float) -> RoundMetrics:
        w = self.effective()
        pred = self._predict(w)
        correct = pred == self.test.labels
        local = [float(correct[c.test_indices].mean()) for c in self.active_clients if len(c.test_indices)]
        up = {s: 0 for s in SCHEMES}
        down = {s: 0 for s in SCHEMES}
        for e in self.ledger.entries:
            if e.round == rnd - 1:
                (up if e.direction == "uplink" else down)[e.scheme] += e.bytes
        seen = held = None
        if len(self.holdout):
            is_held = np.isin(self.test.labels, self.holdout)
            seen = float(correct[~is_held].mean())
            held = float(correct[is_held].mean())
        return RoundMetrics(
            round=rnd,
            global_acc=float(correct.mean()),
            mean_local_acc=float(np.mean(local)) if local else float("nan"),
            p10_local_acc=float(np.quantile(local, 0.1)) if local else float("nan"),
            median_local_acc=float(np.median(local)) if local else float("nan"),
            lr=lr,
            uplink=up,
            downlink=down,
            seen_acc=seen,
            heldout_acc=held,
        )

    def _predict(self, w):
        return forward(w, self.layout, self.test.features).argmax(axis=1)

    def run(self) -> list[RoundMetrics]:
        """Row 0 is the model before any training; row ``r`` follows round ``r - 1``."""
        cfg = self.config
        self.setup_masks()
        self.metrics = [self.evaluate(0, 0.0)]
        for rnd in range(cfg.R):
            if cfg.ood is not None and rnd == cfg.ood.refresh_round:
                self.introduce_new_clients()
                self.ood_adapt(rnd)
            self.train_round(rnd)
            self.metrics.append(self.evaluate(rnd + 1, lr_at_round(rnd, cfg.lr0, cfg.lr_decay)))
            log.debug("%s seed=%d round %d acc=%.4f", cfg.variant, cfg.seed, rnd + 1, self.metrics[-1].global_acc)
        return self.metrics


def _with(spec: PartitionSpec, **changes) -> PartitionSpec:
    d = asdict(spec)
    d.update(changes)
    return PartitionSpec(**d)


def run(config: FLConfig, train: Dataset | None = None, test: Dataset | None = None) -> list[RoundMetrics]:
    return Simulation(config, train, test).run()
