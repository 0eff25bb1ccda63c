"""First-order bilevel architecture search.

Each step takes one SGD update of the network weights on a training batch
with the architecture logits frozen, then one Adam update of the logits on a
validation batch with the weights frozen.
"""
from __future__ import annotations

import csv
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .cell import AlphaTable
from .data import ArrayCache, Batch, PairedStudy, stratified_split
from .params import SGD, Adam
from .supernet import Network, Supernet, SupernetConfig, build_supernet
from .tensor import Tensor


@dataclass
class SearchBudget:
    max_epochs: int = 200
    snapshot_every: int = 1
    batch_size: int = 1
    theta_lr: float = 1e-4
    alpha_lr: float = 5e-4

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.snapshot_every < 1 or self.batch_size < 1:
            raise ValueError("snapshot_every and batch_size must be >= 1")


@dataclass
class SearchLogRow:
    epoch: int
    train_loss: float
    val_loss: float
    best_flag: bool


@dataclass
class SearchState:
    theta_opt: SGD
    alpha_opt: Adam
    rng: np.random.Generator
    epoch: int = 0
    best_val_loss: float = math.inf
    best_alpha: dict[str, np.ndarray] | None = None
    best_epoch: int | None = None
    last_losses: tuple[float, float] = (math.nan, math.nan)

    def record(self, epoch: int, val_loss: float, alpha: AlphaTable) -> bool:
        if val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.best_alpha = alpha.state()
            self.best_epoch = epoch
            return True
        return False


@dataclass
class SearchResult:
    alpha: AlphaTable
    best_epoch: int
    best_val_loss: float
    initial_val_loss: float
    log: list[SearchLogRow] = field(default_factory=list)


@contextmanager
def frozen(params: Sequence[tuple[str, Tensor]]):
    """Temporarily exclude parameters from gradient computation."""
    prev = [p.requires_grad for _, p in params]
    for _, p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for (_, p), flag in zip(params, prev):
            p.requires_grad = flag


def bilevel_step(theta_loss: Callable[[], Tensor], alpha_loss: Callable[[], Tensor],
                 theta_opt, alpha_opt) -> tuple[float, float]:
    """One alternating update; each side only ever touches its own parameters."""
    with frozen(alpha_opt.params):
        lt = theta_loss()
        T.backward(lt)
    theta_opt.step()
    with frozen(theta_opt.params):
        lv = alpha_loss()
        T.backward(lv)
    alpha_opt.step()
    return lt.item(), lv.item()


def batch_loss(net: Network, batch: Batch) -> Tensor:
    return T.softmax_cross_entropy(net(batch.pet, batch.ct), batch.labels)


def search_step(net: Supernet, train_batch: Batch, val_batch: Batch, state: SearchState) -> SearchState:
    if len(train_batch.labels) == 0 or len(val_batch.labels) == 0:
        raise ValueError("search_step needs non-empty batches")
    state.last_losses = bilevel_step(lambda: batch_loss(net, train_batch),
                                     lambda: batch_loss(net, val_batch),
                                     state.theta_opt, state.alpha_opt)
    return state


def mean_loss(net: Network, cache: ArrayCache, studies: Sequence[PairedStudy]) -> float:
    """Average singleton-batch loss without recording a graph."""
    total = 0.0
    with T.no_grad():
        for s in studies:
            total += batch_loss(net, cache.batch([s])).item()
    return total / len(studies)


def _batches(items: list, size: int) -> list[list]:
    return [items[i:i + size] for i in range(0, len(items), size)]


def check_classes(studies: Sequence[PairedStudy], minimum: int, what: str) -> None:
    if len(studies) < minimum:
        raise ValueError(f"{what} needs at least {minimum} studies, got {len(studies)}")
    if len({s.label for s in studies}) < 2:
        raise ValueError(f"{what} needs both classes present")


def run_search(studies: Sequence[PairedStudy], config: SupernetConfig, budget: SearchBudget,
               seed: int, on_epoch: Callable[[SearchLogRow], None] | None = None) -> SearchResult:
    """Search on a stratified half/half split and keep the lowest-validation-loss logits."""
    check_classes(studies, 4, "architecture search")
    rng = np.random.default_rng(seed)
    train, val = stratified_split(studies, int(rng.integers(2**31)))
    net = build_supernet(config, int(rng.integers(2**31)))
    cache = ArrayCache(studies)
    state = SearchState(SGD(net.theta_params(), budget.theta_lr),
                        Adam(net.alpha_params(), budget.alpha_lr), rng)
    initial = mean_loss(net, cache, val)
    log: list[SearchLogRow] = []
    for epoch in range(1, budget.max_epochs + 1):
        state.epoch = epoch
        tb = _batches([train[i] for i in rng.permutation(len(train))], budget.batch_size)
        vb = _batches([val[i] for i in rng.permutation(len(val))], budget.batch_size)
        losses = []
        for s, batch in enumerate(tb):
            search_step(net, cache.batch(batch), cache.batch(vb[s % len(vb)]), state)
            losses.append(state.last_losses[0])
        if epoch % budget.snapshot_every and epoch != budget.max_epochs:
            continue
        val_loss = mean_loss(net, cache, val)
        best = state.record(epoch, val_loss, net.alpha)
        row = SearchLogRow(epoch, float(np.mean(losses)), val_loss, best)
        log.append(row)
        if on_epoch:
            on_epoch(row)
    alpha = AlphaTable(config.num_nodes)
    alpha.load_state(state.best_alpha)
    return SearchResult(alpha, state.best_epoch, state.best_val_loss, initial, log)


def write_search_log(log: Sequence[SearchLogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "best_flag"])
        for r in log:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), int(r.best_flag)])
