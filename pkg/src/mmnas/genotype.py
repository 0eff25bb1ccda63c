"""Discrete architectures: derivation from logits, the fixed network, retraining, export."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .cell import CELL_TYPES, AlphaTable, CellSpec, edge_name, mixed_weights, source_label
from .data import ArrayCache, PairedStudy
from .metrics import ScoredCase
from .ops import OP_INDEX, OP_KINDS, apply_op
from .params import Adam
from .search import batch_loss, check_classes
from .supernet import CellPlan, ConfigError, Network, SupernetConfig
from .tensor import Tensor

ZERO = OP_INDEX["zero"]
Node = tuple[tuple[int, str], tuple[int, str]]


class GenotypeError(ValueError):
    pass


@dataclass(frozen=True)
class Genotype:
    normal: tuple[Node, ...]
    reduce: tuple[Node, ...]
    nodes: int
    alpha_hash: str = ""
    seed: int = 0

    def cell(self, cell_type: str) -> tuple[Node, ...]:
        return self.normal if cell_type == "normal" else self.reduce

    def validate(self) -> "Genotype":
        for ct in CELL_TYPES:
            cell = self.cell(ct)
            if len(cell) != self.nodes:
                raise GenotypeError(f"{ct}: {len(cell)} nodes listed, meta says {self.nodes}")
            for j, node in enumerate(cell):
                if len(node) != 2:
                    raise GenotypeError(f"{ct} node {j}: has {len(node)} edges, expected exactly 2")
                for src, op in node:
                    if not 0 <= src < j + 2:
                        raise GenotypeError(f"{ct} node {j}: source {src} does not precede the node")
                    if op not in OP_INDEX or op == "zero":
                        raise GenotypeError(f"{ct} node {j}: invalid op {op!r}")
                if node[0][0] == node[1][0]:
                    raise GenotypeError(f"{ct} node {j}: both edges come from source {node[0][0]}")
        return self


def alpha_hash(alpha: AlphaTable) -> str:
    return hashlib.sha256(alpha.to_bytes()).hexdigest()[:16]


def derive_cell(weights: Mapping[tuple[int, int], np.ndarray], num_nodes: int) -> tuple[Node, ...]:
    """Top-2 incoming edges per node by best non-zero weight; op = that argmax.

    Ties go to the lower source index, then the lower op index. Only order
    comparisons are used, so any monotone transform of the weights gives the
    same result.
    """
    nodes = []
    for j in range(num_nodes):
        scored = []
        for i in range(j + 2):
            w = np.asarray(weights[(i, j)], dtype=np.float64)
            cand = [k for k in range(len(OP_KINDS)) if k != ZERO]
            best = max(cand, key=lambda k: (w[k], -k))
            scored.append((w[best], -i, i, best))
        scored.sort(reverse=True)
        kept = sorted(scored[:2], key=lambda t: t[2])
        nodes.append(tuple((i, OP_KINDS[k]) for _, _, i, k in kept))
    return tuple(nodes)


def derive_genotype(alpha: AlphaTable, seed: int = 0) -> Genotype:
    cells = {ct: derive_cell(alpha.weights(ct), alpha.num_nodes) for ct in CELL_TYPES}
    return Genotype(cells["normal"], cells["reduce"], alpha.num_nodes, alpha_hash(alpha), seed)


# ---------------------------------------------------------------------------
# export / parse


def genotype_to_dict(g: Genotype) -> dict:
    def cell(c):
        return [[{"from": src, "op": op} for src, op in node] for node in c]
    return {"normal": cell(g.normal), "reduce": cell(g.reduce),
            "meta": {"nodes": g.nodes, "alpha_hash": g.alpha_hash, "seed": g.seed}}


def genotype_from_dict(d: dict) -> Genotype:
    try:
        meta = d["meta"]
        cells = {}
        for ct in CELL_TYPES:
            nodes = []
            for j, node in enumerate(d[ct]):
                if len(node) != 2:
                    raise GenotypeError(f"{ct} node {j}: has {len(node)} edges, expected exactly 2")
                nodes.append(tuple((int(e["from"]), str(e["op"])) for e in node))
            cells[ct] = tuple(nodes)
        g = Genotype(cells["normal"], cells["reduce"], int(meta["nodes"]),
                     str(meta.get("alpha_hash", "")), int(meta.get("seed", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GenotypeError):
            raise
        raise GenotypeError(f"malformed genotype: {exc!r}") from None
    return g.validate()


def export_json(g: Genotype) -> str:
    return json.dumps(genotype_to_dict(g), indent=2, sort_keys=True) + "\n"


def parse_json(text: str) -> Genotype:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeError(f"genotype is not valid JSON: {exc}") from None
    return genotype_from_dict(d)


def export_dot(g: Genotype) -> str:
    """One digraph per cell type: op-labelled edges into nodes, concat edges into out."""
    lines = []
    for ct in CELL_TYPES:
        lines.append(f"digraph {ct} {{")
        lines.append("  rankdir=LR;")
        lines.append('  input0 [shape=box]; input1 [shape=box]; out [shape=box];')
        for j, node in enumerate(g.cell(ct)):
            for src, op in node:
                lines.append(f'  {source_label(src)} -> n{j} [label="{op}"];')
        for j in range(g.nodes):
            lines.append(f'  n{j} -> out [label="concat", style=dashed];')
        lines.append("}")
    return "\n".join(lines) + "\n"


def export_genotype(g: Genotype, fmt: str = "json") -> str:
    if fmt == "json":
        return export_json(g)
    if fmt == "dot":
        return export_dot(g)
    raise ValueError(f"unknown export format {fmt!r}")


# ---------------------------------------------------------------------------
# fixed network


class DerivedNetwork(Network):
    """Same macro wiring as the supernet; each node sums its two chosen ops."""

    def __init__(self, genotype: Genotype, config: SupernetConfig, seed: int):
        if genotype.nodes != config.num_nodes:
            raise ConfigError(f"genotype has {genotype.nodes} nodes per cell, config expects {config.num_nodes}")
        self.genotype = genotype.validate()
        super().__init__(config, seed)

    def _chosen(self, plan: CellPlan) -> dict[tuple[int, int], str]:
        return {(src, j): op for j, node in enumerate(self.genotype.cell(plan.cell_type)) for src, op in node}

    def _build_cell(self, plan: CellPlan) -> None:
        for (i, j), op in sorted(self._chosen(plan).items(), key=lambda t: (t[0][1], t[0][0])):
            self._add_op(f"cell/{plan.name}/{edge_name(i, j)}", op, plan.node_channels)

    def _edge_fn(self, plan: CellPlan, ctx: dict):
        chosen = self._chosen(plan)

        def edge(i: int, j: int, x: Tensor) -> Tensor | None:
            op = chosen.get((i, j))
            if op is None:
                return None
            params = self._op_params(f"cell/{plan.name}/{edge_name(i, j)}", op, plan.node_channels)
            return apply_op(op, x, params)
        return edge


def build_derived_network(genotype: Genotype, config: SupernetConfig, seed: int) -> DerivedNetwork:
    return DerivedNetwork(genotype, config, seed)


# ---------------------------------------------------------------------------
# retraining and scoring


@dataclass
class TrainLogRow:
    epoch: int
    train_loss: float
    best_flag: bool


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    best_epoch: int
    log: list[TrainLogRow] = field(default_factory=list)


def train_derived(net: Network, train_set: Sequence[PairedStudy], epochs: int = 200, lr: float = 1e-3,
                  seed: int = 0, batch_size: int = 1) -> TrainResult:
    """Adam on cross-entropy; keeps the epoch with the lowest mean training loss.

    The chosen state is loaded back into ``net``.
    """
    check_classes(train_set, 2, "retraining")
    rng = np.random.default_rng(seed)
    cache = ArrayCache(train_set)
    opt = Adam(net.theta_params(), lr)
    best_state, best_epoch, best_loss = net.store.state(), 0, math.inf
    log: list[TrainLogRow] = []
    items = list(train_set)
    for epoch in range(1, epochs + 1):
        order = [items[i] for i in rng.permutation(len(items))]
        losses = []
        for b in range(0, len(order), batch_size):
            loss = batch_loss(net, cache.batch(order[b:b + batch_size]))
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
        mean = float(np.mean(losses))
        improved = mean < best_loss
        if improved:
            best_loss, best_epoch, best_state = mean, epoch, net.store.state()
        log.append(TrainLogRow(epoch, mean, improved))
    net.store.load_state(best_state)
    return TrainResult(best_state, best_epoch, log)


def predict_scores(net: Network, studies: Sequence[PairedStudy]) -> list[ScoredCase]:
    """Softmax probability of class 1 per study, one study per forward pass."""
    cache = ArrayCache(studies)
    out = []
    with T.no_grad():
        for s in studies:
            b = cache.batch([s])
            z = net(b.pet, b.ct).data[0]
            p = float(np.exp(z[1] - np.logaddexp(z[0], z[1])))
            out.append(ScoredCase(s.id, s.label, min(max(p, 0.0), 1.0)))
    return out


def accuracy(cases: Sequence[ScoredCase], threshold: float = 0.5) -> float:
    return float(np.mean([(c.score >= threshold) == (c.label == 1) for c in cases]))


def write_train_log(log: Sequence[TrainLogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "best_flag"])
        for r in log:
            w.writerow([r.epoch, repr(r.train_loss), int(r.best_flag)])
