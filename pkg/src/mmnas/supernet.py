"""Macro network: modality stems, a fusing normal cell, a reduction chain, and a head.

Wiring (pet_ct mode)::

    n  = normal(stem_pet(pet), stem_ct(ct))
    r1 = reduce_1(n, stem_sum(pet + ct))
    rk = reduce_k(r_{k-1}, r_{k-2})        r_0 := n
    logits = fc(gap(conv_block(conv_block(r_R))))

Each cell input goes through a 1x1x1 conv + normalize3d to the cell's node
width; reduction cells downsample there (stride 2 per level), so the searched
ops themselves stay stride 1.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cell import AlphaTable, CellSpec, cell_forward, edge_name, mixed_op_forward
from .ops import OP_KINDS, conv_block, init_kind, op_param_specs
from .params import ParamStore
from .tensor import Tensor

MODALITY_MODES = ("pet_ct", "pet_only", "ct_only")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SupernetConfig:
    input_dims: tuple[int, int, int] = (112, 112, 144)
    stem_channels: int = 16
    num_nodes: int = 4
    num_reduction_cells: int = 3
    num_classes: int = 2
    modality_mode: str = "pet_ct"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))

    def validate(self) -> "SupernetConfig":
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ConfigError(f"input_dims must be three positive sizes, got {self.input_dims}")
        if self.num_reduction_cells < 1:
            raise ConfigError("num_reduction_cells must be >= 1")
        if self.num_nodes < 1:
            raise ConfigError("num_nodes must be >= 1")
        if self.stem_channels % self.num_nodes:
            raise ConfigError(
                f"stem_channels ({self.stem_channels}) must be divisible by num_nodes ({self.num_nodes}) "
                "so every node gets an equal channel share")
        f = 2 ** self.num_reduction_cells
        bad = [d for d in self.input_dims if d % f]
        if bad:
            raise ConfigError(
                f"input_dims {self.input_dims} must each be divisible by 2^{self.num_reduction_cells} = {f} "
                "so every reduction cell halves the volume exactly")
        if self.num_classes != 2:
            raise ConfigError("only binary classification (num_classes = 2) is supported")
        if self.modality_mode not in MODALITY_MODES:
            raise ConfigError(f"modality_mode must be one of {MODALITY_MODES}, got {self.modality_mode!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SupernetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SupernetConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class CellPlan:
    name: str
    cell_type: str
    level: int                       # output resolution is input_dims / 2**level
    node_channels: int
    input_channels: tuple[int, int]
    input_strides: tuple[int, int]
    num_nodes: int

    @property
    def spec(self) -> CellSpec:
        return CellSpec(self.cell_type, self.num_nodes)

    @property
    def out_channels(self) -> int:
        return self.node_channels * self.num_nodes


def plan_cells(config: SupernetConfig) -> list[CellPlan]:
    C0, M = config.stem_channels, config.num_nodes
    plans = [CellPlan("normal", "normal", 0, C0 // M, (C0, C0), (1, 1), M)]
    chain = [(C0, 0)]  # (channels, level) of r_0 = normal output, r_1, ...
    stem_sum = (C0, 0)
    for k in range(1, config.num_reduction_cells + 1):
        a, b = (chain[0], stem_sum) if k == 1 else (chain[k - 1], chain[k - 2])
        plans.append(CellPlan(
            f"reduce_{k}", "reduce", k, (2 ** k) * C0 // M,
            (a[0], b[0]), (2 ** (k - a[1]), 2 ** (k - b[1])), M))
        chain.append(((2 ** k) * C0, k))
    return plans


def trace_shapes(config: SupernetConfig, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
    """Symbolic shape trace of a forward pass; allocates nothing."""
    config.validate()
    dims = config.input_dims
    C0 = config.stem_channels
    out = [(f"stem/{m}", (batch, C0) + dims) for m in ("pet", "ct", "sum")]
    for p in plan_cells(config):
        d = tuple(x // 2 ** p.level for x in dims)
        out.append((f"cell/{p.name}", (batch, p.out_channels) + d))
    last = plan_cells(config)[-1]
    d = tuple(x // 2 ** last.level for x in dims)
    out.append(("head/conv1", (batch, last.out_channels) + d))
    out.append(("head/conv2", (batch, last.out_channels) + d))
    out.append(("head/pool", (batch, last.out_channels)))
    out.append(("logits", (batch, config.num_classes)))
    return out


class Network:
    """Shared macro wiring; subclasses decide what lives on cell edges."""

    def __init__(self, config: SupernetConfig, seed: int):
        self.config = config.validate()
        self.seed = int(seed)
        self.store = ParamStore(seed)
        self.plans = plan_cells(config)
        C0 = config.stem_channels
        for m in ("pet", "ct", "sum"):
            self._add(f"stem/{m}/weight", (C0, 1, 3, 3, 3))
            self._add(f"stem/{m}/gamma", (C0,))
            self._add(f"stem/{m}/beta", (C0,))
        for p in self.plans:
            for side in (0, 1):
                base = f"cell/{p.name}/pre{side}"
                self._add(f"{base}/weight", (p.node_channels, p.input_channels[side], 1, 1, 1))
                self._add(f"{base}/gamma", (p.node_channels,))
                self._add(f"{base}/beta", (p.node_channels,))
            self._build_cell(p)
        Cr = self.plans[-1].out_channels
        for name in ("conv1", "conv2"):
            self._add(f"head/{name}/weight", (Cr, Cr, 3, 3, 3))
            self._add(f"head/{name}/gamma", (Cr,))
            self._add(f"head/{name}/beta", (Cr,))
        self._add("head/fc/weight", (config.num_classes, Cr))
        self._add("head/fc/bias", (config.num_classes,))

    def _add(self, name: str, shape) -> Tensor:
        return self.store.add(name, tuple(shape), init_kind(name))

    def _add_op(self, prefix: str, kind: str, channels: int) -> None:
        for pname, shape in op_param_specs(kind, channels):
            self._add(f"{prefix}/{kind}/{pname}", shape)

    def _op_params(self, prefix: str, kind: str, channels: int) -> dict[str, Tensor]:
        return {pname: self.store[f"{prefix}/{kind}/{pname}"] for pname, _ in op_param_specs(kind, channels)}

    def _build_cell(self, plan: CellPlan) -> None:
        raise NotImplementedError

    def _edge_fn(self, plan: CellPlan, ctx: dict):
        raise NotImplementedError

    def _begin_forward(self) -> dict:
        return {}

    # -- layers --------------------------------------------------------------

    def _p(self, base: str):
        s = self.store
        return s[f"{base}/weight"], s[f"{base}/gamma"], s[f"{base}/beta"]

    def _stem(self, modality: str, x: Tensor) -> Tensor:
        w, g, b = self._p(f"stem/{modality}")
        return T.normalize3d(T.conv3d(x, w, padding=1), g, b)

    def _preprocess(self, plan: CellPlan, side: int, x: Tensor) -> Tensor:
        w, g, b = self._p(f"cell/{plan.name}/pre{side}")
        return T.normalize3d(T.conv3d(x, w, stride=plan.input_strides[side]), g, b)

    def _cell(self, plan: CellPlan, a: Tensor, b: Tensor, ctx: dict) -> Tensor:
        s0 = self._preprocess(plan, 0, a)
        s1 = self._preprocess(plan, 1, b)
        return cell_forward(plan.spec, s0, s1, self._edge_fn(plan, ctx))

    def head(self, x: Tensor, trace: list | None = None) -> Tensor:
        for name in ("conv1", "conv2"):
            x = conv_block(x, *self._p(f"head/{name}"))
            if trace is not None:
                trace.append((f"head/{name}", x.shape))
        x = T.global_avg_pool(x)
        if trace is not None:
            trace.append(("head/pool", x.shape))
        return T.linear(x, self.store["head/fc/weight"], self.store["head/fc/bias"])

    def forward(self, pet, ct, trace: list | None = None) -> Tensor:
        """Logits [B, 2] for PET/CT batches of shape [B, 1, D, H, W]."""
        pet, ct = T.as_tensor(pet), T.as_tensor(ct)
        want = self.config.input_dims
        for label, v in (("pet", pet), ("ct", ct)):
            if v.data.ndim != 5 or v.shape[1] != 1 or v.shape[2:] != want:
                raise T.ShapeError(f"{label} input shape {v.shape} does not match [B, 1, {', '.join(map(str, want))}]")
        if pet.shape != ct.shape:
            raise T.ShapeError(f"pet {pet.shape} and ct {ct.shape} differ")
        mode = self.config.modality_mode
        if mode == "pet_only":
            ct = pet
        elif mode == "ct_only":
            pet = ct

        def note(label, t):
            if trace is not None:
                trace.append((label, t.shape))
            return t

        ctx = self._begin_forward()
        s_pet = note("stem/pet", self._stem("pet", pet))
        s_ct = note("stem/ct", self._stem("ct", ct))
        s_sum = note("stem/sum", self._stem("sum", T.add(pet, ct)))
        normal, *reductions = self.plans
        chain = [note("cell/normal", self._cell(normal, s_pet, s_ct, ctx))]
        for k, plan in enumerate(reductions, start=1):
            a, b = (chain[0], s_sum) if k == 1 else (chain[k - 1], chain[k - 2])
            chain.append(note(f"cell/{plan.name}", self._cell(plan, a, b, ctx)))
        logits = self.head(chain[-1], trace)
        return note("logits", logits)

    __call__ = forward

    def count_parameters(self) -> int:
        return self.store.count()

    def theta_params(self) -> list[tuple[str, Tensor]]:
        return self.store.items()


class Supernet(Network):
    """Every edge carries all candidate ops mixed by softmax(alpha)."""

    def __init__(self, config: SupernetConfig, seed: int, alpha: AlphaTable | None = None):
        self.alpha = alpha if alpha is not None else AlphaTable(config.num_nodes)
        if self.alpha.num_nodes != config.num_nodes:
            raise ConfigError("alpha table node count does not match config")
        super().__init__(config, seed)

    def _build_cell(self, plan: CellPlan) -> None:
        for i, j in plan.spec.edges:
            for kind in OP_KINDS:
                self._add_op(f"cell/{plan.name}/{edge_name(i, j)}", kind, plan.node_channels)

    def _begin_forward(self) -> dict:
        # one softmax per edge per cell type, shared by all cells of that type
        return {}

    def _edge_fn(self, plan: CellPlan, ctx: dict):
        def edge(i: int, j: int, x: Tensor) -> Tensor:
            key = (plan.cell_type, i, j)
            if key not in ctx:
                ctx[key] = T.softmax(self.alpha.logits(plan.cell_type, i, j))
            prefix = f"cell/{plan.name}/{edge_name(i, j)}"
            params = {k: self._op_params(prefix, k, plan.node_channels) for k in OP_KINDS}
            return mixed_op_forward(x, ctx[key], params)
        return edge

    def alpha_params(self) -> list[tuple[str, Tensor]]:
        return self.alpha.items()


def build_supernet(config: SupernetConfig, seed: int | None = None,
                   alpha: AlphaTable | None = None) -> Supernet:
    return Supernet(config, config.seed if seed is None else seed, alpha)


def count_parameters(net: Network) -> int:
    return net.count_parameters()
