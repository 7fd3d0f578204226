"""Structured channel pruning over a dependency graph.

Channels are traced from the layer that produces them (a conv or transpose
conv output) through pass-through layers to every tensor slice that must be
removed with them. Additive skips merge the channel sets of their two
operands; concatenations place a producer's channels at an offset in the
consumer's input axis. The connected components of this coupling are the
prune groups.
"""
from __future__ import annotations

import copy
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch

from dtpstereo.accounting import count_params
from dtpstereo.config import IMAGE, LAYER_KINDS, ModelConfig, strip_view
from dtpstereo.errors import AnalysisError

log = logging.getLogger(__name__)

NORM_PARAMS = ("weight", "bias", "running_mean", "running_var")


@dataclass
class Member:
    """Slice ``positions[k]`` of ``layer.param`` along ``axis`` belongs to group channel k."""

    layer: str
    param: str
    axis: int
    positions: list[int]
    kernel: bool  # only conv kernels count towards importance

    @property
    def tensor(self) -> str:
        return f"layers.{self.layer}.{self.param}"


@dataclass
class PruneGroup:
    name: str
    size: int
    members: list[Member] = field(default_factory=list)
    prunable: bool = True
    reason: str = ""

    def kernel_members(self) -> list[Member]:
        return [m for m in self.members if m.kernel]


@dataclass
class DependencyGraph:
    groups: list[PruneGroup]
    # nodes are "layer.param[axis]" slots; edges are symmetric couplings
    nodes: set[str]
    edges: set[tuple[str, str, str]]

    @property
    def prunable(self) -> list[PruneGroup]:
        return [g for g in self.groups if g.prunable]

    @property
    def unprunable(self) -> list[PruneGroup]:
        return [g for g in self.groups if not g.prunable]

    def group(self, name: str) -> PruneGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def sizes(self) -> dict[str, int]:
        return {g.name: g.size for g in self.prunable}


class _UnionFind:
    def __init__(self):
        self.parent: dict[str, str] = {}

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the earlier-created source as root so names are stable
            if self._order[ra] > self._order[rb]:
                ra, rb = rb, ra
            self.parent[rb] = ra


def _slot(layer, param, axis):
    return f"{layer}.{param}[{axis}]"


def build_dependency_graph(config: ModelConfig) -> DependencyGraph:
    uf = _UnionFind()
    uf._order = {}
    sizes: dict[str, int] = {}

    def new_source(name, size):
        uf.add(name)
        uf._order[name] = len(uf._order)
        sizes[name] = size

    new_source(IMAGE, 3)
    chans: dict[str, list[tuple[str, int]]] = {IMAGE: [(IMAGE, k) for k in range(3)]}
    # raw (layer, param, axis, kernel, source, idx, position)
    raw: list[tuple] = []
    edges: set[tuple[str, str, str]] = set()
    nodes: set[str] = set()
    slot_sources: dict[str, set[str]] = defaultdict(set)
    slot_rel: dict[str, str] = {}
    kinds = {IMAGE: "input"}
    producer_slot: dict[str, str] = {}

    def edge(a, b, rel):
        if a != b:
            edges.add((min(a, b), max(a, b), rel))

    for spec in config.layers:
        if spec.kind not in LAYER_KINDS:
            raise AnalysisError(f"{spec.name}: cannot analyse layer kind {spec.kind!r}")
        ins = [chans[strip_view(r)] for r in spec.inputs]
        if spec.kind in ("conv2d", "transpose_conv2d"):
            in_axis, out_axis = (1, 0) if spec.kind == "conv2d" else (0, 1)
            w_in, w_out = _slot(spec.name, "weight", in_axis), _slot(spec.name, "weight", out_axis)
            nodes.update({w_in, w_out})
            slot_rel[w_in] = "concat" if kinds[strip_view(spec.inputs[0])] == "concat" \
                else "producer-consumer"
            for pos, (src, idx) in enumerate(ins[0]):
                raw.append((spec.name, "weight", in_axis, True, src, idx, pos))
                slot_sources[w_in].add(src)
            new_source(spec.name, spec.out_channels)
            producer_slot[spec.name] = w_out
            out = [(spec.name, k) for k in range(spec.out_channels)]
            for k in range(spec.out_channels):
                raw.append((spec.name, "weight", out_axis, True, spec.name, k, k))
                if spec.bias:
                    raw.append((spec.name, "bias", 0, False, spec.name, k, k))
            if spec.bias:
                b = _slot(spec.name, "bias", 0)
                nodes.add(b)
                edge(w_out, b, "same-layer")
        elif spec.kind == "norm":
            out = list(ins[0])
            for p in NORM_PARAMS:
                s = _slot(spec.name, p, 0)
                nodes.add(s)
                slot_rel[s] = "norm-follows-conv"
                for pos, (src, idx) in enumerate(out):
                    raw.append((spec.name, p, 0, False, src, idx, pos))
                    slot_sources[s].add(src)
        elif spec.kind in ("activation", "bilinear_upsample"):
            out = list(ins[0])
        elif spec.kind == "skip_add":
            a, b = ins
            if len(a) != len(b):
                raise AnalysisError(f"{spec.name}: skip operands have {len(a)} and {len(b)} channels")
            for (sa, ia), (sb, ib) in zip(a, b):
                if ia != ib:
                    raise AnalysisError(f"{spec.name}: skip operands are not index-aligned")
                uf.union(sa, sb)
                if sa in producer_slot and sb in producer_slot:
                    edge(producer_slot[sa], producer_slot[sb], "skip-add")
            out = list(a)
        elif spec.kind == "concat":
            out = [c for part in ins for c in part]
        chans[spec.name] = out
        kinds[spec.name] = spec.kind

    for s, srcs in slot_sources.items():
        for src in srcs:
            if src in producer_slot:
                edge(producer_slot[src], s, slot_rel[s])

    # interface-fixed channel sets
    fixed = {uf.find(IMAGE): "input image channels"}
    logit_head = config.layers[-1]
    while logit_head.kind not in ("conv2d", "transpose_conv2d"):
        logit_head = config.layer(strip_view(logit_head.inputs[0]))
    for src, _ in chans[config.cost_output]:
        fixed.setdefault(uf.find(src), "cost volume d_max/4 channels")
    for src, _ in chans[strip_view(logit_head.inputs[0])]:
        fixed.setdefault(uf.find(src), "logit head input (d_max/4)")
    fixed.setdefault(uf.find(logit_head.name), "logit head output (d_max bins)")

    by_root: dict[str, dict] = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    for layer, param, axis, kernel, src, idx, pos in raw:
        by_root[uf.find(src)][(layer, param, axis, kernel)][idx].append(pos)

    groups = []
    for root in sorted(by_root, key=lambda r: uf._order[r]):
        size = sizes[root]
        members = []
        for (layer, param, axis, kernel), per_idx in by_root[root].items():
            if sorted(per_idx) != list(range(size)):
                raise AnalysisError(f"{layer}.{param}: partial channel coverage of group {root}")
            n_occ = {len(v) for v in per_idx.values()}
            if len(n_occ) != 1:
                raise AnalysisError(f"{layer}.{param}: uneven channel multiplicity in group {root}")
            for o in range(n_occ.pop()):
                members.append(Member(layer, param, axis, [per_idx[k][o] for k in range(size)], kernel))
        groups.append(PruneGroup(root, size, members, prunable=root not in fixed,
                                 reason=fixed.get(root, "")))
    return DependencyGraph(groups, nodes, edges)


def group_importance(group: PruneGroup, weights) -> np.ndarray:
    """Per-channel score: sum over kernel members of the L2 norm of the member's slice."""
    scores = np.zeros(group.size, dtype=np.float64)
    for m in group.kernel_members():
        w = weights[m.tensor].detach().to(torch.float64)
        sl = w.movedim(m.axis, 0)[torch.as_tensor(m.positions)]
        scores += sl.reshape(group.size, -1).norm(dim=1).cpu().numpy()
    return scores


def importance_table(graph: DependencyGraph, weights) -> dict[str, np.ndarray]:
    return {g.name: group_importance(g, weights) for g in graph.prunable}


def select_channels(scores, r: float) -> list[int]:
    """Indices of the floor(r * n) lowest scores, keeping at least one channel.

    Ties go to the lower index. Groups with fewer than two channels are skipped.
    """
    if not 0 < r < 1:
        raise ValueError(f"pruning rate must lie in (0, 1), got {r}")
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n < 2:
        log.info("skipping group of size %d", n)
        return []
    k = min(math.floor(r * n + 1e-9), n - 1)
    return sorted(int(i) for i in np.argsort(scores, kind="stable")[:k])


def pruned_config(config: ModelConfig, keep_sizes: dict[str, int], graph: DependencyGraph) -> ModelConfig:
    """Config with each prunable group's channel count set from ``keep_sizes``."""
    root_of = {}
    for g in graph.groups:
        for m in g.members:
            if m.param == "weight" and m.kernel:
                spec = config.layer(m.layer)
                out_axis = 0 if spec.kind == "conv2d" else 1
                if m.axis == out_axis:
                    root_of[m.layer] = g.name
    new = copy.deepcopy(config)
    out = {IMAGE: 3}
    for spec in new.layers:
        srcs = [out[strip_view(r)] for r in spec.inputs]
        spec.in_channels = sum(srcs) if spec.kind == "concat" else srcs[0]
        if spec.kind in ("conv2d", "transpose_conv2d"):
            spec.out_channels = keep_sizes.get(root_of[spec.name], spec.out_channels)
        else:
            spec.out_channels = spec.in_channels
        out[spec.name] = spec.out_channels
    return new.validate()


def prune_state(state: dict, graph: DependencyGraph, removed: dict[str, list[int]]) -> dict:
    drop: dict[tuple[str, int], set[int]] = defaultdict(set)
    for g in graph.prunable:
        idx = removed.get(g.name, [])
        for m in g.members:
            drop[(m.tensor, m.axis)].update(m.positions[k] for k in idx)
    new = {}
    for key, t in state.items():
        for (tensor, axis), positions in drop.items():
            if tensor == key and positions:
                keep = [i for i in range(t.shape[axis]) if i not in positions]
                t = t.index_select(axis, torch.as_tensor(keep, device=t.device))
        new[key] = t.clone()
    return new


def prune_step(model, r: float, graph: DependencyGraph | None = None):
    """Remove the lowest-importance channels of every prunable group.

    Returns ``(new_model, record)``. Importance is computed once, on the
    weights as they stand before this step.
    """
    from dtpstereo.model import DTPNet

    config = model.config
    graph = graph or build_dependency_graph(config)
    state = model.state_dict()
    removed, before, after = {}, {}, {}
    for g in graph.prunable:
        sel = select_channels(group_importance(g, state), r)
        before[g.name] = g.size
        after[g.name] = g.size - len(sel)
        if sel:
            removed[g.name] = sel
    params_before = count_params(config).total.params
    if not removed:
        new_model = model
        new_config = config
    else:
        new_config = pruned_config(config, after, graph)
        device = next(model.parameters()).device
        new_model = DTPNet(new_config).to(device)
        new_model.load_state_dict(prune_state(state, graph, removed))
        new_model.train(model.training)
    record = {
        "rate": r,
        "sizes_before": before,
        "sizes_after": after,
        "removed": removed,
        "params_before": params_before,
        "params_after": count_params(new_config).total.params,
    }
    return new_model, record
