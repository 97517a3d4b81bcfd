"""Tree-structured conditional networks with information-gain routers.

Each split node runs a classification stack (F) on the samples that reach it
and a router stack (H) that produces branch logits. Routers either read an
intermediate F output of their node (``fed_from_F``) or form a separate
parallel network (``independent``) whose root reads the input image. Leaves
end in a C-way linear classifier.

Execution is sparse: a node only ever computes on the rows of the minibatch
that were routed to it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import igmath
from .substrate import (
    ConfigurationError,
    LayerSpec,
    ParameterSet,
    forward_layer,
    init_layer_params,
)

log = logging.getLogger(__name__)

ROUTER_SOURCES = ("independent", "fed_from_F")


@dataclass(frozen=True)
class NodeSpec:
    index: int
    depth: int
    parent: int | None
    children: tuple[int, ...]
    f_layers: tuple[LayerSpec, ...]
    h_layers: tuple[LayerSpec, ...] = ()
    # index into f_layers whose output feeds this node's router (fed_from_F)
    f_tap: int | None = None
    # index into h_layers whose output feeds the children's routers (independent)
    h_tap: int | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def k(self) -> int:
        return len(self.children)


def _last_pool(layers: Sequence[LayerSpec]) -> int | None:
    idx = [i for i, l in enumerate(layers) if l.kind == "maxpool"]
    return idx[-1] if idx else None


def _first_pool(layers: Sequence[LayerSpec]) -> int | None:
    idx = [i for i, l in enumerate(layers) if l.kind == "maxpool"]
    return idx[0] if idx else None


@dataclass(frozen=True)
class TreeSpec:
    branching: tuple[int, ...]
    nodes: tuple[NodeSpec, ...]
    num_classes: int
    router_source: str = "fed_from_F"
    input_shape: tuple[int, int, int] = (1, 28, 28)

    def __post_init__(self) -> None:
        if self.router_source not in ROUTER_SOURCES:
            raise ConfigurationError(f"router_source must be one of {ROUTER_SOURCES}")
        if any(b < 2 for b in self.branching):
            raise ConfigurationError("every split level needs at least 2 children")
        expected_splits = 0
        width = 1
        for b in self.branching:
            expected_splits += width
            width *= b
        if len(self.split_nodes) != expected_splits or len(self.leaf_nodes) != width:
            raise ConfigurationError("node list is inconsistent with the branching list")
        for node in self.nodes:
            if node.is_leaf:
                last = node.f_layers[-1] if node.f_layers else None
                if last is None or last.kind != "fully_connected" or last.units != self.num_classes:
                    raise ConfigurationError(
                        f"leaf {node.index} must end in a {self.num_classes}-way fully_connected layer"
                    )
            else:
                if node.k != self.branching[node.depth]:
                    raise ConfigurationError(f"node {node.index} child count disagrees with branching")
                last = node.h_layers[-1] if node.h_layers else None
                if last is None or last.kind != "fully_connected" or last.units != node.k:
                    raise ConfigurationError(
                        f"router of node {node.index} must end in a {node.k}-way fully_connected head"
                    )
                if self.router_source == "fed_from_F" and node.f_tap is None:
                    raise ConfigurationError(f"node {node.index} has no F tap for its router")
                if (
                    self.router_source == "independent"
                    and any(not self.nodes[c].is_leaf for c in node.children)
                    and node.h_tap is None
                ):
                    raise ConfigurationError(f"node {node.index} has no H tap for child routers")

    @classmethod
    def from_levels(
        cls,
        branching: Sequence[int],
        f_levels: Sequence[Sequence[LayerSpec]],
        h_levels: Sequence[Sequence[LayerSpec]] = (),
        num_classes: int = 10,
        router_source: str = "fed_from_F",
        input_shape: tuple[int, int, int] = (1, 28, 28),
    ) -> "TreeSpec":
        """Build a tree whose nodes at the same depth share one layer recipe.

        ``f_levels`` has one stack per depth including the leaf level;
        ``h_levels`` has one stack per split depth.
        """
        branching = tuple(int(b) for b in branching)
        if len(f_levels) != len(branching) + 1:
            raise ConfigurationError("need one F stack per depth, leaves included")
        if len(h_levels) != len(branching):
            raise ConfigurationError("need one H stack per split depth")
        nodes: list[NodeSpec] = []
        # breadth-first numbering, root is 0
        pending: list[tuple[int, int | None, int]] = [(0, None, 0)]
        next_index = 1
        i = 0
        children_of: dict[int, list[int]] = {}
        while i < len(pending):
            idx, parent, depth = pending[i]
            children_of[idx] = []
            if depth < len(branching):
                for _ in range(branching[depth]):
                    pending.append((next_index, idx, depth + 1))
                    children_of[idx].append(next_index)
                    next_index += 1
            i += 1
        for idx, parent, depth in pending:
            f = tuple(f_levels[depth])
            leaf = depth == len(branching)
            h = () if leaf else tuple(h_levels[depth])
            nodes.append(
                NodeSpec(
                    index=idx,
                    depth=depth,
                    parent=parent,
                    children=tuple(children_of[idx]),
                    f_layers=f,
                    h_layers=h,
                    f_tap=None if leaf else _last_pool(f),
                    h_tap=None if leaf else _first_pool(h),
                )
            )
        return cls(branching, tuple(nodes), num_classes, router_source, input_shape)

    @property
    def split_nodes(self) -> list[NodeSpec]:
        return [n for n in self.nodes if not n.is_leaf]

    @property
    def leaf_nodes(self) -> list[NodeSpec]:
        return [n for n in self.nodes if n.is_leaf]

    def path_to(self, leaf: int) -> list[int]:
        path = [leaf]
        while self.nodes[path[-1]].parent is not None:
            path.append(self.nodes[path[-1]].parent)
        return path[::-1]

    def to_dict(self) -> dict:
        return {
            "branching": list(self.branching),
            "num_classes": self.num_classes,
            "router_source": self.router_source,
            "input_shape": list(self.input_shape),
            "nodes": [
                {
                    "index": n.index,
                    "depth": n.depth,
                    "parent": n.parent,
                    "children": list(n.children),
                    "f_layers": [l.to_dict() for l in n.f_layers],
                    "h_layers": [l.to_dict() for l in n.h_layers],
                    "f_tap": n.f_tap,
                    "h_tap": n.h_tap,
                }
                for n in self.nodes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeSpec":
        nodes = tuple(
            NodeSpec(
                index=n["index"],
                depth=n["depth"],
                parent=n["parent"],
                children=tuple(n["children"]),
                f_layers=tuple(LayerSpec.from_dict(l) for l in n["f_layers"]),
                h_layers=tuple(LayerSpec.from_dict(l) for l in n["h_layers"]),
                f_tap=n["f_tap"],
                h_tap=n["h_tap"],
            )
            for n in d["nodes"]
        )
        return cls(
            tuple(d["branching"]),
            nodes,
            d["num_classes"],
            d["router_source"],
            tuple(d["input_shape"]),
        )


@dataclass(frozen=True)
class RoutingPolicy:
    mode: str = "eval"
    rho: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("train", "eval"):
            raise ConfigurationError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.rho < 0:
            raise ConfigurationError(f"threshold must be >= 0, got {self.rho}")

    def check(self, k: int) -> None:
        # eval routing ignores the threshold entirely
        if self.mode == "train" and self.rho > 1.0 / k + 1e-12:
            raise ConfigurationError(f"threshold {self.rho} exceeds 1/K = {1.0 / k:.6g}")


def one_hot_psi(p) -> torch.Tensor:
    """Indicator of the largest entry per row; ties go to the lowest index."""
    p = torch.as_tensor(p)
    squeeze = p.dim() == 1
    if squeeze:
        p = p.unsqueeze(0)
    # torch.argmax returns the first maximal index
    out = torch.zeros_like(p)
    out[torch.arange(p.shape[0]), torch.argmax(p, dim=1)] = 1
    return out[0] if squeeze else out


def route(probs, policy: RoutingPolicy) -> torch.Tensor:
    """Boolean (n, K) membership of each row in each child.

    Train mode sends a sample into every child whose probability is at least
    the threshold; eval mode sends it only down its argmax branch.
    """
    probs = torch.as_tensor(probs).detach()
    if probs.dim() == 1:
        probs = probs.unsqueeze(0)
    policy.check(probs.shape[1])
    if policy.mode == "eval":
        return one_hot_psi(probs).bool()
    member = probs >= policy.rho
    # guard against float round-off when rho == 1/K and all rows sit exactly there
    empty = ~member.any(dim=1)
    if empty.any():
        member[empty] = one_hot_psi(probs[empty]).bool()
    return member


@dataclass
class RoutingState:
    batch_size: int
    masks: dict[int, torch.Tensor] = field(default_factory=dict)
    probs: dict[int, torch.Tensor] = field(default_factory=dict)
    starved: list[int] = field(default_factory=list)

    def leaf_assignment(self, tree: TreeSpec) -> torch.Tensor:
        """(N, n_leaves) boolean matrix of which leaves each sample reached."""
        return torch.stack([self.masks[n.index] for n in tree.leaf_nodes], dim=1)


class RoutingInvariantError(AssertionError):
    pass


def check_routing_invariants(state: RoutingState, tree: TreeSpec, mode: str, rho: float = 0.0) -> None:
    """Raise if masks break the partition (eval) or cover (train) rules."""
    root = state.masks[0]
    if not bool(root.all()):
        raise RoutingInvariantError("root mask is not all-true")
    for node in tree.split_nodes:
        parent = state.masks[node.index]
        child = torch.stack([state.masks[c] for c in node.children], dim=1)
        if bool((child.any(dim=1) != parent).any()):
            raise RoutingInvariantError(f"children of node {node.index} do not cover its mask")
        counts = child.sum(dim=1)
        if mode == "eval":
            if bool((counts[parent] != 1).any()):
                raise RoutingInvariantError(f"eval masks under node {node.index} are not disjoint")
        else:
            if bool((counts[parent] < 1).any()) or bool((counts > node.k).any()):
                raise RoutingInvariantError(f"train masks under node {node.index} out of range")
            if rho == 0.0 and bool((child[parent] != True).any()):  # noqa: E712
                raise RoutingInvariantError(f"rho=0 but node {node.index} did not route densely")
    leaves = state.leaf_assignment(tree).sum(dim=1)
    if mode == "eval" and bool((leaves != 1).any()):
        raise RoutingInvariantError("eval sample did not reach exactly one leaf")
    if bool((leaves < 1).any()):
        raise RoutingInvariantError("a sample reached no leaf")


@dataclass
class ForwardResult:
    leaf_logits: dict[int, torch.Tensor]
    leaf_rows: dict[int, torch.Tensor]
    state: RoutingState
    joints: dict[int, igmath.JointEstimate]


def _to_tensor(x, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    # copy: datasets hand out read-only arrays
    return torch.tensor(np.asarray(x), dtype=dtype)


class CIGN:
    """Parameters plus sparse forward pass for one ``TreeSpec``.

    A tree with an empty branching list is a plain feed-forward network,
    which is how the baselines are represented.
    """

    def __init__(self, tree: TreeSpec, seed: int = 0, dtype: torch.dtype = torch.float32):
        self.tree = tree
        self.dtype = dtype
        self.params = ParameterSet()
        gen = torch.Generator().manual_seed(seed)
        self._out_shapes: dict[tuple[int, str, int], tuple[int, ...]] = {}
        self._build(gen)

    def _build(self, gen: torch.Generator) -> None:
        tree = self.tree
        f_in: dict[int, tuple[int, ...]] = {0: tree.input_shape}
        h_in: dict[int, tuple[int, ...]] = {0: tree.input_shape}
        for node in tree.nodes:
            shape = f_in[node.index]
            f_shapes = []
            for li, layer in enumerate(node.f_layers):
                shape = init_layer_params(
                    layer, shape, f"n{node.index}.F{li}", "F", self.params, gen, self.dtype
                )
                f_shapes.append(shape)
            for c in node.children:
                f_in[c] = shape
            if node.is_leaf:
                continue
            if tree.router_source == "fed_from_F":
                hshape = f_shapes[node.f_tap]
            else:
                hshape = h_in[node.index]
            h_shapes = []
            for li, layer in enumerate(node.h_layers):
                hshape = init_layer_params(
                    layer, hshape, f"n{node.index}.H{li}", "H", self.params, gen, self.dtype
                )
                h_shapes.append(hshape)
            if tree.router_source == "independent" and node.h_tap is not None:
                for c in node.children:
                    h_in[c] = h_shapes[node.h_tap]

    def parameter_names(self, node: int, tag: str | None = None) -> list[str]:
        prefix = f"n{node}."
        return [
            name
            for name, p in self.params.items()
            if name.startswith(prefix) and (tag is None or p.tag == tag)
        ]

    def _run_stack(self, node: NodeSpec, which: str, x: torch.Tensor, mode: str, gen, tap: int | None):
        layers = node.f_layers if which == "F" else node.h_layers
        tapped = None
        for li, layer in enumerate(layers):
            x = forward_layer(layer, x, self.params, f"n{node.index}.{which}{li}", mode, gen)
            if li == tap:
                tapped = x
        return x, tapped

    def prepare_input(self, x) -> torch.Tensor:
        """Accept (N, H, W), (N, H, W, C), (N, C, H, W) or flat (N, H*W*C) images."""
        x = _to_tensor(x, self.dtype)
        c, h, w = self.tree.input_shape
        if x.dim() == 2:
            x = x.reshape(-1, h, w, c).permute(0, 3, 1, 2)
        elif x.dim() == 3:
            x = x.unsqueeze(1)
        elif x.dim() == 4 and x.shape[1:] == (h, w, c) and x.shape[1:] != (c, h, w):
            x = x.permute(0, 3, 1, 2)
        if tuple(x.shape[1:]) != (c, h, w):
            raise ConfigurationError(f"input shape {tuple(x.shape)} incompatible with {(c, h, w)}")
        return x.contiguous()

    def forward(
        self,
        x,
        labels=None,
        policy: RoutingPolicy = RoutingPolicy(),
        tau: float = 1.0,
        generator: torch.Generator | None = None,
    ) -> ForwardResult:
        x = self.prepare_input(x)
        n = x.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        if not tau > 0:
            raise igmath.DomainError(f"temperature must be positive, got {tau}")
        if labels is not None:
            labels = _to_tensor(labels, torch.long)
        mode = policy.mode
        tree = self.tree
        state = RoutingState(batch_size=n)
        leaf_logits: dict[int, torch.Tensor] = {}
        leaf_rows: dict[int, torch.Tensor] = {}
        joints: dict[int, igmath.JointEstimate] = {}

        # depth-first traversal over (node, batch rows, F input, H input)
        stack = [(0, torch.arange(n), x, x)]
        while stack:
            idx, rows, f_in, h_in = stack.pop()
            node = tree.nodes[idx]
            mask = torch.zeros(n, dtype=torch.bool)
            mask[rows] = True
            state.masks[idx] = mask
            if rows.numel() == 0:
                if not node.is_leaf:
                    state.starved.append(idx)
                    log.debug("starved node %d", idx)
                    for c in node.children:
                        stack.append((c, rows, f_in[:0], h_in[:0]))
                continue
            fed = tree.router_source == "fed_from_F"
            out, f_tap = self._run_stack(node, "F", f_in, mode, generator, node.f_tap if fed else None)
            if node.is_leaf:
                leaf_logits[idx] = out
                leaf_rows[idx] = rows
                continue
            router_in = f_tap if fed else h_in
            branch_logits, h_tap = self._run_stack(
                node, "H", router_in, mode, generator, None if fed else node.h_tap
            )
            probs = igmath.tempered_softmax(branch_logits, tau)
            state.probs[idx] = probs
            if labels is not None:
                joints[idx] = igmath.estimate_joint(labels[rows], probs, tree.num_classes)
            member = route(probs, policy)
            for k, c in reversed(list(enumerate(node.children))):
                sel = member[:, k]
                sub_rows = rows[sel]
                stack.append(
                    (c, sub_rows, out[sel], h_tap[sel] if h_tap is not None else h_in[sel])
                )
        return ForwardResult(leaf_logits, leaf_rows, state, joints)

    def predict_logits(self, x, tau: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
        """Eval-mode logits (N, C) and the leaf index each sample was routed to."""
        res = self.forward(x, policy=RoutingPolicy("eval"), tau=tau)
        n = res.state.batch_size
        logits = torch.empty(n, self.tree.num_classes, dtype=self.dtype)
        leaf = torch.full((n,), -1, dtype=torch.long)
        for idx, rows in res.leaf_rows.items():
            logits[rows] = res.leaf_logits[idx].detach()
            leaf[rows] = idx
        return logits, leaf


def classification_loss(
    leaf_logits: dict[int, torch.Tensor],
    leaf_rows: dict[int, torch.Tensor],
    labels,
    batch_size: int,
) -> torch.Tensor:
    """Mean over samples of the average cross-entropy across the leaves each reached.

    With single-path routing this is the usual mean cross-entropy of the
    selected expert.
    """
    labels = _to_tensor(labels, torch.long)
    visits = torch.zeros(batch_size, dtype=torch.long)
    for rows in leaf_rows.values():
        visits[rows] += 1
    if bool((visits == 0).any()):
        raise RoutingInvariantError("a sample reached no leaf")
    total = None
    for idx, logits in leaf_logits.items():
        rows = leaf_rows[idx]
        ce = F.cross_entropy(logits, labels[rows], reduction="none")
        term = (ce / visits[rows].to(ce.dtype)).sum()
        total = term if total is None else total + term
    return total / batch_size


def ig_losses(
    joints: dict[int, igmath.JointEstimate], lambda_ig: float, lambda_balance: float
) -> dict[int, torch.Tensor]:
    return {i: igmath.ig_loss(j, lambda_ig, lambda_balance) for i, j in joints.items()}


def total_loss(classification: torch.Tensor, node_ig_losses: dict[int, torch.Tensor]) -> torch.Tensor:
    loss = classification
    for v in node_ig_losses.values():
        loss = loss + v
    return loss
