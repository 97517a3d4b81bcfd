"""Parameter accounting, routing histograms, metric logs and result tables."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .dataio import LabeledDataset
from .graph import CIGN, RoutingPolicy, check_routing_invariants

# classes under this share of a node's samples are left out of rendered histograms
ELIDE_BELOW = 0.01


def count_params(model: CIGN) -> dict:
    """Per-node F/H counts, per-expert path budgets and totals."""
    tree = model.tree
    nodes = []
    for node in tree.nodes:
        f = sum(model.params[n].size for n in model.parameter_names(node.index, "F"))
        h = sum(model.params[n].size for n in model.parameter_names(node.index, "H"))
        nodes.append({"node": node.index, "depth": node.depth, "leaf": node.is_leaf, "F": f, "H": h})
    by_index = {n["node"]: n for n in nodes}
    paths = []
    for leaf in tree.leaf_nodes:
        path = tree.path_to(leaf.index)
        f = sum(by_index[i]["F"] for i in path)
        h = sum(by_index[i]["H"] for i in path)
        paths.append({"leaf": leaf.index, "path": path, "expert_F": f, "routers_H": h, "visited": f + h})
    total_f = model.params.count("F")
    total_h = model.params.count("H")
    return {
        "nodes": nodes,
        "paths": paths,
        "total_F": total_f,
        "total_H": total_h,
        "total": total_f + total_h,
    }


def render_param_counts(counts: dict, label: str = "") -> str:
    lines = []
    if label:
        lines.append(f"model: {label}")
    lines.append(f"{'node':>5} {'depth':>5} {'kind':>6} {'F params':>10} {'H params':>10}")
    for n in counts["nodes"]:
        kind = "leaf" if n["leaf"] else "split"
        lines.append(f"{n['node']:>5} {n['depth']:>5} {kind:>6} {n['F']:>10} {n['H']:>10}")
    lines.append("")
    lines.append(f"{'leaf':>5} {'path':>12} {'expert F':>10} {'routers H':>10} {'visited':>10}")
    for p in counts["paths"]:
        path = "-".join(str(i) for i in p["path"])
        lines.append(
            f"{p['leaf']:>5} {path:>12} {p['expert_F']:>10} {p['routers_H']:>10} {p['visited']:>10}"
        )
    lines.append("")
    lines.append(f"total F: {counts['total_F']}")
    lines.append(f"total H: {counts['total_H']}")
    lines.append(f"total:   {counts['total']}")
    return "\n".join(lines) + "\n"


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


@dataclass
class LeafHistogram:
    num_classes: int
    counts: dict[int, np.ndarray] = field(default_factory=dict)
    children: dict[int, tuple[int, ...]] = field(default_factory=dict)
    leaves: tuple[int, ...] = ()
    class_names: tuple[str, ...] = ()

    def total(self, node: int) -> int:
        return int(self.counts[node].sum())

    def label_entropy(self, node: int) -> float:
        return _entropy(self.counts[node])

    def expected_leaf_entropy(self) -> float:
        n = self.total(0)
        return sum(self.total(l) / n * self.label_entropy(l) for l in self.leaves)

    def dominant_child(self, node: int, cls: int) -> int:
        kids = self.children[node]
        return kids[int(np.argmax([self.counts[c][cls] for c in kids]))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "class", "name", "count"])
        for node in sorted(self.counts):
            for c in range(self.num_classes):
                w.writerow([node, c, self._name(c), int(self.counts[node][c])])
        return buf.getvalue()

    def _name(self, c: int) -> str:
        return self.class_names[c] if self.class_names else str(c)

    def render(self) -> str:
        lines = []

        def walk(node: int, indent: int) -> None:
            total = self.total(node)
            shown = [
                (self._name(c), int(v))
                for c, v in enumerate(self.counts[node])
                if total and v / total >= ELIDE_BELOW
            ]
            shown.sort(key=lambda t: -t[1])
            body = ", ".join(f"{name}:{v}" for name, v in shown)
            kind = "leaf" if node in self.leaves else "node"
            lines.append(
                f"{'  ' * indent}{kind} {node} (n={total}, H={self.label_entropy(node):.4f}) {body}"
            )
            for c in self.children.get(node, ()):
                walk(c, indent + 1)

        walk(0, 0)
        lines.append(f"expected leaf entropy: {self.expected_leaf_entropy():.6f}")
        lines.append(f"root label entropy:    {self.label_entropy(0):.6f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "counts": {str(k): v.tolist() for k, v in sorted(self.counts.items())},
            "label_entropy": {str(k): self.label_entropy(k) for k in sorted(self.counts)},
            "expected_leaf_entropy": self.expected_leaf_entropy(),
        }


def leaf_histogram(
    model: CIGN,
    dataset: LabeledDataset,
    batch_size: int = 500,
    class_names: Sequence[str] = (),
) -> LeafHistogram:
    """Per-node class counts under eval routing over a whole dataset split."""
    tree = model.tree
    c = tree.num_classes
    hist = LeafHistogram(
        num_classes=c,
        counts={n.index: np.zeros(c, dtype=np.int64) for n in tree.nodes},
        children={n.index: n.children for n in tree.split_nodes},
        leaves=tuple(n.index for n in tree.leaf_nodes),
        class_names=tuple(class_names),
    )
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start:start + batch_size]
            y = dataset.labels[start:start + batch_size]
            res = model.forward(x, policy=RoutingPolicy("eval"))
            check_routing_invariants(res.state, tree, "eval")
            for idx, mask in res.state.masks.items():
                hist.counts[idx] += np.bincount(y[mask.numpy()], minlength=c)
    return hist


# ---- metric persistence -------------------------------------------------------


def append_records(path: str | os.PathLike, records: Iterable[dict]) -> None:
    """Append JSON lines; existing content is never rewritten."""
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_summary(label: str, seed: int, accuracy: float, params: int, status: str = "ok") -> dict:
    return {
        "type": "run",
        "model": label,
        "seed": seed,
        "test_accuracy": accuracy,
        "params": params,
        "status": status,
    }


def aggregate(records: Iterable[dict]) -> list[dict]:
    """Max/Min/Avg test accuracy per model label over finished runs."""
    groups: dict[str, list[dict]] = {}
    for r in records:
        if r.get("type") == "run" and r.get("status") == "ok":
            groups.setdefault(r["model"], []).append(r)
    rows = []
    for label in sorted(groups):
        accs = [g["test_accuracy"] for g in groups[label]]
        rows.append(
            {
                "model": label,
                "runs": len(accs),
                "max": max(accs),
                "min": min(accs),
                "avg": math.fsum(accs) / len(accs),
                "params": groups[label][0]["params"],
            }
        )
    return rows


def render_table(rows: Sequence[dict]) -> str:
    header = ["Model", "Max Ac.", "Min Ac.", "Avg Ac.", "# of Params", "Runs"]
    body = [
        [
            r["model"],
            f"%{100 * r['max']:.2f}",
            f"%{100 * r['min']:.2f}",
            f"%{100 * r['avg']:.2f}",
            str(r["params"]),
            str(r["runs"]),
        ]
        for r in rows
    ]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    out = [sep, line(header), sep] + [line(b) for b in body] + [sep]
    return "\n".join(out) + "\n"


def render_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "max_acc", "min_acc", "avg_acc", "params", "runs"])
    for r in rows:
        w.writerow([r["model"], f"{r['max']:.6f}", f"{r['min']:.6f}", f"{r['avg']:.6f}", r["params"], r["runs"]])
    return buf.getvalue()


def report_from_file(path: str | os.PathLike) -> tuple[str, str]:
    rows = aggregate(read_records(path))
    return render_table(rows), render_csv(rows)


class OutputLock:
    """Exclusive ownership of an output directory via a lock file."""

    def __init__(self, directory: str | os.PathLike):
        self.path = Path(directory) / ".lock"

    def __enter__(self) -> "OutputLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"output directory {self.path.parent} is locked by another run") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc) -> None:
        self.path.unlink(missing_ok=True)
