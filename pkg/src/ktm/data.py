"""Character tokenizer, Textualized Tree task generator and JSONL records."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)

PAD, STOP, LABEL_TRUE, LABEL_FALSE = 0, 1, 2, 3
N_RESERVED = 4
REPLACEMENT_CHAR = "?"
ALPHABET = "\n\t" + "".join(chr(c) for c in range(32, 127))


class Tokenizer:
    """Character-level tokenizer over printable ASCII plus newline and tab.

    Ids 0-3 are reserved (pad, stop, label-true, label-false) and never come
    out of :meth:`encode`. Characters outside the alphabet map to ``?`` and
    are counted in ``replaced``.
    """

    def __init__(self, alphabet: str = ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise ContractError("alphabet has duplicate characters")
        self.alphabet = alphabet
        self.char_to_id = {c: i + N_RESERVED for i, c in enumerate(alphabet)}
        self.id_to_char = {i: c for c, i in self.char_to_id.items()}
        self.replaced = 0
        self.pad_id, self.stop_id = PAD, STOP
        self.true_id, self.false_id = LABEL_TRUE, LABEL_FALSE

    @property
    def vocab_size(self) -> int:
        return N_RESERVED + len(self.alphabet)

    @property
    def label_ids(self) -> dict:
        return {"true": self.true_id, "false": self.false_id}

    def encode(self, text: str) -> list:
        repl = self.char_to_id[REPLACEMENT_CHAR]
        ids = []
        for ch in text:
            i = self.char_to_id.get(ch)
            if i is None:
                self.replaced += 1
                i = repl
            ids.append(i)
        return ids

    def decode(self, ids) -> str:
        names = {PAD: "", STOP: "", LABEL_TRUE: "true", LABEL_FALSE: "false"}
        out = []
        for i in ids:
            i = int(i)
            out.append(self.id_to_char[i] if i in self.id_to_char else names.get(i, ""))
        return "".join(out)

    def target_ids(self, record: "SampleRecord") -> list:
        """Completion tokens the model is trained to emit, ending with stop."""
        if record.meta.get("task") == "tree":
            return [self.label_ids[record.completion], self.stop_id]
        return self.encode(record.completion) + [self.stop_id]


# -- trees ---------------------------------------------------------------------

@dataclass
class Tree:
    """Rooted ordered tree; node ``k`` is named ``n<k>`` in breadth-first order."""

    parent: list  # parent[0] is -1
    children: list = field(default_factory=list)

    def __post_init__(self):
        if not self.children:
            self.children = [[] for _ in self.parent]
            for node, par in enumerate(self.parent):
                if par >= 0:
                    self.children[par].append(node)

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    def name(self, node: int) -> str:
        return f"n{node}"

    def depth(self, node: int) -> int:
        d = 0
        while self.parent[node] >= 0:
            node = self.parent[node]
            d += 1
        return d

    def render(self) -> str:
        lines = []
        stack = [(0, 0)]
        while stack:
            node, depth = stack.pop()
            lines.append("  " * depth + self.name(node))
            for c in reversed(self.children[node]):
                stack.append((c, depth + 1))
        return "\n".join(lines)


@dataclass
class TreeSample:
    tree: Tree
    text: str
    query: tuple
    label: bool

    def prompt(self) -> str:
        a, b = self.query
        return f"{self.text}\n\nparent: {self.tree.name(a)} child: {self.tree.name(b)}?"

    def to_record(self, seed: int) -> "SampleRecord":
        return SampleRecord(self.prompt(), "true" if self.label else "false",
                            {"task": "tree", "seed": seed, "n_nodes": self.tree.n_nodes})


def _random_tree(n_nodes: int, rng: np.random.Generator) -> Tree:
    # uniform attachment, then relabel in breadth-first order
    raw_parent = [-1] + [int(rng.integers(0, i)) for i in range(1, n_nodes)]
    raw_children = [[] for _ in range(n_nodes)]
    for node in range(1, n_nodes):
        raw_children[raw_parent[node]].append(node)
    order, head = [0], 0
    while head < len(order):
        order.extend(raw_children[order[head]])
        head += 1
    new_id = {old: new for new, old in enumerate(order)}
    parent = [-1] * n_nodes
    for old in range(1, n_nodes):
        parent[new_id[old]] = new_id[raw_parent[old]]
    return Tree(parent)


def gen_tree(n_nodes: int, seed: int, label: bool | None = None) -> TreeSample:
    """Deterministic tree sample. ``label=None`` draws the label from the seed."""
    if not 2 <= n_nodes <= 150:
        raise ContractError(f"n_nodes must be in [2, 150], got {n_nodes}")
    rng = np.random.default_rng(seed)
    tree = _random_tree(n_nodes, rng)
    if label is None:
        label = bool(rng.random() < 0.5)
    if label:
        child = int(rng.integers(1, n_nodes))
        query = (tree.parent[child], child)
    else:
        negatives = [(a, b) for a in range(n_nodes) for b in range(n_nodes)
                     if a != b and tree.parent[b] != a]
        query = negatives[int(rng.integers(0, len(negatives)))]
    return TreeSample(tree, tree.render(), query, label)


def label_oracle(tree: Tree, node_a: int, node_b: int) -> bool:
    """True iff ``node_a`` is the direct parent of ``node_b``."""
    for node in (node_a, node_b):
        if not 0 <= node < tree.n_nodes:
            raise ContractError(f"node {node} not in tree of {tree.n_nodes} nodes")
    return tree.parent[node_b] == node_a


def gen_tree_dataset(n_samples: int, n_nodes, seed: int) -> list:
    """Balanced stream of tree records: exactly half positive when ``n_samples`` is even.

    ``n_nodes`` is an int or an inclusive ``(lo, hi)`` range.
    """
    rng = np.random.default_rng(seed)
    labels = np.array([i % 2 == 0 for i in range(n_samples)])
    rng.shuffle(labels)
    lo, hi = (n_nodes, n_nodes) if isinstance(n_nodes, int) else n_nodes
    sizes = rng.integers(lo, hi + 1, size=n_samples)
    sample_seeds = rng.integers(0, 2**62, size=n_samples)
    out = []
    for lab, size, s in zip(labels, sizes, sample_seeds):
        out.append(gen_tree(int(size), int(s), label=bool(lab)).to_record(int(s)))
    return out


# -- records -------------------------------------------------------------------

@dataclass
class SampleRecord:
    prompt: str
    completion: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.completion:
            raise ContractError("completion must be nonempty")

    def to_json(self) -> str:
        return json.dumps({"prompt": self.prompt, "completion": self.completion, "meta": self.meta},
                          ensure_ascii=False, sort_keys=True)


MAX_MALFORMED_FRACTION = 0.01


def load_jsonl(path) -> Iterator[SampleRecord]:
    """Yield records in file order, skipping (and logging) malformed lines.

    Raises :class:`ContractError` at the end when more than 1% of lines were
    malformed; ``OSError`` propagates for unreadable files.
    """
    path = Path(path)
    bad, total = [], 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            total += 1
            try:
                obj = json.loads(line)
                rec = SampleRecord(obj["prompt"], obj["completion"], obj.get("meta") or {})
                if not isinstance(rec.prompt, str) or not isinstance(rec.completion, str):
                    raise TypeError("prompt/completion must be strings")
            except (ValueError, KeyError, TypeError, ContractError) as exc:
                log.warning("%s:%d: malformed record (%s)", path, lineno, exc)
                bad.append(lineno)
                continue
            yield rec
    if total and len(bad) / total > MAX_MALFORMED_FRACTION:
        raise ContractError(
            f"{path}: {len(bad)} of {total} lines malformed (first at line {bad[0]})"
        )


def write_jsonl(records, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
