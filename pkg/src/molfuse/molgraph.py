"""Molecular graphs from a SMILES subset.

Covers parsing, adjacency/hop-distance matrices, motif fragmentation with a
corpus-level vocabulary, and the node serialization order consumed by the
sequence projector. Everything here is a pure function over immutable inputs.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

# Supported atom alphabet. Two-character symbols must be matched first.
ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_SYMBOLS = {"c": "C", "n": "N", "o": "O", "s": "S"}
HETEROATOMS = {"N", "O", "S", "P"}
_BOND_CHARS = {"-": 1, "=": 2, "#": 3}

AROMATIC = "aromatic"
BondOrder = Union[int, str]  # 1, 2, 3 or AROMATIC


class SmilesError(ValueError):
    """Parse failure at a known byte offset of the input string."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class UnbalancedParenthesis(SmilesError):
    pass


class UnmatchedRingBond(SmilesError):
    pass


class UnknownAtomSymbol(SmilesError):
    pass


class DisconnectedInput(SmilesError):
    pass


class EmptyCorpus(ValueError):
    pass


@dataclass(frozen=True)
class AtomRecord:
    element: str
    aromatic: bool
    degree: int


@dataclass(frozen=True)
class MolGraph:
    """Connected heavy-atom graph. Implicit hydrogens are never materialized."""

    atoms: tuple[AtomRecord, ...]
    bonds: tuple[tuple[int, int, BondOrder], ...]

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n_atoms)]
        for u, v, _ in self.bonds:
            adj[u].append(v)
            adj[v].append(u)
        return adj


@dataclass(frozen=True)
class StructMatrices:
    """Binary adjacency and all-pairs BFS hop distances, both symmetric."""

    adjacency: np.ndarray
    distance: np.ndarray


@dataclass(frozen=True)
class MotifSet:
    """Partition of atoms into fragments after cleavage.

    Fragments are stored in canonical order: size descending, ties broken by
    the smallest original atom index. ``keys`` holds one canonical key per
    fragment (same order); ``cleaved`` lists the bonds that were cut.
    """

    fragments: tuple[tuple[int, ...], ...]
    keys: tuple[str, ...]
    cleaved: tuple[tuple[int, int], ...]


def parse_smiles(text: str) -> MolGraph:
    """Parse the SMILES subset into a connected MolGraph.

    Subset: atoms B,C,N,O,P,S,F,Cl,Br,I; aromatic c,n,o,s; bonds ``- = #``;
    branches; single-digit ring closures 1-9. Implicit bonds between two
    aromatic atoms are aromatic, otherwise single.
    """
    if not text:
        raise UnknownAtomSymbol("empty input", 0)

    atoms: list[tuple[str, bool]] = []  # (element, aromatic)
    bonds: dict[tuple[int, int], BondOrder] = {}
    prev: int | None = None
    pending: int | None = None  # explicit bond order awaiting its right side
    branch_stack: list[tuple[int, int]] = []  # (saved prev, '(' offset)
    ring_open: dict[str, tuple[int, int | None, int]] = {}

    def add_bond(u: int, v: int, order: BondOrder, offset: int) -> None:
        if u == v:
            raise UnmatchedRingBond("ring bond to self", offset)
        key = (min(u, v), max(u, v))
        if key in bonds:
            raise UnmatchedRingBond("duplicate bond", offset)
        bonds[key] = order

    def implicit_order(u: int, v: int) -> BondOrder:
        return AROMATIC if atoms[u][1] and atoms[v][1] else 1

    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == ".":
            raise DisconnectedInput("multi-component input", i)
        if ch in _BOND_CHARS:
            if pending is not None:
                raise UnknownAtomSymbol("expected atom after bond", i)
            pending = _BOND_CHARS[ch]
            i += 1
            continue
        if ch == "(":
            if prev is None:
                raise UnbalancedParenthesis("branch before any atom", i)
            if pending is not None:
                raise UnknownAtomSymbol("expected atom after bond", i)
            branch_stack.append((prev, i))
            i += 1
            continue
        if ch == ")":
            if not branch_stack:
                raise UnbalancedParenthesis("unmatched ')'", i)
            if pending is not None:
                raise UnknownAtomSymbol("expected atom after bond", i)
            prev, _ = branch_stack.pop()
            i += 1
            continue
        if ch.isdigit():
            if ch == "0":
                raise UnknownAtomSymbol("ring-closure digits are 1-9", i)
            if prev is None:
                raise UnmatchedRingBond("ring closure before any atom", i)
            if ch in ring_open:
                other, open_order, _ = ring_open.pop(ch)
                order: BondOrder | None = pending if pending is not None else open_order
                if order is None:
                    order = implicit_order(other, prev)
                add_bond(other, prev, order, i)
            else:
                ring_open[ch] = (prev, pending, i)
            pending = None
            i += 1
            continue

        # Atom symbol: try two characters first (Cl, Br).
        sym = text[i : i + 2]
        if sym not in ("Cl", "Br"):
            sym = ch
        if sym in AROMATIC_SYMBOLS:
            element, aromatic = AROMATIC_SYMBOLS[sym], True
        elif sym in ELEMENTS:
            element, aromatic = sym, False
        else:
            raise UnknownAtomSymbol(f"unknown atom symbol {ch!r}", i)
        idx = len(atoms)
        atoms.append((element, aromatic))
        if prev is not None:
            order = pending if pending is not None else implicit_order(prev, idx)
            add_bond(prev, idx, order, i)
        pending = None
        prev = idx
        i += len(sym)

    if pending is not None:
        raise UnknownAtomSymbol("expected atom after bond", n)
    if branch_stack:
        raise UnbalancedParenthesis("unclosed branch", branch_stack[-1][1])
    if ring_open:
        first = min(off for _, _, off in ring_open.values())
        raise UnmatchedRingBond("unclosed ring bond", first)

    degrees = [0] * len(atoms)
    for u, v in bonds:
        degrees[u] += 1
        degrees[v] += 1
    records = tuple(
        AtomRecord(element, aromatic, degrees[k])
        for k, (element, aromatic) in enumerate(atoms)
    )
    bond_list = tuple((u, v, order) for (u, v), order in sorted(bonds.items()))
    return MolGraph(atoms=records, bonds=bond_list)


def struct_matrices(g: MolGraph) -> StructMatrices:
    """Adjacency matrix plus all-pairs hop distances by BFS from each node."""
    n = g.n_atoms
    adjacency = np.zeros((n, n), dtype=np.int64)
    for u, v, _ in g.bonds:
        adjacency[u, v] = 1
        adjacency[v, u] = 1
    adj = g.neighbors()
    distance = np.zeros((n, n), dtype=np.int64)
    for src in range(n):
        dist = np.full(n, -1, dtype=np.int64)
        dist[src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        distance[src] = dist
    return StructMatrices(adjacency=adjacency, distance=distance)


def _bridges(g: MolGraph) -> set[tuple[int, int]]:
    """Bridge edges (edges on no cycle), via iterative Tarjan low-links."""
    n = g.n_atoms
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]  # (neighbor, edge id)
    for eid, (u, v, _) in enumerate(g.bonds):
        adj[u].append((v, eid))
        adj[v].append((u, eid))
    disc = [-1] * n
    low = [0] * n
    bridges: set[tuple[int, int]] = set()
    timer = 0
    for root in range(n):
        if disc[root] >= 0:
            continue
        stack: list[tuple[int, int, int]] = [(root, -1, 0)]  # node, in-edge id, child ptr
        while stack:
            node, in_edge, ptr = stack.pop()
            if ptr == 0:
                disc[node] = low[node] = timer
                timer += 1
            if ptr < len(adj[node]):
                stack.append((node, in_edge, ptr + 1))
                child, eid = adj[node][ptr]
                if eid == in_edge:
                    continue
                if disc[child] >= 0:
                    low[node] = min(low[node], disc[child])
                else:
                    stack.append((child, eid, 0))
            elif in_edge >= 0:
                u, v, _ = g.bonds[in_edge]
                parent = u if v == node else v
                low[parent] = min(low[parent], low[node])
                if low[node] > disc[parent]:
                    bridges.add((min(u, v), max(u, v)))
    return bridges


def ring_membership(g: MolGraph) -> np.ndarray:
    """Boolean per-atom flag: the atom lies on some cycle."""
    bridges = _bridges(g)
    in_ring = np.zeros(g.n_atoms, dtype=bool)
    for u, v, _ in g.bonds:
        if (min(u, v), max(u, v)) not in bridges:
            in_ring[u] = True
            in_ring[v] = True
    return in_ring


def _fragment_key(g: MolGraph, fragment: Sequence[int], in_ring: np.ndarray) -> str:
    members = set(fragment)
    induced_deg = {v: 0 for v in fragment}
    for u, v, _ in g.bonds:
        if u in members and v in members:
            induced_deg[u] += 1
            induced_deg[v] += 1
    elements = ",".join(sorted(g.atoms[v].element for v in fragment))
    has_ring = int(any(in_ring[v] for v in fragment))
    degs = ",".join(str(d) for d in sorted(induced_deg.values()))
    return f"{elements}|{has_ring}|{degs}"


def fragment_motifs(g: MolGraph) -> MotifSet:
    """Partition the molecule by cleaving designated acyclic single bonds.

    A bond is cleaved iff it is acyclic (a bridge), has order 1, and either
    (a) exactly one endpoint lies on a ring, or (b) one endpoint is a
    heteroatom (N, O, S, P) and the other a carbon.
    """
    bridges = _bridges(g)
    in_ring = ring_membership(g)
    cleaved: list[tuple[int, int]] = []
    kept_adj: list[list[int]] = [[] for _ in range(g.n_atoms)]
    for u, v, order in g.bonds:
        cut = False
        if order == 1 and (min(u, v), max(u, v)) in bridges:
            eu, ev = g.atoms[u].element, g.atoms[v].element
            rule_a = bool(in_ring[u]) != bool(in_ring[v])
            rule_b = (eu in HETEROATOMS and ev == "C") or (ev in HETEROATOMS and eu == "C")
            cut = rule_a or rule_b
        if cut:
            cleaved.append((min(u, v), max(u, v)))
        else:
            kept_adj[u].append(v)
            kept_adj[v].append(u)

    seen = [False] * g.n_atoms
    fragments: list[tuple[int, ...]] = []
    for start in range(g.n_atoms):
        if seen[start]:
            continue
        comp = []
        queue = deque([start])
        seen[start] = True
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in kept_adj[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
        fragments.append(tuple(sorted(comp)))

    fragments.sort(key=lambda frag: (-len(frag), frag[0]))
    keys = tuple(_fragment_key(g, frag, in_ring) for frag in fragments)
    return MotifSet(fragments=tuple(fragments), keys=keys, cleaved=tuple(sorted(cleaved)))


def serialize_nodes(g: MolGraph, m: MotifSet) -> list[int]:
    """Node visitation order for the sequence projector.

    Fragments by size descending (tie: smaller minimum atom index first);
    within a fragment, atoms by original degree descending (tie: index
    ascending). The result is a permutation of 0..n_atoms-1.
    """
    frags = sorted(m.fragments, key=lambda frag: (-len(frag), min(frag)))
    order: list[int] = []
    for frag in frags:
        order.extend(sorted(frag, key=lambda v: (-g.atoms[v].degree, v)))
    return order


UNK_ID = 0


@dataclass
class MotifVocabulary:
    """Corpus-level motif keys with dense ids; id 0 is reserved for UNK.

    Keys below ``min_freq`` stay stored but resolve to UNK at lookup time.
    """

    min_freq: int = 1
    entries: dict[str, tuple[int, int]] = field(default_factory=dict)  # key -> (id, freq)

    @property
    def size(self) -> int:
        """Number of embedding rows needed (UNK included)."""
        return 1 + len(self.entries)

    def lookup(self, key: str) -> int:
        entry = self.entries.get(key)
        if entry is None or entry[1] < self.min_freq:
            return UNK_ID
        return entry[0]

    def save(self, path: str) -> None:
        payload = {
            "min_freq": self.min_freq,
            "entries": [[k, i, f] for k, (i, f) in self.entries.items()],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path: str) -> "MotifVocabulary":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        vocab = cls(min_freq=payload["min_freq"])
        for key, ident, freq in payload["entries"]:
            vocab.entries[key] = (ident, freq)
        return vocab


def build_motif_vocabulary(corpus: Iterable[MolGraph], min_freq: int = 1) -> MotifVocabulary:
    """Count fragment keys over a corpus; ids follow first-seen order."""
    vocab = MotifVocabulary(min_freq=min_freq)
    seen_any = False
    next_id = 1
    for g in corpus:
        seen_any = True
        for key in fragment_motifs(g).keys:
            if key in vocab.entries:
                ident, freq = vocab.entries[key]
                vocab.entries[key] = (ident, freq + 1)
            else:
                vocab.entries[key] = (next_id, 1)
                next_id += 1
    if not seen_any:
        raise EmptyCorpus("motif vocabulary needs a non-empty corpus")
    return vocab


def read_dataset_file(path: str) -> Iterator[tuple[str, list[float]]]:
    """Yield (smiles, targets) records from a tab-separated dataset file.

    One record per line: ``SMILES[\\ttarget1\\ttarget2...]``; lines starting
    with ``#`` and blank lines are skipped.
    """
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            yield parts[0], [float(x) for x in parts[1:]]
