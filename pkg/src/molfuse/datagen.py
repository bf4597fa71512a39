"""Seeded SMILES generation from a small template grammar, plus the
structural labels appended to every dataset line. Every generated string
stays inside the parser's subset and re-parses by construction."""

from __future__ import annotations

import numpy as np

from .molgraph import MolGraph, parse_smiles
from .training import synth_targets

# Ring units: (smiles fragment, heavy atom count, contains a benzene ring).
_RING_UNITS = (
    ("c1ccccc1", 6, True),
    ("c1ccncc1", 6, False),
    ("c1ccoc1", 5, False),
    ("c1ccsc1", 5, False),
    ("C1CCCCC1", 6, False),
    ("C1CCCC1", 5, False),
    ("C1CCNCC1", 6, False),
    ("C1CCOCC1", 6, False),
    ("c1ccc2ccccc2c1", 10, True),
    ("C1CCC2CCCCC2C1", 10, False),
)
_CHAIN_ATOMS = ("C", "C", "N", "O", "S")
_BRANCH_ATOMS = ("C", "N", "O", "F", "Cl", "Br", "S")

# Target columns appended to each generated line, in order.
DATASET_TARGETS = (
    "wiener_index",
    "ring_count",
    "heavy_atom_count",
    "hetero_fraction",
    "has_benzene",
)


def has_benzene_ring(g: MolGraph) -> bool:
    """True iff the graph contains a 6-cycle of aromatic carbons."""
    adj = g.neighbors()
    aromatic_c = {
        i for i, a in enumerate(g.atoms) if a.element == "C" and a.aromatic
    }
    for start in sorted(aromatic_c):
        # Canonical search: all other cycle members must exceed start.
        stack: list[tuple[int, tuple[int, ...]]] = [(start, (start,))]
        while stack:
            node, path = stack.pop()
            if len(path) == 6:
                if start in adj[node]:
                    return True
                continue
            for nxt in adj[node]:
                if nxt in aromatic_c and nxt > start and nxt not in path:
                    stack.append((nxt, path + (nxt,)))
    return False


def sample_smiles(rng: np.random.Generator, max_atoms: int) -> str:
    """One template-grammar molecule with 1..max_atoms heavy atoms."""
    target = int(rng.integers(1, max_atoms + 1))
    parts: list[str] = []
    atoms = 0
    last_was_chain = False
    while atoms < target:
        remaining = target - atoms
        fitting_rings = [u for u in _RING_UNITS if u[1] <= remaining]
        roll = rng.random()
        if fitting_rings and roll < 0.3:
            unit = fitting_rings[int(rng.integers(len(fitting_rings)))]
            parts.append(unit[0])
            atoms += unit[1]
            last_was_chain = False
        elif last_was_chain and remaining >= 1 and roll < 0.55:
            width = int(rng.integers(1, min(3, remaining) + 1))
            if width == 1:
                branch = [str(rng.choice(_BRANCH_ATOMS))]
            else:  # halogens stay terminal: interior branch atoms are C/N/O
                branch = [str(rng.choice(("C", "N", "O")))]
                branch += [str(rng.choice(("C", "N", "O"))) for _ in range(width - 1)]
            parts.append("(" + "".join(branch) + ")")
            atoms += width
            last_was_chain = False
        else:
            parts.append(str(rng.choice(_CHAIN_ATOMS)))
            atoms += 1
            last_was_chain = True
    return "".join(parts)


def target_vector(g: MolGraph) -> list[float]:
    values = [synth_targets(g, kind) for kind in DATASET_TARGETS[:-1]]
    values.append(float(has_benzene_ring(g)))
    return values


def generate_dataset(n: int, seed: int, max_atoms: int) -> list[str]:
    """n dataset lines ``SMILES\\t<targets...>``, deterministic in the seed."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if max_atoms < 1:
        raise ValueError(f"need max_atoms >= 1, got {max_atoms}")
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n):
        smiles = sample_smiles(rng, max_atoms)
        g = parse_smiles(smiles)
        values = target_vector(g)
        rendered = "\t".join(format(v, ".10g") for v in values)
        lines.append(f"{smiles}\t{rendered}")
    return lines


def write_dataset(path: str, lines: list[str]) -> None:
    header = "# columns: smiles\t" + "\t".join(DATASET_TARGETS)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for line in lines:
            fh.write(line + "\n")
