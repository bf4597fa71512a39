import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from molfuse.molgraph import (
    AROMATIC,
    DisconnectedInput,
    EmptyCorpus,
    HETEROATOMS,
    MotifVocabulary,
    UnbalancedParenthesis,
    UnknownAtomSymbol,
    UnmatchedRingBond,
    build_motif_vocabulary,
    fragment_motifs,
    parse_smiles,
    read_dataset_file,
    ring_membership,
    serialize_nodes,
    struct_matrices,
)


class TestParser:
    def test_ethanol(self):
        g = parse_smiles("CCO")
        assert [a.element for a in g.atoms] == ["C", "C", "O"]
        assert not any(a.aromatic for a in g.atoms)
        assert g.bonds == ((0, 1, 1), (1, 2, 1))

    def test_benzene(self):
        g = parse_smiles("c1ccccc1")
        assert g.n_atoms == 6
        assert all(a.element == "C" and a.aromatic for a in g.atoms)
        assert len(g.bonds) == 6
        assert all(order == AROMATIC for _, _, order in g.bonds)
        assert all(a.degree == 2 for a in g.atoms)

    def test_acetic_acid(self):
        g = parse_smiles("CC(=O)O")
        assert g.n_atoms == 4
        assert g.bonds == ((0, 1, 1), (1, 2, 2), (1, 3, 1))

    def test_triple_bond_and_two_char_symbols(self):
        g = parse_smiles("ClC#N")
        assert [a.element for a in g.atoms] == ["Cl", "C", "N"]
        assert g.bonds == ((0, 1, 1), (1, 2, 3))

    def test_aromatic_to_aliphatic_bond_is_single(self):
        g = parse_smiles("Cc1ccccc1")
        assert (0, 1, 1) in g.bonds

    def test_degrees_match_incident_bonds(self):
        g = parse_smiles("CC(C)(C)C")
        counts = [0] * g.n_atoms
        for u, v, _ in g.bonds:
            counts[u] += 1
            counts[v] += 1
        assert counts == [a.degree for a in g.atoms]
        assert g.atoms[1].degree == 4

    @pytest.mark.parametrize(
        "text,exc,offset",
        [
            ("CC)C", UnbalancedParenthesis, 2),
            ("C(CC", UnbalancedParenthesis, 1),
            ("C1CC", UnmatchedRingBond, 1),
            ("CXC", UnknownAtomSymbol, 1),
            ("CC.CC", DisconnectedInput, 2),
            ("C11", UnmatchedRingBond, 2),
            ("C-", UnknownAtomSymbol, 2),
            ("", UnknownAtomSymbol, 0),
        ],
    )
    def test_errors_name_offsets(self, text, exc, offset):
        with pytest.raises(exc) as info:
            parse_smiles(text)
        assert info.value.offset == offset

    def test_ring_digit_reuse_after_closure(self):
        g = parse_smiles("C1CC1C1CC1")
        assert g.n_atoms == 6
        assert g.n_bonds == 7


class TestStructMatrices:
    def test_path_graph(self):
        mats = struct_matrices(parse_smiles("CCO"))
        assert mats.distance[0, 2] == 2
        assert np.array_equal(mats.distance, mats.distance.T)

    def test_benzene_antipodes(self):
        mats = struct_matrices(parse_smiles("c1ccccc1"))
        for i in range(6):
            assert mats.distance[i, (i + 3) % 6] == 3

    def test_single_atom(self):
        mats = struct_matrices(parse_smiles("C"))
        assert mats.adjacency.shape == (1, 1)
        assert mats.distance[0, 0] == 0

    def test_adjacency_iff_distance_one(self):
        mats = struct_matrices(parse_smiles("CC(=O)Oc1ccccc1"))
        assert np.array_equal(mats.adjacency == 1, mats.distance == 1)
        assert np.all(np.diag(mats.distance) == 0)

    def test_triangle_inequality_sampled(self):
        mats = struct_matrices(parse_smiles("CC(C)c1ccc2ccccc2c1CCO"))
        d = mats.distance
        rng = np.random.default_rng(0)
        n = d.shape[0]
        for _ in range(200):
            i, j, k = rng.integers(0, n, size=3)
            assert d[i, j] <= d[i, k] + d[k, j]


class TestFragmentation:
    def test_toluene(self):
        g = parse_smiles("Cc1ccccc1")
        m = fragment_motifs(g)
        assert m.fragments == ((1, 2, 3, 4, 5, 6), (0,))
        assert m.cleaved == ((0, 1),)

    def test_ethanol_hetero_rule(self):
        m = fragment_motifs(parse_smiles("CCO"))
        assert m.fragments == ((0, 1), (2,))

    def test_single_atom(self):
        m = fragment_motifs(parse_smiles("C"))
        assert m.fragments == ((0,),)
        assert m.cleaved == ()

    def test_double_bond_to_hetero_survives(self):
        # C=O is not a single bond, so rule (b) does not fire.
        m = fragment_motifs(parse_smiles("C=O"))
        assert m.fragments == ((0, 1),)

    def test_ring_bonds_never_cleaved(self):
        g = parse_smiles("C1CCOCC1")  # hetero inside a ring
        m = fragment_motifs(g)
        assert m.fragments == (tuple(range(6)),)

    def test_cleave_rules_characterize_cut_set(self):
        for smiles in ("CC(=O)Oc1ccccc1", "NCCc1ccccc1", "CCSCC", "OCCO", "C1CC1CC"):
            g = parse_smiles(smiles)
            m = fragment_motifs(g)
            in_ring = ring_membership(g)
            cleaved = set(m.cleaved)
            cycle_edges = _cycle_edges(g)
            for u, v, order in g.bonds:
                key = (min(u, v), max(u, v))
                eu, ev = g.atoms[u].element, g.atoms[v].element
                rule_a = bool(in_ring[u]) != bool(in_ring[v])
                rule_b = (eu in HETEROATOMS and ev == "C") or (
                    ev in HETEROATOMS and eu == "C"
                )
                should_cut = order == 1 and key not in cycle_edges and (rule_a or rule_b)
                assert (key in cleaved) == should_cut

    def test_fragments_partition_nodes(self):
        g = parse_smiles("CC(=O)Oc1ccccc1C(N)CS")
        m = fragment_motifs(g)
        seen = sorted(v for frag in m.fragments for v in frag)
        assert seen == list(range(g.n_atoms))


def _cycle_edges(g):
    from molfuse.molgraph import _bridges

    bridges = _bridges(g)
    return {
        (min(u, v), max(u, v))
        for u, v, _ in g.bonds
        if (min(u, v), max(u, v)) not in bridges
    }


class TestVocabulary:
    def test_ring_key_counted_across_corpus(self):
        corpus = [parse_smiles("c1ccccc1"), parse_smiles("Cc1ccccc1")]
        vocab = build_motif_vocabulary(corpus, min_freq=1)
        ring_key = fragment_motifs(corpus[0]).keys[0]
        ident, freq = vocab.entries[ring_key]
        assert freq == 2
        assert vocab.lookup(ring_key) == ident != 0

    def test_below_threshold_maps_to_unk(self):
        vocab = build_motif_vocabulary([parse_smiles("C")], min_freq=2)
        key = fragment_motifs(parse_smiles("C")).keys[0]
        assert vocab.lookup(key) == 0

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            build_motif_vocabulary([])

    def test_ids_dense_and_stable(self):
        corpus = [parse_smiles(s) for s in ("CCO", "Cc1ccccc1", "CCN")]
        vocab = build_motif_vocabulary(corpus)
        ids = sorted(ident for ident, _ in vocab.entries.values())
        assert ids == list(range(1, len(ids) + 1))
        again = build_motif_vocabulary(corpus)
        assert again.entries == vocab.entries

    def test_save_load_roundtrip(self, tmp_path):
        vocab = build_motif_vocabulary([parse_smiles("Cc1ccccc1")], min_freq=1)
        path = tmp_path / "vocab.json"
        vocab.save(str(path))
        loaded = MotifVocabulary.load(str(path))
        assert loaded.entries == vocab.entries
        assert loaded.min_freq == vocab.min_freq


class TestSerialization:
    def test_toluene_order(self):
        g = parse_smiles("Cc1ccccc1")
        assert serialize_nodes(g, fragment_motifs(g)) == [1, 2, 3, 4, 5, 6, 0]

    def test_single_atom(self):
        g = parse_smiles("C")
        assert serialize_nodes(g, fragment_motifs(g)) == [0]

    def test_ethanol_degree_ordering(self):
        g = parse_smiles("CCO")
        assert serialize_nodes(g, fragment_motifs(g)) == [1, 0, 2]

    def test_determinism(self):
        for smiles in ("CC(=O)Oc1ccccc1", "NCCc1ccc2ccccc2c1"):
            runs = set()
            for _ in range(3):
                g = parse_smiles(smiles)
                runs.add(tuple(serialize_nodes(g, fragment_motifs(g))))
            assert len(runs) == 1


@st.composite
def smiles_subset(draw):
    """Small random strings from the supported grammar."""
    rings = ("c1ccccc1", "C1CCCC1", "c1ccncc1", "C1CCOCC1")
    pieces = [draw(st.sampled_from(("C", "N", "O", "S", "CC", "C(C)C", "C(=O)O")))]
    for _ in range(draw(st.integers(0, 3))):
        kind = draw(st.integers(0, 2))
        if kind == 0:
            pieces.append(draw(st.sampled_from(rings)))
        elif kind == 1:
            pieces.append(draw(st.sampled_from(("C", "N", "O", "CC", "CCC"))))
        else:
            pieces.append("(" + draw(st.sampled_from(("C", "CC", "O", "Cl"))) + ")")
    # A branch cannot open the string and needs an atom to hang from.
    text = pieces[0] + "".join(pieces[1:])
    return text


@settings(max_examples=60, deadline=None)
@given(smiles_subset())
def test_serialization_is_permutation(text):
    g = parse_smiles(text)
    order = serialize_nodes(g, fragment_motifs(g))
    assert sorted(order) == list(range(g.n_atoms))


@settings(max_examples=60, deadline=None)
@given(smiles_subset())
def test_fragments_cover_and_connect(text):
    g = parse_smiles(text)
    m = fragment_motifs(g)
    covered = sorted(v for frag in m.fragments for v in frag)
    assert covered == list(range(g.n_atoms))
    adj = g.neighbors()
    for frag in m.fragments:
        members = set(frag)
        # connected induced subgraph: BFS from one member reaches all
        seen = {frag[0]}
        queue = [frag[0]]
        cut = set(m.cleaved)
        while queue:
            u = queue.pop()
            for v in adj[u]:
                edge = (min(u, v), max(u, v))
                if v in members and v not in seen and edge not in cut:
                    seen.add(v)
                    queue.append(v)
        assert seen == members


def test_read_dataset_file(tmp_path):
    path = tmp_path / "data.tsv"
    path.write_text("# comment\nCCO\t1.5\t2\n\nC\n", encoding="utf-8")
    records = list(read_dataset_file(str(path)))
    assert records == [("CCO", [1.5, 2.0]), ("C", [])]
