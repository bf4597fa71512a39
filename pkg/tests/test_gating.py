import numpy as np
import pytest

import molfuse.autodiff as ad
from molfuse.autodiff import Tensor, backward
from molfuse.gating import ATTENTION, MAMBA, EmptyDataset, HapRouter, gating_ratio_report
from molfuse.model import Config, FusionModel, prepare
from molfuse.molgraph import build_motif_vocabulary, parse_smiles
from molfuse.projectors import CrossAttentionProjector, GraphMambaProjector
from molfuse.training import loss


def make_router(dim=8, seed=0, mode="both"):
    rng = np.random.default_rng(seed)
    attn = CrossAttentionProjector(dim, 4, 2, rng)
    mamba = GraphMambaProjector(dim, 4, 4, 0.5, rng)
    return HapRouter(dim, attn, mamba, rng, mode=mode)


def small_model(seed=0, **overrides):
    cfg = Config(
        layers=3, dim=8, heads=2, n_queries=4, state_size=4, n_experts=3,
        seed=seed, **overrides,
    )
    smiles = ["Cc1ccccc1", "CCO", "CCN(C)C"]
    preps = [prepare(parse_smiles(s), [1.0]) for s in smiles]
    vocab = build_motif_vocabulary((p.graph for p in preps))
    return FusionModel(cfg, vocab), preps


class TestGate:
    def test_zero_weights_tie_routes_to_attention(self):
        router = make_router()
        router.w_g.data = np.zeros_like(router.w_g.data)
        router.b_g.data = np.zeros_like(router.b_g.data)
        h = Tensor(np.random.default_rng(1).normal(size=(5, 8)))
        p = router.gate(h)
        assert np.array_equal(p.data, [[0.5, 0.5]])
        assert int(np.argmax(p.data[0])) == ATTENTION

    def test_bias_only_analytic_probabilities(self):
        router = make_router()
        router.w_g.data = np.zeros_like(router.w_g.data)
        router.b_g.data = np.array([0.0, np.log(3.0)])
        p = router.gate(Tensor(np.random.default_rng(2).normal(size=(4, 8))))
        assert np.allclose(p.data, [[0.25, 0.75]], atol=1e-15)

    def test_gate_invariant_to_node_permutation(self):
        router = make_router()
        rng = np.random.default_rng(3)
        h = rng.normal(size=(6, 8))
        p1 = router.gate(Tensor(h))
        p2 = router.gate(Tensor(h[rng.permutation(6)]))
        assert np.max(np.abs(p1.data - p2.data)) < 1e-12


class TestSelectAndProject:
    def test_only_winner_executes(self):
        model, preps = small_model()
        model.router.b_g.data = np.array([10.0, 0.0])  # force attention
        model.router.w_g.data = np.zeros_like(model.router.w_g.data)
        before = model.mamba.calls
        model.forward(preps[0])
        assert model.mamba.calls == before
        assert model.attention.calls > 0

    def test_forward_value_equals_plain_projection_bitwise(self):
        router = make_router(seed=4)
        g = parse_smiles("CCO")
        prep = prepare(g)
        h = Tensor(np.random.default_rng(5).normal(size=(3, 8)))
        block, decision, _ = router.select_and_project(h, prep.node_seq, layer=1)
        if decision.selected == ATTENTION:
            plain = router.attention.project(h)
        else:
            plain = router.mamba.project_sequence(
                ad.gather_rows(h, prep.node_seq.order), prep.node_seq.gaps
            )
        assert np.array_equal(block.tokens.data, plain.data)

    def test_gate_receives_gradient(self):
        model, preps = small_model()
        result = model.forward(preps[0])
        backward(loss(result.output, preps[0].targets, "regression"))
        assert model.router.w_g.grad is not None
        assert np.abs(model.router.w_g.grad).max() > 0

    def test_output_bitwise_independent_of_unselected_projector(self):
        model, preps = small_model(seed=11)
        model.router.b_g.data = np.array([100.0, 0.0])  # attention everywhere
        out1 = model.forward(preps[1]).output.data.copy()
        for p in model.mamba.parameters().values():
            p.data = p.data + 123.456
        out2 = model.forward(preps[1]).output.data.copy()
        assert np.array_equal(out1, out2)

        model.router.b_g.data = np.array([-100.0, 0.0])  # mamba everywhere
        out3 = model.forward(preps[1]).output.data.copy()
        for p in model.attention.parameters().values():
            p.data = p.data + 77.0
        out4 = model.forward(preps[1]).output.data.copy()
        assert np.array_equal(out3, out4)


class TestProjectAll:
    def test_block_count_and_order(self):
        model, preps = small_model()
        result = model.forward(preps[0])
        assert len(result.blocks) == model.cfg.layers + 1
        assert [b.layer for b in result.blocks] == [1, 2, 3, "motif"]
        for b in result.blocks:
            assert b.tokens.shape == (model.cfg.n_queries, model.cfg.dim)

    def test_decisions_recorded(self):
        model, preps = small_model()
        result = model.forward(preps[0])
        assert len(result.hap_decisions) == model.cfg.layers + 1
        for d in result.hap_decisions:
            assert d.selected in (0, 1)
            assert abs(d.probs.sum() - 1.0) < 1e-12

    def test_route_motif_bypass(self):
        model, preps = small_model(route_motif=False)
        result = model.forward(preps[0])
        assert result.blocks[-1].source == "attention"
        assert result.hap_decisions[-1].layer == "motif"

    def test_forced_modes_skip_gate(self):
        for mode, selected in (("attention", ATTENTION), ("mamba", MAMBA)):
            model, preps = small_model(projector_mode=mode)
            calls_before = model.router.gate_calls
            result = model.forward(preps[0])
            assert model.router.gate_calls == calls_before
            assert all(d.selected == selected for d in result.hap_decisions)


class TestGatingRatioReport:
    def test_zero_gate_reports_zero(self):
        model, preps = small_model()
        model.router.w_g.data = np.zeros_like(model.router.w_g.data)
        model.router.b_g.data = np.zeros_like(model.router.b_g.data)
        report = gating_ratio_report(model, preps)
        assert [layer for layer, _ in report] == [1, 2, 3, "motif"]
        assert all(ratio == 0.0 for _, ratio in report)

    def test_forced_mamba_reports_one(self):
        model, preps = small_model()
        model.router.w_g.data = np.zeros_like(model.router.w_g.data)
        model.router.b_g.data = np.array([0.0, 50.0])
        report = gating_ratio_report(model, preps)
        assert all(ratio == 1.0 for _, ratio in report)

    def test_empty_dataset(self):
        model, _ = small_model()
        with pytest.raises(EmptyDataset):
            gating_ratio_report(model, [])


class TestGateBalance:
    def test_disabled_by_default(self):
        from molfuse.training import gate_balance_loss

        model, preps = small_model()
        result = model.forward(preps[0])
        assert gate_balance_loss(result, 0.0) is None

    def test_penalty_reaches_gate_parameters(self):
        from molfuse.training import gate_balance_loss

        model, preps = small_model()
        model.router.b_g.data = np.array([3.0, 0.0])  # biased routing
        result = model.forward(preps[0])
        penalty = gate_balance_loss(result, 1.0)
        assert penalty.item() > 0
        model.zero_grad()
        backward(penalty)
        assert np.abs(model.router.w_g.grad).max() > 0

    def test_uniform_gate_zero_penalty(self):
        from molfuse.training import gate_balance_loss

        model, preps = small_model()
        model.router.w_g.data = np.zeros_like(model.router.w_g.data)
        model.router.b_g.data = np.zeros_like(model.router.b_g.data)
        result = model.forward(preps[0])
        assert gate_balance_loss(result, 1.0).item() == 0.0

    def test_forced_mode_has_no_gate_probs(self):
        model, preps = small_model(projector_mode="mamba")
        result = model.forward(preps[0])
        assert result.gate_probs == []
