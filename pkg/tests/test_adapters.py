"""Dual adapters: init rules, deltas, fusion kinds, combination topologies,
attachment bookkeeping, and the zero-init identity."""

import numpy as np
import pytest

from duallora import tensor as T
from duallora.adapters import (AdaptedProjection, DualLoraConfig, Fusion,
                               LoraPair, attach_adapters, context_delta,
                               fingerprint, init_lora, prompt_summary_input)
from duallora.errors import ConfigError, ContractError, MergeStateError
from duallora.model import ModelConfig, Seq2SeqModel
from duallora.optim import AdamW
from duallora.rng import SeededRng
from duallora.tensor import Tensor, backward, rank_of

TINY = ModelConfig(vocab_size=40, d_model=16, n_heads=2, d_ff=24,
                   n_encoder_layers=1, n_decoder_layers=1, max_seq_len=32)


def _random_projection(rng, d_out=8, d_in=8):
    W = Tensor(rng.normal((d_out, d_in), std=0.3), requires_grad=True)
    b = Tensor(np.zeros(d_out), requires_grad=True)
    return AdaptedProjection(W, b)


def _filled_pair(rng, d_out, d_in, rank):
    pair = init_lora(d_out, d_in, rank, 0.05, rng.derive("init"))
    pair.B.data[...] = rng.normal((d_out, rank), std=0.1)  # "trained" state
    return pair


# ---------------------------------------------------------------------------
# init


def test_init_lora_fresh_product_is_zero():
    pair = init_lora(12, 10, 4, 0.02, seed=3)
    assert np.array_equal(pair.B.data @ pair.A.data, np.zeros((12, 10)))
    assert not np.array_equal(pair.A.data, np.zeros((4, 10)))


def test_init_lora_same_seed_bit_identical():
    a = init_lora(8, 8, 2, 0.02, seed=5)
    b = init_lora(8, 8, 2, 0.02, seed=5)
    assert np.array_equal(a.A.data, b.A.data)


def test_init_lora_rank_too_large():
    with pytest.raises(ConfigError):
        init_lora(4, 8, 5, 0.02, seed=0)


def test_rank_bound_after_gradient_step():
    rng = SeededRng(0)
    pair = init_lora(64, 64, 8, 0.02, rng)
    x = Tensor(rng.normal((5, 64)))
    opt = AdamW(pair.parameters(), lr=0.1)
    backward(T.sum_all(pair.delta(x)))
    opt.step()
    assert rank_of(Tensor(pair.B.data @ pair.A.data)) <= 8


# ---------------------------------------------------------------------------
# deltas and summaries


def test_context_delta_fresh_pair_zero():
    pair = init_lora(6, 6, 2, 0.02, seed=1)
    h = Tensor(np.random.randn(4, 6))
    assert np.array_equal(context_delta(pair, h).data, np.zeros((4, 6)))


def test_context_delta_identity_factors():
    pair = LoraPair(Tensor(np.eye(5)), Tensor(np.eye(5)), rank=5)
    h = Tensor(np.random.randn(3, 5))
    assert np.allclose(context_delta(pair, h).data, h.data, atol=1e-15)


def test_context_delta_matches_dense_product():
    rng = SeededRng(2)
    pair = _filled_pair(rng, 9, 7, 3)
    h = Tensor(rng.normal((4, 7)))
    dense = h.data @ (pair.B.data @ pair.A.data).T
    assert np.abs(context_delta(pair, h).data - dense).max() < 1e-10


def test_prompt_summary_mean_and_symmetry():
    rows = Tensor(np.array([[0.0, 2.0], [2.0, 0.0]]))
    assert np.array_equal(prompt_summary_input(rows).data, [1.0, 1.0])
    single = Tensor(np.array([[3.0, -1.0]]))
    assert np.array_equal(prompt_summary_input(single).data, [3.0, -1.0])
    perm = Tensor(np.array([[2.0, 0.0], [0.0, 2.0]]))
    assert np.array_equal(prompt_summary_input(rows).data,
                          prompt_summary_input(perm).data)
    with pytest.raises(ContractError):
        prompt_summary_input(Tensor(np.zeros((0, 2))))


# ---------------------------------------------------------------------------
# dual forward


def test_dual_forward_fresh_adapters_is_plain_linear():
    rng = SeededRng(3)
    proj = _random_projection(rng)
    x = Tensor(rng.normal((4, 8)))
    plain = proj(x).data.copy()
    proj.context_adapter = init_lora(8, 8, 2, 0.02, rng.derive("c"))
    proj.prompt_adapters = [init_lora(8, 8, 2, 0.02, rng.derive("p"))]
    proj.fusion = Fusion("mean_add", 8)
    out = proj(x, Tensor(rng.normal((8,))))
    assert np.array_equal(out.data, plain)


def test_prompt_only_broadcast_shifts_every_position_equally():
    rng = SeededRng(4)
    proj = _random_projection(rng)
    x = Tensor(rng.normal((3, 8)))
    plain = proj(x).data.copy()
    pair = _filled_pair(rng, 8, 8, 2)
    proj.prompt_adapters = [pair]
    proj.fusion = Fusion("mean_add", 8)
    p = Tensor(rng.normal((8,)))
    out = proj(x, p).data
    shift = out - plain
    assert np.allclose(shift, shift[0], atol=1e-12)
    assert np.allclose(shift[0], pair.B.data @ (pair.A.data @ p.data), atol=1e-12)


def test_dual_forward_missing_prompt_summary_raises():
    rng = SeededRng(5)
    proj = _random_projection(rng)
    proj.prompt_adapters = [_filled_pair(rng, 8, 8, 2)]
    proj.fusion = Fusion("mean_add", 8)
    with pytest.raises(ContractError):
        proj(Tensor(rng.normal((2, 8))))


def test_permuting_positions_permutes_outputs_identically():
    rng = SeededRng(6)
    proj = _random_projection(rng)
    proj.context_adapter = _filled_pair(rng, 8, 8, 2)
    proj.prompt_adapters = [_filled_pair(rng, 8, 8, 2)]
    proj.fusion = Fusion("mean_add", 8)
    x = rng.normal((5, 8))
    p = Tensor(rng.normal((8,)))
    out = proj(Tensor(x), p).data
    perm = [3, 0, 4, 1, 2]
    out_perm = proj(Tensor(x[perm]), p).data
    assert np.allclose(out[perm], out_perm, atol=1e-12)


# ---------------------------------------------------------------------------
# fusion kinds


def test_fusion_mean_add_zero_prompt_is_identity():
    ctx = Tensor(np.random.randn(4, 6))
    out = Fusion("mean_add", 6).apply(ctx, Tensor(np.zeros(6)))
    assert np.array_equal(out.data, ctx.data)


def test_fusion_gate_saturated_at_zero_is_identity():
    rng = SeededRng(7)
    fusion = Fusion("gate_attention", 4, rng, init_std=0.02)
    ctx = Tensor(np.ones((3, 4)))
    v = Tensor(np.array([1.0, 0.0, 0.0, 0.0]))
    fusion.wg.data[...] = -1e6 * np.eye(4)  # scores -> -inf, gate -> exactly 0
    out = fusion.apply(ctx, v)
    assert np.array_equal(out.data, ctx.data)


def test_fusion_cross_attention_single_position_adds_projected_prompt():
    rng = SeededRng(8)
    fusion = Fusion("cross_attention", 5, rng, init_std=0.1)
    ctx = Tensor(np.random.randn(1, 5))
    v = Tensor(np.random.randn(5))
    out = fusion.apply(ctx, v)
    expected = ctx.data + (fusion.wv.data @ v.data)[None, :]
    assert np.allclose(out.data, expected, atol=1e-12)


def test_fusion_variants_vanish_on_zero_prompt_term():
    rng = SeededRng(9)
    ctx = Tensor(np.random.randn(4, 6))
    zero = Tensor(np.zeros(6))
    for kind in ("cross_attention", "gate_attention"):
        out = Fusion(kind, 6, rng.derive(kind), 0.05).apply(ctx, zero)
        assert np.array_equal(out.data, ctx.data)


def test_fusion_unknown_kind():
    with pytest.raises(ConfigError):
        Fusion("concat", 4)


# ---------------------------------------------------------------------------
# vertical combination


def _vertical_projection(rng, trained=True):
    proj = _random_projection(rng)
    proj.combination = "vertical"
    proj.context_adapter = _filled_pair(rng, 8, 8, 2) if trained \
        else init_lora(8, 8, 2, 0.02, rng.derive("c"))
    proj.prompt_adapters = [_filled_pair(rng, 8, 8, 2) if trained
                            else init_lora(8, 8, 2, 0.02, rng.derive("p"))]
    proj.fusion = Fusion("mean_add", 8)
    return proj


def test_vertical_fresh_adapters_is_plain_linear():
    rng = SeededRng(10)
    proj = _vertical_projection(rng, trained=False)
    x = Tensor(rng.normal((3, 8)))
    plain = x.data @ proj.W.data.T + proj.b.data
    assert np.array_equal(proj(x, Tensor(rng.normal((8,)))).data, plain)


def test_vertical_with_zero_prompt_b_equals_horizontal_context_only():
    rng = SeededRng(11)
    proj = _vertical_projection(rng)
    proj.prompt_adapters[0].B.data[...] = 0.0
    x = Tensor(rng.normal((3, 8)))
    p = Tensor(rng.normal((8,)))
    vertical = proj(x, p).data
    proj.combination = "horizontal"
    saved = proj.prompt_adapters
    proj.prompt_adapters = []
    horizontal = proj(x).data
    proj.prompt_adapters = saved
    assert np.allclose(vertical, horizontal, atol=1e-12)


def test_vertical_stacking_formula():
    rng = SeededRng(12)
    proj = _vertical_projection(rng)
    x = Tensor(rng.normal((3, 8)))
    p = Tensor(rng.normal((8,)))
    pair, ppair = proj.context_adapter, proj.prompt_adapters[0]
    shift = ppair.B.data @ (ppair.A.data @ p.data)
    expected = (x.data @ proj.W.data.T + proj.b.data
                + (x.data + shift) @ (pair.B.data @ pair.A.data).T)
    assert np.abs(proj(x, p).data - expected).max() < 1e-12


def test_vertical_differs_from_horizontal_somewhere():
    # rank-1 random search for an input where the topologies disagree
    rng = SeededRng(13)
    for attempt in range(20):
        proj = _random_projection(rng.derive(f"t{attempt}"))
        r = rng.derive(f"s{attempt}")
        proj.context_adapter = _filled_pair(r, 8, 8, 1)
        proj.prompt_adapters = [_filled_pair(r.derive("p"), 8, 8, 1)]
        proj.fusion = Fusion("mean_add", 8)
        x = Tensor(r.normal((2, 8)))
        p = Tensor(r.normal((8,)))
        proj.combination = "horizontal"
        h = proj(x, p).data
        proj.combination = "vertical"
        v = proj(x, p).data
        if np.abs(h - v).max() > 1e-6:
            return
    pytest.fail("no differing instance found in 20 random draws")


def test_vertical_is_not_mergeable():
    rng = SeededRng(14)
    proj = _vertical_projection(rng)
    with pytest.raises(MergeStateError):
        proj.merge_context()
    with pytest.raises(MergeStateError):
        proj.merge_prompt(rng.normal((8,)))


# ---------------------------------------------------------------------------
# attachment


def test_attach_default_counts_match_closed_form():
    model = Seq2SeqModel(ModelConfig(), seed=0)
    registry = attach_adapters(model, DualLoraConfig(seed=0))
    # 2 encoder blocks + 2x2 decoder blocks, q and v each, context + prompt
    assert len(registry.projections) == 12
    expected = 24 * 8 * (64 + 64)
    assert registry.lora_param_count() == expected
    assert registry.trainable_param_count() == expected  # mean_add adds none
    assert all(not p.requires_grad for p in model.parameters())
    assert all(p.requires_grad for p in registry.trainable_parameters())


def test_attach_qkvo_strictly_more_parameters_than_qv():
    counts = {}
    for placement in ("qv", "qkv", "qkvo"):
        model = Seq2SeqModel(TINY, seed=0)
        reg = attach_adapters(model, DualLoraConfig(
            seed=0, rank=2, target_projections=placement))
        counts[placement] = reg.trainable_param_count()
    assert counts["qv"] < counts["qkv"] < counts["qkvo"]


def test_attach_two_prompt_loras_sum():
    rng = SeededRng(15)
    model = Seq2SeqModel(TINY, seed=0)
    registry = attach_adapters(model, DualLoraConfig(seed=0, rank=2,
                                                     n_prompt_loras=2))
    proj = next(iter(registry.projections.values()))
    assert len(proj.prompt_adapters) == 2
    for pair in proj.prompt_adapters:
        pair.B.data[...] = rng.normal(pair.B.shape, std=0.1)
    p = Tensor(rng.normal((proj.d_in,)))
    x = Tensor(rng.normal((2, proj.d_in)))
    out = proj(x, p).data
    manual = (x.data @ proj.W.data.T + proj.b.data
              + sum(pr.B.data @ (pr.A.data @ p.data)
                    for pr in proj.prompt_adapters))
    assert np.abs(out - manual).max() < 1e-12


def test_attach_fusion_variants_add_trainable_parameters():
    base = attach_adapters(Seq2SeqModel(TINY, seed=0),
                           DualLoraConfig(seed=0, rank=2))
    cross = attach_adapters(Seq2SeqModel(TINY, seed=0),
                            DualLoraConfig(seed=0, rank=2,
                                           fusion="cross_attention"))
    gate = attach_adapters(Seq2SeqModel(TINY, seed=0),
                           DualLoraConfig(seed=0, rank=2,
                                          fusion="gate_attention"))
    assert base.trainable_param_count() == base.lora_param_count()
    assert cross.trainable_param_count() > gate.trainable_param_count() \
        > base.trainable_param_count()


def test_attach_prompt_in_decoder_switch():
    model = Seq2SeqModel(TINY, seed=0)
    reg = attach_adapters(model, DualLoraConfig(seed=0, rank=2,
                                                prompt_in_decoder=False))
    for name, proj in reg.projections.items():
        if name.startswith("decoder"):
            assert not proj.prompt_adapters
        else:
            assert proj.prompt_adapters


def test_attach_is_seed_stable_regardless_of_model_instance():
    r1 = attach_adapters(Seq2SeqModel(TINY, seed=0), DualLoraConfig(seed=7, rank=2))
    r2 = attach_adapters(Seq2SeqModel(TINY, seed=1), DualLoraConfig(seed=7, rank=2))
    for name in r1.projections:
        a = r1.projections[name].context_adapter.A.data
        b = r2.projections[name].context_adapter.A.data
        assert np.array_equal(a, b)


@pytest.mark.parametrize("fusion", ["mean_add", "cross_attention",
                                    "gate_attention"])
@pytest.mark.parametrize("combination", ["horizontal", "vertical"])
def test_zero_init_identity_for_every_config(fusion, combination):
    model = Seq2SeqModel(TINY, seed=0)
    rng = SeededRng(20)
    inputs = [(list(rng._raw(6) % 30 + 3), list(rng._raw(3) % 30 + 3))
              for _ in range(8)]
    before = [model.generate(c, p, 4) for c, p in inputs]
    before_h = [model.encode(c, p)[0].data for c, p in inputs]
    attach_adapters(model, DualLoraConfig(seed=0, rank=2, fusion=fusion,
                                          combination=combination))
    after = [model.generate(c, p, 4) for c, p in inputs]
    after_h = [model.encode(c, p)[0].data for c, p in inputs]
    assert before == after
    for x, y in zip(before_h, after_h):
        assert np.array_equal(x, y)


def test_frozen_base_stays_bit_identical_under_training():
    model = Seq2SeqModel(TINY, seed=0)
    registry = attach_adapters(model, DualLoraConfig(seed=0, rank=2))
    snapshot = {n: t.data.copy() for n, t in model.named_tensors().items()}
    opt = AdamW(registry.trainable_parameters(), lr=0.05)
    rng = SeededRng(21)
    for _ in range(5):
        ctx = list(rng._raw(5) % 30 + 3)
        prompt = list(rng._raw(3) % 30 + 3)
        target = list(rng._raw(2) % 30 + 3) + [1]
        opt.zero_grad()
        backward(model.loss(ctx, prompt, target))
        opt.step()
    for name, t in model.named_tensors().items():
        assert np.array_equal(t.data, snapshot[name]), name
    changed = any(pair.B.data.any()
                  for proj in registry.projections.values()
                  for pair in [proj.context_adapter] + proj.prompt_adapters)
    assert changed


def test_fingerprint_depends_on_exact_bytes():
    p = np.random.randn(8)
    q = p.copy()
    q[0] = np.nextafter(q[0], np.inf)
    assert fingerprint(p) == fingerprint(p.copy())
    assert fingerprint(p) != fingerprint(q)
