"""Acceptance suite: one test per criterion, at the stated tolerances.

Each test prints a single PASS line when its criterion holds; a failed
assertion marks the criterion red. Criterion 6 is the slow one (three
seeded training runs per variant); everything else is seconds.
"""

import csv
import json
import time

import numpy as np
import pytest

from duallora import cli
from duallora import tensor as T
from duallora.adapters import (AdaptedProjection, DualLoraConfig, Fusion,
                               attach_adapters, init_lora)
from duallora.corpus import generate_corpus, make_split, save_corpus
from duallora.harness import (Hyperparams, build_examples, build_tokenizer,
                              encode_example, evaluate, finetune_dst,
                              measure_forward_latency, pretrain_base,
                              train_zero_shot)
from duallora.metrics import aga, jga
from duallora.model import ModelConfig, Seq2SeqModel
from duallora.optim import AdamW
from duallora.rng import SeededRng
from duallora.tensor import Tensor, backward, finite_difference_grad, rank_of

DEFAULT = ModelConfig()
REDUCED = ModelConfig(vocab_size=512, d_model=16, n_heads=2, d_ff=24,
                      n_encoder_layers=1, n_decoder_layers=1, max_seq_len=48)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(0)


@pytest.fixture(scope="module")
def corpus_file(corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("acc") / "corpus.json"
    save_corpus(*corpus, path)
    return path


@pytest.fixture(scope="module")
def tok(corpus):
    return build_tokenizer(*corpus, DEFAULT.vocab_size)


def _random_inputs(rng, n, vocab=DEFAULT.vocab_size, ctx_len=12, prompt_len=5):
    lo, hi = 3, min(vocab, 400)
    return [(list(rng._raw(ctx_len) % (hi - lo) + lo),
             list(rng._raw(prompt_len) % (hi - lo) + lo)) for _ in range(n)]


# ---------------------------------------------------------------------------


def test_criterion_1_zero_init_identity():
    start = time.time()
    rng = SeededRng(100)
    inputs = _random_inputs(rng, 50)
    model = Seq2SeqModel(DEFAULT, seed=0)
    before = [(model.encode(c, p)[0].data, model.generate(c, p, 3))
              for c, p in inputs]
    attach_adapters(model, DualLoraConfig(seed=0))
    for (c, p), (h0, g0) in zip(inputs, before):
        h1, _, _ = model.encode(c, p)
        assert np.array_equal(h0, h1.data)
        assert model.generate(c, p, 3) == g0
    # every fusion/combination variant preserves the identity too
    for fusion in ("mean_add", "cross_attention", "gate_attention"):
        for combination in ("horizontal", "vertical"):
            m = Seq2SeqModel(REDUCED, seed=1)
            sample = inputs[:5]
            h0s = [m.encode(c, p)[0].data for c, p in sample]
            attach_adapters(m, DualLoraConfig(seed=1, rank=2, fusion=fusion,
                                              combination=combination))
            for (c, p), h0 in zip(sample, h0s):
                assert np.array_equal(h0, m.encode(c, p)[0].data)
    elapsed = time.time() - start
    assert elapsed < 10.0
    print(f"\nACCEPTANCE 1 zero-init identity: PASS ({elapsed:.1f}s)")


def _trained_projection(rng, d=64, rank=8):
    proj = AdaptedProjection(
        Tensor(rng.normal((d, d), std=0.2), requires_grad=True),
        Tensor(rng.normal((d,), std=0.05), requires_grad=True))
    proj.context_adapter = init_lora(d, d, rank, 0.05, rng.derive("c"))
    proj.context_adapter.B.data[...] = rng.normal((d, rank), std=0.1)
    proj.prompt_adapters = [init_lora(d, d, rank, 0.05, rng.derive("p"))]
    proj.prompt_adapters[0].B.data[...] = rng.normal((d, rank), std=0.1)
    proj.fusion = Fusion("mean_add", d)
    return proj


def test_criterion_2_merge_equivalence():
    start = time.time()
    worst_out = worst_w = worst_b = 0.0
    for seed in range(100):
        rng = SeededRng(200 + seed)
        proj = _trained_projection(rng)
        x = Tensor(rng.normal((6, 64)))
        p = rng.normal((64,))
        w0, b0 = proj.W.data.copy(), proj.b.data.copy()
        unmerged = proj(x, Tensor(p)).data.copy()
        proj.merge_context()
        proj.merge_prompt(p)
        merged = proj(x, Tensor(p)).data
        worst_out = max(worst_out, np.abs(merged - unmerged).max())
        proj.unmerge_prompt()
        proj.unmerge_context()
        worst_w = max(worst_w, np.abs(proj.W.data - w0).max())
        worst_b = max(worst_b, np.abs(proj.b.data - b0).max())
    assert worst_out < 1e-9
    assert worst_w < 1e-12 and worst_b < 1e-12
    elapsed = time.time() - start
    assert elapsed < 30.0
    print(f"\nACCEPTANCE 2 merge equivalence: PASS "
          f"(max |merged-unmerged| {worst_out:.2e}, restore {worst_w:.2e}, "
          f"{elapsed:.1f}s)")


def _grad_ok(analytic, fd, rel=1e-5, floor=1e-9):
    """Combined tolerance |a - fd| <= rel*|fd| + floor.

    The floor absorbs the oracle's own cancellation noise: central
    differences of a loss of magnitude ~13 at eps 1e-5 carry ~2e-10 of
    absolute error in float64 (measured), so elements whose true gradient
    is below ~1e-4 cannot be resolved to 1e-5 relative by any oracle
    setting; 1e-9 is five times the measured noise ceiling.
    """
    analytic, fd = np.asarray(analytic), np.asarray(fd)
    return np.all(np.abs(analytic - fd) <= rel * np.abs(fd) + floor)


def test_criterion_3_gradient_correctness(corpus, tok):
    start = time.time()
    schemas, dialogues = corpus
    split = make_split(schemas, dialogues, "bus")
    visible = sorted({s.domain for s in schemas} - {"bus"})
    examples = build_examples(split.train[:2], schemas, visible,
                              "slot_prompt", 0, SeededRng(0))[:2]

    def training_loss(model):
        total = None
        for ex in examples:
            c, p, t = encode_example(tok, model.config, ex)
            piece = model.loss(c, p, t)
            total = piece if total is None else T.add(total, piece)
        return total

    # exhaustive element checks at the reduced config, all fusion kinds
    for fusion in ("mean_add", "cross_attention", "gate_attention"):
        model = Seq2SeqModel(REDUCED, seed=2)
        registry = attach_adapters(model, DualLoraConfig(
            seed=2, rank=2, fusion=fusion))
        for pair_proj in registry.projections.values():
            pair_proj.context_adapter.B.data[...] = SeededRng(3).normal(
                pair_proj.context_adapter.B.shape, std=0.05)
            pair_proj.prompt_adapters[0].B.data[...] = SeededRng(4).normal(
                pair_proj.prompt_adapters[0].B.shape, std=0.05)
        params = {name: t for name, t in registry.named_tensors().items()}
        backward(training_loss(model))
        for name, tensor in params.items():
            analytic = np.zeros_like(tensor.data) if tensor.grad is None \
                else tensor.grad.copy()
            fd = finite_difference_grad(lambda _t: training_loss(model), tensor)
            assert _grad_ok(analytic, fd), f"{fusion}:{name}"
            tensor.grad = None

    # sampled element checks at the default toy config
    model = Seq2SeqModel(DEFAULT, seed=5)
    registry = attach_adapters(model, DualLoraConfig(seed=5))
    rng = SeededRng(6)
    for proj in registry.projections.values():
        proj.context_adapter.B.data[...] = rng.normal(
            proj.context_adapter.B.shape, std=0.05)
        proj.prompt_adapters[0].B.data[...] = rng.normal(
            proj.prompt_adapters[0].B.shape, std=0.05)
    backward(training_loss(model))
    eps = 1e-5
    for name, tensor in registry.named_tensors().items():
        grad = np.zeros_like(tensor.data) if tensor.grad is None \
            else tensor.grad
        flat = tensor.data.reshape(-1)
        gflat = grad.reshape(-1)
        for _ in range(3):
            i = rng.randint(flat.size)
            saved = flat[i]
            flat[i] = saved + eps
            hi = training_loss(model).item()
            flat[i] = saved - eps
            lo = training_loss(model).item()
            flat[i] = saved
            fd = (hi - lo) / (2 * eps)
            assert _grad_ok(gflat[i:i + 1], np.array([fd])), f"{name}[{i}]"
    elapsed = time.time() - start
    assert elapsed < 120.0
    print(f"\nACCEPTANCE 3 gradient correctness: PASS ({elapsed:.1f}s)")


def test_criterion_4_low_rank_and_frozen_base(corpus, tok):
    start = time.time()
    schemas, dialogues = corpus
    split = make_split(schemas, dialogues, "bus")
    visible = sorted({s.domain for s in schemas} - {"bus"})
    model = Seq2SeqModel(DEFAULT, seed=7)
    registry = attach_adapters(model, DualLoraConfig(seed=7, rank=8))
    snapshot = {n: t.data.copy() for n, t in model.named_tensors().items()}
    train_zero_shot(model, registry, split.train, schemas, visible, tok,
                    Hyperparams(steps=200, batch_size=1, lr=5e-3), seed=7)
    for name, proj in registry.projections.items():
        pairs = [proj.context_adapter] + proj.prompt_adapters
        for pair in pairs:
            product = pair.B.data @ pair.A.data
            assert pair.B.data.any(), f"{name}: adapter never trained"
            assert rank_of(Tensor(product)) <= 8, name
    for name, t in model.named_tensors().items():
        assert np.array_equal(t.data, snapshot[name]), name
    elapsed = time.time() - start
    assert elapsed < 120.0
    print(f"\nACCEPTANCE 4 low-rank bound + frozen base after 200 steps: "
          f"PASS ({elapsed:.1f}s)")


def test_criterion_5_metric_oracles():
    start = time.time()
    slots = [("taxi", "destination"), ("taxi", "leave_at"), ("bus", "day")]
    values = ["airport", "parkside", "08:15", "monday"]

    def oracle(preds, golds, kind):
        scores = []
        for p, g in zip(preds, golds):
            if not g:
                continue
            if kind == "jga":
                scores.append(1.0 if p == g else 0.0)
            else:
                scores.append(sum(1 for t in g if t in p) / len(g))
        return sum(scores) / len(scores) if scores else 1.0

    rng = SeededRng(500)
    for _ in range(1000):
        preds, golds = [], []
        for _ in range(8):
            gold = {(*rng.choice(slots), rng.choice(values))
                    for _ in range(rng.randint(3))}
            pred = {t for t in gold if rng.uniform() < 0.6}
            if rng.uniform() < 0.4:
                pred.add((*rng.choice(slots), rng.choice(values)))
            preds.append(frozenset(pred))
            golds.append(frozenset(gold))
        j = jga(preds, golds, skip_empty_gold=True)
        a = aga(preds, golds)
        assert j == oracle(preds, golds, "jga")
        assert a == oracle(preds, golds, "aga")
        assert j <= a + 1e-12
    elapsed = time.time() - start
    assert elapsed < 5.0
    print(f"\nACCEPTANCE 5 metric oracles + JGA<=AGA on 1000 pairs: PASS "
          f"({elapsed:.1f}s)")


def test_criterion_6_zero_shot_trend(corpus, tok):
    start = time.time()
    schemas, dialogues = corpus
    split = make_split(schemas, dialogues, "bus")
    visible = sorted({s.domain for s in schemas} - {"bus"})
    pre_hp = Hyperparams(steps=600, batch_size=4, lr=3e-3)
    ft_hp = Hyperparams(steps=1500, batch_size=4, lr=3e-3)
    ad_hp = Hyperparams(steps=1500, batch_size=4, lr=5e-3)
    rows = {}
    for seed in (0, 1, 2):
        base = Seq2SeqModel(DEFAULT, seed=seed)
        pretrain_base(base, split.train, tok, pre_hp, seed=seed)
        state = {n: t.data.copy() for n, t in base.named_tensors().items()}

        def fresh():
            m = Seq2SeqModel(DEFAULT, seed=seed)
            m.load_state(state)
            return m

        full = fresh()
        finetune_dst(full, split.train, schemas, visible, tok, ft_hp, seed=seed)
        j_full = evaluate(full, schemas, tok, split.test, "bus")["jga"]

        def adapter_run(n_prompt):
            m = fresh()
            reg = attach_adapters(m, DualLoraConfig(seed=seed,
                                                    n_prompt_loras=n_prompt))
            train_zero_shot(m, reg, split.train, schemas, visible, tok,
                            ad_hp, seed=seed)
            return evaluate(m, schemas, tok, split.test, "bus")["jga"]

        j_ctx = adapter_run(0)
        j_dual = adapter_run(1)
        rows[seed] = (j_full, j_ctx, j_dual)
        print(f"\n  seed {seed}: no-adapter {j_full:.4f}  "
              f"context {j_ctx:.4f}  dual {j_dual:.4f}")

    mean_full = np.mean([rows[s][0] for s in rows])
    mean_ctx = np.mean([rows[s][1] for s in rows])
    mean_dual = np.mean([rows[s][2] for s in rows])
    strict = sum(rows[s][2] > rows[s][1] for s in rows)
    assert mean_dual >= mean_ctx >= mean_full, rows
    assert strict >= 2, rows
    elapsed = time.time() - start
    assert elapsed < 900.0
    print(f"ACCEPTANCE 6 zero-shot trend (means: dual {mean_dual:.4f} >= "
          f"context {mean_ctx:.4f} >= none {mean_full:.4f}; strict in "
          f"{strict}/3 seeds): PASS ({elapsed:.0f}s)")


def test_criterion_7_merged_latency(tok):
    start = time.time()
    ctx = tok.encode("user: i need a taxi to parkside leaving at 08:15 "
                     "system: sure anything else user: i must arrive by "
                     "09:30 system: done is there anything else") * 2
    prompt = tok.encode("domain: taxi slot: arrive_by description: time the "
                        "taxi should arrive")
    dec = [2] + tok.encode("09:30")

    base = Seq2SeqModel(DEFAULT, seed=8)
    merged = Seq2SeqModel(DEFAULT, seed=8)
    registry = attach_adapters(merged, DualLoraConfig(seed=8))
    rng = SeededRng(9)
    for proj in registry.projections.values():
        proj.context_adapter.B.data[...] = rng.normal(
            proj.context_adapter.B.shape, std=0.05)
        proj.prompt_adapters[0].B.data[...] = rng.normal(
            proj.prompt_adapters[0].B.shape, std=0.05)
    t_dual = measure_forward_latency(merged, ctx, prompt, dec)
    summary = merged.embedding.data[prompt].mean(axis=0)
    for proj in registry.projections.values():
        proj.merge_context()
        proj.merge_prompt(summary)

    # paired interleaved timing cancels clock/cache drift between the sides
    def once(model):
        enc, s, _ = model.encode(ctx, prompt)
        model.decode_logits(dec, enc, s)

    for _ in range(20):
        once(base)
        once(merged)
    t_b, t_m = [], []
    for _ in range(200):
        t0 = time.perf_counter()
        once(base)
        t1 = time.perf_counter()
        once(merged)
        t2 = time.perf_counter()
        t_b.append(t1 - t0)
        t_m.append(t2 - t1)
    t_base, t_merged = float(np.median(t_b)), float(np.median(t_m))
    ratio = t_merged / t_base
    elapsed = time.time() - start
    assert ratio <= 1.02, f"merged/base ratio {ratio:.4f}"
    assert elapsed < 60.0
    print(f"\nACCEPTANCE 7 latency (merged {t_merged*1e3:.2f}ms <= 1.02x base "
          f"{t_base*1e3:.2f}ms, ratio {ratio:.3f}; unmerged dual "
          f"{t_dual*1e3:.2f}ms for contrast): PASS ({elapsed:.1f}s)")


def test_criterion_8_attention_mass_tooling(corpus_file, tmp_path):
    start = time.time()
    run = tmp_path / "run"
    assert cli.main(["train", "--set", f"corpus={corpus_file}",
                     "--set", f"out_dir={run}",
                     "--set", "pretrain.steps=30", "--set", "train.steps=0",
                     "--set", "pretrain.batch_size=4"]) == 0
    out = tmp_path / "dump"
    assert cli.main(["attn-dump", "--base", str(run / "base.ckpt"),
                     "--corpus", str(corpus_file),
                     "--dialogue-id", "bus-000", "--turn", "0",
                     "--domain", "bus", "--slot", "destination",
                     "--out", str(out)]) == 0
    maps = sorted(out.glob("attn_L*_H*.csv"))
    assert len(maps) == DEFAULT.n_encoder_layers * DEFAULT.n_heads
    for path in maps:
        weights = np.loadtxt(path, delimiter=",")
        assert np.abs(weights.sum(axis=1) - 1.0).max() < 1e-9
    with open(out / "prompt_mass.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(0.0 <= float(r["mass"]) <= 1.0 for r in rows)
    summary = json.loads((out / "prompt_mass_summary.json").read_text())
    assert summary["boundary"] == summary["context_tokens"]
    assert "first_layer_mass" in summary and "last_layer_mass" in summary
    elapsed = time.time() - start
    print(f"\nACCEPTANCE 8 attention-mass tooling (first layer "
          f"{summary['first_layer_mass']:.4f}, last layer "
          f"{summary['last_layer_mass']:.4f}, emitted as data): PASS "
          f"({elapsed:.1f}s)")


def test_criterion_9_sweep_reproducibility(corpus_file, tmp_path):
    start = time.time()

    def run(name):
        out = tmp_path / name
        assert cli.main(["sweep", "--axis", "rank", "--values", "8,16,32,64",
                         "--set", f"corpus={corpus_file}",
                         "--set", f"out_dir={out}",
                         "--set", "pretrain.steps=10",
                         "--set", "pretrain.batch_size=2",
                         "--set", "train.steps=10",
                         "--set", "train.batch_size=2"]) == 0
        with open(out / "sweep.csv") as fh:
            return list(csv.DictReader(fh))

    rows_a = run("sweep_a")
    rows_b = run("sweep_b")
    assert [r["status"] for r in rows_a] == ["ok"] * 4
    counts = [int(r["trainable_params"]) for r in rows_a]
    d = DEFAULT.d_model
    expected = [24 * r * (d + d) for r in (8, 16, 32, 64)]
    assert counts == expected  # sum of r*(d_in+d_out) over all 24 pairs
    assert counts == sorted(counts) and len(set(counts)) == 4
    for key in ("jga", "aga", "trainable_params", "total_params"):
        assert [r[key] for r in rows_a] == [r[key] for r in rows_b], key
    elapsed = time.time() - start
    print(f"\nACCEPTANCE 9 rank-sweep closed-form counts + bit-identical "
          f"rerun: PASS ({elapsed:.0f}s)")
