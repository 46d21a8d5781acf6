"""Zero-shot DST harness: example building, training loops, evaluation.

Decoding is per slot: every (turn, slot) pair becomes one encode+decode
with the slot prompt appended to the dialogue context, and the predicted
state is assembled from the decoded values. The base model is first
"pretrained" on the visible-domain split (the desk-scale stand-in for a
published checkpoint), then frozen while adapters train on the same
visible data.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterRegistry
from .corpus import (Dialogue, SlotSchema, Triple, assemble_state,
                     build_slot_prompt, parse_value, slot_target,
                     slots_of_domain)
from .errors import ContractError, DivergenceError
from .metrics import aga, jga, per_slot_accuracy
from .model import ModelConfig, Seq2SeqModel
from .optim import AdamW
from .rng import SeededRng
from .tensor import backward
from .tokenizer import EOS_ID, Tokenizer


@dataclass
class Hyperparams:
    steps: int = 400
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    max_value_tokens: int = 6
    none_slots_per_turn: int = 1  # extra out-of-domain abstention examples
    max_none_fraction: float = 0.4  # cap on 'none'-target share of the stream


@dataclass
class Example:
    turn_texts: list[str]  # rendered turns, oldest first
    prompt_text: str
    target_text: str
    domain: str
    slot: str


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    trainable_params: int = 0
    total_params: int = 0


def render_turn(turn) -> str:
    return f"user: {turn.user} system: {turn.system}"


def build_tokenizer(schemas: list[SlotSchema], dialogues: list[Dialogue],
                    vocab_size: int) -> Tokenizer:
    """Corpus-wide vocabulary: dialogue text, prompts, values, targets."""
    texts = ["none"]
    for s in schemas:
        texts.append(build_slot_prompt(s, "slot_prompt"))
        texts.append(build_slot_prompt(s, "slot_embedding"))
        if s.values is not None:
            texts.extend(s.values)
    for d in dialogues:
        texts.extend(render_turn(t) for t in d.turns)
    return Tokenizer.build(texts, vocab_size)


def build_examples(dialogues: list[Dialogue], schemas: list[SlotSchema],
                   allowed_domains: list[str], prompt_mode: str,
                   none_slots_per_turn: int, rng: SeededRng,
                   max_none_fraction: float = 1.0) -> list[Example]:
    """One example per (turn, slot of the dialogue's domains), plus sampled
    out-of-domain 'none' examples for abstention.

    'none' targets dominate the raw stream and drag a small model into
    always abstaining, so they are downsampled to at most
    ``max_none_fraction`` of the result.
    """
    by_domain: dict[str, list[SlotSchema]] = {}
    for s in schemas:
        if s.domain in allowed_domains:
            by_domain.setdefault(s.domain, []).append(s)
    examples: list[Example] = []
    for d in dialogues:
        for turn in d.turns:
            turn_texts = [render_turn(t) for t in d.turns[:turn.index + 1]]
            own_slots = [s for dom in d.domains for s in by_domain.get(dom, [])]
            for s in own_slots:
                examples.append(Example(
                    turn_texts=turn_texts,
                    prompt_text=build_slot_prompt(s, prompt_mode),
                    target_text=slot_target(turn.state, s.domain, s.slot),
                    domain=s.domain, slot=s.slot))
            others = [s for dom, ss in sorted(by_domain.items())
                      for s in ss if dom not in d.domains]
            for _ in range(min(none_slots_per_turn, len(others))):
                s = rng.choice(others)
                examples.append(Example(
                    turn_texts=turn_texts,
                    prompt_text=build_slot_prompt(s, prompt_mode),
                    target_text="none", domain=s.domain, slot=s.slot))
    valued = [e for e in examples if e.target_text != "none"]
    nones = [e for e in examples if e.target_text == "none"]
    if valued and nones and max_none_fraction < 1.0:
        cap = int(max_none_fraction / (1.0 - max_none_fraction) * len(valued))
        if len(nones) > cap:
            nones = rng.sample(nones, cap)
    return valued + nones


def encode_example(tok: Tokenizer, cfg: ModelConfig, ex: Example
                   ) -> tuple[list[int], list[int], list[int]]:
    """Token ids for (context, prompt, target); drops oldest turns first."""
    prompt_ids = tok.encode(ex.prompt_text)
    turn_ids = [tok.encode(t) for t in ex.turn_texts]
    budget = cfg.max_seq_len - len(prompt_ids)
    while len(turn_ids) > 1 and sum(map(len, turn_ids)) > budget:
        turn_ids.pop(0)
    context_ids = [i for ids in turn_ids for i in ids]
    target_ids = tok.encode(ex.target_text) + [EOS_ID]
    return context_ids, prompt_ids, target_ids


def _run_training(model: Seq2SeqModel, params, examples: list[Example],
                  tok: Tokenizer, hp: Hyperparams, seed: int) -> list[float]:
    if not examples:
        raise ContractError("no training examples (empty split?)")
    opt = AdamW(params, lr=hp.lr, weight_decay=hp.weight_decay)
    rng = SeededRng(seed).derive("training")
    order = list(range(len(examples)))
    rng.shuffle(order)
    cursor = 0
    losses: list[float] = []
    encoded = [encode_example(tok, model.config, ex) for ex in examples]
    for step in range(hp.steps):
        opt.zero_grad()
        batch_loss = 0.0
        for _ in range(hp.batch_size):
            if cursor == len(order):
                cursor = 0
                rng.shuffle(order)
            ctx, prompt, target = encoded[order[cursor]]
            cursor += 1
            loss = model.loss(ctx, prompt, target) * (1.0 / hp.batch_size)
            backward(loss)
            batch_loss += loss.item()
        if not np.isfinite(batch_loss):
            raise DivergenceError(
                f"non-finite loss {batch_loss} at step {step}; aborting")
        opt.step()
        losses.append(batch_loss)
    return losses


def copy_examples(dialogues: list[Dialogue]) -> list[Example]:
    """Generic seq2seq objective: reproduce the current user utterance from
    the dialogue context. No prompts, no state labels."""
    examples: list[Example] = []
    for d in dialogues:
        for turn in d.turns:
            examples.append(Example(
                turn_texts=[render_turn(t) for t in d.turns[:turn.index + 1]],
                prompt_text="", target_text=turn.user,
                domain="", slot=""))
    return examples


def pretrain_base(model: Seq2SeqModel, train_dialogues: list[Dialogue],
                  tok: Tokenizer, hp: Hyperparams, seed: int) -> TrainReport:
    """Generic copy-task pretraining of the full model on the visible split.

    The stand-in for a published pretrained checkpoint: it grounds the
    vocabulary and the encoder-decoder copying pathway without ever seeing
    a state label or a slot prompt.
    """
    params = model.parameters()
    for p in params:
        p.requires_grad = True
    examples = copy_examples(train_dialogues)
    report = TrainReport(total_params=sum(p.data.size for p in params))
    if hp.steps > 0:
        report.losses = _run_training(model, params, examples, tok, hp,
                                      seed + 104729)  # offset the DST stream
    report.steps = hp.steps
    report.trainable_params = report.total_params
    return report


def finetune_dst(model: Seq2SeqModel, train_dialogues: list[Dialogue],
                 schemas: list[SlotSchema], allowed_domains: list[str],
                 tok: Tokenizer, hp: Hyperparams, seed: int,
                 prompt_mode: str = "slot_prompt") -> TrainReport:
    """Full-model DST training on the visible split (the no-adapter
    baseline the adapter rows are compared against)."""
    params = model.parameters()
    for p in params:
        p.requires_grad = True
    examples = build_examples(train_dialogues, schemas, allowed_domains,
                              prompt_mode, hp.none_slots_per_turn,
                              SeededRng(seed).derive("examples"),
                              hp.max_none_fraction)
    report = TrainReport(total_params=sum(p.data.size for p in params))
    if hp.steps > 0:
        report.losses = _run_training(model, params, examples, tok, hp, seed)
    report.steps = hp.steps
    report.trainable_params = report.total_params
    return report


def train_zero_shot(model: Seq2SeqModel, registry: AdapterRegistry,
                    train_dialogues: list[Dialogue], schemas: list[SlotSchema],
                    allowed_domains: list[str], tok: Tokenizer,
                    hp: Hyperparams, seed: int) -> TrainReport:
    """Adapter-only training; the base must already be frozen."""
    if any(p.requires_grad for p in model.parameters()):
        raise ContractError("base weights must be frozen before adapter training")
    params = registry.trainable_parameters()
    examples = build_examples(train_dialogues, schemas, allowed_domains,
                              registry.config.prompt_input,
                              hp.none_slots_per_turn,
                              SeededRng(seed).derive("examples"),
                              hp.max_none_fraction)
    report = TrainReport(
        trainable_params=registry.trainable_param_count(),
        total_params=sum(p.data.size for p in model.parameters())
        + registry.trainable_param_count())
    if hp.steps > 0:
        report.losses = _run_training(model, params, examples, tok, hp, seed)
    report.steps = hp.steps
    return report


# ---------------------------------------------------------------------------
# evaluation


def _predict_slot(model: Seq2SeqModel, tok: Tokenizer, turn_texts: list[str],
                  schema: SlotSchema, prompt_mode: str,
                  max_value_tokens: int) -> str:
    ex = Example(turn_texts, build_slot_prompt(schema, prompt_mode), "none",
                 schema.domain, schema.slot)
    ctx, prompt, _ = encode_example(tok, model.config, ex)
    ids = model.generate(ctx, prompt, max_value_tokens)
    return parse_value(schema, tok.decode(ids))


def evaluate(model: Seq2SeqModel, schemas: list[SlotSchema],
             tok: Tokenizer, dialogues: list[Dialogue], domain: str,
             prompt_mode: str = "slot_prompt", max_value_tokens: int = 6,
             registry: AdapterRegistry | None = None,
             merged: bool = False) -> dict:
    """Per-slot decoding over every turn of the evaluated domain.

    With ``merged=True`` the context adapters fold into the weights once
    and, per slot, the prompt branch folds into the bias before decoding;
    everything is unmerged again afterwards.
    """
    slots = slots_of_domain(schemas, domain)
    if merged and registry is None:
        raise ContractError("merged evaluation needs the adapter registry")
    turn_keys: list[tuple[int, int]] = []
    golds: list[frozenset[Triple]] = []
    contexts: list[list[str]] = []
    for di, d in enumerate(dialogues):
        for turn in d.turns:
            turn_keys.append((di, turn.index))
            golds.append(frozenset(t for t in turn.state if t[0] == domain))
            contexts.append([render_turn(t) for t in d.turns[:turn.index + 1]])

    values: dict[tuple[int, tuple[str, str]], str] = {}
    if merged:
        for proj in registry.projections.values():
            if proj.context_adapter is not None:
                proj.merge_context()
        try:
            for schema in slots:
                prompt_ids = tok.encode(build_slot_prompt(schema, prompt_mode))
                summary = model.embedding.data[prompt_ids].mean(axis=0)
                prompted = [proj for proj in registry.projections.values()
                            if proj.prompt_adapters]
                for proj in prompted:
                    proj.merge_prompt(summary)
                try:
                    for ti, turn_texts in enumerate(contexts):
                        values[(ti, (schema.domain, schema.slot))] = _predict_slot(
                            model, tok, turn_texts, schema, prompt_mode,
                            max_value_tokens)
                finally:
                    for proj in prompted:
                        proj.unmerge_prompt()
        finally:
            for proj in registry.projections.values():
                if proj.merged_context:
                    proj.unmerge_context()
    else:
        for ti, turn_texts in enumerate(contexts):
            for schema in slots:
                values[(ti, (schema.domain, schema.slot))] = _predict_slot(
                    model, tok, turn_texts, schema, prompt_mode,
                    max_value_tokens)

    predictions = [
        assemble_state({key: values[(ti, key)]
                        for key in ((s.domain, s.slot) for s in slots)})
        for ti in range(len(golds))]
    return {
        "domain": domain,
        "n_turns": len(golds),
        "jga": jga(predictions, golds),
        "aga": aga(predictions, golds),
        "per_slot": per_slot_accuracy(predictions, golds, slots),
    }


# ---------------------------------------------------------------------------
# latency harness


def measure_forward_latency(model: Seq2SeqModel, context_ids, prompt_ids,
                            decoder_ids, warmup: int = 20,
                            reps: int = 200) -> float:
    """Median wall time of one full (encode + decode) forward, in seconds."""
    def once():
        enc, summary, _ = model.encode(context_ids, prompt_ids)
        model.decode_logits(decoder_ids, enc, summary)

    for _ in range(warmup):
        once()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        once()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
