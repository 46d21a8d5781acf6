"""Operator CLI: gen-corpus, train, eval, merge, attn-dump, sweep.

Every command resolves its configuration (defaults <- --config file <-
--set overrides), writes the resolved config into its output directory,
and is bit-reproducible from that file. Exit codes: 0 success, 2
configuration problem, 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .adapters import DualLoraConfig, attach_adapters, fingerprint
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import (build_slot_prompt, generate_corpus, load_corpus,
                     make_split, save_corpus, slots_of_domain)
from .errors import ConfigError, ContractError, CorpusError, DivergenceError
from .harness import (Hyperparams, build_tokenizer, evaluate, finetune_dst,
                      measure_forward_latency, pretrain_base, render_turn,
                      train_zero_shot)
from .model import ModelConfig, Seq2SeqModel, capture_attention, trace_prompt_mass
from .tokenizer import Tokenizer

TRAIN_DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "run",
    "corpus": "corpus.json",
    "held_out": "bus",
    "base_checkpoint": None,
    "eval_merged": False,
    "max_value_tokens": 6,
    "model": {"vocab_size": 512, "d_model": 64, "n_heads": 4, "d_ff": 128,
              "n_encoder_layers": 2, "n_decoder_layers": 2,
              "max_seq_len": 256, "prompt_position": "suffix"},
    "adapters": {"rank": 8, "target_projections": "qv", "fusion": "mean_add",
                 "combination": "horizontal", "n_prompt_loras": 1,
                 "init_std": 0.02, "seed": None, "prompt_input": "slot_prompt",
                 "scale": 1.0, "prompt_in_decoder": True},
    "pretrain": {"steps": 600, "batch_size": 4, "lr": 3e-3,
                 "weight_decay": 0.0, "none_slots_per_turn": 1,
                 "max_none_fraction": 0.4},
    "finetune": {"steps": 0, "batch_size": 4, "lr": 3e-3,
                 "weight_decay": 0.0, "none_slots_per_turn": 1,
                 "max_none_fraction": 0.4},
    "train": {"steps": 1500, "batch_size": 4, "lr": 5e-3,
              "weight_decay": 0.0, "none_slots_per_turn": 1,
              "max_none_fraction": 0.4},
}

SWEEP_AXES = {
    "rank": ("adapters", "rank"),
    "placement": ("adapters", "target_projections"),
    "fusion": ("adapters", "fusion"),
    "combination": ("adapters", "combination"),
    "n_prompt_loras": ("adapters", "n_prompt_loras"),
    "prompt_input": ("adapters", "prompt_input"),
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def resolve_config(defaults: dict, config_path: str | None,
                   sets: list[str]) -> dict:
    cfg = copy.deepcopy(defaults)
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            cfg = _deep_merge(cfg, json.load(fh))
    for assignment in sets or []:
        _apply_set(cfg, assignment)
    return cfg


def _out_dir(cfg: dict) -> Path:
    root = os.environ.get("DUALLORA_OUT_ROOT")
    path = Path(cfg["out_dir"])
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _hyper(section: dict) -> Hyperparams:
    return Hyperparams(steps=section["steps"], batch_size=section["batch_size"],
                       lr=section["lr"], weight_decay=section["weight_decay"],
                       none_slots_per_turn=section["none_slots_per_turn"],
                       max_none_fraction=section["max_none_fraction"])


def _save_base(path: Path, model: Seq2SeqModel, tok: Tokenizer,
               extra: dict | None = None) -> None:
    tensors = {name: t.data for name, t in model.named_tensors().items()}
    header_cfg = {"model": model.config.to_dict(), "tokenizer": tok.to_dict()}
    save_checkpoint(path, tensors, header_cfg, extra)


def _load_base(path) -> tuple[Seq2SeqModel, Tokenizer, dict]:
    arrays, header = load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"]["model"])
    tok = Tokenizer.from_dict(header["model_config"]["tokenizer"])
    model = Seq2SeqModel(cfg, seed=0)
    model.load_state(arrays)
    return model, tok, header


def _adapter_config(cfg: dict) -> DualLoraConfig:
    section = dict(cfg["adapters"])
    if section.get("seed") is None:
        section["seed"] = cfg["seed"]
    return DualLoraConfig(**section)


def _save_adapters(path: Path, registry, model_header_cfg: dict) -> None:
    tensors = {name: t.data for name, t in registry.named_tensors().items()}
    save_checkpoint(path, tensors, model_header_cfg,
                    {"adapter_config": registry.config.to_dict()})


# ---------------------------------------------------------------------------
# pipeline shared by train and sweep


def run_training_pipeline(cfg: dict, out_dir: Path) -> dict:
    schemas, dialogues = load_corpus(cfg["corpus"])
    split = make_split(schemas, dialogues, cfg["held_out"])
    if split.warning:
        print(f"warning: {split.warning}", file=sys.stderr)
    visible = sorted({s.domain for s in schemas} - {cfg["held_out"]})
    model_cfg = ModelConfig.from_dict(cfg["model"])

    if cfg.get("base_checkpoint"):
        model, tok, _ = _load_base(cfg["base_checkpoint"])
    else:
        tok = build_tokenizer(schemas, dialogues, model_cfg.vocab_size)
        model = Seq2SeqModel(model_cfg, seed=cfg["seed"])
        pretrain_base(model, split.train, tok, _hyper(cfg["pretrain"]),
                      cfg["seed"])
        _save_base(out_dir / "base.ckpt", model, tok)
    if cfg["finetune"]["steps"] > 0:
        finetune_dst(model, split.train, schemas, visible, tok,
                     _hyper(cfg["finetune"]), cfg["seed"])
        _save_base(out_dir / "base_finetuned.ckpt", model, tok)

    ad_cfg = _adapter_config(cfg)
    registry = attach_adapters(model, ad_cfg)
    report = train_zero_shot(model, registry, split.train, schemas, visible,
                             tok, _hyper(cfg["train"]), cfg["seed"])
    header_cfg = {"model": model.config.to_dict(), "tokenizer": tok.to_dict()}
    _save_adapters(out_dir / "adapters.ckpt", registry, header_cfg)

    metrics = evaluate(model, schemas, tok, split.test, cfg["held_out"],
                       prompt_mode=ad_cfg.prompt_input,
                       max_value_tokens=cfg["max_value_tokens"],
                       registry=registry, merged=cfg["eval_merged"])
    metrics["params"] = {"trainable": report.trainable_params,
                         "total": report.total_params}
    _write_json(out_dir / "metrics.json", metrics)
    _write_json(out_dir / "training_report.json",
                {"losses": report.losses, "steps": report.steps,
                 "trainable_params": report.trainable_params,
                 "total_params": report.total_params})
    return metrics


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> int:
    schemas, dialogues = generate_corpus(args.seed, args.dialogues_per_domain)
    save_corpus(schemas, dialogues, args.out)
    print(f"wrote {args.out}: {len(dialogues)} dialogues, "
          f"{len(schemas)} slots")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(TRAIN_DEFAULTS, args.config, args.set)
    out_dir = _out_dir(cfg)
    _write_json(out_dir / "resolved_config.json", cfg)
    metrics = run_training_pipeline(cfg, out_dir)
    print(f"jga={metrics['jga']:.4f} aga={metrics['aga']:.4f} "
          f"({metrics['n_turns']} turns)")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(TRAIN_DEFAULTS, args.config, args.set)
    out_dir = _out_dir(cfg)
    _write_json(out_dir / "resolved_config.json", cfg)
    schemas, dialogues = load_corpus(cfg["corpus"])
    split = make_split(schemas, dialogues, cfg["held_out"])
    if not cfg.get("base_checkpoint"):
        raise ConfigError("eval requires base_checkpoint")
    model, tok, _ = _load_base(cfg["base_checkpoint"])
    registry = None
    prompt_mode = "slot_prompt"
    params = {"trainable": 0,
              "total": sum(p.data.size for p in model.parameters())}
    if cfg.get("adapters_checkpoint"):
        arrays, header = load_checkpoint(cfg["adapters_checkpoint"])
        ad_cfg = DualLoraConfig(**header["adapter_config"])
        registry = attach_adapters(model, ad_cfg)
        registry.load_state(arrays)
        prompt_mode = ad_cfg.prompt_input
        params = {"trainable": registry.trainable_param_count(),
                  "total": params["total"] + registry.trainable_param_count()}
    metrics = evaluate(model, schemas, tok, split.test, cfg["held_out"],
                       prompt_mode=prompt_mode,
                       max_value_tokens=cfg["max_value_tokens"],
                       registry=registry, merged=cfg["eval_merged"])
    metrics["params"] = params
    _write_json(out_dir / "metrics.json", metrics)
    print(f"jga={metrics['jga']:.4f} aga={metrics['aga']:.4f}")
    return 0


def cmd_merge(args) -> int:
    model, tok, _ = _load_base(args.base)
    arrays, header = load_checkpoint(args.adapters)
    ad_cfg = DualLoraConfig(**header["adapter_config"])
    registry = attach_adapters(model, ad_cfg)
    registry.load_state(arrays)
    extra: dict = {}
    prompted = [p for p in registry.projections.values() if p.prompt_adapters]
    if prompted:
        if not (args.corpus and args.domain and args.slot):
            raise ConfigError("prompt adapters present: merge needs --corpus, "
                              "--domain and --slot to fix the prompt summary")
        schemas, _ = load_corpus(args.corpus)
        match = [s for s in slots_of_domain(schemas, args.domain)
                 if s.slot == args.slot]
        if not match:
            raise ConfigError(f"unknown slot {args.domain}-{args.slot}")
        prompt_ids = tok.encode(build_slot_prompt(match[0], ad_cfg.prompt_input))
        summary = model.embedding.data[prompt_ids].mean(axis=0)
        extra["merged_prompt"] = {"domain": args.domain, "slot": args.slot,
                                  "fingerprint": fingerprint(summary)}
        for proj in prompted:
            proj.merge_prompt(summary)
    for proj in registry.projections.values():
        if proj.context_adapter is not None:
            proj.merge_context()
    _save_base(Path(args.out), model, tok, extra)
    print(f"wrote {args.out}")
    return 0


def cmd_attn_dump(args) -> int:
    model, tok, _ = _load_base(args.base)
    if args.adapters:
        arrays, header = load_checkpoint(args.adapters)
        ad_cfg = DualLoraConfig(**header["adapter_config"])
        registry = attach_adapters(model, ad_cfg)
        registry.load_state(arrays)
        prompt_mode = ad_cfg.prompt_input
    else:
        prompt_mode = "slot_prompt"
    schemas, dialogues = load_corpus(args.corpus)
    by_id = {d.id: d for d in dialogues}
    if args.dialogue_id not in by_id:
        raise ConfigError(f"unknown dialogue id {args.dialogue_id!r}")
    dialogue = by_id[args.dialogue_id]
    if not 0 <= args.turn < len(dialogue.turns):
        raise ConfigError(f"turn {args.turn} out of range for {args.dialogue_id}")
    match = [s for s in slots_of_domain(schemas, args.domain)
             if s.slot == args.slot]
    if not match:
        raise ConfigError(f"unknown slot {args.domain}-{args.slot}")
    context_ids = tok.encode(" ".join(
        render_turn(t) for t in dialogue.turns[:args.turn + 1]))
    prompt_ids = tok.encode(build_slot_prompt(match[0], prompt_mode))
    traces = capture_attention(model, context_ids, prompt_ids)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    masses = []
    for tr in traces:
        name = out / f"attn_L{tr.layer}_H{tr.head}.csv"
        np.savetxt(name, tr.weights, delimiter=",", fmt="%.17g")
        masses.append({"layer": tr.layer, "head": tr.head,
                       "mass": trace_prompt_mass(tr)})
    with open(out / "prompt_mass.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["layer", "head", "mass"])
        writer.writeheader()
        writer.writerows(masses)
    layers = sorted({m["layer"] for m in masses})
    per_layer = {str(layer): float(np.mean(
        [m["mass"] for m in masses if m["layer"] == layer])) for layer in layers}
    meta = {"boundary": traces[0].prompt_start,
            "prompt_end": traces[0].prompt_end,
            "context_tokens": len(context_ids),
            "prompt_tokens": len(prompt_ids),
            "per_layer_mass": per_layer,
            "first_layer_mass": per_layer[str(layers[0])],
            "last_layer_mass": per_layer[str(layers[-1])]}
    _write_json(out / "prompt_mass_summary.json", meta)
    print(f"wrote {len(traces)} attention maps to {out}")
    return 0


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; "
                          f"choose from {sorted(SWEEP_AXES)}")
    base_cfg = resolve_config(TRAIN_DEFAULTS, args.config, args.set)
    out_dir = _out_dir(base_cfg)
    _write_json(out_dir / "resolved_config.json", base_cfg)
    values = [json.loads(v) if v.lstrip("-").isdigit() else v
              for v in args.values.split(",")]

    if not base_cfg.get("base_checkpoint"):
        # one shared base per sweep: no axis touches the base model
        schemas, dialogues = load_corpus(base_cfg["corpus"])
        split = make_split(schemas, dialogues, base_cfg["held_out"])
        model_cfg = ModelConfig.from_dict(base_cfg["model"])
        tok = build_tokenizer(schemas, dialogues, model_cfg.vocab_size)
        model = Seq2SeqModel(model_cfg, seed=base_cfg["seed"])
        pretrain_base(model, split.train, tok, _hyper(base_cfg["pretrain"]),
                      base_cfg["seed"])
        _save_base(out_dir / "base.ckpt", model, tok)
        base_cfg["base_checkpoint"] = str(out_dir / "base.ckpt")

    section, key = SWEEP_AXES[args.axis]
    rows = []
    for value in values:
        run_cfg = copy.deepcopy(base_cfg)
        run_cfg[section][key] = value
        run_cfg["out_dir"] = str(out_dir / f"{args.axis}-{value}")
        run_dir = _out_dir(run_cfg)
        _write_json(run_dir / "resolved_config.json", run_cfg)
        row = {"axis": args.axis, "value": value, "jga": "", "aga": "",
               "trainable_params": "", "total_params": "", "status": "ok"}
        try:
            metrics = run_training_pipeline(run_cfg, run_dir)
            row.update(jga=metrics["jga"], aga=metrics["aga"],
                       trainable_params=metrics["params"]["trainable"],
                       total_params=metrics["params"]["total"])
        except Exception as exc:  # record and continue with the next value
            row["status"] = f"failed: {exc}"
        rows.append(row)
        print(f"{args.axis}={value}: {row['status']} jga={row['jga']}")
    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return 0


def cmd_latency(args) -> int:
    """Timing harness: base vs merged vs unmerged dual forward."""
    model, tok, _ = _load_base(args.base)
    context_ids = tok.encode(args.text)[:model.config.max_seq_len // 2]
    prompt_ids = tok.encode(args.prompt)
    decoder_ids = [2, 300, 301, 302]
    report = {"base": measure_forward_latency(model, context_ids, prompt_ids,
                                              decoder_ids, args.warmup,
                                              args.reps)}
    if args.adapters:
        arrays, header = load_checkpoint(args.adapters)
        ad_cfg = DualLoraConfig(**header["adapter_config"])
        registry = attach_adapters(model, ad_cfg)
        registry.load_state(arrays)
        report["unmerged_dual"] = measure_forward_latency(
            model, context_ids, prompt_ids, decoder_ids, args.warmup, args.reps)
        summary = model.embedding.data[prompt_ids].mean(axis=0)
        for proj in registry.projections.values():
            if proj.context_adapter is not None:
                proj.merge_context()
            if proj.prompt_adapters:
                proj.merge_prompt(summary)
        report["merged"] = measure_forward_latency(
            model, context_ids, prompt_ids, decoder_ids, args.warmup, args.reps)
        report["merged_over_base"] = report["merged"] / report["base"]
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duallora",
        description="dual low-rank adapters on a desk-scale seq2seq model")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic DST corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dialogues-per-domain", type=int, default=40)
    p.set_defaults(func=cmd_gen_corpus)

    for name, func in (("train", cmd_train), ("eval", cmd_eval)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE")
        p.set_defaults(func=func)

    p = sub.add_parser("merge", help="fold adapters into a plain checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--domain", default=None)
    p.add_argument("--slot", default=None)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("attn-dump", help="export post-softmax attention maps")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters", default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--dialogue-id", required=True)
    p.add_argument("--turn", type=int, default=0)
    p.add_argument("--domain", required=True)
    p.add_argument("--slot", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("sweep", help="one trained run per axis value")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True,
                   help="comma separated, e.g. 8,16,32,64")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("latency", help="base vs merged forward timing")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters", default=None)
    p.add_argument("--text", default="user: i need a taxi to the airport")
    p.add_argument("--prompt", default="domain: taxi slot: destination "
                                       "description: place where the ride should go")
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--reps", type=int, default=200)
    p.set_defaults(func=cmd_latency)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
