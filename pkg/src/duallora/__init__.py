"""Dual low-rank adapters on a desk-scale encoder-decoder.

Layering: ``tensor`` (autodiff engine) -> ``model`` (seq2seq backbone with
adapter-ready attention projections) -> ``adapters`` (context/prompt
low-rank pairs, fusion, weight/bias merging) -> ``corpus``/``metrics``/
``harness`` (the zero-shot dialogue-state-tracking task) -> ``cli``.
"""

from .adapters import (AdaptedProjection, AdapterRegistry, DualLoraConfig,
                       Fusion, LoraPair, attach_adapters, context_delta,
                       fingerprint, init_lora, prompt_summary_input)
from .corpus import (Dialogue, SlotSchema, Turn, ZeroShotSplit,
                     build_slot_prompt, generate_corpus, load_corpus,
                     make_split, parse_value, save_corpus, slot_target)
from .metrics import aga, jga, per_slot_accuracy
from .model import (AttentionTrace, ModelConfig, Seq2SeqModel,
                    capture_attention, prompt_attention_mass)
from .tensor import (Tensor, backward, finite_difference_grad, rank_of)
from .tokenizer import Tokenizer

__all__ = [
    "AdaptedProjection", "AdapterRegistry", "AttentionTrace", "Dialogue",
    "DualLoraConfig", "Fusion", "LoraPair", "ModelConfig", "Seq2SeqModel",
    "SlotSchema", "Tensor", "Tokenizer", "Turn", "ZeroShotSplit", "aga",
    "attach_adapters", "backward", "build_slot_prompt", "capture_attention",
    "context_delta", "fingerprint", "finite_difference_grad",
    "generate_corpus", "init_lora", "jga", "load_corpus", "make_split",
    "parse_value", "per_slot_accuracy", "prompt_attention_mass",
    "prompt_summary_input", "rank_of", "save_corpus", "slot_target",
]
