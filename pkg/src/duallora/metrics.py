"""Joint and average goal accuracy over aligned per-turn state sets.

Both metrics take aligned lists of predicted and gold triple sets, one per
turn, already restricted to the evaluated domain. Values are compared
after lowercasing and whitespace collapsing unless ``normalize=False``.

Counting rules:
  - jga counts every turn; an empty-gold turn is correct iff the
    prediction is empty too. With ``skip_empty_gold=True`` it counts only
    turns with a nonempty gold set (the shared rule under which
    jga <= aga holds turn for turn).
  - aga skips empty-gold turns (the per-turn ratio is undefined) and is
    the recall form: predicted-but-not-gold slots do not enter the
    denominator.
  - zero counted turns yields 1.0 (vacuously correct), matching the
    usual DST evaluator convention.
"""

from __future__ import annotations

from .corpus import SlotSchema, Triple, slot_target
from .errors import ContractError
from .tokenizer import normalize


def _norm(state, normalize_values: bool) -> frozenset[Triple]:
    if not normalize_values:
        return frozenset(state)
    return frozenset((d, s, normalize(v)) for d, s, v in state)


def _check_aligned(predictions, golds):
    if len(predictions) != len(golds):
        raise ContractError(
            f"aligned turn lists required: {len(predictions)} predictions vs "
            f"{len(golds)} golds")


def jga(predictions, golds, skip_empty_gold: bool = False,
        normalize_values: bool = True) -> float:
    """Fraction of turns whose predicted set equals the gold set exactly."""
    _check_aligned(predictions, golds)
    counted = correct = 0
    for pred, gold in zip(predictions, golds):
        g = _norm(gold, normalize_values)
        if skip_empty_gold and not g:
            continue
        counted += 1
        correct += _norm(pred, normalize_values) == g
    return 1.0 if counted == 0 else correct / counted


def aga(predictions, golds, normalize_values: bool = True) -> float:
    """Mean per-turn fraction of gold-active slots predicted correctly."""
    _check_aligned(predictions, golds)
    counted = 0
    total = 0.0
    for pred, gold in zip(predictions, golds):
        g = _norm(gold, normalize_values)
        if not g:
            continue
        counted += 1
        total += len(g & _norm(pred, normalize_values)) / len(g)
    return 1.0 if counted == 0 else total / counted


def per_slot_accuracy(predictions, golds, slots: list[SlotSchema],
                      normalize_values: bool = True) -> dict[str, float]:
    """Per-slot value-or-none agreement across all turns."""
    _check_aligned(predictions, golds)
    out: dict[str, float] = {}
    for schema in slots:
        correct = 0
        for pred, gold in zip(predictions, golds):
            pv = slot_target(_norm(pred, normalize_values), schema.domain, schema.slot)
            gv = slot_target(_norm(gold, normalize_values), schema.domain, schema.slot)
            correct += pv == gv
        out[schema.key] = 1.0 if not predictions else correct / len(predictions)
    return out
