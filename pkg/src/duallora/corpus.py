"""Dialogue-state-tracking corpus: schema, dialogues, splits, prompts.

Corpus JSON layout (see corpus.schema.json for the formal schema):

  {"schema":    [{"domain", "slot", "description", "values"?}],
   "dialogues": [{"id", "domains", "turns":
                   [{"user", "system", "state": {"domain-slot": value}}]}]}

Turn states are cumulative. "none"-valued entries are excluded from the
active set on load. The bundled synthetic generator builds five domains
with deliberately shared slot semantics (times, places, areas, days recur
across domains) so zero-shot transfer to a held-out domain is measurable,
and utterances that mention two values of the same type (leave-at vs
arrive-by) so the slot prompt is load-bearing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError, ContractError, CorpusError
from .rng import SeededRng
from .tokenizer import normalize

Triple = tuple[str, str, str]  # (domain, slot, value)


@dataclass(frozen=True)
class SlotSchema:
    domain: str
    slot: str
    description: str
    values: tuple[str, ...] | None = None  # None = free-form

    @property
    def key(self) -> str:
        return f"{self.domain}-{self.slot}"


@dataclass
class Turn:
    index: int
    user: str
    system: str
    state: frozenset[Triple]


@dataclass
class Dialogue:
    id: str
    domains: tuple[str, ...]
    turns: list[Turn]


@dataclass
class ZeroShotSplit:
    held_out: str
    train: list[Dialogue]
    test: list[Dialogue]
    warning: str | None = None


# ---------------------------------------------------------------------------
# synthetic grammar

_PLACES = ("parkside", "riverside", "oldtown", "newtown", "airport")
_TIMES = ("08:15", "09:30", "11:45", "13:00", "17:20", "19:05")
_DAYS = ("monday", "tuesday", "thursday", "friday", "saturday")
_AREAS = ("north", "south", "east", "west", "centre")
_PRICES = ("cheap", "moderate", "expensive")
_FOODS = ("italian", "indian", "chinese", "british", "thai")
_TYPES = ("museum", "cinema", "park", "theatre", "gallery")
_STARS = ("two", "three", "four", "five")

SYNTHETIC_SCHEMA: list[SlotSchema] = [
    SlotSchema("taxi", "destination", "place where the ride should go", _PLACES),
    SlotSchema("taxi", "leave_at", "time the taxi should depart", _TIMES),
    SlotSchema("taxi", "arrive_by", "time the taxi should arrive", _TIMES),
    SlotSchema("bus", "destination", "place where the bus should go", _PLACES),
    SlotSchema("bus", "leave_at", "time the bus should depart", _TIMES),
    SlotSchema("bus", "day", "day of the bus trip", _DAYS),
    SlotSchema("restaurant", "food", "type of cuisine to eat", _FOODS),
    SlotSchema("restaurant", "area", "part of town for the restaurant", _AREAS),
    SlotSchema("restaurant", "price_range", "price level of the restaurant", _PRICES),
    SlotSchema("restaurant", "book_time", "time of the table booking", _TIMES),
    SlotSchema("hotel", "area", "part of town for the hotel", _AREAS),
    SlotSchema("hotel", "price_range", "price level of the hotel", _PRICES),
    SlotSchema("hotel", "stars", "star rating of the hotel", _STARS),
    SlotSchema("hotel", "book_day", "day the hotel stay starts", _DAYS),
    SlotSchema("attraction", "type", "kind of place to visit", _TYPES),
    SlotSchema("attraction", "area", "part of town for the attraction", _AREAS),
    SlotSchema("attraction", "day", "day of the visit", _DAYS),
]

# (template, slots it introduces); first list opens a domain, second follows up
_TEMPLATES: dict[str, tuple[list, list]] = {
    "taxi": (
        [("i need a taxi to {destination}", ("destination",)),
         ("please book a taxi to {destination} leaving at {leave_at}",
          ("destination", "leave_at")),
         ("can i get a taxi to {destination} i must arrive by {arrive_by}",
          ("destination", "arrive_by"))],
        [("i want to leave at {leave_at}", ("leave_at",)),
         ("make sure it arrives by {arrive_by}", ("arrive_by",)),
         ("i would like to leave at {leave_at} and arrive by {arrive_by}",
          ("leave_at", "arrive_by"))],
    ),
    "bus": (
        [("i am looking for a bus to {destination}", ("destination",)),
         ("find me a bus to {destination} on {day}", ("destination", "day")),
         ("i need a bus leaving at {leave_at} going to {destination}",
          ("leave_at", "destination"))],
        [("the bus should leave at {leave_at}", ("leave_at",)),
         ("i will travel on {day}", ("day",)),
         ("i want to go on {day} leaving at {leave_at}", ("day", "leave_at"))],
    ),
    "restaurant": (
        [("i want a {price_range} restaurant in the {area}",
          ("price_range", "area")),
         ("find me a restaurant serving {food} food", ("food",)),
         ("i am looking for a {food} restaurant in the {area}", ("food", "area"))],
        [("book a table at {book_time}", ("book_time",)),
         ("something {price_range} please", ("price_range",)),
         ("i prefer {food} food and a table at {book_time}",
          ("food", "book_time"))],
    ),
    "hotel": (
        [("i need a hotel in the {area}", ("area",)),
         ("find me a {price_range} hotel with {stars} stars",
          ("price_range", "stars")),
         ("i want a {price_range} place to stay in the {area}",
          ("price_range", "area"))],
        [("it should have {stars} stars", ("stars",)),
         ("i will check in on {book_day}", ("book_day",)),
         ("book it for {book_day} somewhere in the {area}",
          ("book_day", "area"))],
    ),
    "attraction": (
        [("what {type} can i visit in the {area}", ("type", "area")),
         ("i am looking for a {type} to visit", ("type",)),
         ("is there a good {type} open on {day}", ("type", "day"))],
        [("i will go on {day}", ("day",)),
         ("maybe something in the {area}", ("area",)),
         ("i want to visit on {day}", ("day",))],
    ),
}

_SYSTEM_ACKS = ("ok i can help with that", "sure anything else",
                "done is there anything else", "great i have noted that",
                "booked you are all set")

DOMAINS = tuple(_TEMPLATES)


def generate_corpus(seed: int, dialogues_per_domain: int = 40,
                    two_domain_fraction: float = 0.2
                    ) -> tuple[list[SlotSchema], list[Dialogue]]:
    """Seeded template-grammar corpus; same seed, same corpus, byte for byte."""
    rng = SeededRng(seed).derive("corpus")
    schema_by_domain: dict[str, dict[str, SlotSchema]] = {}
    for s in SYNTHETIC_SCHEMA:
        schema_by_domain.setdefault(s.domain, {})[s.slot] = s
    dialogues: list[Dialogue] = []
    for primary in DOMAINS:
        for k in range(dialogues_per_domain):
            drng = rng.derive(f"{primary}.{k}")
            domains = [primary]
            if drng.uniform() < two_domain_fraction:
                other = drng.choice([d for d in DOMAINS if d != primary])
                domains.append(other)
            turns: list[Turn] = []
            state: set[Triple] = set()
            for domain in domains:
                opens, follows = _TEMPLATES[domain]
                n_turns = 1 + drng.randint(2)  # 1 or 2 turns in this domain
                assigned: dict[str, str] = {}
                for t in range(n_turns):
                    pool = opens if t == 0 else follows
                    candidates = [tpl for tpl in pool
                                  if any(s not in assigned for s in tpl[1])]
                    if not candidates:
                        break
                    template, slots = drng.choice(candidates)
                    fills: dict[str, str] = {}
                    for slot in slots:
                        if slot in assigned:
                            fills[slot] = assigned[slot]
                        else:
                            value = drng.choice(schema_by_domain[domain][slot].values)
                            assigned[slot] = value
                            fills[slot] = value
                            state.add((domain, slot, value))
                    turns.append(Turn(index=len(turns),
                                      user=template.format(**fills),
                                      system=drng.choice(_SYSTEM_ACKS),
                                      state=frozenset(state)))
            dialogues.append(Dialogue(id=f"{primary}-{k:03d}",
                                      domains=tuple(domains), turns=turns))
    return list(SYNTHETIC_SCHEMA), dialogues


# ---------------------------------------------------------------------------
# serialization


def corpus_to_dict(schemas: list[SlotSchema], dialogues: list[Dialogue]) -> dict:
    return {
        "schema": [{"domain": s.domain, "slot": s.slot,
                    "description": s.description,
                    **({"values": list(s.values)} if s.values is not None else {})}
                   for s in schemas],
        "dialogues": [{
            "id": d.id, "domains": list(d.domains),
            "turns": [{"user": t.user, "system": t.system,
                       "state": {f"{dm}-{sl}": v
                                 for dm, sl, v in sorted(t.state)}}
                      for t in d.turns],
        } for d in dialogues],
    }


def save_corpus(schemas, dialogues, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(corpus_to_dict(schemas, dialogues), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_corpus(path) -> tuple[list[SlotSchema], list[Dialogue]]:
    """Load and validate a corpus file; violations name the offending path."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return corpus_from_dict(raw)


def corpus_from_dict(raw: dict) -> tuple[list[SlotSchema], list[Dialogue]]:
    if not isinstance(raw, dict) or "schema" not in raw or "dialogues" not in raw:
        raise CorpusError("corpus must be an object with 'schema' and 'dialogues'")
    schemas: list[SlotSchema] = []
    seen_keys: set[str] = set()
    for i, entry in enumerate(raw["schema"]):
        path = f"schema[{i}]"
        for fld in ("domain", "slot", "description"):
            if not isinstance(entry.get(fld), str) or not entry[fld]:
                raise CorpusError(f"{path}.{fld}: missing or empty")
        values = entry.get("values")
        if values is not None:
            if (not isinstance(values, list) or not values
                    or any(not isinstance(v, str) or not v for v in values)):
                raise CorpusError(f"{path}.values: must be nonempty strings")
            values = tuple(values)
        s = SlotSchema(entry["domain"], entry["slot"], entry["description"], values)
        if s.key in seen_keys:
            raise CorpusError(f"{path}: duplicate slot {s.key}")
        seen_keys.add(s.key)
        schemas.append(s)
    known = {s.key for s in schemas}
    dialogues: list[Dialogue] = []
    seen_ids: set[str] = set()
    for i, d in enumerate(raw["dialogues"]):
        did = d.get("id")
        path = f"dialogues[{i}]"
        if not isinstance(did, str) or not did:
            raise CorpusError(f"{path}.id: missing or empty")
        if did in seen_ids:
            raise CorpusError(f"{path}.id: duplicate dialogue id {did!r}")
        seen_ids.add(did)
        domains = d.get("domains")
        if not isinstance(domains, list) or not domains:
            raise CorpusError(f"dialogue {did!r}: domains must be a nonempty list")
        turns: list[Turn] = []
        for j, t in enumerate(d.get("turns", [])):
            tpath = f"dialogue {did!r} turns[{j}]"
            for fld in ("user", "system"):
                if not isinstance(t.get(fld), str):
                    raise CorpusError(f"{tpath}.{fld}: missing")
            state: set[Triple] = set()
            for key, value in t.get("state", {}).items():
                if key not in known:
                    raise CorpusError(f"{tpath}.state.{key}: unknown slot")
                if not isinstance(value, str) or not value:
                    raise CorpusError(f"{tpath}.state.{key}: value must be a "
                                      f"nonempty string")
                if normalize(value) == "none":
                    continue  # none-valued slots are not active
                dom, slot = key.split("-", 1)
                if dom not in domains:
                    raise CorpusError(f"{tpath}.state.{key}: domain {dom!r} not "
                                      f"listed in dialogue domains")
                state.add((dom, slot, value))
            turns.append(Turn(index=j, user=t["user"], system=t["system"],
                              state=frozenset(state)))
        dialogues.append(Dialogue(id=did, domains=tuple(domains), turns=turns))
    return schemas, dialogues


# ---------------------------------------------------------------------------
# splits and prompts


def make_split(schemas: list[SlotSchema], dialogues: list[Dialogue],
               held_out: str) -> ZeroShotSplit:
    """Leave-one-domain-out split; train never touches the held-out domain."""
    if held_out not in {s.domain for s in schemas}:
        raise ConfigError(f"unknown domain {held_out!r}")
    train, test = [], []
    for d in dialogues:
        touches = held_out in d.domains or any(
            dm == held_out for t in d.turns for dm, _, _ in t.state)
        (test if touches else train).append(d)
    for d in train:  # invariant: zero held-out triples in the training side
        for t in d.turns:
            if any(dm == held_out for dm, _, _ in t.state):
                raise ContractError(
                    f"split invariant violated: dialogue {d.id} in train "
                    f"touches {held_out}")
    warning = None
    if not train:
        warning = f"every dialogue touches {held_out!r}; training side is empty"
    return ZeroShotSplit(held_out=held_out, train=train, test=test, warning=warning)


def build_slot_prompt(schema: SlotSchema, mode: str = "slot_prompt") -> str:
    """Render the adapter/encoder prompt text for one slot."""
    if mode == "slot_prompt":
        return (f"domain: {schema.domain} slot: {schema.slot} "
                f"description: {schema.description}")
    if mode == "slot_embedding":
        return schema.slot
    raise ConfigError(f"unknown prompt mode {mode!r}")


# ---------------------------------------------------------------------------
# per-slot generation targets


def slot_target(state: frozenset[Triple], domain: str, slot: str) -> str:
    """The decoding target: the gold value, or the literal 'none'."""
    for dm, sl, v in state:
        if dm == domain and sl == slot:
            return v
    return "none"


def parse_value(schema: SlotSchema, text: str) -> str:
    """Total inverse of slot_target: malformed output becomes 'none'."""
    n = normalize(text)
    if not n or n == "none":
        return "none"
    if schema.values is not None:
        return n if n in {normalize(v) for v in schema.values} else "none"
    return n


def assemble_state(values: dict[tuple[str, str], str]) -> frozenset[Triple]:
    """Predicted per-slot values -> active triple set ('none' drops out)."""
    return frozenset((dm, sl, v) for (dm, sl), v in values.items() if v != "none")


def slots_of_domain(schemas: list[SlotSchema], domain: str) -> list[SlotSchema]:
    return [s for s in schemas if s.domain == domain]
