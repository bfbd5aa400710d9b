"""Deterministic synthetic world: entity-attribute facts, documents, and QA pairs.

A world is a grid of facts (one value per entity/attribute pair). Each fact is
rendered into one document through one of several surface templates; questions ask
for a fact's value and the answer is the value span verbatim. Entity swapping turns
a true document into a fabricated one by replacing only the value tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .util import AtmError, SizingError, read_jsonl, subrng, write_jsonl
from .vocab import ATTRIBUTES, ATTRIBUTE_BY_NAME, ENTITY_NAME_POOL, MAX_DOC_LEN

ORIGIN_RETRIEVED = "retrieved"
ORIGIN_FABRICATED = "fabricated"


@dataclass(frozen=True)
class Entity:
    entity_id: str
    name: str
    type_tag: str


@dataclass(frozen=True)
class Fact:
    entity_id: str
    attribute: str
    value: tuple[str, ...]


@dataclass(frozen=True)
class World:
    entities: tuple[Entity, ...]
    facts: tuple[Fact, ...]
    seed: int

    def entity(self, entity_id: str) -> Entity:
        return self._by_id[entity_id]

    @property
    def _by_id(self) -> dict[str, Entity]:
        return {e.entity_id: e for e in self.entities}

    def values_for(self, attribute: str) -> list[tuple[str, ...]]:
        """Distinct values this world uses for an attribute, in first-seen order."""
        seen: dict[tuple[str, ...], None] = {}
        for f in self.facts:
            if f.attribute == attribute:
                seen.setdefault(f.value, None)
        return list(seen)


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    origin: str
    about_entity: str | None = None

    def tokens(self) -> list[str]:
        return self.text.split()


@dataclass(frozen=True)
class QaInstance:
    qid: str
    question: str
    answer: str
    golden_doc_id: str


def gen_world(seed: int, n_entities: int, n_attrs: int) -> World:
    """World with n_entities x n_attrs facts; bit-identical for identical arguments."""
    if n_entities < 2:
        raise SizingError(f"need at least 2 entities, got {n_entities}")
    if n_attrs < 1:
        raise SizingError(f"need at least 1 attribute, got {n_attrs}")
    if n_attrs > len(ATTRIBUTES):
        raise SizingError(f"only {len(ATTRIBUTES)} attribute schemas exist, got {n_attrs}")
    if n_entities > len(ENTITY_NAME_POOL):
        raise SizingError(f"entity name pool holds {len(ENTITY_NAME_POOL)} names")

    rng = subrng(seed, "world")
    name_idx = rng.choice(len(ENTITY_NAME_POOL), size=n_entities, replace=False)
    entities = tuple(
        Entity(f"e{i:03d}", ENTITY_NAME_POOL[int(j)], "person")
        for i, j in enumerate(name_idx)
    )
    facts = []
    for ent in entities:
        for attr in ATTRIBUTES[:n_attrs]:
            value = tuple(pool[int(rng.integers(len(pool)))] for pool in attr.pools)
            facts.append(Fact(ent.entity_id, attr.name, value))
    return World(entities, tuple(facts), seed)


def _render_fact_doc(world: World, fact: Fact, template_idx: int, doc_id: str) -> Document:
    attr = ATTRIBUTE_BY_NAME[fact.attribute]
    text = attr.render_doc(template_idx, world.entity(fact.entity_id).name, fact.value)
    if len(text.split()) > MAX_DOC_LEN:
        raise AtmError(f"rendered document exceeds {MAX_DOC_LEN} tokens")
    return Document(doc_id, text, ORIGIN_RETRIEVED, fact.entity_id)


def gen_dataset(world: World, n_q: int, n_distractors_per_doc_store: int, seed: int,
                questions_per_fact: int = 1) -> tuple[list[QaInstance], list[Document]]:
    """QA instances plus the document store they are answered from.

    The store holds one document per world fact (so every other fact's document is a
    distractor for a given question) plus optional extra documents about attributes
    the world does not track, which can never be golden.

    With the default questions_per_fact=1 at most one question is asked per fact and
    n_q above the fact count is a sizing error; raising questions_per_fact (up to the
    number of question templates) multiplies capacity by re-asking facts through
    different surface forms.
    """
    facts = world.facts
    min_templates = min(len(a.question_templates) for a in ATTRIBUTES)
    if not 1 <= questions_per_fact <= min_templates:
        raise SizingError(f"questions_per_fact must be in [1, {min_templates}]")
    capacity = len(facts) * questions_per_fact
    if n_q < 1:
        raise SizingError("n_q must be >= 1")
    if n_q > capacity:
        raise SizingError(
            f"world supports {capacity} questions "
            f"({len(facts)} facts x {questions_per_fact} per fact), got n_q={n_q}")

    rng = subrng(seed, "dataset", world.seed)
    docs = [
        _render_fact_doc(world, fact, int(rng.integers(len(ATTRIBUTE_BY_NAME[fact.attribute].doc_templates))),
                         f"d{i:04d}")
        for i, fact in enumerate(facts)
    ]
    doc_of_fact = {(f.entity_id, f.attribute): d.doc_id for f, d in zip(facts, docs)}

    candidates = [(fi, ti) for fi in range(len(facts)) for ti in range(questions_per_fact)]
    order = rng.permutation(len(candidates))
    instances = []
    for qn, idx in enumerate(order[:n_q]):
        fi, ti = candidates[int(idx)]
        fact = facts[fi]
        attr = ATTRIBUTE_BY_NAME[fact.attribute]
        question = attr.render_question(ti, world.entity(fact.entity_id).name)
        instances.append(QaInstance(
            qid=f"q{qn:04d}",
            question=question,
            answer=" ".join(fact.value),
            golden_doc_id=doc_of_fact[(fact.entity_id, fact.attribute)],
        ))

    if n_distractors_per_doc_store:
        used = {f.attribute for f in facts}
        unused = [a for a in ATTRIBUTES if a.name not in used]
        pairs = [(e, a) for e in world.entities for a in unused]
        if n_distractors_per_doc_store > len(pairs):
            raise SizingError(
                f"store supports {len(pairs)} extra distractors, "
                f"got {n_distractors_per_doc_store}")
        pick = rng.choice(len(pairs), size=n_distractors_per_doc_store, replace=False)
        for j, pi in enumerate(pick):
            ent, attr = pairs[int(pi)]
            value = tuple(pool[int(rng.integers(len(pool)))] for pool in attr.pools)
            text = attr.render_doc(int(rng.integers(len(attr.doc_templates))), ent.name, value)
            docs.append(Document(f"x{j:04d}", text, ORIGIN_RETRIEVED, ent.entity_id))
    return instances, docs


def find_value_span(tokens: list[str]) -> tuple[str, int, int]:
    """Locate the (attribute, start, end) of the value span inside a rendered document."""
    for attr in ATTRIBUTES:
        for i in range(len(tokens) - attr.value_len + 1):
            if all(tokens[i + j] in attr.pools[j] for j in range(attr.value_len)):
                return attr.name, i, i + attr.value_len
    raise AtmError(f"no attribute value span found in {tokens!r}")


def with_value(doc: Document, new_value: tuple[str, ...], doc_id: str) -> Document:
    """Fabricated copy of a document with its value span spliced out for new_value."""
    tokens = doc.tokens()
    _, start, end = find_value_span(tokens)
    swapped = tokens[:start] + list(new_value) + tokens[end:]
    return Document(doc_id, " ".join(swapped), ORIGIN_FABRICATED, doc.about_entity)


def swap_alternatives(doc: Document, world: World) -> tuple[str, tuple, list[tuple]]:
    """(attribute, current value, candidate replacement values) for a document."""
    attr_name, start, end = find_value_span(doc.tokens())
    current = tuple(doc.tokens()[start:end])
    return attr_name, current, [v for v in world.values_for(attr_name) if v != current]


def entity_swap_fabricate(doc: Document, world: World, rng: np.random.Generator,
                          doc_id: str | None = None) -> Document:
    """Fabricated copy of a true document with only the value tokens replaced.

    The replacement value is drawn from the values other facts of the same attribute
    use in this world, so the output stays in-domain but contradicts the source.
    """
    if doc.origin != ORIGIN_RETRIEVED:
        raise AtmError("entity swap expects a retrieved document")
    if not doc.about_entity:
        raise AtmError("entity swap needs about_entity metadata")
    attr_name, _, alternatives = swap_alternatives(doc, world)
    if not alternatives:
        raise SizingError(f"world has no alternative value for attribute {attr_name!r}")
    new_value = alternatives[int(rng.integers(len(alternatives)))]
    return with_value(doc, new_value, doc_id or f"{doc.doc_id}-swap")


# ----------------------------- persistence -----------------------------


def save_instances(path: str, instances: list[QaInstance]) -> None:
    write_jsonl(path, ({"qid": q.qid, "question": q.question, "answer": q.answer,
                        "golden_doc_id": q.golden_doc_id} for q in instances))


def load_instances(path: str) -> list[QaInstance]:
    return [QaInstance(r["qid"], r["question"], r["answer"], r["golden_doc_id"])
            for r in read_jsonl(path)]


def save_store(path: str, docs: list[Document]) -> None:
    write_jsonl(path, ({"doc_id": d.doc_id, "text": d.text, "origin": d.origin,
                        "about_entity": d.about_entity} for d in docs))


def load_store(path: str) -> list[Document]:
    return [Document(r["doc_id"], r["text"], r["origin"], r.get("about_entity"))
            for r in read_jsonl(path)]


def save_world(path: str, world: World) -> None:
    write_jsonl(path, [{
        "seed": world.seed,
        "entities": [[e.entity_id, e.name, e.type_tag] for e in world.entities],
        "facts": [[f.entity_id, f.attribute, list(f.value)] for f in world.facts],
    }])


def load_world(path: str) -> World:
    rec = read_jsonl(path)[0]
    return World(
        tuple(Entity(*e) for e in rec["entities"]),
        tuple(Fact(f[0], f[1], tuple(f[2])) for f in rec["facts"]),
        rec["seed"],
    )
