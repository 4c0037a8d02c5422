"""Planted-ground-truth sense-making task over a toy knowledge base.

The generator builds a world of pseudoword entities partitioned into
groups; each (group, relation) pair owns a small set of tail entities,
and every member of the group inherits those triples. The group structure
is the compositional pattern that lets a sequence model predict held-out
triples from seen ones.

A task instance is a pair of templated sentences over the same relation
and tail. One sentence instantiates a planted triple; the other swaps in
a head entity from a different group, which by construction has no such
triple. The label is the position of the nonsensical sentence. Every
instance carries full ground truth: rationale token indices (head and
tail in both sentences), a templated explanation naming the violating
pair, and the planted triple id, so that each pipeline stage can be
scored exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .vocab import SEP, Vocab

RELATIONS = ("capable-of", "requires", "used-for", "is-a")

# Sentence shape per relation: "the <head> <verb> <tail>" plus trailing filler.
SENTENCE_VERBS = {
    "capable-of": "can",
    "requires": "needs",
    "used-for": "serves",
    "is-a": "is",
}

NLE_TEMPLATES = {
    "capable-of": ("{h}", "is", "not", "capable", "of", "{t}"),
    "requires": ("{h}", "does", "not", "require", "{t}"),
    "used-for": ("{h}", "is", "not", "used", "for", "{t}"),
    "is-a": ("{h}", "is", "not", "a", "{t}"),
}

TEMPLATE_WORDS = sorted(
    {"the"}
    | set(SENTENCE_VERBS.values())
    | {w for tpl in NLE_TEMPLATES.values() for w in tpl if "{" not in w}
)


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str

    @property
    def uid(self) -> str:
        return f"{self.head}|{self.relation}|{self.tail}"


@dataclass(frozen=True)
class WorldSpec:
    n_entities: int = 50
    n_groups: int = 10
    relations: tuple[str, ...] = RELATIONS
    triples_per_relation: int = 2  # tails owned by each (group, relation)
    n_fillers: int = 30
    max_fillers_per_sentence: int = 2
    seed: int = 13

    def __post_init__(self) -> None:
        if self.n_groups < 2:
            raise ValueError("need at least two entity groups to build negatives")
        if self.n_entities < self.n_groups:
            raise ValueError("need at least one entity per group")
        if not self.relations:
            raise ValueError("need at least one relation")
        if self.triples_per_relation < 1:
            raise ValueError("triples_per_relation must be >= 1")
        # Tails are distinct across groups within a relation and exclude the
        # owning group's members, so the pool must be large enough.
        needed = self.n_groups * self.triples_per_relation
        largest_group = -(-self.n_entities // self.n_groups)
        if needed > self.n_entities - largest_group:
            raise ValueError(
                "entity vocabulary too small for the requested relation fan-out"
            )
        if self.n_fillers < 1:
            raise ValueError("need at least one filler token")


@dataclass
class KnowledgeBase:
    spec: WorldSpec
    entities: list[str]
    group_of: dict[str, int]
    tails: dict[tuple[int, str], tuple[str, ...]]
    fillers: list[str]
    triples: list[Triple]
    triple_set: set[tuple[str, str, str]] = field(init=False)

    def __post_init__(self) -> None:
        self.triple_set = {(t.head, t.relation, t.tail) for t in self.triples}

    def has(self, head: str, relation: str, tail: str) -> bool:
        return (head, relation, tail) in self.triple_set

    def valid_tails(self, head: str, relation: str) -> tuple[str, ...]:
        return self.tails[(self.group_of[head], relation)]

    @property
    def relations(self) -> tuple[str, ...]:
        return self.spec.relations

    def vocab_words(self) -> list[str]:
        return sorted(set(self.entities) | set(self.fillers) | set(TEMPLATE_WORDS))

    def build_vocab(self) -> Vocab:
        return Vocab.build(self.vocab_words(), self.relations)


@dataclass
class Instance:
    instance_id: str
    tokens_a: list[str]
    tokens_b: list[str]
    label: int  # index of the nonsensical sentence
    gold_nle: list[str]
    gold_rationale: Optional[frozenset[int]] = None  # indices into full_tokens
    gold_triple: Optional[str] = None
    relation: Optional[str] = None

    @property
    def full_tokens(self) -> list[str]:
        if self.tokens_b:
            return self.tokens_a + [SEP] + self.tokens_b
        return list(self.tokens_a)


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudowords(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    words: list[str] = []
    while len(words) < count:
        n_syllables = int(rng.integers(2, 4))
        word = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(n_syllables)
        )
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def gen_world(spec: WorldSpec) -> KnowledgeBase:
    """Deterministically build the knowledge base and its triple listing."""
    rng = np.random.default_rng(spec.seed)
    taken = set(TEMPLATE_WORDS)
    entities = _pseudowords(rng, spec.n_entities, taken)
    fillers = _pseudowords(rng, spec.n_fillers, taken)

    order = list(rng.permutation(spec.n_entities))
    group_of = {entities[idx]: i % spec.n_groups for i, idx in enumerate(order)}
    members: dict[int, list[str]] = {g: [] for g in range(spec.n_groups)}
    for e, g in group_of.items():
        members[g].append(e)

    tails: dict[tuple[int, str], tuple[str, ...]] = {}
    for relation in spec.relations:
        pool = [entities[i] for i in rng.permutation(spec.n_entities)]
        used: set[str] = set()
        for g in range(spec.n_groups):
            chosen: list[str] = []
            for cand in pool:
                if cand in used or group_of[cand] == g:
                    continue
                chosen.append(cand)
                used.add(cand)
                if len(chosen) == spec.triples_per_relation:
                    break
            if len(chosen) < spec.triples_per_relation:
                raise ValueError("could not allocate distinct tails for every group")
            tails[(g, relation)] = tuple(chosen)

    triples = [
        Triple(e, relation, t)
        for e in entities
        for relation in spec.relations
        for t in tails[(group_of[e], relation)]
    ]
    if len({t.uid for t in triples}) != len(triples):
        raise ValueError("duplicate triples in generated world")
    return KnowledgeBase(
        spec=spec,
        entities=entities,
        group_of=group_of,
        tails=tails,
        fillers=fillers,
        triples=triples,
    )


def render_sentence(
    relation: str, head: str, tail: str, fillers: Sequence[str] = ()
) -> list[str]:
    return ["the", head, SENTENCE_VERBS[relation], tail, *fillers]


def render_nle(relation: str, head: str, tail: str) -> list[str]:
    return [w.format(h=head, t=tail) for w in NLE_TEMPLATES[relation]]


def _entity_indices(tokens: list[str], head: str, tail: str) -> list[int]:
    return [i for i, tok in enumerate(tokens) if tok == head or tok == tail]


def gen_instances(
    kb: KnowledgeBase,
    n: int,
    seed: int,
    id_prefix: str = "inst",
    allowed_triples: Optional[Sequence[Triple]] = None,
    negative_pool: Optional[Sequence[str]] = None,
) -> list[Instance]:
    """Build n labeled sentence pairs with planted ground truth.

    `negative_pool` restricts which entities may appear as the swapped-in
    nonsensical head; by default any entity from a different group works.
    """
    if not kb.triples:
        raise ValueError("knowledge base has no triples")
    rng = np.random.default_rng(seed)
    spec = kb.spec
    triples = list(allowed_triples) if allowed_triples is not None else kb.triples

    # Exactly balanced labels keep the position of the nonsensical sentence
    # uninformative.
    labels = np.array([0] * (n // 2) + [1] * (n - n // 2))
    rng.shuffle(labels)

    instances = []
    for i in range(n):
        triple = triples[int(rng.integers(len(triples)))]
        g = kb.group_of[triple.head]
        pool = negative_pool if negative_pool is not None else kb.entities
        candidates = [
            e
            for e in pool
            if kb.group_of[e] != g and not kb.has(e, triple.relation, triple.tail)
        ]
        if not candidates:
            raise ValueError("insufficient entities to build a negative head")
        neg_head = candidates[int(rng.integers(len(candidates)))]

        def _fillers() -> list[str]:
            k = int(rng.integers(0, spec.max_fillers_per_sentence + 1))
            return [kb.fillers[int(rng.integers(len(kb.fillers)))] for _ in range(k)]

        sensible = render_sentence(triple.relation, triple.head, triple.tail, _fillers())
        nonsense = render_sentence(triple.relation, neg_head, triple.tail, _fillers())
        label = int(labels[i])
        tokens_a, tokens_b = (nonsense, sensible) if label == 0 else (sensible, nonsense)
        head_a, head_b = (neg_head, triple.head) if label == 0 else (triple.head, neg_head)

        offset = len(tokens_a) + 1  # +1 for the separator token
        rationale = frozenset(
            _entity_indices(tokens_a, head_a, triple.tail)
            + [offset + j for j in _entity_indices(tokens_b, head_b, triple.tail)]
        )
        instances.append(
            Instance(
                instance_id=f"{id_prefix}-{i:05d}",
                tokens_a=tokens_a,
                tokens_b=tokens_b,
                label=label,
                gold_nle=render_nle(triple.relation, neg_head, triple.tail),
                gold_rationale=rationale,
                gold_triple=triple.uid,
                relation=triple.relation,
            )
        )
    return instances


def gen_dataset(
    kb: KnowledgeBase,
    n_train: int = 2000,
    n_val: int = 500,
    n_test: int = 500,
    seed: int = 0,
    unseen_test_negatives: bool = False,
) -> dict[str, list[Instance]]:
    """Split-disjoint train/validation/test instances.

    With `unseen_test_negatives`, a slice of the entity vocabulary is
    reserved: those entities never appear in train or validation instances
    and supply the nonsensical heads of the test split, so test negatives
    are pairings never observed during training.
    """
    rng = np.random.default_rng(seed)
    if unseen_test_negatives:
        reserved = {
            kb.entities[i]
            for i in rng.choice(len(kb.entities), size=max(2, len(kb.entities) // 10), replace=False)
        }
        open_triples = [
            t for t in kb.triples if t.head not in reserved and t.tail not in reserved
        ]
        open_entities = [e for e in kb.entities if e not in reserved]
        return {
            "train": gen_instances(kb, n_train, seed + 1, "train", open_triples, open_entities),
            "val": gen_instances(kb, n_val, seed + 2, "val", open_triples, open_entities),
            "test": gen_instances(kb, n_test, seed + 3, "test", None, sorted(reserved)),
        }
    return {
        "train": gen_instances(kb, n_train, seed + 1, "train"),
        "val": gen_instances(kb, n_val, seed + 2, "val"),
        "test": gen_instances(kb, n_test, seed + 3, "test"),
    }


def oracle_label(instance: Instance, kb: KnowledgeBase) -> int:
    """Label by direct knowledge-base lookup, independent of the planted label.

    Re-parses both sentences from their tokens; raises if the pair does not
    contain exactly one violation.
    """
    verb_to_relation = {v: r for r, v in SENTENCE_VERBS.items()}

    def parse(tokens: list[str]) -> tuple[str, str, str]:
        for i, tok in enumerate(tokens):
            if tok in verb_to_relation and 0 < i < len(tokens) - 1:
                head, tail = tokens[i - 1], tokens[i + 1]
                if head in kb.group_of and tail in kb.group_of:
                    return head, verb_to_relation[tok], tail
        raise ValueError(f"cannot parse sentence: {' '.join(tokens)}")

    valid = []
    for tokens in (instance.tokens_a, instance.tokens_b):
        h, r, t = parse(tokens)
        valid.append(kb.has(h, r, t))
    if valid[0] and valid[1]:
        raise ValueError("no violation: both sentences are consistent with the knowledge base")
    if not valid[0] and not valid[1]:
        raise ValueError("both sentences violate the knowledge base")
    return 0 if not valid[0] else 1


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_world(kb: KnowledgeBase, path: Path | str) -> None:
    blob = {
        "spec": {
            "n_entities": kb.spec.n_entities,
            "n_groups": kb.spec.n_groups,
            "relations": list(kb.spec.relations),
            "triples_per_relation": kb.spec.triples_per_relation,
            "n_fillers": kb.spec.n_fillers,
            "max_fillers_per_sentence": kb.spec.max_fillers_per_sentence,
            "seed": kb.spec.seed,
        },
        "entities": kb.entities,
        "group_of": kb.group_of,
        "tails": {f"{g}|{r}": list(ts) for (g, r), ts in kb.tails.items()},
        "fillers": kb.fillers,
        "triples": [[t.head, t.relation, t.tail] for t in kb.triples],
    }
    Path(path).write_text(json.dumps(blob, indent=1))


def load_world(path: Path | str) -> KnowledgeBase:
    blob = json.loads(Path(path).read_text())
    spec_blob = dict(blob["spec"])
    spec_blob["relations"] = tuple(spec_blob["relations"])
    spec = WorldSpec(**spec_blob)
    tails = {}
    for key, ts in blob["tails"].items():
        g, r = key.split("|", 1)
        tails[(int(g), r)] = tuple(ts)
    return KnowledgeBase(
        spec=spec,
        entities=list(blob["entities"]),
        group_of={e: int(g) for e, g in blob["group_of"].items()},
        tails=tails,
        fillers=list(blob["fillers"]),
        triples=[Triple(*t) for t in blob["triples"]],
    )


def save_corpus(triples: Iterable[Triple], path: Path | str) -> None:
    with open(path, "w") as fh:
        for t in triples:
            fh.write(json.dumps({"head": t.head, "relation": t.relation, "tail": t.tail}) + "\n")


def load_corpus(path: Path | str) -> list[Triple]:
    triples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                triples.append(Triple(row["head"], row["relation"], row["tail"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed triple record ({exc})") from None
    if not triples:
        raise ValueError(f"{path}: empty triple corpus")
    return triples


def save_instances(instances: Iterable[Instance], path: Path | str) -> None:
    with open(path, "w") as fh:
        for ins in instances:
            row = {
                "instance_id": ins.instance_id,
                "text_a": " ".join(ins.tokens_a),
                "text_b": " ".join(ins.tokens_b),
                "label": ins.label,
                "explanation": " ".join(ins.gold_nle),
            }
            if ins.gold_rationale is not None:
                row["highlight_indices"] = sorted(ins.gold_rationale)
            if ins.gold_triple is not None:
                row["gold_triple"] = ins.gold_triple
            if ins.relation is not None:
                row["relation"] = ins.relation
            fh.write(json.dumps(row) + "\n")


def load_external(path: Path | str) -> list[Instance]:
    """Parse the line-delimited instance schema.

    Required fields: text_a, label, explanation. Optional: text_b,
    highlight_indices (token indices into text_a [+ separator + text_b]),
    instance_id, gold_triple, relation. Schema violations raise with the
    offending line number.
    """
    instances = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid record ({exc})") from None
            if not isinstance(row, dict):
                raise ValueError(f"{path}:{lineno}: record must be an object")
            for fieldname in ("text_a", "label", "explanation"):
                if fieldname not in row:
                    raise ValueError(f"{path}:{lineno}: missing required field '{fieldname}'")
            if not isinstance(row["label"], int) or isinstance(row["label"], bool):
                raise ValueError(f"{path}:{lineno}: field 'label' must be an integer")
            tokens_a = str(row["text_a"]).split()
            tokens_b = str(row.get("text_b", "")).split()
            n_units = len(tokens_a) + (1 + len(tokens_b) if tokens_b else 0)
            rationale = None
            if "highlight_indices" in row and row["highlight_indices"] is not None:
                idx = row["highlight_indices"]
                if not isinstance(idx, list) or not all(
                    isinstance(i, int) and not isinstance(i, bool) for i in idx
                ):
                    raise ValueError(
                        f"{path}:{lineno}: field 'highlight_indices' must be a list of integers"
                    )
                if any(i < 0 or i >= n_units for i in idx):
                    raise ValueError(f"{path}:{lineno}: highlight index out of range")
                rationale = frozenset(idx)
            instances.append(
                Instance(
                    instance_id=str(row.get("instance_id", f"line-{lineno:05d}")),
                    tokens_a=tokens_a,
                    tokens_b=tokens_b,
                    label=row["label"],
                    gold_nle=str(row["explanation"]).split(),
                    gold_rationale=rationale,
                    gold_triple=row.get("gold_triple"),
                    relation=row.get("relation"),
                )
            )
    return instances
