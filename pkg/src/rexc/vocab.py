"""Whitespace tokenizer and shared vocabulary.

One vocabulary serves every learned component (task encoder, knowledge
model, explainer) so that knowledge queries can be formed directly from
task-side token ids. Relation tags get reserved control tokens; the
evidence separator used by the "+"-style output surface is reserved too.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
SEP = "<sep>"
EVIDENCE_SEP = "||"

SPECIALS = (PAD, BOS, EOS, SEP, EVIDENCE_SEP)


def relation_token(relation: str) -> str:
    return f"<rel:{relation}>"


@dataclass
class Vocab:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, words: Iterable[str], relations: Sequence[str]) -> "Vocab":
        """Deterministic layout: specials, relation controls, sorted words."""
        rel_tokens = [relation_token(r) for r in relations]
        seen = set(SPECIALS) | set(rel_tokens)
        body = sorted({w for w in words if w not in seen})
        return cls(list(SPECIALS) + rel_tokens + body)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.token_to_id[t] for t in tokens]
        except KeyError as exc:
            raise KeyError(f"token not in vocabulary: {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    def relation_id(self, relation: str) -> int:
        return self.token_to_id[relation_token(relation)]
