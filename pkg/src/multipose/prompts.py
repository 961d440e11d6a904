"""Identifier-tagged prompts: parsing, per-character splitting and embedding.

Grammar (see ``docs/prompt-grammar.md``)::

    prompt     := segment ("," segment)*
    segment    := text with at most one identifier anywhere inside it
    identifier := "<" digits ">"     (a positive integer)

A tagged segment belongs to one character; untagged segments are shared by
all characters.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import EmptyPromptError, PromptParseError, UnknownCharacterError

DEFAULT_VOCAB = (
    "red", "green", "blue", "yellow", "on", "gray", "background",
    "a", "and", "the", "in", "park", "figure", "person", "walking",
)
L_MAX = 16
D_TEXT = 32

_TOKEN_RE = re.compile(r"[^\W_]+")
_ID_RE = re.compile(r"<(\d+)>")


@dataclass(frozen=True)
class Segment:
    text: str
    char_id: int | None = None


@dataclass(frozen=True)
class TaggedPrompt:
    raw: str
    segments: tuple

    @property
    def ids(self) -> list[int]:
        return [s.char_id for s in self.segments if s.char_id is not None]


def _split_top_level(raw: str):
    """Yield ``(start, piece)`` for comma-separated pieces outside ``<...>``."""
    depth, start = 0, 0
    for i, ch in enumerate(raw):
        if ch == "<":
            depth += 1
        elif ch == ">" and depth:
            depth -= 1
        elif ch == "," and depth == 0:
            yield start, raw[start:i]
            start = i + 1
    yield start, raw[start:]


def parse_prompt(raw: str) -> TaggedPrompt:
    """Split on top-level commas and bind each ``<k>`` to its segment.

    Raises ``PromptParseError`` (with a character position) for malformed
    brackets, id 0, a second identifier in one segment, a segment that holds
    only an identifier, or an id used twice.
    """
    segments, seen = [], {}
    for offset, piece in _split_top_level(raw):
        found = None
        pos = 0
        while True:
            lt = piece.find("<", pos)
            if lt < 0:
                break
            m = _ID_RE.match(piece, lt)
            if m is None:
                raise PromptParseError("malformed identifier, expected <positive integer>", offset + lt)
            k = int(m.group(1))
            if k == 0:
                raise PromptParseError("identifier <0> is not allowed; ids start at 1", offset + lt)
            if found is not None:
                raise PromptParseError("segment carries two identifiers; split it with a comma", offset + lt)
            found = (k, offset + lt)
            pos = m.end()
        text = " ".join(_ID_RE.sub(" ", piece).split())
        if not text:
            if found is not None:
                raise PromptParseError("identifier has no text in its segment", found[1])
            continue
        if found is not None:
            k, where = found
            if k in seen:
                raise PromptParseError(f"identifier <{k}> used twice (first at {seen[k]})", where)
            seen[k] = where
            segments.append(Segment(text, k))
        else:
            segments.append(Segment(text))
    return TaggedPrompt(raw, tuple(segments))


@dataclass(frozen=True)
class SplitPrompt:
    prompts: dict  # character id -> text
    full: str  # every segment, identifiers stripped

    def __len__(self):
        return len(self.prompts)

    def __getitem__(self, k):
        return self.prompts[k]

    def ordered(self) -> list[str]:
        return [self.prompts[k] for k in sorted(self.prompts)]


def split_prompt(tagged: TaggedPrompt, n_characters: int) -> SplitPrompt:
    """One prompt per character: its own segments plus every shared segment.

    Without identifiers every character receives the whole prompt. A
    character that owns no segment and has no shared text to inherit also
    receives the whole prompt.
    """
    if n_characters < 1:
        raise ValueError(f"n_characters must be >= 1, got {n_characters}")
    unknown = [k for k in tagged.ids if k > n_characters]
    if unknown:
        raise UnknownCharacterError(
            f"prompt references character(s) {unknown} but only {n_characters} pose track(s) exist"
        )
    full = ", ".join(s.text for s in tagged.segments)
    out = {}
    for k in range(1, n_characters + 1):
        if not tagged.ids:
            out[k] = full
            continue
        mine = [s.text for s in tagged.segments if s.char_id in (k, None)]
        out[k] = ", ".join(mine) if mine else full
    return SplitPrompt(out, full)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def hashed_vector(token: str, dim: int = D_TEXT) -> np.ndarray:
    """Fixed pseudo-random embedding for out-of-vocabulary tokens."""
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim).astype(np.float32)


@dataclass
class TextEmbedding:
    values: torch.Tensor  # L_max x d_text, zero rows after ``count``
    count: int

    @property
    def key_mask(self) -> torch.Tensor:
        m = torch.zeros(self.values.shape[0], dtype=torch.bool)
        m[: self.count] = True
        return m


class EmbeddingTable(nn.Module):
    """Learned rows for a fixed vocabulary; other tokens map to hashed vectors."""

    def __init__(self, vocab=DEFAULT_VOCAB, dim: int = D_TEXT, max_len: int = L_MAX, generator=None):
        super().__init__()
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.max_len = max_len
        self.dim = dim
        self.weight = nn.Parameter(torch.randn(len(self.vocab), dim, generator=generator))

    def forward(self, prompt: str) -> TextEmbedding:
        return tokenize_embed(prompt, self)


def tokenize_embed(prompt: str, table: EmbeddingTable) -> TextEmbedding:
    """Lowercase, tokenize, look up rows, truncate to ``max_len`` and zero-pad."""
    tokens = tokenize(prompt)[: table.max_len]
    if not tokens:
        raise EmptyPromptError(f"prompt {prompt!r} has no tokens")
    w = table.weight
    rows = []
    for tok in tokens:
        if tok in table.index:
            rows.append(w[table.index[tok]])
        else:
            rows.append(torch.from_numpy(hashed_vector(tok, table.dim)).to(w.dtype))
    pad = table.max_len - len(tokens)
    values = torch.stack(rows)
    if pad:
        values = torch.cat([values, torch.zeros(pad, table.dim, dtype=w.dtype)])
    return TextEmbedding(values, len(tokens))
