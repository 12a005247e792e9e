"""Token vocabulary over graph tokens, attribute words and special tokens."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import CorpusFormatError
from .graph import Graph

PAD, SEP, CLS, UNK = "<pad>", "<sep>", "<cls>", "<unk>"
SPECIALS = (PAD, SEP, CLS, UNK)

GRAPH, TEXT, SPECIAL = 0, 1, 2

_GRAPH_TOKEN = re.compile(r"^<node_(\d+)>$")


def graph_token(v: int) -> str:
    return f"<node_{v}>"


def tokenize_text(text: str) -> list:
    return text.lower().split()


@dataclass(frozen=True)
class TokenSeq:
    ids: np.ndarray
    kinds: np.ndarray

    def __len__(self):
        return len(self.ids)

    @classmethod
    def concat(cls, parts) -> "TokenSeq":
        parts = list(parts)
        if not parts:
            return cls(np.zeros(0, np.int64), np.zeros(0, np.int8))
        return cls(np.concatenate([p.ids for p in parts]), np.concatenate([p.kinds for p in parts]))


class Vocab:
    """Dense id assignment: specials, then ``<node_i>`` in node order, then sorted words."""

    def __init__(self, graph_token_count: int, text_tokens=()):
        self.graph_token_count = int(graph_token_count)
        self.text_tokens = tuple(text_tokens)
        self.tokens = list(SPECIALS) + [graph_token(i) for i in range(self.graph_token_count)] + list(self.text_tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.graph_offset = len(SPECIALS)
        self.text_offset = self.graph_offset + self.graph_token_count

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def special_count(self):
        return len(SPECIALS)

    @property
    def text_token_count(self):
        return len(self.text_tokens)

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def sep_id(self):
        return self.index[SEP]

    @property
    def cls_id(self):
        return self.index[CLS]

    @property
    def unk_id(self):
        return self.index[UNK]

    def node_id(self, v: int) -> int:
        if not 0 <= v < self.graph_token_count:
            raise KeyError(f"node {v} has no graph token")
        return self.graph_offset + int(v)

    def kind_of(self, token_id: int) -> int:
        if token_id < self.graph_offset:
            return SPECIAL
        if token_id < self.text_offset:
            return GRAPH
        return TEXT

    def kinds_of(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        kinds = np.full(ids.shape, TEXT, dtype=np.int8)
        kinds[ids < self.text_offset] = GRAPH
        kinds[ids < self.graph_offset] = SPECIAL
        return kinds

    def word_id(self, word: str) -> int:
        i = self.index.get(word)
        if i is None or i < self.text_offset:
            return self.unk_id
        return i

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, tok in enumerate(self.tokens):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def read(cls, path) -> "Vocab":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                tok, sep, idx = line.rstrip("\n").partition("\t")
                if not sep or not idx.isdigit() or int(idx) != lineno - 1:
                    raise CorpusFormatError(f"{path}:{lineno}: malformed vocab line {line!r}")
                tokens.append(tok)
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise CorpusFormatError(f"{path}: specials must come first")
        n = 0
        while len(SPECIALS) + n < len(tokens) and tokens[len(SPECIALS) + n] == graph_token(n):
            n += 1
        return cls(n, tokens[len(SPECIALS) + n:])


def build_vocab(g: Graph, with_text: bool = False, min_freq: int = 2) -> Vocab:
    words = ()
    if with_text and g.attributes:
        counts = Counter(w for text in g.attributes.values() for w in tokenize_text(text))
        words = sorted(w for w, c in counts.items() if c >= min_freq and not _GRAPH_TOKEN.match(w) and w not in SPECIALS)
    return Vocab(g.node_count, words)


def encode_sentence(v: Vocab, s) -> TokenSeq:
    ids = np.array([v.node_id(int(n)) for n in s], dtype=np.int64)
    return TokenSeq(ids, np.full(len(ids), GRAPH, dtype=np.int8))


def decode_sentence(v: Vocab, seq: TokenSeq) -> tuple:
    if (seq.kinds != GRAPH).any():
        raise ValueError("sequence holds non-graph tokens")
    return tuple(int(i) - v.graph_offset for i in seq.ids)


def encode_attribute(v: Vocab, text: str, max_tokens: int = 16) -> TokenSeq:
    ids = np.array([v.word_id(w) for w in tokenize_text(text)[:max_tokens]], dtype=np.int64)
    return TokenSeq(ids, np.full(len(ids), TEXT, dtype=np.int8))


def encode_context(v: Vocab, ctx, attrs=None, max_attr_tokens: int = 16) -> TokenSeq:
    """Join sentences with SEP and close with CLS.

    With ``attrs`` every graph token is followed by its node's (truncated)
    attribute words, giving the composite document.
    """
    if not ctx:
        raise ValueError("context must hold at least one sentence")
    sep = TokenSeq(np.array([v.sep_id]), np.array([SPECIAL], dtype=np.int8))
    cls = TokenSeq(np.array([v.cls_id]), np.array([SPECIAL], dtype=np.int8))
    cache = {}
    parts = []
    for i, s in enumerate(ctx):
        if i:
            parts.append(sep)
        if attrs is None:
            parts.append(encode_sentence(v, s))
            continue
        for node in s:
            parts.append(encode_sentence(v, (node,)))
            text = attrs.get(int(node))
            if text:
                if node not in cache:
                    cache[node] = encode_attribute(v, text, max_attr_tokens)
                parts.append(cache[node])
    parts.append(cls)
    return TokenSeq.concat(parts)
