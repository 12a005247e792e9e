"""Small decoder-only sequence model with stacked low-rank adapters.

Every adaptable matrix is an :class:`AdapterLinear`: a base weight plus an
ordered list of ``scale * B @ A`` deltas. Pre-training trains the first delta
(together with the projector, embeddings and vocabulary head); fine-tuning
trains the last delta and a freshly initialised class head while everything
else stays frozen.
"""

from __future__ import annotations

import hashlib
import io
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .corpus import walk_rng
from .errors import CheckpointError, ConfigError, StageError
from .vocab import GRAPH, TokenSeq, Vocab, tokenize_text

FORMAT_VERSION = 1

DECODER_TARGETS = ("q", "k", "v", "o", "ff1", "ff2")
ALL_TARGETS = DECODER_TARGETS + ("projector",)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    embed_dim: int = 64
    layers: int = 2
    heads: int = 2
    ff_dim: int | None = None
    max_seq_len: int = 128
    vocab_size: int = 0
    class_count: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.ff_dim is None:
            self.ff_dim = 4 * self.embed_dim
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim={self.embed_dim} is not divisible by heads={self.heads}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if min(self.embed_dim, self.layers, self.heads, self.max_seq_len, self.vocab_size, self.class_count) < 1:
            raise ConfigError(f"model sizes must be positive: {self}")


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.2
    targets: tuple = ALL_TARGETS

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {self.rank}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"adapter dropout must lie in [0, 1), got {self.dropout}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoraDelta(nn.Module):
    def __init__(self, in_features, out_features, cfg: LoraConfig, generator: torch.Generator, dtype):
        super().__init__()
        a = torch.randn(cfg.rank, in_features, generator=generator, dtype=torch.float64) / math.sqrt(in_features)
        self.A = nn.Parameter(a.to(dtype))
        self.B = nn.Parameter(torch.zeros(out_features, cfg.rank, dtype=dtype))
        self.scale = cfg.scale
        self.dropout = cfg.dropout

    def delta_weight(self) -> torch.Tensor:
        return self.scale * self.B @ self.A


class AdapterLinear(nn.Module):
    """``y = x W0^T + sum_i scale_i * (x A_i^T) B_i^T`` with no bias."""

    def __init__(self, in_features, out_features, weight: torch.Tensor):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(weight)
        self.deltas = nn.ModuleList()
        self._dropout_gen = None

    def add_delta(self, cfg: LoraConfig, generator: torch.Generator) -> LoraDelta:
        delta = LoraDelta(self.in_features, self.out_features, cfg, generator, self.weight.dtype)
        self.deltas.append(delta)
        return delta

    def effective_weight(self) -> torch.Tensor:
        w = self.weight
        for d in self.deltas:
            w = w + d.delta_weight()
        return w

    def forward(self, x):
        y = x @ self.weight.T
        for d in self.deltas:
            h = x
            # dropout only on adapters being trained; frozen deltas act as merged weights
            if self.training and d.dropout > 0 and d.B.requires_grad:
                keep = torch.rand(x.shape, generator=self._dropout_gen, dtype=x.dtype) >= d.dropout
                h = x * keep / (1.0 - d.dropout)
            y = y + d.scale * ((h @ d.A.T) @ d.B.T)
        return y


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, init):
        super().__init__()
        d, f = cfg.embed_dim, cfg.ff_dim
        self.heads = cfg.heads
        self.ln1 = nn.LayerNorm(d, dtype=_DTYPES[cfg.dtype])
        self.ln2 = nn.LayerNorm(d, dtype=_DTYPES[cfg.dtype])
        self.q = AdapterLinear(d, d, init(d, d))
        self.k = AdapterLinear(d, d, init(d, d))
        self.v = AdapterLinear(d, d, init(d, d))
        self.o = AdapterLinear(d, d, init(d, d))
        self.ff1 = AdapterLinear(d, f, init(f, d))
        self.ff2 = AdapterLinear(f, d, init(d, f))

    def forward(self, x, mask):
        b, t, d = x.shape
        h = self.ln1(x)
        dh = d // self.heads

        def split(z):
            return z.view(b, t, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(~mask, float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        x = x + self.o(att.transpose(1, 2).reshape(b, t, d))
        h = self.ln2(x)
        return x + self.ff2(nn.functional.gelu(self.ff1(h)))


class GraphLM(nn.Module):
    """Decoder over the graph-token vocabulary.

    Graph-token embeddings pass through the projector before the positional
    embedding is added. ``forward`` returns final hidden states and either
    vocabulary logits at every position (``pretrain``) or class logits at the
    last real position (``finetune``).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = int(seed)
        dtype = _DTYPES[cfg.dtype]
        gen = torch.Generator().manual_seed(self.seed)

        def init(out_f, in_f, std=0.02):
            return (torch.randn(out_f, in_f, generator=gen, dtype=torch.float64) * std).to(dtype)

        d = cfg.embed_dim
        self.embed = nn.Parameter(init(cfg.vocab_size, d, 1.0 / math.sqrt(d)))
        self.pos = nn.Parameter(init(cfg.max_seq_len, d))
        self.projector = AdapterLinear(d, d, torch.eye(d, dtype=dtype))
        self.blocks = nn.ModuleList(DecoderBlock(cfg, init) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(d, dtype=dtype)
        self.head = nn.Parameter(init(d, cfg.vocab_size))
        self.class_head = nn.Parameter(init(d, cfg.class_count))
        self.class_bias = nn.Parameter(torch.zeros(cfg.class_count, dtype=dtype))
        self.stage = None
        self.adapter_configs: list = []
        self._dropout_gen = torch.Generator().manual_seed(self.seed + 1)
        for lin in self.adapter_layers().values():
            lin._dropout_gen = self._dropout_gen

    def adapter_layers(self) -> dict:
        layers = {"projector": self.projector}
        for i, blk in enumerate(self.blocks):
            for name in DECODER_TARGETS:
                layers[f"blocks.{i}.{name}"] = getattr(blk, name)
        return layers

    @property
    def adapter_depth(self) -> int:
        return len(self.adapter_configs)

    def forward(self, ids, kinds, stage=None, lengths=None):
        stage = stage or self.stage or "pretrain"
        b, t = ids.shape
        if t > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len={self.cfg.max_seq_len}")
        x = self.embed[ids]
        is_graph = (kinds == GRAPH).unsqueeze(-1)
        x = torch.where(is_graph, self.projector(x), x) + self.pos[:t]
        mask = torch.ones(t, t, dtype=torch.bool).tril()
        for blk in self.blocks:
            x = blk(x, mask)
        hidden = self.ln_f(x)
        if stage == "pretrain":
            return hidden, hidden @ self.head
        if lengths is None:
            lengths = torch.full((b,), t, dtype=torch.long)
        last = hidden[torch.arange(b), lengths - 1]
        return hidden, last @ self.class_head + self.class_bias


def _bow_vector(text: str, dim: int) -> np.ndarray:
    vec = np.zeros(dim)
    for w in tokenize_text(text):
        h = int.from_bytes(hashlib.blake2b(w.encode("utf-8"), digest_size=8).digest(), "little")
        vec[h % dim] += 1.0 if (h >> 32) & 1 else -1.0
    return vec


def hashed_bow(text: str, dim: int) -> np.ndarray | None:
    """L2-normalised signed feature-hashing of the lower-cased words, or None if empty."""
    vec = _bow_vector(text or "", dim)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else None


def gaussian_row(seed: int, token_id: int, dim: int) -> np.ndarray:
    return walk_rng(seed, token_id).standard_normal(dim) / math.sqrt(dim)


def init_embeddings(g, v: Vocab, cfg: ModelConfig, seed: int, use_attributes: bool = True) -> torch.Tensor:
    """Initial embedding table: hashed attribute vectors for graph tokens, seeded Gaussians elsewhere."""
    d = cfg.embed_dim
    table = np.empty((len(v), d))
    for i in range(len(v)):
        row = None
        if use_attributes and v.graph_offset <= i < v.text_offset:
            row = hashed_bow(g.attributes.get(i - v.graph_offset, ""), d)
        table[i] = row if row is not None else gaussian_row(seed, i, d)
    return torch.from_numpy(table).to(_DTYPES[cfg.dtype])


def build_model(g, v: Vocab, cfg: ModelConfig, seed: int = 0, use_attributes: bool = True) -> GraphLM:
    if cfg.vocab_size != len(v):
        raise ConfigError(f"vocab_size={cfg.vocab_size} but vocabulary has {len(v)} tokens")
    m = GraphLM(cfg, seed)
    with torch.no_grad():
        m.embed.copy_(init_embeddings(g, v, cfg, seed, use_attributes))
    return m


def as_batch(seqs) -> tuple:
    """Right-pad TokenSeqs (pad id 0) into ``(ids, kinds, lengths)`` tensors."""
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    t = int(lengths.max())
    ids = torch.zeros(len(seqs), t, dtype=torch.long)
    kinds = torch.full((len(seqs), t), 2, dtype=torch.int8)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = torch.from_numpy(np.asarray(s.ids, dtype=np.int64))
        kinds[i, :len(s)] = torch.from_numpy(np.asarray(s.kinds, dtype=np.int8))
    return ids, kinds, lengths


def forward(m: GraphLM, seq: TokenSeq, stage: str) -> tuple:
    """Single-sequence forward: hidden states ``(T, d)`` and logits."""
    ids, kinds, lengths = as_batch([seq])
    hidden, logits = m(ids, kinds, stage, lengths)
    return hidden[0], logits[0]


def attach_adapter(m: GraphLM, cfg: LoraConfig, seed: int = 0) -> int:
    """Append a zero-initialised delta to every target; returns its stack level."""
    unknown = [t for t in cfg.targets if t not in ALL_TARGETS]
    if unknown:
        raise ConfigError(f"no adapter target named {unknown}; choose from {ALL_TARGETS}")
    level = m.adapter_depth
    gen = torch.Generator().manual_seed(int(seed) * 1009 + level)
    for name, lin in m.adapter_layers().items():
        if name.rsplit(".", 1)[-1] in cfg.targets:
            delta = lin.add_delta(cfg, gen)
            delta.level = level
    m.adapter_configs.append(cfg)
    return level


def deltas_at(m: GraphLM, level: int) -> list:
    return [d for lin in m.adapter_layers().values() for d in lin.deltas if getattr(d, "level", None) == level]


def _reset_class_head(m: GraphLM, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    d, c = m.class_head.shape
    with torch.no_grad():
        m.class_head.copy_((torch.randn(d, c, generator=gen, dtype=torch.float64) * 0.02).to(m.class_head.dtype))
        m.class_bias.zero_()


def set_stage(m: GraphLM, stage: str, seed: int | None = None) -> None:
    """Set trainability for a stage; entering ``finetune`` reinitialises the class head."""
    if stage == "pretrain":
        if m.adapter_depth < 1:
            raise StageError("pretrain stage needs one attached adapter")
        trainable = {id(p) for d in deltas_at(m, 0) for p in d.parameters()}
        trainable |= {id(m.projector.weight), id(m.head), id(m.embed)}
    elif stage == "finetune":
        if m.adapter_depth < 2:
            raise StageError("finetune stage needs a second adapter attached after pre-training")
        trainable = {id(p) for d in deltas_at(m, m.adapter_depth - 1) for p in d.parameters()}
        trainable |= {id(m.class_head), id(m.class_bias)}
        _reset_class_head(m, m.seed + 7 if seed is None else seed)
    else:
        raise StageError(f"unknown stage {stage!r}")
    for p in m.parameters():
        p.requires_grad_(id(p) in trainable)
    m.stage = stage


def trainable_parameters(m: GraphLM) -> dict:
    return {name: p for name, p in m.named_parameters() if p.requires_grad}


def tensor_checksum(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().contiguous().cpu().numpy().tobytes()).hexdigest()


def checksums(m: GraphLM, level: int | None = None, base: bool = False) -> dict:
    """SHA-256 of base weights (``base=True``) or of the deltas at ``level``."""
    out = {}
    for name, lin in m.adapter_layers().items():
        if base:
            out[f"{name}.weight"] = tensor_checksum(lin.weight)
        for j, d in enumerate(lin.deltas):
            if level is not None and d.level == level:
                out[f"{name}.deltas.{j}.A"] = tensor_checksum(d.A)
                out[f"{name}.deltas.{j}.B"] = tensor_checksum(d.B)
    return out


def save_checkpoint(m: GraphLM, path, extra: dict | None = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(m.cfg),
        "seed": m.seed,
        "adapters": [asdict(c) for c in m.adapter_configs],
        "stage": m.stage,
        "trainable": [name for name, p in m.named_parameters() if p.requires_grad],
        "state": {k: v.detach().clone() for k, v in m.state_dict().items()},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple:
    """Return ``(model, extra)``; raises CheckpointError on corrupt or foreign files."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {payload['format_version']} != supported {FORMAT_VERSION}")
    try:
        m = GraphLM(ModelConfig(**payload["model_config"]), payload["seed"])
        for c in payload["adapters"]:
            attach_adapter(m, LoraConfig(**c))
        m.load_state_dict(payload["state"], strict=True)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} does not match its own config: {exc}") from exc
    trainable = set(payload["trainable"])
    for name, p in m.named_parameters():
        p.requires_grad_(name in trainable)
    m.stage = payload["stage"]
    return m, payload["extra"]
