"""Shared builders for the test modules."""

import torch

from graphlang.corpus import WalkConfig, build_pretrain_corpus, node_context
from graphlang.graph import Graph
from graphlang.model import LoraConfig, ModelConfig, attach_adapter, build_model, set_stage
from graphlang.train import encode_corpus, next_token_loss
from graphlang.vocab import build_vocab, encode_context
from graphlang.model import as_batch


def tiny_graph():
    return Graph.from_edges([(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (3, 4)],
                            labels={0: 0, 1: 1, 2: 0, 3: 1, 4: 0})


def small_model(g, d=8, layers=1, dtype="float32", seed=0, targets=None, dropout=0.0, stage="pretrain"):
    v = build_vocab(g)
    cfg = ModelConfig(embed_dim=d, layers=layers, heads=2, max_seq_len=64, vocab_size=len(v),
                      class_count=max(g.class_count, 2), dtype=dtype)
    m = build_model(g, v, cfg, seed)
    lora = LoraConfig(rank=2, alpha=4, dropout=dropout, targets=targets) if targets else \
        LoraConfig(rank=2, alpha=4, dropout=dropout)
    attach_adapter(m, lora, seed)
    set_stage(m, "pretrain")
    if stage == "finetune":
        attach_adapter(m, lora, seed + 1)
        set_stage(m, "finetune")
    return m, v


def perturb_deltas(m, seed=0, scale=0.1):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for lin in m.adapter_layers().values():
            for d in lin.deltas:
                d.B.copy_(torch.randn(d.B.shape, generator=gen, dtype=torch.float64).to(d.B.dtype) * scale)


def pretrain_loss_fn(m, g, v, cfg=WalkConfig(2, 4, 0)):
    seqs = encode_corpus(build_pretrain_corpus(g, cfg), v)

    def loss():
        nll, _, n = next_token_loss(m, seqs)
        return nll / n
    return loss


def finetune_loss_fn(m, g, v, cfg=WalkConfig(2, 3, 0)):
    nodes = sorted(g.labels)
    ids, kinds, lengths = as_batch([encode_context(v, node_context(g, u, cfg, 0)) for u in nodes])
    y = torch.tensor([g.labels[u] for u in nodes])

    def loss():
        _, logits = m(ids, kinds, "finetune", lengths)
        return torch.nn.functional.cross_entropy(logits, y)
    return loss


def gradient_errors(m, loss_fn, h=1e-6):
    """Max relative error between autograd and central differences, per trainable tensor."""
    m.eval()
    params = {n: p for n, p in m.named_parameters() if p.requires_grad}
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    out = {}
    for name, p in params.items():
        analytic = p.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = p.data.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                numeric[i] = (up - down) / (2 * h)
        denom = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
        out[name] = (analytic - numeric).abs().max().item() / denom
    return out
