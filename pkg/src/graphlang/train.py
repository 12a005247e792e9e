"""Training drivers: next-token pre-training and node-classification fine-tuning."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Corpus, WalkConfig, node_context
from .errors import ConfigError, NumericalError, SplitError, StageError
from .graph import Graph, Split
from .model import GraphLM, as_batch, trainable_parameters
from .vocab import SPECIAL, TokenSeq, Vocab, encode_context, encode_sentence

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    lr: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError(f"invalid optimiser settings: {self}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"adam betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    wall_time: float = 0.0

    def add(self, epoch, split, loss, acc):
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite {split} loss {loss} at epoch {epoch}")
        self.records.append({"epoch": epoch, "split": split, "loss": float(loss), "acc": float(acc)})

    def losses(self, split="train") -> list:
        return [r["loss"] for r in self.records if r["split"] == split]

    def metric(self, split="val", key="acc") -> list:
        return [r[key] for r in self.records if r["split"] == split]

    @property
    def epochs_run(self) -> int:
        return max((r["epoch"] for r in self.records), default=0)

    def to_lines(self) -> str:
        lines = [f"epoch={r['epoch']} split={r['split']} loss={r['loss']:.6f} acc={r['acc']:.6f}" for r in self.records]
        lines.append(f"best_epoch={self.best_epoch} stop={self.stop_reason}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        # wall time is run-dependent and kept out of the serialised report
        return {"records": self.records, "best_epoch": self.best_epoch, "stop_reason": self.stop_reason}

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True) + "\n"


def adam_step(params, grads, state: dict, opt: OptimConfig, decay=None) -> None:
    """One in-place Adam update with bias correction and decoupled weight decay.

    ``state`` holds ``step`` and the first/second moment lists and is created
    on first use. ``decay`` flags which params take weight decay; by default
    every tensor with ``ndim >= 2``.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g is not None and p.shape != g.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)} vs grad {tuple(g.shape)}")
    if not state:
        state["step"] = 0
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    if decay is None:
        decay = [p.ndim >= 2 for p in params]
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    with torch.no_grad():
        for p, g, m, v, wd in zip(params, grads, state["m"], state["v"], decay):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(opt.beta1).add_(g, alpha=1.0 - opt.beta1)
            v.mul_(opt.beta2).addcmul_(g, g, value=1.0 - opt.beta2)
            if wd and opt.weight_decay:
                p.mul_(1.0 - opt.lr * opt.weight_decay)
            p.sub_(opt.lr * (m / c1) / ((v / c2).sqrt() + opt.eps))


class Adam:
    """Holds moment state for a fixed list of named parameters."""

    def __init__(self, named_params: dict, opt: OptimConfig):
        self.names = list(named_params)
        self.params = [named_params[n] for n in self.names]
        self.opt = opt
        self.state: dict = {}

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state, self.opt)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def _snapshot(params: dict) -> dict:
    return {k: p.detach().clone() for k, p in params.items()}


def _restore(params: dict, snap: dict) -> None:
    with torch.no_grad():
        for k, p in params.items():
            p.copy_(snap[k])


def next_token_loss(m: GraphLM, seqs) -> tuple:
    """Summed next-token cross entropy and correct-count over real targets, plus target count."""
    ids, kinds, lengths = as_batch(seqs)
    _, logits = m(ids, kinds, "pretrain", lengths)
    targets = ids[:, 1:]
    valid = torch.arange(1, ids.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)
    pred = logits[:, :-1]
    nll = F.cross_entropy(pred.reshape(-1, pred.shape[-1]), targets.reshape(-1), reduction="none")
    nll = nll.view_as(targets) * valid
    correct = ((pred.argmax(-1) == targets) & valid).sum().item()
    return nll.sum(), correct, int(valid.sum())


def _bos(v: Vocab) -> TokenSeq:
    return TokenSeq(np.array([v.sep_id]), np.array([SPECIAL], dtype=np.int8))


def encode_corpus(corpus: Corpus, v: Vocab, learn_start_token: bool = False) -> list:
    seqs = []
    for s in corpus.sentences:
        seq = encode_sentence(v, s)
        if learn_start_token:
            seq = TokenSeq.concat([_bos(v), seq])
        if len(seq) >= 2:
            seqs.append(seq)
    return seqs


def _mean_next_token(m: GraphLM, seqs, batch_size: int) -> tuple:
    was = m.training
    m.eval()
    total, correct, count = 0.0, 0, 0
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            nll, c, n = next_token_loss(m, seqs[i:i + batch_size])
            total += float(nll)
            correct += c
            count += n
    m.train(was)
    return total / max(count, 1), correct / max(count, 1)


def pretrain(
    m: GraphLM,
    corpus: Corpus,
    v: Vocab,
    opt: OptimConfig,
    learn_start_token: bool = False,
    val_fraction: float = 0.05,
) -> TrainReport:
    """Minimise next-token cross entropy over the corpus.

    Position 1 of every sentence is context only unless ``learn_start_token``
    prepends a start marker. A seeded 5% of sentences is held out for early
    stopping on validation loss; the best-epoch weights are restored.
    Epoch 0 records the losses before any update.
    """
    if m.stage != "pretrain":
        raise StageError(f"model is in stage {m.stage!r}, expected 'pretrain'")
    seqs = encode_corpus(corpus, v, learn_start_token)
    if not seqs:
        raise ValueError("corpus has no sentence with a next-token target")
    started = time.perf_counter()
    rng = np.random.default_rng(opt.seed)
    order = rng.permutation(len(seqs))
    n_val = int(round(val_fraction * len(seqs))) if len(seqs) >= 20 else 0
    val = [seqs[i] for i in order[:n_val]]
    train = [seqs[i] for i in order[n_val:]]
    monitor = val or train

    params = trainable_parameters(m)
    adam = Adam(params, opt)
    report = TrainReport()
    loss, acc = _mean_next_token(m, train, opt.batch_size)
    report.add(0, "train", loss, acc)
    best = _mean_next_token(m, monitor, opt.batch_size)[0]
    if val:
        report.add(0, "val", *_mean_next_token(m, val, opt.batch_size))
    best_snap, since = _snapshot(params), 0
    report.stop_reason = "max_epochs"
    m.train()
    for epoch in range(1, opt.max_epochs + 1):
        perm = rng.permutation(len(train))
        total, correct, count = 0.0, 0, 0
        for i in range(0, len(train), opt.batch_size):
            batch = [train[j] for j in perm[i:i + opt.batch_size]]
            nll, c, n = next_token_loss(m, batch)
            loss = nll / n
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite pre-training loss at epoch {epoch}, batch {i // opt.batch_size}")
            adam.zero_grad()
            loss.backward()
            adam.step()
            total += nll.item()
            correct += c
            count += n
        report.add(epoch, "train", total / count, correct / count)
        if val:
            vl, va = _mean_next_token(m, val, opt.batch_size)
            report.add(epoch, "val", vl, va)
            current = vl
        else:
            current = total / count
        if current < best:
            best, since = current, 0
            report.best_epoch = epoch
            best_snap = _snapshot(params)
        else:
            since += 1
            if since >= opt.patience:
                report.stop_reason = "patience"
                break
    _restore(params, best_snap)
    m.eval()
    report.wall_time = time.perf_counter() - started
    log.info("pretrain stopped at epoch %d (%s), best epoch %d", epoch, report.stop_reason, report.best_epoch)
    return report


def context_batch(g: Graph, nodes, cfg: WalkConfig, v: Vocab, seed: int, *keys, with_attrs=False, max_attr_tokens=16):
    attrs = g.attributes if with_attrs else None
    seqs = [encode_context(v, node_context(g, u, cfg, seed, *keys), attrs, max_attr_tokens) for u in nodes]
    return as_batch(seqs)


def class_logits(m: GraphLM, g: Graph, nodes, cfg: WalkConfig, v: Vocab, seed: int, *keys,
                 with_attrs=False, max_attr_tokens=16, batch_size=64) -> torch.Tensor:
    was = m.training
    m.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(nodes), batch_size):
            ids, kinds, lengths = context_batch(g, nodes[i:i + batch_size], cfg, v, seed, *keys,
                                                with_attrs=with_attrs, max_attr_tokens=max_attr_tokens)
            out.append(m(ids, kinds, "finetune", lengths)[1])
    m.train(was)
    return torch.cat(out) if out else torch.zeros(0, m.cfg.class_count)


def _labels_of(g: Graph, nodes) -> torch.Tensor:
    missing = [u for u in nodes if u not in g.labels]
    if missing:
        raise SplitError(f"nodes {missing[:5]} have no label")
    return torch.tensor([g.labels[u] for u in nodes], dtype=torch.long)


def evaluate(m: GraphLM, g: Graph, nodes, cfg: WalkConfig, v: Vocab, with_attrs: bool = False,
             eval_seed: int = 12345, max_attr_tokens: int = 16) -> float:
    """Micro accuracy of argmax class predictions on ``nodes``."""
    if m.stage != "finetune":
        raise StageError(f"model is in stage {m.stage!r}; evaluation needs a fine-tuned model")
    nodes = list(nodes)
    if not nodes:
        raise SplitError("cannot evaluate an empty node set")
    y = _labels_of(g, nodes)
    logits = class_logits(m, g, nodes, cfg, v, eval_seed, with_attrs=with_attrs, max_attr_tokens=max_attr_tokens)
    return float((logits.argmax(-1) == y).double().mean())


def finetune(
    m: GraphLM,
    g: Graph,
    split: Split,
    cfg: WalkConfig,
    v: Vocab,
    opt: OptimConfig,
    with_attrs: bool = False,
    fixed_contexts: bool = False,
    eval_seed: int = 12345,
    max_attr_tokens: int = 16,
) -> TrainReport:
    """Fit the class head and last adapter on sampled node contexts.

    Training contexts are resampled every epoch unless ``fixed_contexts``.
    Early stopping tracks validation micro accuracy, ties broken by lower
    validation loss; the best-epoch weights are restored.
    """
    if m.stage != "finetune":
        raise StageError(f"model is in stage {m.stage!r}, expected 'finetune'")
    if not (split.train and split.validation):
        raise SplitError("fine-tuning needs non-empty train and validation parts")
    started = time.perf_counter()
    train_nodes = list(split.train)
    val_nodes = list(split.validation)
    y_train = _labels_of(g, train_nodes)
    y_val = _labels_of(g, val_nodes)
    kw = dict(with_attrs=with_attrs, max_attr_tokens=max_attr_tokens)

    def validate():
        logits = class_logits(m, g, val_nodes, cfg, v, eval_seed, **kw)
        return float(F.cross_entropy(logits, y_val)), float((logits.argmax(-1) == y_val).double().mean())

    def train_metrics():
        logits = class_logits(m, g, train_nodes, cfg, v, opt.seed, 0, **kw)
        return float(F.cross_entropy(logits, y_train)), float((logits.argmax(-1) == y_train).double().mean())

    params = trainable_parameters(m)
    adam = Adam(params, opt)
    rng = np.random.default_rng(opt.seed)
    report = TrainReport()
    report.add(0, "train", *train_metrics())
    vl, va = validate()
    report.add(0, "val", vl, va)
    best, best_snap, since = (va, -vl), _snapshot(params), 0
    report.stop_reason = "max_epochs"
    m.train()
    for epoch in range(1, opt.max_epochs + 1):
        key = 0 if fixed_contexts else epoch
        perm = rng.permutation(len(train_nodes))
        total, correct = 0.0, 0
        for i in range(0, len(perm), opt.batch_size):
            idx = perm[i:i + opt.batch_size]
            batch_nodes = [train_nodes[j] for j in idx]
            ids, kinds, lengths = context_batch(g, batch_nodes, cfg, v, opt.seed, key, **kw)
            _, logits = m(ids, kinds, "finetune", lengths)
            target = y_train[torch.as_tensor(idx)]
            loss = F.cross_entropy(logits, target)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite fine-tuning loss at epoch {epoch}")
            adam.zero_grad()
            loss.backward()
            adam.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(-1) == target).sum())
        report.add(epoch, "train", total / len(perm), correct / len(perm))
        vl, va = validate()
        report.add(epoch, "val", vl, va)
        if (va, -vl) > best:
            best, best_snap, since = (va, -vl), _snapshot(params), 0
            report.best_epoch = epoch
        else:
            since += 1
            if since >= opt.patience:
                report.stop_reason = "patience"
                break
    _restore(params, best_snap)
    m.eval()
    report.wall_time = time.perf_counter() - started
    return report
