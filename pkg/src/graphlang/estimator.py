"""scikit-learn wrappers: the two-stage node classifier and a walk-histogram featuriser.

Both estimators take the graph as a constructor parameter and node ids as
``X``, so they drop into pipelines, ``cross_val_score`` and ``clone``.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from ._validation import check_graph, check_node_ids
from .corpus import WalkConfig, build_pretrain_corpus, node_context
from .graph import Graph, Split
from .model import ALL_TARGETS, LoraConfig, ModelConfig, attach_adapter, build_model, set_stage
from .train import OptimConfig, class_logits, finetune, pretrain
from .vocab import build_vocab


class WalkHistogramTransformer(TransformerMixin, BaseEstimator):
    """Visit-frequency histogram of each node's restart-walk context.

    Row ``i`` of the output is the normalised count of every node over the
    ``walks_per_node`` sentences sampled from ``X[i]``.
    """

    def __init__(self, graph=None, walks_per_node=10, walk_length=5, random_state=0):
        self.graph = graph
        self.walks_per_node = walks_per_node
        self.walk_length = walk_length
        self.random_state = random_state

    def fit(self, X, y=None):
        g = check_graph(self.graph)
        check_node_ids(X, g)
        self.n_features_out_ = g.node_count
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_out_")
        g = self.graph
        ids = check_node_ids(X, g)
        cfg = WalkConfig(self.walks_per_node, self.walk_length, self.random_state)
        out = np.zeros((len(ids), g.node_count))
        for row, u in enumerate(ids):
            for s in node_context(g, int(u), cfg, self.random_state):
                np.add.at(out[row], list(s), 1.0)
        return out / out.sum(axis=1, keepdims=True)


class GraphLanguageClassifier(ClassifierMixin, BaseEstimator):
    """Node classifier: next-token pre-training on walks, then adapter fine-tuning.

    ``fit(X, y)`` pre-trains on the corpus of the whole graph (unless
    ``pretrain=False``), holds out ``validation_fraction`` of ``X`` for early
    stopping and fine-tunes on the rest. Predictions read the class head on
    contexts drawn with a fixed evaluation seed.
    """

    def __init__(
        self,
        graph=None,
        walks_per_node=10,
        walk_length=5,
        embed_dim=64,
        layers=2,
        heads=2,
        lora_rank=8,
        lora_alpha=16.0,
        lora_dropout=0.2,
        lora_targets=ALL_TARGETS,
        finetune_lora_rank=None,
        finetune_lora_targets=None,
        pretrain=True,
        pretrain_lr=1e-4,
        pretrain_epochs=50,
        pretrain_patience=3,
        finetune_lr=1e-4,
        finetune_epochs=50,
        finetune_patience=3,
        batch_size=32,
        weight_decay=1e-2,
        with_attrs=False,
        fixed_contexts=False,
        max_attr_tokens=16,
        validation_fraction=0.2,
        random_state=0,
    ):
        self.graph = graph
        self.walks_per_node = walks_per_node
        self.walk_length = walk_length
        self.embed_dim = embed_dim
        self.layers = layers
        self.heads = heads
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.lora_dropout = lora_dropout
        self.lora_targets = lora_targets
        self.finetune_lora_rank = finetune_lora_rank
        self.finetune_lora_targets = finetune_lora_targets
        self.pretrain = pretrain
        self.pretrain_lr = pretrain_lr
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_patience = pretrain_patience
        self.finetune_lr = finetune_lr
        self.finetune_epochs = finetune_epochs
        self.finetune_patience = finetune_patience
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.with_attrs = with_attrs
        self.fixed_contexts = fixed_contexts
        self.max_attr_tokens = max_attr_tokens
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _walk(self) -> WalkConfig:
        return WalkConfig(self.walks_per_node, self.walk_length, self.random_state)

    def _optim(self, lr, epochs, patience, offset) -> OptimConfig:
        return OptimConfig(lr=lr, batch_size=self.batch_size, weight_decay=self.weight_decay,
                           max_epochs=epochs, patience=patience, seed=self.random_state + offset)

    def fit(self, X, y):
        g = check_graph(self.graph)
        ids = check_node_ids(X, g)
        y = np.asarray(y)
        if len(y) != len(ids):
            raise ValueError(f"X has {len(ids)} nodes but y has {len(y)} labels")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("node ids in X must be unique")
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        codes = self.label_encoder_.transform(y)
        labeled = Graph.from_edges(g.edges, g.node_count, g.attributes, {int(u): int(c) for u, c in zip(ids, codes)})
        if not self.with_attrs:
            labeled = labeled.without_attributes()
        self.graph_ = labeled

        counts = np.bincount(codes)
        stratify = codes if counts.min() >= 2 else None
        tr, va = train_test_split(ids, test_size=self.validation_fraction, random_state=self.random_state,
                                  stratify=stratify)
        split = Split(tuple(sorted(map(int, tr))), tuple(sorted(map(int, va))), ())

        walk = self._walk()
        v = build_vocab(labeled, with_text=self.with_attrs)
        per_token = 1 + (self.max_attr_tokens if self.with_attrs else 0)
        cfg = ModelConfig(embed_dim=self.embed_dim, layers=self.layers, heads=self.heads,
                          max_seq_len=max(walk.k * walk.l * per_token + walk.k, walk.l + 1),
                          vocab_size=len(v), class_count=len(self.classes_))
        lora = LoraConfig(self.lora_rank, self.lora_alpha, self.lora_dropout, tuple(self.lora_targets))
        ft_rank = self.finetune_lora_rank or self.lora_rank
        ft_lora = LoraConfig(ft_rank, self.lora_alpha * ft_rank / self.lora_rank, self.lora_dropout,
                             tuple(self.finetune_lora_targets or self.lora_targets))
        m = build_model(labeled, v, cfg, self.random_state, use_attributes=self.with_attrs)
        attach_adapter(m, lora, self.random_state)
        set_stage(m, "pretrain")
        self.pretrain_report_ = None
        if self.pretrain:
            corpus = build_pretrain_corpus(labeled, walk)
            self.pretrain_report_ = pretrain(
                m, corpus, v, self._optim(self.pretrain_lr, self.pretrain_epochs, self.pretrain_patience, 1))
        attach_adapter(m, ft_lora, self.random_state + 1)
        set_stage(m, "finetune")
        self.finetune_report_ = finetune(
            m, labeled, split, walk, v,
            self._optim(self.finetune_lr, self.finetune_epochs, self.finetune_patience, 2),
            with_attrs=self.with_attrs, fixed_contexts=self.fixed_contexts,
            eval_seed=self.random_state + 3, max_attr_tokens=self.max_attr_tokens)
        self.model_ = m
        self.vocab_ = v
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        ids = check_node_ids(X, self.graph_)
        logits = class_logits(self.model_, self.graph_, [int(u) for u in ids], self._walk(), self.vocab_,
                              self.random_state + 3, with_attrs=self.with_attrs,
                              max_attr_tokens=self.max_attr_tokens)
        return logits.double().numpy()

    def predict_proba(self, X):
        return torch.softmax(torch.from_numpy(self.decision_function(X)), dim=-1).numpy()

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
