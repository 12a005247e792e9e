import json
import math

import numpy as np
import pytest
import torch

from graphlang.corpus import Corpus, WalkConfig, build_pretrain_corpus
from graphlang.errors import ConfigError, NumericalError, SplitError, StageError
from graphlang.graph import Split, make_split, path_graph, stochastic_block_model
from graphlang.model import LoraConfig, attach_adapter, checksums, set_stage
from graphlang.train import (
    OptimConfig,
    TrainReport,
    adam_step,
    encode_corpus,
    evaluate,
    finetune,
    next_token_loss,
    pretrain,
)
from graphlang.verify import model_next_distribution

from helpers import small_model, tiny_graph


def test_adam_hand_trace():
    # two steps on a scalar, worked out by hand
    opt = OptimConfig(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
    p = torch.tensor([1.0], dtype=torch.float64)
    state = {}
    adam_step([p], [torch.tensor([0.5], dtype=torch.float64)], state, opt)
    # m_hat = 0.5, v_hat = 0.25
    expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)
    assert abs(p.item() - expected) < 1e-10
    adam_step([p], [torch.tensor([-1.0], dtype=torch.float64)], state, opt)
    m = 0.9 * 0.05 + 0.1 * -1.0
    v = 0.999 * 0.00025 + 0.001 * 1.0
    m_hat, v_hat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    expected -= 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert abs(p.item() - expected) < 1e-10


def test_adam_matches_torch_adamw():
    gen = torch.Generator().manual_seed(0)
    w = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    b = torch.randn(3, generator=gen, dtype=torch.float64)
    opt = OptimConfig(lr=0.01, weight_decay=0.1)
    mine = [w.clone(), b.clone()]
    ref_w = w.clone().requires_grad_()
    ref_b = b.clone().requires_grad_()
    ref_opt_w = torch.optim.AdamW([ref_w], lr=0.01, weight_decay=0.1, eps=1e-8)
    ref_opt_b = torch.optim.AdamW([ref_b], lr=0.01, weight_decay=0.0, eps=1e-8)
    state = {}
    for _ in range(5):
        gw = torch.randn(4, 3, generator=gen, dtype=torch.float64)
        gb = torch.randn(3, generator=gen, dtype=torch.float64)
        adam_step(mine, [gw, gb], state, opt)
        ref_w.grad, ref_b.grad = gw.clone(), gb.clone()
        ref_opt_w.step()
        ref_opt_b.step()
    assert torch.allclose(mine[0], ref_w.detach(), atol=1e-10, rtol=0)
    assert torch.allclose(mine[1], ref_b.detach(), atol=1e-10, rtol=0)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([torch.zeros(2)], [torch.zeros(3)], {}, OptimConfig())


def test_optim_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(lr=0)
    with pytest.raises(ConfigError):
        OptimConfig(beta1=1.0)


def test_report_rejects_nan():
    r = TrainReport()
    with pytest.raises(NumericalError):
        r.add(1, "train", float("nan"), 0.0)


def test_report_serialisation_excludes_wall_time():
    r = TrainReport(wall_time=12.5, best_epoch=1, stop_reason="patience")
    r.add(0, "train", 1.0, 0.5)
    assert "wall_time" not in json.loads(r.to_json())
    assert r.to_lines().splitlines()[-1] == "best_epoch=1 stop=patience"


def test_next_token_loss_masks_padding():
    g = tiny_graph()
    m, v = small_model(g)
    m.eval()
    seqs = encode_corpus(Corpus([(0, 1, 2), (3, 4)], WalkConfig()), v)
    nll, _, n = next_token_loss(m, seqs)
    assert n == 3
    single = sum(next_token_loss(m, [s])[0].item() for s in seqs)
    assert nll.item() == pytest.approx(single, rel=1e-5)


def test_learn_start_token_adds_a_target():
    g = tiny_graph()
    _, v = small_model(g)
    c = Corpus([(0, 1, 2)], WalkConfig())
    assert len(encode_corpus(c, v, learn_start_token=True)[0]) == 4
    assert encode_corpus(Corpus([(4,)], WalkConfig()), v) == []


def test_pretrain_requires_stage():
    g = tiny_graph()
    m, v = small_model(g, stage="finetune")
    with pytest.raises(StageError):
        pretrain(m, build_pretrain_corpus(g, WalkConfig(2, 3)), v, OptimConfig())


def test_pretrain_path_graph_deterministic_successor():
    g = path_graph(3)
    m, v = small_model(g, d=16, targets=("ff1", "ff2", "projector"))
    c = build_pretrain_corpus(g, WalkConfig(30, 5, 0))
    report = pretrain(m, c, v, OptimConfig(lr=1e-2, batch_size=16, max_epochs=200, patience=20))
    assert report.records[0]["epoch"] == 0
    assert model_next_distribution(m, (0,), v)[0 + 1] >= 0.95
    losses = report.losses("val")
    assert min(losses) < losses[0]


def test_pretrain_deterministic():
    g = tiny_graph()
    reports = []
    for _ in range(2):
        m, v = small_model(g)
        reports.append(pretrain(m, build_pretrain_corpus(g, WalkConfig(5, 4)), v,
                                OptimConfig(lr=1e-2, max_epochs=5)).to_json())
    assert reports[0] == reports[1]


def _sbm_model():
    g = stochastic_block_model([20, 20], 0.4, 0.02, 0)
    m, v = small_model(g, d=16, stage="finetune")
    return g, m, v


def test_finetune_keeps_base_and_first_adapter_fixed():
    g, m, v = _sbm_model()
    base, first = checksums(m, base=True), checksums(m, level=0)
    split = make_split(g, seed=0)
    finetune(m, g, split, WalkConfig(4, 4), v, OptimConfig(lr=3e-3, batch_size=8, max_epochs=3))
    assert checksums(m, base=True) == base
    assert checksums(m, level=0) == first


def test_finetune_learns_separable_blocks():
    g, m, v = _sbm_model()
    split = make_split(g, seed=0)
    cfg = WalkConfig(6, 4, 0)
    report = finetune(m, g, split, cfg, v, OptimConfig(lr=1e-2, batch_size=8, max_epochs=40, patience=10))
    best_val = max(report.metric("val"))
    assert report.metric("val")[report.best_epoch] == best_val
    assert evaluate(m, g, split.validation, cfg, v, eval_seed=12345) == pytest.approx(best_val)
    assert evaluate(m, g, split.test, cfg, v) >= 0.8


def test_finetune_errors():
    g, m, v = _sbm_model()
    with pytest.raises(SplitError):
        finetune(m, g, Split((0, 1), (), (2,)), WalkConfig(2, 3), v, OptimConfig())
    g2, m2, v2 = _sbm_model()
    set_stage(m2, "pretrain")
    with pytest.raises(StageError):
        finetune(m2, g2, make_split(g2), WalkConfig(2, 3), v2, OptimConfig())
    with pytest.raises(StageError):
        evaluate(m2, g2, [0], WalkConfig(2, 3), v2)


def test_finetune_without_pretrain_levels():
    g, m, v = _sbm_model()
    # a third adapter level becomes the trainable one
    attach_adapter(m, LoraConfig(rank=2, alpha=4), 9)
    set_stage(m, "finetune")
    second = checksums(m, level=1)
    finetune(m, g, make_split(g), WalkConfig(2, 3), v, OptimConfig(lr=1e-2, batch_size=8, max_epochs=2))
    assert checksums(m, level=1) == second
    assert np.isfinite(evaluate(m, g, make_split(g).test, WalkConfig(2, 3), v))
