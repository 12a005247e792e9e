"""Command-line pipeline: sample, pretrain, finetune, eval, verify-theorem, tokens.

Configuration is a flat ``key=value`` file (``--config``) overridden by
``--<key>`` flags or ``--set key=value``. Exit codes: 0 success, 1 usage or
config error, 2 runtime or data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, fields

import torch

from .corpus import WalkConfig, build_pretrain_corpus, read_corpus, write_corpus
from .errors import ConfigError, GraphLangError, StageError
from .graph import load_graph, make_split
from .model import (
    LoraConfig,
    ModelConfig,
    attach_adapter,
    build_model,
    load_checkpoint,
    save_checkpoint,
    set_stage,
)
from .tokens import token_report
from .train import OptimConfig, evaluate, finetune, pretrain
from .verify import theorem1_check
from .vocab import Vocab, build_vocab

log = logging.getLogger("graphlang")


@dataclass
class RunConfig:
    edges: str = ""
    labels: str = ""
    attrs: str = ""
    out: str = "runs"
    checkpoint: str = ""
    k: int = 10
    l: int = 5
    embed_dim: int = 64
    layers: int = 2
    heads: int = 2
    ff_dim: int = 0
    dtype: str = "float32"
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.2
    lora_targets: str = "q,k,v,o,ff1,ff2,projector"
    finetune_lora_rank: int = 0
    finetune_lora_targets: str = ""
    pretrain_lr: float = 1e-4
    pretrain_batch_size: int = 32
    pretrain_max_epochs: int = 50
    pretrain_patience: int = 3
    finetune_lr: float = 1e-4
    finetune_batch_size: int = 32
    finetune_max_epochs: int = 50
    finetune_patience: int = 3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    split: str = "0.6,0.2,0.2"
    with_attrs: bool = False
    fixed_contexts: bool = False
    learn_start_token: bool = False
    use_pretrain: bool = True
    max_attr_tokens: int = 16
    min_freq: int = 2
    order: int = 4
    neighbor_cap: int = 10
    permutations: int = 2000
    corpus_seed: int = 0
    model_seed: int = 1
    train_seed: int = 2
    eval_seed: int = 3
    workers: int = 1

    # --- typed views -------------------------------------------------------
    def walk(self) -> WalkConfig:
        return WalkConfig(self.k, self.l, self.corpus_seed)

    def lora(self, stage: str = "pretrain") -> LoraConfig:
        """Adapter settings; the fine-tuning level falls back to the shared ones when unset."""
        rank, targets = self.lora_rank, self.lora_targets
        if stage == "finetune":
            rank = self.finetune_lora_rank or rank
            targets = self.finetune_lora_targets or targets
        # alpha is given for the shared rank; keep alpha / rank fixed across levels
        alpha = self.lora_alpha * rank / self.lora_rank
        return LoraConfig(rank, alpha, self.lora_dropout, tuple(t for t in targets.split(",") if t))

    def optim(self, stage: str) -> OptimConfig:
        return OptimConfig(
            lr=getattr(self, f"{stage}_lr"),
            batch_size=getattr(self, f"{stage}_batch_size"),
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            max_epochs=getattr(self, f"{stage}_max_epochs"),
            patience=getattr(self, f"{stage}_patience"),
            seed=self.train_seed,
        )

    def fractions(self) -> tuple:
        try:
            return tuple(float(x) for x in self.split.split(","))
        except ValueError as exc:
            raise ConfigError(f"split must be three comma-separated fractions, got {self.split!r}") from exc

    def max_seq_len(self) -> int:
        per_token = 1 + (self.max_attr_tokens if self.with_attrs else 0)
        return max(self.k * self.l * per_token + self.k, self.l + 1)

    def to_lines(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in {"1", "0", "true", "false", "yes", "no"}:
                raise ValueError(raw)
            return low in {"1", "true", "yes"}
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw.strip()


def read_config_file(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            values[key.strip()] = _coerce(key.strip(), value)
    return values


def resolve_config(args) -> RunConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    if args.seed is not None:
        values.update(corpus_seed=args.seed, model_seed=args.seed + 1, train_seed=args.seed + 2, eval_seed=args.seed + 3)
    for name in _FIELD_TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = _coerce(name, str(flag))
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = _coerce(key.strip(), value)
    if os.environ.get("GDL_OUT"):
        values["out"] = os.environ["GDL_OUT"]
    cfg = RunConfig(**values)
    cfg.out = os.path.abspath(cfg.out)
    for key in ("edges", "labels", "attrs"):
        path = getattr(cfg, key)
        if path:
            setattr(cfg, key, os.path.abspath(path))
    return cfg


# --- helpers ------------------------------------------------------------------

def _require(path, what):
    if not path:
        raise ConfigError(f"--{what} is required")
    if not os.path.exists(path):
        raise ConfigError(f"{what} file not found: {path}")


def _graph(cfg: RunConfig, need_labels=False):
    _require(cfg.edges, "edges")
    if need_labels:
        _require(cfg.labels, "labels")
    elif cfg.labels:
        _require(cfg.labels, "labels")
    if cfg.attrs:
        _require(cfg.attrs, "attrs")
    g = load_graph(cfg.edges, cfg.labels or None, cfg.attrs or None)
    print(g.summary())
    return g


def _out(cfg: RunConfig, name: str) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


def _write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _config_header(cfg: RunConfig) -> str:
    return "".join(f"# {line}\n" for line in cfg.to_lines().splitlines())


def _model_config(cfg: RunConfig, v: Vocab, class_count: int) -> ModelConfig:
    return ModelConfig(
        embed_dim=cfg.embed_dim,
        layers=cfg.layers,
        heads=cfg.heads,
        ff_dim=cfg.ff_dim or None,
        max_seq_len=cfg.max_seq_len(),
        vocab_size=len(v),
        class_count=max(class_count, 1),
        dtype=cfg.dtype,
    )


def _fresh_model(cfg: RunConfig, g):
    v = build_vocab(g, with_text=cfg.with_attrs, min_freq=cfg.min_freq)
    m = build_model(g, v, _model_config(cfg, v, g.class_count), cfg.model_seed, use_attributes=cfg.with_attrs)
    attach_adapter(m, cfg.lora(), cfg.model_seed)
    set_stage(m, "pretrain")
    return m, v


def _load(path, stage=None):
    m, extra = load_checkpoint(path)
    if stage is not None and m.stage != stage:
        raise StageError(f"checkpoint {path} is in stage {m.stage!r}, this command needs {stage!r}")
    return m, Vocab(extra["graph_tokens"], extra["text_tokens"])


def _extra(v: Vocab, cfg: RunConfig) -> dict:
    return {"graph_tokens": v.graph_token_count, "text_tokens": list(v.text_tokens), "config": cfg.to_lines()}


# --- commands -----------------------------------------------------------------

def cmd_sample(cfg: RunConfig, dry_run=False):
    g = _graph(cfg)
    walk = cfg.walk()
    if dry_run:
        return 0
    c = build_pretrain_corpus(g, walk, workers=cfg.workers)
    write_corpus(c, _out(cfg, "corpus.txt"))
    v = build_vocab(g, with_text=cfg.with_attrs, min_freq=cfg.min_freq)
    v.write(_out(cfg, "vocab.tsv"))
    summary = f"{g.summary()} sentences={len(c)} k={walk.k} l={walk.l} seed={walk.seed}\n"
    _write(_out(cfg, "sample_summary.txt"), _config_header(cfg) + summary)
    print(summary, end="")
    return 0


def cmd_pretrain(cfg: RunConfig, dry_run=False):
    g = _graph(cfg)
    corpus_path = _out(cfg, "corpus.txt")
    if not os.path.exists(corpus_path):
        raise ConfigError(f"corpus not found: {corpus_path} (run 'sample' first)")
    opt = cfg.optim("pretrain")
    c = read_corpus(corpus_path)
    m, v = _fresh_model(cfg, g)
    if dry_run:
        return 0
    report = pretrain(m, c, v, opt, learn_start_token=cfg.learn_start_token)
    save_checkpoint(m, _out(cfg, "pretrain.ckpt"), _extra(v, cfg))
    _write(_out(cfg, "pretrain_report.txt"), _config_header(cfg) + report.to_lines())
    _write(_out(cfg, "pretrain_report.json"), report.to_json(config=cfg.to_dict()))
    print(f"best_epoch={report.best_epoch} stop={report.stop_reason} final_loss={report.losses()[-1]:.6f}")
    return 0


def cmd_finetune(cfg: RunConfig, dry_run=False):
    g = _graph(cfg, need_labels=True)
    split = make_split(g, cfg.fractions(), cfg.corpus_seed)
    opt = cfg.optim("finetune")
    if cfg.use_pretrain:
        m, v = _load(cfg.checkpoint or _out(cfg, "pretrain.ckpt"))
        if m.cfg.class_count != g.class_count:
            raise ConfigError(f"checkpoint was built for {m.cfg.class_count} classes, graph has {g.class_count}")
    else:
        m, v = _fresh_model(cfg, g)
    if dry_run:
        return 0
    attach_adapter(m, cfg.lora("finetune"), cfg.model_seed + 1)
    set_stage(m, "finetune")
    report = finetune(m, g, split, cfg.walk(), v, opt, with_attrs=cfg.with_attrs,
                      fixed_contexts=cfg.fixed_contexts, eval_seed=cfg.eval_seed, max_attr_tokens=cfg.max_attr_tokens)
    save_checkpoint(m, _out(cfg, "finetune.ckpt"), _extra(v, cfg))
    _write(_out(cfg, "finetune_report.txt"), _config_header(cfg) + report.to_lines())
    _write(_out(cfg, "finetune_report.json"), report.to_json(config=cfg.to_dict()))
    print(f"best_epoch={report.best_epoch} stop={report.stop_reason} val_acc={max(report.metric('val')):.6f}")
    return 0


def cmd_eval(cfg: RunConfig, dry_run=False):
    g = _graph(cfg, need_labels=True)
    split = make_split(g, cfg.fractions(), cfg.corpus_seed)
    m, v = _load(cfg.checkpoint or _out(cfg, "finetune.ckpt"), stage="finetune")
    if dry_run:
        return 0
    kw = dict(with_attrs=cfg.with_attrs, eval_seed=cfg.eval_seed, max_attr_tokens=cfg.max_attr_tokens)
    result = {
        "val_accuracy": evaluate(m, g, split.validation, cfg.walk(), v, **kw),
        "test_accuracy": evaluate(m, g, split.test, cfg.walk(), v, **kw),
        "test_nodes": len(split.test),
        "config": cfg.to_dict(),
    }
    _write(_out(cfg, "eval.json"), json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"val_accuracy={result['val_accuracy']:.6f} test_accuracy={result['test_accuracy']:.6f}")
    return 0


def cmd_verify(cfg: RunConfig, dry_run=False):
    g = _graph(cfg)
    m, v = _load(cfg.checkpoint or _out(cfg, "pretrain.ckpt"))
    if dry_run:
        return 0
    report = theorem1_check(m, g, v, n_permutations=cfg.permutations, seed=cfg.eval_seed)
    _write(_out(cfg, "verify.json"), report.to_json(config=cfg.to_dict()))
    _write(_out(cfg, "verify_table.tsv"), report.table())
    for name, stats in (("pred_dq", report.theorem_dq), ("pred_dqdq1", report.theorem_dq_dprev)):
        if stats.get("degenerate"):
            print(f"{name}: degenerate predictor, correlation undefined")
        else:
            print(f"{name}: spearman={stats['spearman']:.4f} pearson={stats['pearson']:.4f} "
                  f"p={stats.get('permutation_p', float('nan')):.4g}")
    print(f"kl_mean={report.kl_mean:.6f} edge_mean={report.edge_mean_inner:.4f} nonedge_mean={report.nonedge_mean_inner}")
    return 0


def cmd_tokens(cfg: RunConfig, dry_run=False):
    g = _graph(cfg)
    if dry_run:
        return 0
    report = token_report(g, range(g.node_count), cfg.walk(), cfg.order, with_attrs=cfg.with_attrs,
                          neighbor_cap=cfg.neighbor_cap, max_attr_tokens=cfg.max_attr_tokens)
    _write(_out(cfg, "tokens.tsv"), report.table())
    _write(_out(cfg, "tokens.json"), report.to_json(config=cfg.to_dict()))
    print(f"mean_gdl={report.mean_gdl:.2f} mean_desc={report.mean_description:.2f} reduction_pct={report.reduction:.2f}")
    return 0


COMMANDS = {
    "sample": cmd_sample,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "verify-theorem": cmd_verify,
    "tokens": cmd_tokens,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphlang", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--seed", type=int, help="base seed; derives the corpus/model/train/eval seeds")
        p.add_argument("--dry-run", action="store_true", help="validate config and inputs, then exit")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            if f.name in {"k", "l"}:
                flag = f"--{f.name}"
            p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if cfg.workers <= 1:
            torch.set_num_threads(1)
        return COMMANDS[args.command](cfg, dry_run=args.dry_run)
    except GraphLangError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
