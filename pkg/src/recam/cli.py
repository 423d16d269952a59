"""Command-line entry point: ``recam <subcommand> ...``.

Settings come from built-in defaults, then an optional ``--config`` JSON
file, then explicit flags, with later sources winning.  Usage errors exit
with status 2 and operational failures with status 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import report as R
from .data import DatasetSplit, load_recam_jsonl, make_synthetic_dataset, save_recam_jsonl
from .encoder import (Encoder, EncoderConfig, MLMHead, Vocabulary, build_vocab, mlm_pretrain_step,
                      tokenize)
from .errors import ConfigurationError, RecamError
from .heads import DEFAULT_DROPOUT_SAMPLES, DEFAULT_INIT_STD, HeadKind
from .model import MultipleChoiceModel
from .optim import AdamW
from .prompting import (FewShotConfig, HttpLimits, HttpScorer, PromptStyle, adversarial_mock,
                        oracle_mock, run_prompt_eval, uniform_mock)
from .prompting.backends import CachedBackend
from .tensor import RandomSource
from .trainer import (Checkpoint, TrainConfig, evaluate_accuracy, load_checkpoint,
                      save_checkpoint, train)

ENCODER_KEYS = ("num_layers", "num_heads", "d_hidden", "d_ff", "max_seq_len", "embedding_std")

DEFAULTS: Dict[str, Dict[str, object]] = {
    "synth": {"rule": "copy", "n": 32, "seed": 0, "article_len": 40, "question_len": 6,
              "name": None},
    "build-vocab": {"max_size": 30000},
    "pretrain": {"steps": 100, "batch_size": 8, "learning_rate": 1e-4, "weight_decay": 0.01,
                 "seed": 0, "max_size": 30000, "vocab": None, "num_layers": 1, "num_heads": 2,
                 "d_hidden": 32, "d_ff": 64, "max_seq_len": 256, "embedding_std": 1.0},
    "train": {**{f.name: f.default for f in fields(TrainConfig)},
              "num_layers": 1, "num_heads": 2, "d_hidden": 32, "d_ff": 64, "max_seq_len": 256,
              "embedding_std": 1.0, "vocab_size": 30000, "head_num_heads": None,
              "head_init_std": DEFAULT_INIT_STD, "dropout_samples": DEFAULT_DROPOUT_SAMPLES,
              "vocab": None, "init_encoder": None, "dev": None},
    "eval": {"batch_size": 2},
    "prompt": {"style": ["multi-choice"], "shots": [0], "backend": "oracle-mock", "pool": None,
               "selection": "first", "seed": 0, "endpoint": "https://api.openai.com/v1",
               "model": "gpt-4o-mini", "api_key_env": "OPENAI_API_KEY", "cache_dir": None,
               "max_in_flight": 4, "timeout": 30.0, "max_retries": 5, "echo": False},
    "report": {"baseline": None, "column": None, "title": "Accuracy", "out": None},
}


def _flag(parser, name: str, **kw) -> None:
    """A flag whose absence leaves the setting to the config file or defaults."""
    parser.add_argument(f"--{name.replace('_', '-')}", dest=name, default=argparse.SUPPRESS, **kw)


def _bool_flag(parser, name: str, help: str) -> None:
    parser.add_argument(f"--{name.replace('_', '-')}", dest=name, action="store_true",
                        default=argparse.SUPPRESS, help=help)
    parser.add_argument(f"--no-{name.replace('_', '-')}", dest=name, action="store_false",
                        default=argparse.SUPPRESS)


def _encoder_flags(p) -> None:
    _flag(p, "num_layers", type=int)
    _flag(p, "num_heads", type=int)
    _flag(p, "d_hidden", type=int)
    _flag(p, "d_ff", type=int)
    _flag(p, "max_seq_len", type=int)
    _flag(p, "embedding_std", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic labeled split")
    p.add_argument("--out", required=True, type=Path)
    _flag(p, "rule", choices=["copy", "majority"])
    _flag(p, "n", type=int)
    _flag(p, "seed", type=int)
    _flag(p, "article_len", type=int)
    _flag(p, "question_len", type=int)
    _flag(p, "name")

    p = sub.add_parser("build-vocab", help="build a vocabulary from JSONL splits or text files")
    p.add_argument("--corpus", required=True, nargs="+", type=Path)
    p.add_argument("--out", required=True, type=Path)
    _flag(p, "max_size", type=int)

    p = sub.add_parser("pretrain", help="toy masked-LM pretraining of the encoder")
    p.add_argument("--corpus", required=True, nargs="+", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--report-dir", type=Path)
    _flag(p, "vocab", type=Path)
    _flag(p, "steps", type=int)
    _flag(p, "batch_size", type=int)
    _flag(p, "learning_rate", type=float)
    _flag(p, "weight_decay", type=float)
    _flag(p, "seed", type=int)
    _flag(p, "max_size", type=int)
    _encoder_flags(p)

    p = sub.add_parser("train", help="fine-tune encoder + head on a labeled split")
    p.add_argument("--train", required=True, type=Path)
    p.add_argument("--report-dir", required=True, type=Path)
    _flag(p, "dev", type=Path)
    _flag(p, "vocab", type=Path)
    _flag(p, "vocab_size", type=int, help="vocabulary size when building one from --train")
    _flag(p, "init_encoder", type=Path, help="encoder checkpoint written by `pretrain`")
    _flag(p, "head_kind", choices=[k.value for k in HeadKind])
    p.add_argument("--head", dest="head_kind", default=argparse.SUPPRESS,
                   choices=[k.value for k in HeadKind], help=argparse.SUPPRESS)
    _flag(p, "learning_rate", type=float)
    p.add_argument("--lr", dest="learning_rate", type=float, default=argparse.SUPPRESS,
                   help=argparse.SUPPRESS)
    _flag(p, "weight_decay", type=float)
    _flag(p, "train_batch_size", type=int)
    _flag(p, "eval_batch_size", type=int)
    _flag(p, "epochs", type=float)
    _flag(p, "max_steps", type=int)
    _flag(p, "val_check_interval", type=float)
    _flag(p, "dropout_rate", type=float)
    _flag(p, "dropout_samples", type=int)
    _flag(p, "grad_accumulation_steps", type=int)
    _flag(p, "head_num_heads", type=int)
    _flag(p, "head_init_std", type=float)
    _flag(p, "seed", type=int)
    _bool_flag(p, "freeze_encoder", "keep encoder weights fixed (default)")
    _bool_flag(p, "shuffle", "shuffle the training split every epoch (default)")
    _encoder_flags(p)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on one or more splits")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, nargs="+", type=Path)
    p.add_argument("--report-dir", required=True, type=Path)
    _flag(p, "batch_size", type=int)

    p = sub.add_parser("prompt", help="score a split by prompting a language model")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--report-dir", required=True, type=Path)
    _flag(p, "style", nargs="+", choices=[s.value for s in PromptStyle])
    _flag(p, "shots", nargs="+", type=int)
    _flag(p, "pool", type=Path, help="labeled split supplying few-shot examples")
    _flag(p, "selection", choices=["first", "random"])
    _flag(p, "seed", type=int)
    _flag(p, "backend", choices=["oracle-mock", "adversarial-mock", "uniform-mock", "http"])
    _flag(p, "endpoint")
    _flag(p, "model")
    _flag(p, "api_key_env")
    _flag(p, "cache_dir", type=Path)
    _flag(p, "max_in_flight", type=int)
    _flag(p, "timeout", type=float)
    _flag(p, "max_retries", type=int)
    _bool_flag(p, "echo", "the endpoint supports echoed prompt log-probabilities")

    p = sub.add_parser("report", help="(re)render results tables and figures")
    p.add_argument("runs", nargs="+", type=Path)
    _flag(p, "baseline")
    _flag(p, "column")
    _flag(p, "title")
    _flag(p, "out", type=Path)

    for action in sub.choices.values():
        action.add_argument("--config", type=Path, help="JSON file of settings")
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Effective settings: defaults, overridden by the config file, overridden by flags."""
    settings = dict(DEFAULTS[command])
    cfg_path = getattr(ns, "config", None)
    if cfg_path is not None:
        try:
            loaded = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {cfg_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config {cfg_path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(settings))
        if unknown:
            raise ConfigurationError(f"unknown {command} settings in {cfg_path}: {unknown}")
        settings.update(loaded)
    for key, value in vars(ns).items():
        if key in ("command", "config"):
            continue
        settings[key] = str(value) if isinstance(value, Path) else value
        if isinstance(value, list):
            settings[key] = [str(v) if isinstance(v, Path) else v for v in value]
    return settings


def _path(value) -> Optional[Path]:
    return None if value is None else Path(value)


def _corpus_texts(paths: Sequence) -> List[str]:
    texts = []
    for path in map(Path, paths):
        if path.suffix == ".jsonl":
            for inst in load_recam_jsonl(path):
                texts.append(" ".join([inst.article, inst.question, *inst.options]))
        else:
            texts += [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return texts


def cmd_synth(s: dict) -> int:
    out = Path(s["out"])
    name = s["name"] or out.stem
    split = make_synthetic_dataset(s["rule"], s["n"], s["seed"], article_len=s["article_len"],
                                   question_len=s["question_len"], name=name)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_recam_jsonl(split, out)
    print(f"wrote {len(split)} {s['rule']} instances to {out}")
    return 0


def cmd_build_vocab(s: dict) -> int:
    vocab = build_vocab(_corpus_texts(s["corpus"]), s["max_size"])
    Path(s["out"]).parent.mkdir(parents=True, exist_ok=True)
    vocab.save(s["out"])
    print(f"wrote vocabulary of {len(vocab)} tokens to {s['out']}")
    return 0


def _encoder_config(s: dict, vocab_size: int, freeze: bool = True) -> EncoderConfig:
    return EncoderConfig(vocab_size=vocab_size, freeze_encoder=freeze,
                         **{k: s[k] for k in ENCODER_KEYS})


def cmd_pretrain(s: dict) -> int:
    texts = _corpus_texts(s["corpus"])
    vocab = Vocabulary.load(s["vocab"]) if s.get("vocab") else build_vocab(texts, s["max_size"])
    cfg = _encoder_config(s, len(vocab), freeze=False)
    encoder = Encoder(cfg, RandomSource(s["seed"]).spawn(1))
    head = MLMHead(encoder)
    params = list(encoder.named_parameters().values()) + list(head.named_parameters().values())
    opt = AdamW(params, lr=s["learning_rate"], weight_decay=s["weight_decay"])
    rng = RandomSource(s["seed"]).spawn(3)
    docs = [ids for ids in (tokenize(t, vocab) for t in texts) if ids]
    if not docs:
        raise ConfigurationError("pretraining corpus has no tokens")
    bs = s["batch_size"]
    metrics = []
    for step in range(s["steps"]):
        start = (step * bs) % len(docs)
        batch = [docs[(start + i) % len(docs)] for i in range(min(bs, len(docs)))]
        loss = mlm_pretrain_step(batch, head, vocab, rng, opt)
        metrics.append({"step": step + 1, "split": "mlm", "loss": loss})
    ck = Checkpoint({"kind": "encoder", "encoder": cfg.to_json()}, list(vocab.tokens),
                    {f"encoder.{n}": p.data.copy() for n, p in encoder.named_parameters().items()},
                    metrics=metrics)
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ck, out)
    if s.get("report_dir"):
        rd = Path(s["report_dir"])
        R.write_config(rd, {"command": "pretrain", **s})
        with open(rd / R.METRICS_FILE, "w", encoding="utf-8") as fh:
            for m in metrics:
                fh.write(json.dumps(m, sort_keys=True) + "\n")
    last = metrics[-1]["loss"] if metrics else float("nan")
    print(f"pretrained {s['steps']} steps, final masked-LM loss {last:.4f}; wrote {out}")
    return 0


def cmd_train(s: dict) -> int:
    data = load_recam_jsonl(s["train"], name="train")
    dev = load_recam_jsonl(s["dev"], name="dev") if s.get("dev") else None
    init = load_checkpoint(s["init_encoder"]) if s.get("init_encoder") else None
    if s.get("vocab"):
        vocab = Vocabulary.load(s["vocab"])
    elif init is not None:
        vocab = Vocabulary(init.vocab)
    else:
        vocab = build_vocab(_corpus_texts([s["train"]]), s["vocab_size"])
    tcfg = TrainConfig(**{f.name: s[f.name] for f in fields(TrainConfig)})
    if init is not None:
        enc_cfg = EncoderConfig(**{**init.model_config["encoder"],
                                   "freeze_encoder": tcfg.freeze_encoder})
        s.update({k: getattr(enc_cfg, k) for k in ENCODER_KEYS})
    else:
        enc_cfg = _encoder_config(s, len(vocab), tcfg.freeze_encoder)
    model = MultipleChoiceModel(vocab, enc_cfg, tcfg.head_kind, seed=tcfg.seed,
                                dropout_rate=tcfg.dropout_rate,
                                dropout_samples=s["dropout_samples"],
                                head_num_heads=s["head_num_heads"], head_init_std=s["head_init_std"])
    if init is not None:
        arrays = {n: init.params[n] for n in model.named_parameters() if n.startswith("encoder.")}
        full = {n: p.data for n, p in model.named_parameters().items()}
        full.update(arrays)
        model.load_parameters(full)

    rd = Path(s["report_dir"])
    rd.mkdir(parents=True, exist_ok=True)
    vocab.save(rd / "vocab.json")
    R.write_config(rd, {"command": "train", **s, "model": model.config()})
    result = train(model, data, dev, tcfg, metrics_path=rd / R.METRICS_FILE)
    save_checkpoint(result.checkpoint, rd / "last.ckpt")
    if result.best is not None:
        save_checkpoint(result.best, rd / "best.ckpt")
    values = {"train": evaluate_accuracy(model, data, tcfg.eval_batch_size).accuracy}
    if dev is not None:
        values["dev"] = evaluate_accuracy(model, dev, tcfg.eval_batch_size).accuracy
    results = R.make_results([{"name": model.head_kind.value, "values": values}],
                             title="Accuracy after training")
    R.write_results(rd, results)
    print(R.render_table(results), end="")
    return 0


def cmd_eval(s: dict) -> int:
    ck = load_checkpoint(s["checkpoint"])
    if ck.model_config.get("kind") == "encoder":
        raise ConfigurationError(f"{s['checkpoint']} holds a pretrained encoder without a head")
    model = ck.build_model()
    values, losses = {}, {}
    for path in s["data"]:
        split = load_recam_jsonl(path)
        ev = evaluate_accuracy(model, split, s["batch_size"])
        values[split.name], losses[split.name] = ev.accuracy, ev.loss
    rd = Path(s["report_dir"])
    R.write_config(rd, {"command": "eval", **s, "head_kind": model.head_kind.value,
                        "model": ck.model_config, "train_config": ck.train_config})
    with open(rd / R.METRICS_FILE, "w", encoding="utf-8") as fh:
        for name, acc in values.items():
            fh.write(json.dumps({"split": name, "accuracy": acc, "loss": losses[name]},
                                sort_keys=True) + "\n")
    results = R.make_results([{"name": model.head_kind.value, "values": values}],
                             title="Evaluation accuracy")
    R.write_results(rd, results)
    print(R.render_table(results), end="")
    return 0


def _backend(s: dict, split: DatasetSplit):
    kind = s["backend"]
    if kind == "oracle-mock":
        backend = oracle_mock(list(split))
    elif kind == "adversarial-mock":
        backend = adversarial_mock(list(split))
    elif kind == "uniform-mock":
        backend = uniform_mock()
    else:
        limits = HttpLimits(max_in_flight=s["max_in_flight"], timeout=s["timeout"],
                            max_retries=s["max_retries"])
        return HttpScorer(s["endpoint"], s["model"], api_key_env=s["api_key_env"], limits=limits,
                          cache_dir=s["cache_dir"], supports_echo=s["echo"])
    if s.get("cache_dir"):
        backend = CachedBackend(backend, s["cache_dir"])
    return backend


def cmd_prompt(s: dict) -> int:
    split = load_recam_jsonl(s["data"])
    pool = load_recam_jsonl(s["pool"], name="pool") if s.get("pool") else None
    fewshot = FewShotConfig(0, pool, s["selection"], s["seed"])
    backend = _backend(s, split)
    rd = Path(s["report_dir"])
    R.write_config(rd, {"command": "prompt", **s, "backend_identity": backend.identity})
    rows, errors = [], 0
    with open(rd / R.METRICS_FILE, "w", encoding="utf-8") as metrics:
        for style in s["style"]:
            rep = run_prompt_eval(split, style, backend, fewshot, s["shots"],
                                  audit_path=rd / f"prompts-{style}.jsonl")
            rows.append({"name": style, "values": {f"k={k}": v for k, v in rep.accuracy.items()}})
            for k in rep.accuracy:
                metrics.write(json.dumps({"style": style, "k": k, "accuracy": rep.accuracy[k],
                                          "errors": rep.errors[k]}, sort_keys=True) + "\n")
                errors += sum(rep.errors[k].values())
    results = R.make_results(rows, title=f"Prompting accuracy ({backend.identity})")
    R.write_results(rd, results)
    print(R.render_table(results), end="")
    if errors:
        print(f"{errors} instance(s) failed; see the prompts-*.jsonl audit files", file=sys.stderr)
    return 0


def cmd_report(s: dict) -> int:
    runs = [Path(r) for r in s["runs"]]
    if len(runs) == 1 and s.get("out") is None and s.get("column") is None:
        results = R.load_results(runs[0])
        if s.get("baseline") is not None:
            results = R.make_results(results["rows"], results["columns"], s["baseline"],
                                     results.get("title", s["title"]))
        out = runs[0]
    else:
        if s.get("out") is None:
            raise ConfigurationError("combining several runs needs --out")
        results = R.combine_runs(runs, s.get("baseline"), s.get("column"), s["title"])
        out = Path(s["out"])
        R.write_config(out, {"command": "report", **s})
    R.write_results(out, results)
    print(R.render_table(results), end="")
    return 0


COMMANDS = {"synth": cmd_synth, "build-vocab": cmd_build_vocab, "pretrain": cmd_pretrain,
            "train": cmd_train, "eval": cmd_eval, "prompt": cmd_prompt, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = resolve(ns.command, ns)
        return COMMANDS[ns.command](settings)
    except (RecamError, OSError, KeyError) as exc:
        print(f"recam {ns.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
