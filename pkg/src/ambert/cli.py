"""``ambert`` command line: vocabularies, tokenization, pre-training, fine-tuning, evaluation, analysis.

Exit codes: 0 success, 1 usage error, 2 data error (including operations the
checkpoint's architecture cannot perform), 3 numeric failure. Errors are
printed to stderr as one JSON object on a single line.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import shutil
import sys
from pathlib import Path

import numpy as np

import ambert
from ambert import analysis, data, inference
from ambert import checkpoint as ckpt_io
from ambert import model as M
from ambert import nn
from ambert.config import VARIANTS, FineTuneConfig, RunConfig
from ambert.errors import AmbertError, DataError, ModeError, NumericError, UsageError
from ambert.finetune import finetune_loop
from ambert.params import ModelParams
from ambert.pretrain import PretrainState, pretrain_loop
from ambert.tokenizer import Tokenizer
from ambert.vocab import (LexiconCriteria, build_fine_vocab, build_phrase_lexicon, count_ngrams, load_vocab,
                          save_vocab)

FINE_VOCAB = "fine.vocab"
COARSE_VOCAB = "coarse.vocab"

# what --desk changes relative to the base configuration
DESK = dict(num_layers=2, hidden_size=64, attention_heads=4, attention_head_size=16, ffn_inner_hidden_size=256,
            max_seq_length=128, max_coarse_length=128, warmup_steps=100, peak_learning_rate=1e-3, batch_size=32,
            max_steps=2000, log_interval=100, checkpoint_interval=500)


def sub_seed(seed: int, name: str) -> int:
    """Independent, reproducible seed for one named component."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode()).digest()[:4], "little") & 0x7FFFFFFF


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _existing(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"path does not exist: {path}")
    return p


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _repro(path, seed, config_digest, corpus_paths, command, **extra):
    stanza = {
        "version": ambert.__version__,
        "seed": seed,
        "config_hash": config_digest,
        "corpus_hash": data.file_digest(*corpus_paths) if corpus_paths else None,
        "command": command,
        **extra,
    }
    _write_json(path, stanza)


def _digest_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _tokenizer_from(ckpt_dir, meta) -> Tokenizer:
    d = Path(ckpt_dir)
    return Tokenizer(load_vocab(d / FINE_VOCAB, "fine"), load_vocab(d / COARSE_VOCAB, "coarse"),
                     meta.get("mode", "subword"))


def _save_checkpoint(ck: ckpt_io.Checkpoint, target: Path, vocab_dir: Path):
    """Write next to ``target`` and swap in, so a crash never leaves a half-written checkpoint."""
    tmp = target.with_name(target.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    ckpt_io.save(ck, tmp)
    for name in (FINE_VOCAB, COARSE_VOCAB):
        shutil.copyfile(vocab_dir / name, tmp / name)
    old = target.with_name(target.name + ".old")
    if target.exists():
        target.rename(old)
    tmp.rename(target)
    if old.exists():
        shutil.rmtree(old)


# -- build-vocab ----------------------------------------------------------------


def cmd_build_vocab(args, out):
    corpus = _existing(args.corpus)
    raw = data.read_lines(corpus)
    if args.granularity == "fine":
        size = args.size or (21_128 if args.mode == "char" else 30_522)
        min_freq = 2 if args.min_freq is None else args.min_freq
        vocab = build_fine_vocab(raw, args.mode, size, min_freq)
        settings = {"granularity": "fine", "mode": args.mode, "size": size, "min_freq": min_freq}
    else:
        crit = LexiconCriteria(16 if args.min_freq is None else args.min_freq, args.min_dependence, args.max_order)
        table = count_ngrams(raw, "char" if args.mode == "char" else "word", crit.max_ngram_order, args.shards)
        vocab = build_phrase_lexicon(table, crit)
        settings = {"granularity": "coarse", "mode": args.mode, **dataclasses.asdict(crit)}
        if table.rejected_lines:
            out(json.dumps({"rejected_lines": table.rejected_lines}))
    dest = Path(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    save_vocab(vocab, dest)
    _repro(dest.with_name(dest.name + ".repro.json"), args.seed, _digest_of(settings), [corpus], "build-vocab",
           settings=settings)
    out(json.dumps({"entries": len(vocab), "path": str(dest)}))


# -- tokenize -------------------------------------------------------------------


def cmd_tokenize(args, out):
    tok = Tokenizer(load_vocab(_existing(args.fine_vocab), "fine"),
                    load_vocab(_existing(args.coarse_vocab), "coarse"), args.mode)
    if args.input:
        lines, bad = data.decode_lines(data.read_lines(_existing(args.input)))
        if bad:
            raise DataError(f"{args.input}: {bad} lines are not valid UTF-8")
    else:
        lines = [ln.rstrip("\n") for ln in sys.stdin]
    for line in lines:
        fine, coarse, align = tok.segment(line)
        if args.json:
            out(json.dumps({"text": line, "fine": fine, "coarse": coarse, "alignment": [list(a) for a in align]},
                           ensure_ascii=False))
        else:
            out(" ".join(fine))
            out(" | ".join(coarse))
            out(" ".join(f"{s}:{e}" for s, e in align))


# -- pretrain -------------------------------------------------------------------


def _run_config(args, saved: str | None = None) -> RunConfig:
    if args.config:
        base = RunConfig.load(_existing(args.config))
    elif saved is not None:
        base = RunConfig.parse(saved)
    else:
        base = RunConfig.base(args.language)
    values = dataclasses.asdict(base)
    if args.desk:
        values.update(DESK)
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.variant:
        overrides["variant"] = args.variant
    if args.steps is not None:
        overrides["max_steps"] = str(args.steps)
    if args.batch_size is not None:
        overrides["batch_size"] = str(args.batch_size)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    # re-parse so overrides are type-checked and unknown keys rejected; later lines win
    text = RunConfig(**values).dumps() + "".join(f"{k} = {v}\n" for k, v in overrides.items())
    return RunConfig.parse(text)


def cmd_pretrain(args, out):
    corpus = _existing(args.corpus)
    resume = None
    if args.resume:
        resume = ckpt_io.load(_existing(args.resume))
        vocab_dir = Path(args.resume)
    run = _run_config(args, resume.meta.get("run_config") if resume else None)
    if not args.resume:
        if not (args.fine_vocab and args.coarse_vocab):
            raise UsageError("pretrain needs --fine-vocab and --coarse-vocab (or --resume)")
        vocab_dir = None
    fine = load_vocab(vocab_dir / FINE_VOCAB if vocab_dir else _existing(args.fine_vocab), "fine")
    coarse = load_vocab(vocab_dir / COARSE_VOCAB if vocab_dir else _existing(args.coarse_vocab), "coarse")
    tok = Tokenizer(fine, coarse, run.fine_mode)

    texts, bad = data.decode_lines(data.read_lines(corpus))
    texts = [t for t in texts if t.strip()]
    if bad:
        out(json.dumps({"rejected_lines": bad}))
    if not texts:
        raise DataError(f"{corpus}: no usable lines")
    corpus_hash = data.file_digest(corpus)
    if run.nsp:
        pairs, nsp_labels = data.nsp_examples(texts, tok, sub_seed(run.seed, "nsp"), run.max_seq_length,
                                              run.max_coarse_length)
    else:
        pairs = [tok.encode(t, None, run.max_seq_length, run.max_coarse_length) for t in texts]
        nsp_labels = None

    cfg = run.model_config(len(fine), len(coarse))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab_stage = out_dir / "vocab"
    vocab_stage.mkdir(exist_ok=True)
    save_vocab(fine, vocab_stage / FINE_VOCAB)
    save_vocab(coarse, vocab_stage / COARSE_VOCAB)
    (out_dir / "run.cfg").write_text(run.dumps(), encoding="utf-8")

    if resume is not None:
        if resume.meta.get("corpus_hash") != corpus_hash:
            raise DataError("resume corpus differs from the one the checkpoint was trained on")
        if resume.config != cfg:
            raise DataError("resume configuration differs from the checkpoint's model configuration")
        if resume.optimizer is None:
            raise DataError(f"{args.resume}: checkpoint has no optimizer state to resume from")
        state = PretrainState(resume.params, resume.optimizer, resume.step, resume.rng["seed"], resume.history)
        optimizer = resume.optimizer
    else:
        optimizer = nn.Adam(lr=run.peak_learning_rate, beta1=run.adam_beta1, beta2=run.adam_beta2,
                            eps=run.adam_epsilon, weight_decay=run.weight_decay, warmup=run.warmup_steps,
                            max_steps=run.max_steps)
        params = M.init_params(cfg, sub_seed(run.seed, "init"))
        state = PretrainState(params, optimizer, 0, sub_seed(run.seed, "mask"))

    log_path = out_dir / "train.log"
    log_file = log_path.open("a", encoding="utf-8")

    def log(line):
        log_file.write(line + "\n")
        log_file.flush()
        out(line)

    meta = {"mode": run.fine_mode, "corpus_hash": corpus_hash, "run_config": run.dumps()}
    try:
        for st in pretrain_loop(pairs, cfg, optimizer, run.max_steps, run.batch_size, state.seed, run.mask_rate,
                                state=state, log_interval=run.log_interval,
                                checkpoint_interval=run.checkpoint_interval, nsp_labels=nsp_labels, log=log):
            ck = ckpt_io.Checkpoint(cfg, st.params, st.step, st.optimizer, None, st.rng_state(), st.history, meta)
            _save_checkpoint(ck, out_dir / "checkpoint", vocab_stage)
    finally:
        log_file.close()
    _repro(out_dir / "repro.json", run.seed, run.digest(), [corpus], "pretrain",
           sub_seeds={k: sub_seed(run.seed, k) for k in ("init", "mask", "nsp")})
    out(json.dumps({"checkpoint": str(out_dir / "checkpoint"), "step": state.step}))


# -- finetune / eval / select-encoder ------------------------------------------


def _read_task(path, tok, task, num_labels, max_len):
    if task == "classification":
        return data.read_classification(path, tok, num_labels, max_len)
    return data.read_span(path, tok, max_len)


def cmd_finetune(args, out):
    ck_dir = _existing(args.checkpoint)
    train_path, dev_path = _existing(args.train), _existing(args.dev)
    ck = ckpt_io.load(ck_dir)
    tok = _tokenizer_from(ck_dir, ck.meta)
    seed = sub_seed(args.seed, "finetune")
    preset = FineTuneConfig.race if args.preset == "race" else FineTuneConfig
    kw = dict(task=args.task, num_labels=args.num_labels, seed=seed, max_length=args.max_length)
    for field_name, value in (("reg_lambda", args.reg_lambda), ("epochs", args.epochs),
                              ("learning_rate", args.lr), ("batch_size", args.batch_size)):
        if value is not None:
            kw[field_name] = value
    ft = preset(**kw)
    max_len = min(ft.max_length, ck.config.max_positions)
    train = _read_task(train_path, tok, ft.task, ft.num_labels, max_len)
    dev = _read_task(dev_path, tok, ft.task, ft.num_labels, max_len)
    if not train:
        raise DataError(f"{train_path}: no examples")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "finetune.log").open("w", encoding="utf-8") as fh:
        def log(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        params, heads, metrics, _ = finetune_loop(train, dev, ck.params, ck.config, ft, log)
    meta = dict(ck.meta, task=ft.task, num_labels=ft.num_labels, finetune=json.loads(ft.to_json()))
    result = ckpt_io.Checkpoint(ck.config, params, ck.step, None, heads, ck.rng, [], meta)
    _save_checkpoint(result, out_dir / "checkpoint", ck_dir)
    _write_json(out_dir / "metrics.json", metrics)
    _repro(out_dir / "repro.json", args.seed, _digest_of(json.loads(ft.to_json())), [train_path, dev_path],
           "finetune", base_checkpoint=str(ck_dir))
    out(json.dumps(metrics, sort_keys=True))


def _load_for_inference(ck_dir, encoder, task_flag):
    """Validate the encoder choice against the manifest before reading any task data."""
    manifest = ckpt_io.read_manifest(ck_dir)
    meta = manifest.get("meta", {})
    task = task_flag or meta.get("task", "classification")
    ck = ckpt_io.load(ck_dir)
    heads = ck.heads if ck.heads is not None else ModelParams()
    mode = inference.check_mode(ck.config, heads, task, encoder)
    return ck, heads, task, mode


def _check_metric(task, metric):
    allowed = ("acc",) if task == "classification" else ("em", "f1")
    if metric not in allowed:
        raise UsageError(f"metric {metric!r} does not apply to {task} tasks (use {' or '.join(allowed)})")


def cmd_eval(args, out):
    ck_dir = _existing(args.checkpoint)
    data_path = _existing(args.data)
    ck, heads, task, mode = _load_for_inference(ck_dir, args.encoder, args.task)
    metric = args.metric or ("acc" if task == "classification" else "f1")
    _check_metric(task, metric)
    tok = _tokenizer_from(ck_dir, ck.meta)
    examples = _read_task(data_path, tok, task, ck.meta.get("num_labels", 2), ck.config.max_positions)
    if not examples:
        raise DataError(f"{data_path}: no examples")
    res = inference.evaluate(ck.params, ck.config, heads, examples, task, mode)
    result = {"metric": metric, "value": res[metric], "encoder": mode, "n": res["n"]}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "metrics.json", result)
    _repro(out_dir / "repro.json", args.seed, _digest_of({"encoder": mode, "metric": metric, "task": task}),
           [data_path], "eval", checkpoint=str(ck_dir))
    out(json.dumps(result, sort_keys=True))


def cmd_select_encoder(args, out):
    ck_dir = _existing(args.checkpoint)
    dev_path = _existing(args.dev)
    ck, heads, task, _ = _load_for_inference(ck_dir, "both", args.task)
    metric = args.metric or ("acc" if task == "classification" else "f1")
    _check_metric(task, metric)
    tok = _tokenizer_from(ck_dir, ck.meta)
    dev = _read_task(dev_path, tok, task, ck.meta.get("num_labels", 2), ck.config.max_positions)
    if not dev:
        raise DataError(f"{dev_path}: no examples")
    choice = inference.select_encoder(ck.params, ck.config, heads, dev, metric, task)
    result = {"encoder": choice, "metric": metric, "task": task}
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(out_dir / "selection.json", result)
        _repro(out_dir / "repro.json", args.seed, _digest_of(result), [dev_path], "select-encoder",
               checkpoint=str(ck_dir))
    out(json.dumps(result, sort_keys=True))


# -- analyze --------------------------------------------------------------------


def cmd_analyze(args, out):
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    if args.what == "rate":
        corpus = _existing(args.corpus)
        tok = Tokenizer(load_vocab(_existing(args.fine_vocab), "fine"),
                        load_vocab(_existing(args.coarse_vocab), "coarse"), args.mode)
        texts, _ = data.decode_lines(data.read_lines(corpus))
        result = {"coarse_rate": analysis.coarse_rate([t for t in texts if t.strip()], tok)}
        inputs = [corpus]
    else:
        ck_dir = _existing(args.checkpoint)
        ck = ckpt_io.load(ck_dir)
        tok = _tokenizer_from(ck_dir, ck.meta)
        if args.what == "attention":
            if args.text is None:
                raise UsageError("analyze attention needs --text")
            pair = tok.encode(args.text, None, ck.config.max_positions, ck.config.max_positions)
            mat, labels = analysis.attention_map(ck.params, ck.config, pair, args.layer, args.head, args.stream, tok)
            grid = analysis.format_grid(mat, labels)
            out(grid.rstrip("\n"))
            if out_dir:
                (out_dir / "attention.tsv").write_text(grid, encoding="utf-8")
                _repro(out_dir / "repro.json", args.seed, _digest_of(vars_of(args)), [], "analyze attention")
            return
        data_path = _existing(args.data)
        texts, _ = data.decode_lines(data.read_lines(data_path))
        pairs = [tok.encode(t, None, ck.config.max_positions, ck.config.max_positions) for t in texts if t.strip()]
        result = analysis.cls_distance(ck.params, ck.config, pairs)
        inputs = [data_path]
    out(json.dumps(result, sort_keys=True))
    if out_dir:
        _write_json(out_dir / f"{args.what}.json", result)
        _repro(out_dir / "repro.json", args.seed, _digest_of(vars_of(args)), inputs, f"analyze {args.what}")


def vars_of(args):
    return {k: v for k, v in vars(args).items() if k != "func" and not callable(v)}


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ambert", description="Dual-granularity masked language model toolkit.")
    p.add_argument("--version", action="version", version=f"ambert {ambert.__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("build-vocab", help="build a fine vocabulary or a coarse phrase lexicon")
    s.add_argument("--corpus", required=True)
    s.add_argument("--granularity", choices=("fine", "coarse"), required=True)
    s.add_argument("--out", required=True, help="vocabulary TSV to write")
    s.add_argument("--mode", choices=("subword", "char"), default="subword")
    s.add_argument("--size", type=int, help="fine vocabulary size including specials")
    s.add_argument("--min-freq", type=int, help="minimum count (fine default 2, coarse default 16)")
    s.add_argument("--min-dependence", type=float, default=0.4)
    s.add_argument("--max-order", type=int, default=4)
    s.add_argument("--shards", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("tokenize", help="print fine tokens, coarse tokens and alignment per input line")
    s.add_argument("--fine-vocab", required=True)
    s.add_argument("--coarse-vocab", required=True)
    s.add_argument("--mode", choices=("subword", "char"), default="subword")
    s.add_argument("--input", help="text file (default: stdin)")
    s.add_argument("--json", action="store_true", help="one JSON object per input line")
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("pretrain", help="masked-LM pre-training")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fine-vocab")
    s.add_argument("--coarse-vocab")
    s.add_argument("--config", help="key = value run configuration")
    s.add_argument("--language", choices=("en", "zh"), default="en")
    s.add_argument("--desk", action="store_true", help="small model and budget for a single CPU")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    s.add_argument("--resume", help="checkpoint directory to continue from")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune a pre-trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--dev", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--task", choices=("classification", "span"), default="classification")
    s.add_argument("--num-labels", type=int, default=2)
    s.add_argument("--lambda", dest="reg_lambda", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--max-length", type=int, default=512)
    s.add_argument("--preset", choices=("default", "race"), default="default")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="score a fine-tuned checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--encoder", choices=("both", "fine", "coarse"), default="both")
    s.add_argument("--metric", choices=("acc", "em", "f1"))
    s.add_argument("--task", choices=("classification", "span"))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("select-encoder", help="choose the single encoder to keep from dev scores")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dev", required=True)
    s.add_argument("--out")
    s.add_argument("--metric", choices=("acc", "em", "f1"))
    s.add_argument("--task", choices=("classification", "span"))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_select_encoder)

    s = sub.add_parser("analyze", help="attention grids, [CLS] distances, coarse rate")
    s.add_argument("what", choices=("attention", "distance", "rate"))
    s.add_argument("--checkpoint")
    s.add_argument("--text")
    s.add_argument("--data", help="text lines for distance")
    s.add_argument("--layer", type=int, default=0)
    s.add_argument("--head", type=int, default=0)
    s.add_argument("--stream", choices=("fine", "coarse"), default="fine")
    s.add_argument("--corpus")
    s.add_argument("--fine-vocab")
    s.add_argument("--coarse-vocab")
    s.add_argument("--mode", choices=("subword", "char"), default="subword")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_analyze)
    return p


def _kind(exc: AmbertError) -> str:
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, NumericError):
        return "numeric"
    if isinstance(exc, ModeError):
        return "mode"
    return "data"


def main(argv=None, out=None) -> int:
    out = out or print
    try:
        args = build_parser().parse_args(argv)
        if args.command == "analyze" and args.what != "rate" and not args.checkpoint:
            raise UsageError(f"analyze {args.what} needs --checkpoint")
        if args.command == "analyze" and args.what == "rate":
            for flag in ("corpus", "fine_vocab", "coarse_vocab"):
                if getattr(args, flag) is None:
                    raise UsageError(f"analyze rate needs --{flag.replace('_', '-')}")
        with np.errstate(over="ignore", under="ignore"):
            args.func(args, out)
        return 0
    except AmbertError as exc:
        err = {"error": _kind(exc), "code": exc.exit_code, "message": str(exc).replace("\n", " ")}
    except OSError as exc:
        err = {"error": "data", "code": DataError.exit_code, "message": str(exc).replace("\n", " ")}
    except FloatingPointError as exc:
        err = {"error": "numeric", "code": NumericError.exit_code, "message": str(exc)}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return err["code"]


if __name__ == "__main__":
    sys.exit(main())
