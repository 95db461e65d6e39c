"""Batch command-line surface tying the pipeline together.

Commands: teacher-train, gen-data, ptq, qat, eval, kv-mem, report.
Exit codes: 0 success, 1 usage/configuration error, 2 data or numeric error.
Option precedence: built-in defaults < --config file < explicit flags.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import checkpoint as ckpt
from . import datagen, distill, evaluate
from .errors import (CapacityError, CheckpointError, ConfigError, ContractError,
                     InputError, NumericError)
from .model import (Transformer, ModelConfig, init_student_from_teacher,
                    inject_outlier_channels)
from .quant import QuantScheme, rtn_apply, smooth_rescale

# char-level tokenizer: printable ASCII 0x20..0x7E -> ids 0..94, EOS = 95.
VOCAB_SIZE = 96
EOS_ID = 95
_CHAR0 = 0x20


def tokenize(text: str) -> np.ndarray:
    """Map text to char ids; documents (blank-line separated) end with EOS."""
    out = []
    for doc in text.split("\n\n"):
        doc = doc.replace("\n", " ").replace("\t", " ")
        ids = [ord(ch) - _CHAR0 for ch in doc if _CHAR0 <= ord(ch) <= 0x7E]
        if ids:
            out.extend(ids)
            out.append(EOS_ID)
    if not out:
        raise InputError("corpus contains no tokenizable text")
    return np.asarray(out, dtype=int)


def detokenize(ids) -> str:
    return "".join("¶" if i == EOS_ID else chr(i + _CHAR0) for i in ids)


def _read_corpus(path: str) -> np.ndarray:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return tokenize(f.read())
    except OSError as e:
        raise InputError(f"cannot read corpus {path}: {e}") from e


def _load_config_file(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    out = {}
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line {line!r}, expected key=value")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _apply_config(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """Resolve defaults < config file < flags (flags parse with default=None)."""
    file_vals = _load_config_file(args.config) if getattr(args, "config", None) else {}
    known = set(defaults)
    unknown = set(file_vals) - known
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    for key, default in defaults.items():
        if getattr(args, key, None) is not None:
            continue
        if key in file_vals:
            caster = type(default) if default is not None else str
            if isinstance(default, bool):
                caster = lambda s: s.lower() in ("1", "true", "yes")
            setattr(args, key, caster(file_vals[key]))
        else:
            setattr(args, key, default)
    return args


def _strategy_from(args) -> datagen.GenStrategy:
    return datagen.GenStrategy(variant=args.strategy, temperature=args.temperature,
                               hybrid_k=args.hybrid_k,
                               top_k=args.top_k if args.top_k else None)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinyqat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--threads", type=int, default=None)

    tt = sub.add_parser("teacher-train", help="fit the FP toy model on a text corpus")
    tt.add_argument("--corpus", required=True)
    tt.add_argument("--out", required=True)
    tt.add_argument("--steps", type=int)
    tt.add_argument("--lr", type=float)
    tt.add_argument("--batch", type=int)
    tt.add_argument("--seq", type=int)
    tt.add_argument("--seed", type=int)
    tt.add_argument("--dim", type=int)
    tt.add_argument("--n-layers", dest="n_layers", type=int)
    tt.add_argument("--n-heads", dest="n_heads", type=int)
    tt.add_argument("--ffn-hidden", dest="ffn_hidden", type=int)
    tt.add_argument("--max-seq-len", dest="max_seq_len", type=int)
    tt.add_argument("--outlier-channels", dest="outlier_channels", type=int,
                    help="fold scale into this many channels per site after "
                         "training (emulates large-model outlier structure)")
    tt.add_argument("--outlier-factor", dest="outlier_factor", type=float)
    common(tt)

    gd = sub.add_parser("gen-data", help="generate a synthetic dataset from a teacher")
    gd.add_argument("--ckpt", required=True)
    gd.add_argument("--out", required=True)
    gd.add_argument("--count", type=int)
    gd.add_argument("--seed", type=int, required=True)
    gd.add_argument("--strategy", choices=("top1", "sampled", "hybrid"))
    gd.add_argument("--temperature", type=float)
    gd.add_argument("--hybrid-k", dest="hybrid_k", type=int)
    gd.add_argument("--top-k", dest="top_k", type=int)
    gd.add_argument("--max-len", dest="max_len", type=int)
    common(gd)

    pq = sub.add_parser("ptq", help="round-to-nearest post-training quantization")
    pq.add_argument("--ckpt", required=True)
    pq.add_argument("--scheme", required=True)
    pq.add_argument("--out", required=True)
    pq.add_argument("--smooth", action="store_true", default=None)
    pq.add_argument("--smooth-alpha", dest="smooth_alpha", type=float)
    pq.add_argument("--calib", help="corpus for activation stats (with --smooth)")
    common(pq)

    qa = sub.add_parser("qat", help="quantization-aware distillation training")
    qa.add_argument("--teacher", required=True)
    qa.add_argument("--data", required=True)
    qa.add_argument("--scheme", required=True)
    qa.add_argument("--out", required=True)
    qa.add_argument("--seed", type=int, required=True)
    qa.add_argument("--steps", type=int)
    qa.add_argument("--lr", type=float)
    qa.add_argument("--loss-variant", dest="loss_variant",
                    choices=distill.LOSS_VARIANTS)
    qa.add_argument("--metrics", help="CSV metrics log path")
    common(qa)

    ev = sub.add_parser("eval", help="perplexity / next-token accuracy")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--scheme")
    ev.add_argument("--method")
    ev.add_argument("--out", help="append a CSV row to this file")
    common(ev)

    km = sub.add_parser("kv-mem", help="KV-cache memory for a model preset")
    km.add_argument("--preset", required=True, choices=sorted(evaluate.PRESETS))
    km.add_argument("--seq", required=True, type=int)
    km.add_argument("--bits", required=True, type=int)
    km.add_argument("--pair", action="store_true",
                    help="count both K and V (physical figure)")

    rp = sub.add_parser("report", help="render an evaluation CSV")
    rp.add_argument("--input", required=True)
    rp.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    return p


def _cmd_teacher_train(args) -> int:
    _apply_config(args, dict(steps=2000, lr=1e-3, batch=4, seq=128, seed=0,
                             dim=128, n_layers=4, n_heads=4, ffn_hidden=344,
                             max_seq_len=256, outlier_channels=0,
                             outlier_factor=10.0, threads=None))
    tokens = _read_corpus(args.corpus)
    cfg = ModelConfig(vocab_size=VOCAB_SIZE, dim=args.dim, n_layers=args.n_layers,
                      n_heads=args.n_heads, ffn_hidden=args.ffn_hidden,
                      max_seq_len=args.max_seq_len)
    model = Transformer(cfg, seed=args.seed)
    losses = distill.train_lm(model, tokens, steps=args.steps, lr=args.lr,
                              batch=args.batch, seq_len=args.seq, seed=args.seed)
    if args.outlier_channels:
        inject_outlier_channels(model, n_channels=args.outlier_channels,
                                factor=args.outlier_factor, seed=args.seed)
    ckpt.save_checkpoint(model, args.out)
    print(f"trained {args.steps} steps, final loss {losses[-1]:.4f}, saved {args.out}")
    return 0


def _cmd_gen_data(args) -> int:
    _apply_config(args, dict(count=2000, strategy="hybrid", temperature=1.0,
                             hybrid_k=4, top_k=0, max_len=None, threads=None))
    teacher = ckpt.load_checkpoint(args.ckpt)
    workers = args.threads or 1
    datagen.generate_corpus(teacher, _strategy_from(args), count=args.count,
                            master_seed=args.seed, max_len=args.max_len,
                            path=args.out, workers=workers, eos_id=EOS_ID)
    print(f"wrote {args.count} records to {args.out}")
    return 0


def _cmd_ptq(args) -> int:
    _apply_config(args, dict(smooth=False, smooth_alpha=0.5, calib=None, threads=None))
    model = ckpt.load_checkpoint(args.ckpt)
    scheme = QuantScheme.parse(args.scheme)
    if args.smooth:
        if not args.calib:
            raise ConfigError("--smooth requires --calib for activation statistics")
        _calibrate_smoothing(model, _read_corpus(args.calib), args.smooth_alpha)
    out = rtn_apply(model, scheme)
    ckpt.save_checkpoint(out, args.out)
    print(f"applied RTN {scheme.render()}, saved {args.out}")
    return 0


def _calibrate_smoothing(model: Transformer, tokens: np.ndarray, a: float) -> None:
    """Collect per-channel |activation| maxima on a short prefix, then rescale
    every linear weight and store the division vector for inference."""
    win = min(model.cfg.max_seq_len, 128)
    sample = tokens[: 4 * win]
    stats = {name: np.zeros(model.params[name].value.data.shape[1])
             for name in model.linear_sites()}
    identity = QuantScheme.identity()
    orig_linear = model._linear

    def spy(site, x, scheme):
        stats[site] = np.maximum(stats[site],
                                 np.abs(x.data).reshape(-1, x.data.shape[-1]).max(axis=0))
        return orig_linear(site, x, scheme)

    model._linear = spy
    try:
        for start in range(0, sample.size - 1, win):
            chunk = sample[start: start + win]
            if chunk.size >= 2:
                model.forward_train(chunk, identity)
    finally:
        del model._linear
    for name in model.linear_sites():
        p = model.params[name]
        scaled, params = smooth_rescale(p.value.data, stats[name], a)
        p.value.data[...] = scaled
        model.smoothing[name] = params.s


def _cmd_qat(args) -> int:
    _apply_config(args, dict(steps=3000, lr=2e-5, loss_variant="logits",
                             metrics=None, threads=None))
    teacher = ckpt.load_checkpoint(args.teacher)
    vocab, records = datagen.read_dataset(args.data)
    if vocab != teacher.cfg.vocab_size:
        raise InputError(f"dataset vocab {vocab} != model vocab {teacher.cfg.vocab_size}")
    student = init_student_from_teacher(teacher)
    cfg = distill.TrainConfig(lr=args.lr, total_steps=args.steps, seed=args.seed,
                              loss_variant=args.loss_variant)
    rows = distill.train_qat(student, teacher, records, args.scheme, cfg,
                             metrics_path=args.metrics)
    ckpt.save_checkpoint(student, args.out)
    print(f"QAT {args.scheme} for {args.steps} steps, final loss "
          f"{rows[-1].loss:.4f}, saved {args.out}")
    return 0


def _cmd_eval(args) -> int:
    _apply_config(args, dict(scheme=None, method="model", out=None, threads=None))
    model = ckpt.load_checkpoint(args.ckpt)
    scheme = args.scheme or (model.trained_scheme if model.trained_scheme != "none"
                             else "16-16-16")
    result = evaluate.perplexity(model, _read_corpus(args.corpus),
                                 QuantScheme.parse(scheme),
                                 method=args.method, corpus=args.corpus)
    line = (f"{result.method},{result.scheme},{result.corpus},"
            f"{result.ppl:.6g},{result.acc:.6g},{result.tokens}")
    if args.out:
        import os
        header = not os.path.exists(args.out)
        with open(args.out, "a", encoding="utf-8") as f:
            if header:
                f.write("method,scheme,corpus,ppl,acc,tokens\n")
            f.write(line + "\n")
    print(line)
    return 0


def _cmd_kv_mem(args) -> int:
    _, display = evaluate.kv_cache_memory(evaluate.PRESETS[args.preset],
                                          args.seq, args.bits,
                                          count_kv_pair=bool(args.pair))
    print(display)
    return 0


def _cmd_report(args) -> int:
    import csv as _csv
    try:
        with open(args.input, "r", encoding="utf-8") as f:
            reader = _csv.DictReader(f)
            rows = [evaluate.EvalResult(r["method"], r["scheme"], r["corpus"],
                                        float(r["ppl"]), float(r["acc"]),
                                        int(r["tokens"]))
                    for r in reader]
    except OSError as e:
        raise InputError(f"cannot read report input {args.input}: {e}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"bad report row in {args.input}: {e}") from e
    sys.stdout.write(evaluate.render_report(rows, args.format))
    return 0


_COMMANDS = {
    "teacher-train": _cmd_teacher_train,
    "gen-data": _cmd_gen_data,
    "ptq": _cmd_ptq,
    "qat": _cmd_qat,
    "eval": _cmd_eval,
    "kv-mem": _cmd_kv_mem,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (InputError, NumericError, CheckpointError, CapacityError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
