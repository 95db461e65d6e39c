"""Perplexity / next-token accuracy, KV-cache memory arithmetic, reports."""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, InputError
from .model import Transformer
from .quant import QuantScheme


@dataclass
class EvalResult:
    method: str
    scheme: str
    corpus: str
    ppl: float
    acc: float
    tokens: int

    def __post_init__(self):
        if self.ppl < 1.0 - 1e-9:
            raise ContractError(f"perplexity {self.ppl} < 1")
        if not 0.0 <= self.acc <= 1.0:
            raise ContractError(f"accuracy {self.acc} outside [0, 1]")


def perplexity(model: Transformer, corpus_tokens, scheme: QuantScheme,
               method: str = "", corpus: str = "") -> EvalResult:
    """exp(mean NLL) over non-overlapping max_seq_len windows, 64-bit sums."""
    if isinstance(scheme, str):
        scheme = QuantScheme.parse(scheme)
    tokens = np.asarray(corpus_tokens, dtype=int)
    if tokens.size < 2:
        raise InputError("corpus must contain at least 2 tokens")
    win = model.cfg.max_seq_len
    nll = 0.0
    correct = 0
    count = 0
    for start in range(0, tokens.size - 1, win):
        chunk = tokens[start: start + win + 1]
        if chunk.size < 2:
            break
        inputs, targets = chunk[:-1], chunk[1:]
        logits = model.forward_train(inputs, scheme).data[0]
        ls = T._log_softmax_np(logits.astype(np.float64))
        idx = np.arange(targets.size)
        nll -= float(ls[idx, targets].sum())
        correct += int((logits.argmax(axis=-1) == targets).sum())
        count += targets.size
    return EvalResult(method=method, scheme=scheme.render(), corpus=corpus,
                      ppl=float(np.exp(nll / count)), acc=correct / count,
                      tokens=count)


@dataclass(frozen=True)
class ModelPreset:
    name: str
    n_layers: int
    dim: int


PRESETS = {
    "llama-7b": ModelPreset("llama-7b", 32, 4096),
    "llama-13b": ModelPreset("llama-13b", 40, 5120),
    "llama-30b": ModelPreset("llama-30b", 60, 6656),
}

_GIB = 2 ** 30


def kv_cache_memory(preset: ModelPreset, seq_len: int, bits: int,
                    count_kv_pair: bool = False) -> tuple[float, str]:
    """KV-cache bytes: n_layers * seq_len * dim * bits/8 (x2 when counting
    the K/V pair physically; the default matches the published table)."""
    if bits not in (4, 8, 16):
        raise ConfigError(f"unsupported bit-width {bits}, expected 4, 8 or 16")
    if seq_len < 1:
        raise ConfigError("seq_len must be >= 1")
    nbytes = preset.n_layers * seq_len * preset.dim * bits / 8.0
    if count_kv_pair:
        nbytes *= 2.0
    # display rounds half up (0.125 -> "0.13"), matching the published table
    hundredths = np.floor(nbytes / _GIB * 100.0 + 0.5) / 100.0
    return nbytes, f"{hundredths:.2f} GB"


def render_report(rows: list[EvalResult], fmt: str = "markdown") -> str:
    """Deterministic report; markdown bolds the best perplexity per scheme."""
    if not rows:
        raise InputError("no rows to render")
    rows = sorted(rows, key=lambda r: (r.method, r.scheme))
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "scheme", "corpus", "ppl", "acc", "tokens"])
        for r in rows:
            w.writerow([r.method, r.scheme, r.corpus,
                        f"{r.ppl:.6g}", f"{r.acc:.6g}", r.tokens])
        return buf.getvalue()
    if fmt == "markdown":
        best = {}
        for r in rows:
            if r.scheme not in best or r.ppl < best[r.scheme]:
                best[r.scheme] = r.ppl
        lines = ["| method | scheme | corpus | ppl | acc | tokens |",
                 "| --- | --- | --- | --- | --- | --- |"]
        for r in rows:
            ppl = f"{r.ppl:.6g}"
            if r.ppl == best[r.scheme]:
                ppl = f"**{ppl}**"
            lines.append(f"| {r.method} | {r.scheme} | {r.corpus} | {ppl} "
                         f"| {r.acc:.6g} | {r.tokens} |")
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}")
