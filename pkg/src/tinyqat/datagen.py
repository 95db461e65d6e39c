"""Teacher-driven synthetic corpus generation via next-token decoding.

Three sampling strategies: top-1, full-distribution sampling at a
temperature, and a hybrid that decodes the first k tokens greedily and
samples the rest. Everything is deterministic given (teacher, strategy,
seed); per-record seeds come from a splitmix64-style mix so corpora are
byte-identical regardless of worker count.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError, InputError
from .tensor import _softmax_np

_MASK64 = (1 << 64) - 1

# splitmix64 constants (Steele et al.); fixed so corpora are portable.
_SM_GAMMA = 0x9E3779B97F4B7C15
_SM_M1 = 0xBF58476D1CE4E5B9
_SM_M2 = 0x94D049BB133111EB


def _sm_mix(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _SM_M1) & _MASK64
    z = ((z ^ (z >> 27)) * _SM_M2) & _MASK64
    return z ^ (z >> 31)


def mix_seed(master_seed: int, index: int) -> int:
    """Derive the per-record seed: splitmix64(master*gamma) xor-mixed with index."""
    a = _sm_mix((master_seed * _SM_GAMMA) & _MASK64)
    return _sm_mix(a ^ _sm_mix((index + 1) * _SM_GAMMA))


class SplitMix64:
    """Tiny deterministic PRNG stream (splitmix64)."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _SM_GAMMA) & _MASK64
        return _sm_mix(self.state)

    def next_double(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def randint(self, n: int) -> int:
        return self.next_u64() % n


@dataclass(frozen=True)
class GenStrategy:
    """Next-token policy: "top1" | "sampled" | "hybrid"."""

    variant: str = "hybrid"
    temperature: float = 1.0
    hybrid_k: int = 4
    top_k: int | None = None  # optional truncation, off by default

    def __post_init__(self):
        if self.variant not in ("top1", "sampled", "hybrid"):
            raise ConfigError(f"unknown strategy {self.variant!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.hybrid_k < 1:
            raise ConfigError("hybrid prefix length must be >= 1")


@dataclass
class GenRecord:
    tokens: list[int]
    termination: str  # "eos" | "maxlen"


def _sample_index(probs: np.ndarray, rng: SplitMix64) -> int:
    cdf = np.cumsum(probs)
    u = rng.next_double() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), probs.size - 1))


def generate_sequence(teacher, strategy: GenStrategy, seed: int,
                      max_len: int | None = None, eos_id: int | None = None) -> GenRecord:
    """One record: random start token, iterative next-token decode, EOS/MaxLen stop."""
    vocab = teacher.vocab_size
    if max_len is None:
        max_len = teacher.max_seq_len
    if not 1 <= max_len <= teacher.max_seq_len:
        raise ContractError(
            f"max_len {max_len} outside [1, {teacher.max_seq_len}]")
    if eos_id is None:
        eos_id = vocab - 1
    sampleable = [i for i in range(vocab) if i != eos_id]
    if not sampleable:
        raise ConfigError("vocabulary has no sampleable tokens")

    rng = SplitMix64(seed)
    start = sampleable[rng.randint(len(sampleable))]
    tokens = [start]
    session = teacher.decode_session()
    termination = "maxlen"
    while len(tokens) < max_len:
        logits = np.asarray(session.step(tokens[-1]), dtype=np.float64)
        nxt = _next_token(logits, strategy, len(tokens) - 1, rng)
        tokens.append(nxt)
        if nxt == eos_id:
            termination = "eos"
            break
    return GenRecord(tokens=tokens, termination=termination)


# -- dataset binary format ---------------------------------------------------
# little-endian: magic "LQDG", version u32=1, vocab_size u32, count u64;
# per record: length u32, then that many u32 token ids.

_MAGIC = b"LQDG"
_VERSION = 1


def write_dataset(path: str, vocab_size: int, records: list[list[int]]) -> None:
    try:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<IIQ", _VERSION, vocab_size, len(records)))
            for rec in records:
                f.write(struct.pack("<I", len(rec)))
                f.write(np.asarray(rec, dtype="<u4").tobytes())
    except OSError as e:
        raise InputError(f"cannot write dataset {path}: {e}") from e


def read_dataset(path: str) -> tuple[int, list[list[int]]]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise InputError(f"cannot read dataset {path}: {e}") from e
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"bad dataset magic in {path}")
    version, vocab, count = struct.unpack_from("<IIQ", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"dataset version {version}, loader supports {_VERSION}")
    off = 20
    records = []
    for _ in range(count):
        if off + 4 > len(raw):
            raise CheckpointError(f"truncated dataset {path}")
        (length,) = struct.unpack_from("<I", raw, off)
        off += 4
        end = off + 4 * length
        if end > len(raw):
            raise CheckpointError(f"truncated dataset {path}")
        records.append(np.frombuffer(raw[off:end], dtype="<u4").astype(int).tolist())
        off = end
    return vocab, records


_CHUNK = 64  # fixed batching unit so output is independent of worker count


def _next_token(logits: np.ndarray, strategy: GenStrategy, n_generated: int,
                rng: SplitMix64) -> int:
    greedy = (strategy.variant == "top1"
              or (strategy.variant == "hybrid" and n_generated < strategy.hybrid_k))
    if greedy:
        return int(np.argmax(logits))
    probs = _softmax_np(logits / strategy.temperature)
    if strategy.top_k is not None:
        keep = np.argsort(probs)[::-1][:strategy.top_k]
        mask = np.zeros_like(probs)
        mask[keep] = probs[keep]
        probs = mask / mask.sum()
    return _sample_index(probs, rng)


def _generate_chunk(teacher, strategy: GenStrategy, seeds: list[int],
                    max_len: int, eos_id: int, sampleable: list[int]) -> list[GenRecord]:
    """Decode a fixed-size batch of records in lockstep (full precision)."""
    n = len(seeds)
    rngs = [SplitMix64(s) for s in seeds]
    tokens = [[sampleable[r.randint(len(sampleable))]] for r in rngs]
    terms = ["maxlen"] * n
    active = [len(t) < max_len for t in tokens]
    dec = teacher.batch_decoder(n)
    last = np.array([t[0] for t in tokens])
    while any(active):
        logits = np.asarray(dec.step(last), dtype=np.float64)
        for r in range(n):
            if not active[r]:
                continue
            nxt = _next_token(logits[r], strategy, len(tokens[r]) - 1, rngs[r])
            tokens[r].append(nxt)
            last[r] = nxt
            if nxt == eos_id:
                terms[r] = "eos"
                active[r] = False
            elif len(tokens[r]) >= max_len:
                active[r] = False
    return [GenRecord(tokens=t, termination=term) for t, term in zip(tokens, terms)]


def generate_corpus(teacher, strategy: GenStrategy, count: int, master_seed: int,
                    max_len: int | None = None, path: str | None = None,
                    workers: int = 1, eos_id: int | None = None) -> list[GenRecord]:
    """Generate ``count`` records with per-index derived seeds; optionally write.

    Transformer teachers decode in fixed-size lockstep batches (a pure speed
    path), so the output depends only on (teacher, strategy, master_seed),
    never on ``workers``.
    """
    if count < 1:
        raise ContractError("count must be >= 1")
    vocab = teacher.vocab_size
    if max_len is None:
        max_len = teacher.max_seq_len
    if not 1 <= max_len <= teacher.max_seq_len:
        raise ContractError(f"max_len {max_len} outside [1, {teacher.max_seq_len}]")
    eos = vocab - 1 if eos_id is None else eos_id
    sampleable = [i for i in range(vocab) if i != eos]
    if not sampleable:
        raise ConfigError("vocabulary has no sampleable tokens")
    seeds = [mix_seed(master_seed, i) for i in range(count)]

    batched = getattr(teacher, "batch_decoder", None) is not None and not getattr(
        teacher, "smoothing", None)
    if batched:
        chunks = [seeds[i: i + _CHUNK] for i in range(0, count, _CHUNK)]

        def run(chunk):
            return _generate_chunk(teacher, strategy, chunk, max_len, eos, sampleable)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                parts = list(ex.map(run, chunks))
        else:
            parts = [run(c) for c in chunks]
        records = [rec for part in parts for rec in part]
    else:
        def one(seed):
            return generate_sequence(teacher, strategy, seed,
                                     max_len=max_len, eos_id=eos)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                records = list(ex.map(one, seeds))
        else:
            records = [one(s) for s in seeds]
    if path is not None:
        write_dataset(path, teacher.vocab_size, [r.tokens for r in records])
    return records
