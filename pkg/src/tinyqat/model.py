"""LLaMA-style decoder-only transformer with fake-quantization hooks.

Quantization sites: the seven fully-connected layers per block (Q/K/V/O
projections, GLU gate/up/down) plus the output head. Keys and values are
fake-quantized per token (after RoPE, one scale per token per layer per
tensor, shared across heads). Embedding lookups, attention probabilities,
residuals and norms are never quantized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import CapacityError, CheckpointError, ContractError, InputError
from .quant import Learnable, QuantScheme, QuantSpec, fake_quant_ste, quantize_minmax
from .tensor import Parameter, Tensor


@dataclass
class ModelConfig:
    vocab_size: int = 96
    dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_hidden: int = 344
    max_seq_len: int = 256
    rope_base: float = 10000.0
    rms_eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ContractError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.max_seq_len < 1:
            raise ContractError("max_seq_len must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale default: trains in minutes, exercises every quant site."""
    return ModelConfig(**overrides)


class KVCache:
    """Per-layer quantized K/V storage with one scale per token per tensor."""

    def __init__(self, cfg: ModelConfig, spec: QuantSpec):
        self.cfg = cfg
        self.spec = spec
        self.t = 0
        n, d, cap = cfg.n_layers, cfg.dim, cfg.max_seq_len
        self.k_codes = [np.zeros((cap, d)) for _ in range(n)]
        self.v_codes = [np.zeros((cap, d)) for _ in range(n)]
        self.k_scales = [np.zeros(cap) for _ in range(n)]
        self.v_scales = [np.zeros(cap) for _ in range(n)]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        t = self.t
        if t >= self.cfg.max_seq_len:
            raise CapacityError(f"KV cache full at {self.cfg.max_seq_len} tokens")
        for codes, scales, x in ((self.k_codes, self.k_scales, k),
                                 (self.v_codes, self.v_scales, v)):
            if self.spec.is_full_precision:
                codes[layer][t] = x
                scales[layer][t] = 1.0
            else:
                view = quantize_minmax(x, self.spec)
                codes[layer][t] = view.codes
                scales[layer][t] = float(view.scales.reshape(-1)[0])

    def keys(self, layer: int, count: int | None = None) -> np.ndarray:
        t = self.t if count is None else count
        return self.k_codes[layer][:t] * self.k_scales[layer][:t, None]

    def values(self, layer: int, count: int | None = None) -> np.ndarray:
        t = self.t if count is None else count
        return self.v_codes[layer][:t] * self.v_scales[layer][:t, None]

    def scale_counts(self, layer: int) -> tuple[int, int]:
        return self.t, self.t


class Transformer:
    """Decoder-only transformer; parameters live in a flat named dict."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, _empty: bool = False):
        self.cfg = cfg
        self.params: dict[str, Parameter] = {}
        self.smoothing: dict[str, np.ndarray] = {}
        self.act_scales: dict[str, Parameter] = {}
        self.trained_scheme: str = "none"
        if _empty:
            return
        rng = np.random.default_rng(seed)

        def p(name, shape, std=0.02):
            self.params[name] = Parameter(rng.normal(0.0, std, shape))

        c = cfg
        p("tok_emb", (c.vocab_size, c.dim))
        for i in range(c.n_layers):
            pre = f"layers.{i}."
            self.params[pre + "attn_norm"] = Parameter(np.ones(c.dim))
            for w in ("wq", "wk", "wv", "wo"):
                p(pre + w, (c.dim, c.dim))
            self.params[pre + "ffn_norm"] = Parameter(np.ones(c.dim))
            p(pre + "w_gate", (c.ffn_hidden, c.dim))
            p(pre + "w_up", (c.ffn_hidden, c.dim))
            p(pre + "w_down", (c.dim, c.ffn_hidden))
        self.params["final_norm"] = Parameter(np.ones(c.dim))
        p("head", (c.vocab_size, c.dim))

    # -- bookkeeping --------------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    @property
    def max_seq_len(self) -> int:
        return self.cfg.max_seq_len

    def linear_sites(self) -> list[str]:
        names = []
        for i in range(self.cfg.n_layers):
            pre = f"layers.{i}."
            names += [pre + w for w in
                      ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")]
        names.append("head")
        return names

    def trainable(self) -> list[Parameter]:
        return list(self.params.values()) + list(self.act_scales.values())

    def zero_grads(self) -> None:
        for p in self.trainable():
            p.zero_grad()

    def clone(self) -> "Transformer":
        out = Transformer(self.cfg, _empty=True)
        for name, p in self.params.items():
            out.params[name] = Parameter(p.value.data.copy())
        out.smoothing = {k: v.copy() for k, v in self.smoothing.items()}
        out.act_scales = {k: Parameter(p.value.data.copy())
                          for k, p in self.act_scales.items()}
        out.trained_scheme = self.trained_scheme
        return out

    # -- forward ------------------------------------------------------------

    def _act_scale_param(self, site: str, x: np.ndarray, bits: int) -> Parameter:
        if site not in self.act_scales:
            qmax = 2 ** (bits - 1) - 1
            init = 2.0 * float(np.abs(x).mean()) / math.sqrt(qmax)
            self.act_scales[site] = Parameter(np.asarray(max(init, 1e-8)))
        return self.act_scales[site]

    def _linear(self, site: str, x: Tensor, scheme: QuantScheme) -> Tensor:
        w = self.params[site].value
        if not scheme.weights.is_full_precision:
            w = fake_quant_ste(w, scheme.weights)
        if site in self.smoothing:
            x = T.mul(x, T.constant(1.0 / self.smoothing[site]))
        aspec = scheme.activations
        if not aspec.is_full_precision:
            sp = None
            if isinstance(aspec.clipping, Learnable):
                sp = self._act_scale_param(site, x.data, aspec.bits)
            x = fake_quant_ste(x, aspec, scale_param=sp)
        return T.matmul(x, T.transpose(w, 0, 1))

    def forward_train(self, tokens, scheme: QuantScheme, return_internals: bool = False):
        """Full-sequence causal forward; returns logits [batch, seq, vocab]."""
        if isinstance(scheme, str):
            scheme = QuantScheme.parse(scheme)
        ids = np.asarray(tokens)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise InputError(f"tokens must be [batch, seq], got shape {ids.shape}")
        b, s = ids.shape
        c = self.cfg
        if s > c.max_seq_len:
            raise InputError(f"sequence length {s} exceeds max_seq_len {c.max_seq_len}")
        if ids.min() < 0 or ids.max() >= c.vocab_size:
            raise InputError(f"token id out of range for vocab {c.vocab_size}")

        h, hd = c.n_heads, c.head_dim
        mask = np.triu(np.full((s, s), -1e9), k=1)
        internals = {"attn": [], "hidden": []}

        x = T.embed_lookup(self.params["tok_emb"].value, ids)
        for i in range(c.n_layers):
            pre = f"layers.{i}."
            hn = T.rms_norm(x, self.params[pre + "attn_norm"].value, c.rms_eps)
            q = self._linear(pre + "wq", hn, scheme)
            k = self._linear(pre + "wk", hn, scheme)
            v = self._linear(pre + "wv", hn, scheme)
            q4 = T.rope_rotate(T.reshape(q, (b, s, h, hd)), c.rope_base)
            k4 = T.rope_rotate(T.reshape(k, (b, s, h, hd)), c.rope_base)
            if not scheme.kv.is_full_precision:
                k4 = T.reshape(fake_quant_ste(T.reshape(k4, (b, s, c.dim)), scheme.kv),
                               (b, s, h, hd))
                v = fake_quant_ste(v, scheme.kv)
            v4 = T.reshape(v, (b, s, h, hd))
            qh = T.transpose(q4, 1, 2)                      # [b, h, s, hd]
            kh = T.transpose(k4, 1, 2)
            vh = T.transpose(v4, 1, 2)
            scores = T.scale(T.matmul(qh, T.transpose(kh, 2, 3)), 1.0 / math.sqrt(hd))
            probs = T.softmax_lastdim(T.add_const(scores, mask))
            ctx = T.reshape(T.transpose(T.matmul(probs, vh), 1, 2), (b, s, c.dim))
            x = T.add(x, self._linear(pre + "wo", ctx, scheme))

            hn2 = T.rms_norm(x, self.params[pre + "ffn_norm"].value, c.rms_eps)
            gate = self._linear(pre + "w_gate", hn2, scheme)
            up = self._linear(pre + "w_up", hn2, scheme)
            x = T.add(x, self._linear(pre + "w_down", T.mul(T.silu(gate), up), scheme))
            if return_internals:
                internals["attn"].append(probs)
                internals["hidden"].append(x)

        logits = self._linear("head", T.rms_norm(x, self.params["final_norm"].value,
                                                 c.rms_eps), scheme)
        if return_internals:
            return logits, internals
        return logits

    # -- incremental decoding (numpy fast path, no tape) --------------------

    def new_cache(self, kv: QuantSpec | None = None) -> KVCache:
        return KVCache(self.cfg, kv if kv is not None else QuantSpec.full_precision())

    def _decode_weights(self, scheme: QuantScheme) -> dict[str, np.ndarray]:
        out = {}
        for name in self.linear_sites():
            w = self.params[name].value.data
            if not scheme.weights.is_full_precision:
                w = quantize_minmax(w, scheme.weights).values
            out[name] = w
        return out

    def _decode_act(self, x: np.ndarray, site: str, scheme: QuantScheme) -> np.ndarray:
        if site in self.smoothing:
            x = x / self.smoothing[site]
        if scheme.activations.is_full_precision:
            return x
        return quantize_minmax(x, scheme.activations).values

    def decode_step(self, token: int, cache: KVCache, scheme: QuantScheme) -> np.ndarray:
        """Process one token against the cache; returns logits [vocab]."""
        if isinstance(scheme, str):
            scheme = QuantScheme.parse(scheme)
        c = self.cfg
        if not 0 <= token < c.vocab_size:
            raise InputError(f"token id {token} out of range for vocab {c.vocab_size}")
        if cache.t >= c.max_seq_len:
            raise CapacityError(f"KV cache full at {c.max_seq_len} tokens")
        key = scheme.render()
        wcache = getattr(cache, "_wq", None)
        if wcache is None or getattr(cache, "_wq_key", None) != key:
            cache._wq = self._decode_weights(scheme)
            cache._wq_key = key
            wcache = cache._wq

        h, hd = c.n_heads, c.head_dim
        pos = cache.t
        cos, sin = T._rope_tables(1, hd, c.rope_base, pos, np.float64)
        eps = c.rms_eps

        def lin(site, x):
            return wcache[site] @ self._decode_act(x, site, scheme)

        x = self.params["tok_emb"].value.data[token].copy()
        for i in range(c.n_layers):
            pre = f"layers.{i}."
            hn = T._rms_norm_np(x, self.params[pre + "attn_norm"].value.data, eps)
            q = lin(pre + "wq", hn).reshape(h, hd)
            k = lin(pre + "wk", hn).reshape(h, hd)
            v = lin(pre + "wv", hn)
            q = T._rope_np(q[None], cos, sin)[0]
            k = T._rope_np(k[None], cos, sin)[0]
            cache.append(i, k.reshape(c.dim), v)
            K = cache.keys(i, pos + 1).reshape(pos + 1, h, hd)
            V = cache.values(i, pos + 1).reshape(pos + 1, h, hd)
            scores = np.einsum("hd,thd->ht", q, K) / math.sqrt(hd)
            probs = T._softmax_np(scores)
            ctx = np.einsum("ht,thd->hd", probs, V).reshape(c.dim)
            x = x + lin(pre + "wo", ctx)

            hn2 = T._rms_norm_np(x, self.params[pre + "ffn_norm"].value.data, eps)
            y = T._silu_np(lin(pre + "w_gate", hn2)) * lin(pre + "w_up", hn2)
            x = x + lin(pre + "w_down", y)
        cache.t += 1
        return lin("head", T._rms_norm_np(x, self.params["final_norm"].value.data, eps))

    def batch_decoder(self, batch: int) -> "FPBatchDecoder":
        return FPBatchDecoder(self, batch)

    def decode_session(self, scheme: QuantScheme | None = None):
        """Stateful one-token-at-a-time decoder used by data generation."""
        scheme = scheme if scheme is not None else QuantScheme.identity()
        cache = self.new_cache(scheme.kv)
        model = self

        class _Session:
            def step(self, token: int) -> np.ndarray:
                return model.decode_step(token, cache, scheme)

        return _Session()


class FPBatchDecoder:
    """Full-precision incremental decoder over a fixed batch of sequences.

    Fast path for data generation only: no quantization, caches laid out
    [heads, batch, pos, head_dim] so attention runs as strided matmuls.
    Per-sequence results are identical to ``decode_step`` up to fp rounding.
    """

    def __init__(self, model: Transformer, batch: int):
        self.model = model
        self.b = batch
        c = model.cfg
        dt = model.params["tok_emb"].value.data.dtype
        self.k = [np.zeros((c.n_heads, batch, c.max_seq_len, c.head_dim), dtype=dt)
                  for _ in range(c.n_layers)]
        self.v = [np.zeros_like(self.k[0]) for _ in range(c.n_layers)]
        self.t = 0
        self.w = {name: np.ascontiguousarray(model.params[name].value.data.T)
                  for name in model.linear_sites()}
        self.gains = {name: model.params[name].value.data
                      for name in model.params if name.endswith("norm")}

    def step(self, tokens: np.ndarray) -> np.ndarray:
        c = self.model.cfg
        if self.t >= c.max_seq_len:
            raise CapacityError(f"KV cache full at {c.max_seq_len} tokens")
        h, hd, eps = c.n_heads, c.head_dim, c.rms_eps
        pos = self.t
        cos, sin = T._rope_tables(1, hd, c.rope_base, pos, np.float64)
        x = self.model.params["tok_emb"].value.data[tokens]
        for i in range(c.n_layers):
            pre = f"layers.{i}."
            hn = T._rms_norm_np(x, self.gains[pre + "attn_norm"], eps)
            q = T._rope_np((hn @ self.w[pre + "wq"]).reshape(self.b, 1, h, hd),
                           cos, sin)
            k = T._rope_np((hn @ self.w[pre + "wk"]).reshape(self.b, 1, h, hd),
                           cos, sin)
            self.k[i][:, :, pos, :] = k[:, 0].transpose(1, 0, 2)
            self.v[i][:, :, pos, :] = (hn @ self.w[pre + "wv"]).reshape(
                self.b, h, hd).transpose(1, 0, 2)
            K = self.k[i][:, :, : pos + 1, :]          # [h, b, t, hd]
            V = self.v[i][:, :, : pos + 1, :]
            qh = q[:, 0].transpose(1, 0, 2)[:, :, None, :]  # [h, b, 1, hd]
            scores = (qh @ np.swapaxes(K, -1, -2)) / math.sqrt(hd)
            probs = T._softmax_np(scores)
            ctx = (probs @ V)[:, :, 0, :].transpose(1, 0, 2).reshape(self.b, c.dim)
            x = x + ctx @ self.w[pre + "wo"]
            hn2 = T._rms_norm_np(x, self.gains[pre + "ffn_norm"], eps)
            y = T._silu_np(hn2 @ self.w[pre + "w_gate"]) * (hn2 @ self.w[pre + "w_up"])
            x = x + y @ self.w[pre + "w_down"]
        self.t += 1
        return T._rms_norm_np(x, self.gains["final_norm"], eps) @ self.w["head"]


def inject_outlier_channels(model: Transformer, n_channels: int = 8,
                            factor: float = 10.0, seed: int = 0) -> None:
    """Concentrate weight scale into a few channels without changing outputs.

    Large trained transformers carry a handful of high-magnitude channels that
    make low-bit weight quantization lossy; desk-scale models trained from
    scratch do not develop them. This folds scale out of the (unquantized)
    norm gains and adjacent projections into ``n_channels`` random columns per
    linear site, so full-precision outputs are unchanged up to fp rounding
    while round-to-nearest low-bit weight quantization degrades measurably.
    The inverse is exactly what the smoothing rescale migrates back out.
    """
    if n_channels < 1 or factor <= 0:
        raise ContractError("need n_channels >= 1 and factor > 0")
    c = model.cfg
    if n_channels > min(c.dim, c.ffn_hidden):
        raise ContractError(f"n_channels {n_channels} exceeds channel count")
    rng = np.random.default_rng(seed)
    P = model.params

    def cols(dim):
        return rng.choice(dim, size=n_channels, replace=False)

    for i in range(c.n_layers):
        pre = f"layers.{i}."
        j = cols(c.dim)                      # via the attention norm gain
        P[pre + "attn_norm"].value.data[j] /= factor
        for w in ("wq", "wk", "wv"):
            P[pre + w].value.data[:, j] *= factor
        j = cols(c.dim)                      # wo columns vs wv output rows
        P[pre + "wo"].value.data[:, j] *= factor
        P[pre + "wv"].value.data[j, :] /= factor
        j = cols(c.dim)                      # via the ffn norm gain
        P[pre + "ffn_norm"].value.data[j] /= factor
        for w in ("w_gate", "w_up"):
            P[pre + w].value.data[:, j] *= factor
        j = cols(c.ffn_hidden)               # w_down columns vs w_up rows
        P[pre + "w_down"].value.data[:, j] *= factor
        P[pre + "w_up"].value.data[j, :] /= factor
    j = cols(c.dim)                          # head via the final norm gain
    P["final_norm"].value.data[j] /= factor
    P["head"].value.data[:, j] *= factor


def init_student_from_teacher(teacher: Transformer,
                              cfg: ModelConfig | None = None) -> Transformer:
    """Value-copy of the teacher; later student updates never touch the teacher."""
    if cfg is not None:
        for f in fields(ModelConfig):
            a, b = getattr(teacher.cfg, f.name), getattr(cfg, f.name)
            if a != b:
                raise CheckpointError(
                    f"config mismatch on {f.name}: teacher={a}, student={b}")
    return teacher.clone()
