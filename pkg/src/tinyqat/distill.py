"""Knowledge-distillation losses and the QAT training loop.

The default loss is cross-entropy between teacher and student next-token
distributions (soft labels). Hard-label and attention/hidden-state MSE terms
exist so the loss ablation is runnable, but default off.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError, NumericError
from .model import Transformer
from .quant import QuantScheme
from .tensor import Parameter, Tape, Tensor, backward

LOSS_VARIANTS = ("label", "logits", "label+logits")


@dataclass
class TrainConfig:
    lr: float = 2e-5
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    total_steps: int = 1
    batch_size: int = 1
    seed: int = 0
    loss_variant: str = "logits"
    attn_loss_weight: float = 0.0
    hidden_loss_weight: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError("lr must be >= 0")
        if self.total_steps < 1:
            raise ContractError("total_steps must be >= 1")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ContractError(f"loss variant {self.loss_variant!r} not in {LOSS_VARIANTS}")


def kd_loss(student_logits: Tensor, teacher_logits) -> Tensor:
    """Soft-label cross entropy: -(1/n) sum_i sum_c p_teacher * log p_student."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    sd = student_logits.data
    if sd.ndim != 2 or t.shape != sd.shape:
        raise ContractError(f"kd_loss shapes student {sd.shape} vs teacher {t.shape}")
    n = sd.shape[0]
    p_t = T._softmax_np(t)
    ls = T.log_softmax_lastdim(student_logits)
    return T.scale(T.tsum(T.mul(ls, T.constant(p_t))), -1.0 / n)


def label_loss(student_logits: Tensor, labels) -> Tensor:
    """Hard-label mean cross entropy on generated next tokens."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= student_logits.data.shape[-1]):
        raise InputError("label out of vocabulary range")
    return T.cross_entropy_mean(student_logits, labels)


def _mse_to_const(x: Tensor, target: np.ndarray) -> Tensor:
    d = T.add_const(x, -target)
    return T.tmean(T.mul(d, d))


def map_loss(student_maps: list[Tensor], teacher_maps: list[np.ndarray]) -> Tensor:
    """Uniformly layer-weighted MSE between student and teacher tensors."""
    terms = [_mse_to_const(s, np.asarray(t)) for s, t in zip(student_maps, teacher_maps)]
    out = terms[0]
    for term in terms[1:]:
        out = T.add(out, term)
    return T.scale(out, 1.0 / len(terms))


def cosine_lr(lr0: float, step: int, total_steps: int) -> float:
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Adam with decoupled weight decay; state keyed by parameter identity."""

    def __init__(self, params: list[Parameter], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value.data) for p in params]
        self.v = [np.zeros_like(p.value.data) for p in params]

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value.data
            p.value.data -= lr * update


@dataclass
class MetricsRow:
    step: int
    lr: float
    loss: float
    loss_variant: str
    scheme: str


def write_metrics(path: str, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss", "loss_variant", "scheme"])
        for r in rows:
            w.writerow([r.step, repr(r.lr), repr(r.loss), r.loss_variant, r.scheme])


def _sequence_order(n: int, total_steps: int, seed: int) -> np.ndarray:
    """Deterministic wrap-around epoch order: reshuffle indices each epoch."""
    rng = np.random.Generator(np.random.PCG64(seed))
    chunks = []
    while sum(len(c) for c in chunks) < total_steps:
        chunks.append(rng.permutation(n))
    return np.concatenate(chunks)[:total_steps]


def train_qat(student: Transformer, teacher: Transformer, dataset: list[list[int]],
              scheme: QuantScheme, cfg: TrainConfig,
              metrics_path: str | None = None) -> list[MetricsRow]:
    """Distill the fake-quantized student from the full-precision teacher.

    The optimizer updates the latent full-precision parameters; quantizers run
    in the student's forward pass with straight-through gradients.
    """
    if isinstance(scheme, str):
        scheme = QuantScheme.parse(scheme)
    if not dataset:
        raise InputError("dataset is empty")
    usable = [np.asarray(rec, dtype=int) for rec in dataset if len(rec) >= 2]
    if not usable:
        raise InputError("dataset has no sequence with >= 2 tokens")
    max_len = student.cfg.max_seq_len
    order = _sequence_order(len(usable), cfg.total_steps, cfg.seed)
    opt = AdamW(student.trainable(), betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    need_internals = cfg.attn_loss_weight > 0 or cfg.hidden_loss_weight > 0
    rows: list[MetricsRow] = []

    for step in range(cfg.total_steps):
        seq_idx = int(order[step])
        seq = usable[seq_idx][: max_len + 1]
        inputs, labels = seq[:-1], seq[1:]
        n = len(inputs)

        t_internals = None
        if cfg.loss_variant == "label" and not need_internals:
            t_flat = None
        else:
            t_out = teacher.forward_train(inputs, QuantScheme.identity(),
                                          return_internals=need_internals)
            if need_internals:
                t_logits, t_internals = t_out
            else:
                t_logits = t_out
            t_flat = t_logits.data.reshape(n, -1)

        with Tape() as tape:
            s_out = student.forward_train(inputs, scheme, return_internals=need_internals)
            if need_internals:
                s_logits, s_internals = s_out
            else:
                s_logits = s_out
            flat = T.reshape(s_logits, (n, student.cfg.vocab_size))
            if cfg.loss_variant == "label":
                loss = label_loss(flat, labels)
            elif cfg.loss_variant == "logits":
                loss = kd_loss(flat, t_flat)
            else:
                loss = T.add(kd_loss(flat, t_flat), label_loss(flat, labels))
            if cfg.attn_loss_weight > 0:
                loss = T.add(loss, T.scale(
                    map_loss(s_internals["attn"],
                             [a.data for a in t_internals["attn"]]),
                    cfg.attn_loss_weight))
            if cfg.hidden_loss_weight > 0:
                loss = T.add(loss, T.scale(
                    map_loss(s_internals["hidden"],
                             [h.data for h in t_internals["hidden"]]),
                    cfg.hidden_loss_weight))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss at step {step} (sequence index {seq_idx})")
            backward(tape, loss)

        lr = cosine_lr(cfg.lr, step, cfg.total_steps)
        opt.step(lr)
        student.zero_grads()
        rows.append(MetricsRow(step, lr, loss_val, cfg.loss_variant, scheme.render()))

    student.trained_scheme = scheme.render()
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    return rows


def train_lm(model: Transformer, tokens: np.ndarray, steps: int, lr: float,
             batch: int = 4, seq_len: int = 128, seed: int = 0,
             log_every: int = 0) -> list[float]:
    """Plain next-token cross-entropy fit on a token stream (teacher training)."""
    tokens = np.asarray(tokens, dtype=int)
    if tokens.size < seq_len + 1:
        raise InputError(f"corpus too small: {tokens.size} tokens for seq {seq_len}")
    rng = np.random.Generator(np.random.PCG64(seed))
    opt = AdamW(model.trainable())
    identity = QuantScheme.identity()
    losses = []
    for step in range(steps):
        starts = rng.integers(0, tokens.size - seq_len - 1, size=batch)
        window = np.stack([tokens[s: s + seq_len + 1] for s in starts])
        inputs, labels = window[:, :-1], window[:, 1:].reshape(-1)
        with Tape() as tape:
            logits = model.forward_train(inputs, identity)
            flat = T.reshape(logits, (batch * seq_len, model.cfg.vocab_size))
            loss = T.cross_entropy_mean(flat, labels)
            backward(tape, loss)
        opt.step(cosine_lr(lr, step, steps))
        model.zero_grads()
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            recent = np.mean(losses[-log_every:])
            print(f"step {step + 1}/{steps} loss {recent:.4f}")
    return losses
