"""Self-supervised distillation baseline with a frozen language model.

Each chunk in a batch acts as both query and context: the frozen LM scores
how well chunk j explains chunk i via the conditional NLL of i given j, and
the retriever is trained to match its own similarity distribution to the
LM-derived one under a KL objective. Only retriever parameters move.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkernel as nk
from . import retriever as retriever_mod
from . import training
from .corpus import TrainingBatch, tokenize
from .numkernel import Tensor
from .retriever import Encoder
from .training import OptimizerState, TrainConfig
from .transformer import LanguageModel, causal_lm_logits


@dataclass
class ReplugConfig:
    tau_r: float = 0.001
    tau_lm: float = 0.001
    learning_rate: float = 5e-4
    steps: int = 4500
    warmup_steps: int = 100
    separator_id: int = 10  # LF byte between context and target
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.tau_r <= 0 or self.tau_lm <= 0:
            raise ValueError("temperatures must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def lm_conditional_nll(target_ids: Sequence[int], context_ids: Sequence[int],
                       lm: LanguageModel, separator_id: int = 10) -> float:
    """Mean NLL of the target chunk's tokens given [context, separator, target].

    The context is truncated head-first when the concatenation exceeds the
    LM's max_seq_len; the target's tail is cut only if the target alone does
    not fit.
    """
    target = list(target_ids)
    context = list(context_ids)
    if not target:
        raise ValueError("target chunk must be non-empty")
    max_len = lm.config.max_seq_len
    overflow = len(context) + 1 + len(target) - max_len
    if overflow > 0:
        context = context[overflow:]
    if len(context) + 1 + len(target) > max_len:
        target = target[:max_len - 1]
    seq = np.array([context + [separator_id] + target], dtype=np.int64)
    with nk.no_grad():
        logits = causal_lm_logits(seq, lm.config, lm.params).data[0]
    # position predicting target[t] is the one right before it in the sequence
    start = len(context)
    rows = np.arange(start, start + len(target))
    m = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=-1)) + m[:, 0]
    nll = lse[rows] - logits[rows, target]
    return float(nll.mean())


def _row_softmax(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def replug_distributions(batch: TrainingBatch, encoder: Encoder, lm: LanguageModel,
                         config: ReplugConfig) -> tuple[Tensor, np.ndarray]:
    """Retriever and LM distributions over in-batch contexts, self pairs included.

    Returns ``(p_theta, p_phi)``: the differentiable retriever row softmax of
    scaled cosine scores, and the frozen-LM row softmax of -nll / tau_lm.
    """
    texts = batch.texts()
    b = len(texts)
    if b < 2:
        raise ValueError("a batch needs at least two chunks")
    ids = [tokenize(t) for t in texts]
    emb = retriever_mod.encode_batch(ids, "passage", encoder)
    unit = retriever_mod._unit_rows(emb)
    scores = nk.scale(nk.matmul(unit, nk.transpose(unit, (1, 0))), 1.0 / config.tau_r)
    p_theta = nk.exp(nk.log_softmax_lastdim(scores))

    nll = np.empty((b, b))
    for i in range(b):
        for j in range(b):
            nll[i, j] = lm_conditional_nll(ids[i], ids[j], lm, config.separator_id)
    p_phi = _row_softmax(-nll / config.tau_lm)
    return p_theta, p_phi


def replug_loss(p_phi: np.ndarray, p_theta) -> Tensor:
    """Mean over rows of KL(p_phi || p_theta); zero-probability targets contribute 0."""
    p_phi = np.asarray(p_phi, dtype=np.float64)
    theta = p_theta if isinstance(p_theta, Tensor) else Tensor(p_theta)
    if p_phi.shape != theta.data.shape:
        raise ValueError("distribution shapes differ")
    rows = p_phi.shape[0]
    # plug 1.0 under the log wherever p_phi is zero so 0 * log(...) stays 0
    # without touching the value or gradient of any contributing entry
    filler = Tensor((p_phi <= 0).astype(np.float64))
    log_theta = nk.log(nk.add(theta, filler))
    cross = nk.scale(nk.sum_axis(nk.mul(Tensor(p_phi), log_theta)), -1.0)
    entropy = float(np.where(p_phi > 0, p_phi * np.log(np.where(p_phi > 0, p_phi, 1.0)),
                             0.0).sum())
    return nk.scale(nk.add_const(cross, entropy), 1.0 / rows)


def _replug_step_loss(batch: TrainingBatch, encoder: Encoder, lm: LanguageModel,
                      config: ReplugConfig) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """KL loss built from log-softmax directly so saturated rows stay finite."""
    texts = batch.texts()
    b = len(texts)
    ids = [tokenize(t) for t in texts]
    emb = retriever_mod.encode_batch(ids, "passage", encoder)
    unit = retriever_mod._unit_rows(emb)
    scores = nk.scale(nk.matmul(unit, nk.transpose(unit, (1, 0))), 1.0 / config.tau_r)
    log_theta = nk.log_softmax_lastdim(scores)

    nll = np.empty((b, b))
    for i in range(b):
        for j in range(b):
            nll[i, j] = lm_conditional_nll(ids[i], ids[j], lm, config.separator_id)
    p_phi = _row_softmax(-nll / config.tau_lm)
    cross = nk.scale(nk.sum_axis(nk.mul(Tensor(p_phi), log_theta)), -1.0)
    entropy = float(np.where(p_phi > 0, p_phi * np.log(np.where(p_phi > 0, p_phi, 1.0)),
                             0.0).sum())
    loss = nk.scale(nk.add_const(cross, entropy), 1.0 / b)
    return loss, p_phi, np.exp(log_theta.data)


def replug_train(batches: Sequence[TrainingBatch], encoder: Encoder,
                 lm: LanguageModel, config: ReplugConfig,
                 metrics_path: str | None = None) -> list[dict]:
    """Distill against the frozen LM; only retriever parameters are updated."""
    if not batches:
        raise ValueError("no training batches")
    schedule = TrainConfig(learning_rate=config.learning_rate,
                           warmup_steps=min(config.warmup_steps, config.steps),
                           total_steps=config.steps, tau=1.0, seed=config.seed)
    theta_named = list(encoder.params.named_tensors())
    theta_tensors = [t for _, t in theta_named]
    phi_tensors = [t for _, t in lm.params.named_tensors()]
    frozen_flags = [t.requires_grad for t in phi_tensors]
    for t in phi_tensors:
        t.requires_grad = False
    opt = OptimizerState.init_like(theta_named)
    metrics: list[dict] = []
    sink = open(metrics_path, "w", encoding="utf-8", newline="\n") if metrics_path else None
    try:
        for step in range(1, config.steps + 1):
            batch = batches[(step - 1) % len(batches)]
            nk.clear_tape()
            nk.zero_grad(theta_tensors)
            loss, _, p_theta = _replug_step_loss(batch, encoder, lm, config)
            nk.backward(loss)
            gn_theta = training.grad_norm(theta_tensors)
            if gn_theta > config.grad_clip:
                training.scale_grads(theta_tensors, config.grad_clip / gn_theta)
            lr = training.lr_at(step, schedule)
            training.adam_update(theta_named, opt, lr, config.weight_decay)
            record = {
                "step": step,
                "loss": float(loss.data),
                "lr": lr,
                "grad_norm_theta": gn_theta,
                "grad_norm_phi": 0.0,
                "sim_entropy": _row_entropy(p_theta),
            }
            metrics.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
    finally:
        for t, flag in zip(phi_tensors, frozen_flags):
            t.requires_grad = flag
        if sink:
            sink.close()
        nk.clear_tape()
    return metrics


def _row_entropy(p: np.ndarray) -> float:
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-(terms.sum(axis=1)).mean())
