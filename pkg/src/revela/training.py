"""Joint optimization of the retriever and the language model.

The loss is the mean next-token negative log-likelihood of the
batch-conditioned stream, with the similarity matrix carried as a
differentiable input so retriever parameters are updated by the same
objective. Schedule is linear warmup then linear decay to zero; updates are
adaptive-moment with decoupled weight decay and global-norm gradient
clipping.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Iterator, Sequence

import numpy as np

from . import numkernel as nk
from . import retriever as retriever_mod
from . import transformer
from .corpus import PAD_ID, TrainingBatch, tokenize
from .numkernel import Tensor
from .retriever import Encoder, SimilarityMatrix
from .transformer import LanguageModel, ModelConfig, TransformerParams

CHECKPOINT_MAGIC = b"RVLA"
CHECKPOINT_VERSION = 1
GENERATOR_NAME = "pcg64-v1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    warmup_steps: int = 100
    total_steps: int = 1000
    tau: float = 1e-4
    epsilon: float = 1e-6
    max_seq_len: int = 160
    half_chunk_mode: bool = False
    v_normalization_enabled: bool = True
    aux_e_stream_loss: bool = False
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    sim_stop_gradient: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.learning_rate <= 0 or self.tau <= 0 or self.epsilon <= 0:
            raise ValueError("rates and temperatures must be positive")


@dataclass
class OptimizerState:
    """First/second moment accumulators per parameter plus the update counter."""
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init_like(cls, named: Sequence[tuple[str, Tensor]]) -> "OptimizerState":
        return cls(m={n: np.zeros_like(t.data) for n, t in named},
                   v={n: np.zeros_like(t.data) for n, t in named})


def init_models(lm_config: ModelConfig, retriever_config: ModelConfig,
                seed: int) -> tuple[Encoder, LanguageModel]:
    """Independent parameter sets for retriever and LM from one seed."""
    theta_seq, phi_seq = np.random.SeedSequence(seed).spawn(2)
    encoder = Encoder.create(retriever_config, np.random.default_rng(theta_seq))
    lm = LanguageModel.create(lm_config, np.random.default_rng(phi_seq))
    return encoder, lm


# ---------------------------------------------------------------------------
# loss


def lm_token_batch(texts: Sequence[str], max_seq_len: int):
    """Tokenize chunk texts, truncate, and right-pad; returns (tokens, pad_mask)."""
    ids = [tokenize(t)[:max_seq_len] for t in texts]
    if any(not i for i in ids):
        raise ValueError("cannot train on an empty chunk")
    lengths = np.array([len(i) for i in ids])
    width = int(lengths.max())
    tokens = np.full((len(ids), width), PAD_ID, dtype=np.int64)
    for row, seq in enumerate(ids):
        tokens[row, :len(seq)] = seq
    pad_mask = np.arange(width)[None, :] < lengths[:, None]
    return tokens, pad_mask


def next_token_targets(tokens: np.ndarray, pad_mask: np.ndarray) -> np.ndarray:
    """Shifted targets with -1 wherever position or next token is padding."""
    targets = np.full(tokens.shape, -1, dtype=np.int64)
    valid = pad_mask[:, :-1] & pad_mask[:, 1:]
    targets[:, :-1] = np.where(valid, tokens[:, 1:], -1)
    return targets


def _stream_nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    batch, length, vocab = logits.shape
    return nk.cross_entropy(nk.reshape(logits, (batch * length, vocab)),
                            targets.reshape(-1))


def loss_and_similarity(batch: TrainingBatch, encoder: Encoder, lm: LanguageModel,
                        config: TrainConfig) -> tuple[Tensor, SimilarityMatrix]:
    if len(batch.chunks) < 2:
        raise ValueError("a training batch needs at least two chunks")
    texts = batch.texts()
    sim = retriever_mod.similarity_matrix(texts, encoder, config.tau,
                                          config.half_chunk_mode)
    weights = nk.detach(sim.weights) if config.sim_stop_gradient else sim.weights
    tokens, pad = lm_token_batch(texts, lm.config.max_seq_len)
    mixed_logits, self_logits = transformer.lm_forward(tokens, weights, lm.config,
                                                       lm.params, pad)
    targets = next_token_targets(tokens, pad)
    loss = _stream_nll(mixed_logits, targets)
    if config.aux_e_stream_loss:
        loss = nk.add(loss, _stream_nll(self_logits, targets))
    return loss, sim


def revela_loss(batch: TrainingBatch, encoder: Encoder, lm: LanguageModel,
                config: TrainConfig) -> Tensor:
    """Mean batch-conditioned next-token NLL over all non-pad positions."""
    loss, _ = loss_and_similarity(batch, encoder, lm, config)
    return loss


# ---------------------------------------------------------------------------
# schedule and updates


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 over warmup_steps, then linear decay to 0 at total_steps."""
    if step <= 0:
        return 0.0
    if step <= config.warmup_steps:
        return config.learning_rate * step / config.warmup_steps
    if step >= config.total_steps:
        return 0.0
    span = config.total_steps - config.warmup_steps
    return config.learning_rate * (config.total_steps - step) / span


def grad_norm(tensors: Sequence[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return float(np.sqrt(total))


def scale_grads(tensors: Sequence[Tensor], factor: float) -> None:
    for t in tensors:
        if t.grad is not None:
            t.grad *= factor


def adam_update(named: Sequence[tuple[str, Tensor]], opt: OptimizerState,
                lr: float, weight_decay: float = 0.0) -> None:
    opt.step += 1
    correct1 = 1.0 - ADAM_BETA1 ** opt.step
    correct2 = 1.0 - ADAM_BETA2 ** opt.step
    for name, p in named:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = opt.m[name]
        v = opt.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / correct1) / (np.sqrt(v / correct2) + ADAM_EPS)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= lr * update


def sim_row_entropy(weights: np.ndarray) -> float:
    """Mean per-row entropy of the off-diagonal similarity weights (0 ln 0 := 0)."""
    b = weights.shape[0]
    off = weights[~np.eye(b, dtype=bool)].reshape(b, b - 1)
    terms = np.where(off > 0, off * np.log(np.where(off > 0, off, 1.0)), 0.0)
    return float(-(terms.sum(axis=1)).mean())


def train_step(batch: TrainingBatch, encoder: Encoder, lm: LanguageModel,
               opt_theta: OptimizerState, opt_phi: OptimizerState,
               config: TrainConfig, step: int) -> dict:
    """One joint update of retriever and LM; returns the step's metrics record."""
    nk.clear_tape()
    theta_named = list(encoder.params.named_tensors())
    phi_named = list(lm.params.named_tensors())
    theta_tensors = [t for _, t in theta_named]
    phi_tensors = [t for _, t in phi_named]
    nk.zero_grad(theta_tensors)
    nk.zero_grad(phi_tensors)

    loss, sim = loss_and_similarity(batch, encoder, lm, config)
    nk.backward(loss)

    gn_theta = grad_norm(theta_tensors)
    gn_phi = grad_norm(phi_tensors)
    joint = float(np.sqrt(gn_theta ** 2 + gn_phi ** 2))
    if joint > config.grad_clip:
        factor = config.grad_clip / joint
        scale_grads(theta_tensors, factor)
        scale_grads(phi_tensors, factor)

    lr = lr_at(step, config)
    adam_update(theta_named, opt_theta, lr, config.weight_decay)
    adam_update(phi_named, opt_phi, lr, config.weight_decay)
    record = {
        "step": step,
        "loss": float(loss.data),
        "lr": lr,
        "grad_norm_theta": gn_theta,
        "grad_norm_phi": gn_phi,
        "sim_entropy": sim_row_entropy(sim.weights.data),
    }
    nk.clear_tape()
    return record


def train(batches: Sequence[TrainingBatch], encoder: Encoder, lm: LanguageModel,
          config: TrainConfig, metrics_path: str | None = None) -> list[dict]:
    """Run total_steps updates, cycling the batch file in order; returns the metrics log."""
    if not batches:
        raise ValueError("no training batches")
    opt_theta = OptimizerState.init_like(list(encoder.params.named_tensors()))
    opt_phi = OptimizerState.init_like(list(lm.params.named_tensors()))
    metrics: list[dict] = []
    sink = open(metrics_path, "w", encoding="utf-8", newline="\n") if metrics_path else None
    try:
        for step in range(1, config.total_steps + 1):
            batch = batches[(step - 1) % len(batches)]
            record = train_step(batch, encoder, lm, opt_theta, opt_phi, config, step)
            metrics.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
    finally:
        if sink:
            sink.close()
    return metrics


# ---------------------------------------------------------------------------
# checkpoints: "RVLA", u32 version, u32 metadata length + JSON, then tensor
# records of (u16 name length, name, u8 ndim, u32 dims, float32 LE values).


def save_checkpoint(path: str, metadata: dict, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; values come back as float64 promoted from float32 storage."""
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", buf.read(4))
    metadata = json.loads(buf.read(meta_len).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    while True:
        head = buf.read(2)
        if not head:
            break
        (name_len,) = struct.unpack("<H", head)
        name = buf.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(buf.read(4 * count), dtype="<f4")
        tensors[name] = values.astype(np.float64).reshape(shape)
    return metadata, tensors


def named_model_arrays(prefix: str, params: TransformerParams) -> dict[str, np.ndarray]:
    return {f"{prefix}.{name}": t.data for name, t in params.named_tensors()}


def named_opt_arrays(prefix: str, opt: OptimizerState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, arr in opt.m.items():
        out[f"opt.{prefix}.{name}.m"] = arr
    for name, arr in opt.v.items():
        out[f"opt.{prefix}.{name}.v"] = arr
    return out


def params_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray],
                       prefix: str) -> TransformerParams:
    """Rebuild a parameter set from checkpoint arrays, validating names and shapes."""
    template = transformer.init_params(config, np.random.default_rng(0))
    for name, tensor in template.named_tensors():
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise ValueError(f"checkpoint is missing tensor {key!r}")
        arr = arrays[key]
        if arr.shape != tensor.data.shape:
            raise ValueError(f"checkpoint tensor {key!r} has shape {arr.shape}, "
                             f"expected {tensor.data.shape}")
        tensor.data = arr.copy()
    return template


def save_training_checkpoint(path: str, encoder: Encoder, lm: LanguageModel,
                             config_snapshot: dict, step: int, seed: int,
                             opt_theta: OptimizerState | None = None,
                             opt_phi: OptimizerState | None = None) -> None:
    metadata = {"config": config_snapshot, "step": step, "seed": seed,
                "generator": GENERATOR_NAME}
    tensors = {}
    tensors.update(named_model_arrays("theta", encoder.params))
    tensors.update(named_model_arrays("phi", lm.params))
    if opt_theta is not None:
        metadata["opt_step_theta"] = opt_theta.step
        tensors.update(named_opt_arrays("theta", opt_theta))
    if opt_phi is not None:
        metadata["opt_step_phi"] = opt_phi.step
        tensors.update(named_opt_arrays("phi", opt_phi))
    save_checkpoint(path, metadata, tensors)
