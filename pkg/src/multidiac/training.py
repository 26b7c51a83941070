"""Training recipe: focal loss with label smoothing, the two-pass
consistency (R-Drop) objective, AdamW with linear warmup + cosine decay,
the per-epoch freeze policy, and bit-exact checkpoint I/O.

The R-Drop objective runs each sample through the model twice with
different dropout masks and adds alpha times the symmetric KL divergence
between the two softmax outputs to the mean of the two focal losses.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from . import numerics as nm
from .audiofe import Waveform, inject_noise, log_mel, spec_augment
from .errors import ConfigError, FingerprintError, FormatError, NumericError
from .model import DiacritizerModel, ModelConfig, speech_embedding_dropout
from .numerics import RngStream, Tensor
from .textproc import NUM_CLASSES, Vocabulary


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 4.1e-6
    rdrop_alpha: float = 2.08
    focal_gamma: float = 0.34
    label_smoothing: float = 0.018
    weight_decay: float = 0.098
    speech_emb_dropout: float = 0.09
    batch_size: int = 16
    epochs: int = 40
    warmup_epochs: int = 3
    min_lr_factor: float = 0.002
    specaug_freq: int = 10
    specaug_time: int = 63
    snr_range: tuple[float, float] = (10.0, 30.0)
    whisper_unfrozen: int = 0
    unfreeze_at_epoch: int | None = None
    seed: int = 42

    def __post_init__(self):
        if not 0 < self.learning_rate:
            raise ConfigError("learning_rate must be positive")
        if self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be < epochs")
        for name in ("focal_gamma", "label_smoothing", "weight_decay",
                     "speech_emb_dropout", "rdrop_alpha"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")


def table1_primary(seed: int = 42) -> TrainConfig:
    """The tuned primary recipe."""
    return TrainConfig(seed=seed)


def alt_checkpoint4(seed: int = 42) -> TrainConfig:
    """The diversity configuration for the fourth ensemble member."""
    return replace(table1_primary(seed=seed), learning_rate=4.7e-5,
                   batch_size=32, focal_gamma=1.0, label_smoothing=0.108,
                   whisper_unfrozen=4, unfreeze_at_epoch=15)


def desk_recipe(seed: int = 42) -> TrainConfig:
    """Fast-convergence settings for the tiny synthetic setup: higher peak
    lr, small batches for more steps, augmentation off."""
    return TrainConfig(learning_rate=3e-3, rdrop_alpha=0.5, weight_decay=0.01,
                       batch_size=8, epochs=25, warmup_epochs=3,
                       specaug_freq=0, specaug_time=0, snr_range=(30.0, 30.0),
                       speech_emb_dropout=0.0, seed=seed)


TRAIN_PRESETS = {
    "table1-primary": table1_primary,
    "alt-checkpoint4": alt_checkpoint4,
    "desk": desk_recipe,
}


# -- losses --------------------------------------------------------------


def focal_loss_ls(logits: Tensor, targets: np.ndarray, gamma: float,
                  epsilon: float) -> Tensor:
    """Label-smoothed focal loss, mean over the given positions.

    Per position, with smoothed target q_k = (1-eps)*1[k=t] + eps/K and
    p = softmax(logits): sum_k q_k * (1-p_k)^gamma * (-log p_k).
    """
    targets = np.asarray(targets, dtype=np.int64)
    bad = np.nonzero((targets < 0) | (targets >= NUM_CLASSES))[0]
    if bad.size:
        raise ConfigError(f"target class {targets[bad[0]]} out of range at "
                          f"position {int(bad[0])}")
    n = len(targets)
    q = np.full((n, NUM_CLASSES), epsilon / NUM_CLASSES, dtype=np.float64)
    q[np.arange(n), targets] += 1.0 - epsilon
    p = nm.softmax(logits, axis=-1)
    neg_logp = -(p.clamp_min(1e-12).log())
    modulation = ((1.0 - p).clamp_min(1e-12)) ** gamma
    per_pos = (nm.tensor(q, dtype=logits.dtype) * modulation * neg_logp).sum(axis=-1)
    return per_pos.mean()


def sym_kl(p: Tensor, q: Tensor) -> Tensor:
    """Mean over positions of (KL(p||q) + KL(q||p)) / 2, probabilities
    clamped at 1e-12."""
    if p.shape != q.shape:
        raise nm.ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    pc = p.clamp_min(1e-12)
    qc = q.clamp_min(1e-12)
    log_ratio = pc.log() - qc.log()
    kl_pq = (pc * log_ratio).sum(axis=-1)
    kl_qp = (qc * (-1.0 * log_ratio)).sum(axis=-1)
    return ((kl_pq + kl_qp) * 0.5).mean()


@dataclass
class PreparedSample:
    """One training example after feature/label preparation."""

    tokens: np.ndarray          # prefix ids + char ids
    letter_rows: np.ndarray     # logit row indices of Arabic letters
    targets: np.ndarray         # diacritic class per letter
    prefix: Tensor | None       # projected speech prefix (graph-attached) or None


def rdrop_objective(samples: list[PreparedSample], model: DiacritizerModel,
                    cfg: TrainConfig, rng: RngStream) -> Tensor:
    """Two dropout-perturbed passes per sample; mean focal loss plus the
    alpha-weighted symmetric KL consistency penalty, averaged over samples."""
    losses = []
    for si, s in enumerate(samples):
        srng = rng.child(si)
        prefix = s.prefix
        if prefix is not None:
            prefix = speech_embedding_dropout(
                prefix, cfg.speech_emb_dropout, True, srng.child(0))
        logits1 = model.forward(s.tokens, prefix, training=True, rng=srng.child(1))
        logits2 = model.forward(s.tokens, prefix, training=True, rng=srng.child(2))
        rows1 = nm.embedding(logits1, s.letter_rows)
        rows2 = nm.embedding(logits2, s.letter_rows)
        l1 = focal_loss_ls(rows1, s.targets, cfg.focal_gamma, cfg.label_smoothing)
        l2 = focal_loss_ls(rows2, s.targets, cfg.focal_gamma, cfg.label_smoothing)
        obj = (l1 + l2) * 0.5
        if cfg.rdrop_alpha != 0.0:
            p1 = nm.softmax(rows1, axis=-1)
            p2 = nm.softmax(rows2, axis=-1)
            obj = obj + cfg.rdrop_alpha * sym_kl(p1, p2)
        losses.append(obj)
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses))


# -- optimizer and schedule ----------------------------------------------


class OptimizerState:
    """AdamW moments; beta1=0.9, beta2=0.999, eps=1e-8."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float,
               weight_decay: float):
    """Bias-corrected Adam update plus decoupled decay; frozen or grad-less
    parameters are untouched. Aborts before mutating anything on a
    non-finite gradient."""
    for name, p in params.items():
        if p.requires_grad and p.grad is not None and \
                not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2, eps = OptimizerState.BETA1, OptimizerState.BETA2, OptimizerState.EPS
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new = p.data.astype(np.float64) - lr * mhat / (np.sqrt(vhat) + eps)
        new -= lr * weight_decay * new
        p.data = new.astype(p.data.dtype)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to min_lr_factor * peak."""
    if step > total_steps:
        raise ConfigError(f"step {step} exceeds total_steps {total_steps}")
    warmup_steps = round(total_steps * cfg.warmup_epochs / cfg.epochs)
    peak = cfg.learning_rate
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    lr_min = cfg.min_lr_factor * peak
    denom = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / denom
    return lr_min + (peak - lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


def apply_freeze_policy(model: DiacritizerModel, epoch: int, cfg: TrainConfig):
    """Primary: speech encoder always frozen. Alt: top whisper_unfrozen
    blocks become trainable starting the epoch after unfreeze_at_epoch."""
    if cfg.whisper_unfrozen > model.config.speech_blocks:
        raise ConfigError(f"cannot unfreeze {cfg.whisper_unfrozen} of "
                          f"{model.config.speech_blocks} speech blocks")
    unfrozen = 0
    if cfg.whisper_unfrozen > 0 and (cfg.unfreeze_at_epoch is None or
                                     epoch > cfg.unfreeze_at_epoch):
        unfrozen = cfg.whisper_unfrozen
    model.freeze_speech_blocks(trainable_top=unfrozen)


# -- checkpoint format ---------------------------------------------------

_MAGIC = b"CWDK"
_VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & ((1 << 64) - 1)
    return h


def serialize_config(cfg) -> str:
    """field=repr pairs joined with ';' (no field value contains ';')."""
    return ";".join(f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(cfg))


def deserialize_config(cls, text: str):
    import ast
    kwargs = {}
    for pair in text.split(";"):
        name, _, value = pair.partition("=")
        kwargs[name] = ast.literal_eval(value)
    return cls(**kwargs)


def config_fingerprint(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    parts = []
    for cfg in (model_cfg, train_cfg):
        for f in fields(cfg):
            parts.append(f"{f.name}={getattr(cfg, f.name)!r}")
    return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]


def save_checkpoint(path, model: DiacritizerModel, meta: dict):
    """Write named parameter tensors plus a __meta entry, FNV-1a trailer."""
    meta = dict(meta)
    meta.setdefault("vocab", model.vocab.serialize())
    meta_blob = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")

    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", _VERSION)
    out += struct.pack("<I", len(model.params) + 1)

    def entry(name: str, rank: int, extents, payload: bytes):
        nb = name.encode("utf-8")
        out.extend(struct.pack("<I", len(nb)))
        out.extend(nb)
        out.extend(struct.pack("<I", rank))
        for e in extents:
            out.extend(struct.pack("<Q", e))
        out.extend(payload)

    for name in sorted(model.params):
        arr = model.params[name].data.astype("<f4")
        entry(name, arr.ndim, arr.shape, arr.tobytes())
    entry("__meta", 1, (len(meta_blob),), meta_blob)
    out += struct.pack("<Q", _fnv1a64(bytes(out)))
    with open(path, "wb") as f:
        f.write(bytes(out))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Parse and integrity-check a checkpoint file."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20 or blob[:4] != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    body, trailer = blob[:-8], blob[-8:]
    (stored,) = struct.unpack("<Q", trailer)
    if _fnv1a64(body) != stored:
        raise FormatError(f"{path}: trailer checksum mismatch (corrupt file)")
    (version,) = struct.unpack("<I", body[4:8])
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    (count,) = struct.unpack("<I", body[8:12])
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", body[pos:pos + 4]); pos += 4
        name = body[pos:pos + name_len].decode("utf-8"); pos += name_len
        (rank,) = struct.unpack("<I", body[pos:pos + 4]); pos += 4
        extents = struct.unpack(f"<{rank}Q", body[pos:pos + 8 * rank]); pos += 8 * rank
        if name == "__meta":
            size = extents[0]
            for line in body[pos:pos + size].decode("utf-8").splitlines():
                k, _, v = line.partition("=")
                meta[k] = v
            pos += size
        else:
            size = 4 * int(np.prod(extents)) if rank else 4
            tensors[name] = np.frombuffer(
                body[pos:pos + size], dtype="<f4").reshape(extents).copy()
            pos += size
    if pos != len(body):
        raise FormatError(f"{path}: trailing bytes after last entry")
    return tensors, meta


def load_checkpoint(path, model_cfg: ModelConfig | None = None,
                    train_cfg: TrainConfig | None = None,
                    vocab: Vocabulary | None = None) -> DiacritizerModel:
    """Rebuild a model; refuses files whose fingerprint does not match.

    With no configs supplied, they are reconstructed from the checkpoint's
    own metadata and the stored fingerprint is still re-verified.
    """
    tensors, meta = read_checkpoint(path)
    if model_cfg is None:
        model_cfg = deserialize_config(ModelConfig, meta["model_cfg"])
    if train_cfg is None:
        train_cfg = deserialize_config(TrainConfig, meta["train_cfg"])
    expected = config_fingerprint(model_cfg, train_cfg)
    stored = meta.get("fingerprint", "")
    if stored != expected:
        raise FingerprintError(
            f"checkpoint fingerprint {stored} does not match supplied "
            f"config fingerprint {expected}")
    vocab = vocab or Vocabulary.deserialize(meta.get("vocab", ""))
    model = DiacritizerModel(model_cfg, vocab, RngStream(0))
    for name, p in model.params.items():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != p.data.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape "
                              f"{tensors[name].shape}, expected {p.data.shape}")
        p.data = tensors[name].astype(p.data.dtype)
    return model


# -- the training loop ---------------------------------------------------


@dataclass
class CorpusSample:
    """Gold training sample: undiacritized text, labels, waveform."""

    sample_id: str
    raw: str
    letter_positions: list[int]
    targets: np.ndarray
    waveform: Waveform | None


def prepare_sample(model: DiacritizerModel, sample: CorpusSample,
                   cfg: TrainConfig, rng: RngStream,
                   augment: bool = True, use_audio: bool = True) -> PreparedSample:
    """Augment audio, extract features, run the speech encoder, and bundle
    token/target arrays for one example."""
    mcfg = model.config
    prefix = None
    if use_audio and sample.waveform is not None:
        w = sample.waveform
        if augment:
            w = inject_noise(w, cfg.snr_range, rng.child(0))
        mel = log_mel(w, mels=mcfg.mels, frame_budget=mcfg.mel_frames)
        if augment:
            mel = spec_augment(mel, cfg.specaug_freq, cfg.specaug_time,
                               rng.child(1))
        prefix = model.speech_prefix(mel)
    tokens = model.encode_text(sample.raw)
    letter_rows = np.asarray(sample.letter_positions, dtype=np.int64) + \
        mcfg.prefix_len
    return PreparedSample(tokens=tokens, letter_rows=letter_rows,
                          targets=np.asarray(sample.targets, dtype=np.int64),
                          prefix=prefix)


def fit(corpus: list[CorpusSample], model: DiacritizerModel, cfg: TrainConfig,
        out_dir=None, dev_scorer=None, use_audio: bool = True,
        log=None) -> dict:
    """Run the full recipe; returns a history dict with per-epoch loss/lr
    and, when out_dir is set, checkpoint paths plus the selected final one.

    dev_scorer, when given, is called with the model after each epoch and
    must return a WER fraction; the checkpoint with the best dev WER is
    selected, otherwise the final epoch wins.
    """
    if not corpus:
        raise ConfigError("empty training corpus")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    run_rng = RngStream(cfg.seed)
    n_batches = math.ceil(len(corpus) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    state = OptimizerState()
    fingerprint = config_fingerprint(model.config, cfg)
    history = {"loss": [], "lr": [], "dev_wer": [], "checkpoints": [],
               "fingerprint": fingerprint}
    step = 0
    best = (math.inf, None)
    for epoch in range(1, cfg.epochs + 1):
        apply_freeze_policy(model, epoch, cfg)
        erng = run_rng.child(epoch)
        order = erng.child(0).generator().permutation(len(corpus))
        epoch_loss = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            brng = erng.child(1 + b)
            samples = [
                prepare_sample(model, corpus[i], cfg, brng.child(int(i)),
                               augment=True, use_audio=use_audio)
                for i in idx
            ]
            loss = rdrop_objective(samples, model, cfg, brng.child(-1))
            model.zero_grad()
            loss.backward()
            lr = lr_at(step, total_steps, cfg)
            adamw_step(model.params, state, lr, cfg.weight_decay)
            step += 1
            epoch_loss += loss.item()
        history["loss"].append(epoch_loss / n_batches)
        history["lr"].append(lr_at(step, total_steps, cfg))
        dev_wer = dev_scorer(model) if dev_scorer is not None else None
        history["dev_wer"].append(dev_wer)
        if out_dir is not None:
            path = os.path.join(out_dir, f"epoch{epoch:03d}.ckpt")
            save_checkpoint(path, model, {
                "seed": cfg.seed, "epoch": epoch, "fingerprint": fingerprint,
                "model_cfg": serialize_config(model.config),
                "train_cfg": serialize_config(cfg)})
            history["checkpoints"].append(path)
            if dev_wer is not None and dev_wer < best[0]:
                best = (dev_wer, path)
        if log is not None:
            log(f"epoch {epoch}/{cfg.epochs} loss={history['loss'][-1]:.4f} "
                f"lr={history['lr'][-1]:.3e}"
                + (f" dev_wer={dev_wer:.4f}" if dev_wer is not None else ""))
    if out_dir is not None:
        history["selected"] = best[1] if best[1] is not None else \
            history["checkpoints"][-1]
    return history
