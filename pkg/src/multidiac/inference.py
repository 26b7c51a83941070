"""MC-Dropout ensemble inference and end-to-end diacritization.

Each checkpoint runs a configurable number of stochastic forward passes
with text-encoder dropout kept active (layer norm has no stochastic state
and is unaffected); softmax probabilities are averaged over every
(model, pass) pair before the per-position argmax. Sub-streams are keyed
by (model index, pass index), so pass-level parallelism cannot change the
result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .audiofe import Waveform, log_mel
from .errors import ShapeError
from .model import DiacritizerModel
from .numerics import RngStream
from .textproc import ARABIC_LETTERS, insert_diacritics


@dataclass(frozen=True)
class EnsembleConfig:
    checkpoints: tuple[str, ...] = ()
    passes_per_model: int = 50
    inference_dropout_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.passes_per_model < 1:
            raise ValueError("passes_per_model must be >= 1")


def mc_forward(model: DiacritizerModel, tokens: np.ndarray,
               prefix, passes: int, p: float, rng: RngStream) -> np.ndarray:
    """(passes, letter positions handled upstream: full positions, 15)
    softmax probabilities, one stochastic pass per rng.child(pass)."""
    out = []
    for i in range(passes):
        logits = model.forward(tokens, prefix, training=p > 0.0,
                               rng=rng.child(i), dropout_p=p)
        out.append(nm.softmax(logits, axis=-1).data)
    return np.stack(out)


def ensemble_average(pass_probs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Mean over all (model, pass) distributions, then per-position argmax.

    Ties break toward the lowest class id (np.argmax convention). Returns
    (class ids, mean probability of the chosen class).
    """
    shapes = {a.shape[1:] for a in pass_probs}
    if len(shapes) != 1:
        raise ShapeError(f"pass tensors disagree on shape: {sorted(shapes)}")
    total = np.zeros(pass_probs[0].shape[1:], dtype=np.float64)
    count = 0
    for a in pass_probs:
        total += a.sum(axis=0, dtype=np.float64)
        count += a.shape[0]
    mean = total / count
    classes = mean.argmax(axis=-1)
    chosen = mean[np.arange(len(classes)), classes]
    return classes, chosen


def diacritize(raw: str, waveform: Waveform | None,
               models: list[DiacritizerModel], cfg: EnsembleConfig) -> tuple[str, list[float]]:
    """Ensemble-predict diacritics for one sample and re-insert them.

    Audio is optional; absent audio means a zero speech prefix (text-only
    path). Returns (diacritized text, per-letter confidence).
    """
    ref = models[0]
    tokens = ref.encode_text(raw)
    letter_rows = np.asarray(
        [i for i, c in enumerate(raw) if c in ARABIC_LETTERS],
        dtype=np.int64) + ref.config.prefix_len
    run = RngStream(cfg.seed)
    all_probs = []
    for mi, model in enumerate(models):
        prefix = None
        if waveform is not None:
            mel = log_mel(waveform, mels=model.config.mels,
                          frame_budget=model.config.mel_frames)
            prefix = model.speech_prefix(mel)
        probs = mc_forward(model, tokens, prefix, cfg.passes_per_model,
                           cfg.inference_dropout_p, run.child(mi))
        all_probs.append(probs[:, letter_rows, :])
    classes, confidence = ensemble_average(all_probs)
    text = insert_diacritics(raw, [int(c) for c in classes])
    return text, [float(c) for c in confidence]


def predict_greedy(model: DiacritizerModel, raw: str,
                   waveform: Waveform | None) -> list[int]:
    """Deterministic single-pass argmax prediction (no MC dropout)."""
    tokens = model.encode_text(raw)
    prefix = None
    if waveform is not None:
        mel = log_mel(waveform, mels=model.config.mels,
                      frame_budget=model.config.mel_frames)
        prefix = model.speech_prefix(mel)
    logits = model.forward(tokens, prefix)
    letter_rows = np.asarray(
        [i for i, c in enumerate(raw) if c in ARABIC_LETTERS],
        dtype=np.int64) + model.config.prefix_len
    return [int(c) for c in logits.data[letter_rows].argmax(axis=-1)]
