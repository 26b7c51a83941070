"""The fused architecture: frozen speech encoder, mean-pool + linear
projection, additive prefix fusion into a character-level text encoder,
and a 15-way per-letter classification head.

Projected speech vectors are added to the embeddings of `prefix_len`
dedicated prefix positions that precede the text tokens; a zero prefix is
therefore exactly the text-only model. The speech encoder's parameters
can be frozen per block; frozen tensors never receive gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .audiofe import MelSpectrogram
from .errors import ConfigError, ShapeError
from .numerics import RngStream, Tensor
from .textproc import NUM_CLASSES, Vocabulary, encode_tokens


@dataclass(frozen=True)
class ModelConfig:
    text_layers: int = 6
    text_dim: int = 512
    text_heads: int = 16
    speech_blocks: int = 6
    speech_dim: int = 512
    speech_heads: int = 8
    speech_frames: int = 1500
    prefix_len: int = 150
    pool_factor: int = 10
    num_classes: int = NUM_CLASSES
    dropout_p: float = 0.1
    mels: int = 80
    mlp_ratio: int = 4
    vocab_size: int = 100
    max_text_len: int = 512

    def __post_init__(self):
        if self.speech_frames != self.prefix_len * self.pool_factor:
            raise ConfigError(
                f"speech_frames {self.speech_frames} != prefix_len "
                f"{self.prefix_len} x pool_factor {self.pool_factor}")
        if self.text_dim % self.text_heads != 0:
            raise ConfigError("text_dim not divisible by text_heads")
        if self.speech_dim % self.speech_heads != 0:
            raise ConfigError("speech_dim not divisible by speech_heads")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes must be {NUM_CLASSES}")

    @property
    def mel_frames(self) -> int:
        # stride-2 conv stem halves time
        return 2 * self.speech_frames


def full_scale_config(vocab_size: int = 100) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size)


def desk_config(vocab_size: int = 40) -> ModelConfig:
    """Minutes-scale CPU preset."""
    return ModelConfig(text_layers=2, text_dim=64, text_heads=2,
                       speech_blocks=2, speech_dim=64, speech_heads=2,
                       speech_frames=100, prefix_len=10, pool_factor=10,
                       vocab_size=vocab_size)


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    inv = np.exp(-np.arange(0, dim, 2) * (math.log(10000.0) / dim))[None, :]
    table = np.zeros((length, dim), dtype=np.float32)
    table[:, 0::2] = np.sin(pos * inv)
    table[:, 1::2] = np.cos(pos * inv)
    return table


def _block_param_shapes(dim: int, mlp_ratio: int) -> dict[str, tuple]:
    hidden = dim * mlp_ratio
    return {
        "ln1.g": (dim,), "ln1.b": (dim,),
        "attn.wq": (dim, dim), "attn.bq": (dim,),
        "attn.wk": (dim, dim), "attn.bk": (dim,),
        "attn.wv": (dim, dim), "attn.bv": (dim,),
        "attn.wo": (dim, dim), "attn.bo": (dim,),
        "ln2.g": (dim,), "ln2.b": (dim,),
        "mlp.w1": (dim, hidden), "mlp.b1": (hidden,),
        "mlp.w2": (hidden, dim), "mlp.b2": (dim,),
    }


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    shapes["speech.conv1.w"] = (cfg.speech_dim, cfg.mels, 3)
    shapes["speech.conv1.b"] = (cfg.speech_dim,)
    shapes["speech.conv2.w"] = (cfg.speech_dim, cfg.speech_dim, 3)
    shapes["speech.conv2.b"] = (cfg.speech_dim,)
    for i in range(cfg.speech_blocks):
        for k, s in _block_param_shapes(cfg.speech_dim, cfg.mlp_ratio).items():
            shapes[f"speech.block{i}.{k}"] = s
    shapes["speech.ln_post.g"] = (cfg.speech_dim,)
    shapes["speech.ln_post.b"] = (cfg.speech_dim,)
    shapes["proj.w"] = (cfg.speech_dim, cfg.text_dim)
    shapes["proj.b"] = (cfg.text_dim,)
    shapes["text.char_emb"] = (cfg.vocab_size, cfg.text_dim)
    shapes["text.pos_emb"] = (cfg.prefix_len + cfg.max_text_len, cfg.text_dim)
    for i in range(cfg.text_layers):
        for k, s in _block_param_shapes(cfg.text_dim, cfg.mlp_ratio).items():
            shapes[f"text.block{i}.{k}"] = s
    shapes["text.ln_f.g"] = (cfg.text_dim,)
    shapes["text.ln_f.b"] = (cfg.text_dim,)
    shapes["text.head.w"] = (cfg.text_dim, cfg.num_classes)
    shapes["text.head.b"] = (cfg.num_classes,)
    return shapes


def count_parameters(cfg: ModelConfig) -> tuple[int, int]:
    """Analytic (total, trainable) parameter counts; trainable excludes the
    frozen speech stem and blocks (primary freeze policy)."""
    total = 0
    trainable = 0
    for name, shape in _param_shapes(cfg).items():
        n = int(np.prod(shape))
        total += n
        if not name.startswith("speech."):
            trainable += n
    return total, trainable


class DiacritizerModel:
    """Parameter store plus forward passes for both encoders."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary,
                 init_rng: RngStream | None = None, dtype=np.float32):
        if len(vocab) > config.vocab_size:
            raise ConfigError(f"vocab has {len(vocab)} entries but config "
                              f"allows {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        gen = (init_rng or RngStream(0)).generator()
        for name, shape in _param_shapes(config).items():
            if name.endswith((".g",)):
                data = np.ones(shape)
            elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
                data = np.zeros(shape)
            elif name == "text.pos_emb":
                # structured positional basis; learned from here
                data = sinusoidal_table(shape[0], shape[1]).astype(np.float64)
            elif name.endswith("_emb"):
                data = gen.normal(0.0, 0.1, size=shape)
            else:
                # fan-in scaled so activations stay unit scale; conv fan-in
                # includes the kernel width
                if name.endswith("conv1.w") or name.endswith("conv2.w"):
                    fan_in = shape[1] * shape[2]
                else:
                    fan_in = shape[0]
                data = gen.normal(0.0, fan_in ** -0.5, size=shape)
            self.params[name] = nm.tensor(data.astype(np.float64), dtype=dtype,
                                          requires_grad=True)
        self._sin_table = nm.tensor(
            sinusoidal_table(config.speech_frames, config.speech_dim), dtype=dtype)
        self.freeze_speech_blocks(trainable_top=0)

    # -- freezing -------------------------------------------------------

    def freeze_speech_blocks(self, trainable_top: int):
        """Freeze stem + all speech blocks except the top `trainable_top`."""
        if trainable_top > self.config.speech_blocks:
            raise ConfigError(f"cannot unfreeze {trainable_top} of "
                              f"{self.config.speech_blocks} speech blocks")
        first_trainable = self.config.speech_blocks - trainable_top
        for name, p in self.params.items():
            if not name.startswith("speech."):
                continue
            if name.startswith("speech.block"):
                idx = int(name.split(".")[1][len("block"):])
                p.requires_grad = idx >= first_trainable
            else:
                # stem and final norm follow the lowest block
                p.requires_grad = trainable_top >= self.config.speech_blocks
        for p in self.params.values():
            p.grad = None

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.params.items() if p.requires_grad]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward passes -------------------------------------------------

    def _block(self, x: Tensor, prefix: str, heads: int, training: bool,
               rng: RngStream, layer: int, dropout_p: float) -> Tensor:
        p = self.params
        h = nm.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        q = h @ p[f"{prefix}.attn.wq"] + p[f"{prefix}.attn.bq"]
        k = h @ p[f"{prefix}.attn.wk"] + p[f"{prefix}.attn.bk"]
        v = h @ p[f"{prefix}.attn.wv"] + p[f"{prefix}.attn.bv"]
        a = nm.scaled_dot_attention(q, k, v, heads)
        a = a @ p[f"{prefix}.attn.wo"] + p[f"{prefix}.attn.bo"]
        a = nm.dropout(a, dropout_p, training, rng.child(2 * layer))
        x = x + a
        h = nm.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        h = nm.gelu(h @ p[f"{prefix}.mlp.w1"] + p[f"{prefix}.mlp.b1"])
        h = h @ p[f"{prefix}.mlp.w2"] + p[f"{prefix}.mlp.b2"]
        h = nm.dropout(h, dropout_p, training, rng.child(2 * layer + 1))
        return x + h

    def speech_encode(self, m: MelSpectrogram, training: bool = False,
                      rng: RngStream | None = None) -> Tensor:
        """(mels, 2*speech_frames) log-mel -> (speech_frames, speech_dim)."""
        cfg = self.config
        if m.frames != cfg.mel_frames:
            raise ShapeError(f"expected {cfg.mel_frames} mel frames, got {m.frames}")
        if m.mels != cfg.mels:
            raise ShapeError(f"expected {cfg.mels} mel bins, got {m.mels}")
        p = self.params
        rng = rng or RngStream(0)
        x = nm.tensor(m.values.T, dtype=self.dtype)  # (time, mels)
        x = nm.gelu(nm.conv1d(x, p["speech.conv1.w"], p["speech.conv1.b"],
                              stride=1, padding=1))
        x = nm.gelu(nm.conv1d(x, p["speech.conv2.w"], p["speech.conv2.b"],
                              stride=2, padding=1))
        x = x + self._sin_table
        for i in range(cfg.speech_blocks):
            x = self._block(x, f"speech.block{i}", cfg.speech_heads,
                            training, rng.child(100 + i), i, cfg.dropout_p)
        return nm.layer_norm(x, p["speech.ln_post.g"], p["speech.ln_post.b"])

    def pool_project(self, frames: Tensor) -> Tensor:
        """Mean-pool time by pool_factor, then project to text_dim."""
        pooled = nm.mean_pool_time(frames, self.config.pool_factor)
        return pooled @ self.params["proj.w"] + self.params["proj.b"]

    def speech_prefix(self, m: MelSpectrogram, training: bool = False,
                      rng: RngStream | None = None) -> Tensor:
        return self.pool_project(self.speech_encode(m, training, rng))

    def forward(self, tokens: np.ndarray, prefix: Tensor | None,
                training: bool = False, rng: RngStream | None = None,
                dropout_p: float | None = None) -> Tensor:
        """Token ids (prefix slots first) + optional speech prefix -> logits.

        dropout_p overrides the config rate (used for MC-Dropout inference,
        where dropout stays active while layer norm is unaffected).
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        seq = len(tokens)
        if seq < cfg.prefix_len or \
                not np.all(tokens[:cfg.prefix_len] == Vocabulary.PREFIX):
            raise ShapeError(f"token sequence must begin with {cfg.prefix_len} "
                             f"prefix ids")
        if seq > cfg.prefix_len + cfg.max_text_len:
            raise ShapeError(f"text length {seq - cfg.prefix_len} exceeds "
                             f"maximum {cfg.max_text_len}")
        if prefix is not None and prefix.shape != (cfg.prefix_len, cfg.text_dim):
            raise ShapeError(f"speech prefix shape {prefix.shape} != "
                             f"({cfg.prefix_len}, {cfg.text_dim})")
        p = self.params
        rng = rng or RngStream(0)
        rate = cfg.dropout_p if dropout_p is None else dropout_p
        x = nm.embedding(p["text.char_emb"], tokens) + \
            nm.embedding(p["text.pos_emb"], np.arange(seq))
        if prefix is not None:
            pad = nm.zeros((seq - cfg.prefix_len, cfg.text_dim), dtype=self.dtype)
            x = x + nm.concat([prefix, pad], axis=0)
        for i in range(cfg.text_layers):
            x = self._block(x, f"text.block{i}", cfg.text_heads,
                            training, rng.child(200 + i), i, rate)
        x = nm.layer_norm(x, p["text.ln_f.g"], p["text.ln_f.b"])
        return x @ p["text.head.w"] + p["text.head.b"]

    def encode_text(self, raw: str) -> np.ndarray:
        return np.asarray(encode_tokens(raw, self.vocab, self.config.prefix_len),
                          dtype=np.int64)


def speech_embedding_dropout(prefix: Tensor, p: float, training: bool,
                             rng: RngStream) -> Tensor:
    """Zero the entire prefix with probability p (one draw per sample); no
    rescaling; identity in eval mode."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"speech embedding dropout p={p} outside [0, 1]")
    if not training or p == 0.0:
        return prefix
    if rng.generator().random() < p:
        return prefix * 0.0
    return prefix
