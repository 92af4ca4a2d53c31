"""ASR, MT and ST Transformer models sharing one encoder-decoder architecture.

The three tasks differ only in the encoder input block: MT embeds source
tokens, while ASR and ST project stacked acoustic features. Decoders predict
the target (or, for ASR, the source transcript) over a shared vocabulary.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .audio import project_features
from .errors import ConfigError, InputError, FormatError
from .nn import AttentionParams, Dropout, FfnParams, NO_DROPOUT
from .tensor import Tensor

TASKS = ("ASR", "MT", "ST")
MAGIC = b"DSTC"
VERSION = 1


@dataclass(frozen=True)
class TransformerConfig:
    task: str = "MT"
    d_model: int = 64
    d_ff: int = 256
    h: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    dropout_p: float = 0.1
    src_vocab: int = 0  # MT encoder embedding rows; unused for speech input
    tgt_vocab: int = 0
    feat_dim: int = 320
    max_src_len: int = 256
    max_tgt_len: int = 64
    tie_embeddings: bool = False
    ln_eps: float = 1e-5

    def validate(self) -> TransformerConfig:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.h < 1 or self.d_model % self.h:
            raise ConfigError(f"h={self.h} must divide d_model={self.d_model}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positions")
        if self.n_encoder_layers < 1 or self.n_decoder_layers < 1:
            raise ConfigError("layer counts must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.tgt_vocab < 5 or (self.task == "MT" and self.src_vocab < 5):
            raise ConfigError("vocabulary sizes must include the reserved tokens and at least one more")
        if self.task != "MT" and self.feat_dim < 1:
            raise ConfigError("speech models need feat_dim >= 1")
        return self

    @property
    def speech_input(self) -> bool:
        return self.task in ("ASR", "ST")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> TransformerConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            if k not in kinds:
                raise ConfigError(f"unknown model config key {k!r}")
            kind = kinds[k]
            if kind == "bool":
                vals[k] = v.strip().lower() in ("1", "true", "yes")
            elif kind == "int":
                vals[k] = int(v)
            elif kind == "float":
                vals[k] = float(v)
            else:
                vals[k] = v.strip()
        return cls(**vals).validate()


def shape_table(cfg: TransformerConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list of every parameter implied by ``cfg``."""
    d, f = cfg.d_model, cfg.d_ff
    rows: list[tuple[str, tuple[int, ...]]] = []

    def attn(prefix):
        rows.extend((f"{prefix}.{w}", (d, d)) for w in ("w_q", "w_k", "w_v", "w_o"))

    def norm(prefix):
        rows.extend([(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))])

    def ffn(prefix):
        rows.extend([(f"{prefix}.w_1", (d, f)), (f"{prefix}.b_1", (f,)), (f"{prefix}.w_2", (f, d)), (f"{prefix}.b_2", (d,))])

    if cfg.speech_input:
        rows.append(("enc.proj", (cfg.feat_dim, d)))
        norm("enc.proj_norm")
    else:
        rows.append(("enc.embed", (cfg.src_vocab, d)))
    for i in range(cfg.n_encoder_layers):
        attn(f"enc.{i}.self_attn")
        norm(f"enc.{i}.norm1")
        ffn(f"enc.{i}.ffn")
        norm(f"enc.{i}.norm2")
    rows.append(("dec.embed", (cfg.tgt_vocab, d)))
    for i in range(cfg.n_decoder_layers):
        attn(f"dec.{i}.self_attn")
        norm(f"dec.{i}.norm1")
        attn(f"dec.{i}.cross_attn")
        norm(f"dec.{i}.norm2")
        ffn(f"dec.{i}.ffn")
        norm(f"dec.{i}.norm3")
    if not cfg.tie_embeddings:
        rows.append(("dec.out.w", (d, cfg.tgt_vocab)))
    rows.append(("dec.out.b", (cfg.tgt_vocab,)))
    return rows


class TransformerModel:
    def __init__(self, cfg: TransformerConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def requires_grad_(self, flag: bool = True) -> TransformerModel:
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def astype(self, dtype) -> TransformerModel:
        return TransformerModel(self.cfg, {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                                           for k, v in self.params.items()})

    def copy(self) -> TransformerModel:
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def _attn(self, prefix: str) -> AttentionParams:
        p = self.params
        return AttentionParams(p[f"{prefix}.w_q"], p[f"{prefix}.w_k"], p[f"{prefix}.w_v"], p[f"{prefix}.w_o"], self.cfg.h)

    def _ffn(self, prefix: str) -> FfnParams:
        p = self.params
        return FfnParams(p[f"{prefix}.w_1"], p[f"{prefix}.b_1"], p[f"{prefix}.w_2"], p[f"{prefix}.b_2"])

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"], self.cfg.ln_eps)


def build_model(cfg: TransformerConfig, seed: int = 0, dtype=np.float32) -> TransformerModel:
    """Xavier-uniform matrices, zero biases, unit layer-norm gains."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shape_table(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-bound, bound, size=shape)
        elif leaf == "gain":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True)
    return TransformerModel(cfg, params)


# ------------------------------------------------------------------ forward

def _embed(model: TransformerModel, name: str, ids: np.ndarray) -> Tensor:
    x = T.scale(T.embedding(model[name], ids), math.sqrt(model.cfg.d_model))
    pe = nn.positional_encoding(ids.shape[-1], model.cfg.d_model, dtype=x.dtype)
    return T.add(x, Tensor(pe))


def encode(model: TransformerModel, enc_input, src_lengths=None, dropout: Dropout = NO_DROPOUT):
    """Run the encoder on a batch.

    ``enc_input`` is int ids ``[B, S]`` (MT) or features ``[B, S, feat_dim]``
    (ASR/ST); ``src_lengths`` marks real positions (default: all).
    Returns (memory ``[B, S, d_model]``, key mask ``[B, 1, 1, S]``).
    """
    cfg = model.cfg
    if cfg.speech_input:
        feats = enc_input if isinstance(enc_input, Tensor) else np.asarray(enc_input)
        if feats.ndim != 3:
            raise InputError(f"speech encoder expects [B, S, F] features, got shape {feats.shape}")
        x = project_features(feats, model["enc.proj"], model["enc.proj_norm.gain"], model["enc.proj_norm.bias"])
    else:
        ids = np.asarray(enc_input)
        if ids.ndim != 2 or ids.dtype.kind not in "iu":
            raise InputError(f"text encoder expects integer ids [B, S], got {ids.dtype} {ids.shape}")
        x = _embed(model, "enc.embed", ids)
    b, s = x.shape[0], x.shape[1]
    if s == 0:
        raise InputError("empty encoder input")
    if s > cfg.max_src_len:
        raise InputError(f"encoder input length {s} exceeds max_src_len {cfg.max_src_len}")
    mask = nn.padding_mask(np.full(b, s) if src_lengths is None else src_lengths, s)
    x = dropout(x)
    for i in range(cfg.n_encoder_layers):
        a, _ = nn.multi_head_attention(x, x, x, mask, model._attn(f"enc.{i}.self_attn"), dropout)
        x = model._norm(f"enc.{i}.norm1", T.add(x, dropout(a)))
        f = nn.feed_forward(x, model._ffn(f"enc.{i}.ffn"))
        x = model._norm(f"enc.{i}.norm2", T.add(x, dropout(f)))
    return x, mask


def decode(model: TransformerModel, memory: Tensor, src_mask: np.ndarray, dec_ids,
           dropout: Dropout = NO_DROPOUT) -> tuple[Tensor, list[Tensor]]:
    """Teacher-forced decoder pass. Returns logits ``[B, T, V]`` and per-layer
    encoder-decoder attention ``[B, h, T, S]``."""
    cfg = model.cfg
    ids = np.asarray(dec_ids)
    t = ids.shape[-1]
    if t > cfg.max_tgt_len:
        raise InputError(f"decoder input length {t} exceeds max_tgt_len {cfg.max_tgt_len}")
    x = dropout(_embed(model, "dec.embed", ids))
    causal = nn.causal_mask(t)
    cross = []
    for i in range(cfg.n_decoder_layers):
        a, _ = nn.multi_head_attention(x, x, x, causal, model._attn(f"dec.{i}.self_attn"), dropout)
        x = model._norm(f"dec.{i}.norm1", T.add(x, dropout(a)))
        c, w = nn.multi_head_attention(x, memory, memory, src_mask, model._attn(f"dec.{i}.cross_attn"), dropout)
        cross.append(w)
        x = model._norm(f"dec.{i}.norm2", T.add(x, dropout(c)))
        f = nn.feed_forward(x, model._ffn(f"dec.{i}.ffn"))
        x = model._norm(f"dec.{i}.norm3", T.add(x, dropout(f)))
    w_out = T.transpose(model["dec.embed"], (1, 0)) if cfg.tie_embeddings else model["dec.out.w"]
    logits = T.add(T.matmul(x, w_out), model["dec.out.b"])
    return logits, cross


def forward(model: TransformerModel, encoder_input, decoder_input_ids, training: bool = False,
            src_lengths=None, seed: int = 0, step: int = 0):
    """Full encoder-decoder pass.

    Batched inputs give logits ``[B, T, V]``; a single example (1-D decoder
    ids) gives ``[T, V]`` and attention ``[h, T, S]`` per layer.
    """
    dec = np.asarray(decoder_input_ids)
    single = dec.ndim == 1
    enc = encoder_input
    if single:
        dec = dec[None]
        enc = np.asarray(enc)[None]
    drop = Dropout(model.cfg.dropout_p, seed, step, training)
    memory, mask = encode(model, enc, src_lengths, drop)
    logits, attn = decode(model, memory, mask, dec, drop)
    if single:
        logits = T.reshape(logits, logits.shape[1:])
        attn = [T.reshape(a, a.shape[1:]) for a in attn]
    return logits, attn


# --------------------------------------------------------- pretrained init

def init_from_pretrained(st: TransformerModel, asr: TransformerModel, mt: TransformerModel) -> TransformerModel:
    """Copy the ASR encoder and the MT decoder into a fresh ST model."""
    if st.cfg.task != "ST" or asr.cfg.task != "ASR" or mt.cfg.task != "MT":
        raise ConfigError("init_from_pretrained expects (ST, ASR, MT) models")
    params = dict(st.params)
    for name, p in st.params.items():
        donor = asr if name.startswith("enc.") else mt
        src = donor.params.get(name)
        if src is None:
            raise ConfigError(f"parameter {name} missing from the {donor.cfg.task} model")
        if src.shape != p.shape:
            raise ConfigError(f"parameter {name}: ST shape {p.shape} vs {donor.cfg.task} shape {src.shape}")
        params[name] = Tensor(src.data.copy(), requires_grad=p.requires_grad)
    return TransformerModel(st.cfg, params)


# -------------------------------------------------------------- checkpoints

def config_path(path) -> Path:
    return Path(str(path) + ".config")


def save_checkpoint(model: TransformerModel, path) -> None:
    """Binary parameter records plus a sidecar ``key=value`` config file.

    Layout: b"DSTC", u16 version, then per parameter: u32 name length, UTF-8
    name, u32 rank, u32 extents, little-endian float32 values.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    config_path(path).write_text(model.cfg.to_text(), encoding="utf-8")


def load_checkpoint(path) -> TransformerModel:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    cfg = TransformerConfig.from_text(config_path(path).read_text(encoding="utf-8"))
    pos, params = 6, {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4: pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            params[name] = Tensor(data.astype(np.float32), requires_grad=True)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    expected = shape_table(cfg)
    if [(k, tuple(v.shape)) for k, v in params.items()] != expected:
        raise FormatError(f"{path}: parameter table does not match its config")
    return TransformerModel(cfg, params)


def with_task(cfg: TransformerConfig, task: str, **changes) -> TransformerConfig:
    return replace(cfg, task=task, **changes).validate()
