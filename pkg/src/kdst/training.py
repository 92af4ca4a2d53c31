"""Adam, learning-rate schedule, batching, and the training regimes.

Regimes:
    asr            speech -> source transcript
    mt             source text -> translation (the teacher)
    st             speech -> translation from random initialization
    st-pretrained  st initialized from an ASR encoder and an MT decoder
    st-kd          st (optionally pretrained) trained on (1 - lambda) * L_st + lambda * L_kd
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .audio import featurize, read_wav
from .decoding import greedy_decode_batch
from .errors import ConfigError, NumericError
from .losses import LossBreakdown, combined_loss, kd_loss, st_loss, teacher_distributions
from .metrics import bleu, corpus_wer
from .models import (TransformerConfig, TransformerModel, build_model, decode, encode, init_from_pretrained,
                     load_checkpoint, save_checkpoint)
from .nn import Dropout
from .synth import read_manifest
from .text import BOS_ID, PAD_ID, TextCodec

log = logging.getLogger(__name__)

REGIMES = ("asr", "mt", "st", "st-pretrained", "st-kd")
TASK_OF = {"asr": "ASR", "mt": "MT", "st": "ST", "st-pretrained": "ST", "st-kd": "ST"}


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        g64 = g.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g64
        v *= b2
        v += (1.0 - b2) * g64 * g64
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.dtype)


def lr_schedule(step: int, d_model: int, warmup: int, factor: float = 1.0) -> float:
    """Inverse-square-root decay after a linear warmup."""
    if step < 1 or warmup < 1:
        raise ConfigError("step and warmup must be >= 1")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = (g * s).astype(g.dtype)
    return total


# --------------------------------------------------------------------- data

@dataclass
class Example:
    id: str
    features: np.ndarray | None  # [S, F] stacked acoustic frames
    src_ids: np.ndarray  # source transcript ids, eos-terminated
    tgt_ids: np.ndarray  # translation ids, eos-terminated
    source: str = ""
    target: str = ""


@dataclass
class Batch:
    ids: list[str]
    enc: np.ndarray  # int ids [B, S] or features [B, S, F]
    enc_lengths: np.ndarray
    dec_in: np.ndarray  # [B, T], bos-shifted
    dec_out: np.ndarray  # [B, T]
    pad_mask: np.ndarray  # True at real target positions
    src_ids: np.ndarray  # padded source ids, for the teacher
    src_lengths: np.ndarray

    @property
    def tokens(self) -> int:
        return int(self.pad_mask.sum())


_FEATURE_MEMO: dict[tuple, dict[str, np.ndarray]] = {}


def load_corpus(manifest, codec: TextCodec, with_features: bool = True, n_mels: int = 80,
                n_left: int = 3, stride: int = 3) -> list[Example]:
    """Featurize and tokenize every manifest row. Features are memoized per process."""
    rows = read_manifest(manifest, check_audio=with_features)
    key = (str(Path(manifest).resolve()), n_mels, n_left, stride)
    feats = _FEATURE_MEMO.get(key) if with_features else None
    if with_features and feats is None:
        feats = {r.example_id: featurize(read_wav(r.audio_path), n_mels, n_left, stride).frames for r in rows}
        _FEATURE_MEMO[key] = feats
    out = []
    for r in rows:
        out.append(Example(r.example_id, feats[r.example_id] if feats else None,
                           np.array(codec.encode(r.source), dtype=np.int64),
                           np.array(codec.encode(r.target), dtype=np.int64), r.source, r.target))
    return out


def task_views(ex: Example, task: str) -> tuple[np.ndarray, np.ndarray]:
    """(encoder input, decoder target) of one example for a task."""
    if task == "MT":
        return ex.src_ids, ex.tgt_ids
    if ex.features is None:
        raise ConfigError(f"{task} needs acoustic features")
    return ex.features, (ex.src_ids if task == "ASR" else ex.tgt_ids)


def _pad(seqs: Sequence[np.ndarray], fill=0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    shape = (len(seqs), lengths.max()) + seqs[0].shape[1:]
    out = np.full(shape, fill, dtype=seqs[0].dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def collate(examples: Sequence[Example], task: str) -> Batch:
    encs, tgts = zip(*(task_views(e, task) for e in examples))
    enc, enc_len = _pad(encs, PAD_ID if task == "MT" else 0)
    dec_out, tgt_len = _pad(tgts, PAD_ID)
    dec_in = np.concatenate([np.full((len(examples), 1), BOS_ID, dtype=dec_out.dtype), dec_out[:, :-1]], axis=1)
    pad_mask = np.arange(dec_out.shape[1])[None, :] < tgt_len[:, None]
    dec_in = np.where(pad_mask, dec_in, PAD_ID)
    src, src_len = _pad([e.src_ids for e in examples], PAD_ID)
    return Batch([e.id for e in examples], enc, enc_len, dec_in, dec_out, pad_mask, src, src_len)


def example_cost(ex: Example, task: str) -> tuple[int, int]:
    enc, tgt = task_views(ex, task)
    return len(enc), len(tgt)


def make_batches(examples: Sequence[Example], task: str, token_budget: int, seed: int, epoch: int = 0,
                 sort_by_length: bool = True, max_src_len: int | None = None,
                 max_tgt_len: int | None = None) -> tuple[list[list[int]], int]:
    """Partition one epoch into batches of example indices.

    A batch costs ``n * (longest source + longest target)``; it never exceeds
    ``token_budget`` unless it holds a single example. Overlength examples are
    skipped. Returns (batches, skipped count).
    """
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(examples))
    costs = [example_cost(examples[i], task) for i in range(len(examples))]
    keep, skipped = [], 0
    for i in order:
        s, t = costs[i]
        if (max_src_len and s > max_src_len) or (max_tgt_len and t > max_tgt_len):
            skipped += 1
            continue
        keep.append(int(i))
    if skipped:
        log.warning("skipped %d overlength examples", skipped)
    if sort_by_length:
        keep.sort(key=lambda i: costs[i][0] + costs[i][1])  # stable: ties keep shuffled order
    batches, cur, ms, mt = [], [], 0, 0
    for i in keep:
        s, t = costs[i]
        ns, nt = max(ms, s), max(mt, t)
        if cur and (len(cur) + 1) * (ns + nt) > token_budget:
            batches.append(cur)
            cur, ns, nt = [], s, t
        cur.append(i)
        ms, mt = ns, nt
    if cur:
        batches.append(cur)
    return [batches[k] for k in rng.permutation(len(batches))], skipped


def batch_stream(examples: Sequence[Example], task: str, token_budget: int, seed: int, **kw) -> Iterator[Batch]:
    epoch = 0
    while True:
        batches, _ = make_batches(examples, task, token_budget, seed, epoch, **kw)
        for idx in batches:
            yield collate([examples[i] for i in idx], task)
        epoch += 1


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    regime: str = "mt"
    train_manifest: str = ""
    dev_manifest: str = ""
    codec_dir: str = ""
    out_dir: str = "run"
    lam: float = 1.0
    temperature: float = 1.0
    token_budget: int = 2000
    max_steps: int = 2000
    warmup: int = 400
    lr_factor: float = 1.0
    clip: float = 5.0
    seed: int = 1
    eval_every: int = 200
    checkpoint_every: int = 0
    dev_limit: int = 0
    teacher: str = ""
    asr: str = ""
    mt: str = ""
    d_model: int = 64
    d_ff: int = 256
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    dropout: float = 0.1
    max_src_len: int = 256
    max_tgt_len: int = 64

    def validate(self) -> TrainConfig:
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.regime == "st-kd" and not self.teacher:
            raise ConfigError("the st-kd regime requires a teacher checkpoint")
        if self.regime == "st-pretrained" and not (self.asr and self.mt):
            raise ConfigError("the st-pretrained regime requires ASR and MT checkpoints")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.max_steps < 1 or self.token_budget < 1 or self.warmup < 1:
            raise ConfigError("max_steps, token_budget and warmup must be positive")
        return self

    @property
    def task(self) -> str:
        return TASK_OF[self.regime]

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.regime == "st-kd" else 0.0

    def model_config(self, vocab_size: int, feat_dim: int) -> TransformerConfig:
        return TransformerConfig(task=self.task, d_model=self.d_model, d_ff=self.d_ff, h=self.heads,
                                 n_encoder_layers=self.enc_layers, n_decoder_layers=self.dec_layers,
                                 dropout_p=self.dropout, src_vocab=vocab_size, tgt_vocab=vocab_size,
                                 feat_dim=feat_dim, max_src_len=self.max_src_len,
                                 max_tgt_len=self.max_tgt_len).validate()

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> TrainConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            k = k.strip().replace("-", "_")
            if k == "lambda":
                k = "lam"
            if k not in kinds:
                raise ConfigError(f"unknown training config key {k!r}")
            vals[k] = _parse(kinds[k], v.strip())
        vals.update(overrides)
        return cls(**vals)


def _parse(kind: str, v: str):
    if kind == "int":
        return int(v)
    if kind == "float":
        return float(v)
    return v


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    best_metric: float | None
    steps: int
    log_path: Path


class Trainer:
    """Owns the student, optimizer state, data and (for st-kd) the frozen teacher."""

    def __init__(self, cfg: TrainConfig, train: Sequence[Example] | None = None,
                 dev: Sequence[Example] | None = None, codec: TextCodec | None = None):
        self.cfg = cfg.validate()
        self.codec = codec or TextCodec.load(cfg.codec_dir)
        speech = cfg.task != "MT"
        self.train_set = list(train) if train is not None else load_corpus(cfg.train_manifest, self.codec, speech)
        if dev is None and cfg.dev_manifest:
            dev = load_corpus(cfg.dev_manifest, self.codec, speech)
        self.dev_set = list(dev or [])
        if cfg.dev_limit:
            self.dev_set = self.dev_set[: cfg.dev_limit]
        feat_dim = self.train_set[0].features.shape[1] if speech else 0
        mcfg = cfg.model_config(len(self.codec.vocab), feat_dim or 320)
        self.model = build_model(mcfg, seed=cfg.seed)
        self.teacher: TransformerModel | None = None
        if cfg.regime == "st-pretrained":
            self.model = init_from_pretrained(self.model, load_checkpoint(cfg.asr), load_checkpoint(cfg.mt))
        elif cfg.regime == "st-kd":
            self.teacher = load_checkpoint(cfg.teacher).requires_grad_(False)
            if self.teacher.cfg.task != "MT":
                raise ConfigError("the teacher checkpoint must be an MT model")
            if self.teacher.cfg.tgt_vocab != mcfg.tgt_vocab:
                raise ConfigError("teacher and student target vocabularies differ")
            if cfg.asr:
                self.model = init_from_pretrained(self.model, load_checkpoint(cfg.asr), self.teacher)
        self.state = AdamState()
        self.step = 0
        self._stream = batch_stream(self.train_set, cfg.task, cfg.token_budget, cfg.seed,
                                    max_src_len=mcfg.max_src_len, max_tgt_len=mcfg.max_tgt_len)

    def next_batch(self) -> Batch:
        return next(self._stream)

    def losses(self, batch: Batch, step: int, training: bool = True) -> LossBreakdown:
        drop = Dropout(self.model.cfg.dropout_p, self.cfg.seed, step, training)
        memory, mask = encode(self.model, batch.enc, batch.enc_lengths, drop)
        logits, _ = decode(self.model, memory, mask, batch.dec_in, drop)
        l_st = st_loss(logits, batch.dec_out, batch.pad_mask)
        l_kd = None
        if self.teacher is not None:
            q = teacher_distributions(self.teacher, batch.src_ids, batch.dec_in, batch.src_lengths,
                                      self.cfg.temperature)
            l_kd = kd_loss(logits, q, batch.pad_mask, self.cfg.temperature)
        return combined_loss(l_st, l_kd, self.cfg.effective_lambda, batch.tokens)

    def gradients(self, batch: Batch, step: int) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
        self.model.zero_grad()
        losses = self.losses(batch, step)
        T.backward(losses.l_all)
        return losses, {k: p.grad for k, p in self.model.params.items()}

    def train_step(self) -> dict:
        self.step += 1
        batch = self.next_batch()
        losses, grads = self.gradients(batch, self.step)
        if not math.isfinite(float(losses.l_all.data)):
            raise NumericError(f"loss diverged at step {self.step}")
        norm = clip_grad_norm(grads, self.cfg.clip)
        lr = lr_schedule(self.step, self.model.cfg.d_model, self.cfg.warmup, self.cfg.lr_factor)
        adam_step(self.model.params, grads, self.state, lr)
        rec = {"step": self.step, "regime": self.cfg.regime, **losses.as_dict(), "lr": lr, "grad_norm": norm}
        rec.pop("tokens")
        return rec

    def evaluate(self, examples: Sequence[Example] | None = None, max_len: int | None = None) -> dict:
        """Greedy-decode a dev set; BLEU for translation tasks, WER for ASR."""
        examples = self.dev_set if examples is None else examples
        if not examples:
            return {}
        return evaluate_greedy(self.model, examples, self.codec, max_len)

    def train(self) -> TrainResult:
        out = Path(self.cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train.config").write_text(self.cfg.to_text(), encoding="utf-8")
        best_path, last_path, log_path = out / "best.ckpt", out / "last.ckpt", out / "metrics.jsonl"
        higher = self.cfg.task != "ASR"
        best = None
        with open(log_path, "w", encoding="utf-8") as metrics:
            while self.step < self.cfg.max_steps:
                rec = self.train_step()
                done = self.step == self.cfg.max_steps
                if self.dev_set and (done or (self.cfg.eval_every and self.step % self.cfg.eval_every == 0)):
                    scores = self.evaluate()
                    rec.update({f"dev_{k}": v for k, v in scores.items()})
                    value = scores["bleu"] if higher else scores["wer"]
                    if best is None or (value > best if higher else value < best):
                        best = value
                        save_checkpoint(self.model, best_path)
                if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    save_checkpoint(self.model, last_path)
                metrics.write(json.dumps(rec) + "\n")
        save_checkpoint(self.model, last_path)
        if best is None:
            save_checkpoint(self.model, best_path)
        return TrainResult(best_path, last_path, best, self.step, log_path)


def evaluate_greedy(model: TransformerModel, examples: Sequence[Example], codec: TextCodec,
                    max_len: int | None = None, batch_size: int = 64) -> dict:
    task = model.cfg.task
    max_len = max_len or model.cfg.max_tgt_len - 1
    hyps, refs = [], []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        b = collate(chunk, task)
        for ids, ex in zip(greedy_decode_batch(model, b.enc, b.enc_lengths, max_len), chunk):
            hyps.append(codec.decode(ids))
            refs.append(codec.decode(ex.src_ids if task == "ASR" else ex.tgt_ids))
    if task == "ASR":
        return {"wer": corpus_wer(hyps, refs)}
    return {"bleu": bleu(hyps, refs)}


def train(cfg: TrainConfig, **kw) -> TrainResult:
    return Trainer(cfg, **kw).train()


def with_overrides(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, **changes)
