"""Ground-truth and distillation losses for the speech-translation student.

The student is trained on a mix of token-level cross-entropy against the
reference translation and cross-entropy against the teacher's full output
distribution under teacher forcing.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, InputError
from .models import TransformerModel, decode, encode
from .tensor import Tensor, no_grad


@dataclass
class TeacherDistribution:
    probs: np.ndarray  # [..., N, V]

    @property
    def shape(self):
        return self.probs.shape


@dataclass
class LossBreakdown:
    l_st: Tensor
    l_kd: Tensor | None
    l_all: Tensor
    lam: float
    token_count: int

    def as_dict(self) -> dict:
        return {"l_st": float(self.l_st.data), "l_kd": None if self.l_kd is None else float(self.l_kd.data),
                "l_all": float(self.l_all.data), "lambda": self.lam, "tokens": self.token_count}


def _mask_weights(pad_mask, shape, dtype) -> tuple[np.ndarray, int]:
    """``pad_mask`` is True at real (non-pad) target positions."""
    keep = np.ones(shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if keep.shape != shape:
        raise ContractError(f"pad mask shape {keep.shape} does not match targets {shape}")
    count = int(keep.sum())
    if count == 0:
        raise InputError("every target position is padding")
    return keep.astype(dtype) / dtype.type(count), count


def st_loss(logits: Tensor, target_ids, pad_mask=None) -> Tensor:
    """Mean negative log-likelihood of the reference tokens over non-pad positions."""
    target_ids = np.asarray(target_ids)
    if logits.shape[:-1] != target_ids.shape:
        raise ContractError(f"logits {logits.shape} vs targets {target_ids.shape}")
    v = logits.shape[-1]
    if target_ids.size and (target_ids.min() < 0 or target_ids.max() >= v):
        raise ContractError(f"target ids outside [0, {v})")
    w, _ = _mask_weights(pad_mask, target_ids.shape, logits.dtype)
    picked = T.take_last(T.log_softmax(logits, axis=-1), target_ids)
    return T.neg(T.sum_(T.mul(picked, Tensor(w))))


def kd_loss(student_logits: Tensor, teacher: TeacherDistribution | np.ndarray, pad_mask=None,
            temperature: float = 1.0) -> Tensor:
    """Mean over non-pad positions of -sum_k Q[t, k] log P[t, k]; Q is a constant."""
    q = teacher.probs if isinstance(teacher, TeacherDistribution) else np.asarray(teacher)
    if q.shape != student_logits.shape:
        raise ContractError(f"teacher distribution {q.shape} vs student logits {student_logits.shape}")
    logits = student_logits if temperature == 1.0 else T.scale(student_logits, 1.0 / temperature)
    w, _ = _mask_weights(pad_mask, q.shape[:-1], student_logits.dtype)
    logp = T.log_softmax(logits, axis=-1)
    weighted = Tensor((q * w[..., None]).astype(student_logits.dtype))
    return T.neg(T.sum_(T.mul(logp, weighted)))


def combined_loss(l_st: Tensor, l_kd: Tensor | None, lam: float, token_count: int = 0) -> LossBreakdown:
    """(1 - lam) * l_st + lam * l_kd."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if l_kd is None:
        if lam != 0.0:
            raise ContractError("a distillation loss is required when lambda > 0")
        return LossBreakdown(l_st, None, l_st, lam, token_count)
    total = T.add(T.scale(l_st, 1.0 - lam), T.scale(l_kd, lam))
    return LossBreakdown(l_st, l_kd, total, lam, token_count)


def teacher_distributions(teacher: TransformerModel, x_ids, y_ids, src_lengths=None,
                          temperature: float = 1.0) -> TeacherDistribution:
    """Teacher-forced MT output distributions for every target position.

    ``y_ids`` is the decoder input (bos-shifted reference). Accepts a single
    example (1-D ids) or a padded batch.
    """
    if teacher.cfg.task != "MT":
        raise ConfigError(f"the teacher must be an MT model, got {teacher.cfg.task}")
    x, y = np.asarray(x_ids), np.asarray(y_ids)
    single = y.ndim == 1
    if single:
        x, y = x[None], y[None]
    with no_grad():
        memory, mask = encode(teacher, x, src_lengths)
        logits, _ = decode(teacher, memory, mask, y)
        z = logits.data.astype(np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    p = p.astype(np.float32)
    return TeacherDistribution(p[0] if single else p)


class TeacherCache:
    """Per-example teacher rows on disk: raw little-endian float32, |V| per row."""

    def __init__(self, directory, vocab_size: int):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.vocab_size = vocab_size

    def _path(self, example_id: str) -> Path:
        return self.dir / f"{example_id}.f32"

    def get(self, example_id: str) -> np.ndarray | None:
        path = self._path(example_id)
        if not path.exists():
            return None
        return np.fromfile(path, dtype="<f4").reshape(-1, self.vocab_size)

    def put(self, example_id: str, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype="<f4")
        if rows.ndim != 2 or rows.shape[1] != self.vocab_size:
            raise ContractError(f"teacher rows must be [N, {self.vocab_size}], got {rows.shape}")
        rows.tofile(self._path(example_id))
