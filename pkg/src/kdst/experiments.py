"""Toy-scale regime comparison on the tone corpus.

Per seed: an MT teacher and an ASR model are trained first. They initialize a
pretrained ST baseline and a sweep of distilled ST students over the teacher
weight. Every model is then beam-decoded on the dev set.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoding import attention_matrices, beam_search, pipeline_translate
from .errors import ConfigError
from .metrics import bleu, corpus_wer
from .models import TransformerModel, load_checkpoint
from .synth import SynthTaskSpec, generate_synthetic_dataset, read_manifest
from .text import TextCodec, build_codec
from .training import Example, TrainConfig, Trainer, load_corpus

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class ExperimentConfig:
    out_dir: str = "experiment"
    data_dir: str = ""
    seeds: tuple[int, ...] = (1, 2, 3)
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    label_noise: float = 0.3
    data_seed: int = 0
    n_train: int = 2000
    n_dev: int = 200
    num_merges: int = 500
    mt_steps: int = 800
    asr_steps: int = 800
    st_steps: int = 500
    lr_factor: float = 0.5
    warmup: int = 400
    st_warmup: int = 100  # fine-tuning starts from trained weights, so a short ramp is enough
    token_budget: int = 2000
    beam_size: int = 4
    max_len: int = 20
    train_scratch: bool = True
    base: dict = field(default_factory=dict)

    def train_config(self, regime: str, seed: int, out_dir: Path, steps: int, **kw) -> TrainConfig:
        warmup = self.st_warmup if regime.startswith("st") else self.warmup
        fields = dict(lr_factor=self.lr_factor, warmup=warmup, token_budget=self.token_budget, eval_every=0)
        return TrainConfig(regime=regime, out_dir=str(out_dir), max_steps=steps, seed=seed,
                           **{**fields, **self.base, **kw}).validate()


@dataclass
class Corpus:
    codec: TextCodec
    train: list[Example]
    dev: list[Example]
    data_dir: Path


def prepare_corpus(cfg: ExperimentConfig) -> Corpus:
    """Generate the tone corpus (unless it exists) and learn the shared codec on train text."""
    data = Path(cfg.data_dir or Path(cfg.out_dir) / "data")
    if not (data / "train.tsv").exists():
        spec = SynthTaskSpec(n_train=cfg.n_train, n_dev=cfg.n_dev, label_noise=cfg.label_noise, seed=cfg.data_seed)
        generate_synthetic_dataset(spec, data)
    codec_dir = data / "codec"
    if (codec_dir / "vocab.tsv").exists():
        codec = TextCodec.load(codec_dir)
    else:
        rows = read_manifest(data / "train.tsv")
        codec = build_codec([r.source for r in rows] + [r.target for r in rows], cfg.num_merges)
        codec.save(codec_dir)
    return Corpus(codec, load_corpus(data / "train.tsv", codec), load_corpus(data / "dev.tsv", codec), data)


# ------------------------------------------------------------ scoring

def _encoder_input(model: TransformerModel, ex: Example) -> np.ndarray:
    return ex.features if model.cfg.speech_input else np.asarray(ex.src_ids, dtype=np.int64)


def beam_decode(model: TransformerModel, examples: Sequence[Example], codec: TextCodec,
                beam_size: int = 4, max_len: int = 20) -> list[str]:
    return [codec.decode(beam_search(model, _encoder_input(model, ex), beam_size, max_len).tokens)
            for ex in examples]


def score(model: TransformerModel, examples: Sequence[Example], codec: TextCodec,
          beam_size: int = 4, max_len: int = 20) -> tuple[float, list[str]]:
    """Dev BLEU for translation models, WER for ASR."""
    hyps = beam_decode(model, examples, codec, beam_size, max_len)
    if model.cfg.task == "ASR":
        return corpus_wer(hyps, [codec.decode(ex.src_ids) for ex in examples]), hyps
    return bleu(hyps, [codec.decode(ex.tgt_ids) for ex in examples]), hyps


def pipeline_bleu(asr: TransformerModel, mt: TransformerModel, examples: Sequence[Example], codec: TextCodec,
                  beam_size: int = 4, max_len: int = 20) -> float:
    hyps = []
    for ex in examples:
        hyps.append(codec.decode(pipeline_translate(asr, mt, ex.features, codec, beam_size, max_len)))
    return bleu(hyps, [codec.decode(ex.tgt_ids) for ex in examples])


def reversal_dominance(model: TransformerModel, examples: Sequence[Example]) -> float:
    """Mean top-layer, head-averaged attention on the reversed source position, over 1/S.

    Only word positions count: target word t of n aligns with source word n-1-t;
    the trailing eos rows and columns are left out of the average.
    """
    ratios = []
    for ex in examples:
        top = attention_matrices(model, _encoder_input(model, ex), ex.tgt_ids)[-1].mean(axis=0)
        n_src = len(ex.src_ids) - 1
        n = min(n_src, len(ex.tgt_ids) - 1)
        cells = [top[t, n_src - 1 - t] for t in range(n)]
        ratios.append(np.mean(cells) * top.shape[1])
    return float(np.mean(ratios))


# ------------------------------------------------------------ runs

def _train(cfg: TrainConfig, corpus: Corpus) -> tuple[TransformerModel, Path, float]:
    t0 = time.perf_counter()
    result = Trainer(cfg, corpus.train, corpus.dev, corpus.codec).train()
    log.info("trained %s seed=%d in %.1fs", cfg.regime, cfg.seed, time.perf_counter() - t0)
    return load_checkpoint(result.last_path), result.last_path, time.perf_counter() - t0


def sweep_lambda(values: Sequence[float], base: TrainConfig, corpus: Corpus, beam_size: int = 4,
                 max_len: int = 20) -> list[dict]:
    """One distilled ST run per teacher weight, identical seed and data; dev BLEU by beam search."""
    if not base.teacher or not Path(base.teacher).exists():
        raise ConfigError(f"teacher checkpoint {base.teacher!r} not found")
    if base.asr and not Path(base.asr).exists():
        raise ConfigError(f"ASR checkpoint {base.asr!r} not found")
    rows = []
    for lam in values:
        cfg = replace(base, regime="st-kd", lam=float(lam), out_dir=str(Path(base.out_dir) / f"lambda_{lam:g}"))
        model, path, secs = _train(cfg, corpus)
        value, _ = score(model, corpus.dev, corpus.codec, beam_size, max_len)
        rows.append({"seed": cfg.seed, "lambda": float(lam), "bleu": value, "checkpoint": str(path),
                     "digest": model.digest(), "seconds": secs})
    return rows


def run_seed(cfg: ExperimentConfig, seed: int, corpus: Corpus) -> dict:
    root = Path(cfg.out_dir) / f"seed{seed}"
    codec, dev = corpus.codec, corpus.dev
    decode_kw = {"beam_size": cfg.beam_size, "max_len": cfg.max_len}
    out: dict = {"seed": seed}

    mt, mt_path, _ = _train(cfg.train_config("mt", seed, root / "mt", cfg.mt_steps), corpus)
    asr, asr_path, _ = _train(cfg.train_config("asr", seed, root / "asr", cfg.asr_steps), corpus)
    out["mt_bleu"], _ = score(mt, dev, codec, **decode_kw)
    out["asr_wer"], _ = score(asr, dev, codec, **decode_kw)
    out["pipeline_bleu"] = pipeline_bleu(asr, mt, dev, codec, **decode_kw)
    out["mt_reversal_ratio"] = reversal_dominance(mt, dev)

    base = cfg.train_config("st-pretrained", seed, root / "st_pretrained", cfg.st_steps,
                            asr=str(asr_path), mt=str(mt_path))
    st_pre, _, _ = _train(base, corpus)
    out["pretrained_bleu"], _ = score(st_pre, dev, codec, **decode_kw)
    out["pretrained_digest"] = st_pre.digest()

    kd_base = replace(base, regime="st-kd", teacher=str(mt_path), mt="", out_dir=str(root / "st_kd"))
    out["sweep"] = sweep_lambda(cfg.lambdas, kd_base, corpus, **decode_kw)
    by_lam = {r["lambda"]: r for r in out["sweep"]}
    if 0.0 in by_lam:
        out["lambda0_matches_baseline"] = (by_lam[0.0]["digest"] == out["pretrained_digest"]
                                           and by_lam[0.0]["bleu"] == out["pretrained_bleu"])
    if 1.0 in by_lam:
        out["kd_bleu"] = by_lam[1.0]["bleu"]
    out["best_lambda"] = max(out["sweep"], key=lambda r: (r["bleu"], r["lambda"]))["lambda"]

    models = {"ASR": asr, "MT": mt}
    if 1.0 in by_lam:
        models["ST+KD"] = load_checkpoint(by_lam[1.0]["checkpoint"])
    if cfg.train_scratch:
        st, _, _ = _train(cfg.train_config("st", seed, root / "st", cfg.st_steps), corpus)
        out["scratch_bleu"], _ = score(st, dev, codec, **decode_kw)
        models["ST"] = st
    out["checkpoints"] = {"mt": str(mt_path), "asr": str(asr_path)}
    out["attention"] = {tag: attention_panel(m, dev[0]).tolist() for tag, m in models.items()}
    return out


def attention_panel(model: TransformerModel, ex: Example) -> np.ndarray:
    """Top-layer encoder-decoder attention averaged over heads."""
    return attention_matrices(model, _encoder_input(model, ex), ex.tgt_ids)[-1].mean(axis=0)


def summarize(seeds: list[dict]) -> dict:
    mean = lambda key: float(np.mean([s[key] for s in seeds if key in s]))  # noqa: E731
    summary = {k: mean(k) for k in ("mt_bleu", "asr_wer", "pipeline_bleu", "mt_reversal_ratio",
                                    "pretrained_bleu", "kd_bleu", "scratch_bleu") if any(k in s for s in seeds)}
    lams = sorted({r["lambda"] for s in seeds for r in s["sweep"]})
    summary["sweep_mean"] = {f"{lam:g}": float(np.mean([r["bleu"] for s in seeds for r in s["sweep"]
                                                         if r["lambda"] == lam])) for lam in lams}
    summary["best_lambda"] = [s["best_lambda"] for s in seeds]
    return summary


def sweep_table(rows: list[dict]) -> str:
    """Aligned text: one line per (seed, lambda)."""
    lines = [f"{'seed':>4}  {'lambda':>6}  {'bleu':>7}"]
    lines += [f"{r['seed']:>4}  {r['lambda']:>6.1f}  {r['bleu']:>7.2f}" for r in rows]
    return "\n".join(lines) + "\n"


def write_report(cfg: ExperimentConfig, seeds: list[dict], plots: bool = True) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for s in seeds for r in s["sweep"]]
    report = {"config": asdict(cfg), "seeds": [{k: v for k, v in s.items() if k != "attention"} for s in seeds],
              "summary": summarize(seeds)}
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    with open(out / "sweep.tsv", "w", encoding="utf-8") as f:
        f.write("seed\tlambda\tbleu\n")
        f.writelines(f"{r['seed']}\t{r['lambda']:g}\t{r['bleu']:.4f}\n" for r in rows)
    (out / "sweep.txt").write_text(sweep_table(rows), encoding="utf-8")
    if plots:
        from . import plots as P

        P.plot_lambda_sweep(rows, out / "lambda_sweep.png")
        first = seeds[0]
        P.plot_attention_panels({k: np.array(v) for k, v in first["attention"].items()}, out / "attention.png")
        s = report["summary"]
        bars = {"pipeline": s["pipeline_bleu"], "ST pretrained": s["pretrained_bleu"], "ST + KD": s["kd_bleu"]}
        if "scratch_bleu" in s:
            bars = {"ST scratch": s["scratch_bleu"], **bars}
        P.plot_regime_bars(bars, out / "regimes.png")
        logs = {f"λ={r['lambda']:g}": Path(r["checkpoint"]).parent / "metrics.jsonl" for r in first["sweep"]}
        P.plot_training_curves(logs, out / "st_kd_loss.png", key="l_st")
    return report


def run_experiment(cfg: ExperimentConfig, plots: bool = True) -> dict:
    t0 = time.perf_counter()
    corpus = prepare_corpus(cfg)
    seeds = [run_seed(cfg, s, corpus) for s in cfg.seeds]
    report = write_report(cfg, seeds, plots)
    report["seconds"] = time.perf_counter() - t0
    (Path(cfg.out_dir) / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report
