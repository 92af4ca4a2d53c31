import json

import numpy as np
import pytest

from kdst import plots as P
from kdst.experiments import ExperimentConfig, reversal_dominance, run_experiment, summarize, sweep_table

PNG = b"\x89PNG\r\n\x1a\n"


def is_png(path):
    return path.exists() and path.read_bytes()[:8] == PNG


def test_each_figure_writes_a_png(tmp_path, rng):
    panels = {tag: rng.dirichlet(np.ones(5), size=4) for tag in ("MT", "ASR", "ST+KD", "extra")}
    assert is_png(P.plot_attention_panels(panels, tmp_path / "a.png", {"MT": (list("abcd"), list("vwxyz"))}))
    rows = [{"seed": s, "lambda": lam, "bleu": 50 + s + 10 * lam} for s in (1, 2) for lam in (0.0, 0.5, 1.0)]
    assert is_png(P.plot_lambda_sweep(rows, tmp_path / "sub" / "s.png"))
    log = tmp_path / "m.jsonl"
    log.write_text("".join(json.dumps({"step": i, "l_all": 3.0 / i}) + "\n" for i in range(1, 6)))
    assert is_png(P.plot_training_curves({"run": log}, tmp_path / "c.png"))
    assert is_png(P.plot_regime_bars({"x": 1.0, "y": 2.5}, tmp_path / "b.png"))


def test_summary_and_table():
    seeds = [{"mt_bleu": 90.0, "best_lambda": 1.0, "sweep": [{"seed": 1, "lambda": 0.0, "bleu": 80.0}]},
             {"mt_bleu": 94.0, "best_lambda": 0.6, "sweep": [{"seed": 2, "lambda": 0.0, "bleu": 70.0}]}]
    s = summarize(seeds)
    assert s["mt_bleu"] == 92.0 and s["sweep_mean"] == {"0": 75.0} and s["best_lambda"] == [1.0, 0.6]
    assert "asr_wer" not in s
    assert sweep_table(seeds[0]["sweep"]).splitlines()[1].split() == ["1", "0.0", "80.00"]


@pytest.mark.slow
def test_tiny_experiment_report(tmp_path):
    small = dict(d_model=16, d_ff=32, heads=2, enc_layers=1, dec_layers=1, token_budget=300)
    cfg = ExperimentConfig(out_dir=str(tmp_path), seeds=(1,), lambdas=(0.0, 1.0), n_train=40, n_dev=3,
                           num_merges=50, mt_steps=4, asr_steps=4, st_steps=3, warmup=4, st_warmup=2,
                           max_len=6, base=small)
    report = run_experiment(cfg)
    seed = report["seeds"][0]
    assert seed["lambda0_matches_baseline"] is True
    assert [r["lambda"] for r in seed["sweep"]] == [0.0, 1.0]
    for name in ("report.json", "sweep.tsv", "sweep.txt"):
        assert (tmp_path / name).exists()
    for name in ("lambda_sweep", "attention", "regimes", "st_kd_loss"):
        assert is_png(tmp_path / f"{name}.png")
    assert json.loads((tmp_path / "report.json").read_text())["summary"] == report["summary"]
    from kdst.models import load_checkpoint
    from kdst.experiments import prepare_corpus

    corpus = prepare_corpus(cfg)
    assert reversal_dominance(load_checkpoint(seed["checkpoints"]["mt"]), corpus.dev) > 0
