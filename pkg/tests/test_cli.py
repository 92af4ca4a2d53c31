import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from kdst.cli import main

ROOT = Path(__file__).resolve().parents[1]


def test_evaluate_identical_files(tmp_path, capsys):
    lines = "un deux trois quatre\ncinq six sept huit\n"
    (tmp_path / "h.txt").write_text(lines)
    (tmp_path / "r.txt").write_text(lines)
    assert main(["evaluate", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt")]) == 0
    assert capsys.readouterr().out.strip() == "BLEU 100.00"
    assert main(["evaluate", "--metric", "wer", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt")]) == 0
    assert capsys.readouterr().out.strip() == "WER 0.00"
    rec = json.loads((tmp_path / "run.json").read_text())
    assert rec["command"] == "evaluate" and rec["score"] == {"wer": 0.0}


def test_evaluate_length_mismatch_is_an_error(tmp_path, capsys):
    (tmp_path / "h.txt").write_text("a\nb\n")
    (tmp_path / "r.txt").write_text("a\n")
    assert main(["evaluate", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt")]) == 1
    assert "2 hypotheses but 1 references" in capsys.readouterr().err


def test_kd_without_teacher_is_a_config_error(tmp_path, capsys):
    code = main(["train", "--regime", "st-kd", "--train", "x.tsv", "--codec", "c", "--out", str(tmp_path)])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_flag_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--bogus"])
    assert exc.value.code == 2


def test_run_json_replays_bitwise(tone_corpus, tmp_path, capsys):
    data, paths, _ = tone_corpus
    out = tmp_path / "mt"
    argv = ["train", "--regime", "mt", "--train", str(paths["train"]), "--codec", str(data / "codec"),
            "--out", str(out), "--steps", "5", "--seed", "4", "--eval-every", "0"]
    assert main(argv) == 0
    first = (out / "last.ckpt").read_bytes()
    rec = json.loads((out / "run.json").read_text())
    assert rec["argv"] == argv and rec["config"]["max_steps"] == 5
    shutil.copy(out / "run.json", tmp_path / "saved.json")
    (out / "last.ckpt").unlink()
    assert main(["rerun", str(tmp_path / "saved.json")]) == 0
    assert (out / "last.ckpt").read_bytes() == first
    capsys.readouterr()

    hyp = tmp_path / "hyp.txt"
    assert main(["translate", "--mode", "greedy", "--model", str(out / "last.ckpt"), "--manifest",
                 str(paths["dev"]), "--codec", str(data / "codec"), "--out", str(hyp), "--limit", "3"]) == 0
    assert len(hyp.read_text().splitlines()) == 3
    assert main(["translate", "--mode", "greedy", "--manifest", str(paths["dev"]), "--codec", str(data / "codec"),
                 "--out", str(hyp)]) == 2


def test_attention_dump_command(tone_corpus, tmp_path):
    data, paths, _ = tone_corpus
    assert main(["train", "--regime", "asr", "--train", str(paths["train"]), "--codec", str(data / "codec"),
                 "--out", str(tmp_path / "asr"), "--steps", "2", "--eval-every", "0"]) == 0
    assert main(["attention-dump", "--model", str(tmp_path / "asr" / "last.ckpt"), "--manifest", str(paths["dev"]),
                 "--codec", str(data / "codec"), "--out", str(tmp_path / "att")]) == 0
    assert len(list((tmp_path / "att").glob("*.csv"))) == len(list((tmp_path / "att").glob("*.pgm"))) > 0


@pytest.mark.slow
def test_quickstart_script_end_to_end(tmp_path):
    if shutil.which("bash") is None:
        pytest.skip("bash not available")
    env = {**os.environ, "STEPS": "15", "N_TRAIN": "40", "KDST": f"{sys.executable} -m kdst.cli"}
    proc = subprocess.run(["bash", str(ROOT / "scripts" / "quickstart.sh"), str(tmp_path / "qs")], env=env,
                          capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr[-2000:]
    report = json.loads(proc.stdout.strip().splitlines()[-1])
    assert set(report) == {"mt_bleu", "asr_wer", "st_kd_bleu", "pipeline_bleu"}
    assert json.loads((tmp_path / "qs" / "report.json").read_text()) == report
