"""Command-line entry point: ``kdst <command> ...``.

Every command records its resolved arguments in a ``run.json`` next to its
outputs; ``kdst rerun run.json`` replays it.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, KdstError

log = logging.getLogger("kdst")

TRAIN_FLAGS = {"lam": "lambda", "teacher": "teacher", "asr": "asr", "mt": "mt", "max_steps": "steps",
               "seed": "seed", "lr_factor": "lr_factor", "warmup": "warmup", "token_budget": "token_budget",
               "temperature": "temperature", "eval_every": "eval_every", "dev_limit": "dev_limit"}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _write_run(path: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    rec = {"command": args.command, "argv": args.argv,
           "args": {k: v for k, v in vars(args).items() if k not in ("func", "argv")},
           "python": platform.python_version(), "numpy": np.__version__, **(extra or {})}
    path.write_text(json.dumps(rec, indent=2, default=str) + "\n", encoding="utf-8")


# ------------------------------------------------------------ commands

def cmd_gen_data(args) -> dict:
    from .synth import SynthTaskSpec, generate_synthetic_dataset

    spec = SynthTaskSpec(n_symbols=args.n_symbols, n_train=args.n_train, n_dev=args.n_dev, n_test=args.n_test,
                         noise=args.noise, label_noise=args.label_noise, seed=args.seed)
    paths = generate_synthetic_dataset(spec, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return {"out_dir": args.out, "spec": asdict(spec)}


def cmd_bpe_train(args) -> dict:
    from .synth import read_manifest
    from .text import build_codec

    rows = read_manifest(args.manifest, check_audio=False)
    codec = build_codec([r.source for r in rows] + [r.target for r in rows], args.merges)
    codec.save(args.out)
    print(json.dumps({"merges": len(codec.bpe), "vocab": len(codec.vocab), "out": args.out}))
    return {"out_dir": args.out}


def _train_config(args):
    from .training import TrainConfig

    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    overrides = {"regime": args.regime}
    for key, flag in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for key, flag in (("train_manifest", "train"), ("dev_manifest", "dev"), ("codec_dir", "codec"),
                      ("out_dir", "out")):
        if getattr(args, flag, None):
            overrides[key] = getattr(args, flag)
    return TrainConfig.from_text(text, **overrides).validate()


def cmd_train(args) -> dict:
    from .training import train

    cfg = _train_config(args)
    for key in ("train_manifest", "codec_dir"):
        if not getattr(cfg, key):
            raise ConfigError(f"{key} is required (flag or config file)")
    result = train(cfg)
    summary = {"best": str(result.best_path), "last": str(result.last_path), "best_metric": result.best_metric,
               "steps": result.steps}
    print(json.dumps(summary))
    return {"out_dir": cfg.out_dir, "config": asdict(cfg), "result": summary}


def _load_models(paths):
    from .models import load_checkpoint

    return [load_checkpoint(p) for p in paths]


def _inputs_for(model, ex, codec):
    if model.cfg.speech_input:
        return ex.features
    return np.asarray(codec.encode(ex.source), dtype=np.int64)


def cmd_translate(args) -> dict:
    from .decoding import beam_search, ensemble_decode, greedy_decode, pipeline_translate
    from .text import TextCodec
    from .training import load_corpus

    codec = TextCodec.load(args.codec)
    if args.mode == "pipeline":
        if not (args.asr and args.mt):
            raise ConfigError("pipeline mode needs --asr and --mt")
        asr, mt = _load_models([args.asr, args.mt])
        models = [asr]
    else:
        if not args.model:
            raise ConfigError(f"{args.mode} mode needs at least one --model")
        if args.mode != "ensemble" and len(args.model) != 1:
            raise ConfigError(f"{args.mode} mode takes exactly one --model")
        models = _load_models(args.model)
    speech = any(m.cfg.speech_input for m in models)
    examples = load_corpus(args.manifest, codec, with_features=speech)
    if args.limit:
        examples = examples[: args.limit]
    lines = []
    for ex in examples:
        if args.mode == "greedy":
            ids = greedy_decode(models[0], _inputs_for(models[0], ex, codec), args.max_len).tokens
        elif args.mode == "beam":
            ids = beam_search(models[0], _inputs_for(models[0], ex, codec), args.beam, args.max_len).tokens
        elif args.mode == "ensemble":
            ids = ensemble_decode(models, [_inputs_for(m, ex, codec) for m in models], args.beam, args.max_len).tokens
        else:
            ids = pipeline_translate(asr, mt, ex.features, codec, args.beam, args.max_len)
        lines.append(codec.decode(ids))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    print(json.dumps({"mode": args.mode, "sentences": len(lines), "out": str(out)}))
    return {"out_dir": str(out.parent)}


def _read_lines(path) -> list[str]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{p} does not exist")
    return p.read_text(encoding="utf-8").splitlines()


def cmd_evaluate(args) -> dict:
    from .metrics import bleu, corpus_wer
    from .text import normalize_text

    hyps, refs = _read_lines(args.hyp), _read_lines(args.ref)
    if len(hyps) != len(refs):
        raise InputError(f"{len(hyps)} hypotheses but {len(refs)} references")
    hyps, refs = [normalize_text(h) for h in hyps], [normalize_text(r) for r in refs]
    value = bleu(hyps, refs) if args.metric == "bleu" else corpus_wer(hyps, refs)
    print(f"{args.metric.upper()} {value:.2f}")
    return {"out_dir": str(Path(args.hyp).parent), "score": {args.metric: value}}


def cmd_attention_dump(args) -> dict:
    from .decoding import export_attention
    from .text import TextCodec
    from .training import load_corpus

    (model,) = _load_models([args.model])
    codec = TextCodec.load(args.codec)
    examples = load_corpus(args.manifest, codec, with_features=model.cfg.speech_input)
    pick = [ex for ex in examples if ex.id == args.example_id] if args.example_id else examples[:1]
    if not pick:
        raise InputError(f"example {args.example_id!r} not in {args.manifest}")
    ex = pick[0]
    target = ex.src_ids if model.cfg.task == "ASR" else ex.tgt_ids
    dump = export_attention(model, _inputs_for(model, ex, codec), target, args.out, args.tag or model.cfg.task,
                            ex.id)
    print(json.dumps({"example": ex.id, "files": len(dump.files), "out": args.out}))
    return {"out_dir": args.out}


def _experiment_config(args, **kw):
    from .experiments import ExperimentConfig

    cfg = ExperimentConfig(out_dir=args.out, data_dir=args.data or "", **kw)
    if args.quick:
        cfg.n_train, cfg.n_dev, cfg.mt_steps, cfg.asr_steps, cfg.st_steps = 300, 20, 60, 60, 20
        cfg.warmup = cfg.st_warmup = 30
    for key in ("mt_steps", "asr_steps", "st_steps", "lr_factor", "label_noise", "beam"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, "beam_size" if key == "beam" else key, value)
    return cfg


def cmd_sweep_lambda(args) -> dict:
    from .experiments import prepare_corpus, sweep_lambda, sweep_table

    cfg = _experiment_config(args, lambdas=tuple(args.values), seeds=(args.seed,))
    if not args.teacher:
        raise ConfigError("sweep-lambda needs --teacher (an MT checkpoint)")
    corpus = prepare_corpus(cfg)
    base = cfg.train_config("st-kd", args.seed, Path(args.out) / "st_kd", cfg.st_steps, teacher=args.teacher,
                            asr=args.asr or "")
    rows = sweep_lambda(args.values, base, corpus, cfg.beam_size, cfg.max_len)
    out = Path(args.out)
    (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    (out / "sweep.txt").write_text(sweep_table(rows), encoding="utf-8")
    sys.stdout.write(sweep_table(rows))
    return {"out_dir": args.out, "rows": rows}


def cmd_experiment(args) -> dict:
    from .experiments import run_experiment

    cfg = _experiment_config(args, seeds=tuple(args.seeds))
    report = run_experiment(cfg, plots=not args.no_plots)
    print(json.dumps(report["summary"], indent=2))
    return {"out_dir": args.out}


def cmd_rerun(args) -> dict:
    rec = json.loads(Path(args.run_json).read_text(encoding="utf-8"))
    if rec.get("command") == "rerun":
        raise ConfigError("refusing to replay a rerun record")
    return {"status": main(rec["argv"])}


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdst", description="Speech translation with knowledge distillation, toy scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--run-json", help="where to write run.json (default: the command's output directory)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic tone corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n-symbols", type=int, default=10)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-dev", type=int, default=200)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--label-noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("bpe-train", help="learn BPE merges and the vocabulary from a manifest")
    b.add_argument("--manifest", required=True)
    b.add_argument("--merges", type=int, default=500)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bpe_train)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--regime", required=True, choices=["asr", "mt", "st", "st-pretrained", "st-kd"])
    t.add_argument("--config", help="key=value training config file; flags override it")
    t.add_argument("--train")
    t.add_argument("--dev")
    t.add_argument("--codec")
    t.add_argument("--out")
    t.add_argument("--lambda", dest="lambda", type=float)
    t.add_argument("--teacher")
    t.add_argument("--asr")
    t.add_argument("--mt")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr-factor", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--token-budget", type=int)
    t.add_argument("--temperature", type=float)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--dev-limit", type=int)
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="decode a manifest to one sentence per line")
    tr.add_argument("--mode", choices=["greedy", "beam", "ensemble", "pipeline"], default="beam")
    tr.add_argument("--model", action="append", default=[])
    tr.add_argument("--asr")
    tr.add_argument("--mt")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--codec", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--beam", type=int, default=4)
    tr.add_argument("--max-len", type=int, default=50)
    tr.add_argument("--limit", type=int, default=0)
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="score hypotheses against references")
    e.add_argument("--metric", choices=["bleu", "wer"], default="bleu")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("attention-dump", help="write encoder-decoder attention as CSV and PGM")
    a.add_argument("--model", required=True)
    a.add_argument("--manifest", required=True)
    a.add_argument("--codec", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--example-id")
    a.add_argument("--tag")
    a.set_defaults(func=cmd_attention_dump)

    for name, func in (("sweep-lambda", cmd_sweep_lambda), ("experiment", cmd_experiment)):
        s = sub.add_parser(name, help="distillation-weight sweep" if name == "sweep-lambda"
                           else "full toy regime comparison with report and figures")
        s.add_argument("--out", required=True)
        s.add_argument("--data", help="existing corpus directory (generated if absent)")
        s.add_argument("--quick", action="store_true", help="tiny corpus and few steps, for smoke runs")
        s.add_argument("--mt-steps", type=int)
        s.add_argument("--asr-steps", type=int)
        s.add_argument("--st-steps", type=int)
        s.add_argument("--lr-factor", type=float)
        s.add_argument("--label-noise", type=float)
        s.add_argument("--beam", type=int)
        s.set_defaults(func=func)
        if name == "sweep-lambda":
            s.add_argument("--values", type=_floats, default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
            s.add_argument("--teacher")
            s.add_argument("--asr")
            s.add_argument("--seed", type=int, default=1)
        else:
            s.add_argument("--seeds", type=_ints, default=[1, 2, 3])
            s.add_argument("--no-plots", action="store_true")

    r = sub.add_parser("rerun", help="replay the command recorded in a run.json")
    r.add_argument("run_json")
    r.set_defaults(func=cmd_rerun)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        info = args.func(args) or {}
        if args.command != "rerun":
            run_path = Path(args.run_json) if args.run_json else Path(info.get("out_dir", ".")) / "run.json"
            _write_run(run_path, args, {k: v for k, v in info.items() if k != "out_dir"})
        return int(info.get("status", 0))
    except ConfigError as exc:
        print(f"kdst {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (KdstError, OSError, ValueError) as exc:
        print(f"kdst {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
