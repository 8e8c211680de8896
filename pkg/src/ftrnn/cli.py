"""Command-line entry point: ``ftrnn <subcommand> [options] [section.key=value ...]``.

Config files are YAML with optional sections ``gen``, ``model``, ``stft``,
``train`` and ``data`` (split sizes).  Positional ``section.key=value``
arguments override file values.  Every run prints the resolved config as one
JSON line prefixed with ``# config``.  All randomness derives from ``--seed``:
split ``k`` of gen-data uses ``seed + 1000 k``, the model is initialised with
``seed`` and training crops use ``seed + 1``.
"""
from __future__ import annotations

import argparse
import json
import sys
from collections import defaultdict
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .dsp import Waveform
from .metrics import Annotation, der, energy_vad, eval_si_sdr
from .mixgen import GenConfig, ManifestError, generate_dataset, load_example, read_manifest
from .model import CheckpointError, FtrnnConfig, init_model, load_checkpoint, save_checkpoint, separate
from .stitch import separate_stitched
from .trainer import TrainConfig, TrainingAborted, train
from .wavio import read_wav, write_wav

EXIT_OK = 0
EXIT_FAILURE = 1  # a check (selftest, gradcheck) ran and failed
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_MALFORMED = 5
EXIT_TRAINING = 6

SECTIONS = ("gen", "model", "stft", "train", "data")
DATA_DEFAULTS = {"train": 20, "val": 4, "test": 4}
PRECISION = {"single": np.float32, "double": np.float64}


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    return yaml.safe_load(text)


def load_config(path: str | None, overrides: list[str]) -> dict:
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = {s: dict(raw.get(s) or {}) for s in SECTIONS}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise ConfigError(f"override {item!r} must look like section.key=value with section in {SECTIONS}")
        cfg[section][name] = _parse_value(value)
    return cfg


def resolve(cfg: dict, args) -> dict:
    """Build validated config objects; raises ConfigError on bad keys or values."""
    try:
        gen = GenConfig.from_dict(cfg["gen"])
        model_d = dict(cfg["model"])
        stft_d = cfg["stft"]
        if set(stft_d) - {"n_fft", "hop", "window"}:
            raise ValueError(f"unknown stft keys: {sorted(set(stft_d) - {'n_fft', 'hop', 'window'})}")
        if stft_d.get("window", "hann") != "hann":
            raise ValueError("only the hann window is supported")
        model_d.update({k: v for k, v in stft_d.items() if k != "window"})
        model_d.setdefault("sample_rate", gen.sample_rate)
        model = FtrnnConfig.from_dict(model_d)
        train_d = dict(cfg["train"])
        if getattr(args, "loss", None):
            train_d["loss"] = args.loss
        if getattr(args, "seed", None) is not None:
            train_d["seed"] = args.seed + 1
        train_cfg = TrainConfig.from_dict(train_d)
        data = {**DATA_DEFAULTS, **cfg["data"]}
        if set(data) - set(DATA_DEFAULTS) or any(not isinstance(v, int) or v < 0 for v in data.values()):
            raise ValueError(f"data section takes non-negative integer counts for {sorted(DATA_DEFAULTS)}")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if model.sample_rate != gen.sample_rate:
        raise ConfigError(f"model sample_rate {model.sample_rate} != gen sample_rate {gen.sample_rate}")
    return {"gen": gen, "model": model, "train": train_cfg, "data": data}


def echo(resolved: dict, args, out=None) -> dict:
    flat = {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in resolved.items()}
    flat["args"] = {k: v for k, v in vars(args).items() if k not in ("func", "overrides")}
    line = json.dumps(flat, sort_keys=True, default=str)
    print(f"# config {line}")
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "resolved_config.json").write_text(json.dumps(flat, sort_keys=True, indent=2, default=str))
    return flat


# -- subcommands ---------------------------------------------------------------------------

def cmd_gen_data(args, r) -> int:
    for k, split in enumerate(("train", "val", "test")):
        n = r["data"][split]
        if n:
            path = generate_dataset(r["gen"], n, args.out, seed=args.seed + 1000 * k, split=split)
            print(f"{split}: {n} mixtures -> {path}")
    return EXIT_OK


def _load_split(data_dir: Path, split: str):
    manifest = data_dir / split / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest {manifest}")
    records = read_manifest(manifest)
    return manifest, records, [load_example(manifest, rec) for rec in records]


def _model_for(args, r):
    dtype = PRECISION[args.precision]
    if args.model:
        if not Path(args.model).exists():
            raise FileNotFoundError(f"checkpoint not found: {args.model}")
        return load_checkpoint(args.model, dtype=dtype)
    return init_model(r["model"], seed=args.seed, dtype=dtype)


def cmd_train(args, r) -> int:
    data = Path(args.data)
    _, _, train_set = _load_split(data, "train")
    val_set = _load_split(data, "val")[2] if (data / "val" / "manifest.jsonl").exists() else None
    model = _model_for(args, r)
    best, history = train(model, train_set, val_set, r["train"], out_dir=args.out, log=print)
    save_checkpoint(best, Path(args.out) / "final.ckpt")
    print(f"trained {sum(h.steps for h in history)} steps over {len(history)} epochs -> {args.out}")
    return EXIT_OK


def cmd_separate(args, r) -> int:
    model = _model_for(args, r)
    src = Path(args.input)
    if not src.exists():
        raise FileNotFoundError(f"input not found: {src}")
    wave = read_wav(src)
    if wave.sample_rate != model.config.sample_rate:
        raise ConfigError(f"input is {wave.sample_rate} Hz but the model expects {model.config.sample_rate} Hz")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c, ch in enumerate(separate(model, wave.samples)):
        write_wav(out / f"spk{c}.wav", Waveform(ch, wave.sample_rate))
    print(f"wrote {model.config.C} channels to {out}")
    return EXIT_OK


def _manifest_examples(path: str):
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.exists():
        raise FileNotFoundError(f"manifest not found: {p}")
    records = read_manifest(p)
    return p, records


def cmd_stitch_eval(args, r) -> int:
    model = _model_for(args, r)
    manifest, records = _manifest_examples(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    with (out / "segments.jsonl").open("w", encoding="utf-8") as diag_fh:
        for rec in records:
            mix, refs = load_example(manifest, rec)
            direct = separate(model, mix)
            stitched, diags, plan = separate_stitched(lambda x: separate(model, x), mix, refs, args.segment_s,
                                                      args.overlap, rec["sample_rate"])
            d_score, _ = eval_si_sdr(refs, direct)
            s_score, _ = eval_si_sdr(refs, stitched)
            for c, ch in enumerate(stitched):
                write_wav(out / f"{rec['id']}_stitched{c}.wav", Waveform(ch, rec["sample_rate"]))
            for d in diags:
                diag_fh.write(json.dumps({"id": rec["id"], **d.as_dict()}, sort_keys=True) + "\n")
            rows.append({"id": rec["id"], "direct_si_sdr": d_score, "stitched_si_sdr": s_score,
                         "segments": len(plan.segments)})
            print(f"{rec['id']}: direct {d_score:.2f} dB, stitched {s_score:.2f} dB over {len(plan.segments)} segments")
    (out / "stitch_report.json").write_text(json.dumps(rows, sort_keys=True, indent=2))
    return EXIT_OK


def evaluate_records(model, manifest: Path, records: list[dict], collar: float = 0.0, out_dir: Path | None = None):
    results = []
    for rec in records:
        mix, refs = load_example(manifest, rec)
        est = separate(model, mix)
        score, perm = eval_si_sdr(refs, est)
        unproc, _ = eval_si_sdr(refs, np.stack([mix] * len(refs)))
        rate = rec["sample_rate"]
        ref_ann = Annotation.from_timeline(rec["timeline"], len(refs), rec["length_s"])
        hyp_ann = Annotation(tuple(tuple(energy_vad(ch, rate)) for ch in est), rec["length_s"])
        d = der(ref_ann, hyp_ann, collar)
        results.append({
            "id": rec["id"],
            "si_sdr": score,
            "si_sdr_unprocessed": unproc,
            "der": d.der,
            "missed_s": d.missed,
            "false_alarm_s": d.false_alarm,
            "confusion_s": d.confusion,
            "permutation": list(perm),
            "gap_range_s": rec.get("gap_range_s"),
            "utterances_per_speaker": rec.get("utterances_per_speaker"),
        })
        if out_dir is not None:
            for c, ch in enumerate(est):
                write_wav(out_dir / f"{rec['id']}_spk{c}.wav", Waveform(ch, rate))
    return results


def _subset_key(value) -> str:
    if value is None:
        return "unknown"
    lo, hi = value
    return f"{lo:g}-{hi:g}"


def report(results: list[dict], n_params: int | None = None) -> tuple[str, dict]:
    """Corpus means plus breakdowns by gap range and utterance count.  Returns (text, data)."""
    if not results:
        raise ValueError("no results to report: the evaluation set is empty")
    metrics = ("si_sdr", "der")

    def means(rows):
        return {m: float(np.mean([r[m] for r in rows])) for m in metrics} | {"n": len(rows)}

    data = {"corpus": means(results), "by_gap_range_s": {}, "by_utterances_per_speaker": {}}
    if n_params is not None:
        data["n_params"] = n_params
    for axis, field_name in (("by_gap_range_s", "gap_range_s"), ("by_utterances_per_speaker", "utterances_per_speaker")):
        groups = defaultdict(list)
        for r in results:
            groups[_subset_key(r.get(field_name))].append(r)
        data[axis] = {k: means(v) for k, v in sorted(groups.items())}
    data["recordings"] = sorted(results, key=lambda r: r["id"])
    lines = [f"{'subset':<28}{'n':>5}{'SI-SDR dB':>12}{'DER %':>10}"]
    lines.append(f"{'all':<28}{data['corpus']['n']:>5}{data['corpus']['si_sdr']:>12.2f}{100 * data['corpus']['der']:>10.1f}")
    for axis, label in (("by_gap_range_s", "gap"), ("by_utterances_per_speaker", "utts")):
        for k, v in data[axis].items():
            lines.append(f"{label + ' ' + k:<28}{v['n']:>5}{v['si_sdr']:>12.2f}{100 * v['der']:>10.1f}")
    if n_params is not None:
        lines.append(f"params: {n_params / 1e6:.2f} M")
    return "\n".join(lines), data


def cmd_evaluate(args, r) -> int:
    model = _model_for(args, r)
    manifest, records = _manifest_examples(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = evaluate_records(model, manifest, records, args.collar, out)
    text, data = report(results, model.param_count())
    print(text)
    (out / "report.json").write_text(json.dumps(data, sort_keys=True, indent=2))
    (out / "report.txt").write_text(text + "\n")
    return EXIT_OK


def cmd_gradcheck(args, r) -> int:
    from . import gradcheck

    results = gradcheck.run()
    for res in results:
        status = "ok" if res.ok else "FAIL"
        print(f"{res.name:<20} max rel err {res.max_rel_error:.3e} (tol {res.tol:.0e}) {status}")
    return EXIT_OK if all(res.ok for res in results) else EXIT_FAILURE


def cmd_selftest(args, r) -> int:
    from . import selftest

    results = selftest.run_all(seed=args.seed)
    for name, ok, detail in results:
        print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ftrnn", description="Time-frequency RNN speech separation pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--precision", choices=sorted(PRECISION), default="single")
    common.add_argument("overrides", nargs="*", help="section.key=value overrides")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="synthesise train/val/test mixtures")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="PIT training")
    p.add_argument("--data", required=True, help="directory produced by gen-data")
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="checkpoint to start from")
    p.add_argument("--loss", choices=["si-sdr-pit", "sa-sdr"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", parents=[common], help="direct inference on one WAV")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("stitch-eval", parents=[common], help="direct vs oracle-stitched inference")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="split directory or manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--segment-s", type=float, default=5.0)
    p.add_argument("--overlap", type=float, default=0.2)
    p.set_defaults(func=cmd_stitch_eval)

    p = sub.add_parser("evaluate", parents=[common], help="SI-SDR and DER report")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="split directory or manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--collar", type=float, default=0.0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", parents=[common], help="invariant suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        resolved = resolve(load_config(args.config, args.overrides), args)
        echo(resolved, args, getattr(args, "out", None))
        return args.func(args, resolved)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ManifestError, CheckpointError) as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
