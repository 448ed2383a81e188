"""Command-line pipeline: gen-data, train, finetune, synth, eval, gradcheck.

Every command writes a run manifest next to its outputs (command, config
snapshot, seed, input/output paths, version); reruns with an identical
manifest produce byte-identical outputs. Commands refuse to overwrite
existing outputs unless --force is given. Config precedence is
flags > config file > defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as mt
from . import numerics as nm
from . import toycodec as tc
from .data import (DataConfig, FIDELITY_TAG, Utterance, gen_corpus, load_manifest,
                   make_batch, prepare, speaker_tables, write_manifest)
from .hashing import derive_seed
from .inference import SampleConfig, synthesize, synthesize_with_backoff
from .model import Batch, ModelConfig, PRESETS, SpeechLM, load_checkpoint, save_checkpoint
from .preference import FinetuneConfig, build_pairs, finetune, orpo_loss, write_pairs
from .textbpe import BpeVocab, train_bpe
from .training import TrainConfig, train, write_log_csv

SCHEMA_VERSION = 1


class CliError(Exception):
    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code


def _fail(code: str, msg: str) -> "CliError":
    return CliError(code, msg)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise _fail("missing_config", f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise _fail("malformed_config", f"config file is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise _fail("malformed_config", "config file must hold a JSON object")
    return cfg


def _build_config(cls, section: dict, overrides: dict):
    """defaults <- config-file section <- explicitly passed flags."""
    valid = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in section.items():
        if k not in valid:
            raise _fail("config_validation", f"unknown {cls.__name__} field: {k}")
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise _fail("config_validation", f"invalid {cls.__name__}: {e}")


def _require_free(paths: list[Path], force: bool) -> None:
    taken = [str(p) for p in paths if p.exists()]
    if taken and not force:
        raise _fail("outputs_exist", f"refusing to overwrite {taken[0]} (use --force)")


def _write_run_manifest(out_dir: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["schema_version"] = SCHEMA_VERSION
    payload["version"] = f"patchtts-{__version__}"
    (out_dir / "manifest.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _config_dict(obj) -> dict:
    return dataclasses.asdict(obj)


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _build_config(DataConfig, file_cfg.get("data", {}), {
        "seed": args.seed, "n_speakers": args.n_speakers, "n_utts": args.n_utts,
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = out / "dataset.jsonl"
    _require_free([dataset], args.force)
    utts = gen_corpus(cfg)
    write_manifest(dataset, utts)
    _write_run_manifest(out, {
        "command": "gen-data",
        "seed": cfg.seed,
        "config": {"data": _config_dict(cfg)},
        "inputs": {},
        "outputs": {"dataset": str(args.out) + "/dataset.jsonl"},
    })
    print(f"wrote {len(utts)} utterances to {dataset}")
    return 0


def _train_split(utts: list[Utterance]) -> list[Utterance]:
    return [u for u in utts if u.split == "train"]


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    data_path = Path(args.data)
    if not data_path.exists():
        raise _fail("missing_manifest", f"dataset manifest not found: {args.data}")
    preset = PRESETS[args.preset]
    model_cfg = _build_config(ModelConfig, {**dataclasses.asdict(preset()),
                                            **file_cfg.get("model", {})}, {})
    train_cfg = _build_config(TrainConfig, file_cfg.get("train", {}), {
        "seed": args.seed, "steps": args.steps,
        "flux_beta": 0.0 if args.no_flux else None,
    })

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "model.ckpt", out / "bpe.vocab", out / "train_log.csv"]
    _require_free(outputs, args.force)

    try:
        utts = load_manifest(data_path)
    except (ValueError, json.JSONDecodeError) as e:
        raise _fail("malformed_manifest", f"cannot read dataset manifest: {e}")
    train_utts = _train_split(utts)
    vocab = train_bpe([u.text for u in train_utts], vocab_size=args.vocab_size)
    vocab.save(out / "bpe.vocab")

    model = SpeechLM(model_cfg, seed=train_cfg.seed)
    items = prepare(train_utts, vocab)
    result = train(
        None, train_cfg, model,
        make_batch=lambda idx: make_batch(items, idx),
        n_items=len(items),
        checkpoint_path=out / "model.ckpt",
    )
    write_log_csv(out / "train_log.csv", result.log)
    if result.aborted:
        raise _fail("non_finite_loss", "training aborted on non-finite loss; last checkpoint kept")
    _write_run_manifest(out, {
        "command": "train",
        "seed": train_cfg.seed,
        "config": {"model": _config_dict(model_cfg), "train": _config_dict(train_cfg),
                   "vocab_size": args.vocab_size, "preset": args.preset},
        "inputs": {"dataset": args.data},
        "outputs": {"checkpoint": str(args.out) + "/model.ckpt",
                    "vocab": str(args.out) + "/bpe.vocab",
                    "log": str(args.out) + "/train_log.csv"},
    })
    final = result.log[-1] if result.log else {"ce": float("nan")}
    print(f"trained {model.params.total_parameters()} params for {len(result.log)} steps; "
          f"final ce={final['ce']:.4f}")
    return 0


def cmd_finetune(args) -> int:
    file_cfg = _load_config_file(args.config)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise _fail("missing_checkpoint", f"pretraining checkpoint not found: {args.checkpoint}")
    data_path = Path(args.data)
    if not data_path.exists():
        raise _fail("missing_manifest", f"dataset manifest not found: {args.data}")
    vocab_path = Path(args.vocab) if args.vocab else ckpt.parent / "bpe.vocab"
    if not vocab_path.exists():
        raise _fail("missing_vocab", f"tokenizer vocab not found: {vocab_path}")

    ft_cfg = _build_config(FinetuneConfig, file_cfg.get("finetune", {}), {
        "seed": args.seed, "steps": args.steps,
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "model.ckpt", out / "pairs.jsonl", out / "finetune_log.csv"]
    _require_free(outputs, args.force)

    model = load_checkpoint(ckpt)
    vocab = BpeVocab.load(vocab_path)
    utts = load_manifest(data_path)
    tables = speaker_tables(utts)
    seeds = _train_split(utts)[: args.n_pairs]
    arbitrary = [u.text for u in utts if u.split == "heldout"] or [u.text for u in seeds]
    pairs = build_pairs(model, vocab, seeds, tables, arbitrary,
                        n_cycles=args.n_cycles, seed=ft_cfg.seed,
                        sample_cfg=SampleConfig(max_frames=model.config.max_frames))
    write_pairs(out / "pairs.jsonl", pairs)
    result = finetune(model, pairs, ft_cfg)
    save_checkpoint(out / "model.ckpt", model)
    with open(out / "finetune_log.csv", "w") as f:
        f.write("step,loss,nll,or_term,margin\n")
        for row in result.log:
            f.write(f"{row['step']},{row['loss']!r},{row['nll']!r},"
                    f"{row['or_term']!r},{row['margin']!r}\n")
    _write_run_manifest(out, {
        "command": "finetune",
        "seed": ft_cfg.seed,
        "config": {"finetune": _config_dict(ft_cfg), "n_cycles": args.n_cycles,
                   "n_pairs": args.n_pairs},
        "inputs": {"dataset": args.data, "checkpoint": args.checkpoint},
        "outputs": {"checkpoint": str(args.out) + "/model.ckpt",
                    "pairs": str(args.out) + "/pairs.jsonl",
                    "log": str(args.out) + "/finetune_log.csv"},
    })
    print(f"finetuned on {len(pairs)} pairs; final margin={result.log[-1]['margin']:.4f}")
    return 0


def _sample_config(args, model_cfg: ModelConfig, file_cfg: dict) -> SampleConfig:
    overrides = {
        "seed": args.seed,
        "top_p": args.top_p,
        "max_frames": model_cfg.max_frames,
        "use_ras": False if args.no_ras else None,
    }
    return _build_config(SampleConfig, file_cfg.get("sample", {}), overrides)


def _stream_record(utt_id: str, mode: str, result) -> dict:
    return {
        "id": utt_id,
        "mode": mode,
        "l0": result.stream.l0,
        "l1": result.stream.l1,
        "l2": result.stream.l2,
        "used_top_p": result.used_top_p,
        "truncated": result.truncated,
        "frames": result.frames,
    }


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise _fail("missing_checkpoint", f"checkpoint not found: {args.checkpoint}")
    vocab_path = Path(args.vocab) if args.vocab else ckpt.parent / "bpe.vocab"
    if not vocab_path.exists():
        raise _fail("missing_vocab", f"tokenizer vocab not found: {vocab_path}")
    if args.mode == "deep" and args.ref_transcript is None:
        raise _fail("config_validation", "--mode deep requires --ref-transcript")
    if args.mode == "deep" and args.ref_stream is None:
        raise _fail("config_validation", "--mode deep requires --ref-stream")
    single = args.text is not None
    if not single and args.data is None:
        raise _fail("config_validation", "provide --text or --data for batch synthesis")
    if not single and args.mode == "deep":
        raise _fail("config_validation", "batch synthesis supports shallow mode only")

    model = load_checkpoint(ckpt)
    vocab = BpeVocab.load(vocab_path)
    cfg = _sample_config(args, model.config, file_cfg)
    quality = None if args.no_quality_prefix else "[48000]"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    streams_path = out / "streams.jsonl"
    _require_free([streams_path], args.force)

    records = []
    if single:
        ref = tc.speaker_embed(args.speaker, args.style)
        deep_prefix = None
        if args.mode == "deep":
            raw = json.loads(Path(args.ref_stream).read_text().splitlines()[0])
            stream = tc.CodebookStream(raw["l0"], raw["l1"], raw["l2"])
            deep_prefix = (vocab.encode(args.ref_transcript), tc.flatten(stream))
        result = synthesize_with_backoff(model, vocab, args.text, ref, cfg,
                                         mode=args.mode, deep_prefix=deep_prefix,
                                         quality_tag=quality)
        records.append(_stream_record("single", args.mode, result))
    else:
        utts = [u for u in load_manifest(args.data) if u.split == args.split]
        if not utts:
            raise _fail("malformed_manifest", f"no utterances in split {args.split!r}")
        for u in utts:
            ref = tc.speaker_embed(u.speaker_id, u.style)
            ucfg = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, f"synth:{u.utt_id}"))
            result = synthesize_with_backoff(model, vocab, u.text, ref, ucfg,
                                             quality_tag=quality)
            records.append(_stream_record(u.utt_id, "shallow", result))
    with open(streams_path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_run_manifest(out, {
        "command": "synth",
        "seed": cfg.seed,
        "config": {"sample": _config_dict(cfg), "mode": args.mode,
                   "quality_prefix": quality, "split": args.split},
        "inputs": {"checkpoint": args.checkpoint, "vocab": str(vocab_path),
                   "data": args.data, "text": args.text},
        "outputs": {"streams": str(args.out) + "/streams.jsonl"},
    })
    print(f"synthesized {len(records)} stream(s) to {streams_path}")
    return 0


def cmd_eval(args) -> int:
    data_path = Path(args.data)
    if not data_path.exists():
        raise _fail("missing_manifest", f"dataset manifest not found: {args.data}")
    streams_path = Path(args.streams)
    if streams_path.is_dir():
        streams_path = streams_path / "streams.jsonl"
    if not streams_path.exists():
        raise _fail("missing_streams", f"synthesized streams not found: {streams_path}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "records.csv", out / "report.csv", out / "summary.json"]
    _require_free(outputs, args.force)

    utts = {u.utt_id: u for u in load_manifest(data_path)}
    tables = speaker_tables(list(utts.values()))
    by_speaker: dict[int, list[Utterance]] = {}
    for u in utts.values():
        by_speaker.setdefault(u.speaker_id, []).append(u)

    records = []
    eer_scores: list[tuple[float, int]] = []
    with open(streams_path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["id"] not in utts:
                raise _fail("malformed_manifest", f"stream id {rec['id']} not in dataset")
            u = utts[rec["id"]]
            stream = tc.CodebookStream(rec["l0"], rec["l1"], rec["l2"])
            table = tables[u.speaker_id]
            hyp = tc.transcribe(stream, table)
            records.append(mt.EvalRecord(
                utt_id=u.utt_id, style=u.style, mode=rec.get("mode", "shallow"),
                cer=mt.cer(hyp, u.text), wer=mt.wer(hyp, u.text),
                speaker_score=tc.speaker_score(stream, table),
                stuck_rate=mt.stuck_rate(stream),
                frames=rec["frames"], used_top_p=rec["used_top_p"],
            ))
            # verification protocol: (reference, generated) -> 0,
            # (reference, other ground truth of the same speaker) -> 1
            eer_scores.append((tc.speaker_score(stream, table), 0))
            others = [o for o in by_speaker[u.speaker_id] if o.utt_id != u.utt_id]
            if others:
                other = others[hash(u.utt_id) % len(others)]
                eer_scores.append((tc.speaker_score(other.stream, table), 1))

    mt.write_records_csv(out / "records.csv", records)
    report = mt.grouped_report(records)
    mt.write_report_csv(out / "report.csv", report)
    labels = {lab for _, lab in eer_scores}
    summary = {
        "n": len(records),
        "cer_mean": float(np.mean([r.cer for r in records])),
        "wer_mean": float(np.mean([r.wer for r in records])),
        "spk_mean": float(np.mean([r.speaker_score for r in records])),
        "stuck_mean": float(np.mean([r.stuck_rate for r in records])),
        "eer": mt.eer(eer_scores) if labels == {0, 1} else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    _write_run_manifest(out, {
        "command": "eval",
        "seed": 0,
        "config": {},
        "inputs": {"dataset": args.data, "streams": args.streams},
        "outputs": {"records": str(args.out) + "/records.csv",
                    "report": str(args.out) + "/report.csv",
                    "summary": str(args.out) + "/summary.json"},
    })
    print(f"evaluated {summary['n']} streams: cer={summary['cer_mean']:.4f} "
          f"spk={summary['spk_mean']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    tol = 1e-3
    with nm.precision(np.float64):
        preset = PRESETS[args.preset]
        model = SpeechLM(preset(), seed=args.seed or 0)
        jitter = np.random.default_rng(derive_seed(args.seed or 0, "gradcheck-jitter"))
        for _, t in model.params.items():
            t.data = t.data + jitter.normal(0, 0.08, size=t.shape)
        rng = np.random.default_rng(derive_seed(args.seed or 0, "gradcheck-batch"))
        c = model.config
        batch = Batch(
            text_ids=rng.integers(0, c.text_vocab, (2, 5)),
            text_mask=np.ones((2, 5)),
            sv=rng.standard_normal((2, c.d_sv)),
            clap=rng.standard_normal((2, c.d_clap)),
            patches=rng.integers(0, min(c.v0, c.v1, c.v2), (2, 4, 7)),
            n_frames=np.array([4, 4]),
        )
        err_fwd = nm.grad_check(lambda: model.forward_loss(batch, flux_beta=0.05).total,
                                model.params, n_probe=args.n_probe, eps=1e-5, seed=3)
        from .preference import PreferencePair
        pair = PreferencePair(
            utt_id="probe", sv=rng.standard_normal(c.d_sv), clap=rng.standard_normal(c.d_clap),
            text_ids=list(rng.integers(0, c.text_vocab, 4)),
            chosen=[list(r) for r in rng.integers(0, min(c.v0, c.v1, c.v2), (3, 7))],
            rejected=[list(r) for r in rng.integers(0, min(c.v0, c.v1, c.v2), (2, 7))],
            cer_rejected=1.0, quality_rejected=0.0,
        )
        err_orpo = nm.grad_check(lambda: orpo_loss(model, pair).total,
                                 model.params, n_probe=args.n_probe, eps=1e-5, seed=5)
    print(f"forward_loss max rel err: {err_fwd:.3e}")
    print(f"orpo_loss max rel err:    {err_orpo:.3e}")
    ok = err_fwd < tol and err_orpo < tol
    print("PASS" if ok else "FAIL", f"(tolerance {tol})")
    return 0 if ok else 1


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchtts", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-speakers", type=int, default=None)
    p.add_argument("--n-utts", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain on a dataset manifest")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--no-flux", action="store_true", help="disable the repetition penalty")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="preference fine-tuning from a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--n-cycles", type=int, default=4)
    p.add_argument("--n-pairs", type=int, default=32)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("synth", help="synthesize token streams")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--text", default=None)
    p.add_argument("--speaker", type=int, default=0)
    p.add_argument("--style", choices=tc.STYLES, default="regular")
    p.add_argument("--mode", choices=("shallow", "deep"), default="shallow")
    p.add_argument("--ref-transcript", default=None)
    p.add_argument("--ref-stream", default=None)
    p.add_argument("--data", default=None, help="dataset manifest for batch synthesis")
    p.add_argument("--split", default="heldout")
    p.add_argument("--top-p", type=float, default=None)
    p.add_argument("--no-ras", action="store_true")
    p.add_argument("--no-quality-prefix", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score synthesized streams against the dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--streams", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training losses")
    common(p)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--n-probe", type=int, default=60)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f'error code={e.code} msg="{e}"', file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f'error code=runtime msg="{e}"', file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
