"""Command line entry point: ``mmslt <command> --run-dir DIR [options]``.

Run directory layout::

    resolved_config.yaml      configuration every command in the run uses
    data/                     manifest.jsonl, frames/, vocab.json (make-toy)
    cache/descriptions.jsonl  per-frame description cache (gen-desc)
    features/descriptions.mmfs
    checkpoints/{mmlp,slt}/{last,best}
    logs/{mmlp,slt}.jsonl (+ .png curves)
    outputs/                  translations, evaluation and ablation reports

Errors end the process with one JSON line on stderr,
``{"error": <kind>, "exit_code": <n>, "message": ...}``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, PipelineConfig, load_config

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_PREREQ, EXIT_RUNTIME = 0, 2, 3, 4, 5

logger = logging.getLogger("mmslt")


class CLIError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind, self.code = kind, code


def _usage(msg: str) -> CLIError:
    return CLIError("usage", EXIT_USAGE, msg)


def _prereq(msg: str) -> CLIError:
    return CLIError("missing_prerequisite", EXIT_PREREQ, msg)


# ---------------------------------------------------------------------------
# run directory helpers

class Run:
    def __init__(self, root: Path, cfg: PipelineConfig, force: bool = False):
        self.root = root
        self.cfg = cfg
        self.force = force

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def manifest(self) -> Path:
        p = Path(self.cfg.data.manifest)
        return p if p.is_absolute() else self.root / p

    @property
    def cache_path(self) -> Path:
        return self.path("cache", "descriptions.jsonl")

    @property
    def feature_path(self) -> Path:
        return self.path("features", "descriptions.mmfs")

    def ckpt(self, stage: str) -> Path:
        return self.path("checkpoints", stage)

    def log(self, stage: str) -> Path:
        return self.path("logs", f"{stage}.jsonl")

    def claim(self, *paths: Path) -> None:
        """Refuse to overwrite existing outputs unless --force was given."""
        existing = [p for p in paths if p.exists()]
        if not existing:
            return
        if not self.force:
            raise _usage(f"{existing[0]} exists; pass --force to overwrite")
        for p in existing:
            shutil.rmtree(p) if p.is_dir() else p.unlink()


def resolve_run(args) -> Run:
    root = Path(args.run_dir)
    snap = root / "resolved_config.yaml"
    if snap.exists() and args.config is None and args.preset is None:
        # bare --set overrides refine the run's own configuration
        cfg = load_config(snap, args.overrides)
        if args.overrides and cfg.hash() != load_config(snap).hash() and not args.force:
            raise CLIError("config", EXIT_CONFIG,
                           f"{snap} holds a different configuration; pass --force to replace it")
    else:
        cfg = load_config(args.config, args.overrides, args.preset)
        if snap.exists():
            old = load_config(snap)
            if old.hash() != cfg.hash() and not args.force:
                raise CLIError("config", EXIT_CONFIG,
                               f"{snap} holds a different configuration; pass --force to replace it")
    root.mkdir(parents=True, exist_ok=True)
    cfg.dump(snap)
    return Run(root, cfg, args.force)


def load_dataset(run: Run):
    from .data import ManifestError, Vocabulary, get_tokenizer, load_manifest

    if not run.manifest.exists():
        raise _prereq(f"no dataset at {run.manifest} (run make-toy or set data.manifest)")
    vocab_path = run.manifest.parent / "vocab.json"
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else None
    try:
        return load_manifest(run.manifest, vocab, get_tokenizer(run.cfg.data.tokenizer))
    except ManifestError as e:
        raise CLIError("data", EXIT_RUNTIME, str(e)) from None


def _feature_hash(run: Run, cache, model_id: str) -> str:
    from .pretrain import feature_store_hash

    p = run.cfg.profile
    desc = {"encoder": p.desc_encoder, "dim": p.desc_dim, "layers": p.desc_layers,
            "seed": run.cfg.gsd.encoder_seed}
    return feature_store_hash(cache.digest(), desc, run.cfg.gsd.prompt_id, model_id)


def open_features(run: Run, required: bool):
    from .pretrain import FeatureStore

    if not run.feature_path.exists():
        if required:
            raise _prereq(f"no feature store at {run.feature_path} (run gen-desc and build-feature-store)")
        return None
    store = FeatureStore.open(run.feature_path)
    if run.cache_path.exists():
        from .gsd import DescriptionCache

        # a store built from an older cache or another encoder is rejected
        expected = _feature_hash(run, DescriptionCache(run.cache_path), store.meta.get("model_id", ""))
        store = FeatureStore.open(run.feature_path, expected)
    return store


def _needs_features(cfg: PipelineConfig, stage: str) -> bool:
    mode = cfg.model.desc_mode
    if stage == "mmlp":
        return mode == "direct" or (mode == "mapped" and cfg.mmlp.use_dm)
    return mode == "direct"


def _plot_log(path: Path, title: str) -> None:
    from .engine import read_log
    from .plotting import plot_training_log

    if path.exists():
        plot_training_log(read_log(path), path.with_suffix(".png"), title)


# ---------------------------------------------------------------------------
# commands

def cmd_make_toy(run: Run, args) -> dict:
    from .data import make_toy_dataset, write_manifest

    out = run.manifest.parent
    run.claim(run.manifest, out / "frames", out / "vocab.json", out / "toy_meta.json")
    ds = make_toy_dataset(args.n_videos, args.vocab_size, args.max_len, args.toy_seed,
                          run.cfg.profile.image_size)
    write_manifest(ds, out, run.manifest.name)
    ds.vocab.save(out / "vocab.json")
    splits = {s: len(ds.split(s)) for s in ("train", "dev", "test")}
    return {"manifest": str(run.manifest), "videos": len(ds), "vocab": len(ds.vocab), **splits}


def make_client(run: Run, dataset, kind: str, url: Optional[str] = None, model: Optional[str] = None):
    from .gsd import GlyphMockClient, HTTPClient, MockClient

    if kind == "mock":
        if "toy" in dataset.meta:
            return GlyphMockClient.from_dataset(dataset)
        return MockClient()
    if kind == "http":
        return HTTPClient(url or run.cfg.gsd.url, model or run.cfg.gsd.model)
    raise _usage(f"unknown client {kind!r} (mock|http)")


def cmd_gen_desc(run: Run, args) -> dict:
    from .gsd import DescriptionCache, GenerationError, generate_corpus

    ds = load_dataset(run)
    if args.force and run.cache_path.exists():
        run.cache_path.unlink()
    g = run.cfg.gsd
    client = make_client(run, ds, args.client or g.client, args.url, args.model)
    cache = DescriptionCache(run.cache_path)
    before = len(cache)
    try:
        generate_corpus(ds.items, g.prompt_id, client, cache, batch_size=g.batch_size,
                        max_tokens=g.max_tokens, target_side=g.target_side, attempts=g.attempts,
                        backoff=g.backoff)
    except GenerationError as e:
        raise CLIError("generation", EXIT_RUNTIME, f"{e}; completed frames are cached, re-run to resume") from None
    return {"cache": str(run.cache_path), "entries": len(cache), "new": len(cache) - before,
            "client_calls": client.calls, "model_id": client.model_id}


def cmd_build_features(run: Run, args) -> dict:
    from .gsd import DescriptionCache, descriptions_from_cache
    from .models import build_description_encoder
    from .pretrain import FeatureStore, build_features

    ds = load_dataset(run)
    if not run.cache_path.exists():
        raise _prereq(f"no description cache at {run.cache_path} (run gen-desc)")
    run.claim(run.feature_path)
    cache = DescriptionCache(run.cache_path)
    model_id = args.model_id or _cache_model_id(run.cache_path)
    try:
        sets = {v.id: descriptions_from_cache(v, run.cfg.gsd.prompt_id, model_id, cache) for v in ds}
    except KeyError as e:
        raise _prereq(f"{e.args[0]} (re-run gen-desc)") from None
    enc = build_description_encoder(run.cfg.profile, run.cfg.gsd.encoder_seed)
    feats = build_features(sets, enc)
    meta = {"config_hash": _feature_hash(run, cache, model_id), "model_id": model_id,
            "prompt_id": run.cfg.gsd.prompt_id}
    FeatureStore.write(run.feature_path, feats, meta)
    return {"features": str(run.feature_path), "videos": len(feats)}


def _cache_model_id(path: Path) -> str:
    with path.open() as fh:
        for line in fh:
            if line.strip():
                return json.loads(line)["model_id"]
    raise _prereq(f"{path} is empty (run gen-desc)")


def _train(run: Run, args, stage: str, init_from: Optional[Path] = None, from_scratch: bool = False) -> dict:
    from .engine import run_stage

    ds = load_dataset(run)
    feats = open_features(run, _needs_features(run.cfg, stage))
    ck, log = run.ckpt(stage), run.log(stage)
    if not args.resume:
        run.claim(ck, log)
    t0 = time.time()
    res = run_stage(run.cfg, stage, ds, ck, log, feats, init_from=init_from, from_scratch=from_scratch,
                    resume=args.resume)
    _plot_log(log, stage)
    return {"stage": stage, "steps": res.steps, "best": str(res.best), "seconds": round(time.time() - t0, 2),
            **res.final}


def cmd_pretrain(run: Run, args) -> dict:
    return _train(run, args, "mmlp")


def cmd_finetune(run: Run, args) -> dict:
    init = run.ckpt("mmlp") / "best"
    if args.from_scratch:
        return _train(run, args, "slt", from_scratch=True)
    if not (init / "meta.json").exists():
        raise _prereq(f"no stage-1 checkpoint at {init}; run pretrain or pass --from-scratch")
    return _train(run, args, "slt", init_from=init)


def _load_slt_model(run: Run, ds, checkpoint: Optional[str]):
    from .engine import build_model, load_checkpoint

    path = Path(checkpoint) if checkpoint else run.ckpt("slt") / "best"
    if not (path / "meta.json").exists():
        raise _prereq(f"no translation checkpoint at {path} (run finetune)")
    model = build_model(run.cfg, len(ds.vocab))
    load_checkpoint(path, model)
    return model


def cmd_translate(run: Run, args) -> dict:
    from .engine import decode_config, translate_videos

    ds = load_dataset(run)
    videos = sorted(ds.split(args.split), key=lambda v: v.id)
    if not videos:
        raise _usage(f"split {args.split!r} is empty")
    out = run.path("outputs", f"translations_{args.split}.jsonl")
    run.claim(out)
    model = _load_slt_model(run, ds, args.checkpoint)
    feats = open_features(run, model.desc_mode == "direct")
    rows = translate_videos(model, videos, ds, feats, decode_config(run.cfg, ds, args.beam))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows))
    return {"translations": str(out), "n": len(rows)}


def _write_tsv(path: Path, rows: Sequence[dict], keys: Sequence[str]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([f"{r[k]:.4f}" if isinstance(r[k], float) else r[k] for k in keys])


def cmd_evaluate(run: Run, args) -> dict:
    from .data import get_tokenizer
    from .metrics import evaluate
    from .plotting import plot_scores

    src = Path(args.input) if args.input else run.path("outputs", f"translations_{args.split}.jsonl")
    if not src.exists():
        raise _prereq(f"no translations at {src} (run translate)")
    rows = [json.loads(l) for l in src.read_text().splitlines() if l.strip()]
    if not rows:
        raise CLIError("data", EXIT_RUNTIME, f"{src} holds no translations")
    missing = [k for k in ("hypothesis", "reference") if k not in rows[0]]
    if missing:
        raise CLIError("data", EXIT_RUNTIME, f"{src}: records lack {', '.join(missing)}")
    stem = run.path("outputs", f"eval_{src.stem.replace('translations_', '')}")
    outs = [stem.with_suffix(s) for s in (".json", ".txt", ".tsv", ".png")]
    run.claim(*outs)
    report = evaluate([r["hypothesis"] for r in rows], [r["reference"] for r in rows],
                      [r.get("id", str(i)) for i, r in enumerate(rows)],
                      get_tokenizer(run.cfg.data.metric_tokenization))
    outs[0].write_text(report.to_json() + "\n")
    outs[1].write_text(report.table() + "\n")
    per = [dict(p, hypothesis=r["hypothesis"], reference=r["reference"]) for p, r in zip(report.per_sentence, rows)]
    _write_tsv(outs[2], per, ["id", "bleu4", "rouge_l", "hypothesis", "reference"])
    plot_scores(report.scores(), outs[3], src.stem)
    for stage in ("mmlp", "slt"):
        _plot_log(run.log(stage), stage)
    print(report.table())
    return {"report": str(outs[0]), **report.scores()}


def cmd_ablate(run: Run, args) -> dict:
    from .engine import ABLATION_ROWS, run_ablation
    from .plotting import plot_ablation

    ds = load_dataset(run)
    rows = sorted(set(args.rows)) if args.rows else [r[0] for r in ABLATION_ROWS]
    bad = [r for r in rows if r not in {a[0] for a in ABLATION_ROWS}]
    if bad:
        raise _usage(f"unknown ablation row(s) {bad}; valid rows are 1-5")
    needs = any(_needs_features(_row_cfg(run.cfg, r), s) for r in rows for s in ("mmlp", "slt"))
    feats = open_features(run, needs)
    out = run.path("outputs", "ablation")
    run.claim(out)
    report = run_ablation(run.cfg, ds, feats, out, rows, args.split, progress=logger.info)
    (out / "ablation.json").write_text(json.dumps(report, indent=1) + "\n")
    _write_tsv(out / "ablation.tsv", report,
               ["row", "label", "gsd_mllm", "ml_align", "dm", "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"])
    plot_ablation(report, out / "ablation.png", f"ablation ({args.split})")
    return {"report": str(out / "ablation.json"), "rows": [{"row": r["row"], "bleu4": r["bleu4"]} for r in report]}


def _row_cfg(cfg: PipelineConfig, row: int) -> PipelineConfig:
    from .engine import ablation_config

    return ablation_config(cfg, row)[0]


COMMANDS = {
    "make-toy": cmd_make_toy,
    "gen-desc": cmd_gen_desc,
    "build-feature-store": cmd_build_features,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _usage(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", required=True, help="directory holding every artifact of the run")
    common.add_argument("--config", help="YAML config file (may set 'preset: toy|full')")
    common.add_argument("--preset", choices=["toy", "full"], help="base configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. --set slt.epochs=5 (repeatable)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mmslt", description="Gloss-free sign language translation with sign descriptions.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("make-toy", parents=[common], help="write the synthetic glyph dataset")
    s.add_argument("--n-videos", type=int, default=200)
    s.add_argument("--vocab-size", type=int, default=20)
    s.add_argument("--max-len", type=int, default=6)
    s.add_argument("--toy-seed", type=int, default=0)

    s = sub.add_parser("gen-desc", parents=[common], help="describe every frame with an image MLLM")
    s.add_argument("--client", choices=["mock", "http"], help="default: gsd.client from the config")
    s.add_argument("--url")
    s.add_argument("--model")

    s = sub.add_parser("build-feature-store", parents=[common], help="encode cached descriptions")
    s.add_argument("--model-id", help="description source (default: the cache's model id)")

    for name, text in (("pretrain", "stage 1: multimodal-language pre-training"),
                       ("finetune", "stage 2: translation fine-tuning")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--resume", action="store_true", help="continue from checkpoints/<stage>/last")
        if name == "finetune":
            s.add_argument("--from-scratch", action="store_true", help="skip the stage-1 initialisation")

    s = sub.add_parser("translate", parents=[common], help="decode a split to JSON Lines")
    s.add_argument("--split", default="test", choices=["train", "dev", "test"])
    s.add_argument("--beam", type=int, help="beam width (default: decode.beam_size)")
    s.add_argument("--checkpoint", help="default: checkpoints/slt/best")

    s = sub.add_parser("evaluate", parents=[common], help="BLEU-1..4 and ROUGE-L of translations")
    s.add_argument("--split", default="test", choices=["train", "dev", "test"])
    s.add_argument("--input", help="translations JSONL (default: outputs/translations_<split>.jsonl)")

    s = sub.add_parser("ablate", parents=[common], help="train and score the five ablation rows")
    s.add_argument("--rows", type=int, nargs="+", help="subset of rows 1-5")
    s.add_argument("--split", default="test", choices=["dev", "test"])
    return p


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .engine import CheckpointError, MissingPrerequisite, TrainingError
    from .gsd import TransportError
    from .pretrain import StaleFeatureStore

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CLIError as e:
        parser.print_usage(sys.stderr)
        return _fail(e.kind, e.code, str(e))
    except SystemExit as e:      # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run = resolve_run(args)
        summary = COMMANDS[args.command](run, args)
    except CLIError as e:
        return _fail(e.kind, e.code, str(e))
    except ConfigError as e:
        return _fail("config", EXIT_CONFIG, str(e))
    except (MissingPrerequisite, StaleFeatureStore, FileNotFoundError) as e:
        return _fail("missing_prerequisite", EXIT_PREREQ, str(e))
    except (TrainingError, CheckpointError, TransportError, RuntimeError, ValueError, KeyError) as e:
        return _fail("runtime", EXIT_RUNTIME, f"{type(e).__name__}: {e}")
    print(json.dumps({"command": args.command, **summary}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
