"""``dryrecover`` command-line entry point.

Exit codes:

=====  ==========================================
0      success
1      unexpected internal error
2      bad command-line usage (argparse)
3      validation error (bad input, config, data or checkpoint contents)
4      I/O error (missing or unreadable file, undecodable audio)
5      training diverged (non-finite loss)
=====  ==========================================

Every successful command writes a JSON run-record holding the argv, the
resolved config, the root seed, the toolkit version and git-style content
hashes of its inputs. It goes next to the main output (``<out_dir>/run_record.json``
or ``<out_file>.run.json``) unless ``--run-record`` names a path.
"""

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from dryrecover import __version__
from dryrecover.checkpoint import load_checkpoint
from dryrecover.config import load_config, parse_assignment
from dryrecover.dataset import MANIFEST_NAME, build_manifest, read_manifest, write_manifest
from dryrecover.denoiser import count_parameters as denoiser_parameters
from dryrecover.dspcore import load_audio, save_audio
from dryrecover.errors import AudioIOError, TrainingDivergedError, ValidationError
from dryrecover.fxrender import render_pair, sample_effect_config
from dryrecover.metrics import count_parameters, evaluate_corpus, make_extractor
from dryrecover.moslab import RatingsTable, analyze, dump_report
from dryrecover.pipeline import RestorationPipeline
from dryrecover.training import finetune_vocoder, train_denoiser, train_vocoder

logger = logging.getLogger("dryrecover")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5


# -- hashing and run-records -------------------------------------------------------

def git_blob_hash(path):
    """SHA-1 of ``b"blob <size>\\0" + content``, as ``git hash-object`` prints it."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(path):
    """Blob hash for a file; for a directory, a hash over its sorted ``relpath hash`` lines."""
    path = Path(path)
    if path.is_file():
        return git_blob_hash(path)
    if not path.is_dir():
        raise AudioIOError(f"no such file or directory: {path}")
    lines = [f"{p.relative_to(path).as_posix()} {git_blob_hash(p)}"
             for p in sorted(path.rglob("*")) if p.is_file()]
    return hashlib.sha1("\n".join(lines).encode()).hexdigest()


def derive_seed(master_seed, name):
    digest = hashlib.sha256(f"{int(master_seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def write_run_record(path, command, argv, config, seed, inputs, outputs, extra=None):
    record = {
        "command": command,
        "argv": list(argv),
        "toolkit_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {str(p): content_hash(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "created_unix": round(time.time(), 3),
    }
    if extra:
        record.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _record_path(args, default):
    return Path(args.run_record) if args.run_record else Path(default)


def _config(args):
    overrides = [parse_assignment(s) for s in args.set or ()]
    flags = {}
    if getattr(args, "preset", None):
        flags["preset"] = args.preset
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    phase = getattr(args, "phase", None)
    if phase:
        sched = {k: getattr(args, k) for k in ("max_steps", "batch_size", "crop_seconds")
                 if getattr(args, k, None) is not None}
        if sched:
            flags["schedule"] = {phase: sched}
    return load_config(args.config, [*overrides, flags])


# -- commands ----------------------------------------------------------------------

def _render_one(src, out_dir, master_seed):
    clip = load_audio(src)
    fx = sample_effect_config(derive_seed(master_seed, src.stem))
    dry, wet = render_pair(clip, fx)
    save_audio(dry, out_dir / "dry" / f"{src.stem}.wav")
    save_audio(wet, out_dir / "wet" / f"{src.stem}.wav")
    return src.stem, fx.to_dict()


def cmd_render(args):
    cfg = _config(args)
    dry_dir, out_dir = Path(args.dry_dir), Path(args.out_dir)
    if not dry_dir.is_dir():
        raise AudioIOError(f"not a directory: {dry_dir}")
    sources = sorted(dry_dir.glob("*.wav"))
    if not sources:
        raise ValidationError(f"no WAV files in {dry_dir}")
    for sub in ("dry", "wet"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        effects = dict(pool.map(lambda p: _render_one(p, out_dir, cfg.seed), sources))
    manifest = build_manifest(out_dir / "dry", out_dir / "wet", args.split, cfg.seed, effects, root=out_dir)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    print(f"rendered {len(sources)} pairs into {out_dir} ({manifest.counts()})")
    write_run_record(_record_path(args, out_dir / "run_record.json"), "render", args.argv, cfg.to_dict(), cfg.seed,
                     [dry_dir], [out_dir / MANIFEST_NAME])


def cmd_build_manifest(args):
    cfg = _config(args)
    root = Path(args.root)
    dry_dir = Path(args.dry_dir) if args.dry_dir else root / "dry"
    wet_dir = Path(args.wet_dir) if args.wet_dir else root / "wet"
    manifest = build_manifest(dry_dir, wet_dir, args.split, cfg.seed, root=root)
    out = root / MANIFEST_NAME
    write_manifest(manifest, out)
    print(f"wrote {out} ({manifest.counts()})")
    write_run_record(_record_path(args, root / "run_record.json"), "build-manifest", args.argv, cfg.to_dict(),
                     cfg.seed, [dry_dir, wet_dir], [out])


def _out_dir(args, cfg, phase):
    return Path(args.out_dir) if args.out_dir else Path(cfg.paths["checkpoints_dir"]) / phase


def _corpus(args, cfg):
    return Path(args.corpus) if args.corpus else Path(cfg.paths["corpus_root"])


def cmd_train_denoiser(args):
    cfg = _config(args)
    corpus, out_dir = _corpus(args, cfg), _out_dir(args, cfg, "denoiser")
    manifest = read_manifest(corpus)
    result = train_denoiser(manifest, cfg.denoiser, cfg.schedule("denoiser"), cfg.stft, out_dir=str(out_dir))
    n_params = denoiser_parameters(result.models["denoiser"])
    print(f"denoiser ({cfg.preset}, {n_params} parameters) trained for {result.step} steps -> {out_dir}")
    write_run_record(_record_path(args, out_dir / "run_record.json"), "train-denoiser", args.argv, cfg.to_dict(),
                     cfg.seed, [corpus / MANIFEST_NAME], [result.last_checkpoint],
                     {"parameter_count": n_params, "steps": result.step, "best_val": result.best_val})


def cmd_train_vocoder(args):
    cfg = _config(args)
    corpus, out_dir = _corpus(args, cfg), _out_dir(args, cfg, "vocoder")
    manifest = read_manifest(corpus)
    result = train_vocoder(manifest, cfg.vocoder, cfg.schedule("vocoder"), cfg.stft, cfg.losses, out_dir=str(out_dir))
    n_params = count_parameters(result.models["generator"])
    print(f"vocoder ({n_params} generator parameters) trained for {result.step} steps -> {out_dir}")
    write_run_record(_record_path(args, out_dir / "run_record.json"), "train-vocoder", args.argv, cfg.to_dict(),
                     cfg.seed, [corpus / MANIFEST_NAME], [result.last_checkpoint],
                     {"parameter_count": n_params, "steps": result.step, "best_val": result.best_val})


def cmd_finetune(args):
    cfg = _config(args)
    corpus, out_dir = _corpus(args, cfg), _out_dir(args, cfg, "finetune")
    manifest = read_manifest(corpus)
    den = load_checkpoint(args.denoiser_ckpt, expect_kind=("denoiser", "pipeline"))
    voc = load_checkpoint(args.vocoder_ckpt, expect_kind="vocoder")
    result = finetune_vocoder(manifest, den, voc, cfg.schedule("finetune"), cfg.losses, out_dir=str(out_dir))
    pipeline = RestorationPipeline(result.models["denoiser"], result.models["generator"], cfg.stft)
    bundle = pipeline.save(out_dir / "pipeline.ckpt", extra={"finetune_steps": result.step})
    print(f"fine-tuned for {result.step} steps; pipeline checkpoint at {bundle}")
    write_run_record(_record_path(args, out_dir / "run_record.json"), "finetune", args.argv, cfg.to_dict(),
                     cfg.seed, [corpus / MANIFEST_NAME, args.denoiser_ckpt, args.vocoder_ckpt],
                     [result.last_checkpoint, bundle], {"steps": result.step, "best_val": result.best_val})


def cmd_infer(args):
    cfg = _config(args)
    if args.pipeline:
        pipeline = RestorationPipeline.load(args.pipeline)
        inputs = [args.pipeline]
    elif args.denoiser_ckpt and args.vocoder_ckpt:
        pipeline = RestorationPipeline.from_checkpoints(args.denoiser_ckpt, args.vocoder_ckpt)
        inputs = [args.denoiser_ckpt, args.vocoder_ckpt]
    else:
        raise ValidationError("give --pipeline, or both --denoiser-ckpt and --vocoder-ckpt")
    clip = load_audio(args.input, target_rate=None)
    restored = pipeline.restore(clip, trim=not args.keep_full_length)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    save_audio(restored, args.output)
    print(f"wrote {args.output} ({len(restored)} samples)")
    write_run_record(_record_path(args, f"{args.output}.run.json"), "infer", args.argv, cfg.to_dict(), cfg.seed,
                     [*inputs, args.input], [args.output])


def cmd_evaluate(args):
    cfg = _config(args)
    report = evaluate_corpus(args.estimates, args.references, make_extractor(args.embedding))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.save(args.out)
    print(report.format_table())
    write_run_record(_record_path(args, f"{args.out}.run.json"), "evaluate", args.argv, cfg.to_dict(), cfg.seed,
                     [args.estimates, args.references], [args.out])


def cmd_mos_analyze(args):
    cfg = _config(args)
    table = RatingsTable.from_csv(args.ratings)
    report = analyze(table, args.dimension, args.alpha)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dump_report(report, args.out)
    for system, row in report["summary"].items():
        print(f"{system}\t{row['display']}\t(n={row['n']})")
    write_run_record(_record_path(args, f"{args.out}.run.json"), "mos-analyze", args.argv, cfg.to_dict(), cfg.seed,
                     [args.ratings], [args.out])


# -- parser ------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="YAML config file (defaults < file < flags)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key, e.g. --set denoiser.dropout=0.0 (repeatable)")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--run-record", help="where to write the run-record JSON")


def _training(p, phase):
    _common(p)
    p.set_defaults(phase=phase)
    p.add_argument("--corpus", help="corpus root holding manifest.jsonl (default: paths.corpus_root)")
    p.add_argument("--out-dir", help=f"checkpoint directory (default: paths.checkpoints_dir/{phase})")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop-seconds", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="dryrecover", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="apply sampled distortion/clipping chains to a folder of dry WAVs")
    _common(p)
    p.add_argument("--dry-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--jobs", type=int, default=1, help="parallel render workers")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("build-manifest", help="pair existing dry/ and wet/ folders into a manifest")
    _common(p)
    p.add_argument("--root", required=True, help="corpus root; the manifest is written here")
    p.add_argument("--dry-dir", help="default: ROOT/dry")
    p.add_argument("--wet-dir", help="default: ROOT/wet")
    p.add_argument("--split", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VAL", "TEST"))
    p.set_defaults(func=cmd_build_manifest)

    p = sub.add_parser("train-denoiser", help="phase 1: Mel denoiser")
    _training(p, "denoiser")
    p.add_argument("--preset", choices=("base", "large", "custom"))
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("train-vocoder", help="phase 2: vocoder on ground-truth dry Mel")
    _training(p, "vocoder")
    p.set_defaults(func=cmd_train_vocoder)

    p = sub.add_parser("finetune", help="phase 3: vocoder fine-tuning on denoiser output")
    _training(p, "finetune")
    p.add_argument("--denoiser-ckpt", required=True)
    p.add_argument("--vocoder-ckpt", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", help="restore one WAV file")
    _common(p)
    p.add_argument("--pipeline", help="pipeline checkpoint written by finetune")
    p.add_argument("--denoiser-ckpt")
    p.add_argument("--vocoder-ckpt")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--keep-full-length", action="store_true",
                   help="keep the full frames*hop vocoder output instead of trimming to the input length")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="FAD, ESR, SI-SDR and MR-STFT over paired folders")
    _common(p)
    p.add_argument("--estimates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--embedding", default="reference", help="reference | external:<path>")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mos-analyze", help="MOS summary, ANOVA, Tukey HSD and violin data")
    _common(p)
    p.add_argument("--ratings", required=True)
    p.add_argument("--dimension", required=True, choices=("AQ", "DL"))
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mos_analyze)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc} (state dumped to {exc.dump_path})", file=sys.stderr)
        return EXIT_DIVERGED
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (AudioIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
