import argparse
import json
import logging
import sys
from typing import List, Optional

from app.core import pipeline
from app.core.config import DEFAULT_CONFIG_PATH, load_config, save_config
from app.core.evaluator import Reference
from app.core.presets import Preset

logger = logging.getLogger("pianocodec")

GRADCHECK_TOLERANCE = 1e-4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pianocodec",
        description="PianoCodec - performance MIDI to piano audio with a codec language model.",
    )
    parser.add_argument("--config", default=DEFAULT_CONFIG_PATH, help="YAML config file")
    parser.add_argument("--preset", choices=[p.value for p in Preset], help="size preset")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
    parser.add_argument("--run-dir", help="run directory (default: the latest run)")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("prepare", help="segment aligned MIDI/WAV pairs into tokenized clips")

    codec = sub.add_parser("train-codec", help="fit RVQ codebooks and encode every clip")
    codec.add_argument("--finetune-epochs", type=int, default=0,
                       help="epochs of refinement on random 1 s crops")

    lm = sub.add_parser("train-lm", help="train the AR/NAR codec language model")
    lm.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")

    synth = sub.add_parser("synth", help="render a MIDI file to audio")
    synth.add_argument("--midi", required=True)
    synth.add_argument("--prompt-audio")
    synth.add_argument("--prompt-midi")
    synth.add_argument("--out", help="output WAV (default: <run>/synth/<midi name>.wav)")

    ev = sub.add_parser("eval", help="objective metrics of generated against reference audio")
    ev.add_argument("--ref", required=True, help="directory of reference WAVs")
    ev.add_argument("--gen", required=True, help="directory of generated WAVs, same file names")
    ev.add_argument("--reference", choices=[r.value for r in Reference], default=Reference.GROUND_TRUTH.value,
                    help="gt: raw references, rc: references passed through the codec")

    rc = sub.add_parser("reconstruct", help="codec reconstruction metrics on prepared clips")
    rc.add_argument("--split", default="test", choices=["train", "validation", "test"])

    sub.add_parser("gradcheck", help="compare autograd with finite differences on a tiny model")
    return parser


def _dispatch(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    cfg = load_config(args.config, args.preset, args.overrides)

    if args.command == "gradcheck":
        error = pipeline.gradcheck(cfg)
        print(json.dumps({"max_relative_error": error, "tolerance": GRADCHECK_TOLERANCE}))
        return 0 if error < GRADCHECK_TOLERANCE else 1

    if args.command == "prepare":
        run_dir = pipeline.resolve_run_dir(cfg, args.run_dir, create=True)
        save_config(cfg, f"{run_dir}/config.yaml")
        records = pipeline.prepare(cfg, run_dir)
        print(json.dumps({"run_dir": run_dir, "clips": len(records), "digest": cfg.digest()}))
        return 0

    if args.command == "eval":
        run_dir = pipeline.resolve_run_dir(cfg, args.run_dir, create=True)
        report = pipeline.evaluate(cfg, run_dir, args.ref, args.gen, args.reference)
        print(json.dumps(report.summary()))
        return 0

    run_dir = pipeline.resolve_run_dir(cfg, args.run_dir)
    if args.command == "train-codec":
        cb = pipeline.train_codec(cfg, run_dir, args.finetune_epochs)
        print(json.dumps({"run_dir": run_dir, "iterations": cb.iterations, "distortion": cb.distortion}))
    elif args.command == "train-lm":
        state = pipeline.train_lm(cfg, run_dir, args.resume)
        print(json.dumps({"run_dir": run_dir, "steps": state.step}))
    elif args.command == "synth":
        if (args.prompt_audio is None) != (args.prompt_midi is None):
            parser.error("--prompt-audio and --prompt-midi must be given together")
        out = args.out or pipeline.default_synth_path(run_dir, args.midi)
        pipeline.synth(cfg, run_dir, args.midi, out, args.prompt_audio, args.prompt_midi)
        print(json.dumps({"output": out}))
    elif args.command == "reconstruct":
        report = pipeline.reconstruct_clips(cfg, run_dir, args.split)
        print(json.dumps(report.summary()))
    return 0


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=args.log_level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args, parser)
    except SystemExit as e:
        return int(e.code or 0)
    except FileNotFoundError as e:
        logger.error(json.dumps({"error": str(e)}))
        return 2
    except Exception as e:
        logger.error(json.dumps({"error": str(e), "type": type(e).__name__}))
        logger.debug("traceback", exc_info=True)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
