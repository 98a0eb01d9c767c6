"""
Command-line entry point.

    python -m app.cli gen-data  --config run.json
    python -m app.cli train     --config run.json --seed 1 --out runs/a
    python -m app.cli predict   --config run.json --checkpoint runs/a/model.ckpt
    python -m app.cli eval      --config run.json --predictions runs/a/predictions/predictions.json --render
    python -m app.cli gradcheck
    python -m app.cli bench
    python -m app.cli serve

Engine and validation errors print one `error[CODE]: message` line on
stderr and exit with status 2; unexpected failures print an E_INTERNAL line and
exit with status 1.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel, ValidationError

from app.core.config import settings
from app.core.errors import ConfigError, DatasetError, EngineError, GradientCheckError, InternalError
from app.core.log_setup import configure_logging
from app.schemas.config import RunConfig
from app.schemas.dataset import Split
from app.services import trainer
from app.services.bench import run_bench
from app.services.gradcheck import COMPONENTS, run_gradcheck
from app.services.preprocess import MIN_SPLIT_SAMPLES, split_dataset
from app.services.synthetic import generate_synthetic

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
EXIT_ENGINE_ERROR = 2
EXIT_UNEXPECTED = 1


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """RunConfig from --config (defaults without one) with --seed / --out applied."""
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = RunConfig.from_file(path)
    else:
        cfg = RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) and args.command == "train":
        overrides["out_dir"] = args.out
    return cfg.model_copy(update=overrides) if overrides else cfg


def _output_dir(args: argparse.Namespace, cfg: RunConfig, default: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.out_dir) / default


def _emit(report: BaseModel, out_dir: Optional[Path], name: str) -> None:
    text = report.model_dump_json(indent=2)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_gen_data(args: argparse.Namespace) -> int:
    """Generate the synthetic dataset, split it 8:1:1 and write its manifest."""
    cfg = load_run_config(args)
    out_dir = Path(args.out) if args.out else Path(cfg.manifest_path).parent
    if cfg.synth.count < MIN_SPLIT_SAMPLES:
        raise DatasetError(
            f"synth.count={cfg.synth.count} is too small; the split needs at least {MIN_SPLIT_SAMPLES} samples"
        )
    manifest = split_dataset(generate_synthetic(cfg.synth, out_dir), seed=cfg.seed)
    manifest.save(out_dir / MANIFEST_NAME)
    cfg.write(out_dir / trainer.CONFIG_NAME)
    logger.info(f"Wrote manifest {out_dir / MANIFEST_NAME}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    """Train and keep the best-validation checkpoint."""
    result = trainer.train(load_run_config(args))
    print(f"best_epoch={result.best_epoch} best_f1={result.best_f1:.6f} steps={result.steps}")
    return 0


def _checkpoint(args: argparse.Namespace, cfg: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / trainer.CHECKPOINT_NAME


def cmd_predict(args: argparse.Namespace) -> int:
    """Write probability maps, binary masks and predictions.json for one split."""
    cfg = load_run_config(args)
    out_dir = _output_dir(args, cfg, "predictions")
    index = trainer.predict_split(
        _checkpoint(args, cfg),
        cfg.manifest_path,
        Split(args.split),
        out_dir,
        batch_size=cfg.batch_size,
        fallback_preprocess=cfg.preprocess,
    )
    cfg.write(out_dir / trainer.CONFIG_NAME)
    print(f"predictions={len(index.samples)} out={out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """Micro-averaged metrics from a checkpoint or from stored predictions."""
    cfg = load_run_config(args)
    out_dir = _output_dir(args, cfg, "eval")
    split = Split(args.split)
    if args.predictions:
        report = trainer.evaluate_predictions(
            args.predictions, cfg.manifest_path, split, out_dir, render=args.render
        )
    else:
        report = trainer.evaluate_checkpoint(
            _checkpoint(args, cfg),
            cfg.manifest_path,
            split,
            out_dir,
            batch_size=cfg.batch_size,
            render=args.render,
            fallback_preprocess=cfg.preprocess,
        )
    cfg.write(out_dir / trainer.CONFIG_NAME)
    print(report.model_dump_json(indent=2))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Finite-difference suite; failing components make the command fail."""
    cfg = load_run_config(args)
    report = run_gradcheck(perturb=args.perturb, components=args.component or None, seed=cfg.seed)
    _emit(report, Path(args.out) if args.out else None, "gradcheck.json")
    if not report.passed:
        failed = [e.component for e in report.entries if not e.passed]
        raise GradientCheckError(f"gradient check failed for {', '.join(failed)}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    """Timings and parameter counts."""
    cfg = load_run_config(args)
    _emit(run_bench(cfg.network, seed=cfg.seed), Path(args.out) if args.out else None, "bench.json")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run(
        "app.main:app",
        host=args.host or settings.host,
        port=args.port or settings.port,
        reload=settings.env == "development",
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wildfire-seg",
        description="Transform-domain UNet wildfire spread segmentation.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL from the environment")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="Overrides the config seed")
        p.add_argument("--out", default=None, help="Output directory")
        p.set_defaults(handler=handler)
        return p

    command("gen-data", cmd_gen_data, "Generate the synthetic dataset")
    command("train", cmd_train, "Train a network")

    for name, handler, help_text in (
        ("predict", cmd_predict, "Predict probability maps and masks"),
        ("eval", cmd_eval, "Evaluate a checkpoint or stored predictions"),
    ):
        p = command(name, handler, help_text)
        p.add_argument("--checkpoint", default=None, help="Checkpoint archive (default: <out_dir>/model.ckpt)")
        p.add_argument("--split", default=Split.TEST.value, choices=[s.value for s in Split])
        if name == "eval":
            p.add_argument("--predictions", default=None, help="predictions.json written by predict")
            p.add_argument("--render", action="store_true", help="Write a confusion PPM per sample")

    p = command("gradcheck", cmd_gradcheck, "Finite-difference gradient suite")
    p.add_argument("--perturb", action="append", default=[], choices=COMPONENTS, help="Corrupt a component's gradient")
    p.add_argument("--component", action="append", default=[], choices=COMPONENTS, help="Run only this component")

    command("bench", cmd_bench, "Timing and size report")

    p = command("serve", cmd_serve, "Run the HTTP service")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except EngineError as e:
        print(e.one_line(), file=sys.stderr)
        return EXIT_ENGINE_ERROR
    except ValidationError as e:
        print(ConfigError(str(e)).one_line(), file=sys.stderr)
        return EXIT_ENGINE_ERROR
    except Exception as e:
        logger.exception(f"{args.command} failed")
        print(InternalError(f"{type(e).__name__}: {e}").one_line(), file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
