import argparse
import logging
import sys
from pathlib import Path

from harness.config import ExperimentConfig
from harness.errors import AVSError

logger = logging.getLogger("counterfactual_avs")

def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.device is not None:
        overrides["device"] = args.device
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        config = ExperimentConfig.from_dict(config.to_dict() | overrides)
    return config


def gen_data(config:ExperimentConfig, args):
    from entities.synthesis import save_clip, write_index
    from harness.trainer import make_clips

    for split in ("train", "val"):
        clips = make_clips(config, split)
        for clip in clips:
            save_clip(clip, config.out_dir, split)
        write_index(config.out_dir, split, clips)
        logger.info("Wrote %d %s clips to %s", len(clips), split, config.out_dir)


def train(config:ExperimentConfig, args):
    from harness.trainer import Trainer

    trainer = Trainer(config)
    if args.resume:
        trainer.resume()
    artifacts = trainer.train(max_steps=args.max_steps)
    print(f"Run written to {artifacts.out_dir}")


def evaluate(config:ExperimentConfig, args):
    from harness.evaluation import evaluate as evaluate_checkpoint
    from harness.trainer import make_clips

    report = evaluate_checkpoint(args.checkpoint, make_clips(config, args.split), config.device)
    path = report.to_text(Path(config.out_dir) / "report.tsv")
    print(f"{report.summary()} ({path})")


def ablate(config:ExperimentConfig, args):
    from harness.ablation import ablate as run_ablation

    table = run_ablation(config, args.axis, max_steps=args.max_steps)
    print(table.to_text())


def sweep(config:ExperimentConfig, args):
    from harness.sweep import parse_value, sweep as run_sweep

    values = [parse_value(args.param, v) for v in args.values]
    curve = run_sweep(config, args.param, values, max_steps=args.max_steps)
    print(curve.to_text())


def analyze_corpus(config:ExperimentConfig, args):
    from entities.synthesis import generate_clip, make_regime_specs
    from harness.metrics import corpus_complexity, quadrant_counts
    from harness.trainer import make_clips

    if args.quadrants:
        regimes = ("static-single", "dynamic-single", "static-multi", "dynamic-multi")
        clips = [
            generate_clip(spec) for i, regime in enumerate(regimes)
            for spec in make_regime_specs(regime, args.per_regime, config.seed + i, config.data.num_frames, config.data.resolution)
        ]
    else:
        clips = make_clips(config, "train")

    rows = corpus_complexity(clips, config.data.mel)
    print(f"{'clip_id':<32}{'visual_mse':>14}{'audio_melchange':>18}  quadrant")
    for row in rows:
        print(f"{row.clip_id:<32}{row.visual_mse:>14.6f}{row.audio_melchange:>18.4f}  {row.quadrant.value}")
    for quadrant, count in quadrant_counts(rows).items():
        print(f"{quadrant.value}: {count}")


def export_embeddings(config:ExperimentConfig, args):
    from entities.dataset import AVClipDataset
    from harness.checkpoint import load_model
    from harness.evaluation import export_embeddings as export
    from harness.trainer import make_clips

    model, model_config = load_model(args.checkpoint, config.device)
    dataset = AVClipDataset(make_clips(config, args.split), model_config.data.mel, model_config.data.resolution)
    pre, post = export(model, dataset, config.out_dir, model_config.optim.batch_size, config.device)
    print(f"Wrote {pre} and {post}")


COMMANDS = {
    "gen-data": gen_data,
    "train": train,
    "eval": evaluate,
    "ablate": ablate,
    "sweep": sweep,
    "analyze-corpus": analyze_corpus,
    "export-embeddings": export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML experiment config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("--device", type=str, default=None)
    common.add_argument("--log-level", type=str, default="INFO")

    parser = argparse.ArgumentParser(description="Audio-visual segmentation with implicit text and counterfactual contrast")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-data", parents=[common], help="write synthetic train/val splits in the dataset layout")

    p = commands.add_parser("train", parents=[common])
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.pt")
    p.add_argument("--max-steps", type=int, default=None)

    p = commands.add_parser("eval", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")

    p = commands.add_parser("ablate", parents=[common])
    p.add_argument("--axis", required=True)
    p.add_argument("--max-steps", type=int, default=None)

    p = commands.add_parser("sweep", parents=[common])
    p.add_argument("--param", required=True, choices=["k_c", "alpha_o", "s_d", "r_a", "r_v"])
    p.add_argument("--values", nargs="+", required=True, help="values; alpha_o takes lo:hi intervals, r_a accepts inf")
    p.add_argument("--max-steps", type=int, default=None)

    p = commands.add_parser("analyze-corpus", parents=[common])
    p.add_argument("--quadrants", action="store_true", help="analyze a four-quadrant synthetic corpus instead of the configured one")
    p.add_argument("--per-regime", type=int, default=4)

    p = commands.add_parser("export-embeddings", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    return parser


def main(argv:list = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        COMMANDS[args.command](config, args)
    except AVSError as error:
        logger.error("%s", error)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
