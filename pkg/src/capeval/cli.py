"""Command-line interface: score, train, datagen, bench, visualize.

Requested artifacts go to stdout (or --out); all diagnostics go to stderr.
Exit codes: 1 bad input, 2 checkpoint or shape mismatch, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("capeval")

EXIT_BAD_INPUT = 1
EXIT_BAD_CHECKPOINT = 2
EXIT_DIVERGED = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capeval",
                                     description="Token-level image caption evaluation")
    parser.add_argument("--verbose", action="store_true", help="chatty stderr logging")
    parser.add_argument("--run-config", default=None,
                        help="JSON file whose keys mirror this command's flags; "
                             "explicit flags win")
    sub = parser.add_subparsers(dest="command", required=True)

    common_ckpt = argparse.ArgumentParser(add_help=False)
    common_ckpt.add_argument("--checkpoint", required=True, help="checkpoint directory")
    common_ckpt.add_argument("--backbone", choices=["synthetic", "pretrained-adapter"],
                             default=None,
                             help="override the checkpoint's backbone kind")
    common_ckpt.add_argument("--backbone-model", default=None,
                             help="model name/path for the pretrained adapter")

    p = sub.add_parser("score", parents=[common_ckpt],
                       help="score image-caption pairs", description="Score pairs; "
                       "either one --image/--regions/--caption-file triple or a corpus JSONL.")
    p.add_argument("--image", help="image file for single-pair mode")
    p.add_argument("--regions", help="JSON file with {boxes, confidences}")
    p.add_argument("--caption-file", help="JSON file with {tokens, pos}")
    p.add_argument("--input-jsonl", help="corpus JSONL; scores every pair")
    p.add_argument("--image-root", default=None, help="base dir for relative image paths")
    p.add_argument("--beta", type=float, default=None, help="decision threshold")
    p.add_argument("--plus", action="store_true",
                   help="add the backbone global similarity to the overall score")
    p.add_argument("--dedup-k", type=int, default=0,
                   help="if > 0, K-means-deduplicate the regions to at most k")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the JSON artifact here instead of stdout")

    p = sub.add_parser("train", help="train a model on generated training sets")
    p.add_argument("--data-dir", required=True,
                   help="directory with corpus.jsonl and the datagen outputs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None,
                   help="JSON file with {model: {...}, train: {...}, backbone: {...}}")
    p.add_argument("--seed", type=int, default=None, help="override every configured seed")
    p.add_argument("--iters", type=int, default=None, help="override total iterations")

    p = sub.add_parser("datagen", help="build training supervision from a corpus")
    p.add_argument("--input", required=True, help="corpus JSONL")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--top-k", type=int, default=100,
                   help="vocabulary cutoff for pollution replacements")

    p = sub.add_parser("bench", help="run a benchmark spec")
    p.add_argument("--spec", required=True, help="benchmark spec JSON")
    p.add_argument("--scores", default=None, help="external metric score JSONL")
    p.add_argument("--checkpoint", default=None, help="checkpoint directory")
    p.add_argument("--image-root", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("visualize", help="render a score report as a static page")
    p.add_argument("--report", required=True, help="ScoreReport JSON file")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    return parser


def _apply_run_config(args: argparse.Namespace, argv: list[str]) -> None:
    """Fill flags from --run-config for anything not given on the command line."""
    if not args.run_config:
        return
    values = json.loads(Path(args.run_config).read_text())
    section = values.get(args.command, values)
    for key, value in section.items():
        attr = key.replace("-", "_")
        if attr == "command":
            continue
        if not hasattr(args, attr):
            raise ValueError(f"run config key {key!r} is not a flag of '{args.command}'")
        if f"--{key.replace('_', '-')}" in argv:
            continue  # explicit flag wins
        setattr(args, attr, value)


def _resolved_config(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _load_model(args):
    from .checkpoint import CheckpointError, load_checkpoint

    backbone = None
    if args.backbone == "pretrained-adapter":
        from .backbone import BackboneError, PretrainedClipBackbone

        if not args.backbone_model:
            raise CheckpointError("--backbone pretrained-adapter needs --backbone-model")
        try:
            backbone = PretrainedClipBackbone(args.backbone_model)
        except BackboneError as exc:
            raise CheckpointError(str(exc)) from exc
    model, backbone, _ = load_checkpoint(args.checkpoint, backbone=backbone)
    return model, backbone


def _emit(payload: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(payload)
    else:
        sys.stdout.write(payload)


def cmd_score(args) -> int:
    import numpy as np

    from .corpus import load_corpus, load_image
    from .encoding import RegionSet, dedup_regions, extract_caption_tokens, extract_image_tokens
    from .model import score_corpus

    model, backbone = _load_model(args)
    if args.input_jsonl:
        records = load_corpus(args.input_jsonl)
        rows = score_corpus(records, model, backbone, beta=args.beta, plus=args.plus,
                            image_root=args.image_root)
        lines = [json.dumps({"image_id": r["image_id"], "caption_idx": r["caption_idx"],
                             **r["report"].to_json_dict()}, sort_keys=True)
                 for r in rows]
        _emit("\n".join(lines) + "\n", args.out)
        return 0

    if not (args.image and args.regions and args.caption_file):
        raise ValueError("single-pair mode needs --image, --regions and --caption-file")
    image = load_image(args.image)
    h, w = image.shape[:2]
    region_spec = json.loads(Path(args.regions).read_text())
    regions = RegionSet(boxes=tuple(tuple(b) for b in region_spec["boxes"]),
                        confidences=tuple(region_spec["confidences"]),
                        image_size=(w, h))
    if args.dedup_k > 0:
        regions = dedup_regions(regions, args.dedup_k, seed=args.seed)
    caption = json.loads(Path(args.caption_file).read_text())
    img_feats = extract_image_tokens(image, regions, backbone)
    cap_feats = extract_caption_tokens(list(caption["tokens"]), list(caption["pos"]),
                                       backbone,
                                       semantic_pos=frozenset(model.config.semantic_pos_training))
    report = model.score_features(img_feats, cap_feats, beta=args.beta, plus=args.plus,
                                  logit_temperature=backbone.logit_temperature)
    _emit(json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n", args.out)
    return 0


def cmd_train(args) -> int:
    from .backbone import build_backbone
    from .corpus import load_corpus
    from .model import EvaluationModel, ModelConfig
    from .training import TrainConfig, prepare_training_data, train

    config = {}
    if args.config:
        config = json.loads(Path(args.config).read_text())
    model_cfg = (ModelConfig.from_dict(config["model"]) if "model" in config
                 else ModelConfig.desk_preset())
    train_cfg = (TrainConfig.from_dict(config["train"]) if "train" in config
                 else TrainConfig.desk_preset())
    backbone_spec = config.get("backbone",
                               {"kind": "synthetic", "dim": model_cfg.fusion.dim, "seed": 0})
    if args.seed is not None:
        model_cfg.seed = args.seed
        train_cfg.seed = args.seed
    if args.iters is not None:
        train_cfg.total_iters = args.iters

    backbone = build_backbone(backbone_spec)
    data_dir = Path(args.data_dir)
    records = load_corpus(data_dir / "corpus.jsonl")
    log.info("preparing features for %d records", len(records))
    data = prepare_training_data(records, data_dir, backbone,
                                 semantic_pos=frozenset(model_cfg.semantic_pos_training),
                                 image_root=args.data_dir)
    model = EvaluationModel(model_cfg)
    log.info("training for %d iterations", train_cfg.total_iters)
    result = train(model, data, train_cfg, backbone=backbone, out_dir=args.out_dir)
    log.info("wrote checkpoint to %s", result.checkpoint_dir)
    return 0


def cmd_datagen(args) -> int:
    from .corpus import load_corpus
    from .datagen import build_training_sets

    records = load_corpus(args.input)
    summary = build_training_sets(records, args.out_dir, seed=args.seed, top_k=args.top_k)
    sys.stdout.write(json.dumps(summary.to_dict(), sort_keys=True) + "\n")
    return 0


def cmd_bench(args) -> int:
    from .benchmarks import run_benchmark, save_report

    spec = json.loads(Path(args.spec).read_text())
    model = backbone = None
    if args.checkpoint:
        from .checkpoint import load_checkpoint

        model, backbone, _ = load_checkpoint(args.checkpoint)
    report = run_benchmark(spec, scores_path=args.scores, model=model, backbone=backbone,
                           image_root=args.image_root)
    payload = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if args.out:
        save_report(report, args.out)
    else:
        sys.stdout.write(payload)
    return 0


def cmd_visualize(args) -> int:
    from .visualize import render_report_html

    report = json.loads(Path(args.report).read_text())
    render_report_html(report, args.image, args.out)
    log.info("wrote %s", args.out)
    return 0


_HANDLERS = {"score": cmd_score, "train": cmd_train, "datagen": cmd_datagen,
             "bench": cmd_bench, "visualize": cmd_visualize}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    from .backbone import BackboneError
    from .checkpoint import CheckpointError
    from .training import TrainingDivergedError

    try:
        _apply_run_config(args, argv)
        log.info("resolved config: %s", json.dumps(_resolved_config(args), default=str,
                                                   sort_keys=True))
        return _HANDLERS[args.command](args)
    except TrainingDivergedError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (CheckpointError, BackboneError) as exc:
        log.error("%s", exc)
        return EXIT_BAD_CHECKPOINT
    except (ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
