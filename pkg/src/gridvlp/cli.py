"""Command-line entry point: ``gridvlp <subcommand>`` or ``python -m gridvlp``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

log = logging.getLogger("gridvlp")

FINETUNE_TASKS = ("vqa", "nlvr", "caption", "retrieval", "detect")
EVAL_TASKS = ("detect", "caption", "mlm", "itm", "vqa", "nlvr", "retrieval")


def _parse_sizes(text: str) -> list[tuple[int, int]]:
    sizes = []
    for item in text.split(","):
        h, _, w = item.strip().lower().partition("x")
        if not w:
            raise argparse.ArgumentTypeError(f"size {item!r} is not HxW")
        sizes.append((int(h), int(w)))
    return sizes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridvlp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic scene split to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--max-objects", type=int, default=3)

    p = sub.add_parser("pretrain", help="joint pre-training run")
    p.add_argument("--config", help="YAML run config (defaults to the desk overfit settings)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--steps", type=int)
    p.add_argument("--data-dir")

    p = sub.add_parser("finetune", help="fine-tune a pre-trained checkpoint on one task")
    p.add_argument("task", choices=FINETUNE_TASKS)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=100,
                   help="total epochs; the x0.1 drops land at 1/2 and 3/4 of them")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--examples", type=int, default=200, help="VQA / NLVR pairs to generate")
    p.add_argument("--data-dir")

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a JSON report plus a plot")
    p.add_argument("--task", choices=EVAL_TASKS, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="report path (default: next to the checkpoint)")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--examples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-dir")

    p = sub.add_parser("infer", help="caption and detect objects in one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--text", default="", help="optional text to condition detection on")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--score-threshold", type=float, default=0.5)

    p = sub.add_parser("bench-tokens", help="visual token counts and encoder timing per image size")
    p.add_argument("--sizes", type=_parse_sizes, default=_parse_sizes("448x448,800x1333"))
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    return parser


# --- helpers -----------------------------------------------------------------------

def checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _scenes_for(ckpt, data_dir: Optional[str]):
    from .pretrain import DataConfig, load_scenes

    data = DataConfig(**ckpt.meta.get("config", {}).get("data", {}))
    if data_dir:
        data.train_dir = data_dir
    return load_scenes(data), data


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _plot(path: Path, title: str, labels: Sequence[str], values: Sequence[float]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(3.0, 0.9 * len(labels) + 1), 3))
    ax.bar(list(labels), [0.0 if np.isnan(v) else v for v in values], color="tab:blue")
    ax.set_ylim(0, max(1.0, *(v for v in values if not np.isnan(v))) if values else 1.0)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# --- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import GenerationStats, SceneConfig, generate, save_split

    stats = GenerationStats()
    cfg = SceneConfig(image_size=args.image_size, max_objects=args.max_objects)
    scenes = list(generate(args.seed, args.count, cfg, stats))
    out = save_split(scenes, args.out)
    print(json.dumps({"out": str(out), "scenes": len(scenes), "skipped": stats.skipped_objects}))
    return 0


def cmd_pretrain(args) -> int:
    from .pretrain import RunConfig, Trainer, desk_overfit_config

    cfg = RunConfig.load(args.config) if args.config else desk_overfit_config().with_env()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.data_dir:
        cfg.data.train_dir = args.data_dir
    if args.steps is not None:
        cfg.schedule.steps = args.steps
    if not cfg.out_dir:
        raise SystemExit("pretrain: --out-dir (or GRIDVLP_OUT_DIR) is required")
    trainer = Trainer(cfg)
    history = trainer.fit()
    last = history[-1].losses if history else {}
    print(json.dumps({"out_dir": cfg.out_dir, "steps": trainer.step,
                      "final": {k: round(v, 6) for k, v in last.items()}}))
    return 0


def _finetune_data(task, scenes, args):
    from .data import answer_vocabulary, make_nlvr, make_vqa

    rng = np.random.default_rng(args.seed)
    if task == "vqa":
        return make_vqa(scenes, rng, args.examples), answer_vocabulary()
    if task == "nlvr":
        return make_nlvr(scenes, rng, args.examples), None
    return None, None


def cmd_finetune(args) -> int:
    from . import downstream as ds
    from .checkpoint import model_from_checkpoint, save_checkpoint

    model, ckpt = model_from_checkpoint(args.checkpoint)
    scenes, _ = _scenes_for(ckpt, args.data_dir)
    cfg = ds.desk_finetune_config(args.epochs, batch_size=args.batch_size, lr=args.lr,
                                  lr_backbone=args.lr, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    examples, answers = _finetune_data(args.task, scenes, args)
    if args.task == "vqa":
        head, history = ds.finetune_vqa(model, scenes, examples, answers, cfg)
    elif args.task == "nlvr":
        head, history = ds.finetune_nlvr(model, scenes, examples, cfg)
    elif args.task == "retrieval":
        head, history = ds.finetune_retrieval(model, scenes, cfg)
    elif args.task == "caption":
        head, history = ds.finetune_caption(model, scenes, cfg)
    else:
        head, history = ds.finetune_detect(model, scenes, cfg)
    _write_jsonl(out / "metrics.jsonl", history)
    resolved = dict(ckpt.meta.get("config", {}))
    resolved["finetune"] = {"task": args.task, "source": str(args.checkpoint),
                            "answers": answers, **cfg.__dict__}
    import yaml
    (out / "config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))
    heads = {args.task: head} if head is not None else None
    save_checkpoint(out / "final.ckpt", model, None, ckpt.step, resolved, heads)
    print(json.dumps({"out_dir": str(out), "task": args.task, "steps": len(history),
                      "final_loss": history[-1]["loss"] if history else None}))
    return 0


def _load_head(task, ckpt, model):
    from . import downstream as ds
    from .checkpoint import CheckpointError, restore_module

    answers = ckpt.meta.get("config", {}).get("finetune", {}).get("answers")
    head = ds.make_head(task, model.cfg.hidden_size, len(answers or []))
    tensors = ckpt.section(f"heads.{task}")
    if not tensors:
        raise CheckpointError(f"checkpoint has no fine-tuned {task} head; run `finetune {task}`")
    restore_module(head, tensors, what=f"{task} head")
    head.eval()
    return head, answers


def evaluate_task(task: str, model, ckpt, scenes, data_cfg, args) -> tuple[dict, dict]:
    """Returns the report and the values to plot."""
    from . import downstream as ds
    from .data import make_nlvr, make_vqa
    from .evaluate import evaluate_captions, evaluate_detection, evaluate_itm, evaluate_mlm
    from .pretrain import scene_config

    if task == "detect":
        res = evaluate_detection(model, scenes, scene_config(data_cfg))
        per_class = {k: v["precision50"] for k, v in res["per_class"].items()}
        report = {"metric": "ap50", "value": res["ap50"], "n_samples": len(scenes),
                  "ap75": res["ap75"], "attr_accuracy": res["attr_accuracy"],
                  "precision_at_iou50": per_class,
                  "size_ap50": {k: res[f"ap50_{k}"] for k in ("small", "medium", "large")}}
        return report, per_class
    if task == "caption":
        res = evaluate_captions(model, scenes, beam=args.beam, greedy=args.beam == 1)
        report = {"metric": "bleu4", "value": res["bleu4"], "n_samples": len(scenes),
                  "exact_match": res["exact_match"], "hypotheses": res["hypotheses"]}
        return report, {"bleu4": res["bleu4"], "exact_match": res["exact_match"]}
    if task == "mlm":
        acc = evaluate_mlm(model, scenes)
        return {"metric": "accuracy", "value": acc, "n_samples": len(scenes)}, {"accuracy": acc}
    if task == "itm":
        acc = evaluate_itm(model, scenes)
        return {"metric": "accuracy", "value": acc, "n_samples": len(scenes) ** 2}, {"accuracy": acc}
    head, answers = _load_head(task, ckpt, model)
    rng = np.random.default_rng(args.seed)
    if task == "vqa":
        examples = make_vqa(scenes, rng, args.examples)
        acc = ds.evaluate_vqa(model, head, scenes, examples, answers)
        return {"metric": "accuracy", "value": acc, "n_samples": len(examples)}, {"accuracy": acc}
    if task == "nlvr":
        examples = make_nlvr(scenes, rng, args.examples)
        acc = ds.evaluate_nlvr(model, head, scenes, examples)
        return {"metric": "accuracy", "value": acc, "n_samples": len(examples)}, {"accuracy": acc}
    from .metrics import recall_at_k
    captions = [s.caption for s in scenes]
    scores = ds.retrieval_matrix(model, head, scenes, captions)
    pairwise = ds.pairwise_ranking_accuracy(scores, captions)
    r1 = recall_at_k(scores, list(range(len(scenes))), 1)
    return ({"metric": "pairwise_ranking", "value": pairwise, "n_samples": len(scenes),
             "recall_at_1": r1}, {"pairwise": pairwise, "R@1": r1})


def cmd_eval(args) -> int:
    from .checkpoint import model_from_checkpoint

    model, ckpt = model_from_checkpoint(args.checkpoint)
    model.eval()
    scenes, data_cfg = _scenes_for(ckpt, args.data_dir)
    report, plotted = evaluate_task(args.task, model, ckpt, scenes, data_cfg, args)
    report = {"task": args.task, **report, "checkpoint": checkpoint_id(args.checkpoint)}
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.task}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    _plot(out.with_suffix(".png"), f"{args.task}", list(plotted), list(plotted.values()))
    print(json.dumps({k: report[k] for k in ("task", "metric", "value", "n_samples", "checkpoint")}))
    if args.task == "detect":
        print(json.dumps({"precision_at_iou50": report["precision_at_iou50"]}))
    return 0


def cmd_infer(args) -> int:
    from PIL import Image

    from .checkpoint import model_from_checkpoint
    from .metrics import detections_from_set
    from .text import detokenize
    from .visual import batch_images, normalize_image

    model, ckpt = model_from_checkpoint(args.checkpoint)
    model.eval()
    image = np.asarray(Image.open(args.image).convert("RGB"))
    images = batch_images([normalize_image(image)])
    classes = ckpt.meta.get("config", {}).get("classes") or ["circle", "square", "triangle"]
    with torch.no_grad():
        ids = model.generate(images, beam=args.beam, alpha=args.alpha)[0]
        state = model.encode(images, model.tokens([args.text]))
        dets = detections_from_set(model.detect(state)[0], 0)
    objects = [{"class": classes[d.label], "score": round(d.score, 4),
                "box_cxcywh": [round(float(v), 4) for v in d.box]}
               for d in sorted(dets, key=lambda d: -d.score) if d.score >= args.score_threshold]
    print(json.dumps({"caption": detokenize(ids, model.vocab), "objects": objects}))
    return 0


def cmd_bench_tokens(args) -> int:
    from .model import ModelConfig, VLPModel
    from .text import default_vocabulary
    from .visual import visual_token_count

    torch.manual_seed(args.seed)
    model = VLPModel(ModelConfig(dropout=0.0), default_vocabulary()).eval()
    rows = []
    for h, w in args.sizes:
        row = {"size": f"{h}x{w}", "visual_tokens": visual_token_count(h, w)}
        if not args.no_timing:
            images = torch.randn(1, 3, h, w)
            tokens = model.tokens([""])
            times = []
            with torch.no_grad():
                for _ in range(args.repeats + 1):
                    t0 = time.perf_counter()
                    model.encode(images, tokens)
                    times.append(time.perf_counter() - t0)
            row["encoder_seconds"] = float(np.median(times[1:]))  # first call is warm-up
        rows.append(row)
        print(json.dumps(row))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "infer": cmd_infer, "bench-tokens": cmd_bench_tokens}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
