"""Command-line entry point: ``unilseg <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .annotation import ROUTES, Noise, OracleStages, PseudoBatch, filter_triplets
from .data import Task, Triplet, load_image, load_manifest, save_mask, write_manifest
from .model import PRESETS, ModelConfig, UniLSeg
from .shapes import Scene, SceneConfig, corpus_hash, generate_scene, generate_video, scene_to_triplets
from .training import (
    TrainConfig, evaluate, fit, infer, load_checkpoint, load_kv, make_optimizer, make_schedule,
    mix_data, save_checkpoint,
)

log = logging.getLogger("unilseg")

SCENES_FILE = "scenes.jsonl"


def _pair(text: str) -> tuple[int, int]:
    parts = [int(v) for v in text.lower().replace("x", ",").split(",") if v]
    return (parts[0], parts[0]) if len(parts) == 1 else (parts[0], parts[1])


def _tasks(text: str) -> list[Task]:
    return [Task.parse(t) for t in text.split(",") if t.strip()]


def scene_seed(seed: int, k: int) -> int:
    return seed * 1_000_003 + k


# --- gen-data ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = SceneConfig(canvas=_pair(args.canvas), count=_pair(args.shapes), size=_pair(args.size),
                         border_width=args.border_width)
    tasks = _tasks(args.tasks)
    triplets: list[Triplet] = []
    scenes: list[tuple[int, Scene]] = []  # (index of first triplet, scene)
    for k in range(args.count):
        s = scene_seed(args.seed, k)
        if Task.RVOS in tasks:
            for f, frame in enumerate(generate_video(s, args.frames, config)):
                image = frame.render()
                start = len(triplets)
                triplets += scene_to_triplets(frame, [Task.RVOS], image=image, video_id=f"v{s}", frame_index=f)
                scenes.append((start, frame))
        still = [t for t in tasks if t is not Task.RVOS]
        if still:
            scene = generate_scene(s, config)
            start = len(triplets)
            triplets += scene_to_triplets(scene, still)
            scenes.append((start, scene))
    out = Path(args.out_dir)
    records = write_manifest(triplets, out / "manifest.jsonl")
    with open(out / SCENES_FILE, "w") as fh:
        for start, scene in scenes:
            if start < len(records):
                fh.write(json.dumps({"image": records[start]["image"], "scene": scene.to_dict()}) + "\n")
    digest = corpus_hash(triplets)
    (out / "corpus.sha256").write_text(digest + "\n")
    print(f"wrote {len(triplets)} triplets from {args.count} scenes to {out / 'manifest.jsonl'}")
    print(f"sha256 {digest}")
    return 0


# --- annotate / filter --------------------------------------------------------


def _load_scenes(manifest: Path) -> dict[str, Scene]:
    path = manifest.parent / SCENES_FILE
    if not path.exists():
        raise SystemExit(f"oracle stages need {path} (written by gen-data)")
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["image"]] = Scene.from_dict(rec["scene"])
    return out


def cmd_annotate(args) -> int:
    in_path = Path(args.in_manifest)
    triplets = load_manifest(in_path)
    scenes = _load_scenes(in_path)
    noise = Noise(mask_prob=args.noise, radius=args.radius, caption_prob=args.caption_noise) \
        if args.stages == "noisy-oracle" else Noise()
    seen: dict[str, np.ndarray] = {}
    for t in triplets:
        seen.setdefault(t.image_path, t.image)
    out: list[Triplet] = []
    dropped = 0
    for rel, image in seen.items():
        if rel not in scenes:
            log.warning("no scene recorded for %s; skipped", rel)
            continue
        stages = OracleStages(scenes[rel], noise, seed=args.seed).as_stages()
        if args.route == "box":
            boxes = [s.bbox for s in scenes[rel].shapes]
            batch = ROUTES["box"](image, boxes, stages)
        else:
            batch = ROUTES[args.route](image, stages)
        if args.threshold is not None:
            batch = filter_triplets(batch, None, args.threshold)
        dropped += len(batch.dropped)
        out += batch.triplets
    write_manifest(out, args.out_manifest)
    print(f"{len(out)} pseudo triplets from {len(seen)} images ({dropped} dropped by the route)")
    return 0


def cmd_filter(args) -> int:
    triplets = load_manifest(args.in_manifest)
    batch = filter_triplets(PseudoBatch(triplets=triplets), None, args.threshold)
    write_manifest(batch.triplets, args.out_manifest)
    print(f"kept {len(batch)} of {len(triplets)} triplets at threshold {args.threshold}")
    return 0


# --- train / eval / infer -----------------------------------------------------


def build_configs(stage: int, kv: dict) -> tuple[ModelConfig, TrainConfig]:
    preset = kv.get("preset", "desk")
    if preset not in PRESETS:
        raise SystemExit(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    model_kv = {k[len("model."):]: v for k, v in kv.items() if k.startswith("model.")}
    model_config = ModelConfig.from_dict({**PRESETS[preset].to_dict(), **model_kv})
    train_kv = {k: v for k, v in kv.items() if "." not in k}
    if "lr_decay" in train_kv:
        decay = train_kv.pop("lr_decay")
        train_kv["decay_epoch"] = None if decay is None else decay["epoch"]
        if decay is not None:
            train_kv["decay_factor"] = decay["factor"]
    base = make_schedule(stage).to_dict()
    unknown = set(train_kv) - set(base) - {"preset", "train_manifest", "pseudo_manifest", "out", "init"}
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    train_config = TrainConfig.from_dict({**base, **train_kv, "stage": stage})
    return model_config, train_config


def cmd_train(args) -> int:
    kv = load_kv(args.config) if args.config else {}
    model_config, config = build_configs(args.stage, kv)
    root = Path(args.config).parent if args.config else Path(".")

    def manifest(key):
        return load_manifest(root / kv[key]) if kv.get(key) else []

    supervised, pseudo = manifest("train_manifest"), manifest("pseudo_manifest")
    data = mix_data(supervised, pseudo, config, np.random.default_rng(config.seed))
    if not data:
        raise SystemExit("no training data: set train_manifest and/or pseudo_manifest")
    torch.manual_seed(config.seed)
    if kv.get("init"):
        model, _ = load_checkpoint(root / kv["init"])
        model.train()
    else:
        model = UniLSeg(model_config)
    optimizer = make_optimizer(model, config)

    def report(step, loss):
        if step % args.log_every == 0:
            print(f"step {step} loss {loss.item():.5f} bce {float(loss.bce):.5f} dice {float(loss.dice):.5f}")

    result = fit(model, data, config, optimizer, report)
    out = Path(args.out or kv.get("out") or f"stage{args.stage}.pt")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model, optimizer, config, result.epoch)
    if args.loss_log:
        Path(args.loss_log).write_text("\n".join(f"{v!r}" for v in result.losses) + "\n")
    print(f"trained {result.steps} steps on {len(data)} triplets; checkpoint {out}")
    return 0


def cmd_eval(args) -> int:
    task = Task.parse(args.task)
    model, _ = load_checkpoint(args.checkpoint)
    triplets = [t for t in load_manifest(args.manifest) if t.task is task]
    if not triplets:
        raise SystemExit(f"manifest {args.manifest} holds no {task.value} triplets")
    report = evaluate(model, triplets, task)
    out = Path(args.out_dir or Path(args.manifest).parent)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"report_{task.value}.txt").write_text(report.to_text())
    (out / f"report_{task.value}.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    sys.stdout.write(report.to_text())
    return 0


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    image = load_image(Path(args.image))
    mask = infer(model, image, args.caption)
    save_mask(Path(args.out), mask)
    print(f"{int(mask.sum())} foreground pixels -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unilseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a shape-world corpus")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=16, help="number of scenes")
    g.add_argument("--canvas", default="64")
    g.add_argument("--tasks", default="RIS,SS,PS,SOD")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--shapes", default="1,3", help="shape-count range per scene")
    g.add_argument("--size", default="16,30")
    g.add_argument("--border-width", type=int, default=4)
    g.add_argument("--frames", type=int, default=4, help="frames per RVOS video")
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("annotate", help="run an annotation route over a manifest's images")
    a.add_argument("--route", choices=sorted(ROUTES), required=True)
    a.add_argument("--stages", choices=["oracle", "noisy-oracle"], default="oracle")
    a.add_argument("--noise", type=float, default=0.2, help="mask corruption probability")
    a.add_argument("--radius", type=int, default=6, help="corruption radius in pixels")
    a.add_argument("--caption-noise", type=float, default=0.0)
    a.add_argument("--threshold", type=float, default=None)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--in-manifest", required=True)
    a.add_argument("--out-manifest", required=True)
    a.set_defaults(func=cmd_annotate)

    f = sub.add_parser("filter", help="drop triplets whose match score is below a threshold")
    f.add_argument("--threshold", type=float, default=0.5)
    f.add_argument("--in-manifest", required=True)
    f.add_argument("--out-manifest", required=True)
    f.set_defaults(func=cmd_filter)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("--stage", type=int, choices=[1, 2], required=True)
    t.add_argument("--config", help="flat key = value file")
    t.add_argument("--out", help="checkpoint path (overrides the config's out)")
    t.add_argument("--loss-log", help="write the per-step loss curve here")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one task")
    e.add_argument("--task", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one image from a caption")
    i.add_argument("--image", required=True)
    i.add_argument("--caption", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
