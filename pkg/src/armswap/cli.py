"""Command-line entry point: dataset generation, the three trainers, swapping,
ablations, evaluation and the end-to-end playbook.

Every artifact directory gets one ``run_manifest.json`` recording the config
hash, code version, checkpoint hashes, wall-clock time and seeds.  A stage
whose directory already holds a complete manifest with the same config hash
is skipped; a different hash is refused so finished artifacts are never
overwritten.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__, checkpoint
from .config import ExperimentConfig
from .errors import ArmSwapError, InvalidArgument, MissingData

log = logging.getLogger("armswap")

MANIFEST = "run_manifest.json"
STAGE_SECTIONS = {
    "generate": ("datagen",),
    "gan": ("datagen", "gan"),
    "gan_full": ("datagen", "gan"),
    "vae": ("datagen", "vae"),
    "diffusion": ("datagen", "vae", "diffusion"),
    "classifier": ("datagen", "metrics"),
    "swap": ("datagen", "gan", "vae", "diffusion", "sampler"),
    "evaluate": ("datagen", "gan", "vae", "diffusion", "sampler", "metrics"),
}
ABLATIONS = ("gan_only", "blend_only", "swap_full")


# -- manifests -----------------------------------------------------------------

def read_manifest(folder) -> dict | None:
    p = Path(folder) / MANIFEST
    return json.loads(p.read_text()) if p.exists() else None


def write_manifest(folder, stage, cfg: ExperimentConfig, seconds, checkpoints=(), extra=None):
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    sections = STAGE_SECTIONS[stage]
    d = cfg.to_dict()
    manifest = {
        "stage": stage,
        "complete": True,
        "config_hash": cfg.hash(*sections),
        "config": {k: d[k] for k in sections},
        "code_version": __version__,
        "checkpoints": {Path(c).name: checkpoint.file_hash(c) for c in checkpoints},
        "seconds": round(seconds, 2),
        "seeds": {"global": cfg.seed, **{k: d[k].get("seed") for k in sections}},
    }
    if extra:
        manifest.update(extra)
    (folder / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def stage_done(folder, stage, cfg, resuming=False) -> bool:
    """True if ``folder`` already holds this exact stage; refuses foreign contents."""
    m = read_manifest(folder)
    if m is None:
        if Path(folder).exists() and any(Path(folder).iterdir()) and not resuming:
            log.warning("%s exists without a manifest; contents will be regenerated", folder)
        return False
    want = cfg.hash(*STAGE_SECTIONS[stage])
    if m.get("config_hash") != want:
        raise InvalidArgument(
            f"{folder} holds a {m.get('stage')} run with config hash {m.get('config_hash')}, "
            f"current config hashes to {want}; choose another --out")
    return bool(m.get("complete"))


# -- layout ----------------------------------------------------------------------

class Layout:
    def __init__(self, cfg: ExperimentConfig, out: str | None):
        self.root = Path(out or cfg.output_root)
        cache = os.environ.get("ROBOSWAP_CACHE")
        self.data = Path(cache) if cache else self.root / "data"

    def __getattr__(self, name):
        mapping = {"gan": "gan", "gan_full": "gan_full", "vae": "vae", "diffusion": "diffusion",
                   "classifier": "classifier", "reports": "reports", "comparison": "comparison"}
        if name in mapping:
            return self.root / mapping[name]
        raise AttributeError(name)

    def variant(self, v):
        return self.root / v


# -- subcommands -------------------------------------------------------------------

def cmd_generate(cfg, lay: Layout, args=None):
    from .datagen import build_dataset, build_eval_split

    if stage_done(lay.data, "generate", cfg):
        log.info("dataset at %s is complete", lay.data)
        return lay.data
    g = cfg.datagen
    t0 = time.time()
    size = tuple(g.frame_size)
    for d in ("A", "B"):
        build_dataset(d, g.train_clips, g.n_frames, size, g.seed, lay.data, fps=g.fps, force=True)
    for src in ("A", "B"):
        build_eval_split(src, g.eval_clips, g.n_frames, size, g.seed, lay.data, fps=g.fps, force=True)
    write_manifest(lay.data, "generate", cfg, time.time() - t0,
                   extra={"datasets": ["A", "B", "eval/A", "eval/B", "eval/oracle_A", "eval/oracle_B"]})
    return lay.data


def _need_data(lay):
    if read_manifest(lay.data) is None:
        raise MissingData(f"no generated dataset at {lay.data}; run `armswap generate` first")


def _gan_cfg(cfg, full_frame):
    return replace(cfg.gan, crop_mode="full_frame") if full_frame else cfg.gan


def cmd_train_gan(cfg, lay, args=None, full_frame=False, variant="cyclegan"):
    from .gan import train_gan

    _need_data(lay)
    folder = lay.gan_full if full_frame else lay.gan
    stage = "gan_full" if full_frame else "gan"
    resume = getattr(args, "resume", None)
    if stage_done(folder, stage, cfg, resume is not None):
        return folder / "last.pt"
    t0 = time.time()
    written = train_gan(lay.data / "A", lay.data / "B", _gan_cfg(cfg, full_frame), variant, folder,
                        resume=resume)
    write_manifest(folder, stage, cfg, time.time() - t0, [folder / "last.pt"],
                   extra={"variant": variant, "crop_mode": _gan_cfg(cfg, full_frame).crop_mode,
                          "written": [p.name for p in written]})
    return folder / "last.pt"


def cmd_train_vae(cfg, lay, args=None):
    from .diffusion import train_vae

    _need_data(lay)
    resume = getattr(args, "resume", None)
    if stage_done(lay.vae, "vae", cfg, resume is not None):
        return lay.vae / "last.pt"
    t0 = time.time()
    train_vae([lay.data / "A", lay.data / "B"], cfg.vae, lay.vae, resume=resume)
    ck = checkpoint.load(lay.vae / "last.pt", kind="vae")
    write_manifest(lay.vae, "vae", cfg, time.time() - t0, [lay.vae / "last.pt"],
                   extra={"val_psnr": ck["val_psnr"]})
    return lay.vae / "last.pt"


def cmd_train_diffusion(cfg, lay, args=None):
    from .diffusion import load_vae, train_diffusion

    _need_data(lay)
    resume = getattr(args, "resume", None)
    if stage_done(lay.diffusion, "diffusion", cfg, resume is not None):
        return lay.diffusion / "last.pt"
    vae_path = Path(getattr(args, "vae", None) or lay.vae / "last.pt")
    vae = load_vae(vae_path)
    t0 = time.time()
    train_diffusion([lay.data / "A", lay.data / "B"], vae, cfg.diffusion, lay.diffusion, resume=resume)
    write_manifest(lay.diffusion, "diffusion", cfg, time.time() - t0, [lay.diffusion / "last.pt"],
                   extra={"vae_checkpoint": str(vae_path)})
    return lay.diffusion / "last.pt"


def _request(cfg, lay, args, clip, direction, debug_dir=None):
    from .pipeline import SwapRequest

    return SwapRequest(
        clip=clip, direction=direction,
        gan_ckpt=getattr(args, "gan", None) or lay.gan / "last.pt",
        diffusion_ckpt=getattr(args, "diffusion", None) or lay.diffusion / "last.pt",
        vae_ckpt=getattr(args, "vae", None) or lay.vae / "last.pt",
        gan_full_ckpt=lay.gan_full / "last.pt",
        background_mode=cfg.sampler.background_mode, steps=cfg.sampler.steps,
        seed=cfg.sampler.seed, debug_dir=debug_dir,
    )


def _source_clips(lay, args, direction):
    from .datagen import list_clips

    if getattr(args, "clip", None):
        return [Path(args.clip)]
    clips = list_clips(lay.data / "eval" / direction[0])
    if not clips:
        raise MissingData(f"no eval clips under {lay.data / 'eval' / direction[0]}")
    return clips


def cmd_ablate(cfg, lay, args=None, variant="swap_full"):
    from .pipeline import load_models, run_ablation, write_result

    direction = getattr(args, "direction", None) or "A->B"
    folder = Path(getattr(args, "results", None) or lay.variant(variant))
    if stage_done(folder, "swap", cfg):
        return folder
    need = {"gan_only": ("gan_full",), "blend_only": ("gan",), "swap_full": ("gan", "diffusion")}
    clips = _source_clips(lay, args, direction)
    models = load_models(_request(cfg, lay, args, clips[0], direction), need=need[variant])
    debug = bool(getattr(args, "debug", False))
    t0 = time.time()
    for clip in clips:
        out = folder / clip.name
        req = _request(cfg, lay, args, clip, direction, out / "debug" if debug else None)
        res = run_ablation(variant, req, models)
        write_result(res, out, req)
    write_manifest(folder, "swap", cfg, time.time() - t0,
                   extra={"variant": variant, "direction": direction, "n_clips": len(clips)})
    return folder


def cmd_swap(cfg, lay, args=None):
    return cmd_ablate(cfg, lay, args, "swap_full")


def load_or_train_classifier(cfg, lay):
    from .oracle import load_classifier, save_classifier, train_classifier

    path = lay.classifier / "oracle.pt"
    if stage_done(lay.classifier, "classifier", cfg) and path.exists():
        return load_classifier(path)[0]
    t0 = time.time()
    model, acc = train_classifier({"A": lay.data / "A", "B": lay.data / "B"},
                                  cfg.metrics.classifier_crops, seed=cfg.metrics.projection_seed)
    save_classifier(model, path, acc)
    write_manifest(lay.classifier, "classifier", cfg, time.time() - t0, [path],
                   extra={"heldout_accuracy": acc})
    return model


def cmd_evaluate(cfg, lay, args=None):
    from .metrics import evaluate_run

    _need_data(lay)
    results = Path(getattr(args, "results", None) or lay.variant("swap_full"))
    metrics = cfg.metrics.metrics
    if getattr(args, "metrics", None):
        metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    out = Path(getattr(args, "report", None) or lay.reports / results.name)
    classifier = load_or_train_classifier(cfg, lay) if "swap_rate" in metrics else None
    t0 = time.time()
    report = evaluate_run(results, lay.data, out, metrics, classifier, cfg.metrics.projection_seed,
                          label=results.name)
    write_manifest(out, "evaluate", cfg, time.time() - t0,
                   extra={"results": str(results), "metrics": list(metrics)})
    return report


def cmd_playbook(cfg, lay, args=None):
    """generate -> train-gan (crops and full frames) -> train-vae -> train-diffusion
    -> swap / ablations -> evaluate -> comparison table and figure."""
    from .metrics import compare_reports

    stages = [
        ("generate", lambda: cmd_generate(cfg, lay)),
        ("train-gan", lambda: cmd_train_gan(cfg, lay)),
        ("train-gan-full-frame", lambda: cmd_train_gan(cfg, lay, full_frame=True)),
        ("train-vae", lambda: cmd_train_vae(cfg, lay)),
        ("train-diffusion", lambda: cmd_train_diffusion(cfg, lay)),
    ]
    for v in ABLATIONS:
        stages.append((f"ablate-{v}", lambda v=v: cmd_ablate(cfg, lay, _ns(debug=args and args.debug), v)))
    for name, fn in stages:
        t0 = time.time()
        fn()
        print(f"{name},{time.time() - t0:.1f}s", flush=True)
    reports = {v: cmd_evaluate(cfg, lay, _ns(results=lay.variant(v))) for v in ABLATIONS}
    table = compare_reports(reports, lay.comparison)
    write_manifest(lay.comparison, "evaluate", cfg, 0.0, extra={"runs": list(ABLATIONS)})
    return table


def _ns(**kw):
    return argparse.Namespace(**kw)


# -- argument handling ----------------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise InvalidArgument(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = _parse_value(v)
    if args.seed is not None:
        overrides["seed"] = args.seed
        for sec in ("datagen", "gan", "vae", "diffusion", "sampler"):
            overrides[f"{sec}.seed"] = args.seed
        overrides["metrics.projection_seed"] = args.seed
    return cfg.override(overrides) if overrides else cfg


def build_parser():
    p = argparse.ArgumentParser(prog="armswap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"armswap {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the global and every per-stage seed")
    common.add_argument("--out", help="output root (default: config output_root)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. gan.epochs=5 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="render domains A, B and the paired eval split")
    g = sub.add_parser("train-gan", parents=[common], help="train the arm translator")
    g.add_argument("--variant", choices=("cyclegan", "cut"), default="cyclegan")
    g.add_argument("--full-frame", action="store_true", help="train on whole frames (gan_only ablation)")
    g.add_argument("--resume", help="checkpoint to continue from")
    v = sub.add_parser("train-vae", parents=[common], help="train the frame VAE")
    v.add_argument("--resume")
    d = sub.add_parser("train-diffusion", parents=[common], help="train the refinement denoiser")
    d.add_argument("--resume")
    d.add_argument("--vae", help="VAE checkpoint (default: <out>/vae/last.pt)")
    for name, helptext in (("swap", "run the full swap on eval clips"),
                           ("ablate", "run one ablation variant on eval clips")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        if name == "ablate":
            s.add_argument("--variant", choices=ABLATIONS, required=True)
        s.add_argument("--clip", help="single source clip folder (default: every eval clip)")
        s.add_argument("--direction", choices=("A->B", "B->A"), default="A->B")
        s.add_argument("--gan", help="GAN checkpoint")
        s.add_argument("--vae", help="VAE checkpoint")
        s.add_argument("--diffusion", help="denoiser checkpoint")
        s.add_argument("--results", help="output folder (default: <out>/<variant>)")
        s.add_argument("--debug", action="store_true", help="write arm/, arm_translated/, bkg/, ref/")
    e = sub.add_parser("evaluate", parents=[common], help="score a results folder")
    e.add_argument("--results", help="results folder (default: <out>/swap_full)")
    e.add_argument("--report", help="report folder (default: <out>/reports/<results name>)")
    e.add_argument("--metrics", help="comma-separated subset, e.g. temporal_flickering,paired")
    pb = sub.add_parser("playbook", parents=[common], help="every stage end to end")
    pb.add_argument("--debug", action="store_true")
    return p


def run(args) -> object:
    cfg = load_config(args)
    lay = Layout(cfg, args.out)
    c = args.command
    if c == "generate":
        return cmd_generate(cfg, lay, args)
    if c == "train-gan":
        return cmd_train_gan(cfg, lay, args, full_frame=args.full_frame, variant=args.variant)
    if c == "train-vae":
        return cmd_train_vae(cfg, lay, args)
    if c == "train-diffusion":
        return cmd_train_diffusion(cfg, lay, args)
    if c == "swap":
        return cmd_swap(cfg, lay, args)
    if c == "ablate":
        return cmd_ablate(cfg, lay, args, args.variant)
    if c == "evaluate":
        report = cmd_evaluate(cfg, lay, args)
        print(json.dumps(report["aggregate"], indent=2))
        return report
    if c == "playbook":
        table = cmd_playbook(cfg, lay, args)
        print(json.dumps(table, indent=2))
        return table
    raise InvalidArgument(f"unknown command {c!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s,%(levelname)s,%(name)s,%(message)s")
    try:
        run(args)
    except ArmSwapError as exc:
        print(f"armswap: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, FileExistsError) as exc:
        print(f"armswap: filesystem error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
