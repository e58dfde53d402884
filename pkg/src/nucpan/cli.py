"""Command-line entry point: ``nucpan <subcommand> [--config FILE] [--set s.k=v] ...``.

Tile files inside a directory share a stem (``tile_0007``) and differ by suffix:

    tile_0007.png             RGB image
    tile_0007_inst.ntns       instance map (u16)
    tile_0007_sem.ntns        semantic map (u8)
    tile_0007_classes.csv     instance_id,class
    tile_0007_counts.csv      per-class nucleus counts
    tile_0007_tri.ntns        three-label target (u8)
    tile_0007_vec.ntns        center vectors (f32, H x W x 2)
    tile_0007_semprob.ntns    semantic probabilities (f32, H x W x C)
    tile_0007_triprob.ntns    three-label probabilities (f32, H x W x 3)
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import imagecore, postprocess as pp, sampler, synthgen, targets
from .config import ConfigError, PipelineConfig, postprocess_section
from .metrics import NUM_CLASSES, SHORT_NAMES, evaluate
from .toymodel import PARAM_NAMES, ToyModel
from .training import DivergenceError, Sample, predict_dataset, train

log = logging.getLogger("nucpan")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

_TUNE_KEYS = {"seed_threshold": "seed", "fg_threshold": "fg", "min_area": "min_area",
              "min_solidity": "min_solidity"}


class InputError(OSError):
    """A referenced input is missing or unreadable."""


# --------------------------------------------------------------------------
# tile I/O
# --------------------------------------------------------------------------

def _need(path: Path) -> Path:
    if not path.exists():
        raise InputError(f"missing input: {path}")
    return path


def _stems(directory: Path, suffix: str) -> list[str]:
    _need(directory)
    stems = sorted(p.name[:-len(suffix)] for p in directory.glob(f"*{suffix}"))
    if not stems:
        raise InputError(f"no *{suffix} files in {directory}")
    return stems


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def write_classes(path: Path, classes: dict) -> None:
    _write_csv(path, ["instance_id", "class"], [(k, classes[k]) for k in sorted(classes)])


def read_classes(path: Path) -> dict[int, int]:
    with open(_need(path), newline="") as fh:
        return {int(r["instance_id"]): int(r["class"]) for r in csv.DictReader(fh)}


def read_instances(directory: Path, stem: str):
    inst = imagecore.read_tensor(_need(directory / f"{stem}_inst.ntns")).astype(np.int64)
    return inst, read_classes(directory / f"{stem}_classes.csv")


def write_instances(directory: Path, stem: str, inst, classes) -> None:
    imagecore.write_tensor(inst.astype(np.uint16), directory / f"{stem}_inst.ntns")
    write_classes(directory / f"{stem}_classes.csv", classes)


def load_samples(directory: Path) -> list[Sample]:
    out = []
    for stem in _stems(directory, "_inst.ntns"):
        img = imagecore.read_png(_need(directory / f"{stem}.png"))
        inst = imagecore.read_tensor(directory / f"{stem}_inst.ntns").astype(np.int64)
        sem = imagecore.read_tensor(_need(directory / f"{stem}_sem.ntns")).astype(np.int64)
        out.append(Sample(img, inst, sem, stem))
    return out


def save_model(model: ToyModel, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name in PARAM_NAMES:
        imagecore.write_tensor(model.params[name].astype(np.float32), directory / f"{name}.ntns")
    (directory / "manifest.txt").write_text(
        f"num_classes={model.num_classes}\nwidth={model.width}\ndropout={model.dropout!r}\n"
        f"sha256={model.checksum()}\n")


def load_model(directory: Path) -> ToyModel:
    meta = {}
    for line in _need(directory / "manifest.txt").read_text().splitlines():
        k, _, v = line.partition("=")
        meta[k.strip()] = v.strip()
    params = {n: imagecore.read_tensor(_need(directory / f"{n}.ntns")) for n in PARAM_NAMES}
    model = ToyModel(params, int(meta["num_classes"]), int(meta["width"]),
                     float(meta["dropout"]))
    if model.checksum() != meta.get("sha256"):
        raise InputError(f"checksum mismatch in {directory}")
    return model


def _out(args, cfg: PipelineConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args, cfg):
    out = _out(args, cfg)
    scenes = synthgen.generate_corpus(cfg["synth"]["n_tiles"], cfg.scene(), cfg["synth"]["seed"])
    summary = []
    for i, sc in enumerate(scenes):
        stem = f"tile_{i:04d}"
        imagecore.write_png(sc.image, out / f"{stem}.png")
        imagecore.write_tensor(sc.sem.astype(np.uint8), out / f"{stem}_sem.ntns")
        write_instances(out, stem, sc.inst, sc.classes)
        _write_csv(out / f"{stem}_counts.csv", SHORT_NAMES[1:], [list(sc.counts)])
        summary.append([stem] + list(sc.counts))
    _write_csv(out / "counts.csv", ["tile"] + list(SHORT_NAMES[1:]), summary)
    print(f"wrote {len(scenes)} tiles to {out}")


def cmd_encode_targets(args, cfg):
    src = Path(args.data)
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    width = cfg["targets"]["boundary_width"]
    stems = _stems(src, "_inst.ntns")
    for stem in stems:
        inst, _ = read_instances(src, stem)
        imagecore.write_tensor(targets.encode_three_label(inst, width), out / f"{stem}_tri.ntns")
        imagecore.write_tensor(targets.encode_center_vectors(inst), out / f"{stem}_vec.ntns")
    print(f"encoded {len(stems)} tiles into {out}")


def cmd_sample_stats(args, cfg):
    src = Path(args.data)
    stems = _stems(src, "_sem.ntns")
    sems = [imagecore.read_tensor(src / f"{s}_sem.ntns") for s in stems]
    occ = sampler.occupancy(sems, NUM_CLASSES)
    text = sampler.occupancy_csv(occ, sampler.sampling_distribution(occ), stems)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def split_train_val(samples, fraction):
    n_val = int(round(len(samples) * fraction))
    if n_val >= len(samples):
        raise ConfigError("[train] val_fraction leaves no training tiles")
    return samples[:len(samples) - n_val], samples[len(samples) - n_val:]


def cmd_train(args, cfg):
    samples = load_samples(Path(args.data))
    tr, va = split_train_val(samples, cfg["train"]["val_fraction"])
    out = _out(args, cfg)
    try:
        result = train(cfg.train(), tr, va, cfg.postprocess())
    except DivergenceError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    save_model(result.model, out / "model")
    cols = ["step", "lr", "total", "semantic", "tri_ce", "vector_l2", "val_mpq"]
    _write_csv(out / "train_log.csv", cols,
               [[r["step"]] + [repr(float(r[c])) for c in cols[1:]] for r in result.log])
    print(f"trained {len(result.log)} steps on {len(tr)} tiles; "
          f"checkpoint from step {result.best_step}, val mPQ+ {result.best_val_mpq:.4f}")


def cmd_infer(args, cfg):
    models = [load_model(Path(m)) for m in args.model]
    src = Path(args.data)
    stems = _stems(src, ".png")
    images = [imagecore.read_png(src / f"{s}.png") for s in stems]
    out = _out(args, cfg)
    plan = cfg.tta_plan(len(models))
    for stem, (sp, tp) in zip(stems, predict_dataset(models, images, plan)):
        imagecore.write_tensor(sp.astype(np.float32), out / f"{stem}_semprob.ntns")
        imagecore.write_tensor(tp.astype(np.float32), out / f"{stem}_triprob.ntns")
    print(f"inferred {len(stems)} tiles ({len(plan.passes)} passes) into {out}")


def _load_probs(directory: Path):
    stems = _stems(directory, "_semprob.ntns")
    items = [(imagecore.read_tensor(directory / f"{s}_semprob.ntns"),
              imagecore.read_tensor(_need(directory / f"{s}_triprob.ntns"))) for s in stems]
    return stems, items


def cmd_postprocess(args, cfg):
    stems, items = _load_probs(Path(args.probs))
    out = _out(args, cfg)
    results = pp.postprocess_many(items, cfg.postprocess(), cfg["run"]["threads"])
    for stem, (inst, classes) in zip(stems, results):
        write_instances(out, stem, inst, classes)
    print(f"post-processed {len(stems)} tiles into {out}")


def cmd_tune(args, cfg):
    stems, items = _load_probs(Path(args.probs))
    gt_dir = Path(args.gt)
    val = []
    for stem, (sp, tp) in zip(stems, items):
        inst, classes = read_instances(gt_dir, stem)
        val.append(pp.ValItem(sp, tp, inst, classes))
    t = cfg["tune"]
    grid = {_TUNE_KEYS[k]: v for k, v in cfg.tune_grid().items()}
    res = pp.coordinate_search(cfg.postprocess(), grid, val, t["objective"], t["per_class"],
                               rounds=t["rounds"], crop=cfg["eval"]["crop"] or None)
    out = _out(args, cfg)
    (out / "best_postprocess.ini").write_text(postprocess_section(res.best))
    _write_csv(out / "scores.csv", ["index", "config", "mPQ+", "R2", "score"],
               [[r["index"], r["config"], repr(float(r["mPQ+"])), repr(float(r["R2"])),
                 repr(float(r["score"]))] for r in res.table])
    print(f"best {t['objective']} {res.best_score:.4f}: {pp.describe(res.best)}")


def cmd_evaluate(args, cfg):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    stems = _stems(pred_dir, "_inst.ntns")
    preds = [read_instances(pred_dir, s) for s in stems]
    gts = [read_instances(gt_dir, s) for s in stems]
    rep = evaluate(preds, gts, crop=cfg["eval"]["crop"] or None)
    out = _out(args, cfg)
    (out / "report.csv").write_text(rep.to_csv())
    (out / "report.txt").write_text(rep.to_table())
    sys.stdout.write(rep.to_table())


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nucpan", description="Panoptic nuclei segmentation toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults apply if omitted)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth, "generate synthetic tiles").add_argument("--out", required=True)
    p = add("encode-targets", cmd_encode_targets, "write three-label and vector targets")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p = add("sample-stats", cmd_sample_stats, "print occupancy table and sampling probabilities")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p = add("train", cmd_train, "train the toy model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p = add("infer", cmd_infer, "predict probability planes (with TTA)")
    p.add_argument("--model", required=True, action="append", help="checkpoint dir (repeat for ensembles)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p = add("postprocess", cmd_postprocess, "probability planes to instances")
    p.add_argument("--probs", required=True)
    p.add_argument("--out", required=True)
    p = add("tune", cmd_tune, "search post-processing thresholds")
    p.add_argument("--probs", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p = add("evaluate", cmd_evaluate, "PQ+/mPQ+/R2 report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            _need(Path(args.config))
        cfg = PipelineConfig.load(args.config, args.set)
        args.fn(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, imagecore.TensorFormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
