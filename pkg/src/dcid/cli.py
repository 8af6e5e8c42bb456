"""``dcid`` command-line entry point.

Verbs: synth, prep, train, infer, eval, ablate, report. Exit status is 0 on
success, 2 on usage errors and 1 on runtime errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger("dcid")


# --------------------------------------------------------------------------
# ablation harness
# --------------------------------------------------------------------------

@dataclass
class AblationSpec:
    train_dir: Path
    test_dir: Path
    out_dir: Path
    config: "object"                       # TrainConfig shared by every variant
    variants: list[str] = field(default_factory=lambda: ["baseline", "kma_only", "kma_kpa"])

    def __post_init__(self):
        from .trainer import VARIANTS

        if not self.variants:
            raise ValueError("an ablation needs at least one variant")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}; choose from {VARIANTS}")


def run_ablation(spec: AblationSpec) -> list[dict]:
    """Train every variant on the same data, seed and budget; evaluate on the test split.

    Writes ``<out>/<variant>/`` (checkpoint, training log, report) and the
    summary table ``ablation.csv`` / ``ablation.md``. Returns the table rows.
    """
    from .evalkit import evaluate_model
    from .trainer import Trainer, load_training_set

    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = spec.config
    train_data = load_training_set(spec.train_dir, cfg.uw_zoom, out / "kma_cache_train.json")
    test_data = load_training_set(spec.test_dir, cfg.uw_zoom, out / "kma_cache_test.json")
    log.info("ablation: %d train / %d test samples, KMA ok on %d / %d", len(train_data), len(test_data),
             sum(s.kma_ok for s in train_data), sum(s.kma_ok for s in test_data))
    rows, noop = [], None
    for variant in spec.variants:
        vcfg = dataclasses.replace(cfg, variant=variant)
        t = Trainer(vcfg, train_data, out / variant)
        t.run(log_every=100)
        rep = evaluate_model(t.model, test_data, variant, str(spec.test_dir))
        rep.write(out / variant / "report")
        rows.append({"variant": variant, **rep.aggregate})
        noop = rep.noop_aggregate
        log.info("%s: %s", variant, rep.aggregate)
    write_table(rows, out / "ablation", noop)
    return rows


def write_table(rows: list[dict], stem: Path, noop: dict | None = None) -> None:
    stem = Path(stem)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "psnr", "ssim", "delta_e"])
        for r in rows:
            w.writerow([r["variant"], f"{r['psnr']:.4f}", f"{r['ssim']:.4f}", f"{r['delta_e']:.4f}"])
    lines = ["| variant | PSNR (dB) | SSIM | ΔE |", "|---|---|---|---|"]
    lines += [f"| {r['variant']} | {r['psnr']:.3f} | {r['ssim']:.4f} | {r['delta_e']:.3f} |" for r in rows]
    if noop:
        lines += ["", f"Moiré input (no-op): PSNR {noop['psnr']:.3f} dB, SSIM {noop['ssim']:.4f}, "
                      f"ΔE {noop['delta_e']:.3f}"]
    stem.with_suffix(".md").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# report rendering
# --------------------------------------------------------------------------

def _find(paths, pattern):
    for p in map(Path, paths):
        if p.is_file():
            if p.match(pattern):
                yield p
        elif p.is_dir():
            yield from sorted(p.rglob(pattern))


def render_report(inputs, out_dir) -> Path:
    """Markdown table of every evaluation report plus one plot per training log."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# Results", "", "| method | dataset | n | PSNR (dB) | SSIM | ΔE |", "|---|---|---|---|---|---|"]
    n_reports = 0
    for p in _find(inputs, "*.json"):
        try:
            d = json.loads(p.read_text())
        except ValueError:
            continue
        if not isinstance(d, dict) or "mean" not in d or "rows" not in d:
            continue
        m = d["mean"]
        lines.append(f"| {d['method']} | {d['dataset']} | {d['count']} | {m['psnr']:.3f} | {m['ssim']:.4f} "
                     f"| {m['delta_e']:.3f} |")
        if d.get("noop"):
            n = d["noop"]
            lines.append(f"| no-op ({d['method']} set) | {d['dataset']} | {d['count']} | {n['psnr']:.3f} "
                         f"| {n['ssim']:.4f} | {n['delta_e']:.3f} |")
        n_reports += 1
    lines += ["", "## Training curves", ""]
    for i, p in enumerate(_find(inputs, "metrics.csv")):
        with open(p) as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            continue
        steps = [int(r["step"]) for r in rows]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for key in ("total", "l1_1", "perc_1"):
            ax.plot(steps, [float(r[key]) for r in rows], label=key, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        ax.set_title(str(p.parent.name))
        fig.tight_layout()
        name = f"curve_{i:02d}_{p.parent.name}.png"
        fig.savefig(out / name, dpi=100)
        plt.close(fig)
        lines.append(f"![{p.parent.name}]({name})")
    if n_reports == 0:
        lines.insert(4, "| (no evaluation reports found) | | | | | |")
    path = out / "report.md"
    path.write_text("\n".join(lines) + "\n")
    return path


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------

def _train_config(path, seed):
    from .trainer import TrainConfig

    cfg = TrainConfig.load(path) if path else TrainConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def cmd_synth(a):
    from .synth import GeneratorConfig, write_dataset

    cfg = GeneratorConfig.load(a.config) if a.config else GeneratorConfig()
    paths = write_dataset(a.out, a.count, a.seed if a.seed is not None else 0, cfg, a.start)
    print(f"wrote {len(paths)} samples to {a.out}")


def cmd_prep(a):
    from .dataprep import prep_directory

    recs = prep_directory(a.inp, a.out, a.blur_sigma, a.uw_zoom, a.source_zoom)
    ok = sum(r.alignment_ok for r in recs)
    print(f"prepared {ok}/{len(recs)} triplets into {a.out}")


def cmd_train(a):
    from .trainer import train

    cfg = _train_config(a.config, a.seed)
    t = train(cfg, a.data, a.out, resume=a.resume)
    print(f"trained to step {t.step}; checkpoint {Path(a.out) / 'checkpoint.ckpt'}")


def cmd_infer(a):
    from .align import KmaConfig, align_or_fallback
    from .imagery import load_png, save_png
    from .trainer import load_model

    from .model import restore

    model, cfg = load_model(a.ckpt)
    w, uw = load_png(a.w), load_png(a.uw)
    aligned, valid, _, ok = align_or_fallback(w, uw, KmaConfig(uw_zoom=a.uw_zoom))
    if not ok:
        log.warning("KMA failed; using centre crop-resize of the UW image")
    save_png(a.out, restore(model, w, aligned, valid))
    print(f"wrote {a.out}")


def cmd_eval(a):
    from .evalkit import evaluate_checkpoint

    rep = evaluate_checkpoint(a.ckpt, a.data, a.label, a.uw_zoom)
    csv_path, json_path = rep.write(a.out)
    m, n = rep.aggregate, rep.noop_aggregate
    print(f"{rep.method}: PSNR {m['psnr']:.3f} SSIM {m['ssim']:.4f} dE {m['delta_e']:.3f} "
          f"(no-op PSNR {n['psnr']:.3f}); wrote {csv_path}, {json_path}")


def cmd_ablate(a):
    spec = AblationSpec(Path(a.data), Path(a.test), Path(a.out), _train_config(a.config, a.seed),
                        a.variants)
    rows = run_ablation(spec)
    for r in rows:
        print(f"{r['variant']:>9}: PSNR {r['psnr']:.3f} SSIM {r['ssim']:.4f} dE {r['delta_e']:.3f}")


def cmd_report(a):
    print(f"wrote {render_report(a.inputs, a.out)}")


def build_parser() -> argparse.ArgumentParser:
    def global_flags(defaults: bool) -> argparse.ArgumentParser:
        # the copy attached to each verb must not overwrite values given before the verb
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=d(None), help="override the seed")
        g.add_argument("--threads", type=int, default=d(1), help="torch intra-op threads (default 1)")
        g.add_argument("--verbose", "-v", action="store_true", default=d(False))
        return g

    common = global_flags(False)
    p = argparse.ArgumentParser(prog="dcid", description="Dual-camera screen-capture demoireing.",
                                parents=[global_flags(True)])
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--start", type=int, default=0, help="index of the first sample")
    s.add_argument("--config", help="GeneratorConfig JSON")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("prep", parents=[common], help="crop, align and colour-correct raw triplets")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--blur-sigma", type=float, default=5.0)
    s.add_argument("--uw-zoom", type=float, default=1.0, help="nominal UW/W zoom stored in meta")
    s.add_argument("--source-zoom", type=float, default=1.0, help="approximate source-to-W scale")
    s.set_defaults(fn=cmd_prep)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="restore one W/UW pair")
    s.add_argument("--w", required=True)
    s.add_argument("--uw", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--uw-zoom", type=float, default=1.5)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a sample directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="report path; .csv and .json are written")
    s.add_argument("--label")
    s.add_argument("--uw-zoom", type=float, default=None)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="train and evaluate the ablation variants")
    s.add_argument("--data", required=True, help="training samples")
    s.add_argument("--test", required=True, help="held-out samples")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="shared TrainConfig JSON")
    s.add_argument("--variants", nargs="+", default=["baseline", "kma_only", "kma_kpa"],
                   choices=["baseline", "kma_only", "kma_kpa"])
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("report", parents=[common], help="render reports and training curves")
    s.add_argument("inputs", nargs="+", help="report files or directories to scan")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    import torch

    torch.set_num_threads(max(1, args.threads))
    try:
        args.fn(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"dcid {args.verb}: error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
