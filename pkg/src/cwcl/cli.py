"""Command-line front door: ``cwcl inject | train | eval | report``.

Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as cfgmod
from .config import ConfigError, ExperimentConfig
from .corpus import (InvalidSpecError, NoisyCorpus, OverlayParseError, empirical_noise_rate,
                     load_noise_file, make_noisy_corpus, save_noise_file)
from .datasets import load_dataset
from .netcore import CheckpointError, build_backbone, forward_with_taps, load_checkpoint
from .trainer import (RunMetrics, TrainingAborted, default_device, evaluate, train_stage1,
                      train_stage2)

log = logging.getLogger("cwcl")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3

FLAG_KEYS = {
    "lam": "plan.lam",
    "noise_kind": "noise.kind",
    "noise_rate": "noise.rate",
    "gamma": "plan.gamma",
    "stage": "stage",
    "seed": "seed",
    "out": "out",
}


def _add_overrides(p, keys=FLAG_KEYS):
    if "lam" in keys:
        p.add_argument("--lambda", dest="lam", help="loss balance factor (plan.lam)")
    if "noise_kind" in keys:
        p.add_argument("--noise-kind", choices=["symmetric", "asymmetric_pairs", "asymmetric_next"])
    if "noise_rate" in keys:
        p.add_argument("--noise-rate")
    if "gamma" in keys:
        p.add_argument("--gamma", help="confident-selection threshold")
    if "stage" in keys:
        p.add_argument("--stage", choices=cfgmod.STAGES)
    p.add_argument("--seed")
    p.add_argument("--out", help="run directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set plan.epochs_stage1=30")


def build_config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            cfgmod.set_key(cfg, key, str(v))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfgmod.set_key(cfg, k.strip(), v)
    cfgmod._recheck_plan(cfg)
    return cfg.validate()


def _datasets(cfg: ExperimentConfig, need_test=True):
    d = cfg.dataset
    kw = dict(num_classes=d.num_classes, size=d.image_size, seed=d.seed)
    train = load_dataset(d.name, d.path or None, "train", n=d.train_size or None, **kw)
    test = load_dataset(d.name, d.path or None, "test", n=d.test_size or None, **kw) if need_test else None
    return train, test


def _corpus(cfg: ExperimentConfig, train, run_dir: Path) -> NoisyCorpus:
    """Use an explicit or previously persisted overlay, else inject and persist one."""
    existing = Path(cfg.overlay) if cfg.overlay else run_dir / "noise.csv"
    if existing.exists():
        overlay = load_noise_file(existing, train.num_classes)
        corpus = overlay.apply(train, cfg.noise, cfg.seed)
    else:
        if cfg.overlay:
            raise ConfigError(f"overlay file {cfg.overlay} does not exist")
        corpus = make_noisy_corpus(train, cfg.noise, cfg.seed)
    save_noise_file(corpus, run_dir / "noise.csv")
    return corpus


def _build_model(cfg: ExperimentConfig, train):
    h, w, c = train.image_shape
    if h != w:
        raise ConfigError(f"square images expected, got {h}x{w}")
    torch.manual_seed(cfg.seed)
    return build_backbone(cfg.arch, cfg.dataset.num_classes, h, c)


def _write_json(path: Path, obj):
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    os.replace(tmp, path)


def _code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- inject -----------------------------------------------------------------

def cmd_inject(args) -> int:
    cfg = build_config(args)
    run_dir = Path(cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    train, _ = _datasets(cfg, need_test=False)
    corpus = make_noisy_corpus(train, cfg.noise, cfg.seed)
    path = Path(args.overlay_out) if args.overlay_out else run_dir / "noise.csv"
    save_noise_file(corpus, path)
    print(f"wrote {path}")
    print(f"empirical noise rate: {empirical_noise_rate(corpus):.4f}")
    return EXIT_OK


# -- train ------------------------------------------------------------------

def _latest_checkpoint(run_dir: Path):
    root = run_dir / "ckpt"
    if not root.is_dir():
        return None
    cands = []
    for d in root.iterdir():
        stage, _, epoch = d.name.partition("-")
        if (d / "manifest.json").exists() and stage.isdigit() and epoch.isdigit():
            cands.append((int(stage), int(epoch), d))
    return max(cands)[2] if cands else None


def _summary(cfg, chash, metrics: RunMetrics, corpus, run_dir: Path):
    last = metrics.last_with("test_acc_ema")
    best = max((r for r in metrics.records if r.test_acc_ema == r.test_acc_ema),
               key=lambda r: r.test_acc_ema, default=None)
    sel = metrics.last_with("selection_noise_rate")
    return {
        "config_hash": chash,
        "seed": cfg.seed,
        "arm": cfg.arm,
        "noise_kind": cfg.noise.kind,
        "noise_rate": cfg.noise.rate,
        "empirical_noise_rate": empirical_noise_rate(corpus),
        "final_epoch": metrics.records[-1].epoch if metrics.records else 0,
        "final_acc_live": last.test_acc_live if last else None,
        "final_acc_ema": last.test_acc_ema if last else None,
        "best_epoch": best.epoch if best else None,
        "best_acc_ema": best.test_acc_ema if best else None,
        "final_selection_size": sel.selection_size if sel else None,
        "final_selection_noise_rate": sel.selection_noise_rate if sel else None,
        "code_version": _code_version(),
        "config": cfgmod.serialize(cfg),
    }


def cmd_train(args) -> int:
    cfg = build_config(args)
    chash = cfg.config_hash()
    run_dir = Path(cfg.out)
    run_json = run_dir / "run.json"
    resume = None
    if run_json.exists():
        prev = json.loads(run_json.read_text())
        if prev.get("config_hash") != chash or prev.get("seed") != cfg.seed:
            raise ConfigError(f"{run_dir} holds a run with config hash {prev.get('config_hash')} "
                              f"seed {prev.get('seed')}; this config is {chash} seed {cfg.seed}. "
                              "Use a fresh --out.")
    latest = _latest_checkpoint(run_dir)
    if latest is not None:
        if not args.resume:
            raise ConfigError(f"{run_dir} already has checkpoints; pass --resume or use a fresh --out")
        manifest = json.loads((latest / "manifest.json").read_text())
        if manifest.get("config_hash") != chash or manifest.get("seed") != cfg.seed:
            raise ConfigError(f"refusing to resume {latest}: checkpoint config hash "
                              f"{manifest.get('config_hash')} (seed {manifest.get('seed')}) differs from "
                              f"{chash} (seed {cfg.seed})")
        resume = latest

    train, test = _datasets(cfg)
    model = _build_model(cfg, train)
    if args.dry_run:
        x = torch.zeros((2,) + tuple(model.input_shape))
        model.eval()
        logits, taps = forward_with_taps(model, x)
        print(f"config ok (hash {chash}); train {len(train)} test {len(test)} images {train.image_shape}")
        print(f"logits {tuple(logits.shape)}; taps " + ", ".join(str(tuple(t.shape[1:])) for t in taps))
        return EXIT_OK

    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(f"# config_hash = {chash}\n" + cfgmod.serialize(cfg))
    _write_json(run_json, {"config_hash": chash, "seed": cfg.seed, "arm": cfg.arm})
    corpus = _corpus(cfg, train, run_dir)
    device = default_device()
    model.to(device)
    extra = {"config_hash": chash, "config": cfgmod.serialize(cfg), "arch": cfg.arch}
    plan = cfg.plan

    manifest = json.loads((resume / "manifest.json").read_text()) if resume else {"stage": 1}
    if manifest["stage"] == 1:
        ckpt, metrics = train_stage1(plan, corpus, model, run_dir, test, resume_from=resume,
                                     manifest_extra=extra)
    else:
        ckpt, metrics = resume, None
    if cfg.stage == "full" and plan.epochs_stage2 > 0:
        ckpt, metrics = train_stage2(plan, corpus, ckpt, model, run_dir, test, metrics=metrics,
                                     manifest_extra=extra)
    summary = _summary(cfg, chash, metrics, corpus, run_dir)
    summary["checkpoint"] = str(ckpt)
    _write_json(run_dir / "summary.json", summary)
    print(f"run {run_dir}: arm {cfg.arm}, final test acc live {summary['final_acc_live']} "
          f"ema {summary['final_acc_ema']}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------

def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    try:
        manifest = json.loads((ckpt / "manifest.json").read_text())
        cfg = cfgmod.parse(manifest["config"])
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {ckpt}: {exc}") from None
    if args.config:
        cfg = cfgmod.load(args.config)
    _, test = _datasets(cfg)
    model = build_backbone(manifest.get("arch", cfg.arch), cfg.dataset.num_classes, test.image_shape[0],
                           test.image_shape[2])
    _, _, ema, _ = load_checkpoint(ckpt, model)
    ema_net = build_backbone(manifest.get("arch", cfg.arch), cfg.dataset.num_classes, test.image_shape[0],
                             test.image_shape[2])
    try:
        ema_net.load_state_dict(ema.shadow)
    except RuntimeError as exc:
        raise CheckpointError(f"architecture mismatch in EMA weights of {ckpt}: {exc}") from None
    live_acc = evaluate(model, test)
    ema_acc = evaluate(ema_net, test)
    _write_json(ckpt / "eval.json", {"config_hash": manifest.get("config_hash"), "stage": manifest.get("stage"),
                                     "epoch": manifest.get("epoch"), "test_acc_live": live_acc,
                                     "test_acc_ema": ema_acc, "test_size": len(test)})
    print(f"live accuracy: {live_acc:.4f}")
    print(f"ema accuracy: {ema_acc:.4f}")
    return EXIT_OK


# -- report -----------------------------------------------------------------

def aggregate(summaries: list[dict]) -> list[dict]:
    """Group summaries by (noise kind, rate, arm); mean and sample std of final EMA accuracy."""
    groups: dict[tuple, list[dict]] = {}
    for s in summaries:
        groups.setdefault((s["noise_kind"], s["noise_rate"], s["arm"]), []).append(s)
    rows = []
    for (kind, rate, arm), members in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        accs = np.array([m["final_acc_ema"] for m in members], dtype=float) * 100
        hashes = sorted({m["config_hash"] for m in members})
        rows.append({
            "noise_kind": kind, "noise_rate": rate, "arm": arm, "runs": len(members),
            "mean": float(accs.mean()),
            "std": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
            "seeds": sorted(m["seed"] for m in members),
            "config_hashes": hashes,
        })
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'noise':<18} {'rate':>5}  {'arm':<12} {'runs':>4}  test acc (%)"]
    for r in rows:
        lines.append(f"{r['noise_kind']:<18} {r['noise_rate']:>5.2f}  {r['arm']:<12} {r['runs']:>4}  "
                     f"{r['mean']:.2f}±{r['std']:.2f}")
    return "\n".join(lines)


def _plot_curves(run_dirs: list[Path], out: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for d in run_dirs:
        p = d / "metrics.csv"
        if not p.exists():
            continue
        m = RunMetrics.read_csv(p)
        pts = [(r.epoch, r.test_acc_ema) for r in m.records if r.test_acc_ema == r.test_acc_ema]
        if pts:
            e, a = zip(*pts)
            ax.plot(e, np.array(a) * 100, label=d.name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy, EMA weights (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out / "learning_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def cmd_report(args) -> int:
    run_dirs = [Path(d) for d in args.run_dirs]
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    summaries = []
    for d in run_dirs:
        p = d / "summary.json"
        if not p.exists():
            raise ConfigError(f"{d} has no summary.json")
        summaries.append(json.loads(p.read_text()))
    rows = aggregate(summaries)
    for r in rows:
        if len(r["config_hashes"]) > 1:
            msg = (f"group {r['noise_kind']}/{r['noise_rate']}/{r['arm']} mixes config hashes "
                   f"{', '.join(r['config_hashes'])}")
            warnings.warn(msg)
            print(f"warning: {msg}", file=sys.stderr)
    table = format_table(rows)
    print(table)
    if args.report_out:
        out = Path(args.report_out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table + "\n")
        _write_json(out / "report.json", rows)
        if not args.no_plots:
            print(f"plot: {_plot_curves(run_dirs, out)}")
    return EXIT_OK


# -- entry ------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cwcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inject", help="write a noise overlay file and print the empirical noise rate")
    p.add_argument("--config")
    p.add_argument("--overlay-out", help="overlay path (default: <out>/noise.csv)")
    _add_overrides(p, ("noise_kind", "noise_rate"))
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("train", help="run stage 1, then stage 2 unless --stage 1-only")
    p.add_argument("--config")
    p.add_argument("--dry-run", action="store_true", help="validate config and shapes, do not train")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint's live and EMA weights")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="override the config stored in the checkpoint manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="mean±std table and learning curves over run directories")
    p.add_argument("run_dirs", nargs="*")
    p.add_argument("--report-out", help="directory for report.txt, report.json and plots")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidSpecError, OverlayParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, CheckpointError, FileNotFoundError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
