"""``partco`` command line: gen, build-labels, train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 validation error, 2 I/O or format error, 3 numerical abort.
"""
import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import gradcheck, synth
from .config import RunConfig, parse_range
from .errors import FormatError, PartcoError, ValidationError
from .features import load_manifest, read_features, save_manifest, write_features
from .heads import load_checkpoint, save_checkpoint
from .losses import LossReport
from .partlabels import LabelConfig, build_labels, dump_ppm, read_store, write_store
from .training import evaluate, train

DIM_SWEEP = (64, 128, 256, 512)
ORDER_SWEEP = ("1", "2", "both", "off")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _kv(items):
    out = []
    for item in items or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        out.append(item)
    return "\n".join(out)


def _run_config(args, **flags):
    """Config file, then ``--set`` pairs, then explicit flags (highest precedence)."""
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = config_mod.loads(_kv(getattr(args, "set", None)), cfg)
    given = {k: v for k, v in flags.items() if v is not None}
    return cfg.replace(**given).validate()


def _label_config(cfg):
    return LabelConfig(per_class=cfg.per_class, k_candidates=parse_range(cfg.k_candidates),
                       k_candidates_2nd=parse_range(cfg.k_candidates_2nd), tau_obj=cfg.tau_obj)


def _synth_overrides(items):
    fields = {f: t for f, t in synth.SynthConfig.__annotations__.items()}
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in fields:
            raise ValidationError(f"unknown synth key {key!r}")
        kind = fields[key]
        if kind in (bool, "bool"):
            out[key] = value.lower() in ("1", "true", "yes")
        elif kind in (int, "int"):
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _text_table(header, rows):
    cells = [header] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(str(r[i])) for r in cells) for i in range(len(header))]
    lines = ["  ".join(str(v).rjust(w) for v, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _out_path(path):
    """``path`` as a Path, with its parent directory created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _emit(header, rows, csv_path, out):
    out.write(_text_table(header, rows))
    text = _csv_text(header, [[_fmt(v) for v in r] for r in rows])
    if csv_path:
        _out_path(csv_path).write_text(text, encoding="utf-8")
    else:
        out.write("\n" + text)


def _load_dataset(args):
    fs = read_features(args.features)
    manifest = load_manifest(args.manifest)
    if manifest.class_ids.size != fs.num_images:
        raise ValidationError(f"manifest lists {manifest.class_ids.size} images, "
                              f"{args.features} holds {fs.num_images}")
    return fs, manifest


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args, out):
    cfg = synth.preset(args.preset, seed=args.seed, **_synth_overrides(args.set))
    fs, manifest, truth = synth.generate(cfg)
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    write_features(fs, d / f"{args.name}.ptcf")
    save_manifest(manifest, d / f"{args.name}.csv")
    write_store(truth.to_store(), d / f"{args.name}.truth")
    out.write(f"wrote {args.name}.ptcf, {args.name}.csv, {args.name}.truth to {d} "
              f"({fs.num_images} images, {fs.patches_per_image} patches, d={fs.dim})\n")


def cmd_build_labels(args, out):
    fs, manifest = _load_dataset(args)
    cfg = LabelConfig(per_class=args.per_class, k_candidates=parse_range(args.k_candidates),
                      k_candidates_2nd=parse_range(args.k_candidates_2nd), tau_obj=args.tau_obj)
    store = build_labels(fs, manifest, args.order, cfg, seed=args.seed)
    write_store(store, _out_path(args.out))
    rows = [[lv.level, lv.k_star] for lv in store.levels]
    _emit(["level", "k_star"], rows, None, out)
    if args.ppm_dir:
        d = Path(args.ppm_dir)
        d.mkdir(parents=True, exist_ok=True)
        for lv in store.levels:
            for i in range(min(args.ppm_count, fs.num_images)):
                dump_ppm(lv.labels[i], fs.grid, d / f"level{lv.level}_{i:05d}.ppm")


def cmd_train(args, out):
    fs, manifest = _load_dataset(args)
    cfg = _run_config(args, epochs=args.epochs, mode=args.mode, order=args.order,
                      seed=args.seed, lambda_b=args.lambda_b, part_dim=args.part_dim,
                      batch_size=args.batch_size)
    store = read_store(args.labels) if args.labels else None
    ckpt = _out_path(args.out)
    history = _out_path(args.history) if args.history else None

    def on_checkpoint(epoch, params):
        save_checkpoint(params, ckpt.with_name(f"{ckpt.stem}.epoch{epoch:04d}{ckpt.suffix}"),
                        meta=cfg.dumps())

    result = train(fs, manifest, store, cfg, on_checkpoint=on_checkpoint)
    save_checkpoint(result.params, ckpt, meta=cfg.dumps())
    header = ["epoch", *LossReport.FIELDS]
    rows = [[e + 1, *r.as_tuple()] for e, r in enumerate(result.history)]
    if history:
        history.write_text(_csv_text(header, [[repr(v) for v in r] for r in rows]),
                                      encoding="utf-8")
    last = result.history[-1] if result.history else None
    out.write(f"trained {cfg.epochs} epochs ({cfg.mode}, order={cfg.order}); "
              f"final grand_total={last.grand_total:.6f}\n" if last else
              f"trained 0 epochs; wrote initial parameters\n")


def cmd_eval(args, out):
    fs, manifest = _load_dataset(args)
    params, meta = load_checkpoint(args.checkpoint)
    cfg = config_mod.loads(meta) if meta.strip() else RunConfig()
    if params.dim != fs.dim:
        raise ValidationError(f"checkpoint expects d={params.dim}, features have d={fs.dim}")
    mode = args.mode or cfg.mode
    rep = evaluate(params, fs, manifest, mode=mode, seed=args.seed, tau_s=cfg.tau_s)
    rows = [["All", rep.acc_all, rep.n_all], ["Old", rep.acc_old, rep.n_old],
            ["New", rep.acc_new, rep.n_new]]
    _emit(["split", "acc", "count"], rows, args.csv, out)


def cmd_gradcheck(args, out):
    names = gradcheck.LOSS_NAMES + ("model",) if args.loss == "all" else (args.loss,)
    rows, failed = [], False
    for name in names:
        n = args.instances if not name.startswith("model") else min(args.instances, 5)
        worst = max(gradcheck.check(name, seed=args.seed + s, h=args.h) for s in range(n))
        ok = worst < args.tol
        failed |= not ok
        rows.append([name, n, f"{worst:.3e}", "pass" if ok else "FAIL"])
    _emit(["loss", "instances", "max_rel_err", "status"], rows, args.csv, out)
    if failed:
        raise ValidationError(f"gradient check above tolerance {args.tol}")


def _ablate_dataset(args):
    if args.preset:
        cfg = synth.preset(args.preset, seed=args.data_seed, **_synth_overrides(args.synth))
        fs, manifest, _ = synth.generate(cfg)
        return fs, manifest
    if not (args.features and args.manifest):
        raise ValidationError("ablate needs --preset or both --features and --manifest")
    return _load_dataset(args)


def ablate(fs, manifest, base, sweep, seeds):
    """Rows ``[setting, All, Old, New]`` (means over ``seeds``) for a sweep."""
    values = DIM_SWEEP if sweep == "dim" else ORDER_SWEEP
    acc = {v: [] for v in values}
    for seed in seeds:
        label_order = "both" if sweep == "order" or base.order in ("2", "both") else "1"
        store = None
        if sweep == "order" or base.order != "off":
            store = build_labels(fs, manifest, label_order, _label_config(base), seed=seed)
        for v in values:
            cfg = (base.replace(part_dim=v) if sweep == "dim" else base.replace(order=v))
            cfg = cfg.replace(seed=seed)
            res = train(fs, manifest, store, cfg)
            r = evaluate(res.params, fs, manifest, mode=cfg.mode, seed=seed, tau_s=cfg.tau_s)
            acc[v].append((r.acc_all, r.acc_old, r.acc_new))
    return [[v, *(float(x) for x in np.mean(acc[v], axis=0))] for v in values]


def cmd_ablate(args, out):
    fs, manifest = _ablate_dataset(args)
    base = _run_config(args, epochs=args.epochs, mode=args.mode, order=args.order)
    seeds = parse_range(args.seeds) if args.seeds else (base.seed,)
    rows = ablate(fs, manifest, base, args.sweep, seeds)
    header = ["d_prime" if args.sweep == "dim" else "order", "All", "Old", "New"]
    _emit(header, rows, args.csv, out)


# ---------------------------------------------------------------------------
# parser


def _add_dataset(p, required=True):
    p.add_argument("--features", required=required, help=".ptcf feature file")
    p.add_argument("--manifest", required=required, help=".csv manifest")


def _add_run_config(p):
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a run-config key (repeatable)")
    p.add_argument("--mode", choices=("parametric", "nonparametric"))
    p.add_argument("--order", choices=ORDER_SWEEP)
    p.add_argument("--epochs", type=int)


def build_parser():
    parser = _Parser(prog="partco", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--preset", required=True, choices=sorted(synth.PRESETS))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", default="dataset", help="file stem (default: dataset)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a synth config field (repeatable)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("build-labels", help="build part-level correspondence labels")
    _add_dataset(p)
    p.add_argument("--order", choices=("1", "2", "both"), default="1")
    p.add_argument("--per-class", type=int, default=1)
    p.add_argument("--k-candidates", default="2..10")
    p.add_argument("--k-candidates-2nd", default="2..6")
    p.add_argument("--tau-obj", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .plm file")
    p.add_argument("--ppm-dir", help="also dump label maps of the first images as PPM")
    p.add_argument("--ppm-count", type=int, default=8)
    p.set_defaults(func=cmd_build_labels)

    p = sub.add_parser("train", help="train heads and prototypes")
    _add_dataset(p)
    p.add_argument("--labels", help=".plm part labels (omit with --order off)")
    _add_run_config(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-b", type=float)
    p.add_argument("--part-dim", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--history", help="per-epoch LossReport CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clustering accuracy of a checkpoint")
    _add_dataset(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("parametric", "nonparametric"))
    p.add_argument("--seed", type=int, default=0, help="k-means seed (nonparametric)")
    p.add_argument("--csv", help="write the table as CSV here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--loss", default="all", choices=("all", *gradcheck.CHECKS))
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep part-head dimension or label order")
    p.add_argument("--sweep", required=True, choices=("dim", "order"))
    _add_dataset(p, required=False)
    p.add_argument("--preset", choices=sorted(synth.PRESETS),
                   help="generate the dataset in memory instead of reading files")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--synth", action="append", metavar="KEY=VALUE")
    _add_run_config(p)
    p.add_argument("--seeds", help="training seeds, e.g. 0..4 (default: config seed)")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_ablate)
    return parser


def run(argv, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    if not argv:
        err.write(parser.format_usage())
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            err.write(parser.format_usage())
            return 1
        args.func(args, out)
    except PartcoError as exc:
        err.write(f"partco: error: {exc}\n")
        return exc.exit_code
    except OSError as exc:
        err.write(f"partco: error: {exc}\n")
        return FormatError.exit_code
    return 0


def main():
    sys.exit(run(sys.argv[1:]))
