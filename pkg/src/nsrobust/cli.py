"""``nsrobust`` command line: prepare, train, attack, report, gradcheck, sweep, synth.

Runs are driven by a JSON run config; every key has a default and any key
can be overridden with ``--set dotted.key=value``.  Exit status is 0 on
success, 1 on a validation error and 2 on a runtime failure; errors are
reported as one line ``nsrobust: error: <Kind>: <reason>`` on stderr.
"""

import argparse
import copy
import csv
import glob
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from nsrobust import __version__, checks, tensor
from nsrobust.attacks import AttackConfig, SpsaConfig, pgd_attack, spsa_attack, with_eps
from nsrobust.data import CLASS_NAMES, load_heartbeat_csv, prepare, save_heartbeat_csv
from nsrobust.errors import ArgumentError, NSRError, PersistenceError, TrainingError
from nsrobust.losses import LossConfig
from nsrobust.network import DEFAULT_MLP_WIDTHS, CNNConfig, build_cnn, build_mlp
from nsrobust.persist import load_model, save_model
from nsrobust.report import (DEFAULT_EPS_GRID, alignment_diagnostic, config_digest, emit_report,
                             read_report_csv, report_name, robustness_curve, write_report_csv)
from nsrobust.synth import synthetic_heartbeats
from nsrobust.train import TrainConfig, evaluate_clean, train

log = logging.getLogger("nsrobust")


def _section(cls, drop=("seed",)):
    return {k: v for k, v in asdict(cls()).items() if k not in drop}


def default_config():
    """The default run config as a plain JSON-able dict."""
    tr = _section(TrainConfig)
    tr["loss"] = asdict(LossConfig())
    pgd = _section(AttackConfig)
    pgd["bounds"] = list(pgd["bounds"])
    spsa = _section(SpsaConfig)
    spsa["bounds"] = list(spsa["bounds"])
    return {
        "seed": 0,
        "data_dir": "data",
        "out_dir": "runs",
        "arch": "mlp",
        "method": "",
        "dtype": "f32",
        "mlp_widths": list(DEFAULT_MLP_WIDTHS),
        "cnn": asdict(CNNConfig()),
        "train": tr,
        "pgd": pgd,
        "spsa": spsa,
        "eps_grid": list(DEFAULT_EPS_GRID),
        "eval_per_class": 0,
        "sweep_betas": [0.05, 0.1, 0.2, 0.5, 1.0],
        "sweep_eps": 0.1,
    }


def flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _merge(base, override, path=""):
    for k, v in override.items():
        if k not in base:
            hint = " (seeds are set by the top-level 'seed' key)" if k == "seed" and path else ""
            raise ArgumentError(f"unknown config key '{path}{k}'{hint}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ArgumentError(f"config key '{path}{k}' must be an object")
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v
    return base


def _set_dotted(cfg, assignment):
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ArgumentError(f"--set expects key=value, got '{assignment}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = {}
    leaf = node
    parts = key.split(".")
    for p in parts[:-1]:
        leaf[p] = {}
        leaf = leaf[p]
    leaf[parts[-1]] = value
    _merge(cfg, node)


def load_run_config(path=None, sets=()):
    cfg = default_config()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ArgumentError(f"cannot read config {path}: {exc.strerror}")
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}")
        if not isinstance(user, dict):
            raise ArgumentError(f"config {path} must be a JSON object")
        _merge(cfg, user)
    for s in sets:
        _set_dotted(cfg, s)
    validate(cfg)
    return cfg


def validate(cfg):
    """Build every typed section once so bad values fail before any work starts."""
    if cfg["arch"] not in ("mlp", "cnn"):
        raise ArgumentError(f"arch must be 'mlp' or 'cnn', got {cfg['arch']!r}")
    if cfg["dtype"] not in ("f32", "f64"):
        raise ArgumentError(f"dtype must be 'f32' or 'f64', got {cfg['dtype']!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ArgumentError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    train_cfg(cfg), pgd_cfg(cfg), spsa_cfg(cfg)
    try:
        CNNConfig(**cfg["cnn"])
    except TypeError as exc:
        raise ArgumentError(f"bad cnn section: {exc}")
    grid = [float(e) for e in cfg["eps_grid"]]
    if 0.0 not in grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ArgumentError(f"eps_grid must be strictly increasing and contain 0, got {grid}")
    return cfg


def train_cfg(cfg):
    return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})


def pgd_cfg(cfg):
    return AttackConfig.from_dict({**cfg["pgd"], "seed": cfg["seed"]})


def spsa_cfg(cfg):
    return SpsaConfig.from_dict({**cfg["spsa"], "seed": cfg["seed"]})


def method_name(cfg):
    if cfg["method"]:
        return cfg["method"]
    loss = cfg["train"]["loss"]
    if loss["kind"] == "adv":
        return f"adv{cfg['train']['adv_eps']:g}"
    return loss["kind"]


def build_model(cfg):
    dtype = np.float32 if cfg["dtype"] == "f32" else np.float64
    if cfg["arch"] == "mlp":
        return build_mlp(tuple(cfg["mlp_widths"]), seed=cfg["seed"], dtype=dtype)
    return build_cnn(CNNConfig(**cfg["cnn"]), seed=cfg["seed"], dtype=dtype)


def resolve_threads(flag):
    if flag is not None:
        threads = flag
    elif os.environ.get("NSR_THREADS"):
        try:
            threads = int(os.environ["NSR_THREADS"])
        except ValueError:
            raise ArgumentError(f"NSR_THREADS must be an integer, got {os.environ['NSR_THREADS']!r}")
    else:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ArgumentError(f"threads must be >= 1, got {threads}")
    return threads


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=str)


# --- subcommands -------------------------------------------------------------

def cmd_prepare(args):
    manifest = prepare(args.train_csv, args.test_csv, args.out, seed=args.seed, fraction=args.fraction)
    counts = manifest["counts"]
    print(f"wrote {args.out}: train {sum(counts['train'].values())}, val {sum(counts['val'].values())}, "
          f"test {sum(counts['test'].values())} rows")
    return 0


def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    for name, count, seed in (("mitbih_train.csv", args.per_class, args.seed),
                              ("mitbih_test.csv", max(1, args.per_class // 4), args.seed + 1)):
        hset = synthetic_heartbeats([count] * len(CLASS_NAMES), seed=seed)
        save_heartbeat_csv(hset, os.path.join(args.out, name))
    print(f"wrote synthetic heartbeats to {args.out}")
    return 0


def _load_split(cfg, name):
    return load_heartbeat_csv(os.path.join(cfg["data_dir"], f"{name}.csv"))


def _train_one(cfg, out_dir, progress=True):
    tcfg = train_cfg(cfg)
    train_set, val_set = _load_split(cfg, "train"), _load_split(cfg, "val")
    model = build_model(cfg)
    os.makedirs(out_dir, exist_ok=True)
    report = (lambda row: print(f"epoch {row['epoch']}: loss {row['train_loss']:.4f} "
                                f"val_acc {row['val_acc']:.4f}", flush=True)) if progress else None
    model, tlog = train(model, train_set, val_set, tcfg, out_dir=out_dir, progress=report)
    return model, tlog, train_set, val_set


def cmd_train(args, cfg):
    out = args.out or cfg["out_dir"]
    model, tlog, train_set, val_set = _train_one(cfg, out)
    save_model(model, os.path.join(out, "model.json"))
    tlog.write_csv(os.path.join(out, "trainlog.csv"))
    val_acc, val_prec = evaluate_clean(model, val_set)
    align, _, _ = alignment_diagnostic(model, val_set)
    _write_json(os.path.join(out, "run.json"), {
        "version": __version__,
        "config": cfg,
        "config_digest": config_digest(cfg),
        "seed": cfg["seed"],
        "arch": cfg["arch"],
        "method": method_name(cfg),
        "data": {"train": train_set.provenance, "val": val_set.provenance},
        "best_epoch": tlog.best_epoch,
        "final": {"val_acc": val_acc, "val_prec": val_prec, "alignment": align},
    })
    print(f"final val ACC {val_acc:.4f} PREC {val_prec:.4f}; best epoch {tlog.best_epoch}; model in {out}")
    return 0


def _model_identity(model_path, cfg):
    """``(arch, method)`` from the run manifest next to the model, else from the config."""
    run = os.path.join(os.path.dirname(os.path.abspath(model_path)), "run.json")
    if os.path.exists(run):
        with open(run, encoding="utf-8") as fh:
            meta = json.load(fh)
        return meta.get("arch", cfg["arch"]), cfg["method"] or meta.get("method", method_name(cfg))
    return cfg["arch"], method_name(cfg)


def write_waveforms_csv(path, waveforms):
    """Rows ``name, label, eps, v0..`` for each clean (eps 0) and perturbed beat."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        length = len(next(iter(waveforms.values()))[1])
        w.writerow(["name", "label", "eps"] + [f"v{i}" for i in range(length)])
        for name, (label, clean, adv) in waveforms.items():
            w.writerow([name, label, "0"] + [f"{v:.6g}" for v in clean])
            for eps, x in sorted(adv.items()):
                w.writerow([name, label, f"{eps:g}"] + [f"{v:.6g}" for v in x])


def read_waveforms_csv(path):
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            name, eps, values = row[0], float(row[2]), np.array(row[3:], dtype=np.float64)
            clean, adv = out.setdefault(name, [None, {}])
            if eps == 0:
                out[name][0] = values
            else:
                adv[eps] = values
    return {k: (v[0], v[1]) for k, v in out.items()}


def cmd_attack(args, cfg, threads):
    model = load_model(args.model)
    arch, method = _model_identity(args.model, cfg)
    test = load_heartbeat_csv(args.data) if args.data else _load_split(cfg, "test")
    if cfg["eval_per_class"]:
        test = test.first_per_class(cfg["eval_per_class"])
    if args.method == "pgd":
        attack, acfg, attack_id = pgd_attack, pgd_cfg(cfg), f"pgd{cfg['pgd']['steps']}"
    else:
        attack, acfg, attack_id = spsa_attack, spsa_cfg(cfg), "spsa"
    rep = robustness_curve(model, attack, acfg, cfg["eps_grid"], test, model_id=args.model, threads=threads)
    rep.attack_id = attack_id
    rep.metadata.update({"arch": arch, "method": method, "attack": attack_id, "model": args.model,
                         "data": test.provenance, "run_config_digest": config_digest(cfg),
                         "eps_grid": cfg["eps_grid"]})
    out = args.out
    if out.endswith(os.sep) or os.path.isdir(out):
        out = os.path.join(out, report_name(arch, method, attack_id) + ".csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_report_csv(rep, out)
    # one beat per class, perturbed at every non-zero grid level
    beats = test.first_per_class(1)
    stream = tensor.RandStream(cfg["seed"], 9)
    waveforms = {}
    x = beats.signals.astype(model.dtype)
    advs = {e: attack(model, x, beats.labels, with_eps(acfg, e), stream=stream.spawn(i))
            for i, e in enumerate(cfg["eps_grid"]) if e > 0}
    for k, label in enumerate(beats.labels):
        waveforms[f"{report_name(arch, method, attack_id)}_{CLASS_NAMES[label]}"] = (
            int(label), x[k], {e: a[k] for e, a in advs.items()})
    write_waveforms_csv(os.path.splitext(out)[0] + "_waveforms.csv", waveforms)
    for eps, acc, prec, n in rep.rows:
        print(f"eps {eps:g}: ACC {acc:.4f} PREC {prec:.4f} (n={n})")
    print(f"wrote {out}")
    return 0


def cmd_report(args):
    reports, waveforms = {}, {}
    for path in sorted(glob.glob(os.path.join(args.input, "*.csv"))):
        if path.endswith("_waveforms.csv"):
            waveforms.update(read_waveforms_csv(path))
            continue
        rep = read_report_csv(path)
        meta = rep.metadata
        if not {"arch", "method", "attack"} <= set(meta):
            continue  # comparison tables and foreign CSVs
        reports[(meta["arch"], meta["method"], meta["attack"])] = rep
    if not reports:
        raise ArgumentError(f"no robustness reports found in {args.input}")
    written = emit_report(reports, args.out, waveforms)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_gradcheck(args):
    results = checks.run_suite(args.arch, args.seed, containment_cases=args.cases)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 2


def cmd_sweep(args, cfg, threads):
    """Grid over the regularizer weight; keep the best validation ACC under PGD at ``sweep_eps``."""
    kind = cfg["train"]["loss"]["kind"]
    key = {"loss1": "beta1", "loss2": "beta2", "jacob": "lambda_jac"}.get(kind)
    if key is None:
        raise ArgumentError(f"sweep needs loss kind loss1, loss2 or jacob, got {kind!r}")
    out = args.out or cfg["out_dir"]
    grid = [0.0, float(cfg["sweep_eps"])]
    rows = []
    for beta in cfg["sweep_betas"]:
        run = copy.deepcopy(cfg)
        run["train"]["loss"][key] = beta
        model, _, _, val = _train_one(run, os.path.join(out, f"{key}_{beta:g}"), progress=False)
        rep = robustness_curve(model, pgd_attack, pgd_cfg(run), grid, val, threads=threads)
        rows.append((beta, rep.acc(0.0), rep.acc(grid[1])))
        print(f"{key}={beta:g}: clean ACC {rows[-1][1]:.4f}, PGD ACC {rows[-1][2]:.4f}", flush=True)
    best = max(rows, key=lambda r: r[2])
    _write_json(os.path.join(out, "sweep.json"), {"key": key, "eps": grid[1], "config_digest": config_digest(cfg),
                                                  "rows": rows, "best": best[0]})
    print(f"best {key} = {best[0]:g}")
    return 0


# --- argument parsing -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def _keys_epilog():
    lines = ["run config keys (JSON file and --set key=value; defaults shown):"]
    for k, v in flatten(default_config()).items():
        lines.append(f"  {k} = {json.dumps(v)}")
    lines.append("environment: NSR_THREADS is the fallback for --threads")
    return "\n".join(lines)


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="nsrobust", description=__doc__.splitlines()[0], epilog=_keys_epilog(),
                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (dotted path, JSON value)")
        p.add_argument("--seed", type=int, help="overrides the 'seed' key")
        p.add_argument("--threads", type=int, help="worker threads (default: NSR_THREADS or all cores)")
        return p

    p = sub.add_parser("prepare", help="split, balance and write the heartbeat CSVs")
    p.add_argument("--train-csv", required=True)
    p.add_argument("--test-csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=0.8)

    p = with_config(sub.add_parser("train", help="train a model", epilog=_keys_epilog(), formatter_class=fmt))
    p.add_argument("--out", help="output directory (default: out_dir key)")

    p = with_config(sub.add_parser("attack", help="robustness curve of a trained model",
                                   epilog=_keys_epilog(), formatter_class=fmt))
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=("pgd", "spsa"), default="pgd")
    p.add_argument("--data", help="evaluation CSV (default: <data_dir>/test.csv)")
    p.add_argument("--out", required=True, help="report CSV path, or a directory")

    p = sub.add_parser("report", help="merge report CSVs and render SVG charts")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="run the property suite; exit 0 iff every check passes")
    p.add_argument("--arch", choices=("mlp", "cnn"), default="mlp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=10_000, help="attack containment fuzz cases")

    p = with_config(sub.add_parser("sweep", help="grid search of the regularizer weight on validation data",
                                   epilog=_keys_epilog(), formatter_class=fmt))
    p.add_argument("--out", help="output directory (default: out_dir key)")

    p = sub.add_parser("synth", help="write synthetic heartbeat CSVs in the public file layout")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _one_line(exc):
    return " ".join(str(exc).split())


def run_cli(argv=None):
    """Run one subcommand and return the exit status."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "prepare":
            return cmd_prepare(args)
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        sets = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = load_run_config(args.config, sets)
        threads = resolve_threads(args.threads)
        if args.command == "train":
            return cmd_train(args, cfg)
        if args.command == "attack":
            return cmd_attack(args, cfg, threads)
        return cmd_sweep(args, cfg, threads)
    except TrainingError as exc:
        where = f" (last good checkpoint: {exc.checkpoint})" if exc.checkpoint else ""
        print(f"nsrobust: error: TrainingError: {_one_line(exc)}{where}", file=sys.stderr)
        return 2
    except (NSRError, FileNotFoundError) as exc:
        kind = type(exc).__name__
        runtime = isinstance(exc, NSRError) and not isinstance(exc, (ValueError, PersistenceError))
        print(f"nsrobust: error: {kind}: {_one_line(exc)}", file=sys.stderr)
        return 2 if runtime else 1
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        print(f"nsrobust: error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 2


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
