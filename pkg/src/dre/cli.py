"""Command-line experiment runner.

Subcommands compose through files only: ``generate`` writes a dataset,
``train`` turns a dataset into a model bundle, and ``evaluate``,
``converge`` and ``stability`` turn bundles into CSV/JSON reports.
Settings resolve as preset < config file < ``DRE_SEED`` < command-line flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("dre")

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


def _schedule(text):
    """``"0:1e-3,500:1e-4"`` -> ``[[0, 0.001], [500, 0.0001]]``."""
    out = []
    for part in text.split(","):
        epoch, _, lr = part.partition(":")
        if not lr:
            raise argparse.ArgumentTypeError(f"bad schedule entry {part!r}, expected EPOCH:LR")
        out.append([int(epoch), float(lr)])
    return out


def _weights(text):
    out = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        if not value:
            raise argparse.ArgumentTypeError(f"bad weight {part!r}, expected NAME=VALUE")
        out[name.strip()] = float(value)
    return out


def _floats(text):
    return [float(v) for v in text.split(",")]


def _words(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="dre", description="Reduced latent-dynamics experiments.")
    p.add_argument("--threads", type=int, help="cap BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="TOML config or a previous run.json")
        sp.add_argument("--preset", help="named experiment preset")
        sp.add_argument("--paper-scale", action="store_true", default=None, help="use full-size preset settings")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    g = sub.add_parser("generate", help="solve the full model and write a dataset")
    common(g)
    g.add_argument("--problem", dest="generate.problem")
    g.add_argument("--samples", type=int, dest="generate.samples")
    g.add_argument("--ntime", type=int, dest="generate.ntime")
    g.add_argument("--T", type=float, dest="generate.T")
    g.add_argument("--store-rhs", action="store_true", default=None, dest="generate.store_rhs")
    g.add_argument("--val", type=float, dest="generate.val")
    g.add_argument("--test", type=float, dest="generate.test")
    g.add_argument("--relative-to", choices=("total", "train"), dest="generate.relative_to")

    t = sub.add_parser("train", help="train a model bundle on a dataset")
    common(t)
    t.add_argument("--data", type=Path)
    t.add_argument("--strategy", choices=("exact-rhs", "semi", "fully"), dest="train.strategy")
    t.add_argument("--scheme", dest="train.scheme")
    t.add_argument("--epochs", type=int, dest="train.epochs")
    t.add_argument("--batch", type=int, dest="train.batch")
    t.add_argument("--lr", type=_schedule, dest="train.lr", help="EPOCH:LR,EPOCH:LR,...")
    t.add_argument("--windows", type=int, dest="train.windows")
    t.add_argument("--weights", type=_weights, dest="train.weights", help="NAME=VALUE,... loss weights")
    t.add_argument("--conservation-mode", choices=("componentwise", "total"), dest="train.conservation_mode")
    t.add_argument("--normalization", choices=("none", "standard", "scale"), dest="train.normalization")
    t.add_argument("--ks", type=float, dest="train.ks")
    t.add_argument("--latent", type=int, dest="train.latent", help="latent size for problems without a preset layout")

    e = sub.add_parser("evaluate", help="reconstruct test trajectories and write error curves")
    common(e)
    e.add_argument("--bundle", type=Path)
    e.add_argument("--data", type=Path)
    e.add_argument("--scheme", dest="evaluate.scheme")
    e.add_argument("--dt", type=float, dest="evaluate.dt")
    e.add_argument("--T", type=float, dest="evaluate.T")
    e.add_argument("--split", dest="evaluate.split")

    c = sub.add_parser("converge", help="error versus time step for one or more bundles")
    common(c)
    c.add_argument("--bundle", type=Path, action="append")
    c.add_argument("--data", type=Path)
    c.add_argument("--schemes", type=_words, dest="converge.schemes")
    c.add_argument("--s-min", type=int, dest="converge.s_min")
    c.add_argument("--s-max", type=int, dest="converge.s_max")

    s = sub.add_parser("stability", help="Lipschitz estimates, step bounds and perturbation runs")
    common(s)
    s.add_argument("--bundle", type=Path)
    s.add_argument("--data", type=Path)
    s.add_argument("--ks", type=_floats, dest="stability.ks")
    s.add_argument("--dt", type=float, dest="stability.dt", help="step of the perturbation runs")
    s.add_argument("--delta-range", type=_floats, dest="stability.delta_range")
    s.add_argument("--samples", type=int, dest="stability.samples")
    s.add_argument("--pairs", type=int, dest="stability.pairs")

    m = sub.add_parser("manifold", help="fit autoencoders to a sampled static manifold")
    common(m)
    m.add_argument("--kind", dest="manifold.kind")
    m.add_argument("--count", type=int, dest="manifold.count")
    m.add_argument("--epochs", type=int, dest="manifold.epochs")
    m.add_argument("--width", type=int, dest="manifold.width")
    return p


# configuration

def load_config_file(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".json":
        doc = json.loads(text)
        return doc.get("config", doc)
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"invalid TOML in {path}: {exc}") from exc


def resolve_config(args, environ=None):
    """Merge preset, config file, ``DRE_SEED`` and flags into one dict."""
    from .experiments import merge, resolve

    environ = os.environ if environ is None else environ
    file_cfg = load_config_file(args.config) if args.config else {}
    preset = args.preset or file_cfg.get("preset")
    paper = args.paper_scale if args.paper_scale is not None else bool(file_cfg.get("paper_scale", False))
    cfg = resolve(preset, paper) if preset else {}
    cfg = merge(cfg, {k: v for k, v in file_cfg.items() if k not in ("preset", "paper_scale")})
    cfg["preset"], cfg["paper_scale"] = preset, paper
    cfg.setdefault("seed", 0)
    if environ.get("DRE_SEED"):
        cfg["seed"] = int(environ["DRE_SEED"])
    if args.seed is not None:
        cfg["seed"] = args.seed
    for key, value in vars(args).items():
        if "." in key and value is not None:
            section, name = key.split(".", 1)
            cfg.setdefault(section, {})[name] = value
    paths = cfg.setdefault("paths", {})
    for key in ("data", "bundle", "out"):
        value = getattr(args, key, None)
        if value is not None:
            paths[key] = [str(v) for v in value] if isinstance(value, list) else str(value)
    return cfg


def _versions():
    import numpy

    try:
        from importlib.metadata import version

        pkg = version("artifact")
    except Exception:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": numpy.__version__, "package": pkg}


def prepare_out(cfg, force):
    out = cfg.get("paths", {}).get("out")
    if not out:
        raise UsageError("an output directory is required (--out)")
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run(out, command, cfg):
    doc = {"command": command, "config": cfg, "seed": cfg.get("seed"), "versions": _versions()}
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _need(cfg, key):
    value = cfg.get("paths", {}).get(key)
    if not value:
        raise UsageError(f"--{key} is required")
    return value


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default))


def _json_default(obj):
    import numpy as np

    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _csv(path, header, rows):
    import numpy as np

    np.savetxt(path, np.asarray(rows, dtype=float), fmt="%.17g", delimiter=",",
               header=",".join(header), comments="")


# subcommands

def cmd_generate(cfg, out):
    from .experiments import make_dataset
    from .training import save_dataset

    gen = cfg.get("generate", {})
    for key in ("problem", "samples", "ntime"):
        if gen.get(key) is None:
            raise UsageError(f"generate needs --{key}")
    ds = make_dataset(gen, cfg["seed"])
    save_dataset(ds, out)
    log.info("wrote %d trajectories of %d snapshots to %s", ds.n_samples, len(ds.t), out)


def cmd_train(cfg, out):
    from .experiments import train
    from .reduction import save_bundle
    from .training import load_dataset, write_log

    ds = load_dataset(_need(cfg, "data"))
    res = train(ds, cfg.get("train", {}), cfg["seed"])
    save_bundle(res.model, out)
    for phase, rows in res.logs.items():
        write_log(rows, out / f"train_log_{phase}.csv")
    _write_json(out / "train_summary.json", {
        "best_epoch": res.best_epoch,
        "final": {phase: rows[-1] for phase, rows in res.logs.items()},
        "strategy": res.model.meta.get("strategy"),
    })


def cmd_evaluate(cfg, out):
    from .experiments import evaluate
    from .reduction import load_bundle
    from .training import load_dataset

    model = load_bundle(_need(cfg, "bundle"))
    ds = load_dataset(_need(cfg, "data"))
    if model.problem and model.problem != ds.problem:
        raise UsageError(f"bundle was trained on {model.problem!r} but the dataset holds {ds.problem!r}")
    ev = cfg.get("evaluate", {})
    res = evaluate(model, ds, ev, ev.get("split", "test"))
    _csv(out / "errors.csv", ["t", "e_ave_rel", "e_ave_con"], list(zip(res["t"], res["e_rel"], res["e_con"])))
    N = res["reference"].shape[-1]
    header = ["sample", "t"] + [f"ref_{k + 1}" for k in range(N)] + [f"rec_{k + 1}" for k in range(N)]
    rows = [[i, t, *res["reference"][i, j], *res["reconstruction"][i, j]]
            for i in range(len(res["mu"])) for j, t in enumerate(res["t"])]
    _csv(out / "trajectories.csv", header, rows)
    _write_json(out / "summary.json", {
        "e_multi": res["e_multi"], "e_multi_train_window": res["e_multi_train_window"],
        "max_e_ave_rel": float(res["e_rel"].max()), "max_abs_e_ave_con": float(abs(res["e_con"]).max()),
        "max_abs_final": res["max_abs_final"], "n_samples": len(res["mu"]),
    })


def cmd_converge(cfg, out):
    from .experiments import converge
    from .reduction import load_bundle
    from .training import load_dataset

    ds = load_dataset(_need(cfg, "data"))
    bundles = _need(cfg, "bundle")
    bundles = bundles if isinstance(bundles, list) else [bundles]
    rows, summary = [], {}
    for path in bundles:
        model = load_bundle(path)
        strategy = model.meta.get("strategy", Path(path).stem)
        try:
            res = converge(model, ds, cfg.get("converge", {}), strategy)
        except Exception as exc:  # a broken bundle must not stop the other rows
            log.error("sweep for %s failed: %s", path, exc)
            summary[strategy] = {"error": str(exc)}
            continue
        rows += res.rows
        summary[strategy] = {"slopes": res.slopes, "fit_ranges": res.fit_ranges}
    with open(out / "sweep.csv", "w") as fh:
        fh.write("dt,scheme,strategy,e_multi,stable\n")
        for r in sorted(rows, key=lambda r: (r.strategy, r.scheme, -r.dt)):
            fh.write(f"{r.dt:.17g},{r.scheme},{r.strategy},{r.e_multi:.17g},{int(r.stable)}\n")
    _write_json(out / "summary.json", summary)


def cmd_stability(cfg, out):
    from .experiments import dissipativity_check, scaling_check
    from .reduction import load_bundle
    from .training import load_dataset

    model = load_bundle(_need(cfg, "bundle"))
    ds = load_dataset(_need(cfg, "data"))
    st = cfg.get("stability", {})
    report = dissipativity_check(model, ds, st, seed=cfg["seed"])
    gap = report.pop("gap", None)
    if gap is not None:
        _csv(out / "gap.csv", ["step"] + [f"sample_{i}" for i in range(gap.shape[1])],
             [[k, *row] for k, row in enumerate(gap)])
    summary = {"dissipativity": report}
    if st.get("dt"):
        runs = scaling_check(model, ds, st, seed=cfg["seed"])
        summary["lyapunov"] = []
        for i, run in enumerate(runs):
            entry = {"mu": run["mu"], "constants": run["constants"].as_dict(),
                     "provenance": run["constants"].provenance, "ks": {}}
            for ks, r in run["runs"].items():
                rep = r["perturbed"].report
                _csv(out / f"bound_sample{i}_ks{ks:g}.csv", ["t", "error", "bound"], rep.rows())
                entry["ks"][f"{ks:g}"] = {
                    "inputs": rep.inputs, "max_error": float(r["perturbed"].error.max()),
                    "diverged_step": r["perturbed"].diverged_step,
                }
            summary["lyapunov"].append(entry)
    _write_json(out / "stability.json", summary)


def cmd_manifold(cfg, out):
    from .experiments import manifold_study
    from .training import write_log

    res = manifold_study(cfg.get("manifold", {}), cfg["seed"])
    summary = {}
    for label in ("linear-encoder", "nonlinear-encoder"):
        r = res[label]
        write_log(r["log"], out / f"train_log_{label}.csv")
        summary[label] = {"test_mse": r["test_mse"], "test_max_err": r["test_max_err"]}
    _csv(out / "points.csv", ["x", "y", "z"], res["points"])
    _write_json(out / "manifold.json", summary)


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
    "converge": cmd_converge, "stability": cmd_stability, "manifold": cmd_manifold,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads:
        # must happen before numpy loads its BLAS
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    from .errors import DreError

    try:
        cfg = resolve_config(args)
        if args.command == "generate" and not cfg.get("generate", {}).get("problem"):
            parser.error("generate needs --problem (or a preset/config that sets it)")
        out = prepare_out(cfg, args.force)
        COMMANDS[args.command](cfg, out)
        write_run(out, args.command, cfg)
    except (UsageError, DreError, KeyError, ValueError, OSError) as exc:
        print(f"dre {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
