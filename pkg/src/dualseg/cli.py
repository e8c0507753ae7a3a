"""Command line: gen-data, train, eval, infer, ablate, grad-check.

Every command reads one experiment document (YAML) layered as
profile defaults <- ``--config`` file <- ``--set key=value`` overrides, and
writes everything it produces under one output directory together with the
resolved config and a ``manifest.json`` of file hashes.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pydantic
import yaml

from . import __version__
from .backbone import BayesianConfig, NetworkSpec
from .core import DatasetSplit, Volume, load_container, save_container
from .heads import HeadSpec
from .losses import COMPONENTS, gradient_check, sign_flipped
from .metrics import EvalResult, paired_t_test, summarize
from .phantom import PhantomConfig, make_dataset
from .pipeline import Locator, locate, predict_volume, write_ppm
from .trainer import TrainConfig, TrainingDiverged, load_networks, train

log = logging.getLogger("dualseg")

SEED_ENV = "DUALSEG_SEED"
SPLITS = ("labeled", "unlabeled", "validation", "test")
ABLATION_SCHEMA = "# schema: dualseg-ablation/1"
# (intra, inter, LCont, NCont) switched on per ablation row
ABLATION_ROWS = {
    "sup": (False, False, False, False),
    "sup+intra": (True, False, False, False),
    "sup+inter": (False, True, False, False),
    "sup+intra+inter": (True, True, False, False),
    "+LCont": (True, True, True, False),
    "+NCont": (True, True, False, True),
    "all": (True, True, True, True),
}

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_EXISTS = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, category, message, code):
        super().__init__(message)
        self.category = category
        self.code = code


@dataclass
class ExperimentConfig:
    __pydantic_config__ = {"extra": "forbid"}

    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    locator: Locator = field(default_factory=Locator)
    n_labeled: int = 4
    n_unlabeled: int = 16
    n_validation: int = 2
    n_test: int = 4
    data_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    supervised_only: bool = False
    ablation_rows: tuple[str, ...] = tuple(ABLATION_ROWS)

    def __post_init__(self):
        if self.n_labeled < 1:
            raise ValueError("n_labeled must be >= 1")
        if min(self.n_unlabeled, self.n_validation, self.n_test) < 0:
            raise ValueError("volume counts must be >= 0")
        if not self.seeds:
            raise ValueError("need at least one seed")
        unknown = [r for r in self.ablation_rows if r not in ABLATION_ROWS]
        if unknown:
            raise ValueError(f"unknown ablation rows {unknown}; choose from {list(ABLATION_ROWS)}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


# --- profiles and config layering ------------------------------------------------

def _scaled_t_max(steps: int) -> int:
    # the ramp spans 40% of training at every scale (4000 of 10000 steps)
    return max(1, round(0.4 * steps))


def profile(name: str) -> dict:
    if name == "paper":
        return {"phantom": {"shape": [160, 160, 160]},
                "train": {"steps": 10000, "loss": {"t_max": 4000}, "val_every": 200, "log_every": 20},
                "n_labeled": 18, "n_unlabeled": 42, "n_validation": 4, "n_test": 10}
    if name == "desk":
        return {"phantom": {"shape": [64, 64, 64]},
                "train": {"steps": 2000, "loss": {"t_max": _scaled_t_max(2000)}, "val_every": 100,
                          "log_every": 10},
                "n_labeled": 4, "n_unlabeled": 16, "n_validation": 2, "n_test": 4}
    if name == "smoke":
        return {"phantom": {"shape": [64, 64, 64]},
                "train": {"steps": 20, "loss": {"t_max": _scaled_t_max(20)}, "val_every": 10, "log_every": 1,
                          "network": asdict(NetworkSpec.tiny()), "heads": asdict(HeadSpec.tiny()),
                          "bayes": asdict(BayesianConfig(passes=2))},
                "n_labeled": 2, "n_unlabeled": 2, "n_validation": 1, "n_test": 1, "seeds": [0]}
    raise CliError("config", f"unknown profile {name!r}; choose paper, desk or smoke", EXIT_CONFIG)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _set_path(doc: dict, dotted: str, value):
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise CliError("config", f"--set {dotted}: {k} is not a section", EXIT_CONFIG)
    cur[keys[-1]] = value


def build_experiment(profile_name="desk", config_path=None, overrides=(), env=None) -> ExperimentConfig:
    env = os.environ if env is None else env
    doc = json.loads(json.dumps(asdict(ExperimentConfig())))
    doc = _merge(doc, profile(profile_name))
    if config_path is not None:
        text = Path(config_path).read_text()
        user = yaml.safe_load(text) or {}
        if not isinstance(user, dict):
            raise CliError("config", f"{config_path}: top level must be a mapping", EXIT_CONFIG)
        doc = _merge(doc, user)
    for item in overrides:
        if "=" not in item:
            raise CliError("config", f"--set expects key=value, got {item!r}", EXIT_CONFIG)
        key, raw = item.split("=", 1)
        _set_path(doc, key.strip(), yaml.safe_load(raw))
    if env.get(SEED_ENV):
        try:
            s = int(env[SEED_ENV])
        except ValueError:
            raise CliError("config", f"{SEED_ENV} must be an integer", EXIT_CONFIG) from None
        doc["data_seed"] = s
        doc["seeds"] = [s]
    return pydantic.TypeAdapter(ExperimentConfig).validate_python(doc)


def run_config(exp: ExperimentConfig, seed: int, toggles=None) -> TrainConfig:
    """TrainConfig for one repetition; seed offsets keep rows paired across toggles."""
    t = exp.train
    loss = t.loss
    if exp.supervised_only:
        toggles = (False, False, False, False)
    if toggles is not None:
        intra, inter, lcont, ncont = toggles
        loss = dataclasses.replace(loss, enable_intra=intra, enable_inter=inter,
                                   enable_lcont=lcont, enable_ncont=ncont)
    return dataclasses.replace(t, loss=loss, seed_net1=t.seed_net1 + 100 * seed,
                               seed_net2=t.seed_net2 + 100 * seed, seed_data=t.seed_data + 100 * seed)


# --- files ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, exp: ExperimentConfig | None = None) -> dict:
    out_dir = Path(out_dir)
    files = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(out_dir).as_posix()] = _sha256(p)
    digest = hashlib.sha256("".join(f"{k} {v}\n" for k, v in files.items()).encode()).hexdigest()
    manifest = {"command": command, "version": __version__, "files": files, "manifest_hash": digest}
    if exp is not None:
        manifest["config_hash"] = hashlib.sha256(
            json.dumps(exp.to_dict(), sort_keys=True).encode()).hexdigest()
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def prepare_out_dir(path, force: bool, allow_existing: bool = False) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not (force or allow_existing):
        raise CliError("output_exists", f"{path} is not empty (use --force)", EXIT_EXISTS)
    path.mkdir(parents=True, exist_ok=True)
    return path


def save_experiment(exp: ExperimentConfig, out_dir, source=None):
    out_dir = Path(out_dir)
    (out_dir / "experiment.yaml").write_text(yaml.safe_dump(exp.to_dict(), sort_keys=False))
    if source is not None:
        (out_dir / "config_source.yaml").write_text(Path(source).read_text())


def save_dataset(ds: DatasetSplit, out_dir):
    out_dir = Path(out_dir)
    groups = {"labeled": ds.labeled, "validation": ds.validation, "test": ds.test,
              "unlabeled": [(v, None, c) for v, c in zip(ds.unlabeled, ds.unlabeled_centers)]}
    for split in SPLITS:
        for i, (vol, msk, c) in enumerate(groups[split]):
            save_container(out_dir / split / f"{i:03d}", vol, msk, seed=ds.seeds[split][i],
                           extra={"center": list(c), "split": split})


def load_dataset(data_dir) -> DatasetSplit:
    data_dir = Path(data_dir)
    if not (data_dir / "labeled").is_dir():
        raise CliError("data", f"{data_dir} has no labeled/ split (run gen-data first)", EXIT_DATA)
    items = {}
    for split in SPLITS:
        items[split] = []
        d = data_dir / split
        for sub in sorted(d.iterdir()) if d.is_dir() else []:
            vol, msk, meta = load_container(sub)
            items[split].append((sub.name, vol, msk, tuple(meta["center"]), meta.get("seed")))
    trip = lambda k: [(v, m, c) for _, v, m, c, _ in items[k]]  # noqa: E731
    return DatasetSplit(labeled=trip("labeled"), unlabeled=[v for _, v, _, _, _ in items["unlabeled"]],
                        validation=trip("validation"), test=trip("test"),
                        unlabeled_centers=[c for _, _, _, c, _ in items["unlabeled"]],
                        seeds={k: [s for *_, s in items[k]] for k in SPLITS})


def _split_names(data_dir, split):
    d = Path(data_dir) / split
    return sorted(p.name for p in d.iterdir()) if d.is_dir() else []


# --- evaluation helpers ---------------------------------------------------------------

def evaluate_networks(net1, net2, volumes, names, locator: Locator, seed: int, method="proposed",
                      n_labeled=0, n_unlabeled=0, keep_predictions=False):
    rng = np.random.Generator(np.random.PCG64(seed))
    res = EvalResult(method=method, n_labeled=n_labeled, n_unlabeled=n_unlabeled)
    preds = []
    for name, (vol, msk, c) in zip(names, volumes):
        centre = locate(locator, vol, c, rng)
        _, pred = predict_volume(net1, net2, vol, centre)
        res.add(name, pred.data, msk.data)
        if keep_predictions:
            preds.append(pred)
    return (res, preds) if keep_predictions else res


def _dataset_counts(data_dir):
    return len(_split_names(data_dir, "labeled")), len(_split_names(data_dir, "unlabeled"))


# --- commands ------------------------------------------------------------------------

def cmd_gen_data(args, exp):
    out = prepare_out_dir(args.out, args.force)
    ds = make_dataset(exp.phantom, exp.n_labeled, exp.n_unlabeled, exp.n_validation, exp.n_test,
                      seed=exp.data_seed)
    save_dataset(ds, out)
    save_experiment(exp, out, args.config)
    m = write_manifest(out, "gen-data", exp)
    print(json.dumps({"out": str(out), "manifest_hash": m["manifest_hash"],
                      "counts": {k: len(ds.seeds[k]) for k in SPLITS}}))
    return EXIT_OK


def cmd_train(args, exp):
    from . import plotting
    ds = load_dataset(args.data)
    out = prepare_out_dir(args.out, args.force, allow_existing=args.resume)
    seed = exp.seeds[0] if args.seed is None else args.seed
    cfg = run_config(exp, seed)
    state = train(cfg, ds, out, resume=args.resume)
    plotting.loss_curves(state.history, out / "loss_curves.png")
    plotting.distance_curve(state.history, out / "param_distance.png")
    save_experiment(exp, out, args.config)
    write_manifest(out, "train", exp)
    best = state.best.get("dice") if state.best else None
    print(json.dumps({"out": str(out), "step": state.step, "best_val_dsc": best,
                      "stopped_early": state.stopped_early}))
    return EXIT_OK


def _eval_checkpoint(ckpt, data_dir, split, exp, best, method):
    net1, net2 = load_networks(ckpt, best=best)
    ds = load_dataset(data_dir)
    vols = {"test": ds.test, "validation": ds.validation, "labeled": ds.labeled}[split]
    n_l, n_u = _dataset_counts(data_dir)
    return evaluate_networks(net1, net2, vols, _split_names(data_dir, split), exp.locator,
                             exp.data_seed, method, n_l, n_u, keep_predictions=True)


def cmd_eval(args, exp):
    from . import plotting
    out = prepare_out_dir(args.out, args.force) if args.out else None
    names = _split_names(args.data, args.split)
    if not names:
        raise CliError("data", f"split {args.split!r} in {args.data} is empty", EXIT_DATA)
    if args.predictions:
        res = EvalResult(method=args.method)
        preds = []
        for name in names:
            vol, truth, _ = load_container(Path(args.data) / args.split / name)
            _, pred, _ = load_container(Path(args.predictions) / name)
            if pred is None or truth is None:
                raise CliError("data", f"{name}: missing mask", EXIT_DATA)
            res.add(name, pred.data, truth.data)
            preds.append(pred)
    elif args.checkpoint:
        res, preds = _eval_checkpoint(args.checkpoint, args.data, args.split, exp, args.best, args.method)
    else:
        raise CliError("usage", "eval needs --checkpoint or --predictions", EXIT_CONFIG)
    text = res.to_csv()
    sys.stdout.write(text)
    report = {}
    if args.compare:
        other, _ = _eval_checkpoint(args.compare, args.data, args.split, exp, args.best, "compare")
        tt = paired_t_test(res.dsc, other.dsc)
        report = {"t": tt.t, "p_one_tailed": tt.p, "degenerate": tt.degenerate,
                  "hypothesis": f"mean DSC {res.method} > compare"}
        summary = summarize({res.method: res, "compare": other})
        sys.stdout.write(summary)
        print(f"# paired t-test (one-tailed): t={tt.t:.6f} p={tt.p:.6g} degenerate={int(tt.degenerate)}")
    if out is not None:
        (out / "eval.csv").write_text(text)
        if report:
            (out / "compare.csv").write_text(summary)
            (out / "ttest.json").write_text(json.dumps(report, indent=2))
        for name, pred in zip(names, preds):
            vol, truth, _ = load_container(Path(args.data) / args.split / name)
            plotting.slice_overlay(vol, out / "figures" / f"{name}.png", truth=truth, pred=pred)
        save_experiment(exp, out, args.config)
        write_manifest(out, "eval", exp)
    return EXIT_OK


def cmd_infer(args, exp):
    from . import plotting
    out = prepare_out_dir(args.out, args.force)
    vol, truth, meta = load_container(args.input)
    if vol is None:
        raise CliError("data", f"{args.input} holds no volume", EXIT_DATA)
    net1, net2 = load_networks(args.checkpoint, best=args.best)
    if args.center:
        centre = tuple(int(v) for v in args.center.split(","))
    elif exp.locator.kind == "oracle" and meta.get("center") is not None:
        rng = np.random.Generator(np.random.PCG64(exp.data_seed))
        centre = locate(exp.locator, vol, meta["center"], rng)
    else:
        centre = locate(Locator(kind="centroid"), vol)
    prob, mask = predict_volume(net1, net2, vol, centre)
    save_container(out / "prediction", Volume(prob.data, spacing=vol.spacing), mask,
                   extra={"center": list(centre), "source": str(args.input)})
    if args.render:
        write_ppm(out / "slice.ppm", vol, mask)
        plotting.slice_overlay(vol, out / "slice.png", truth=truth, pred=mask)
    save_experiment(exp, out, args.config)
    write_manifest(out, "infer", exp)
    print(json.dumps({"out": str(out), "center": list(centre), "foreground_voxels": int(mask.data.sum())}))
    return EXIT_OK


def cmd_ablate(args, exp):
    from . import plotting
    ds = load_dataset(args.data)
    out = prepare_out_dir(args.out, args.force)
    rows = args.rows.split(",") if args.rows else list(exp.ablation_rows)
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise CliError("config", f"unknown ablation rows {unknown}", EXIT_CONFIG)
    names = _split_names(args.data, "test")
    if not names:
        raise CliError("data", "ablation needs a non-empty test split", EXIT_DATA)
    table = []
    for row in rows:
        per_seed = []
        for seed in exp.seeds:
            run_dir = out / "runs" / row / f"seed{seed}"
            state = train(run_config(exp, seed, ABLATION_ROWS[row]), ds, run_dir)
            res = evaluate_networks(state.net1, state.net2, ds.test, names, exp.locator, exp.data_seed,
                                    row, ds.n_labeled, ds.n_unlabeled)
            (run_dir / "eval.csv").write_text(res.to_csv())
            per_seed.append(res)
            log.info("%s seed %d: DSC %.4f", row, seed, res.dsc_mean)
        dsc = np.array([r.dsc_mean for r in per_seed])
        hd = np.array([r.hd95_mean for r in per_seed])
        table.append({"name": row, **dict(zip(("intra", "inter", "LCont", "NCont"), ABLATION_ROWS[row])),
                      "n_seeds": len(per_seed), "dsc_mean": float(dsc.mean()), "dsc_std": float(dsc.std()),
                      "hd95_mean": float(hd.mean()), "hd95_std": float(hd.std()),
                      "seed_dsc": ";".join(f"{v:.6f}" for v in dsc)})
    text = ablation_csv(table)
    (out / "ablation.csv").write_text(text)
    sys.stdout.write(text)
    plotting.ablation_bars(table, out / "ablation.png")
    save_experiment(exp, out, args.config)
    write_manifest(out, "ablate", exp)
    return EXIT_OK


def ablation_csv(table) -> str:
    cols = ("name", "intra", "inter", "LCont", "NCont", "n_seeds", "dsc_mean", "dsc_std",
            "hd95_mean", "hd95_std", "seed_dsc")
    buf = io.StringIO()
    buf.write(ABLATION_SCHEMA + " mean/std over seeds of per-seed test means (population std)\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in table:
        w.writerow([int(r[c]) if isinstance(r[c], bool) else
                    (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]) for c in cols])
    return buf.getvalue()


def cmd_grad_check(args, exp=None):
    comps = args.component or list(COMPONENTS)
    failed = []
    lines = [f"{'component':<8} {'max_rel_error':>14}  {'worst_index':<16} {'analytic':>14} {'numeric':>14}  status"]
    for c in comps:
        if c not in COMPONENTS:
            raise CliError("usage", f"unknown component {c!r}; choose from {COMPONENTS}", EXIT_CONFIG)
        fault = sign_flipped(c) if c in (args.inject_fault or []) else None
        r = gradient_check(c, input_size=args.size, eps=args.eps, seed=args.seed, tolerance=args.tol,
                           analytic=fault)
        status = "PASS" if r.passed else "FAIL"
        if not r.passed:
            failed.append({"component": c, "max_rel_error": r.max_rel_error,
                           "worst_index": list(r.worst_index)})
        lines.append(f"{c:<8} {r.max_rel_error:>14.3e}  {str(r.worst_index):<16} {r.analytic:>14.6e} "
                     f"{r.numeric:>14.6e}  {status}")
    print("\n".join(lines))
    if failed:
        raise CliError("gradient_check_failed", json.dumps(failed), EXIT_CHECK_FAILED)
    return EXIT_OK


# --- argument parsing --------------------------------------------------------------------

def _add_config_args(p):
    p.add_argument("--profile", default="desk", help="paper | desk | smoke (default: desk)")
    p.add_argument("--config", help="YAML experiment document layered over the profile")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one dotted key, e.g. train.steps=500 (repeatable)")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")


def build_parser():
    ap = argparse.ArgumentParser(prog="dualseg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the two segmenters")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue the bundle in --out")
    p.add_argument("--seed", type=int, help="repetition seed (default: first of config seeds)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint (or saved masks) on a split")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="directory of mask containers named like the split entries")
    p.add_argument("--compare", help="second checkpoint for a paired one-tailed t-test on DSC")
    p.add_argument("--split", default="test", choices=("test", "validation", "labeled"))
    p.add_argument("--best", action="store_true", help="use the best-validation networks")
    p.add_argument("--method", default="proposed")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one volume container")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--center", help="x,y,z instrument center (skips the locator)")
    p.add_argument("--best", action="store_true")
    p.add_argument("--render", action="store_true", help="write slice.ppm and slice.png")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train and score one row per loss-term combination")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rows", help=f"comma list from {','.join(ABLATION_ROWS)}")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of the loss gradients")
    p.add_argument("--component", action="append", help="repeatable; default: all")
    p.add_argument("--size", type=int, default=4)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="append", metavar="COMPONENT",
                   help="negate the closed-form gradient of COMPONENT (self-test)")
    p.set_defaults(func=cmd_grad_check)
    return ap


def _fail(category, message, code):
    sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        exp = None
        if args.command != "grad-check":
            exp = build_experiment(args.profile, args.config, args.overrides)
        return args.func(args, exp)
    except CliError as exc:
        return _fail(exc.category, str(exc), exc.code)
    except pydantic.ValidationError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except TrainingDiverged as exc:
        return _fail("diverged", f"{exc} {json.dumps(exc.dump, default=str)}", EXIT_DIVERGED)
    except (FileNotFoundError, NotADirectoryError, KeyError) as exc:
        return _fail("data", f"{type(exc).__name__}: {exc}", EXIT_DATA)
    except ValueError as exc:
        return _fail("invalid", str(exc), EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
