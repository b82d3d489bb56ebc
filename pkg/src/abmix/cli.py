"""Command-line front end.

    abmix [--threads N] <command> [options]

Commands: simulate, train, sbc, fit, classify, diagnose.  Settings come from
built-in defaults, then an optional JSON file (``--config``), then dotted
``--set key=value`` overrides and explicit flags, later sources winning.
Exit status is 0 on success, 1 on usage or input errors and 2 when
``--strict`` is given and a diagnostic raises a flag.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import diagnostics as dg
from .simulators import (Dataset, dataset_from_csv, dataset_from_json, dataset_rng, dataset_to_csv,
                         dataset_to_json, make_model)
from .train import AmortizedModel, TrainConfig, train_joint

log = logging.getLogger("abmix")

DEFAULTS = {
    "model": "gmm",
    "seed": 0,
    "train": {"epochs": 10, "iterations_per_epoch": 1000, "batch_size": 64, "lr": 5e-4, "lr_min": 0.0,
              "clip_norm": 10.0, "n_standardize": 1000, "max_skip_fraction": 0.01},
    "arch": {},
    "simulator": {},
    "simulate": {"n_datasets": 1, "N": None, "format": "json"},
    "sbc": {"R": 300, "S": 250},
    "fit": {"S": 1000},
    "classify": {"S": 200, "mode": None},
    "diagnose": {"S": 1000, "M": 200, "alpha": 0.01, "ppc_draws": 100},
}
# sections whose keys are checked later, by the model or network builders
OPEN_SECTIONS = ("arch", "simulator")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(base: dict, doc: dict, where: str = ""):
    for k, v in doc.items():
        path = f"{where}{k}"
        if where.rstrip(".") not in OPEN_SECTIONS and k not in base:
            raise UsageError(f"unknown config key {path!r}")
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v, path + ".")
        else:
            base[k] = v


def apply_set(cfg: dict, item: str):
    if "=" not in item:
        raise UsageError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    doc: dict = {}
    cur = doc
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = _parse_value(raw)
    _merge(cfg, doc)


def resolve_config(path=None, sets=(), flags: dict | None = None) -> dict:
    """defaults < config file < --set overrides < explicit flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        _merge(cfg, doc)
    for item in sets:
        apply_set(cfg, item)
    for k, v in (flags or {}).items():
        if v is not None:
            _merge(cfg, {k: v})
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def provenance(cfg: dict, command: str) -> dict:
    return {"tool": "abmix", "version": __version__, "command": command, "seed": cfg["seed"],
            "config_hash": config_hash(cfg)}


def header_lines(prov: dict) -> list[str]:
    return [f"abmix {prov['version']} command={prov['command']} seed={prov['seed']} "
            f"config_hash={prov['config_hash']}"]


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(model=cfg["model"], seed=int(cfg["seed"]), arch=dict(cfg["arch"]),
                       model_overrides=dict(cfg["simulator"]), **cfg["train"])


# --------------------------------------------------------------------------
# helpers


def _load_data(path, model_name: str) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"data file {path} not found")
    d = dataset_from_json(path) if path.suffix == ".json" else dataset_from_csv(path, model_name)
    if d.model != model_name:
        raise UsageError(f"data file is for model {d.model!r} but the checkpoint is for {model_name!r}")
    return d


def _load_checkpoint(path) -> AmortizedModel:
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    return AmortizedModel.load(path)


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(type(v))


def _outdir(p) -> Path:
    p = Path(p)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _posterior_summary_csv(draws, path, lines):
    x = draws.constrained
    names = list(draws.names)[: x.shape[1]]
    q = np.quantile(x, [0.025, 0.5, 0.975], axis=0)
    with open(path, "w", newline="") as fh:
        for line in lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["parameter", "mean", "sd", "quantile_0.025", "median", "quantile_0.975"])
        for k, n in enumerate(names):
            w.writerow([n] + [format(v, ".8g") for v in (x[:, k].mean(), x[:, k].std(), q[0, k], q[1, k], q[2, k])])


def _draws_csv(draws, model, path, lines):
    with open(path, "w", newline="") as fh:
        for line in lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        shown = list(draws.names)[: draws.constrained.shape[1]]
        w.writerow(["draw"] + [f"u_{k + 1}" for k in range(model.D)] + shown + ["log_q"])
        for s in range(draws.S):
            w.writerow([s + 1] + [format(v, ".17g") for v in draws.unconstrained[s]]
                       + [format(v, ".17g") for v in draws.constrained[s]] + [format(draws.log_q[s], ".17g")])


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg) -> int:
    model = make_model(cfg["model"], **cfg["simulator"])
    out = _outdir(args.out)
    prov = provenance(cfg, "simulate")
    sc = cfg["simulate"]
    fmt = sc["format"]
    if fmt not in ("json", "csv"):
        raise UsageError(f"simulate.format must be json or csv, got {fmt!r}")
    for i in range(int(sc["n_datasets"])):
        d = model.simulate(dataset_rng(int(cfg["seed"]), i), N=sc["N"])
        name = out / f"dataset_{i + 1:04d}.{fmt}"
        if fmt == "json":
            dataset_to_json(d, name, prov)
        else:
            dataset_to_csv(d, name, header_lines(prov))
    print(f"wrote {sc['n_datasets']} dataset(s) to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    tc = train_config(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    am = train_joint(tc)
    am.save(out)
    prov = provenance(cfg, "train")
    trace = out.with_suffix(out.suffix + ".trace.csv")
    am.write_trace(trace, header_lines(prov))
    if args.figures:
        from . import plotting
        plotting.loss_trace(am.trace, out.with_suffix(out.suffix + ".trace.png"))
    print(f"checkpoint {out} ({len(am.trace)} steps, {am.skipped} skipped)")
    return 0


def cmd_sbc(args, cfg) -> int:
    am = _load_checkpoint(args.checkpoint)
    out = _outdir(args.out)
    prov = provenance(cfg, "sbc")
    seed = int(cfg["seed"])
    R, S = int(cfg["sbc"]["R"]), int(cfg["sbc"]["S"])
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    rep, raw = dg.sbc_run(am.model, dg.amortized_approximator(am, seed), R, S, rng)
    rep.provenance = prov
    lines = header_lines(prov)
    rep.write(out, lines)
    prior_var = dg.sbc_view(am.model, am.model.sample_prior(np.random.default_rng(seed), 20000)).var(0)
    rec = dg.recovery_stats(raw["truths"], raw["draws"], prior_var, rep.names)
    rec.to_csv(out / "recovery.csv", lines)
    if args.figures:
        from . import plotting
        plotting.sbc_curves(rep, out / "sbc_curves.png")
        plotting.recovery_scatter(rec, out / "recovery.png")
    for n, ok in zip(rep.names, rep.inside):
        print(f"{n}: {'inside' if ok else 'OUTSIDE'} band")
    return 2 if args.strict and not rep.passed else 0


def cmd_fit(args, cfg) -> int:
    am = _load_checkpoint(args.checkpoint)
    d = _load_data(args.data, am.model.name)
    out = _outdir(args.out)
    lines = header_lines(provenance(cfg, "fit"))
    draws = am.sample_posterior(d, int(cfg["fit"]["S"]), seed=int(cfg["seed"]))
    _draws_csv(draws, am.model, out / "draws.csv", lines)
    _posterior_summary_csv(draws, out / "summary.csv", lines)
    if args.figures:
        from . import plotting
        plotting.posterior_pairs(draws, out / "pairs.png")
    print(f"{draws.S} draws written to {out / 'draws.csv'}")
    return 0


def cmd_classify(args, cfg) -> int:
    am = _load_checkpoint(args.checkpoint)
    d = _load_data(args.data, am.model.name)
    mode = args.mode or cfg["classify"]["mode"]
    modes = am.nets.modes()
    if mode is not None and mode not in modes:
        raise UsageError(f"mode {mode!r} is not supported for model {am.model.name!r}; use one of {modes}")
    out = _outdir(args.out)
    lines = header_lines(provenance(cfg, "classify"))
    draws = am.sample_posterior(d, int(cfg["classify"]["S"]), seed=int(cfg["seed"]))
    cp = am.classify(d, draws, mode)
    cp.to_csv(out / "class_probs.csv", lines)
    if args.figures:
        from . import plotting
        plotting.class_bands(cp, out / "class_probs.png")
    print(f"{cp.mode} probabilities for {d.N} units written to {out / 'class_probs.csv'}")
    return 0


def cmd_diagnose(args, cfg) -> int:
    am = _load_checkpoint(args.checkpoint)
    model = am.model
    d = _load_data(args.data, model.name)
    out = _outdir(args.out)
    prov = provenance(cfg, "diagnose")
    lines = header_lines(prov)
    dc = cfg["diagnose"]
    seed = int(cfg["seed"])
    # null summaries from prior-predictive data with the observed design
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(12,)))
    null_sets = [model.simulate_from(t, rng, N=d.N, P=d.P) for t in model.sample_prior(rng, int(dc["M"]))]
    null = np.concatenate([am.nets.encode(None, model.batch_of(null_sets[i:i + 64])).glob.data
                           for i in range(0, len(null_sets), 64)])
    obs = am.nets.encode(None, am.batch(d)).glob.data[0]
    mis = dg.mmd_test(obs, null, rng=rng)
    draws = am.sample_posterior(d, int(dc["S"]), seed=seed)
    ps = dg.psis_correct(draws, draws.log_q, dg.log_joint(model, d, draws.unconstrained))
    n_ppc = min(int(dc["ppc_draws"]), draws.S)
    ppc = dg.ppc_summary(draws.unconstrained[:n_ppc], model, d, rng)
    _write_json(out / "misspecification.json", {**mis.to_dict(), "provenance": prov})
    _write_json(out / "psis.json", {**ps.to_dict(list(draws.names)[: draws.constrained.shape[1]]),
                                    "provenance": prov})
    ppc.to_csv(out / "ppc.csv", lines)
    if args.figures:
        from . import plotting
        plotting.mmd_null(mis, out / "mmd_null.png")
    k = "unavailable" if ps.pareto_k is None else f"{ps.pareto_k:.2f}"
    print(f"MMD (statistic, p): {mis.table_row()}")
    print(f"Pareto k-hat: {k}{'  (above 0.7)' if ps.flagged else ''}")
    flagged = ps.flagged or mis.p_value < float(dc["alpha"])
    return 2 if args.strict and flagged else 0


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "sbc": cmd_sbc, "fit": cmd_fit,
            "classify": cmd_classify, "diagnose": cmd_diagnose}


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="abmix", description="Amortized inference for mixture models.")
    p.add_argument("--version", action="version", version=f"abmix {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap on numeric worker threads (env ABMIX_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp, model=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
        sp.add_argument("--seed", type=int)
        if model:
            sp.add_argument("--model", choices=["gmm", "hmm", "decision", "toy", "conjugate-toy"])
        sp.add_argument("--figures", action="store_true", help="also render PNG figures")

    sp = sub.add_parser("simulate", help="write simulated datasets")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("-n", "--n-datasets", type=int)

    sp = sub.add_parser("train", help="train networks and write a checkpoint")
    common(sp)
    sp.add_argument("--out", required=True, help="checkpoint path")

    for name, text in (("sbc", "simulation-based calibration"), ("fit", "posterior draws for a dataset"),
                       ("classify", "membership probabilities"), ("diagnose", "misspecification, PSIS, PPC")):
        sp = sub.add_parser(name, help=text)
        common(sp, model=False)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--out", required=True, help="output directory")
        if name != "sbc":
            sp.add_argument("--data", required=True)
        if name == "classify":
            sp.add_argument("--mode")
        if name in ("sbc", "diagnose"):
            sp.add_argument("--strict", action="store_true", help="exit 2 when a diagnostic flags a problem")
    return p


def _threads(arg) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get("ABMIX_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"ABMIX_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        flags = {"seed": args.seed, "model": getattr(args, "model", None)}
        if getattr(args, "n_datasets", None) is not None:
            flags["simulate"] = {"n_datasets": args.n_datasets}
        cfg = resolve_config(args.config, args.set, flags)
        if args.command in ("sbc", "fit", "classify", "diagnose"):
            # the checkpoint decides the model
            cfg["model"] = json.loads(Path(args.checkpoint + ".json").read_text())["model"] \
                if Path(args.checkpoint + ".json").exists() else cfg["model"]
        n = _threads(args.threads)
        if n is not None and n < 1:
            raise UsageError("--threads must be at least 1")
        with threadpool_limits(limits=n):
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"abmix: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"abmix: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
