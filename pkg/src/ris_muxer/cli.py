"""``ris-muxer`` command line entry point.

Each subcommand loads the run config, does its work, and writes a manifest
(config hash, seeds, library versions, input digests, wall time) next to its
outputs so the run can be repeated exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import re
import sys
import time
from contextlib import nullcontext
from importlib import metadata
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .channel import load_dataset, save_dataset, synthesize_dataset
from .config import RunConfig, config_from_mapping, parse_config
from .fcn import init_model, load_model, save_model
from .precoding import LinkBudget
from .seeding import derive_seed
from .training import train_discrete, train_two_phase

log = logging.getLogger("ris_muxer")

PROG = "ris-muxer"


class CliError(RuntimeError):
    pass


# -- helpers ----------------------------------------------------------------

def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "pydantic", "pyyaml", "threadpoolctl", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


_PI_TERM = re.compile(r"^([+-]?[0-9.]*(?:e[+-]?[0-9]+)?)\*?pi(?:/([0-9.]+))?$")


def _parse_floats(text: str) -> tuple[float, ...]:
    """Comma separated numbers; ``pi``, ``-pi/2`` and ``0.5pi`` are accepted."""
    vals = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        try:
            m = _PI_TERM.match(tok)
            if m:
                coef = {"": 1.0, "+": 1.0, "-": -1.0}.get(m.group(1))
                coef = float(m.group(1)) if coef is None else coef
                vals.append(coef * np.pi / (float(m.group(2)) if m.group(2) else 1.0))
            else:
                vals.append(float(tok))
        except ValueError:
            raise CliError(f"cannot parse number list {text!r}") from None
    return tuple(vals)


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else config_from_mapping({})
    if args.seed is not None:
        cfg = config_from_mapping({**cfg.normalized(), "seed": args.seed})
    return cfg


class _Run:
    """Collects manifest data for one command invocation."""

    def __init__(self, args, cfg: RunConfig, out_dir: Path, stem: str):
        self.args, self.cfg = args, cfg
        self.out_dir, self.stem = out_dir, stem
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.seeds: dict[str, int] = {"run": int(cfg.seed)}
        self.t0 = time.perf_counter()
        out_dir.mkdir(parents=True, exist_ok=True)

    def input(self, path) -> Path:
        p = Path(path)
        self.inputs[str(p)] = _file_digest(p)
        return p

    def output(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)

    def finish(self) -> None:
        echo = self.out_dir / f"{self.stem}.config.yaml"
        echo.write_text(self.cfg.echo())
        manifest = {
            "command": self.args.command,
            "argv": sys.argv[1:] if self.args.argv is None else self.args.argv,
            "config_hash": self.cfg.digest(),
            "config_echo": str(echo),
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "versions": _versions(),
            "wall_time_s": time.perf_counter() - self.t0,
        }
        path = self.out_dir / f"{self.stem}.manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out if args.out else cfg.output_dir)


# -- commands ---------------------------------------------------------------

def cmd_gen_channels(args, cfg: RunConfig) -> None:
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "channels.jsonl"
    run = _Run(args, cfg, out.parent, out.name)
    seed = derive_seed(cfg.seed, "channels")
    run.seeds["channels"] = seed
    ds = synthesize_dataset(cfg.channels, seed)
    save_dataset(ds, run.output(out))
    run.finish()
    log.info("wrote %d samples to %s", len(ds), out)


def _train_paths(args, cfg):
    model_out = Path(args.out_model) if args.out_model else _out_dir(args, cfg) / "model.ckpt"
    return model_out, (Path(args.out) if args.out else model_out.parent)


def cmd_train(args, cfg: RunConfig, discrete: bool = False) -> None:
    channels = _existing(args.channels, "channels file")
    model_out, out_dir = _train_paths(args, cfg)
    run = _Run(args, cfg, out_dir, model_out.name)
    ds = load_dataset(run.input(channels))
    tcfg = cfg.train_config()
    updates = {}
    if discrete and args.codebook:
        updates["codebook"] = _parse_floats(args.codebook)
    if discrete and args.penalty_threshold is not None:
        updates["penalty_threshold"] = args.penalty_threshold
    if updates:
        tcfg = tcfg.model_validate({**tcfg.model_dump(), **updates})
    if args.init_model:
        model = load_model(run.input(_existing(args.init_model, "model file")))
    else:
        arch = cfg.model.arch(ds.users, ds.ris_shape)
        run.seeds["init"] = derive_seed(cfg.seed, "init")
        model = init_model(arch, run.seeds["init"], check_coverage=cfg.model.check_coverage)
    run.seeds["train"] = tcfg.seed
    if discrete:
        model, trace = train_discrete(model, ds, tcfg, pretrained=bool(args.init_model))
    else:
        model, trace = train_two_phase(model, ds, tcfg)
    save_model(model, run.output(model_out))
    if args.trace:
        trace.write_csv(run.output(args.trace))
    run.finish()


def _source(args, cfg: RunConfig, run: _Run, link: LinkBudget, weights):
    if args.model:
        return load_model(run.input(_existing(args.model, "model file")))
    run.seeds["baseline"] = derive_seed(cfg.seed, "baseline")
    if args.baseline == "random":
        return ev.RandomPhases(run.seeds["baseline"])
    return ev.AlternatingGradient(weights, link, cfg.eval.altgrad_steps, cfg.eval.altgrad_step_size,
                                  run.seeds["baseline"])


def _eval_setup(args, cfg: RunConfig, stem: str):
    channels = _existing(args.channels, "channels file")
    run = _Run(args, cfg, _out_dir(args, cfg), stem)
    ds = load_dataset(run.input(channels))
    split = ds.split(args.split or cfg.eval.split)
    if len(split) == 0:
        raise CliError(f"split {args.split or cfg.eval.split!r} of {channels} is empty")
    run.seeds["eval"] = derive_seed(cfg.seed, "eval")
    kw = dict(seed=run.seeds["eval"], include_h=cfg.eval.include_h, max_outer=cfg.eval.max_outer, eps=cfg.eval.eps)
    codebook = _parse_floats(args.codebook) if getattr(args, "codebook", None) else cfg.eval.codebook
    kw["codebook"] = codebook
    return run, split, kw


def _write_report(run: _Run, report: ev.EvalReport, stem: str) -> None:
    report.write_csv(run.output(run.out_dir / f"{stem}.rates.csv"))
    report.write_summary_csv(run.output(run.out_dir / f"{stem}.summary.csv"))


def cmd_eval(args, cfg: RunConfig) -> None:
    run, split, kw = _eval_setup(args, cfg, "eval")
    link, weights = cfg.link, cfg.eval_weights
    src = _source(args, cfg, run, link, weights)
    gamma = cfg.eval.gamma if args.gamma is None else args.gamma
    report = ev.evaluate(src, split, weights, link, gamma=gamma, **kw)
    _write_report(run, report, "eval")
    run.finish()
    print(f"mean WSR {report.mean_wsr:.6f}  mean sum rate {report[0].mean_sum_rate:.6f}")


def cmd_ecdf(args, cfg: RunConfig) -> None:
    run, split, kw = _eval_setup(args, cfg, "ecdf")
    link, weights = cfg.link, cfg.eval_weights
    report = ev.evaluate(_source(args, cfg, run, link, weights), split, weights, link, **kw)
    _write_report(run, report, "ecdf")
    ev.write_ecdf_csv(ev.ecdf(report), run.output(run.out_dir / "ecdf.csv"))
    run.finish()


def cmd_tsnr_sweep(args, cfg: RunConfig) -> None:
    run, split, kw = _eval_setup(args, cfg, "tsnr")
    weights = cfg.eval_weights
    src = _source(args, cfg, run, cfg.link, weights)
    report = ev.tsnr_sweep(src, split, cfg.eval.rhos, weights, cfg.train.e_tr, **kw)
    _write_report(run, report, "tsnr")
    run.finish()


def cmd_robustness(args, cfg: RunConfig) -> None:
    run, split, kw = _eval_setup(args, cfg, "robustness")
    link, weights = cfg.link, cfg.eval_weights
    src = _source(args, cfg, run, link, weights)
    seed = kw.pop("seed")
    report = ev.robustness_curve(src, split, cfg.eval.gammas, weights, link, seed=seed, **kw)
    _write_report(run, report, "robustness")
    run.finish()


def cmd_rate_region(args, cfg: RunConfig) -> None:
    run, split, kw = _eval_setup(args, cfg, "region")
    registry = {}
    for item in args.model or []:
        key, sep, path = item.partition("=")
        if not sep:
            raise CliError(f"--model expects WEIGHTS=PATH, got {item!r}")
        registry[_parse_floats(key)] = load_model(run.input(_existing(path, "model file")))
    if args.baseline:
        run.seeds["baseline"] = derive_seed(cfg.seed, "baseline")
        registry["*"] = ev.RandomPhases(run.seeds["baseline"])
    if not registry:
        raise CliError("rate-region needs at least one --model WEIGHTS=PATH or --baseline random")
    report = ev.rate_region(registry, split, cfg.eval.weight_set, cfg.link, **kw)
    _write_report(run, report, "region")
    run.finish()


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (all keys optional)")
    common.add_argument("--seed", type=int, help="top-level seed; overrides the config")
    common.add_argument("--out", help="output directory (output file for gen-channels)")
    common.add_argument("--threads", type=int, help="cap on BLAS/OpenMP worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog=PROG, description="Joint RIS phase / precoder optimisation.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-channels", parents=[common], help="synthesize a channel-set file")

    for name, helptext in (("train", "two-phase training"), ("train-discrete", "penalty-annealed discrete training")):
        t = sub.add_parser(name, parents=[common], help=helptext)
        t.add_argument("--channels", required=True)
        t.add_argument("--out-model")
        t.add_argument("--trace", help="per-epoch trace CSV")
        t.add_argument("--init-model", help="start from this checkpoint (skips pretraining for train-discrete)")
        if name == "train-discrete":
            t.add_argument("--codebook", help="comma separated phases, e.g. 0,pi")
            t.add_argument("--penalty-threshold", type=float)

    def eval_parser(name, helptext, single_model=True):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--channels", required=True)
        e.add_argument("--split", help="dataset split to evaluate (default from config)")
        e.add_argument("--codebook", help="round phases to this codebook before precoding")
        if single_model:
            g = e.add_mutually_exclusive_group(required=True)
            g.add_argument("--model")
            g.add_argument("--baseline", choices=("random", "altgrad"))
        else:
            e.add_argument("--model", action="append", metavar="WEIGHTS=PATH",
                           help="model trained for a weight vector, e.g. 0.25,0.75=m.ckpt (repeatable)")
            e.add_argument("--baseline", choices=("random",), help="serve every weight vector with a baseline")
        return e

    eval_parser("eval", "evaluate a model or baseline").add_argument("--gamma", type=float)
    eval_parser("rate-region", "per-weight evaluation", single_model=False)
    eval_parser("tsnr-sweep", "evaluation across TSNR values")
    eval_parser("ecdf", "sum-rate ECDF")
    eval_parser("robustness", "evaluation under channel estimation error")
    return p


COMMANDS = {
    "gen-channels": cmd_gen_channels,
    "train": cmd_train,
    "train-discrete": lambda a, c: cmd_train(a, c, discrete=True),
    "eval": cmd_eval,
    "rate-region": cmd_rate_region,
    "tsnr-sweep": cmd_tsnr_sweep,
    "ecdf": cmd_ecdf,
    "robustness": cmd_robustness,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = None if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    try:
        with limiter:
            cfg = _load_config(args)
            COMMANDS[args.command](args, cfg)
    except (ValueError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"{PROG}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
