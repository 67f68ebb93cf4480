"""Batch experiment driver.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, content_hash, generate, load_samples, save_samples
from .metrics import (EvalReport, LearnedMechanism, VcgMechanism, evaluate, format_table, merge_reports,
                      reports_csv)
from .network import HybridRegretNet
from .training import NumericalError, Trainer, load_checkpoint

log = logging.getLogger("hybridauction")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

EPILOG = """exit codes:
  0  success
  1  usage error (bad flags, bad config, refusing to overwrite or resume)
  2  data error (missing or malformed dataset, checkpoint or log file)
  3  numerical failure (non-finite loss or gradient)

config keys may be overridden with HAUCTION_<KEY> environment variables."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--profile", choices=("fast", "full"), help="sample-count profile")
    common.add_argument("--workers", type=int, default=1, help="BLAS thread limit (default 1)")
    common.add_argument("--out", type=Path, default=Path("out"), help="experiment directory (default ./out)")
    common.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="hauction", description=__doc__.splitlines()[0], epilog=EPILOG,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="generate train/test datasets")
    sub.add_parser("train", parents=[common], help="train the learned mechanism")
    sub.add_parser("eval", parents=[common], help="evaluate the configured mechanism on the test set")
    vp = sub.add_parser("vcg", parents=[common], help="evaluate the VCG baseline on the test set")
    vp.add_argument("--regret", action="store_true", help="also grid-search VCG regret")
    sub.add_parser("report", parents=[common], help="merge evaluation reports into one table")
    return p


# paths ----------------------------------------------------------------------
def data_dir(out: Path) -> Path:
    return out / "data"


def train_dir(out: Path, cfg: ExperimentConfig) -> Path:
    return out / "train" / f"{cfg.population.setting}_C{cfg.C}"


def eval_dir(out: Path) -> Path:
    return out / "eval"


def _write_text(path: Path, text: str, force: bool) -> None:
    if path.exists() and not force and path.read_text() != text:
        raise UsageError(f"{path} exists with different content; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash(), "data_hash": cfg.hash("data"), "seed": cfg.seed}


# commands -------------------------------------------------------------------
def cmd_gen(cfg: ExperimentConfig, args) -> int:
    d = data_dir(args.out)
    manifest_path = d / "manifest.json"
    if manifest_path.exists() and not args.force:
        raise UsageError(f"{manifest_path} exists; pass --force to overwrite")
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for split, (name, size) in enumerate((("train", cfg.train_samples), ("test", cfg.test_samples))):
        samples = generate(cfg.population, size, cfg.seed, split)
        save_samples(d / f"{name}.npz", samples)
        files[name] = {"file": f"{name}.npz", "count": size, "sha256": content_hash(samples)}
        log.info("wrote %d %s samples", size, name)
    manifest = {"population": cfg.population.to_dict(), "files": files, **_stamp(cfg)}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"gen: {cfg.train_samples} train + {cfg.test_samples} test samples in {d}")
    return EXIT_OK


def _load_split(cfg: ExperimentConfig, out: Path, name: str):
    d = data_dir(out)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise DataError(f"no dataset in {d}; run 'gen' first") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{d / 'manifest.json'}: {exc}") from None
    if manifest.get("data_hash") != cfg.hash("data"):
        raise DataError(f"dataset in {d} was generated under a different population, seed or profile")
    samples = load_samples(d / manifest["files"][name]["file"])
    if content_hash(samples) != manifest["files"][name]["sha256"]:
        raise DataError(f"{name} samples do not match the manifest hash")
    return samples


def _train_meta(cfg: ExperimentConfig) -> dict:
    return {"train_config": cfg.train.to_dict(), "setting": cfg.population.auction_setting.to_dict(),
            "population": cfg.population.to_dict(), "data_hash": cfg.hash("data")}


def cmd_train(cfg: ExperimentConfig, args) -> int:
    train = _load_split(cfg, args.out, "train")
    d = train_dir(args.out, cfg)
    trainer = Trainer(cfg.population.auction_setting, cfg.train, d, _train_meta(cfg))
    if trainer.checkpoint_path.exists() and not (args.resume or args.force):
        raise UsageError(f"{trainer.checkpoint_path} exists; pass --resume to continue or --force to restart")
    if args.resume and not trainer.checkpoint_path.exists():
        raise UsageError(f"nothing to resume: {trainer.checkpoint_path} not found")
    if args.resume:
        try:
            trainer.resume_state()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    state = trainer.fit(train, resume=args.resume)
    print(f"train: {state.iteration} iterations, checkpoint {trainer.checkpoint_path}")
    return EXIT_OK


def _load_learned(cfg: ExperimentConfig, out: Path) -> LearnedMechanism:
    path = train_dir(out, cfg) / "checkpoint.npz"
    if not path.exists():
        raise DataError(f"missing checkpoint {path}; run 'train' first")
    try:
        st, header = load_checkpoint(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None
    setting = cfg.population.auction_setting
    if header.get("setting") != setting.to_dict():
        raise DataError(f"{path} was trained for a different setting")
    tc = header["train_config"]
    net = HybridRegretNet(setting, tc["hidden"], tc["store_hidden"])
    try:
        return LearnedMechanism(net, st.params)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _emit(report: EvalReport, args) -> None:
    stem = f"{report.method}_C{report.C}"
    d = eval_dir(args.out)
    _write_text(d / f"{stem}.json", report.to_json(), force=True)
    _write_text(d / f"{stem}.csv", reports_csv([report]), force=True)
    print(format_table([report]), end="")


def cmd_eval(cfg: ExperimentConfig, args, mechanism: str | None = None, with_regret: bool = True) -> int:
    test = _load_split(cfg, args.out, "test")
    kind = mechanism or cfg.mechanism
    mech = VcgMechanism(cfg.pivot) if kind == "vcg" else _load_learned(cfg, args.out)
    cache = args.out / "cache" / "regret"
    meta = {**_stamp(cfg), "eval_config": cfg.eval.to_dict()}
    if kind == "vcg":
        meta["pivot"] = cfg.pivot
    report = evaluate(mech, test, cfg.eval, with_regret=with_regret, cache_dir=cache, meta=meta)
    _emit(report, args)
    return EXIT_OK


def cmd_vcg(cfg: ExperimentConfig, args) -> int:
    return cmd_eval(cfg, args, mechanism="vcg", with_regret=args.regret)


def cmd_report(cfg: ExperimentConfig, args) -> int:
    reports = []
    d = eval_dir(args.out)
    for path in sorted(d.glob("*.json")) if d.exists() else []:
        try:
            reports.append(EvalReport.from_dict(json.loads(path.read_text())))
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise DataError(f"{path}: not an evaluation report ({exc})") from None
    rows = merge_reports(reports)
    table = format_table(rows)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.csv").write_text(reports_csv(rows))
    (args.out / "report.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "vcg": cmd_vcg, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, {"seed": args.seed, "profile": args.profile})
        limit = threadpool_limits(args.workers) if args.workers else nullcontext()
        with limit:
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
