"""Command-line entry point: ``flare {synth,train,eval,gradcheck,buckets}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 verification failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .config import ConfigError, RunConfig
from .dataio import (
    FitError,
    Normalizer,
    SchemaError,
    apply_normalizer,
    cohort_stage_counts,
    fit_normalizer,
    load_cohort,
    save_cohort,
)
from .model import ModelConfig, init_params
from .numeric import ShapeError, load_into, read_checkpoint, save_checkpoint, CheckpointError
from .sampling import augmentation_report, enumerate_cohort, report_csv, split_patients
from .synthcohort import CohortConfigError, generate_cohort, initial_stage_counts, transition_counts
from .training import build_tensors, evaluate, train, usable_samples

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3, 4


class DataError(RuntimeError):
    pass


class VerificationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Shared plumbing
# --------------------------------------------------------------------------

def resolve_cohort(cfg: RunConfig, path_override=None):
    path = path_override or cfg.data_path
    if path is not None:
        try:
            cohort = load_cohort(path)
        except (OSError, SchemaError, ValueError) as exc:
            raise DataError(f"cannot load cohort {path}: {exc}") from exc
        if cohort:
            tr = next(iter(cohort.values()))
            dims = (tr.volumetric.shape[1], tr.demographic.shape[1], tr.cognitive.shape[1])
            if dims != cfg.model.input_dims:
                raise ConfigError(f"cohort feature dims {dims} do not match model input dims {cfg.model.input_dims}")
        return cohort
    return generate_cohort(cfg.synth)


def prepare(cfg: RunConfig, path_override=None):
    """Load data, split by patient, normalize on the training split, enumerate samples."""
    cohort = resolve_cohort(cfg, path_override)
    if not cohort:
        raise DataError("cohort is empty")
    train_ids, test_ids = split_patients(cohort, cfg.split)
    try:
        norm = fit_normalizer(cohort, train_ids)
    except FitError as exc:
        raise DataError(str(exc)) from exc
    return cohort, train_ids, test_ids, norm


def normalized(cohort, norm: Normalizer, ids):
    return {pid: apply_normalizer(cohort[pid], norm) for pid in ids}


def limits(model: ModelConfig):
    return (model.max_T, model.max_sum_T_tau)


@contextmanager
def run_lock(directory: Path):
    lock = directory / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{directory} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def checkpoint_meta(cfg: RunConfig, kind: str, norm: Normalizer, extra=None) -> dict:
    meta = {"kind": kind, "model_config": cfg.model.to_dict(), "normalizer": norm.to_dict()}
    if extra:
        meta.update(extra)
    return meta


def load_model(path, cfg: RunConfig):
    try:
        header, arrays = read_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    meta = header.get("meta", {})
    if meta.get("model_config") != cfg.model.to_dict():
        raise ShapeError(f"checkpoint {path} was trained with a different model config")
    params = init_params(cfg.model, meta["kind"], 0)
    load_into(list(params), arrays)
    params.step = header["step"]
    return params, Normalizer.from_dict(meta["normalizer"]), meta


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out_path) -> dict:
    if cfg.synth is None:
        raise ConfigError("synth needs data.synth in the config")
    out_path = Path(out_path)
    cohort = generate_cohort(cfg.synth)
    counts = cohort_stage_counts(cohort)
    summary = {
        "patients": len(cohort),
        "visits": int(sum(len(t) for t in cohort.values())),
        "stage_counts": counts,
        "initial_stage_counts": dict(zip(("CN", "MCI", "AD"), initial_stage_counts(cohort))),
        "transitions": transition_counts(cohort),
    }
    save_cohort(out_path, cohort, {"spec": cfg.synth.to_dict(), "seed": cfg.synth.seed, "counts": summary})
    return summary


def cmd_train(cfg: RunConfig, out_dir, models=("flare",), data_path=None, log=print) -> dict:
    cohort, train_ids, test_ids, norm = prepare(cfg, data_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    with run_lock(out_dir):
        (out_dir / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
        train_norm = normalized(cohort, norm, train_ids)
        samples = enumerate_cohort(train_norm, train_ids, limits(cfg.model))
        for kind in models:
            kdir = out_dir / kind
            kdir.mkdir(exist_ok=True)
            usable = usable_samples(samples, kind)
            if not usable:
                raise DataError("no training samples could be formed from the cohort")
            tensors = build_tensors(train_norm, usable, cfg.model)
            params = init_params(cfg.model, kind, np.random.default_rng(cfg.training.seed))
            meta = checkpoint_meta(cfg, kind, norm, {"n_train_samples": len(usable)})
            log_path = kdir / "train_log.jsonl"
            every = cfg.training.checkpoint_every

            with open(log_path, "w", encoding="utf-8") as fh:
                def on_epoch(rec):
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    fh.flush()
                    if every and (rec["epoch"] + 1) % every == 0:
                        save_checkpoint(kdir / f"epoch_{rec['epoch'] + 1:05d}.ckpt", list(params), params.step, meta)

                res = train(params, tensors, cfg.training, cfg.optimizer, on_epoch)
            save_checkpoint(kdir / "final.ckpt", list(res.params), res.params.step, meta)
            save_checkpoint(kdir / "best.ckpt", list(res.best), res.best.step, {**meta, "best_epoch": res.best_epoch})
            final_loss = res.log[-1]["total_loss"] if res.log else None
            log(f"[{kind}] {len(usable)} training samples, {cfg.training.epochs} epochs, final loss {final_loss}")
            results[kind] = {"dir": str(kdir), "n_train_samples": len(usable), "best_epoch": res.best_epoch, "log": res.log}
    return results


def cmd_eval(cfg: RunConfig, checkpoint, out_dir, data_path=None) -> dict:
    params, norm, meta = load_model(checkpoint, cfg)
    cohort, train_ids, test_ids, _ = prepare(cfg, data_path)
    test_norm = normalized(cohort, norm, test_ids)
    all_samples = enumerate_cohort(test_norm, test_ids, limits(cfg.model))
    samples = usable_samples(all_samples, params.kind)
    if not samples:
        raise DataError("no test samples could be formed from the cohort")
    report = evaluate(params, build_tensors(test_norm, samples, cfg.model)).finalize()
    report.extra = {
        "kind": params.kind,
        "n_test_patients": len(test_ids),
        "n_test_samples": len(all_samples),
        "n_evaluated": len(samples),
        "n_skipped_missing": len(all_samples) - len(samples),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out_dir / "confusion.csv").write_text(report.confusion_csv(), encoding="utf-8")
    (out_dir / "bucket_f1.csv").write_text(report.bucket_grid_csv(), encoding="utf-8")
    return report.to_dict()


def cmd_gradcheck(cfg: RunConfig | None, seed: int = 0, corrupt: str | None = None) -> list:
    model = gc.tiny_config() if cfg is None else cfg.model
    if model.d_f > 8 or model.rnn_hidden > 8:
        raise ConfigError(f"gradcheck needs a tiny model (d_f <= 8, rnn_hidden <= 8), got d_f={model.d_f}, hidden={model.rnn_hidden}")
    def hook(params):
        if corrupt in params.blocks:
            params[corrupt].grad.flat[0] += 1.0
    return gc.run_suite(seed, model, hook=hook if corrupt is not None else None)


def cmd_buckets(cfg: RunConfig, data_path=None) -> list[dict]:
    cohort, train_ids, test_ids, _ = prepare(cfg, data_path)
    lim = limits(cfg.model)
    train_s = enumerate_cohort(cohort, train_ids, lim)
    test_s = enumerate_cohort(cohort, test_ids, lim)
    return augmentation_report(train_s, test_s, *lim)


# --------------------------------------------------------------------------
# argparse
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flare", description="FLARe disease-stage forecasting toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON run config (defaults used when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value, e.g. training.epochs=5")

    p = sub.add_parser("synth", help="generate a synthetic cohort CSV + manifest")
    common(p)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("train", help="train FLARe and/or the RNN-Concat baseline")
    common(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--model", choices=("flare", "concat", "both"), default="flare")
    p.add_argument("--data", help="cohort CSV (overrides data.path)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--data", help="cohort CSV (overrides data.path)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter block")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)

    p = sub.add_parser("buckets", help="print the (T, tau) augmentation report")
    common(p)
    p.add_argument("--data", help="cohort CSV (overrides data.path)")
    p.add_argument("--out", help="also write the report CSV here")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck" and args.config is None and not args.set:
            cfg = None
        else:
            cfg = RunConfig.load(args.config, args.set)

        if args.command == "synth":
            summary = cmd_synth(cfg, args.out)
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "train":
            models = ("flare", "concat") if args.model == "both" else (args.model,)
            cmd_train(cfg, args.out, models, args.data)
        elif args.command == "eval":
            rep = cmd_eval(cfg, args.checkpoint, args.out, args.data)
            o = rep["overall"]
            print(f"accuracy {o['accuracy']:.4f}  precision {o['macro_precision']:.4f}  "
                  f"recall {o['macro_recall']:.4f}  F1 {o['macro_f1']:.4f}  (n={o['count']})")
        elif args.command == "gradcheck":
            results = cmd_gradcheck(cfg, args.seed, args.corrupt)
            failed = []
            for r in results:
                worst = max(r.errors, key=r.errors.get)
                status = "PASS" if r.ok else "FAIL"
                print(f"{status}  {r.label:<40s} max rel err {r.max_error:.3e} ({worst})")
                for name in r.failures:
                    print(f"      block {name}: {r.errors[name]:.3e}")
                    failed.append(name)
            if failed:
                print(f"gradcheck failed for blocks: {', '.join(sorted(set(failed)))}", file=sys.stderr)
                return EXIT_VERIFY
        elif args.command == "buckets":
            rows = cmd_buckets(cfg, args.data)
            text = report_csv(rows)
            print(text, end="")
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
    except (ConfigError, CohortConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
