"""``ppmseg`` command-line entry point.

Exit codes: 0 success, 1 usage/config, 2 data, 3 checkpoint format,
4 verification failure.
"""
from __future__ import annotations

import os

# bit-reproducible BLAS reductions need a fixed thread count
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import data as data_mod  # noqa: E402
from .checkpoint import load_checkpoint, model_from_checkpoint, write_checkpoint  # noqa: E402
from .config import RunConfig, load_run_config, to_dict, toy_run_config  # noqa: E402
from .errors import ConfigError, ContractError, FormatError, IngestionError, TrainingError  # noqa: E402
from .gradcheck import TOLERANCE, run_suite  # noqa: E402
from .metrics import METRIC_NAMES  # noqa: E402
from .model import predict_proba  # noqa: E402
from .postprocess import postprocess_pipeline  # noqa: E402
from .trainer import evaluate, fit  # noqa: E402

logger = logging.getLogger("ppmseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_VERIFY = 0, 1, 2, 3, 4

CROSSVAL_NOTE = (
    "# five-fold cross-validation at desk scale; full-scale runs on ISIC 2018 "
    "report mean JA near 0.837, which is not expected from toy data"
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _run_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_run_config(args.config)
    if args.data:
        cfg.data_dir = args.data
    if args.out:
        cfg.out_dir = args.out
    if args.checkpoint:
        cfg.checkpoint = args.checkpoint
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.model.seed = args.seed
    if not cfg.data_dir:
        raise ConfigError("no dataset directory: set data_dir in the config or pass --data")
    cfg.train_config().validate()
    return cfg


def _load_labelled(directory) -> list:
    samples = data_mod.load_dataset(directory)
    unlabelled = [s.id for s in samples if s.mask is None]
    if unlabelled:
        raise IngestionError(f"{len(unlabelled)} image(s) in {directory} lack masks, e.g. {unlabelled[0]}")
    return samples


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def cmd_train(args) -> int:
    cfg = _run_config(args)
    samples = _load_labelled(cfg.data_dir)
    plan = data_mod.split_80_20([s.id for s in samples], cfg.seed)
    by_id = {s.id: s for s in samples}
    train = [by_id[i] for i in plan.train]
    val = [by_id[i] for i in plan.validation]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logger.info("training on %d images, validating on %d", len(train), len(val))
    best, history = fit(cfg.train_config(), train, val)
    ckpt_path = cfg.checkpoint_path()
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(best, ckpt_path)
    (out / "history.csv").write_text(history.to_csv())
    metrics = evaluate(model_from_checkpoint(best), val)
    report = {"best_epoch": history.best_epoch, "validation_ids": plan.validation, **metrics.to_json()}
    _write_json(out / "metrics.json", report)
    print(f"best epoch {history.best_epoch}: val JA {metrics.ja:.4f} DC {metrics.dc:.4f} -> {ckpt_path}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = _run_config(args)
    samples = _load_labelled(cfg.data_dir)
    by_id = {s.id: s for s in samples}
    plans = data_mod.kfold(list(by_id), k=5, seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, plan in enumerate(plans):
        best, history = fit(cfg.train_config(), [by_id[x] for x in plan.train], [by_id[x] for x in plan.validation])
        rec = evaluate(model_from_checkpoint(best), [by_id[x] for x in plan.validation])
        write_checkpoint(best, out / f"fold{i}.ckpt")
        (out / f"fold{i}_history.csv").write_text(history.to_csv())
        rows.append(rec)
        print(f"fold {i}: JA {rec.ja:.4f} DC {rec.dc:.4f} SN {rec.sn:.4f} SP {rec.sp:.4f}")
    mean = {k: float(np.mean([getattr(r, k) for r in rows])) for k in METRIC_NAMES}
    lines = [CROSSVAL_NOTE, "fold," + ",".join(METRIC_NAMES)]
    lines += [f"{i}," + ",".join(repr(getattr(r, k)) for k in METRIC_NAMES) for i, r in enumerate(rows)]
    lines.append("mean," + ",".join(repr(mean[k]) for k in METRIC_NAMES))
    (out / "folds.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _require(args, *names) -> None:
    missing = [f"--{n}" for n in names if not getattr(args, n)]
    if missing:
        raise ConfigError(f"{args.command} requires {', '.join(missing)}")


def cmd_predict(args) -> int:
    _require(args, "checkpoint", "data", "out")
    model = load_checkpoint(args.checkpoint)
    samples = data_mod.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = model.config.input_size
    for s in samples:
        ns = data_mod.resize_for_net(s, size)
        prob = predict_proba(model, ns.image[None])[0]
        data_mod.write_mask_png(postprocess_pipeline(prob, s.original_size), out / f"{s.id}_mask.png")
    print(f"wrote {len(samples)} mask(s) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "checkpoint", "data")
    model = load_checkpoint(args.checkpoint)
    samples = _load_labelled(args.data)
    if not samples:
        raise IngestionError(f"no labelled images in {args.data}")
    rec = evaluate(model, samples)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", rec.to_json())
    print(" ".join(f"{k.upper()} {v:.4f}" for k, v in rec.values().items()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed or 0)
    width = max(len(n) for n, _ in results)
    print(f"{'op':<{width}}  max_rel_err  status")
    ok = True
    for name, err in results:
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name:<{width}}  {err:11.3e}  {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_make_toy(args) -> int:
    _require(args, "out")
    out = Path(args.out).resolve()
    seed = args.seed or 0
    ids = data_mod.make_toy(out, args.n, seed=seed)
    cfg = toy_run_config(data_dir=".", out_dir=f"../{out.name}_run", seed=seed)
    _write_json(out / "config.json", to_dict(cfg))
    print(f"wrote {len(ids)} image/mask pairs and config.json to {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "crossval": cmd_crossval,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "make-toy": cmd_make_toy,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ppmseg", description="Lesion segmentation with pyramid-pooling skip connections.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="run configuration JSON (train, crossval)")
    p.add_argument("--checkpoint", help="checkpoint file (predict, eval; output path for train)")
    p.add_argument("--data", help="dataset or image directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=8, help="number of toy samples (make-toy)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FormatError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
