"""Command-line entry point: ``rsicnet <command> [flags]``.

Every command prints one JSON document on stdout. Failures exit with a
nonzero status and a JSON ``{"error": ..., "kind": ...}`` on stderr.
Progress lines (with timings) also go to stderr so stdout stays
reproducible.
"""
from __future__ import annotations

import os
import sys

# thread counts must be fixed before numpy's BLAS initialises
_THREADS = os.environ.get("ATNF_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ[_var] = _THREADS

import argparse  # noqa: E402
import json  # noqa: E402
import time  # noqa: E402
from dataclasses import asdict, fields  # noqa: E402
from pathlib import Path  # noqa: E402

CONFIG_SCHEMA_VERSION = 1
EXIT_USAGE = 2
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 3


class CliError(Exception):
    def __init__(self, message: str, kind: str = "error", code: int = EXIT_ERROR):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}", kind="usage", code=EXIT_USAGE)


def _log(msg: str):
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", file=sys.stderr, flush=True)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"file not found: {path}", kind="missing_file") from None
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {path}: {exc}", kind="bad_config") from None


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise CliError(f"unknown keys in config section {name!r}: {unknown}", kind="bad_config")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config section {name!r}: {exc}", kind="bad_config") from None


def _manifest(path):
    from .data import MANIFEST_NAME, DatasetManifest

    p = Path(path)
    if not (p / MANIFEST_NAME).exists() and not p.is_file():
        raise CliError(f"no dataset manifest at {path}", kind="missing_file")
    return DatasetManifest.load(p)


def _load_model_file(path):
    from .modelfile import load_model

    if not Path(path).exists():
        raise CliError(f"model file not found: {path}", kind="missing_file")
    return load_model(path)


# ---------------------------------------------------------------- commands

def cmd_gen_data(a) -> dict:
    from .data import gen_synthetic_dataset

    if a.classes < 2 or a.size < 16 or a.per_class < 1:
        raise CliError("need classes >= 2, size >= 16 and per-class >= 1", kind="bad_argument")
    m = gen_synthetic_dataset(a.out, a.classes, a.per_class, a.size, a.seed, a.name)
    return {"manifest": str(Path(a.out) / "manifest.json"), "images": len(m.files),
            "num_classes": m.num_classes, "class_names": m.class_names, "image_size": list(m.image_size)}


def cmd_split(a) -> dict:
    from .data import split_dataset

    m = _manifest(a.data)
    split_dataset(m, a.fraction, a.seed)
    m.save()
    counts = {k: {str(c): sum(1 for _, lab in v if lab == c) for c in range(m.num_classes)}
              for k, v in m.splits.items()}
    return {"train": len(m.splits["train"]), "test": len(m.splits["test"]), "per_class": counts}


def load_train_config(path) -> dict:
    """Parse a train config into typed sections; raises CliError on any schema problem."""
    from .augment import AugmentConfig
    from .model import ModelSpec
    from .train import TrainConfig

    cfg = _read_json(path)
    if not isinstance(cfg, dict):
        raise CliError("config must be a JSON object", kind="bad_config")
    version = cfg.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise CliError(f"config schema_version {version!r}, expected {CONFIG_SCHEMA_VERSION}", kind="bad_config")
    unknown = sorted(set(cfg) - {"schema_version", "model", "train", "augment", "paths", "init_from"})
    if unknown:
        raise CliError(f"unknown top-level config keys: {unknown}", kind="bad_config")
    paths = cfg.get("paths", {})
    if "data" not in paths or "out" not in paths:
        raise CliError("config paths must name 'data' (dataset dir) and 'out' (run dir)", kind="bad_config")
    base = Path(path).parent
    return {
        "model": _build(ModelSpec, cfg.get("model", {}), "model"),
        "train": _build(TrainConfig, cfg.get("train", {}), "train"),
        "augment": _build(AugmentConfig, cfg.get("augment", {}), "augment"),
        "data": base / paths["data"],
        "out": base / paths["out"],
        "init_from": None if cfg.get("init_from") is None else base / cfg["init_from"],
    }


def run_training(path) -> dict:
    from .augment import rotate_dataset
    from .data import atomic_write_text
    from .model import Classifier, param_count
    from .modelfile import save_model
    from .quant import QuantizedModel
    from .train import evaluate, train, transfer

    c = load_train_config(path)
    spec, tcfg, acfg = c["model"], c["train"], c["augment"]
    m = _manifest(c["data"])
    if m.num_classes != spec.num_classes or tuple(m.image_size) != tuple(spec.input_size):
        raise CliError(f"dataset has {m.num_classes} classes of {tuple(m.image_size)}, model expects "
                       f"{spec.num_classes} of {tuple(spec.input_size)}", kind="bad_config")
    try:
        xtr, ytr = m.load_split("train")
        xte, yte = m.load_split("test")
    except KeyError as exc:
        raise CliError(str(exc.args[0]), kind="missing_split") from None
    if acfg.offline_rotation:
        xtr, ytr = rotate_dataset(xtr, ytr)

    if c["init_from"] is not None:
        pre = _load_model_file(c["init_from"])
        if isinstance(pre, QuantizedModel):
            pre = pre.dequantize()
        model = transfer(pre, spec, seed=tcfg.seed)
    else:
        model = Classifier(spec, seed=tcfg.seed)

    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = train(model, xtr, ytr, tcfg, acfg,
                on_epoch=lambda rec, _: _log(f"epoch {rec['epoch']} {json.dumps(rec)} "
                                             f"{time.perf_counter() - t0:.0f}s"))
    ev = evaluate(model, xte, yte)
    size = save_model(out / "checkpoint.atnf", model)
    atomic_write_text(out / "history.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in res.history))
    metrics = {"schema_version": CONFIG_SCHEMA_VERSION, "test": ev.to_dict(), "parameters": param_count(model),
               "checkpoint_bytes": size, "train_images": int(len(xtr)), "test_images": int(len(xte)),
               "config": {"model": spec.to_dict(), "train": asdict(tcfg), "augment": asdict(acfg),
                          "init_from": None if c["init_from"] is None else str(c["init_from"])}}
    atomic_write_text(out / "metrics.json", json.dumps(metrics, indent=1, sort_keys=True))
    _log(f"training finished in {time.perf_counter() - t0:.1f}s")
    return {"checkpoint": str(out / "checkpoint.atnf"), "history": str(out / "history.jsonl"),
            "metrics": str(out / "metrics.json"), "accuracy": ev.accuracy}


def cmd_train(a) -> dict:
    return run_training(a.config)


def _as_classifier(obj):
    from .quant import QuantizedModel

    return obj.dequantize() if isinstance(obj, QuantizedModel) else obj


def cmd_eval(a) -> dict:
    from .train import evaluate

    model = _as_classifier(_load_model_file(a.model))
    m = _manifest(a.data)
    try:
        x, y = m.load_split(a.split)
    except KeyError as exc:
        raise CliError(str(exc.args[0]), kind="missing_split") from None
    return {"split": a.split, **evaluate(model, x, y).to_dict()}


def cmd_quantize(a) -> dict:
    from .modelfile import save_model
    from .quant import QuantizedModel, footprint_report, quantize_model
    from .train import evaluate_predictions

    model = _load_model_file(a.model)
    if isinstance(model, QuantizedModel):
        raise CliError(f"{a.model} is already quantized", kind="bad_argument")
    q = quantize_model(model)
    save_model(a.out, q)
    report = footprint_report(model, q)
    if a.data:
        x, y = _manifest(a.data).load_split(a.split)
        p32 = model.predict(x)
        p8 = q.dequantize().predict(x)
        e32 = evaluate_predictions(p32, y, model.spec.num_classes)
        e8 = evaluate_predictions(p8, y, model.spec.num_classes)
        report.update({"fp32_accuracy": e32.accuracy, "int8_accuracy": e8.accuracy,
                       "top1_agreement": float((p32.argmax(1) == p8.argmax(1)).mean())})
    report["output"] = str(a.out)
    return report


def _protocol(a):
    from .experiments import Protocol

    base = _read_json(a.protocol) if a.protocol else {}
    p = _build(Protocol, base, "protocol")
    for key in ("seed", "phase1_epochs", "phase2_epochs", "per_class"):
        val = getattr(a, key, None)
        if val is not None:
            setattr(p, key, val)
    return p


def cmd_compare_attn(a) -> dict:
    from .experiments import compare_attention

    p = _protocol(a)
    rows = compare_attention(p, log=_log)
    if a.csv:
        from .data import atomic_write_text

        lines = ["attention,accuracy,parameters"] + [f"{r['attention']},{r['accuracy']:.6f},{r['parameters']}"
                                                     for r in rows]
        atomic_write_text(a.csv, "\n".join(lines) + "\n")
    return {"columns": ["attention", "accuracy", "parameters"], "rows": rows, "protocol": p.to_dict()}


def cmd_gradcheck(a) -> dict:
    from .gradsuite import run_suite

    res = run_suite(a.seed, a.h, a.tol)
    for c in res["checks"]:
        _log(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} {c['fraction_within']:.1%}")
    res.pop("seconds")
    if not res["passed"]:
        _emit(res)
        raise CliError("gradient check failed", kind="check_failed", code=EXIT_CHECK_FAILED)
    return res


def cmd_augment_preview(a) -> dict:
    import numpy as np

    from .augment import AugmentConfig, Batch, OnlineAugmenter, one_hot
    from .data import write_ppm

    m = _manifest(a.data)
    x, y = m.load_split("all")
    idx = np.random.default_rng(a.seed).choice(len(x), size=min(a.count, len(x)), replace=False)
    cfg = _build(AugmentConfig, _read_json(a.augment) if a.augment else {"seed": a.seed}, "augment")
    out = OnlineAugmenter(cfg)(Batch(x[idx], one_hot(y[idx], m.num_classes)), 0, 0)
    d = Path(a.out)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    to8 = lambda im: np.clip(np.rint(im * 255), 0, 255).astype(np.uint8)  # noqa: E731
    for k in range(len(idx)):
        write_ppm(d / f"before_{k:03d}.ppm", to8(x[idx[k]]))
        written.append(f"before_{k:03d}.ppm")
    for k in range(len(out)):
        write_ppm(d / f"after_{k:03d}.ppm", to8(out.images[k]))
        written.append(f"after_{k:03d}.ppm")
    return {"out": str(d), "files": written, "labels_after": np.round(out.labels, 6).tolist()}


def cmd_params(a) -> dict:
    from .model import Classifier, ModelSpec, param_count

    spec = _build(ModelSpec, _read_json(a.spec), "model") if a.spec else ModelSpec()
    if a.attention is not None:
        from .experiments import variant_spec

        spec = variant_spec(spec, a.attention)
    return {"spec": spec.to_dict(), **param_count(Classifier(spec))}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rsicnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("gen-data", help="render a synthetic PPM dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=6)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--name", default="synthetic")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("split", help="stratified train/test split, written into the manifest")
    s.add_argument("--data", required=True)
    s.add_argument("--fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_split)

    s = sub.add_parser("train", help="train from a JSON config")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=["train", "test", "all"])
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("quantize", help="int8 post-training quantization and footprint report")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="dataset to measure fp32/int8 agreement on")
    s.add_argument("--split", default="test", choices=["train", "test", "all"])
    s.set_defaults(fn=cmd_quantize)

    s = sub.add_parser("compare-attn", help="train none/SE/CBAM/TRIAXIS under one protocol")
    s.add_argument("--protocol", help="JSON file overriding protocol fields")
    s.add_argument("--seed", type=int)
    s.add_argument("--phase1-epochs", type=int)
    s.add_argument("--phase2-epochs", type=int)
    s.add_argument("--per-class", type=int)
    s.add_argument("--csv", help="also write the table as CSV")
    s.set_defaults(fn=cmd_compare_attn)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer and a full model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-3)
    s.add_argument("--tol", type=float, default=1e-3)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("augment-preview", help="write before/after images of the online pipeline")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--augment", help="JSON file with AugmentConfig fields")
    s.set_defaults(fn=cmd_augment_preview)

    s = sub.add_parser("params", help="parameter counts by part")
    s.add_argument("--spec", help="JSON file with ModelSpec fields")
    s.add_argument("--attention", choices=["none", "SE", "CA", "SA", "CBAM", "TRIAXIS"])
    s.set_defaults(fn=cmd_params)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _emit(args.fn(args))
        return 0
    except CliError as exc:
        err = {"error": str(exc), "kind": exc.kind}
        code = exc.code
    except Exception as exc:  # surfaced as machine-readable errors
        from .modelfile import ModelFileError

        kind = type(exc).__name__ if isinstance(exc, ModelFileError) else "runtime_error"
        err = {"error": str(exc), "kind": kind, "type": type(exc).__name__}
        code = EXIT_ERROR
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
