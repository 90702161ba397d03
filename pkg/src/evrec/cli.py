"""Command-line orchestration: conversion, embeddings, training, evaluation.

Every option resolves as flags > config file > built-in defaults. The config
file is plain "key = value" lines (keys match long flag names, dashes or
underscores), '#' starts a comment. Exit codes: 0 success, 1 validation
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import io
import platform
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import datasets
from .adapters import (ALPHA_JOINT, TransformerAdapterConfig,
                       adapted_predict, load_checkpoint, save_checkpoint)
from .embeddings import (EmbeddingSet, read_embeddings, synthetic_text_encode,
                         write_embeddings)
from .events import EventStream, SyntheticDatasetSpec, gen_synthetic
from .frames import COLORMAPS, WindowingConfig, convert
from .pseudo import PseudoLabelConfig, self_train, write_report_csv
from .train import TrainConfig, sample_few_shot, train_adapter
from .zeroshot import EnsembleConfig, ensemble, our_logits, read_logits

REFERENCE_BENCH_MS = 6.76  # published single-thread CPU baseline


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_kv(path) -> dict[str, str]:
    cfg = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {raw.strip()!r}")
        key, value = line.split("=", 1)
        cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


def _coerce(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


class Settings:
    """Flags > config file > defaults, with file values coerced to the
    default's type."""

    def __init__(self, args: argparse.Namespace, defaults: dict):
        self._flags = {k: v for k, v in vars(args).items() if v is not None}
        cfg_path = self._flags.get("config")
        self._file = _load_kv(cfg_path) if cfg_path else {}
        self._defaults = defaults

    def get(self, name):
        if name in self._flags:
            return self._flags[name]
        default = self._defaults.get(name)
        if name in self._file:
            return _coerce(self._file[name], default)
        return default

    def require(self, name):
        value = self.get(name)
        if value is None:
            raise ValueError(f"missing required option --{name.replace('_', '-')}")
        return value

    def set_default(self, name, value):
        self._defaults.setdefault(name, value)


def _windowing(s: Settings) -> WindowingConfig:
    return WindowingConfig(s.get("window"), s.get("remainder_policy"))


def _read_emb(path) -> EmbeddingSet:
    return read_embeddings(Path(path).read_bytes())


def _synthetic_text(classes: list[str], dim: int, seed: int,
                    logit_scale: float) -> EmbeddingSet:
    rows = np.stack([synthetic_text_encode(c, len(classes), dim, seed)
                     for c in range(len(classes))])
    return EmbeddingSet(classes, rows.astype(np.float32),
                        logit_scale=logit_scale, normalized=True)


def _load_eval_set(s: Settings):
    """Samples plus class names, from precomputed EMB1 or raw streams.

    Returns (samples, classes, text_set). With --emb, a manifest supplies
    ids and labels and --text is required; otherwise streams under --data
    are encoded with the synthetic encoder and --text is optional.
    """
    dim, seed = s.get("dim"), s.get("seed")
    if s.get("emb"):
        manifest = datasets.read_manifest(
            Path(s.require("manifest")).read_text(encoding="utf-8"))
        groups = datasets.group_embeddings(_read_emb(s.get("emb")))
        text = _read_emb(s.require("text"))
        classes = list(text.ids)  # text rows sit in label order
        samples = []
        for row in manifest:
            if row["id"] not in groups:
                raise ValueError(f"no embeddings for sample {row['id']!r}")
            if not 0 <= row["label"] < len(classes):
                raise ValueError(f"label {row['label']} outside the "
                                 f"{len(classes)} text classes")
            samples.append(datasets.FeatureSample(row["id"], row["label"],
                                                  groups[row["id"]]))
    else:
        classes, items = datasets.scan_dataset(s.require("data"),
                                               s.get("split"))
        samples = datasets.feature_samples(items, dim, seed, _windowing(s))
        text = (_read_emb(s.get("text")) if s.get("text") else
                _synthetic_text(classes, dim, seed, s.get("logit_scale")))
        if len(text.ids) != len(classes):
            raise ValueError(f"{len(text.ids)} text rows for "
                             f"{len(classes)} classes")
    return samples, classes, text


def _accuracy_report(samples, classes, probs_fn, out) -> None:
    hits = 0
    per_class = {i: [0, 0] for i in range(len(classes))}
    for sample in samples:
        pred = int(np.argmax(probs_fn(sample)))
        per_class[sample.label][1] += 1
        if pred == sample.label:
            hits += 1
            per_class[sample.label][0] += 1
    out.write(f"samples={len(samples)}\n")
    out.write(f"top1={hits / len(samples):.4f}\n")
    for i, name in enumerate(classes):
        good, total = per_class[i]
        acc = good / total if total else float("nan")
        out.write(f"class={name} n={total} top1={acc:.4f}\n")


GEN_DEFAULTS = dict(split="train", classes=10, samples_per_class=20,
                    width=64, height=64, events_per_sample=2000,
                    noise=0.0, seed=0)


def cmd_gen_synthetic(s: Settings, out) -> int:
    spec = SyntheticDatasetSpec(
        s.get("classes"), s.get("samples_per_class"), s.get("width"),
        s.get("height"), s.get("events_per_sample"), s.get("noise"),
        s.get("seed"))
    paths = datasets.write_dataset(gen_synthetic(spec), s.require("out"),
                                   s.get("split"))
    out.write(f"wrote {len(paths)} streams under {s.get('out')}\n")
    return 0


CONVERT_DEFAULTS = dict(split="train", window=20_000,
                        remainder_policy="own_window_if_ge_half",
                        colormap="gray", image_format="png")


def cmd_convert(s: Settings, out) -> int:
    if s.get("colormap") not in COLORMAPS:
        raise ValueError(f"unknown colormap {s.get('colormap')!r}")
    root, split = s.require("data"), s.get("split")
    _, items = datasets.scan_dataset(root, split)
    manifest = datasets.export_frames(items, s.require("out"), _windowing(s),
                                      s.get("colormap"), s.get("image_format"))
    mpath = Path(s.get("out")) / f"manifest-{split}.jsonl"
    mpath.parent.mkdir(parents=True, exist_ok=True)
    mpath.write_text(manifest, encoding="utf-8")
    out.write(f"converted {len(items)} samples; manifest {mpath}\n")
    return 0


EMBED_DEFAULTS = dict(split="train", window=20_000,
                      remainder_policy="own_window_if_ge_half",
                      dim=64, seed=0, logit_scale=100.0)


def cmd_embed_synthetic(s: Settings, out) -> int:
    classes, items = datasets.scan_dataset(s.require("data"), s.get("split"))
    if not items:
        raise ValueError("no streams to embed")
    es = datasets.sample_embeddings(items, s.get("dim"), s.get("seed"),
                                    _windowing(s), s.get("logit_scale"))
    buf = io.BytesIO()
    write_embeddings(es, buf)
    Path(s.require("out")).write_bytes(buf.getvalue())
    out.write(f"wrote {len(es.ids)} embedding rows to {s.get('out')}\n")
    if s.get("text_out"):
        text = _synthetic_text(classes, s.get("dim"), s.get("seed"),
                               s.get("logit_scale"))
        buf = io.BytesIO()
        write_embeddings(text, buf)
        Path(s.get("text_out")).write_bytes(buf.getvalue())
        out.write(f"wrote {len(classes)} text rows to {s.get('text_out')}\n")
    return 0


EVAL_DEFAULTS = dict(split="test", window=20_000,
                     remainder_policy="own_window_if_ge_half",
                     dim=64, seed=0, logit_scale=100.0)


def _lam_grid(s: Settings) -> list[float] | None:
    if s.get("lam_grid") is not None:
        return [float(v) for v in str(s.get("lam_grid")).split(",") if v.strip()]
    if s.get("lam") is not None:
        return [s.get("lam")]
    return None


def cmd_eval(s: Settings, out) -> int:
    samples, classes, text = _load_eval_set(s)
    if not samples:
        raise ValueError("no samples to evaluate")
    if any(sm.label is None for sm in samples):
        raise ValueError("evaluation needs labeled samples")
    scale = s.get("logit_scale") if s.get("emb") is None else text.logit_scale
    if s.get("checkpoint"):
        ckpt = load_checkpoint(Path(s.get("checkpoint")).read_bytes())
        visual = ckpt.visual
        w = ckpt.text_w if ckpt.text_w is not None else text.vectors
    else:
        visual, w = None, text.vectors

    def probs_fn(sample):
        return adapted_predict(sample.features, visual, w, scale)

    _accuracy_report(samples, classes, probs_fn, out)
    grid = _lam_grid(s)
    if grid is not None:
        external = read_logits(Path(s.require("external")).read_bytes())
        base = {sm.sample_id: our_logits(probs_fn(sm)) for sm in samples}
        for lam in grid:
            cfg = EnsembleConfig(lam)
            hits = sum(
                ensemble(base[sm.sample_id],
                         external.lookup(sm.sample_id), cfg)[0] == sm.label
                for sm in samples)
            out.write(f"lam={lam:.2f} top1={hits / len(samples):.4f}\n")
    return 0


def cmd_ensemble_grid(s: Settings, out) -> int:
    s.set_default("lam_grid", "0,0.25,0.5,0.75,1")
    s.require("external")
    return cmd_eval(s, out)


TRAIN_DEFAULTS = dict(split="train", window=20_000,
                      remainder_policy="own_window_if_ge_half",
                      dim=64, seed=0, logit_scale=100.0, kind="joint",
                      epochs=100, batch_size=32, lr_visual=2e-4,
                      lr_text=1e-3, warmup_fraction=0.05)


def _train_config(s: Settings) -> TrainConfig:
    return TrainConfig(epochs=s.get("epochs"), batch_size=s.get("batch_size"),
                       peak_lr_visual=s.get("lr_visual"),
                       peak_lr_text=s.get("lr_text"),
                       warmup_fraction=s.get("warmup_fraction"),
                       alpha=s.get("alpha"), seed=s.get("seed"))


def _write_curve(curve, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in curve:
            fh.write(f"{step},{lr:.10g},{loss:.10g}\n")


def cmd_train(s: Settings, out) -> int:
    samples, _, text = _load_eval_set(s)
    if any(sm.label is None for sm in samples):
        raise ValueError("training needs labeled samples")
    if s.get("shots"):
        samples = sample_few_shot(samples, s.get("shots"), s.get("seed"))
    ckpt, curve = train_adapter(samples, text, _train_config(s),
                                s.get("kind"), text.logit_scale)
    buf = io.BytesIO()
    save_checkpoint(ckpt, buf)
    Path(s.require("out")).write_bytes(buf.getvalue())
    if s.get("curve"):
        _write_curve(curve, s.get("curve"))
    final = curve[-1][2] if curve else float("nan")
    out.write(f"trained kind={s.get('kind')} steps={len(curve)} "
              f"final_loss={final:.6f} checkpoint={s.get('out')}\n")
    return 0


PSEUDO_DEFAULTS = dict(split="train", window=20_000,
                       remainder_policy="own_window_if_ge_half",
                       dim=64, seed=0, logit_scale=100.0, kind="joint",
                       epochs=100, batch_size=32, lr_visual=2e-4,
                       lr_text=1e-3, warmup_fraction=0.05, top_k=30)


def cmd_pseudolabel(s: Settings, out) -> int:
    classes, items = datasets.scan_dataset(s.require("data"), s.get("split"))
    unlabeled = [datasets.load_stream(it) for it in items]
    labeled = None
    if s.get("labeled_split"):
        _, shot_items = datasets.scan_dataset(s.get("data"),
                                              s.get("labeled_split"),
                                              classes=classes)
        labeled = [datasets.load_stream(it) for it in shot_items]
    dim, seed = s.get("dim"), s.get("seed")
    cfg = None
    if s.get("threshold") is not None:
        cfg = PseudoLabelConfig(s.get("threshold"), s.get("top_k"))
    if s.get("text"):
        text = _read_emb(s.get("text"))
    elif classes:
        text = _synthetic_text(classes, dim, seed, s.get("logit_scale"))
    else:
        raise ValueError("class-free dataset needs --text embeddings")
    windowing = _windowing(s)

    def encode_fn(stream):
        return datasets.encode_stream(stream, dim, seed, windowing)

    ckpt, records, report = self_train(
        unlabeled, labeled, cfg, _train_config(s), encode_fn=encode_fn,
        text=text, kind=s.get("kind"))
    buf = io.BytesIO()
    save_checkpoint(ckpt, buf)
    Path(s.require("out")).write_bytes(buf.getvalue())
    if s.get("report"):
        with open(s.get("report"), "w", encoding="utf-8") as fh:
            write_report_csv(records, fh)
    out.write(f"mode={report.mode} accepted={report.num_accepted}"
              f"/{report.num_unlabeled} "
              f"acceptance_rate={report.acceptance_rate:.4f}\n")
    for reason in ("inconsistent", "low_confidence", "crowded_out"):
        out.write(f"rejected_{reason}="
                  f"{getattr(report, 'rejected_' + reason)}\n")
    if report.purity is not None:
        out.write(f"purity={report.purity:.4f} "
                  f"baseline_purity={report.baseline_purity:.4f}\n")
    out.write(f"checkpoint={s.get('out')}\n")
    return 0


BENCH_DEFAULTS = dict(events=70_000, width=640, height=480, window=20_000,
                      remainder_policy="own_window_if_ge_half",
                      runs=100, seed=0, colormap="gray")


def cmd_bench(s: Settings, out) -> int:
    rng = np.random.default_rng(s.get("seed"))
    n, w, h = s.get("events"), s.get("width"), s.get("height")
    stream = EventStream(
        w, h, rng.integers(0, w, n), rng.integers(0, h, n),
        np.sort(rng.integers(0, 1_000_000, n)),
        rng.choice(np.array([-1, 1], dtype=np.int8), n))
    cfg = _windowing(s)
    runs = max(s.get("runs"), 2)
    timings = []
    for _ in range(runs):
        start = time.perf_counter()
        convert(stream, cfg, s.get("colormap"))
        timings.append((time.perf_counter() - start) * 1e3)
    timings.sort()
    p95 = timings[min(runs - 1, int(round(0.95 * (runs - 1))))]
    out.write("bench=event_to_frame\n")
    out.write(f"events={n} width={w} height={h} window={cfg.n} runs={runs}\n")
    out.write(f"median_ms={statistics.median(timings):.3f}\n")
    out.write(f"p95_ms={p95:.3f}\n")
    out.write(f"reference_ms={REFERENCE_BENCH_MS}\n")
    out.write(f"machine={platform.platform()} "
              f"python={platform.python_version()}\n")
    return 0


COMMANDS = {
    "gen-synthetic": (cmd_gen_synthetic, GEN_DEFAULTS),
    "convert": (cmd_convert, CONVERT_DEFAULTS),
    "embed-synthetic": (cmd_embed_synthetic, EMBED_DEFAULTS),
    "eval": (cmd_eval, EVAL_DEFAULTS),
    "ensemble-grid": (cmd_ensemble_grid, dict(EVAL_DEFAULTS)),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "pseudolabel": (cmd_pseudolabel, PSEUDO_DEFAULTS),
    "bench": (cmd_bench, BENCH_DEFAULTS),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a labeled bar dataset")
    _add_common(p)
    p.add_argument("--out")
    p.add_argument("--split")
    p.add_argument("--classes", type=int)
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--events-per-sample", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("convert", help="streams to frame files + manifest")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--out")
    p.add_argument("--window", type=int)
    p.add_argument("--remainder-policy")
    p.add_argument("--colormap")
    p.add_argument("--image-format", choices=("png", "frm1"))

    p = sub.add_parser("embed-synthetic",
                       help="encode streams with the synthetic encoder")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--out")
    p.add_argument("--text-out")
    p.add_argument("--dim", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--remainder-policy")
    p.add_argument("--logit-scale", type=float)

    for name in ("eval", "ensemble-grid"):
        p = sub.add_parser(name, help="top-1 accuracy report")
        _add_common(p)
        p.add_argument("--data")
        p.add_argument("--split")
        p.add_argument("--emb")
        p.add_argument("--manifest")
        p.add_argument("--text")
        p.add_argument("--checkpoint")
        p.add_argument("--external")
        p.add_argument("--lam", type=float)
        p.add_argument("--lam-grid")
        p.add_argument("--dim", type=int)
        p.add_argument("--window", type=int)
        p.add_argument("--remainder-policy")
        p.add_argument("--logit-scale", type=float)

    p = sub.add_parser("train", help="fit an adapter, save ADP1 + curve")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--emb")
    p.add_argument("--manifest")
    p.add_argument("--text")
    p.add_argument("--out")
    p.add_argument("--curve")
    p.add_argument("--kind", choices=("joint", "visual_transformer",
                                      "visual_mlp", "text"))
    p.add_argument("--shots", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-visual", type=float)
    p.add_argument("--lr-text", type=float)
    p.add_argument("--warmup-fraction", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--remainder-policy")
    p.add_argument("--logit-scale", type=float)

    p = sub.add_parser("pseudolabel",
                       help="self-train from pseudo-labeled streams")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--labeled-split")
    p.add_argument("--text")
    p.add_argument("--out")
    p.add_argument("--report")
    p.add_argument("--threshold", type=float)
    p.add_argument("--top-k", type=int)
    p.add_argument("--kind", choices=("joint", "visual_transformer",
                                      "visual_mlp", "text"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-visual", type=float)
    p.add_argument("--lr-text", type=float)
    p.add_argument("--warmup-fraction", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--remainder-policy")
    p.add_argument("--logit-scale", type=float)

    p = sub.add_parser("bench", help="event-to-frame conversion timings")
    _add_common(p)
    p.add_argument("--events", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--remainder-policy")
    p.add_argument("--runs", type=int)
    p.add_argument("--colormap")

    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler, defaults = COMMANDS[args.command]
    try:
        settings = Settings(args, dict(defaults))
        return handler(settings, out)
    except (ValueError, KeyError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"evrec: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"evrec: failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
