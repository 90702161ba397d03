"""Augmentation-consistency pseudo-labeling and self-training.

A sample earns a pseudo label only if all four augmented views (identity,
hflip, treverse, hflip of treverse) predict the same class and every view's
max probability clears the confidence threshold. Accepted candidates are
balanced per class by keeping the top_k most confident, and the adapter is
then trained on them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adapters import Checkpoint, adapted_predict
from .embeddings import EmbeddingSet
from .events import EventStream, hflip, treverse
from .train import FeatureSample, TrainConfig, train_adapter

AUGMENTATIONS = ("identity", "hflip", "treverse", "hflip_treverse")
REJECTION_REASONS = ("inconsistent", "low_confidence", "crowded_out")

UNSUPERVISED_THRESHOLD = 0.999
SEMI_SUPERVISED_THRESHOLD = 0.5
DEFAULT_TOP_K = 30


@dataclass(frozen=True)
class PseudoLabelConfig:
    conf_threshold: float = UNSUPERVISED_THRESHOLD
    top_k: int = DEFAULT_TOP_K

    def __post_init__(self):
        if not 0.0 < self.conf_threshold < 1.0:
            raise ValueError("conf_threshold must be in (0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


def default_config(mode: str) -> PseudoLabelConfig:
    """Per-mode default: a very strict gate unsupervised, a loose one when
    a trained few-shot model generates the candidates."""
    if mode == "unsupervised":
        return PseudoLabelConfig(UNSUPERVISED_THRESHOLD)
    if mode == "semi_supervised":
        return PseudoLabelConfig(SEMI_SUPERVISED_THRESHOLD)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class PseudoLabelRecord:
    """Outcome of the four-view consistency check for one sample.

    label is the agreed class whenever all four views agree (even for
    records later rejected), else None.
    """

    sample_id: str
    preds: tuple[int, int, int, int]
    confs: tuple[float, float, float, float]
    verdict: str
    label: int | None
    mean_confidence: float
    reason: str | None = None

    def __post_init__(self):
        if self.verdict not in ("accepted", "rejected"):
            raise ValueError(f"bad verdict {self.verdict!r}")
        if self.verdict == "accepted":
            if self.reason is not None or self.label is None:
                raise ValueError("accepted records carry a label, no reason")
            if len(set(self.preds)) != 1:
                raise ValueError("accepted record with disagreeing views")
        elif self.reason not in REJECTION_REASONS:
            raise ValueError(f"bad rejection reason {self.reason!r}")


def _augmented_views(stream: EventStream):
    yield stream
    yield hflip(stream)
    yield treverse(stream)
    yield hflip(treverse(stream))


def label_candidates(streams, predict_fn, cfg: PseudoLabelConfig,
                     ) -> list[PseudoLabelRecord]:
    """Run the four-view agreement-and-confidence gate over streams.

    predict_fn maps an EventStream to a class-probability vector. Accepts a
    sample iff all four argmaxes agree and the minimum of the four max
    probabilities is at least conf_threshold.
    """
    records = []
    for stream in streams:
        preds, confs = [], []
        for view in _augmented_views(stream):
            probs = np.asarray(predict_fn(view), dtype=np.float64)
            preds.append(int(np.argmax(probs)))
            confs.append(float(probs.max()))
        preds_t = tuple(preds)
        confs_t = tuple(confs)
        mean_conf = float(np.mean(confs))
        agreed = len(set(preds_t)) == 1
        label = preds_t[0] if agreed else None
        if not agreed:
            verdict, reason = "rejected", "inconsistent"
        elif min(confs_t) >= cfg.conf_threshold:
            verdict, reason = "accepted", None
        else:
            verdict, reason = "rejected", "low_confidence"
        records.append(PseudoLabelRecord(stream.sample_id, preds_t, confs_t,
                                         verdict, label, mean_conf, reason))
    return records


def select_top_k(records, cfg: PseudoLabelConfig) -> list[PseudoLabelRecord]:
    """Keep the top_k accepted records per class by mean confidence.

    Ties break toward the lexicographically lowest sample id. Records beyond
    the cap are rewritten as rejected(crowded_out); order is preserved.
    """
    by_class: dict[int, list[PseudoLabelRecord]] = {}
    for r in records:
        if r.verdict == "accepted":
            by_class.setdefault(r.label, []).append(r)
    crowded: set[str] = set()
    for label, group in by_class.items():
        group.sort(key=lambda r: (-r.mean_confidence, r.sample_id))
        crowded.update(r.sample_id for r in group[cfg.top_k:])
    return [replace(r, verdict="rejected", reason="crowded_out")
            if r.sample_id in crowded else r for r in records]


def accepted_records(records) -> list[PseudoLabelRecord]:
    return [r for r in records if r.verdict == "accepted"]


def write_report_csv(records, sink) -> None:
    """CSV rows id,label,mean_confidence,verdict,reason (label blank when
    the four views disagreed)."""
    sink.write("id,label,mean_confidence,verdict,reason\n")
    for r in records:
        label = "" if r.label is None else str(r.label)
        reason = r.reason or ""
        sink.write(f"{r.sample_id},{label},{r.mean_confidence:.6f},"
                   f"{r.verdict},{reason}\n")


@dataclass(frozen=True)
class SelfTrainReport:
    mode: str
    num_unlabeled: int
    num_accepted: int
    acceptance_rate: float
    per_class_counts: dict[int, int]
    rejected_inconsistent: int
    rejected_low_confidence: int
    rejected_crowded_out: int
    purity: float | None
    baseline_purity: float | None


def _zero_shot_predictor(encode_fn, text_w, logit_scale):
    def fn(stream):
        return adapted_predict(encode_fn(stream), None, text_w, logit_scale)
    return fn


def _checkpoint_predictor(encode_fn, ckpt: Checkpoint, logit_scale):
    def fn(stream):
        return adapted_predict(encode_fn(stream), ckpt.visual, ckpt.text_w,
                               logit_scale)
    return fn


def self_train(unlabeled, labeled=None, cfg: PseudoLabelConfig | None = None,
               train_cfg: TrainConfig | None = None, *, encode_fn, text,
               logit_scale: float | None = None, arch=None, kind="joint"):
    """Pseudo-label unlabeled streams and train an adapter on the result.

    Unsupervised mode labels with the zero-shot model and trains from
    scratch. Semi-supervised mode first trains on the labeled shots, labels
    with that model, then retrains from the few-shot checkpoint on the
    labeled and pseudo-labeled samples together.

    Returns (checkpoint, records, report). Ground-truth stream labels, when
    present on every stream, are used only for the purity fields.
    """
    unlabeled = list(unlabeled)
    labeled = list(labeled) if labeled else []
    if not unlabeled:
        raise ValueError("no unlabeled streams")
    mode = "semi_supervised" if labeled else "unsupervised"
    cfg = cfg or default_config(mode)
    train_cfg = train_cfg or TrainConfig()
    if isinstance(text, EmbeddingSet):
        if logit_scale is None:
            logit_scale = text.logit_scale
        text_vectors = text.vectors
    else:
        text_vectors = np.asarray(text)
    if logit_scale is None:
        logit_scale = 100.0
    text_w0 = np.asarray(text_vectors, dtype=np.float64)

    few_shot_ckpt = None
    labeled_samples = [FeatureSample(s.sample_id, s.label, encode_fn(s))
                       for s in labeled]
    if mode == "semi_supervised":
        few_shot_ckpt, _ = train_adapter(labeled_samples, text_vectors,
                                         train_cfg, kind, logit_scale,
                                         arch=arch)
        predictor = _checkpoint_predictor(encode_fn, few_shot_ckpt,
                                          logit_scale)
    else:
        predictor = _zero_shot_predictor(encode_fn, text_w0, logit_scale)

    records = select_top_k(label_candidates(unlabeled, predictor, cfg), cfg)
    accepted = accepted_records(records)
    if not accepted:
        counts = {reason: sum(1 for r in records if r.reason == reason)
                  for reason in REJECTION_REASONS}
        raise ValueError(f"no samples accepted for pseudo-labeling: {counts}")

    by_id = {s.sample_id: s for s in unlabeled}
    pseudo_samples = [FeatureSample(r.sample_id, r.label,
                                    encode_fn(by_id[r.sample_id]))
                      for r in accepted]
    train_set = labeled_samples + pseudo_samples
    ckpt, _ = train_adapter(train_set, text_vectors, train_cfg, kind,
                            logit_scale, arch=arch, init=few_shot_ckpt)

    per_class: dict[int, int] = {}
    for r in accepted:
        per_class[r.label] = per_class.get(r.label, 0) + 1
    truth_known = all(s.label is not None for s in unlabeled)
    purity = baseline = None
    if truth_known:
        purity = float(np.mean([r.label == by_id[r.sample_id].label
                                for r in accepted]))
        baseline = float(np.mean(
            [r.preds[0] == by_id[r.sample_id].label for r in records]))
    report = SelfTrainReport(
        mode=mode, num_unlabeled=len(unlabeled), num_accepted=len(accepted),
        acceptance_rate=len(accepted) / len(unlabeled),
        per_class_counts=per_class,
        rejected_inconsistent=sum(1 for r in records
                                  if r.reason == "inconsistent"),
        rejected_low_confidence=sum(1 for r in records
                                    if r.reason == "low_confidence"),
        rejected_crowded_out=sum(1 for r in records
                                 if r.reason == "crowded_out"),
        purity=purity, baseline_purity=baseline)
    return ckpt, records, report
