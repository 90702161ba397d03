"""Loss, analytic gradients, Adam, LR schedule, and the adapter training loop.

The objective is cross-entropy of the mean-pooled per-window probabilities:
L = -log(mean_i softmax(s * cos(W, adapt(F)_i))[label]), floored at 1e-12.
Gradients are reverse-mode by hand through mean-pooling, row softmax, the
cosine normalizations, and the adapter forward; no autograd framework.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .adapters import (
    ALPHA_JOINT,
    ALPHA_SINGLE,
    Checkpoint,
    MLPAdapterConfig,
    MLPAdapterParams,
    TransformerAdapterConfig,
    TransformerAdapterParams,
    init_text_weights,
    visual_backward,
    visual_forward,
)
from .embeddings import EmbeddingSet

PROB_FLOOR = 1e-12
TRAIN_KINDS = ("visual_transformer", "visual_mlp", "text", "joint")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    peak_lr_visual: float = 2e-4
    peak_lr_text: float = 1e-3
    warmup_fraction: float = 0.05
    alpha: float | None = None  # None picks the per-kind default
    seed: int = 0
    loss_mode: str = "aggregate_ce"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.peak_lr_visual <= 0 or self.peak_lr_text <= 0:
            raise ValueError("learning rates must be positive")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.loss_mode != "aggregate_ce":
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")


@dataclass(frozen=True)
class FeatureSample:
    """One recording's frozen per-window features with its label."""

    sample_id: str
    label: int
    features: np.ndarray  # (M, D) float64

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError("features must be a non-empty M x D matrix")
        if not np.isfinite(f).all():
            raise ValueError(f"non-finite features for {self.sample_id!r}")
        object.__setattr__(self, "features", f)


def _model_forward(F, visual, text_w, logit_scale, cache=None):
    """pbar plus everything the backward pass needs."""
    a = visual_forward(F, visual, cache) if visual is not None else np.asarray(
        F, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nw = np.linalg.norm(text_w, axis=1, keepdims=True)
    if np.any(na == 0.0) or np.any(nw == 0.0):
        raise ValueError("cannot normalize a zero row")
    an, wn = a / na, text_w / nw
    s = logit_scale * (an @ wn.T)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=1, keepdims=True)
    pbar = p.mean(axis=0)
    return pbar, (an, na, wn, nw, p)


def loss(F: np.ndarray, label: int, model: Checkpoint, logit_scale: float,
         text_w: np.ndarray | None = None) -> float:
    """Cross-entropy of the aggregated adapted probabilities."""
    w = model.text_w if model.text_w is not None else text_w
    if w is None:
        raise ValueError("text weights required")
    pbar, _ = _model_forward(F, model.visual, np.asarray(w, np.float64),
                             logit_scale)
    if not 0 <= label < pbar.shape[0]:
        raise ValueError(f"label {label} out of range for K={pbar.shape[0]}")
    return float(-np.log(max(float(pbar[label]), PROB_FLOOR)))


@dataclass
class GradResult:
    """Loss value with gradients for features, visual tensors, and W_tuned."""

    value: float
    features: np.ndarray
    visual: dict[str, np.ndarray] | None
    text: np.ndarray | None


def loss_and_grad(F: np.ndarray, label: int, visual, text_w: np.ndarray,
                  logit_scale: float, want_visual: bool = True,
                  want_text: bool = True) -> GradResult:
    """Loss plus analytic gradients, reverse-mode through the whole chain."""
    F = np.asarray(F, dtype=np.float64)
    text_w = np.asarray(text_w, dtype=np.float64)
    cache: dict = {}
    pbar, (an, na, wn, nw, p) = _model_forward(F, visual, text_w, logit_scale,
                                               cache)
    k = pbar.shape[0]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for K={k}")
    m = p.shape[0]
    pl = float(pbar[label])
    value = -math.log(max(pl, PROB_FLOOR))
    dpbar = np.zeros(k)
    if pl > PROB_FLOOR:
        dpbar[label] = -1.0 / pl
    dp = np.tile(dpbar / m, (m, 1))
    ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
    dan = logit_scale * (ds @ wn)
    da = (dan - an * (an * dan).sum(axis=1, keepdims=True)) / na
    visual_grads = None
    if visual is not None:
        d_features, grads = visual_backward(da, visual, cache)
        if want_visual:
            visual_grads = grads
    else:
        d_features = da
    text_grad = None
    if want_text:
        dwn = logit_scale * (ds.T @ an)
        text_grad = (dwn - wn * (wn * dwn).sum(axis=1, keepdims=True)) / nw
    return GradResult(value, d_features, visual_grads, text_grad)


@dataclass
class AdamState:
    """First/second moment accumulators shaped like the parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in tensors.items()},
                   {k: np.zeros_like(a) for k, a in tensors.items()})


def adam_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Validates before mutating."""
    for name, arr in tensors.items():
        g = grads.get(name)
        if g is None or g.shape != arr.shape:
            raise ValueError(f"gradient missing or misshaped for {name!r}")
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for {name!r}")
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for name, arr in tensors.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        mhat = state.m[name] / b1c
        vhat = state.v[name] / b2c
        arr -= lr * mhat / (np.sqrt(vhat) + state.eps)


def lr_at(step: int, total_steps: int, peak: float,
          warmup_fraction: float = 0.05) -> float:
    """Linear 0->peak over ceil(wf*total) steps, cosine peak->0 after."""
    if not 0 <= step <= total_steps:
        raise ValueError("step must be in [0, total_steps]")
    warmup = math.ceil(warmup_fraction * total_steps)
    if step <= warmup:
        return peak * step / warmup if warmup else peak
    progress = (step - warmup) / (total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def sample_few_shot(dataset, shots_per_class: int, seed: int) -> list:
    """Pick `shots` samples per class, deterministic given seed.

    Classes with fewer samples contribute everything they have, with a
    warning. Items need `label` and `sample_id` attributes.
    """
    items = list(dataset)
    if not items:
        raise ValueError("empty dataset")
    if shots_per_class < 1:
        raise ValueError("shots_per_class must be >= 1")
    by_label: dict[int, list] = {}
    for it in items:
        by_label.setdefault(it.label, []).append(it)
    rng = np.random.default_rng(seed)
    picked = []
    for label in sorted(by_label):
        group = sorted(by_label[label], key=lambda it: it.sample_id)
        if len(group) < shots_per_class:
            warnings.warn(
                f"class {label} has only {len(group)} samples for "
                f"{shots_per_class} shots; taking all", stacklevel=2)
        order = rng.permutation(len(group))
        picked.extend(group[i] for i in order[:shots_per_class])
    return picked


def _default_visual(kind: str, dim: int, alpha: float):
    if kind in ("visual_transformer", "joint"):
        return TransformerAdapterConfig(dim=dim, alpha=alpha)
    if kind == "visual_mlp":
        return MLPAdapterConfig(dim=dim, ratio=alpha)
    return None


def _init_visual(arch, seed: int):
    if isinstance(arch, TransformerAdapterConfig):
        return TransformerAdapterParams.init(arch, seed)
    if isinstance(arch, MLPAdapterConfig):
        return MLPAdapterParams.init(arch, seed)
    raise TypeError(f"unknown arch {type(arch).__name__}")


def train_adapter(samples, text, cfg: TrainConfig, kind: str,
                  logit_scale: float | None = None, arch=None,
                  init: Checkpoint | None = None):
    """Train an adapter; returns (Checkpoint, loss curve).

    samples: FeatureSample sequence. text: EmbeddingSet or K x D matrix used
    both as frozen class weights and as W_tuned's initializer. Joint mode
    trains the visual adapter at peak_lr_visual and W_tuned at peak_lr_text.
    `init` warm-starts from an existing checkpoint of the same kind instead
    of a fresh seeded initialization (optimizer state starts fresh).
    The loss curve rows are (step, lr, mean batch loss), one per update.
    Bit-deterministic given (seed, cfg, dataset) in single-threaded mode.
    """
    if kind not in TRAIN_KINDS:
        raise ValueError(f"unknown adapter kind {kind!r}")
    samples = list(samples)
    if not samples:
        raise ValueError("empty training set")
    if isinstance(text, EmbeddingSet):
        text_vectors = text.vectors
        if logit_scale is None:
            logit_scale = text.logit_scale
    else:
        text_vectors = np.asarray(text)
    if logit_scale is None:
        logit_scale = 100.0
    k, dim = text_vectors.shape
    for s in samples:
        if s.features.shape[1] != dim:
            raise ValueError(f"sample {s.sample_id!r} has dim "
                             f"{s.features.shape[1]}, expected {dim}")
        if not 0 <= s.label < k:
            raise ValueError(f"sample {s.sample_id!r} label {s.label} "
                             f"out of range for K={k}")

    train_visual = kind in ("visual_transformer", "visual_mlp", "joint")
    train_text = kind in ("text", "joint")
    alpha = cfg.alpha if cfg.alpha is not None else (
        ALPHA_JOINT if kind == "joint" else ALPHA_SINGLE)
    visual = None
    if init is not None:
        if init.kind != kind:
            raise ValueError(f"cannot warm-start {kind} from {init.kind}")
        if train_visual:
            visual = type(init.visual)(
                init.visual.cfg,
                {n: a.copy() for n, a in init.visual.tensors.items()})
        text_w = (init.text_w.copy() if init.text_w is not None
                  else init_text_weights(text_vectors))
    else:
        if train_visual:
            arch = arch or _default_visual(kind, dim, alpha)
            visual = _init_visual(arch, cfg.seed)
        text_w = init_text_weights(text_vectors)

    n = len(samples)
    batches = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * batches
    state_v = AdamState.for_params(visual.tensors) if train_visual else None
    state_t = AdamState.for_params({"w": text_w}) if train_text else None
    rng = np.random.default_rng(cfg.seed)
    curve: list[tuple[int, float, float]] = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(batches):
            batch = [samples[i] for i in order[b * cfg.batch_size:
                                               (b + 1) * cfg.batch_size]]
            acc_v = ({name: np.zeros_like(a) for name, a in
                      visual.tensors.items()} if train_visual else None)
            acc_t = np.zeros_like(text_w) if train_text else None
            batch_loss = 0.0
            for s in batch:
                r = loss_and_grad(
                    s.features, s.label, visual, text_w, logit_scale,
                    want_visual=train_visual, want_text=train_text)
                batch_loss += r.value
                if train_visual:
                    for name in acc_v:
                        acc_v[name] += r.visual[name]
                if train_text:
                    acc_t += r.text
            batch_loss /= len(batch)
            if not math.isfinite(batch_loss):
                raise ValueError(f"non-finite loss at step {step}")
            lr_v = lr_at(step, total_steps, cfg.peak_lr_visual,
                         cfg.warmup_fraction)
            lr_t = lr_at(step, total_steps, cfg.peak_lr_text,
                         cfg.warmup_fraction)
            if train_visual:
                adam_step(visual.tensors,
                          {name: g / len(batch) for name, g in acc_v.items()},
                          state_v, lr_v)
            if train_text:
                adam_step({"w": text_w}, {"w": acc_t / len(batch)}, state_t,
                          lr_t)
            curve.append((step, lr_v if train_visual else lr_t, batch_loss))
            step += 1
    return Checkpoint(kind, visual, text_w), curve


def evaluate(samples, ckpt: Checkpoint, logit_scale: float,
             text_w: np.ndarray | None = None) -> float:
    """Top-1 accuracy of a checkpoint over FeatureSamples."""
    from .adapters import adapted_predict

    w = ckpt.text_w if ckpt.text_w is not None else text_w
    if w is None:
        raise ValueError("text weights required")
    samples = list(samples)
    hits = 0
    for s in samples:
        probs = adapted_predict(s.features, ckpt.visual, w, logit_scale)
        hits += int(int(np.argmax(probs)) == s.label)
    return hits / len(samples)
