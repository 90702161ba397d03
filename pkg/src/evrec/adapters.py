"""Trainable feature adapters over frozen per-window embeddings.

Two visual adapters (a permutation-equivariant transformer and an
order-sensitive MLP baseline), tunable text classifier weights, and the ADP1
checkpoint format. Forward and backward passes are written out by hand in
float64; training logic lives in the train module.

The transformer treats the M window features of one recording as M tokens:
project D -> token_width, run pre-LN encoder blocks (x + Attn(LN1(x)), then
+ MLP(LN2(x))) with softmax attention over all tokens and no positional
encoding, project back to D, and mix with the input: alpha*f + (1-alpha)*f~.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

ADP1_MAGIC = b"ADP1"
KINDS = ("visual_transformer", "visual_mlp", "text", "joint")

ALPHA_SINGLE = 0.5
ALPHA_JOINT = 0.8
ALPHA_LARGE_VOCAB = 0.95


@dataclass(frozen=True)
class TransformerAdapterConfig:
    dim: int
    token_width: int = 256
    num_heads: int = 4
    mlp_hidden: int = 1024
    num_blocks: int = 2
    alpha: float = ALPHA_SINGLE

    def __post_init__(self):
        if self.dim < 1 or self.token_width < 1 or self.mlp_hidden < 1:
            raise ValueError("dimensions must be positive")
        if self.num_blocks < 1:
            raise ValueError("need at least one block")
        if self.token_width % self.num_heads != 0:
            raise ValueError("token_width must divide evenly into heads")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")

    @property
    def head_width(self) -> int:
        return self.token_width // self.num_heads


@dataclass(frozen=True)
class MLPAdapterConfig:
    dim: int
    m_max: int = 8
    ratio: float = ALPHA_SINGLE

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.m_max < 1:
            raise ValueError("M_max must be >= 1")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must be in [0, 1]")


def _xavier(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class TransformerAdapterParams:
    cfg: TransformerAdapterConfig
    tensors: dict[str, np.ndarray]

    @classmethod
    def init(cls, cfg: TransformerAdapterConfig, seed: int) -> "TransformerAdapterParams":
        """Xavier-uniform projections, LN scale 1 / shift 0, zero biases."""
        rng = np.random.default_rng(seed)
        d, t, hidden = cfg.dim, cfg.token_width, cfg.mlp_hidden
        p: dict[str, np.ndarray] = {}
        p["in_proj.w"] = _xavier(rng, d, t)
        p["in_proj.b"] = np.zeros(t)
        for k in range(cfg.num_blocks):
            pre = f"blocks.{k}."
            p[pre + "ln1.g"] = np.ones(t)
            p[pre + "ln1.b"] = np.zeros(t)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + "attn." + name] = _xavier(rng, t, t)
                p[pre + "attn." + name.replace("w", "b")] = np.zeros(t)
            p[pre + "ln2.g"] = np.ones(t)
            p[pre + "ln2.b"] = np.zeros(t)
            p[pre + "mlp.w1"] = _xavier(rng, t, hidden)
            p[pre + "mlp.b1"] = np.zeros(hidden)
            p[pre + "mlp.w2"] = _xavier(rng, hidden, t)
            p[pre + "mlp.b2"] = np.zeros(t)
        p["out_proj.w"] = _xavier(rng, t, d)
        p["out_proj.b"] = np.zeros(d)
        return cls(cfg, p)


@dataclass
class MLPAdapterParams:
    cfg: MLPAdapterConfig
    tensors: dict[str, np.ndarray]

    @classmethod
    def init(cls, cfg: MLPAdapterConfig, seed: int) -> "MLPAdapterParams":
        rng = np.random.default_rng(seed)
        d = cfg.dim
        return cls(cfg, {
            "global.w": _xavier(rng, cfg.m_max * d, d),
            "global.b": np.zeros(d),
            "fuse.w": _xavier(rng, d, d),
            "fuse.b": np.zeros(d),
        })


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return xhat * g + b, (xhat, inv_std)


def _layer_norm_backward(dy, cache, g):
    xhat, inv_std = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def _heads(x, h):
    m, t = x.shape
    return x.reshape(m, h, t // h).transpose(1, 0, 2)


def _unheads(x):
    h, m, dh = x.shape
    return x.transpose(1, 0, 2).reshape(m, h * dh)


def _attention(x, p, pre, cfg, cache):
    q = x @ p[pre + "attn.wq"] + p[pre + "attn.bq"]
    k = x @ p[pre + "attn.wk"] + p[pre + "attn.bk"]
    v = x @ p[pre + "attn.wv"] + p[pre + "attn.bv"]
    qh, kh, vh = (_heads(a, cfg.num_heads) for a in (q, k, v))
    scale = 1.0 / np.sqrt(cfg.head_width)
    scores = qh @ kh.transpose(0, 2, 1) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    ctx = _unheads(attn @ vh)
    out = ctx @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
    cache[pre + "attn"] = (x, qh, kh, vh, attn, ctx, scale)
    return out


def _attention_backward(dout, p, pre, cfg, cache, grads):
    x, qh, kh, vh, attn, ctx, scale = cache[pre + "attn"]
    grads[pre + "attn.wo"] = ctx.T @ dout
    grads[pre + "attn.bo"] = dout.sum(axis=0)
    dctx = _heads(dout @ p[pre + "attn.wo"].T, cfg.num_heads)
    dattn = dctx @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ dctx
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dqh = dscores @ kh * scale
    dkh = dscores.transpose(0, 2, 1) @ qh * scale
    dx = np.zeros_like(x)
    for name, dh in (("wq", dqh), ("wk", dkh), ("wv", dvh)):
        flat = _unheads(dh)
        grads[pre + "attn." + name] = x.T @ flat
        grads[pre + "attn." + name.replace("w", "b")] = flat.sum(axis=0)
        dx += flat @ p[pre + "attn." + name].T
    return dx


def transformer_forward(F: np.ndarray, params: TransformerAdapterParams,
                        cache: dict | None = None) -> np.ndarray:
    """Adapted features alpha*F + (1-alpha)*out_proj(encoder(in_proj(F)))."""
    cfg, p = params.cfg, params.tensors
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] != cfg.dim:
        raise ValueError(f"features must be M x {cfg.dim}")
    if F.shape[0] < 1:
        raise ValueError("need at least one feature row")
    track = cache is not None
    c: dict = {} if not track else cache
    x = F @ p["in_proj.w"] + p["in_proj.b"]
    c["in"] = F
    for k in range(cfg.num_blocks):
        pre = f"blocks.{k}."
        normed1, ln1c = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        att = _attention(normed1, p, pre, cfg, c)
        x1 = x + att
        normed2, ln2c = _layer_norm(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h1 = normed2 @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]
        hg = _gelu(h1)
        x = x1 + hg @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
        c[pre + "ln1"] = ln1c
        c[pre + "ln2"] = ln2c
        c[pre + "state"] = (normed1, x1, normed2, h1, hg)
    out = x @ p["out_proj.w"] + p["out_proj.b"]
    c["enc_out"] = x
    return cfg.alpha * F + (1.0 - cfg.alpha) * out


def transformer_backward(d_star: np.ndarray, params: TransformerAdapterParams,
                         cache: dict) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of a scalar loss wrt input features and every tensor."""
    cfg, p = params.cfg, params.tensors
    grads: dict[str, np.ndarray] = {}
    d_star = np.asarray(d_star, dtype=np.float64)
    dout = (1.0 - cfg.alpha) * d_star
    dF = cfg.alpha * d_star.copy()
    x = cache["enc_out"]
    grads["out_proj.w"] = x.T @ dout
    grads["out_proj.b"] = dout.sum(axis=0)
    dx = dout @ p["out_proj.w"].T
    for k in reversed(range(cfg.num_blocks)):
        pre = f"blocks.{k}."
        normed1, x1, normed2, h1, hg = cache[pre + "state"]
        grads[pre + "mlp.w2"] = hg.T @ dx
        grads[pre + "mlp.b2"] = dx.sum(axis=0)
        dhg = dx @ p[pre + "mlp.w2"].T
        dh1 = dhg * _gelu_grad(h1)
        grads[pre + "mlp.w1"] = normed2.T @ dh1
        grads[pre + "mlp.b1"] = dh1.sum(axis=0)
        dnormed2 = dh1 @ p[pre + "mlp.w1"].T
        dx1, dg2, db2 = _layer_norm_backward(dnormed2, cache[pre + "ln2"],
                                             p[pre + "ln2.g"])
        grads[pre + "ln2.g"] = dg2
        grads[pre + "ln2.b"] = db2
        dx1 = dx1 + dx  # residual around the MLP
        datt = dx1
        dnormed1 = _attention_backward(datt, p, pre, cfg, cache, grads)
        dxa, dg1, db1 = _layer_norm_backward(dnormed1, cache[pre + "ln1"],
                                             p[pre + "ln1.g"])
        grads[pre + "ln1.g"] = dg1
        grads[pre + "ln1.b"] = db1
        dx = dx1 + dxa  # residual around attention
    F = cache["in"]
    grads["in_proj.w"] = F.T @ dx
    grads["in_proj.b"] = dx.sum(axis=0)
    dF += dx @ p["in_proj.w"].T
    return dF, grads


def mlp_forward(F: np.ndarray, params: MLPAdapterParams,
                cache: dict | None = None) -> np.ndarray:
    """Global-feature MLP baseline: out_i = r*f_i + (1-r)*fuse(f_i + g).

    g is one projection of all M rows zero-padded to M_max, so the output
    depends on row order (unlike the transformer path).
    """
    cfg, p = params.cfg, params.tensors
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] != cfg.dim:
        raise ValueError(f"features must be M x {cfg.dim}")
    m = F.shape[0]
    if m < 1:
        raise ValueError("need at least one feature row")
    if m > cfg.m_max:
        raise ValueError(f"M={m} exceeds M_max={cfg.m_max}")
    padded = np.zeros((cfg.m_max, cfg.dim))
    padded[:m] = F
    flat = padded.ravel()
    g = flat @ p["global.w"] + p["global.b"]
    z = (F + g) @ p["fuse.w"] + p["fuse.b"]
    out = cfg.ratio * F + (1.0 - cfg.ratio) * z
    if cache is not None:
        cache.update(F=F, flat=flat, g=g)
    return out


def mlp_backward(d_out: np.ndarray, params: MLPAdapterParams,
                 cache: dict) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    cfg, p = params.cfg, params.tensors
    F, flat, g = cache["F"], cache["flat"], cache["g"]
    m = F.shape[0]
    d_out = np.asarray(d_out, dtype=np.float64)
    dz = (1.0 - cfg.ratio) * d_out
    grads = {
        "fuse.w": (F + g).T @ dz,
        "fuse.b": dz.sum(axis=0),
    }
    dfg = dz @ p["fuse.w"].T
    dg = dfg.sum(axis=0)
    grads["global.w"] = np.outer(flat, dg)
    grads["global.b"] = dg
    dflat = (p["global.w"] @ dg).reshape(cfg.m_max, cfg.dim)
    dF = cfg.ratio * d_out + dfg + dflat[:m]
    return dF, grads


def visual_forward(F, params, cache=None):
    if isinstance(params, TransformerAdapterParams):
        return transformer_forward(F, params, cache)
    if isinstance(params, MLPAdapterParams):
        return mlp_forward(F, params, cache)
    raise TypeError(f"unknown adapter params {type(params).__name__}")


def visual_backward(d_out, params, cache):
    if isinstance(params, TransformerAdapterParams):
        return transformer_backward(d_out, params, cache)
    if isinstance(params, MLPAdapterParams):
        return mlp_backward(d_out, params, cache)
    raise TypeError(f"unknown adapter params {type(params).__name__}")


def init_text_weights(text_vectors: np.ndarray) -> np.ndarray:
    """Tunable W initialized as an exact copy of the text embeddings."""
    w = np.asarray(text_vectors, dtype=np.float64).copy()
    if w.ndim != 2:
        raise ValueError("text weights must be K x D")
    return w


def l2_rows(x: np.ndarray) -> np.ndarray:
    """Normalize each row to unit L2 norm; zero rows are an error."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero row")
    return x / norms


def adapted_predict(F: np.ndarray, visual, text_w: np.ndarray,
                    logit_scale: float) -> np.ndarray:
    """Adapt features, renormalize, classify per row, mean-pool.

    With alpha=1 and text_w equal to the original text embeddings this is
    bit-compatible with the plain zero-shot path.
    """
    from .zeroshot import classify_features

    a = np.asarray(F, dtype=np.float64)
    if visual is not None:
        a = visual_forward(a, visual)
    return classify_features(l2_rows(a), l2_rows(np.asarray(text_w, np.float64)),
                             logit_scale)


@dataclass
class Checkpoint:
    """Trained adapter state: a visual adapter, text weights, or both."""

    kind: str
    visual: TransformerAdapterParams | MLPAdapterParams | None = None
    text_w: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown adapter kind {self.kind!r}")
        needs_visual = self.kind in ("visual_transformer", "visual_mlp", "joint")
        if needs_visual and self.visual is None:
            raise ValueError(f"kind {self.kind} requires visual params")
        if not needs_visual and self.visual is not None:
            raise ValueError(f"kind {self.kind} must not carry visual params")
        if self.kind in ("text", "joint") and self.text_w is None:
            raise ValueError(f"kind {self.kind} requires text weights")


def save_checkpoint(ckpt: Checkpoint, sink) -> None:
    """ADP1: magic, JSON shape header, then f64 blobs in declaration order."""
    header: dict = {"kind": ckpt.kind, "visual": None, "params": [],
                    "text_shape": None}
    blobs: list[bytes] = []
    if ckpt.visual is not None:
        vtype = ("transformer" if isinstance(ckpt.visual, TransformerAdapterParams)
                 else "mlp")
        header["visual"] = {"type": vtype, "cfg": asdict(ckpt.visual.cfg)}
        for name, arr in ckpt.visual.tensors.items():
            header["params"].append([name, list(arr.shape)])
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    if ckpt.text_w is not None:
        header["text_shape"] = list(ckpt.text_w.shape)
        blobs.append(np.ascontiguousarray(ckpt.text_w, dtype="<f8").tobytes())
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    sink.write(ADP1_MAGIC + struct.pack("<I", len(raw)) + raw)
    for b in blobs:
        sink.write(b)


def load_checkpoint(source) -> Checkpoint:
    data = source if isinstance(source, bytes) else source.read()
    if len(data) < 8 or data[:4] != ADP1_MAGIC:
        raise ValueError("bad ADP1 magic")
    (hlen,) = struct.unpack_from("<I", data, 4)
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError("corrupt ADP1 header") from exc
    off = 8 + hlen
    buf = io.BytesIO(data[off:])

    def take(shape):
        n = int(np.prod(shape)) if shape else 1
        raw = buf.read(n * 8)
        if len(raw) != n * 8:
            raise ValueError("truncated ADP1 blob")
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    visual = None
    if header["visual"] is not None:
        cfg_fields = header["visual"]["cfg"]
        tensors = {name: take(shape) for name, shape in header["params"]}
        if header["visual"]["type"] == "transformer":
            visual = TransformerAdapterParams(TransformerAdapterConfig(**cfg_fields),
                                              tensors)
        else:
            visual = MLPAdapterParams(MLPAdapterConfig(**cfg_fields), tensors)
    text_w = take(header["text_shape"]) if header["text_shape"] else None
    if buf.read(1):
        raise ValueError("trailing bytes after ADP1 blobs")
    return Checkpoint(header["kind"], visual, text_w)
