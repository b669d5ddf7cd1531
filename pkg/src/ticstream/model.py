"""Two-tower MLP encoders with a symmetric contrastive objective.

Towers are affine->tanh stacks with a final affine layer, outputs row
L2-normalized. Gradients are hand-derived; `finite_diff_grad` is the
independent oracle in the test suite. The similarity-distillation penalty
(KL of teacher similarity rows against student rows, both retrieval
directions) backs the warm-start regularization method.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import AdamState, NumericError, Rng, ShapeError, adam_step, l2_normalize_rows, softmax_rows

INIT_INV_TEMPERATURE = 1.0 / 0.07
MAX_INV_TEMPERATURE = 100.0
CHECKPOINT_MAGIC = b"TICC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    image_dim: int
    text_dim: int
    hidden_dim: int
    embed_dim: int


@dataclass
class TwoTowerParams:
    """Weights for both towers plus the learnable log inverse temperature."""

    image_layers: list[tuple[np.ndarray, np.ndarray]]
    text_layers: list[tuple[np.ndarray, np.ndarray]]
    log_scale: float

    def to_flat(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for tower, layers in (("image", self.image_layers), ("text", self.text_layers)):
            for i, (w, b) in enumerate(layers):
                out[f"{tower}.{i}.W"] = w
                out[f"{tower}.{i}.b"] = b
        out["log_scale"] = np.asarray(self.log_scale, dtype=np.float64)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, np.ndarray]) -> "TwoTowerParams":
        layers = {"image": {}, "text": {}}
        for key, arr in flat.items():
            if key == "log_scale":
                continue
            tower, idx, part = key.split(".")
            layers[tower].setdefault(int(idx), {})[part] = arr
        def build(tower):
            d = layers[tower]
            return [(d[i]["W"], d[i]["b"]) for i in sorted(d)]
        return cls(build("image"), build("text"), float(np.asarray(flat["log_scale"]).reshape(())))

    def copy(self) -> "TwoTowerParams":
        return TwoTowerParams.from_flat({k: v.copy() for k, v in self.to_flat().items()})

    @property
    def embed_dim(self) -> int:
        return self.image_layers[-1][0].shape[1]


@dataclass
class Checkpoint:
    params: TwoTowerParams
    adam: AdamState
    global_step: int
    trained_through_step: int
    method_id: str


def init_params(dims: ModelDims, rng: Rng) -> TwoTowerParams:
    """Xavier-uniform weights, zero biases, inverse temperature 1/0.07."""
    def tower(chain, sub):
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(chain[:-1], chain[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            u = sub.uniform(fan_in * fan_out).reshape(fan_in, fan_out)
            w = (2.0 * u - 1.0) * limit
            layers.append((w, np.zeros(fan_out)))
        return layers

    image = tower([dims.image_dim, dims.hidden_dim, dims.embed_dim], rng.split("image"))
    text = tower([dims.text_dim, dims.hidden_dim, dims.embed_dim], rng.split("text"))
    return TwoTowerParams(image, text, float(np.log(INIT_INV_TEMPERATURE)))


def _tower_forward(layers, x):
    """Returns (raw output, caches) where caches hold per-layer inputs/activations."""
    caches = []
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < len(layers) - 1:
            a = np.tanh(z)
            caches.append((h, a))
            h = a
        else:
            caches.append((h, None))
            h = z
    return h, caches


def _tower_backward(layers, caches, d_out):
    """Gradients for one tower given d(loss)/d(raw output)."""
    grads = [None] * len(layers)
    d = d_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        inp, act = caches[i]
        if act is not None:  # tanh layer: d arrived at activation output
            d = d * (1.0 - act * act)
        grads[i] = (inp.T @ d, d.sum(axis=0))
        d = d @ w.T
    return grads


def _normalize_with_cache(raw):
    norms = np.sqrt((raw * raw).sum(axis=1, keepdims=True))
    if np.any(norms <= 1e-12):
        raise NumericError("zero-norm embedding row")
    return raw / norms, norms


def _normalize_backward(d_unit, unit, norms):
    # d(raw) for u = raw/|raw|
    return (d_unit - (d_unit * unit).sum(axis=1, keepdims=True) * unit) / norms


def encode(params: TwoTowerParams, inputs: np.ndarray, tower: str) -> np.ndarray:
    """Row-normalized embeddings from one tower."""
    layers = params.image_layers if tower == "image" else params.text_layers
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != layers[0][0].shape[0]:
        raise ShapeError(f"encode: input shape {inputs.shape} incompatible with tower {tower}")
    raw, _ = _tower_forward(layers, inputs)
    return l2_normalize_rows(raw)


def _encode_with_caches(params, images, texts):
    raw_u, cache_u = _tower_forward(params.image_layers, np.asarray(images, dtype=np.float64))
    raw_v, cache_v = _tower_forward(params.text_layers, np.asarray(texts, dtype=np.float64))
    u, nu = _normalize_with_cache(raw_u)
    v, nv = _normalize_with_cache(raw_v)
    return u, v, (cache_u, nu), (cache_v, nv)


def _grads_from_dlogits(params, u, v, ctx_u, ctx_v, d_logits, scale, d_log_scale_extra=0.0):
    """Backprop d(loss)/d(logits) through scale, normalization, and both towers."""
    cache_u, nu = ctx_u
    cache_v, nv = ctx_v
    d_u = scale * (d_logits @ v)
    d_v = scale * (d_logits.T @ u)
    d_log_scale = scale * float((d_logits * (u @ v.T)).sum()) + d_log_scale_extra
    d_raw_u = _normalize_backward(d_u, u, nu)
    d_raw_v = _normalize_backward(d_v, v, nv)
    g_img = _tower_backward(params.image_layers, cache_u, d_raw_u)
    g_txt = _tower_backward(params.text_layers, cache_v, d_raw_v)
    grads = {}
    for tower, gs in (("image", g_img), ("text", g_txt)):
        for i, (gw, gb) in enumerate(gs):
            grads[f"{tower}.{i}.W"] = gw
            grads[f"{tower}.{i}.b"] = gb
    grads["log_scale"] = np.asarray(d_log_scale, dtype=np.float64)
    return grads


def clip_loss_and_grads(params: TwoTowerParams, images: np.ndarray, texts: np.ndarray):
    """Symmetric contrastive loss with diagonal targets and its gradients."""
    images = np.asarray(images, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if texts.shape[0] != n:
        raise ShapeError("image/text batch sizes differ")
    u, v, ctx_u, ctx_v = _encode_with_caches(params, images, texts)
    scale = float(np.exp(params.log_scale))
    logits = scale * (u @ v.T)
    # one exponential serves both softmax directions; logits are bounded by
    # the clamped scale so a global max shift cannot overflow
    e = np.exp(logits - logits.max())
    p_rows = e / e.sum(axis=1, keepdims=True)
    p_cols = e / e.sum(axis=0, keepdims=True)
    diag = np.arange(n)
    loss = 0.5 * (
        -np.log(p_rows[diag, diag]).mean() - np.log(p_cols[diag, diag]).mean()
    )
    d_logits = (0.5 / n) * (p_rows + p_cols)
    d_logits[diag, diag] -= 1.0 / n
    grads = _grads_from_dlogits(params, u, v, ctx_u, ctx_v, d_logits, scale)
    return float(loss), grads


def lwf_penalty_and_grads(
    teacher: TwoTowerParams,
    student: TwoTowerParams,
    images: np.ndarray,
    texts: np.ndarray,
    lam: float,
):
    """KL(teacher rows || student rows) of the similarity matrix, both directions.

    Gradients flow to the student only.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    images = np.asarray(images, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    ut = encode(teacher, images, "image")
    vt = encode(teacher, texts, "text")
    t_logits = float(np.exp(teacher.log_scale)) * (ut @ vt.T)
    et = np.exp(t_logits - t_logits.max())
    pt_rows = et / et.sum(axis=1, keepdims=True)
    pt_cols = et / et.sum(axis=0, keepdims=True)

    u, v, ctx_u, ctx_v = _encode_with_caches(student, images, texts)
    scale = float(np.exp(student.log_scale))
    s_logits = scale * (u @ v.T)
    es = np.exp(s_logits - s_logits.max())
    qs_rows = es / es.sum(axis=1, keepdims=True)
    qs_cols = es / es.sum(axis=0, keepdims=True)

    kl_rows = float((pt_rows * (np.log(pt_rows) - np.log(qs_rows))).sum(axis=1).mean())
    kl_cols = float((pt_cols * (np.log(pt_cols) - np.log(qs_cols))).sum(axis=0).mean())
    penalty = lam * 0.5 * (kl_rows + kl_cols)
    d_logits = lam * 0.5 * ((qs_rows - pt_rows) / n + (qs_cols - pt_cols) / n)
    grads = _grads_from_dlogits(student, u, v, ctx_u, ctx_v, d_logits, scale)
    return penalty, grads


def clamp_log_scale(params: TwoTowerParams) -> TwoTowerParams:
    params.log_scale = min(params.log_scale, float(np.log(MAX_INV_TEMPERATURE)))
    return params


def train_minibatch(
    ckpt: Checkpoint,
    images: np.ndarray,
    texts: np.ndarray,
    lr: float,
    lwf: tuple[TwoTowerParams, float] | None = None,
) -> tuple[Checkpoint, dict]:
    """One forward/backward/Adam step; returns the new checkpoint and a loss record."""
    loss, grads = clip_loss_and_grads(ckpt.params, images, texts)
    penalty = 0.0
    if lwf is not None:
        teacher, lam = lwf
        penalty, pgrads = lwf_penalty_and_grads(teacher, ckpt.params, images, texts, lam)
        for k in grads:
            grads[k] = grads[k] + pgrads[k]
    flat = ckpt.params.to_flat()
    new_flat, new_adam = adam_step(flat, grads, ckpt.adam, lr)
    new_params = clamp_log_scale(TwoTowerParams.from_flat(new_flat))
    new_ckpt = Checkpoint(
        params=new_params,
        adam=new_adam,
        global_step=ckpt.global_step + 1,
        trained_through_step=ckpt.trained_through_step,
        method_id=ckpt.method_id,
    )
    return new_ckpt, {"loss": loss, "penalty": penalty, "lr": lr}


# ---------------------------------------------------------------------------
# Checkpoint file format: magic "TICC", version u32, method id, step counters,
# then named float64 arrays (params followed by Adam moments). Little-endian.
# ---------------------------------------------------------------------------


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        # note: ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(arrays[name], dtype=np.float64, order="C")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def _unpack_arrays(cur: _Cursor) -> dict[str, np.ndarray]:
    count = cur.u32()
    out = {}
    for _ in range(count):
        nlen = cur.u32()
        name = cur.take(nlen).decode("utf-8")
        rank = cur.u32()
        dims = [cur.u32() for _ in range(rank)]
        size = int(np.prod(dims)) if dims else 1
        out[name] = cur.f64s(size).reshape(dims)
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    mid = ckpt.method_id.encode("utf-8")
    head = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    head += struct.pack("<I", len(mid)) + mid
    head += struct.pack("<I", ckpt.trained_through_step)
    head += struct.pack("<Q", ckpt.global_step)
    arrays = dict(ckpt.params.to_flat())
    for k, v in ckpt.adam.first_moment.items():
        arrays[f"adam.m.{k}"] = v
    for k, v in ckpt.adam.second_moment.items():
        arrays[f"adam.v.{k}"] = v
    arrays["adam.meta"] = np.asarray(
        [ckpt.adam.step_count, ckpt.adam.beta1, ckpt.adam.beta2, ckpt.adam.epsilon]
    )
    with open(path, "wb") as f:
        f.write(head + _pack_arrays(arrays))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    cur = _Cursor(buf)
    if cur.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad magic", 0)
    version = cur.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    mlen = cur.u32()
    method_id = cur.take(mlen).decode("utf-8")
    trained_through = cur.u32()
    global_step = cur.u64()
    arrays = _unpack_arrays(cur)
    meta = arrays.pop("adam.meta")
    flat, m, v = {}, {}, {}
    for name, arr in arrays.items():
        if name.startswith("adam.m."):
            m[name[len("adam.m.") :]] = arr
        elif name.startswith("adam.v."):
            v[name[len("adam.v.") :]] = arr
        else:
            flat[name] = arr
    params = TwoTowerParams.from_flat(flat)
    adam = AdamState(m, v, int(meta[0]), float(meta[1]), float(meta[2]), float(meta[3]))
    return Checkpoint(params, adam, global_step, trained_through, method_id)
