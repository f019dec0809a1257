"""Attention-based multiple-instance classifier, implemented from scratch.

A bag of tile embeddings is pushed through a small MLP, pooled with a learned
softmax attention, and mapped to a single probability:

    h_j = MLP(e_j)
    u_j = w^T tanh(V h_j)                  (gated: w^T (tanh(V h_j) * sigmoid(U h_j)))
    a   = softmax(u)
    z   = sum_j a_j h_j
    prob = sigmoid(c^T z + b)

All gradients are derived by hand (reverse mode) and checked against central
finite differences in the test suite.  Training uses Adam, binary cross
entropy with label smoothing, fresh random bags per epoch, and selects the
epoch with the lowest validation loss.  Every random choice flows from named
streams off the config seed, so training is reproducible bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfbenchError, FormatError, derive_stream

_PROB_CLAMP = 1e-7

CKPT_MAGIC = b"CBMD"
CKPT_VERSION = 1


class ShapeMismatch(ConfbenchError):
    """Bag embedding width does not match the model."""


class DomainError(ConfbenchError):
    """A probability of exactly 0 or 1 reached the loss."""


class EmptySplit(ConfbenchError):
    """Training requires non-empty train and val splits."""


@dataclass(frozen=True)
class AbmilConfig:
    """Model and optimization knobs.  Defaults are the small desk scale."""

    layer_widths: tuple[int, ...] = (32, 16)
    attention_dim: int = 8
    gated: bool = False
    dropout: float = 0.1
    label_smoothing: float = 0.1
    lr: float = 1e-4
    bag_size: int = 64
    bags_per_batch: int = 8
    max_epochs: int = 60
    seed: int = 0

    def validate(self) -> None:
        if not self.layer_widths or any(w < 1 for w in self.layer_widths):
            raise ValueError("layer_widths must be a non-empty tuple of positive ints")
        if self.attention_dim < 1:
            raise ValueError("attention_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.bag_size < 1 or self.bags_per_batch < 1:
            raise ValueError("bag_size and bags_per_batch must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


def full_scale_config(**overrides) -> AbmilConfig:
    """Full-scale preset: deep MLP, big bags, long schedule."""
    base = dict(
        layer_widths=(1024, 1024, 512, 128, 64, 32),
        attention_dim=128,
        dropout=0.1,
        label_smoothing=0.1,
        lr=1e-4,
        bag_size=1024,
        bags_per_batch=32,
        max_epochs=300,
    )
    base.update(overrides)
    return AbmilConfig(**base)


@dataclass(frozen=True)
class EmbeddedWsi:
    """A WSI reduced to its embedding matrix, for training and inference."""

    wsi_id: str
    label: int
    split: str
    embeddings: np.ndarray  # (T, k) float64
    grid_pos: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self) -> None:
        emb = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ValueError(f"embeddings must be (T>=1, k), got shape {emb.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.grid_pos is not None and len(self.grid_pos) != emb.shape[0]:
            raise ValueError("grid_pos length must match the number of tiles")
        object.__setattr__(self, "embeddings", emb)

    @property
    def num_tiles(self) -> int:
        return int(self.embeddings.shape[0])


@dataclass(frozen=True, eq=False)
class AttentionMap:
    """Per-tile attention weights of one prediction; weights sum to 1."""

    wsi_id: str
    weights: np.ndarray
    grid_pos: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("attention weights must be a non-empty 1-D vector")
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError("attention weights must be non-negative and sum to 1 (tol 1e-9)")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.grid_pos is not None:
            object.__setattr__(self, "grid_pos", tuple((int(r), int(c)) for r, c in self.grid_pos))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttentionMap):
            return NotImplemented
        return (
            self.wsi_id == other.wsi_id
            and np.array_equal(self.weights, other.weights)
            and self.grid_pos == other.grid_pos
        )


@dataclass(frozen=True, eq=False)
class Prediction:
    """Model output for one bag."""

    wsi_id: str
    probability: float
    label_hat: int
    attention: AttentionMap


@dataclass(frozen=True)
class TrainLogEntry:
    epoch: int
    train_loss: float
    val_loss: float


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class AbmilModel:
    """Parameter arrays plus the feature standardization fitted at train time."""

    config: AbmilConfig
    input_dim: int
    dense_weights: list[np.ndarray]
    dense_biases: list[np.ndarray]
    attn_v: np.ndarray  # (L, d)
    attn_w: np.ndarray  # (L,)
    attn_u: np.ndarray | None  # (L, d) when gated
    head_w: np.ndarray  # (d,)
    head_b: np.ndarray  # scalar kept as shape-(1,) array
    feat_mean: np.ndarray  # (k,)
    feat_std: np.ndarray  # (k,)

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        """Trainable parameters in a fixed order (optimizers rely on it)."""
        out: list[tuple[str, np.ndarray]] = []
        for i, (w, b) in enumerate(zip(self.dense_weights, self.dense_biases)):
            out.append((f"dense{i}.W", w))
            out.append((f"dense{i}.b", b))
        out.append(("attn.V", self.attn_v))
        if self.attn_u is not None:
            out.append(("attn.U", self.attn_u))
        out.append(("attn.w", self.attn_w))
        out.append(("head.c", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.named_params()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, arr in self.named_params():
            np.copyto(arr, snap[name])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AbmilModel):
            return NotImplemented
        if self.config != other.config or self.input_dim != other.input_dim:
            return False
        mine, theirs = dict(self.named_params()), dict(other.named_params())
        if set(mine) != set(theirs):
            return False
        return (
            all(np.array_equal(mine[k], theirs[k]) for k in mine)
            and np.array_equal(self.feat_mean, other.feat_mean)
            and np.array_equal(self.feat_std, other.feat_std)
        )


def init_model(
    cfg: AbmilConfig,
    input_dim: int,
    feat_mean: np.ndarray | None = None,
    feat_std: np.ndarray | None = None,
) -> AbmilModel:
    """Glorot-uniform weights, zero biases, drawn from the config's init stream."""
    cfg.validate()
    rng = derive_stream(cfg.seed, "abmil/init").generator()

    def glorot(fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    widths = [input_dim, *cfg.layer_widths]
    dense_w = [glorot(widths[i], widths[i + 1], (widths[i], widths[i + 1])) for i in range(len(cfg.layer_widths))]
    dense_b = [np.zeros(widths[i + 1]) for i in range(len(cfg.layer_widths))]
    d = widths[-1]
    attn_v = glorot(d, cfg.attention_dim, (cfg.attention_dim, d))
    attn_u = glorot(d, cfg.attention_dim, (cfg.attention_dim, d)) if cfg.gated else None
    attn_w = glorot(cfg.attention_dim, 1, (cfg.attention_dim,))
    head_w = glorot(d, 1, (d,))
    if feat_mean is None:
        feat_mean = np.zeros(input_dim)
    if feat_std is None:
        feat_std = np.ones(input_dim)
    return AbmilModel(
        config=cfg,
        input_dim=input_dim,
        dense_weights=dense_w,
        dense_biases=dense_b,
        attn_v=attn_v,
        attn_w=attn_w,
        attn_u=attn_u,
        head_w=head_w,
        head_b=np.zeros(1),
        feat_mean=np.asarray(feat_mean, dtype=np.float64),
        feat_std=np.asarray(feat_std, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Forward / loss / backward
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _forward_pass(model: AbmilModel, bag: np.ndarray, masks: list[np.ndarray] | None):
    """Full forward pass keeping intermediates for the backward sweep."""
    bag = np.asarray(bag, dtype=np.float64)
    if bag.ndim != 2 or bag.shape[0] < 1:
        raise ShapeMismatch(f"bag must be (T>=1, k), got shape {bag.shape}")
    if bag.shape[1] != model.input_dim:
        raise ShapeMismatch(f"bag width {bag.shape[1]} != model input dim {model.input_dim}")
    h = (bag - model.feat_mean) / model.feat_std
    inputs, pre_acts = [h], []
    for i, (w, b) in enumerate(zip(model.dense_weights, model.dense_biases)):
        z = h @ w + b
        h = np.maximum(z, 0.0)
        if masks is not None:
            h = h * masks[i]
        pre_acts.append(z)
        inputs.append(h)
    scores = np.tanh(h @ model.attn_v.T)  # (T, L)
    if model.attn_u is not None:
        gates = _sigmoid(h @ model.attn_u.T)
        pre_soft = (scores * gates) @ model.attn_w
    else:
        gates = None
        pre_soft = scores @ model.attn_w
    shifted = pre_soft - pre_soft.max()
    exp = np.exp(shifted)
    attn = exp / exp.sum()
    pooled = attn @ h
    logit = float(model.head_w @ pooled + model.head_b[0])
    prob = float(_sigmoid(logit))
    return {
        "inputs": inputs,
        "pre_acts": pre_acts,
        "h": h,
        "scores": scores,
        "gates": gates,
        "attn": attn,
        "pooled": pooled,
        "prob": prob,
    }


def forward(model: AbmilModel, bag: np.ndarray, *, wsi_id: str = "", grid_pos=None) -> Prediction:
    """Inference-mode prediction for one bag (dropout off)."""
    state = _forward_pass(model, bag, masks=None)
    prob = state["prob"]
    return Prediction(
        wsi_id=wsi_id,
        probability=prob,
        label_hat=int(prob >= 0.5),
        attention=AttentionMap(wsi_id=wsi_id, weights=state["attn"], grid_pos=grid_pos),
    )


def predict_full(model: AbmilModel, wsi: EmbeddedWsi) -> Prediction:
    """Prediction over every tile of a WSI; never subsamples, never drops out."""
    return forward(model, wsi.embeddings, wsi_id=wsi.wsi_id, grid_pos=wsi.grid_pos)


def loss(prob: float, label: int, label_smoothing: float) -> float:
    """Binary cross entropy against the smoothed target y(1-eps) + eps/2."""
    if prob <= 0.0 or prob >= 1.0:
        raise DomainError(f"probability must lie strictly inside (0, 1), got {prob}")
    target = label * (1.0 - label_smoothing) + label_smoothing / 2.0
    p = min(max(prob, _PROB_CLAMP), 1.0 - _PROB_CLAMP)
    return float(-(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)))


def backward(
    model: AbmilModel,
    bag: np.ndarray,
    label: int,
    label_smoothing: float,
    masks: list[np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its gradient for every trainable parameter (reverse mode)."""
    state = _forward_pass(model, bag, masks)
    prob = state["prob"]
    value = loss(prob, label, label_smoothing)
    target = label * (1.0 - label_smoothing) + label_smoothing / 2.0

    # d loss / d logit; zero when the clamp has flattened the loss
    if _PROB_CLAMP < prob < 1.0 - _PROB_CLAMP:
        d_logit = prob - target
    else:
        d_logit = 0.0

    h, attn, pooled = state["h"], state["attn"], state["pooled"]
    scores, gates = state["scores"], state["gates"]
    grads: dict[str, np.ndarray] = {
        "head.c": d_logit * pooled,
        "head.b": np.array([d_logit]),
    }
    d_pooled = d_logit * model.head_w
    d_attn = h @ d_pooled
    d_h = np.outer(attn, d_pooled)

    d_pre_soft = attn * (d_attn - float(attn @ d_attn))  # softmax Jacobian
    if gates is not None:
        gated_scores = scores * gates
        grads["attn.w"] = gated_scores.T @ d_pre_soft
        d_gated = np.outer(d_pre_soft, model.attn_w)
        d_scores = d_gated * gates
        d_gate_pre = d_gated * scores * gates * (1.0 - gates)
        grads["attn.U"] = d_gate_pre.T @ h
        d_h += d_gate_pre @ model.attn_u
    else:
        grads["attn.w"] = scores.T @ d_pre_soft
        d_scores = np.outer(d_pre_soft, model.attn_w)
    d_score_pre = d_scores * (1.0 - scores**2)
    grads["attn.V"] = d_score_pre.T @ h
    d_h += d_score_pre @ model.attn_v

    for i in reversed(range(len(model.dense_weights))):
        if masks is not None:
            d_h = d_h * masks[i]
        d_z = d_h * (state["pre_acts"][i] > 0)
        grads[f"dense{i}.W"] = state["inputs"][i].T @ d_z
        grads[f"dense{i}.b"] = d_z.sum(axis=0)
        d_h = d_z @ model.dense_weights[i].T
    return value, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class _Adam:
    """Adam with bias correction; one state pair per parameter array."""

    def __init__(self, model: AbmilModel, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in model.named_params()}
        self.v = {name: np.zeros_like(arr) for name, arr in model.named_params()}

    def step(self, model: AbmilModel, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, param in model.named_params():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _sample_bag(wsi: EmbeddedWsi, bag_size: int, rng: np.random.Generator) -> np.ndarray:
    if wsi.num_tiles <= bag_size:
        return wsi.embeddings
    idx = rng.choice(wsi.num_tiles, size=bag_size, replace=False)
    return wsi.embeddings[idx]


def _dropout_masks(cfg: AbmilConfig, t: int, rng: np.random.Generator) -> list[np.ndarray] | None:
    if cfg.dropout <= 0.0:
        return None
    keep = 1.0 - cfg.dropout
    return [(rng.random((t, w)) < keep) / keep for w in cfg.layer_widths]


def train(dataset: list[EmbeddedWsi], cfg: AbmilConfig) -> tuple[AbmilModel, list[TrainLogEntry]]:
    """Fit on the train split, keep the epoch with the lowest val loss.

    Each epoch draws one bag per training WSI (bag_size tiles without
    replacement, or every tile when the WSI is smaller) and averages
    gradients over bags_per_batch bags per Adam step.  Validation loss uses
    full, dropout-free forward passes.  max_epochs=0 returns the freshly
    initialized model and an empty log.
    """
    cfg.validate()
    train_wsis = [w for w in dataset if w.split == "train"]
    val_wsis = [w for w in dataset if w.split == "val"]
    if not train_wsis:
        raise EmptySplit("no WSIs in the train split")
    if not val_wsis:
        raise EmptySplit("no WSIs in the val split")
    dims = {w.embeddings.shape[1] for w in dataset}
    if len(dims) != 1:
        raise ShapeMismatch(f"inconsistent embedding widths: {sorted(dims)}")
    k = dims.pop()

    stacked = np.concatenate([w.embeddings for w in train_wsis], axis=0)
    feat_mean = stacked.mean(axis=0)
    feat_std = np.maximum(stacked.std(axis=0), 1e-8)
    model = init_model(cfg, k, feat_mean, feat_std)

    log: list[TrainLogEntry] = []
    if cfg.max_epochs == 0:
        return model, log

    adam = _Adam(model, cfg.lr)
    best_val = np.inf
    best_snap = model.snapshot()
    for epoch in range(1, cfg.max_epochs + 1):
        order_rng = derive_stream(cfg.seed, f"abmil/epoch-{epoch}/order").generator()
        order = order_rng.permutation(len(train_wsis))
        batch_losses = []
        for start in range(0, len(order), cfg.bags_per_batch):
            batch = order[start : start + cfg.bags_per_batch]
            total: dict[str, np.ndarray] = {}
            batch_loss = 0.0
            for idx in batch:
                wsi = train_wsis[idx]
                bag_rng = derive_stream(cfg.seed, f"abmil/epoch-{epoch}/bag/{wsi.wsi_id}").generator()
                bag = _sample_bag(wsi, cfg.bag_size, bag_rng)
                drop_rng = derive_stream(cfg.seed, f"abmil/epoch-{epoch}/dropout/{wsi.wsi_id}").generator()
                masks = _dropout_masks(cfg, bag.shape[0], drop_rng)
                value, grads = backward(model, bag, wsi.label, cfg.label_smoothing, masks)
                batch_loss += value
                for name, g in grads.items():
                    if name in total:
                        total[name] += g
                    else:
                        total[name] = g.copy()
            scale = 1.0 / len(batch)
            for name in total:
                total[name] *= scale
            adam.step(model, total)
            batch_losses.append(batch_loss * scale)
        train_loss = float(np.mean(batch_losses))
        val_loss = float(
            np.mean(
                [loss(forward(model, w.embeddings).probability, w.label, cfg.label_smoothing) for w in val_wsis]
            )
        )
        log.append(TrainLogEntry(epoch=epoch, train_loss=train_loss, val_loss=val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_snap = model.snapshot()
    model.restore(best_snap)
    return model, log


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def save_model(model: AbmilModel, path: str | Path) -> None:
    """Binary checkpoint: header with an array shape table, float64 payload."""
    arrays = model.named_params() + [("feat.mean", model.feat_mean), ("feat.std", model.feat_std)]
    config_blob = json.dumps(
        {**dataclasses.asdict(model.config), "input_dim": model.input_dim}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHH", CKPT_MAGIC, CKPT_VERSION, len(arrays)))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        for name, arr in arrays:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<B", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str | Path) -> AbmilModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        magic, version, count = struct.unpack_from("<4sHH", raw, 0)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = struct.calcsize("<4sHH")
    (config_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    config_doc = json.loads(raw[off : off + config_len].decode("utf-8"))
    off += config_len
    input_dim = int(config_doc.pop("input_dim"))
    config_doc["layer_widths"] = tuple(config_doc["layer_widths"])
    cfg = AbmilConfig(**config_doc)

    table: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<B", raw, off)
        off += 1
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        table.append((name, tuple(shape)))

    arrays: dict[str, np.ndarray] = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = size * 8
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload at array {name}")
        arrays[name] = np.frombuffer(raw[off : off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")

    model = init_model(cfg, input_dim)
    expected = {name for name, _ in model.named_params()} | {"feat.mean", "feat.std"}
    if expected != set(arrays):
        raise FormatError(f"{path}: array table does not match the declared config")
    for name, param in model.named_params():
        np.copyto(param, arrays[name])
    np.copyto(model.feat_mean, arrays["feat.mean"])
    np.copyto(model.feat_std, arrays["feat.std"])
    return model
