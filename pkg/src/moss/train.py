"""Supervised training of a motion classifier on top of the multi-order module.

The model is: frozen patch embedding -> multi-order module -> global mean
pool over (T, H, W) -> linear head to 4 logits. The optimizer recipe is
AdamW with decoupled weight decay, linear warmup into cosine decay, and
label smoothing. Training is deterministic given (seed, dataset, config)
in sequential mode.
"""

from __future__ import annotations

import io
import json
import math
import os
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .module import MossConfig, config_from_json, config_to_json, init_params, moss_forward
from .synthdata import LABELS, MotionClip, PatchEmbed, make_patch_embed, patch_embed
from .tensor import ConfigError, OpGraph, Param, ParamStore, read_tensor, write_tensor

N_CLASSES = 4


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.15
    warmup_frac: float = 0.1
    label_smoothing: float = 0.1
    batch: int = 16
    iters: int = 300
    eval_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(
                f"label smoothing must lie in [0, 1), got {self.label_smoothing}"
            )
        if self.lr < 0.0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if int(round(self.warmup_frac * self.iters)) >= self.iters:
            raise ConfigError("warmup must be shorter than the total iteration count")


def train_config_from_json(doc: dict) -> TrainConfig:
    return TrainConfig(**doc)


# ---------------------------------------------------------------------------
# Loss


def cross_entropy_smoothed(logits, label: int, smoothing: float):
    """Label-smoothed cross entropy; returns (loss, dlogits).

    The target distribution puts 1 - s on the true class and s/K elsewhere;
    the gradient is softmax(logits) - target.
    """
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"smoothing must lie in [0, 1), got {smoothing}")
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    log_probs = shifted - log_z
    target = np.full(k, smoothing / k)
    target[label] += 1.0 - smoothing
    loss = float(-(target * log_probs).sum())
    dlogits = np.exp(log_probs) - target
    return loss, dlogits


# ---------------------------------------------------------------------------
# Optimizer


class AdamWState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def buffers(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros_like(like, dtype=np.float64)
            self.v[name] = np.zeros_like(like, dtype=np.float64)
        return self.m[name], self.v[name]


def adamw_step(store: ParamStore, state: AdamWState, t: int, lr: float,
               cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam step over all trainable entries.

    Decay is applied to the parameter before the bias-corrected moment
    update. Raises on non-finite gradients with the offending name.
    """
    if t < 1:
        raise ConfigError(f"step index must be >= 1, got {t}")
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, param in store.entries.items():
        if not param.trainable:
            continue
        grad = param.grad
        if not np.isfinite(grad).all():
            raise FloatingPointError(
                f"non-finite gradient for parameter {name!r} at step {t}"
            )
        if cfg.weight_decay != 0.0:
            param.value -= (lr * cfg.weight_decay) * param.value
        m, v = state.buffers(name, param.value)
        m += (1.0 - cfg.beta1) * (grad - m)
        v += (1.0 - cfg.beta2) * (grad * grad - v)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        param.value -= (lr * update).astype(param.value.dtype)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup, then cosine decay to 0."""
    if not 0 <= iteration < cfg.iters:
        raise ConfigError(f"iteration {iteration} outside 0..{cfg.iters - 1}")
    warmup = int(round(cfg.warmup_frac * cfg.iters))
    if iteration < warmup:
        return cfg.lr * iteration / warmup
    progress = (iteration - warmup) / max(1, cfg.iters - warmup)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Model


HEAD_W = "head.fc.w"
HEAD_B = "head.fc.b"
EMBED_W = "embed.w"
EMBED_B = "embed.b"


def init_model(moss_cfg: MossConfig, seed: int | None = None,
               dtype=np.float32) -> ParamStore:
    """Module parameters plus classifier head plus the frozen patch embedding."""
    store = init_params(moss_cfg, seed, dtype)
    rng = np.random.default_rng(
        np.random.SeedSequence([moss_cfg.seed if seed is None else seed, 0x6ead]))
    c = moss_cfg.channels
    bound = 1.0 / np.sqrt(c)
    store.add(HEAD_W, rng.uniform(-bound, bound, (c, N_CLASSES)).astype(dtype))
    store.add(HEAD_B, np.zeros(N_CLASSES, dtype=dtype))
    embed = make_patch_embed(c, moss_cfg.seed if seed is None else seed, dtype)
    store.add(EMBED_W, embed.weight, trainable=False)
    store.add(EMBED_B, embed.bias, trainable=False)
    return store


def embed_from_store(store: ParamStore) -> PatchEmbed:
    return PatchEmbed(store[EMBED_W].value, store[EMBED_B].value)


def clip_logits(clip: MotionClip, moss_cfg: MossConfig, store: ParamStore,
                mode: str, use_branches: bool = True):
    """Forward one clip to 4 logits; returns (logits node, graph)."""
    f_map = patch_embed(clip.pixels.astype(store[EMBED_W].value.dtype),
                        embed_from_store(store))
    if use_branches:
        y, _, graph = moss_forward(f_map, moss_cfg, store, mode)
    else:
        graph = OpGraph()
        x = graph.input(f_map)
        y = graph.linear(x, graph.param(store, "visual_fc.w"),
                         graph.param(store, "visual_fc.b"))
    pooled = graph.mean_over(y, (0, 1, 2))
    logits = graph.linear(pooled, graph.param(store, HEAD_W),
                          graph.param(store, HEAD_B))
    return logits, graph


def evaluate(clips: list[MotionClip], moss_cfg: MossConfig, store: ParamStore,
             use_branches: bool = True):
    """Eval-mode accuracy; returns (accuracy, per-class accuracy dict)."""
    correct = 0
    per_class: dict[int, list[int]] = {k: [0, 0] for k in LABELS}
    for clip in clips:
        logits, _ = clip_logits(clip, moss_cfg, store, "eval", use_branches)
        pred = int(np.argmax(logits.data))
        per_class[clip.label][1] += 1
        if pred == clip.label:
            correct += 1
            per_class[clip.label][0] += 1
    acc = correct / len(clips)
    per_class_acc = {k: (n_ok / n if n else 0.0)
                     for k, (n_ok, n) in per_class.items()}
    return acc, per_class_acc


@dataclass
class TrainResult:
    metrics: list[dict]
    store: ParamStore
    checkpoint_path: str | None = None


def train_loop(train_clips: list[MotionClip], eval_clips: list[MotionClip],
               moss_cfg: MossConfig, cfg: TrainConfig,
               out_dir: str | None = None, use_branches: bool = True,
               on_metric=None) -> TrainResult:
    """Iteration-count training with per-pass reshuffling.

    Emits one metrics record per iteration (plus held-out accuracy every
    eval_every iterations and at the end). Aborts on non-finite loss,
    retaining the last written checkpoint.
    """
    if not train_clips:
        raise ConfigError("training set is empty")
    store = init_model(moss_cfg, cfg.seed)
    state = AdamWState()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0b41]))
    order: list[int] = []
    metrics: list[dict] = []
    ckpt_path = os.path.join(out_dir, "checkpoint.mossz") if out_dir else None

    def emit(record):
        metrics.append(record)
        if on_metric is not None:
            on_metric(record)

    def save_now():
        if ckpt_path is not None:
            os.makedirs(out_dir, exist_ok=True)
            save_checkpoint(ckpt_path, store, moss_cfg, cfg, metrics)

    for iteration in range(cfg.iters):
        batch = []
        for _ in range(cfg.batch):
            if not order:
                order = list(rng.permutation(len(train_clips)))
            batch.append(train_clips[order.pop()])
        store.zero_grads()
        total_loss = 0.0
        for clip in batch:
            logits, graph = clip_logits(clip, moss_cfg, store, "train", use_branches)
            loss, dlogits = cross_entropy_smoothed(logits.data, clip.label,
                                                   cfg.label_smoothing)
            total_loss += loss
            graph.backward(dlogits.astype(logits.data.dtype) / cfg.batch)
        mean_loss = total_loss / cfg.batch
        if not math.isfinite(mean_loss):
            save_now()
            raise FloatingPointError(
                f"non-finite loss {mean_loss} at iteration {iteration}; "
                f"last checkpoint retained"
            )
        lr = lr_at(iteration, cfg)
        adamw_step(store, state, iteration + 1, lr, cfg)
        record = {"iter": iteration, "loss": mean_loss, "lr": lr}
        if eval_clips and (iteration + 1) % cfg.eval_every == 0:
            acc, _ = evaluate(eval_clips, moss_cfg, store, use_branches)
            record["eval_acc"] = acc
        emit(record)
    if eval_clips and "eval_acc" not in metrics[-1]:
        acc, _ = evaluate(eval_clips, moss_cfg, store, use_branches)
        metrics[-1]["eval_acc"] = acc
    save_now()
    return TrainResult(metrics, store, ckpt_path)


# ---------------------------------------------------------------------------
# Checkpoints: a zip of tensor containers plus the embedded JSON documents.


def save_checkpoint(path: str, store: ParamStore, moss_cfg: MossConfig,
                    train_cfg: TrainConfig | None, metrics: list[dict]) -> None:
    meta = {name: param.trainable for name, param in store.entries.items()}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, param in store.entries.items():
            buf = io.BytesIO()
            write_tensor(buf, param.value)
            zf.writestr(f"params/{name}", buf.getvalue())
        zf.writestr("config/moss.json", json.dumps(config_to_json(moss_cfg)))
        if train_cfg is not None:
            zf.writestr("config/train.json", json.dumps(asdict(train_cfg)))
        zf.writestr("metrics.json", json.dumps(metrics))
        zf.writestr("trainable.json", json.dumps(meta))


def load_checkpoint(path: str):
    """Returns (store, moss_cfg, train_cfg or None, metrics)."""
    with zipfile.ZipFile(path) as zf:
        moss_cfg = config_from_json(json.loads(zf.read("config/moss.json")))
        names = zf.namelist()
        train_cfg = None
        if "config/train.json" in names:
            train_cfg = train_config_from_json(json.loads(zf.read("config/train.json")))
        metrics = json.loads(zf.read("metrics.json"))
        trainable = json.loads(zf.read("trainable.json"))
        store = ParamStore()
        for name in names:
            if not name.startswith("params/"):
                continue
            pname = name[len("params/"):]
            arr = read_tensor(io.BytesIO(zf.read(name)))
            store.add(pname, arr, trainable.get(pname, True))
    return store, moss_cfg, train_cfg, metrics


# ---------------------------------------------------------------------------
# Mean-frame linear probe (appearance-only reference classifier)


def linear_probe_mean_frame(train_clips: list[MotionClip],
                            eval_clips: list[MotionClip],
                            seed: int = 0, iters: int = 400,
                            lr: float = 0.05) -> float:
    """Multinomial logistic regression on per-clip temporal-mean frames.

    Full-batch gradient descent on standardized mean-frame features; the
    returned held-out accuracy measures how much appearance alone reveals
    about the motion label.
    """
    def features(clips):
        x = np.stack([c.pixels.mean(axis=0).reshape(-1) for c in clips])
        return x.astype(np.float64)

    x_train = features(train_clips)
    y_train = np.array([c.label for c in train_clips])
    x_eval = features(eval_clips)
    y_eval = np.array([c.label for c in eval_clips])
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0) + 1e-6
    x_train = (x_train - mu) / sd
    x_eval = (x_eval - mu) / sd

    rng = np.random.default_rng(seed)
    w = rng.standard_normal((x_train.shape[1], N_CLASSES)) * 0.01
    b = np.zeros(N_CLASSES)
    onehot = np.eye(N_CLASSES)[y_train]
    n = x_train.shape[0]
    for _ in range(iters):
        logits = x_train @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        grad = (probs - onehot) / n
        w -= lr * (x_train.T @ grad + 1e-3 * w)
        b -= lr * grad.sum(axis=0)
    pred = np.argmax(x_eval @ w + b, axis=1)
    return float((pred == y_eval).mean())
