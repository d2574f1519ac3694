"""Tri-stream discretized-action student, dual-path loss and training.

The network is small enough that reverse-mode gradients are written out by
over numpy arrays. Training runs in float32 by default; float64 is kept for
gradient checks. Shapes used throughout::

    B  batch rows          V  vocabulary size       D  observation features
    K  chunk length        J  action dims (7)       NB bins per dim (256)

Both loss paths share every parameter; the masked path replaces the pooled
description with the NULL token's embedding.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import ACTION_DIM, BINS, NULL_ID, ChunkedSample, Dataset, DiscretizationSpec, Vocabulary, undiscretize
from .errors import DataError, InputError, TrainingDivergence, TrainingError

log = logging.getLogger(__name__)

DEFAULT_DIM_WEIGHTS = (1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 1.0)
CKPT_MAGIC = b"VLADCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class StudentConfig:
    K: int = 5
    dim_weights: tuple[float, ...] = DEFAULT_DIM_WEIGHTS
    alpha: float = 1.0
    # False trains the no-description baseline: masked path only, weight 1
    descriptions: bool = True
    obs_widths: tuple[int, ...] = (256, 256)
    embed_dim: int = 64
    trunk_widths: tuple[int, ...] = (512, 128)
    lr: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 30
    batch: int = 32
    seed: int = 0
    init_scale_head: float = 0.01
    dtype: str = "float32"

    def __post_init__(self):
        if self.alpha < 0:
            raise InputError("alpha must be >= 0")
        if len(self.dim_weights) != ACTION_DIM:
            raise InputError("dim_weights must have 7 entries")
        if self.dtype not in ("float32", "float64"):
            raise InputError("dtype must be float32 or float64")
        if min(self.obs_widths + self.trunk_widths + (self.embed_dim, self.K, self.batch, self.epochs)) <= 0:
            raise InputError("all widths, K, batch and epochs must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StudentConfig":
        d = dict(d)
        for k in ("dim_weights", "obs_widths", "trunk_widths", "betas"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# --------------------------------------------------------------------------- policy

@dataclass
class StudentPolicy:
    params: dict[str, np.ndarray]
    cfg: StudentConfig
    spec: DiscretizationSpec
    vocab: Vocabulary
    obs_mean: np.ndarray
    obs_std: np.ndarray

    @property
    def obs_dim(self) -> int:
        return self.obs_mean.shape[0]

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def copy(self) -> "StudentPolicy":
        return StudentPolicy({k: v.copy() for k, v in self.params.items()}, self.cfg, self.spec, self.vocab,
                             self.obs_mean.copy(), self.obs_std.copy())


def _layer_names(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i}" for i in range(n)]


def init_policy(cfg: StudentConfig, obs_dim: int, spec: DiscretizationSpec, vocab: Vocabulary,
                obs_mean: np.ndarray | None = None, obs_std: np.ndarray | None = None) -> StudentPolicy:
    rng = np.random.default_rng([cfg.seed, 7])
    p: dict[str, np.ndarray] = {}

    def dense(name, fan_in, fan_out, scale=None):
        s = math.sqrt(2.0 / fan_in) if scale is None else scale
        p[f"{name}.W"] = rng.normal(0.0, s, (fan_in, fan_out))
        p[f"{name}.b"] = np.zeros(fan_out)

    widths = (obs_dim,) + tuple(cfg.obs_widths)
    for i, name in enumerate(_layer_names("enc", len(cfg.obs_widths))):
        dense(name, widths[i], widths[i + 1])
    p["embed"] = rng.normal(0.0, 0.1, (len(vocab), cfg.embed_dim))
    dense("instr", cfg.embed_dim, cfg.embed_dim)
    dense("desc", cfg.embed_dim, cfg.embed_dim)
    widths = (cfg.obs_widths[-1] + 2 * cfg.embed_dim,) + tuple(cfg.trunk_widths)
    for i, name in enumerate(_layer_names("trunk", len(cfg.trunk_widths))):
        dense(name, widths[i], widths[i + 1])
    dense("head", cfg.trunk_widths[-1], cfg.K * ACTION_DIM * spec.bins, scale=cfg.init_scale_head)
    # normalizers are rounded to float32 so a saved checkpoint reproduces the policy exactly
    mean = np.zeros(obs_dim) if obs_mean is None else np.asarray(obs_mean, dtype=np.float32).astype(np.float64)
    std = np.ones(obs_dim) if obs_std is None else np.asarray(obs_std, dtype=np.float32).astype(np.float64)
    p = {k: v.astype(cfg.dtype) for k, v in p.items()}
    return StudentPolicy(p, cfg, spec, vocab, mean, std)


def token_bag(token_lists: Sequence[Sequence[int]] | None, n_rows: int, vocab_size: int) -> np.ndarray:
    """Mean-pooling matrix: row i holds 1/len_i at each token occurrence. None or [] pools NULL."""
    bag = np.zeros((n_rows, vocab_size))
    for i in range(n_rows):
        toks = None if token_lists is None else token_lists[i]
        if toks is None or len(toks) == 0:
            bag[i, NULL_ID] = 1.0
            continue
        toks = np.asarray(toks, dtype=np.int64)
        if toks.min() < 0 or toks.max() >= vocab_size:
            raise InputError(f"token id out of vocabulary range [0, {vocab_size})")
        np.add.at(bag[i], toks, 1.0 / len(toks))
    return bag


@dataclass
class Batch:
    obs: np.ndarray  # (B, D)
    instr_bag: np.ndarray  # (B, V)
    desc_bag: np.ndarray  # (B, V)
    targets: np.ndarray  # (B, K, J) int
    valid: np.ndarray  # (B, K)

    def __len__(self):
        return self.obs.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.instr_bag[idx], self.desc_bag[idx], self.targets[idx], self.valid[idx])

    def astype(self, dtype) -> "Batch":
        c = lambda a: a.astype(dtype, copy=False)  # noqa: E731
        return Batch(c(self.obs), c(self.instr_bag), c(self.desc_bag), self.targets, c(self.valid))


def collate(samples: Sequence[ChunkedSample], vocab_size: int) -> Batch:
    if not samples:
        raise InputError("empty batch")
    n = len(samples)
    return Batch(
        np.stack([s.obs_features for s in samples]).astype(np.float64),
        token_bag([s.instruction_tokens for s in samples], n, vocab_size),
        token_bag([s.description_tokens for s in samples], n, vocab_size),
        np.stack([s.targets for s in samples]).astype(np.int64),
        np.stack([s.valid_mask for s in samples]).astype(np.float64),
    )


def _relu(x):
    return np.maximum(x, 0.0)


def _encode_shared(policy: StudentPolicy, obs: np.ndarray, instr_bag: np.ndarray, cache: dict | None):
    p, cfg = policy.params, policy.cfg
    if obs.ndim != 2 or obs.shape[1] != policy.obs_dim:
        raise InputError(f"observation batch must be (B, {policy.obs_dim}), got {obs.shape}")
    h = ((obs - policy.obs_mean) / policy.obs_std).astype(policy.dtype, copy=False)
    enc_in = []
    for name in _layer_names("enc", len(cfg.obs_widths)):
        enc_in.append(h)
        h = _relu(h @ p[f"{name}.W"] + p[f"{name}.b"])
    pooled_i = instr_bag.astype(policy.dtype, copy=False) @ p["embed"]
    ti = _relu(pooled_i @ p["instr.W"] + p["instr.b"])
    if cache is not None:
        cache.update(enc_in=enc_in, h=h, pooled_i=pooled_i, ti=ti)
    return h, ti


def _desc_stream(policy: StudentPolicy, desc_bag: np.ndarray):
    p = policy.params
    pooled = desc_bag.astype(policy.dtype, copy=False) @ p["embed"]
    return pooled, _relu(pooled @ p["desc.W"] + p["desc.b"])


def _trunk_head(policy: StudentPolicy, z: np.ndarray, cache: dict | None):
    p, cfg = policy.params, policy.cfg
    trunk_in = []
    for name in _layer_names("trunk", len(cfg.trunk_widths)):
        trunk_in.append(z)
        z = _relu(z @ p[f"{name}.W"] + p[f"{name}.b"])
    logits = z @ p["head.W"] + p["head.b"]
    if cache is not None:
        cache.update(trunk_in=trunk_in, head_in=z)
    return logits.reshape(z.shape[0], cfg.K, ACTION_DIM, policy.spec.bins)


def forward(policy: StudentPolicy, obs, instruction_tokens, description_tokens=None) -> np.ndarray:
    """Chunk logits (B, K, 7, bins). ``description_tokens=None`` is the masked (NULL) path.

    Accepts a single sample (1-D obs, flat token lists) or a batch.
    """
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    if single:
        obs = obs[None]
        instruction_tokens = [instruction_tokens]
        description_tokens = None if description_tokens is None else [description_tokens]
    V = len(policy.vocab)
    n = obs.shape[0]
    ibag = token_bag(instruction_tokens, n, V)
    dbag = token_bag(description_tokens, n, V)
    out = forward_bags(policy, obs, ibag, dbag)
    return out[0] if single else out


def forward_bags(policy: StudentPolicy, obs: np.ndarray, instr_bag: np.ndarray, desc_bag: np.ndarray) -> np.ndarray:
    h, ti = _encode_shared(policy, obs, instr_bag, None)
    _, td = _desc_stream(policy, desc_bag)
    return _trunk_head(policy, np.concatenate([h, ti, td], axis=1), None)


# --------------------------------------------------------------------------- loss

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def chunk_ce(logits: np.ndarray, targets: np.ndarray, valid: np.ndarray, dim_weights) -> np.ndarray:
    """Per-row sum_k valid_k sum_j w_j CE(softmax(logits[k, j]), target[k, j])."""
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]  # (B, K, J)
    return -(picked * np.asarray(dim_weights)[None, None, :] * valid[:, :, None]).sum(axis=(1, 2))


@dataclass
class LossParts:
    total: float
    full: float
    img: float


def path_weights(cfg: StudentConfig) -> tuple[float, float]:
    """(weight on L_full, weight on L_img)."""
    if not cfg.descriptions:
        return 0.0, 1.0
    return 1.0, cfg.alpha


def loss(policy: StudentPolicy, sample, cfg: StudentConfig | None = None) -> LossParts:
    """Dual-path loss, averaged over rows when ``sample`` is a Batch."""
    cfg = cfg or policy.cfg
    batch = sample if isinstance(sample, Batch) else collate([sample], len(policy.vocab))
    null_bag = np.zeros_like(batch.desc_bag)
    null_bag[:, NULL_ID] = 1.0
    full = chunk_ce(forward_bags(policy, batch.obs, batch.instr_bag, batch.desc_bag), batch.targets, batch.valid,
                    cfg.dim_weights).mean()
    img = chunk_ce(forward_bags(policy, batch.obs, batch.instr_bag, null_bag), batch.targets, batch.valid,
                   cfg.dim_weights).mean()
    wf, wi = path_weights(cfg)
    return LossParts(wf * full + wi * img, float(full), float(img))


def loss_and_grad(policy: StudentPolicy, batch: Batch, cfg: StudentConfig | None = None):
    """Mean dual-path loss over the batch and exact gradients for every parameter."""
    cfg = cfg or policy.cfg
    p = policy.params
    B = len(batch)
    if B == 0:
        raise InputError("empty batch")
    dt = policy.dtype
    batch = batch.astype(dt)
    wf, wi = path_weights(cfg)
    use_full, use_img = wf > 0, wi > 0
    if not (use_full or use_img):
        use_full = True  # keeps a defined (zero) gradient when both weights vanish

    cache: dict = {}
    h, ti = _encode_shared(policy, batch.obs, batch.instr_bag, cache)
    parts, row_w, desc_rows = [], [], []
    if use_full:
        pooled_d, td = _desc_stream(policy, batch.desc_bag)
        parts.append(np.concatenate([h, ti, td], axis=1))
        row_w.append(np.full(B, wf / B))
        desc_rows.append(("full", pooled_d, td))
    if use_img:
        null_bag = np.zeros((1, len(policy.vocab)), dtype=dt)
        null_bag[0, NULL_ID] = 1.0
        pooled_n, tn = _desc_stream(policy, null_bag)
        parts.append(np.concatenate([h, ti, np.repeat(tn, B, axis=0)], axis=1))
        row_w.append(np.full(B, wi / B))
        desc_rows.append(("null", pooled_n, tn))
    npaths = len(parts)
    z = np.concatenate(parts, axis=0)
    rw = np.concatenate(row_w)
    targets = np.concatenate([batch.targets] * npaths)
    valid = np.concatenate([batch.valid] * npaths)

    logits = _trunk_head(policy, z, cache)
    logp = _log_softmax(logits)
    w = np.asarray(cfg.dim_weights, dtype=dt)
    rw = rw.astype(dt)
    coef = w[None, None, :] * valid[:, :, None]  # (R, K, J)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    row_loss = -(picked * coef).sum(axis=(1, 2))
    total = float((row_loss * rw).sum())
    if not math.isfinite(total):
        raise TrainingError(f"non-finite loss {total} on batch of {B} rows "
                            f"(obs range [{batch.obs.min():.3g}, {batch.obs.max():.3g}])")

    g = {"embed": np.zeros_like(p["embed"]), "desc.W": np.zeros_like(p["desc.W"]),
         "desc.b": np.zeros_like(p["desc.b"])}
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0,
                      axis=-1)
    dlogits *= (coef * rw[:, None, None])[..., None]
    dlogits = dlogits.reshape(z.shape[0], -1)

    a = cache["head_in"]
    g["head.W"] = a.T @ dlogits
    g["head.b"] = dlogits.sum(axis=0)
    da = dlogits @ p["head.W"].T
    names = _layer_names("trunk", len(cfg.trunk_widths))
    out = a
    for i in reversed(range(len(names))):
        name, inp = names[i], cache["trunk_in"][i]
        dpre = da * (out > 0)
        g[f"{name}.W"] = inp.T @ dpre
        g[f"{name}.b"] = dpre.sum(axis=0)
        da = dpre @ p[f"{name}.W"].T
        out = inp
    dz = da  # (npaths*B, obs_w + 2E)
    ow, E = cfg.obs_widths[-1], cfg.embed_dim
    dh = sum(dz[k * B:(k + 1) * B, :ow] for k in range(npaths))
    dti = sum(dz[k * B:(k + 1) * B, ow:ow + E] for k in range(npaths))

    # description streams
    for k, (kind, pooled, td) in enumerate(desc_rows):
        dtd = dz[k * B:(k + 1) * B, ow + E:]
        if kind == "null":
            dtd = dtd.sum(axis=0, keepdims=True)
        dpre = dtd * (td > 0)
        g["desc.W"] += pooled.T @ dpre
        g["desc.b"] += dpre.sum(axis=0)
        dpooled = dpre @ p["desc.W"].T
        if kind == "null":
            g["embed"][NULL_ID] += dpooled[0]
        else:
            g["embed"] += batch.desc_bag.T @ dpooled

    dpre = dti * (ti > 0)
    g["instr.W"] = cache["pooled_i"].T @ dpre
    g["instr.b"] = dpre.sum(axis=0)
    g["embed"] += batch.instr_bag.T @ (dpre @ p["instr.W"].T)

    names = _layer_names("enc", len(cfg.obs_widths))
    out = h
    for i in reversed(range(len(names))):
        name, inp = names[i], cache["enc_in"][i]
        dpre = dh * (out > 0)
        g[f"{name}.W"] = inp.T @ dpre
        g[f"{name}.b"] = dpre.sum(axis=0)
        if i > 0:
            dh = dpre @ p[f"{name}.W"].T
        out = inp
    return total, g


def grad(policy: StudentPolicy, batch: Batch, cfg: StudentConfig | None = None) -> dict[str, np.ndarray]:
    return loss_and_grad(policy, batch, cfg)[1]


# --------------------------------------------------------------------------- optimizer

class AdamW:
    """Adam with decoupled weight decay; biases are not decayed."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self._scratch: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        step_scale = lr / c1
        inv_sqrt_c2 = 1.0 / math.sqrt(c2)
        for k in sorted(params):
            g = grads[k]
            m, v = self.m[k], self.v[k]
            tmp = self._scratch.get(k)
            if tmp is None:
                tmp = self._scratch[k] = np.empty_like(g)
            m *= self.b1
            np.multiply(g, 1.0 - self.b1, out=tmp)
            m += tmp
            v *= self.b2
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.b2
            v += tmp
            if self.wd and not k.endswith(".b"):
                params[k] *= 1.0 - lr * self.wd
            np.sqrt(v, out=tmp)
            tmp *= inv_sqrt_c2
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= step_scale
            params[k] -= tmp


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


# --------------------------------------------------------------------------- training

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_token_acc: float
    lr: float


@dataclass
class TrainResult:
    policy: StudentPolicy
    curve: list[EpochStats] = field(default_factory=list)

    def curve_rows(self) -> list[dict]:
        return [asdict(e) for e in self.curve]


def obs_normalizer(samples: Sequence[ChunkedSample], floor: float = 1e-3):
    x = np.stack([s.obs_features for s in samples])
    return x.mean(axis=0), np.maximum(x.std(axis=0), floor)


def evaluate_batch(policy: StudentPolicy, batch: Batch, cfg: StudentConfig, chunk: int = 512):
    """(mean dual-path loss, next-action token accuracy of the masked path)."""
    if len(batch) == 0:
        return float("nan"), float("nan")
    losses, correct, count = [], 0.0, 0.0
    for s in range(0, len(batch), chunk):
        b = batch.take(slice(s, s + chunk))
        parts = loss(policy, b, cfg)
        losses.append(parts.total * len(b))
        null_bag = np.zeros_like(b.desc_bag)
        null_bag[:, NULL_ID] = 1.0
        pred = forward_bags(policy, b.obs, b.instr_bag, null_bag)[:, 0].argmax(axis=-1)  # (B, J)
        mask = b.valid[:, 0][:, None]
        correct += float(((pred == b.targets[:, 0]) * mask).sum())
        count += float(mask.sum()) * ACTION_DIM
    return sum(losses) / len(batch), correct / max(count, 1.0)


def train(dataset: Dataset | tuple, cfg: StudentConfig, val_fraction: float = 0.1, progress=None) -> TrainResult:
    """AdamW + per-step cosine decay; returns the final policy and per-epoch curve.

    ``dataset`` is a Dataset (split internally by episode) or a (train, val,
    spec, vocab) tuple of pre-split samples.
    """
    from .dataset import split

    if isinstance(dataset, Dataset):
        if dataset.K != cfg.K:
            raise DataError(f"dataset chunk length {dataset.K} != config K {cfg.K}")
        train_s, val_s = split(dataset.samples, val_fraction, cfg.seed)
        spec, vocab = dataset.spec, dataset.vocab
    else:
        train_s, val_s, spec, vocab = dataset
    if not train_s:
        raise DataError("no training samples")
    V = len(vocab)
    tr = collate(train_s, V).astype(cfg.dtype)
    va = collate(val_s, V).astype(cfg.dtype) if val_s else None
    mean, std = obs_normalizer(train_s)
    policy = init_policy(cfg, tr.obs.shape[1], spec, vocab, mean, std)
    opt = AdamW(policy.params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    n = len(tr)
    steps_per_epoch = math.ceil(n / cfg.batch)
    total_steps = steps_per_epoch * cfg.epochs
    rng = np.random.default_rng([cfg.seed, 11])

    result = TrainResult(policy)
    v0, a0 = evaluate_batch(policy, va, cfg) if va is not None else (float("nan"), float("nan"))
    t0_loss = loss(policy, tr.take(slice(0, min(n, 512))), cfg).total
    result.curve.append(EpochStats(0, t0_loss, v0, a0, cfg.lr))
    initial = t0_loss
    bad_epochs = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        run = 0.0
        for s in range(0, n, cfg.batch):
            idx = order[s:s + cfg.batch]
            total, g = loss_and_grad(policy, tr.take(idx), cfg)
            lr = cosine_lr(cfg.lr, step, total_steps)
            opt.step(policy.params, g, lr)
            step += 1
            run += total * len(idx)
        train_loss = run / n
        vl, va_acc = evaluate_batch(policy, va, cfg) if va is not None else (float("nan"), float("nan"))
        result.curve.append(EpochStats(epoch, train_loss, vl, va_acc, lr))
        if progress:
            progress(result.curve[-1])
        log.debug("epoch %d train %.4f val %.4f acc %.4f", epoch, train_loss, vl, va_acc)
        bad_epochs = bad_epochs + 1 if train_loss > 10 * initial else 0
        if bad_epochs >= 3:
            raise TrainingDivergence(f"loss {train_loss:.4g} exceeded 10x initial {initial:.4g} "
                                     f"for 3 consecutive epochs (epoch {epoch})")
    return result


# --------------------------------------------------------------------------- inference

def predict_chunk(policy: StudentPolicy, obs: np.ndarray, instruction_tokens, expected_spec_hash: str | None = None):
    """Continuous actions (B, K, 7) from argmax bins of the masked (NULL description) path."""
    if expected_spec_hash is not None and expected_spec_hash != policy.spec.hash:
        raise DataError(f"checkpoint spec hash {policy.spec.hash} != dataset spec hash {expected_spec_hash}")
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    n = obs.shape[0]
    if instruction_tokens and isinstance(instruction_tokens[0], (int, np.integer)):
        instruction_tokens = [instruction_tokens] * n
    logits = forward(policy, obs, instruction_tokens, None)
    return undiscretize(logits.argmax(axis=-1), policy.spec)


def predict_action(policy: StudentPolicy, obs, instruction_tokens, description=None,
                   expected_spec_hash: str | None = None) -> np.ndarray:
    """7-vector action at chunk offset 0. ``description`` is ignored: deployment runs the NULL path."""
    return predict_chunk(policy, np.asarray(obs)[None], [list(instruction_tokens)], expected_spec_hash)[0, 0]


# --------------------------------------------------------------------------- checkpoint

def _ckpt_blocks(policy: StudentPolicy):
    blocks = [(k, policy.params[k]) for k in sorted(policy.params)]
    blocks += [("norm/obs_mean", policy.obs_mean), ("norm/obs_std", policy.obs_std)]
    return blocks


def save_checkpoint(policy: StudentPolicy, path: str | Path, extra: dict | None = None) -> dict:
    """Layout: b"VLADCKPT" | u32 version | u32 header_len | header JSON | float32 LE blocks.

    Block offsets in the header are relative to the first byte after the header.
    """
    blocks, offset, payload = [], 0, []
    for name, arr in _ckpt_blocks(policy):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        payload.append(data)
        offset += len(data)
    header = {
        "format": "vlad-student",
        "version": CKPT_VERSION,
        "config": policy.cfg.to_dict(),
        "spec": policy.spec.to_dict(),
        "spec_hash": policy.spec.hash,
        "vocab": list(policy.vocab.tokens),
        "vocab_hash": policy.vocab.hash,
        "obs_dim": policy.obs_dim,
        "param_count": policy.param_count,
        "blocks": blocks,
        "extra": extra or {},
    }
    hb = json.dumps(header).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        fh.write(hb)
        for data in payload:
            fh.write(data)
    return header


def load_checkpoint(path: str | Path) -> tuple[StudentPolicy, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path} is not a student checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for b in header["blocks"]:
        buf = raw[base + b["offset"]: base + b["offset"] + b["nbytes"]]
        arrays[b["name"]] = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(b["shape"])
    cfg = StudentConfig.from_dict(header["config"])
    spec = DiscretizationSpec.from_dict(header["spec"])
    vocab = Vocabulary(tuple(header["vocab"]))
    if spec.hash != header["spec_hash"] or vocab.hash != header["vocab_hash"]:
        raise DataError("checkpoint header hashes are inconsistent")
    mean, std = arrays.pop("norm/obs_mean"), arrays.pop("norm/obs_std")
    arrays = {k: v.astype(cfg.dtype) for k, v in arrays.items()}
    policy = StudentPolicy(arrays, cfg, spec, vocab, mean, std)
    return policy, header
