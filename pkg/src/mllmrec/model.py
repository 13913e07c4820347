"""Dual-MLP preference model trained with BPR.

Users and items each pass through their own two-layer MLP
(``LeakyReLU(x W1 + b1) W2 + b2``); the score is the dot product of the two
projections. Inputs (encoded preferences and propagated item features) are
frozen, so only the MLP weights are learned. Gradients are derived by hand.
"""

from __future__ import annotations

import io
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from mllmrec.config import TrainConfig
from mllmrec.corpus import DatasetSplit, InteractionMatrix
from mllmrec.embedder import BadMagic, read_matrix, write_matrix
from mllmrec.errors import NonFinite, ShapeMismatch

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams(*(getattr(self, n).copy() for n in PARAM_NAMES))


@dataclass
class ModelParams:
    user: MlpParams
    item: MlpParams

    def named(self) -> Iterator[tuple[str, np.ndarray]]:
        for side in ("user", "item"):
            mlp = getattr(self, side)
            for n in PARAM_NAMES:
                yield f"{side}.{n}", getattr(mlp, n)

    def copy(self) -> "ModelParams":
        return ModelParams(self.user.copy(), self.item.copy())

    def map(self, fn) -> "ModelParams":
        return ModelParams(*(MlpParams(*(fn(getattr(getattr(self, s), n)) for n in PARAM_NAMES))
                             for s in ("user", "item")))

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray]) -> "ModelParams":
        return cls(*(MlpParams(*(named[f"{s}.{n}"] for n in PARAM_NAMES))
                     for s in ("user", "item")))


def xavier_init(d_t: int, d1: int, d: int, seed: int) -> ModelParams:
    """Uniform Xavier weights and zero biases for both MLPs."""
    rng = np.random.default_rng(seed)

    def mlp():
        b1 = np.sqrt(6.0 / (d_t + d1))
        b2 = np.sqrt(6.0 / (d1 + d))
        return MlpParams(rng.uniform(-b1, b1, size=(d_t, d1)), np.zeros(d1),
                         rng.uniform(-b2, b2, size=(d1, d)), np.zeros(d))

    return ModelParams(mlp(), mlp())


def leaky_relu(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z >= 0, z, slope * z)


def mlp_forward(p: MlpParams, x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    """Project one row vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.W1.shape[0]:
        raise ShapeMismatch(f"input width {x.shape[-1]} != W1 rows {p.W1.shape[0]}")
    if p.W2.shape[0] != p.W1.shape[1] or p.b1.shape != (p.W1.shape[1],) \
            or p.b2.shape != (p.W2.shape[1],):
        raise ShapeMismatch("inconsistent MLP parameter shapes")
    return leaky_relu(x @ p.W1 + p.b1, slope) @ p.W2 + p.b2


def score(h_u: np.ndarray, h_i: np.ndarray) -> float:
    h_u, h_i = np.asarray(h_u), np.asarray(h_i)
    if h_u.shape != h_i.shape:
        raise ShapeMismatch(f"{h_u.shape} vs {h_i.shape}")
    return float(h_u @ h_i)


def _forward_cache(p: MlpParams, x: np.ndarray, slope: float):
    z = x @ p.W1 + p.b1
    a = leaky_relu(z, slope)
    return a @ p.W2 + p.b2, (x, z, a)


def _backward(p: MlpParams, cache, dh: np.ndarray, slope: float) -> MlpParams:
    x, z, a = cache
    dW2 = a.T @ dh
    db2 = dh.sum(axis=0)
    da = dh @ p.W2.T
    dz = da * np.where(z >= 0, 1.0, slope)
    dW1 = x.T @ dz
    db1 = dz.sum(axis=0)
    return MlpParams(dW1, db1, dW2, db2)


def bpr_loss_and_grads(params: ModelParams, user_embeds: np.ndarray, item_embeds: np.ndarray,
                       batch: np.ndarray, slope: float = 0.01,
                       weight_decay: float = 0.0) -> tuple[float, ModelParams]:
    """Summed BPR loss over ``batch`` (rows of ``(u, i_pos, i_neg)``) and its gradient.

    With ``weight_decay > 0`` the term ``weight_decay * sum ||theta||^2`` is added.
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    m = batch.shape[0]
    # each distinct user/item goes through its MLP once; row gradients are summed back
    users, u_inv = np.unique(batch[:, 0], return_inverse=True)
    items, i_inv = np.unique(batch[:, 1:].T.reshape(-1), return_inverse=True)
    Hu, cu = _forward_cache(params.user, user_embeds[users], slope)
    Hi, ci = _forward_cache(params.item, item_embeds[items], slope)
    hu = Hu[u_inv]
    hp, hn = Hi[i_inv[:m]], Hi[i_inv[m:]]
    gap = np.einsum("ij,ij->i", hu, hp - hn)
    # -log sigmoid(x) = log(1 + exp(-x)), stable for large |x|
    loss = float(np.logaddexp(0.0, -gap).sum())
    # d loss / d gap = -sigmoid(-gap)
    g = -np.exp(-np.logaddexp(0.0, gap))
    dHu = np.zeros_like(Hu)
    np.add.at(dHu, u_inv, g[:, None] * (hp - hn))
    dHi = np.zeros_like(Hi)
    np.add.at(dHi, i_inv, np.concatenate([g[:, None] * hu, -g[:, None] * hu]))
    grads = ModelParams(_backward(params.user, cu, dHu, slope),
                        _backward(params.item, ci, dHi, slope))
    if weight_decay:
        loss += weight_decay * sum(float(np.sum(v * v)) for _, v in params.named())
        theta = dict(params.named())
        grads = ModelParams.from_named({k: g_ + 2.0 * weight_decay * theta[k]
                                        for k, g_ in grads.named()})
    if not np.isfinite(loss) or not all(np.all(np.isfinite(v)) for _, v in grads.named()):
        raise NonFinite("BPR loss or gradient is not finite")
    return loss, grads


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0


ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_init(params: ModelParams) -> AdamState:
    return AdamState(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float,
              t: int) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state, inputs untouched."""
    if t < 1:
        raise ValueError("t must be >= 1")
    p, g, m, v = (dict(x.named()) for x in (params, grads, state.m, state.v))
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for k in p:
        if g[k].shape != p[k].shape or m[k].shape != p[k].shape:
            raise ShapeMismatch(f"{k}: param {p[k].shape}, grad {g[k].shape}")
        new_m[k] = ADAM_BETA1 * m[k] + (1 - ADAM_BETA1) * g[k]
        new_v[k] = ADAM_BETA2 * v[k] + (1 - ADAM_BETA2) * g[k] * g[k]
        new_p[k] = p[k] - lr * (new_m[k] / c1) / (np.sqrt(new_v[k] / c2) + ADAM_EPS)
    return (ModelParams.from_named(new_p),
            AdamState(ModelParams.from_named(new_m), ModelParams.from_named(new_v), t))


class TripletSampler:
    """Uniform (user, positive) pairs with rejection-sampled negatives."""

    def __init__(self, train: InteractionMatrix):
        if train.n_interactions == 0:
            raise ValueError("empty training matrix")
        self.n_items = train.n_items
        self.users, self.items = train.pairs()
        self._keys = np.sort(self.users * train.n_items + self.items)
        full = np.flatnonzero(train.degrees()[0] >= train.n_items)
        if full.size:
            raise ValueError(f"user {int(full[0])} interacted with every item; no negatives")

    def _observed(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = users * self.n_items + items
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, self._keys.size - 1)
        return self._keys[pos] == keys

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        pick = rng.integers(0, self.users.size, size=batch_size)
        u, i = self.users[pick], self.items[pick]
        neg = rng.integers(0, self.n_items, size=batch_size)
        bad = self._observed(u, neg)
        while bad.any():
            neg[bad] = rng.integers(0, self.n_items, size=int(bad.sum()))
            bad = self._observed(u, neg)
        return np.stack([u, i, neg], axis=1)


def sample_triplets(train: InteractionMatrix, batch_size: int,
                    rng: np.random.Generator) -> np.ndarray:
    return TripletSampler(train).sample(batch_size, rng)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    recall20: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord]
    best_epoch: int
    state: AdamState
    stopped_early: bool = False
    seconds: float = 0.0


def train(split: DatasetSplit, user_embeds: np.ndarray, item_embeds: np.ndarray,
          cfg: TrainConfig, validate: Callable[[ModelParams], float] | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Fit both MLPs with BPR + Adam, early-stopping on validation Recall@20.

    ``validate`` maps parameters to the score tracked for early stopping; by
    default it is Recall@20 on the validation split with train items masked.
    """
    user_embeds = np.asarray(user_embeds, dtype=np.float64)
    item_embeds = np.asarray(item_embeds, dtype=np.float64)
    if user_embeds.shape[0] != split.n_users or item_embeds.shape[0] != split.n_items:
        raise ShapeMismatch("embedding rows do not match the split's user/item counts")
    if user_embeds.shape[1] != item_embeds.shape[1]:
        raise ShapeMismatch("user and item embeddings must share a width")
    if validate is None:
        from mllmrec.evaluate import validation_recall
        validate = lambda p: validation_recall(p, split, user_embeds, item_embeds,  # noqa: E731
                                               k=20, slope=cfg.leaky_slope)

    started = time.perf_counter()
    params = xavier_init(user_embeds.shape[1], cfg.d1, cfg.d, cfg.seed)
    state = adam_init(params)
    rng = np.random.default_rng(cfg.seed)
    sampler = TripletSampler(split.train)
    n_pairs = split.train.n_interactions
    batch_size = min(cfg.batch_size, n_pairs)
    n_batches = -(-n_pairs // batch_size)

    history: list[EpochRecord] = []
    best, best_epoch, best_params = -np.inf, 0, params.copy()
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        for _ in range(n_batches):
            batch = sampler.sample(batch_size, rng)
            loss, grads = bpr_loss_and_grads(params, user_embeds, item_embeds, batch,
                                             cfg.leaky_slope, cfg.weight_decay)
            params, state = adam_step(params, grads, state, cfg.learning_rate, state.t + 1)
            total += loss
        recall = float(validate(params))
        history.append(EpochRecord(epoch, total / (n_batches * batch_size), recall))
        if log:
            log(f"epoch {epoch:4d} loss {history[-1].loss:.6f} valid R@20 {recall:.4f}")
        if recall > best:
            best, best_epoch, best_params, stale = recall, epoch, params.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(best_params, history, best_epoch, state,
                       stopped_early=len(history) < cfg.max_epochs,
                       seconds=time.perf_counter() - started)


def write_history(history: list[EpochRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,loss,recall20\n")
        for r in history:
            fh.write(f"{r.epoch},{r.loss!r},{r.recall20!r}\n")


def read_history(path: str | Path) -> list[EpochRecord]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    out = []
    for row in rows:
        e, l, r = row.split(",")
        out.append(EpochRecord(int(e), float(l), float(r)))
    return out


# checkpoint container ----------------------------------------------------------
# b"CKP1", u32 section count, then per section: u16 name length, utf-8 name,
# u64 byte length, and an EMB1 matrix record of that length.

CKPT_MAGIC = b"CKP1"


def save_checkpoint(path: str | Path, params: ModelParams, state: AdamState | None = None,
                    epoch: int = 0, precision: int = 64) -> None:
    sections: list[tuple[str, np.ndarray]] = [(f"param.{k}", v) for k, v in params.named()]
    if state is not None:
        sections += [(f"adam_m.{k}", v) for k, v in state.m.named()]
        sections += [(f"adam_v.{k}", v) for k, v in state.v.named()]
        sections.append(("adam_t", np.array([[float(state.t)]])))
    sections.append(("epoch", np.array([[float(epoch)]])))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(sections)))
        for name, arr in sections:
            buf = io.BytesIO()
            write_matrix(buf, np.atleast_2d(arr), precision)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", buf.tell()))
            fh.write(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, AdamState | None, int]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise BadMagic(f"{path}: not a checkpoint")
        (count,) = struct.unpack("<I", fh.read(4))
        sections: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (size,) = struct.unpack("<Q", fh.read(8))
            sections[name] = read_matrix(io.BytesIO(fh.read(size)))

    def unpack(prefix):
        named = {}
        for k, v in sections.items():
            if k.startswith(prefix):
                key = k[len(prefix):]
                named[key] = v.reshape(-1) if key.endswith(("b1", "b2")) else v
        return ModelParams.from_named(named)

    params = unpack("param.")
    state = None
    if "adam_t" in sections:
        state = AdamState(unpack("adam_m."), unpack("adam_v."), int(sections["adam_t"][0, 0]))
    return params, state, int(sections["epoch"][0, 0])


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    da, db = dict(a.named()), dict(b.named())
    return da.keys() == db.keys() and all(np.array_equal(da[k], db[k]) for k in da)
