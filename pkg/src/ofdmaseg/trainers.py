"""Adam plus three training procedures: ERM, SWAD and MLDG.

Training minimizes the pixel-mean cross-entropy (the summed loss divided
by the pixel count), which keeps the MLDG inner step on a sane scale.

Data sources are duck-typed: ``len(src)`` and ``src.batch(indices)``
returning ``(images, masks)`` with images (n, C, H, W) in [0, 1] and masks
(n, H, W) of class codes. ``ArraySource`` wraps in-memory arrays;
``dataset.SplitSource`` reads a built dataset from disk.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import segnet
from ._rng import make_rng
from .dataset import DomainSpec  # noqa: F401  (re-exported for callers)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOG_COLUMNS = ("epoch", "iteration", "lr", "train_loss", "val_loss", "val_pixel_acc")

_SHUFFLE_KEY = 11
_MLDG_KEY = 12


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.001
    decay: float = 0.8
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    algorithm: str = "erm"
    patience: int | None = 5
    micro_batch: int = 4
    target_loss: float | None = None
    # SWAD
    swad_switch_epoch: int = 10
    swad_lr: float = 0.001
    swad_tolerance: float = 1.1
    swad_eval_every: int = 1
    swad_val_samples: int | None = None
    # MLDG
    mldg_alpha: float | None = None
    mldg_beta: float = 1.0
    mldg_first_order: bool = False

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.swad_tolerance < 1:
            raise ValueError("swad_tolerance must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.algorithm not in ("erm", "swad", "mldg"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.decay ** epoch

    @classmethod
    def main_protocol(cls, **kw) -> "TrainConfig":
        return cls(**{"lr0": 0.001, "decay": 0.8, "epochs": 20, **kw})

    @classmethod
    def dg_protocol(cls, **kw) -> "TrainConfig":
        return cls(**{"lr0": 0.002, "decay": 0.92, "epochs": 15, **kw})

    def to_dict(self) -> dict:
        return asdict(self)


class ArraySource:
    def __init__(self, images: np.ndarray, masks: np.ndarray):
        images = np.asarray(images)
        if images.dtype == np.uint8:
            images = images.astype(np.float64) / 255.0
        self.images = images
        self.masks = np.asarray(masks).astype(np.int64)
        if len(self.images) != len(self.masks):
            raise ValueError("images and masks differ in length")

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=int)
        return self.images[idx], self.masks[idx]


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, ad.Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """In-place bias-corrected Adam update of every parameter in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in layer {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - ADAM_BETA1) * g if m is None else ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = (1 - ADAM_BETA2) * g * g if v is None else ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def _fit_channels(images: np.ndarray, params) -> np.ndarray:
    c = segnet.in_channels_of(params)
    return images[:, :c] if images.shape[1] > c else images


def loss_and_grads(params, images: np.ndarray, masks: np.ndarray, micro_batch: int = 4) -> tuple[float, dict]:
    """Pixel-mean cross-entropy and its gradient, accumulated over micro-batches."""
    for p in params.values():
        p.grad = None
    images = _fit_channels(images, params)
    n_pix = masks.size
    total = 0.0
    for lo in range(0, len(images), micro_batch):
        logits = segnet.forward(params, images[lo:lo + micro_batch])
        lsum = segnet.loss(logits, masks[lo:lo + micro_batch])
        total += lsum.item()
        ad.backward(ad.mul(lsum, 1.0 / n_pix))
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}
    return total / n_pix, grads


def evaluate(params, source, batch_size: int = 8, limit: int | None = None) -> tuple[float, float]:
    """Pixel-mean loss and pixel accuracy over (the first ``limit`` items of) a source."""
    n = len(source) if limit is None else min(limit, len(source))
    if n == 0:
        return float("nan"), float("nan")
    loss_sum, correct, pixels = 0.0, 0, 0
    for lo in range(0, n, batch_size):
        images, masks = source.batch(np.arange(lo, min(lo + batch_size, n)))
        logits = segnet.forward(params, _fit_channels(images, params))
        loss_sum += segnet.loss(logits, masks).item()
        correct += int(np.sum(np.argmax(logits.data, axis=1) == masks))
        pixels += masks.size
    return loss_sum / pixels, correct / pixels


def _as_sources(x) -> list:
    if x is None:
        return []
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _pooled_batch(sources: Sequence, pairs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Load (domain, index) pairs, keeping their order."""
    images, masks = [], []
    for d, i in pairs:
        im, mk = sources[int(d)].batch([int(i)])
        images.append(im)
        masks.append(mk)
    return np.concatenate(images), np.concatenate(masks)


def _pool(sources: Sequence) -> np.ndarray:
    return np.array([(d, i) for d, s in enumerate(sources) for i in range(len(s))], dtype=np.int64).reshape(-1, 2)


def _snapshot(params) -> dict:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params, arrays: Mapping[str, np.ndarray]) -> None:
    for k, v in arrays.items():
        params[k].data = v.copy()


@dataclass
class TrainResult:
    params: dict
    history: list
    best_epoch: int
    info: dict = field(default_factory=dict)

    def write_log(self, path) -> None:
        write_log(path, self.history)


def write_log(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in LOG_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


class _Selector:
    """Keep the parameters of the best epoch by a score (lower is better)."""

    def __init__(self):
        self.best = math.inf
        self.epoch = -1
        self.arrays = None
        self.stale = 0

    def offer(self, score: float, epoch: int, params) -> None:
        if self.arrays is None or (not math.isnan(score) and score < self.best):
            if not math.isnan(score):
                self.best = score
                self.stale = 0
            self.epoch = epoch
            self.arrays = _snapshot(params)
        else:
            self.stale += 1


def _run_epoch(params, state: AdamState, sources, cfg: TrainConfig, rng, lr: float,
               iteration: int, on_step: Callable | None = None) -> tuple[float, int]:
    pool = _pool(sources)
    order = pool[rng.permutation(len(pool))]
    losses = []
    for lo in range(0, len(order), cfg.batch_size):
        images, masks = _pooled_batch(sources, order[lo:lo + cfg.batch_size])
        loss = erm_step(params, state, images, masks, lr, cfg.micro_batch)
        iteration += 1
        losses.append(loss)
        if on_step is not None and on_step(iteration):
            break
    return float(np.mean(losses)), iteration


def erm_step(params, state: AdamState, images, masks, lr: float, micro_batch: int = 4) -> float:
    """One Adam step on a batch; returns the batch loss before the step."""
    loss, grads = loss_and_grads(params, images, masks, micro_batch)
    adam_step(params, grads, state, lr)
    return loss


def _validate(params, val_sources, cfg: TrainConfig, limit=None) -> tuple[float, float]:
    if not val_sources or sum(len(s) for s in val_sources) == 0:
        return float("nan"), float("nan")
    res = [evaluate(params, s, cfg.batch_size, limit) for s in val_sources if len(s)]
    w = np.array([min(len(s), limit or len(s)) for s in val_sources if len(s)], dtype=float)
    return float(np.average([r[0] for r in res], weights=w)), float(np.average([r[1] for r in res], weights=w))


def _check_train(sources) -> None:
    if not sources or sum(len(s) for s in sources) == 0:
        raise ValueError("training split is empty")


def train_erm(params, train, val=None, cfg: TrainConfig = TrainConfig(), log_path=None) -> TrainResult:
    """Pooled-minibatch Adam with an exponentially decaying learning rate.

    Returns the parameters of the best-validation epoch (the last epoch when
    there is no validation data). Stops early after ``cfg.patience`` epochs
    without validation improvement, or once the epoch training loss drops
    below ``cfg.target_loss``.
    """
    sources, val_sources = _as_sources(train), _as_sources(val)
    _check_train(sources)
    rng = make_rng(cfg.seed, _SHUFFLE_KEY)
    state = AdamState()
    sel = _Selector()
    history = []
    iteration = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        train_loss, iteration = _run_epoch(params, state, sources, cfg, rng, lr, iteration)
        val_loss, val_acc = _validate(params, val_sources, cfg)
        history.append(dict(epoch=epoch, iteration=iteration, lr=lr, train_loss=train_loss,
                            val_loss=val_loss, val_pixel_acc=val_acc))
        log.info("epoch %d lr %.6g train %.4f val %.4f acc %.4f", epoch, lr, train_loss, val_loss, val_acc)
        sel.offer(val_loss if val_sources else -epoch, epoch, params)
        if cfg.target_loss is not None and train_loss < cfg.target_loss:
            break
        if cfg.patience is not None and sel.stale >= cfg.patience:
            break
    _restore(params, sel.arrays)
    result = TrainResult(params, history, sel.epoch, {"algorithm": "erm"})
    if log_path is not None:
        result.write_log(log_path)
    return result


def swad_window(val_losses: Sequence[float], tolerance: float = 1.1) -> tuple[int, int]:
    """Averaging window ``[start, end)`` over a per-iteration validation trace.

    ``start`` is where the running minimum was attained; ``end`` is the first
    iteration whose loss exceeds ``tolerance`` times that minimum (or the
    trace length when none does).
    """
    best, start = math.inf, 0
    for i, v in enumerate(val_losses):
        if v < best:
            best, start = v, i
        elif v > tolerance * best:
            return start, i
    return start, len(val_losses)


class _MeanAccumulator:
    """Compensated running sum with an error-corrected final division.

    The mean of identical arrays is returned bit-exactly, and the mean of
    two arrays equals ``(a + b) / 2`` in floating point.
    """

    _SPLIT = 134217729.0  # 2**27 + 1

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self.hi = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        self.lo = {k: np.zeros_like(v) for k, v in self.hi.items()}
        self.count = 1

    def add(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, x in arrays.items():
            hi = self.hi[k]
            s = hi + x
            bb = s - hi
            self.lo[k] += (hi - (s - bb)) + (x - bb)
            self.hi[k] = s
        self.count += 1

    def mean(self) -> dict:
        n = float(self.count)
        out = {}
        for k, hi in self.hi.items():
            q = hi / n
            c = self._SPLIT * q
            qh = c - (c - q)
            ql = q - qh
            rem = ((hi - qh * n) - ql * n) + self.lo[k]
            out[k] = q + rem / n
        return out


class SwadAverager:
    """Streaming form of ``swad_window`` that keeps only a running sum."""

    def __init__(self, tolerance: float = 1.1):
        self.tolerance = tolerance
        self.best = math.inf
        self.acc: _MeanAccumulator | None = None
        self.start = None
        self.done = False

    @property
    def count(self) -> int:
        return 0 if self.acc is None else self.acc.count

    def update(self, iteration: int, arrays: Mapping[str, np.ndarray], val_loss: float | None) -> None:
        if self.done:
            return
        if val_loss is not None and val_loss < self.best:
            self.best = val_loss
            self.acc = _MeanAccumulator(arrays)
            self.start = iteration
        elif val_loss is not None and val_loss > self.tolerance * self.best:
            self.done = True
        elif self.acc is not None:
            self.acc.add(arrays)

    def average(self) -> dict | None:
        return None if self.acc is None else self.acc.mean()


def average_snapshots(snapshots: Sequence[Mapping[str, np.ndarray]]) -> dict:
    if not snapshots:
        raise ValueError("no snapshots to average")
    acc = _MeanAccumulator(snapshots[0])
    for s in snapshots[1:]:
        acc.add(s)
    return acc.mean()


def train_swad(params, train, val, cfg: TrainConfig = TrainConfig(), log_path=None) -> TrainResult:
    """ERM warm-up, then constant-lr training with dense weight averaging.

    Phase 1 runs ``cfg.swad_switch_epoch`` ERM epochs. Phase 2 trains at
    ``cfg.swad_lr``, snapshots the weights after every iteration and
    validates every ``cfg.swad_eval_every`` iterations; the output is the
    mean of the snapshots inside the ``swad_window`` rule. Phase 2 ends when
    the window closes or the epoch budget runs out. If no window opened,
    the final epoch's snapshots are averaged and ``info["fallback"]`` is set.
    """
    sources, val_sources = _as_sources(train), _as_sources(val)
    _check_train(sources)
    if not val_sources or sum(len(s) for s in val_sources) == 0:
        raise ValueError("SWAD needs a validation split")
    rng = make_rng(cfg.seed, _SHUFFLE_KEY)
    state = AdamState()
    history = []
    iteration = 0
    n_warm = min(cfg.swad_switch_epoch, cfg.epochs)
    for epoch in range(n_warm):
        lr = cfg.lr_at(epoch)
        train_loss, iteration = _run_epoch(params, state, sources, cfg, rng, lr, iteration)
        val_loss, val_acc = _validate(params, val_sources, cfg)
        history.append(dict(epoch=epoch, iteration=iteration, lr=lr, train_loss=train_loss,
                            val_loss=val_loss, val_pixel_acc=val_acc))

    avg = SwadAverager(cfg.swad_tolerance)
    last_epoch_snaps: list = []
    val_trace: list = []

    def on_step(it: int) -> bool:
        arrays = _snapshot(params)
        last_epoch_snaps.append(arrays)
        vl = None
        if (it - phase2_start) % cfg.swad_eval_every == 0:
            vl, _ = _validate(params, val_sources, cfg, cfg.swad_val_samples)
            val_trace.append((it, vl))
        avg.update(it, arrays, vl)
        return avg.done

    phase2_start = iteration
    for epoch in range(n_warm, cfg.epochs):
        last_epoch_snaps.clear()
        train_loss, iteration = _run_epoch(params, state, sources, cfg, rng, cfg.swad_lr, iteration, on_step)
        val_loss, val_acc = _validate(params, val_sources, cfg)
        history.append(dict(epoch=epoch, iteration=iteration, lr=cfg.swad_lr, train_loss=train_loss,
                            val_loss=val_loss, val_pixel_acc=val_acc))
        if avg.done:
            break

    averaged = avg.average()
    fallback = averaged is None
    if fallback:
        log.warning("SWAD window never opened; averaging the final epoch instead")
        averaged = average_snapshots(last_epoch_snaps) if last_epoch_snaps else _snapshot(params)
    _restore(params, averaged)
    info = {"algorithm": "swad", "fallback": fallback, "window_start": avg.start,
            "window_size": avg.count, "window_closed": avg.done, "val_trace": val_trace}
    result = TrainResult(params, history, len(history) - 1, info)
    if log_path is not None:
        result.write_log(log_path)
    return result


def heldout_schedule(n_domains: int, n_episodes: int, seed: int) -> np.ndarray:
    """Meta-test domain per episode, uniform over the training domains."""
    if n_domains < 2:
        raise ValueError("MLDG needs at least two training domains")
    return make_rng(seed, _MLDG_KEY).integers(0, n_domains, size=n_episodes)


GradFn = Callable[[Mapping[str, np.ndarray]], tuple[float, dict]]


def hessian_vector_product(grad_fn: GradFn, theta: Mapping[str, np.ndarray], v: Mapping[str, np.ndarray],
                           rel_step: float = 1e-4) -> dict:
    """Central difference of the analytic gradient along ``v``."""
    vnorm = math.sqrt(sum(float(np.sum(x * x)) for x in v.values()))
    if vnorm == 0.0:
        return {k: np.zeros_like(x) for k, x in v.items()}
    tnorm = math.sqrt(sum(float(np.sum(x * x)) for x in theta.values()))
    h = rel_step * max(1.0, tnorm) / vnorm
    _, gp = grad_fn({k: theta[k] + h * v[k] for k in theta})
    _, gm = grad_fn({k: theta[k] - h * v[k] for k in theta})
    return {k: (gp[k] - gm[k]) / (2.0 * h) for k in theta}


def mldg_gradient(train_grad_fn: GradFn, meta_grad_fn: GradFn, theta: Mapping[str, np.ndarray],
                  alpha: float, beta: float, second_order: bool = True) -> tuple[dict, float, float]:
    """Gradient of ``L_tr(theta) + beta * L_meta(theta - alpha * grad L_tr(theta))``.

    Chain rule through the inner step: the meta term contributes
    ``(I - alpha * H_tr) g_meta`` with ``g_meta`` taken at the adapted
    weights; the first-order variant drops the Hessian product.
    """
    l_tr, g_tr = train_grad_fn(theta)
    if beta == 0.0:
        return g_tr, l_tr, float("nan")
    adapted = {k: theta[k] - alpha * g_tr[k] for k in theta}
    l_meta, g_meta = meta_grad_fn(adapted)
    if second_order:
        hv = hessian_vector_product(train_grad_fn, theta, g_meta)
        g_meta = {k: g_meta[k] - alpha * hv[k] for k in theta}
    return {k: g_tr[k] + beta * g_meta[k] for k in theta}, l_tr, l_meta


def _batch_grad_fn(params, images, masks, micro_batch) -> GradFn:
    def fn(theta):
        _restore(params, theta)
        return loss_and_grads(params, images, masks, micro_batch)
    return fn


def mldg_step(params, state: AdamState, train_batch, meta_batch, lr: float, alpha: float, beta: float,
              second_order: bool = True, micro_batch: int = 4) -> float:
    """One MLDG episode update; returns the meta-train loss."""
    theta = _snapshot(params)
    g, l_tr, _ = mldg_gradient(_batch_grad_fn(params, *train_batch, micro_batch),
                               _batch_grad_fn(params, *meta_batch, micro_batch),
                               theta, alpha, beta, second_order)
    _restore(params, theta)
    adam_step(params, g, state, lr)
    return l_tr


def train_mldg(params, domains: Sequence, select=None, cfg: TrainConfig = TrainConfig(),
               log_path=None) -> TrainResult:
    """Episodic meta-learning over training domains.

    Each episode holds out one domain (uniformly), takes a meta-train batch
    pooled from the others and a meta-test batch from the held-out one, and
    steps Adam along ``mldg_gradient``. The inner step size is
    ``cfg.mldg_alpha`` or, when unset, the current outer learning rate.
    ``select`` are the sources used for model selection after every epoch
    (oracle validation: pass the test sweep sets); highest pixel accuracy wins.
    """
    sources = _as_sources(domains)
    if len(sources) < 2:
        raise ValueError("MLDG needs at least two training domains")
    _check_train(sources)
    if any(len(s) == 0 for s in sources):
        raise ValueError("every MLDG training domain needs samples")
    select_sources = _as_sources(select)
    n_total = sum(len(s) for s in sources)
    episodes_per_epoch = max(1, -(-n_total // cfg.batch_size))
    schedule = heldout_schedule(len(sources), episodes_per_epoch * cfg.epochs, cfg.seed)
    rng = make_rng(cfg.seed, _SHUFFLE_KEY)
    state = AdamState()
    sel = _Selector()
    history = []
    episode = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        alpha = lr if cfg.mldg_alpha is None else cfg.mldg_alpha
        losses = []
        for _ in range(episodes_per_epoch):
            held = int(schedule[episode])
            others = [d for d in range(len(sources)) if d != held]
            pool = _pool([sources[d] for d in others])
            pick = pool[rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)]
            pick[:, 0] = np.asarray(others)[pick[:, 0]]
            tr_images, tr_masks = _pooled_batch(sources, pick)
            meta_idx = rng.choice(len(sources[held]), size=min(cfg.batch_size, len(sources[held])), replace=False)
            me_images, me_masks = sources[held].batch(np.sort(meta_idx))
            losses.append(mldg_step(params, state, (tr_images, tr_masks), (me_images, me_masks), lr,
                                    alpha, cfg.mldg_beta, not cfg.mldg_first_order, cfg.micro_batch))
            episode += 1
        if select_sources:
            sel_loss, sel_acc = _validate(params, select_sources, cfg)
        else:
            sel_loss, sel_acc = float("nan"), float("nan")
        history.append(dict(epoch=epoch, iteration=episode, lr=lr, train_loss=float(np.mean(losses)),
                            val_loss=sel_loss, val_pixel_acc=sel_acc))
        sel.offer(-sel_acc if select_sources else -epoch, epoch, params)
    _restore(params, sel.arrays)
    result = TrainResult(params, history, sel.epoch,
                         {"algorithm": "mldg", "heldout_counts": np.bincount(schedule, minlength=len(sources)).tolist()})
    if log_path is not None:
        result.write_log(log_path)
    return result


def train(params, cfg: TrainConfig, train_sources, val_sources=None, select_sources=None, log_path=None) -> TrainResult:
    if cfg.algorithm == "erm":
        return train_erm(params, train_sources, val_sources, cfg, log_path)
    if cfg.algorithm == "swad":
        return train_swad(params, train_sources, val_sources, cfg, log_path)
    return train_mldg(params, train_sources, select_sources or val_sources, cfg, log_path)
