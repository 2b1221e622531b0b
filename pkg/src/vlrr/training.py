"""SR pre-training, supervised fine-tuning, the plateau schedule and top-k evaluation.

All randomness comes from named sub-streams of one ``RandomState``:

    shuffle/pretrain, shuffle/finetune   keyed by epoch
    augment/lr, augment/hr               input noise, one stream per channel
    dropout/lr, dropout/hr               dropout masks, one stream per channel

Per-channel streams are what make a dual network with no shared filters train
its LR channel exactly like a standalone single-channel network.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import PairSet
from .errors import ConfigError, ParameterError
from .losses import HuberParams, cross_entropy_loss, huber_loss, mse_loss
from .models import Channel, ConvSlot, Network, _Init
from .ops import sgd_step, softmax
from .rng import RandomState

log = logging.getLogger(__name__)

LOSSES = ("mse", "huber")
MODES = ("end_to_end", "layerwise")


@dataclass
class PretrainConfig:
    loss: str = "mse"
    huber_c: float = 1.345
    learning_rate: float = 0.1
    batch_size: int = 128
    max_epochs: int = 10
    mode: str = "end_to_end"
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"pretrain loss must be one of {LOSSES}, got {self.loss!r}")
        if self.mode not in MODES:
            raise ConfigError(f"pretrain mode must be one of {MODES}, got {self.mode!r}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("pretrain learning_rate, batch_size and max_epochs must be nonnegative/positive")
        HuberParams(self.huber_c)

    def loss_fn(self):
        if self.loss == "mse":
            return mse_loss
        params = HuberParams(self.huber_c)
        return lambda pred, target: huber_loss(pred, target, params)


@dataclass
class FinetuneConfig:
    learning_rate: float = 0.1
    anneal: bool = True
    patience: int = 5
    factor: float = 10.0
    min_delta: float = 0.001
    lr_floor: float = 1e-5
    max_epochs: int = 30
    batch_size: int = 128
    noise_sigma: float = 0.05
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.factor <= 1:
            raise ConfigError(f"schedule factor must exceed 1, got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("finetune learning_rate, batch_size and max_epochs must be nonnegative/positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclass
class PlateauSchedule:
    """Divide the learning rate by ``factor`` once validation error stalls.

    Stalling means ``patience`` consecutive epochs without beating the best error
    by at least ``min_delta``. A division that would go below ``floor`` sets
    ``stopped`` instead.
    """

    lr: float
    patience: int = 5
    factor: float = 10.0
    min_delta: float = 0.001
    floor: float = 1e-5
    anneal: bool = True
    best: float = math.inf
    wait: int = 0
    divisions: int = 0
    stopped: bool = False

    @classmethod
    def from_config(cls, config: FinetuneConfig) -> "PlateauSchedule":
        return cls(config.learning_rate, config.patience, config.factor, config.min_delta,
                   config.lr_floor, config.anneal)

    def step(self, val_error: float) -> float:
        if val_error < self.best - self.min_delta:
            self.best = val_error
            self.wait = 0
            return self.lr
        self.best = min(self.best, val_error)
        self.wait += 1
        if self.anneal and self.wait >= self.patience:
            self.wait = 0
            new_lr = self.lr / self.factor
            # relative slack so 0.1 / 10**4 still counts as reaching 1e-5
            if new_lr < self.floor * (1 - 1e-9):
                self.stopped = True
            else:
                self.lr = new_lr
                self.divisions += 1
        return self.lr


def plateau_step(state: PlateauSchedule, validation_error: float) -> float:
    return state.step(validation_error)


def max_divisions(lr_start: float, lr_floor: float, factor: float = 10.0) -> int:
    return math.ceil(math.log(lr_start / lr_floor, factor) - 1e-9)


def evaluate_topk(network: Network, images: np.ndarray, labels: np.ndarray, ks=(1, 5), channel: str = "lr"):
    """Top-k error rates ``{k: error}``; ties go to the lower class index."""
    m5 = network.config.m5
    for k in ks:
        if not 1 <= k <= m5:
            raise ParameterError(f"k={k} outside [1, {m5}]")
    probs = network.predict(images, channel)
    return topk_errors(probs, labels, ks)


def topk_errors(probs: np.ndarray, labels: np.ndarray, ks=(1, 5)) -> dict[int, float]:
    order = np.argsort(-probs, axis=1, kind="stable")
    labels = np.asarray(labels)
    out = {}
    for k in ks:
        hit = (order[:, :k] == labels[:, None]).any(axis=1)
        out[k] = float(1.0 - hit.mean()) if len(labels) else 0.0
    return out


def validation_mask(n: int, fraction: float = 0.1) -> np.ndarray:
    """Deterministic index-hash split: True marks validation samples."""
    if fraction <= 0:
        return np.zeros(n, dtype=bool)
    h = (np.arange(n, dtype=np.uint64) * np.uint64(2654435761)) % np.uint64(2**32)
    return (h.astype(np.float64) / 2**32) < fraction


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _noisy(x: np.ndarray, sigma: float, gen: np.random.Generator) -> np.ndarray:
    return x + gen.normal(0.0, sigma, size=x.shape) if sigma > 0 else x


# --- SR pre-training --------------------------------------------------------

def _check_sr(network: Network, pairs: PairSet):
    if network.kind != "sr":
        raise ConfigError("SR pre-training needs a network ending in a conv4 reconstruction layer")
    if len(pairs) == 0:
        raise ParameterError("pre-training data is empty")


def _reconstruction_epochs(net: Network, pairs: PairSet, config: PretrainConfig, rng: RandomState,
                           trainable=None, stop_at: int = 0, tag: str = "pretrain"):
    loss_fn = config.loss_fn()
    n = len(pairs)
    aug = {ch: rng.stream(f"augment/{ch}") for ch in net.channels}
    history = []
    for epoch in range(config.max_epochs):
        order = rng.stream(f"shuffle/{tag}", epoch).permutation(n)
        total = 0.0
        for idx in _batches(n, config.batch_size, order):
            target = pairs.hr[idx]
            x_lr = _noisy(pairs.lr[idx], config.noise_sigma, aug["lr"])
            out_lr, cache_lr = net.forward(x_lr, "lr", training=True)
            loss, g_lr = loss_fn(out_lr, target)
            if net.dual:
                x_hr = _noisy(target, config.noise_sigma, aug["hr"])
                out_hr, cache_hr = net.forward(x_hr, "hr", training=True)
                loss_hr, g_hr = loss_fn(out_hr, target)
                loss += loss_hr
                grads = net.dual_backward(cache_lr, g_lr, cache_hr, g_hr, stop_at)
            else:
                grads = net.backward(cache_lr, g_lr, stop_at)
            names = grads if trainable is None else [k for k in grads if k in trainable]
            sgd_step(net.params, grads, config.learning_rate, names)
            total += loss * len(idx)
        history.append(total / n)
        log.debug("%s epoch %d loss %.6f", tag, epoch, history[-1])
    return history


def reconstruction_loss(network: Network, pairs: PairSet, loss: str = "mse", huber_c: float = 1.345) -> float:
    """Mean reconstruction loss of the LR->HR channel (summed over channels if dual)."""
    fn = PretrainConfig(loss=loss, huber_c=huber_c).loss_fn()
    total = fn(network.reconstruct(pairs.lr, "lr"), pairs.hr)[0]
    if network.dual:
        total += fn(network.reconstruct(pairs.hr, "hr"), pairs.hr)[0]
    return total


def pretrain_sr(network: Network, pairs: PairSet, config: PretrainConfig, rng: RandomState):
    """Train an SR network (in place) to map LR inputs to HR targets.

    Dual networks additionally learn HR -> HR in their ``hr`` channel; the two
    channel losses are summed. Returns ``(network, per-epoch mean loss)``.
    """
    _check_sr(network, pairs)
    if config.mode == "layerwise":
        return pretrain_layerwise(network, pairs, config, rng)
    return network, _reconstruction_epochs(network, pairs, config, rng)


def pretrain_layerwise(network: Network, pairs: PairSet, config: PretrainConfig, rng: RandomState):
    """Greedy layer-by-layer SR pre-training (in place).

    Stage i trains conv_i plus a temporary single-filter reconstruction head on
    top of the frozen conv_1..conv_{i-1}. The last stage uses the network's own
    conv4 as its head. ``config.max_epochs`` applies per stage. Returns
    ``(network, history)`` where ``history`` concatenates all stages' losses.
    """
    _check_sr(network, pairs)
    cfg = network.config
    history = []
    network.meta["layerwise_stage_losses"] = []
    for stage in range(3):
        params = dict(network.params)  # same arrays: updates land in network
        channels = {}
        trainable = set()
        for ch, chan in network.channels.items():
            slots = list(chan.convs[: stage + 1])
            trainable.update(_slot_names(slots[stage]))
            if stage < 2:
                head = f"tmp{stage + 1}.{ch}"
                _Init(rng).conv(params, head, f"init/tmp{stage + 1}/{ch}", 1, cfg.n[stage], cfg.f4)
                slot = ConvSlot("head", (head,), relu=False)
            else:
                slot = chan.convs[3]
            slots.append(slot)
            trainable.update(_slot_names(slot))
            channels[ch] = Channel(tuple(slots))
        temp = Network(network.variant, cfg, params, channels, network.coupling, network.tied)
        stage_hist = _reconstruction_epochs(
            temp, pairs, config, rng, trainable=trainable, stop_at=stage, tag=f"pretrain/stage{stage + 1}"
        )
        network.meta["layerwise_stage_losses"].append(stage_hist)
        history += stage_hist
    return network, history


def _slot_names(slot: ConvSlot) -> list[str]:
    return [p + s for p in slot.parts for s in (".w", ".b")]


# --- supervised fine-tuning -------------------------------------------------

@dataclass
class Curves:
    rows: list[dict] = field(default_factory=list)

    def add(self, epoch, phase, loss, top1=None, top5=None, lr=None):
        self.rows.append({"epoch": epoch, "phase": phase, "loss": loss, "top1": top1, "top5": top5, "lr": lr})

    def phase(self, name: str) -> list[dict]:
        return [r for r in self.rows if r["phase"] == name]

    def to_csv(self) -> str:
        lines = ["epoch,phase,loss,top1,top5,lr"]
        for r in self.rows:
            cells = [str(r["epoch"]), r["phase"]] + [_fmt(r[k]) for k in ("loss", "top1", "top5", "lr")]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def finetune(network: Network, data: PairSet, config: FinetuneConfig, rng: RandomState,
             val: PairSet | None = None, curves: Curves | None = None):
    """Supervised training of a classifier network (in place).

    Single networks see ``data.lr``; dual networks additionally feed
    ``data.hr`` to their ``hr`` channel and minimise the sum of both channels'
    cross-entropies. Validation (LR channel only) drives the plateau schedule.
    When ``val`` is None a deterministic ``config.val_fraction`` split of
    ``data`` is held out. Returns ``(network, curves)``.
    """
    if network.kind != "classifier":
        raise ConfigError("attach classifier heads before fine-tuning")
    if data.class_count is not None and data.class_count != network.config.m5:
        raise ConfigError(f"dataset has {data.class_count} classes but the network m5={network.config.m5}")
    if data.labels is None:
        raise ConfigError("fine-tuning needs labels")
    if val is None and config.val_fraction > 0:
        mask = validation_mask(len(data), config.val_fraction)
        data, val = data.subset(~mask), data.subset(mask)
    curves = curves if curves is not None else Curves()
    n = len(data)
    ks = tuple(k for k in (1, 5) if k <= network.config.m5)
    sched = PlateauSchedule.from_config(config)
    aug = {ch: rng.stream(f"augment/{ch}") for ch in network.channels}
    drop = {ch: rng.stream(f"dropout/{ch}") for ch in network.channels}
    for epoch in range(config.max_epochs):
        lr_now = sched.lr
        order = rng.stream("shuffle/finetune", epoch).permutation(n)
        total = 0.0
        train_probs = np.empty((n, network.config.m5))
        for idx in _batches(n, config.batch_size, order):
            y = data.labels[idx]
            x_lr = _noisy(data.lr[idx], config.noise_sigma, aug["lr"])
            logits, cache_lr = network.forward(x_lr, "lr", training=True, rng=drop["lr"])
            probs = softmax(logits)
            train_probs[idx] = probs
            loss, g_lr = cross_entropy_loss(probs, y)
            if network.dual:
                x_hr = _noisy(data.hr[idx], config.noise_sigma, aug["hr"])
                logits_hr, cache_hr = network.forward(x_hr, "hr", training=True, rng=drop["hr"])
                loss_hr, g_hr = cross_entropy_loss(softmax(logits_hr), y)
                loss += loss_hr
                grads = network.dual_backward(cache_lr, g_lr, cache_hr, g_hr)
            else:
                grads = network.backward(cache_lr, g_lr)
            sgd_step(network.params, grads, lr_now)
            total += loss * len(idx)
        errs = topk_errors(train_probs, data.labels, ks)
        curves.add(epoch, "finetune/train", total / n, errs.get(1), errs.get(5), lr_now)
        monitor = errs[1]
        if val is not None and len(val):
            val_probs = network.predict(val.lr, "lr")
            val_loss = cross_entropy_loss(val_probs, val.labels)[0]
            verrs = topk_errors(val_probs, val.labels, ks)
            curves.add(epoch, "finetune/val", val_loss, verrs.get(1), verrs.get(5), lr_now)
            monitor = verrs[1]
        log.debug("finetune epoch %d loss %.5f monitor %.4f lr %g", epoch, total / n, monitor, lr_now)
        sched.step(monitor)
        if sched.stopped:
            log.info("learning rate floor reached after epoch %d; stopping", epoch)
            break
    return network, curves
