"""SGD training for the three design modalities.

* ``from_scratch``: every layer learns at the base rate.
* ``fine_tuning``: every layer learns; the first parameterized layer at one
  tenth of the base rate.
* ``feature_vector``: only the final fully-connected layer learns; the rest
  of the network is frozen.

A minibatch may be split into fixed-size chunks processed concurrently; chunk
gradients are always summed in chunk order, so results do not depend on the
number of workers.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .architectures import replace_head
from .autodiff import backward, forward, network_loss
from .data import LabeledDataset, center_crop, preprocess, random_crop_mirror, sample_rng
from .graph import NetworkGraph
from .tensor import make_rng

MODALITIES = ("from_scratch", "fine_tuning", "feature_vector")
FIRST_LAYER_MULTIPLIER = 0.1
_SHUFFLE_STREAM = 0x5EED


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass
class TrainingConfig:
    modality: str = "from_scratch"
    iterations: int = 1000
    base_lr: float = 0.01
    lr_multipliers: dict[str, float] = field(default_factory=dict)
    frozen: frozenset[str] = frozenset()
    momentum: float = 0.9
    batch_size: int = 32
    augment: bool = True
    mirror: bool = True
    vflip: bool = False
    seed: int = 0
    aux_loss_weight: float | None = None
    lr_decay_at: float = 0.75
    lr_decay: float = 0.1
    microbatch: int = 0
    jobs: int = 1
    eval_every: int = 0

    def __post_init__(self):
        self.frozen = frozenset(self.frozen)
        self.lr_multipliers = dict(self.lr_multipliers)
        self.validate()

    def validate(self) -> None:
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        clash = sorted(n for n in self.frozen if self.lr_multipliers.get(n, 1.0) > 0)
        if clash:
            raise ValueError(f"frozen layers with positive learning-rate multiplier: {clash}")

    def multiplier(self, layer: str) -> float:
        return self.lr_multipliers.get(layer, 1.0)

    def lr_at(self, iteration: int) -> float:
        if self.lr_decay_at and iteration >= int(self.lr_decay_at * self.iterations):
            return self.base_lr * self.lr_decay
        return self.base_lr


def configure_modality(net: NetworkGraph, modality: str, base_lr: float = 0.01, **overrides) -> TrainingConfig:
    """Learning-rate multipliers and freeze set for one design modality."""
    layers = net.param_layers()
    if modality == "from_scratch":
        mult, frozen = {name: 1.0 for name in layers}, frozenset()
    elif modality == "fine_tuning":
        mult = {name: 1.0 for name in layers}
        mult[layers[0]] = FIRST_LAYER_MULTIPLIER
        frozen = frozenset()
    elif modality == "feature_vector":
        frozen = frozenset(name for name in layers if name != net.main_head)
        mult = {name: (1.0 if name == net.main_head else 0.0) for name in layers}
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return TrainingConfig(modality=modality, base_lr=base_lr, lr_multipliers=mult, frozen=frozen, **overrides)


def init_velocity(net: NetworkGraph) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in net.parameters()}


def sgd_step(net: NetworkGraph, grads, velocity: dict, config: TrainingConfig, lr: float | None = None):
    """In-place momentum update ``v = m v - lr * mult * g; p = p + v`` of every unfrozen parameter."""
    lr = config.base_lr if lr is None else lr
    for name, g in grads.items():
        layer = name.rsplit(".", 1)[0]
        if layer in config.frozen:
            continue
        p = net.get_param(name)
        v = velocity[name]
        step = p.dtype.type(lr * config.multiplier(layer))
        v *= p.dtype.type(config.momentum)
        v -= step * g
        p += v
    return net, velocity


@dataclass
class TrainRecord:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    evals: dict[int, float] = field(default_factory=dict)
    seconds_per_100: list[float] = field(default_factory=list)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "loss", "lr", "accuracy"])
        for i, (loss, lr) in enumerate(zip(self.losses, self.lrs), start=1):
            acc = self.evals.get(i)
            writer.writerow([i, repr(loss), repr(lr), "" if acc is None else repr(acc)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def batch_indices(n: int, batch_size: int, iterations: int, seed: int):
    """Yield per-iteration sample indices from seeded epoch shuffles, wrapping across epochs."""
    epoch, pos = 0, 0
    perm = make_rng(seed, _SHUFFLE_STREAM, epoch).permutation(n)
    for _ in range(iterations):
        out = []
        while len(out) < batch_size:
            take = min(batch_size - len(out), n - pos)
            out.extend(perm[pos:pos + take])
            pos += take
            if pos == n:
                epoch, pos = epoch + 1, 0
                perm = make_rng(seed, _SHUFFLE_STREAM, epoch).permutation(n)
        yield np.asarray(out, dtype=np.int64)


def make_batch(net: NetworkGraph, ds: LabeledDataset, idx, config: TrainingConfig, iteration: int,
               means=None) -> np.ndarray:
    _, h, w = net.input_shape
    views = []
    for i in idx:
        if config.augment:
            rng = sample_rng(config.seed, ds.ids[i], iteration)
            views.append(random_crop_mirror(ds.images[i], rng, h, w, config.mirror, config.vflip))
        else:
            views.append(center_crop(ds.images[i], h, w))
    x = preprocess(ds.channel_means if means is None else means, np.concatenate(views))
    return x.astype(net.dtype, copy=False)


def _chunk_grads(net, x, y, config, iteration, chunk, denom):
    logits, tape = forward(net, x, "train", (config.seed, iteration, chunk))
    loss, _, head_grads = network_loss(net, logits, y, denom, config.aux_loss_weight)
    return loss, backward(tape, head_grads, config.frozen)


def predict(net: NetworkGraph, images: np.ndarray, means, batch: int = 128) -> np.ndarray:
    """Main-head argmax on center crops (ties resolve to the lowest class index)."""
    from .layers import softmax

    _, h, w = net.input_shape
    preds = []
    for start in range(0, len(images), batch):
        x = preprocess(means, center_crop(images[start:start + batch], h, w)).astype(net.dtype, copy=False)
        logits, _ = forward(net, x, "eval")
        preds.append(softmax(logits[0]).argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def train(net: NetworkGraph, dataset: LabeledDataset, config: TrainingConfig, progress=None):
    """Run ``config.iterations`` minibatch SGD steps on a copy of ``net``.

    Returns the trained copy and its :class:`TrainRecord`.  The channel means
    of ``dataset`` are used for preprocessing and stored on the returned
    network.  ``progress(iteration, loss, record)`` is called after every
    step; a true return value ends training early.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.labels.max() >= net.num_classes:
        raise ValueError(f"label {int(dataset.labels.max())} out of range for {net.num_classes} classes")
    net = net.copy()
    net.meta["channel_means"] = [float(m) for m in dataset.channel_means]
    net.meta["class_names"] = list(dataset.class_names)
    velocity = init_velocity(net)
    record = TrainRecord()
    chunk = config.microbatch or config.batch_size
    pool = ThreadPoolExecutor(config.jobs) if config.jobs > 1 else None
    tick = time.perf_counter()
    try:
        for it, idx in enumerate(batch_indices(len(dataset), config.batch_size, config.iterations, config.seed)):
            x = make_batch(net, dataset, idx, config, it)
            y = dataset.labels[idx]
            bounds = range(0, len(idx), chunk)
            jobs = [(net, x[s:s + chunk], y[s:s + chunk], config, it, c, len(idx)) for c, s in enumerate(bounds)]
            with np.errstate(all="ignore"):
                results = list(pool.map(lambda a: _chunk_grads(*a), jobs)) if pool else [_chunk_grads(*a) for a in jobs]
                loss, grads = results[0]
                for part_loss, part in results[1:]:
                    loss += part_loss
                    for name, g in part.items():
                        grads[name] = grads[name] + g
                if not np.isfinite(loss):
                    raise TrainingDiverged(it + 1, loss)
                lr = config.lr_at(it)
                sgd_step(net, grads, velocity, config, lr)
            record.losses.append(float(loss))
            record.lrs.append(lr)
            if config.eval_every and (it + 1) % config.eval_every == 0:
                pred = predict(net, dataset.images, dataset.channel_means)
                record.evals[it + 1] = float(np.mean(pred == dataset.labels))
            if (it + 1) % 100 == 0:
                now = time.perf_counter()
                record.seconds_per_100.append(now - tick)
                tick = now
            if progress is not None and progress(it + 1, loss, record):
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return net, record


def adapt(pretrained: NetworkGraph, target: LabeledDataset, modality: str, seed: int = 0,
          base_lr: float = 0.01, **overrides):
    """Re-head a pretrained net for ``target`` and train it in ``modality``."""
    if modality not in ("fine_tuning", "feature_vector"):
        raise ValueError("adaptation modality must be fine_tuning or feature_vector")
    net = replace_head(pretrained, target.num_classes, seed)
    config = configure_modality(net, modality, base_lr, seed=seed, **overrides)
    trained, record = train(net, target, config)
    return trained, record, config


def pretrain_then_adapt(source: LabeledDataset, target: LabeledDataset, modality: str, net: NetworkGraph,
                        source_config: TrainingConfig, target_config: TrainingConfig,
                        checkpoint: str | None = None):
    """Train ``net`` on ``source`` from scratch, checkpoint it, re-head it and adapt it to ``target``.

    ``target_config`` supplies iterations, rates and seeds; its modality
    multipliers and freeze set are replaced by those of ``modality``.
    Returns (adapted net, source record, target record).
    """
    from . import modelio

    if modality not in ("fine_tuning", "feature_vector"):
        raise ValueError("adaptation modality must be fine_tuning or feature_vector")
    if source_config.modality != "from_scratch":
        source_config = replace(source_config, modality="from_scratch", lr_multipliers={}, frozen=frozenset())
    pretrained, source_record = train(net, source, source_config)
    if checkpoint is not None:
        modelio.save_model(pretrained, checkpoint)
        pretrained = modelio.load_model(checkpoint)
    else:
        pretrained = modelio.model_from_bytes(modelio.model_to_bytes(pretrained))
    headed = replace_head(pretrained, target.num_classes, target_config.seed)
    modal = configure_modality(headed, modality, target_config.base_lr)
    config = replace(target_config, modality=modality, lr_multipliers=modal.lr_multipliers, frozen=modal.frozen)
    adapted, target_record = train(headed, target, config)
    return adapted, source_record, target_record
