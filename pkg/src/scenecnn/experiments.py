"""Desk-scale experiment protocols shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .architectures import build_mini_caffenet
from .data import ClassPattern, SyntheticSpec, generate_synthetic
from .evaluation import evaluate
from .training import adapt, configure_modality, predict, train

# Full-scale accuracies (%) reported for the original study.  They depend on
# ImageNet-scale pretraining and GPU-weeks of training; this package does not
# reproduce them and substitutes the desk-scale protocols below.
FULL_SCALE_REFERENCE = {
    "uc_merced": {"fine_tuning": 95.48, "from_scratch": 85.71, "best": 97.10},
    "brazilian_coffee": {"best": 91.83},
}
FULL_SCALE_ITERATIONS = {"from_scratch": 100_000, "fine_tuning": 20_000, "feature_vector": 5_000}
REPRODUCED_AT_FULL_SCALE = False

# Source classes are stripe orientations 22.5 degrees apart, with frequency and
# colors drawn per image, so a source-trained head learns to ignore frequency.
# Target classes cross two unseen orientations with two frequency bands: the
# frozen penultimate features miss half the signal, while the pretrained
# convolutions still carry it.
_SOURCE_FREQUENCIES = (2.0, 7.0)
_TARGET_BANDS = ((2.0, 3.0), (5.5, 7.0))
_TARGET_ORIENTATIONS = (33.75, 123.75)


def _pattern(orientation: float, frequency_range) -> ClassPattern:
    return ClassPattern(orientation, frequency=sum(frequency_range) / 2, blob_density=2.0,
                        stripe_color=(0.0, 0.0, 0.0), blob_color=(0.0, 0.0, 0.0),
                        frequency_range=tuple(frequency_range), random_colors=True)


SOURCE_PATTERNS = tuple(_pattern(22.5 * c, _SOURCE_FREQUENCIES) for c in range(8))
TARGET_PATTERNS = tuple(_pattern(o, band) for o in _TARGET_ORIENTATIONS for band in _TARGET_BANDS)


@dataclass
class TransferSetup:
    image_size: int = 32
    source_per_class: int = 200
    target_train_per_class: int = 10
    target_test_per_class: int = 40
    noise: float = 0.5
    source_noise: float = 0.25
    width_scale: float = 0.5
    source_iterations: int = 2000
    target_iterations: int = 500
    scratch_iterations: int = 500
    base_lr: float = 0.01
    batch_size: int = 32


def transfer_data(seed: int, setup: TransferSetup = TransferSetup()):
    """Source set (8 classes) and disjoint target train/test sets (4 classes)."""
    common = dict(image_size=setup.image_size, channels=3)
    source = generate_synthetic(SyntheticSpec(num_classes=len(SOURCE_PATTERNS), classes=SOURCE_PATTERNS,
                                              samples_per_class=setup.source_per_class, seed=1000 + seed,
                                              noise=setup.source_noise,
                                              class_names=[f"src{c}" for c in range(8)], **common))
    target = generate_synthetic(SyntheticSpec(num_classes=len(TARGET_PATTERNS), classes=TARGET_PATTERNS,
                                              noise=setup.noise,
                                              samples_per_class=setup.target_train_per_class + setup.target_test_per_class,
                                              seed=2000 + seed, class_names=[f"tgt{c}" for c in range(4)], **common))
    per = setup.target_train_per_class + setup.target_test_per_class
    train_idx = np.array([c * per + i for c in range(4) for i in range(setup.target_train_per_class)])
    test_idx = np.array([c * per + i for c in range(4) for i in range(setup.target_train_per_class, per)])
    return source, target.subset(train_idx), target.subset(test_idx)


def run_transfer(seed: int, setup: TransferSetup = TransferSetup(), verbose: bool = False) -> dict[str, float]:
    """Test accuracy of each modality on the target task for one seed."""
    source, tgt_train, tgt_test = transfer_data(seed, setup)
    shape = (3, setup.image_size, setup.image_size)
    common = dict(batch_size=setup.batch_size, augment=False, seed=seed)
    t0 = time.perf_counter()
    net = build_mini_caffenet(shape, source.num_classes, setup.width_scale, seed=seed)
    pretrained, rec = train(net, source, configure_modality(net, "from_scratch", setup.base_lr,
                                                            iterations=setup.source_iterations, **common))
    src_acc = float(np.mean(predict(pretrained, source.images, source.channel_means) == source.labels))
    means = tgt_train.channel_means
    out = {"source_train_accuracy": src_acc}
    for modality in ("fine_tuning", "feature_vector"):
        adapted, _, _ = adapt(pretrained, tgt_train, modality, seed=seed, base_lr=setup.base_lr,
                              iterations=setup.target_iterations, **{k: v for k, v in common.items() if k != "seed"})
        out[modality] = evaluate(adapted, tgt_test, means=means).overall_accuracy
    scratch = build_mini_caffenet(shape, tgt_train.num_classes, setup.width_scale, seed=seed + 7)
    trained, _ = train(scratch, tgt_train, configure_modality(scratch, "from_scratch", setup.base_lr,
                                                              iterations=setup.scratch_iterations, **common))
    out["from_scratch"] = evaluate(trained, tgt_test, means=means).overall_accuracy
    out["seconds"] = time.perf_counter() - t0
    if verbose:
        print(seed, {k: round(v, 4) for k, v in out.items()}, flush=True)
    return out


def run_overfit(seed: int, max_iterations: int = 2000, width_scale: float = 0.25, check_every: int = 50,
                target: float = 0.99) -> tuple[int | None, float]:
    """Train MiniCaffeNet on 4 synthetic classes x 20 samples until training accuracy reaches ``target``.

    Returns (first checked iteration at or above target, or None; last accuracy).
    """
    ds = generate_synthetic(SyntheticSpec(num_classes=4, image_size=32, samples_per_class=20, seed=seed))
    net = build_mini_caffenet((3, 32, 32), 4, width_scale, seed=seed)
    config = configure_modality(net, "from_scratch", 0.01, iterations=max_iterations, batch_size=32,
                                augment=False, seed=seed, eval_every=check_every)

    def reached(it, loss, record):
        return record.evals.get(it, 0.0) >= target

    _, record = train(net, ds, config, progress=reached)
    hits = [it for it, acc in sorted(record.evals.items()) if acc >= target]
    return (hits[0] if hits else None), record.evals[max(record.evals)]
