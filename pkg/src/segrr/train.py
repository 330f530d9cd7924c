"""Losses, Adam optimizer, augmentation, and the training loop.

Training is reproducible from (seed, config, data): the RNG for batch
selection, augmentation, and dropout is re-derived from (seed, step)
every iteration, so resuming from a checkpoint continues the exact
stream of the uninterrupted run.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

LOG_CLAMP = 1e-12
DICE_EPS = 1.0


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at iteration {step}")
        self.step = step


def _one_hot(labels, num_classes, dtype):
    n, h, w = labels.shape
    oh = np.zeros((n, num_classes, h, w), dtype=dtype)
    idx = labels.astype(np.intp)
    if idx.min() < 0 or idx.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes}): {idx.min()}..{idx.max()}")
    nn, hh, ww = np.ix_(np.arange(n), np.arange(h), np.arange(w))
    oh[nn, idx, hh, ww] = 1.0
    return oh


def cross_entropy_loss(probs, labels):
    """Mean over voxels of -log p(true class); log clamped at 1e-12."""
    num_classes = probs.shape[1]
    oh = Tensor(_one_hot(np.asarray(labels), num_classes, probs.dtype))
    voxels = probs.shape[0] * probs.shape[2] * probs.shape[3]
    picked = (probs * oh).sum(axis=1)
    return -(picked.clip_min(LOG_CLAMP).log().sum()) * (1.0 / voxels)


def soft_dice_loss(probs, labels):
    """1 - soft Dice, averaged over foreground classes, smoothing eps=1."""
    num_classes = probs.shape[1]
    oh = _one_hot(np.asarray(labels), num_classes, probs.dtype)
    losses = []
    for cls in range(1, num_classes):
        p = probs * _class_selector(num_classes, cls, probs.dtype, probs.shape)
        p = p.sum(axis=1)
        y = Tensor(oh[:, cls])
        num = (p * y).sum() * 2.0 + DICE_EPS
        den = p.sum() + y.sum() + DICE_EPS
        losses.append(1.0 - num / den)
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses))


def _class_selector(num_classes, cls, dtype, shape):
    sel = np.zeros((1, num_classes, 1, 1), dtype=dtype)
    sel[0, cls, 0, 0] = 1.0
    return Tensor(sel).broadcast_to(shape)


@dataclass
class AdamState:
    """Per-parameter moments plus step counter. Decoupled weight decay is
    applied before the Adam delta; batch-norm scale/shift are exempt.
    """

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-6
    step: int = 0
    moments: dict = field(default_factory=dict)


def _decay_exempt(name):
    return name.rsplit(".", 1)[-1] in ("scale", "shift")


def adam_step(named_params, state: AdamState):
    """One bias-corrected Adam update over (name, Tensor) pairs."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data, dtype=np.float32),
                                   np.zeros_like(p.data, dtype=np.float32))
        m, v = state.moments[name]
        if state.weight_decay and not _decay_exempt(name):
            p.data -= (state.lr * state.weight_decay) * p.data
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.epsilon)).astype(p.data.dtype)


def augment(image, label, rng):
    """One flip coin plus one rotation from {0, 90, 180, 270} degrees,
    applied identically to the image channels and the label map.
    """
    if image.shape[-2] != image.shape[-1]:
        raise ValueError("augmentation requires square patches")
    flip = rng.integers(0, 2)
    rot = rng.integers(0, 4)
    if flip:
        image = np.flip(image, axis=-1)
        label = np.flip(label, axis=-1)
    if rot:
        image = np.rot90(image, k=rot, axes=(-2, -1))
        label = np.rot90(label, k=rot, axes=(-2, -1))
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


@dataclass
class TrainManifest:
    seed: int = 0
    iterations: int = 600
    batch_size: int = 8
    loss: str = "cross_entropy"        # cross_entropy | soft_dice
    augment: bool = True
    checkpoint_every: int = 0           # 0: only at the end
    lr: float = 5e-5
    weight_decay: float = 1e-6

    def __post_init__(self):
        if self.loss not in ("cross_entropy", "soft_dice"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch norm needs batch statistics)")


LOSS_FNS = {"cross_entropy": cross_entropy_loss, "soft_dice": soft_dice_loss}


def train(net, dataset, manifest: TrainManifest, opt: AdamState = None,
          on_step=None, start_step=None):
    """Run the budgeted iterations; returns (opt_state, loss_trace).

    ``on_step(step, loss)`` fires after each update (checkpoint hook).
    Resuming: pass the restored optimizer state; iteration numbering
    continues from its step counter so the RNG stream is unchanged.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if opt is None:
        opt = AdamState(lr=manifest.lr, weight_decay=manifest.weight_decay)
    loss_fn = LOSS_FNS[manifest.loss]
    params = list(net.parameters())
    net.train()
    trace = []
    first = opt.step if start_step is None else start_step
    for step in range(first, manifest.iterations):
        rng = np.random.default_rng([manifest.seed, step])
        idx = rng.integers(0, len(dataset), size=manifest.batch_size)
        images, labels = [], []
        for i in idx:
            img, lab = dataset[i]
            img = img.data if isinstance(img, Tensor) else np.asarray(img)
            lab = np.asarray(lab)
            if manifest.augment:
                img, lab = augment(img, lab, rng)
            images.append(img)
            labels.append(lab)
        x = Tensor(np.stack(images))
        y = np.stack(labels)

        net.zero_grad()
        probs = net(x, rng=rng)
        loss = loss_fn(probs, y)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteLossError(step, value)
        loss.backward()
        adam_step(params, opt)
        trace.append(np.float32(value))
        if on_step is not None:
            on_step(step, value)
    return opt, trace


def predict_labels(net, images, batch_size=8):
    """Argmax class maps for a list of (C,H,W) image tensors, eval mode."""
    net.eval()
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        x = Tensor(np.stack([im.data if isinstance(im, Tensor) else np.asarray(im)
                             for im in chunk]))
        probs = net(x)
        out.extend(list(probs.data.argmax(axis=1).astype(np.uint8)))
    return out
