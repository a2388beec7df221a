"""A small trainable grid detector with dropout and three output heads.

The network is deliberately tiny (two 3x3 convolutions, average pooling,
1x1 heads per pyramid level) so that gradients of every parameter can be
finite-difference checked in seconds. Forward, backward, and both loss
regimes are implemented directly in numpy with float64 throughout.

Per level and cell the heads emit:

* ``z``  -- classification logits (one per class),
* ``s``  -- log predictive variance per class (``sigma^2 = exp(s)``),
* ``w``  -- box deltas relative to the cell anchor.

The variance-attenuated classification loss corrupts the logits with
``z + sigma * eps`` over ``T'`` Gaussian draws and minimizes
``-log( mean_t softmax(z + sigma*eps_t)[label] )``; its gradients are
propagated analytically through the sampled noise, so confidently wrong
cells can buy down their penalty by growing ``sigma`` with no explicit
variance labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    OBJECT,
    GridSpec,
    LevelOutput,
    PassGrid,
    assign_anchor_cells,
    encode_deltas,
)
from .synthdata import Scene

TRUNK_STRIDE = 4  # two stride-2 average pools in the trunk

CHECKPOINT_FORMAT = "mcdet-net/1"


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "ce"                 # "ce" or "attenuated"
    mc_integration_samples: int = 10      # T' noise draws in the attenuated loss
    learning_rate: float = 1e-4
    epochs: int = 50
    neg_pos_ratio: int = 3
    smooth_l1_weight: float = 1.0
    warmup_epochs: int = 5                # plain-CE epochs before the attenuated loss kicks in
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in ("ce", "attenuated"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.mc_integration_samples < 1:
            raise ValueError("mc_integration_samples must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.neg_pos_ratio < 1:
            raise ValueError("neg_pos_ratio must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


class NoiseSampler:
    """Seeded stream of i.i.d. standard-normal draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)

    def normal(self, shape) -> np.ndarray:
        return self._rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(z))


def ce_loss_batch(z: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax cross-entropy per row. Returns (losses (N,), dL/dz (N, C))."""
    logp = _log_softmax(z)
    rows = np.arange(len(z))
    losses = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return losses, grad


def ce_loss(z: Sequence[float], label: int) -> tuple[float, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    losses, grad = ce_loss_batch(z[None, :], np.array([label]))
    return float(losses[0]), grad[0]


def attenuated_cls_loss_batch(
    z: np.ndarray, s: np.ndarray, labels: np.ndarray, eps: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Variance-attenuated cross-entropy over pre-drawn noise.

    Arguments: z, s of shape (N, C); labels (N,); eps (T', N, C).
    Returns (losses (N,), dL/dz (N, C), dL/ds (N, C)).

    Writing a_t = softmax(z + sigma*eps_t)[label] and A = mean_t a_t, the
    loss is -log A and the gradient is a convex combination of per-draw
    cross-entropy gradients with weights w_t = a_t / (T' * A).
    """
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(s))):
        bad = np.argwhere(~np.isfinite(z)) if not np.all(np.isfinite(z)) else np.argwhere(~np.isfinite(s))
        raise FloatingPointError(f"non-finite loss input at cell row {bad[0].tolist()}")
    sigma = np.exp(s / 2)
    z_t = z[None, :, :] + sigma[None, :, :] * eps          # (T', N, C)
    logp_t = _log_softmax(z_t)
    rows = np.arange(z.shape[0])
    log_a = logp_t[:, rows, labels]                        # (T', N)
    # log A = logsumexp_t(log a_t) - log T', computed stably
    m = log_a.max(axis=0)
    log_mean = m + np.log(np.exp(log_a - m).sum(axis=0)) - math.log(eps.shape[0])
    losses = -log_mean
    w = np.exp(log_a - m)
    w /= w.sum(axis=0)                                     # (T', N), sums to 1 over t
    p_t = np.exp(logp_t)
    p_t[:, rows, labels] -= 1.0                            # p_t - onehot(label)
    grad_z = (w[:, :, None] * p_t).sum(axis=0)
    grad_s = (w[:, :, None] * p_t * 0.5 * sigma[None, :, :] * eps).sum(axis=0)
    if not np.all(np.isfinite(losses)):
        bad = int(np.argwhere(~np.isfinite(losses))[0][0])
        raise FloatingPointError(f"non-finite attenuated loss at cell row {bad}")
    return losses, grad_z, grad_s


def attenuated_cls_loss(
    z: Sequence[float],
    s: Sequence[float],
    label: int,
    t_samples: int,
    sampler: NoiseSampler,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Single-cell variance-attenuated loss with analytic gradients.

    Deterministic given the sampler seed: the same seed yields the same
    ``eps`` draws and therefore the same loss and gradients.
    """
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if label < 0 or label >= z.shape[-1]:
        raise ValueError(f"label {label} out of range for {z.shape[-1]} classes")
    eps = sampler.normal((t_samples, 1, z.shape[-1]))
    losses, gz, gs = attenuated_cls_loss_batch(z[None, :], s[None, :], np.array([label]), eps)
    return float(losses[0]), gz[0], gs[0]


def smooth_l1(pred: Sequence[float], target: Sequence[float]) -> tuple[float, np.ndarray]:
    """Summed Huber penalty: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("pred and target must have equal shapes")
    x = pred - target
    inner = np.abs(x) < 1.0
    loss = float(np.where(inner, 0.5 * x * x, np.abs(x) - 0.5).sum())
    grad = np.where(inner, x, np.sign(x))
    return loss, grad


# ---------------------------------------------------------------------------
# anchor matching
# ---------------------------------------------------------------------------

# negatives whose anchor overlaps a true object this much are never mined:
# they carry object features through no fault of their own, and training
# them as hard negatives only poisons the classifier and the variance head
MINING_IGNORE_IOU = 0.3


@dataclass
class AnchorMatch:
    """Per-cell training targets: label -1 for negatives, else the index of
    the matched object; target deltas filled at positive cells only.
    ``mining_ignore`` marks negatives too close to an object to be mined."""

    labels: list[np.ndarray]
    target_deltas: list[np.ndarray]
    positive_cells: list[tuple[int, tuple[int, ...], int]]  # (level, cell, object idx)
    mining_ignore: list[np.ndarray]


def match_anchors(scene: Scene, grid: GridSpec) -> AnchorMatch:
    """Assign each true object to the anchor cell of maximal IoU.

    Decoys count as background: they receive no positive cell and no box
    targets. Cell conflicts between objects resolve in favor of the higher
    IoU; the loser takes its next-best cell.
    """
    from itertools import product as _product

    from .core import iou as _iou

    labels = [np.full(grid.level_shape(li), -1, dtype=np.int64) for li in range(len(grid.levels))]
    deltas = [
        np.zeros(grid.level_shape(li) + (2 * grid.dims,)) for li in range(len(grid.levels))
    ]
    ignore = [np.zeros(grid.level_shape(li), dtype=bool) for li in range(len(grid.levels))]
    boxes = [box for box, kind in scene.gt if kind == OBJECT]
    positives = []
    for oi, (level, cell) in enumerate(assign_anchor_cells(boxes, grid)):
        labels[level][cell] = oi
        deltas[level][cell] = encode_deltas(boxes[oi], grid.levels[level], cell, grid)
        positives.append((level, cell, oi))
    for box in boxes:
        for li in range(len(grid.levels)):
            for cell in _product(*(range(n) for n in grid.level_shape(li))):
                if labels[li][cell] == -1 and _iou(grid.anchor_box(li, cell), box) > MINING_IGNORE_IOU:
                    ignore[li][cell] = True
    return AnchorMatch(
        labels=labels, target_deltas=deltas, positive_cells=positives, mining_ignore=ignore
    )


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """3x3 same-padding patch matrix: (H, W, C) -> (H*W, 9*C)."""
    h, w, c = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    view = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    # view: (H, W, C, 3, 3) -> (H*W, 3*3*C) with kernel-major layout
    return np.ascontiguousarray(view.transpose(0, 1, 3, 4, 2)).reshape(h * w, 9 * c)


def _col2im(dcols: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    dview = dcols.reshape(h, w, 3, 3, c)
    padded = np.zeros((h + 2, w + 2, c))
    for ki in range(3):
        for kj in range(3):
            padded[ki : ki + h, kj : kj + w] += dview[:, :, ki, kj, :]
    return padded[1:-1, 1:-1]


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def _unpool2(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0


class MicroNet:
    """Two conv blocks, stride-2 average pools, and per-level 1x1 heads.

    The trunk reaches stride 4; each pyramid level taps the trunk after
    enough additional 2x2 pools to reach its stride, so level strides must
    be power-of-two multiples of 4. Dropout (inverted scaling) follows each
    conv nonlinearity, which makes the dropout-free forward pass the exact
    expectation network.

    The log-variance head runs on its own small convolution branch rather
    than the classification trunk: at this parameter count, variance
    gradients flowing through shared features measurably degrade the
    classifier, and the split keeps both objectives honest while leaving
    every gradient exact.
    """

    VAR_CHANNELS = 4

    def __init__(self, grid: GridSpec, channels: int, dropout: float, params: dict):
        if grid.dims != 2:
            raise ValueError("MicroNet supports 2D grids only")
        for lv in grid.levels:
            ratio = lv.stride / TRUNK_STRIDE
            if ratio < 1 or 2 ** round(math.log2(ratio)) != ratio:
                raise ValueError(
                    f"level stride {lv.stride} must be a power-of-two multiple of {TRUNK_STRIDE}"
                )
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {dropout}")
        for name, value in params.items():
            if not np.all(np.isfinite(value)):
                raise ValueError(f"parameter {name} contains non-finite values")
        self.grid = grid
        self.channels = channels
        self.dropout = dropout
        self.params = params

    # outputs per main-head cell: logits + deltas (log-variances live on
    # the variance branch)
    @property
    def head_width(self) -> int:
        return self.grid.num_classes + 2 * self.grid.dims

    @classmethod
    def create(cls, grid: GridSpec, channels: int = 8, dropout: float = 0.1, seed: int = 0):
        rng = np.random.default_rng(seed)
        c = channels
        cv = cls.VAR_CHANNELS
        params = {
            "conv1_w": rng.standard_normal((9 * 1, c)) * math.sqrt(2.0 / 9),
            "conv1_b": np.zeros(c),
            "conv2_w": rng.standard_normal((9 * c, c)) * math.sqrt(2.0 / (9 * c)),
            "conv2_b": np.zeros(c),
            "convv_w": rng.standard_normal((9 * 1, cv)) * math.sqrt(2.0 / 9),
            "convv_b": np.zeros(cv),
        }
        nc = grid.num_classes
        for li in range(len(grid.levels)):
            head_w = rng.standard_normal((c, nc + 2 * grid.dims)) * 0.01
            head_b = np.zeros(nc + 2 * grid.dims)
            # low foreground prior so early training is not flooded with
            # false positives
            head_b[0] = 2.0
            head_b[1:nc] = -2.0
            params[f"head{li}_w"] = head_w
            params[f"head{li}_b"] = head_b
            # with two classes the loss constrains only the total logit-noise
            # variance, not its split across components; starting the
            # background variance far below the others pins the ambiguity
            # onto the object classes and keeps the class-softmaxed variance
            # readable as "high = ambiguous"
            headv_b = np.full(nc, -2.0)
            headv_b[0] = -6.0
            params[f"headv{li}_w"] = rng.standard_normal((cv, nc)) * 0.01
            params[f"headv{li}_b"] = headv_b
        return cls(grid, channels, dropout, params)

    def _dropout_masks(self, shapes, active: bool, seed: int | None):
        if not active or self.dropout == 0.0:
            return [np.ones(shape) for shape in shapes]
        if seed is None:
            raise ValueError("dropout_active=True requires a seed")
        rng = np.random.default_rng(seed)
        keep = 1.0 - self.dropout
        return [(rng.random(shape) < keep) / keep for shape in shapes]

    def forward(
        self,
        image: np.ndarray,
        dropout_active: bool = False,
        seed: int | None = None,
        want_cache: bool = False,
    ):
        """Run the network; returns per-level (z, s, w) arrays.

        Shapes per level: z and s are (h_l, w_l, num_classes), w is
        (h_l, w_l, 2*dims). Deterministic given (parameters, seed).
        """
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.grid.image_size:
            raise ValueError(
                f"image shape {image.shape} does not match grid {self.grid.image_size}"
            )
        p = self.params
        x = image[:, :, None]
        h, w = image.shape
        masks = self._dropout_masks(
            [(h, w, self.channels), (h // 2, w // 2, self.channels)], dropout_active, seed
        )

        cols1 = _im2col(x)
        pre1 = (cols1 @ p["conv1_w"] + p["conv1_b"]).reshape(h, w, self.channels)
        act1 = np.maximum(pre1, 0.0) * masks[0]
        pooled1 = _pool2(act1)

        cols2 = _im2col(pooled1)
        pre2 = (cols2 @ p["conv2_w"] + p["conv2_b"]).reshape(
            h // 2, w // 2, self.channels
        )
        act2 = np.maximum(pre2, 0.0) * masks[1]
        trunk = _pool2(act2)  # stride 4

        # variance branch: one conv block straight off the image
        colsv = _im2col(x)
        prev = (colsv @ p["convv_w"] + p["convv_b"]).reshape(h, w, self.VAR_CHANNELS)
        actv = np.maximum(prev, 0.0)
        vtrunk = _pool2(_pool2(actv))  # stride 4

        # pool chains up to each level's stride, reusing shared prefixes
        def level_taps(base):
            taps, current, stride = [], base, TRUNK_STRIDE
            for lv in self.grid.levels:
                while stride < lv.stride:
                    current = _pool2(current)
                    stride *= 2
                taps.append(current)
            return taps

        feats = level_taps(trunk)
        vfeats = level_taps(vtrunk)

        nc = self.grid.num_classes
        outputs = []
        for li, (feat, vfeat) in enumerate(zip(feats, vfeats)):
            raw = feat @ p[f"head{li}_w"] + p[f"head{li}_b"]
            s = vfeat @ p[f"headv{li}_w"] + p[f"headv{li}_b"]
            outputs.append((raw[..., :nc], s, raw[..., nc:]))

        if not want_cache:
            return outputs
        cache = {
            "cols1": cols1, "pre1": pre1, "masks": masks, "pooled1": pooled1,
            "cols2": cols2, "pre2": pre2, "feats": feats,
            "colsv": colsv, "prev": prev, "vfeats": vfeats,
        }
        return outputs, cache

    def backward(self, grads_per_level, cache) -> dict:
        """Backprop head gradients (dz, ds, dw per level) to all parameters."""
        p = self.params
        nc = self.grid.num_classes
        grads = {name: np.zeros_like(value) for name, value in p.items()}

        # head gradients and accumulated feature gradients per level
        dfeats, dvfeats = [], []
        for li, (dz, ds, dw) in enumerate(grads_per_level):
            feat = cache["feats"][li]
            draw = np.concatenate([dz, dw], axis=-1)
            flat_f = feat.reshape(-1, self.channels)
            flat_d = draw.reshape(-1, self.head_width)
            grads[f"head{li}_w"] = flat_f.T @ flat_d
            grads[f"head{li}_b"] = flat_d.sum(axis=0)
            dfeats.append((flat_d @ p[f"head{li}_w"].T).reshape(feat.shape))

            vfeat = cache["vfeats"][li]
            flat_v = vfeat.reshape(-1, self.VAR_CHANNELS)
            flat_s = ds.reshape(-1, nc)
            grads[f"headv{li}_w"] = flat_v.T @ flat_s
            grads[f"headv{li}_b"] = flat_s.sum(axis=0)
            dvfeats.append((flat_s @ p[f"headv{li}_w"].T).reshape(vfeat.shape))

        def merge_taps(dtaps):
            # walk the shared pool chain backwards, merging level taps
            strides = [lv.stride for lv in self.grid.levels]
            dcurrent = dtaps[-1]
            stride = strides[-1]
            for li in range(len(strides) - 2, -1, -1):
                while stride > strides[li]:
                    dcurrent = _unpool2(dcurrent)
                    stride //= 2
                dcurrent = dcurrent + dtaps[li]
            while stride > TRUNK_STRIDE:
                dcurrent = _unpool2(dcurrent)
                stride //= 2
            return dcurrent

        dtrunk = merge_taps(dfeats)
        dact2 = _unpool2(dtrunk)
        dpre2 = dact2 * cache["masks"][1] * (cache["pre2"] > 0)
        flat = dpre2.reshape(-1, self.channels)
        grads["conv2_w"] = cache["cols2"].T @ flat
        grads["conv2_b"] = flat.sum(axis=0)
        h2, w2 = cache["pooled1"].shape[:2]
        dpooled1 = _col2im(flat @ p["conv2_w"].T, h2, w2, self.channels)

        dact1 = _unpool2(dpooled1)
        dpre1 = dact1 * cache["masks"][0] * (cache["pre1"] > 0)
        flat = dpre1.reshape(-1, self.channels)
        grads["conv1_w"] = cache["cols1"].T @ flat
        grads["conv1_b"] = flat.sum(axis=0)

        dvtrunk = merge_taps(dvfeats)
        dactv = _unpool2(_unpool2(dvtrunk))
        dprev = dactv * (cache["prev"] > 0)
        flat = dprev.reshape(-1, self.VAR_CHANNELS)
        grads["convv_w"] = cache["colsv"].T @ flat
        grads["convv_b"] = flat.sum(axis=0)
        return grads

    # -- checkpointing ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "grid": {
                "dims": self.grid.dims,
                "image_size": list(self.grid.image_size),
                "levels": [
                    {"stride": lv.stride, "base_size": list(lv.base_size)}
                    for lv in self.grid.levels
                ],
                "num_classes": self.grid.num_classes,
            },
            "channels": self.channels,
            "dropout": self.dropout,
            "params": {
                name: {"shape": list(value.shape), "data": value.reshape(-1).tolist()}
                for name, value in self.params.items()
            },
        }
        Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MicroNet":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unknown checkpoint format {doc.get('format')!r}")
        from .core import LevelSpec  # local import to keep module top clean

        g = doc["grid"]
        grid = GridSpec(
            dims=g["dims"],
            image_size=tuple(g["image_size"]),
            levels=tuple(LevelSpec(lv["stride"], tuple(lv["base_size"])) for lv in g["levels"]),
            num_classes=g["num_classes"],
        )
        params = {
            name: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
            for name, spec in doc["params"].items()
        }
        return cls(grid, doc["channels"], doc["dropout"], params)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _select_training_cells(match: AnchorMatch, outputs, neg_pos_ratio: int):
    """Positives plus the hardest negatives (highest foreground prob)."""
    z_rows, s_rows, labels, meta = [], [], [], []
    for level, cell, _ in match.positive_cells:
        z, s, _ = outputs[level]
        z_rows.append(z[cell])
        s_rows.append(s[cell])
        labels.append(1)
        meta.append((level, cell))
    n_pos = len(labels)

    neg_candidates = []
    for li, (z, s, _) in enumerate(outputs):
        fg = softmax(z)[..., 1]
        for cell in np.ndindex(fg.shape):
            if match.labels[li][cell] == -1 and not match.mining_ignore[li][cell]:
                neg_candidates.append((-float(fg[cell]), li, cell))
    neg_candidates.sort()
    k = min(len(neg_candidates), max(neg_pos_ratio, neg_pos_ratio * n_pos))
    for _, li, cell in neg_candidates[:k]:
        z, s, _ = outputs[li]
        z_rows.append(z[cell])
        s_rows.append(s[cell])
        labels.append(0)
        meta.append((li, cell))
    return np.array(z_rows), np.array(s_rows), np.array(labels), meta, n_pos


def _scene_loss_and_grads(net: MicroNet, outputs, match: AnchorMatch, cfg: TrainConfig,
                          eps: np.ndarray | None, use_attenuated: bool):
    """Total loss for one scene plus per-level head gradients."""
    nc = net.grid.num_classes
    z_rows, s_rows, labels, meta, n_pos = _select_training_cells(
        match, outputs, cfg.neg_pos_ratio
    )
    denom = max(1, n_pos)

    grads = [
        (np.zeros(z.shape), np.zeros(s.shape), np.zeros(w.shape)) for z, s, w in outputs
    ]
    total = 0.0
    if len(labels):
        if not use_attenuated:
            losses, gz = ce_loss_batch(z_rows, labels)
            gs = np.zeros_like(gz)
        else:
            losses, gz, gs = attenuated_cls_loss_batch(
                z_rows, s_rows, labels, eps[:, : len(labels), :]
            )
        total += float(losses.sum()) / denom
        for row, (level, cell) in enumerate(meta):
            grads[level][0][cell] += gz[row] / denom
            grads[level][1][cell] += gs[row] / denom

    for level, cell, oi in match.positive_cells:
        _, _, w = outputs[level]
        loss, gw = smooth_l1(w[cell], match.target_deltas[level][cell])
        total += cfg.smooth_l1_weight * loss / denom
        grads[level][2][cell] += cfg.smooth_l1_weight * gw / denom
    return total, grads


class _Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(
    net: MicroNet,
    scenes: Sequence[Scene],
    cfg: TrainConfig,
    on_epoch=None,
) -> list[float]:
    """Train in place over the scenes; returns per-epoch mean losses.

    One optimizer step per scene per epoch, scenes visited in a seeded
    shuffle. Dropout stays active during training; the attenuated loss
    draws fresh noise per step and, to keep the variance head from choking
    early learning, only engages after ``cfg.warmup_epochs`` plain-CE
    epochs. ``on_epoch(epoch_index, net)`` runs after each epoch, e.g. for
    checkpoint snapshots. Fully reproducible from ``cfg.seed``.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    matches = [match_anchors(scene, net.grid) for scene in scenes]
    rng = np.random.default_rng(cfg.seed)
    optimizer = _Adam(net.params, cfg.learning_rate)
    max_cells = sum(int(np.prod(net.grid.level_shape(li))) for li in range(len(net.grid.levels)))

    history = []
    for epoch in range(cfg.epochs):
        use_attenuated = cfg.loss_kind == "attenuated" and epoch >= cfg.warmup_epochs
        order = rng.permutation(len(scenes))
        epoch_losses = []
        for si in order:
            dropout_seed = int(rng.integers(2**63))
            eps = None
            if use_attenuated:
                eps = rng.standard_normal(
                    (cfg.mc_integration_samples, max_cells, net.grid.num_classes)
                )
            outputs, cache = net.forward(
                scenes[si].image, dropout_active=True, seed=dropout_seed, want_cache=True
            )
            loss, head_grads = _scene_loss_and_grads(
                net, outputs, matches[si], cfg, eps, use_attenuated
            )
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads = net.backward(head_grads, cache)
            optimizer.step(net.params, grads)
            epoch_losses.append(loss)
        history.append(float(np.mean(epoch_losses)))
        if on_epoch is not None:
            on_epoch(epoch, net)
    return history


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _outputs_to_passgrid(net: MicroNet, outputs, scan_id: str, pass_index: int) -> PassGrid:
    levels = []
    for z, s, w in outputs:
        levels.append(
            LevelOutput(prob=softmax(z), pred_var=np.exp(s), deltas=w.copy())
        )
    return PassGrid(scan_id=scan_id, pass_index=pass_index, levels=levels)


def mc_infer(
    net: MicroNet, image: np.ndarray, t_passes: int, seed: int, scan_id: str = "scan"
) -> list[PassGrid]:
    """T stochastic forward passes with dropout active.

    Each pass uses an independent dropout mask drawn from the seed stream;
    probabilities are softmaxed logits and ``pred_var = exp(s)``.
    """
    if t_passes < 1:
        raise ValueError("t_passes must be >= 1")
    rng = np.random.default_rng(seed)
    passes = []
    for t in range(t_passes):
        pass_seed = int(rng.integers(2**63))
        outputs = net.forward(image, dropout_active=True, seed=pass_seed)
        passes.append(_outputs_to_passgrid(net, outputs, scan_id, t))
    return passes


def infer_deterministic(net: MicroNet, image: np.ndarray, scan_id: str = "scan") -> PassGrid:
    """Single dropout-free pass (the expectation network), as one PassGrid."""
    outputs = net.forward(image, dropout_active=False)
    return _outputs_to_passgrid(net, outputs, scan_id, 0)
