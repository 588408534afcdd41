"""Small sequential CNNs: forward, backward, and momentum-SGD training.

The training objective is the prediction loss plus a quadratic penalty on
every weight, where kernel weights can carry an extra per-group coefficient
on top of the base weight decay. Gradients returned by :func:`backward` are
for the loss term only; the decay terms are folded in by :func:`sgd_step`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import ConvGeometry, GeometryError, ShapeError, im2col_batch, col2im_batch

LAYER_KINDS = ("conv", "relu", "maxpool", "fc", "softmax-xent")


@dataclass
class LayerSpec:
    """One resolved layer of a sequential network.

    Geometry and feature counts are bound to a concrete input shape by
    :func:`build_network`, so adjacent layers are chain-compatible by
    construction.
    """

    kind: str
    geom: ConvGeometry | None = None      # conv only
    filters: int = 0                      # conv only
    in_features: int = 0                  # fc only
    out_features: int = 0                 # fc only
    use_bias: bool = True
    prune_exempt: bool = False

    @property
    def parametric(self) -> bool:
        return self.kind in ("conv", "fc")

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            g = self.geom
            return (self.filters, g.in_channels, g.kernel_h, g.kernel_w)
        if self.kind == "fc":
            return (self.out_features, self.in_features)
        raise ShapeError(f"layer kind {self.kind!r} has no weights")


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.004
    batch_size: int = 32
    max_iters: int = 2000
    lr_schedule: str = "fixed"            # "fixed" or "step"
    step_factor: float = 0.1
    step_every: int = 1000

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.batch_size < 1 or self.max_iters < 0:
            raise ValueError("batch_size must be >= 1 and max_iters >= 0")
        if self.lr_schedule not in ("fixed", "step"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.lr_schedule == "step" and (self.step_factor <= 0 or self.step_every < 1):
            raise ValueError("step schedule needs step_factor > 0 and step_every >= 1")


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Learning rate in effect at a 0-based iteration index."""
    if cfg.lr_schedule == "fixed":
        return cfg.base_lr
    return cfg.base_lr * cfg.step_factor ** (iteration // cfg.step_every)


@dataclass
class NetworkState:
    """All mutable state of one network.

    ``weights``/``biases``/``vel_w``/``vel_b`` are lists aligned with
    ``layers``; entries for non-parametric layers are None. Momentum buffers
    always mirror their parameter's shape.
    """

    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]
    vel_w: list[np.ndarray | None]
    vel_b: list[np.ndarray | None]
    rng_seed: int = 0
    iteration: int = 0
    dtype: np.dtype = np.dtype(np.float32)
    meta: dict = field(default_factory=dict)

    @property
    def parametric_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.parametric]

    @property
    def conv_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "conv"]

    def n_classes(self) -> int:
        for l in reversed(self.layers):
            if l.kind == "fc":
                return l.out_features
            if l.kind == "conv":
                return l.filters
        raise ShapeError("network has no parametric layer")

    def clone(self) -> "NetworkState":
        return replace(
            self,
            layers=[replace(l) for l in self.layers],
            weights=[None if w is None else w.copy() for w in self.weights],
            biases=[None if b is None else b.copy() for b in self.biases],
            vel_w=[None if v is None else v.copy() for v in self.vel_w],
            vel_b=[None if v is None else v.copy() for v in self.vel_b],
            meta=dict(self.meta),
        )


def resolve_layers(
    defs: list[dict], input_shape: tuple[int, int, int]
) -> list[LayerSpec]:
    """Bind raw layer definitions to concrete shapes, checking the chain.

    Each def is a dict with a "kind" key; conv defs carry filters/kernel/
    stride/pad, fc defs carry out_features. The activation shape is threaded
    through so every geometry is validated where it will actually run.
    """
    shape: tuple | None = tuple(int(d) for d in input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise GeometryError(f"input shape must be (C,H,W) of positive ints: {shape}")
    layers = []
    for pos, d in enumerate(defs):
        kind = d.get("kind")
        if kind not in LAYER_KINDS:
            raise ValueError(f"layer {pos}: unknown kind {kind!r}")
        if kind == "softmax-xent":
            if pos != len(defs) - 1:
                raise ValueError("softmax-xent must be the final layer")
            layers.append(LayerSpec(kind=kind))
            continue
        if kind == "conv":
            if not isinstance(shape, tuple) or len(shape) != 3:
                raise GeometryError(f"layer {pos}: conv needs a (C,H,W) input, got {shape}")
            k = d.get("kernel", 3)
            kh, kw = (k, k) if isinstance(k, int) else (int(k[0]), int(k[1]))
            geom = ConvGeometry(
                in_channels=shape[0], in_h=shape[1], in_w=shape[2],
                kernel_h=kh, kernel_w=kw,
                stride=int(d.get("stride", 1)), pad=int(d.get("pad", 0)),
            )
            spec = LayerSpec(
                kind="conv", geom=geom, filters=int(d["filters"]),
                use_bias=bool(d.get("bias", True)),
                prune_exempt=bool(d.get("prune_exempt", False)),
            )
            if spec.filters < 1:
                raise ValueError(f"layer {pos}: filters must be positive")
            shape = (spec.filters, geom.out_h, geom.out_w)
        elif kind == "relu":
            spec = LayerSpec(kind="relu")
        elif kind == "maxpool":
            if not isinstance(shape, tuple) or len(shape) != 3:
                raise GeometryError(f"layer {pos}: maxpool needs a (C,H,W) input")
            if shape[1] % 2 or shape[2] % 2:
                raise GeometryError(
                    f"layer {pos}: 2x2/2 maxpool needs even spatial dims, got {shape}"
                )
            spec = LayerSpec(kind="maxpool")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        else:  # fc
            feat = int(np.prod(shape)) if isinstance(shape, tuple) else int(shape)
            spec = LayerSpec(
                kind="fc", in_features=feat, out_features=int(d["out_features"]),
                use_bias=bool(d.get("bias", True)), prune_exempt=True,
            )
            if spec.out_features < 1:
                raise ValueError(f"layer {pos}: out_features must be positive")
            shape = spec.out_features
        layers.append(spec)
    if not any(l.parametric for l in layers):
        raise ValueError("network has no parametric layer")
    return layers


def build_network(
    defs: list[dict],
    input_shape: tuple[int, int, int],
    seed: int = 0,
    dtype=np.float32,
) -> NetworkState:
    """Construct a network with seeded He-scaled Gaussian weights, zero biases."""
    layers = resolve_layers(defs, input_shape)
    rng = np.random.Generator(np.random.PCG64(seed))
    dtype = np.dtype(dtype)
    weights: list[np.ndarray | None] = []
    biases: list[np.ndarray | None] = []
    for spec in layers:
        if not spec.parametric:
            weights.append(None)
            biases.append(None)
            continue
        shape = spec.weight_shape()
        fan_in = int(np.prod(shape[1:]))
        w = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        weights.append(w)
        n_out = shape[0]
        biases.append(np.zeros(n_out, dtype=dtype) if spec.use_bias else None)
    return NetworkState(
        layers=layers,
        input_shape=tuple(int(d) for d in input_shape),
        weights=weights,
        biases=biases,
        vel_w=[None if w is None else np.zeros_like(w) for w in weights],
        vel_b=[None if b is None else np.zeros_like(b) for b in biases],
        rng_seed=int(seed),
        dtype=dtype,
    )


def apply_layer(net: NetworkState, i: int, x: np.ndarray):
    """Run layer i on activation x; returns (output, cache for backward)."""
    spec = net.layers[i]
    if spec.kind == "conv":
        g = spec.geom
        cols = im2col_batch(x, g)                       # (B, K, P)
        w2 = net.weights[i].reshape(spec.filters, g.cols)
        y = np.matmul(w2, cols)                         # (B, N, P)
        if net.biases[i] is not None:
            y += net.biases[i][:, None]
        y = y.reshape(x.shape[0], spec.filters, g.out_h, g.out_w)
        return y, ("conv", cols)
    if spec.kind == "relu":
        mask = x > 0
        return np.where(mask, x, np.zeros((), dtype=x.dtype)), ("relu", mask)
    if spec.kind == "maxpool":
        b, c, h, w = x.shape
        win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(b, c, h // 2, w // 2, 4)
        arg = win.argmax(axis=-1)                       # first max wins ties
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, ("maxpool", arg, x.shape)
    if spec.kind == "fc":
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != spec.in_features:
            raise ShapeError(
                f"layer {i}: fc expects {spec.in_features} features, got {flat.shape[1]}"
            )
        y = flat @ net.weights[i].T
        if net.biases[i] is not None:
            y += net.biases[i]
        return y, ("fc", flat, x.shape)
    # softmax-xent is a terminal marker; the loss lives in softmax_xent()
    return x, ("softmax-xent",)


def forward(net: NetworkState, x: np.ndarray):
    """Full forward pass; returns (logits, list of per-layer caches)."""
    x = np.asarray(x, dtype=net.dtype)
    if x.ndim != 4 or x.shape[1:] != net.input_shape:
        raise ShapeError(
            f"batch shape {x.shape} does not match input shape {net.input_shape}"
        )
    caches = []
    for i in range(len(net.layers)):
        x, cache = apply_layer(net, i, x)
        caches.append(cache)
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    return x, caches


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient at the logits."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    loss = float(nll.mean(dtype=np.float64))
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1
    dlogits /= np.asarray(n, dtype=logits.dtype)
    return loss, dlogits.astype(logits.dtype, copy=False)


def layer_backward(net: NetworkState, i: int, cache, dy: np.ndarray, need_dx: bool):
    """Backprop through layer i; returns (dx, dw, db)."""
    spec = net.layers[i]
    tag = cache[0]
    if tag != spec.kind:
        raise ValueError(f"layer {i}: cache is for {tag!r}, layer is {spec.kind!r}")
    if spec.kind == "conv":
        g = spec.geom
        cols = cache[1]
        b, _, _ = cols.shape
        dym = dy.reshape(b, spec.filters, g.positions)
        dw = np.einsum("bnp,bkp->nk", dym, cols).reshape(net.weights[i].shape)
        db = dym.sum(axis=(0, 2)) if net.biases[i] is not None else None
        dx = None
        if need_dx:
            w2 = net.weights[i].reshape(spec.filters, g.cols)
            dcols = np.matmul(w2.T, dym)
            dx = col2im_batch(dcols, g)
        return dx, dw, db
    if spec.kind == "relu":
        mask = cache[1]
        return dy * mask, None, None
    if spec.kind == "maxpool":
        arg, in_shape = cache[1], cache[2]
        b, c, h, w = in_shape
        dwin = np.zeros((b, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
        dx = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(dx.reshape(in_shape)), None, None
    if spec.kind == "fc":
        flat, in_shape = cache[1], cache[2]
        dw = dy.T @ flat
        db = dy.sum(axis=0) if net.biases[i] is not None else None
        dx = (dy @ net.weights[i]).reshape(in_shape) if need_dx else None
        return dx, dw, db
    return dy, None, None


def backward(net: NetworkState, caches: list, dlogits: np.ndarray):
    """Gradients of the prediction loss for every parameter.

    Returns (dweights, dbiases), lists aligned with net.layers. The input
    image gradient is not materialized.
    """
    if len(caches) != len(net.layers):
        raise ValueError("cache does not match network depth")
    dweights: list[np.ndarray | None] = [None] * len(net.layers)
    dbiases: list[np.ndarray | None] = [None] * len(net.layers)
    first_param = net.parametric_indices[0]
    dy = dlogits
    # layers below the first parametric one influence no parameter gradient
    for i in range(len(net.layers) - 1, first_param - 1, -1):
        dx, dw, db = layer_backward(net, i, caches[i], dy, need_dx=i > first_param)
        dweights[i], dbiases[i] = dw, db
        if i > first_param:
            dy = dx
    return dweights, dbiases


def loss_and_grads(net: NetworkState, x: np.ndarray, labels: np.ndarray):
    """Convenience: forward, loss, and loss-term gradients in one call."""
    logits, caches = forward(net, x)
    loss, dlogits = softmax_xent(logits, labels)
    dweights, dbiases = backward(net, caches, dlogits)
    return loss, dweights, dbiases


def sgd_step(
    net: NetworkState,
    dweights: list,
    dbiases: list,
    cfg: TrainConfig,
    lr: float | None = None,
    reg: dict | None = None,
    masks: dict | None = None,
    bias_masks: dict | None = None,
) -> NetworkState:
    """One in-place momentum-SGD step.

    ``reg`` maps a conv layer index to an extra per-kernel-weight decay
    coefficient array (broadcastable to the weight shape, all entries >= 0);
    the effective gradient on a kernel weight is then
    ``dL/dw + (weight_decay + extra) * w``. Biases only ever see the base
    weight decay. ``masks``/``bias_masks`` mark kept entries; everything
    outside a mask is forced to exactly zero (weights, momentum, gradients).
    """
    reg = reg or {}
    masks = masks or {}
    bias_masks = bias_masks or {}
    lr_v = np.asarray(cfg.base_lr if lr is None else lr, dtype=net.dtype)
    mu = np.asarray(cfg.momentum, dtype=net.dtype)
    wd = np.asarray(cfg.weight_decay, dtype=net.dtype)
    for i in net.parametric_indices:
        w, v = net.weights[i], net.vel_w[i]
        g = dweights[i]
        if g is None or g.shape != w.shape:
            raise ShapeError(f"layer {i}: weight gradient missing or wrong shape")
        extra = reg.get(i)
        if extra is None:
            coef = wd
        else:
            extra = np.asarray(extra, dtype=np.float64)
            if extra.size and extra.min() < 0:
                raise ValueError(f"layer {i}: negative group regularization factor")
            # one rounding of the float64 sum keeps uniform-factor runs
            # bitwise equal to a plain run at the combined decay
            coef = (float(cfg.weight_decay) + extra).astype(net.dtype)
        m = masks.get(i)
        if m is not None:
            g = g * m
        g_eff = g + coef * w
        v *= mu
        v += g_eff
        w -= lr_v * v
        if m is not None:
            w *= m
            v *= m
        b, vb = net.biases[i], net.vel_b[i]
        if b is not None:
            gb = dbiases[i]
            if gb is None or gb.shape != b.shape:
                raise ShapeError(f"layer {i}: bias gradient missing or wrong shape")
            bm = bias_masks.get(i)
            if bm is not None:
                gb = gb * bm
            vb *= mu
            vb += gb + wd * b
            b -= lr_v * vb
            if bm is not None:
                b *= bm
                vb *= bm
    net.iteration += 1
    return net


def predict(net: NetworkState, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class predictions, streamed in batches."""
    out = []
    for lo in range(0, len(x), batch_size):
        logits, _ = forward(net, x[lo : lo + batch_size])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.intp)


def evaluate(net: NetworkState, x: np.ndarray, labels: np.ndarray, batch_size: int = 256):
    """Mean accuracy and mean loss over a dataset."""
    labels = np.asarray(labels)
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    loss_sum = 0.0
    for lo in range(0, len(x), batch_size):
        xb, yb = x[lo : lo + batch_size], labels[lo : lo + batch_size]
        logits, _ = forward(net, xb)
        loss, _ = softmax_xent(logits, yb)
        loss_sum += loss * len(xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / len(x), loss_sum / len(x)
