"""Piecewise-linear layer graphs and their frozen-region calculus.

A forward pass records every ReLU on/off mask and every max-pool argmax.
With those frozen the network is an affine map ``z = W x + b``; this module
extracts ``W`` (one row per class) by pulling unit vectors back through the
frozen graph, and differentiates losses that depend on those rows.

The trick behind :func:`backprop_frozen`: for a fixed input-space vector
``g``, ``g . w_i = e_i . (J g)`` where ``J`` is the bias-free frozen network.
So the parameter gradient of any term ``L(w)`` equals the ordinary
parameter gradient of the frozen network evaluated *at input* ``dL/dw``,
seeded with ``e_i`` at the output.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from nsrobust import tensor
from nsrobust.errors import ArgumentError, ContractError, DimensionError, InputError, StateError

LAYER_FIELDS = {
    "dense": ("in_size", "out_size", "bias"),
    "relu": (),
    "conv1d": ("in_size", "out_size", "kernel", "stride", "pad", "bias"),
    "maxpool1d": ("kernel", "stride"),
    "residual_begin": (),
    "residual_end": (),
    "flatten": (),
}


@dataclass(frozen=True)
class LayerSpec:
    """One node of the layer sequence.

    ``in_size``/``out_size`` are features for dense layers and channels for
    conv layers.
    """

    kind: str
    in_size: int = 0
    out_size: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    bias: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_FIELDS:
            raise ArgumentError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self):
        return self.kind in ("dense", "conv1d")

    def to_dict(self):
        out = {"kind": self.kind}
        for name in LAYER_FIELDS[self.kind]:
            out[name] = getattr(self, name)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", None)
        if kind not in LAYER_FIELDS:
            raise ArgumentError(f"unknown layer kind {kind!r}")
        extra = set(d) - set(LAYER_FIELDS[kind])
        if extra:
            raise ArgumentError(f"unexpected fields for {kind}: {sorted(extra)}")
        return cls(kind=kind, **d)


def dense(in_size, out_size, bias=True):
    return LayerSpec("dense", in_size=in_size, out_size=out_size, bias=bias)


def conv(in_ch, out_ch, kernel, stride=1, pad=0, bias=True):
    return LayerSpec("conv1d", in_size=in_ch, out_size=out_ch, kernel=kernel,
                     stride=stride, pad=pad, bias=bias)


def maxpool(kernel, stride):
    return LayerSpec("maxpool1d", kernel=kernel, stride=stride)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")
RES_BEGIN = LayerSpec("residual_begin")
RES_END = LayerSpec("residual_end")


def layer_shapes(layers, input_shape):
    """Output shape of every layer (batch axis excluded); validates composition."""
    shape = tuple(input_shape)
    shapes = []
    skips = []
    for i, layer in enumerate(layers):
        k = layer.kind
        if k == "dense":
            if shape != (layer.in_size,):
                raise DimensionError(f"layer {i} (dense {layer.in_size}->{layer.out_size}) got input {shape}")
            shape = (layer.out_size,)
        elif k == "conv1d":
            if len(shape) != 2 or shape[0] != layer.in_size:
                raise DimensionError(f"layer {i} (conv1d in_ch={layer.in_size}) got input {shape}")
            shape = (layer.out_size,
                     tensor.conv_output_length(shape[1], layer.kernel, layer.stride, layer.pad))
        elif k == "maxpool1d":
            if len(shape) != 2:
                raise DimensionError(f"layer {i} (maxpool1d) needs [C, L] input, got {shape}")
            length = (shape[1] - layer.kernel) // layer.stride + 1
            if length < 1:
                raise DimensionError(
                    f"layer {i} (maxpool1d k={layer.kernel}) collapses length {shape[1]} below 1")
            shape = (shape[0], length)
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k == "residual_begin":
            skips.append(shape)
        elif k == "residual_end":
            if not skips:
                raise DimensionError(f"layer {i}: residual_end without matching residual_begin")
            opened = skips.pop()
            if opened != shape:
                raise DimensionError(f"layer {i}: residual branch changes shape {opened} -> {shape}")
        shapes.append(shape)
    if skips:
        raise DimensionError(f"{len(skips)} residual_begin bracket(s) left open")
    return shapes


@dataclass
class Model:
    layers: tuple
    params: dict
    input_shape: tuple
    class_count: int

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.validate()

    def validate(self):
        shapes = self.shapes = layer_shapes(self.layers, self.input_shape)
        final = shapes[-1] if shapes else self.input_shape
        if final != (self.class_count,):
            raise DimensionError(f"final output shape {final} != ({self.class_count},)")
        expected = dict(self.param_shapes())
        if set(expected) != set(self.params):
            raise StateError(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for name, shape in expected.items():
            p = self.params[name]
            if p.shape != shape:
                raise DimensionError(f"parameter {name} has shape {p.shape}, expected {shape}")
            if not np.all(np.isfinite(p)):
                raise StateError(f"parameter {name} contains non-finite values")

    def param_shapes(self):
        """``(name, shape)`` pairs in layer order."""
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                out.append((f"{i}.weight", (layer.out_size, layer.in_size)))
            elif layer.kind == "conv1d":
                out.append((f"{i}.weight", (layer.out_size, layer.in_size, layer.kernel)))
            else:
                continue
            if layer.bias:
                out.append((f"{i}.bias", (layer.out_size,)))
        return out

    def param_names(self):
        return [name for name, _ in self.param_shapes()]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype if self.params else tensor.default_dtype()

    @property
    def input_dim(self):
        return int(np.prod(self.input_shape))

    def copy(self):
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype):
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})


def init_params(layers, stream, dtype=None):
    """Uniform(-s, s) weights with ``s = sqrt(6 / (fan_in + fan_out))``; zero biases."""
    params = {}
    for i, layer in enumerate(layers):
        if layer.kind == "dense":
            fan_in, fan_out, shape = layer.in_size, layer.out_size, (layer.out_size, layer.in_size)
        elif layer.kind == "conv1d":
            fan_in = layer.in_size * layer.kernel
            fan_out = layer.out_size * layer.kernel
            shape = (layer.out_size, layer.in_size, layer.kernel)
        else:
            continue
        s = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{i}.weight"] = stream.uniform(-s, s, shape, dtype=dtype)
        if layer.bias:
            params[f"{i}.bias"] = np.zeros(layer.out_size, dtype=dtype or tensor.default_dtype())
    return params


DEFAULT_MLP_WIDTHS = (187, 128, 128, 128, 32, 5)


def build_mlp(widths=DEFAULT_MLP_WIDTHS, bias=True, seed=0, relu_count=None, dtype=None):
    """Dense stack over ``widths``.

    By default a ReLU follows every dense layer except the last two, which
    yields ``(187-128)-RELU-(128-128)-RELU-(128-128)-RELU-(128-32)-(32-5)``
    for the default widths.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ArgumentError("build_mlp needs at least an input and an output width")
    if any(w <= 0 for w in widths):
        raise ArgumentError(f"widths must be positive, got {widths}")
    n_dense = len(widths) - 1
    if relu_count is None:
        relu_count = max(n_dense - 2, 0)
    if not 0 <= relu_count < n_dense:
        raise ArgumentError(f"relu_count must be in [0, {n_dense - 1}], got {relu_count}")
    layers = []
    for i in range(n_dense):
        layers.append(dense(widths[i], widths[i + 1], bias=bias))
        if i < relu_count:
            layers.append(RELU)
    params = init_params(layers, tensor.RandStream(seed, 0), dtype=dtype)
    return Model(layers, params, (widths[0],), widths[-1])


@dataclass(frozen=True)
class CNNConfig:
    blocks: int = 5
    channels: int = 32
    kernel: int = 5
    pool_kernel: int = 5
    pool_stride: int = 2
    hidden: int = 32
    input_length: int = 187
    class_count: int = 5
    bias: bool = True


def build_cnn(config=CNNConfig(), seed=0, dtype=None):
    """Residual 1-D CNN: conv stem, ``blocks`` x {conv, relu, conv, +skip, relu,
    maxpool}, flatten, dense, relu, dense."""
    c = config
    if c.blocks < 0 or c.channels < 1 or c.hidden < 1 or c.class_count < 1:
        raise ArgumentError(f"invalid CNN config {c}")
    if c.kernel < 1 or c.kernel % 2 == 0:
        raise ArgumentError(f"residual convs need an odd kernel, got {c.kernel}")
    pad = (c.kernel - 1) // 2
    layers = [conv(1, c.channels, c.kernel, 1, pad, c.bias)]
    length = c.input_length
    for b in range(c.blocks):
        layers += [RES_BEGIN,
                   conv(c.channels, c.channels, c.kernel, 1, pad, c.bias), RELU,
                   conv(c.channels, c.channels, c.kernel, 1, pad, c.bias),
                   RES_END, RELU, maxpool(c.pool_kernel, c.pool_stride)]
        length = (length - c.pool_kernel) // c.pool_stride + 1
        if length < 1:
            raise DimensionError(f"residual block {b} pools the signal length below 1")
    layers += [FLATTEN, dense(c.channels * length, c.hidden, c.bias), RELU,
               dense(c.hidden, c.class_count, c.bias)]
    params = init_params(layers, tensor.RandStream(seed, 0), dtype=dtype)
    return Model(layers, params, (1, c.input_length), c.class_count)


@dataclass
class MaskRecord:
    """Frozen linear region of a batch: ReLU masks and pool argmax indices,
    keyed by layer index, each with a leading batch axis."""

    relu: dict = field(default_factory=dict)
    pool: dict = field(default_factory=dict)

    @property
    def n(self):
        for d in (self.relu, self.pool):
            for v in d.values():
                return v.shape[0]
        return None

    def select(self, idx):
        return MaskRecord({k: v[idx] for k, v in self.relu.items()},
                          {k: v[idx] for k, v in self.pool.items()})

    def agrees(self, other):
        """Per-sample flag: True where both records describe the same region."""
        n = self.n if self.n is not None else other.n
        same = np.ones(n if n is not None else 0, dtype=bool)
        for mine, theirs in ((self.relu, other.relu), (self.pool, other.pool)):
            if mine.keys() != theirs.keys():
                raise StateError("mask records come from different models")
            for k in mine:
                same &= (mine[k] == theirs[k]).reshape(n, -1).all(axis=1)
        return same


@dataclass
class EffectiveLinear:
    """Per-sample affine form ``z[n, classes[n, j]] = w[n, j] . x[n] + b[n, j]``."""

    w: np.ndarray
    b: np.ndarray
    classes: np.ndarray

    def for_class(self, cls):
        """Rows for a per-sample class vector; ContractError where missing."""
        cls = np.asarray(cls)
        hit = self.classes == cls[:, None]
        if not hit.any(axis=1).all():
            missing = np.flatnonzero(~hit.any(axis=1))
            raise ContractError(f"effective weights missing for samples {missing[:10].tolist()}")
        slot = hit.argmax(axis=1)
        rows = np.arange(len(cls))
        return self.w[rows, slot], self.b[rows, slot]


@dataclass
class Trace:
    """Everything :func:`backprop_frozen` needs from one forward pass."""

    x: np.ndarray
    logits: np.ndarray
    masks: MaskRecord
    inputs: dict


@dataclass
class LossTerms:
    """A scalar loss expressed through its partial derivatives.

    ``grad_logits[n]`` is dL/dz for sample n.  ``grad_weights[n, j]`` is
    dL/dw for the effective row of class ``weight_classes[n, j]`` (flattened
    input space).  Both are w.r.t. the batch-level scalar, so batch
    averaging is already folded in.
    """

    value: float
    grad_logits: np.ndarray
    grad_weights: np.ndarray = None
    weight_classes: np.ndarray = None
    stats: dict = field(default_factory=dict)

    def __float__(self):
        return float(self.value)


def _as_batch(model, x):
    x = np.asarray(x)
    if x.ndim >= 1 and x.shape[1:] == model.input_shape:
        pass
    elif x.ndim == 2 and x.shape[1] == model.input_dim:
        x = x.reshape((x.shape[0],) + model.input_shape)
    else:
        raise DimensionError(f"input shape {x.shape} does not match model input {model.input_shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("input contains non-finite values")
    return x.astype(model.dtype, copy=False)


def _run(model, x, masks=None, bias=True, keep_inputs=False):
    """Forward pass; with ``masks`` the ReLU/pool decisions are replayed, not recomputed."""
    h = x
    record = MaskRecord()
    inputs = {}
    skips = []
    p = model.params
    for i, layer in enumerate(model.layers):
        k = layer.kind
        if k == "dense":
            if keep_inputs:
                inputs[i] = h
            h = h @ p[f"{i}.weight"].T
            if bias and layer.bias:
                h = h + p[f"{i}.bias"]
        elif k == "conv1d":
            n = h.shape[0]
            cols, out_len = tensor.im2col(h, layer.kernel, layer.stride, layer.pad)
            if keep_inputs:
                inputs[i] = cols
            wf = p[f"{i}.weight"].reshape(layer.out_size, -1)
            h = (cols @ wf.T).reshape(n, out_len, layer.out_size).transpose(0, 2, 1)
            if bias and layer.bias:
                h = h + p[f"{i}.bias"][:, None]
        elif k == "relu":
            m = masks.relu[i] if masks is not None else h > 0
            record.relu[i] = m
            h = h * m
        elif k == "maxpool1d":
            win = tensor.windows(h, layer.kernel, layer.stride, 0)
            arg = masks.pool[i] if masks is not None else win.argmax(axis=-1)
            record.pool[i] = arg
            h = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        elif k == "flatten":
            h = h.reshape(h.shape[0], -1)
        elif k == "residual_begin":
            skips.append(h)
        elif k == "residual_end":
            h = h + skips.pop()
    return h, record, inputs


def _pullback(model, masks, g, inputs=None, input_shape=None, bias_grads=True):
    """Reverse pass through the frozen graph.

    Returns ``(dL/dx, param grads)``; param grads are only formed when
    ``inputs`` (from ``_run(keep_inputs=True)``) is supplied.
    """
    grads = {} if inputs is not None else None
    skips = []
    shapes = model.shapes
    p = model.params
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        k = layer.kind
        in_shape = shapes[i - 1] if i > 0 else model.input_shape
        if k == "dense":
            w = p[f"{i}.weight"]
            if grads is not None:
                grads[f"{i}.weight"] = g.T @ inputs[i]
                if layer.bias:
                    grads[f"{i}.bias"] = g.sum(axis=0) if bias_grads else np.zeros(layer.out_size, g.dtype)
            g = g @ w
        elif k == "conv1d":
            n, out_ch, out_len = g.shape
            wf = p[f"{i}.weight"].reshape(out_ch, -1)
            gt = g.transpose(0, 2, 1).reshape(n * out_len, out_ch)
            if grads is not None:
                grads[f"{i}.weight"] = (gt.T @ inputs[i]).reshape(p[f"{i}.weight"].shape)
                if layer.bias:
                    grads[f"{i}.bias"] = g.sum(axis=(0, 2)) if bias_grads else np.zeros(out_ch, g.dtype)
            dcols = (gt @ wf).reshape(n, out_len, layer.in_size, layer.kernel)
            length = in_shape[1]
            dx = np.zeros((n, layer.in_size, length + 2 * layer.pad), dtype=g.dtype)
            span = layer.stride * (out_len - 1) + 1
            for j in range(layer.kernel):
                dx[:, :, j:j + span:layer.stride] += dcols[:, :, :, j].transpose(0, 2, 1)
            g = dx[:, :, layer.pad:layer.pad + length]
        elif k == "relu":
            g = g * masks.relu[i]
        elif k == "maxpool1d":
            arg = masks.pool[i]
            n, ch, out_len = g.shape
            dx = np.zeros((n, ch, in_shape[1]), dtype=g.dtype)
            span = layer.stride * (out_len - 1) + 1
            for j in range(layer.kernel):
                dx[:, :, j:j + span:layer.stride] += g * (arg == j)
            g = dx
        elif k == "flatten":
            g = g.reshape((g.shape[0],) + tuple(in_shape))
        elif k == "residual_end":
            skips.append(g)
        elif k == "residual_begin":
            g = g + skips.pop()
    return g, grads


def _check_masks(model, masks, n):
    want_relu = {i for i, l in enumerate(model.layers) if l.kind == "relu"}
    want_pool = {i for i, l in enumerate(model.layers) if l.kind == "maxpool1d"}
    if set(masks.relu) != want_relu or set(masks.pool) != want_pool:
        raise StateError("mask record does not match the model's ReLU/pool layers")
    shapes = model.shapes
    for i, m in masks.relu.items():
        if m.shape != (n,) + shapes[i]:
            raise StateError(f"relu mask at layer {i} has shape {m.shape}, expected {(n,) + shapes[i]}")
    for i, a in masks.pool.items():
        if a.shape != (n,) + shapes[i]:
            raise StateError(f"pool indices at layer {i} have shape {a.shape}, expected {(n,) + shapes[i]}")


def forward(model, x):
    """Logits ``[N, class_count]`` and the MaskRecord of the batch."""
    x = _as_batch(model, x)
    logits, masks, _ = _run(model, x)
    return logits, masks


def trace(model, x):
    x = _as_batch(model, x)
    logits, masks, inputs = _run(model, x, keep_inputs=True)
    return Trace(x, logits, masks, inputs)


def logits(model, x):
    return forward(model, x)[0]


def frozen_forward(model, x, masks, bias=True):
    """Evaluate the affine map of a recorded region at arbitrary inputs."""
    x = _as_batch(model, x)
    _check_masks(model, masks, x.shape[0])
    return _run(model, x, masks=masks, bias=bias)[0]


def _slots(model, n, classes, labels):
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ArgumentError(f"labels must have shape ({n},), got {labels.shape}")
        return labels[:, None]
    if classes is None:
        classes = range(model.class_count)
    classes = np.asarray(list(classes), dtype=np.int64)
    return np.broadcast_to(classes, (n, len(classes))).copy()


def effective_weights(model, masks, slots):
    """``w[n, j]`` = gradient of ``z[n, slots[n, j]]`` w.r.t. the (flattened) input."""
    n, k = slots.shape
    if np.any((slots < 0) | (slots >= model.class_count)):
        raise ArgumentError(f"class indices must be in [0, {model.class_count})")
    out = np.empty((n, k, model.input_dim), dtype=model.dtype)
    rows = np.arange(n)
    for j in range(k):
        seed = np.zeros((n, model.class_count), dtype=model.dtype)
        seed[rows, slots[:, j]] = 1
        gx, _ = _pullback(model, masks, seed)
        out[:, j] = gx.reshape(n, -1)
    return out


def effective_linear(model, x, masks, classes=None, labels=None):
    """Effective rows ``w_i`` and offsets ``b_i = z_i - w_i . x`` of the recorded region.

    ``classes`` selects the same classes for every sample (default: all);
    ``labels`` instead selects one class per sample, the training fast path.
    """
    x = _as_batch(model, x)
    n = x.shape[0]
    _check_masks(model, masks, n)
    slots = _slots(model, n, classes, labels)
    w = effective_weights(model, masks, slots)
    z = _run(model, x, masks=masks)[0]
    zk = np.take_along_axis(z, slots, axis=1)
    b = zk - np.einsum("nkd,nd->nk", w, x.reshape(n, -1))
    return EffectiveLinear(w, b, slots)


def backprop_frozen(model, record, terms):
    """Parameter gradients of a loss given as :class:`LossTerms`.

    ``record`` is the :class:`Trace` of the forward pass the loss was built
    on.  Masks and pool indices are constants, which is exact inside the
    recorded region.
    """
    if not isinstance(terms, LossTerms):
        raise ContractError(f"unsupported loss graph of type {type(terms).__name__}")
    n = record.x.shape[0]
    if terms.grad_logits.shape != (n, model.class_count):
        raise ContractError(f"grad_logits shape {terms.grad_logits.shape} != {(n, model.class_count)}")
    _, grads = _pullback(model, record.masks, terms.grad_logits.astype(model.dtype, copy=False),
                         inputs=record.inputs)
    if terms.grad_weights is None:
        if terms.weight_classes is not None:
            raise ContractError("weight_classes given without grad_weights")
        return grads
    gw = np.asarray(terms.grad_weights)
    slots = np.asarray(terms.weight_classes) if terms.weight_classes is not None else None
    if slots is None or gw.ndim != 3 or gw.shape[:2] != slots.shape or gw.shape[0] != n \
            or gw.shape[2] != model.input_dim:
        raise ContractError("grad_weights must be [N, K, input_dim] with matching weight_classes [N, K]")
    rows = np.arange(n)
    for j in range(gw.shape[1]):
        u = gw[:, j].astype(model.dtype, copy=False).reshape((n,) + model.input_shape)
        _, _, tangent_inputs = _run(model, u, masks=record.masks, bias=False, keep_inputs=True)
        seed = np.zeros((n, model.class_count), dtype=model.dtype)
        seed[rows, slots[:, j]] = 1
        _, extra = _pullback(model, record.masks, seed, inputs=tangent_inputs, bias_grads=False)
        for name, g in extra.items():
            grads[name] = grads[name] + g
    return grads


def input_gradient(model, x, dloss_dlogits):
    """Logits and ``dL/dx`` (shaped like ``x``) for a loss given by ``dloss_dlogits(z) -> [N, C]``."""
    shape = np.shape(x)
    x = _as_batch(model, x)
    z, masks, _ = _run(model, x)
    gx, _ = _pullback(model, masks, dloss_dlogits(z).astype(model.dtype, copy=False))
    return z, gx.reshape(shape)
