"""Declarative architecture specs and the multi-branch capsule network built from them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capsules import (DEFAULT_ROUTING_ITERATIONS, CapsuleRouting, CFCLayer, Decoder, MarginLossConfig,
                       capsule_lengths, margin_loss, reconstruction_loss, squash_forward, squash_backward)
from .errors import CheckpointMismatchError, ConfigError, DimensionError, InvalidStateError
from .tensor import (BatchNorm2d, Conv2d, DepthwiseConv2d, GradTape, Layer, PointwiseConv2d, ReLU,
                     Sequential, output_size)

LAYER_KINDS = ("conv3x3", "conv9x9", "depthwise_separable", "batchnorm", "relu")
_FIXED_KERNEL = {"conv3x3": 3, "conv9x9": 9}


@dataclass(frozen=True)
class LayerSpec:
    """One feature-extraction layer.

    ``in_channels``/``out_channels`` are required for convolutions and
    batchnorm; ``relu`` ignores them.  ``kernel`` only varies for
    ``depthwise_separable`` (the depthwise stage; the pointwise stage is 1x1).
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    stride: int = 1
    padding: int = 0
    kernel: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.kind in _FIXED_KERNEL:
            if self.kernel not in (0, _FIXED_KERNEL[self.kind]):
                raise ConfigError(f"{self.kind} implies kernel {_FIXED_KERNEL[self.kind]}, got {self.kernel}")
            object.__setattr__(self, "kernel", _FIXED_KERNEL[self.kind])
        elif self.kind == "depthwise_separable":
            object.__setattr__(self, "kernel", self.kernel or 3)
        else:
            object.__setattr__(self, "kernel", 0)
        if self.kind == "batchnorm" and self.out_channels == 0:
            object.__setattr__(self, "out_channels", self.in_channels)
        if self.stride < 1 or self.padding < 0:
            raise ConfigError(f"{self.kind}: stride must be >= 1 and padding >= 0")
        if self.kind in ("conv3x3", "conv9x9", "depthwise_separable") and \
                (self.in_channels < 1 or self.out_channels < 1):
            raise ConfigError(f"{self.kind} needs positive in/out channels")
        if self.kind == "batchnorm" and (self.in_channels < 1 or self.in_channels != self.out_channels):
            raise ConfigError("batchnorm needs matching positive channel counts")

    @property
    def spatial(self):
        return self.kind in ("conv3x3", "conv9x9", "depthwise_separable")


def conv3x3(c_in, c_out, stride=1, padding=0):
    return LayerSpec("conv3x3", c_in, c_out, stride, padding)


def conv9x9(c_in, c_out, stride=1, padding=0):
    return LayerSpec("conv9x9", c_in, c_out, stride, padding)


def dwsep(c_in, c_out, kernel=3, stride=1, padding=0):
    return LayerSpec("depthwise_separable", c_in, c_out, stride, padding, kernel)


def bn(c):
    return LayerSpec("batchnorm", c, c)


def relu():
    return LayerSpec("relu")


@dataclass(frozen=True)
class BranchSpec:
    layers: tuple = ()
    cfc_kernel: int = 1
    caps_dim: int = 8
    caps_types: int = 1
    cfc_stride: int = 1
    n_classes: int = 10
    class_caps_dim: int = 16
    iterations: int = DEFAULT_ROUTING_ITERATIONS

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.cfc_kernel < 1 or self.caps_dim < 1 or self.caps_types < 1 or self.cfc_stride < 1:
            raise ConfigError("CFC kernel, capsule dim, capsule types and stride must be >= 1")
        if self.iterations < 1:
            raise ConfigError("routing iterations must be >= 1")


@dataclass(frozen=True)
class ArchConfig:
    """Whole-network description shared by the model builder and the analyzer."""

    name: str
    input_shape: tuple
    n_classes: int
    stem: tuple = ()
    branches: tuple = ()
    class_caps_dim: int = 16
    routing_iterations: int = DEFAULT_ROUTING_ITERATIONS
    resquash: bool = False
    decoder_hidden: tuple = (512, 1024)
    use_decoder: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stem", tuple(self.stem))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "decoder_hidden", tuple(int(v) for v in self.decoder_hidden))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W) with positive entries, got {self.input_shape}")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        for i, br in enumerate(self.branches):
            if br.n_classes != self.n_classes or br.class_caps_dim != self.class_caps_dim:
                raise ConfigError(f"branch {i + 1} disagrees on class count / class capsule dim")

    @property
    def pixels(self):
        c, h, w = self.input_shape
        return c * h * w


# --------------------------------------------------------------------------- shape propagation


def layer_output_shape(spec, shape, where=None):
    """Propagate a ``(C, H, W)`` shape through one layer spec."""
    c, h, w = shape
    if spec.kind == "relu":
        return shape
    if spec.in_channels != c:
        raise DimensionError(f"{spec.kind} expects {spec.in_channels} channels, receives {c}",
                             axis="channels", where=where)
    if spec.kind == "batchnorm":
        return shape
    try:
        ho = output_size(h, spec.kernel, spec.padding, spec.stride)
        wo = output_size(w, spec.kernel, spec.padding, spec.stride)
    except DimensionError as exc:
        raise DimensionError(f"{spec.kind} shrinks {h}x{w} below 1x1", axis="spatial", where=where) from exc
    return (spec.out_channels, ho, wo)


def propagate(layers, shape, where=""):
    """Return the list of output shapes of ``layers`` starting from ``shape``."""
    shapes = []
    for i, spec in enumerate(layers):
        shape = layer_output_shape(spec, shape, where=f"{where}layer {i}")
        shapes.append(shape)
    return shapes


def stem_output_shape(cfg):
    shapes = propagate(cfg.stem, cfg.input_shape, "stem, ")
    return shapes[-1] if shapes else cfg.input_shape


def branch_feature_shape(cfg, index):
    shape = stem_output_shape(cfg)
    shapes = propagate(cfg.branches[index].layers, shape, f"branch {index + 1}, ")
    return shapes[-1] if shapes else shape


def branch_output_size(input_hw, branch, stem=()):
    """Spatial size after ``stem`` then the branch's layer list, starting from ``input_hw``.

    ``input_hw`` is an int (square) or an ``(H, W)`` pair; the result has the
    same form.
    """
    square = np.isscalar(input_hw)
    h, w = (input_hw, input_hw) if square else input_hw
    chain = tuple(stem) + tuple(branch.layers)
    first = next((s for s in chain if s.kind != "relu"), None)
    shape = (first.in_channels if first else 1, h, w)
    for i, spec in enumerate(chain):
        shape = layer_output_shape(spec, shape, where=f"layer {i}")
    return shape[1] if square else (shape[1], shape[2])


def branch_capsules(cfg, index):
    br = cfg.branches[index]
    _, h, w = branch_feature_shape(cfg, index)
    if br.cfc_kernel > h or br.cfc_kernel > w:
        raise DimensionError(f"CFC kernel {br.cfc_kernel} exceeds {h}x{w} feature map",
                             axis="spatial", where=f"branch {index + 1}, cfc")
    return br.caps_types * output_size(h, br.cfc_kernel, 0, br.cfc_stride) \
        * output_size(w, br.cfc_kernel, 0, br.cfc_stride)


def capsule_counts(cfg):
    return [branch_capsules(cfg, i) for i in range(len(cfg.branches))]


def validate(cfg):
    """Run full shape propagation; raises :class:`DimensionError` naming the failing layer."""
    if not cfg.branches:
        raise ConfigError("a model needs at least one branch")
    return capsule_counts(cfg)


# --------------------------------------------------------------------------- reference configs


def _stem(c_in, widths):
    layers = []
    for w in widths:
        layers += [conv3x3(c_in, w), bn(w), relu()]
        c_in = w
    return layers


def _block(c):
    # one block: two depthwise-separable 3x3 convs, 4 px of spatial reduction
    return [dwsep(c, c), bn(c), relu(), dwsep(c, c), bn(c), relu()]


def pdr_config(name, input_shape, n_classes=10, stem_widths=(64,) + (128,) * 8, branch_blocks=(0, 1, 2),
               caps_dim=8, class_caps_dim=16, iterations=DEFAULT_ROUTING_ITERATIONS,
               decoder_hidden=(512, 1024), resquash=False):
    """Shared 3x3 stem followed by branches of ``branch_blocks`` depthwise-separable blocks."""
    width = stem_widths[-1] if stem_widths else input_shape[0]
    branches = []
    for nb in branch_blocks:
        layers = []
        for _ in range(nb):
            layers += _block(width)
        branches.append(BranchSpec(tuple(layers), cfc_kernel=1, caps_dim=caps_dim, n_classes=n_classes,
                                   class_caps_dim=class_caps_dim, iterations=iterations))
    return ArchConfig(name=name, input_shape=input_shape, n_classes=n_classes,
                      stem=tuple(_stem(input_shape[0], stem_widths)), branches=tuple(branches),
                      class_caps_dim=class_caps_dim, routing_iterations=iterations,
                      decoder_hidden=decoder_hidden, resquash=resquash)


def reference_cifar10():
    """32x32x3 input; branch feature maps 14x14, 10x10, 6x6 (332 primary capsules)."""
    return pdr_config("pdr-cifar10", (3, 32, 32))


def reference_fmnist():
    """28x28x1 input; branch feature maps 10x10, 6x6, 2x2 (140 primary capsules)."""
    return pdr_config("pdr-fmnist", (1, 28, 28))


def original_capsnet(input_shape=(3, 32, 32), n_classes=10, iterations=DEFAULT_ROUTING_ITERATIONS):
    """Two 9x9 conv layers; the second is the 32-type primary capsule layer (stride 2)."""
    c = input_shape[0]
    branch = BranchSpec(layers=(), cfc_kernel=9, caps_dim=8, caps_types=32, cfc_stride=2,
                        n_classes=n_classes, class_caps_dim=16, iterations=iterations)
    return ArchConfig(name="capsnet", input_shape=input_shape, n_classes=n_classes,
                      stem=(conv9x9(c, 256), relu()), branches=(branch,), class_caps_dim=16,
                      routing_iterations=iterations)


def small_synthetic(image_size=16, channels=1, n_classes=10, width=16, iterations=DEFAULT_ROUTING_ITERATIONS,
                    decoder_hidden=(64, 128)):
    """Desk-scale three-branch model for synthetic smoke runs."""
    return pdr_config("pdr-small", (channels, image_size, image_size), n_classes=n_classes,
                      stem_widths=(width,), branch_blocks=(0, 1, 2), iterations=iterations,
                      decoder_hidden=decoder_hidden)


REFERENCE_CONFIGS = {
    "pdr-cifar10": reference_cifar10,
    "pdr-fmnist": reference_fmnist,
    "capsnet": original_capsnet,
    "pdr-small": small_synthetic,
}


# --------------------------------------------------------------------------- model


class DepthwiseSeparable(Layer):
    """Depthwise ``f x f`` conv (no bias) followed by a biased 1x1 pointwise conv."""

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=0, rng=None):
        self.depthwise = DepthwiseConv2d(in_channels, kernel, stride, padding, rng=rng)
        self.pointwise = PointwiseConv2d(in_channels, out_channels, rng=rng)

    def named_parameters(self, prefix=""):
        yield from self.depthwise.named_parameters(prefix + "depthwise.")
        yield from self.pointwise.named_parameters(prefix + "pointwise.")

    def __call__(self, x, tape=None, training=False):
        return self.pointwise(self.depthwise(x, tape, training), tape, training)


def build_layer(spec, rng):
    if spec.kind in ("conv3x3", "conv9x9"):
        return Conv2d(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding, rng=rng)
    if spec.kind == "depthwise_separable":
        return DepthwiseSeparable(spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                                  spec.padding, rng=rng)
    if spec.kind == "batchnorm":
        return BatchNorm2d(spec.in_channels)
    return ReLU()


class Branch:
    def __init__(self, features, cfc, routing):
        self.features, self.cfc, self.routing = features, cfc, routing

    def named_parameters(self, prefix=""):
        yield from self.features.named_parameters(prefix + "features.")
        yield from self.cfc.named_parameters(prefix + "cfc.")
        yield from self.routing.named_parameters(prefix + "routing.")

    def named_buffers(self, prefix=""):
        yield from self.features.named_buffers(prefix + "features.")

    def __call__(self, x, tape=None, training=False):
        u = self.cfc(self.features(x, tape, training), tape, training)
        return self.routing(u, tape, training)


class PDRCapsNet:
    """Shared stem, parallel branches each ending in dynamic routing, averaged class capsules."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        counts = validate(cfg)
        self.stem = Sequential([build_layer(s, rng) for s in cfg.stem])
        self.branches = []
        for i, br in enumerate(cfg.branches):
            c = branch_feature_shape(cfg, i)[0]
            features = Sequential([build_layer(s, rng) for s in br.layers])
            cfc = CFCLayer(c, br.cfc_kernel, br.caps_dim, br.caps_types, br.cfc_stride, rng=rng)
            routing = CapsuleRouting(counts[i], br.n_classes, br.caps_dim, br.class_caps_dim,
                                     br.iterations, rng=rng)
            self.branches.append(Branch(features, cfc, routing))
        self.decoder = None
        if cfg.use_decoder:
            self.decoder = Decoder(cfg.n_classes, cfg.class_caps_dim, cfg.pixels, cfg.decoder_hidden, rng=rng)
        self._cache = None

    # parameters ------------------------------------------------------------

    def named_parameters(self):
        yield from self.stem.named_parameters("stem.")
        for i, br in enumerate(self.branches):
            yield from br.named_parameters(f"branch{i + 1}.")
        if self.decoder is not None:
            yield from self.decoder.named_parameters("decoder.")

    def named_buffers(self):
        yield from self.stem.named_buffers("stem.")
        for i, br in enumerate(self.branches):
            yield from br.named_buffers(f"branch{i + 1}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self, include_decoder=True):
        return sum(p.size for name, p in self.named_parameters()
                   if include_decoder or not name.startswith("decoder."))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            if name not in state:
                raise CheckpointMismatchError(f"checkpoint lacks tensor {name!r}")
            if state[name].shape != p.data.shape:
                raise CheckpointMismatchError(f"{name}: checkpoint shape {state[name].shape} "
                                              f"!= model shape {p.data.shape}")
            p.data[...] = state[name]
        for name, b in self.named_buffers():
            if name not in state or state[name].shape != b.shape:
                raise CheckpointMismatchError(f"checkpoint lacks buffer {name!r} or has wrong shape")
            b[...] = state[name]

    # forward / backward ----------------------------------------------------

    def forward(self, x, training=False, record=False):
        """Return ``(class_caps [N, k, d], per_branch list)``.

        With ``record=True`` the caches needed by :meth:`backward` are kept.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.cfg.input_shape:
            raise DimensionError(f"batch shape {x.shape[1:]} != configured input {self.cfg.input_shape}",
                                 axis="input")
        stem_tape = GradTape() if record else None
        h = self.stem(x, stem_tape, training)
        outs, tapes = [], []
        for br in self.branches:
            tape = GradTape() if record else None
            outs.append(br(h, tape, training))
            tapes.append(tape)
        total = outs[0].copy()
        for v in outs[1:]:
            total += v
        avg = total / len(outs)
        sq_cache = None
        if self.cfg.resquash:
            avg, sq_cache = squash_forward(avg)
        self._cache = (stem_tape, tapes, sq_cache) if record else None
        return avg, outs

    __call__ = forward

    def backward(self, grad_caps):
        """Accumulate parameter gradients given dL/d(class_caps); returns dL/d(input)."""
        if self._cache is None:
            raise InvalidStateError("backward requires forward(..., record=True)")
        stem_tape, tapes, sq_cache = self._cache
        if sq_cache is not None:
            grad_caps = squash_backward(grad_caps, sq_cache)
        g = grad_caps / len(tapes)
        grad_h = None
        for tape in tapes:  # branch-index order keeps the reduction deterministic
            gh = tape.backward(g)
            grad_h = gh if grad_h is None else grad_h + gh
        self._cache = None
        return stem_tape.backward(grad_h)

    def predict(self, x, batch_size=256):
        preds = []
        for start in range(0, x.shape[0], batch_size):
            caps, _ = self.forward(x[start:start + batch_size])
            preds.append(capsule_lengths(caps).argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def loss_and_grad(self, x, labels, loss_cfg=MarginLossConfig(), training=True):
        """Margin + reconstruction loss on one batch; accumulates gradients.

        Returns ``(total, margin, reconstruction, class_caps)``.
        """
        caps, _ = self.forward(x, training=training, record=True)
        margin, g_caps = margin_loss(caps, labels, loss_cfg)
        recon_loss = 0.0
        if self.decoder is not None and loss_cfg.reconstruction_weight > 0:
            recon, dcache = self.decoder.forward(caps, labels)
            recon_loss, g_recon = reconstruction_loss(x, recon, loss_cfg.reconstruction_weight)
            g_caps = g_caps + self.decoder.backward(g_recon, dcache)
        self.backward(g_caps)
        return margin + recon_loss, margin, recon_loss, caps


def build_model(cfg, seed=0):
    """Instantiate ``cfg`` with seeded Kaiming-uniform weights."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return PDRCapsNet(cfg, rng)


__all__ = [
    "LayerSpec", "BranchSpec", "ArchConfig", "PDRCapsNet", "build_model", "branch_output_size",
    "capsule_counts", "validate", "reference_cifar10", "reference_fmnist", "original_capsnet",
    "small_synthetic", "pdr_config", "REFERENCE_CONFIGS", "conv3x3", "conv9x9", "dwsep", "bn", "relu",
    "propagate", "stem_output_shape", "branch_feature_shape",
]
