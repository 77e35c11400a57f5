"""Classifier, generator and discriminator networks and their checkpoints.

Each network is an :class:`Architecture` (an ordered list of layers that
knows its parameter shapes) plus a dict of float32 parameter arrays.  The
forward functions accept either the stored arrays, which are then treated
as constants, or gradient-requiring :class:`~cnsnet.core.Tensor` leaves
created by :meth:`Net.leaves`.
"""

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core
from .errors import FormatError, InvalidConfigError, InvalidInputError

#: Conv channel plan of the 13-layer classifier, one tuple per pooling block.
TABLE_I_BLOCKS = ((32, 32, 64, 64), (64, 128, 128), (128, 256, 256), (256, 512, 512))

D_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"CNSN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchitectureConfig:
    variant: str = "dense"
    input_shape: tuple = (625,)
    classifier_hidden: tuple = (512, 256)
    generator_hidden: tuple = (128, 256)
    discriminator_hidden: tuple = (256, 128)
    activation: str = "relu"
    latent_dim: int = 64
    conv_blocks: tuple = TABLE_I_BLOCKS
    conv_fc_hidden: int = 512
    gd_channels: tuple = (16, 32)

    def __post_init__(self):
        if self.variant not in ("dense", "conv"):
            raise InvalidConfigError(f"unknown architecture variant {self.variant!r}")
        if self.activation not in _ACTIVATIONS:
            raise InvalidConfigError(f"unknown activation {self.activation!r}")
        if self.latent_dim < 1 or self.feature_dim < 1:
            raise InvalidConfigError("latent and feature dimensions must be positive")
        # normalise sequences so equality and hashing are stable after JSON
        for name in ("input_shape", "classifier_hidden", "generator_hidden",
                     "discriminator_hidden", "gd_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "conv_blocks",
                           tuple(tuple(int(c) for c in blk) for blk in self.conv_blocks))
        if self.variant == "conv":
            self.image_shape  # validates

    @property
    def feature_dim(self):
        return int(np.prod(self.input_shape))

    @property
    def image_shape(self):
        """(channels, height, width) view of one instance for the conv variant."""
        shape = self.input_shape
        if len(shape) == 3:
            return shape
        if len(shape) == 2:
            return (1,) + shape
        side = math.isqrt(shape[0])
        if side * side != shape[0]:
            raise InvalidConfigError(f"feature dimension {shape[0]} is not a square image")
        return (1, side, side)

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "conv_blocks" in d:
            d["conv_blocks"] = tuple(tuple(b) for b in d["conv_blocks"])
        for key in ("input_shape", "classifier_hidden", "generator_hidden",
                    "discriminator_hidden", "gd_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


_ACTIVATIONS = {"relu": core.relu, "leaky_relu": core.leaky_relu, "tanh": core.tanh}


# ---------------------------------------------------------------------------
# layers

@dataclass
class Architecture:
    """Ordered layer list for one network.

    Layers are tuples: ``("dense", name, n_in, n_out)``,
    ``("conv", name, c_in, c_out)`` (3x3, stride 1, padding 1),
    ``("pool",)`` (2x2, stride 2), ``("act", kind)``, ``("reshape", shape)``
    and ``("out", kind)`` for the final squashing.
    """

    layers: list
    in_dim: int
    out_dim: int
    kind: str = ""
    meta: dict = field(default_factory=dict)

    def param_shapes(self):
        shapes = []
        for layer in self.layers:
            if layer[0] == "dense":
                _, name, n_in, n_out = layer
                shapes += [(f"{name}.w", (n_in, n_out)), (f"{name}.b", (n_out,))]
            elif layer[0] == "conv":
                _, name, c_in, c_out = layer
                shapes += [(f"{name}.w", (c_out, c_in, 3, 3)), (f"{name}.b", (c_out,))]
        return shapes

    def param_count(self):
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def init_params(self, rng, dtype=np.float32):
        params = {}
        for name, shape in self.param_shapes():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=dtype)
                continue
            if len(shape) == 2:
                fan_in, fan_out = shape
            else:
                fan_in = shape[1] * shape[2] * shape[3]
                fan_out = shape[0] * shape[2] * shape[3]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return params

    def forward(self, params, x):
        h = x if isinstance(x, core.Tensor) else core.Tensor(x, check=False)
        if h.data.ndim != 2 or h.shape[1] != self.in_dim:
            raise InvalidInputError(
                f"{self.kind or 'network'} expects input width {self.in_dim}, got shape {h.shape}")
        for layer in self.layers:
            op = layer[0]
            if op == "dense":
                name = layer[1]
                h = core.add(core.matmul(h, params[f"{name}.w"]), params[f"{name}.b"])
            elif op == "conv":
                name = layer[1]
                h = core.conv2d(h, params[f"{name}.w"], params[f"{name}.b"], stride=1, pad=1)
            elif op == "pool":
                h = core.maxpool2d(h, 2, 2)
            elif op == "act":
                h = _ACTIVATIONS[layer[1]](h)
            elif op == "reshape":
                h = core.reshape(h, (h.shape[0],) + tuple(layer[1]))
            elif op == "out":
                if layer[1] == "sigmoid":
                    h = core.sigmoid(h)
                elif layer[1] == "clamped_sigmoid":
                    h = core.clip(core.sigmoid(h), D_CLAMP, 1.0 - D_CLAMP)
        return h


def _dense_stack(prefix, widths, act, final=None):
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(("dense", f"{prefix}{i}", a, b))
        if i < len(widths) - 2:
            layers.append(("act", act))
    if final:
        layers.append(("out", final))
    return layers


def build_classifier(config, k):
    d = config.feature_dim
    if config.variant == "dense":
        layers = _dense_stack("fc", (d,) + config.classifier_hidden + (k,), config.activation)
        return Architecture(layers, d, k, "classifier")
    c, h, w = config.image_shape
    layers = [("reshape", (c, h, w))]
    idx = 0
    for block in config.conv_blocks:
        for ch in block:
            layers += [("conv", f"conv{idx}", c, ch), ("act", config.activation)]
            c = ch
            idx += 1
        layers.append(("pool",))
        h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        if h < 1 or w < 1:
            raise InvalidConfigError("input image too small for the conv channel plan")
    layers.append(("reshape", (c * h * w,)))
    layers += _dense_stack("fc", (c * h * w, config.conv_fc_hidden, k), config.activation)
    return Architecture(layers, d, k, "classifier", {"conv_layers": idx})


def build_generator(config):
    d, z = config.feature_dim, config.latent_dim
    if config.variant == "dense":
        layers = _dense_stack("fc", (z,) + config.generator_hidden + (d,), config.activation,
                              final="sigmoid")
        # hidden activations between all dense layers, sigmoid at the end
        return Architecture(layers, z, d, "generator")
    c, h, w = config.image_shape
    c1, c2 = config.gd_channels
    layers = [("dense", "fc0", z, c1 * h * w), ("act", config.activation),
              ("reshape", (c1, h, w)),
              ("conv", "conv0", c1, c2), ("act", config.activation),
              ("conv", "conv1", c2, c1), ("act", config.activation),
              ("conv", "conv2", c1, c),
              ("reshape", (d,)), ("out", "sigmoid")]
    return Architecture(layers, z, d, "generator")


def build_discriminator(config):
    d = config.feature_dim
    if config.variant == "dense":
        layers = _dense_stack("fc", (d,) + config.discriminator_hidden + (1,),
                              config.activation, final="clamped_sigmoid")
        return Architecture(layers, d, 1, "discriminator")
    c, h, w = config.image_shape
    c1, c2 = config.gd_channels
    layers = [("reshape", (c, h, w)),
              ("conv", "conv0", c, c1), ("act", config.activation), ("pool",)]
    h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
    layers += [("conv", "conv1", c1, c2), ("act", config.activation), ("pool",)]
    h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
    layers += [("conv", "conv2", c2, c2), ("act", config.activation),
               ("reshape", (c2 * h * w,)), ("dense", "fc0", c2 * h * w, 1),
               ("out", "clamped_sigmoid")]
    return Architecture(layers, d, 1, "discriminator")


# ---------------------------------------------------------------------------
# parameterised networks

class Net:
    """An architecture bound to its parameter arrays."""

    def __init__(self, arch, params):
        self.arch = arch
        self.params = params

    def leaves(self):
        """Gradient-requiring tensors sharing memory with the parameters."""
        return {n: core.Tensor(a, requires_grad=True, check=False) for n, a in self.params.items()}

    def names(self):
        return [n for n, _ in self.arch.param_shapes()]

    def arrays(self):
        return [self.params[n] for n in self.names()]

    def copy(self):
        return Net(self.arch, {n: a.copy() for n, a in self.params.items()})

    def __call__(self, x, params=None):
        return self.arch.forward(self.params if params is None else params, x)


@dataclass
class ModelTriple:
    config: ArchitectureConfig
    k: int
    classifier: Net
    generator: Net
    discriminator: Net

    @property
    def feature_dim(self):
        return self.config.feature_dim

    def nets(self):
        return {"classifier": self.classifier, "generator": self.generator,
                "discriminator": self.discriminator}

    def copy(self):
        return ModelTriple(self.config, self.k, self.classifier.copy(),
                           self.generator.copy(), self.discriminator.copy())

    def descriptor(self):
        return {"config": self.config.to_dict(), "k": self.k}


def init_model(config, k, seed):
    """Fresh parameters for all three networks, deterministic in ``seed``."""
    if k < 2:
        raise InvalidConfigError(f"need at least two known families, got k={k}")
    seeds = np.random.SeedSequence(seed).spawn(3)
    arches = (build_classifier(config, k), build_generator(config), build_discriminator(config))
    nets = [Net(a, a.init_params(np.random.default_rng(s))) for a, s in zip(arches, seeds)]
    return ModelTriple(config, k, *nets)


# ---------------------------------------------------------------------------
# forwards

def _check_width(x, width, what):
    arr = core.value(x)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise InvalidInputError(f"{what} expects width {width}, got shape {arr.shape}")


def classifier_forward(clf, batch, params=None):
    """Logits ``[batch, k]``."""
    _check_width(batch, clf.arch.in_dim, "classifier")
    out = clf(batch, params)
    assert out.shape[1] == clf.arch.out_dim
    return out


def generator_forward(gen, z, params=None):
    """Synthesized instances in ``[0, 1]``, shape ``[b, feature_dim]``."""
    _check_width(z, gen.arch.in_dim, "generator")
    out = gen(z, params)
    assert out.shape[1] == gen.arch.out_dim
    return out


def discriminator_forward(disc, x, params=None):
    """Real-data probabilities strictly inside (0, 1), shape ``[b]``."""
    _check_width(x, disc.arch.in_dim, "discriminator")
    out = disc(x, params)
    assert out.shape[1] == 1
    return core.reshape(out, (-1,))


def predict_proba(clf, x, chunk=4096):
    """Class probabilities as a numpy array, evaluated in chunks."""
    x = np.asarray(x, dtype=np.float32)
    _check_width(x, clf.arch.in_dim, "classifier")
    out = [core.softmax(clf(x[i:i + chunk])).data for i in range(0, len(x), chunk)]
    if not out:
        return np.zeros((0, clf.arch.out_dim), dtype=np.float32)
    return np.concatenate(out)


def sample_latent(count, dim=64, rng=None):
    """i.i.d. standard-normal latent codes."""
    if count < 1:
        raise InvalidInputError("latent batch size must be at least 1")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return rng.standard_normal((count, dim)).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoints

def _tensor_order(model):
    order = []
    for net_name, net in model.nets().items():
        order += [(f"{net_name}/{n}", net.params[n]) for n in net.names()]
    return order


def config_digest(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, model, extras=None, meta=None):
    """Write ``model`` (and optional named ``extras`` arrays) to ``path``.

    Layout: ``b"CNSN"``, a version byte, a little-endian u32 length followed
    by a UTF-8 JSON descriptor, then one record per tensor (u32 rank, u32
    dims, float32 values), all little-endian.
    """
    extras = dict(extras or {})
    tensors = _tensor_order(model) + [(f"extra/{n}", np.asarray(a)) for n, a in sorted(extras.items())]
    desc = model.descriptor()
    desc["tensors"] = [name for name, _ in tensors]
    desc["meta"] = meta or {}
    text = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for _, arr in tensors:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, extras, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 9 or blob[4] != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version")
    (n,) = struct.unpack_from("<I", blob, 5)
    pos = 9 + n
    desc = json.loads(blob[9:pos].decode("utf-8"))
    arrays = {}
    for name in desc["tensors"]:
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        arrays[name] = arr.astype(np.float32)
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    config = ArchitectureConfig.from_dict(desc["config"])
    model = init_model(config, desc["k"], 0)
    for net_name, net in model.nets().items():
        for pname in net.names():
            key = f"{net_name}/{pname}"
            if key not in arrays or arrays[key].shape != net.params[pname].shape:
                raise FormatError(f"{path}: tensor {key} missing or mis-shaped")
            net.params[pname] = arrays[key]
    extras = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return model, extras, desc.get("meta", {})
