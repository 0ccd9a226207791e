"""The two function approximators: a value network and a density network.

Both are plain fully connected networks (default 3 hidden layers of 128 tanh
units) over the scaled state (a, z, t). They differ only in the output head:
identity for the value function, softplus for the density so it is strictly
positive. Evaluation happens on an autodiff tape so the training losses can
take exact input derivatives; a mirrored plain-numpy forward exists for bulk
quadrature and artifact emission where no derivatives are needed.

Checkpoint format (bit-exact round trip): magic ``ABHPINN1``, uint32 LE layer
count L, L+1 uint32 LE layer sizes, uint8 output-head tag (0 identity,
1 softplus), then all weight matrices row-major, then all bias vectors, layer
by layer, as IEEE-754 LE float64, no padding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .errors import ConfigError, DomainError, FormatError

MAGIC = b"ABHPINN1"
DEFAULT_LAYER_SIZES = (3, 128, 128, 128, 1)
_HEAD_TAGS = {"identity": 0, "softplus": 1}
_HEAD_NAMES = {v: k for k, v in _HEAD_TAGS.items()}


@dataclass
class InputScaler:
    """Per-input affine map sending [lower, upper] onto [-1, 1].

    tanh saturates on the raw domain (a up to 5, t up to 10), so inputs are
    normalized before the first layer. ``scale`` uses a true division, which
    makes the endpoint images exactly -1 and +1.
    """

    lows: np.ndarray
    highs: np.ndarray

    def __post_init__(self):
        self.lows = np.asarray(self.lows, dtype=np.float64)
        self.highs = np.asarray(self.highs, dtype=np.float64)
        if self.lows.shape != self.highs.shape or np.any(self.highs <= self.lows):
            raise ConfigError("scaler bounds must satisfy low < high per input")

    def scale(self, x, k):
        return 2.0 * ((np.asarray(x, dtype=np.float64) - self.lows[k]) / (self.highs[k] - self.lows[k])) - 1.0

    def unscale(self, s, k):
        return self.lows[k] + (np.asarray(s, dtype=np.float64) + 1.0) * 0.5 * (self.highs[k] - self.lows[k])

    @classmethod
    def from_bounds(cls, a_min, a_max, z_min, z_max, t_max):
        return cls(np.array([a_min, z_min, 0.0]), np.array([a_max, z_max, t_max]))


@dataclass
class MlpParams:
    """Weights and biases of one fully connected network plus head metadata.

    weights[l] has shape (layer_sizes[l+1], layer_sizes[l]); biases[l] has
    length layer_sizes[l+1]. All entries are finite float64.
    """

    layer_sizes: tuple
    weights: list
    biases: list
    output_head: str
    hidden_activation: str = field(default="tanh")

    def n_layers(self):
        return len(self.layer_sizes) - 1

    def param_ids(self, prefix=""):
        ids = []
        for layer in range(self.n_layers()):
            ids.append(f"{prefix}W{layer}")
            ids.append(f"{prefix}b{layer}")
        return ids

    def param_arrays(self):
        """Arrays aligned with param_ids, for leaf-binding integrity checks."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self):
        """Canonical flat vector: layer by layer, weights row-major then biases."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def with_flat(self, flat):
        """New MlpParams with parameters replaced from a canonical flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise ConfigError(
                f"flat vector has {flat.size} entries, expected {self.n_params()}"
            )
        weights, biases, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[k : k + w.size].reshape(w.shape).copy())
            k += w.size
            biases.append(flat[k : k + b.size].copy())
            k += b.size
        return MlpParams(self.layer_sizes, weights, biases, self.output_head,
                         self.hidden_activation)


def _check_layer_sizes(layer_sizes):
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or sizes[0] != 3 or sizes[-1] != 1:
        raise ConfigError(f"layer_sizes must run from 3 inputs to 1 output, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ConfigError(f"layer sizes must be positive, got {sizes}")
    return sizes


def init(seed, layer_sizes=DEFAULT_LAYER_SIZES, output_head="identity"):
    """Glorot-uniform weights, zero biases, deterministic in the seed."""
    sizes = _check_layer_sizes(layer_sizes)
    if output_head not in _HEAD_TAGS:
        raise ConfigError(f"unknown output head {output_head!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(sizes, weights, biases, output_head)


# -- evaluation ----------------------------------------------------------------


def _check_domain(scaler, a, z, t):
    vals = [np.asarray(v, dtype=np.float64) for v in (a, z, t)]
    for k, v in enumerate(vals):
        if np.any(v < scaler.lows[k]) or np.any(v > scaler.highs[k]):
            raise DomainError(
                f"input {'azt'[k]} outside [{scaler.lows[k]}, {scaler.highs[k]}]"
            )
    return vals


def _as_column(x):
    v = np.asarray(x, dtype=np.float64)
    return v.reshape(-1, 1)


def register_params(tape, params, prefix=""):
    """Expose the parameters as named tape leaves (prefix + W0, b0, W1, ...)
    so loss gradients reach them. Call once per tape and reuse the returned
    layer nodes across every network application on that tape."""
    nodes = []
    for layer in range(params.n_layers()):
        nodes.append(
            (
                tape.input(f"{prefix}W{layer}", params.weights[layer]),
                tape.input(f"{prefix}b{layer}", params.biases[layer]),
            )
        )
    return nodes


def register_constants(tape, params):
    """Expose the parameters as constants: the network contributes input
    derivatives but owns no gradient block (frozen-network contract)."""
    return [
        (tape.constant(params.weights[layer]), tape.constant(params.biases[layer]))
        for layer in range(params.n_layers())
    ]


def apply_mlp(tape, params, layer_nodes, scaler, a_node, z_node, t_node):
    """Record one forward pass through the network on the tape, reusing
    previously registered layer nodes."""
    cols = []
    for k, x in enumerate((a_node, z_node, t_node)):
        shift = tape.constant(-scaler.lows[k])
        gain = tape.constant(2.0 / (scaler.highs[k] - scaler.lows[k]))
        s = tape.add(tape.mul(tape.add(x, shift), gain), tape.constant(-1.0))
        cols.append(tape.pad_col(s, k, 3))
    h = tape.add(tape.add(cols[0], cols[1]), cols[2])

    n_layers = params.n_layers()
    for layer in range(n_layers):
        w_node, b_node = layer_nodes[layer]
        h = tape.add(tape.matmul(h, tape.transpose(w_node)), b_node)
        if layer < n_layers - 1:
            h = tape.tanh(h)
    if params.output_head == "softplus":
        h = tape.softplus(h)
    return h


def build_mlp(tape, params, scaler, a_node, z_node, t_node, trainable=True, prefix=""):
    """Register parameters (as leaves or constants) and apply the network."""
    if trainable:
        layer_nodes = register_params(tape, params, prefix)
    else:
        layer_nodes = register_constants(tape, params)
    return apply_mlp(tape, params, layer_nodes, scaler, a_node, z_node, t_node)


def _eval_on_fresh_tape(params, scaler, a, z, t, check_finite=True):
    a, z, t = _check_domain(scaler, a, z, t)
    tape = Tape(check_finite=check_finite)
    a_node = tape.input("a", _as_column(a))
    z_node = tape.input("z", _as_column(z))
    t_node = tape.input("t", _as_column(t))
    out = build_mlp(tape, params, scaler, a_node, z_node, t_node, trainable=True)
    tape.set_root(out)
    return out


def eval_value(params, scaler, a, z, t):
    """v(a,z,t) as a differentiable node; the tape exposes inputs a, z, t."""
    if params.output_head != "identity":
        raise ConfigError("value network must use the identity head")
    return _eval_on_fresh_tape(params, scaler, a, z, t)


def eval_density(params, scaler, a, z, t):
    """g(a,z,t) = softplus(raw network) as a differentiable node, strictly > 0."""
    if params.output_head != "softplus":
        raise ConfigError("density network must use the softplus head")
    return _eval_on_fresh_tape(params, scaler, a, z, t)


def mlp_values(params, scaler, a, z, t):
    """Plain-numpy forward pass mirroring build_mlp, for bulk evaluation
    (quadrature meshes, artifact slices) where no derivatives are needed."""
    a = np.asarray(a, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    t = np.asarray(t, dtype=np.float64).ravel()
    h = np.zeros((a.size, 3))
    for k, x in enumerate((a, z, t)):
        h[:, k] = (x - scaler.lows[k]) * (2.0 / (scaler.highs[k] - scaler.lows[k])) - 1.0
    n_layers = params.n_layers()
    for layer in range(n_layers):
        h = h @ params.weights[layer].T + params.biases[layer]
        if layer < n_layers - 1:
            h = np.tanh(h)
    out = h[:, 0]
    if params.output_head == "softplus":
        out = np.logaddexp(0.0, out)
    return out


# -- serialization -------------------------------------------------------------


def serialize(params):
    """Bit-exact binary encoding of the parameters (format in module docstring)."""
    sizes = params.layer_sizes
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", len(sizes) - 1)
    out += struct.pack(f"<{len(sizes)}I", *sizes)
    out += struct.pack("<B", _HEAD_TAGS[params.output_head])
    for w in params.weights:
        out += np.ascontiguousarray(w, dtype="<f8").tobytes()
    for b in params.biases:
        out += np.ascontiguousarray(b, dtype="<f8").tobytes()
    return bytes(out)


def deserialize(blob):
    """Inverse of serialize. Raises FormatError on any malformation; never
    returns a partial object."""
    if len(blob) < len(MAGIC) + 4:
        raise FormatError("checkpoint truncated before header")
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("bad checkpoint magic")
    off = len(MAGIC)
    (n_layers,) = struct.unpack_from("<I", blob, off)
    off += 4
    if not 1 <= n_layers <= 64:
        raise FormatError(f"implausible layer count {n_layers}")
    if len(blob) < off + 4 * (n_layers + 1) + 1:
        raise FormatError("checkpoint truncated in layer-size table")
    sizes = struct.unpack_from(f"<{n_layers + 1}I", blob, off)
    off += 4 * (n_layers + 1)
    if any(not 1 <= s <= 1_000_000 for s in sizes):
        raise FormatError(f"implausible layer sizes {sizes}")
    (head_tag,) = struct.unpack_from("<B", blob, off)
    off += 1
    if head_tag not in _HEAD_NAMES:
        raise FormatError(f"unknown output-head tag {head_tag}")
    n_weights = sum(o * i for i, o in zip(sizes[:-1], sizes[1:]))
    n_biases = sum(sizes[1:])
    expected = off + 8 * (n_weights + n_biases)
    if len(blob) != expected:
        raise FormatError(
            f"checkpoint length {len(blob)} != header-implied {expected}"
        )
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(blob, dtype="<f8", count=fan_out * fan_in, offset=off)
        weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
        off += 8 * fan_out * fan_in
    for fan_out in sizes[1:]:
        biases.append(
            np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off).astype(np.float64)
        )
        off += 8 * fan_out
    if any(not np.all(np.isfinite(w)) for w in weights) or any(
        not np.all(np.isfinite(b)) for b in biases
    ):
        raise FormatError("checkpoint contains non-finite parameters")
    return MlpParams(tuple(sizes), weights, biases, _HEAD_NAMES[head_tag])


def save_params(path, params):
    blob = serialize(params)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_params(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())
