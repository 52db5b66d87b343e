"""Feature extractor, projector, adapter and task heads as plain MLPs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import InvalidConfig, MissingCheckpoint

CHECKPOINT_MAGIC = b"AGNET1"
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    latent_dim: int = 8
    projector_hidden_factor: int = 32
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.latent_dim < 2:
            raise InvalidConfig(f"latent_dim must be >= 2, got {self.latent_dim}")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise InvalidConfig(f"hidden_dims must be a non-empty list of positive widths, got {self.hidden_dims}")
        if self.input_dim < 1 or self.projector_hidden_factor < 1:
            raise InvalidConfig("input_dim and projector_hidden_factor must be positive")
        if self.activation not in ACTIVATIONS:
            raise InvalidConfig(f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}")

    @property
    def projector_hidden(self) -> int:
        return self.projector_hidden_factor * self.latent_dim


def _activate(tape, x, activation):
    return ad.relu(tape, x) if activation == "relu" else ad.tanh(tape, x)


def _activate_np(x, activation):
    return np.maximum(x, 0.0) if activation == "relu" else np.tanh(x)


class MLP:
    """Affine layers with an activation between them; the last layer is bare."""

    def __init__(self, dims, activation="relu", name="mlp", rng=None, task_id=None):
        if len(dims) < 2:
            raise InvalidConfig(f"an MLP needs at least input and output dims, got {dims}")
        self.dims = tuple(int(d) for d in dims)
        self.activation = activation
        self.name = name
        self.task_id = task_id
        self.layers = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, (fan_in, fan_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            limit = np.sqrt(6.0 / fan_in)
            w = ad.Parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), f"{name}.W{i}")
            b = ad.Parameter(np.zeros(fan_out), f"{name}.b{i}")
            self.layers.append((w, b))

    @property
    def input_dim(self):
        return self.dims[0]

    @property
    def output_dim(self):
        return self.dims[-1]

    def parameters(self):
        return [p for layer in self.layers for p in layer]

    def forward(self, tape, x):
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = ad.affine(tape, h, w, b)
            if i < last:
                h = _activate(tape, h, self.activation)
        return h

    def predict(self, x):
        h = np.asarray(x, dtype=float)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.value + b.value
            if i < last:
                h = _activate_np(h, self.activation)
        return h

    __call__ = predict

    def state(self):
        return [p.value.copy() for p in self.parameters()]

    def load_state(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError("parameter count mismatch")
        for p, a in zip(params, arrays):
            if p.value.shape != np.shape(a):
                raise ValueError(f"shape mismatch for {p.name}")
            p.value = np.array(a, dtype=float)
            p.velocity = np.zeros_like(p.value)
            p.grad = np.zeros_like(p.value)


class FrozenMLP:
    """A forward-only snapshot of an :class:`MLP`; its weights enter tapes as constants."""

    def __init__(self, mlp: MLP):
        self.dims = mlp.dims
        self.activation = mlp.activation
        self.name = mlp.name + ":frozen"
        self.task_id = mlp.task_id
        self._weights = tuple((w.value.copy(), b.value.copy()) for w, b in mlp.layers)
        for w, b in self._weights:
            w.setflags(write=False)
            b.setflags(write=False)

    @property
    def output_dim(self):
        return self.dims[-1]

    def parameters(self):
        return []

    def predict(self, x):
        h = np.asarray(x, dtype=float)
        last = len(self._weights) - 1
        for i, (w, b) in enumerate(self._weights):
            h = h @ w + b
            if i < last:
                h = _activate_np(h, self.activation)
        return h

    __call__ = predict

    def forward(self, tape, x):
        h = x
        last = len(self._weights) - 1
        for i, (w, b) in enumerate(self._weights):
            h = ad.affine(tape, h, tape.constant(w), tape.constant(b))
            if i < last:
                h = _activate(tape, h, self.activation)
        return h

    def state(self):
        return [a for layer in self._weights for a in layer]


def build_extractor(config: NetworkConfig, rng) -> MLP:
    dims = (config.input_dim, *config.hidden_dims, config.latent_dim)
    return MLP(dims, config.activation, "extractor", rng)


def build_projector(config: NetworkConfig, rng) -> MLP:
    s = config.latent_dim
    return MLP((s, config.projector_hidden, s), config.activation, "projector", rng)


def build_adapter(config: NetworkConfig, rng) -> MLP:
    s = config.latent_dim
    return MLP((s, config.projector_hidden, s), config.activation, "adapter", rng)


def build_head(config: NetworkConfig, num_classes: int, rng, task_id=None) -> MLP:
    if num_classes < 1:
        raise InvalidConfig("a head needs at least one class")
    return MLP((config.latent_dim, num_classes), config.activation, f"head{task_id}", rng, task_id)


def clone_frozen(net) -> FrozenMLP:
    return net if isinstance(net, FrozenMLP) else FrozenMLP(net)


def memory_floats_per_class(latent_dim: int) -> int:
    """Stored reals per class: the mean plus the covariance upper triangle."""
    return latent_dim + latent_dim * (latent_dim + 1) // 2


# Checkpoint layout (little-endian): b"AGNET1", uint32 number of dims, the
# dims as uint32, then each layer's W (row-major, in x out) and b as float64.


def save_checkpoint(net, path):
    dims = net.dims
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack(f"<I{len(dims)}I", len(dims), *dims)
    for a in net.state():
        buf += np.ascontiguousarray(a, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path, activation="relu", name="extractor") -> MLP:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:6] != CHECKPOINT_MAGIC:
        raise MissingCheckpoint(f"{path} is not a network checkpoint (bad magic)")
    try:
        (count,) = struct.unpack_from("<I", raw, 6)
        dims = struct.unpack_from(f"<{count}I", raw, 10)
    except struct.error:
        raise MissingCheckpoint(f"{path} has a truncated header") from None
    offset = 10 + 4 * count
    net = MLP(dims, activation, name)
    arrays = []
    for p in net.parameters():
        size = p.value.size
        chunk = raw[offset : offset + 8 * size]
        if len(chunk) != 8 * size:
            raise MissingCheckpoint(f"{path} is truncated")
        arrays.append(np.frombuffer(chunk, dtype="<f8").reshape(p.value.shape))
        offset += 8 * size
    if offset != len(raw):
        raise MissingCheckpoint(f"{path} has trailing bytes")
    net.load_state(arrays)
    return net
