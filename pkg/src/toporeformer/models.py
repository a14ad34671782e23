"""Networks, their losses, and the TRFM weight container.

Every network keeps its parameters in a flat ``{name: ndarray}`` dict.
The part of a name before the first dot is its group (``enc``, ``dec``,
...); groups can be frozen independently. :meth:`Network.bind` turns the
parameters into tensors for one forward pass: trainable ones become
grad-requiring leaves on the tape, frozen ones become constants.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import BatchTooSmall, ShapeMismatch, WeightFormatError
from .topology import topological_loss

IMAGE_SHAPE = (1, 28, 28)


def _he(rng, shape, fan_in, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


class Network:
    """Parameter container with per-group freeze flags."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params
        self.frozen_groups: set[str] = set()

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    @property
    def groups(self) -> set[str]:
        return {self.group_of(n) for n in self.params}

    @property
    def frozen(self) -> bool:
        return self.groups <= self.frozen_groups

    def freeze(self, *groups: str) -> None:
        self.frozen_groups |= set(groups) if groups else self.groups

    def unfreeze(self, *groups: str) -> None:
        self.frozen_groups -= set(groups) if groups else self.groups

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if self.group_of(n) not in self.frozen_groups]

    def bind(self, tape: Tape | None = None) -> dict[str, Tensor]:
        out = {}
        for name, value in self.params.items():
            if tape is not None and self.group_of(name) not in self.frozen_groups:
                out[name] = tape.leaf(value)
            else:
                out[name] = Tensor(value)
        return out

    def grads(self, tape: Tape, loss: Tensor, bound: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradients for trainable parameters; frozen ones are zero."""
        all_grads = tape.backward(loss)
        out = {}
        for name, t in bound.items():
            if t.node_id is None:
                out[name] = np.zeros_like(self.params[name])
            else:
                out[name] = all_grads[t.node_id]
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, params: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(params)
        if missing:
            raise ShapeMismatch(f"parameter names differ: {sorted(missing)}")
        for k, v in params.items():
            if v.shape != self.params[k].shape:
                raise ShapeMismatch(f"{k}: stored {v.shape}, model {self.params[k].shape}")
            self.params[k] = np.array(v, dtype=np.float64)


# ------------------------------------------------------------------ layers


def dense(x, p, name):
    return x @ p[name + ".w"] + p[name + ".b"]


def conv(x, p, name, padding):
    return ad.conv2d(x, p[name + ".w"], padding) + p[name + ".b"]


def _conv_params(rng, params, name, c_in, c_out, k=3):
    params[name + ".w"] = _he(rng, (c_out, c_in, k, k), c_in * k * k)
    params[name + ".b"] = np.zeros((c_out, 1, 1))


def _dense_params(rng, params, name, n_in, n_out, gain=2.0):
    params[name + ".w"] = _he(rng, (n_in, n_out), n_in, gain)
    params[name + ".b"] = np.zeros(n_out)


def _as_input(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim != 4 or t.shape[1:] != IMAGE_SHAPE:
        raise ShapeMismatch(f"expected images of shape (n, 1, 28, 28), got {t.shape}")
    return t


# -------------------------------------------------------------- classifier


@dataclass(frozen=True)
class ClassifierArch:
    """Two conv pairs with pooling, then three dense layers (valid padding)."""

    conv1: int = 32
    conv2: int = 64
    hidden: int = 200
    num_classes: int = 10


class Classifier(Network):
    def __init__(self, arch: ClassifierArch = ClassifierArch(), seed: int = 0):
        rng = np.random.default_rng([seed, 1])
        p: dict[str, np.ndarray] = {}
        _conv_params(rng, p, "feat.c1", 1, arch.conv1)
        _conv_params(rng, p, "feat.c2", arch.conv1, arch.conv1)
        _conv_params(rng, p, "feat.c3", arch.conv1, arch.conv2)
        _conv_params(rng, p, "feat.c4", arch.conv2, arch.conv2)
        _dense_params(rng, p, "head.d1", arch.conv2 * 16, arch.hidden)
        _dense_params(rng, p, "head.d2", arch.hidden, arch.hidden)
        _dense_params(rng, p, "head.out", arch.hidden, arch.num_classes, gain=1.0)
        super().__init__(p)
        self.arch = arch

    def forward(self, x, bound=None) -> Tensor:
        p = bound or self.bind()
        h = _as_input(x)
        h = ad.relu(conv(h, p, "feat.c1", "valid"))  # 26
        h = ad.relu(conv(h, p, "feat.c2", "valid"))  # 24
        h = ad.maxpool2x2(h)  # 12
        h = ad.relu(conv(h, p, "feat.c3", "valid"))  # 10
        h = ad.relu(conv(h, p, "feat.c4", "valid"))  # 8
        h = ad.maxpool2x2(h)  # 4
        h = h.reshape(h.shape[0], -1)
        h = ad.relu(dense(h, p, "head.d1"))
        h = ad.relu(dense(h, p, "head.d2"))
        return dense(h, p, "head.out")

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        out = [argmax_lowest(self.forward(x[s:s + batch_size]).data) for s in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(logits, axis=1).astype(np.int64)


def classifier_forward(model: Classifier, x, bound=None) -> Tensor:
    return model.forward(x, bound)


# ---------------------------------------------------------- conv encoders


@dataclass(frozen=True)
class ConvAEArch:
    """Shared shape of the TopoAE and the reformer VAE."""

    conv1: int = 16
    conv2: int = 32
    latent_dim: int = 16


def _encoder_params(rng, p, arch: ConvAEArch, prefix: str, heads: tuple[str, ...]):
    _conv_params(rng, p, f"{prefix}.c1", 1, arch.conv1)
    _conv_params(rng, p, f"{prefix}.c2", arch.conv1, arch.conv2)
    for head in heads:
        _dense_params(rng, p, f"{prefix}.{head}", arch.conv2 * 49, arch.latent_dim, gain=1.0)


def _encoder_trunk(x, p, prefix):
    h = ad.maxpool2x2(ad.relu(conv(x, p, f"{prefix}.c1", "same")))  # 14
    h = ad.maxpool2x2(ad.relu(conv(h, p, f"{prefix}.c2", "same")))  # 7
    return h.reshape(h.shape[0], -1)


def _decoder_params(rng, p, arch: ConvAEArch, prefix: str, in_dim: int):
    _dense_params(rng, p, f"{prefix}.d1", in_dim, arch.conv2 * 49)
    _conv_params(rng, p, f"{prefix}.c1", arch.conv2, arch.conv1)
    _conv_params(rng, p, f"{prefix}.c2", arch.conv1, 1)


def _decoder(z, p, prefix, arch: ConvAEArch):
    h = ad.relu(dense(z, p, f"{prefix}.d1"))
    h = h.reshape(h.shape[0], arch.conv2, 7, 7)
    h = ad.relu(conv(ad.upsample2x(h), p, f"{prefix}.c1", "same"))  # 14
    h = conv(ad.upsample2x(h), p, f"{prefix}.c2", "same")  # 28
    return ad.sigmoid(h)


# ------------------------------------------------------------------ TopoAE


class TopoAE(Network):
    """Convolutional autoencoder trained with the topological regulariser."""

    def __init__(self, arch: ConvAEArch = ConvAEArch(), seed: int = 0, lam: float = 1.0):
        if lam < 0:
            raise ValueError("topological weight must be non-negative")
        rng = np.random.default_rng([seed, 2])
        p: dict[str, np.ndarray] = {}
        _encoder_params(rng, p, arch, "enc", ("z",))
        _decoder_params(rng, p, arch, "dec", arch.latent_dim)
        super().__init__(p)
        self.arch = arch
        self.lam = lam

    def encode(self, x, bound=None) -> Tensor:
        p = bound or self.bind()
        return dense(_encoder_trunk(_as_input(x), p, "enc"), p, "enc.z")

    def decode(self, z, bound=None) -> Tensor:
        return _decoder(z, bound or self.bind(), "dec", self.arch)

    def forward(self, x, bound=None, training: bool = False) -> tuple[Tensor, Tensor]:
        x = _as_input(x)
        if training and x.shape[0] < 2:
            raise BatchTooSmall("topological loss needs at least two samples")
        p = bound or self.bind()
        z = self.encode(x, p)
        return z, self.decode(z, p)


def topoae_forward(model: TopoAE, x, bound=None, training: bool = False):
    return model.forward(x, bound, training)


def image_sq_error(x_hat, x) -> Tensor:
    """Squared error summed over each image's pixels, averaged over the batch.

    With a per-pixel mean the reconstruction term is ~1/784 of this and the
    KL and topological terms swamp it at the fixed loss weights.
    """
    pixels = int(np.prod(np.shape(x.data if isinstance(x, Tensor) else x)[1:]))
    return ad.mse(x_hat, x) * float(pixels)


def topoae_loss(x, x_hat, z, lam: float) -> tuple[Tensor, dict[str, float]]:
    """``rec(x, x_hat) + lam * L_t(flatten(x), z)``; returns (loss, parts).

    ``rec`` is :func:`image_sq_error`.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[0] < 2:
        raise BatchTooSmall("topological loss needs at least two samples")
    rec = image_sq_error(x_hat, x)
    if lam == 0:
        return rec, {"rec": float(rec.data), "topo": 0.0}
    lt = topological_loss(x.reshape(x.shape[0], -1), z)
    total = rec + lt * lam
    return total, {"rec": float(rec.data), "topo": float(lt.data)}


# --------------------------------------------------- reformer VAE and aux


class ReformerVAE(Network):
    """VAE whose decoder reads ``concat(sample, aux)``; groups ``enc`` and ``dec``."""

    def __init__(self, arch: ConvAEArch = ConvAEArch(), aux_dim: int = 8, seed: int = 0):
        rng = np.random.default_rng([seed, 3])
        p: dict[str, np.ndarray] = {}
        _encoder_params(rng, p, arch, "enc", ("mu", "logvar"))
        p["enc.logvar.w"] *= 0.1
        _decoder_params(rng, p, arch, "dec", arch.latent_dim + aux_dim)
        super().__init__(p)
        self.arch = arch
        self.aux_dim = aux_dim

    def encode(self, x, bound=None) -> tuple[Tensor, Tensor]:
        p = bound or self.bind()
        h = _encoder_trunk(_as_input(x), p, "enc")
        return dense(h, p, "enc.mu"), dense(h, p, "enc.logvar")

    def decode(self, bottleneck, bound=None) -> Tensor:
        return _decoder(bottleneck, bound or self.bind(), "dec", self.arch)


@dataclass(frozen=True)
class AuxArch:
    latent_dim: int = 16
    hidden: int = 64
    aux_dim: int = 8


class AuxModule(Network):
    """Projects the TopoAE latent code into the VAE bottleneck."""

    def __init__(self, arch: AuxArch = AuxArch(), seed: int = 0):
        rng = np.random.default_rng([seed, 4])
        p: dict[str, np.ndarray] = {}
        _dense_params(rng, p, "proj.d1", arch.latent_dim, arch.hidden)
        _dense_params(rng, p, "proj.out", arch.hidden, arch.aux_dim, gain=1.0)
        super().__init__(p)
        self.arch = arch

    def forward(self, z, bound=None) -> Tensor:
        p = bound or self.bind()
        return dense(ad.relu(dense(z, p, "proj.d1")), p, "proj.out")


def reformer_forward(vae: ReformerVAE, aux: AuxModule | None, x_pure, z_topo, noise,
                     vae_bound=None, aux_bound=None) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(x_ref, mu, logvar)``.

    ``aux=None`` feeds a zero auxiliary vector, the wiring of the
    reformer-only ablation stage.
    """
    mu, logvar = vae.encode(x_pure, vae_bound)
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if noise.shape != mu.shape:
        raise ShapeMismatch(f"noise {noise.shape} does not match mu {mu.shape}")
    sample = ad.reparameterize(mu, logvar, noise)
    if aux is None:
        side = np.zeros((mu.shape[0], vae.aux_dim))
    else:
        side = aux.forward(z_topo, aux_bound)
        if side.shape[1] != vae.aux_dim:
            raise ShapeMismatch(f"aux output {side.shape[1]} != decoder aux slot {vae.aux_dim}")
    bottleneck = ad.concat([sample, side], axis=1)
    return vae.decode(bottleneck, vae_bound), mu, logvar


def reformer_loss(x_ref, x_target, logits, y, mu, logvar, lam1: float = 1.0, lam2: float = 0.5,
                  lam3: float = 0.5) -> tuple[Tensor, dict[str, float]]:
    """Weighted reconstruction + cross-entropy + KL; returns (loss, unweighted parts).

    The ``mse`` part is :func:`image_sq_error`, the per-image sum matching
    the per-example sum inside the KL term.
    """
    if x_ref.shape != np.shape(x_target.data if isinstance(x_target, Tensor) else x_target):
        raise ShapeMismatch("reformed and target images differ in shape")
    rec = image_sq_error(x_ref, x_target)
    ce = ad.softmax_cross_entropy(logits, y)
    kl = ad.gaussian_kl(mu, logvar)
    total = rec * lam1 + ce * lam2 + kl * lam3
    return total, {"mse": float(rec.data), "ce": float(ce.data), "kl": float(kl.data)}


# ----------------------------------------------------------- weight files

WEIGHT_MAGIC = b"TRFM"
WEIGHT_VERSION = 1


def save_weights(path, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors as little-endian float32 in the TRFM container."""
    chunks = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFormatError(f"{path}: truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != WEIGHT_MAGIC:
        raise WeightFormatError(f"{path}: not a TRFM file")
    version, count = struct.unpack("<II", take(8))
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise WeightFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def prefixed(prefix: str, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def unprefixed(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    head = prefix + "/"
    return {k[len(head):]: v for k, v in tensors.items() if k.startswith(head)}


def arch_dict(arch) -> dict:
    return asdict(arch)
