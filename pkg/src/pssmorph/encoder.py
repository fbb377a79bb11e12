"""Point-set autoencoder with a shared per-point MLP and max pooling.

Everything is plain numpy. Gradients are derived by hand and checked against
finite differences in the test suite; training uses Adam on the symmetric
chamfer distance.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._parallel import pmap

__all__ = [
    "EncoderConfig",
    "AEModel",
    "chamfer_loss",
    "chamfer_grad",
    "init_model",
    "forward",
    "loss_and_grads",
    "train",
    "encode",
    "encode_many",
    "save_model",
    "load_model",
    "write_features",
    "read_features",
]

MAGIC = b"NSAE1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture and optimiser settings.

    ``epochs`` is an upper bound when ``until_plateau`` is set: training then
    stops once the mean loss improved by less than ``plateau_tol`` (relative)
    over the last ``plateau_window`` epochs.
    """

    n_points: int = 512
    point_widths: tuple = (64, 128, 256)
    latent_dim: int = 1024
    decoder_widths: tuple = (256, 512)
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    until_plateau: bool = False
    plateau_tol: float = 1e-4
    plateau_window: int = 5

    def __post_init__(self):
        object.__setattr__(self, "point_widths", tuple(int(w) for w in self.point_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if any(w < 1 for w in self.point_widths + self.decoder_widths):
            raise ValueError("layer widths must be >= 1")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def desk(cls, **overrides):
        """Small profile for laptop-scale runs (64-dimensional latent)."""
        kw = dict(latent_dim=64)
        kw.update(overrides)
        return cls(**kw)

    def layer_shapes(self):
        """(fan_in, fan_out) of every affine layer, in parameter order."""
        enc = [3, *self.point_widths, self.latent_dim]
        dec = [self.latent_dim, *self.decoder_widths, 3 * self.n_points]
        return list(zip(enc[:-1], enc[1:])) + list(zip(dec[:-1], dec[1:]))


@dataclass
class AEModel:
    """Autoencoder parameters.

    ``weights[i]`` has shape (fan_in, fan_out). The first
    ``len(point_widths) + 1`` layers act per point (the last of them is the
    linear projection to the latent space); the rest form the decoder.
    """

    config: EncoderConfig
    weights: list
    biases: list
    log: list = field(default_factory=list)

    @property
    def n_point_layers(self):
        return len(self.config.point_widths) + 1

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self):
        return AEModel(self.config, [W.copy() for W in self.weights],
                       [b.copy() for b in self.biases], list(self.log))


# ---------------------------------------------------------------------------
# chamfer distance
# ---------------------------------------------------------------------------


def _sqdist(a, b):
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def chamfer_loss(a, b) -> float:
    """Symmetric chamfer distance with squared Euclidean point distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance of an empty point set")
    d = _sqdist(a, b)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def chamfer_grad(x, y):
    """Loss and gradient with respect to ``y`` (nearest neighbours held fixed)."""
    # expanded form is only used to pick neighbours; distances are exact
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * (x @ y.T)
    nn_y = np.argmin(d, axis=1)  # for each x, closest y
    nn_x = np.argmin(d, axis=0)  # for each y, closest x
    loss = ((x - y[nn_y]) ** 2).sum(1).mean() + ((y - x[nn_x]) ** 2).sum(1).mean()
    g = 2.0 * (y - x[nn_x]) / len(y)
    diff = 2.0 * (y[nn_y] - x) / len(x)
    np.add.at(g, nn_y, diff)
    return float(loss), g


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def init_model(config: EncoderConfig) -> AEModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for fi, fo in config.layer_shapes():
        lim = np.sqrt(6.0 / (fi + fo))
        weights.append(rng.uniform(-lim, lim, size=(fi, fo)))
        biases.append(np.zeros(fo))
    return AEModel(config, weights, biases)


def _check_batch(model, clouds):
    x = np.asarray(clouds, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError("point clouds must have shape (P, 3) or (B, P, 3)")
    if x.shape[1] != model.config.n_points:
        raise ValueError(
            f"expected {model.config.n_points} points per cloud, got {x.shape[1]}"
        )
    return x


def _forward(model, x):
    """Batched forward pass keeping what the backward pass needs."""
    npl = model.n_point_layers
    acts = [x]
    h = x
    for i in range(npl):
        h = h @ model.weights[i] + model.biases[i]
        if i < npl - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    arg = np.argmax(h, axis=1)  # first maximum, i.e. lowest point index
    z = np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0, :]
    dec = [z]
    g = z
    n = len(model.weights)
    for i in range(npl, n):
        g = g @ model.weights[i] + model.biases[i]
        if i < n - 1:
            g = np.maximum(g, 0.0)
        dec.append(g)
    recon = g.reshape(len(x), -1, 3)
    return z, recon, acts, arg, dec


def forward(model: AEModel, cloud):
    """Latent code and reconstruction for one cloud (P, 3) or a batch (B, P, 3)."""
    x = _check_batch(model, cloud)
    z, recon, *_ = _forward(model, x)
    if np.asarray(cloud).ndim == 2:
        return z[0], recon[0]
    return z, recon


def loss_and_grads(model: AEModel, clouds):
    """Mean chamfer loss over the batch and gradients for every parameter.

    Returns ``(loss, grads)`` with ``grads`` ordered like ``model.params()``.
    """
    x = _check_batch(model, clouds)
    B = len(x)
    z, recon, acts, arg, dec = _forward(model, x)
    losses = np.empty(B)
    d_recon = np.empty_like(recon)
    for i in range(B):
        losses[i], d_recon[i] = chamfer_grad(x[i], recon[i])
    d_recon /= B
    n = len(model.weights)
    npl = model.n_point_layers
    gW = [None] * n
    gb = [None] * n
    # decoder
    delta = d_recon.reshape(B, -1)
    for i in range(n - 1, npl - 1, -1):
        inp = dec[i - npl]
        gW[i] = inp.T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ model.weights[i].T
        if i > npl:
            delta = delta * (dec[i - npl] > 0)
    # max pool: route to the argmax point
    dz = delta
    dh = np.zeros_like(acts[-1])
    np.put_along_axis(dh, arg[:, None, :], dz[:, None, :], axis=1)
    for i in range(npl - 1, -1, -1):
        inp = acts[i]
        gW[i] = inp.reshape(-1, inp.shape[2]).T @ dh.reshape(-1, dh.shape[2])
        gb[i] = dh.sum(axis=(0, 1))
        if i > 0:
            dh = (dh @ model.weights[i].T) * (acts[i] > 0)
    grads = []
    for a, b in zip(gW, gb):
        grads += [a, b]
    return float(losses.mean()), grads


def _set_params(model, flat_params):
    for j in range(len(model.weights)):
        model.weights[j] = flat_params[2 * j]
        model.biases[j] = flat_params[2 * j + 1]


def train(model: AEModel, dictionary, config: EncoderConfig | None = None,
          callback=None) -> AEModel:
    """Minibatch Adam on the chamfer loss.

    Returns a new model; the input model is left untouched. The per-epoch mean
    training loss is appended to ``model.log``.
    """
    cfg = config or model.config
    x = np.asarray(dictionary, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty training dictionary")
    _check_batch(model, x)
    out = model.copy()
    if cfg.epochs == 0:
        return out
    rng = np.random.default_rng(cfg.seed)
    params = out.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(x))
        tot = 0.0
        for s in range(0, len(x), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            loss, grads = loss_and_grads(out, x[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            tot += loss * len(idx)
            t += 1
            lr_t = cfg.learning_rate * np.sqrt(1 - b2**t) / (1 - b1**t)
            for j, g in enumerate(grads):
                m[j] = b1 * m[j] + (1 - b1) * g
                v[j] = b2 * v[j] + (1 - b2) * g * g
                params[j] = params[j] - lr_t * m[j] / (np.sqrt(v[j]) + eps)
            _set_params(out, params)
        out.log.append(tot / len(x))
        if callback is not None:
            callback(epoch, out.log[-1])
        w = cfg.plateau_window
        if cfg.until_plateau and len(out.log) > w:
            old, new = out.log[-w - 1], out.log[-1]
            if old - new < cfg.plateau_tol * abs(old):
                break
    return out


def encode(model: AEModel, cloud) -> np.ndarray:
    x = _check_batch(model, cloud)
    z = _forward(model, x)[0]
    return z[0] if np.asarray(cloud).ndim == 2 else z


def encode_many(model: AEModel, clouds, batch_size=64, threads=1) -> np.ndarray:
    """Latent codes for a list of clouds, in input order."""
    x = np.asarray(clouds, dtype=np.float64)
    if len(x) == 0:
        return np.zeros((0, model.config.latent_dim))
    chunks = [x[s : s + batch_size] for s in range(0, len(x), batch_size)]
    return np.concatenate(pmap(lambda c: encode(model, c), chunks, threads))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_model(model: AEModel, path):
    """Binary little-endian model file.

    Layout: magic, then uint32 P, L, #point widths, widths, #decoder widths,
    widths; then every layer's weights and biases as float64; then uint32
    epoch count and the per-epoch losses as float64.
    """
    c = model.config
    parts = [MAGIC, struct.pack("<II", c.n_points, c.latent_dim)]
    parts.append(struct.pack(f"<I{len(c.point_widths)}I", len(c.point_widths), *c.point_widths))
    parts.append(struct.pack(f"<I{len(c.decoder_widths)}I", len(c.decoder_widths), *c.decoder_widths))
    for W, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(struct.pack("<I", len(model.log)))
    parts.append(np.asarray(model.log, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_model(path, config: EncoderConfig | None = None) -> AEModel:
    """Read a model file; training settings come from ``config`` if given."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a model file")
    off = len(MAGIC)

    def u32(count=1):
        nonlocal off
        vals = struct.unpack_from(f"<{count}I", data, off)
        off += 4 * count
        return vals

    P, L = u32(2)
    (ne,) = u32()
    enc = u32(ne)
    (nd,) = u32()
    dec = u32(nd)
    base = config or EncoderConfig()
    cfg = replace(base, n_points=P, latent_dim=L, point_widths=tuple(enc),
                  decoder_widths=tuple(dec))
    weights, biases = [], []
    for fi, fo in cfg.layer_shapes():
        W = np.frombuffer(data, dtype="<f8", count=fi * fo, offset=off).reshape(fi, fo)
        off += 8 * fi * fo
        b = np.frombuffer(data, dtype="<f8", count=fo, offset=off)
        off += 8 * fo
        weights.append(W.astype(np.float64))
        biases.append(b.astype(np.float64))
    (nlog,) = u32()
    log = np.frombuffer(data, dtype="<f8", count=nlog, offset=off).tolist()
    return AEModel(cfg, weights, biases, log)


def write_features(path, ids, features):
    features = np.asarray(features)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["synapse_id"] + [f"f_{i}" for i in range(features.shape[1])])
        for sid, row in zip(ids, features.tolist()):
            w.writerow([sid] + [repr(v) for v in row])
    os.replace(tmp, path)


def read_features(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    ids = [row[0] for row in rows]
    x = np.array([[float(v) for v in row[1:]] for row in rows]).reshape(len(rows), len(header) - 1)
    return ids, x
