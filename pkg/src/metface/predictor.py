"""Supervised shape prediction from precomputed identity features.

A ReLU MLP maps an identity embedding to linear-model coefficients which a
fixed linear decoder turns into a neutral face. Training minimises the
region-weighted L1 vertex error with AdamW. A sinusoidal, FiLM-conditioned
coordinate network is provided as a model-free decoder alternative.
All gradients are analytic (numpy, float64).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import LinearShapeModel, Mesh, decode_linear

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class IdentityFeature:
    vector: np.ndarray
    subject_id: str = ""
    source: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float).ravel()
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("feature must be finite")


def _as_batch(f):
    if isinstance(f, IdentityFeature):
        f = f.vector
    f = np.asarray(f, dtype=float)
    return f[None] if f.ndim == 1 else f


# --------------------------------------------------------------------------
# mapping network

class MappingNetwork:
    """Affine+ReLU hidden layers followed by a linear output layer.

    ``weights[i]`` has shape (out, in). Default widths D -> H -> H -> H -> K.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float).ravel() for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.size or (i and w.shape[1] != self.weights[i - 1].shape[0]):
                raise ValueError("inconsistent layer shapes")

    @classmethod
    def create(cls, in_dim, out_dim, hidden=300, n_hidden=3, seed=0, zero=False):
        """PyTorch-style uniform(+-1/sqrt(fan_in)) initialisation."""
        rng = np.random.default_rng(seed)
        dims = [in_dim] + [hidden] * n_hidden + [out_dim]
        ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(a)
            ws.append(np.zeros((b, a)) if zero else rng.uniform(-bound, bound, (b, a)))
            bs.append(np.zeros(b) if zero else rng.uniform(-bound, bound, b))
        return cls(ws, bs)

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def params(self) -> list:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "MappingNetwork":
        return MappingNetwork(self.weights, self.biases)

    def forward(self, x):
        """Batched forward pass; returns ``(out, cache)``."""
        x = _as_batch(x)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected feature dimension {self.in_dim}, got {x.shape[1]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, g_out):
        """Gradients (same order as :meth:`params`) and the input gradient."""
        grads = []
        g = g_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            grads.append(g.sum(axis=0))
            grads.append(g.T @ acts[i])
            g = g @ self.weights[i]
        grads.reverse()  # -> [W0, b0, W1, b1, ...]
        return grads, g


def map_forward(net: MappingNetwork, f) -> np.ndarray:
    """Latent code(s) for identity feature(s); a 1-D input yields a 1-D code."""
    single = isinstance(f, IdentityFeature) or np.ndim(f) == 1
    z, _ = net.forward(f)
    return z[0] if single else z


def predict_shape(net: MappingNetwork, model: LinearShapeModel, f) -> Mesh:
    return decode_linear(model, map_forward(net, f))


# --------------------------------------------------------------------------
# loss

def masked_l1(pred, gt, kappa):
    """Region-weighted L1: ``sum_i kappa_i * sum_c |pred_ic - gt_ic|``.

    Accepts meshes or (..., N, 3) arrays; for batches the loss is the batch
    sum. Returns ``(loss, d loss / d pred)`` with subgradient 0 at zero error.
    """
    p = pred.vertices if isinstance(pred, Mesh) else np.asarray(pred, float)
    g = gt.vertices if isinstance(gt, Mesh) else np.asarray(gt, float)
    if p.shape != g.shape:
        raise ValueError(f"vertex arrays differ in shape: {p.shape} vs {g.shape}")
    k = np.asarray(kappa, float).ravel()
    if k.size != p.shape[-2]:
        raise ValueError("kappa must have one weight per vertex")
    r = p - g
    loss = float(np.sum(k[:, None] * np.abs(r)))
    return loss, k[:, None] * np.sign(r)


# --------------------------------------------------------------------------
# optimiser

class AdamW:
    """Adam with decoupled weight decay; parameters are updated in place."""

    def __init__(self, params, lr=1e-3, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        if not lr > 0 or weight_decay < 0:
            raise ValueError("need lr > 0 and weight_decay >= 0")
        self.params = list(params)
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p *= 1 - self.lr * self.wd
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 2e-4
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    hidden: int = 300
    n_components: Optional[int] = None  # latent size; None = all model components
    use_kappa: bool = True

    def __post_init__(self):
        if not self.lr > 0 or self.weight_decay < 0:
            raise ValueError("need lr > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be positive and steps non-negative")


def truncate_model(model: LinearShapeModel, n_components: Optional[int]) -> LinearShapeModel:
    """Keep the leading ``n_components`` shape components (latent-size knob)."""
    if n_components is None or n_components == model.n_shape:
        return model
    if not 0 < n_components <= model.n_shape:
        raise ValueError(f"n_components must be in 1..{model.n_shape}")
    return LinearShapeModel(model.mean, model.shape_basis[:, :n_components], model.expr_basis,
                            model.faces, model.landmarks, model.kappa, model.albedo_mean,
                            model.albedo_basis)


def batch_loss_and_grad(net: MappingNetwork, model: LinearShapeModel, features, targets, kappa):
    """Mean over the batch of the per-sample weighted L1 and its parameter gradients."""
    z, acts = net.forward(features)
    pred = (model.mean + z @ model.shape_basis.T).reshape(len(z), -1, 3)
    loss, g_pred = masked_l1(pred, targets, kappa)
    n = len(z)
    g_z = (g_pred.reshape(n, -1) @ model.shape_basis) / n
    grads, _ = net.backward(acts, g_z)
    return loss / n, grads


@dataclass
class TrainResult:
    net: MappingNetwork
    history: list = field(default_factory=list)
    model: Optional[LinearShapeModel] = None


def train(net: MappingNetwork, model: LinearShapeModel, features, meshes, cfg: TrainConfig) -> TrainResult:
    """Fit ``net`` (in place) so that ``decode(net(features))`` matches ``meshes``.

    ``meshes`` is a sequence of meshes or an (S, N, 3) array. The loss history
    holds the pre-update batch loss of every step.
    """
    model = truncate_model(model, cfg.n_components)
    X = _as_batch(features)
    Y = np.stack([m.vertices if isinstance(m, Mesh) else np.asarray(m, float) for m in meshes])
    if len(X) != len(Y):
        raise ValueError("features and meshes differ in count")
    if X.shape[1] != net.in_dim or net.out_dim != model.n_shape:
        raise ValueError("network dimensions do not match features/model")
    if Y.shape[1] != model.n_vertices:
        raise ValueError("meshes are not in model topology")
    kappa = model.kappa if cfg.use_kappa else np.ones(model.n_vertices)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(net.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for step in range(cfg.steps):
        if cfg.batch_size >= len(X):
            idx = np.arange(len(X))
        else:
            idx = rng.choice(len(X), cfg.batch_size, replace=False)
        loss, grads = batch_loss_and_grad(net, model, X[idx], Y[idx], kappa)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingError(f"non-finite loss/gradient at step {step} (loss={loss}, "
                                f"max |w|={max(np.abs(p).max() for p in net.params()):.3g})")
        history.append(loss)
        opt.step(grads)
    return TrainResult(net, history, model)


def evaluate_l1(net, model, features, meshes, use_kappa=True) -> float:
    """Mean per-sample weighted L1 of the predictor."""
    X = _as_batch(features)
    Y = np.stack([m.vertices if isinstance(m, Mesh) else m for m in meshes])
    z = net.forward(X)[0]
    pred = (model.mean + z @ model.shape_basis.T).reshape(len(z), -1, 3)
    kappa = model.kappa if use_kappa else np.ones(model.n_vertices)
    return masked_l1(pred, Y, kappa)[0] / len(X)


def mean_face_l1(model, meshes, use_kappa=True) -> float:
    """Baseline: always predict the mean face."""
    Y = np.stack([m.vertices if isinstance(m, Mesh) else m for m in meshes])
    kappa = model.kappa if use_kappa else np.ones(model.n_vertices)
    pred = np.broadcast_to(model.mean.reshape(-1, 3), Y.shape)
    return masked_l1(pred, Y, kappa)[0] / len(Y)


# --------------------------------------------------------------------------
# gradient checking

def grad_check(loss_and_grad: Callable, params: Sequence[np.ndarray], h=1e-5, max_entries=64, seed=0) -> float:
    """Max relative error of analytic gradients against central differences.

    ``loss_and_grad()`` evaluates at the current values of ``params`` (which
    are perturbed in place and restored). Up to ``max_entries`` random entries
    per parameter array are probed. Error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` with
    ``floor = 1e-6 * max |numeric|``, so entries whose true gradient is (near)
    zero are judged on the scale of the whole gradient rather than on
    round-off. The weighted L1 loss is not differentiable at zero residual;
    probe points should keep residuals well away from zero.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grad()
    grads = [np.array(g, copy=True) for g in grads]
    pairs = []
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = loss_and_grad()[0]
            flat[i] = old - h
            fm = loss_and_grad()[0]
            flat[i] = old
            pairs.append((g.reshape(-1)[i], (fp - fm) / (2 * h)))
    if not pairs:
        return 0.0
    a, num = np.array(pairs).T
    floor = max(1e-6 * np.abs(num).max(), 1e-12)
    return float(np.max(np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)))


# --------------------------------------------------------------------------
# SIREN / FiLM decoder

class SirenDecoder:
    """Coordinate MLP with FiLM-modulated sine activations.

    Hidden layer l computes ``sin(freq_l * (W_l h + b_l) + phase_l)``; the
    per-layer frequencies and phases come from a ReLU conditioner applied to
    the identity code. Frequencies are ``omega0 * (1 + 0.5 * raw)``. A final
    linear layer maps to 3D vertex positions.
    """

    def __init__(self, trunk_w, trunk_b, conditioner: MappingNetwork, omega0=30.0):
        self.trunk_w = [np.array(w, float) for w in trunk_w]
        self.trunk_b = [np.array(b, float).ravel() for b in trunk_b]
        self.conditioner = conditioner
        self.omega0 = omega0
        if conditioner.out_dim != 2 * self.n_hidden * self.width:
            raise ValueError("conditioner output must hold a frequency and phase per hidden unit")

    @classmethod
    def create(cls, latent_dim, n_hidden=8, width=256, cond_hidden=256, cond_layers=3,
               omega0=30.0, seed=0):
        rng = np.random.default_rng(seed)
        dims = [3] + [width] * n_hidden + [3]
        ws, bs = [], []
        for l, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / a if l == 0 else np.sqrt(6.0 / a) / omega0
            ws.append(rng.uniform(-bound, bound, (b, a)))
            bs.append(rng.uniform(-1 / np.sqrt(a), 1 / np.sqrt(a), b))
        cond = MappingNetwork.create(latent_dim, 2 * n_hidden * width, cond_hidden, cond_layers,
                                     seed=int(rng.integers(2 ** 31)))
        cond.weights[-1] *= 0.25  # start near the nominal frequency
        return cls(ws, bs, cond, omega0)

    @property
    def n_hidden(self):
        return len(self.trunk_w) - 1

    @property
    def width(self):
        return self.trunk_w[0].shape[0]

    def trunk_params(self):
        return [p for wb in zip(self.trunk_w, self.trunk_b) for p in wb]

    def params(self):
        return self.trunk_params() + self.conditioner.params()

    def trunk_parameter_count(self) -> int:
        return sum(p.size for p in self.trunk_params())

    def n_parameters(self) -> int:
        return self.trunk_parameter_count() + self.conditioner.n_parameters()

    def film(self, z):
        """Per-layer ``(freqs, phases)``, each (n_hidden, width), and the conditioner cache."""
        raw, acts = self.conditioner.forward(np.asarray(z, float).ravel())
        raw = raw[0].reshape(2, self.n_hidden, self.width)
        return self.omega0 * (1 + 0.5 * raw[0]), raw[1], acts

    def trunk_forward(self, x, freqs, phases):
        h = np.asarray(x, float)
        cache = [h]
        for l in range(self.n_hidden):
            pre = h @ self.trunk_w[l].T + self.trunk_b[l]
            arg = freqs[l] * pre + phases[l]
            h = np.sin(arg)
            cache.append((pre, arg, h))
        out = h @ self.trunk_w[-1].T + self.trunk_b[-1]
        return out, cache

    def trunk_backward(self, cache, g_out, freqs):
        """Gradients wrt trunk params, freqs and phases."""
        L = self.n_hidden
        h_last = cache[-1][2]
        g_w = [None] * (L + 1)
        g_b = [None] * (L + 1)
        g_w[L] = g_out.T @ h_last
        g_b[L] = g_out.sum(axis=0)
        g_h = g_out @ self.trunk_w[L]
        g_freq = np.zeros_like(freqs)
        g_phase = np.zeros_like(freqs)
        for l in range(L - 1, -1, -1):
            pre, arg, _ = cache[l + 1]
            h_in = cache[0] if l == 0 else cache[l][2]
            g_arg = g_h * np.cos(arg)
            g_phase[l] = g_arg.sum(axis=0)
            g_freq[l] = (g_arg * pre).sum(axis=0)
            g_pre = g_arg * freqs[l]
            g_w[l] = g_pre.T @ h_in
            g_b[l] = g_pre.sum(axis=0)
            g_h = g_pre @ self.trunk_w[l]
        return [p for wb in zip(g_w, g_b) for p in wb], g_freq, g_phase

    def forward(self, z, template):
        freqs, phases, _ = self.film(z)
        return self.trunk_forward(template, freqs, phases)[0]

    def loss_and_grad(self, z, template, target, kappa):
        """Weighted L1 to ``target`` and gradients for :meth:`params`."""
        freqs, phases, cacts = self.film(z)
        out, cache = self.trunk_forward(template, freqs, phases)
        loss, g_out = masked_l1(out, target, kappa)
        g_trunk, g_freq, g_phase = self.trunk_backward(cache, g_out, freqs)
        g_raw = np.stack([g_freq * self.omega0 * 0.5, g_phase]).reshape(1, -1)
        g_cond, _ = self.conditioner.backward(cacts, g_raw)
        return loss, g_trunk + g_cond


def siren_trunk_parameter_count(n_hidden=8, width=256, in_dim=3, out_dim=3) -> int:
    return (in_dim * width + width) + (n_hidden - 1) * (width * width + width) + (width * out_dim + out_dim)


def siren_forward(dec: SirenDecoder, z, template) -> Mesh:
    """Evaluate the decoder at every template vertex; faces follow the template."""
    if isinstance(template, Mesh):
        verts, faces = template.vertices, template.faces
    else:
        verts, faces = np.asarray(template, float).reshape(-1, 3), np.zeros((0, 3), np.int64)
    z = np.asarray(z, float).ravel()
    if z.size != dec.conditioner.in_dim:
        raise ValueError(f"expected latent of size {dec.conditioner.in_dim}, got {z.size}")
    return Mesh(dec.forward(z, verts), faces)


# --------------------------------------------------------------------------
# weights files

def weights_to_tensors(net: MappingNetwork, model: LinearShapeModel) -> dict:
    """Mapping-network layers plus the bound linear decoder."""
    t = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        t[f"layer{i}.weight"] = w
        t[f"layer{i}.bias"] = b
    t["mean"] = model.mean
    t["shape_basis"] = model.shape_basis
    t["faces"] = model.faces
    return t


def weights_from_tensors(t: dict):
    """Inverse of :func:`weights_to_tensors`; returns ``(net, decoder_model)``."""
    n = len([k for k in t if k.endswith(".weight")])
    net = MappingNetwork([t[f"layer{i}.weight"] for i in range(n)], [t[f"layer{i}.bias"] for i in range(n)])
    mean = t["mean"]
    n_v = mean.size // 3
    model = LinearShapeModel(mean, t["shape_basis"], np.zeros((mean.size, 0)),
                             np.rint(t["faces"]).astype(np.int64), np.zeros(0, np.int64), np.ones(n_v))
    return net, model
