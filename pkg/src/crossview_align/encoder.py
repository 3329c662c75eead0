"""Small pre-norm vision transformer with LTPS blocks and manual backprop.

Sequence layout is ``[cls, view, patch_0 ... patch_{N-1}]`` with patches in
row-major order. Before every block listed in ``placement`` the patch tokens
are reshaped to a ``(B, gh, gw, D)`` grid and warped; the cls and view tokens
skip the warp.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tps

LN_EPS = 1e-6
GELU_C = math.sqrt(2.0 / math.pi)
PRESETS = ("first_layer", "first_4", "middle_4", "last_4", "all", "none")
LTPS_MODES = ("learned", "fixed", "original")


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 8
    in_chans: int = 1
    image_h: int = 64
    image_w: int = 32
    mlp_ratio: int = 4
    num_classes: int = 100
    placement: Tuple[int, ...] = (0, 1, 2, 3)
    eta: float = 0.1
    eta_per_layer: Optional[Tuple[float, ...]] = None
    k: int = 4
    ltps_mode: str = "learned"
    theta_fixed: float = 0.0
    direction: str = "backward"
    trainable_eta: bool = False
    pixel_mean: float = 0.18
    pixel_std: float = 0.21

    def __post_init__(self):
        self.placement = tuple(sorted(set(int(i) for i in self.placement)))
        if self.eta_per_layer is not None:
            self.eta_per_layer = tuple(float(e) for e in self.eta_per_layer)
        self.validate()

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.pixel_std <= 0:
            raise ConfigError("pixel_std must be positive")
        if self.dim % 2:
            raise ConfigError("dim must be even")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError("image size must be divisible by the patch size")
        if any(i < 0 or i >= self.depth for i in self.placement):
            raise ConfigError("LTPS placement must lie in [0, depth)")
        if self.ltps_mode not in LTPS_MODES:
            raise ConfigError(f"unknown ltps mode {self.ltps_mode!r}")
        if self.direction not in ("backward", "forward"):
            raise ConfigError(f"unknown warp direction {self.direction!r}")
        if abs(self.theta_fixed) > math.pi / 2:
            raise ConfigError("fixed angle must lie in [-pi/2, pi/2]")
        if self.eta_per_layer is not None and len(self.eta_per_layer) != self.depth:
            raise ConfigError("eta_per_layer needs one value per layer")
        tps.control_grid(self.k)

    @property
    def grid(self) -> Tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def layer_eta(self, layer: int) -> float:
        if self.eta_per_layer is not None:
            return self.eta_per_layer[layer]
        return self.eta


def placement_presets(name: str, depth: int) -> Tuple[int, ...]:
    """Layer indices for a named placement; "4" means ``ceil(depth / 3)`` below depth 12."""
    if name not in PRESETS:
        raise ConfigError(f"unknown placement preset {name!r}")
    n = 4 if depth >= 12 else math.ceil(depth / 3)
    n = min(n, depth)
    if name == "none":
        return ()
    if name == "first_layer":
        return (0,)
    if name == "first_4":
        return tuple(range(n))
    if name == "middle_4":
        start = (depth - n) // 2
        return tuple(range(start, start + n))
    if name == "last_4":
        return tuple(range(depth - n, depth))
    return tuple(range(depth))


# --- building blocks ---------------------------------------------------------------

def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """``(B, C, H, W)`` to ``(B, (H/p)(W/p), C p p)`` in row-major patch order."""
    b, c, h, w = images.shape
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, c, h // p, p, w // p, p)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)


def tokenize(images: np.ndarray, weight: np.ndarray, bias: np.ndarray, p: int):
    """Linear patch embedding. Returns ``(tokens, (gh, gw))``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    return patchify(images, p) @ weight + bias, (images.shape[2] // p, images.shape[3] // p)


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    d = xhat.shape[-1]
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def _gelu(u):
    t = np.tanh(GELU_C * u * (1.0 + 0.044715 * (u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_backward(du_out, u, t):
    dt = GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


def _softmax(s):
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _matmul_param_grad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


# --- model ---------------------------------------------------------------------------

@dataclass
class EncoderOutput:
    features: np.ndarray
    logits: np.ndarray
    thetas: np.ndarray
    states: List[tps.LtpsLayerState]
    cache: Optional[dict] = field(default=None, repr=False)

    @property
    def embedding(self) -> np.ndarray:
        n = np.linalg.norm(self.features, axis=1, keepdims=True)
        return self.features / np.maximum(n, 1e-12)


def init_params(config: EncoderConfig, rng: np.random.Generator, std: float = 0.02) -> Dict[str, np.ndarray]:
    d = config.dim
    hid = d * config.mlp_ratio
    pdim = config.in_chans * config.patch * config.patch
    p: Dict[str, np.ndarray] = {
        "patch.W": rng.normal(scale=1.0 / math.sqrt(pdim), size=(pdim, d)),
        "patch.b": np.zeros(d),
        "pos": rng.normal(scale=std, size=(config.num_patches, d)),
        "cls": rng.normal(scale=std, size=d),
        "view": rng.normal(scale=std, size=(2, d)),
    }
    for l in range(config.depth):
        pre = f"blocks.{l}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        p[pre + "qkv.W"] = rng.normal(scale=1.0 / math.sqrt(d), size=(d, 3 * d))
        p[pre + "qkv.b"] = np.zeros(3 * d)
        p[pre + "proj.W"] = rng.normal(scale=1.0 / math.sqrt(d), size=(d, d))
        p[pre + "proj.b"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "fc1.W"] = rng.normal(scale=1.0 / math.sqrt(d), size=(d, hid))
        p[pre + "fc1.b"] = np.zeros(hid)
        p[pre + "fc2.W"] = rng.normal(scale=1.0 / math.sqrt(hid), size=(hid, d))
        p[pre + "fc2.b"] = np.zeros(d)
    # LTPS parameters exist for every layer so placement can change without reshaping checkpoints
    grid = tps.control_grid(config.k)
    for l in range(config.depth):
        pre = f"ltps.{l}."
        p[pre + "source"] = grid.copy()
        p[pre + "head.w"] = rng.normal(scale=std, size=d)
        p[pre + "head.b"] = np.zeros(())
        p[pre + "eta"] = np.array(config.layer_eta(l))
    p["norm.g"] = np.ones(d)
    p["norm.b"] = np.zeros(d)
    p["classifier.W"] = rng.normal(scale=1.0 / math.sqrt(d), size=(config.num_classes, d))
    return p


class Encoder:
    """Forward/backward over a parameter dict; the dict is shared, not copied."""

    def __init__(self, config: EncoderConfig, params: Optional[Dict[str, np.ndarray]] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, np.random.default_rng(seed))
        self._target = tps.control_grid(config.k)
        self._target.setflags(write=False)

    def _eta(self, l: int) -> float:
        if self.config.trainable_eta:
            return float(self.params[f"ltps.{l}.eta"])
        return self.config.layer_eta(l)

    def frozen(self, name: str) -> bool:
        """Parameters that the optimizer must leave untouched."""
        if name.endswith(".eta"):
            return not self.config.trainable_eta
        if name.startswith("ltps."):
            l = int(name.split(".")[1])
            if l not in self.config.placement:
                return True
            if self.config.ltps_mode == "original":
                return True
            if self.config.ltps_mode == "fixed" and not name.endswith(".eta"):
                return True
        return False

    # -- forward --------------------------------------------------------------

    def forward(self, images: np.ndarray, views, train: bool = True) -> EncoderOutput:
        cfg, P = self.config, self.params
        images = np.asarray(images, dtype=np.float64)
        views = np.asarray(views, dtype=np.intp)
        b = images.shape[0]
        d = cfg.dim
        gh, gw = cfg.grid
        patches = patchify((images - cfg.pixel_mean) / cfg.pixel_std, cfg.patch)
        x_p = patches @ P["patch.W"] + P["patch.b"] + P["pos"]
        X = np.concatenate(
            [np.broadcast_to(P["cls"], (b, 1, d)), P["view"][views][:, None, :], x_p], axis=1
        )
        cache = {"patches": patches, "views": views, "blocks": [], "ltps": {}} if train else None
        states: List[tps.LtpsLayerState] = []
        for l in range(cfg.depth):
            if l in cfg.placement:
                cps = tps.ControlPointSet(P[f"ltps.{l}.source"], self._target)
                head = tps.RotationHead(P[f"ltps.{l}.head.w"], float(P[f"ltps.{l}.head.b"]))
                grid = X[:, 2:].reshape(b, gh, gw, d)
                out, st = tps.ltps_forward(
                    grid, cps, head, self._eta(l), mode=cfg.ltps_mode,
                    theta_fixed=cfg.theta_fixed, direction=cfg.direction, layer=l, keep=train,
                )
                states.append(st)
                if out is not grid:
                    X = np.concatenate([X[:, :2], out.reshape(b, -1, d)], axis=1)
            X, bc = self._block_forward(l, X, train)
            if train:
                cache["blocks"].append(bc)
        Xn, ln_cache = _layernorm(X[:, 0], P["norm.g"], P["norm.b"])
        logits = Xn @ P["classifier.W"].T
        thetas = np.stack([s.theta for s in states], axis=1) if states else np.zeros((b, 0))
        if train:
            cache["norm"] = ln_cache
            cache["final_X_shape"] = X.shape
            cache["features"] = Xn
        return EncoderOutput(Xn, logits, thetas, states, cache)

    def _block_forward(self, l: int, X: np.ndarray, train: bool):
        cfg, P = self.config, self.params
        pre = f"blocks.{l}."
        b, t, d = X.shape
        nh = cfg.heads
        dh = d // nh
        h1, ln1 = _layernorm(X, P[pre + "ln1.g"], P[pre + "ln1.b"])
        qkv = h1 @ P[pre + "qkv.W"] + P[pre + "qkv.b"]
        qkv = qkv.reshape(b, t, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scale = 1.0 / math.sqrt(dh)
        A = _softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        O = (A @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        X1 = X + O @ P[pre + "proj.W"] + P[pre + "proj.b"]
        h2, ln2 = _layernorm(X1, P[pre + "ln2.g"], P[pre + "ln2.b"])
        u = h2 @ P[pre + "fc1.W"] + P[pre + "fc1.b"]
        g, tg = _gelu(u)
        X2 = X1 + g @ P[pre + "fc2.W"] + P[pre + "fc2.b"]
        if not train:
            return X2, None
        return X2, dict(ln1=ln1, h1=h1, q=q, k=k, v=v, A=A, O=O, ln2=ln2, h2=h2, u=u, g=g, tg=tg)

    # -- backward -------------------------------------------------------------

    def backward(self, out: EncoderOutput, dfeatures: Optional[np.ndarray] = None,
                 dlogits: Optional[np.ndarray] = None, dthetas: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        cfg, P = self.config, self.params
        cache = out.cache
        if cache is None:
            raise RuntimeError("backward needs a forward pass run with train=True")
        grads = {name: np.zeros_like(v) for name, v in P.items()}
        b, t, d = cache["final_X_shape"]
        gh, gw = cfg.grid
        dXn = np.zeros((b, d)) if dfeatures is None else np.array(dfeatures, dtype=np.float64)
        if dlogits is not None:
            dXn += dlogits @ P["classifier.W"]
            grads["classifier.W"] += dlogits.T @ cache["features"]
        dcls, grads["norm.g"], grads["norm.b"] = _layernorm_backward(dXn, P["norm.g"], cache["norm"])
        dX = np.zeros((b, t, d))
        dX[:, 0] = dcls

        states = {s.layer: s for s in out.states}
        theta_col = {s.layer: i for i, s in enumerate(out.states)}
        for l in reversed(range(cfg.depth)):
            dX = self._block_backward(l, dX, cache["blocks"][l], grads)
            if l in states:
                st = states[l]
                dth = None if dthetas is None else dthetas[:, theta_col[l]]
                lg = tps.ltps_backward(st, dX[:, 2:].reshape(b, gh, gw, d), dth)
                dX = dX.copy()
                dX[:, 2:] = lg.F.reshape(b, -1, d)
                pre = f"ltps.{l}."
                grads[pre + "source"] += lg.source
                grads[pre + "head.w"] += lg.head_weight
                grads[pre + "head.b"] += lg.head_bias
                grads[pre + "eta"] += lg.eta

        grads["cls"] += dX[:, 0].sum(axis=0)
        np.add.at(grads["view"], cache["views"], dX[:, 1])
        dxp = dX[:, 2:]
        grads["pos"] += dxp.sum(axis=0)
        grads["patch.b"] += dxp.sum(axis=(0, 1))
        grads["patch.W"] += _matmul_param_grad(cache["patches"], dxp)
        for name in grads:
            if self.frozen(name):
                grads[name][...] = 0.0
        return grads

    def _block_backward(self, l: int, dX2: np.ndarray, c: dict, grads: Dict[str, np.ndarray]) -> np.ndarray:
        cfg, P = self.config, self.params
        pre = f"blocks.{l}."
        b, t, d = dX2.shape
        nh = cfg.heads
        dh = d // nh
        # MLP branch
        grads[pre + "fc2.b"] += dX2.sum(axis=(0, 1))
        grads[pre + "fc2.W"] += _matmul_param_grad(c["g"], dX2)
        du = _gelu_backward(dX2 @ P[pre + "fc2.W"].T, c["u"], c["tg"])
        grads[pre + "fc1.b"] += du.sum(axis=(0, 1))
        grads[pre + "fc1.W"] += _matmul_param_grad(c["h2"], du)
        dh2 = du @ P[pre + "fc1.W"].T
        dx, dg, db = _layernorm_backward(dh2, P[pre + "ln2.g"], c["ln2"])
        grads[pre + "ln2.g"] += dg
        grads[pre + "ln2.b"] += db
        dX1 = dX2 + dx
        # attention branch
        grads[pre + "proj.b"] += dX1.sum(axis=(0, 1))
        grads[pre + "proj.W"] += _matmul_param_grad(c["O"], dX1)
        dO = (dX1 @ P[pre + "proj.W"].T).reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
        A, q, k, v = c["A"], c["q"], c["k"], c["v"]
        dA = dO @ v.transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ dO
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * (1.0 / math.sqrt(dh))
        dq = dS @ k
        dk = dS.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv], axis=0).transpose(1, 3, 0, 2, 4).reshape(b, t, 3 * d)
        grads[pre + "qkv.b"] += dqkv.sum(axis=(0, 1))
        grads[pre + "qkv.W"] += _matmul_param_grad(c["h1"], dqkv)
        dh1 = dqkv @ P[pre + "qkv.W"].T
        dx, dg, db = _layernorm_backward(dh1, P[pre + "ln1.g"], c["ln1"])
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += db
        return dX1 + dx

    # -- inference ------------------------------------------------------------

    def embed(self, images: np.ndarray, views, batch_size: int = 128) -> np.ndarray:
        """l2-normalized retrieval embeddings. Reads no labels and no DAM state."""
        views = np.asarray(views)
        chunks = []
        for s in range(0, len(images), batch_size):
            out = self.forward(images[s:s + batch_size], views[s:s + batch_size], train=False)
            chunks.append(out.embedding)
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.config.dim))
