"""Training loop: PK sampling, full objective, AdamW with warm-up + cosine decay.

Randomness is stateless per epoch and per step (``default_rng([seed, ...])``),
so a run resumed from a checkpoint replays exactly the batches and
augmentations it would have seen without the interruption.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import objectives as obj
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_text, config_to_text
from .dam import MaskGenerator, MemoryBank, dam_backward, dam_training_step
from .data import Dataset
from .encoder import Encoder, EncoderConfig
from .numeric_core import NumericalError

METRICS_FILE = "metrics.jsonl"
FINAL_CKPT = "checkpoint.txt"
GEN_PREFIX = "dam."
NO_DECAY_PREFIXES = ("ltps.", "pos", "cls", "view")


class NanLossError(NumericalError):
    def __init__(self, step: int, breakdown: obj.LossBreakdown):
        super().__init__(f"non-finite loss at step {step}: {breakdown.to_json(step)}")
        self.step = step
        self.breakdown = breakdown


# --- sampling ------------------------------------------------------------------------

def pk_batches(identities: np.ndarray, views: np.ndarray, P: int, K: int,
               rng: np.random.Generator) -> List[np.ndarray]:
    """One epoch of P x K batches.

    Each identity's images are shuffled into chunks of K that alternate ground
    and aerial where possible; batches draw P distinct identities that still
    have a chunk left. Leftover images short of a full chunk are dropped.
    """
    chunks: Dict[int, List[np.ndarray]] = {}
    for ident in np.unique(identities):
        idx = np.flatnonzero(identities == ident)
        g = rng.permutation(idx[views[idx] == 0])
        a = rng.permutation(idx[views[idx] == 1])
        order = []
        for i in range(max(len(g), len(a))):
            if i < len(g):
                order.append(g[i])
            if i < len(a):
                order.append(a[i])
        order = np.array(order, dtype=np.intp)
        n = len(order) // K
        if n:
            chunks[int(ident)] = [order[j * K:(j + 1) * K] for j in range(n)]
    batches = []
    while True:
        alive = sorted(i for i, c in chunks.items() if c)
        if len(alive) < P:
            break
        picked = rng.choice(alive, size=P, replace=False)
        batches.append(np.concatenate([chunks[int(i)].pop() for i in picked]))
    if not batches:
        raise obj.SamplingError(f"cannot form a single {P}x{K} batch from this split")
    return batches


def epoch_batches(ds: Dataset, cfg: RunConfig, epoch: int) -> List[np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 7919, epoch])
    return pk_batches(ds.identities, ds.views, cfg.optim.P, cfg.optim.K, rng)


# --- optimizer -----------------------------------------------------------------------

def lr_at(step: int, total: int, steps_per_epoch: int, cfg: RunConfig) -> float:
    """Linear warm-up over ``warmup`` epochs, then cosine decay to zero."""
    base = cfg.optim.scaled_lr
    warm = cfg.optim.warmup * steps_per_epoch
    if warm > 0 and step < warm:
        return base * (step + 1) / warm
    span = max(total - warm, 1.0)
    return 0.5 * base * (1.0 + math.cos(math.pi * min((step - warm) / span, 1.0)))


def decays(name: str) -> bool:
    if name.startswith(NO_DECAY_PREFIXES):
        return False
    return name.endswith(".W") or name.endswith(("W1", "W2"))


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    lr_mult: Dict[str, float] = field(default_factory=dict)
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float, frozen) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            if frozen(name):
                continue
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(params[name]))
            v = self.v.setdefault(name, np.zeros_like(params[name]))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = params[name]
            lr_p = lr * self.lr_mult.get(name, 1.0)
            if self.weight_decay and decays(name):
                p -= lr_p * self.weight_decay * p
            p -= lr_p * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- state ---------------------------------------------------------------------------

@dataclass
class TrainState:
    config: RunConfig
    encoder: Encoder
    gen: MaskGenerator
    bank: Optional[MemoryBank]
    opt: AdamW
    step: int = 0
    class_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def all_params(self) -> Dict[str, np.ndarray]:
        out = dict(self.encoder.params)
        for key in ("W1", "b1", "W2", "b2"):
            out[GEN_PREFIX + key] = getattr(self.gen, key)
        return out

    def frozen(self, name: str) -> bool:
        if name.startswith(GEN_PREFIX):
            return not self.config.dam_enabled
        return self.encoder.frozen(name)

    def to_tensors(self) -> dict:
        t: dict = {"meta.config": config_to_text(self.config),
                   "meta.step": np.array(self.step), "meta.adam_t": np.array(self.opt.t),
                   "meta.class_ids": self.class_ids}
        for name, value in self.all_params().items():
            t["param." + name] = value
            if name in self.opt.m:
                t["adam_m." + name] = self.opt.m[name]
                t["adam_v." + name] = self.opt.v[name]
        if self.bank is not None:
            t["bank.vectors"] = self.bank.vectors
            t["bank.filled"] = self.bank.filled
        return t


def _optimizer(cfg: RunConfig) -> AdamW:
    o = cfg.optim
    return AdamW(o.beta1, o.beta2, o.eps, o.weight_decay, {"classifier.W": o.classifier_lr_mult})


def init_state(cfg: RunConfig, class_ids: np.ndarray) -> TrainState:
    enc_cfg = cfg.encoder
    if enc_cfg.num_classes != len(class_ids):
        enc_cfg = EncoderConfig(**{**asdict(enc_cfg), "num_classes": len(class_ids)})
        cfg.encoder = enc_cfg
    encoder = Encoder(enc_cfg, seed=cfg.seed)
    gen = MaskGenerator.init(enc_cfg.dim, np.random.default_rng([cfg.seed, 31]), scale=0.1)
    bank = MemoryBank.empty(len(class_ids), enc_cfg.dim) if cfg.dam.variant == "memory_bank" else None
    o = cfg.optim
    return TrainState(cfg, encoder, gen, bank, _optimizer(cfg),
                      class_ids=np.asarray(class_ids, dtype=np.int64))


def state_from_tensors(t: dict) -> TrainState:
    cfg = config_from_text(t["meta.config"])
    params = {k[len("param."):]: np.array(v, dtype=np.float64) for k, v in t.items() if k.startswith("param.")}
    enc_params = {k: v for k, v in params.items() if not k.startswith(GEN_PREFIX)}
    for k, v in enc_params.items():
        if k.endswith((".head.b", ".eta")):
            enc_params[k] = v.reshape(())
    gen = MaskGenerator(*(params[GEN_PREFIX + k] for k in ("W1", "b1", "W2", "b2")))
    bank = None
    if "bank.vectors" in t:
        bank = MemoryBank(np.array(t["bank.vectors"]), np.array(t["bank.filled"]).astype(bool))
    opt = _optimizer(cfg)
    opt.t = int(t["meta.adam_t"])
    for k, v in t.items():
        if k.startswith("adam_m."):
            name = k[len("adam_m."):]
            opt.m[name] = np.array(v, dtype=np.float64).reshape(params[name].shape)
            opt.v[name] = np.array(t["adam_v." + name], dtype=np.float64).reshape(params[name].shape)
    return TrainState(cfg, Encoder(cfg.encoder, enc_params), gen, bank, opt,
                      int(t["meta.step"]), np.array(t["meta.class_ids"], dtype=np.int64))


def save_state(state: TrainState, path) -> None:
    save_checkpoint(path, state.to_tensors())


def load_state(path) -> TrainState:
    return state_from_tensors(load_checkpoint(path))


# --- one step ------------------------------------------------------------------------

def train_step(state: TrainState, images: np.ndarray, views: np.ndarray, labels: np.ndarray, lr: float):
    """Forward, objective, backward and one optimizer update. Returns the breakdown."""
    cfg = state.config
    lc = cfg.loss
    enc = state.encoder
    out = enc.forward(images, views, train=True)
    f = out.features

    id_l = obj.id_loss(out.logits, labels, lc.smoothing)
    # triplet acts on the retrieval embedding, i.e. the l2-normalized features
    fnorm = np.sqrt(np.einsum("nd,nd->n", f, f))[:, None]
    emb = f / fnorm
    tri_l = obj.triplet_loss(emb, labels, lc.margin)
    deform_l = obj.deformation_loss(out.thetas)
    dlogits = obj.id_loss_grad(out.logits, labels, lc.smoothing)
    demb = obj.triplet_loss_grad(emb, labels, lc.margin)
    dfeat = (demb - emb * np.einsum("nd,nd->n", emb, demb)[:, None]) / fnorm
    dthetas = lc.alpha * obj.deformation_loss_grad(out.thetas)

    gen_grads = {k: np.zeros_like(getattr(state.gen, k)) for k in ("W1", "b1", "W2", "b2")}
    align_l = entropy_l = 0.0
    dclassifier = None
    if cfg.dam_enabled:
        W = enc.params["classifier.W"]
        dam = dam_training_step(f, labels, state.gen, cfg.dam, state.bank, W)
        align_l = obj.align_loss(dam.masks, f, dam.prototypes)
        entropy_l = obj.entropy_loss(dam.masks)
        dm, df, dp = obj.align_loss_grad(dam.masks, f, dam.prototypes)
        dm = lc.beta * (dm + lc.lam * obj.entropy_loss_grad(dam.masks))
        df_dam, gen_grads, dclassifier = dam_backward(
            dam, f, labels, state.gen, cfg.dam, dm, lc.beta * dp, W)
        dfeat = dfeat + lc.beta * df + df_dam

    breakdown = obj.total_loss(id_l, tri_l, deform_l, align_l, entropy_l, lc)
    if not all(math.isfinite(v) for v in asdict(breakdown).values()):
        raise NanLossError(state.step, breakdown)

    grads = enc.backward(out, dfeatures=dfeat, dlogits=dlogits,
                         dthetas=dthetas if out.thetas.size else None)
    if dclassifier is not None:
        grads["classifier.W"] += dclassifier
    for k, g in gen_grads.items():
        grads[GEN_PREFIX + k] = g
    state.opt.step(state.all_params(), grads, lr, state.frozen)
    state.step += 1
    return breakdown


def _flip(images: np.ndarray, rng: np.random.Generator, prob: float) -> np.ndarray:
    if prob <= 0:
        return images
    mask = rng.random(len(images)) < prob
    if not mask.any():
        return images
    out = images.copy()
    out[mask] = out[mask][..., ::-1]
    return out


# --- driver --------------------------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainState
    breakdowns: List[obj.LossBreakdown]
    out_dir: Optional[Path]


def _truncate_metrics(path: Path, upto: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line and json.loads(line)["step"] < upto]
    path.write_text("".join(line + "\n" for line in keep), encoding="utf-8")


def train(cfg: RunConfig, dataset: Dataset, out_dir=None, max_steps: Optional[int] = None,
          resume=None, log=None) -> TrainResult:
    """Train on the ``train`` split of ``dataset``.

    ``max_steps`` stops early without changing the schedule, which is always
    laid out for the configured number of epochs. ``resume`` is a checkpoint
    path; its stored config replaces ``cfg``.
    """
    train_ds = dataset.subset("train")
    class_ids = np.unique(train_ds.identities)
    if resume is not None:
        state = load_state(resume)
        cfg = state.config
        if not np.array_equal(state.class_ids, class_ids):
            raise ValueError("checkpoint was trained on a different identity set")
    else:
        cfg.validate()
        state = init_state(cfg, class_ids)
    labels_all = np.searchsorted(class_ids, train_ds.identities)

    steps_per_epoch = len(epoch_batches(train_ds, cfg, 0))
    total = steps_per_epoch * cfg.optim.epochs
    stop = total if max_steps is None else min(total, max_steps)

    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")
        mpath = out / METRICS_FILE
        if resume is not None:
            _truncate_metrics(mpath, state.step)
        else:
            mpath.write_text("", encoding="utf-8")
        metrics = open(mpath, "a", encoding="utf-8")

    breakdowns = []
    try:
        epoch = state.step // steps_per_epoch
        while state.step < stop:
            batches = epoch_batches(train_ds, cfg, epoch)
            for idx in batches[state.step - epoch * steps_per_epoch:]:
                if state.step >= stop:
                    break
                rng = np.random.default_rng([cfg.seed, 104729, state.step])
                images = _flip(train_ds.images[idx], rng, cfg.optim.flip_prob)
                lr = lr_at(state.step, total, steps_per_epoch, cfg)
                step = state.step
                try:
                    bd = train_step(state, images, train_ds.views[idx], labels_all[idx], lr)
                except NanLossError as exc:
                    if out is not None:
                        (out / "nan_dump.json").write_text(exc.breakdown.to_json(exc.step) + "\n")
                    raise
                breakdowns.append(bd)
                if metrics is not None:
                    metrics.write(bd.to_json(step) + "\n")
                    metrics.flush()
                if log is not None:
                    log(step, bd, lr)
                every = cfg.optim.ckpt_every
                if out is not None and every and state.step % every == 0:
                    save_state(state, out / f"ckpt_step{state.step:06d}.txt")
            epoch += 1
    finally:
        if metrics is not None:
            metrics.close()
    if out is not None:
        save_state(state, out / FINAL_CKPT)
    return TrainResult(state, breakdowns, out)
