"""Alternating optimization of the recognition model.

Each iteration takes one plain-SGD step on the seen-path cross-entropy for the
backbone, elaborators, and classifier, then one meta step on the relevance
evaluator: a virtual held-out domain is sampled, the evaluator takes an inner
step on the remaining domains' unseen-path loss, the held-out loss is measured
at the stepped parameters, and the applied update blends both gradients:

    phi' = phi - alpha * d l_mtrain(phi)
    phi  = phi - beta * ((1 - lambda) * d l_mtrain(phi) + lambda * d l_mtest(phi'))

By default the meta-test gradient is taken at phi' (first-order practice);
exact mode differentiates through the inner step.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .errors import CompatibilityError, InputError, UsageError
from .model import CareConfig, CareParams
from .tensor import Tensor

DomainData = Sequence[Sequence[tuple[np.ndarray, int]]]  # per domain: (clip, label)


@dataclass
class Hyperparams:
    """Optimizer settings; rate defaults follow the published training recipe
    (backbone at 0.001, everything else at 0.01, 40 epochs with a 10x cut
    after 30). The meta coefficients have no published values."""

    alpha: float = 0.01
    beta: float = 0.01
    meta_blend: float = 0.5
    lr_backbone: float = 0.001
    lr_other: float = 0.01
    epochs: int = 40
    decay_epoch: int = 30
    decay_factor: float = 0.1
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.meta_blend <= 1.0:
            raise InputError("meta_blend must lie in [0, 1]")
        # zero rates are legal (they make updates exact no-ops in tests)
        for name in ("alpha", "beta", "lr_backbone", "lr_other"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise InputError("epochs must be >= 0 and batch_size >= 1")
        if self.epochs > 0 and not 0 <= self.decay_epoch < self.epochs:
            raise InputError("decay_epoch must satisfy 0 <= decay_epoch < epochs")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


@dataclass(frozen=True)
class MetaSplit:
    mtest_domain: int
    mtrain_domains: tuple[int, ...]


@dataclass
class EpochRecord:
    epoch: int
    base_losses: list[float]
    meta_train_loss: float
    meta_test_loss: float
    lr_backbone: float
    lr_other: float
    wall_time_s: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_json(self) -> str:
        """Canonical JSON; wall time is excluded so equal runs are byte-equal."""
        rows = [{"epoch": r.epoch, "base_losses": r.base_losses,
                 "meta_train_loss": r.meta_train_loss,
                 "meta_test_loss": r.meta_test_loss,
                 "lr_backbone": r.lr_backbone, "lr_other": r.lr_other}
                for r in self.records]
        return json.dumps(rows, sort_keys=True, indent=2) + "\n"


def lr_schedule(hp: Hyperparams, epoch: int) -> tuple[float, float]:
    """Initial rates before ``decay_epoch``, decayed by ``decay_factor`` after."""
    if epoch < 0 or (hp.epochs > 0 and epoch >= hp.epochs):
        raise InputError(f"epoch {epoch} outside schedule of {hp.epochs} epochs")
    if epoch < hp.decay_epoch:
        return hp.lr_backbone, hp.lr_other
    return hp.lr_backbone * hp.decay_factor, hp.lr_other * hp.decay_factor


def _batch_loss(params: CareParams, batch, forward_batch: Callable) -> Tensor:
    """Mean cross-entropy of one batch through a batched forward."""
    if not batch:
        raise InputError("empty batch")
    xs = Tensor(np.stack([clip for clip, _ in batch]))
    logits = forward_batch(params, xs)
    m = params.config.num_classes
    total = None
    for i, (_, label) in enumerate(batch):
        row = T.reshape(T.slice_(logits, 0, i, i + 1), (m,))
        loss = T.cross_entropy_logits(row, int(label))
        total = loss if total is None else T.add(total, loss)
    return T.divide(total, len(batch))


def step_base(params: CareParams, batches: Sequence, hp: Hyperparams, epoch: int,
              ablation: str = M.FULL) -> tuple[CareParams, list[float]]:
    """One SGD step on the summed per-domain seen-path losses.

    Updates the backbone at the backbone rate and elaborators/classifier at
    the other rate; relevance parameters are untouched by construction.
    """
    if len(batches) != params.config.num_domains:
        raise InputError(f"need one batch per domain, got {len(batches)} "
                         f"for K={params.config.num_domains}")
    losses: list[float] = []
    total = None
    for k, batch in enumerate(batches):
        dom = _batch_loss(params, batch,
                          lambda p, xs, k=k: M.forward_seen_batch(p, xs, k, ablation))
        losses.append(dom.item())
        total = dom if total is None else T.add(total, dom)
    names = params.base_names()
    gs = T.grads(total, [params[n] for n in names])
    lrb, lro = lr_schedule(hp, epoch)
    updates = {}
    for n, g in zip(names, gs):
        lr = lrb if n.startswith("backbone.") else lro
        updates[n] = Tensor(params[n].values - lr * g.values, requires_grad=True)
    return params.replace(updates), losses


def sample_meta_split(k_domains: int, rng: np.random.Generator) -> MetaSplit:
    """Hold one domain out uniformly at random as the virtual unseen domain."""
    if k_domains < 2:
        raise UsageError("meta split needs at least 2 domains")
    mtest = int(rng.integers(k_domains))
    return MetaSplit(mtest, tuple(k for k in range(k_domains) if k != mtest))


@dataclass
class MldgStep:
    new_values: list[np.ndarray]
    loss_mtrain: float
    loss_mtest: float
    grad_mtrain: list[np.ndarray]
    grad_mtest: list[np.ndarray] | None  # None when the blend skipped it


def mldg_outer_step(phi: list[Tensor],
                    loss_mtrain: Callable[[list[Tensor]], Tensor],
                    loss_mtest: Callable[[list[Tensor]], Tensor],
                    alpha: float, beta: float, lam: float,
                    second_order: bool = False) -> MldgStep:
    """One meta update over an arbitrary parameter list.

    Exact endpoints short-circuit so lam=0 is bit-identical to SGD on the
    meta-train loss and (alpha=0, lam=1) to SGD on the meta-test loss. In
    second-order mode the inner step stays on the graph, so the meta-test
    gradient includes the curvature term.
    """
    track_inner = second_order and alpha != 0.0
    l_tr = loss_mtrain(phi)
    g_tr = T.grads(l_tr, phi, create_graph=track_inner)
    if alpha == 0.0:
        phi_prime = phi
    elif track_inner:
        phi_prime = [T.add(p, T.scale(g, -alpha)) for p, g in zip(phi, g_tr)]
    else:
        phi_prime = [Tensor(p.values - alpha * g.values, requires_grad=True)
                     for p, g in zip(phi, g_tr)]
    l_te = loss_mtest(phi_prime)

    g_te = None
    if lam == 0.0:
        blended = [g.values for g in g_tr]
    else:
        wrt = phi if track_inner else phi_prime
        g_te = [g.values for g in T.grads(l_te, wrt)]
        if lam == 1.0:
            blended = g_te
        else:
            blended = [(1.0 - lam) * a.values + lam * b
                       for a, b in zip(g_tr, g_te)]
    new_values = [p.values - beta * b for p, b in zip(phi, blended)]
    return MldgStep(new_values, l_tr.item(), l_te.item(),
                    [g.values for g in g_tr], g_te)


def meta_step_R(params: CareParams, split: MetaSplit, batches: Sequence,
                hp: Hyperparams,
                ablation: str = M.FULL) -> tuple[CareParams, float, float]:
    """One meta update of the relevance evaluator.

    Meta-train domains are deliberately pushed through the unseen path (their
    own specific elaborators still act as frozen experts); everything outside
    the relevance evaluator is detached.
    """
    cfg = params.config
    frozen = params.detach_except("relevance.")
    names = frozen.relevance_names()
    phi = [frozen[n] for n in names]
    if any(not p.requires_grad for p in phi) or \
            any(frozen[n].requires_grad for n in frozen.base_names()):
        raise UsageError("meta step requires exactly the relevance parameters "
                         "to be trainable")
    for k in (*split.mtrain_domains, split.mtest_domain):
        if k >= len(batches) or not batches[k]:
            raise InputError(f"meta split needs a batch for domain {k}")

    sizes = {len(batches[k]) for k in (*split.mtrain_domains, split.mtest_domain)}
    uniform = len(sizes) == 1  # then the flat mean equals the mean of means

    def loss_over(domains):
        def fn(tensors):
            p = frozen.replace(dict(zip(names, tensors)))
            if uniform:
                merged = [sample for k in domains for sample in batches[k]]
                return _batch_loss(
                    p, merged, lambda q, xs: M.forward_unseen_batch(q, xs, ablation))
            total = None
            for k in domains:
                dom = _batch_loss(p, batches[k],
                                  lambda q, xs: M.forward_unseen_batch(q, xs, ablation))
                total = dom if total is None else T.add(total, dom)
            return T.divide(total, len(domains))
        return fn

    res = mldg_outer_step(phi, loss_over(split.mtrain_domains),
                          loss_over((split.mtest_domain,)),
                          hp.alpha, hp.beta, hp.meta_blend,
                          second_order=cfg.second_order_meta)
    updates = {n: Tensor(v, requires_grad=True)
               for n, v in zip(names, res.new_values)}
    return params.replace(updates), res.loss_mtrain, res.loss_mtest


def initial_params(config: CareConfig, hp: Hyperparams) -> CareParams:
    """The parameters a run with these hyperparameters starts from."""
    init_ss = np.random.SeedSequence(hp.seed).spawn(2)[0]
    return CareParams.init(config, seed=init_ss)


def train(config: CareConfig, hp: Hyperparams, data: DomainData,
          ablation: str = M.FULL,
          checkpoint_path: str | None = None) -> tuple[CareParams, TrainLog]:
    """Full training run; everything (init, data order, splits) is a pure
    function of ``hp.seed``. Checkpoints, when a path is given, are written
    once the decay kicks in and again at completion."""
    k_domains = len(data)
    if k_domains != config.num_domains:
        raise CompatibilityError(f"dataset has {k_domains} domains, "
                                 f"config expects {config.num_domains}")
    if k_domains < 2:
        raise UsageError("training needs at least 2 seen domains for meta splits")
    for k, dom in enumerate(data):
        if not dom:
            raise InputError(f"domain {k} has no samples")
    iters = min(len(dom) for dom in data) // hp.batch_size
    if hp.epochs > 0 and iters < 1:
        raise InputError(f"batch_size {hp.batch_size} exceeds the smallest "
                         f"domain ({min(len(d) for d in data)} samples)")

    params = initial_params(config, hp)
    rng = np.random.default_rng(np.random.SeedSequence(hp.seed).spawn(2)[1])
    log = TrainLog()
    for epoch in range(hp.epochs):
        started = time.perf_counter()
        orders = [rng.permutation(len(dom)) for dom in data]
        base_sums = np.zeros(k_domains)
        meta_tr = meta_te = 0.0
        for it in range(iters):
            batches = [[data[k][i] for i in orders[k][it * hp.batch_size:
                                                      (it + 1) * hp.batch_size]]
                       for k in range(k_domains)]
            params, losses = step_base(params, batches, hp, epoch, ablation)
            split = sample_meta_split(k_domains, rng)
            params, l_tr, l_te = meta_step_R(params, split, batches, hp, ablation)
            base_sums += losses
            meta_tr += l_tr
            meta_te += l_te
        lrb, lro = lr_schedule(hp, epoch)
        log.records.append(EpochRecord(
            epoch=epoch, base_losses=list(base_sums / iters),
            meta_train_loss=meta_tr / iters, meta_test_loss=meta_te / iters,
            lr_backbone=lrb, lr_other=lro,
            wall_time_s=time.perf_counter() - started))
        if checkpoint_path and epoch + 1 == hp.decay_epoch:
            save_checkpoint(checkpoint_path, params, hp, epoch + 1)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, hp, hp.epochs)
    return params, log


# --- checkpoints: parameter blob plus hyperparameters and the epoch index ----

_CKPT_MAGIC = b"CACK"
_CKPT_VERSION = 1


def checkpoint_to_bytes(params: CareParams, hp: Hyperparams, epoch: int) -> bytes:
    hp_json = json.dumps(hp.to_dict(), sort_keys=True).encode()
    blob = M.params_to_bytes(params)
    return (_CKPT_MAGIC + struct.pack("<III", _CKPT_VERSION, len(hp_json), epoch)
            + hp_json + blob)


def checkpoint_from_bytes(data: bytes) -> tuple[CareParams, Hyperparams, int]:
    if data[:4] != _CKPT_MAGIC:
        raise CompatibilityError("not a checkpoint file (bad magic)")
    version, hp_len, epoch = struct.unpack_from("<III", data, 4)
    if version != _CKPT_VERSION:
        raise CompatibilityError(f"unsupported checkpoint version {version}")
    off = 16
    hp = Hyperparams.from_dict(json.loads(data[off:off + hp_len].decode()))
    params = M.params_from_bytes(data[off + hp_len:])
    return params, hp, epoch


def save_checkpoint(path, params: CareParams, hp: Hyperparams, epoch: int) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(params, hp, epoch))


def load_checkpoint(path) -> tuple[CareParams, Hyperparams, int]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
