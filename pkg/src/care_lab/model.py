"""The collaborative recognition network.

A shared backbone turns a clip into a base feature; a general elaborator and
one specific elaborator per seen domain refine it; a linear classifier reads
the concatenated pair. For inputs from domains never seen in training, a
relevance evaluator scores the input against every seen domain and the
specific feature is approximated as the 1/K-scaled, relevance-weighted sum of
all K specific features. Weights are per-spatial-position maps by default so
different regions can borrow from different domains; a scalar mode exists for
ablation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from math import ceil, sqrt

import numpy as np

from . import tensor as T
from .errors import CompatibilityError, DimensionError, InputError, UsageError
from .tensor import Tensor

GENERAL = "general"
SPATIAL = "spatial"
SCALAR = "scalar"
_KERNEL = 3  # backbone / relevance conv kernels are 3x3, padding 1


@dataclass(frozen=True)
class CareConfig:
    """Shape and mode configuration; the parameter set is a pure function of it.

    ``num_domains`` is the count K of seen domains, ``num_classes`` the count M
    of shared action classes. Shapes: ``input_shape`` (channels, frames, h, w),
    ``base_shape`` (ch', t', h', w') out of the backbone, ``elab_shape``
    (ch'', h'', w'') out of each elaborator.
    """

    num_domains: int = 4
    num_classes: int = 6
    input_shape: tuple[int, int, int, int] = (3, 8, 32, 32)
    base_shape: tuple[int, int, int, int] = (16, 4, 8, 8)
    elab_shape: tuple[int, int, int] = (4, 4, 4)
    attention_heads: int = 2
    weight_mode: str = SPATIAL
    second_order_meta: bool = False
    backbone_hidden: int = 8
    relevance_channels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "base_shape", tuple(int(v) for v in self.base_shape))
        object.__setattr__(self, "elab_shape", tuple(int(v) for v in self.elab_shape))
        if self.num_domains < 1:
            raise InputError("num_domains must be at least 1")
        if self.num_classes < 2:
            raise InputError("num_classes must be at least 2")
        for name in ("input_shape", "base_shape", "elab_shape"):
            if any(v < 1 for v in getattr(self, name)):
                raise InputError(f"{name} extents must be positive")
        if len(self.input_shape) != 4 or len(self.base_shape) != 4 or len(self.elab_shape) != 3:
            raise DimensionError("input/base shapes are rank 4, elab shape rank 3")
        c, t, h, w = self.input_shape
        cb, tb, hb, wb = self.base_shape
        if tb > t or hb > h or wb > w:
            raise InputError(f"base_shape {self.base_shape} must downsample "
                             f"input_shape {self.input_shape}")
        if cb % self.attention_heads != 0:
            raise InputError(f"base channels {cb} not divisible by "
                             f"{self.attention_heads} attention heads")
        ce, he, we = self.elab_shape
        for n_in, n_out, tag in ((hb, he, "height"), (wb, we, "width")):
            s = self.elab_stride((n_in, n_out))
            if (n_in - 1) // s + 1 != n_out:
                raise InputError(
                    f"elaborator {tag} {n_out} unreachable from {n_in} by strided 1x1 map")
        if self.weight_mode not in (SPATIAL, SCALAR):
            raise InputError(f"weight_mode must be '{SPATIAL}' or '{SCALAR}'")
        if self.backbone_hidden < 1 or self.relevance_channels < 1:
            raise InputError("hidden widths must be positive")

    @staticmethod
    def elab_stride(pair: tuple[int, int]) -> int:
        n_in, n_out = pair
        return max(1, ceil(n_in / n_out))

    @property
    def elab_dim(self) -> int:
        return int(np.prod(self.elab_shape))

    @property
    def relevance_out(self) -> int:
        return self.elab_shape[1] * self.elab_shape[2] if self.weight_mode == SPATIAL else 1

    @property
    def relevance_in(self) -> int:
        _, _, hb, wb = self.base_shape
        return self.relevance_channels * hb * wb + self.elab_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CareConfig":
        return cls(**d)


def _elab_prefixes(config: CareConfig) -> list[str]:
    return ["elab.gen"] + [f"elab.s{k}" for k in range(config.num_domains)]


def param_specs(config: CareConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Ordered (name, shape, fan_in) for every trainable array."""
    c, t, h, w = config.input_shape
    cb, tb, hb, wb = config.base_shape
    ce, he, we = config.elab_shape
    hid, rc = config.backbone_hidden, config.relevance_channels
    k2 = _KERNEL * _KERNEL
    specs: list[tuple[str, tuple[int, ...], int]] = [
        ("backbone.conv1.w", (hid, c, _KERNEL, _KERNEL), c * k2),
        ("backbone.conv1.b", (hid,), c * k2),
        ("backbone.conv2.w", (cb, hid, _KERNEL, _KERNEL), hid * k2),
        ("backbone.conv2.b", (cb,), hid * k2),
    ]
    for prefix in _elab_prefixes(config):
        for blk in range(2):
            for mat in ("wq", "wk", "wv", "wo"):
                specs.append((f"{prefix}.blk{blk}.{mat}", (cb, cb), cb))
            for vec in ("bq", "bk", "bv", "bo"):
                specs.append((f"{prefix}.blk{blk}.{vec}", (cb,), cb))
        specs.append((f"{prefix}.proj.w", (ce, cb, 1, 1), cb))
        specs.append((f"{prefix}.proj.b", (ce,), cb))
    clf_in = 2 * config.elab_dim
    specs.append(("classifier.w", (clf_in, config.num_classes), clf_in))
    specs.append(("classifier.b", (config.num_classes,), clf_in))
    specs.append(("relevance.conv1.w", (rc, cb, _KERNEL, _KERNEL), cb * k2))
    specs.append(("relevance.conv1.b", (rc,), cb * k2))
    specs.append(("relevance.conv2.w", (rc, rc, _KERNEL, _KERNEL), rc * k2))
    specs.append(("relevance.conv2.b", (rc,), rc * k2))
    for k in range(config.num_domains):
        specs.append((f"relevance.head{k}.w", (config.relevance_in, config.relevance_out),
                      config.relevance_in))
        specs.append((f"relevance.head{k}.b", (config.relevance_out,), config.relevance_in))
    return specs


class CareParams:
    """Named parameter tensors for one model instance.

    Exactly ``num_domains`` specific elaborators and relevance scoring heads
    exist; names under the ``relevance.`` prefix form the meta-trained subset.
    """

    def __init__(self, config: CareConfig, tensors: dict[str, Tensor]):
        expected = {name: shape for name, shape, _ in param_specs(config)}
        if set(tensors) != set(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise CompatibilityError(f"parameter names mismatch: missing={sorted(missing)} "
                                     f"extra={sorted(extra)}")
        for name, tens in tensors.items():
            if tens.shape != expected[name]:
                raise CompatibilityError(
                    f"{name}: shape {tens.shape}, config requires {expected[name]}")
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: CareConfig, seed: int) -> "CareParams":
        """Seeded uniform init in +-1/sqrt(fan_in) per layer."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape, fan_in in param_specs(config):
            bound = 1.0 / sqrt(fan_in)
            tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape),
                                   requires_grad=True)
        return cls(config, tensors)

    @classmethod
    def zeros(cls, config: CareConfig) -> "CareParams":
        return cls(config, {name: T.zeros(shape, requires_grad=True)
                            for name, shape, _ in param_specs(config)})

    def names(self) -> list[str]:
        return [name for name, _, _ in param_specs(self.config)]

    def relevance_names(self) -> list[str]:
        return [n for n in self.names() if n.startswith("relevance.")]

    def base_names(self) -> list[str]:
        return [n for n in self.names() if not n.startswith("relevance.")]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def replace(self, updates: dict[str, Tensor]) -> "CareParams":
        merged = dict(self.tensors)
        merged.update(updates)
        return CareParams(self.config, merged)

    def copy(self) -> "CareParams":
        return CareParams(self.config, {n: Tensor(t.values.copy(), requires_grad=True)
                                        for n, t in self.tensors.items()})

    def detach_except(self, prefix: str) -> "CareParams":
        """View with only ``prefix``-named tensors trainable; the rest detached."""
        out = {}
        for n, t in self.tensors.items():
            out[n] = t if n.startswith(prefix) else t.detach()
        return CareParams(self.config, out)

    def num_values(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].values.ravel() for n in self.names()])


# --- persistence: version tag, config header, then a flat float64 blob -------

_PARAMS_MAGIC = b"CARP"
_PARAMS_VERSION = 1


def params_to_bytes(params: CareParams) -> bytes:
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    blob = params.flat().astype("<f8").tobytes()
    head = _PARAMS_MAGIC + struct.pack("<II", _PARAMS_VERSION, len(cfg))
    return head + cfg + struct.pack("<Q", params.num_values()) + blob


def params_from_bytes(data: bytes) -> CareParams:
    if data[:4] != _PARAMS_MAGIC:
        raise CompatibilityError("not a parameter blob (bad magic)")
    version, cfg_len = struct.unpack_from("<II", data, 4)
    if version != _PARAMS_VERSION:
        raise CompatibilityError(f"unsupported parameter blob version {version}")
    off = 12
    config = CareConfig.from_dict(json.loads(data[off:off + cfg_len].decode()))
    off += cfg_len
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64)
    tensors = {}
    pos = 0
    for name, shape, _ in param_specs(config):
        n = int(np.prod(shape))
        tensors[name] = Tensor(flat[pos:pos + n].reshape(shape), requires_grad=True)
        pos += n
    if pos != count:
        raise CompatibilityError(f"blob holds {count} values, config needs {pos}")
    return CareParams(config, tensors)


@dataclass
class RelevanceWeights:
    """Per-domain relevance scores in [0, 1]: a (K, h'', w'') map stack in
    spatial mode or a (K,) vector in scalar mode."""

    values: Tensor
    mode: str


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Column-stochastic averaging matrix for adaptive mean pooling."""
    m = np.zeros((n_in, n_out))
    for j in range(n_out):
        start = (j * n_in) // n_out
        end = -(-(j + 1) * n_in // n_out)  # ceil
        m[start:end, j] = 1.0 / (end - start)
    return m


def _bias(vec: Tensor, rank: int) -> Tensor:
    """Reshape a (c,) bias for broadcasting against (..., c, h, w)."""
    c = vec.shape[0]
    return T.reshape(vec, (1,) * (rank - 3) + (c, 1, 1))


def extract_base(params: CareParams, x: Tensor) -> Tensor:
    """Backbone: per-frame 3x3 convs with adaptive mean pooling down to
    ``base_shape``. Deterministic for fixed parameters and input."""
    cfg = params.config
    x = T.as_tensor(x)
    if x.shape != cfg.input_shape:
        raise DimensionError(f"input shape {x.shape}, config expects {cfg.input_shape}")
    _, t, h, w = cfg.input_shape
    cb, tb, hb, wb = cfg.base_shape
    frames = T.permute(x, (1, 0, 2, 3))
    z = T.relu(T.add(T.conv2d_frames(frames, params["backbone.conv1.w"], 1, 1),
                     _bias(params["backbone.conv1.b"], 4)))
    z = T.axis_contract(z, _pool_matrix(h, hb), axis=2)
    z = T.axis_contract(z, _pool_matrix(w, wb), axis=3)
    z = T.relu(T.add(T.conv2d_frames(z, params["backbone.conv2.w"], 1, 1),
                     _bias(params["backbone.conv2.b"], 4)))
    z = T.permute(z, (1, 0, 2, 3))
    return T.axis_contract(z, _pool_matrix(t, tb), axis=1)


def _attention_block(params: CareParams, prefix: str, tokens: Tensor) -> Tensor:
    """One two-head self-attention layer with a residual connection."""
    heads = params.config.attention_heads
    n, d = tokens.shape
    dh = d // heads
    q = T.add(T.matmul(tokens, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = T.add(T.matmul(tokens, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = T.add(T.matmul(tokens, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    mixed = []
    for i in range(heads):
        qi = T.slice_(q, 1, i * dh, (i + 1) * dh)
        ki = T.slice_(k, 1, i * dh, (i + 1) * dh)
        vi = T.slice_(v, 1, i * dh, (i + 1) * dh)
        attn = T.softmax(T.scale(T.matmul(qi, T.transpose(ki)), 1.0 / sqrt(dh)), axis=1)
        mixed.append(T.matmul(attn, vi))
    out = T.add(T.matmul(T.concat(mixed, axis=1), params[f"{prefix}.wo"]),
                params[f"{prefix}.bo"])
    return T.add(tokens, out)


def elaborate(params: CareParams, which, f_base: Tensor) -> Tensor:
    """Refine a base feature with one elaborator.

    ``which`` is ``"general"`` or ``("specific", k)``. Frames are mean-pooled
    away first, two attention layers mix the spatial tokens, and a strided
    1x1 projection brings the map to ``elab_shape``.
    """
    cfg = params.config
    f_base = T.as_tensor(f_base)
    if f_base.shape != cfg.base_shape:
        raise DimensionError(f"base feature {f_base.shape}, config expects {cfg.base_shape}")
    if which == GENERAL:
        prefix = "elab.gen"
    else:
        tag, k = which
        if tag != "specific" or not 0 <= int(k) < cfg.num_domains:
            raise InputError(f"unknown elaborator {which!r} for K={cfg.num_domains}")
        prefix = f"elab.s{int(k)}"
    cb, _, hb, wb = cfg.base_shape
    pooled = T.reduce_mean(f_base, axes=(1,))
    tokens = T.transpose(T.reshape(pooled, (cb, hb * wb)))
    for blk in range(2):
        tokens = _attention_block(params, f"{prefix}.blk{blk}", tokens)
    feat = T.reshape(T.transpose(tokens), (cb, hb, wb))
    stride = (cfg.elab_stride((hb, cfg.elab_shape[1])),
              cfg.elab_stride((wb, cfg.elab_shape[2])))
    return T.add(T.conv2d(feat, params[f"{prefix}.proj.w"], stride=stride, padding=0),
                 _bias(params[f"{prefix}.proj.b"], 3))


def classify(params: CareParams, f_gen: Tensor, f_spec: Tensor) -> Tensor:
    """Flatten, concatenate (general first), and map linearly to class logits."""
    cfg = params.config
    for name, f in (("general", f_gen), ("specific", f_spec)):
        if T.as_tensor(f).shape != cfg.elab_shape:
            raise DimensionError(f"{name} feature {T.as_tensor(f).shape}, "
                                 f"config expects {cfg.elab_shape}")
    flat = T.concat([T.reshape(f_gen, (1, cfg.elab_dim)),
                     T.reshape(f_spec, (1, cfg.elab_dim))], axis=1)
    logits = T.add(T.matmul(flat, params["classifier.w"]), params["classifier.b"])
    return T.reshape(logits, (cfg.num_classes,))


def evaluate_relevance(params: CareParams, f_base: Tensor,
                       all_specific: list[Tensor]) -> RelevanceWeights:
    """Score the input against every seen domain.

    The base feature passes through two conv layers; for each domain the
    transformed base is flattened, concatenated with that domain's flattened
    specific feature, and a per-domain linear head emits raw scores which are
    squashed into [0, 1] by a sigmoid.
    """
    cfg = params.config
    if len(all_specific) != cfg.num_domains:
        raise InputError(f"got {len(all_specific)} specific features, "
                         f"expected K={cfg.num_domains}")
    rc = cfg.relevance_channels
    _, _, hb, wb = cfg.base_shape
    pooled = T.reduce_mean(T.as_tensor(f_base), axes=(1,))
    z = T.relu(T.add(T.conv2d(pooled, params["relevance.conv1.w"], 1, 1),
                     _bias(params["relevance.conv1.b"], 3)))
    z = T.relu(T.add(T.conv2d(z, params["relevance.conv2.w"], 1, 1),
                     _bias(params["relevance.conv2.b"], 3)))
    zflat = T.reshape(z, (1, rc * hb * wb))
    rows = []
    for k, f_spec in enumerate(all_specific):
        cat = T.concat([zflat, T.reshape(f_spec, (1, cfg.elab_dim))], axis=1)
        raw = T.add(T.matmul(cat, params[f"relevance.head{k}.w"]),
                    params[f"relevance.head{k}.b"])
        rows.append(T.sigmoid(raw))
    if cfg.weight_mode == SPATIAL:
        _, he, we = cfg.elab_shape
        w = T.concat([T.reshape(r, (1, he, we)) for r in rows], axis=0)
    else:
        w = T.reshape(T.concat(rows, axis=1), (cfg.num_domains,))
    return RelevanceWeights(values=w, mode=cfg.weight_mode)


def approximate_specific(weights: RelevanceWeights,
                         all_specific: list[Tensor]) -> Tensor:
    """Weighted 1/K-average of the K specific features.

    Spatial mode multiplies each (h'', w'') weight map into its feature across
    all channels; scalar mode scales whole features. Linear in the weights.
    """
    k_count = len(all_specific)
    if k_count == 0:
        raise InputError("need at least one specific feature")
    w = weights.values
    if weights.mode == SPATIAL:
        if len(w.shape) != 3 or w.shape[0] != k_count:
            raise UsageError(f"spatial weights {w.shape} do not match K={k_count} "
                             f"features of shape {all_specific[0].shape}")
    elif weights.mode == SCALAR:
        if w.shape != (k_count,):
            raise UsageError(f"scalar weights {w.shape} do not match K={k_count}")
    else:
        raise UsageError(f"unknown weight mode {weights.mode!r}")
    acc = None
    for k, f_spec in enumerate(all_specific):
        if weights.mode == SPATIAL:
            wk = T.reshape(T.slice_(w, 0, k, k + 1), w.shape[1:])
        else:
            wk = T.reshape(T.slice_(w, 0, k, k + 1), ())
        term = T.mul(f_spec, wk)
        acc = term if acc is None else T.add(acc, term)
    return T.divide(acc, k_count)


NO_SPECIFIC = "no_specific"
NO_GENERAL = "no_general"
SCALAR_WEIGHTS = "scalar_weights"
FULL = "full"
ABLATION_MODES = (NO_SPECIFIC, NO_GENERAL, SCALAR_WEIGHTS)


def forward_seen(params: CareParams, x: Tensor, k: int, ablation: str = FULL) -> Tensor:
    """Training-path logits for a sample of seen domain ``k``: general plus
    that domain's own specific feature. The base feature is computed once."""
    cfg = params.config
    if not 0 <= int(k) < cfg.num_domains:
        raise InputError(f"domain index {k} out of range for K={cfg.num_domains}")
    f_base = extract_base(params, x)
    zero = T.zeros(cfg.elab_shape)
    if ablation == NO_SPECIFIC:
        return classify(params, elaborate(params, GENERAL, f_base), zero)
    if ablation == NO_GENERAL:
        return classify(params, zero, elaborate(params, ("specific", int(k)), f_base))
    return classify(params, elaborate(params, GENERAL, f_base),
                    elaborate(params, ("specific", int(k)), f_base))


def forward_unseen(params: CareParams, x: Tensor, ablation: str = FULL) -> Tensor:
    """Test-path logits for a sample of an unknown domain: the specific
    feature is approximated from all K seen-domain experts via Eq-style
    relevance weighting."""
    cfg = params.config
    f_base = extract_base(params, x)
    zero = T.zeros(cfg.elab_shape)
    if ablation == NO_SPECIFIC:
        return classify(params, elaborate(params, GENERAL, f_base), zero)
    all_specific = [elaborate(params, ("specific", k), f_base)
                    for k in range(cfg.num_domains)]
    weights = evaluate_relevance(params, f_base, all_specific)
    f_hat = approximate_specific(weights, all_specific)
    if ablation == NO_GENERAL:
        return classify(params, zero, f_hat)
    return classify(params, elaborate(params, GENERAL, f_base), f_hat)


def ablated_forward(params: CareParams, x: Tensor, mode: str) -> Tensor:
    """Unseen-path logits under one of the ablation variants."""
    if mode == NO_SPECIFIC or mode == NO_GENERAL:
        return forward_unseen(params, x, ablation=mode)
    if mode == SCALAR_WEIGHTS:
        if params.config.weight_mode != SCALAR:
            raise UsageError("scalar_weights ablation needs params built with "
                             "weight_mode='scalar'")
        return forward_unseen(params, x)
    raise InputError(f"unknown ablation mode {mode!r}")


def tiny_config() -> CareConfig:
    """Smallest config that still exercises every code path; used by the
    finite-difference suites."""
    return CareConfig(num_domains=3, num_classes=4,
                      input_shape=(2, 2, 6, 6), base_shape=(2, 2, 3, 3),
                      elab_shape=(2, 3, 3), attention_heads=2,
                      backbone_hidden=2, relevance_channels=2)


# ---------------------------------------------------------------------------
# batched forward paths
#
# Same arithmetic as the per-sample operations above (verified against them),
# but a whole batch shares one set of graph nodes, which is what makes
# training affordable: the per-sample graphs are interpreter-bound, not
# flop-bound.
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _select_matrix(n_in: int, stride: int) -> np.ndarray:
    n_out = (n_in - 1) // stride + 1
    m = np.zeros((n_in, n_out))
    for j in range(n_out):
        m[j * stride, j] = 1.0
    return m


def _rank_bias(vec: Tensor, rank: int, axis: int) -> Tensor:
    shape = [1] * rank
    shape[axis] = vec.shape[0]
    return T.reshape(vec, shape)


def _backbone_batch(params: CareParams, xs: Tensor) -> Tensor:
    """(B, c, t, h, w) -> (B, ch', t', h', w')."""
    cfg = params.config
    c, t, h, w = cfg.input_shape
    cb, tb, hb, wb = cfg.base_shape
    batch = xs.shape[0]
    frames = T.reshape(T.permute(xs, (0, 2, 1, 3, 4)), (batch * t, c, h, w))
    z = T.relu(T.add(T.conv2d_frames(frames, params["backbone.conv1.w"], 1, 1),
                     _bias(params["backbone.conv1.b"], 4)))
    z = T.axis_contract(z, _pool_matrix(h, hb), axis=2)
    z = T.axis_contract(z, _pool_matrix(w, wb), axis=3)
    z = T.relu(T.add(T.conv2d_frames(z, params["backbone.conv2.w"], 1, 1),
                     _bias(params["backbone.conv2.b"], 4)))
    z = T.reshape(z, (batch, t, cb, hb, wb))
    z = T.axis_contract(z, _pool_matrix(t, tb), axis=1)
    return T.permute(z, (0, 2, 1, 3, 4))


def _attention_block_batch(params: CareParams, prefix: str, tokens: Tensor) -> Tensor:
    heads = params.config.attention_heads
    _, n, d = tokens.shape
    dh = d // heads
    q = T.add(T.bmatmul(tokens, params[f"{prefix}.wq"]),
              _rank_bias(params[f"{prefix}.bq"], 3, 2))
    k = T.add(T.bmatmul(tokens, params[f"{prefix}.wk"]),
              _rank_bias(params[f"{prefix}.bk"], 3, 2))
    v = T.add(T.bmatmul(tokens, params[f"{prefix}.wv"]),
              _rank_bias(params[f"{prefix}.bv"], 3, 2))
    mixed = []
    for i in range(heads):
        qi = T.slice_(q, 2, i * dh, (i + 1) * dh)
        ki = T.slice_(k, 2, i * dh, (i + 1) * dh)
        vi = T.slice_(v, 2, i * dh, (i + 1) * dh)
        attn = T.softmax(T.scale(T.bmm(qi, T.permute(ki, (0, 2, 1))),
                                 1.0 / sqrt(dh)), axis=2)
        mixed.append(T.bmm(attn, vi))
    out = T.add(T.bmatmul(T.concat(mixed, axis=2), params[f"{prefix}.wo"]),
                _rank_bias(params[f"{prefix}.bo"], 3, 2))
    return T.add(tokens, out)


def _elaborate_batch(params: CareParams, which, base: Tensor) -> Tensor:
    """(B, ch', t', h', w') -> (B, ch'', h'', w'')."""
    cfg = params.config
    prefix = "elab.gen" if which == GENERAL else f"elab.s{int(which[1])}"
    cb, _, hb, wb = cfg.base_shape
    ce, he, we = cfg.elab_shape
    batch = base.shape[0]
    pooled = T.reduce_mean(base, axes=(2,))
    tokens = T.permute(T.reshape(pooled, (batch, cb, hb * wb)), (0, 2, 1))
    for blk in range(2):
        tokens = _attention_block_batch(params, f"{prefix}.blk{blk}", tokens)
    feat = T.reshape(T.permute(tokens, (0, 2, 1)), (batch, cb, hb, wb))
    feat = T.axis_contract(feat, _select_matrix(hb, cfg.elab_stride((hb, he))), axis=2)
    feat = T.axis_contract(feat, _select_matrix(wb, cfg.elab_stride((wb, we))), axis=3)
    rows = T.permute(T.reshape(feat, (batch, cb, he * we)), (0, 2, 1))
    w2d = T.transpose(T.reshape(params[f"{prefix}.proj.w"], (ce, cb)))
    proj = T.reshape(T.permute(T.bmatmul(rows, w2d), (0, 2, 1)), (batch, ce, he, we))
    return T.add(proj, _rank_bias(params[f"{prefix}.proj.b"], 4, 1))


def _classify_batch(params: CareParams, f_gen: Tensor, f_spec: Tensor) -> Tensor:
    cfg = params.config
    batch = f_gen.shape[0]
    flat = T.concat([T.reshape(f_gen, (batch, cfg.elab_dim)),
                     T.reshape(f_spec, (batch, cfg.elab_dim))], axis=1)
    return T.add(T.matmul(flat, params["classifier.w"]),
                 _rank_bias(params["classifier.b"], 2, 1))


def _relevance_batch(params: CareParams, base: Tensor,
                     all_specific: list[Tensor]) -> Tensor:
    cfg = params.config
    rc = cfg.relevance_channels
    _, _, hb, wb = cfg.base_shape
    batch = base.shape[0]
    pooled = T.reduce_mean(base, axes=(2,))
    z = T.relu(T.add(T.conv2d_frames(pooled, params["relevance.conv1.w"], 1, 1),
                     _bias(params["relevance.conv1.b"], 4)))
    z = T.relu(T.add(T.conv2d_frames(z, params["relevance.conv2.w"], 1, 1),
                     _bias(params["relevance.conv2.b"], 4)))
    zflat = T.reshape(z, (batch, rc * hb * wb))
    rows = []
    for k, f_spec in enumerate(all_specific):
        cat = T.concat([zflat, T.reshape(f_spec, (batch, cfg.elab_dim))], axis=1)
        raw = T.add(T.matmul(cat, params[f"relevance.head{k}.w"]),
                    _rank_bias(params[f"relevance.head{k}.b"], 2, 1))
        rows.append(T.sigmoid(raw))
    if cfg.weight_mode == SPATIAL:
        _, he, we = cfg.elab_shape
        return T.concat([T.reshape(r, (batch, 1, he, we)) for r in rows], axis=1)
    return T.concat([T.reshape(r, (batch, 1)) for r in rows], axis=1)


def _approximate_batch(cfg: CareConfig, weights: Tensor,
                       all_specific: list[Tensor]) -> Tensor:
    k_count = len(all_specific)
    batch = all_specific[0].shape[0]
    acc = None
    for k, f_spec in enumerate(all_specific):
        if cfg.weight_mode == SPATIAL:
            wk = T.slice_(weights, 1, k, k + 1)          # (B, 1, h'', w'')
        else:
            wk = T.reshape(T.slice_(weights, 1, k, k + 1), (batch, 1, 1, 1))
        term = T.mul(f_spec, wk)
        acc = term if acc is None else T.add(acc, term)
    return T.divide(acc, k_count)


def forward_seen_batch(params: CareParams, xs: Tensor, k: int,
                       ablation: str = FULL) -> Tensor:
    """Batched training-path logits: (B, c, t, h, w) -> (B, M)."""
    cfg = params.config
    xs = T.as_tensor(xs)
    if xs.values.ndim != 5 or xs.shape[1:] != cfg.input_shape:
        raise DimensionError(f"batch shape {xs.shape}, config expects "
                             f"(B,) + {cfg.input_shape}")
    if not 0 <= int(k) < cfg.num_domains:
        raise InputError(f"domain index {k} out of range for K={cfg.num_domains}")
    base = _backbone_batch(params, xs)
    zero = T.zeros((xs.shape[0],) + cfg.elab_shape)
    if ablation == NO_SPECIFIC:
        return _classify_batch(params, _elaborate_batch(params, GENERAL, base), zero)
    if ablation == NO_GENERAL:
        return _classify_batch(params, zero,
                               _elaborate_batch(params, ("specific", int(k)), base))
    return _classify_batch(params, _elaborate_batch(params, GENERAL, base),
                           _elaborate_batch(params, ("specific", int(k)), base))


def forward_unseen_batch(params: CareParams, xs: Tensor,
                         ablation: str = FULL) -> Tensor:
    """Batched test-path logits: (B, c, t, h, w) -> (B, M)."""
    cfg = params.config
    xs = T.as_tensor(xs)
    if xs.values.ndim != 5 or xs.shape[1:] != cfg.input_shape:
        raise DimensionError(f"batch shape {xs.shape}, config expects "
                             f"(B,) + {cfg.input_shape}")
    base = _backbone_batch(params, xs)
    zero = T.zeros((xs.shape[0],) + cfg.elab_shape)
    if ablation == NO_SPECIFIC:
        return _classify_batch(params, _elaborate_batch(params, GENERAL, base), zero)
    all_specific = [_elaborate_batch(params, ("specific", k), base)
                    for k in range(cfg.num_domains)]
    weights = _relevance_batch(params, base, all_specific)
    f_hat = _approximate_batch(cfg, weights, all_specific)
    if ablation == NO_GENERAL:
        return _classify_batch(params, zero, f_hat)
    return _classify_batch(params, _elaborate_batch(params, GENERAL, base), f_hat)
