"""Multi-task CNN for per-band occupancy detection.

Shared shallow trunk::

    conv 3x3 (40) -> BN -> ReLU -> maxpool -> conv 3x3 (2*N_f) -> BN -> ReLU

Band-specific deep blocks, one per band, realised jointly as one grouped conv::

    grouped conv 3x3 (N_f groups, 3 filters each) -> BN -> ReLU -> avgpool
    -> per-band FC on that group's maps -> sigmoid
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L

BUFFER_SUFFIXES = (".mean", ".var")


def is_buffer(name):
    """Batchnorm running statistics are state, not trainable weights."""
    return name.endswith(BUFFER_SUFFIXES)


@dataclass(frozen=True)
class NetConfig:
    n_points: int = 64
    n_bands: int = 20
    shallow_filters: int = 40
    filters_per_group: int = 3
    in_per_group: int = 2
    max_pool: tuple | None = None
    avg_pool: tuple | None = None
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        if self.n_points < 1 or self.n_bands < 1:
            raise ValueError("n_points and n_bands must be positive")
        if self.max_pool is None:
            if self.n_points % 16:
                raise ValueError(
                    f"n_points={self.n_points} is not a multiple of 16; pass max_pool explicitly")
            object.__setattr__(self, "max_pool", (self.n_points // 16, 1))
        mp = tuple(self.max_pool)
        object.__setattr__(self, "max_pool", mp)
        h, w = self.n_points // mp[0], self.n_bands // mp[1]
        if self.n_points % mp[0] or self.n_bands % mp[1]:
            raise ValueError(f"max pool {mp} does not tile a {self.n_points}x{self.n_bands} input")
        if self.avg_pool is None:
            if h % 4 or w % 4:
                raise ValueError(
                    f"pooled map {h}x{w} cannot be averaged down to 4x4; pass avg_pool explicitly")
            object.__setattr__(self, "avg_pool", (h // 4, w // 4))
        ap = tuple(self.avg_pool)
        object.__setattr__(self, "avg_pool", ap)
        if h % ap[0] or w % ap[1]:
            raise ValueError(f"avg pool {ap} does not tile the {h}x{w} pooled map")

    @classmethod
    def with_variant(cls, n_points, n_bands, variant="default", **kw):
        """``variant='2x2'`` swaps the 4x1 max pool for a 2x2 one.

        The halved band axis may not split into four columns; the head grid
        then uses the largest column count up to four that divides it.
        """
        if variant == "2x2":
            kw.setdefault("max_pool", (2, 2))
            h, w = n_points // kw["max_pool"][0], n_bands // kw["max_pool"][1]
            cols = max(c for c in range(1, 5) if w % c == 0) if w >= 1 else 1
            if h % 4 == 0:
                kw.setdefault("avg_pool", (h // 4, w // cols))
        elif variant != "default":
            raise ValueError(f"unknown pooling variant {variant!r}")
        return cls(n_points=n_points, n_bands=n_bands, **kw)

    @property
    def mid_channels(self):
        return self.in_per_group * self.n_bands

    @property
    def head_grid(self):
        h = self.n_points // self.max_pool[0] // self.avg_pool[0]
        w = self.n_bands // self.max_pool[1] // self.avg_pool[1]
        return h, w

    @property
    def head_features(self):
        h, w = self.head_grid
        return self.filters_per_group * h * w


@dataclass
class ModelParams:
    """Shared shallow block plus one deep block per band.

    Each block maps parameter names to arrays; names ending in ``.mean`` or
    ``.var`` are batchnorm running statistics.
    """

    config: NetConfig
    shallow: dict = field(default_factory=dict)
    deep: list = field(default_factory=list)
    # bumped by every optimizer step so that an old forward cache is detectable
    version: int = field(default=0, compare=False, repr=False)

    def copy(self):
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.shallow.items()},
            [{k: v.copy() for k, v in blk.items()} for blk in self.deep],
        )

    def blocks(self):
        yield "shallow", self.shallow
        for n, blk in enumerate(self.deep):
            yield f"deep{n}", blk

    def n_parameters(self, trainable_only=True):
        return sum(v.size for _, blk in self.blocks() for k, v in blk.items()
                   if not (trainable_only and is_buffer(k)))

    def block_size(self, which):
        """Number of scalars (weights and running stats) in one block."""
        blk = self.shallow if which == "shallow" else self.deep[0]
        return sum(v.size for v in blk.values())

    def equals(self, other):
        return all(
            a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
            for (_, a), (_, b) in zip(self.blocks(), other.blocks())
        ) and len(self.deep) == len(other.deep)


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(cfg: NetConfig, rng: np.random.Generator) -> ModelParams:
    dt = np.dtype(cfg.dtype)
    c1, c2, F, Cg = cfg.shallow_filters, cfg.mid_channels, cfg.filters_per_group, cfg.in_per_group

    def bn(prefix, c):
        return {f"{prefix}.gamma": np.ones(c, dt), f"{prefix}.beta": np.zeros(c, dt),
                f"{prefix}.mean": np.zeros(c, dt), f"{prefix}.var": np.ones(c, dt)}

    shallow = {"conv1.w": _he_uniform(rng, (c1, 1, 3, 3), 9, dt), **bn("bn1", c1),
               "conv2.w": _he_uniform(rng, (c2, c1, 3, 3), 9 * c1, dt), **bn("bn2", c2)}
    deep = []
    for _ in range(cfg.n_bands):
        deep.append({"gconv.w": _he_uniform(rng, (F, Cg, 3, 3), 9 * Cg, dt), **bn("bn3", F),
                     "fc.w": _he_uniform(rng, (cfg.head_features,), cfg.head_features, dt),
                     "fc.b": np.zeros(1, dt)})
    return ModelParams(cfg, shallow, deep)


def _stack_deep(params, key):
    return np.stack([blk[key] for blk in params.deep])


@dataclass
class Prediction:
    probs: np.ndarray  # (batch, n_bands) or (n_bands,)
    logits: np.ndarray


def forward(params: ModelParams, x, mode="eval", update_stats=True, band_mask=None):
    """Run the network on a batch ``(B, N_w, N_f)`` (or a single ``(N_w, N_f)`` matrix).

    In ``train`` mode batchnorm uses batch statistics, folds them into the
    running averages (unless ``update_stats`` is false) and the returned cache
    feeds :func:`backward`. ``band_mask`` limits those running-average updates
    to the deep blocks of observed bands. In ``eval`` mode the cache is ``None``.
    """
    cfg = params.config
    single = np.ndim(x) == 2
    x = np.asarray(x, dtype=cfg.dtype)
    if single:
        x = x[None]
    if x.shape[1:] != (cfg.n_points, cfg.n_bands):
        raise ValueError(f"expected input (*, {cfg.n_points}, {cfg.n_bands}), got {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    train = mode == "train"
    sh = params.shallow
    G, F = cfg.n_bands, cfg.filters_per_group
    B = x.shape[0]
    cache = {}

    def bn_layer(z, gamma, beta, blocks_mean, blocks_var, store):
        out, bc, mu, v = L.batchnorm_forward(z, gamma, beta, blocks_mean, blocks_var, train,
                                             cfg.bn_eps)
        if train and update_stats:
            n = z.shape[0] * z.shape[1] * z.shape[2]
            store(mu, v * n / max(n - 1, 1))
        return out, bc

    def running(block, prefix):
        def store(mu, v):
            m = cfg.bn_momentum
            block[f"{prefix}.mean"] = (1 - m) * block[f"{prefix}.mean"] + m * mu
            block[f"{prefix}.var"] = (1 - m) * block[f"{prefix}.var"] + m * v
        return store

    a0 = x[..., None]
    z1, cache["cols1"] = L.conv_forward(a0, sh["conv1.w"])
    b1, cache["bn1"] = bn_layer(z1, sh["bn1.gamma"], sh["bn1.beta"], sh["bn1.mean"], sh["bn1.var"],
                                running(sh, "bn1"))
    r1 = np.maximum(b1, 0)
    p1, cache["pool1"] = L.maxpool_forward(r1, *cfg.max_pool)
    z2, cache["cols2"] = L.conv_forward(p1, sh["conv2.w"])
    b2, cache["bn2"] = bn_layer(z2, sh["bn2.gamma"], sh["bn2.beta"], sh["bn2.mean"], sh["bn2.var"],
                                running(sh, "bn2"))
    r2 = np.maximum(b2, 0)

    gw = _stack_deep(params, "gconv.w")
    z3, cache["cols3"] = L.grouped_conv_forward(r2, gw)
    gamma3 = _stack_deep(params, "bn3.gamma").reshape(-1)
    beta3 = _stack_deep(params, "bn3.beta").reshape(-1)
    mean3 = _stack_deep(params, "bn3.mean").reshape(-1)
    var3 = _stack_deep(params, "bn3.var").reshape(-1)

    def store3(mu, v):
        m = cfg.bn_momentum
        for n, blk in enumerate(params.deep):
            if band_mask is not None and not band_mask[n]:
                continue
            sl = slice(n * F, (n + 1) * F)
            blk["bn3.mean"] = (1 - m) * blk["bn3.mean"] + m * mu[sl]
            blk["bn3.var"] = (1 - m) * blk["bn3.var"] + m * v[sl]

    b3, cache["bn3"] = bn_layer(z3, gamma3, beta3, mean3, var3, store3)
    r3 = np.maximum(b3, 0)
    p3 = L.avgpool_forward(r3, *cfg.avg_pool)  # (B, h, w, G*F)
    hh, ww = p3.shape[1:3]
    # per-band features ordered (filter, row, col)
    feats = p3.reshape(B, hh, ww, G, F).transpose(0, 3, 4, 1, 2).reshape(B, G, -1)
    fcw = _stack_deep(params, "fc.w")
    fcb = _stack_deep(params, "fc.b")[:, 0]
    logits = np.einsum("bgk,gk->bg", feats, fcw) + fcb
    probs = L.sigmoid(logits)

    if train:
        cache.update(x_shape=a0.shape, z1=z1, r1_shape=r1.shape, p1_shape=p1.shape, z2=z2,
                     b1=b1, b2=b2, b3=b3, r2_shape=r2.shape, p3_shape=p3.shape, feats=feats,
                     probs=probs, gw=gw, fcw=fcw, params_id=(id(params), params.version), batch=B)
    else:
        cache = None
    if single:
        return Prediction(probs[0], logits[0]), cache
    return Prediction(probs, logits), cache


def bce_loss(pred, labels, mask=None, eps=1e-7):
    """Masked binary cross-entropy summed over bands.

    Works on a single prediction or a batch; for a batch the per-sample
    losses are returned as an array. Bands with ``mask == 0`` contribute
    nothing. An all-zero mask yields 0.
    """
    q = pred.probs if isinstance(pred, Prediction) else np.asarray(pred, dtype=float)
    y = np.asarray(labels, dtype=float)
    if q.shape != y.shape:
        raise ValueError(f"prediction shape {q.shape} != label shape {y.shape}")
    m = np.ones_like(y) if mask is None else np.broadcast_to(np.asarray(mask, dtype=float), y.shape)
    # flooring each log argument at eps matches clamping q to [eps, 1-eps]
    # except that a confident correct prediction costs exactly 0
    per = -(y * np.log(np.maximum(q, eps)) + (1 - y) * np.log(np.maximum(1 - q, eps)))
    return np.where(m > 0, per, 0.0).sum(axis=-1)


@dataclass(frozen=True)
class LossResult:
    value: float
    empty: bool  # the mask selected no band, so ``value`` is 0 by convention


def masked_loss(pred, labels, mask=None, eps=1e-7) -> LossResult:
    """Total masked BCE as a scalar, flagged when nothing was selected."""
    y = np.asarray(labels)
    m = np.ones(y.shape, bool) if mask is None else np.broadcast_to(np.asarray(mask) != 0, y.shape)
    return LossResult(float(np.sum(bce_loss(pred, labels, mask, eps))), not m.any())


def backward(params: ModelParams, cache, labels, mask=None):
    """Gradient of the batch-summed masked BCE with respect to every trainable weight.

    Returns a :class:`ModelParams`-shaped tree without the running-statistic
    entries. Deep blocks of masked-out bands receive exact zeros.
    """
    if cache is None or cache.get("params_id") != (id(params), params.version):
        raise RuntimeError(
            "backward needs the train-mode cache produced by forward on these params")
    cfg = params.config
    G, F = cfg.n_bands, cfg.filters_per_group
    B = cache["batch"]
    y = np.asarray(labels, dtype=cfg.dtype).reshape(B, G)
    m = np.ones_like(y)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=cfg.dtype), (B, G))
    if y.shape != cache["probs"].shape:
        raise ValueError("labels do not match the cached batch")

    dlogit = m * (cache["probs"] - y)  # (B, G)
    feats = cache["feats"]
    dfcw = np.einsum("bg,bgk->gk", dlogit, feats)
    dfcb = dlogit.sum(axis=0)
    dfeats = dlogit[:, :, None] * cache["fcw"][None]
    hh, ww = cache["p3_shape"][1:3]
    dp3 = dfeats.reshape(B, G, F, hh, ww).transpose(0, 3, 4, 1, 2).reshape(cache["p3_shape"])
    dr3 = L.avgpool_backward(dp3, *cfg.avg_pool)
    db3 = dr3 * (cache["b3"] > 0)
    dz3, dgamma3, dbeta3 = L.batchnorm_backward(db3, cache["bn3"])
    dr2, dgw = L.grouped_conv_backward(dz3, cache["cols3"], cache["gw"], cache["r2_shape"])

    db2 = dr2 * (cache["b2"] > 0)
    dz2, dgamma2, dbeta2 = L.batchnorm_backward(db2, cache["bn2"])
    dp1, dw2 = L.conv_backward(dz2, cache["cols2"], params.shallow["conv2.w"], cache["p1_shape"])
    dr1 = L.maxpool_backward(dp1, cache["pool1"], cache["r1_shape"], *cfg.max_pool)
    db1 = dr1 * (cache["b1"] > 0)
    dz1, dgamma1, dbeta1 = L.batchnorm_backward(db1, cache["bn1"])
    _, dw1 = L.conv_backward(dz1, cache["cols1"], params.shallow["conv1.w"], cache["x_shape"],
                             need_dx=False)

    shallow = {"conv1.w": dw1, "bn1.gamma": dgamma1, "bn1.beta": dbeta1,
               "conv2.w": dw2, "bn2.gamma": dgamma2, "bn2.beta": dbeta2}
    deep = []
    for n in range(G):
        sl = slice(n * F, (n + 1) * F)
        deep.append({"gconv.w": dgw[n], "bn3.gamma": dgamma3[sl], "bn3.beta": dbeta3[sl],
                     "fc.w": dfcw[n], "fc.b": dfcb[n:n + 1]})
    grads = ModelParams(cfg, shallow, deep)
    masked_out = ~np.any(m > 0, axis=0)
    for n in np.flatnonzero(masked_out):
        # BN couples nothing across groups, but keep the zeros exact
        for k in grads.deep[n]:
            grads.deep[n][k] = np.zeros_like(grads.deep[n][k])
    return grads


def sgd_step(params: ModelParams, grads: ModelParams, eta):
    """Plain SGD on trainable weights; running statistics are left alone."""
    for (_, blk), (_, gblk) in zip(params.blocks(), grads.blocks()):
        for k, g in gblk.items():
            if is_buffer(k):
                continue
            if blk[k].shape != g.shape:
                raise ValueError(f"gradient shape mismatch for {k}")
            blk[k] = (blk[k] - eta * g).astype(blk[k].dtype, copy=False)
    params.version += 1
    return params


def classify(pred, threshold=0.5):
    probs = pred.probs if isinstance(pred, Prediction) else np.asarray(pred)
    return (probs >= threshold).astype(np.int8)


@dataclass(frozen=True)
class LrSchedule:
    eta0: float
    eta_min: float = 0.0
    t_max: int = 1

    def __post_init__(self):
        if not (self.eta0 >= self.eta_min >= 0):
            raise ValueError("need eta0 >= eta_min >= 0")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")


def cosine_lr(t, s: LrSchedule):
    if not 0 <= t <= s.t_max:
        raise ValueError(f"iteration {t} outside [0, {s.t_max}]")
    if t == 0:
        return s.eta0
    if t == s.t_max:
        return s.eta_min
    return s.eta_min + 0.5 * (s.eta0 - s.eta_min) * (1 + math.cos(math.pi * t / s.t_max))
