"""Layer zoo and the 3-conv-layer reference network with tiled conv layers.

Layer functions are pure and dtype-generic (float64 for verification,
float32 inside the network); each forward returns the state its backward
needs. The network pipeline per stage is conv(+tiles) -> ReLU -> LRN ->
pool, with the last pool fixed to average, then one fully connected layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .convkernel import (
    ConvGeometry,
    KernelMatrix,
    PatchMatrix,
    col2im,
    im2col,
)
from .numcore import SeededRng, ShapeError, matmul, require_finite
from .tiling import (
    SCHEME_KINDS,
    TiledKernelBank,
    TilePartition,
    TilingScheme,
    build_partition,
    perforated_forward,
    sample_keep_set,
    tiled_conv_backward,
    tiled_conv_forward,
)

__all__ = [
    "POOL_KINDS",
    "relu",
    "relu_backward",
    "LrnParams",
    "lrn_forward",
    "lrn_backward",
    "MixedPoolParams",
    "PoolState",
    "pool_forward",
    "pool_backward",
    "softmax_cross_entropy",
    "Prediction",
    "NetworkConfig",
    "Network",
    "count_parameters",
    "reduce_to_single",
    "predict_majority",
]

POOL_KINDS = ("max", "average", "stochastic", "mixed")


def _init_std(fan_in: int) -> float:
    # Fan-in-scaled Gaussian: keeps activation variance roughly constant
    # through the ReLU stack, which plain SGD (no momentum) needs to make
    # progress in few epochs.
    return (2.0 / fan_in) ** 0.5


def relu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = np.maximum(x, 0)
    return out, out  # the output doubles as backward state


def relu_backward(grad: np.ndarray, state: np.ndarray) -> np.ndarray:
    return grad * (state > 0)


# ---------------------------------------------------------------------------
# Local response normalization (within-channel, square spatial neighborhood)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LrnParams:
    local_size: int = 3
    alpha: float = 5e-5
    beta: float = 0.75

    def __post_init__(self):
        if self.local_size < 1 or self.local_size % 2 == 0:
            raise ValueError("lrn local_size must be odd and >= 1")


def _box_sum(x: np.ndarray, size: int) -> np.ndarray:
    """Sum over a size x size spatial neighborhood, zero-padded borders."""
    r = size // 2
    h, w, c = x.shape
    padded = np.zeros((h + 2 * r, w + 2 * r, c), dtype=x.dtype)
    padded[r : r + h, r : r + w] = x
    out = np.zeros_like(x)
    for dy in range(size):
        for dx in range(size):
            out += padded[dy : dy + h, dx : dx + w, :]
    return out


def lrn_forward(x: np.ndarray, params: LrnParams) -> tuple[np.ndarray, dict]:
    scale = params.alpha / (params.local_size**2)
    denom = 1 + scale * _box_sum(x * x, params.local_size)
    pow_term = denom ** (-params.beta)
    return x * pow_term, {"x": x, "denom": denom, "pow": pow_term, "params": params}


def lrn_backward(grad: np.ndarray, state: dict) -> np.ndarray:
    p: LrnParams = state["params"]
    x, denom, pow_term = state["x"], state["denom"], state["pow"]
    scale = p.alpha / (p.local_size**2)
    inner = _box_sum(grad * x * pow_term / denom, p.local_size)
    return grad * pow_term - 2 * scale * p.beta * x * inner


# ---------------------------------------------------------------------------
# Pooling (non-overlapping square windows, window == stride)
# ---------------------------------------------------------------------------


@dataclass
class MixedPoolParams:
    """Per-channel learnable mix of max and average pooling.

    alpha_k = 1/(1 + exp(mu*beta_k)) in (0,1); output is
    (1-alpha)*max + alpha*avg. The initial beta = 2/mu biases the mix
    towards max pooling (alpha ~ 0.12).
    """

    beta: np.ndarray
    mu: float = 10.0

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(self.mu * self.beta))

    @staticmethod
    def initial(channels: int, mu: float = 10.0, dtype=np.float32) -> "MixedPoolParams":
        return MixedPoolParams(beta=np.full(channels, 2.0 / mu, dtype=dtype), mu=mu)


@dataclass
class PoolState:
    kind: str
    window: int
    in_shape: tuple
    mode: str
    windows: np.ndarray | None = None  # (H, W, win*win, c) for max/mixed routing
    selected: np.ndarray | None = None  # (H, W, c) sampled index (stochastic)
    alpha: np.ndarray | None = None
    max_out: np.ndarray | None = None
    avg_out: np.ndarray | None = None
    mu: float = 0.0


def _windows(x: np.ndarray, window: int) -> np.ndarray:
    h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"extents {h}x{w} not divisible by pool window {window}")
    hh, ww = h // window, w // window
    return (
        x.reshape(hh, window, ww, window, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(hh, ww, window * window, c)
    )


def _unwindow(buf: np.ndarray, window: int, in_shape: tuple) -> np.ndarray:
    h, w, c = in_shape
    hh, ww = h // window, w // window
    return (
        buf.reshape(hh, ww, window, window, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(h, w, c)
    )


def _route(grad: np.ndarray, selected: np.ndarray, window: int, in_shape: tuple) -> np.ndarray:
    buf = np.zeros((*grad.shape[:2], window * window, grad.shape[2]), dtype=grad.dtype)
    np.put_along_axis(buf, selected[:, :, None, :], grad[:, :, None, :], axis=2)
    return _unwindow(buf, window, in_shape)


def pool_forward(
    x: np.ndarray,
    kind: str,
    window: int = 2,
    mode: str = "train",
    rng: SeededRng | None = None,
    mixed: MixedPoolParams | None = None,
) -> tuple[np.ndarray, PoolState]:
    """Spatial pooling over non-overlapping window x window tiles.

    max records the first-index argmax for backward; stochastic samples one
    activation with probability proportional to its nonnegative value in
    train mode and returns the probability-weighted average in test mode;
    mixed blends max and average per channel.
    """
    if kind not in POOL_KINDS:
        raise ValueError(f"unknown pooling kind {kind!r}")
    if window < 1:
        raise ValueError("pool window must be >= 1")
    xw = _windows(x, window)
    state = PoolState(kind=kind, window=window, in_shape=x.shape, mode=mode)

    if kind == "average":
        return xw.mean(axis=2), state

    if kind == "max":
        # First-index tie-break happens in backward via argmax on the
        # stored windows; forward only needs the cheap max reduce.
        state.windows = xw
        return xw.max(axis=2), state

    if kind == "stochastic":
        pos = np.maximum(xw, 0)
        tot = pos.sum(axis=2)
        if mode == "train":
            if rng is None:
                raise ValueError("stochastic pooling in train mode needs an rng")
            cum = np.cumsum(pos, axis=2)
            thr = rng.random(tot.shape).astype(x.dtype) * tot
            idx = np.sum(cum <= thr[:, :, None, :], axis=2)
            # All-zero window: output 0, gradient routed to the first index.
            idx = np.where(tot > 0, idx, 0)
            state.selected = idx
            out = np.take_along_axis(xw, idx[:, :, None, :], axis=2)[:, :, 0, :]
            return np.where(tot > 0, out, 0), state
        probs = np.divide(pos, tot[:, :, None, :], out=np.zeros_like(pos), where=tot[:, :, None, :] > 0)
        return (probs * xw).sum(axis=2), state

    # mixed
    if mixed is None:
        raise ValueError("mixed pooling needs MixedPoolParams")
    state.windows = xw
    state.max_out = xw.max(axis=2)
    state.avg_out = xw.mean(axis=2)
    state.alpha = mixed.alpha.astype(x.dtype)
    state.mu = mixed.mu
    return (1 - state.alpha) * state.max_out + state.alpha * state.avg_out, state


def pool_backward(
    grad: np.ndarray, state: PoolState
) -> tuple[np.ndarray, np.ndarray | None]:
    """Input gradient, plus the per-channel beta gradient for mixed pooling."""
    w, shape = state.window, state.in_shape
    if state.kind == "average":
        dx = np.broadcast_to(
            grad[:, None, :, None, :] / (w * w),
            (grad.shape[0], w, grad.shape[1], w, grad.shape[2]),
        ).reshape(shape)
        return dx.astype(grad.dtype, copy=False), None
    if state.kind == "max":
        return _route(grad, state.windows.argmax(axis=2), w, shape), None
    if state.kind == "stochastic":
        if state.mode != "train":
            raise ValueError("stochastic pooling backward is defined for train mode")
        return _route(grad, state.selected, w, shape), None
    # mixed
    alpha = state.alpha
    dx_max = _route(grad * (1 - alpha), state.windows.argmax(axis=2), w, shape)
    dx_avg = np.broadcast_to(
        (grad * alpha)[:, None, :, None, :] / (w * w),
        (grad.shape[0], w, grad.shape[1], w, grad.shape[2]),
    ).reshape(shape)
    dalpha = (grad * (state.avg_out - state.max_out)).sum(axis=(0, 1))
    dbeta = dalpha * (-state.mu) * alpha * (1 - alpha)
    return dx_max + dx_avg.astype(grad.dtype, copy=False), dbeta


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Stable softmax cross-entropy; returns (loss, probabilities)."""
    z = logits - logits.max()
    e = np.exp(z)
    total = e.sum()
    loss = float(np.log(total) - z[label])
    return loss, e / total


@dataclass
class Prediction:
    """logits, softmax probabilities, and the predicted label.

    For single forwards the label is the argmax of the probabilities. For
    majority-vote predictions the label follows the plurality rule (ties
    broken by the largest probability summed across votes), so it can
    differ from the argmax of the averaged probabilities.
    """

    logits: np.ndarray
    probabilities: np.ndarray
    label: int


# ---------------------------------------------------------------------------
# Network configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkConfig:
    channels: tuple[int, int, int] = (32, 32, 64)
    tiles: tuple[int, int, int] = (1, 1, 1)
    scheme: str = "none"
    pooling: str = "max"
    kernel: int = 5
    pad: int = 2
    stride: int = 1
    pool_window: int = 2
    lrn_size: int = 3
    lrn_alpha: float = 5e-5
    lrn_beta: float = 0.75
    input_side: int = 32
    input_channels: int = 3
    classes: int = 10
    mix_mu: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "tiles", tuple(int(t) for t in self.tiles))
        if len(self.channels) != 3 or len(self.tiles) != 3:
            raise ValueError("channels and tiles must list one entry per conv layer (3)")
        if self.scheme not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.pooling not in POOL_KINDS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if any(t < 1 for t in self.tiles):
            raise ValueError(f"tile counts must be >= 1, got {self.tiles}")
        if self.scheme == "none" and any(t != 1 for t in self.tiles):
            raise ValueError("scheme 'none' requires tiles = 1,1,1")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        self.geometries()  # validates extents/divisibility eagerly

    def layer_schemes(self) -> list[TilingScheme]:
        return [TilingScheme(self.scheme, n_t) for n_t in self.tiles]

    def geometries(self) -> list[ConvGeometry]:
        geoms = []
        side, c_in = self.input_side, self.input_channels
        for c_out in self.channels:
            g = ConvGeometry(
                h=side, w=side, c_in=c_in,
                k_h=self.kernel, k_w=self.kernel,
                pad=self.pad, stride=self.stride, c_out=c_out,
            )
            geoms.append(g)
            if g.out_h % self.pool_window or g.out_w % self.pool_window:
                raise ShapeError(
                    f"conv output {g.out_h}x{g.out_w} not divisible by pool window"
                )
            side = g.out_h // self.pool_window
            c_in = c_out
        return geoms

    @property
    def fc_inputs(self) -> int:
        g = self.geometries()[-1]
        return (g.out_h // self.pool_window) ** 2 * self.channels[-1]

    @property
    def patch_counts(self) -> tuple[int, ...]:
        return tuple(g.n_p for g in self.geometries())

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        d = dict(d)
        for key in ("channels", "tiles"):
            d[key] = tuple(d[key])
        return NetworkConfig(**d)


def count_parameters(cfg: NetworkConfig) -> int:
    """Conv-layer weights including biases, counting every replicated tile."""
    total = 0
    for geom, scheme in zip(cfg.geometries(), cfg.layer_schemes()):
        total += scheme.bank_size * (geom.k * geom.c_out + geom.c_out)
    return total


# ---------------------------------------------------------------------------
# The network
# ---------------------------------------------------------------------------


@dataclass
class _StageCache:
    patches: PatchMatrix
    partition: TilePartition | None
    keep: np.ndarray | None
    relu_mask: np.ndarray
    lrn_state: dict
    pool_state: PoolState


class Network:
    """Reference ConvNet with replicated-kernel conv layers.

    Parameters are float32 by default (training paths) so checkpoints, which
    store float32, round-trip bit-exactly; verification paths build with
    dtype=float64. All stochastic draws come from the per-call rng via named
    derived streams, so forwards are deterministic given (parameters, mode,
    rng).
    """

    def __init__(self, cfg: NetworkConfig, rng: SeededRng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.geoms = cfg.geometries()
        self.schemes = cfg.layer_schemes()
        self.banks: list[TiledKernelBank] = []
        for i, (geom, scheme) in enumerate(zip(self.geoms, self.schemes)):
            kernels = []
            for t in range(scheme.bank_size):
                w = rng.derive("init", i, t).normal(0.0, _init_std(geom.k), (geom.k, geom.c_out))
                kernels.append(
                    KernelMatrix(
                        weights=w.astype(self.dtype),
                        bias=np.zeros(geom.c_out, dtype=self.dtype),
                    )
                )
            self.banks.append(TiledKernelBank(kernels))
        self.fc_weight = (
            rng.derive("init", "fc").normal(0.0, _init_std(cfg.fc_inputs), (cfg.fc_inputs, cfg.classes))
        ).astype(self.dtype)
        self.fc_bias = np.zeros(cfg.classes, dtype=self.dtype)
        self.mixed: dict[int, MixedPoolParams] = {}
        if cfg.pooling == "mixed":
            for i in (0, 1):
                self.mixed[i] = MixedPoolParams.initial(cfg.channels[i], cfg.mix_mu, dtype=self.dtype)
        # Fixed partitions are drawn once here ("drawn at the beginning");
        # formula-based assignments are deterministic per geometry.
        self._static_parts: dict[int, TilePartition] = {}
        for i, (geom, scheme) in enumerate(zip(self.geoms, self.schemes)):
            if scheme.kind in ("none", "random-fixed", "image-overlap", "image-pad", "alternate"):
                self._static_parts[i] = build_partition(
                    scheme, geom, rng.derive("fixed-partition", i)
                )

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Named parameter arrays in a fixed, documented order."""
        params: dict[str, np.ndarray] = {}
        for i, bank in enumerate(self.banks):
            for t, kernel in enumerate(bank.kernels):
                params[f"conv{i}.tile{t}.weight"] = kernel.weights
                params[f"conv{i}.tile{t}.bias"] = kernel.bias
        for i, mp in sorted(self.mixed.items()):
            params[f"pool{i}.beta"] = mp.beta
        params["fc.weight"] = self.fc_weight
        params["fc.bias"] = self.fc_bias
        return params

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"parameter names mismatch: missing {missing}, extra {extra}")
        for name, arr in params.items():
            new = np.asarray(state[name], dtype=arr.dtype)
            if new.shape != arr.shape:
                raise ShapeError(f"{name}: shape {new.shape} != {arr.shape}")
            arr[...] = new

    # -- forward / backward -------------------------------------------------

    def _partition_for(self, i: int, rng: SeededRng) -> TilePartition:
        scheme = self.schemes[i]
        if scheme.kind == "random":
            return build_partition(scheme, self.geoms[i], rng.derive("part", i))
        return self._static_parts[i]

    def _stage_forward(self, x, i, mode, rng, want_cache):
        geom, scheme, bank = self.geoms[i], self.schemes[i], self.banks[i]
        patches = im2col(x, geom)
        partition = None
        keep = None
        if scheme.kind == "perforated":
            if mode == "train":
                keep = sample_keep_set(geom.n_p, scheme.n_t, rng.derive("keep", i))
            else:
                keep = np.arange(geom.n_p)
            rows = perforated_forward(patches, bank.kernels[0], keep)
        else:
            partition = self._partition_for(i, rng)
            rows = tiled_conv_forward(patches, bank, partition)
        act = rows.reshape(geom.out_h, geom.out_w, geom.c_out)
        act, mask = relu(act)
        act, lrn_state = lrn_forward(
            act, LrnParams(self.cfg.lrn_size, self.cfg.lrn_alpha, self.cfg.lrn_beta)
        )
        kind = self.cfg.pooling if i < 2 else "average"
        out, pool_state = pool_forward(
            act,
            kind,
            window=self.cfg.pool_window,
            mode=mode,
            rng=rng.derive("pool", i) if kind == "stochastic" else None,
            mixed=self.mixed.get(i),
        )
        cache = None
        if want_cache:
            cache = _StageCache(patches, partition, keep, mask, lrn_state, pool_state)
        return out, cache

    def _forward_impl(self, image, mode, rng, want_cache):
        image = np.asarray(image)
        expected = (self.cfg.input_side, self.cfg.input_side, self.cfg.input_channels)
        if image.shape != expected:
            raise ShapeError(f"image shape {image.shape} != {expected}")
        if mode not in ("train", "test"):
            raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
        x = image
        caches = []
        for i in range(3):
            x, cache = self._stage_forward(x, i, mode, rng, want_cache)
            caches.append(cache)
        flat = x.reshape(-1)
        logits = matmul(flat[None, :], self.fc_weight)[0] + self.fc_bias
        require_finite("logits", logits)
        return logits, flat, x.shape, caches

    def forward(self, image, mode: str, rng: SeededRng) -> Prediction:
        logits, _, _, _ = self._forward_impl(image, mode, rng, want_cache=False)
        _, probs = softmax_cross_entropy(logits, 0)
        return Prediction(logits=logits, probabilities=probs, label=int(np.argmax(probs)))

    def forward_backward(
        self,
        image,
        label: int,
        mode: str,
        rng: SeededRng,
        need_input_grad: bool = False,
    ) -> tuple[Prediction, float, dict[str, np.ndarray], np.ndarray | None]:
        """One forward plus the full parameter gradient of the softmax loss.

        The input-image gradient is only assembled when asked for (it is the
        costly scatter of the first conv layer).
        """
        logits, flat, pooled_shape, caches = self._forward_impl(image, mode, rng, want_cache=True)
        loss, probs = softmax_cross_entropy(logits, label)
        pred = Prediction(logits=logits, probabilities=probs, label=int(np.argmax(probs)))

        grads: dict[str, np.ndarray] = {}
        dlogits = probs.astype(self.fc_weight.dtype).copy()
        dlogits[label] -= 1
        grads["fc.weight"] = np.outer(flat, dlogits)
        grads["fc.bias"] = dlogits
        dx = matmul(self.fc_weight, dlogits[:, None])[:, 0].reshape(pooled_shape)

        dimage = None
        for i in (2, 1, 0):
            cache = caches[i]
            dact, dbeta = pool_backward(dx, cache.pool_state)
            if dbeta is not None:
                grads[f"pool{i}.beta"] = dbeta
            dact = lrn_backward(dact, cache.lrn_state)
            dact = relu_backward(dact, cache.relu_mask)
            geom, scheme, bank = self.geoms[i], self.schemes[i], self.banks[i]
            grad_rows = dact.reshape(geom.n_p, geom.c_out)
            want_dx = i > 0 or need_input_grad
            if scheme.kind == "perforated":
                kernel = bank.kernels[0]
                kept = cache.keep
                g_kept = grad_rows[kept]
                grads[f"conv{i}.tile0.weight"] = matmul(cache.patches.rows[kept].T, g_kept)
                grads[f"conv{i}.tile0.bias"] = g_kept.sum(axis=0)
                if want_dx:
                    row_grads = np.zeros((geom.n_p, geom.k), dtype=grad_rows.dtype)
                    row_grads[kept] = matmul(g_kept, kernel.weights.T)
                    dx = col2im(row_grads, geom)
            else:
                tile_grads, dxs = tiled_conv_backward(
                    cache.patches, bank, cache.partition, grad_rows, need_input_grad=want_dx
                )
                for t, (dw, db) in enumerate(tile_grads):
                    grads[f"conv{i}.tile{t}.weight"] = dw
                    grads[f"conv{i}.tile{t}.bias"] = db
                dx = dxs
            if i == 0:
                dimage = dx if need_input_grad else None
        return pred, loss, grads, dimage


def reduce_to_single(bank: TiledKernelBank) -> KernelMatrix:
    """Collapse a bank to one kernel matrix, keeping per output channel the
    filter column with the largest L2 weight norm (ties: lowest tile)."""
    stack = np.stack([k.weights for k in bank.kernels])  # (n_t, k, c_out)
    norms = np.sqrt((stack.astype(np.float64) ** 2).sum(axis=1))  # (n_t, c_out)
    winner = norms.argmax(axis=0)
    cols = np.arange(stack.shape[2])
    weights = stack[winner, :, cols].T.astype(stack.dtype, copy=False)
    bias = np.stack([k.bias for k in bank.kernels])[winner, cols]
    return KernelMatrix(weights=np.ascontiguousarray(weights), bias=bias)


def predict_majority(net: Network, image, votes: int, rng: SeededRng) -> Prediction:
    """Majority vote over `votes` independent test-mode forwards.

    Each vote draws its own partitions. Ties are broken by the largest
    probability mass summed across votes.
    """
    if votes < 1:
        raise ValueError("votes must be >= 1")
    preds = [net.forward(image, "test", rng.derive("vote", v)) for v in range(votes)]
    labels = np.array([p.label for p in preds])
    counts = np.bincount(labels, minlength=net.cfg.classes)
    candidates = np.flatnonzero(counts == counts.max())
    prob_sum = np.sum([p.probabilities for p in preds], axis=0)
    label = int(candidates[np.argmax(prob_sum[candidates])])
    mean_logits = np.mean([p.logits for p in preds], axis=0)
    return Prediction(
        logits=mean_logits,
        probabilities=prob_sum / votes,
        label=label,
    )
