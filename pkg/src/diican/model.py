"""The DIICAN network: inter/intra feature extraction, GRU -> SDA -> AUGRU, and
the state-coupled regression heads.

Parameters live in one flat ``{name: Tensor}`` dict so that checkpoints, the
optimizer and gradient checks all see the same namespace. The forward
functions below take that dict (plus a name prefix) rather than module
objects.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, concat, dropout, matmul, relu, sigmoid, tanh
from .conv import adaptive_avg_pool2d, adaptive_max_pool2d, conv2d_grouped, conv_output_size
from .errors import InvalidConfig, LengthMismatch, ShapeMismatch


@dataclass
class ModelConfig:
    n_grid: int = 100
    history_len: int = 8
    window_len: int = 30
    window_stride: int = 10
    loss_weight: float = 0.5
    dropout: float = 0.4
    # inter-cycle feature extraction
    conv_channels: int = 128
    groups: int = 4
    conv_kernel: int = 5
    attn_hidden: int = 8
    temporal_kernel: int = 5
    reshape_channels: int = 8
    pool_len: int = 16
    # recurrent / regression sizes
    inter_hidden: int = 128
    sda_inter: tuple = (128, 32)
    head_hidden: int = 32
    intra_hidden: int = 32
    sda_intra: tuple = (32, 8)
    coupling_dim: int = 32
    soc_hidden: int = 8
    standard_gru_candidate: bool = False
    sda_final_activation: str = "sigmoid"

    def __post_init__(self):
        self.sda_inter = tuple(int(v) for v in self.sda_inter)
        self.sda_intra = tuple(int(v) for v in self.sda_intra)

    @classmethod
    def scaled(cls, hidden: int, n_grid: int, **overrides) -> "ModelConfig":
        """Shrink the inter-cycle branch to ``hidden`` channels/units on an
        ``n_grid`` capacity grid, keeping the default size ratios."""
        reshape = min(8, hidden)
        base = dict(
            n_grid=n_grid, conv_channels=hidden, inter_hidden=hidden,
            attn_hidden=max(hidden // 16, 1), reshape_channels=reshape,
            pool_len=hidden // reshape, sda_inter=(hidden, max(hidden // 4, 1)),
            head_hidden=max(hidden // 4, 1),
        )
        base.update(overrides)
        return cls(**base)

    @property
    def embed_dim(self) -> int:
        return self.reshape_channels * self.pool_len

    @property
    def conv_out_len(self) -> int:
        pad = self.conv_kernel // 2
        h = self.n_grid
        for stride in (1, 1, 2):
            h = conv_output_size(h, self.conv_kernel, stride, pad)
        return h

    def validate(self) -> None:
        if self.conv_channels % self.groups or 4 % self.groups:
            raise InvalidConfig(f"channels must be divisible by groups={self.groups}")
        if self.embed_dim != self.inter_hidden:
            raise InvalidConfig(
                f"reshape_channels*pool_len = {self.embed_dim} must equal inter_hidden = {self.inter_hidden}")
        if self.pool_len > self.conv_out_len:
            raise InvalidConfig(f"pool_len {self.pool_len} exceeds conv output length {self.conv_out_len}")
        if not 0.0 <= self.loss_weight <= 1.0:
            raise InvalidConfig("loss_weight must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")
        if self.sda_final_activation != "sigmoid":
            raise InvalidConfig(f"unsupported SDA activation {self.sda_final_activation!r}")
        if min(self.history_len, self.window_len, self.window_stride) < 1:
            raise InvalidConfig("history_len, window_len and window_stride must be >= 1")

    # flat key=value form for checkpoints and config files
    def to_items(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            default = f.default
            if isinstance(default, bool):
                kw[f.name] = raw == "True"
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            elif isinstance(default, float):
                kw[f.name] = float(raw)
            elif isinstance(default, tuple):
                kw[f.name] = tuple(int(x) for x in raw.split(","))
            else:
                kw[f.name] = raw
        return cls(**kw)


# --- parameter construction -----------------------------------------------------


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _linear(params, rng, name, n_in, n_out, dtype):
    params[f"{name}.weight"] = _uniform(rng, (n_out, n_in), n_in, dtype)
    params[f"{name}.bias"] = _uniform(rng, (n_out,), n_in, dtype)


def _conv(params, rng, name, c_in, c_out, kh, kw, groups, dtype):
    fan_in = (c_in // groups) * kh * kw
    params[f"{name}.weight"] = _uniform(rng, (c_out, c_in // groups, kh, kw), fan_in, dtype)
    params[f"{name}.bias"] = _uniform(rng, (c_out,), fan_in, dtype)


def _gru(params, rng, name, n_in, hidden, dtype):
    for gate in ("r", "z", "h"):
        params[f"{name}.W_{gate}h"] = _uniform(rng, (hidden, hidden), hidden, dtype)
        params[f"{name}.W_{gate}n"] = _uniform(rng, (hidden, n_in), hidden, dtype)
        params[f"{name}.b_{gate}"] = _uniform(rng, (hidden,), hidden, dtype)


def _mlp(params, rng, name, sizes, dtype):
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        _linear(params, rng, f"{name}.fc{k}", a, b, dtype)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}
    c, g, k = cfg.conv_channels, cfg.groups, cfg.conv_kernel
    _conv(p, rng, "inter.fem.conv1", 4, c, k, 1, g, dtype)
    _conv(p, rng, "inter.fem.conv2", c, c, k, 1, g, dtype)
    _conv(p, rng, "inter.fem.conv3", c, c, k, 1, g, dtype)
    _conv(p, rng, "inter.fem.fa1", c, cfg.attn_hidden, 1, 1, 1, dtype)
    _conv(p, rng, "inter.fem.fa2", cfg.attn_hidden, c, 1, 1, 1, dtype)
    _conv(p, rng, "inter.fem.ta", 2, 1, cfg.temporal_kernel, cfg.temporal_kernel, 1, dtype)
    _conv(p, rng, "inter.fem.reshape", c, cfg.reshape_channels, 1, 1, 1, dtype)
    h = cfg.inter_hidden
    _gru(p, rng, "inter.gru", cfg.embed_dim, h, dtype)
    _mlp(p, rng, "inter.sda", (3 * h,) + cfg.sda_inter + (1,), dtype)
    _gru(p, rng, "inter.augru", h, h, dtype)
    _mlp(p, rng, "inter.soh", (h, cfg.head_hidden, 1), dtype)
    _mlp(p, rng, "inter.rul", (h, cfg.head_hidden, 1), dtype)

    e = cfg.intra_hidden
    _linear(p, rng, "intra.fem", 3, e, dtype)
    _gru(p, rng, "intra.gru", e, e, dtype)
    _mlp(p, rng, "intra.sda", (3 * e,) + cfg.sda_intra + (1,), dtype)
    _gru(p, rng, "intra.augru", e, e, dtype)
    _linear(p, rng, "intra.couple", h, cfg.coupling_dim, dtype)
    _mlp(p, rng, "intra.soc", (cfg.coupling_dim + e, cfg.soc_hidden, 1), dtype)
    return p


# --- building blocks -----------------------------------------------------------------


def linear(p, name, x: Tensor) -> Tensor:
    return matmul(x, p[f"{name}.weight"].T) + p[f"{name}.bias"]


def _pointwise(p, name, v: Tensor) -> Tensor:
    """1x1 convolution applied to a pooled ``[N, C]`` descriptor."""
    w = p[f"{name}.weight"]
    return matmul(v, w.reshape(w.shape[0], w.shape[1]).T) + p[f"{name}.bias"]


def fem_inter_forward(p, x: Tensor, cfg: ModelConfig, attention: bool = True,
                      return_maps: bool = False):
    """Embed ``[N, 4, n_grid, 1]`` curve matrices into ``[N, embed_dim]``."""
    x = ad.as_tensor(x, dtype=p["inter.fem.conv1.weight"].dtype)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 4 or x.shape[3] != 1:
        raise ShapeMismatch(f"inter-cycle input must be [N, 4, n_grid, 1], got {x.shape}")
    pad = (cfg.conv_kernel // 2, 0)
    for name, stride in (("conv1", 1), ("conv2", 1), ("conv3", 2)):
        x = relu(conv2d_grouped(x, p[f"inter.fem.{name}.weight"], p[f"inter.fem.{name}.bias"],
                                stride=stride, padding=pad, groups=cfg.groups))
    n, c = x.shape[:2]
    maps = {}
    if attention:
        def mlp(v):
            return _pointwise(p, "inter.fem.fa2", relu(_pointwise(p, "inter.fem.fa1", v)))

        avg = adaptive_avg_pool2d(x, (1, 1)).reshape(n, c)
        mx = adaptive_max_pool2d(x, (1, 1)).reshape(n, c)
        feat_att = sigmoid(mlp(avg) + mlp(mx)).reshape(n, c, 1, 1)
        x = x * feat_att
        desc = concat([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
        tp = cfg.temporal_kernel // 2
        temp_att = sigmoid(conv2d_grouped(desc, p["inter.fem.ta.weight"], p["inter.fem.ta.bias"],
                                          padding=(tp, tp)))
        x = x * temp_att
        maps = {"feature": feat_att, "temporal": temp_att}
    r = conv2d_grouped(x, p["inter.fem.reshape.weight"], p["inter.fem.reshape.bias"])
    e = relu(adaptive_avg_pool2d(r, (cfg.pool_len, 1))).reshape(n, cfg.embed_dim)
    return (e, maps) if return_maps else e


def fem_intra_forward(p, x: Tensor) -> Tensor:
    """``relu(W x + b)`` point embedding; works on any leading shape ``[..., 3]``."""
    x = ad.as_tensor(x, dtype=p["intra.fem.weight"].dtype)
    if x.shape[-1] != 3:
        raise ShapeMismatch(f"intra-cycle points need 3 columns, got {x.shape}")
    return relu(linear(p, "intra.fem", x))


def _input_projections(p, name, inputs: Tensor):
    """Time-invariant input terms ``W_*n x_t + b_*`` for all steps at once."""
    return {g: matmul(inputs, p[f"{name}.W_{g}n"].T) + p[f"{name}.b_{g}"] for g in ("r", "z", "h")}


def _recurrence(p, name, inputs: Tensor, h0: Tensor, alphas=None, standard: bool = False):
    n, steps, _ = inputs.shape
    hid = p[f"{name}.W_zh"].shape[0]
    if h0.shape != (n, hid):
        raise ShapeMismatch(f"initial state {h0.shape} != {(n, hid)}")
    proj = _input_projections(p, name, inputs)
    w_zh, w_hh = p[f"{name}.W_zh"].T, p[f"{name}.W_hh"].T
    # The default candidate ignores the reset gate, so r only matters in the standard form.
    w_rh = p[f"{name}.W_rh"].T if standard else None
    h = h0
    states = []
    for t in range(steps):
        z = sigmoid(matmul(h, w_zh) + proj["z"][:, t])
        if standard:
            r = sigmoid(matmul(h, w_rh) + proj["r"][:, t])
            cand = tanh(matmul(r * h, w_hh) + proj["h"][:, t])
        else:
            cand = tanh(matmul(h, w_hh) + proj["h"][:, t])
        if alphas is not None:
            z = alphas[t] * z
        h = (1.0 - z) * cand + z * h
        states.append(h)
    return states


def gru_forward(p, name: str, inputs, h0, standard: bool = False) -> list[Tensor]:
    """Hidden states ``h_1..h_T`` for ``inputs[N, T, D]``."""
    inputs = ad.as_tensor(inputs)
    if inputs.ndim != 3 or inputs.shape[1] < 1:
        raise ShapeMismatch(f"GRU expects non-empty [N, T, D] input, got {inputs.shape}")
    return _recurrence(p, name, inputs, ad.as_tensor(h0), standard=standard)


def augru_forward(p, name: str, inputs, alphas, h0, standard: bool = False,
                  return_all: bool = False):
    """GRU with attentional update gate ``z~ = alpha * z``; returns the last state."""
    if isinstance(inputs, (list, tuple)):
        inputs = ad.stack(inputs, axis=1)
    inputs = ad.as_tensor(inputs)
    if len(alphas) != inputs.shape[1]:
        raise LengthMismatch(f"{inputs.shape[1]} inputs but {len(alphas)} attention weights")
    alphas = [ad.as_tensor(a, dtype=inputs.dtype) for a in alphas]
    states = _recurrence(p, name, inputs, ad.as_tensor(h0), alphas=alphas, standard=standard)
    return states if return_all else states[-1]


def sda_attention(p, name: str, h: Tensor, s0: Tensor) -> Tensor:
    """Absolute (non-softmax) degradation weight in (0, 1), shape ``[N, 1]``."""
    if h.shape != s0.shape:
        raise ShapeMismatch(f"SDA inputs differ in shape: {h.shape} vs {s0.shape}")
    x = concat([h, s0, h - s0], axis=-1)
    k = 1
    while f"{name}.fc{k + 1}.weight" in p:
        x = relu(linear(p, f"{name}.fc{k}", x))
        k += 1
    return sigmoid(linear(p, f"{name}.fc{k}", x))


def _head(p, name, x):
    return linear(p, f"{name}.fc2", relu(linear(p, f"{name}.fc1", x))).reshape(x.shape[0])


def _temporal_module(p, prefix, emb_seq: Tensor, s0: Tensor, standard: bool):
    n, steps, _ = emb_seq.shape
    hid = p[f"{prefix}.gru.W_zh"].shape[0]
    h0 = Tensor(np.zeros((n, hid), dtype=emb_seq.dtype))
    h1 = gru_forward(p, f"{prefix}.gru", emb_seq, h0, standard=standard)
    alphas = [sda_attention(p, f"{prefix}.sda", h, s0) for h in h1]
    h2 = augru_forward(p, f"{prefix}.augru", ad.stack(h1, axis=1), alphas, h0, standard=standard)
    return h2, alphas


class DIICAN:
    """Parameters plus configuration of one DIICAN model."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32,
                 params: dict[str, Tensor] | None = None):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config, seed, dtype)
        self.norm_stats = None
        self.meta: dict[str, str] = {}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def inter_params(self) -> list[Tensor]:
        return list(self.named("inter.").values())

    def intra_params(self) -> list[Tensor]:
        return list(self.named("intra.").values())

    def astype(self, dtype) -> "DIICAN":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        m = DIICAN(copy.deepcopy(self.config), params=params)
        m.norm_stats = self.norm_stats
        return m

    def copy(self) -> "DIICAN":
        return self.astype(self.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # -- forward passes -----------------------------------------------------

    def forward_inter(self, seq, initial, training: bool = False, rng=None,
                      attention: bool = True):
        """SOH, normalised RUL, final AUGRU state and per-step attention weights.

        ``seq`` is ``[N, L, 4, n_grid]`` (or ``[L, 4, n_grid]``), ``initial``
        the matching first-cycle matrices ``[N, 4, n_grid]``.
        """
        cfg, p = self.config, self.params
        seq = np.asarray(seq.data if isinstance(seq, Tensor) else seq)
        initial = np.asarray(initial.data if isinstance(initial, Tensor) else initial)
        single = seq.ndim == 3
        if single:
            seq, initial = seq[None], initial[None]
        n, steps = seq.shape[:2]
        if seq.shape[2:] != (4, cfg.n_grid) or initial.shape != (n, 4, cfg.n_grid):
            raise ShapeMismatch(f"inter-cycle batch {seq.shape} / {initial.shape} "
                                f"does not match n_grid={cfg.n_grid}")
        stacked = np.concatenate([initial[:, None], seq], axis=1).reshape(n * (steps + 1), 4, cfg.n_grid, 1)
        emb = fem_inter_forward(p, Tensor(stacked.astype(self.dtype)), cfg, attention=attention)
        emb = emb.reshape(n, steps + 1, cfg.embed_dim)
        s0 = emb[:, 0]
        h2, alphas = _temporal_module(p, "inter", emb[:, 1:], s0, cfg.standard_gru_candidate)
        h2d = dropout(h2, cfg.dropout, training, rng)
        soh = _head(p, "inter.soh", h2d)
        rul = _head(p, "inter.rul", h2d)
        alpha = concat(alphas, axis=1)
        return soh, rul, h2, alpha

    def forward_intra(self, points, initial_point, h2_inter, training: bool = False, rng=None,
                      coupling: bool = True):
        """SOC estimate ``[N]`` for windows ``[N, l, 3]`` with first-sample anchors ``[N, 3]``.

        With ``coupling=False`` the coupling vector is replaced by zeros.
        """
        cfg, p = self.config, self.params
        points = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=self.dtype)
        initial_point = np.asarray(initial_point.data if isinstance(initial_point, Tensor)
                                   else initial_point, dtype=self.dtype)
        if points.ndim == 2:
            points, initial_point = points[None], initial_point[None]
        if points.ndim != 3 or points.shape[2] != 3 or initial_point.shape != (points.shape[0], 3):
            raise ShapeMismatch(f"intra windows {points.shape} / anchors {initial_point.shape}")
        n = points.shape[0]
        emb = fem_intra_forward(p, Tensor(points))
        e0 = fem_intra_forward(p, Tensor(initial_point))
        h2, alphas = _temporal_module(p, "intra", emb, e0, cfg.standard_gru_candidate)
        h2_inter = ad.as_tensor(h2_inter, dtype=self.dtype)
        if h2_inter.ndim == 1:
            h2_inter = h2_inter.reshape(1, -1)
        if h2_inter.shape[0] != n:
            h2_inter = h2_inter[np.zeros(n, dtype=np.int64)] if h2_inter.shape[0] == 1 else h2_inter
        if coupling:
            cvec = relu(linear(p, "intra.couple", h2_inter))
        else:
            cvec = Tensor(np.zeros((n, cfg.coupling_dim), dtype=self.dtype))
        z = dropout(concat([cvec, h2], axis=1), cfg.dropout, training, rng)
        return _head(p, "intra.soc", z)
