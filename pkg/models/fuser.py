# models/fuser.py
"""Radar–camera BEV fusion: deformable cross attention (DCA), the two-pass
DDCA Transformer block and the feature-pyramid fuser built from them.

Maps are C×Hg×Wg float64 arrays on a shared BEV grid. Every forward returns
(out, cache); every backward returns (param_grads, *input_grads).
"""
from dataclasses import dataclass

import numpy as np

from models.numkit import (
    as_tensor,
    avgpool_backward,
    avgpool_forward,
    bilinear_sample_backward,
    bilinear_sample_forward,
    conv2d_backward,
    conv2d_forward,
    gelu_backward,
    gelu_forward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
    softmax_backward,
    softmax_forward,
    upsample_nearest_backward,
    upsample_nearest_forward,
)
from models.params import ParamBundle, uniform_init
from utils.errors import ConfigError, DimensionError

MODALITIES = ("radar", "camera", "fused")
ORDERS = ("RC", "CR")
FFN_EXPANSION = 4
SCALES = {"dyadic": (1, 2, 4), "literal": (1, 2, 3)}


# --- Types ---
@dataclass(frozen=True)
class DcaConfig:
    channels: int
    heads: int = 8
    points: int = 32

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1:
            raise ConfigError(f"channels and heads must be positive, got C={self.channels}, H={self.heads}")
        if self.channels % self.heads:
            raise ConfigError(f"channels C={self.channels} not divisible by heads H={self.heads}")
        if self.points < 1:
            raise ConfigError(f"sampling points N must be >= 1, got {self.points}")

    @property
    def head_dim(self):
        return self.channels // self.heads

    @property
    def offset_width(self):
        return 2 * self.heads * self.points


@dataclass
class FeatureMap:
    """A C×Hg×Wg map tagged with its modality and grid resolution (m/cell)."""
    data: np.ndarray
    modality: str = "fused"
    cell_size: float = 0.4

    def __post_init__(self):
        self.data = as_tensor(self.data)
        if self.data.ndim != 3:
            raise DimensionError(f"feature map must be C×H×W, got shape {self.data.shape}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality '{self.modality}'")

    @property
    def shape(self):
        return self.data.shape


def grid_data(x):
    return x.data if isinstance(x, FeatureMap) else as_tensor(x)


def check_aligned(a, b):
    """Both modalities must share shape and, when tagged, grid resolution."""
    if isinstance(a, FeatureMap) and isinstance(b, FeatureMap) and a.cell_size != b.cell_size:
        raise DimensionError(f"grid resolutions differ: {a.cell_size} vs {b.cell_size} m/cell")
    da, db = grid_data(a), grid_data(b)
    if da.shape != db.shape:
        for axis, (na, nb) in enumerate(zip(da.shape, db.shape)):
            if na != nb:
                raise DimensionError(f"modality maps differ on axis {axis}: {na} vs {nb}")
        raise DimensionError(f"modality maps differ in rank: {da.shape} vs {db.shape}")
    return da, db


def _tokens(x):
    C = x.shape[0]
    return x.reshape(C, -1).T


def _untokens(t, shape):
    return t.T.reshape(shape)


@dataclass
class DcaParams(ParamBundle):
    config: DcaConfig
    W_off: np.ndarray
    b_off: np.ndarray
    W_att: np.ndarray
    b_att: np.ndarray
    W_val: np.ndarray
    b_val: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray


@dataclass
class SubBlockParams(ParamBundle):
    dca: DcaParams
    ln_q_gamma: np.ndarray
    ln_q_beta: np.ndarray
    ln_kv_gamma: np.ndarray
    ln_kv_beta: np.ndarray
    ln_ffn_gamma: np.ndarray
    ln_ffn_beta: np.ndarray
    W_ffn1: np.ndarray
    b_ffn1: np.ndarray
    W_ffn2: np.ndarray
    b_ffn2: np.ndarray


@dataclass
class DdcaParams(ParamBundle):
    """Pass 1 queries with modality 0; pass 2 queries with the pass-1 result."""
    pass1: SubBlockParams
    pass2: SubBlockParams


@dataclass
class ConvFuserParams(ParamBundle):
    kernel: np.ndarray
    bias: np.ndarray


@dataclass
class ScaleStack(ParamBundle):
    scale: int
    blocks: list


@dataclass(frozen=True)
class FpConfig:
    dca: DcaConfig
    layers: int = 3
    blocks_per_scale: int = 2
    block: str = "ddca"
    scale_mode: str = "dyadic"
    merge: str = "sum"

    def __post_init__(self):
        if not 1 <= self.layers <= 3:
            raise ConfigError(f"FP layers must be 1–3, got {self.layers}")
        if self.blocks_per_scale < 1:
            raise ConfigError("blocks_per_scale must be >= 1")
        if self.block not in ("ddca", "conv"):
            raise ConfigError(f"unknown fusion block '{self.block}'")
        if self.scale_mode not in SCALES:
            raise ConfigError(f"unknown scale mode '{self.scale_mode}'")
        if self.merge not in ("sum", "concat"):
            raise ConfigError(f"unknown merge mode '{self.merge}'")

    @property
    def scales(self):
        return SCALES[self.scale_mode][:self.layers]

    @property
    def grid_multiple(self):
        return int(np.lcm.reduce(self.scales))


@dataclass
class FpDdcaParams(ParamBundle):
    config: FpConfig
    stacks: list
    final_kernel: np.ndarray
    final_bias: np.ndarray


# --- Initialization ---
def init_dca_params(config, rng):
    """Zero offset and weight nets (uniform attention on the reference cell)."""
    C, H, N, hd = config.channels, config.heads, config.points, config.head_dim
    return DcaParams(
        config=config,
        W_off=np.zeros((C, 2 * H * N)), b_off=np.zeros(2 * H * N),
        W_att=np.zeros((C, H * N)), b_att=np.zeros(H * N),
        W_val=uniform_init(rng, C, (H, C, hd)), b_val=np.zeros((H, hd)),
        W_out=uniform_init(rng, C, (C, C)), b_out=np.zeros(C),
    )


def identity_dca_params(config):
    """Degenerate DCA: zero offsets/weights, block-identity projections."""
    C, H, N, hd = config.channels, config.heads, config.points, config.head_dim
    eye = np.eye(C)
    W_val = np.stack([eye[:, h * hd:(h + 1) * hd] for h in range(H)])
    return DcaParams(
        config=config,
        W_off=np.zeros((C, 2 * H * N)), b_off=np.zeros(2 * H * N),
        W_att=np.zeros((C, H * N)), b_att=np.zeros(H * N),
        W_val=W_val, b_val=np.zeros((H, hd)),
        W_out=eye.copy(), b_out=np.zeros(C),
    )


def init_subblock_params(config, rng, dca=None):
    C = config.channels
    hidden = FFN_EXPANSION * C
    return SubBlockParams(
        dca=init_dca_params(config, rng) if dca is None else dca,
        ln_q_gamma=np.ones(C), ln_q_beta=np.zeros(C),
        ln_kv_gamma=np.ones(C), ln_kv_beta=np.zeros(C),
        ln_ffn_gamma=np.ones(C), ln_ffn_beta=np.zeros(C),
        W_ffn1=uniform_init(rng, C, (C, hidden)), b_ffn1=np.zeros(hidden),
        W_ffn2=uniform_init(rng, hidden, (hidden, C)), b_ffn2=np.zeros(C),
    )


def init_ddca_params(config, rng):
    return DdcaParams(init_subblock_params(config, rng), init_subblock_params(config, rng))


def init_conv_fuser_params(channels, rng):
    return ConvFuserParams(uniform_init(rng, 2 * channels * 9, (channels, 2 * channels, 3, 3)), np.zeros(channels))


def init_fp_params(config, rng, grid_shape=None):
    """Build pyramid parameters; checks grid divisibility when ``grid_shape`` is given."""
    if grid_shape is not None:
        check_pyramid_grid(config, grid_shape)
    C = config.dca.channels
    stacks = []
    for s in config.scales:
        if config.block == "ddca":
            blocks = [init_ddca_params(config.dca, rng) for _ in range(config.blocks_per_scale)]
        else:
            blocks = [init_conv_fuser_params(C, rng) for _ in range(config.blocks_per_scale)]
        stacks.append(ScaleStack(s, blocks))
    cin = C * len(config.scales) if config.merge == "concat" else C
    return FpDdcaParams(config, stacks, uniform_init(rng, cin * 9, (C, cin, 3, 3)), np.zeros(C))


def check_pyramid_grid(config, grid_shape):
    multiple = config.grid_multiple
    for axis, n in enumerate(grid_shape[-2:]):
        if n % multiple:
            raise DimensionError(f"grid axis {axis} has {n} cells, not divisible by {multiple} for scales {config.scales}")


# --- DCA ---
def reference_points(rows, cols):
    """(Q, 2) integer cell centres in row-major query order."""
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=1)


def dca_forward(params, query_map, kv_map):
    """Each query cell attends to N bilinear samples per head around its own
    centre in the other modality's map, at learned offsets (grid-cell units)."""
    z_map, kv = check_aligned(query_map, kv_map)
    cfg = params.config
    C, rows, cols = z_map.shape
    if C != cfg.channels:
        raise DimensionError(f"axis 0 of the maps has {C} channels, DCA configured for {cfg.channels}")
    H, N, hd = cfg.heads, cfg.points, cfg.head_dim
    Q = rows * cols
    z = _tokens(z_map)
    offsets, off_cache = linear_forward(z, params.W_off, params.b_off)
    logits, att_cache = linear_forward(z, params.W_att, params.b_att)
    attn, sm_cache = softmax_forward(logits.reshape(Q, H, N))
    ref = reference_points(rows, cols)
    samples, smp_cache = bilinear_sample_forward(kv, offsets.reshape(Q, H, N, 2), origin=ref[:, None, None, :])
    values = np.einsum("qhnc,hcd->qhnd", samples, params.W_val) + params.b_val[:, None, :]
    heads = np.einsum("qhn,qhnd->qhd", attn, values)
    out, out_cache = linear_forward(heads.reshape(Q, C), params.W_out, params.b_out)
    cache = (params, z_map.shape, off_cache, att_cache, attn, sm_cache, samples, smp_cache, values, out_cache)
    return _untokens(out, z_map.shape), cache


def dca_backward(dout, cache):
    params, shape, off_cache, att_cache, attn, sm_cache, samples, smp_cache, values, out_cache = cache
    cfg = params.config
    C, rows, cols = shape
    H, N, hd = cfg.heads, cfg.points, cfg.head_dim
    Q = rows * cols
    dconcat, dW_out, db_out = linear_backward(_tokens(dout), out_cache)
    dheads = dconcat.reshape(Q, H, hd)
    dattn = np.einsum("qhd,qhnd->qhn", dheads, values)
    dvalues = np.einsum("qhn,qhd->qhnd", attn, dheads)
    dW_val = np.einsum("qhnc,qhnd->hcd", samples, dvalues)
    db_val = dvalues.sum(axis=(0, 2))
    dsamples = np.einsum("qhnd,hcd->qhnc", dvalues, params.W_val)
    dkv, doffsets = bilinear_sample_backward(dsamples, smp_cache)
    dlogits = softmax_backward(dattn, sm_cache).reshape(Q, H * N)
    dz_att, dW_att, db_att = linear_backward(dlogits, att_cache)
    dz_off, dW_off, db_off = linear_backward(doffsets.reshape(Q, 2 * H * N), off_cache)
    grads = DcaParams(cfg, dW_off, db_off, dW_att, db_att, dW_val, db_val, dW_out, db_out)
    return grads, _untokens(dz_att + dz_off, shape), dkv


def attention_weights(params, query_map):
    """(Q, H, N) normalized sampling weights; exposed for inspection."""
    z = _tokens(grid_data(query_map))
    cfg = params.config
    logits, _ = linear_forward(z, params.W_att, params.b_att)
    return softmax_forward(logits.reshape(-1, cfg.heads, cfg.points))[0]


# --- Transformer sub-block and DDCA ---
def subblock_forward(params, x, y):
    """out = h + FFN(LN(h)), h = x + DCA(LN_q(x), LN_kv(y))."""
    x, y = check_aligned(x, y)
    shape = x.shape
    xn, ln_q = layer_norm_forward(_tokens(x), params.ln_q_gamma, params.ln_q_beta)
    yn, ln_kv = layer_norm_forward(_tokens(y), params.ln_kv_gamma, params.ln_kv_beta)
    att, dca_cache = dca_forward(params.dca, _untokens(xn, shape), _untokens(yn, shape))
    h = x + att
    hn, ln_f = layer_norm_forward(_tokens(h), params.ln_ffn_gamma, params.ln_ffn_beta)
    f1, l1 = linear_forward(hn, params.W_ffn1, params.b_ffn1)
    a, act = gelu_forward(f1)
    f2, l2 = linear_forward(a, params.W_ffn2, params.b_ffn2)
    out = h + _untokens(f2, shape)
    return out, (params, shape, ln_q, ln_kv, dca_cache, ln_f, l1, act, l2)


def subblock_backward(dout, cache):
    params, shape, ln_q, ln_kv, dca_cache, ln_f, l1, act, l2 = cache
    da, dW2, db2 = linear_backward(_tokens(dout), l2)
    df1, dW1, db1 = linear_backward(gelu_backward(da, act), l1)
    dhn, dg_f, db_f = layer_norm_backward(df1, ln_f)
    dh = dout + _untokens(dhn, shape)
    dca_grads, dxn, dyn = dca_backward(dh, dca_cache)
    dx_ln, dg_q, db_q = layer_norm_backward(_tokens(dxn), ln_q)
    dy_ln, dg_kv, db_kv = layer_norm_backward(_tokens(dyn), ln_kv)
    grads = SubBlockParams(dca_grads, dg_q, db_q, dg_kv, db_kv, dg_f, db_f, dW1, db1, dW2, db2)
    return grads, dh + _untokens(dx_ln, shape), _untokens(dy_ln, shape)


def ddca_forward(params, mod0, mod1):
    """Pass 1: Q = mod0, KV = mod1. Pass 2: Q = pass-1 result, KV = mod0."""
    mod0, mod1 = check_aligned(mod0, mod1)
    fused, c1 = subblock_forward(params.pass1, mod0, mod1)
    out, c2 = subblock_forward(params.pass2, fused, mod0)
    return out, (c1, c2)


def ddca_backward(dout, cache):
    c1, c2 = cache
    g2, dfused, dmod0_kv = subblock_backward(dout, c2)
    g1, dmod0_q, dmod1 = subblock_backward(dfused, c1)
    return DdcaParams(g1, g2), dmod0_q + dmod0_kv, dmod1


# --- Convolutional fuser (ablation baseline) ---
def conv_fuser_forward(params, radar, camera):
    """Channel-concatenate both maps, then a 3×3 convolution back to C channels."""
    radar, camera = check_aligned(radar, camera)
    out, cache = conv2d_forward(np.concatenate([radar, camera], axis=0), params.kernel, params.bias)
    return out, (cache, radar.shape[0])


def conv_fuser_backward(dout, cache):
    conv_cache, split = cache
    dx, dkernel, dbias = conv2d_backward(dout, conv_cache)
    return ConvFuserParams(dkernel, dbias), dx[:split], dx[split:]


_BLOCKS = {
    DdcaParams: (ddca_forward, ddca_backward),
    ConvFuserParams: (conv_fuser_forward, conv_fuser_backward),
}


def block_forward(block, x, y):
    return _BLOCKS[type(block)][0](block, x, y)


def block_backward(block, dout, cache):
    return _BLOCKS[type(block)][1](dout, cache)


# --- Feature pyramid ---
def order_modalities(radar, camera, order):
    if order == "RC":
        return radar, camera
    if order == "CR":
        return camera, radar
    raise ConfigError(f"unknown interaction order '{order}'")


def stack_forward(stack, x0, x1):
    """Chain the blocks of one scale on the modality-0 slot: x <- block(x, x1)."""
    x = x0
    caches = []
    for block in stack.blocks:
        x, cache = block_forward(block, x, x1)
        caches.append(cache)
    return x, caches


def stack_backward(stack, dout, caches):
    dx = dout
    dx1 = None
    grads = []
    for block, cache in zip(reversed(stack.blocks), reversed(caches)):
        g, dx, d1 = block_backward(block, dx, cache)
        dx1 = d1 if dx1 is None else dx1 + d1
        grads.append(g)
    return ScaleStack(stack.scale, grads[::-1]), dx, dx1


def fp_ddca_forward(params, radar, camera, order="RC"):
    """Run a block stack at every pyramid scale, upsample, merge, final 3×3 conv."""
    radar, camera = check_aligned(radar, camera)
    cfg = params.config
    check_pyramid_grid(cfg, radar.shape)
    mod0, mod1 = order_modalities(radar, camera, order)
    outs, caches = [], []
    for stack in params.stacks:
        s = stack.scale
        x0 = mod0 if s == 1 else avgpool_forward(mod0, s)[0]
        x1 = mod1 if s == 1 else avgpool_forward(mod1, s)[0]
        x, stack_caches = stack_forward(stack, x0, x1)
        outs.append(x if s == 1 else upsample_nearest_forward(x, s)[0])
        caches.append(stack_caches)
    if cfg.merge == "sum":
        merged = outs[0]
        for o in outs[1:]:
            merged = merged + o
    else:
        merged = np.concatenate(outs, axis=0)
    out, conv_cache = conv2d_forward(merged, params.final_kernel, params.final_bias)
    return out, (params, order, caches, conv_cache, merged)


def fp_ddca_backward(dout, cache):
    params, order, caches, conv_cache, _ = cache
    C = params.config.dca.channels
    dmerged, dkernel, dbias = conv2d_backward(dout, conv_cache)
    dmod0 = dmod1 = 0.0
    stack_grads = []
    for k, (stack, stack_caches) in enumerate(zip(params.stacks, caches)):
        s = stack.scale
        dup = dmerged if params.config.merge == "sum" else dmerged[k * C:(k + 1) * C]
        dx = dup if s == 1 else upsample_nearest_backward(dup, s)
        g, dx0, dx1 = stack_backward(stack, dx, stack_caches)
        stack_grads.append(g)
        dmod0 = dmod0 + (dx0 if s == 1 else avgpool_backward(dx0, s))
        dmod1 = dmod1 + (dx1 if s == 1 else avgpool_backward(dx1, s))
    grads = FpDdcaParams(params.config, stack_grads, dkernel, dbias)
    if order == "RC":
        return grads, dmod0, dmod1
    return grads, dmod1, dmod0
