"""Self-attention building blocks.

full_attention_2d is the quadratic-cost reference: every output position
pools values from every input position.  GatedAxialLayer factorizes that
into a 1D attention along a single spatial axis with learnable relative
positional encodings whose influence is scaled by per-layer scalar gates;
running one layer along the width and one along the height recovers a
global receptive field at far lower cost.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor, apply_op, concat, matmul, reshape, softmax, transpose


@dataclass
class AxialAttentionConfig:
    axis: str  # "width" or "height"
    channels_in: int
    channels_out: int
    heads: int
    span: int

    def __post_init__(self):
        if self.axis not in ("width", "height"):
            raise ConfigError(f"axis must be 'width' or 'height', got {self.axis!r}")
        if self.channels_out % self.heads != 0:
            raise ConfigError(
                f"channels_out={self.channels_out} not divisible by heads={self.heads}"
            )
        if self.span < 1:
            raise ConfigError(f"span must be positive, got {self.span}")

    @property
    def head_dim(self):
        return self.channels_out // self.heads


def gated_axial_core(q, k, v, r_q, r_k, r_v, g_q, g_k, g_v, op="gated_axial_core"):
    """Fused gated axial attention over prepared [B, heads, L, d] tensors.

    Per head and slice: y_i = sum_j softmax_j(q_i.k_j + g_q q_i.r_q[i-j]
    + g_k k_j.r_k[i-j]) (v_j + g_v r_v[i-j]).  Softmax normalizes over the
    span axis only.
    """
    qd = np.ascontiguousarray(q.data)
    kd = np.ascontiguousarray(k.data)
    vd = np.ascontiguousarray(v.data)
    gq = q.dtype.type(g_q.data.reshape(()))
    gk = q.dtype.type(g_k.data.reshape(()))
    gv = q.dtype.type(g_v.data.reshape(()))
    attn, out = kernels.axial_attention_forward(qd, kd, vd, r_q.data, r_k.data, r_v.data, gq, gk, gv)

    def bw(g):
        g = np.ascontiguousarray(g)
        dq, dk, dv, dtq, dtk, dtv, dgq, dgk, dgv = kernels.axial_attention_backward(
            qd, kd, vd, r_q.data, r_k.data, r_v.data, gq, gk, gv, attn, g
        )
        return (
            dq,
            dk,
            dv,
            dtq,
            dtk,
            dtv,
            np.asarray(dgq, dtype=q.dtype).reshape(g_q.shape),
            np.asarray(dgk, dtype=q.dtype).reshape(g_k.shape),
            np.asarray(dgv, dtype=q.dtype).reshape(g_v.shape),
        )

    return apply_op(op, out, (q, k, v, r_q, r_k, r_v, g_q, g_k, g_v), bw)


class GatedAxialLayer:
    """Multi-head gated axial attention along one axis of an NCHW tensor.

    Projections are 1x1 channel maps (one matrix per role, sliced into
    heads).  Positional tables r_q/r_k/r_v are per head with head_dim
    columns.  Gates initialize to 1.0 so the layer starts as plain
    position-sensitive axial attention; they are the parameters a training
    schedule may freeze early on.
    """

    def __init__(self, cfg: AxialAttentionConfig, rng, prefix="", dtype=np.float32):
        self.cfg = cfg
        self.prefix = prefix
        c_in, c_out, d = cfg.channels_in, cfg.channels_out, cfg.head_dim
        bound = 1.0 / np.sqrt(c_in)
        table_bound = 1.0 / np.sqrt(d)

        def uniform(shape, b):
            return rng.uniform(-b, b, size=shape).astype(dtype)

        self.w_q = Parameter(uniform((c_in, c_out), bound), prefix + "w_q", dtype=dtype)
        self.w_k = Parameter(uniform((c_in, c_out), bound), prefix + "w_k", dtype=dtype)
        self.w_v = Parameter(uniform((c_in, c_out), bound), prefix + "w_v", dtype=dtype)
        self.w_o = Parameter(
            uniform((c_out, c_out), 1.0 / np.sqrt(c_out)), prefix + "w_o", dtype=dtype
        )
        tshape = (cfg.heads, 2 * cfg.span - 1, d)
        self.r_q = Parameter(uniform(tshape, table_bound), prefix + "r_q", dtype=dtype)
        self.r_k = Parameter(uniform(tshape, table_bound), prefix + "r_k", dtype=dtype)
        self.r_v = Parameter(uniform(tshape, table_bound), prefix + "r_v", dtype=dtype)
        one = np.ones((), dtype=dtype)
        self.g_q = Parameter(one.copy(), prefix + "g_q", dtype=dtype)
        self.g_k = Parameter(one.copy(), prefix + "g_k", dtype=dtype)
        self.g_v = Parameter(one.copy(), prefix + "g_v", dtype=dtype)

    def params(self):
        return [
            self.w_q, self.w_k, self.w_v, self.w_o,
            self.r_q, self.r_k, self.r_v,
            self.g_q, self.g_k, self.g_v,
        ]

    def gates(self):
        return [self.g_q, self.g_k, self.g_v]

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.ndim != 4:
            raise ShapeError(f"{self.prefix}: expected [N, C, H, W], got {x.shape}")
        n, c, h, w = x.shape
        if c != cfg.channels_in:
            raise ConfigError(f"{self.prefix}: {c} input channels, configured {cfg.channels_in}")
        length = w if cfg.axis == "width" else h
        if length != cfg.span:
            raise ConfigError(
                f"{self.prefix}: {cfg.axis} length {length} does not match configured span {cfg.span}"
            )
        if cfg.axis == "width":
            rows = transpose(x, (0, 2, 3, 1))  # [N, H, W, C]
        else:
            rows = transpose(x, (0, 3, 2, 1))  # [N, W, H, C]
        batch = n * (h if cfg.axis == "width" else w)
        flat = reshape(rows, (batch * cfg.span, c))

        def project(weight):
            p = matmul(flat, weight.tensor)  # [B*L, C_out]
            p = reshape(p, (batch, cfg.span, cfg.heads, cfg.head_dim))
            return transpose(p, (0, 2, 1, 3))  # [B, heads, L, d]

        q = project(self.w_q)
        k = project(self.w_k)
        v = project(self.w_v)
        y = gated_axial_core(
            q, k, v,
            self.r_q.tensor, self.r_k.tensor, self.r_v.tensor,
            self.g_q.tensor, self.g_k.tensor, self.g_v.tensor,
            op=f"gated_axial_core[{self.prefix.rstrip('.')}]",
        )
        # heads back to the channel axis, then the output projection;
        # equivalent to concatenating per-head outputs and multiplying w_o
        y = transpose(y, (0, 2, 1, 3))
        y = reshape(y, (batch * cfg.span, cfg.channels_out))
        y = matmul(y, self.w_o.tensor)
        if cfg.axis == "width":
            y = reshape(y, (n, h, w, cfg.channels_out))
            return transpose(y, (0, 3, 1, 2))
        y = reshape(y, (n, w, h, cfg.channels_out))
        return transpose(y, (0, 3, 2, 1))


def gated_axial_attention(x, layer, cfg=None):
    """Apply a GatedAxialLayer; `cfg` defaults to the layer's own config."""
    if cfg is not None and cfg != layer.cfg:
        raise ConfigError("provided config does not match the layer's config")
    return layer(x)


def axial_pair(x, width_layer, height_layer):
    """Width-axis attention directly followed by height-axis attention."""
    return height_layer(width_layer(x))


def multi_head_combine(head_outputs, w_o):
    """Concatenate per-head [C_h, H, W] maps on the channel axis, project with w_o."""
    if not head_outputs:
        raise ShapeError("multi_head_combine needs at least one head")
    spatial = head_outputs[0].shape[1:]
    for t in head_outputs[1:]:
        if t.shape[1:] != spatial:
            raise ShapeError(f"head spatial shapes differ: {t.shape[1:]} vs {spatial}")
    stacked = concat(head_outputs, axis=0)  # [C_total, H, W]
    c_total = stacked.shape[0]
    h, w = spatial
    flat = reshape(transpose(stacked, (1, 2, 0)), (h * w, c_total))
    wo = w_o.tensor if isinstance(w_o, Parameter) else w_o
    out = matmul(flat, wo)
    return transpose(reshape(out, (h, w, wo.shape[1])), (2, 0, 1))


def full_attention_2d(x, w_q, w_k, w_v, w_o=None, heads=1):
    """Quadratic-cost 2D self-attention over a [C, H, W] tensor.

    Every output position pools values from all H*W positions with a
    softmax over the full grid.  Reference/oracle implementation; cost is
    O(H^2 W^2) so keep inputs small.
    """
    if x.ndim != 3:
        raise ShapeError(f"full_attention_2d expects [C, H, W], got {x.shape}")
    c, h, w = x.shape
    wq = w_q.tensor if isinstance(w_q, Parameter) else w_q
    wk = w_k.tensor if isinstance(w_k, Parameter) else w_k
    wv = w_v.tensor if isinstance(w_v, Parameter) else w_v
    c_out = wq.shape[1]
    if c_out % heads != 0:
        raise ConfigError(f"channels_out={c_out} not divisible by heads={heads}")
    d = c_out // heads
    p = h * w
    flat = reshape(transpose(x, (1, 2, 0)), (p, c))
    q = reshape(matmul(flat, wq), (p, heads, d))
    k = reshape(matmul(flat, wk), (p, heads, d))
    v = reshape(matmul(flat, wv), (p, heads, d))
    q = transpose(q, (1, 0, 2))  # [heads, P, d]
    k = transpose(k, (1, 0, 2))
    v = transpose(v, (1, 0, 2))
    logits = matmul(q, transpose(k, (0, 2, 1)))  # [heads, P, P]
    attn = softmax(logits, axis=-1)
    y = matmul(attn, v)  # [heads, P, d]
    y = reshape(transpose(y, (1, 0, 2)), (p, c_out))
    if w_o is not None:
        wo = w_o.tensor if isinstance(w_o, Parameter) else w_o
        y = matmul(y, wo)
        c_out = wo.shape[1]
    return transpose(reshape(y, (h, w, c_out)), (2, 0, 1))
