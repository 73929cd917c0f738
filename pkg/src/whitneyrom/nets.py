"""Conditional cross-attention networks for shape functions and pair fluxes.

Both networks share one backbone: a decoder-style transformer made only of
cross-attention blocks.  Each block attends from the input tokens to a single
conditioning token (the embedded Z vector), then applies a x2-expanding
feed-forward layer; both sub-layers are pre-layer-norm residual branches whose
output projections start at zero, so a freshly initialized block is the
identity map.  With one conditioning token the attention weights are
identically 1 and the per-block cost is linear in the number of tokens.

ShapeFunctionModel: spatial point (plus Z) -> logits over the interior
partitions -> softmax rows on the probability simplex.  GELU activations,
dropout (explicit masks) after the feed-forward activation.

PairwiseFluxModel: one token per canonical partition pair, built by embedding
(u_p, u_q, directed pair area) and projecting the concatenation to the embed
width; the same weights serve every pair.  Tanh activations, no dropout, and
a zero-initialized head so the untrained flux is exactly zero.

The diffusion amplitude lives here too: epsilon = softplus(s_eps), one scalar
per field, initialized so epsilon = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from numpy.typing import NDArray
from scipy import sparse

from . import autodiff as ad
from .autodiff import Tape, Tensor

__all__ = [
    "ModelConfig",
    "ModelParams",
    "init_params",
    "bind_params",
    "cross_attn_block",
    "shape_function_forward",
    "boundary_forward",
    "pairwise_flux_forward",
    "flux_from_pair_features",
    "epsilon_of",
    "S_EPS_FOR_UNIT_EPSILON",
]

# softplus(s) = 1  <=>  s = ln(e - 1)
S_EPS_FOR_UNIT_EPSILON = math.log(math.e - 1.0)


@dataclass(frozen=True)
class ModelConfig:
    """Shared hyperparameters for the shape / flux / boundary networks."""

    in_dim: int
    z_dim: int
    m_int: int
    n_fields: int = 1
    area_dim: int = 1
    embed_dim: int = 128
    n_heads: int = 4
    ffn_factor: int = 2
    shape_blocks: int = 2
    flux_blocks: int = 3
    m_bnd_head: int = 0
    bnd_blocks: int = 2
    dropout_rate: float = 0.1
    shape_head_init: str = "fanin"  # "fanin" | "zero"
    head_mode: str = "softmax"  # "softmax" | "linear"
    with_flux: bool = True
    fourier_features: int = 0

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.shape_head_init not in ("fanin", "zero"):
            raise ValueError(f"unknown shape_head_init {self.shape_head_init!r}")
        if self.head_mode not in ("softmax", "linear"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_factor * self.embed_dim


@dataclass
class ModelParams:
    """Named parameter arrays plus their config.  Iteration order is fixed."""

    config: ModelConfig
    arrays: dict[str, NDArray]
    constant_names: frozenset = frozenset()

    def n_params(self) -> int:
        return sum(a.size for k, a in self.arrays.items() if k not in self.constant_names)

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            arrays={k: v.copy() for k, v in self.arrays.items()},
            constant_names=self.constant_names,
        )

    def flat(self) -> NDArray:
        return np.concatenate(
            [self.arrays[k].ravel() for k in self.arrays if k not in self.constant_names]
        )

    def with_flat(self, vec: NDArray) -> "ModelParams":
        out = self.copy()
        off = 0
        for k in out.arrays:
            if k in out.constant_names:
                continue
            n = out.arrays[k].size
            out.arrays[k] = vec[off : off + n].reshape(out.arrays[k].shape).copy()
            off += n
        if off != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, params need {off}")
        return out


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> NDArray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_block(rng, arrays, prefix: str, cfg: ModelConfig) -> None:
    e = cfg.embed_dim
    arrays[f"{prefix}.ln1.g"] = np.ones(e)
    arrays[f"{prefix}.ln1.b"] = np.zeros(e)
    for name in ("wq", "wk", "wv"):
        arrays[f"{prefix}.attn.{name}"] = _uniform(rng, e, (e, e))
        arrays[f"{prefix}.attn.b{name[1]}"] = np.zeros(e)
    arrays[f"{prefix}.attn.wo"] = np.zeros((e, e))  # residual branch: identity start
    arrays[f"{prefix}.attn.bo"] = np.zeros(e)
    arrays[f"{prefix}.ln2.g"] = np.ones(e)
    arrays[f"{prefix}.ln2.b"] = np.zeros(e)
    arrays[f"{prefix}.ffn.w1"] = _uniform(rng, e, (e, cfg.ffn_dim))
    arrays[f"{prefix}.ffn.b1"] = np.zeros(cfg.ffn_dim)
    arrays[f"{prefix}.ffn.w2"] = np.zeros((cfg.ffn_dim, e))  # residual branch
    arrays[f"{prefix}.ffn.b2"] = np.zeros(e)


def _init_trunk_io(rng, arrays, net: str, in_dim: int, cfg: ModelConfig) -> None:
    e = cfg.embed_dim
    arrays[f"{net}.embed_x.w"] = _uniform(rng, in_dim, (in_dim, e))
    arrays[f"{net}.embed_x.b"] = np.zeros(e)
    arrays[f"{net}.embed_z.w"] = _uniform(rng, cfg.z_dim, (cfg.z_dim, e))
    arrays[f"{net}.embed_z.b"] = np.zeros(e)


def _init_trunk_out(rng, arrays, net: str, width: int, cfg: ModelConfig, zero_head: bool) -> None:
    e = cfg.embed_dim
    arrays[f"{net}.final_ln.g"] = np.ones(e)
    arrays[f"{net}.final_ln.b"] = np.zeros(e)
    if zero_head:
        arrays[f"{net}.head.w"] = np.zeros((e, width))
    else:
        arrays[f"{net}.head.w"] = _uniform(rng, e, (e, width))
    arrays[f"{net}.head.b"] = np.zeros(width)


def init_params(seed: int, config: ModelConfig) -> ModelParams:
    """Fresh parameters: fan-in-uniform projections, zero residual outputs.

    The untrained model is an "identity start": every block passes tokens
    through unchanged, the flux head is zero (so the nonlinearity vanishes),
    and epsilon = 1.  With ``shape_head_init="zero"`` the shape head also
    starts at zero, giving exactly uniform partitions; the default "fanin"
    head breaks that symmetry (exactly uniform interior partitions make the
    interior Laplacian block rank one, which is useless as a Newton start and
    freezes training in a permutation-symmetric saddle).
    """
    rng = np.random.default_rng(seed)
    arrays: dict[str, NDArray] = {}
    constants: set[str] = set()
    cfg = config

    in_dim_eff = cfg.in_dim + 2 * cfg.fourier_features
    if cfg.fourier_features > 0:
        arrays["shape.fourier.freq"] = rng.normal(
            0.0, 2.0 * math.pi, size=(cfg.in_dim, cfg.fourier_features)
        )
        constants.add("shape.fourier.freq")
    _init_trunk_io(rng, arrays, "shape", in_dim_eff, cfg)
    # overwrite embed_x fan-in with the effective input width
    arrays["shape.embed_x.w"] = _uniform(rng, in_dim_eff, (in_dim_eff, cfg.embed_dim))
    for i in range(cfg.shape_blocks):
        _init_block(rng, arrays, f"shape.block{i}", cfg)
    _init_trunk_out(rng, arrays, "shape", cfg.m_int, cfg, zero_head=(cfg.shape_head_init == "zero"))

    if cfg.with_flux:
        e = cfg.embed_dim
        arrays["flux.embed_u.w"] = _uniform(rng, cfg.n_fields, (cfg.n_fields, e))
        arrays["flux.embed_u.b"] = np.zeros(e)
        arrays["flux.embed_a.w"] = _uniform(rng, cfg.area_dim, (cfg.area_dim, e))
        arrays["flux.embed_a.b"] = np.zeros(e)
        arrays["flux.embed_z.w"] = _uniform(rng, cfg.z_dim, (cfg.z_dim, e))
        arrays["flux.embed_z.b"] = np.zeros(e)
        arrays["flux.token.w"] = _uniform(rng, 3 * e, (3 * e, e))
        arrays["flux.token.b"] = np.zeros(e)
        for i in range(cfg.flux_blocks):
            _init_block(rng, arrays, f"flux.block{i}", cfg)
        _init_trunk_out(rng, arrays, "flux", cfg.n_fields, cfg, zero_head=True)

    if cfg.m_bnd_head > 0:
        _init_trunk_io(rng, arrays, "bnd", cfg.in_dim, cfg)
        for i in range(cfg.bnd_blocks):
            _init_block(rng, arrays, f"bnd.block{i}", cfg)
        _init_trunk_out(rng, arrays, "bnd", cfg.m_bnd_head, cfg, zero_head=False)

    arrays["s_eps"] = np.full(cfg.n_fields, S_EPS_FOR_UNIT_EPSILON)
    return ModelParams(config=cfg, arrays=arrays, constant_names=frozenset(constants))


def bind_params(tape: Tape, params: ModelParams, trainable: bool = True) -> dict[str, Tensor]:
    """Put every parameter array on a tape (constants stay non-trainable)."""
    return {
        k: tape.tensor(v, requires_grad=trainable and k not in params.constant_names)
        for k, v in params.arrays.items()
    }


def epsilon_of(pt: Mapping[str, Tensor]) -> Tensor:
    """epsilon = softplus(s_eps) > 0, one entry per field."""
    return ad.softplus(pt["s_eps"])


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _linear(x: Tensor, pt, wname: str, bname: str) -> Tensor:
    return ad.add(ad.matmul(x, pt[wname]), pt[bname])


def _mha(tokens: Tensor, z_tok: Tensor, pt, prefix: str, cfg: ModelConfig) -> Tensor:
    """Multi-head cross-attention from tokens to the single conditioning token.

    With one key the softmax is identically 1 and every token receives the
    value projection of the conditioning token; the query/key projections
    still shape the graph but get exactly zero gradient, which is the honest
    consequence of a single-token attention span.
    """
    q = _linear(tokens, pt, f"{prefix}.attn.wq", f"{prefix}.attn.bq")
    k = _linear(z_tok, pt, f"{prefix}.attn.wk", f"{prefix}.attn.bk")
    v = _linear(z_tok, pt, f"{prefix}.attn.wv", f"{prefix}.attn.bv")
    dh = cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(cfg.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh = ad.slice_(q, (slice(None), cols))
        kh = ad.slice_(k, (slice(None), cols))
        vh = ad.slice_(v, (slice(None), cols))
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), scale)
        attn = ad.softmax_lastdim(scores)  # (n_tokens, 1)
        outs.append(ad.matmul(attn, vh))
    merged = ad.concat(outs, axis=1)
    return _linear(merged, pt, f"{prefix}.attn.wo", f"{prefix}.attn.bo")


def _ln(x: Tensor, pt, name: str) -> Tensor:
    return ad.layer_norm_lastdim(x, pt[f"{name}.g"], pt[f"{name}.b"])


def _ffn(tokens: Tensor, pt, prefix: str, act, dropout_mask) -> Tensor:
    h = act(_linear(tokens, pt, f"{prefix}.ffn.w1", f"{prefix}.ffn.b1"))
    if dropout_mask is not None:
        h = ad.dropout(h, dropout_mask)
    return _linear(h, pt, f"{prefix}.ffn.w2", f"{prefix}.ffn.b2")


def cross_attn_block(
    tokens: Tensor,
    z_token: Tensor,
    pt: Mapping[str, Tensor],
    prefix: str,
    cfg: ModelConfig,
    act,
    dropout_mask=None,
) -> Tensor:
    """Pre-LN residual block: tokens + MHA(LN(tokens), z), then + FFN(LN(.))."""
    tokens = ad.add(tokens, _mha(_ln(tokens, pt, f"{prefix}.ln1"), z_token, pt, prefix, cfg))
    tokens = ad.add(tokens, _ffn(_ln(tokens, pt, f"{prefix}.ln2"), pt, prefix, act, dropout_mask))
    return tokens


def _trunk(
    tape: Tape,
    tokens: Tensor,
    z_tok: Tensor,
    pt,
    net: str,
    n_blocks: int,
    cfg: ModelConfig,
    act,
    dropout_masks=None,
) -> Tensor:
    for i in range(n_blocks):
        mask = None
        if dropout_masks is not None:
            m = dropout_masks[i]
            mask = tape.constant(m) if isinstance(m, np.ndarray) else m
        tokens = cross_attn_block(tokens, z_tok, pt, f"{net}.block{i}", cfg, act, mask)
    return _ln(tokens, pt, f"{net}.final_ln")


def _z_token(tape: Tape, z, pt, net: str) -> Tensor:
    z_row = tape.constant(np.atleast_2d(np.asarray(z, dtype=np.float64)))
    return _linear(z_row, pt, f"{net}.embed_z.w", f"{net}.embed_z.b")


def shape_function_forward(
    tape: Tape,
    points: NDArray,
    z,
    params: ModelParams,
    pt: Mapping[str, Tensor] | None = None,
    dropout_masks=None,
) -> Tensor:
    """(B x d) points -> (B x M) rows on the simplex (or raw head outputs
    when the config asks for a linear head)."""
    cfg = params.config
    if pt is None:
        pt = bind_params(tape, params, trainable=False)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] != cfg.in_dim:
        raise ValueError(f"points have dim {pts.shape[1]}, model expects {cfg.in_dim}")
    if cfg.fourier_features > 0:
        ang = pts @ params.arrays["shape.fourier.freq"]
        pts = np.concatenate([pts, np.cos(ang), np.sin(ang)], axis=1)
    tokens = _linear(tape.constant(pts), pt, "shape.embed_x.w", "shape.embed_x.b")
    z_tok = _z_token(tape, z, pt, "shape")
    tokens = _trunk(tape, tokens, z_tok, pt, "shape", cfg.shape_blocks, cfg, ad.gelu, dropout_masks)
    logits = _linear(tokens, pt, "shape.head.w", "shape.head.b")
    if cfg.head_mode == "softmax":
        return ad.softmax_lastdim(logits)
    return logits


def boundary_forward(tape: Tape, mesh, z, params: ModelParams, pt, layout) -> Tensor:
    """Masked-softmax boundary blocks for groups with more than one coarse DOF.

    Returns a full (m_total x n_nodes) tensor that is zero outside those
    blocks, ready to be added to the interior scatter.
    """
    cfg = params.config
    lay = layout
    multi = [g for g in lay.group_labels if lay.m_per_group[g] > 1]
    if not multi:
        raise ValueError("no boundary groups with more than one coarse DOF")
    if cfg.m_bnd_head != sum(lay.m_per_group[g] for g in multi):
        raise ValueError(
            f"boundary head width {cfg.m_bnd_head} does not match "
            f"{sum(lay.m_per_group[g] for g in multi)} multi-DOF boundary DOFs"
        )
    total = None
    off = 0  # offset into the boundary head outputs
    for g in multi:
        nodes = lay.group_nodes[g]
        mg = lay.m_per_group[g]
        tokens = _linear(
            tape.constant(mesh.nodes[nodes]), pt, "bnd.embed_x.w", "bnd.embed_x.b"
        )
        z_tok = _z_token(tape, z, pt, "bnd")
        tokens = _trunk(tape, tokens, z_tok, pt, "bnd", cfg.bnd_blocks, cfg, ad.gelu)
        logits_full = _linear(tokens, pt, "bnd.head.w", "bnd.head.b")
        # mask out the other groups' logits, softmax over this group's slice
        mask = np.full((1, cfg.m_bnd_head), -1e30)
        mask[0, off : off + mg] = 0.0
        rows = ad.softmax_lastdim(ad.add(logits_full, tape.constant(mask)))
        rows_own = ad.slice_(rows, (slice(None), slice(off, off + mg)))
        sl = lay.coarse_slice(g)
        r_csr = sparse.csr_array(
            (np.ones(mg), (np.arange(sl.start, sl.stop), np.arange(mg))),
            shape=(lay.m_total, mg),
        )
        c_csr = sparse.csr_array(
            (np.ones(len(nodes)), (np.arange(len(nodes)), nodes)),
            shape=(len(nodes), lay.n_nodes),
        )
        contrib = ad.spmm(r_csr, ad.rspmm(ad.transpose(rows_own), c_csr))
        total = contrib if total is None else ad.add(total, contrib)
        off += mg
    return total


def _pair_selectors(m: int, pairs: NDArray):
    p = len(pairs)
    sp = sparse.csr_array((np.ones(p), (np.arange(p), pairs[:, 0])), shape=(p, m))
    sq = sparse.csr_array((np.ones(p), (np.arange(p), pairs[:, 1])), shape=(p, m))
    return sp, sq


def flux_from_pair_features(
    tape: Tape,
    u_p: Tensor,
    u_q: Tensor,
    areas: Tensor,
    z,
    params: ModelParams,
    pt: Mapping[str, Tensor] | None = None,
    dropout_masks=None,
) -> Tensor:
    """The weight-shared pair network on explicit (u_p, u_q, area) features.

    Token per pair: Linear(concat(embed(u_p), embed(u_q), embed(area))); the
    trunk decodes against the Z token with Tanh feed-forwards; the head is
    zero-initialized so the untrained flux vanishes identically.
    """
    cfg = params.config
    if pt is None:
        pt = bind_params(tape, params, trainable=False)
    e_p = _linear(u_p, pt, "flux.embed_u.w", "flux.embed_u.b")
    e_q = _linear(u_q, pt, "flux.embed_u.w", "flux.embed_u.b")
    e_a = _linear(areas, pt, "flux.embed_a.w", "flux.embed_a.b")
    tokens = _linear(ad.concat([e_p, e_q, e_a], axis=1), pt, "flux.token.w", "flux.token.b")
    z_tok = _z_token(tape, z, pt, "flux")
    tokens = _trunk(tape, tokens, z_tok, pt, "flux", cfg.flux_blocks, cfg, ad.tanh, dropout_masks)
    return _linear(tokens, pt, "flux.head.w", "flux.head.b")


def pairwise_flux_forward(
    tape: Tape,
    u_hat,
    pair_areas,
    z,
    params: ModelParams,
    pt: Mapping[str, Tensor] | None = None,
    pairs: NDArray | None = None,
) -> Tensor:
    """(M x N_fields) coarse state -> (P x N_fields) pair flux coefficients.

    Pair features are gathered with constant selector matrices so the whole
    map stays on the tape (gradients flow into u_hat and the parameters).
    """
    from .complexes import canonical_pairs

    cfg = params.config
    if pt is None:
        pt = bind_params(tape, params, trainable=False)
    if not isinstance(u_hat, Tensor):
        arr = np.asarray(u_hat, dtype=np.float64)
        u_hat = tape.constant(arr[:, None] if arr.ndim == 1 else arr)
    m = u_hat.data.shape[0]
    if pairs is None:
        pairs = canonical_pairs(m)
    if len(pairs) != m * (m - 1) // 2:
        raise ValueError(f"{len(pairs)} pairs inconsistent with M={m}")
    if not isinstance(pair_areas, Tensor):
        pair_areas = tape.constant(np.atleast_2d(np.asarray(pair_areas, dtype=np.float64)))
    sp, sq = _pair_selectors(m, pairs)
    u_p = ad.spmm(sp, u_hat)
    u_q = ad.spmm(sq, u_hat)
    return flux_from_pair_features(tape, u_p, u_q, pair_areas, z, params, pt)
