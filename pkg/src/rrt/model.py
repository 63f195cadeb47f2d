"""Transformer pair scorer over global + local descriptors.

A pair of images becomes one token sequence

    [CLS; g(A); locals(A) 1..L; SEP; g(B); locals(B) 1..L]

where the global token is the projected global descriptor plus a segment
embedding, and every local token is the local descriptor plus its scale
embedding and a segment embedding (plus an optional fixed sinusoidal position
code).  Images with fewer than L locals are padded with zero tokens excluded
via the attention mask.  The sequence runs through C identical transformer
layers; a linear head on the final CLS row yields the match logit.

Checkpoint wire format (little-endian), extension ``.rrtm``:

    magic "RRTM" | u32 version=1
    config: u32 L | u16 d | u8 h | u8 d_h | u8 C | u16 d_c | u8 n_scales
            | u32 d_g_raw | u8 flags (bit0 pos_embed, bit1 global_token,
                                      bit2 scale_embed, bit3 mlp_residual)
    u16 tensor count, then per tensor:
            u8 name_len | name (ASCII) | u8 ndim | ndim x u32 dims | f32 data
"""

from __future__ import annotations

import struct
import weakref
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autograd as ag
from .autograd import Tensor
from .data import ImageRecord
from .errors import ConfigError, DataFormatError, IntegrityError

__all__ = [
    "ModelConfig",
    "ModelParams",
    "TokenSequence",
    "init_params",
    "param_shapes",
    "param_count",
    "assemble_input",
    "mha_forward",
    "transformer_layer",
    "forward_pair_logits",
    "score_pair",
    "score_batch",
    "attention_correspondences",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"RRTM"
CKPT_VERSION = 1
LAYERNORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    L: int = 500          # max locals per image
    d: int = 128          # token dimension
    h: int = 4            # attention heads
    d_h: int = 32         # per-head dimension
    layers: int = 6
    d_c: int = 1024       # MLP hidden dimension
    n_scales: int = 7
    d_g_raw: int = 2048   # raw global descriptor dimension
    use_pos_embed: bool = False
    use_global_token: bool = True
    use_scale_embed: bool = True
    mlp_residual: bool = False

    def __post_init__(self):
        if self.h * self.d_h != self.d:
            raise ConfigError(f"h*d_h = {self.h * self.d_h} must equal d = {self.d}")
        for name in ("L", "d", "h", "d_h", "layers", "d_c", "n_scales", "d_g_raw"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.use_pos_embed and self.d % 4 != 0:
            raise ConfigError("position encoding needs d divisible by 4")

    @property
    def seq_len(self) -> int:
        per_image = self.L + (1 if self.use_global_token else 0)
        return 2 + 2 * per_image


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], tuple]]:
    """Ordered (name, shape, init spec) table; the single source of truth for
    parameter layout, initialization, counting and checkpoints."""
    out = []
    for i in range(cfg.layers):
        p = f"layers.{i}."
        for nm in ("wq", "wk", "wv", "wo"):
            out.append((p + nm, (cfg.d, cfg.d), ("uniform", cfg.d)))
            out.append((p + "b" + nm[1:], (cfg.d,), ("zeros",)))
        out.append((p + "ln1_g", (cfg.d,), ("ones",)))
        out.append((p + "ln1_b", (cfg.d,), ("zeros",)))
        out.append((p + "w1", (cfg.d, cfg.d_c), ("uniform", cfg.d)))
        out.append((p + "b1", (cfg.d_c,), ("zeros",)))
        out.append((p + "w2", (cfg.d_c, cfg.d), ("uniform", cfg.d_c)))
        out.append((p + "b2", (cfg.d,), ("zeros",)))
        out.append((p + "ln2_g", (cfg.d,), ("ones",)))
        out.append((p + "ln2_b", (cfg.d,), ("zeros",)))
    if cfg.use_global_token:
        out.append(("global_proj.w", (cfg.d_g_raw, cfg.d), ("uniform", cfg.d_g_raw)))
        out.append(("global_proj.b", (cfg.d,), ("zeros",)))
    out.append(("head.w", (cfg.d,), ("uniform", cfg.d)))
    out.append(("head.b", (1,), ("zeros",)))
    out.append(("tok.cls", (cfg.d,), ("normal", 0.02)))
    out.append(("tok.sep", (cfg.d,), ("normal", 0.02)))
    if cfg.use_global_token:
        out.append(("seg.global_a", (cfg.d,), ("normal", 0.02)))
        out.append(("seg.global_b", (cfg.d,), ("normal", 0.02)))
    out.append(("seg.local_a", (cfg.d,), ("normal", 0.02)))
    out.append(("seg.local_b", (cfg.d,), ("normal", 0.02)))
    if cfg.use_scale_embed:
        out.append(("scale_embed.table", (cfg.n_scales, cfg.d), ("normal", 0.02)))
    return out


def param_count(cfg: ModelConfig) -> int:
    """Exact learnable-scalar count for a configuration."""
    return sum(int(np.prod(shape)) for _, shape, _ in param_shapes(cfg))


class _LayerView:
    __slots__ = (
        "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
        "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
    )

    def __init__(self, tensors: dict, i: int):
        p = f"layers.{i}."
        for nm in self.__slots__:
            setattr(self, nm, tensors[p + nm])


class ModelParams:
    """All learnable tensors, keyed by dotted names in a fixed order."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        expected = [name for name, _, _ in param_shapes(cfg)]
        if list(tensors.keys()) != expected:
            raise IntegrityError("parameter names do not match the config's layout")
        for name, shape, _ in param_shapes(cfg):
            if tuple(tensors[name].shape) != shape:
                raise IntegrityError(
                    f"tensor {name} has shape {tuple(tensors[name].shape)}, config implies {shape}"
                )
        self.tensors = tensors
        self._layers = [_LayerView(tensors, i) for i in range(cfg.layers)]

    def named(self):
        return self.tensors.items()

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def layer(self, i: int) -> _LayerView:
        return self._layers[i]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def astype(self, dtype, cfg: ModelConfig) -> "ModelParams":
        return ModelParams(
            cfg, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Fresh parameters: uniform(+-1/sqrt(fan_in)) weights, zero biases, unit
    LayerNorm gains, N(0, 0.02^2) token/segment/scale embeddings."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape, spec in param_shapes(cfg):
        if spec[0] == "uniform":
            bound = 1.0 / np.sqrt(spec[1])
            data = rng.uniform(-bound, bound, size=shape)
        elif spec[0] == "zeros":
            data = np.zeros(shape)
        elif spec[0] == "ones":
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, spec[1], size=shape)
        tensors[name] = Tensor(data.astype(np.float32), requires_grad=True)
    return ModelParams(cfg, tensors)


# -- input assembly -------------------------------------------------------


@dataclass
class TokenSequence:
    tokens: Tensor                       # [T, d]
    valid_mask: np.ndarray               # bool[T]
    kinds: list[tuple[str, Optional[int]]]  # token index -> (kind, local index)


def _position_code(positions: np.ndarray, d: int) -> np.ndarray:
    """Fixed sinusoidal 2-D code: half the channels encode u, half encode v,
    classic sin/cos ladder with temperature 10000 on raw pixel coordinates."""
    half = d // 2
    quarter = half // 2
    freqs = 10000.0 ** (np.arange(quarter) / quarter)
    out = np.zeros((positions.shape[0], d))
    for axis in range(2):
        coords = positions[:, axis : axis + 1] / freqs
        base = axis * half
        out[:, base : base + quarter] = np.sin(coords)
        out[:, base + quarter : base + half] = np.cos(coords)
    return out


def _image_tokens(params, cfg, rec: ImageRecord, barred: bool, dtype):
    """Token block and metadata for one image inside a pair sequence."""
    pieces: list[Tensor] = []
    mask: list[bool] = []
    kinds: list[tuple[str, Optional[int]]] = []
    side = "b" if barred else "a"

    if cfg.use_global_token:
        g = np.asarray(rec.global_desc, dtype=dtype)
        if g.shape != (cfg.d_g_raw,):
            raise ConfigError(
                f"record {rec.id}: global dim {g.shape[0]} but model expects {cfg.d_g_raw}"
            )
        seg = params[f"seg.global_{side}"]
        proj = ag.affine(Tensor(g[None, :]), params["global_proj.w"], params["global_proj.b"])
        pieces.append(ag.add(proj, seg))
        mask.append(True)
        kinds.append((f"global_{side}", None))

    n_loc = len(rec.locals)
    if n_loc > cfg.L:
        raise ConfigError(
            f"record {rec.id} has {n_loc} locals but the model takes at most {cfg.L}; "
            "truncate at load time"
        )
    if n_loc:
        mat = rec.locals_matrix().astype(dtype)
        if mat.shape[1] != cfg.d:
            raise ConfigError(
                f"record {rec.id}: local dim {mat.shape[1]} but model dim is {cfg.d}"
            )
        sidx = rec.scale_indices()
        if np.any(sidx >= cfg.n_scales) or np.any(sidx < 0):
            raise ConfigError(
                f"record {rec.id}: scale index outside [0, {cfg.n_scales})"
            )
        x = Tensor(mat)
        if cfg.use_scale_embed:
            x = ag.add(x, ag.embedding(params["scale_embed.table"], sidx))
        if cfg.use_pos_embed:
            x = ag.add(x, Tensor(_position_code(rec.positions(), cfg.d).astype(dtype)))
        x = ag.add(x, params[f"seg.local_{side}"])
        pieces.append(x)
        mask.extend([True] * n_loc)
        kinds.extend((f"local_{side}", i) for i in range(n_loc))
    if n_loc < cfg.L:
        pieces.append(Tensor(np.zeros((cfg.L - n_loc, cfg.d), dtype=dtype)))
        mask.extend([False] * (cfg.L - n_loc))
        kinds.extend(("pad", None) for _ in range(cfg.L - n_loc))
    return pieces, mask, kinds


def _pair_tokens(params, cfg, a: ImageRecord, b: ImageRecord, dtype):
    d = cfg.d
    pieces = [ag.reshape(params["tok.cls"], (1, d))]
    mask = [True]
    kinds: list[tuple[str, Optional[int]]] = [("cls", None)]

    pa, ma, ka = _image_tokens(params, cfg, a, barred=False, dtype=dtype)
    pieces += pa
    mask += ma
    kinds += ka

    pieces.append(ag.reshape(params["tok.sep"], (1, d)))
    mask.append(True)
    kinds.append(("sep", None))

    pb, mb, kb = _image_tokens(params, cfg, b, barred=True, dtype=dtype)
    pieces += pb
    mask += mb
    kinds += kb

    return ag.concat(pieces, axis=0), np.asarray(mask, dtype=bool), kinds


def assemble_input(params: ModelParams, cfg: ModelConfig, a: ImageRecord, b: ImageRecord) -> TokenSequence:
    """Build the pair token sequence for (a, b); records must be normalized."""
    dtype = params["tok.cls"].dtype
    tokens, mask, kinds = _pair_tokens(params, cfg, a, b, dtype)
    return TokenSequence(tokens, mask, kinds)


# -- transformer ----------------------------------------------------------


def mha_forward(layer, cfg: ModelConfig, z: Tensor, mask: np.ndarray, return_attn: bool = False):
    """Multi-head self-attention; mask marks valid key positions.

    z is [T, d] or [B, T, d].  Returns (output, attention or None); the
    attention array is [B, h, T, T], post-softmax.
    """
    squeeze = z.ndim == 2
    if squeeze:
        z = ag.reshape(z, (1,) + tuple(z.shape))
        mask = np.asarray(mask, dtype=bool)[None, :]
    B, T, d = z.shape
    h, dh = cfg.h, cfg.d_h

    def heads(t):
        return ag.swapaxes(ag.reshape(t, (B, T, h, dh)), 1, 2)  # [B,h,T,dh]

    q = heads(ag.affine(z, layer.wq, layer.bq))
    k = heads(ag.affine(z, layer.wk, layer.bk))
    v = heads(ag.affine(z, layer.wv, layer.bv))

    logits = ag.scale(ag.matmul(q, ag.swapaxes(k, 2, 3)), 1.0 / np.sqrt(dh))
    attn = ag.masked_softmax_lastdim(logits, mask[:, None, None, :])
    ctx = ag.reshape(ag.swapaxes(ag.matmul(attn, v), 1, 2), (B, T, d))
    out = ag.affine(ctx, layer.wo, layer.bo)
    if squeeze:
        out = ag.reshape(out, (T, d))
    return out, (attn.data if return_attn else None)


def transformer_layer(layer, cfg: ModelConfig, z: Tensor, mask: np.ndarray, return_attn: bool = False):
    """One block: post-norm attention, then a two-layer MLP.

    The MLP has no residual connection by default; set mlp_residual for the
    conventional variant.
    """
    att, attn_w = mha_forward(layer, cfg, z, mask, return_attn)
    zbar = ag.layer_norm(ag.add(z, att), layer.ln1_g, layer.ln1_b, LAYERNORM_EPS)
    hidden = ag.relu(ag.affine(zbar, layer.w1, layer.b1))
    mlp = ag.affine(hidden, layer.w2, layer.b2)
    body = ag.add(zbar, mlp) if cfg.mlp_residual else mlp
    out = ag.layer_norm(body, layer.ln2_g, layer.ln2_b, LAYERNORM_EPS)
    return out, attn_w


_RECORD_ARRAYS: "weakref.WeakKeyDictionary[ImageRecord, tuple]" = weakref.WeakKeyDictionary()


def _record_arrays(rec: ImageRecord):
    """(locals matrix, scale indices, positions), cached per record; records
    are immutable after load by contract."""
    got = _RECORD_ARRAYS.get(rec)
    if got is None:
        got = (rec.locals_matrix(), rec.scale_indices(), rec.positions())
        _RECORD_ARRAYS[rec] = got
    return got


def _gather_side(cfg: ModelConfig, records: Sequence[ImageRecord], dtype):
    """Stacked raw inputs for one side of the batch: padded local matrices,
    scale indices (0 at pads), local valid mask, raw globals."""
    B, L = len(records), cfg.L
    locals_mat = np.zeros((B, L, cfg.d), dtype=dtype)
    sidx = np.zeros((B, L), dtype=np.intp)
    lmask = np.zeros((B, L), dtype=bool)
    globals_mat = np.zeros((B, cfg.d_g_raw), dtype=dtype)
    for bi, rec in enumerate(records):
        n = len(rec.locals)
        if n > cfg.L:
            raise ConfigError(
                f"record {rec.id} has {n} locals but the model takes at most {cfg.L}; "
                "truncate at load time"
            )
        if cfg.use_global_token:
            g = np.asarray(rec.global_desc, dtype=dtype)
            if g.shape != (cfg.d_g_raw,):
                raise ConfigError(
                    f"record {rec.id}: global dim {g.shape[0]} but model expects {cfg.d_g_raw}"
                )
            globals_mat[bi] = g
        if n:
            mat, si, pos = _record_arrays(rec)
            if mat.shape[1] != cfg.d:
                raise ConfigError(
                    f"record {rec.id}: local dim {mat.shape[1]} but model dim is {cfg.d}"
                )
            if np.any(si >= cfg.n_scales) or np.any(si < 0):
                raise ConfigError(
                    f"record {rec.id}: scale index outside [0, {cfg.n_scales})"
                )
            locals_mat[bi, :n] = mat.astype(dtype)
            sidx[bi, :n] = si
            lmask[bi, :n] = True
            if cfg.use_pos_embed:
                locals_mat[bi, :n] += _position_code(pos, cfg.d).astype(dtype)
    return locals_mat, sidx, lmask, globals_mat


def _local_block(params, cfg: ModelConfig, side: str, locals_mat, sidx, lmask) -> Tensor:
    """[B, L, d] local tokens: raw vectors + scale embedding + segment
    embedding, zeroed at pad slots so padding stays inert."""
    x = Tensor(locals_mat)
    if cfg.use_scale_embed:
        x = ag.add(x, ag.embedding(params["scale_embed.table"], sidx))
    x = ag.add(x, params[f"seg.local_{side}"])
    return ag.mul(x, Tensor(lmask[..., None].astype(locals_mat.dtype)))


def _tile_token(tok: Tensor, B: int, dtype) -> Tensor:
    d = tok.shape[0]
    return ag.add(Tensor(np.zeros((B, 1, d), dtype=dtype)), ag.reshape(tok, (1, 1, d)))


def _assemble_batch(params: ModelParams, cfg: ModelConfig, pairs, dtype):
    """Whole-batch token assembly: a handful of batched graph ops instead of
    per-pair concatenation, same layout and values as assemble_input."""
    B = len(pairs)
    la, sa, ma, ga = _gather_side(cfg, [p[0] for p in pairs], dtype)
    lb, sb, mb, gb = _gather_side(cfg, [p[1] for p in pairs], dtype)

    blocks = [_tile_token(params["tok.cls"], B, dtype)]
    mask_cols = [np.ones((B, 1), dtype=bool)]
    if cfg.use_global_token:
        proj_a = ag.affine(Tensor(ga), params["global_proj.w"], params["global_proj.b"])
        blocks.append(ag.reshape(ag.add(proj_a, params["seg.global_a"]), (B, 1, cfg.d)))
        mask_cols.append(np.ones((B, 1), dtype=bool))
    blocks.append(_local_block(params, cfg, "a", la, sa, ma))
    mask_cols.append(ma)

    blocks.append(_tile_token(params["tok.sep"], B, dtype))
    mask_cols.append(np.ones((B, 1), dtype=bool))
    if cfg.use_global_token:
        proj_b = ag.affine(Tensor(gb), params["global_proj.w"], params["global_proj.b"])
        blocks.append(ag.reshape(ag.add(proj_b, params["seg.global_b"]), (B, 1, cfg.d)))
        mask_cols.append(np.ones((B, 1), dtype=bool))
    blocks.append(_local_block(params, cfg, "b", lb, sb, mb))
    mask_cols.append(mb)

    return ag.concat(blocks, axis=1), np.concatenate(mask_cols, axis=1)


def forward_pair_logits(
    params: ModelParams,
    cfg: ModelConfig,
    pairs: Sequence[tuple[ImageRecord, ImageRecord]],
    collect_attention: bool = False,
):
    """Logits for a batch of record pairs in one forward pass.

    Returns (logits Tensor [B], attention of the last layer or None).
    Gradients flow if recording is enabled.
    """
    if not pairs:
        raise ValueError("forward_pair_logits needs at least one pair")
    dtype = params["tok.cls"].dtype
    z, mask = _assemble_batch(params, cfg, pairs, dtype)

    attn = None
    for i in range(cfg.layers):
        want = collect_attention and i == cfg.layers - 1
        z, a = transformer_layer(params.layer(i), cfg, z, mask, return_attn=want)
        if want:
            attn = a

    cls = z[:, 0, :]
    head = ag.reshape(params["head.w"], (cfg.d, 1))
    logits = ag.reshape(ag.affine(cls, head, params["head.b"]), (len(pairs),))
    return logits, attn


def score_pair(params: ModelParams, cfg: ModelConfig, a: ImageRecord, b: ImageRecord) -> tuple[float, float]:
    """(logit, sigmoid similarity) for one ordered pair; inference mode."""
    with ag.no_grad():
        logits, _ = forward_pair_logits(params, cfg, [(a, b)])
    return float(logits.data[0]), float(ag._sigmoid(logits.data)[0])


def _auto_chunk(cfg: ModelConfig) -> int:
    # Bound the [B, h, T, T] attention buffer to roughly 2^26 floats.
    per_pair = cfg.h * cfg.seq_len * cfg.seq_len
    return max(1, (1 << 26) // max(per_pair, 1))


def score_batch(
    params: ModelParams,
    cfg: ModelConfig,
    query: ImageRecord,
    candidates: Sequence[ImageRecord],
    chunk: int | None = None,
) -> list[float]:
    """Similarity of (query, c) for every candidate; equals mapping
    score_pair within float tolerance.  Chunked to bound peak memory."""
    if not candidates:
        return []
    if chunk is None:
        chunk = _auto_chunk(cfg)
    sims: list[float] = []
    with ag.no_grad():
        for start in range(0, len(candidates), chunk):
            batch = [(query, c) for c in candidates[start : start + chunk]]
            logits, _ = forward_pair_logits(params, cfg, batch)
            sims.extend(float(s) for s in ag._sigmoid(logits.data))
    return sims


def max_weight_assignment(affinity: np.ndarray) -> list[tuple[int, int]]:
    """Exact maximum-weight one-to-one assignment on a (possibly rectangular)
    affinity matrix; returns (row, col) pairs sorted by row."""
    ri, ci = linear_sum_assignment(affinity, maximize=True)
    return sorted(zip(ri.tolist(), ci.tolist()))


def attention_correspondences(
    params: ModelParams, cfg: ModelConfig, a: ImageRecord, b: ImageRecord
) -> list[tuple[int, int, float]]:
    """One-to-one local matches from the last layer's attention.

    Head-averaged post-softmax attention from a's local tokens (rows) to b's
    local tokens (columns) is used as the affinity of an exact maximum-weight
    assignment.  Returns (index in a.locals, index in b.locals, affinity),
    sorted by the first index; empty if either image has no locals.
    """
    na, nb = len(a.locals), len(b.locals)
    if na == 0 or nb == 0:
        return []
    with ag.no_grad():
        _, attn = forward_pair_logits(params, cfg, [(a, b)], collect_attention=True)
    m = attn[0].mean(axis=0)  # [T, T]
    g = 1 if cfg.use_global_token else 0
    base_a = 1 + g
    base_b = 1 + g + cfg.L + 1 + g
    rows = np.arange(base_a, base_a + na)
    cols = np.arange(base_b, base_b + nb)
    affinity = m[np.ix_(rows, cols)]
    return [(i, j, float(affinity[i, j])) for i, j in max_weight_assignment(affinity)]


# -- checkpoints ----------------------------------------------------------

_CFG_STRUCT = "<IHBBBHBIB"


def _flags(cfg: ModelConfig) -> int:
    return (
        (1 if cfg.use_pos_embed else 0)
        | (2 if cfg.use_global_token else 0)
        | (4 if cfg.use_scale_embed else 0)
        | (8 if cfg.mlp_residual else 0)
    )


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path) -> None:
    """Write config and all tensors; data is stored as f32."""
    buf = bytearray()
    buf += CKPT_MAGIC
    buf += struct.pack("<I", CKPT_VERSION)
    buf += struct.pack(
        _CFG_STRUCT,
        cfg.L, cfg.d, cfg.h, cfg.d_h, cfg.layers, cfg.d_c,
        cfg.n_scales, cfg.d_g_raw, _flags(cfg),
    )
    named = list(params.named())
    buf += struct.pack("<H", len(named))
    for name, t in named:
        nb = name.encode("ascii")
        buf += struct.pack("<B", len(nb))
        buf += nb
        buf += struct.pack("<B", t.ndim)
        buf += struct.pack(f"<{t.ndim}I", *t.shape)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(buf)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise IntegrityError(
                f"truncated checkpoint: wanted {n} bytes at offset {off}, "
                f"{len(raw) - off} left"
            )
        out = raw[off : off + n]
        off += n
        return out

    if take(4) != CKPT_MAGIC:
        raise DataFormatError(f"bad checkpoint magic, expected {CKPT_MAGIC!r}", offset=0)
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
    L, d, h, d_h, layers, d_c, n_scales, d_g_raw, flags = struct.unpack(
        _CFG_STRUCT, take(struct.calcsize(_CFG_STRUCT))
    )
    cfg = ModelConfig(
        L=L, d=d, h=h, d_h=d_h, layers=layers, d_c=d_c,
        n_scales=n_scales, d_g_raw=d_g_raw,
        use_pos_embed=bool(flags & 1),
        use_global_token=bool(flags & 2),
        use_scale_embed=bool(flags & 4),
        mlp_residual=bool(flags & 8),
    )
    (count,) = struct.unpack("<H", take(2))
    expected = param_shapes(cfg)
    if count != len(expected):
        raise IntegrityError(
            f"checkpoint holds {count} tensors, config implies {len(expected)}"
        )
    tensors: dict[str, Tensor] = {}
    for exp_name, exp_shape, _ in expected:
        (nlen,) = struct.unpack("<B", take(1))
        name = take(nlen).decode("ascii")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        data = np.frombuffer(take(4 * int(np.prod(dims))), dtype="<f4").reshape(dims).copy()
        if name != exp_name or tuple(dims) != exp_shape:
            raise IntegrityError(
                f"tensor {name} with shape {tuple(dims)} does not match the "
                f"config's layout entry {exp_name} {exp_shape}"
            )
        tensors[name] = Tensor(data, requires_grad=True)
    if off != len(raw):
        raise IntegrityError(f"{len(raw) - off} trailing bytes after the tensor table")
    return ModelParams(cfg, tensors), cfg
