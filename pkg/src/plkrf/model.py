"""Image-to-triplane transformer with line-distance attention bias."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from .errors import ConfigError, ContractError, DimensionError, GeometryError
from .geometry import Camera, DistanceBias, PluckerLine
from .renderer import TriplaneField, init_decoder
from .tensor import (Tensor, as_tensor, concat, gelu, layer_norm, matmul,
                     reshape, softmax_lastdim, softplus, transpose,
                     transposed_conv_2x)

GAMMA_INIT_RAW = float(np.log(np.expm1(1.0)))  # softplus(raw) == 1


@dataclass
class ModelConfig:
    """Architecture and ablation switches.

    Defaults are desk scale; :meth:`paper_scale` returns the published sizes
    (8 layers, width 512, 14 px patches, 384-d image features, M = 64).
    """

    layers: int = 8
    hidden_dim: int = 64
    heads: int = 8
    grid_size: int = 8
    triplane_dim: int = 16
    patch_size: int = 8
    image_feature_dim: int = 64
    ffn_ratio: int = 4
    decoder_hidden: int = 64
    bias_enabled: bool = True
    plucker_encoding_enabled: bool = True
    gamma_learnable: bool = True
    pluckerf_input: bool = True
    freeze_embedder: bool = False
    dtype: str = "float64"
    seed: int = 0

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(layers=8, hidden_dim=512, heads=8, grid_size=32, triplane_dim=32,
                    patch_size=14, image_feature_dim=384)
        base.update(overrides)
        return cls(**base)

    @property
    def triplane_size(self) -> int:
        return 2 * self.grid_size

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> None:
        dims = (self.layers, self.hidden_dim, self.heads, self.grid_size, self.triplane_dim,
                self.patch_size, self.image_feature_dim, self.ffn_ratio, self.decoder_hidden)
        if min(dims) < 1:
            raise ConfigError(f"all model dimensions must be positive: {asdict(self)}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.pluckerf_input and self.hidden_dim < 6:
            raise ConfigError("hidden_dim must be >= 6 to hold the line 6-vector")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype}")


@dataclass
class TokenSet:
    tokens: Tensor
    lines: Optional[PluckerLine] = None
    cls_flags: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.cls_flags is None:
            self.cls_flags = np.zeros(self.tokens.shape[0], dtype=bool)

    def __len__(self) -> int:
        return self.tokens.shape[0]


# ---------------------------------------------------------------- tokens


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """``H x W x 3`` image to row-major flattened patches ``[E^2, P*P*3]``."""
    h, w, ch = image.shape
    if h % patch_size or w % patch_size:
        raise GeometryError(f"image {w}x{h} not divisible by patch size {patch_size}")
    p = patch_size
    x = image.reshape(h // p, p, w // p, p, ch).transpose(0, 2, 1, 3, 4)
    return x.reshape((h // p) * (w // p), p * p * ch)


def patch_embed(image: np.ndarray, params: dict[str, Tensor], config: ModelConfig) -> TokenSet:
    """Linear patch projection with a learned CLS token prepended."""
    patches = as_tensor(patchify(np.asarray(image, dtype=config.np_dtype), config.patch_size))
    feats = matmul(patches, params["embed/proj"]) + params["embed/proj_bias"]
    cls = reshape(params["embed/cls"], (1, config.image_feature_dim))
    flags = np.zeros(patches.shape[0] + 1, dtype=bool)
    flags[0] = True
    return TokenSet(concat([cls, feats], axis=0), None, flags)


def concat_plucker(tokens: TokenSet, lines: PluckerLine, enabled: bool = True) -> TokenSet:
    """Append each non-CLS token's line ``(d, m)``; CLS tokens get six zeros."""
    n_lines = int((~tokens.cls_flags).sum())
    if len(lines) != n_lines:
        raise ContractError(f"{len(lines)} lines for {n_lines} non-CLS tokens")
    if not enabled:
        return TokenSet(tokens.tokens, lines, tokens.cls_flags)
    suffix = np.zeros((len(tokens), 6), dtype=tokens.tokens.dtype)
    suffix[~tokens.cls_flags] = lines.as_array()
    return TokenSet(concat([tokens.tokens, as_tensor(suffix)], axis=1), lines, tokens.cls_flags)


def init_query_tokens(lines: PluckerLine, params: dict[str, Tensor], config: ModelConfig) -> TokenSet:
    """Query tokens: a learnable 6 -> d_D projection of the grid lines, or free tokens."""
    if config.pluckerf_input:
        if config.hidden_dim < 6:
            raise ConfigError("hidden_dim must be >= 6")
        x = as_tensor(lines.as_array().astype(config.np_dtype))
        tok = matmul(x, params["query/proj"]) + params["query/proj_bias"]
    else:
        tok = params["query/free"]
    return TokenSet(tok, lines)


# ---------------------------------------------------------------- attention


def biased_attention(q: Tensor, k: Tensor, v: Tensor, bias: Optional[np.ndarray | DistanceBias],
                     gamma: Optional[Tensor]) -> Tensor:
    """``softmax(q k^T / sqrt(d_h) - gamma D) v`` per head.

    ``q`` is ``[..., n_q, d_h]``, ``k``/``v`` are ``[..., n_k, d_h]``.  The same
    ``gamma D`` applies to every head.  With ``gamma`` or ``bias`` None the
    bias term is skipped entirely.
    """
    if isinstance(bias, DistanceBias):
        bias = bias.values
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = scores * (1.0 / np.sqrt(q.shape[-1]))
    if bias is not None and gamma is not None:
        if bias.shape != (q.shape[-2], k.shape[-2]):
            raise DimensionError(f"bias shape {bias.shape} vs scores {(q.shape[-2], k.shape[-2])}")
        scores = scores - gamma * bias.astype(q.dtype, copy=False)
    return matmul(softmax_lastdim(scores), v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return transpose(reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (n, h * dh))


class TriplaneReconstructor:
    """Parameters plus forward pass from posed images to a :class:`TriplaneField`.

    Parameter names are stable and hierarchical (``embed/proj``,
    ``layer3/cross/gamma_raw``, ``decoder/w1`` ...); they are the keys used
    in checkpoints.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        config.validate()
        self.config = config
        self.params = params if params is not None else self._init_params(np.random.default_rng(config.seed))
        self.query_lines = geo.pluckerf_lines(config.grid_size)
        self._d_pp = geo.distance_matrix(self.query_lines, self.query_lines)

    # -------------------------------------------------------------- params

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c = self.config
        dt = c.np_dtype
        d, di = c.hidden_dim, c.image_feature_dim
        dctx = di + 6 if c.plucker_encoding_enabled else di
        out_scale = 1.0 / np.sqrt(2.0 * c.layers)
        p: dict[str, Tensor] = {}

        def add(name, value, trainable=True):
            p[name] = Tensor(value, trainable, dt, name=name)

        def dense(fan_in, fan_out, scale=1.0):
            return rng.normal(0.0, scale / np.sqrt(fan_in), (fan_in, fan_out))

        patch_dim = c.patch_size * c.patch_size * 3
        add("embed/proj", dense(patch_dim, di), not c.freeze_embedder)
        add("embed/proj_bias", np.zeros(di), not c.freeze_embedder)
        add("embed/cls", rng.normal(0.0, 0.02, di), not c.freeze_embedder)
        n_query = 3 * c.grid_size ** 2
        if c.pluckerf_input:
            add("query/proj", np.eye(6, d))
            add("query/proj_bias", np.zeros(d))
        else:
            add("query/free", rng.normal(0.0, 0.02, (n_query, d)))
        for i in range(c.layers):
            pre = f"layer{i}"
            for ln in ("norm_self", "norm_cross", "norm_ffn"):
                add(f"{pre}/{ln}/gain", np.ones(d))
                add(f"{pre}/{ln}/bias", np.zeros(d))
            add(f"{pre}/norm_ctx/gain", np.ones(dctx))
            add(f"{pre}/norm_ctx/bias", np.zeros(dctx))
            for kind, kv_in in (("self", d), ("cross", dctx)):
                add(f"{pre}/{kind}/wq", dense(d, d))
                add(f"{pre}/{kind}/wk", dense(kv_in, d))
                add(f"{pre}/{kind}/wv", dense(kv_in, d))
                add(f"{pre}/{kind}/wo", dense(d, d, out_scale))
                add(f"{pre}/{kind}/bo", np.zeros(d))
                add(f"{pre}/{kind}/gamma_raw", np.array(GAMMA_INIT_RAW), c.gamma_learnable)
            hidden = c.ffn_ratio * d
            add(f"{pre}/ffn/w1", dense(d, hidden))
            add(f"{pre}/ffn/b1", np.zeros(hidden))
            add(f"{pre}/ffn/w2", dense(hidden, d, out_scale))
            add(f"{pre}/ffn/b2", np.zeros(d))
        add("triplane/deconv", rng.normal(0.0, 1.0 / np.sqrt(d), (d, c.triplane_dim, 2, 2)))
        for name, t in init_decoder(c.triplane_dim, c.decoder_hidden, rng, dt).items():
            add(f"decoder/{name}", t.data)
        return p

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.grad = None

    def gammas(self) -> dict[str, float]:
        """Current ``softplus(gamma_raw)`` per attention sublayer."""
        return {name[: -len("_raw")]: float(np.logaddexp(0.0, t.data))
                for name, t in self.params.items() if name.endswith("gamma_raw")}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ContractError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, v in self.params.items():
            if arrays[k].shape != v.shape:
                raise DimensionError(f"{k}: checkpoint shape {arrays[k].shape} vs model {v.shape}")
            v.data = np.array(arrays[k], dtype=v.dtype)

    # -------------------------------------------------------------- forward

    def image_tokens(self, images: Sequence[np.ndarray], cameras: Sequence[Camera]) -> TokenSet:
        """Concatenated per-image tokens ``[CLS, patches...]`` in input order."""
        c = self.config
        blocks, lines, flags = [], [], []
        for image, cam in zip(images, cameras):
            ts = patch_embed(image, self.params, c)
            rays = geo.patch_rays(cam, c.patch_size)
            ts = concat_plucker(ts, rays, c.plucker_encoding_enabled)
            blocks.append(ts.tokens)
            lines.append(rays)
            flags.append(ts.cls_flags)
        flags = np.concatenate(flags)
        all_lines = PluckerLine.concat(lines)
        return TokenSet(concat(blocks, axis=0), all_lines, flags)

    def cross_distances(self, image_tokens: TokenSet) -> DistanceBias:
        """``D_IP``: grid lines vs image tokens, CLS columns zero."""
        keys_d = np.zeros((len(image_tokens), 3))
        keys_m = np.zeros((len(image_tokens), 3))
        keys_d[:, 2] = 1.0  # placeholder for CLS columns, zeroed below
        keys_d[~image_tokens.cls_flags] = image_tokens.lines.d
        keys_m[~image_tokens.cls_flags] = image_tokens.lines.m
        return geo.distance_matrix(self.query_lines, PluckerLine(keys_d, keys_m), image_tokens.cls_flags)

    @property
    def self_distances(self) -> DistanceBias:
        return self._d_pp

    def gamma(self, name: str) -> Optional[Tensor]:
        if not self.config.bias_enabled:
            return None
        return softplus(self.params[name])

    def _attend(self, prefix: str, x: Tensor, ctx: Tensor, bias: np.ndarray) -> Tensor:
        p, h = self.params, self.config.heads
        q = _split_heads(matmul(x, p[f"{prefix}/wq"]), h)
        k = _split_heads(matmul(ctx, p[f"{prefix}/wk"]), h)
        v = _split_heads(matmul(ctx, p[f"{prefix}/wv"]), h)
        att = biased_attention(q, k, v, bias, self.gamma(f"{prefix}/gamma_raw"))
        return matmul(_merge_heads(att), p[f"{prefix}/wo"]) + p[f"{prefix}/bo"]

    def decoder_forward(self, image_tokens: TokenSet, query_tokens: TokenSet,
                        d_pp: DistanceBias | np.ndarray, d_ip: DistanceBias | np.ndarray) -> Tensor:
        """Pre-norm blocks of biased self-attention, cross-attention and MLP."""
        c, p = self.config, self.params
        d_pp = d_pp.values if isinstance(d_pp, DistanceBias) else d_pp
        d_ip = d_ip.values if isinstance(d_ip, DistanceBias) else d_ip
        nq, nk = len(query_tokens), len(image_tokens)
        if d_pp.shape != (nq, nq) or d_ip.shape != (nq, nk):
            raise DimensionError(f"bias shapes D_PP {d_pp.shape}, D_IP {d_ip.shape} for {nq} queries, {nk} keys")
        x = query_tokens.tokens
        ctx_raw = image_tokens.tokens
        for i in range(c.layers):
            pre = f"layer{i}"
            h = layer_norm(x, p[f"{pre}/norm_self/gain"], p[f"{pre}/norm_self/bias"])
            x = x + self._attend(f"{pre}/self", h, h, d_pp)
            h = layer_norm(x, p[f"{pre}/norm_cross/gain"], p[f"{pre}/norm_cross/bias"])
            ctx = layer_norm(ctx_raw, p[f"{pre}/norm_ctx/gain"], p[f"{pre}/norm_ctx/bias"])
            x = x + self._attend(f"{pre}/cross", h, ctx, d_ip)
            h = layer_norm(x, p[f"{pre}/norm_ffn/gain"], p[f"{pre}/norm_ffn/bias"])
            h = gelu(matmul(h, p[f"{pre}/ffn/w1"]) + p[f"{pre}/ffn/b1"])
            x = x + matmul(h, p[f"{pre}/ffn/w2"]) + p[f"{pre}/ffn/b2"]
        return x

    def tokens_to_triplane(self, tokens: Tensor) -> Tensor:
        """``[3N^2, d_D]`` tokens to feature planes ``[3, M, M, d_T]`` via a shared 2x deconv."""
        n, d = self.config.grid_size, self.config.hidden_dim
        if tokens.shape != (3 * n * n, d):
            raise DimensionError(f"expected {(3 * n * n, d)} tokens, got {tokens.shape}")
        planes = transpose(reshape(tokens, (3, n, n, d)), (0, 3, 1, 2))
        up = transposed_conv_2x(planes, self.params["triplane/deconv"])
        return transpose(up, (0, 2, 3, 1))

    def field(self, grids: Tensor) -> TriplaneField:
        dec = {k: self.params[f"decoder/{k}"] for k in ("w1", "b1", "w2", "b2")}
        return TriplaneField(grids, dec)

    def forward(self, images: Sequence[np.ndarray], cameras: Sequence[Camera]) -> TriplaneField:
        """Posed input images (cameras already in the canonical frame) to a field."""
        img = self.image_tokens(images, cameras)
        qry = init_query_tokens(self.query_lines, self.params, self.config)
        tokens = self.decoder_forward(img, qry, self._d_pp, self.cross_distances(img))
        return self.field(self.tokens_to_triplane(tokens))
