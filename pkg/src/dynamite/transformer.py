"""Click-conditioned query transformer: bootstraps one query per click plus
learned background queries, refines them with masked cross-attention over the
feature pyramid, updates the fused map against the refined queries, and turns
per-query mask logits into a disjoint instance label map."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_MASK, Tensor
from .backbone import FeaturePyramid

BACKGROUND = 0  # group id shared by negative clicks and static queries


def _sinusoid(value: float, size: int, scale: float) -> np.ndarray:
    half = (size + 1) // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = value * scale * freqs
    enc = np.empty(2 * half, dtype=np.float32)
    enc[0::2] = np.sin(ang)
    enc[1::2] = np.cos(ang)
    return enc[:size]


def positional_encoding(row, col, timestep, d, height, width) -> np.ndarray:
    """3D sinusoidal encoding: normalized row, normalized col, raw timestep,
    in channel groups of ceil(d/3) truncated to d. Values lie in [-1, 1]."""
    if d < 6:
        raise ValueError(f"positional encoding needs d >= 6, got {d}")
    g = -(-d // 3)
    t_size = d - 2 * g
    return np.concatenate(
        [
            _sinusoid(row / height, g, 2 * math.pi),
            _sinusoid(col / width, g, 2 * math.pi),
            _sinusoid(float(timestep), t_size, 1.0),
        ]
    )


def temporal_encoding_size(d: int) -> int:
    return d - 2 * (-(-d // 3))


def resize_bilinear(arr: np.ndarray, ht: int, wt: int) -> np.ndarray:
    """align_corners=False bilinear resize of [..., H, W] to [..., ht, wt]."""
    h, w = arr.shape[-2:]
    if (h, w) == (ht, wt):
        return arr
    r0, r1, tr = ad._bilinear_coeffs(ht, h, ht / h, arr.dtype)
    c0, c1, tc = ad._bilinear_coeffs(wt, w, wt / w, arr.dtype)
    tr = tr.reshape(-1, 1)
    top = arr[..., r0, :][..., c0] * (1 - tc) + arr[..., r0, :][..., c1] * tc
    bot = arr[..., r1, :][..., c0] * (1 - tc) + arr[..., r1, :][..., c1] * tc
    return top * (1 - tr) + bot * tr


@dataclass
class QuerySet:
    queries: Tensor  # (n_clicks + K, d), dynamic rows first in timestep order
    groups: np.ndarray  # group id per row; BACKGROUND for negatives and static
    n_clicks: int
    pos_encoding: np.ndarray
    queries_with_pos: Tensor  # encoder input: queries + positional encodings

    def __post_init__(self):
        assert self.queries.shape[0] == len(self.groups)


@dataclass
class ForwardResult:
    label_map: np.ndarray  # (H, W) int32; 0 = background
    group_ids: list  # row order of the group tensors; group_ids[0] == 0
    group_probs: Tensor  # (G, H, W) upsampled probabilities (loss input)
    query_logits: Tensor  # (n_clicks + K, Hf, Wf)
    groups: np.ndarray
    fallback_rows: int
    aux_query_logits: list = field(default_factory=list)

    def object_mask(self, object_id: int) -> np.ndarray:
        return self.label_map == object_id


class _Params:
    def __init__(self):
        self._params = {}

    def _param(self, name, value):
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)
        self._params[name] = t
        return t

    def params(self):
        return dict(self._params)

    def _p(self, name):
        return self._params[name]


def _linear_init(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


class MultiHeadAttention(_Params):
    def __init__(self, d, heads, rng, prefix=""):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d, self.heads, self.dh = d, heads, d // heads
        self.scale = self.dh**-0.5
        for name in ("wq", "wk", "wv", "wo"):
            self._param(f"{prefix}{name}", _linear_init(rng, d, d))
            self._param(f"{prefix}{name}.b", np.zeros(d, dtype=np.float32))
        self.prefix = prefix

    def __call__(self, q_in, kv_in, mask=None):
        n, m, p = q_in.shape[0], kv_in.shape[0], self.prefix

        def heads_of(x, count):
            x = ad.reshape(x, (count, self.heads, self.dh))
            return ad.transpose(x, (1, 0, 2))

        q = heads_of(ad.linear(q_in, self._p(f"{p}wq"), self._p(f"{p}wq.b")), n)
        k = heads_of(ad.linear(kv_in, self._p(f"{p}wk"), self._p(f"{p}wk.b")), m)
        v = heads_of(ad.linear(kv_in, self._p(f"{p}wv"), self._p(f"{p}wv.b")), m)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), self.scale)
        attn = ad.masked_softmax(scores, None if mask is None else mask[None])
        out = ad.matmul(attn, v)  # (heads, n, dh)
        out = ad.reshape(ad.transpose(out, (1, 0, 2)), (n, self.d))
        return ad.linear(out, self._p(f"{p}wo"), self._p(f"{p}wo.b"))


class _FFN(_Params):
    def __init__(self, d, width, rng, prefix=""):
        super().__init__()
        self.prefix = prefix
        self._param(f"{prefix}w1", _linear_init(rng, d, width))
        self._param(f"{prefix}b1", np.zeros(width, dtype=np.float32))
        self._param(f"{prefix}w2", _linear_init(rng, width, d))
        self._param(f"{prefix}b2", np.zeros(d, dtype=np.float32))

    def __call__(self, x):
        p = self.prefix
        h = ad.gelu(ad.linear(x, self._p(f"{p}w1"), self._p(f"{p}b1")))
        return ad.linear(h, self._p(f"{p}w2"), self._p(f"{p}b2"))


class _LayerNorm(_Params):
    def __init__(self, d, prefix=""):
        super().__init__()
        self.prefix = prefix
        self._param(f"{prefix}g", np.ones(d, dtype=np.float32))
        self._param(f"{prefix}b", np.zeros(d, dtype=np.float32))

    def __call__(self, x, axis=-1):
        return ad.layernorm(x, self._p(f"{self.prefix}g"), self._p(f"{self.prefix}b"), axis=axis)


class EncoderLayer:
    """Masked cross-attention over one pyramid level, self-attention, FFN;
    pre-norm residuals throughout."""

    def __init__(self, d, heads, ffn_width, rng, prefix):
        self.ln1 = _LayerNorm(d, f"{prefix}ln1.")
        self.cross = MultiHeadAttention(d, heads, rng, f"{prefix}cross.")
        self.ln2 = _LayerNorm(d, f"{prefix}ln2.")
        self.self_attn = MultiHeadAttention(d, heads, rng, f"{prefix}self.")
        self.ln3 = _LayerNorm(d, f"{prefix}ln3.")
        self.ffn = _FFN(d, ffn_width, rng, f"{prefix}ffn.")

    def params(self):
        out = {}
        for blk in (self.ln1, self.cross, self.ln2, self.self_attn, self.ln3, self.ffn):
            out.update(blk.params())
        return out

    def __call__(self, q, level_flat, attn_mask):
        q = ad.add(q, self.cross(self.ln1(q), level_flat, attn_mask))
        h = self.ln2(q)
        q = ad.add(q, self.self_attn(h, h))
        return ad.add(q, self.ffn(self.ln3(q)))


class DecoderLayer:
    """Fused-map pixels attend over the refined queries, then a pixelwise FFN."""

    def __init__(self, d, heads, ffn_width, rng, prefix):
        self.ln1 = _LayerNorm(d, f"{prefix}ln1.")
        self.cross = MultiHeadAttention(d, heads, rng, f"{prefix}cross.")
        self.ln2 = _LayerNorm(d, f"{prefix}ln2.")
        self.ffn = _FFN(d, ffn_width, rng, f"{prefix}ffn.")

    def params(self):
        out = {}
        for blk in (self.ln1, self.cross, self.ln2, self.ffn):
            out.update(blk.params())
        return out

    def __call__(self, pixels, queries_out):
        pixels = ad.add(pixels, self.cross(self.ln1(pixels), queries_out))
        return ad.add(pixels, self.ffn(self.ln2(pixels)))


class MaskHead(_Params):
    """Projects queries and dots them against every fused-map pixel."""

    def __init__(self, d, rng):
        super().__init__()
        self._param("mask.w1", _linear_init(rng, d, d))
        self._param("mask.b1", np.zeros(d, dtype=np.float32))
        self._param("mask.w2", _linear_init(rng, d, d))
        self._param("mask.b2", np.zeros(d, dtype=np.float32))

    def __call__(self, fused, queries):
        d, hf, wf = fused.shape
        embed = ad.gelu(ad.linear(queries, self._p("mask.w1"), self._p("mask.b1")))
        embed = ad.linear(embed, self._p("mask.w2"), self._p("mask.b2"))
        flat = ad.reshape(fused, (d, hf * wf))
        return ad.reshape(ad.matmul(embed, flat), (queries.shape[0], hf, wf))


class InteractiveTransformer:
    def __init__(self, config, rng):
        self.config = config
        d, heads, ffn = config.width, config.heads, config.ffn_mult * config.width
        self.bg_queries = Tensor(
            rng.normal(0.0, d**-0.5, size=(config.bg_query_count, d)).astype(np.float32),
            requires_grad=True,
        )
        # background queries have no click location: spatial groups of their
        # positional encoding are learned, timestep is fixed at 0
        g = -(-d // 3)
        self.bg_spatial = Tensor(np.zeros(2 * g, dtype=np.float32), requires_grad=True)
        self._bg_temporal = _sinusoid(0.0, temporal_encoding_size(d), 1.0)

        self.encoder_layers = [
            EncoderLayer(d, heads, ffn, rng, f"enc{i}.") for i in range(config.encoder_layers)
        ]
        self.decoder_layers = [
            DecoderLayer(d, heads, ffn, rng, f"dec{i}.") for i in range(config.decoder_layers)
        ]
        self.mask_head = MaskHead(d, rng)

    def params(self):
        out = {"bg_queries": self.bg_queries, "bg_spatial": self.bg_spatial}
        for layer in self.encoder_layers + self.decoder_layers:
            out.update(layer.params())
        out.update(self.mask_head.params())
        return out

    # -- query bootstrapping -------------------------------------------------

    def bootstrap_queries(self, pyramid: FeaturePyramid, clicks) -> QuerySet:
        """One query per click: the mean over pyramid levels of the channel
        vector at the click's (floored, clamped) location, plus a 3D
        positional encoding. Background rows come from learned parameters."""
        d = self.config.width
        h, w = clicks.height, clicks.width
        ordered = clicks.clicks
        n = len(ordered)

        if n:
            rows = np.array([c.row for c in ordered])
            cols = np.array([c.col for c in ordered])
            acc = None
            for stride, feat in pyramid.levels:
                hl, wl = feat.shape[1], feat.shape[2]
                pts = ad.gather_points(
                    feat, np.minimum(rows // stride, hl - 1), np.minimum(cols // stride, wl - 1)
                )
                acc = pts if acc is None else ad.add(acc, pts)
            dyn = ad.mul(acc, 1.0 / len(pyramid.levels))
            pos = np.stack(
                [positional_encoding(c.row, c.col, c.timestep, d, h, w) for c in ordered]
            ).astype(np.float32)

        bg_pos = ad.reshape(
            ad.concat([self.bg_spatial, Tensor(self._bg_temporal)], axis=0), (1, d)
        )
        bg_with_pos = ad.add(self.bg_queries, bg_pos)
        if n:
            queries = ad.concat([dyn, self.bg_queries], axis=0)
            with_pos = ad.concat([ad.add(dyn, Tensor(pos)), bg_with_pos], axis=0)
        else:
            pos = np.zeros((0, d), dtype=np.float32)
            queries = self.bg_queries
            with_pos = bg_with_pos

        groups = np.array(
            [c.object_id if c.kind == "pos" else BACKGROUND for c in ordered]
            + [BACKGROUND] * self.config.bg_query_count,
            dtype=np.int64,
        )
        full_pos = np.concatenate(
            [
                pos,
                np.tile(
                    np.concatenate([self.bg_spatial.data, self._bg_temporal]),
                    (self.config.bg_query_count, 1),
                ),
            ]
        )
        return QuerySet(queries, groups, n, full_pos, with_pos)

    # -- encoder / decoder ----------------------------------------------------

    def _attn_mask(self, query_logits: np.ndarray, hl: int, wl: int) -> np.ndarray:
        probs = 1.0 / (1.0 + np.exp(-query_logits))
        keep = resize_bilinear(probs, hl, wl) > self.config.mask_threshold
        nq = query_logits.shape[0]
        return np.where(keep, 0.0, NEG_MASK).astype(np.float32).reshape(nq, hl * wl)

    def run_encoder(self, query_set: QuerySet, pyramid: FeaturePyramid, fused, collect_aux=False):
        """Blocks cycle through pyramid levels coarse to fine; each layer's
        attention mask comes from the previous layer's mask predictions."""
        levels_desc = sorted(pyramid.levels, key=lambda lv: -lv[0])
        flats = {}
        for stride, feat in levels_desc:
            d, hl, wl = feat.shape
            flats[stride] = (ad.reshape(ad.transpose(feat, (1, 2, 0)), (hl * wl, d)), hl, wl)

        q = query_set.queries_with_pos
        with ad.no_grad():
            logits = self.mask_head(fused, q).data
        aux = []
        n_levels = len(levels_desc)
        block = len(self.encoder_layers) // 3 if len(self.encoder_layers) >= 3 else 1
        for i, layer in enumerate(self.encoder_layers):
            stride = levels_desc[i % n_levels][0]
            flat, hl, wl = flats[stride]
            q = layer(q, flat, self._attn_mask(logits, hl, wl))
            if collect_aux and (i + 1) % block == 0 and (i + 1) < len(self.encoder_layers):
                t = self.mask_head(fused, q)
                aux.append(t)
                logits = t.data
            else:
                with ad.no_grad():
                    logits = self.mask_head(fused, q).data
        return q, aux

    def run_decoder(self, fused, queries_out):
        if not self.decoder_layers:
            return fused
        d, hf, wf = fused.shape
        pix = ad.reshape(ad.transpose(fused, (1, 2, 0)), (hf * wf, d))
        for layer in self.decoder_layers:
            pix = layer(pix, queries_out)
        return ad.transpose(ad.reshape(pix, (hf, wf, d)), (2, 0, 1))

    # -- outputs ---------------------------------------------------------------

    def group_logits(self, query_logits, groups):
        """Per-group map = per-pixel max over that group's query logits.
        Returns (group_ids, Tensor[G, Hf, Wf]); background id 0 always first."""
        ids = [BACKGROUND] + sorted(set(int(g) for g in groups) - {BACKGROUND})
        maps = []
        for gid in ids:
            idx = np.flatnonzero(groups == gid)
            maps.append(ad.max_reduce(ad.take_rows(query_logits, idx), axis=0, keepdims=True))
        return ids, ad.concat(maps, axis=0)

    def forward(self, pyramid: FeaturePyramid, fused, clicks, collect_aux=None) -> ForwardResult:
        if collect_aux is None:
            collect_aux = self.config.aux_loss
        fallback_before = ad.softmax_fallback_count()
        qs = self.bootstrap_queries(pyramid, clicks)
        q_out, aux = self.run_encoder(qs, pyramid, fused, collect_aux=collect_aux)
        fused_out = self.run_decoder(fused, q_out)
        query_logits = self.mask_head(fused_out, q_out)
        ids, gmaps = self.group_logits(query_logits, qs.groups)
        probs = ad.bilinear_upsample(ad.sigmoid(gmaps), min(pyramid.strides))
        label_map = np.asarray(ids, dtype=np.int32)[np.argmax(probs.data, axis=0)]
        return ForwardResult(
            label_map=label_map,
            group_ids=ids,
            group_probs=probs,
            query_logits=query_logits,
            groups=qs.groups,
            fallback_rows=ad.softmax_fallback_count() - fallback_before,
            aux_query_logits=aux,
        )
