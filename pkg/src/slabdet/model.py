"""Detection model: small conv backbone, deformable-attention encoder and
decoder over a 3-level feature pyramid, and box/class heads.

Attention never scans whole feature maps: each query samples K learned
offset points per head per level around its reference point, so cost grows
with the number of sampled points, not with the map area. Every stage is
built from autodiff primitives, so one scalar loss backpropagates to all
parameters and to the input image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import Conv2d, LayerNorm, Linear, Mlp, ModelError, MultiHeadSelfAttention, collect_params


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_points: int = 4
    n_levels: int = 3
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_queries: int = 20
    ffn_dim: int = 128
    backbone_channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    strides: tuple[int, int, int] = (8, 16, 32)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.d_model % 4:
            raise ModelError("d_model must be divisible by 4 for 2D encodings")
        if len(self.strides) != self.n_levels:
            raise ModelError("one stride per pyramid level required")


def positional_encoding_2d(h: int, w: int, c: int) -> np.ndarray:
    """Deterministic sine-cosine grid encoding, shape (h, w, c).

    Half the channels encode the row index, half the column, each as
    interleaved sine/cosine pairs over a geometric frequency ladder. Values
    lie in [-1, 1] and distinct positions get distinct vectors.
    """
    if c % 4:
        raise ModelError(f"channel count must be divisible by 4, got {c}")
    quarter = c // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys = np.arange(h, dtype=np.float64)[:, None] * freqs[None, :]  # (h, quarter)
    xs = np.arange(w, dtype=np.float64)[:, None] * freqs[None, :]
    out = np.empty((h, w, c), dtype=np.float64)
    out[:, :, 0:2 * quarter:2] = np.sin(ys)[:, None, :]
    out[:, :, 1:2 * quarter:2] = np.cos(ys)[:, None, :]
    out[:, :, 2 * quarter::2] = np.sin(xs)[None, :, :]
    out[:, :, 2 * quarter + 1::2] = np.cos(xs)[None, :, :]
    return out


class Backbone:
    """Five stride-2 convolutions; taps at strides 8, 16 and 32.

    Channel plan 16/32/64/64 after a 16-channel stem, a stand-in for a
    pretrained pyramid that keeps only the multi-scale interface.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c1, c2, c3, c4 = cfg.backbone_channels
        self.stem = Conv2d(1, c1, 3, rng, stride=2, pad=1)
        self.stage1 = Conv2d(c1, c1, 3, rng, stride=2, pad=1)
        self.stage2 = Conv2d(c1, c2, 3, rng, stride=2, pad=1)
        self.stage3 = Conv2d(c2, c3, 3, rng, stride=2, pad=1)
        self.stage4 = Conv2d(c3, c4, 3, rng, stride=2, pad=1)
        self.out_channels = (c2, c3, c4)

    def __call__(self, image: ad.Tensor) -> list[ad.Tensor]:
        h, w, _ = image.shape
        if h % 32 or w % 32:
            raise ModelError(f"image dims must be divisible by 32, got {(h, w)}")
        x = ad.relu(self.stem(image))
        x = ad.relu(self.stage1(x))
        c3 = ad.relu(self.stage2(x))
        c4 = ad.relu(self.stage3(c3))
        c5 = ad.relu(self.stage4(c4))
        return [c3, c4, c5]

    def params(self):
        return collect_params({
            "stem": self.stem, "stage1": self.stage1, "stage2": self.stage2,
            "stage3": self.stage3, "stage4": self.stage4,
        })


class DeformableAttention:
    """Multi-scale deformable attention.

    Per query and head, K sampling points per level are produced by a
    learned offset projection around the query's normalized reference
    point; softmax weights over the L*K points mix the bilinearly sampled
    values. Offset weights start at zero with a small radial bias pattern,
    and weight projections start at zero so the initial mix is uniform.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, m, k, l = cfg.d_model, cfg.n_heads, cfg.n_points, cfg.n_levels
        self.m, self.k, self.l = m, k, l
        self.d_head = d // m
        self.value_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)
        self.offset_proj = Linear(d, m * l * k * 2, rng)
        self.weight_proj = Linear(d, m * l * k, rng)
        self.offset_proj.w.data[:] = 0.0
        self.weight_proj.w.data[:] = 0.0
        self.weight_proj.b.data[:] = 0.0
        angles = 2.0 * np.pi * np.arange(m) / m
        bias = np.zeros((m, l, k, 2))
        for head in range(m):
            for point in range(k):
                bias[head, :, point, 0] = np.cos(angles[head]) * (point + 1)
                bias[head, :, point, 1] = np.sin(angles[head]) * (point + 1)
        self.offset_proj.b.data[:] = bias.ravel()

    def __call__(self, queries: ad.Tensor, ref_points,
                 value_levels: list[ad.Tensor]) -> ad.Tensor:
        if len(value_levels) != self.l:
            raise ModelError(f"expected {self.l} levels, got {len(value_levels)}")
        n = queries.shape[0]
        m, k, l, dh = self.m, self.k, self.l, self.d_head
        offsets = self.offset_proj(queries).reshape(n, m, l, k, 2)
        weights = ad.softmax(self.weight_proj(queries).reshape(n, m, l * k), axis=-1)
        if not isinstance(ref_points, ad.Tensor):
            ref_points = ad.constant(np.asarray(ref_points, dtype=np.float64))
        ref = ref_points.reshape(n, 1, 2)

        head_outputs: list[ad.Tensor] = []
        for head in range(m):
            acc = None
            for level in range(l):
                vmap = value_levels[level]
                h_l, w_l, _ = vmap.shape
                scale = ad.constant(np.array([1.0 / w_l, 1.0 / h_l]))
                loc = offsets[:, head, level, :, :] * scale + ref
                size = ad.constant(np.array([float(w_l), float(h_l)]))
                px = loc * size - 0.5
                head_map = vmap[:, :, head * dh:(head + 1) * dh]
                sampled = ad.bilinear_sample(head_map, px.reshape(n * k, 2))
                sampled = sampled.reshape(n, k, dh)
                w_slice = weights[:, head, level * k:(level + 1) * k].reshape(n, k, 1)
                term = (sampled * w_slice).sum(axis=1)
                acc = term if acc is None else acc + term
            head_outputs.append(acc)
        mixed = ad.concat(head_outputs, axis=1)
        return self.out_proj(mixed)

    def project_values(self, levels: list[ad.Tensor]) -> list[ad.Tensor]:
        out = []
        for level in levels:
            h_l, w_l, d = level.shape
            flat = self.value_proj(level.reshape(h_l * w_l, d))
            out.append(flat.reshape(h_l, w_l, d))
        return out

    def params(self):
        return collect_params({
            "value_proj": self.value_proj, "out_proj": self.out_proj,
            "offset_proj": self.offset_proj, "weight_proj": self.weight_proj,
        })


def reference_points_for(shapes: list[tuple[int, int]]) -> np.ndarray:
    """Normalized pixel-center reference point for every flattened pixel."""
    refs = []
    for h_l, w_l in shapes:
        ys, xs = np.mgrid[0:h_l, 0:w_l]
        rx = (xs + 0.5) / w_l
        ry = (ys + 0.5) / h_l
        refs.append(np.stack([rx.ravel(), ry.ravel()], axis=1))
    return np.concatenate(refs, axis=0)


def split_levels(flat: ad.Tensor, shapes: list[tuple[int, int]], d: int) -> list[ad.Tensor]:
    out = []
    start = 0
    for h_l, w_l in shapes:
        n = h_l * w_l
        out.append(flat[start:start + n].reshape(h_l, w_l, d))
        start += n
    return out


class EncoderLayer:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.attn = DeformableAttention(cfg, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = Mlp(cfg.d_model, cfg.ffn_dim, cfg.d_model, rng)
        self.norm2 = LayerNorm(cfg.d_model)

    def __call__(self, x: ad.Tensor, pos: ad.Tensor, refs: np.ndarray,
                 shapes: list[tuple[int, int]], d: int) -> ad.Tensor:
        levels = split_levels(x, shapes, d)
        values = self.attn.project_values(levels)
        attended = self.attn(x + pos, refs, values)
        x = self.norm1(x + attended)
        return self.norm2(x + self.ffn(x))

    def params(self):
        return collect_params({
            "attn": self.attn, "norm1": self.norm1, "ffn": self.ffn, "norm2": self.norm2,
        })


class DecoderLayer:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadSelfAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.cross_attn = DeformableAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = Mlp(cfg.d_model, cfg.ffn_dim, cfg.d_model, rng)
        self.norm3 = LayerNorm(cfg.d_model)

    def __call__(self, x: ad.Tensor, query_pos: ad.Tensor, refs,
                 values: list[ad.Tensor]) -> ad.Tensor:
        x = self.norm1(x + self.self_attn(x, pos=query_pos))
        x = self.norm2(x + self.cross_attn(x + query_pos, refs, values))
        return self.norm3(x + self.ffn(x))

    def params(self):
        return collect_params({
            "self_attn": self.self_attn, "norm1": self.norm1,
            "cross_attn": self.cross_attn, "norm2": self.norm2,
            "ffn": self.ffn, "norm3": self.norm3,
        })


@dataclass
class Detections:
    """Set prediction output: always n_queries boxes with probabilities."""

    boxes: ad.Tensor       # (N_q, 4) as (cx, cy, w, h), each in (0, 1)
    class_prob: ad.Tensor  # (N_q,) in (0, 1)


class DetectionModel:
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.input_proj = [
            Conv2d(c, cfg.d_model, 1, rng) for c in self.backbone.out_channels
        ]
        self.proj_norm = [LayerNorm(cfg.d_model) for _ in range(cfg.n_levels)]
        self.encoder_layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_encoder_layers)]
        self.decoder_layers = [DecoderLayer(cfg, rng) for _ in range(cfg.n_decoder_layers)]
        self.query_embed = ad.parameter(rng.normal(0.0, 0.5, size=(cfg.n_queries, cfg.d_model)))
        self.ref_proj = Linear(cfg.d_model, 2, rng)
        self.box_head = Mlp(cfg.d_model, cfg.d_model, 4, rng)
        self.class_head = Linear(cfg.d_model, 1, rng)

    # -- forward pieces ----------------------------------------------------

    def features(self, image: ad.Tensor) -> tuple[list[ad.Tensor], list[tuple[int, int]]]:
        levels = self.backbone(image)
        out = []
        shapes = []
        for level, proj, norm in zip(levels, self.input_proj, self.proj_norm):
            mapped = norm(proj(level))
            out.append(mapped)
            shapes.append((mapped.shape[0], mapped.shape[1]))
        return out, shapes

    def encode(self, levels: list[ad.Tensor], shapes: list[tuple[int, int]]) -> ad.Tensor:
        d = self.cfg.d_model
        flat = ad.concat([lvl.reshape(s[0] * s[1], d) for lvl, s in zip(levels, shapes)], axis=0)
        pos = ad.constant(np.concatenate(
            [positional_encoding_2d(s[0], s[1], d).reshape(-1, d) for s in shapes], axis=0
        ))
        refs = reference_points_for(shapes)
        for layer in self.encoder_layers:
            flat = layer(flat, pos, refs, shapes, d)
        return flat

    def decode(self, memory: ad.Tensor, shapes: list[tuple[int, int]]) -> ad.Tensor:
        d = self.cfg.d_model
        query_pos = self.query_embed
        x = ad.constant(np.zeros((self.cfg.n_queries, d)))
        refs = ad.sigmoid(self.ref_proj(query_pos))
        mem_levels = split_levels(memory, shapes, d)
        for layer in self.decoder_layers:
            values = layer.cross_attn.project_values(mem_levels)
            x = layer(x, query_pos, refs, values)
        return x

    def heads(self, states: ad.Tensor) -> Detections:
        boxes = ad.sigmoid(self.box_head(states))
        prob = ad.sigmoid(self.class_head(states)).reshape(self.cfg.n_queries)
        return Detections(boxes=boxes, class_prob=prob)

    def forward(self, image) -> Detections:
        """image: (H, W) or (H, W, 1) array or Tensor, dims divisible by 32."""
        if not isinstance(image, ad.Tensor):
            image = ad.constant(np.asarray(image, dtype=np.float64))
        if image.ndim == 2:
            image = image.reshape(image.shape[0], image.shape[1], 1)
        levels, shapes = self.features(image)
        memory = self.encode(levels, shapes)
        states = self.decode(memory, shapes)
        return self.heads(states)

    def predict(self, image) -> tuple[np.ndarray, np.ndarray]:
        det = self.forward(image)
        return det.boxes.data.copy(), det.class_prob.data.copy()

    # -- parameters --------------------------------------------------------

    def params(self) -> dict[str, ad.Tensor]:
        out = {}
        for name, p in self.backbone.params().items():
            out[f"backbone.{name}"] = p
        for i, (proj, norm) in enumerate(zip(self.input_proj, self.proj_norm)):
            for key, p in proj.params().items():
                out[f"input_proj.{i}.{key}"] = p
            for key, p in norm.params().items():
                out[f"proj_norm.{i}.{key}"] = p
        for i, layer in enumerate(self.encoder_layers):
            for key, p in layer.params().items():
                out[f"encoder.{i}.{key}"] = p
        for i, layer in enumerate(self.decoder_layers):
            for key, p in layer.params().items():
                out[f"decoder.{i}.{key}"] = p
        out["query_embed"] = self.query_embed
        for key, p in self.ref_proj.params().items():
            out[f"ref_proj.{key}"] = p
        for key, p in self.box_head.params().items():
            out[f"box_head.{key}"] = p
        for key, p in self.class_head.params().items():
            out[f"class_head.{key}"] = p
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    def load_state(self, arrays: dict[str, np.ndarray]):
        params = self.params()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ModelError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in params.items():
            if p.data.shape != arrays[name].shape:
                raise ModelError(
                    f"shape mismatch for {name}: {p.data.shape} vs {arrays[name].shape}"
                )
            p.data[:] = arrays[name]

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params().items()}
