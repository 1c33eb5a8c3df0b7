"""Model core: toy image encoder with adapters, prompt encoding, and the two
mask decoders.

The network follows a promptable-segmentation layout. A patch-embedding
transformer encodes the image once per frame; a heatmap decoder turns that
embedding into a dense text-center field; point prompts picked from the field
are encoded and fed to a second decoder that emits one mask per granularity
(word, word group, text-line, paragraph) for every point, plus a predicted
IoU per mask.

Only the per-block bottleneck adapters of the encoder, the two decoders, and
the learnable token blocks train by default; the encoder backbone and the
prompt encoder stay frozen, mirroring a fine-tuning setup over a pretrained
segmentation backbone.

Public tensor shapes are channel-last (H, W, C); internals are channel-first
torch. With input size S: the embedding grid is S/16, the heatmap grid
Q = S/4, and the high-resolution mask grid R = 1.5 * Q = 3S/8.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

PATCH_SIZE = 16
HEATMAP_STRIDE = 4
GRANULARITIES = ("word", "word_group", "line", "paragraph")
NUM_GRANULARITIES = len(GRANULARITIES)
CHECKPOINT_VERSION = 1


def granularity_index(name: str) -> int:
    try:
        return GRANULARITIES.index(name)
    except ValueError:
        raise KeyError(f"unknown granularity '{name}', expected one of {GRANULARITIES}") from None


@dataclass
class ModelConfig:
    """Hyperparameters and derived grid sizes for the full model."""

    input_size: int = 1024
    embed_dim: int = 256
    encoder_depth: int = 2
    encoder_heads: int = 8
    encoder_mlp_ratio: float = 4.0
    adapter_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 8
    decoder_mlp_dim: int = 2048
    num_task_prompts: int = 3
    num_point_slots: int = 2  # prompt token slots per point prompt
    freeze_backbone: bool = True
    chunk_size: int = 16  # max prompts decoded per internal chunk

    def __post_init__(self) -> None:
        if self.input_size % PATCH_SIZE != 0:
            raise ValueError(f"input_size {self.input_size} must be divisible by {PATCH_SIZE}")
        if self.embed_dim % 16 != 0:
            raise ValueError("embed_dim must be divisible by 16 (mask feature channels)")
        if self.embed_dim % self.encoder_heads or self.embed_dim % self.decoder_heads:
            raise ValueError("embed_dim must be divisible by the head counts")
        if self.num_task_prompts < 1 or self.num_point_slots < 1:
            raise ValueError("token counts must be positive")

    @property
    def embed_grid(self) -> int:
        return self.input_size // PATCH_SIZE

    @property
    def heatmap_grid(self) -> int:
        return self.input_size // HEATMAP_STRIDE

    @property
    def highres_grid(self) -> int:
        return (3 * self.input_size) // 8  # 1.5x the heatmap grid

    @property
    def lowres_channels(self) -> int:
        return self.embed_dim // 8

    @property
    def highres_channels(self) -> int:
        return self.embed_dim // 16


def default_config() -> ModelConfig:
    return ModelConfig()


def toy_config() -> ModelConfig:
    """Desk-scale preset: small enough to overfit a toy dataset on one core."""
    return ModelConfig(
        input_size=256,
        embed_dim=128,
        encoder_depth=2,
        encoder_heads=8,
        encoder_mlp_ratio=2.0,
        adapter_dim=32,
        decoder_mlp_dim=256,
    )


@dataclass
class ImageEmbedding:
    """Backbone output on the S/16 grid, channel-last."""

    features: Tensor  # (G, G, D)

    @property
    def grid(self) -> int:
        return self.features.shape[0]


@dataclass
class PointDecodeOutput:
    heatmap: Tensor  # (Q, Q) in [0, 1]
    features: Tensor  # (Q, Q, D//8) per-cell mask features
    token: Tensor  # (1, D) updated output token


@dataclass
class MaskBundle:
    """Per-point mask logits for all four granularities.

    Channel pairing: ``word_wg_logits[..., 0]`` is the word mask and
    ``[..., 1]`` the word group, both on the R x R grid;
    ``line_para_logits[..., 0]`` is the text-line and ``[..., 1]`` the
    paragraph, on the Q x Q grid. ``iou_pred`` columns follow GRANULARITIES.
    """

    word_wg_logits: Tensor  # (K, R, R, 2)
    line_para_logits: Tensor  # (K, Q, Q, 2)
    iou_pred: Tensor  # (K, 4) in [0, 1]
    lowres_features: Tensor  # (K, Q, Q, D//8)
    highres_features: Tensor  # (K, R, R, D//16)
    tokens: Tensor  # (K, 4, D)

    def __len__(self) -> int:
        return self.word_wg_logits.shape[0]

    def logits_for(self, granularity: int | str) -> Tensor:
        """(K, H, W) logits of one granularity at its native grid."""
        g = granularity_index(granularity) if isinstance(granularity, str) else granularity
        if g == 0:
            return self.word_wg_logits[..., 0]
        if g == 1:
            return self.word_wg_logits[..., 1]
        if g == 2:
            return self.line_para_logits[..., 0]
        if g == 3:
            return self.line_para_logits[..., 1]
        raise KeyError(f"granularity index {g} out of range")


# ---------------------------------------------------------------------------
# Building blocks


class LayerNorm2d(nn.Module):
    def __init__(self, num_channels: int, eps: float = 1e-6) -> None:
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class MLP(nn.Module):
    def __init__(
        self,
        input_dim: int,
        hidden_dim: int,
        output_dim: int,
        num_layers: int,
        sigmoid_output: bool = False,
    ) -> None:
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [output_dim]))
        self.sigmoid_output = sigmoid_output

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = F.relu(layer(x)) if i < len(self.layers) - 1 else layer(x)
        if self.sigmoid_output:
            x = torch.sigmoid(x)
        return x


class Attention(nn.Module):
    """Multi-head attention with optional internal downsampling."""

    def __init__(self, embedding_dim: int, num_heads: int, downsample_rate: int = 1) -> None:
        super().__init__()
        self.internal_dim = embedding_dim // downsample_rate
        self.num_heads = num_heads
        if self.internal_dim % num_heads != 0:
            raise ValueError("internal dim must divide evenly across heads")
        self.q_proj = nn.Linear(embedding_dim, self.internal_dim)
        self.k_proj = nn.Linear(embedding_dim, self.internal_dim)
        self.v_proj = nn.Linear(embedding_dim, self.internal_dim)
        self.out_proj = nn.Linear(self.internal_dim, embedding_dim)

    def _split(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        q = self._split(self.q_proj(q))
        k = self._split(self.k_proj(k))
        v = self._split(self.v_proj(v))
        attn = (q @ k.transpose(2, 3)) / math.sqrt(q.shape[-1])
        attn = torch.softmax(attn, dim=-1)
        out = attn @ v
        b, h, n, c = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * c))


class TwoWayAttentionBlock(nn.Module):
    """Token self-attention plus cross-attention in both directions."""

    def __init__(
        self,
        embedding_dim: int,
        num_heads: int,
        mlp_dim: int,
        skip_first_layer_pe: bool = False,
    ) -> None:
        super().__init__()
        self.self_attn = Attention(embedding_dim, num_heads)
        self.norm1 = nn.LayerNorm(embedding_dim)
        self.cross_attn_token_to_image = Attention(embedding_dim, num_heads, downsample_rate=2)
        self.norm2 = nn.LayerNorm(embedding_dim)
        self.mlp = MLP(embedding_dim, mlp_dim, embedding_dim, num_layers=2)
        self.norm3 = nn.LayerNorm(embedding_dim)
        self.cross_attn_image_to_token = Attention(embedding_dim, num_heads, downsample_rate=2)
        self.norm4 = nn.LayerNorm(embedding_dim)
        self.skip_first_layer_pe = skip_first_layer_pe

    def forward(self, queries: Tensor, keys: Tensor, query_pe: Tensor, key_pe: Tensor):
        if self.skip_first_layer_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_attn_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))

        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_attn_image_to_token(k, q, queries))
        return queries, keys


class TwoWayTransformer(nn.Module):
    def __init__(self, depth: int, embedding_dim: int, num_heads: int, mlp_dim: int) -> None:
        super().__init__()
        self.layers = nn.ModuleList(
            TwoWayAttentionBlock(embedding_dim, num_heads, mlp_dim, skip_first_layer_pe=(i == 0))
            for i in range(depth)
        )
        self.final_attn_token_to_image = Attention(embedding_dim, num_heads, downsample_rate=2)
        self.norm_final_attn = nn.LayerNorm(embedding_dim)

    def forward(self, image_embedding: Tensor, image_pe: Tensor, point_embedding: Tensor):
        """image_embedding/image_pe: (B, C, H, W); point_embedding: (B, N, C)."""
        b, c, h, w = image_embedding.shape
        keys = image_embedding.flatten(2).permute(0, 2, 1)
        key_pe = image_pe.flatten(2).permute(0, 2, 1)
        queries = point_embedding
        for layer in self.layers:
            queries, keys = layer(queries, keys, point_embedding, key_pe)
        q = queries + point_embedding
        k = keys + key_pe
        queries = self.norm_final_attn(queries + self.final_attn_token_to_image(q, k, keys))
        return queries, keys


class Adapter(nn.Module):
    """Residual bottleneck adapter: down-project, GELU, up-project."""

    def __init__(self, dim: int, bottleneck: int) -> None:
        super().__init__()
        self.down = nn.Linear(dim, bottleneck)
        self.up = nn.Linear(bottleneck, dim)
        nn.init.zeros_(self.up.weight)  # start as identity so frozen behavior is preserved
        nn.init.zeros_(self.up.bias)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.up(F.gelu(self.down(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, adapter_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim, num_layers=2)
        self.adapter = Adapter(dim, adapter_dim)

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y, y)
        x = x + self.mlp(self.norm2(x))
        return self.adapter(x)


class ImageEncoder(nn.Module):
    """Patch-embedding transformer producing the S/16 feature grid."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.patch_embed = nn.Conv2d(3, config.embed_dim, kernel_size=PATCH_SIZE, stride=PATCH_SIZE)
        g = config.embed_grid
        self.pos_embed = nn.Parameter(torch.randn(1, g * g, config.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.embed_dim, config.encoder_heads, config.encoder_mlp_ratio, config.adapter_dim)
            for _ in range(config.encoder_depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    def forward(self, image: Tensor) -> Tensor:
        """(1, 3, S, S) -> (1, D, G, G)."""
        x = self.patch_embed(image)  # (1, D, G, G)
        b, d, g, _ = x.shape
        x = x.flatten(2).permute(0, 2, 1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x.permute(0, 2, 1).reshape(b, d, g, g)

    def backbone_modules(self) -> list[nn.Module]:
        """Everything except the adapters; frozen under freeze_backbone."""
        mods: list[nn.Module] = [self.patch_embed, self.norm]
        for block in self.blocks:
            mods += [block.norm1, block.attn, block.norm2, block.mlp]
        return mods


class PositionEncoder(nn.Module):
    """Random-Fourier positional features over normalized [0, 1] coordinates."""

    def __init__(self, embed_dim: int, scale: float = 1.0) -> None:
        super().__init__()
        self.register_buffer("gaussian_matrix", torch.randn(2, embed_dim // 2) * scale)

    def _encode(self, coords: Tensor) -> Tensor:
        """coords in [0, 1], shape (..., 2) -> (..., D)."""
        proj = (2.0 * coords - 1.0) @ self.gaussian_matrix.to(coords.dtype)
        proj = 2.0 * math.pi * proj
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)

    def grid_pe(self, grid: int, dtype: torch.dtype, device: torch.device) -> Tensor:
        """(1, D, grid, grid) dense positional map at cell centers."""
        ticks = (torch.arange(grid, dtype=dtype, device=device) + 0.5) / grid
        yy, xx = torch.meshgrid(ticks, ticks, indexing="ij")
        pe = self._encode(torch.stack([xx, yy], dim=-1))
        return pe.permute(2, 0, 1)[None]

    def points_pe(self, coords_01: Tensor) -> Tensor:
        return self._encode(coords_01)


class PromptEncoder(nn.Module):
    """Frozen point-prompt encoder: positional features plus role embeddings.

    All parameters are buffers; nothing here trains. Valid point slots get
    their positional encoding plus a foreground role embedding; invalid slots
    get a dedicated padding embedding with no positional term.
    """

    def __init__(self, config: ModelConfig, pos: PositionEncoder) -> None:
        super().__init__()
        self.config = config
        self.pos = pos
        self.register_buffer("foreground_embed", torch.randn(config.embed_dim) * 0.5)
        self.register_buffer("padding_embed", torch.randn(config.embed_dim) * 0.5)

    def forward(self, coords: Tensor, validity: Tensor) -> Tensor:
        """coords (K, N_p, 2) in input pixels, validity (K, N_p) bool -> (K, N_p, D)."""
        size = float(self.config.input_size)
        if coords.numel() and (coords.min() < 0 or coords.max() >= size):
            raise ValueError(f"point coordinates must lie in [0, {size}) per axis")
        pe = self.pos.points_pe(coords / size)
        fg = self.foreground_embed.to(pe.dtype)
        pad = self.padding_embed.to(pe.dtype)
        tokens = pe + fg
        return torch.where(validity[..., None], tokens, pad.expand_as(tokens))


# ---------------------------------------------------------------------------
# Decoders


class FeatureUpscaler(nn.Module):
    """Two stride-2 transposed convolutions: G -> 4G grid, D -> D//8 channels."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 4, kernel_size=2, stride=2),
            LayerNorm2d(dim // 4),
            nn.GELU(),
            nn.ConvTranspose2d(dim // 4, dim // 8, kernel_size=2, stride=2),
            nn.GELU(),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class PointDecoder(nn.Module):
    """Dense text-center heatmap from the image embedding.

    One output token (modulated by a per-task prompt token) attends to the
    image through a two-way transformer; the updated image features are
    upscaled to the heatmap grid and projected per cell against an MLP of the
    output token, ending in a sigmoid.
    """

    def __init__(self, config: ModelConfig, pos: PositionEncoder) -> None:
        super().__init__()
        self.config = config
        self.pos = pos
        d = config.embed_dim
        self.output_token = nn.Parameter(torch.randn(1, d) * 0.02)
        self.task_tokens = nn.Parameter(torch.randn(config.num_task_prompts, d) * 0.02)
        self.transformer = TwoWayTransformer(
            config.decoder_depth, d, config.decoder_heads, config.decoder_mlp_dim
        )
        self.upscaler = FeatureUpscaler(d)
        self.head = MLP(d, d, config.lowres_channels, num_layers=3)

    def forward(self, features: Tensor, task_id: int) -> PointDecodeOutput:
        """features: (1, D, G, G) image embedding."""
        cfg = self.config
        token = (self.output_token + self.task_tokens[task_id])[None]  # (1, 1, D)
        pe = self.pos.grid_pe(cfg.embed_grid, features.dtype, features.device)
        queries, keys = self.transformer(features, pe, token)
        g = cfg.embed_grid
        image_out = keys.permute(0, 2, 1).reshape(1, cfg.embed_dim, g, g)
        dense = self.upscaler(image_out)  # (1, D//8, Q, Q)
        hyper = self.head(queries[:, 0, :])  # (1, D//8)
        logits = torch.einsum("bc,bchw->bhw", hyper, dense)
        return PointDecodeOutput(
            heatmap=torch.sigmoid(logits[0]),
            features=dense[0].permute(1, 2, 0),
            token=queries[0],
        )


class HMDecoder(nn.Module):
    """Hierarchical mask decoder: four granularity masks per point prompt."""

    def __init__(self, config: ModelConfig, pos: PositionEncoder) -> None:
        super().__init__()
        self.config = config
        self.pos = pos
        d = config.embed_dim
        self.output_tokens = nn.Parameter(torch.randn(1, NUM_GRANULARITIES, d) * 0.02)
        self.task_tokens = nn.Parameter(torch.randn(config.num_task_prompts, NUM_GRANULARITIES, d) * 0.02)
        self.transformer = TwoWayTransformer(
            config.decoder_depth, d, config.decoder_heads, config.decoder_mlp_dim
        )
        self.upscaler = FeatureUpscaler(d)
        self.highres_conv = nn.Conv2d(config.lowres_channels, config.highres_channels, kernel_size=3, padding=1)
        self.lowres_heads = nn.ModuleList(
            MLP(d, d, config.lowres_channels, num_layers=3) for _ in range(2)  # line, paragraph
        )
        self.highres_heads = nn.ModuleList(
            MLP(d, d, config.highres_channels, num_layers=3) for _ in range(2)  # word, word group
        )
        self.iou_heads = nn.ModuleList(
            MLP(d, d, 1, num_layers=3, sigmoid_output=True) for _ in range(NUM_GRANULARITIES)
        )

    def forward(self, features: Tensor, point_tokens: Tensor, task_id: int) -> MaskBundle:
        """features (1, D, G, G); point_tokens (K, N_p, D)."""
        cfg = self.config
        k = point_tokens.shape[0]
        if k == 0:
            return self._empty_bundle(features.dtype, features.device)
        chunks = []
        for start in range(0, k, cfg.chunk_size):
            chunks.append(self._decode(features, point_tokens[start : start + cfg.chunk_size], task_id))
        if len(chunks) == 1:
            return chunks[0]
        fields = (
            "word_wg_logits",
            "line_para_logits",
            "iou_pred",
            "lowres_features",
            "highres_features",
            "tokens",
        )
        return MaskBundle(**{f: torch.cat([getattr(c, f) for c in chunks], dim=0) for f in fields})

    def _decode(self, features: Tensor, point_tokens: Tensor, task_id: int) -> MaskBundle:
        cfg = self.config
        k = point_tokens.shape[0]
        out_tokens = (self.output_tokens + self.task_tokens[task_id]).expand(k, -1, -1)
        tokens = torch.cat([out_tokens, point_tokens], dim=1)  # (K, 4 + N_p, D)
        src = features.expand(k, -1, -1, -1)
        pe = self.pos.grid_pe(cfg.embed_grid, features.dtype, features.device).expand(k, -1, -1, -1)
        queries, keys = self.transformer(src, pe, tokens)
        t_out = queries[:, :NUM_GRANULARITIES, :]  # (K, 4, D)

        g = cfg.embed_grid
        image_out = keys.permute(0, 2, 1).reshape(k, cfg.embed_dim, g, g)
        lowres = self.upscaler(image_out)  # (K, D//8, Q, Q)
        upsampled = F.interpolate(
            lowres, size=(cfg.highres_grid, cfg.highres_grid), mode="bilinear", align_corners=False
        )
        highres = self.highres_conv(upsampled)  # (K, D//16, R, R)

        hyper_lp = torch.stack([head(t_out[:, 2 + i, :]) for i, head in enumerate(self.lowres_heads)], dim=1)
        line_para = torch.einsum("kgc,kchw->kghw", hyper_lp, lowres)
        hyper_wg = torch.stack([head(t_out[:, i, :]) for i, head in enumerate(self.highres_heads)], dim=1)
        word_wg = torch.einsum("kgc,kchw->kghw", hyper_wg, highres)
        iou = torch.cat([head(t_out[:, i, :]) for i, head in enumerate(self.iou_heads)], dim=1)

        return MaskBundle(
            word_wg_logits=word_wg.permute(0, 2, 3, 1),
            line_para_logits=line_para.permute(0, 2, 3, 1),
            iou_pred=iou,
            lowres_features=lowres.permute(0, 2, 3, 1),
            highres_features=highres.permute(0, 2, 3, 1),
            tokens=t_out,
        )

    def _empty_bundle(self, dtype: torch.dtype, device: torch.device) -> MaskBundle:
        cfg = self.config
        q, r, d = cfg.heatmap_grid, cfg.highres_grid, cfg.embed_dim

        def z(*shape):
            return torch.zeros(*shape, dtype=dtype, device=device)

        return MaskBundle(
            word_wg_logits=z(0, r, r, 2),
            line_para_logits=z(0, q, q, 2),
            iou_pred=z(0, NUM_GRANULARITIES),
            lowres_features=z(0, q, q, cfg.lowres_channels),
            highres_features=z(0, r, r, cfg.highres_channels),
            tokens=z(0, NUM_GRANULARITIES, d),
        )


# ---------------------------------------------------------------------------
# Full model


class EtsamModel(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config)
        self.pos = PositionEncoder(config.embed_dim)
        self.prompt_encoder = PromptEncoder(config, self.pos)
        self.point_decoder = PointDecoder(config, self.pos)
        self.hm_decoder = HMDecoder(config, self.pos)
        self.apply_freeze()

    # -- parameter partition -------------------------------------------------

    def apply_freeze(self) -> None:
        """Freeze the encoder backbone when the config asks for it."""
        if not self.config.freeze_backbone:
            for p in self.parameters():
                p.requires_grad_(True)
            return
        for p in self.image_encoder.parameters():
            p.requires_grad_(False)
        for block in self.image_encoder.blocks:
            for p in block.adapter.parameters():
                p.requires_grad_(True)
        # pos_embed belongs to the backbone; decoders and tokens stay trainable.

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def _check_task(self, task_id: int) -> int:
        if not 0 <= task_id < self.config.num_task_prompts:
            raise ValueError(
                f"task_id {task_id} out of range [0, {self.config.num_task_prompts})"
            )
        return int(task_id)

    # -- forward pieces ------------------------------------------------------

    def encode_image(self, image: np.ndarray | Tensor) -> ImageEmbedding:
        """(S, S, 3) image in [0, 1] -> embedding on the S/16 grid."""
        s = self.config.input_size
        if isinstance(image, np.ndarray):
            image = torch.from_numpy(np.ascontiguousarray(image))
        if image.shape != (s, s, 3):
            raise ValueError(f"expected ({s}, {s}, 3) image, got {tuple(image.shape)}")
        x = image.to(self.dtype).to(self.device).permute(2, 0, 1)[None]
        features = self.image_encoder(x)
        return ImageEmbedding(features[0].permute(1, 2, 0))

    def point_decode(self, embedding: ImageEmbedding, task_id: int) -> PointDecodeOutput:
        task_id = self._check_task(task_id)
        features = embedding.features.permute(2, 0, 1)[None]
        return self.point_decoder(features, task_id)

    def encode_points(self, coords: np.ndarray | Tensor, validity: np.ndarray | Tensor) -> Tensor:
        """coords (K, N_p, 2) input pixels, validity (K, N_p) -> (K, N_p, D) tokens."""
        if isinstance(coords, np.ndarray):
            coords = torch.from_numpy(np.ascontiguousarray(coords))
        if isinstance(validity, np.ndarray):
            validity = torch.from_numpy(np.ascontiguousarray(validity))
        n_p = self.config.num_point_slots
        if coords.ndim != 3 or coords.shape[1] != n_p or coords.shape[2] != 2:
            raise ValueError(f"expected (K, {n_p}, 2) coords, got {tuple(coords.shape)}")
        if validity.shape != coords.shape[:2]:
            raise ValueError("validity shape must match coords (K, N_p)")
        return self.prompt_encoder(coords.to(self.dtype).to(self.device), validity.to(torch.bool))

    def hm_decode(self, embedding: ImageEmbedding, point_tokens: Tensor, task_id: int) -> MaskBundle:
        task_id = self._check_task(task_id)
        features = embedding.features.permute(2, 0, 1)[None]
        return self.hm_decoder(features, point_tokens, task_id)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    model: EtsamModel,
    path: str | Path,
    step: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    """Versioned checkpoint container: config, weights, step, optimizer state."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "step": int(step),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> tuple[EtsamModel, dict]:
    """Rebuild a model from a checkpoint; fails loudly on any shape mismatch."""
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format version {version!r}")
    config = ModelConfig(**payload["config"])
    model = EtsamModel(config)
    first = next(iter(payload["state_dict"].values()))
    if first.dtype != model.dtype:
        model.to(first.dtype)
    model.load_state_dict(payload["state_dict"], strict=True)
    model.apply_freeze()
    return model, payload
