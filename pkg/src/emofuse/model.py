"""Multimodal fusion model built from small deterministic stages.

Audio: 128-channel log-mel -> frozen encoder stub (stride-2 conv, about 20 ms
per step) -> stride-3 mean pooling (about 60 ms per token) -> two-layer
projector into the decoder width. Faces: frozen multi-scale encoder with an
MLP fusing the scales into a fixed grid of tokens per frame. Frames: frozen
grid encoder. Three fusion variants combine visual and facial tokens into one
video sequence of identical total length, and modality wrapping brackets each
modality with marker embeddings, inserting a single all-zero token for an
absent modality. The decoder is a tiny causal transformer trained with
teacher-forced next-token loss.

Encoders and fusion attention are fixed random stand-ins for pretrained
towers; only the projectors and the decoder are meant to train.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .media import MEL_CHANNELS

FUSION_VARIANTS = ("frame_concat", "cross_attention", "video_concat")

#: Marker rows in the decoder's marker embedding table.
VI_START, VI_END, AU_START, AU_END = 0, 1, 2, 3

#: Audio token pooling: stride over encoder steps, giving ~60 ms per token.
AUDIO_POOL_STRIDE = 3


class Modality(Enum):
    VISUAL = "VISUAL"
    FACIAL = "FACIAL"
    AUDIO = "AUDIO"
    FUSED = "FUSED"
    TEXT = "TEXT"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    vocab_size: int = 512
    frames_per_video: int = 8
    visual_grid: int = 14
    facial_grid: int = 4
    face_scales: tuple[int, ...] = (8, 4, 2)
    d_audio_enc: int = 64
    d_face: int = 32
    d_visual: int = 48
    decoder_layers: int = 2
    fusion_variant: str = "video_concat"
    max_positions: int = 4096
    max_frames: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ValueError(
                f"fusion_variant must be one of {FUSION_VARIANTS}, got {self.fusion_variant!r}"
            )
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must be at least 5")
        for s in self.face_scales:
            if s % self.facial_grid != 0 and self.facial_grid % s != 0:
                raise ValueError(
                    f"face scale {s} incompatible with facial_grid {self.facial_grid}"
                )
        if self.frames_per_video < 1 or self.frames_per_video > self.max_frames:
            raise ValueError("frames_per_video must be in [1, max_frames]")

    @property
    def visual_tokens_per_frame(self) -> int:
        return self.visual_grid * self.visual_grid

    @property
    def facial_tokens_per_frame(self) -> int:
        return self.facial_grid * self.facial_grid

    @property
    def fused_length(self) -> int:
        return self.frames_per_video * (
            self.visual_tokens_per_frame + self.facial_tokens_per_frame
        )

    def to_json(self) -> dict:
        payload = {k: getattr(self, k) for k in self.__dataclass_fields__}
        payload["face_scales"] = list(self.face_scales)
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "ModelConfig":
        data = dict(payload)
        data["face_scales"] = tuple(data.get("face_scales", (8, 4, 2)))
        return cls(**data)


@dataclass(frozen=True)
class TokenSequence:
    tokens: torch.Tensor  # [L, d_model]
    modality: Modality


@dataclass(frozen=True)
class WrappedSequence:
    """Marker-bracketed multimodal prefix ready for the decoder.

    Spans are [start, end) token index ranges of the content between the
    markers of each modality.
    """

    tokens: torch.Tensor
    vision_span: tuple[int, int]
    audio_span: tuple[int, int]


def sinusoid_table(length: int, dim: int) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    half = torch.arange(dim // 2, dtype=torch.float64)
    rate = torch.pow(10000.0, -2.0 * half / dim)
    angles = position * rate
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles)
    return table.to(torch.float32)


def _block_pool(image: torch.Tensor, grid: int) -> torch.Tensor:
    """Average-pool an [H, W, C] image onto a [grid, grid, C] cell grid."""
    h, w, c = image.shape
    if h < grid:
        image = image.repeat_interleave(math.ceil(grid / h), dim=0)
        h = image.shape[0]
    if w < grid:
        image = image.repeat_interleave(math.ceil(grid / w), dim=1)
        w = image.shape[1]
    h_trim, w_trim = h - h % grid, w - w % grid
    x = image[:h_trim, :w_trim]
    x = x.reshape(grid, h_trim // grid, grid, w_trim // grid, c)
    return x.mean(dim=(1, 3))


def _regrid(cells: torch.Tensor, grid: int) -> torch.Tensor:
    """Resize an [s, s, C] cell grid to [grid, grid, C] by averaging or repeating."""
    s = cells.shape[0]
    if s == grid:
        return cells
    if s % grid == 0:
        k = s // grid
        return cells.reshape(grid, k, grid, k, -1).mean(dim=(1, 3))
    k = grid // s
    return cells.repeat_interleave(k, dim=0).repeat_interleave(k, dim=1)


def _as_image_tensor(image, dtype) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        tensor = torch.from_numpy(np.ascontiguousarray(image))
    else:
        tensor = image
    tensor = tensor.to(dtype)
    if tensor.max() > 1.5:
        tensor = tensor / 255.0
    return tensor


class AudioEncoderStub(nn.Module):
    """Frozen stand-in for a pretrained speech encoder.

    One stride-2 convolution over mel frames (10 ms each) gives about 20 ms
    per step; callers pool with stride 3 for about 60 ms per token.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.conv_w = nn.Parameter(torch.empty(config.d_audio_enc, MEL_CHANNELS, 3))
        self.conv_b = nn.Parameter(torch.zeros(config.d_audio_enc))
        self.lin_W = nn.Parameter(torch.empty(config.d_audio_enc, config.d_audio_enc))
        self.lin_b = nn.Parameter(torch.zeros(config.d_audio_enc))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        # mel [128, F] -> steps [F2, d_audio_enc]
        x = mel.unsqueeze(0)  # [1, 128, F]
        x = F.conv1d(x, self.conv_w, self.conv_b, stride=2, padding=1)
        x = F.gelu(x)
        x = x.squeeze(0).transpose(0, 1)  # [F2, d_audio_enc]
        return x @ self.lin_W + self.lin_b


def pool_audio_steps(steps: torch.Tensor, stride: int = AUDIO_POOL_STRIDE) -> torch.Tensor:
    """Mean-pool encoder steps in non-overlapping groups, dropping the remainder."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n = steps.shape[0] // stride
    if n == 0:
        return steps[:0]
    return steps[: n * stride].reshape(n, stride, -1).mean(dim=1)


class TwoLayerProjector(nn.Module):
    """Two linear layers with a GELU between, mapping into the decoder width."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.W1 = nn.Parameter(torch.empty(d_in, d_out))
        self.b1 = nn.Parameter(torch.zeros(d_out))
        self.W2 = nn.Parameter(torch.empty(d_out, d_out))
        self.b2 = nn.Parameter(torch.zeros(d_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.gelu(x @ self.W1 + self.b1) @ self.W2 + self.b2


class FaceEncoderStub(nn.Module):
    """Frozen multi-scale face feature stub.

    Each crop is pooled to several grid scales, every scale is projected and
    resized to the output grid, and a small MLP fuses the scales into
    ``facial_grid ** 2`` feature vectors. All biases are zero, so an all-zero
    crop (or an absent face) maps to an all-zero token block.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.scale_W = nn.ParameterList(
            nn.Parameter(torch.empty(3, config.d_face)) for _ in config.face_scales
        )
        d_cat = config.d_face * len(config.face_scales)
        self.fuse_W1 = nn.Parameter(torch.empty(d_cat, config.d_face))
        self.fuse_W2 = nn.Parameter(torch.empty(config.d_face, config.d_face))

    def encode_crop(self, crop: Optional[np.ndarray]) -> torch.Tensor:
        g = self.config.facial_grid
        dtype = self.fuse_W1.dtype
        if crop is None:
            return torch.zeros(g * g, self.config.d_face, dtype=dtype)
        image = _as_image_tensor(crop, dtype)
        maps = []
        for scale, weight in zip(self.config.face_scales, self.scale_W):
            cells = _block_pool(image, scale) @ weight  # [s, s, d_face]
            maps.append(_regrid(cells, g))
        fused = torch.cat(maps, dim=-1).reshape(g * g, -1)
        return F.gelu(fused @ self.fuse_W1) @ self.fuse_W2

    def forward(self, crops: Sequence[Optional[np.ndarray]]) -> torch.Tensor:
        return torch.stack([self.encode_crop(c) for c in crops])  # [T, L_f, d_face]


class VisualEncoderStub(nn.Module):
    """Frozen global-frame encoder: grid pooling plus one linear map."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.W = nn.Parameter(torch.empty(3, config.d_visual))

    def forward(self, frames) -> torch.Tensor:
        g = self.config.visual_grid
        out = []
        for frame in frames:
            image = _as_image_tensor(frame, self.W.dtype)
            cells = _block_pool(image, g) @ self.W
            out.append(cells.reshape(g * g, -1))
        return torch.stack(out)  # [T, L_v, d_visual]


class CrossAttentionFusion(nn.Module):
    """Single-head cross-attention with facial tokens as the queries."""

    def __init__(self, d_model: int):
        super().__init__()
        self.Wq = nn.Parameter(torch.empty(d_model, d_model))
        self.Wk = nn.Parameter(torch.empty(d_model, d_model))
        self.Wv = nn.Parameter(torch.empty(d_model, d_model))

    def cross_attend(
        self, facial: torch.Tensor, visual: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        q = facial @ self.Wq
        k = visual @ self.Wk
        v = visual @ self.Wv
        scores = q @ k.transpose(0, 1) / math.sqrt(q.shape[-1])
        weights = F.softmax(scores, dim=-1)  # [L_f, L_v], rows sum to 1
        return weights @ v, weights


class _DecoderBlock(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.Wq = nn.Parameter(torch.empty(d, d))
        self.Wk = nn.Parameter(torch.empty(d, d))
        self.Wv = nn.Parameter(torch.empty(d, d))
        self.Wo = nn.Parameter(torch.empty(d, d))
        self.ln2 = nn.LayerNorm(d)
        self.mlp_W1 = nn.Parameter(torch.empty(d, 4 * d))
        self.mlp_b1 = nn.Parameter(torch.zeros(4 * d))
        self.mlp_W2 = nn.Parameter(torch.empty(4 * d, d))
        self.mlp_b2 = nn.Parameter(torch.zeros(d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        q, k, v = h @ self.Wq, h @ self.Wk, h @ self.Wv
        scores = q @ k.transpose(0, 1) / math.sqrt(h.shape[-1])
        mask = torch.triu(
            torch.full(scores.shape, float("-inf"), dtype=scores.dtype), diagonal=1
        )
        attended = F.softmax(scores + mask, dim=-1) @ v
        x = x + attended @ self.Wo
        h = self.ln2(x)
        return x + (F.gelu(h @ self.mlp_W1 + self.mlp_b1) @ self.mlp_W2 + self.mlp_b2)


class ToyDecoderStub(nn.Module):
    """Minimal causal transformer language model over embedded inputs."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.tok_emb = nn.Parameter(torch.empty(config.vocab_size, d))
        self.marker_emb = nn.Parameter(torch.empty(4, d))
        self.blocks = nn.ModuleList(_DecoderBlock(d) for _ in range(config.decoder_layers))
        self.ln_f = nn.LayerNorm(d)
        self.head_W = nn.Parameter(torch.empty(d, config.vocab_size))
        self.head_b = nn.Parameter(torch.zeros(config.vocab_size))
        self.register_buffer("pos_table", sinusoid_table(config.max_positions, d))

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        length = embeddings.shape[0]
        if length > self.pos_table.shape[0]:
            raise ValueError(
                f"sequence length {length} exceeds position table {self.pos_table.shape[0]}"
            )
        h = embeddings + self.pos_table[:length].to(embeddings.dtype)
        for block in self.blocks:
            h = block(h)
        h = self.ln_f(h)
        return h @ self.head_W + self.head_b


class EmoFuseModel(nn.Module):
    """The full pipeline: encoders, projectors, fusion, wrapping, decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.audio_encoder = AudioEncoderStub(config)
        self.audio_projector = TwoLayerProjector(config.d_audio_enc, config.d_model)
        self.face_encoder = FaceEncoderStub(config)
        self.facial_projector = TwoLayerProjector(config.d_face, config.d_model)
        self.visual_encoder = VisualEncoderStub(config)
        self.visual_projector = TwoLayerProjector(config.d_visual, config.d_model)
        if config.fusion_variant == "cross_attention":
            self.fusion = CrossAttentionFusion(config.d_model)
        else:
            self.fusion = None
        self.register_buffer(
            "temporal_table", sinusoid_table(config.max_frames, config.d_model)
        )
        self.decoder = ToyDecoderStub(config)
        self._init_parameters()
        self._freeze_stubs()

    def _init_parameters(self):
        generator = torch.Generator().manual_seed(self.config.seed)
        for name, param in self.named_parameters():
            if param.dim() >= 2:
                # fan-in scaling keeps activations O(1) through the stub
                # stack regardless of the configured widths
                fan_in = param.shape[-2] if param.dim() == 2 else (
                    param[0].numel()
                )
                std = fan_in ** -0.5
                with torch.no_grad():
                    param.copy_(
                        torch.randn(param.shape, generator=generator) * std
                    )
            # 1-D parameters are biases and LayerNorm terms; LayerNorm weights
            # stay at their ones init, biases at zero

    def _freeze_stubs(self):
        for module in (self.audio_encoder, self.face_encoder, self.visual_encoder):
            for param in module.parameters():
                param.requires_grad_(False)
        if self.fusion is not None:
            for param in self.fusion.parameters():
                param.requires_grad_(False)

    # --- per-modality encoding ---------------------------------------------

    def encode_audio(self, mel_values) -> TokenSequence:
        """Log-mel [128, F] to projected audio tokens, one per ~60 ms."""
        if isinstance(mel_values, np.ndarray):
            mel = torch.from_numpy(mel_values)
        else:
            mel = mel_values
        mel = mel.to(self.audio_encoder.conv_w.dtype)
        if mel.dim() != 2 or mel.shape[0] != MEL_CHANNELS:
            raise ValueError(f"expected mel of shape [{MEL_CHANNELS}, F], got {tuple(mel.shape)}")
        steps = self.audio_encoder(mel)
        pooled = pool_audio_steps(steps)
        return TokenSequence(self.audio_projector(pooled), Modality.AUDIO)

    def encode_frames(self, frames) -> torch.Tensor:
        visual = self.visual_encoder(frames)  # [T, L_v, d_visual]
        return self.visual_projector(visual)  # [T, L_v, d_model]

    def encode_faces(self, crops) -> torch.Tensor:
        facial = self.face_encoder(crops)  # [T, L_f, d_face]
        return self.facial_projector(facial)  # [T, L_f, d_model]

    # --- fusion ---------------------------------------------------------------

    def fuse_video(self, visual: torch.Tensor, facial: torch.Tensor) -> TokenSequence:
        """Combine per-frame visual and facial tokens into one video sequence.

        Every variant yields exactly ``T * (L_v + L_f)`` tokens:
        frame_concat interleaves per frame, cross_attention replaces the
        facial block with attention output, video_concat groups all visual
        tokens then all facial tokens.
        """
        t_frames, l_v, d = visual.shape
        l_f = facial.shape[1]
        if facial.shape[0] != t_frames:
            raise ValueError(
                f"visual has {t_frames} frames but facial has {facial.shape[0]}"
            )
        temporal = self.temporal_table[:t_frames].to(visual.dtype)
        variant = self.config.fusion_variant
        if variant == "frame_concat":
            per_frame = [
                torch.cat([visual[t] + temporal[t], facial[t] + temporal[t]], dim=0)
                for t in range(t_frames)
            ]
            fused = torch.cat(per_frame, dim=0)
        elif variant == "cross_attention":
            per_frame = []
            for t in range(t_frames):
                attended, _ = self.fusion.cross_attend(facial[t], visual[t])
                per_frame.append(
                    torch.cat([visual[t] + temporal[t], attended + temporal[t]], dim=0)
                )
            fused = torch.cat(per_frame, dim=0)
        else:  # video_concat
            visual_block = (visual + temporal[:, None, :]).reshape(t_frames * l_v, d)
            facial_block = (facial + temporal[:, None, :]).reshape(t_frames * l_f, d)
            fused = torch.cat([visual_block, facial_block], dim=0)
        return TokenSequence(fused, Modality.FUSED)

    # --- wrapping and loss ------------------------------------------------------

    def wrap_modalities(
        self,
        vision: Optional[TokenSequence],
        audio: Optional[TokenSequence],
    ) -> WrappedSequence:
        """Bracket each modality with its markers.

        An absent modality contributes exactly one all-zero token between its
        markers; at least one modality must be present.
        """
        if vision is None and audio is None:
            raise ValueError("at least one modality must be present")
        marker = self.decoder.marker_emb
        zero = torch.zeros(1, marker.shape[1], dtype=marker.dtype)
        vision_tokens = vision.tokens if vision is not None else zero
        audio_tokens = audio.tokens if audio is not None else zero
        parts = [
            marker[VI_START : VI_START + 1],
            vision_tokens,
            marker[VI_END : VI_END + 1],
            marker[AU_START : AU_START + 1],
            audio_tokens,
            marker[AU_END : AU_END + 1],
        ]
        vision_span = (1, 1 + vision_tokens.shape[0])
        audio_start = vision_span[1] + 2
        audio_span = (audio_start, audio_start + audio_tokens.shape[0])
        return WrappedSequence(torch.cat(parts, dim=0), vision_span, audio_span)

    def embed_tokens(self, token_ids: Sequence[int]) -> torch.Tensor:
        ids = torch.as_tensor(list(token_ids), dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(
                f"token ids must be in [0, {self.config.vocab_size}), got "
                f"[{ids.min()}, {ids.max()}]"
            )
        return self.decoder.tok_emb[ids]

    def next_token_loss(
        self,
        wrapped: WrappedSequence,
        prompt_ids: Sequence[int],
        target_ids: Sequence[int],
    ) -> torch.Tensor:
        """Teacher-forced mean NLL of the target tokens after the prompt."""
        if not target_ids:
            raise ValueError("target_ids must be non-empty")
        prefix_len = wrapped.tokens.shape[0] + len(prompt_ids)
        text = self.embed_tokens(list(prompt_ids) + list(target_ids))
        sequence = torch.cat([wrapped.tokens, text], dim=0)
        logits = self.decoder(sequence)
        predict_at = logits[prefix_len - 1 : prefix_len - 1 + len(target_ids)]
        targets = torch.as_tensor(list(target_ids), dtype=torch.long)
        return F.cross_entropy(predict_at, targets)


# --- trainable block selection ---------------------------------------------------

#: Block names accepted by :func:`set_trainable`, mapped to parameter prefixes.
TRAINABLE_BLOCKS = {
    "audio_projector": "audio_projector.",
    "facial_projector": "facial_projector.",
    "visual_projector": "visual_projector.",
    "decoder": "decoder.",
    "audio_encoder": "audio_encoder.",
    "face_encoder": "face_encoder.",
    "visual_encoder": "visual_encoder.",
    "fusion": "fusion.",
}


def set_trainable(model: EmoFuseModel, blocks: Sequence[str]) -> list[str]:
    """Freeze everything except the named blocks; returns trainable param names."""
    unknown = [b for b in blocks if b not in TRAINABLE_BLOCKS]
    if unknown:
        raise ValueError(
            f"unknown trainable blocks {unknown}; valid: {sorted(TRAINABLE_BLOCKS)}"
        )
    prefixes = tuple(TRAINABLE_BLOCKS[b] for b in blocks)
    trainable = []
    for name, param in model.named_parameters():
        wanted = name.startswith(prefixes) if prefixes else False
        param.requires_grad_(wanted)
        if wanted:
            trainable.append(name)
    return trainable


# --- checkpoints --------------------------------------------------------------------

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(model: EmoFuseModel, path: str | Path) -> Path:
    """Write parameters and buffers as NPZ plus a sibling meta JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(path, **state)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_json(),
    }
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> EmoFuseModel:
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    if not meta_path.exists():
        raise FileNotFoundError(f"checkpoint meta file missing: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
    config = ModelConfig.from_json(meta["config"])
    model = EmoFuseModel(config)
    with np.load(path if path.suffix == ".npz" else str(path) + ".npz") as archive:
        state = {k: torch.from_numpy(archive[k]) for k in archive.files}
    model.load_state_dict(state)
    return model
