"""Toy object-level vision-language detector.

A miniature grounded detector with the structural properties the textualizer
relies on: a strided convolutional stem that produces a multi-scale feature
pyramid, a stack of cross-modal encoder stages (per-scale residual convolution
followed by bidirectional single-head cross-attention between region rows and
prompt token rows, with no positional encoding on tokens), and a dense
grounding head that scores every feature cell against every prompt token.

All tensors carry a leading batch dimension internally; the single-image
operations wrap batch size 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .config import NO_OBJECT, OVLMConfig
from .errors import FeatureShapeError, InvalidInputError, InvalidPromptError

OOV_WORD = "<oov>"
NO_OBJECT_WORD = "<noobj>"


def build_vocab(base_names: list[str], vocab_size: int) -> dict[str, int]:
    """Word -> embedding index; slot 0 is the no-object pad, slot 1 the OOV."""
    if len(base_names) + 2 > vocab_size:
        raise InvalidInputError(
            f"{len(base_names)} words exceed vocab of {vocab_size} (2 slots reserved)"
        )
    vocab = {NO_OBJECT_WORD: 0, OOV_WORD: 1}
    for i, name in enumerate(base_names):
        vocab[name] = 2 + i
    return vocab


@dataclass
class TokenSequence:
    """Prompt rows in text-token space with per-row class assignment.

    ``token_class_map[t]`` is the class id a row grounds, or NO_OBJECT for
    rows that ground nothing.  ``token_kind[t]`` is "text" or "visual".
    """

    rows: Tensor                      # T x d_T
    token_class_map: list[int]
    token_kind: list[str]

    def __post_init__(self) -> None:
        if self.rows.ndim != 2:
            raise FeatureShapeError("token rows must be a T x d_T matrix")
        if not (len(self.token_class_map) == len(self.token_kind) == self.rows.shape[0]):
            raise InvalidPromptError("token metadata must align with rows")

    def __len__(self) -> int:
        return self.rows.shape[0]

    def permuted(self, perm: list[int]) -> "TokenSequence":
        return TokenSequence(
            rows=self.rows[list(perm)],
            token_class_map=[self.token_class_map[i] for i in perm],
            token_kind=[self.token_kind[i] for i in perm],
        )

    @staticmethod
    def cat(parts: list["TokenSequence"]) -> "TokenSequence":
        if not parts:
            raise InvalidPromptError("cannot concatenate an empty prompt")
        return TokenSequence(
            rows=torch.cat([p.rows for p in parts], dim=0),
            token_class_map=[c for p in parts for c in p.token_class_map],
            token_kind=[k for p in parts for k in p.token_kind],
        )


@dataclass
class MultiScaleFeatures:
    """Feature pyramid of one encoder stage; scales[j] is (B, rows_j, d_I)."""

    stage_index: int
    scales: list[Tensor]
    grid_shapes: list[tuple[int, int]]

    def __post_init__(self) -> None:
        if len(self.scales) != len(self.grid_shapes):
            raise FeatureShapeError("one grid shape per scale required")
        for t, (h, w) in zip(self.scales, self.grid_shapes):
            if t.shape[-2] != h * w:
                raise FeatureShapeError(
                    f"scale with {t.shape[-2]} rows does not match grid {h}x{w}"
                )

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    def rows(self, j: int) -> int:
        return self.scales[j].shape[-2]


@dataclass
class GroundingOutput:
    """Dense region-token alignment scores and box regressions, one image."""

    logits: list[Tensor]        # per scale: cells_j x T
    box_deltas: list[Tensor]    # per scale: cells_j x 4, (l, t, r, b) / stride
    grid_shapes: list[tuple[int, int]]
    strides: list[int]
    image_size: int


@dataclass
class ForwardResult:
    output: GroundingOutput
    region_stages: list[MultiScaleFeatures]   # i = 0..L
    token_stages: list[Tensor]                # i = 0..L, each T x d_T
    batch_output: "BatchGroundingOutput | None" = None


@dataclass
class BatchGroundingOutput:
    logits: list[Tensor]        # per scale: B x cells_j x T
    box_deltas: list[Tensor]    # per scale: B x cells_j x 4
    grid_shapes: list[tuple[int, int]]
    strides: list[int]
    image_size: int

    def image(self, b: int) -> GroundingOutput:
        return GroundingOutput(
            logits=[l[b] for l in self.logits],
            box_deltas=[d[b] for d in self.box_deltas],
            grid_shapes=self.grid_shapes,
            strides=self.strides,
            image_size=self.image_size,
        )


class VisualStem(nn.Module):
    """Strided conv tokenizer: image -> M-scale feature pyramid (stage 0)."""

    def __init__(self, config: OVLMConfig):
        super().__init__()
        self.config = config
        steps = int(math.log2(config.image_size // config.grid_h))
        entry: list[nn.Module] = []
        in_ch = 3
        for _ in range(max(steps, 1)):
            entry += [nn.Conv2d(in_ch, config.d_visual, 3, stride=2, padding=1), nn.ReLU()]
            in_ch = config.d_visual
        self.entry = nn.Sequential(*entry)
        self.downsample = nn.ModuleList(
            nn.Conv2d(config.d_visual, config.d_visual, 3, stride=2, padding=1)
            for _ in range(config.num_scales - 1)
        )

    def forward(self, images: Tensor) -> list[Tensor]:
        grids = [self.entry(images)]
        for conv in self.downsample:
            grids.append(torch.relu(conv(grids[-1])))
        return grids


class CrossModalStage(nn.Module):
    """One encoder stage: per-scale residual conv, then bidirectional
    single-head cross-attention between all region rows and the token rows,
    then a residual feed-forward on the tokens.  Tokens carry no positional
    encoding, so the stage is exactly permutation-equivariant over them.
    """

    def __init__(self, config: OVLMConfig):
        super().__init__()
        d_i, d_t = config.d_visual, config.d_text
        d_a = d_t
        self.scale_conv = nn.Conv2d(d_i, d_i, 3, padding=1)
        self.norm_region = nn.LayerNorm(d_i)
        self.norm_token = nn.LayerNorm(d_t)
        self.r2t_q = nn.Linear(d_i, d_a, bias=False)
        self.r2t_k = nn.Linear(d_t, d_a, bias=False)
        self.r2t_v = nn.Linear(d_t, d_a, bias=False)
        self.r2t_out = nn.Linear(d_a, d_i, bias=False)
        self.t2r_q = nn.Linear(d_t, d_a, bias=False)
        self.t2r_k = nn.Linear(d_i, d_a, bias=False)
        self.t2r_v = nn.Linear(d_i, d_a, bias=False)
        self.t2r_out = nn.Linear(d_a, d_t, bias=False)
        self.norm_ffn = nn.LayerNorm(d_t)
        self.token_ffn = nn.Sequential(
            nn.Linear(d_t, 2 * d_t), nn.ReLU(), nn.Linear(2 * d_t, d_t)
        )
        self._scale = 1.0 / math.sqrt(d_a)

    def ffn_update(self, tokens: Tensor) -> Tensor:
        """Token path with attention removed; the masked degenerate case."""
        return tokens + self.token_ffn(self.norm_ffn(tokens))

    def forward(self, grids: list[Tensor], tokens: Tensor,
                disable_attention: bool = False) -> tuple[list[Tensor], Tensor]:
        grids = [g + self.scale_conv(g) for g in grids]
        rows = torch.cat([g.flatten(2).transpose(1, 2) for g in grids], dim=1)
        if not disable_attention:
            nr, nt = self.norm_region(rows), self.norm_token(tokens)
            attn_rt = torch.softmax(
                (self.r2t_q(nr) @ self.r2t_k(nt).transpose(1, 2)) * self._scale, dim=-1
            )
            rows = rows + self.r2t_out(attn_rt @ self.r2t_v(nt))
            attn_tr = torch.softmax(
                (self.t2r_q(nt) @ self.t2r_k(nr).transpose(1, 2)) * self._scale, dim=-1
            )
            tokens = tokens + self.t2r_out(attn_tr @ self.t2r_v(nr))
        tokens = self.ffn_update(tokens)
        out_grids = []
        offset = 0
        for g in grids:
            b, c, h, w = g.shape
            block = rows[:, offset:offset + h * w]
            out_grids.append(block.transpose(1, 2).reshape(b, c, h, w))
            offset += h * w
        return out_grids, tokens


class GroundingHead(nn.Module):
    """Dense alignment + box head.

    The alignment score of (cell, token) is the dot product between the
    text-space projection of the cell's region feature and the token row,
    scaled by 1/sqrt(d_T).  Scores are linear in the token rows.  The box
    head regresses (left, top, right, bottom) cell-center offsets in stride
    units and is shared across scales.
    """

    def __init__(self, config: OVLMConfig):
        super().__init__()
        self.config = config
        self.align_proj = nn.Linear(config.d_visual, config.d_text, bias=False)
        self.box_head = nn.Linear(config.d_visual, 4)

    def forward(self, region_rows: list[Tensor], tokens: Tensor
                ) -> tuple[list[Tensor], list[Tensor]]:
        scale = 1.0 / math.sqrt(self.config.d_text)
        logits = [(self.align_proj(r) @ tokens.transpose(1, 2)) * scale for r in region_rows]
        deltas = [self.box_head(r) for r in region_rows]
        return logits, deltas

    def text_space_region(self, region_rows: Tensor) -> Tensor:
        return self.align_proj(region_rows)


class ToyOVLM(nn.Module):
    """The full toy detector; see module docstring."""

    def __init__(self, config: OVLMConfig, vocab: dict[str, int]):
        super().__init__()
        self.config = config
        self.vocab = dict(vocab)
        self.embedding = nn.Embedding(config.vocab_size, config.d_text)
        self.stem = VisualStem(config)
        self.stages = nn.ModuleList(CrossModalStage(config) for _ in range(config.num_stages))
        self.head = GroundingHead(config)

    @property
    def param_dtype(self) -> torch.dtype:
        return self.embedding.weight.dtype

    # -- text pathway -------------------------------------------------------

    def tokenize_text(self, names: list[str], class_ids: list[int] | None = None
                      ) -> TokenSequence:
        """One embedding row per class word; unknown words share the OOV row."""
        if not names:
            raise InvalidPromptError("prompt must contain at least one word")
        if class_ids is None:
            class_ids = list(range(len(names)))
        if len(class_ids) != len(names):
            raise InvalidPromptError("one class id per prompt word required")
        oov = self.vocab[OOV_WORD]
        idx = torch.tensor([self.vocab.get(n, oov) for n in names], dtype=torch.long)
        return TokenSequence(
            rows=self.embedding(idx),
            token_class_map=list(class_ids),
            token_kind=["text"] * len(names),
        )

    def padding_tokens(self) -> TokenSequence:
        """Always-negative prompt rows: the OOV word and the no-object word."""
        return self.tokenize_text([OOV_WORD, NO_OBJECT_WORD], [NO_OBJECT, NO_OBJECT])

    # -- visual pathway ------------------------------------------------------

    def _as_image_batch(self, pixels) -> Tensor:
        if isinstance(pixels, np.ndarray):
            pixels = torch.from_numpy(np.ascontiguousarray(pixels))
        if pixels.ndim == 3:                       # H x W x 3 -> 1 x 3 x H x W
            pixels = pixels.permute(2, 0, 1).unsqueeze(0)
        s = self.config.image_size
        if pixels.shape[-3:] != (3, s, s):
            raise FeatureShapeError(f"expected 3x{s}x{s} image, got {tuple(pixels.shape)}")
        return pixels.to(self.param_dtype)

    def visual_tokenize(self, pixels) -> MultiScaleFeatures:
        """Stage-0 pyramid from raw pixels (H0 x W0 x 3 in [0,1])."""
        grids = self.stem(self._as_image_batch(pixels))
        return self._grids_to_features(0, grids)

    def _grids_to_features(self, stage_index: int, grids: list[Tensor]) -> MultiScaleFeatures:
        return MultiScaleFeatures(
            stage_index=stage_index,
            scales=[g.flatten(2).transpose(1, 2) for g in grids],
            grid_shapes=[tuple(g.shape[-2:]) for g in grids],
        )

    # -- encoder -------------------------------------------------------------

    def encode_stage(self, stage_index: int, features: MultiScaleFeatures,
                     token_rows: Tensor, disable_attention: bool = False
                     ) -> tuple[MultiScaleFeatures, Tensor]:
        """Apply encoder stage ``stage_index``; shapes in == shapes out."""
        if token_rows.shape[-1] != self.config.d_text:
            raise FeatureShapeError(
                f"token width {token_rows.shape[-1]} != d_text {self.config.d_text}"
            )
        grids = [
            t.transpose(1, 2).reshape(t.shape[0], self.config.d_visual, h, w)
            for t, (h, w) in zip(features.scales, features.grid_shapes)
        ]
        out_grids, out_tokens = self.stages[stage_index](
            grids, token_rows, disable_attention=disable_attention
        )
        return self._grids_to_features(stage_index + 1, out_grids), out_tokens

    def encode(self, images: Tensor, token_rows: Tensor
               ) -> tuple[list[MultiScaleFeatures], list[Tensor]]:
        """Run all stages; returns intermediates for i = 0..L."""
        features = self.visual_tokenize(images)
        b = features.scales[0].shape[0]
        if token_rows.ndim == 2:
            token_rows = token_rows.unsqueeze(0)
        if token_rows.shape[0] == 1 and b > 1:
            token_rows = token_rows.expand(b, -1, -1)
        region_stages = [features]
        token_stages = [token_rows]
        for i in range(self.config.num_stages):
            features, token_rows = self.encode_stage(i, features, token_rows)
            region_stages.append(features)
            token_stages.append(token_rows)
        return region_stages, token_stages

    # -- full forward ---------------------------------------------------------

    def forward_batch(self, images: Tensor, prompt: TokenSequence
                      ) -> tuple[BatchGroundingOutput, list[MultiScaleFeatures], list[Tensor]]:
        if len(prompt) == 0:
            raise InvalidPromptError("prompt is empty")
        region_stages, token_stages = self.encode(images, prompt.rows.to(self.param_dtype))
        logits, deltas = self.head(region_stages[-1].scales, token_stages[-1])
        out = BatchGroundingOutput(
            logits=logits,
            box_deltas=deltas,
            grid_shapes=region_stages[-1].grid_shapes,
            strides=[self.config.stride(j) for j in range(self.config.num_scales)],
            image_size=self.config.image_size,
        )
        return out, region_stages, token_stages

    def forward(self, pixels, prompt: TokenSequence) -> ForwardResult:
        """Single-image forward pass exposing every stage's intermediates."""
        batch, region_stages, token_stages = self.forward_batch(
            self._as_image_batch(pixels), prompt
        )
        return ForwardResult(
            output=batch.image(0),
            region_stages=region_stages,
            token_stages=[t[0] for t in token_stages],
            batch_output=batch,
        )


def cell_centers(grid_shape: tuple[int, int], stride: int, dtype=torch.float32) -> Tensor:
    """Pixel coordinates (x, y) of every cell center, row-major order."""
    h, w = grid_shape
    ys = (torch.arange(h, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(w, dtype=dtype) + 0.5) * stride
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)
