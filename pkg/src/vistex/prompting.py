"""Support-image prompt engineering and prompt sequence assembly.

The default engineering darkens and Gaussian-blurs everything outside the
target boxes so the textualizer sees a support whose background is
de-emphasized but not erased.  Assembly appends each class's textualized
visual rows after the text rows; the encoder has no token positions, so
only the class map, not the physical order, carries meaning.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np
import torch
from scipy.ndimage import correlate1d
from torch import Tensor

from .errors import InvalidInputError, InvalidPromptError, FeatureShapeError
from .fusion import TextualizedToken, fuse_stages
from .mstb import MultiScaleTextualizer, TextualizedStageToken
from .ovlm import TokenSequence, ToyOVLM
from .synthdata import AnnotatedImage

ENGINEERING_METHODS = ("baseline", "bg_blur", "crop", "crop_context", "outline", "dye_red")

_BLUR_KERNEL_SIZE = 15
_BLUR_SIGMA = 3.0
_SHADOW = 0.1
_CONTEXT_PAD = 10


@dataclass
class SupportExemplar:
    """One engineered K-shot exemplar for a target class."""

    image: AnnotatedImage
    target_class: int
    target_boxes: list[tuple[float, float, float, float]]
    engineering_method: str = "bg_blur"

    def __post_init__(self) -> None:
        if not self.target_boxes:
            raise InvalidInputError("support exemplar needs at least one target box")
        if self.engineering_method not in ENGINEERING_METHODS:
            raise InvalidInputError(f"unknown engineering method {self.engineering_method!r}")

    def engineered_pixels(self) -> np.ndarray:
        return engineer_prompt(self.image.pixels, self.target_boxes, self.engineering_method)


def _union_mask(shape: tuple[int, int], boxes) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    h, w = shape
    for x0, y0, x1, y1 in boxes:
        xa, ya = max(int(math.floor(x0)), 0), max(int(math.floor(y0)), 0)
        xb, yb = min(int(math.ceil(x1)), w), min(int(math.ceil(y1)), h)
        mask[ya:yb, xa:xb] = True
    return mask


def gaussian_kernel_1d(size: int = _BLUR_KERNEL_SIZE, sigma: float = _BLUR_SIGMA) -> np.ndarray:
    """Truncated, normalized Gaussian tap weights."""
    half = size // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    return k / k.sum()


def _normalized_blur(image: np.ndarray) -> np.ndarray:
    """Separable Gaussian blur with the kernel clipped and re-normalized at
    the borders (zero padding divided by the local kernel mass)."""
    k = gaussian_kernel_1d()
    num = image.astype(np.float64)
    for axis in (0, 1):
        num = correlate1d(num, k, axis=axis, mode="constant", cval=0.0)
    den = np.ones(image.shape[:2], dtype=np.float64)
    for axis in (0, 1):
        den = correlate1d(den, k, axis=axis, mode="constant", cval=0.0)
    return num / den[..., None]


def _validate_boxes(image: np.ndarray, boxes) -> None:
    h, w = image.shape[:2]
    if not boxes:
        raise InvalidInputError("target boxes must be nonempty")
    for x0, y0, x1, y1 in boxes:
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise InvalidInputError(f"target box ({x0},{y0},{x1},{y1}) out of bounds")


def _union_box(boxes) -> tuple[float, float, float, float]:
    xs0, ys0, xs1, ys1 = zip(*boxes)
    return min(xs0), min(ys0), max(xs1), max(ys1)


def _crop_resize(image: np.ndarray, box, pad: float = 0.0) -> np.ndarray:
    from PIL import Image

    h, w = image.shape[:2]
    x0 = int(max(math.floor(box[0] - pad), 0))
    y0 = int(max(math.floor(box[1] - pad), 0))
    x1 = int(min(math.ceil(box[2] + pad), w))
    y1 = int(min(math.ceil(box[3] + pad), h))
    crop = np.round(image[y0:y1, x0:x1] * 255.0).astype(np.uint8)
    resized = Image.fromarray(crop).resize((w, h), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float32) / 255.0


def engineer_prompt(image: np.ndarray, target_boxes, method: str = "bg_blur") -> np.ndarray:
    """Preprocess a support image around its target boxes.

    baseline: unchanged copy.  bg_blur: outside the box union, darken by the
    shadow factor and blur; inside untouched.  crop / crop_context: cut to
    the union box (plus 10px of context for the latter) and resize back.
    outline: 1px red rectangles.  dye_red: grayscale with the target region
    tinted red.
    """
    _validate_boxes(image, target_boxes)
    if method == "baseline":
        return image.copy()
    if method == "bg_blur":
        out = image.astype(np.float32).copy()
        blurred = _normalized_blur(image * (1.0 - _SHADOW))
        bg = ~_union_mask(image.shape[:2], target_boxes)
        out[bg] = blurred[bg].astype(np.float32)
        return out
    if method == "crop":
        return _crop_resize(image, _union_box(target_boxes))
    if method == "crop_context":
        return _crop_resize(image, _union_box(target_boxes), pad=_CONTEXT_PAD)
    if method == "outline":
        out = image.astype(np.float32).copy()
        h, w = image.shape[:2]
        for x0, y0, x1, y1 in target_boxes:
            xa, ya = max(int(round(x0)), 0), max(int(round(y0)), 0)
            xb, yb = min(int(round(x1)), w) - 1, min(int(round(y1)), h) - 1
            out[ya:yb + 1, [xa, xb]] = (1.0, 0.0, 0.0)
            out[[ya, yb], xa:xb + 1] = (1.0, 0.0, 0.0)
        return out
    if method == "dye_red":
        gray = image @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        out = np.repeat(gray[..., None], 3, axis=-1).astype(np.float32)
        inside = _union_mask(image.shape[:2], target_boxes)
        out[inside, 1] *= 0.25
        out[inside, 2] *= 0.25
        return out
    raise InvalidInputError(f"unknown engineering method {method!r}")


def assemble_prompt(text_tokens: TokenSequence,
                    per_class_shot_tokens: dict[int, Tensor]) -> TokenSequence:
    """Text rows first, then each class's visual rows.

    With |C| classes, N words per class and K shots everywhere, the result
    has |C| * (N + K) rows.  Text rows are passed through untouched.
    """
    width = text_tokens.rows.shape[-1]
    text_classes = set(text_tokens.token_class_map)
    rows = [text_tokens.rows]
    class_map = list(text_tokens.token_class_map)
    kinds = list(text_tokens.token_kind)
    for cid in sorted(per_class_shot_tokens):
        shot_rows = per_class_shot_tokens[cid]
        if cid not in text_classes:
            raise InvalidPromptError(f"shot tokens for class {cid} absent from text prompt")
        if shot_rows.ndim != 2 or shot_rows.shape[-1] != width:
            raise FeatureShapeError(
                f"visual rows for class {cid} must be r x {width}"
            )
        rows.append(shot_rows)
        class_map.extend([cid] * shot_rows.shape[0])
        kinds.extend(["visual"] * shot_rows.shape[0])
    return TokenSequence(rows=torch.cat(rows, dim=0), token_class_map=class_map,
                         token_kind=kinds)


def encode_support_features(model: ToyOVLM, exemplars: list[SupportExemplar],
                            encode_tokens: TokenSequence) -> list:
    """Engineer and encode supports under the frozen detector (no gradients).

    Returns the per-stage feature pyramids, batched over supports.  The
    result carries no textualizer parameters, so it can be cached and reused
    across optimizer steps within an epoch.
    """
    if not exemplars:
        raise InvalidInputError("no support exemplars given")
    pixels = np.stack([ex.engineered_pixels() for ex in exemplars])
    batch = torch.from_numpy(pixels).permute(0, 3, 1, 2).to(model.param_dtype)
    with torch.no_grad():
        region_stages, _ = model.encode(batch, encode_tokens.rows.to(model.param_dtype))
    return [
        type(f)(stage_index=f.stage_index, scales=[s.detach() for s in f.scales],
                grid_shapes=f.grid_shapes)
        for f in region_stages
    ]


def shot_tokens_from_features(textualizer: MultiScaleTextualizer, region_stages: list,
                              exemplars: list[SupportExemplar], msf_mode: str = "max",
                              stage_subset: list[int] | None = None
                              ) -> list[TextualizedToken]:
    """Textualize already-encoded supports; gradients flow through the
    textualizer only."""
    stages = stage_subset if stage_subset is not None else list(range(len(region_stages)))
    per_stage_rows = [textualizer.forward_stage(region_stages[i], i) for i in stages]
    tokens = []
    for b, ex in enumerate(exemplars):
        stage_tokens = [
            TextualizedStageToken(stage_index=i, row=per_stage_rows[s][b:b + 1])
            for s, i in enumerate(stages)
        ]
        tokens.append(fuse_stages(stage_tokens, mode=msf_mode,
                                  source=(-1, ex.target_class)))
    return tokens


def textualize_supports(model: ToyOVLM, textualizer: MultiScaleTextualizer,
                        exemplars: list[SupportExemplar], encode_tokens: TokenSequence,
                        msf_mode: str = "max",
                        stage_subset: list[int] | None = None) -> list[TextualizedToken]:
    """Full pipeline for a batch of supports: engineer, encode, textualize."""
    features = encode_support_features(model, exemplars, encode_tokens)
    return shot_tokens_from_features(textualizer, features, exemplars,
                                     msf_mode=msf_mode, stage_subset=stage_subset)
