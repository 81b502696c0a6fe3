"""Residual-to-mask postprocessing and multimodal mask fusion.

Per modality: signed residual -> adaptive threshold -> Otsu binarization ->
per-slice morphological cleanup -> largest 3D connected component ->
optional prompt-driven slice refinement. The t1c mask becomes the enhancing
tumor, t2f-minus-t1c the FLAIR-hyperintense surround, and per-slice holes
in their union the non-enhancing core.
"""

from __future__ import annotations

import base64
import json
import logging
import subprocess
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volcore import LabelVolume, MultimodalVolume, ShapeMismatchError

logger = logging.getLogger(__name__)

THRESHOLD_FRACTION = 0.2
THRESHOLD_FLOOR = 1.2
CONFIDENCE_GATE = 0.9
MAX_REFINE_ATTEMPTS = 3
GROWTH_TOLERANCE = 1.0
OTSU_BINS = 256

_CROSS_2D = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class EmptyMaskError(ValueError):
    pass


class RefinerTransportError(RuntimeError):
    """External refiner process failed or answered out of protocol."""


@dataclass
class PostprocParams:
    threshold_fraction: float = THRESHOLD_FRACTION
    threshold_floor: float = THRESHOLD_FLOOR
    connectivity: int = 26
    confidence_gate: float = CONFIDENCE_GATE
    max_attempts: int = MAX_REFINE_ATTEMPTS
    growth_tolerance: float = GROWTH_TOLERANCE

    def __post_init__(self):
        if self.connectivity not in (6, 18, 26):
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")


@dataclass
class ResidualMap:
    """Per-modality nonnegative reconstruction-error volumes, (M, D, H, W)."""

    modalities: list[str]
    data: np.ndarray

    def modality(self, tag: str) -> np.ndarray:
        return self.data[self.modalities.index(tag)]


@dataclass
class PromptSet:
    """Bounding box (x0, y0, x1, y1) inclusive plus five (x, y) points."""

    bbox: tuple[int, int, int, int]
    points: list[tuple[int, int]]
    seed: int


@dataclass
class RefineOutcome:
    mask: np.ndarray
    confidence: float
    attempts: int
    accepted: bool


def residual(original: MultimodalVolume, recon: MultimodalVolume) -> ResidualMap:
    """max(original - reconstruction, 0) per modality; hypointense misses drop out."""
    if original.shape != recon.shape:
        raise ShapeMismatchError("original vs reconstruction", original.shape, recon.shape)
    return ResidualMap(
        modalities=list(original.modalities),
        data=np.maximum(original.data - recon.data, 0.0).astype(np.float32),
    )


def threshold(residual_map: np.ndarray, fraction: float = THRESHOLD_FRACTION, floor: float = THRESHOLD_FLOOR):
    """Keep values >= tau where tau = max(fraction * max(map), floor).

    Returns (thresholded map, tau).
    """
    peak = float(residual_map.max()) if residual_map.size else 0.0
    tau = max(fraction * peak, floor)
    out = np.where(residual_map >= tau, residual_map, 0.0).astype(residual_map.dtype)
    return out, tau


def otsu_binarize(thresholded: np.ndarray, n_bins: int = OTSU_BINS) -> np.ndarray:
    """Histogram Otsu over the nonzero values.

    Values are binned over [min_nonzero, max]; the split maximizing the
    between-class variance of bin indices wins, first split on ties. With
    fewer than two distinct nonzero values every nonzero voxel is kept.
    """
    mask = thresholded > 0
    vals = thresholded[mask].astype(np.float64)
    if vals.size == 0:
        return np.zeros_like(thresholded, dtype=bool)
    lo, hi = float(vals.min()), float(vals.max())
    if lo == hi:
        return mask
    width = (hi - lo) / n_bins
    bins = np.minimum(((vals - lo) / width).astype(np.int64), n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins).astype(np.float64)
    idx = np.arange(n_bins, dtype=np.float64)
    w0 = np.cumsum(counts)
    mu_acc = np.cumsum(counts * idx)
    total, mu_total = w0[-1], mu_acc[-1]
    best_k, best_sigma = None, -1.0
    for k in range(n_bins - 1):
        wa, wb = w0[k], total - w0[k]
        if wa == 0 or wb == 0:
            continue
        mu0 = mu_acc[k] / wa
        mu1 = (mu_total - mu_acc[k]) / wb
        sigma = wa * wb * (mu0 - mu1) ** 2
        if sigma > best_sigma:
            best_sigma, best_k = sigma, k
    out = np.zeros_like(thresholded, dtype=bool)
    out[mask] = bins > best_k
    return out


def morph_clean(mask3d: np.ndarray) -> np.ndarray:
    """Per-axial-slice opening then closing with the radius-1 cross element."""
    out = np.zeros_like(mask3d, dtype=bool)
    for z in range(mask3d.shape[0]):
        sl = mask3d[z]
        opened = ndimage.binary_dilation(ndimage.binary_erosion(sl, _CROSS_2D), _CROSS_2D)
        out[z] = ndimage.binary_erosion(ndimage.binary_dilation(opened, _CROSS_2D), _CROSS_2D)
    return out


def _cc_structure(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    if connectivity == 18:
        s = np.ones((3, 3, 3), dtype=bool)
        for corner in np.ndindex(3, 3, 3):
            if all(c != 1 for c in corner):
                s[corner] = False
        return s
    return ndimage.generate_binary_structure(3, 1)


def largest_component_3d(mask3d: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Keep only the largest component; raster-scan order breaks size ties."""
    labels, n = ndimage.label(mask3d, structure=_cc_structure(connectivity))
    if n == 0:
        return np.zeros_like(mask3d, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    best = sizes.max()
    candidates = np.flatnonzero(sizes == best) + 1
    if len(candidates) == 1:
        keep = int(candidates[0])
    else:
        flat = labels.ravel()
        keep = int(min(candidates, key=lambda c: int(np.argmax(flat == c))))
    return labels == keep


def fill_holes_slicewise(mask3d: np.ndarray) -> np.ndarray:
    """Fill per-axial-slice holes (regions unreachable from the slice border)."""
    out = np.zeros_like(mask3d, dtype=bool)
    for z in range(mask3d.shape[0]):
        out[z] = ndimage.binary_fill_holes(mask3d[z])
    return out


def make_prompts(mask_slice: np.ndarray, seed: int) -> PromptSet:
    """Tight bbox plus five foreground points sampled from the mask.

    Sampling is without replacement when the mask has at least five pixels,
    with replacement otherwise; fully determined by the seed.
    """
    ys, xs = np.nonzero(mask_slice)
    if len(ys) == 0:
        raise EmptyMaskError("cannot build prompts from an empty mask")
    bbox = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
    rng = np.random.Generator(np.random.Philox(seed))
    idx = rng.choice(len(ys), size=5, replace=len(ys) < 5)
    points = [(int(xs[i]), int(ys[i])) for i in idx]
    return PromptSet(bbox=bbox, points=points, seed=seed)


class BuiltinRefiner:
    """Region-growing stand-in for an external promptable segmenter.

    Grows 4-connected from the prompt points inside the bbox while the
    candidate intensity stays within ``tolerance`` of the running region
    mean. Confidence is the IoU against the initial mask inside the bbox.
    """

    def __init__(self, tolerance: float = GROWTH_TOLERANCE):
        self.tolerance = tolerance

    def refine(self, image_slice: np.ndarray, prompts: PromptSet, initial_mask: np.ndarray):
        x0, y0, x1, y1 = prompts.bbox
        grown = np.zeros_like(initial_mask, dtype=bool)
        queue = deque()
        total, count = 0.0, 0
        for y, x in sorted({(y, x) for x, y in prompts.points}):
            if not grown[y, x]:
                grown[y, x] = True
                total += float(image_slice[y, x])
                count += 1
                queue.append((y, x))
        while queue:
            cy, cx = queue.popleft()
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ny, nx = cy + dy, cx + dx
                if not (y0 <= ny <= y1 and x0 <= nx <= x1) or grown[ny, nx]:
                    continue
                if abs(float(image_slice[ny, nx]) - total / count) <= self.tolerance:
                    grown[ny, nx] = True
                    total += float(image_slice[ny, nx])
                    count += 1
                    queue.append((ny, nx))
        region = np.zeros_like(initial_mask, dtype=bool)
        region[y0 : y1 + 1, x0 : x1 + 1] = initial_mask[y0 : y1 + 1, x0 : x1 + 1]
        union = int((grown | region).sum())
        confidence = float((grown & region).sum() / union) if union else 0.0
        return grown, confidence


class ExternalRefiner:
    """Client for a child-process refiner speaking ndjson on stdin/stdout.

    Requests and responses are matched by id and strictly ordered; any
    malformed or missing response raises RefinerTransportError, which the
    caller turns into a fallback to the unrefined mask.
    """

    def __init__(self, argv: list[str]):
        self.argv = list(argv)
        self._proc = None
        self._next_id = 0

    def _ensure_started(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )

    def refine(self, image_slice: np.ndarray, prompts: PromptSet, initial_mask: np.ndarray):
        h, w = image_slice.shape
        request = {
            "id": self._next_id,
            "h": h,
            "w": w,
            "image_b64": base64.b64encode(
                np.ascontiguousarray(image_slice, dtype="<f4").tobytes()
            ).decode("ascii"),
            "bbox": list(prompts.bbox),
            "points": [list(p) for p in prompts.points],
        }
        self._next_id += 1
        try:
            self._ensure_started()
            self._proc.stdin.write(json.dumps(request) + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        except (OSError, ValueError, BrokenPipeError) as exc:
            raise RefinerTransportError(f"refiner process I/O failed: {exc}") from exc
        if not line:
            raise RefinerTransportError("refiner process closed its stdout")
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RefinerTransportError(f"malformed refiner response: {exc}") from exc
        if response.get("id") != request["id"]:
            raise RefinerTransportError(
                f"response id {response.get('id')} != request id {request['id']}"
            )
        if "error" in response:
            raise RefinerTransportError(f"refiner error: {response['error']}")
        try:
            raw = base64.b64decode(response["mask_b64"])
            confidence = float(response["confidence"])
        except (KeyError, ValueError, TypeError) as exc:
            raise RefinerTransportError(f"bad refiner response fields: {exc}") from exc
        if len(raw) != h * w:
            raise RefinerTransportError(f"mask has {len(raw)} bytes, expected {h * w}")
        mask = np.frombuffer(raw, dtype=np.uint8).reshape(h, w) != 0
        return mask, confidence

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            self._proc.wait(timeout=5)
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def refine_slice(
    image_slice: np.ndarray,
    initial_mask: np.ndarray,
    refiner,
    seed: int,
    confidence_gate: float = CONFIDENCE_GATE,
    max_attempts: int = MAX_REFINE_ATTEMPTS,
) -> RefineOutcome:
    """Try the refiner with fresh prompt samples until its confidence clears
    the gate; fall back to the initial mask after max_attempts or on any
    transport failure."""
    best_conf = 0.0
    for attempt in range(max_attempts):
        prompts = make_prompts(initial_mask, seed + attempt)
        try:
            mask, confidence = refiner.refine(image_slice, prompts, initial_mask)
        except RefinerTransportError as exc:
            logger.warning("refiner transport failure, falling back: %s", exc)
            return RefineOutcome(
                mask=initial_mask.copy(), confidence=0.0, attempts=attempt + 1, accepted=False
            )
        best_conf = max(best_conf, float(confidence))
        if confidence >= confidence_gate:
            return RefineOutcome(
                mask=np.asarray(mask, dtype=bool),
                confidence=float(confidence),
                attempts=attempt + 1,
                accepted=True,
            )
    return RefineOutcome(
        mask=initial_mask.copy(), confidence=best_conf, attempts=max_attempts, accepted=False
    )


def segment_modality(
    vol: MultimodalVolume,
    recon: MultimodalVolume,
    modality_tag: str,
    params: PostprocParams | None = None,
    refiner=None,
    seed: int = 0,
    collect_stages: bool = False,
):
    """Full single-modality pipeline; returns the mask, or (mask, stages)."""
    params = params or PostprocParams()
    res = residual(vol, recon)
    res_map = res.modality(modality_tag)
    thresholded, tau = threshold(res_map, params.threshold_fraction, params.threshold_floor)
    binarized = otsu_binarize(thresholded)
    cleaned = morph_clean(binarized)
    largest = largest_component_3d(cleaned, params.connectivity)
    final = largest
    if refiner is not None and largest.any():
        image = vol.modality(modality_tag)
        refined = largest.copy()
        for z in range(largest.shape[0]):
            if largest[z].any():
                outcome = refine_slice(
                    image[z],
                    largest[z],
                    refiner,
                    seed + 3 * z,
                    params.confidence_gate,
                    params.max_attempts,
                )
                refined[z] = outcome.mask
        # refinement may split or shift regions; restore the single-component contract
        final = largest_component_3d(refined, params.connectivity)
    if collect_stages:
        stages = {
            "residual": res_map,
            "thresholded": thresholded,
            "otsu": binarized,
            "morph": cleaned,
            "largest": largest,
            "refined": final,
            "tau": tau,
        }
        return final, stages
    return final


def fuse_masks(t1c_mask: np.ndarray, t2f_mask: np.ndarray) -> LabelVolume:
    """Combine single-modality masks into ET / SNFH / NET labels.

    ET is the t1c mask, SNFH is t2f minus t1c, and whatever per-slice hole
    filling adds inside their union is counted as NET.
    """
    if t1c_mask.shape != t2f_mask.shape:
        raise ShapeMismatchError("t1c vs t2f masks", t1c_mask.shape, t2f_mask.shape)
    et = np.asarray(t1c_mask, dtype=bool)
    snfh = np.asarray(t2f_mask, dtype=bool) & ~et
    union = et | snfh
    net = fill_holes_slicewise(union) & ~union
    labels = np.zeros(et.shape, dtype=np.uint8)
    labels[net] = 1
    labels[snfh] = 2
    labels[et] = 3
    return LabelVolume(data=labels)
