"""Crop-strategy resolution and network input preparation.

Four region-selection rules feed the classifiers: the detected face box, its
top half, the face grown by a context margin, and a fixed fractional window of
the frame that always contains the driver's head (so no detector is needed).
Rectangle arithmetic rounds half-up; boxes are slid back inside the frame
rather than clipped, so a crop keeps its requested size whenever it fits.

Face detection itself is an injected dependency: any callable taking an RGB
frame and returning ``(BBox, score)`` detections works. Detectors that are not
share-safe can be wrapped with :func:`serialized` before fanning out across
threads.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable

import cv2
import numpy as np

from .types import BBox

# ImageNet pretraining means (RGB, [0,1] scale); all supported backbones were
# pretrained with these, so they are the default centering constants.
IMAGENET_CHANNEL_MEANS = (0.485, 0.456, 0.406)

CACHE_ENV_VAR = "DRIVERGAZE_CACHE"


class NoFaceError(RuntimeError):
    """The injected detector found no face in the frame."""


class CropError(ValueError):
    """A crop could not be resolved (missing face, degenerate rectangle...)."""


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


class CropKind(str, Enum):
    HALF_FACE = "half_face"
    FACE = "face"
    FACE_CONTEXT = "face_context"
    FACE_EMBEDDED_FOV = "face_embedded_fov"


@dataclass(frozen=True)
class FractionalRect:
    """Rectangle in frame fractions, within the unit square."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("fractional rect must have positive area")
        if not (0 <= self.x <= 1 and 0 <= self.y <= 1 and self.x + self.w <= 1 + 1e-9 and self.y + self.h <= 1 + 1e-9):
            raise ValueError(f"fractional rect must lie within the unit square: {self}")

    def scaled(self, frame_w: int, frame_h: int) -> BBox:
        x = round_half_up(self.x * frame_w)
        y = round_half_up(self.y * frame_h)
        w = max(1, round_half_up(self.w * frame_w))
        h = max(1, round_half_up(self.h * frame_h))
        return clamp_to_frame(BBox(x, y, w, h), frame_w, frame_h)


@dataclass(frozen=True)
class CropStrategy:
    """One of the four region-selection rules, with its parameters."""

    kind: CropKind
    context_expand: float = 0.5  # per-side margin as a fraction of face w/h
    fov_rect: FractionalRect | None = None

    def __post_init__(self):
        if self.context_expand < 0:
            raise ValueError("context_expand must be >= 0")
        if self.kind is CropKind.FACE_EMBEDDED_FOV and self.fov_rect is None:
            raise ValueError("face_embedded_fov strategy needs a fov_rect (from the camera profile)")

    @property
    def requires_face(self) -> bool:
        return self.kind is not CropKind.FACE_EMBEDDED_FOV

    @property
    def token(self) -> str:
        """Stable identifier used in cache keys, run configs and reports."""
        return self.kind.value

    @classmethod
    def half_face(cls) -> "CropStrategy":
        return cls(CropKind.HALF_FACE)

    @classmethod
    def face(cls) -> "CropStrategy":
        return cls(CropKind.FACE)

    @classmethod
    def face_context(cls, expand: float = 0.5) -> "CropStrategy":
        return cls(CropKind.FACE_CONTEXT, context_expand=expand)

    @classmethod
    def face_embedded_fov(cls, fov_rect: FractionalRect) -> "CropStrategy":
        return cls(CropKind.FACE_EMBEDDED_FOV, fov_rect=fov_rect)

    @classmethod
    def from_token(cls, token: str, profile: "CameraProfile | None" = None, context_expand: float = 0.5) -> "CropStrategy":
        key = token.replace("-", "_").replace("+", "_").lower()
        if key in ("half_face", "halfface"):
            return cls.half_face()
        if key == "face":
            return cls.face()
        if key in ("face_context", "facecontext"):
            return cls.face_context(context_expand)
        if key in ("face_embedded_fov", "faceembeddedfov", "fov"):
            if profile is None:
                raise CropError("face_embedded_fov strategy needs a camera profile for its fov_rect")
            return cls.face_embedded_fov(profile.fov_rect)
        valid = ", ".join(k.value for k in CropKind)
        raise CropError(f"unknown crop strategy {token!r}; expected one of: {valid}")


@dataclass(frozen=True)
class CameraProfile:
    """Per-camera calibration: frame geometry, driver-side FoV window, anchor.

    The FoV window is calibration data, not code: it is the cabin sub-image
    spanning roughly from the rearview mirror to the driver-side window, which
    is guaranteed to contain the driver's head for that car and mount.
    """

    profile_id: str
    frame_size: tuple[int, int]  # (width, height) pixels
    fov_rect: FractionalRect
    driver_side_anchor: tuple[float, float]  # fractional point; nearest face wins

    @classmethod
    def read(cls, path: str | Path) -> "CameraProfile":
        data = json.loads(Path(path).read_text())
        return cls(
            profile_id=data["profile_id"],
            frame_size=(int(data["frame_size"][0]), int(data["frame_size"][1])),
            fov_rect=FractionalRect(*data["fov_rect"]),
            driver_side_anchor=(float(data["driver_side_anchor"][0]), float(data["driver_side_anchor"][1])),
        )

    def write(self, path: str | Path) -> None:
        r = self.fov_rect
        Path(path).write_text(
            json.dumps(
                {
                    "profile_id": self.profile_id,
                    "frame_size": list(self.frame_size),
                    "fov_rect": [r.x, r.y, r.w, r.h],
                    "driver_side_anchor": list(self.driver_side_anchor),
                },
                indent=2,
            )
        )


@dataclass(frozen=True)
class NetworkInput:
    """A mean-centered square patch ready for a classifier forward pass."""

    pixels: np.ndarray  # target x target x 3, float32, channel means subtracted
    rect: BBox
    strategy: CropKind
    target: int

    def __post_init__(self):
        if self.pixels.shape != (self.target, self.target, 3):
            raise ValueError(f"pixels shape {self.pixels.shape} does not match target {self.target}")


# --- face detection ------------------------------------------------------

# A detector is any callable: frame (H x W x 3 RGB array) -> iterable of
# (BBox, score) pairs. Detectors may set `.share_safe = True` when concurrent
# calls are allowed; anything else gets serialized by `serialized()`.
FaceDetector = Callable[[np.ndarray], Iterable[tuple[BBox, float]]]


def serialized(detector: FaceDetector) -> FaceDetector:
    """Wrap a detector so concurrent callers take turns unless it opted in."""
    if getattr(detector, "share_safe", False):
        return detector
    lock = threading.Lock()

    def locked(frame: np.ndarray):
        with lock:
            return detector(frame)

    locked.share_safe = True
    return locked


def detect_driver_face(frame: np.ndarray, profile: CameraProfile, detector: FaceDetector) -> BBox:
    """Pick the detection closest to the driver-side anchor.

    Frames that also contain the passenger routinely yield two faces; the
    anchor point from the camera profile disambiguates.
    """
    detections = list(detector(frame))
    if not detections:
        raise NoFaceError("face detector returned no detections")
    h, w = frame.shape[:2]
    ax, ay = profile.driver_side_anchor[0] * w, profile.driver_side_anchor[1] * h

    def dist(det: tuple[BBox, float]) -> float:
        cx, cy = det[0].center
        return (cx - ax) ** 2 + (cy - ay) ** 2

    return min(detections, key=dist)[0]


# --- crop resolution ------------------------------------------------------


def clamp_to_frame(box: BBox, frame_w: int, frame_h: int) -> BBox:
    """Slide the box inside the frame; shrink only when it is larger than the frame."""
    w = min(box.w, frame_w)
    h = min(box.h, frame_h)
    x = min(max(box.x, 0), frame_w - w)
    y = min(max(box.y, 0), frame_h - h)
    return BBox(x, y, w, h)


def resolve_crop(frame_size: tuple[int, int], face: BBox | None, strategy: CropStrategy) -> BBox:
    """Turn a crop strategy into a concrete pixel rectangle, always in-bounds."""
    frame_w, frame_h = frame_size
    if strategy.requires_face and face is None:
        raise CropError(f"strategy {strategy.token!r} needs a face box; none was provided")
    if strategy.kind is CropKind.FACE:
        return clamp_to_frame(face, frame_w, frame_h)
    if strategy.kind is CropKind.HALF_FACE:
        # Top half of the face; the eyes live here.
        return clamp_to_frame(BBox(face.x, face.y, face.w, max(1, face.h // 2)), frame_w, frame_h)
    if strategy.kind is CropKind.FACE_CONTEXT:
        ex = strategy.context_expand * face.w
        ey = strategy.context_expand * face.h
        grown = BBox(
            round_half_up(face.x - ex),
            round_half_up(face.y - ey),
            max(1, round_half_up(face.w + 2 * ex)),
            max(1, round_half_up(face.h + 2 * ey)),
        )
        return clamp_to_frame(grown, frame_w, frame_h)
    if strategy.kind is CropKind.FACE_EMBEDDED_FOV:
        return strategy.fov_rect.scaled(frame_w, frame_h)
    raise CropError(f"unhandled crop kind {strategy.kind!r}")


# --- patch extraction and normalization -----------------------------------


def extract_patch(frame: np.ndarray, rect: BBox, target: int) -> np.ndarray:
    """Crop and bilinearly resize to a square uint8 patch.

    Resizing happens in the uint8 domain so results are bit-identical to
    patches round-tripped through the lossless cache.
    """
    if target < 1:
        raise ValueError("target resolution must be >= 1")
    fh, fw = frame.shape[:2]
    rect = clamp_to_frame(rect, fw, fh)
    crop = frame[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w]
    if crop.size == 0:
        raise CropError(f"degenerate crop {rect} on frame {fw}x{fh}")
    if crop.dtype != np.uint8:
        crop = np.clip(np.asarray(crop, dtype=np.float32), 0.0, 1.0)
        crop = (crop * 255.0 + 0.5).astype(np.uint8)
    return cv2.resize(crop, (target, target), interpolation=cv2.INTER_LINEAR)


def normalize(
    frame: np.ndarray,
    rect: BBox,
    target: int,
    channel_means: tuple[float, float, float] = IMAGENET_CHANNEL_MEANS,
    *,
    strategy: CropKind = CropKind.FACE,
) -> NetworkInput:
    """Crop, resize and mean-center a patch. Deterministic for fixed inputs.

    Standard targets are 224/227 (native network inputs) and 448/625 (the
    higher-resolution detector-free settings); any positive size is accepted.
    """
    patch = extract_patch(frame, rect, target)
    pixels = patch.astype(np.float32) / 255.0
    pixels -= np.asarray(channel_means, dtype=np.float32)
    return NetworkInput(pixels=pixels, rect=rect, strategy=strategy, target=target)


def patch_to_input(
    patch: np.ndarray,
    rect: BBox,
    channel_means: tuple[float, float, float] = IMAGENET_CHANNEL_MEANS,
    *,
    strategy: CropKind = CropKind.FACE,
) -> NetworkInput:
    """Mean-center an already cropped+resized uint8 patch (cache hits)."""
    pixels = patch.astype(np.float32) / 255.0
    pixels -= np.asarray(channel_means, dtype=np.float32)
    return NetworkInput(pixels=pixels, rect=rect, strategy=strategy, target=patch.shape[0])


class PatchCache:
    """Optional lossless on-disk cache of cropped patches.

    Keys are (frame_ref, strategy token, target); values are the uint8 patch
    after crop+resize, stored as PNG with a JSON sidecar recording the source
    rectangle. Defaults to the directory named by the DRIVERGAZE_CACHE
    environment variable.
    """

    def __init__(self, root: str | Path | None = None):
        root = root or os.environ.get(CACHE_ENV_VAR)
        if root is None:
            raise ValueError(f"no cache directory given and {CACHE_ENV_VAR} is unset")
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, frame_ref: str, strategy_token: str, target: int) -> Path:
        key = hashlib.sha1(f"{frame_ref}|{strategy_token}|{target}".encode()).hexdigest()
        return self.root / f"{key}.png"

    def get(self, frame_ref: str, strategy_token: str, target: int) -> tuple[np.ndarray, BBox] | None:
        path = self._path(frame_ref, strategy_token, target)
        sidecar = path.with_suffix(".json")
        if not path.exists() or not sidecar.exists():
            return None
        bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
        meta = json.loads(sidecar.read_text())
        return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB), BBox(**meta["rect"])

    def put(self, frame_ref: str, strategy_token: str, target: int, patch: np.ndarray, rect: BBox) -> None:
        path = self._path(frame_ref, strategy_token, target)
        cv2.imwrite(str(path), cv2.cvtColor(patch, cv2.COLOR_RGB2BGR))
        path.with_suffix(".json").write_text(
            json.dumps({"rect": {"x": rect.x, "y": rect.y, "w": rect.w, "h": rect.h}})
        )


def preprocess_frame(
    frame: np.ndarray,
    strategy: CropStrategy,
    target: int,
    *,
    profile: CameraProfile | None = None,
    detector: FaceDetector | None = None,
    face: BBox | None = None,
    channel_means: tuple[float, float, float] = IMAGENET_CHANNEL_MEANS,
) -> NetworkInput:
    """Full single-frame preprocessing: detect (if needed), crop, normalize.

    Pass ``face`` to skip detection (e.g. cached detections); otherwise
    face-dependent strategies call the injected detector and propagate
    :class:`NoFaceError` for the caller to decide (drop in training, surface
    at inference).
    """
    fh, fw = frame.shape[:2]
    if strategy.requires_face and face is None:
        if detector is None or profile is None:
            raise CropError(f"strategy {strategy.token!r} needs a detector and camera profile (or an explicit face box)")
        face = detect_driver_face(frame, profile, detector)
    rect = resolve_crop((fw, fh), face, strategy)
    return normalize(frame, rect, target, channel_means, strategy=strategy.kind)


@dataclass
class FramePipeline:
    """Frame reference -> NetworkInput, with everything that entails.

    Bundles the frame loader, crop strategy, target resolution, camera
    profile, injected face detector and (optionally) the patch cache, so
    training and evaluation code can stay ignorant of preprocessing details.
    The detector is serialized automatically unless it declares itself
    share-safe.
    """

    loader: Callable[[str], np.ndarray]
    strategy: CropStrategy
    target: int
    profile: CameraProfile | None = None
    detector: FaceDetector | None = None
    channel_means: tuple[float, float, float] = IMAGENET_CHANNEL_MEANS
    cache: PatchCache | None = None

    def __post_init__(self):
        if self.detector is not None:
            self.detector = serialized(self.detector)

    def prepare_frame(self, frame: np.ndarray, frame_ref: str | None = None) -> NetworkInput:
        """Preprocess an in-memory frame; caches when a frame_ref is given."""
        if frame_ref is not None and self.cache is not None:
            hit = self.cache.get(frame_ref, self.strategy.token, self.target)
            if hit is not None:
                patch, rect = hit
                return patch_to_input(patch, rect, self.channel_means, strategy=self.strategy.kind)
        fh, fw = frame.shape[:2]
        face = None
        if self.strategy.requires_face:
            if self.detector is None or self.profile is None:
                raise CropError(
                    f"strategy {self.strategy.token!r} needs a face detector and camera profile"
                )
            face = detect_driver_face(frame, self.profile, self.detector)
        rect = resolve_crop((fw, fh), face, self.strategy)
        patch = extract_patch(frame, rect, self.target)
        if frame_ref is not None and self.cache is not None:
            self.cache.put(frame_ref, self.strategy.token, self.target, patch, rect)
        return patch_to_input(patch, rect, self.channel_means, strategy=self.strategy.kind)

    def prepare_frame_ref(self, frame_ref: str) -> NetworkInput:
        if self.cache is not None:
            hit = self.cache.get(frame_ref, self.strategy.token, self.target)
            if hit is not None:
                patch, rect = hit
                return patch_to_input(patch, rect, self.channel_means, strategy=self.strategy.kind)
        return self.prepare_frame(self.loader(frame_ref), frame_ref)

    def prepare_samples(self, samples, on_no_face: str = "skip"):
        """Preprocess labeled samples; returns (inputs, kept samples, dropped count).

        ``on_no_face`` is "skip" (drop the frame, count it) or "raise".
        """
        if on_no_face not in ("skip", "raise"):
            raise ValueError(f"on_no_face must be 'skip' or 'raise', got {on_no_face!r}")
        inputs, kept, dropped = [], [], 0
        for sample in samples:
            try:
                inputs.append(self.prepare_frame_ref(sample.frame_ref))
            except NoFaceError:
                if on_no_face == "raise":
                    raise
                dropped += 1
                continue
            kept.append(sample)
        return inputs, kept, dropped
