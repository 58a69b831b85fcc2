"""
Frame and tensor files, synthetic videos and training masks.

Layouts: videos are (H, W, N, 3) float tensors in [0, 1], masks are (H, W, N, 1)
with 1 marking a hole.

Frame directories hold frame_00000.ppm ... (binary P6, maxval 255); mask
directories hold mask_00000.pgm ... (binary P5, 0 or 255).

Tensor files (DTPT)::

    b"DTPT" | u32 version=1 | u32 dtype (0=f32, 1=f64) | u32 rank | u64 dims[rank] | raw LE row-major data

all integers little endian.
"""
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Union
import logging
import re
import struct

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from numerics import RngStream
from utils import ShapeError, ValidationError, format_shape

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"DTPT"
TENSOR_VERSION = 1
DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
CODE_DTYPES = {0: (torch.float32, np.dtype("<f4")), 1: (torch.float64, np.dtype("<f8"))}
HOLE_FILL = 0.5

_frame_pattern = re.compile(r"^frame_(\d{5})\.ppm$")
_mask_pattern = re.compile(r"^mask_(\d{5})\.pgm$")


#################################################################################
#                                 Netpbm frames                                 #
#################################################################################

_netpbm_modes = {b"P6": "RGB", b"P5": "L"}

def _read_netpbm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    # Pillow also reads ASCII P3/P2, so the binary magic is checked up front
    with open(path, "rb") as f:
        found = f.read(2)
    if found != magic:
        raise ValidationError(f"{path}: expected magic {magic.decode()}, got {found!r}")
    try:
        with Image.open(path, formats=["PPM"]) as image:
            image.load()
            if image.mode != _netpbm_modes[magic]:
                raise ValidationError(f"{path}: unsupported {image.mode} image, expected 8-bit {_netpbm_modes[magic]}")
            pixels = np.asarray(image, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ValidationError(f"{path}: unreadable {magic.decode()} file ({e})") from None
    return pixels.reshape(*pixels.shape[:2], channels)

def _write_netpbm(path: Path, magic: bytes, pixels: np.ndarray):
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if magic == b"P5":
        pixels = pixels.reshape(pixels.shape[:2])
    # Pillow writes binary P6 for RGB and P5 for L, maxval 255
    Image.fromarray(pixels).save(path, format="PPM")

def _indexed_files(directory: Path, pattern: re.Pattern, what: str) -> list[Path]:
    if not directory.is_dir():
        raise ValidationError(f"{directory} is not a directory")
    found = {}
    for p in directory.iterdir():
        match = pattern.match(p.name)
        if match:
            found[int(match.group(1))] = p
    if not found:
        raise ValidationError(f"{directory}: no {what} files found")
    missing = sorted(set(range(max(found) + 1)) - set(found))
    if missing:
        raise ValidationError(f"{directory}: {what} indices are not contiguous, missing {missing[:5]}")
    count = len(found)
    if count % 4 != 1:
        raise ValidationError(f"{directory}: {count} {what}s, the count must be 4k+1")
    return [found[i] for i in range(count)]

def quantize(values: torch.Tensor) -> np.ndarray:
    """Maps [0, 1] to 0..255 with round-half-up."""
    scaled = np.floor(values.detach().to(torch.float64).cpu().numpy() * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)

def read_frames(directory: Union[str, Path]) -> torch.Tensor:
    """
    Reads frame_%05d.ppm files into an (H, W, N, 3) tensor in [0, 1].

    Raises:
        ValidationError: missing or non-contiguous indices, malformed headers,
            mismatched frame sizes, or N not of the form 4k+1.
    """
    paths = _indexed_files(Path(directory), _frame_pattern, "frame")
    frames = [_read_netpbm(p, b"P6", 3) for p in paths]
    sizes = {f.shape for f in frames}
    if len(sizes) != 1:
        raise ValidationError(f"{directory}: frames differ in size {sorted(sizes)}")
    stacked = np.stack(frames, axis=2) # H, W, N, 3
    logger.debug(f"read {len(frames)} frames of {format_shape(frames[0].shape)} from {directory}")
    return torch.from_numpy(stacked.astype(np.float32) / 255.0)

def write_frames(video: torch.Tensor, directory: Union[str, Path]):
    if video.dim() != 4 or video.shape[-1] != 3:
        raise ShapeError(f"expected an HxWxNx3 video, got {format_shape(video.shape)}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pixels = quantize(video)
    for i in range(pixels.shape[2]):
        _write_netpbm(directory / f"frame_{i:05d}.ppm", b"P6", pixels[:, :, i])
    logger.debug(f"wrote {pixels.shape[2]} frames to {directory}")

def read_masks(directory: Union[str, Path]) -> torch.Tensor:
    """Reads mask_%05d.pgm files into an (H, W, N, 1) binary tensor; bytes above 127 are holes."""
    paths = _indexed_files(Path(directory), _mask_pattern, "mask")
    frames = [_read_netpbm(p, b"P5", 1) for p in paths]
    if len({f.shape for f in frames}) != 1:
        raise ValidationError(f"{directory}: masks differ in size")
    stacked = np.stack(frames, axis=2)
    return torch.from_numpy((stacked > 127).astype(np.float32))

def write_masks(mask: torch.Tensor, directory: Union[str, Path]):
    if mask.dim() != 4 or mask.shape[-1] != 1:
        raise ShapeError(f"expected an HxWxNx1 mask, got {format_shape(mask.shape)}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pixels = np.where(mask.cpu().numpy() > 0.5, 255, 0).astype(np.uint8)
    for i in range(pixels.shape[2]):
        _write_netpbm(directory / f"mask_{i:05d}.pgm", b"P5", pixels[:, :, i])


#################################################################################
#                                 Tensor files                                  #
#################################################################################

def write_tensor(f: BinaryIO, tensor: torch.Tensor):
    if tensor.dtype not in DTYPE_CODES:
        raise ValidationError(f"cannot store dtype {tensor.dtype}, only float32 and float64")
    code = DTYPE_CODES[tensor.dtype]
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<III", TENSOR_VERSION, code, tensor.dim()))
    f.write(struct.pack(f"<{tensor.dim()}Q", *tensor.shape))
    f.write(tensor.detach().cpu().contiguous().numpy().astype(CODE_DTYPES[code][1], copy=False).tobytes())

def _read_exact(f: BinaryIO, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise ValidationError(f"truncated tensor file: expected {count} bytes of {what}, got {len(data)}")
    return data

def read_tensor(f: BinaryIO, expect_dtype: torch.dtype | None = None) -> torch.Tensor:
    magic = f.read(4)
    if not magic:
        raise ValidationError("empty tensor file")
    if magic != TENSOR_MAGIC:
        raise ValidationError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    version, code, rank = struct.unpack("<III", _read_exact(f, 12, "header"))
    if version != TENSOR_VERSION:
        raise ValidationError(f"unsupported tensor file version {version}")
    if code not in CODE_DTYPES:
        raise ValidationError(f"unknown dtype code {code}")
    dtype, np_dtype = CODE_DTYPES[code]
    if expect_dtype is not None and dtype != expect_dtype:
        raise ValidationError(f"dtype mismatch: file holds {dtype}, expected {expect_dtype}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "dims"))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(f, count * np_dtype.itemsize, "payload")
    array = np.frombuffer(payload, dtype=np_dtype).reshape(dims)
    return torch.from_numpy(array.copy())

def save_tensor(tensor: torch.Tensor, path: Union[str, Path]):
    with open(path, "wb") as f:
        write_tensor(f, tensor)

def load_tensor(path: Union[str, Path], expect_dtype: torch.dtype | None = None) -> torch.Tensor:
    """
    Loads a DTPT file written by `save_tensor`; the roundtrip is bit exact.

    Raises:
        ValidationError: empty file, bad magic, truncated payload or dtype mismatch.
    """
    with open(path, "rb") as f:
        tensor = read_tensor(f, expect_dtype)
        if f.read(1):
            raise ValidationError(f"{path}: trailing bytes after tensor payload")
    return tensor


#################################################################################
#                               Synthetic videos                                #
#################################################################################

def check_video_dims(height: int, width: int, frames: int, minimum: int = 16):
    if height < minimum or width < minimum:
        raise ValidationError(f"video must be at least {minimum}x{minimum}, got {height}x{width}")
    if frames < 1 or frames % 4 != 1:
        raise ValidationError(f"frame count must be 4k+1, got {frames}")

def gen_synthetic_video(rng: RngStream, height: int, width: int, frames: int, objects: int) -> torch.Tensor:
    """
    A smooth two-colour gradient background with `objects` solid rectangles or
    disks moving at constant velocity and bouncing off the borders.

    Returns:
        torch.Tensor: (H, W, N, 3) in [0, 1], deterministic for a given stream state.
    """
    check_video_dims(height, width, frames)
    if objects < 0:
        raise ValidationError(f"object count must be >= 0, got {objects}")
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)

    angle = rng.uniform(0, 2 * np.pi)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    proj = (np.cos(angle) * cols / width + np.sin(angle) * rows / height)
    proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
    background = c0 + (c1 - c0) * proj[..., None]

    shapes = []
    short = min(height, width)
    for _ in range(objects):
        size_h = rng.uniform(0.15, 0.35) * short
        size_w = rng.uniform(0.15, 0.35) * short
        shapes.append({
            "disk": bool(rng.uniform() < 0.5),
            "h": size_h, "w": size_w,
            "y": rng.uniform(0, height - size_h), "x": rng.uniform(0, width - size_w),
            "dy": rng.uniform(0.5, 2.5) * (1 if rng.uniform() < 0.5 else -1),
            "dx": rng.uniform(0.5, 2.5) * (1 if rng.uniform() < 0.5 else -1),
            "color": rng.uniform(0, 1, 3),
        })

    video = np.empty((height, width, frames, 3), dtype=np.float64)
    for t in range(frames):
        frame = background.copy()
        for s in shapes:
            if s["disk"]:
                cy, cx = s["y"] + s["h"] / 2, s["x"] + s["w"] / 2
                inside = ((rows - cy) / (s["h"] / 2)) ** 2 + ((cols - cx) / (s["w"] / 2)) ** 2 <= 1.0
            else:
                inside = (rows >= s["y"]) & (rows < s["y"] + s["h"]) & (cols >= s["x"]) & (cols < s["x"] + s["w"])
            frame[inside] = s["color"]
            # advance, bouncing off the walls
            s["y"] += s["dy"]
            s["x"] += s["dx"]
            if s["y"] <= 0 or s["y"] + s["h"] >= height:
                s["dy"] *= -1
                s["y"] = min(max(s["y"], 0.0), height - s["h"])
            if s["x"] <= 0 or s["x"] + s["w"] >= width:
                s["dx"] *= -1
                s["x"] = min(max(s["x"], 0.0), width - s["w"])
        video[:, :, t] = frame
    return torch.from_numpy(np.clip(video, 0.0, 1.0).astype(np.float32))


#################################################################################
#                                     Masks                                     #
#################################################################################

class MaskKind(Enum):
    STATIONARY = "stationary"
    MOVING = "moving"
    CAPTION = "caption"

@dataclass
class MaskSpec:
    """
    Parameters of one random mask pattern.

    Attributes:
        kind (MaskKind): stationary shapes, moving shapes, or a caption band.
        count (int): number of shapes (words for captions).
        size_range (tuple[float, float]): area of each shape as a fraction of the frame.
        drift (float): largest per-frame step of a moving shape, in pixels.
        stroke_ratio (float): fraction of shapes drawn as brush strokes instead of rectangles.
        seed (int): used when no stream is passed to gen_masks.
    """
    kind: MaskKind = MaskKind.STATIONARY
    count: int = 2
    size_range: tuple[float, float] = (0.05, 0.2)
    drift: float = 2.0
    stroke_ratio: float = 0.5
    seed: int = 0

    def validate(self) -> "MaskSpec":
        low, high = self.size_range
        if not (0 < low <= high <= 1.0):
            raise ValidationError(f"size range must satisfy 0 < low <= high <= 1, got {self.size_range}")
        if self.drift < 0:
            raise ValidationError(f"drift must be >= 0, got {self.drift}")
        if self.count < 1:
            raise ValidationError(f"shape count must be >= 1, got {self.count}")
        if not 0 <= self.stroke_ratio <= 1:
            raise ValidationError(f"stroke ratio must be within [0, 1], got {self.stroke_ratio}")
        return self

def _rect_extent(area: float, aspect: float, height: int, width: int) -> tuple[int, int]:
    # keeps the requested area when one side hits the frame, by growing the other side
    total = area * height * width
    h = np.sqrt(total / aspect)
    w = total / h
    if h > height:
        h, w = height, min(width, total / height)
    if w > width:
        w, h = width, min(height, total / width)
    return max(1, int(round(h))), max(1, int(round(w)))

def _stroke(rng: RngStream, area: float, height: int, width: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """
    Polyline with round caps: every pixel within a radius of a segment.

    The radius is read off the distance field: the stroke takes the
    `area * height * width` pixels nearest to the polyline, ties broken in
    raster order, so its coverage is the drawn area up to rounding.
    """
    vertices = int(rng.integers(3, 6))
    short = min(height, width)
    points = [np.array([rng.uniform(0, height), rng.uniform(0, width)])]
    for _ in range(vertices - 1):
        step = rng.uniform(-0.4, 0.4, 2) * short
        points.append(np.clip(points[-1] + step, 0, [height - 1, width - 1]))
    dist2 = np.full((height, width), np.inf)
    for a, b in zip(points[:-1], points[1:]):
        seg = b - a
        length2 = max(float(seg @ seg), 1e-12)
        u = np.clip(((rows - a[0]) * seg[0] + (cols - a[1]) * seg[1]) / length2, 0, 1)
        dist2 = np.minimum(dist2, (rows - a[0] - u * seg[0]) ** 2 + (cols - a[1] - u * seg[1]) ** 2)
    target = max(1, int(round(area * height * width)))
    nearest = np.argsort(dist2, axis=None, kind="stable")[:target]
    hole = np.zeros(height * width, dtype=bool)
    hole[nearest] = True
    return hole.reshape(height, width)

def _caption_band(rng: RngStream, spec: MaskSpec, height: int, width: int) -> np.ndarray:
    hole = np.zeros((height, width), dtype=bool)
    line_h = max(2, int(round(height * rng.uniform(0.05, 0.1))))
    top = int(rng.integers(int(height * 0.75), max(int(height * 0.75) + 1, height - line_h)))
    x = int(rng.integers(0, max(1, width // 8)))
    for _ in range(spec.count):
        word_w = max(2, int(round(width * rng.uniform(0.05, 0.15))))
        if x >= width:
            break
        hole[top:top + line_h, x:min(width, x + word_w)] = True
        x += word_w + max(1, int(round(width * 0.02)))
    return hole

def gen_masks(rng: RngStream | None, height: int, width: int, frames: int, spec: MaskSpec) -> torch.Tensor:
    """
    Random hole pattern for a clip.

    Stationary and caption masks repeat frame 0 in every frame. Moving masks
    shift each shape by a random walk of at most `drift` pixels per frame and
    axis, clamped so that the shape stays inside the frame.

    Returns:
        torch.Tensor: (H, W, N, 1) with values exactly 0 or 1.
    """
    spec.validate()
    rng = rng or RngStream(spec.seed)
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)

    if spec.kind is MaskKind.CAPTION:
        frame = _caption_band(rng, spec, height, width)
        return torch.from_numpy(np.repeat(frame[:, :, None, None], frames, axis=2).astype(np.float32))

    # each shape is a boolean footprint plus a (dy, dx) offset per frame
    footprints = []
    for _ in range(spec.count):
        area = rng.uniform(*spec.size_range)
        if rng.uniform() < spec.stroke_ratio:
            footprint = _stroke(rng, area, height, width, rows, cols)
        else:
            h, w = _rect_extent(area, rng.uniform(0.5, 2.0), height, width)
            top, left = int(rng.integers(0, height - h + 1)), int(rng.integers(0, width - w + 1))
            footprint = np.zeros((height, width), dtype=bool)
            footprint[top:top + h, left:left + w] = True
        footprints.append(footprint)

    mask = np.zeros((height, width, frames), dtype=bool)
    for footprint in footprints:
        ys, xs = np.nonzero(footprint)
        # room to move before the footprint would leave the frame
        lo = np.array([-ys.min(), -xs.min()])
        hi = np.array([height - 1 - ys.max(), width - 1 - xs.max()])
        offset = np.zeros(2, dtype=np.int64)
        for t in range(frames):
            if spec.kind is MaskKind.MOVING and t > 0 and spec.drift > 0:
                step = np.round(rng.uniform(-spec.drift, spec.drift, 2)).astype(np.int64)
                offset = np.clip(offset + step, lo, hi)
            mask[ys + offset[0], xs + offset[1], t] = True
    return torch.from_numpy(mask[..., None].astype(np.float32))

def apply_mask(video: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Replaces hole pixels with mid-grey 0.5; everything else is passed through untouched."""
    if video.shape[:3] != mask.shape[:3] or mask.shape[-1] != 1:
        raise ShapeError(f"apply_mask: video {format_shape(video.shape)} vs mask {format_shape(mask.shape)}")
    return torch.where(mask > 0.5, torch.full_like(video, HOLE_FILL), video)
