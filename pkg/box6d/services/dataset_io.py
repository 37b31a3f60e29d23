from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass
import logging
from pathlib import Path
import struct
import zlib

import cv2
import numpy as np

from box6d.exceptions import DatasetIOError, DatasetParseError, InvalidArgumentError
from box6d.services.core import BoxDims, BoxInstance, CameraIntrinsics, DepthImage, InstanceMask, Pose
from box6d.services.scenegen import Scene

logger = logging.getLogger(__name__)

DEPTH_FILE = "depth.png"
MASK_FILE = "mask.png"
CAMERA_FILE = "camera.txt"
GT_FILE = "gt.txt"
MANIFEST_FILE = "manifest.txt"

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
MAX_DEPTH_MM = np.iinfo(np.uint16).max
GT_FIELDS = 1 + 12 + 3


@dataclass(frozen=True, slots=True)
class ManifestEntry:
    name: str
    seed: int


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_bytes(path: Path, payload: bytes) -> None:
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise DatasetIOError(path, f"cannot write: {exc.strerror or exc}") from exc


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError as exc:
        raise DatasetIOError(path, "file not found") from exc
    except OSError as exc:
        raise DatasetIOError(path, f"cannot read: {exc.strerror or exc}") from exc


def _encode_png(path: Path, image: np.ndarray) -> None:
    ok, buffer = cv2.imencode(".png", image)
    if not ok:
        raise DatasetIOError(path, "PNG encoding failed")
    _write_bytes(path, buffer.tobytes())


def _check_png_structure(path: Path, payload: bytes) -> None:
    """Walk the PNG chunk list so corruption is reported at the byte offset where it starts."""
    if not payload.startswith(PNG_SIGNATURE):
        raise DatasetParseError(path, 0, "missing PNG signature")
    offset = len(PNG_SIGNATURE)
    while True:
        if offset + 8 > len(payload):
            raise DatasetParseError(path, offset, "truncated chunk header")
        length, kind = struct.unpack(">I4s", payload[offset : offset + 8])
        end = offset + 8 + length + 4
        if end > len(payload):
            raise DatasetParseError(path, offset, f"truncated {kind.decode('latin-1')} chunk")
        (crc,) = struct.unpack(">I", payload[end - 4 : end])
        if zlib.crc32(payload[offset + 4 : end - 4]) != crc:
            raise DatasetParseError(path, offset, f"CRC mismatch in {kind.decode('latin-1')} chunk")
        if kind == b"IEND":
            return
        offset = end


def _decode_png(path: Path, expected_dtype: type[np.generic], shape: tuple[int, int] | None) -> np.ndarray:
    payload = _read_bytes(path)
    _check_png_structure(path, payload)
    image = cv2.imdecode(np.frombuffer(payload, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DatasetParseError(path, 0, "undecodable PNG data")
    if image.ndim != 2:
        raise DatasetParseError(path, 0, f"expected a single-channel image, got shape {image.shape}")
    if image.dtype != expected_dtype:
        raise DatasetParseError(path, 0, f"expected {np.dtype(expected_dtype).name} pixels, got {image.dtype}")
    if shape is not None and image.shape != shape:
        raise DatasetParseError(
            path, 0, f"image is {image.shape[1]}x{image.shape[0]}, camera says {shape[1]}x{shape[0]}"
        )
    return image


def _lines(path: Path) -> Iterator[tuple[int, str]]:
    """Yield (byte offset, stripped text) for every non-blank line."""
    payload = _read_bytes(path)
    try:
        text = payload.decode("ascii")
    except UnicodeDecodeError as exc:
        raise DatasetParseError(path, exc.start, "non-ASCII byte") from exc
    offset = 0
    for line in text.splitlines(keepends=True):
        if line.strip():
            yield offset, line.strip()
        offset += len(line)


def write_depth(path: Path, depth: DepthImage) -> None:
    millimeters = np.round(depth.data * 1000.0)
    if millimeters.max(initial=0) > MAX_DEPTH_MM:
        raise DatasetIOError(path, f"depth exceeds {MAX_DEPTH_MM} mm")
    _encode_png(path, millimeters.astype(np.uint16))


def read_depth(path: Path, K: CameraIntrinsics | None = None) -> DepthImage:
    shape = K.shape if K is not None else None
    raw = _decode_png(path, np.uint16, shape)
    return DepthImage(width=raw.shape[1], height=raw.shape[0], data=raw.astype(np.float64) / 1000.0)


def write_mask(path: Path, mask: InstanceMask) -> None:
    if mask.data.max(initial=0) > 255:
        raise DatasetIOError(path, "mask labels exceed 255")
    _encode_png(path, mask.data.astype(np.uint8))


def read_mask(path: Path, K: CameraIntrinsics | None = None) -> InstanceMask:
    shape = K.shape if K is not None else None
    raw = _decode_png(path, np.uint8, shape)
    return InstanceMask(width=raw.shape[1], height=raw.shape[0], data=raw)


def write_camera(path: Path, K: CameraIntrinsics) -> None:
    fields = [_fmt(K.fx), _fmt(K.fy), _fmt(K.cx), _fmt(K.cy), str(K.width), str(K.height)]
    _write_bytes(path, ("\n".join(fields) + "\n").encode("ascii"))


def read_camera(path: Path) -> CameraIntrinsics:
    lines = list(_lines(path))
    if len(lines) != 6:
        offset = lines[min(len(lines), 6) - 1][0] if lines else 0
        raise DatasetParseError(path, offset, f"expected 6 fields, found {len(lines)}")
    values: list[float] = []
    for index, (offset, text) in enumerate(lines):
        try:
            values.append(float(text) if index < 4 else int(text))
        except ValueError as exc:
            raise DatasetParseError(path, offset, f"bad number {text!r}") from exc
    fx, fy, cx, cy, width, height = values
    try:
        return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=int(width), height=int(height))
    except InvalidArgumentError as exc:
        raise DatasetParseError(path, 0, str(exc)) from exc


def write_gt(path: Path, boxes: tuple[BoxInstance, ...]) -> None:
    lines = []
    for box in boxes:
        pose_fields = np.hstack((box.pose.rotation, box.pose.translation[:, None])).reshape(-1)
        fields = [str(box.instance_id), *(_fmt(v) for v in pose_fields), *(_fmt(v) for v in box.dims.as_array())]
        lines.append(" ".join(fields) + "\n")
    _write_bytes(path, "".join(lines).encode("ascii"))


def read_gt(path: Path) -> tuple[BoxInstance, ...]:
    boxes = []
    for offset, text in _lines(path):
        parts = text.split()
        if len(parts) != GT_FIELDS:
            raise DatasetParseError(path, offset, f"expected {GT_FIELDS} fields, found {len(parts)}")
        try:
            instance_id = int(parts[0])
            numbers = np.array([float(p) for p in parts[1:]])
        except ValueError as exc:
            raise DatasetParseError(path, offset, f"bad number in {text!r}") from exc
        try:
            pose = Pose.from_matrix(numbers[:12].reshape(3, 4))
            dims = BoxDims.from_array(numbers[12:])
        except InvalidArgumentError as exc:
            raise DatasetParseError(path, offset, str(exc)) from exc
        boxes.append(BoxInstance(instance_id=instance_id, pose=pose, dims=dims))
    return tuple(boxes)


def write_scene(scene: Scene, directory: Path) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(directory, f"cannot create directory: {exc.strerror or exc}") from exc
    write_depth(directory / DEPTH_FILE, scene.depth)
    write_mask(directory / MASK_FILE, scene.masks)
    write_camera(directory / CAMERA_FILE, scene.camera)
    write_gt(directory / GT_FILE, scene.gt)


def read_scene(directory: Path) -> Scene:
    camera = read_camera(directory / CAMERA_FILE)
    return Scene(
        depth=read_depth(directory / DEPTH_FILE, camera),
        masks=read_mask(directory / MASK_FILE, camera),
        gt=read_gt(directory / GT_FILE),
        camera=camera,
    )


def write_manifest(root: Path, entries: list[ManifestEntry]) -> None:
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(root, f"cannot create directory: {exc.strerror or exc}") from exc
    payload = "".join(f"{entry.name} {entry.seed}\n" for entry in entries)
    _write_bytes(root / MANIFEST_FILE, payload.encode("ascii"))


def read_manifest(root: Path) -> list[ManifestEntry]:
    path = root / MANIFEST_FILE
    entries = []
    for offset, text in _lines(path):
        parts = text.split()
        if len(parts) != 2:
            raise DatasetParseError(path, offset, f"expected '<scene> <seed>', got {text!r}")
        try:
            entries.append(ManifestEntry(name=parts[0], seed=int(parts[1])))
        except ValueError as exc:
            raise DatasetParseError(path, offset, f"bad seed {parts[1]!r}") from exc
    return entries


def list_scene_dirs(path: Path) -> list[Path]:
    """A directory holding camera.txt is one scene; otherwise the manifest (or sorted subdirectories)."""
    if not path.is_dir():
        raise DatasetIOError(path, "not a directory")
    if (path / CAMERA_FILE).is_file():
        return [path]
    if (path / MANIFEST_FILE).is_file():
        scenes = [path / entry.name for entry in read_manifest(path)]
        missing = [scene for scene in scenes if not scene.is_dir()]
        if missing:
            raise DatasetIOError(missing[0], "listed in manifest but missing")
        return scenes
    return sorted(child for child in path.iterdir() if (child / CAMERA_FILE).is_file())
