"""File round-trips: PFM / PNG images, OBJ meshes, JSON documents (scenes,
cameras, lenses, light lists, keypoints), skinning-weight text files, and the
versioned VPKT checkpoint binary.

Every persisted format is self-describing (magic + version) and rejects
future-version reads. Binary formats carry a CRC32 so checksum failure and
truncation are reported as distinct errors.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ChecksumError, DataError, TruncationError, VersionError
from .raymarch import Camera, Image
from .volprim import PrimitiveSet, Scene

SCENE_FORMAT = "glassvol-scene"
CAMERA_FORMAT = "glassvol-camera"
LENS_FORMAT = "glassvol-lens"
LIGHTS_FORMAT = "glassvol-envlights"
KEYPOINTS_FORMAT = "glassvol-keypoints"
CKPT_MAGIC = b"VPKT"
CKPT_VERSION = 1
JSON_VERSION = 1


# ---------------------------------------------------------------------------
# JSON plumbing


def _write_json(path, format_name: str, payload: dict) -> None:
    doc = {"format": format_name, "version": JSON_VERSION}
    doc.update(payload)
    Path(path).write_text(json.dumps(doc, indent=1))


def _read_json(path, format_name: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("format") != format_name:
        raise DataError(f"{path}: expected format {format_name!r}, got {doc.get('format')!r}")
    if doc.get("version", 0) > JSON_VERSION:
        raise VersionError(f"{path}: version {doc['version']} is newer than supported {JSON_VERSION}")
    return doc


# ---------------------------------------------------------------------------
# Scene / camera


def save_scene(path, scene: Scene) -> None:
    sets = []
    for label, pset in scene.sets:
        sets.append(
            {
                "label": label,
                "grid_resolution": pset.grid_resolution,
                "positions": pset.positions.tolist(),
                "rotations_wxyz": pset.rotations.tolist(),
                "scales": pset.scales.tolist(),
                "opacity_grid": pset.opacity.reshape(pset.count, -1).tolist(),
                "color_grid": pset.color.reshape(pset.count, -1).tolist(),
            }
        )
    _write_json(path, SCENE_FORMAT, {"background": scene.background.tolist(), "sets": sets})


def load_scene(path) -> Scene:
    doc = _read_json(path, SCENE_FORMAT)
    sets = []
    for entry in doc["sets"]:
        m = int(entry["grid_resolution"])
        positions = np.asarray(entry["positions"], dtype=float)
        n = positions.shape[0]
        pset = PrimitiveSet(
            positions=positions,
            rotations=np.asarray(entry["rotations_wxyz"], dtype=float),
            scales=np.asarray(entry["scales"], dtype=float),
            opacity=np.asarray(entry["opacity_grid"], dtype=float).reshape(n, m, m, m),
            color=np.asarray(entry["color_grid"], dtype=float).reshape(n, 3, m, m, m),
        )
        sets.append((entry["label"], pset))
    return Scene(tuple(sets), np.asarray(doc["background"], dtype=float))


def save_camera(path, camera: Camera) -> None:
    _write_json(
        path,
        CAMERA_FORMAT,
        {
            "intrinsics": camera.intrinsics.tolist(),
            "pose_world_from_camera": camera.pose.tolist(),
            "resolution": list(camera.resolution),
        },
    )


def load_camera(path) -> Camera:
    doc = _read_json(path, CAMERA_FORMAT)
    return Camera(
        np.asarray(doc["intrinsics"], dtype=float),
        np.asarray(doc["pose_world_from_camera"], dtype=float),
        tuple(doc["resolution"]),
    )


def save_keypoints(path, payload: dict) -> None:
    _write_json(path, KEYPOINTS_FORMAT, payload)


def load_keypoints(path) -> dict:
    return _read_json(path, KEYPOINTS_FORMAT)


def save_lights(path, lights: list) -> None:
    """lights: list of dicts with 'position' or 'direction' plus 'weight'."""
    _write_json(path, LIGHTS_FORMAT, {"lights": lights})


def load_lights(path) -> list:
    return _read_json(path, LIGHTS_FORMAT)["lights"]


def save_lens_spec(path, payload: dict) -> None:
    _write_json(path, LENS_FORMAT, payload)


def load_lens_spec(path) -> dict:
    return _read_json(path, LENS_FORMAT)


# ---------------------------------------------------------------------------
# PFM / PNG


def save_pfm(path, image: Image) -> None:
    data = image.data.astype(np.float32)
    h, w, c = data.shape
    header = b"PF\n" if c == 3 else b"Pf\n"
    rows = data[::-1]  # PFM stores bottom-to-top
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale = little-endian
        f.write(rows.astype("<f4").tobytes())


def load_pfm(path) -> Image:
    raw = Path(path).read_bytes()
    try:
        nl1 = raw.index(b"\n")
        nl2 = raw.index(b"\n", nl1 + 1)
        nl3 = raw.index(b"\n", nl2 + 1)
    except ValueError as exc:
        raise TruncationError(f"{path}: incomplete PFM header") from exc
    kind = raw[:nl1].decode()
    if kind not in ("PF", "Pf"):
        raise DataError(f"{path}: not a PFM file (header {kind!r})")
    w, h = (int(x) for x in raw[nl1 + 1 : nl2].split())
    scale = float(raw[nl2 + 1 : nl3])
    channels = 3 if kind == "PF" else 1
    count = w * h * channels
    payload = raw[nl3 + 1 :]
    if len(payload) < count * 4:
        raise TruncationError(f"{path}: expected {count * 4} payload bytes, got {len(payload)}")
    dt = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload[: count * 4], dtype=dt).reshape(h, w, channels)
    return Image(np.ascontiguousarray(data[::-1], dtype=float))


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png_preview(path, image: Image) -> None:
    """8-bit sRGB-encoded quantization of a linear image."""
    srgb = np.round(linear_to_srgb(image.data) * 255.0).astype(np.uint8)
    if srgb.shape[2] == 1:
        srgb = srgb[:, :, 0]
    PILImage.fromarray(srgb).save(path)


def load_png_preview(path) -> Image:
    arr = np.asarray(PILImage.open(path), dtype=float) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return Image(srgb_to_linear(arr[:, :, :3] if arr.shape[2] > 3 else arr))


# ---------------------------------------------------------------------------
# OBJ meshes (v / vn / f subset)


def save_obj(path, vertices: np.ndarray, faces: np.ndarray, normals: np.ndarray | None = None) -> None:
    lines = []
    for v in np.asarray(vertices, dtype=float):
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    if normals is not None:
        for n in np.asarray(normals, dtype=float):
            lines.append(f"vn {float(n[0])!r} {float(n[1])!r} {float(n[2])!r}")
        for f in np.asarray(faces, dtype=int):
            lines.append(f"f {f[0]+1}//{f[0]+1} {f[1]+1}//{f[1]+1} {f[2]+1}//{f[2]+1}")
    else:
        for f in np.asarray(faces, dtype=int):
            lines.append(f"f {f[0]+1} {f[1]+1} {f[2]+1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    vertices, normals, faces, face_normals = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            vertices.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise DataError(f"{path}: only triangle faces supported, got {line!r}")
            vi, ni = [], []
            for token in parts[1:]:
                fields = token.split("/")
                vi.append(int(fields[0]) - 1)
                if len(fields) == 3 and fields[2]:
                    ni.append(int(fields[2]) - 1)
            faces.append(vi)
            if len(ni) == 3:
                face_normals.append(ni)
    verts = np.asarray(vertices, dtype=float)
    faces_arr = np.asarray(faces, dtype=int)
    vnormals = None
    if normals and face_normals:
        vnormals = np.zeros_like(verts)
        norm_arr = np.asarray(normals, dtype=float)
        for f, fn in zip(faces_arr, face_normals):
            vnormals[f] = norm_arr[fn]
    elif normals and len(normals) == len(vertices):
        vnormals = np.asarray(normals, dtype=float)
    return verts, faces_arr, vnormals


# ---------------------------------------------------------------------------
# Checkpoint binary (VPKT)


def save_checkpoint(path, blocks: dict, manifest: dict) -> None:
    """Named float arrays + JSON manifest in a single self-describing binary.

    Layout: magic, u32 version, u32 manifest length, manifest JSON, u32 block
    count, blocks (u16 name length, name, u8 ndim, u32 dims, f32 data), u32
    CRC32 over everything after the magic. Also writes `<path>.manifest.json`.
    """
    body = bytearray()
    body += struct.pack("<I", CKPT_VERSION)
    mjson = json.dumps(manifest).encode()
    body += struct.pack("<I", len(mjson)) + mjson
    body += struct.pack("<I", len(blocks))
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=np.float32)
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (1,)))
        body += arr.astype("<f4").tobytes()
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(body)
        f.write(struct.pack("<I", crc))
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (blocks, manifest); parameters come back as float64 arrays."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncationError(f"{path}: file shorter than any valid checkpoint")
    if raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    # the structural walk below raises TruncationError on short reads; the
    # CRC is checked only after a complete walk so corruption and truncation
    # surface as distinct errors
    body, stored_crc = raw[4:-4], struct.unpack("<I", raw[-4:])[0]
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(body):
            raise TruncationError(f"{path}: truncated while reading {what}")
        chunk = body[off : off + n]
        off += n
        return chunk

    version = struct.unpack("<I", take(4, "version"))[0]
    if version > CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version} > supported {CKPT_VERSION}")
    mlen = struct.unpack("<I", take(4, "manifest length"))[0]
    manifest = json.loads(take(mlen, "manifest").decode())
    nblocks = struct.unpack("<I", take(4, "block count"))[0]
    blocks = {}
    for _ in range(nblocks):
        nlen = struct.unpack("<H", take(2, "block name length"))[0]
        name = take(nlen, "block name").decode()
        ndim = struct.unpack("<B", take(1, "block ndim"))[0]
        shape = struct.unpack(f"<{max(ndim, 1)}I", take(4 * max(ndim, 1), "block shape"))
        count = int(np.prod(shape)) if ndim else int(shape[0])
        data = np.frombuffer(take(4 * count, f"block {name!r} data"), dtype="<f4")
        blocks[name] = data.astype(float).reshape(shape if ndim else ())
    if zlib.crc32(body) != stored_crc:
        raise ChecksumError(f"{path}: CRC mismatch (stored {stored_crc:#010x})")
    return blocks, manifest


# ---------------------------------------------------------------------------
# Skinning weights text file


def save_weights(path, weights: np.ndarray) -> None:
    """K x V matrix as text with a CRC32 checksum over the numeric payload."""
    weights = np.asarray(weights, dtype=float)
    k, v = weights.shape
    rows = "\n".join(" ".join(repr(float(x)) for x in row) for row in weights)
    crc = zlib.crc32(rows.encode())
    Path(path).write_text(f"glassvol-weights 1 {k} {v} {crc:08x}\n{rows}\n")


def load_weights(path) -> np.ndarray:
    text = Path(path).read_text()
    header, _, rows = text.partition("\n")
    fields = header.split()
    if len(fields) != 5 or fields[0] != "glassvol-weights":
        raise DataError(f"{path}: bad weights header {header!r}")
    if int(fields[1]) > 1:
        raise VersionError(f"{path}: weights version {fields[1]} > supported 1")
    k, v = int(fields[2]), int(fields[3])
    rows = rows.rstrip("\n")
    if zlib.crc32(rows.encode()) != int(fields[4], 16):
        raise ChecksumError(f"{path}: weights checksum mismatch")
    mat = np.array([[float(x) for x in line.split()] for line in rows.splitlines()])
    if mat.shape != (k, v):
        raise TruncationError(f"{path}: expected {(k, v)} weights, got {mat.shape}")
    return mat
