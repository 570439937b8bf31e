"""Volume ingestion: internal raw+JSON format, NIfTI-1 files, DICOM series.

The internal format is a little-endian int16 voxel file plus a JSON sidecar:
``{"shape": [nz,ny,nx], "spacing_mm": [sz,sy,sx], "origin_mm": [z,y,x],
"subject_id": ..., "exam_id": ...}``. The NIfTI and DICOM readers are
self-contained parsers covering the uncompressed little-endian encodings
produced by CT scanners; exotic transfer syntaxes are rejected.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IOFailure
from .volume import CTVolume, clamp_hu, validate_ingested

RAW_SUFFIX = ".raw"
SIDECAR_SUFFIX = ".json"


# ---------------------------------------------------------------------------
# internal raw + JSON sidecar
# ---------------------------------------------------------------------------

def save_volume(vol: CTVolume, prefix: str | Path) -> Path:
    """Write NAME.raw + NAME.json; returns the sidecar path."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(np.rint(clamp_hu(vol.voxels)), dtype="<i2")
    data.tofile(str(prefix) + RAW_SUFFIX)
    sidecar = {
        "shape": list(vol.shape),
        "spacing_mm": [float(s) for s in vol.spacing],
        "origin_mm": [float(o) for o in vol.origin],
        "subject_id": vol.subject_id,
        "exam_id": vol.exam_id,
    }
    sidecar_path = Path(str(prefix) + SIDECAR_SUFFIX)
    sidecar_path.write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return sidecar_path


def load_volume(path: str | Path) -> CTVolume:
    """Load a volume from its sidecar path or bare prefix."""
    path = Path(path)
    if path.suffix == SIDECAR_SUFFIX:
        prefix = path.with_suffix("")
    elif path.suffix == RAW_SUFFIX:
        prefix = path.with_suffix("")
    else:
        prefix = path
    sidecar_path = Path(str(prefix) + SIDECAR_SUFFIX)
    raw_path = Path(str(prefix) + RAW_SUFFIX)
    if not sidecar_path.exists() or not raw_path.exists():
        raise IOFailure(f"missing internal volume pair at {prefix}")
    meta = json.loads(sidecar_path.read_text())
    shape = tuple(meta["shape"])
    voxels = np.fromfile(raw_path, dtype="<i2")
    if voxels.size != int(np.prod(shape)):
        raise IOFailure(f"raw file size does not match sidecar shape {shape}")
    vol = CTVolume(
        voxels.reshape(shape).astype(np.float32),
        spacing=tuple(meta["spacing_mm"]),
        origin=tuple(meta.get("origin_mm", (0.0, 0.0, 0.0))),
        subject_id=meta.get("subject_id", ""),
        exam_id=meta.get("exam_id", ""),
    )
    return validate_ingested(vol)


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
    64: np.float64, 256: np.int8, 512: np.uint16,
}


def read_nifti(path: str | Path, subject_id: str = "", exam_id: str = "") -> CTVolume:
    """Read a single-file .nii or .nii.gz volume as HU."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 352:
        raise IOFailure(f"{path}: too short for a NIfTI-1 header")

    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    endian = "<"
    if sizeof_hdr != 348:
        sizeof_hdr = struct.unpack_from(">i", raw, 0)[0]
        if sizeof_hdr != 348:
            raise IOFailure(f"{path}: not a NIfTI-1 file")
        endian = ">"
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise IOFailure(f"{path}: bad NIfTI magic {magic!r}")
    if magic == b"ni1\x00":
        raise IOFailure(f"{path}: two-file NIfTI (.hdr/.img) not supported")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    if dim[0] < 3:
        raise IOFailure(f"{path}: need a 3D image, got dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(endian + "f", raw, 108)[0])
    scl_slope = struct.unpack_from(endian + "f", raw, 112)[0]
    scl_inter = struct.unpack_from(endian + "f", raw, 116)[0]

    if datatype not in _NIFTI_DTYPES:
        raise IOFailure(f"{path}: unsupported NIfTI datatype {datatype}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    count = nx * ny * nz
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    # NIfTI stores x fastest; a C-order reshape to (nz, ny, nx) yields (z,y,x)
    voxels = data.reshape((nz, ny, nx)).astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        voxels = voxels * slope + scl_inter
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    vol = CTVolume(clamp_hu(voxels), spacing=spacing,
                   subject_id=subject_id or path.stem.replace(".nii", ""),
                   exam_id=exam_id)
    return validate_ingested(vol)


# ---------------------------------------------------------------------------
# DICOM series (implicit / explicit VR little endian, uncompressed)
# ---------------------------------------------------------------------------

_EXPLICIT_LONG_VRS = {b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN"}
_IMPLICIT_LE = "1.2.840.10008.1.2"
_EXPLICIT_LE = "1.2.840.10008.1.2.1"


def _parse_dicom_elements(buf: bytes, start: int, explicit: bool):
    """Yield (group, element, value_bytes) for the top-level dataset."""
    pos = start
    n = len(buf)
    while pos + 8 <= n:
        group, elem = struct.unpack_from("<HH", buf, pos)
        pos += 4
        if (group, elem) == (0xFFFE, 0xE0DD):  # sequence delimiter at top level
            pos += 4
            continue
        if explicit and group != 0xFFFE:
            vr = buf[pos:pos + 2]
            if vr in _EXPLICIT_LONG_VRS:
                length = struct.unpack_from("<I", buf, pos + 4)[0]
                pos += 8
            else:
                length = struct.unpack_from("<H", buf, pos + 2)[0]
                pos += 4
        else:
            vr = b""
            length = struct.unpack_from("<I", buf, pos)[0]
            pos += 4
        if length == 0xFFFFFFFF:
            pos = _skip_undefined(buf, pos)
            continue
        value = buf[pos:pos + length]
        pos += length
        yield group, elem, value


def _skip_undefined(buf: bytes, pos: int) -> int:
    """Skip an undefined-length value (sequence), handling nesting."""
    depth = 1
    n = len(buf)
    while pos + 8 <= n and depth > 0:
        group, elem = struct.unpack_from("<HH", buf, pos)
        length = struct.unpack_from("<I", buf, pos + 4)[0]
        pos += 8
        if (group, elem) == (0xFFFE, 0xE0DD):
            depth -= 1
        elif (group, elem) == (0xFFFE, 0xE000):
            if length == 0xFFFFFFFF:
                continue  # undefined-length item: contents parsed tag by tag
            pos += length
        elif length == 0xFFFFFFFF:
            depth += 1
        else:
            pos += length
    return pos


def _decode_ds(value: bytes) -> list[float]:
    text = value.decode("ascii", errors="ignore").strip("\x00 ")
    return [float(t) for t in text.split("\\") if t.strip()]


def _read_dicom_slice(path: Path) -> dict:
    buf = path.read_bytes()
    if len(buf) < 140 or buf[128:132] != b"DICM":
        raise IOFailure(f"{path}: missing DICM marker")

    # file meta group (0002,xxxx) is always explicit VR little endian; walk it
    # to grab the transfer syntax and find where the main dataset begins
    transfer_syntax = _EXPLICIT_LE
    pos = 132
    dataset_start = len(buf)
    while pos + 8 <= len(buf):
        group, elem = struct.unpack_from("<HH", buf, pos)
        if group != 0x0002:
            dataset_start = pos
            break
        vr = buf[pos + 4:pos + 6]
        if vr in _EXPLICIT_LONG_VRS:
            length = struct.unpack_from("<I", buf, pos + 8)[0]
            value_off = pos + 12
        else:
            length = struct.unpack_from("<H", buf, pos + 6)[0]
            value_off = pos + 8
        if (group, elem) == (0x0002, 0x0010):
            transfer_syntax = buf[value_off:value_off + length].decode("ascii").strip("\x00 ")
        pos = value_off + length
    if transfer_syntax not in (_IMPLICIT_LE, _EXPLICIT_LE):
        raise IOFailure(f"{path}: unsupported transfer syntax {transfer_syntax}")

    explicit = transfer_syntax == _EXPLICIT_LE
    out = {
        "rows": None, "cols": None, "pixel_spacing": None, "thickness": None,
        "spacing_between": None, "position": None, "instance": 0,
        "intercept": 0.0, "slope": 1.0, "bits": 16, "signed": 1,
        "pixels": None, "subject_id": "", "exam_id": "",
    }
    for group, elem, value in _parse_dicom_elements(buf, dataset_start, explicit):
        tag = (group, elem)
        if tag == (0x0028, 0x0010):
            out["rows"] = struct.unpack_from("<H", value, 0)[0]
        elif tag == (0x0028, 0x0011):
            out["cols"] = struct.unpack_from("<H", value, 0)[0]
        elif tag == (0x0028, 0x0030):
            out["pixel_spacing"] = _decode_ds(value)  # [row (dy), col (dx)]
        elif tag == (0x0018, 0x0050):
            vals = _decode_ds(value)
            out["thickness"] = vals[0] if vals else None
        elif tag == (0x0018, 0x0088):
            vals = _decode_ds(value)
            out["spacing_between"] = vals[0] if vals else None
        elif tag == (0x0020, 0x0032):
            out["position"] = _decode_ds(value)  # [x, y, z]
        elif tag == (0x0020, 0x0013):
            text = value.decode("ascii", errors="ignore").strip("\x00 ")
            out["instance"] = int(text) if text else 0
        elif tag == (0x0028, 0x1052):
            out["intercept"] = _decode_ds(value)[0]
        elif tag == (0x0028, 0x1053):
            out["slope"] = _decode_ds(value)[0]
        elif tag == (0x0028, 0x0100):
            out["bits"] = struct.unpack_from("<H", value, 0)[0]
        elif tag == (0x0028, 0x0103):
            out["signed"] = struct.unpack_from("<H", value, 0)[0]
        elif tag == (0x0010, 0x0020):
            out["subject_id"] = value.decode("ascii", errors="ignore").strip("\x00 ")
        elif tag == (0x0008, 0x0050):
            out["exam_id"] = value.decode("ascii", errors="ignore").strip("\x00 ")
        elif tag == (0x7FE0, 0x0010):
            out["pixels"] = value
    if out["rows"] is None or out["cols"] is None or out["pixels"] is None:
        raise IOFailure(f"{path}: missing image geometry or pixel data")
    return out


def read_dicom_series(directory: str | Path, subject_id: str = "", exam_id: str = "") -> CTVolume:
    """Assemble one CT volume from a directory of single-frame DICOM slices."""
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.is_file())
    if not files:
        raise IOFailure(f"{directory}: no files")
    slices = []
    for path in files:
        try:
            slices.append(_read_dicom_slice(path))
        except IOFailure:
            continue  # non-DICOM files in the directory are skipped
    if not slices:
        raise IOFailure(f"{directory}: no readable DICOM slices")

    if all(s["position"] is not None for s in slices):
        slices.sort(key=lambda s: s["position"][2])
        zs = [s["position"][2] for s in slices]
        dz = float(np.median(np.diff(zs))) if len(zs) > 1 else None
    else:
        slices.sort(key=lambda s: s["instance"])
        dz = None
    if not dz or dz <= 0:
        dz = slices[0]["spacing_between"] or slices[0]["thickness"] or 1.0

    first = slices[0]
    rows, cols = first["rows"], first["cols"]
    dy, dx = (first["pixel_spacing"] or [1.0, 1.0])[:2]
    planes = []
    for s in slices:
        dtype = "<i2" if s["signed"] else "<u2"
        arr = np.frombuffer(s["pixels"], dtype=dtype, count=rows * cols)
        plane = arr.reshape(rows, cols).astype(np.float32)
        planes.append(plane * s["slope"] + s["intercept"])
    voxels = clamp_hu(np.stack(planes, axis=0))
    origin = (0.0, 0.0, 0.0)
    if first["position"] is not None:
        px, py, pz = first["position"][:3]
        origin = (float(pz), float(py), float(px))
    vol = CTVolume(voxels, spacing=(float(dz), float(dy), float(dx)), origin=origin,
                   subject_id=subject_id or first["subject_id"],
                   exam_id=exam_id or first["exam_id"])
    return validate_ingested(vol)
