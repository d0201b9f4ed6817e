"""Point cloud file I/O (PLY and PCD subsets), sensor poses, and scan merging.

Supported formats: ASCII PLY, binary little-endian PLY, PCD v0.7 ascii and
binary. Coordinates are stored as 8-byte doubles, so binary round trips are
bit-exact; ASCII output carries 6 significant digits. An optional per-point
``intensity`` column and an integer ``classification`` column ride along.
Classification codes are written into a header comment so files stay
self-describing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import LABEL_COMMENT, PointCloud
from .errors import (
    IoFailure,
    LengthMismatch,
    MalformedHeader,
    NonUnitQuaternion,
    TruncatedBody,
    UnsupportedProperty,
)

# PLY scalar type names (classic and numpy-style synonyms) to numpy codes.
_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_WANTED_FIELDS = ("x", "y", "z", "intensity", "classification")


@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion (w, x, y, z) plus translation, meters."""

    translation: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        norm = float(np.sqrt((q**2).sum()))
        if abs(norm - 1.0) > 1e-9:
            raise NonUnitQuaternion(f"quaternion norm {norm} deviates from 1 by more than 1e-9")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "quaternion", q)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.quaternion
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) points: p' = R p + t."""
        return np.asarray(points, dtype=np.float64) @ self.rotation_matrix().T + self.translation


def _resolve_labels(cloud: PointCloud, labels) -> np.ndarray | None:
    if labels is None:
        return cloud.classification
    codes = np.asarray(labels)
    if codes.shape != (len(cloud),):
        raise LengthMismatch(
            f"label mask has {codes.shape} entries for a cloud of {len(cloud)} points"
        )
    return codes.astype(np.uint8)


# ---------------------------------------------------------------------------
# PLY

def _save_ply(cloud: PointCloud, path: Path, binary: bool, codes) -> None:
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    if codes is not None:
        header.append(f"comment {LABEL_COMMENT}")
    header.append(f"element vertex {len(cloud)}")
    header += ["property double x", "property double y", "property double z"]
    if cloud.intensity is not None:
        header.append("property double intensity")
    if codes is not None:
        header.append("property uchar classification")
    header.append("end_header")

    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if cloud.intensity is not None:
        fields.append(("intensity", "<f8"))
    if codes is not None:
        fields.append(("classification", "u1"))
    rec = np.empty(len(cloud), dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    if cloud.intensity is not None:
        rec["intensity"] = cloud.intensity
    if codes is not None:
        rec["classification"] = codes

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            fmt = ["%.6g"] * 3
            cols = [cloud.xyz]
            if cloud.intensity is not None:
                fmt.append("%.6g")
                cols.append(cloud.intensity[:, None])
            if codes is not None:
                fmt.append("%d")
                cols.append(codes[:, None].astype(np.float64))
            np.savetxt(fh, np.hstack(cols), fmt=" ".join(fmt))


def _load_ply(data: bytes, path) -> PointCloud:
    end = data.find(b"end_header")
    if end < 0:
        raise MalformedHeader(f"{path}: missing end_header")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise MalformedHeader(f"{path}: header not newline-terminated")
    header_lines = data[:nl].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:]

    fmt = None
    count = None
    props: list[tuple[str, str]] = []  # (name, numpy code) for the vertex element
    in_vertex = False
    for line in header_lines[1:]:
        tok = line.strip().split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise MalformedHeader(f"{path}: unsupported PLY format {' '.join(tok[1:])!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise MalformedHeader(f"{path}: bad element line {line.strip()!r}")
            if tok[1] == "vertex":
                if count is not None:
                    raise MalformedHeader(f"{path}: duplicate vertex element")
                try:
                    count = int(tok[2])
                except ValueError:
                    raise MalformedHeader(f"{path}: bad vertex count {tok[2]!r}") from None
                in_vertex = True
            else:
                if count is None:
                    # The vertex payload must come first so its offset is known.
                    raise MalformedHeader(f"{path}: element {tok[1]!r} precedes vertex")
                in_vertex = False
        elif tok[0] == "property":
            if not in_vertex:
                continue  # properties of trailing elements never get read
            if tok[1] == "list":
                raise UnsupportedProperty(
                    f"{path}: list property {tok[-1]!r} in vertex element"
                )
            if len(tok) != 3:
                raise MalformedHeader(f"{path}: bad property line {line.strip()!r}")
            code = _PLY_TYPES.get(tok[1])
            if code is None:
                raise UnsupportedProperty(f"{path}: property {tok[2]!r} has unknown type {tok[1]!r}")
            props.append((tok[2], code))
    if fmt is None or count is None:
        raise MalformedHeader(f"{path}: missing format or vertex element")

    names = [n for n, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise MalformedHeader(f"{path}: vertex element lacks property {axis!r}")
    for name, code in props:
        if name == "classification" and code[0] not in "iu":
            raise UnsupportedProperty(f"{path}: classification must be an integer type")
        if name not in _WANTED_FIELDS:
            warnings.warn(f"{path}: skipping PLY property {name!r}", stacklevel=3)

    if fmt == "ascii":
        tokens = body.split()
        needed = count * len(props)
        if len(tokens) < needed:
            raise TruncatedBody(
                f"{path}: header declares {count} vertices, body has "
                f"{len(tokens) // len(props) if props else 0} complete rows"
            )
        try:
            table = np.asarray(tokens[:needed], dtype="S32").astype(np.float64)
        except ValueError:
            raise TruncatedBody(f"{path}: non-numeric value in vertex data") from None
        table = table.reshape(count, len(props))
        cols = {name: table[:, i] for i, (name, _) in enumerate(props)}
    else:
        # Names must be unique for a structured dtype; alias the skipped ones.
        uniq = [(n if n in _WANTED_FIELDS else f"_skip{i}", "<" + c) for i, (n, c) in enumerate(props)]
        dtype = np.dtype(uniq)
        need_bytes = count * dtype.itemsize
        if len(body) < need_bytes:
            raise TruncatedBody(
                f"{path}: need {need_bytes} bytes for {count} vertices, body has {len(body)}"
            )
        rec = np.frombuffer(body[:need_bytes], dtype=dtype)
        cols = {n: rec[n] for n in dtype.names if not n.startswith("_skip")}

    xyz = np.column_stack([cols["x"], cols["y"], cols["z"]]).astype(np.float64)
    intensity = cols.get("intensity")
    classification = cols.get("classification")
    return PointCloud(
        xyz,
        intensity=None if intensity is None else intensity.astype(np.float64),
        classification=None if classification is None else classification.astype(np.uint8),
    )


# ---------------------------------------------------------------------------
# PCD

_PCD_TYPES = {
    ("F", 4): "f4", ("F", 8): "f8",
    ("U", 1): "u1", ("U", 2): "u2", ("U", 4): "u4", ("U", 8): "u8",
    ("I", 1): "i1", ("I", 2): "i2", ("I", 4): "i4", ("I", 8): "i8",
}


def _save_pcd(cloud: PointCloud, path: Path, binary: bool, codes) -> None:
    fields = ["x", "y", "z"]
    sizes = ["8", "8", "8"]
    types = ["F", "F", "F"]
    if cloud.intensity is not None:
        fields.append("intensity")
        sizes.append("8")
        types.append("F")
    if codes is not None:
        fields.append("classification")
        sizes.append("1")
        types.append("U")
    n = len(cloud)
    header = []
    if codes is not None:
        header.append(f"# {LABEL_COMMENT}")
    header += [
        "VERSION 0.7",
        "FIELDS " + " ".join(fields),
        "SIZE " + " ".join(sizes),
        "TYPE " + " ".join(types),
        "COUNT " + " ".join(["1"] * len(fields)),
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        f"DATA {'binary' if binary else 'ascii'}",
    ]

    np_fields = [(f, "u1" if t == "U" else "<f8") for f, t in zip(fields, types)]
    rec = np.empty(n, dtype=np.dtype(np_fields))
    rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    if cloud.intensity is not None:
        rec["intensity"] = cloud.intensity
    if codes is not None:
        rec["classification"] = codes

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            fmt = ["%d" if t == "U" else "%.6g" for t in types]
            cols = [cloud.xyz]
            if cloud.intensity is not None:
                cols.append(cloud.intensity[:, None])
            if codes is not None:
                cols.append(codes[:, None].astype(np.float64))
            np.savetxt(fh, np.hstack(cols), fmt=" ".join(fmt))


def _load_pcd(data: bytes, path) -> PointCloud:
    meta: dict[str, str] = {}
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise MalformedHeader(f"{path}: PCD header has no DATA line")
        line = data[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        meta[key.upper()] = rest.strip()
        if key.upper() == "DATA":
            break
    body = data[pos:]

    version = meta.get("VERSION", "0.7")
    if version not in ("0.7", ".7"):
        raise MalformedHeader(f"{path}: unsupported PCD version {version!r}")
    if "FIELDS" not in meta:
        raise MalformedHeader(f"{path}: PCD header lacks FIELDS")
    fields = meta["FIELDS"].split()
    try:
        sizes = [int(v) for v in meta["SIZE"].split()]
        types = meta["TYPE"].split()
        counts = [int(v) for v in meta.get("COUNT", " ".join(["1"] * len(fields))).split()]
    except (KeyError, ValueError) as exc:
        raise MalformedHeader(f"{path}: bad SIZE/TYPE/COUNT: {exc}") from None
    if not (len(fields) == len(sizes) == len(types) == len(counts)):
        raise MalformedHeader(f"{path}: FIELDS/SIZE/TYPE/COUNT lengths disagree")

    if "POINTS" in meta:
        try:
            n = int(meta["POINTS"])
        except ValueError:
            raise MalformedHeader(f"{path}: bad POINTS {meta['POINTS']!r}") from None
    elif "WIDTH" in meta and "HEIGHT" in meta:
        n = int(meta["WIDTH"]) * int(meta["HEIGHT"])
    else:
        raise MalformedHeader(f"{path}: PCD header lacks POINTS")
    if "WIDTH" in meta and "HEIGHT" in meta and int(meta["WIDTH"]) * int(meta["HEIGHT"]) != n:
        raise MalformedHeader(f"{path}: WIDTH*HEIGHT disagrees with POINTS")

    mode = meta["DATA"].lower()
    if mode not in ("ascii", "binary"):
        raise UnsupportedProperty(f"{path}: DATA {mode!r} not supported")

    for axis in ("x", "y", "z"):
        if axis not in fields:
            raise MalformedHeader(f"{path}: PCD lacks field {axis!r}")
    for f, c in zip(fields, counts):
        if f in _WANTED_FIELDS and c != 1:
            raise UnsupportedProperty(f"{path}: field {f!r} has COUNT {c}")
        if f not in _WANTED_FIELDS:
            warnings.warn(f"{path}: skipping PCD field {f!r}", stacklevel=3)
    codes_np = []
    for f, s, t in zip(fields, sizes, types):
        code = _PCD_TYPES.get((t.upper(), s))
        if code is None:
            raise UnsupportedProperty(f"{path}: field {f!r} has unsupported TYPE/SIZE {t}/{s}")
        if f == "classification" and code[0] not in "iu":
            raise UnsupportedProperty(f"{path}: classification must be an integer type")
        codes_np.append(code)

    if mode == "ascii":
        tokens = body.split()
        width = sum(counts)
        if len(tokens) < n * width:
            raise TruncatedBody(
                f"{path}: header declares {n} points, body has "
                f"{len(tokens) // width if width else 0} complete rows"
            )
        try:
            table = np.asarray(tokens[: n * width], dtype="S32").astype(np.float64)
        except ValueError:
            raise TruncatedBody(f"{path}: non-numeric value in point data") from None
        table = table.reshape(n, width)
        offsets = np.concatenate(([0], np.cumsum(counts)))
        cols = {
            f: table[:, offsets[i]]
            for i, f in enumerate(fields)
            if f in _WANTED_FIELDS
        }
    else:
        uniq = []
        for i, (f, code, cnt) in enumerate(zip(fields, codes_np, counts)):
            name = f if f in _WANTED_FIELDS else f"_skip{i}"
            uniq.append((name, "<" + code, (cnt,)) if cnt > 1 else (name, "<" + code))
        dtype = np.dtype(uniq)
        need = n * dtype.itemsize
        if len(body) < need:
            raise TruncatedBody(f"{path}: need {need} bytes for {n} points, body has {len(body)}")
        rec = np.frombuffer(body[:need], dtype=dtype)
        cols = {f: rec[f] for f in dtype.names if not f.startswith("_skip")}

    xyz = np.column_stack([cols["x"], cols["y"], cols["z"]]).astype(np.float64)
    intensity = cols.get("intensity")
    classification = cols.get("classification")
    return PointCloud(
        xyz,
        intensity=None if intensity is None else intensity.astype(np.float64),
        classification=None if classification is None else classification.astype(np.uint8),
    )


# ---------------------------------------------------------------------------
# Public entry points

def save_cloud(cloud: PointCloud, path, *, binary: bool = False, labels=None) -> None:
    """Write a cloud to .ply or .pcd (by extension), ASCII unless ``binary``.

    ``labels`` (when given) overrides any classification already on the cloud
    and is stored as an integer classification column.
    """
    p = Path(path)
    codes = _resolve_labels(cloud, labels)
    suffix = p.suffix.lower()
    try:
        if suffix == ".ply":
            _save_ply(cloud, p, binary, codes)
        elif suffix == ".pcd":
            _save_pcd(cloud, p, binary, codes)
        else:
            raise IoFailure(f"unsupported cloud format {suffix!r} for {p} (use .ply or .pcd)")
    except OSError as exc:
        raise IoFailure(f"cannot write {p}: {exc}") from exc


def load_cloud(path) -> PointCloud:
    """Read a .ply or .pcd cloud; the format is sniffed from the content."""
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {p}: {exc}") from exc
    if data.startswith(b"ply"):
        return _load_ply(data, p)
    return _load_pcd(data, p)


def merge_scans(scans) -> PointCloud:
    """Concatenate (cloud, pose) scans transformed into the common frame.

    Output order is input order: scan 0's points first. Intensity survives
    only when every scan carries it; classification never does (merging is a
    pre-labeling step).
    """
    parts = []
    intensities = []
    for cloud, pose in scans:
        parts.append(pose.apply(cloud.xyz))
        intensities.append(cloud.intensity)
    if not parts:
        return PointCloud(np.zeros((0, 3)))
    keep_intensity = all(v is not None for v in intensities)
    return PointCloud(
        np.vstack(parts),
        intensity=np.concatenate(intensities) if keep_intensity else None,
    )


def load_pose_list(path) -> list[tuple[Path, Pose]]:
    """Parse a scan list: one ``path tx ty tz qw qx qy qz`` line per scan.

    '#' starts a comment, blank lines are skipped, and relative scan paths
    resolve against the list file's directory. Paths must not contain
    whitespace.
    """
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {p}: {exc}") from exc
    entries = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 8:
            raise MalformedHeader(
                f"{p}:{ln}: expected 'path tx ty tz qw qx qy qz', got {len(tok)} fields"
            )
        try:
            nums = [float(v) for v in tok[1:]]
        except ValueError:
            raise MalformedHeader(f"{p}:{ln}: non-numeric pose component") from None
        scan = Path(tok[0])
        if not scan.is_absolute():
            scan = p.parent / scan
        entries.append((scan, Pose(np.asarray(nums[:3]), np.asarray(nums[3:]))))
    return entries


def merge_from_pose_list(path) -> PointCloud:
    """Load every scan named in a pose list and merge them."""
    return merge_scans([(load_cloud(sp), pose) for sp, pose in load_pose_list(path)])
