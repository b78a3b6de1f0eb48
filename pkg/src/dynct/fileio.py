"""On-disk formats: volumes, cone-beam datasets, and PGM slice previews.

Both binary formats use a short ASCII header terminated by a line
reading "data", followed by a float64 little-endian payload.  Volume
payloads are x-fastest; dataset payloads are ordered (segment, time,
detector-u, detector-v) with v fastest.
"""

import io

import numpy as np

from .errors import FormatError, GridMismatchError, MissingInputError, ValidationError
from .geometry import Box
from .reconstruct import VoxelGrid

VOL_MAGIC = "DYNCT-VOL 1"
CBD_MAGIC = "DYNCT-CBD 1"


def _read_header(f, magic, path):
    first = f.readline().decode("ascii", errors="replace").strip()
    if first != magic:
        raise FormatError(f"{path}: expected header {magic!r}, found {first!r}")
    fields = {}
    order = []
    while True:
        raw = f.readline()
        if not raw:
            raise FormatError(f"{path}: header ended before the data marker")
        line = raw.decode("ascii", errors="replace").strip()
        if line == "data":
            return fields, order
        if not line:
            continue
        key, _, rest = line.partition(" ")
        fields.setdefault(key, []).append(rest.strip())
        order.append((key, rest.strip()))


def _floats(text, n, what, path):
    parts = text.split()
    if len(parts) != n:
        raise FormatError(f"{path}: {what} needs {n} numbers, found {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise FormatError(f"{path}: malformed {what}: {text!r}") from exc


def _ints(text, n, what, path):
    vals = _floats(text, n, what, path)
    out = [int(v) for v in vals]
    if any(o != v for o, v in zip(out, vals)):
        raise FormatError(f"{path}: {what} must be integers: {text!r}")
    return out


def _payload(f, count, path):
    raw = f.read(count * 8)
    if len(raw) != count * 8:
        raise FormatError(
            f"{path}: payload truncated ({len(raw)} bytes, expected {count * 8})"
        )
    extra = f.read(1)
    if extra:
        raise FormatError(f"{path}: trailing bytes after the payload")
    return np.frombuffer(raw, dtype="<f8")


# ---------------------------------------------------------------------------
# volumes


def write_volume(path, vol, grid):
    vol = np.asarray(vol, dtype=float)
    if vol.shape != grid.dims:
        raise ValidationError(f"volume shaped {vol.shape} does not match grid {grid.dims}")
    with open(path, "wb") as f:
        f.write(f"{VOL_MAGIC}\n".encode())
        f.write(f"dims {grid.dims[0]} {grid.dims[1]} {grid.dims[2]}\n".encode())
        f.write(("spacing " + " ".join(repr(float(v)) for v in grid.spacing) + "\n").encode())
        f.write(("origin " + " ".join(repr(float(v)) for v in grid.origin) + "\n").encode())
        f.write(b"layout float64 little x-fastest\n")
        f.write(b"data\n")
        f.write(np.ascontiguousarray(vol.flatten(order="F")).astype("<f8").tobytes())


def read_volume(path):
    """Returns (volume array, VoxelGrid)."""
    try:
        f = open(path, "rb")
    except FileNotFoundError as exc:
        raise MissingInputError(f"volume file not found: {path}") from exc
    with f:
        fields, _ = _read_header(f, VOL_MAGIC, path)
        known = {"dims", "spacing", "origin", "layout"}
        for key in fields:
            if key not in known:
                raise FormatError(f"{path}: unknown header field {key!r}")
        for key in ("dims", "spacing", "origin", "layout"):
            if key not in fields:
                raise FormatError(f"{path}: missing header field {key!r}")
            if len(fields[key]) != 1:
                raise FormatError(f"{path}: duplicate header field {key!r}")
        if fields["layout"][0] != "float64 little x-fastest":
            raise FormatError(f"{path}: unsupported layout {fields['layout'][0]!r}")
        dims = _ints(fields["dims"][0], 3, "dims", path)
        if min(dims) < 1:
            raise FormatError(f"{path}: dims must be positive")
        spacing = np.array(_floats(fields["spacing"][0], 3, "spacing", path))
        origin = np.array(_floats(fields["origin"][0], 3, "origin", path))
        if np.any(spacing <= 0.0):
            raise FormatError(f"{path}: spacing must be positive")
        flat = _payload(f, dims[0] * dims[1] * dims[2], path)
    lo = origin - 0.5 * spacing
    hi = origin + spacing * (np.array(dims) - 0.5)
    grid = VoxelGrid(Box(lo, hi), dims)
    return flat.reshape(dims, order="F"), grid


# ---------------------------------------------------------------------------
# cone-beam datasets


def write_dataset(path, dataset):
    det = dataset.detector
    segs = dataset.scene.trajectory.segments
    with open(path, "wb") as f:
        f.write(f"{CBD_MAGIC}\n".encode())
        f.write(f"segments {len(segs)}\n".encode())
        for k, (a, b) in enumerate(segs):
            f.write(f"segment {k} {a!r} {b!r} {det.n_s}\n".encode())
        for k, (a, b) in enumerate(segs):
            mid = dataset.scene.trajectory.position(0.5 * (a + b))
            f.write((f"source {k} " + " ".join(repr(float(v)) for v in np.ravel(mid))
                     + "\n").encode())
        f.write(f"detector {det.n_u} {det.n_v} {det.u_half!r}\n".encode())
        cov = dataset.coverage_box
        f.write(("coverage " + " ".join(repr(float(v)) for v in cov.lo)
                 + " " + " ".join(repr(float(v)) for v in cov.hi) + "\n").encode())
        f.write(b"data\n")
        for blk in dataset.values:
            f.write(np.ascontiguousarray(blk).astype("<f8").tobytes())


def read_dataset(path, scene):
    """Load a dataset recorded for the given scene.

    The stored segment table must match the scene's trajectory; a
    mismatch means the config and the file describe different
    acquisitions.
    """
    from .data import DetectorGrid, GriddedConeBeamDataset

    try:
        f = open(path, "rb")
    except FileNotFoundError as exc:
        raise MissingInputError(f"dataset file not found: {path}") from exc
    with f:
        fields, order = _read_header(f, CBD_MAGIC, path)
        known = {"segments", "segment", "source", "detector", "coverage"}
        for key in fields:
            if key not in known:
                raise FormatError(f"{path}: unknown header field {key!r}")
        for key in known:
            if key not in fields:
                raise FormatError(f"{path}: missing header field {key!r}")
        n_seg = _ints(fields["segments"][0], 1, "segments", path)[0]
        if len(fields["segment"]) != n_seg:
            raise FormatError(
                f"{path}: segment count {n_seg} does not match "
                f"{len(fields['segment'])} segment lines"
            )
        seg_rows = []
        for text in fields["segment"]:
            vals = _floats(text, 4, "segment line", path)
            seg_rows.append((int(vals[0]), vals[1], vals[2], int(vals[3])))
        seg_rows.sort()
        n_s = seg_rows[0][3]
        if any(r[3] != n_s for r in seg_rows):
            raise FormatError(f"{path}: all segments must share one time sample count")
        det_vals = _floats(fields["detector"][0], 3, "detector", path)
        n_u, n_v = int(det_vals[0]), int(det_vals[1])
        u_half = det_vals[2]
        cov = _floats(fields["coverage"][0], 6, "coverage", path)

        want = scene.trajectory.segments
        if len(want) != n_seg:
            raise GridMismatchError(
                f"{path}: file has {n_seg} segments, scene has {len(want)}"
            )
        for k, (a, b) in enumerate(want):
            _, fa, fb, _ = seg_rows[k]
            if abs(fa - a) > 1e-9 * max(1.0, abs(a)) or abs(fb - b) > 1e-9 * max(1.0, abs(b)):
                raise GridMismatchError(
                    f"{path}: segment {k} spans ({fa}, {fb}) but the scene "
                    f"trajectory has ({a}, {b})"
                )
        if len(fields["source"]) != n_seg:
            raise FormatError(
                f"{path}: expected {n_seg} source lines, found {len(fields['source'])}"
            )
        src_rows = []
        for text in fields["source"]:
            vals = _floats(text, 4, "source line", path)
            src_rows.append((int(vals[0]), np.array(vals[1:])))
        src_rows.sort(key=lambda r: r[0])
        for k, (a, b) in enumerate(want):
            have = scene.trajectory.position(0.5 * (a + b))
            stored = src_rows[k][1]
            if np.max(np.abs(stored - have)) > 1e-9 * max(1.0, float(np.max(np.abs(have)))):
                raise GridMismatchError(
                    f"{path}: segment {k} midpoint source {tuple(stored)} does not "
                    f"match the scene trajectory at {tuple(np.ravel(have))}"
                )

        flat = _payload(f, n_seg * n_s * n_u * n_v, path)
    det = DetectorGrid(scene, n_s, n_u, n_v, u_half=u_half)
    blocks = list(flat.reshape(n_seg, n_s, n_u, n_v))
    coverage = Box(np.array(cov[:3]), np.array(cov[3:]))
    return GriddedConeBeamDataset(scene, det, blocks, coverage)


# ---------------------------------------------------------------------------
# PGM previews


def write_pgm(path, image):
    """16-bit big-endian binary PGM of one 2D array (no rescaling)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValidationError("PGM output needs a 2D array")
    if img.dtype != np.uint16:
        raise ValidationError("PGM output needs uint16 samples; window the data first")
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode())
        f.write(img.astype(">u2").tobytes())


def window_to_uint16(vol):
    """Min-max window a volume (or slice) into the full 16-bit range."""
    v = np.asarray(vol, dtype=float)
    lo = float(np.min(v))
    hi = float(np.max(v))
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint16)
    return np.round((v - lo) / (hi - lo) * 65535.0).astype(np.uint16)


def write_pgm_slices(prefix, vol):
    """One z-slice PGM per plane, windowed over the whole volume so the
    grey scale is comparable across slices.  Returns the paths."""
    v = np.asarray(vol, dtype=float)
    if v.ndim != 3:
        raise ValidationError("slice output needs a 3D volume")
    w = window_to_uint16(v)
    paths = []
    for k in range(v.shape[2]):
        p = f"{prefix}_z{k:03d}.pgm"
        write_pgm(p, w[:, :, k].T)
        paths.append(p)
    return paths
