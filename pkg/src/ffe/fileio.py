"""Frame-pair file formats (text and binary) and key=value config files.

A pair file holds the source frame (optionally with ground-truth flow
columns) followed by the target frame. Text blocks start with
``# ffp v1 n=<n> has_gt=<0|1>``; binary blocks start with magic ``FFP1``,
a little-endian u64 count and a u8 flag, then raw little-endian float64
values. Binary files may carry an optional trailing metadata table (magic
``FFPM``). Text round-trips are value-exact; binary round-trips bit-exact.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import FlowField, ParticleFrame
from .errors import FileFormatError

_TEXT_HEADER = "# ffp v1"
_MAGIC = b"FFP1"
_META_MAGIC = b"FFPM"


@dataclass
class FramePairRecord:
    """Source frame, target frame, optional ground truth, free-form metadata."""

    frame_x: ParticleFrame
    frame_y: ParticleFrame
    gt_flow: FlowField = None
    metadata: dict = field(default_factory=dict)

    def equal(self, other):
        if not np.array_equal(self.frame_x.positions, other.frame_x.positions):
            return False
        if not np.array_equal(self.frame_y.positions, other.frame_y.positions):
            return False
        if (self.gt_flow is None) != (other.gt_flow is None):
            return False
        if self.gt_flow is not None and not np.array_equal(
            self.gt_flow.vectors, other.gt_flow.vectors
        ):
            return False
        return self.metadata == other.metadata


def _fmt(x):
    return f"{x:.17g}"


def save_pair_text(record, path):
    lines = []
    has_gt = record.gt_flow is not None
    lines.append(f"{_TEXT_HEADER} n={len(record.frame_x)} has_gt={int(has_gt)}")
    for key in sorted(record.metadata):
        lines.append(f"# meta {key}={record.metadata[key]}")
    for i, row in enumerate(record.frame_x.positions):
        cols = [_fmt(v) for v in row]
        if has_gt:
            cols += [_fmt(v) for v in record.gt_flow.vectors[i]]
        lines.append(" ".join(cols))
    lines.append(f"{_TEXT_HEADER} n={len(record.frame_y)} has_gt=0")
    for row in record.frame_y.positions:
        lines.append(" ".join(_fmt(v) for v in row))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _parse_text_header(line, path, lineno):
    if not line.startswith(_TEXT_HEADER):
        raise FileFormatError(f"expected header {_TEXT_HEADER!r}, got {line!r}", path=path, line=lineno)
    fields = dict(part.split("=", 1) for part in line[len(_TEXT_HEADER):].split())
    try:
        return int(fields["n"]), bool(int(fields["has_gt"]))
    except (KeyError, ValueError) as e:
        raise FileFormatError(f"malformed header: {e}", path=path, line=lineno)


def load_pair_text(path):
    with open(path, "r", encoding="utf-8") as f:
        raw = f.read().splitlines()
    pos = 0

    def read_block(expect_gt_allowed):
        nonlocal pos
        if pos >= len(raw):
            raise FileFormatError("missing frame block", path=path, line=pos + 1)
        n, has_gt = _parse_text_header(raw[pos], path, pos + 1)
        pos += 1
        meta = {}
        while pos < len(raw) and raw[pos].startswith("# meta "):
            key, _, value = raw[pos][len("# meta "):].partition("=")
            meta[key] = value
            pos += 1
        width = 6 if has_gt else 3
        rows = np.empty((n, width))
        for i in range(n):
            if pos >= len(raw):
                raise FileFormatError(
                    f"expected {n} particle rows, file ended after {i}", path=path, line=pos
                )
            parts = raw[pos].split()
            if len(parts) != width:
                raise FileFormatError(
                    f"expected {width} columns, got {len(parts)}", path=path, line=pos + 1
                )
            try:
                rows[i] = [float(p) for p in parts]
            except ValueError as e:
                raise FileFormatError(f"bad number: {e}", path=path, line=pos + 1)
            if not np.isfinite(rows[i]).all():
                raise FileFormatError("non-finite value in row", path=path, line=pos + 1)
            pos += 1
        return rows[:, :3], (rows[:, 3:] if has_gt else None), meta

    x, gt, meta = read_block(True)
    y, _, _ = read_block(False)
    if pos != len(raw) and any(line.strip() for line in raw[pos:]):
        raise FileFormatError("trailing content after target frame", path=path, line=pos + 1)
    return FramePairRecord(
        frame_x=ParticleFrame(x),
        frame_y=ParticleFrame(y),
        gt_flow=FlowField(gt) if gt is not None else None,
        metadata=meta,
    )


def save_pair_binary(record, path):
    has_gt = record.gt_flow is not None
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<QB", len(record.frame_x), int(has_gt)))
        f.write(np.ascontiguousarray(record.frame_x.positions, dtype="<f8").tobytes())
        if has_gt:
            f.write(np.ascontiguousarray(record.gt_flow.vectors, dtype="<f8").tobytes())
        f.write(_MAGIC)
        f.write(struct.pack("<QB", len(record.frame_y), 0))
        f.write(np.ascontiguousarray(record.frame_y.positions, dtype="<f8").tobytes())
        if record.metadata:
            f.write(_META_MAGIC)
            f.write(struct.pack("<I", len(record.metadata)))
            for key in sorted(record.metadata):
                kb = str(key).encode("utf-8")
                vb = str(record.metadata[key]).encode("utf-8")
                f.write(struct.pack("<II", len(kb), len(vb)))
                f.write(kb)
                f.write(vb)


def load_pair_binary(path):
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def read_block():
        nonlocal off
        if blob[off : off + 4] != _MAGIC:
            raise FileFormatError("bad frame magic", path=path, offset=off)
        off += 4
        if off + 9 > len(blob):
            raise FileFormatError(
                f"truncated header: expected {off + 9} bytes, file has {len(blob)}",
                path=path,
                offset=off,
            )
        n, has_gt = struct.unpack_from("<QB", blob, off)
        off += 9

        def read_floats(count, what):
            nonlocal off
            nbytes = count * 8
            if off + nbytes > len(blob):
                raise FileFormatError(
                    f"truncated {what}: expected {off + nbytes} bytes, file has {len(blob)}",
                    path=path,
                    offset=off,
                )
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(n, 3).copy()
            off += nbytes
            if not np.isfinite(arr).all():
                bad = int(np.nonzero(~np.isfinite(arr).all(axis=1))[0][0])
                raise FileFormatError(f"non-finite value in {what} row {bad}", path=path, offset=off)
            return arr

        positions = read_floats(n * 3, "positions")
        flow = read_floats(n * 3, "flow block") if has_gt else None
        return positions, flow

    x, gt = read_block()
    y, _ = read_block()
    meta = {}
    if off < len(blob):
        if blob[off : off + 4] != _META_MAGIC:
            raise FileFormatError("trailing bytes are not a metadata table", path=path, offset=off)
        off += 4
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        for _ in range(count):
            klen, vlen = struct.unpack_from("<II", blob, off)
            off += 8
            if off + klen + vlen > len(blob):
                raise FileFormatError(
                    f"truncated metadata: expected {off + klen + vlen} bytes, file has {len(blob)}",
                    path=path,
                    offset=off,
                )
            key = blob[off : off + klen].decode("utf-8")
            off += klen
            meta[key] = blob[off : off + vlen].decode("utf-8")
            off += vlen
        if off != len(blob):
            raise FileFormatError("trailing bytes after metadata", path=path, offset=off)
    return FramePairRecord(
        frame_x=ParticleFrame(x),
        frame_y=ParticleFrame(y),
        gt_flow=FlowField(gt) if gt is not None else None,
        metadata=meta,
    )


def save_pair(record, path):
    """Write a record; extension ``.ffpb`` selects binary, anything else text."""
    if str(path).endswith(".ffpb"):
        save_pair_binary(record, path)
    else:
        save_pair_text(record, path)


def load_pair(path):
    """Read a record saved by :func:`save_pair` (sniffs binary magic)."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == _MAGIC:
        return load_pair_binary(path)
    return load_pair_text(path)


# ---------------------------------------------------------------------------
# flow-only files reuse the frame block: one frame plus its predicted flow


def save_flow(frame, flow, path):
    vec = flow.vectors if hasattr(flow, "vectors") else np.asarray(flow)
    record = FramePairRecord(
        frame_x=frame, frame_y=frame, gt_flow=FlowField(vec), metadata={"content": "flow"}
    )
    save_pair(record, path)


def load_flow(path):
    record = load_pair(path)
    if record.gt_flow is None:
        raise FileFormatError("flow file has no flow block", path=path)
    return record.frame_x, record.gt_flow


# ---------------------------------------------------------------------------
# flat key=value config with [section] headers


def parse_config_text(text, path="<config>"):
    sections = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in s:
            raise FileFormatError(f"expected key=value, got {s!r}", path=path, line=lineno)
        if current is None:
            raise FileFormatError("key=value outside any [section]", path=path, line=lineno)
        key, _, value = s.partition("=")
        sections[current][key.strip()] = value.strip()
    return sections


def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), path=path)


def apply_config(obj, values):
    """Coerce string config values onto a dataclass-like object's fields."""
    for key, raw in values.items():
        if not hasattr(obj, key):
            raise FileFormatError(f"unknown config key {key!r} for {type(obj).__name__}")
        cur = getattr(obj, key)
        if isinstance(cur, bool):
            setattr(obj, key, raw.lower() in ("1", "true", "yes"))
        elif isinstance(cur, int):
            setattr(obj, key, int(raw))
        elif isinstance(cur, float):
            setattr(obj, key, float(raw))
        else:
            setattr(obj, key, raw)
    return obj
