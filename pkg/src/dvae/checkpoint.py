"""Flat binary artifact files.

Checkpoint: magic "DVAE1\\0", a UTF-8 JSON header listing parameter names,
shapes and byte offsets (relative to the data section), then raw
little-endian float32 values. Latent cache: same layout with magic
"DLAT1\\0", item-major tensor data plus a per-item class label table.

The header is self-delimiting: the reader scans bytes for the matching
closing brace (string- and escape-aware), which is exact for UTF-8 JSON.
Writes go to a temp file in the target directory, then rename.
"""

import json
import os
import tempfile

import numpy as np

CHECKPOINT_MAGIC = b"DVAE1\x00"
LATENT_MAGIC = b"DLAT1\x00"


class FormatError(IOError):
    """File does not conform to the expected binary layout."""


def _json_end(buf, start):
    depth = 0
    in_str = False
    esc = False
    for i in range(start, len(buf)):
        b = buf[i]
        if in_str:
            if esc:
                esc = False
            elif b == 0x5C:  # backslash
                esc = True
            elif b == 0x22:  # quote
                in_str = False
        else:
            if b == 0x22:
                in_str = True
            elif b == 0x7B:  # {
                depth += 1
            elif b == 0x7D:  # }
                depth -= 1
                if depth == 0:
                    return i + 1
    raise FormatError("unterminated JSON header")


def _atomic_write(path, payload):
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _header_bytes(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(path, arrays, meta=None):
    """Write named float32 arrays; names sorted so bytes are reproducible."""
    names = sorted(arrays)
    entries = []
    blobs = []
    offset = 0
    for name in names:
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = {"meta": meta or {}, "params": entries}
    _atomic_write(path, CHECKPOINT_MAGIC + _header_bytes(header) + b"".join(blobs))


def _read_file(path, magic, kind):
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise FormatError(f"cannot read {kind} {path!r}: {e}") from e
    if not buf.startswith(magic):
        raise FormatError(f"{path!r} is not a {kind} (bad magic)")
    end = _json_end(buf, len(magic))
    header = json.loads(buf[len(magic):end].decode("utf-8"))
    return header, buf[end:]


def read_checkpoint(path):
    """Return ({name: float32 array}, meta)."""
    header, data = _read_file(path, CHECKPOINT_MAGIC, "checkpoint")
    arrays = {}
    for ent in header["params"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        a = np.frombuffer(data, dtype="<f4", count=n, offset=start)
        arrays[ent["name"]] = a.reshape(shape).copy()
    return arrays, header.get("meta", {})


def write_latent_cache(path, latents, labels, meta=None):
    """Item-major [n,d,h,w] float32 latents with integer class labels."""
    lat = np.ascontiguousarray(latents, dtype="<f4")
    if lat.ndim != 4:
        raise ValueError(f"latent cache expects [n,d,h,w], got shape {lat.shape}")
    labels = [int(x) for x in labels]
    if len(labels) != lat.shape[0]:
        raise ValueError(f"{len(labels)} labels for {lat.shape[0]} latents")
    n, d, h, w = lat.shape
    header = {"count": n, "d": d, "h": h, "w": w, "labels": labels, "meta": meta or {}}
    _atomic_write(path, LATENT_MAGIC + _header_bytes(header) + lat.tobytes())


def read_latent_cache(path):
    """Return (latents [n,d,h,w], labels [n], meta)."""
    header, data = _read_file(path, LATENT_MAGIC, "latent cache")
    n, d, h, w = header["count"], header["d"], header["h"], header["w"]
    lat = np.frombuffer(data, dtype="<f4", count=n * d * h * w).reshape(n, d, h, w).copy()
    labels = np.asarray(header["labels"], dtype=np.int64)
    return lat, labels, header.get("meta", {})
