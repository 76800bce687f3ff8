"""Versioned binary feature archive (magic TKFA, little-endian).

Header: magic, format version u32.  Then one record per utterance:
id length u32, UTF-8 id, T u32, D u32, stage tag u8, row-major float32.
"""

import struct

import numpy as np

from .errors import ConfigError
from .frontend import FeatureSequence, Stage

ARCHIVE_MAGIC = b"TKFA"
ARCHIVE_VERSION = 1

_STAGE_TAGS = {s: i for i, s in enumerate(Stage)}
_TAG_STAGES = {i: s for s, i in _STAGE_TAGS.items()}


def save_archive(sequences, path):
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        f.write(struct.pack("<I", ARCHIVE_VERSION))
        for seq in sequences:
            ident = seq.utterance_id.encode("utf-8")
            T, D = seq.frames.shape
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<IIB", T, D, _STAGE_TAGS[seq.stage]))
            f.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())


def load_archive(path):
    """Read every record, returned as an insertion-ordered dict by id."""
    out = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != ARCHIVE_MAGIC:
            raise ConfigError(f"{path}: not a feature archive (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != ARCHIVE_VERSION:
            raise ConfigError(f"{path}: unsupported archive version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            (id_len,) = struct.unpack("<I", head)
            ident = f.read(id_len).decode("utf-8")
            T, D, tag = struct.unpack("<IIB", f.read(9))
            data = np.frombuffer(f.read(4 * T * D), dtype="<f4")
            frames = data.reshape(T, D).astype(np.float64)
            out[ident] = FeatureSequence(ident, frames, _TAG_STAGES[tag])
    return out
