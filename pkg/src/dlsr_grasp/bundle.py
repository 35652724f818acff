"""Versioned binary container for trained artifacts.

Layout (all integers little-endian)::

    magic      8 bytes  b"DLSRBNDL"
    version    u32
    count      u32      number of sections
    section*   name_len u16, name (utf-8), kind u8 (0 = float64 matrix, 1 = text),
               rows u64, cols u64, payload

A matrix payload is ``rows * cols`` float64 values, row-major. A text payload
is ``rows`` bytes of utf-8 (``cols`` is 0). The dictionary is stored
atom-major, one atom per row.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dictlearn import LearnedDictionary
from .errors import BadMagic, BundleError, TruncatedSection, VersionMismatch
from .features import EncoderConfig, FeatureExtractor
from .model import LinearModel
from .whitening import Whitener

MAGIC = b"DLSRBNDL"
FORMAT_VERSION = 1
MATRIX, TEXT = 0, 1
_HEAD = struct.Struct("<8sII")
_SEC = struct.Struct("<BQQ")


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


@dataclass
class ArtifactBundle:
    dictionary: LearnedDictionary
    whitener: Whitener
    encoder: Optional[EncoderConfig] = None
    model: Optional[LinearModel] = None
    manifest: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def extractor(self) -> FeatureExtractor:
        if self.encoder is None:
            raise BundleError("bundle carries no encoder configuration")
        return FeatureExtractor(self.dictionary.atoms, self.whitener, self.encoder, self.dictionary.centroids)


def _row(v):
    return np.asarray(v, dtype=float).reshape(1, -1)


def _sections(b: ArtifactBundle):
    head = {"encoder": None if b.encoder is None else {"kind": b.encoder.kind, "sparsity": b.encoder.sparsity},
            "provenance": b.manifest}
    yield "manifest", canonical_json(head)
    yield "dictionary", b.dictionary.atoms.T
    if b.dictionary.centroids is not None:
        yield "centroids", b.dictionary.centroids.T
    yield "whitener.mean", _row(b.whitener.mean)
    yield "whitener.transform", np.asarray(b.whitener.transform, dtype=float)
    yield "whitener.params", _row([b.whitener.epsilon, b.whitener.n_fit])
    if b.model is not None:
        yield "model.weights", _row(b.model.weights)
        yield "model.params", _row([b.model.bias, b.model.C])
        yield "model.mean", _row(b.model.mean)
        yield "model.scale", _row(b.model.scale)


def dumps(b: ArtifactBundle) -> bytes:
    secs = list(_sections(b))
    out = [_HEAD.pack(MAGIC, b.version, len(secs))]
    for name, value in secs:
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        if isinstance(value, str):
            payload = value.encode("utf-8")
            out.append(_SEC.pack(TEXT, len(payload), 0))
        else:
            a = np.ascontiguousarray(value, dtype="<f8")
            out.append(_SEC.pack(MATRIX, a.shape[0], a.shape[1]))
            payload = a.tobytes()
        out.append(payload)
    return b"".join(out)


def save_bundle(b: ArtifactBundle, path):
    with open(path, "wb") as fh:
        fh.write(dumps(b))


def _take(buf, pos, n, what):
    if pos + n > len(buf):
        raise TruncatedSection(f"{what}: need {n} bytes at offset {pos}, file has {len(buf) - pos}")
    return buf[pos:pos + n], pos + n


def read_sections(buf: bytes):
    """Raw ``{name: ndarray | str}`` plus the format version."""
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise BadMagic("not an artifact bundle (bad magic)")
    head, pos = _take(buf, 0, _HEAD.size, "header")
    _, version, count = _HEAD.unpack(head)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"bundle format version {version}, this build reads {FORMAT_VERSION}")
    secs = {}
    for i in range(count):
        raw, pos = _take(buf, pos, 2, f"section {i} name length")
        (nlen,) = struct.unpack("<H", raw)
        raw, pos = _take(buf, pos, nlen, f"section {i} name")
        name = raw.decode("utf-8")
        raw, pos = _take(buf, pos, _SEC.size, f"section {name!r} header")
        kind, rows, cols = _SEC.unpack(raw)
        if kind == TEXT:
            raw, pos = _take(buf, pos, rows, f"section {name!r}")
            secs[name] = raw.decode("utf-8")
        elif kind == MATRIX:
            raw, pos = _take(buf, pos, rows * cols * 8, f"section {name!r}")
            secs[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(float)
        else:
            raise BundleError(f"section {name!r} has unknown kind {kind}")
    if pos != len(buf):
        raise BundleError(f"{len(buf) - pos} trailing bytes after the last section")
    return secs, version


def loads(buf: bytes) -> ArtifactBundle:
    secs, version = read_sections(buf)
    try:
        head = json.loads(secs["manifest"])
        atoms = secs["dictionary"].T.copy()
        cent = secs["centroids"].T.copy() if "centroids" in secs else None
        eps, n_fit = secs["whitener.params"][0]
        wh = Whitener(secs["whitener.mean"][0].copy(), secs["whitener.transform"].copy(), float(eps), int(n_fit))
    except KeyError as exc:
        raise BundleError(f"bundle lacks required section {exc}") from None
    enc = None if head.get("encoder") is None else EncoderConfig(**head["encoder"])
    model = None
    if "model.weights" in secs:
        bias, C = secs["model.params"][0]
        model = LinearModel(secs["model.weights"][0].copy(), float(bias), float(C),
                            secs["model.mean"][0].copy(), secs["model.scale"][0].copy())
    return ArtifactBundle(LearnedDictionary(atoms, cent), wh, enc, model, head.get("provenance", {}), version)


def load_bundle(path) -> ArtifactBundle:
    with open(path, "rb") as fh:
        return loads(fh.read())
