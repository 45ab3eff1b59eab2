"""Versioned, checksummed single-file container plus small artifact writers.

Container layout: 6-byte magic, little-endian uint32 format version, 32-byte
SHA-256 of the payload, then the payload (torch-serialized dict restricted to
tensors/primitives so it loads with ``weights_only=True``).
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import os
import struct

import numpy as np
import torch
from PIL import Image

MAGIC = b"GGANC\x00"
FORMAT_VERSION = 1


class ContainerError(RuntimeError):
    pass


class ContainerVersionError(ContainerError):
    pass


class ContainerChecksumError(ContainerError):
    pass


def save_container(path: str, payload: dict, kind: str):
    body = {"format_version": FORMAT_VERSION, "kind": kind}
    body.update(payload)
    buf = _io.BytesIO()
    torch.save(body, buf)
    data = buf.getvalue()
    digest = hashlib.sha256(data).digest()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(digest)
        fh.write(data)
    os.replace(tmp, path)


def load_container(path: str, expected_kind: str = None) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    header = len(MAGIC) + 4 + 32
    if len(raw) < header or raw[:len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path} is not a container file")
    (version,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    if version != FORMAT_VERSION:
        raise ContainerVersionError(
            f"{path} has format version {version}, supported {FORMAT_VERSION}")
    digest = raw[len(MAGIC) + 4:header]
    data = raw[header:]
    if hashlib.sha256(data).digest() != digest:
        raise ContainerChecksumError(f"{path} failed its checksum (truncated or corrupt)")
    payload = torch.load(_io.BytesIO(data), map_location="cpu", weights_only=True)
    if expected_kind is not None and payload.get("kind") != expected_kind:
        raise ContainerError(
            f"{path} holds a {payload.get('kind')!r} container, expected {expected_kind!r}")
    return payload


def to_uint8(images) -> np.ndarray:
    """(N),C,H,W in [-1, 1] -> (N),H,W,C uint8."""
    arr = np.asarray(torch.as_tensor(images).detach().cpu().numpy(), dtype=np.float64)
    arr = np.clip((arr + 1.0) * 127.5, 0, 255)
    axes = (0, 2, 3, 1) if arr.ndim == 4 else (1, 2, 0)
    return np.round(arr.transpose(axes)).astype(np.uint8)


def save_image_grid(images, path: str, n_cols: int = None, pad: int = 2):
    """Tile a batch into one PNG."""
    tiles = to_uint8(images)
    if tiles.ndim == 3:
        tiles = tiles[None]
    n, h, w, _ = tiles.shape
    if n_cols is None:
        n_cols = int(np.ceil(np.sqrt(n)))
    n_rows = int(np.ceil(n / n_cols))
    canvas = np.full((n_rows * (h + pad) - pad, n_cols * (w + pad) - pad, 3),
                     255, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, n_cols)
        canvas[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = tiles[i]
    Image.fromarray(canvas, mode="RGB").save(path)


class LossCsvWriter:
    """Appends (step, term, value) rows, the loss-history wire format."""

    def __init__(self, path: str):
        self.path = path
        exists = os.path.exists(path)
        self._fh = open(path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if not exists:
            self._writer.writerow(["step", "term", "value"])

    def write_report(self, step: int, report):
        for name in report.TERMS:
            value = getattr(report, name)
            if value is not None:
                self._writer.writerow([step, name, repr(float(value))])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_matrix_csv(path: str, matrix, row_labels=None, col_labels=None):
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if col_labels is not None:
            writer.writerow([""] + list(col_labels))
        for i, row in enumerate(matrix):
            label = [row_labels[i]] if row_labels is not None else []
            writer.writerow(label + [repr(float(v)) for v in row])
