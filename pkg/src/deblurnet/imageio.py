"""PNG / PGM reading and writing with values mapped linearly to [0, 1]."""

import os

import numpy as np
from PIL import Image

LUMA = np.array([0.299, 0.587, 0.114])


def _read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval, separated by whitespace / comments
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P5":
        raise ValueError(f"{path}: only binary PGM (P5) is supported")
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return arr.reshape(h, w).astype(np.float64) / maxval


def read_image(path):
    """Read PNG or PGM as float array in [0, 1]; color stays (H, W, 3)."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if path.lower().endswith(".pgm"):
        return _read_pgm(path)
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return arr / 65535.0
        if im.mode in ("L", "P", "1", "LA"):
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        arr = np.asarray(im.convert("RGB"))
        if arr.dtype == np.uint16:
            return arr.astype(np.float64) / 65535.0
        return arr.astype(np.float64) / 255.0


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img[..., :3] @ LUMA
    return img


def read_gray(path):
    return to_gray(read_image(path))


def _quantize(img, bits):
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def write_png(path, img, bits=8):
    img = np.asarray(img, dtype=np.float64)
    q = _quantize(img, bits)
    if bits == 16 and img.ndim != 2:
        raise ValueError("16-bit output supports grayscale only")
    Image.fromarray(q).save(path)


def write_pgm(path, img, bits=8):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM output must be grayscale")
    q = _quantize(img, bits)
    maxval = 255 if bits == 8 else 65535
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode())
        fh.write(q.astype(">u2").tobytes() if bits == 16 else q.tobytes())


def write_image(path, img, bits=8):
    if path.lower().endswith(".pgm"):
        write_pgm(path, img, bits)
    else:
        write_png(path, img, bits)


def kernel_to_display(kernel):
    k = np.asarray(kernel, dtype=np.float64)
    m = k.max()
    return k / m if m > 0 else k
