"""Binary PPM/PGM codecs, bilinear resizing, and heatmap exports.

Images travel as float64 arrays in [0, 1]: color as 3×H×W, grayscale maps
as H×W. On disk everything is 8-bit binary netpbm (P5/P6, maxval 255).
"""

import numpy as np

from .tensor import FormatError


def to_u8(values):
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def _read_header_tokens(data, count):
    # netpbm headers: ASCII tokens separated by whitespace, # comments to EOL.
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise FormatError("truncated netpbm header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    return tokens, pos + 1  # single whitespace byte ends the header


def write_ppm(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm: expected 3×H×W, got shape {image.shape}")
    _, h, w = image.shape
    payload = to_u8(image).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(payload)


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, start = _read_header_tokens(data, 4)
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary PPM (P6) file: magic {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}")
    need = w * h * 3
    raw = data[start : start + need]
    if len(raw) != need:
        raise FormatError(f"PPM payload has {len(raw)} bytes, expected {need}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, values):
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"write_pgm: expected H×W, got shape {values.shape}")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(to_u8(values).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, start = _read_header_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (P5) file: magic {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    raw = data[start : start + w * h]
    if len(raw) != w * h:
        raise FormatError(f"PGM payload has {len(raw)} bytes, expected {w * h}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# -- resizing ----------------------------------------------------------------


def _axis_coeffs(n_out, n_in):
    # Pixel-center mapping; resizing to the same extent is an exact identity.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(values, out_shape):
    """Bilinear resize of the trailing two axes of an (..., H, W) array."""
    values = np.asarray(values, dtype=np.float64)
    ho, wo = out_shape
    if ho < 1 or wo < 1:
        raise ValueError(f"bilinear_resize: bad output shape {out_shape}")
    ylo, yhi, fy = _axis_coeffs(ho, values.shape[-2])
    xlo, xhi, fx = _axis_coeffs(wo, values.shape[-1])
    rows = np.take(values, ylo, axis=-2) * (1.0 - fy)[:, None] + np.take(values, yhi, axis=-2) * fy[:, None]
    return np.take(rows, xlo, axis=-1) * (1.0 - fx) + np.take(rows, xhi, axis=-1) * fx


def load_image(path, longest_side=None):
    """Read a P6 PPM as a 3×H×W float image in [0, 1].

    With ``longest_side`` set, the image is rescaled so its longest side
    equals the target with the aspect ratio preserved (no warping); the
    short side rounds as floor(short * scale + 0.5).
    """
    image = read_ppm(path)
    if longest_side is None:
        return image
    _, h, w = image.shape
    long_in, short_in = (h, w) if h >= w else (w, h)
    if long_in == longest_side:
        return image
    scale = longest_side / long_in
    short_out = max(1, int(np.floor(short_in * scale + 0.5)))
    out_hw = (longest_side, short_out) if h >= w else (short_out, longest_side)
    return bilinear_resize(image, out_hw)


# -- heatmap exports ----------------------------------------------------------


def write_possibility_pgm(path, heat):
    """Export a non-negative map with its peak mapped to 255."""
    heat = np.asarray(heat, dtype=np.float64)
    peak = heat.max()
    write_pgm(path, heat / peak if peak > 0 else heat)


def write_overlay_ppm(path, image, heat):
    """Blend the map as a red channel over the grayscale image, 50% each."""
    image = np.asarray(image, dtype=np.float64)
    heat = np.asarray(heat, dtype=np.float64)
    if image.shape[1:] != heat.shape:
        raise ValueError(f"overlay: image {image.shape[1:]} vs map {heat.shape}")
    peak = heat.max()
    norm = heat / peak if peak > 0 else heat
    gray = image.mean(axis=0)
    out = np.stack([0.5 * gray + 0.5 * norm, 0.5 * gray, 0.5 * gray])
    write_ppm(path, out)
