"""Synthetic weakly-labeled pedestrian-style dataset with planted locations.

Each sample is a noisy background with a body trunk placed at a jittered
offset and scale; positive attributes render distinct colored primitives
at jittered positions inside a vertical band of the body, and the true
centers of every localizable attribute are recorded. Image sizes vary so
downstream pooling has to cope with arbitrary resolutions.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .imageio import read_ppm, to_u8, write_ppm
from .kvfile import format_kv, parse_kv
from .tensor import FormatError

KINDS = ("localizable", "global")

# Vertical extent of each primitive as a fraction of the body height; an
# attribute's band must be at least this tall to place the primitive.
RENDERER_EXTENT = {
    "head-blob": 0.10,
    "head-bar": 0.06,
    "side-blob": 0.14,
    "leg-stripe": 0.18,
    "torso-color": 0.0,
    "global-tint": 0.0,
    "rare-mark": 0.08,
    "foot-dots": 0.08,
}


@dataclass(frozen=True)
class Attribute:
    name: str
    kind: str
    renderer: str
    rate: float
    k: int = 1
    band: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if self.renderer not in RENDERER_EXTENT:
            raise ValueError(f"{self.name}: unknown renderer {self.renderer!r}")
        if not 0.0 < self.rate <= 1.0:
            raise ValueError(f"{self.name}: rate must lie in (0, 1], got {self.rate}")
        if self.k not in (1, 2):
            raise ValueError(f"{self.name}: candidate count k must be 1 or 2, got {self.k}")
        lo, hi = self.band
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"{self.name}: band must satisfy 0 <= lo <= hi <= 1, got {self.band}")
        if hi - lo < RENDERER_EXTENT[self.renderer]:
            raise ValueError(
                f"{self.name}: band {self.band} too small to place a "
                f"{self.renderer} primitive (needs {RENDERER_EXTENT[self.renderer]})"
            )


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError("attribute names must be unique")
        if not names:
            raise ValueError("schema must contain at least one attribute")

    def __len__(self):
        return len(self.attributes)

    @property
    def names(self):
        return [a.name for a in self.attributes]

    def candidate_count(self, name):
        for a in self.attributes:
            if a.name == name:
                return a.k
        raise KeyError(name)


def default_schema():
    return AttributeSchema(
        (
            Attribute("hat", "localizable", "head-blob", 0.35, 1, (0.00, 0.14)),
            Attribute("glasses", "localizable", "head-bar", 0.40, 1, (0.10, 0.26)),
            Attribute("bag", "localizable", "side-blob", 0.40, 1, (0.25, 0.80)),
            Attribute("tights", "localizable", "leg-stripe", 0.35, 1, (0.60, 0.95)),
            Attribute("dark", "global", "global-tint", 0.50),
            Attribute("warm_torso", "global", "torso-color", 0.45, 1, (0.25, 0.55)),
            Attribute("vmark", "localizable", "rare-mark", 0.05, 1, (0.22, 0.40)),
            Attribute("shoes", "localizable", "foot-dots", 0.50, 2, (0.90, 1.00)),
        )
    )


def schema_to_text(schema):
    pairs = [("count", str(len(schema)))]
    for i, a in enumerate(schema.attributes):
        pairs += [
            (f"attr{i}.name", a.name),
            (f"attr{i}.kind", a.kind),
            (f"attr{i}.renderer", a.renderer),
            (f"attr{i}.rate", repr(a.rate)),
            (f"attr{i}.k", str(a.k)),
            (f"attr{i}.band", f"{a.band[0]!r}:{a.band[1]!r}"),
        ]
    return format_kv(pairs)


def schema_from_text(text):
    kv = parse_kv(text)
    try:
        count = int(kv["count"])
        attrs = []
        for i in range(count):
            lo, hi = (float(p) for p in kv[f"attr{i}.band"].split(":"))
            attrs.append(
                Attribute(
                    name=kv[f"attr{i}.name"],
                    kind=kv[f"attr{i}.kind"],
                    renderer=kv[f"attr{i}.renderer"],
                    rate=float(kv[f"attr{i}.rate"]),
                    k=int(kv[f"attr{i}.k"]),
                    band=(lo, hi),
                )
            )
    except KeyError as exc:
        raise FormatError(f"schema missing key {exc}") from None
    except ValueError as exc:
        raise FormatError(f"schema: {exc}") from None
    return AttributeSchema(tuple(attrs))


@dataclass
class SyntheticSample:
    image: np.ndarray  # 3×H×W float in [0, 1]
    labels: np.ndarray  # (L,) of 0/1
    locations: dict = field(default_factory=dict)  # name -> [(y, x), ...]
    body_box: tuple = None  # (y0, x0, y1, x1), generation-time only


# -- primitive painters --------------------------------------------------------


def _fill_disc(image, cy, cx, radius, color):
    _, h, w = image.shape
    y0, y1 = max(0, int(cy - radius)), min(h, int(cy + radius) + 1)
    x0, x1 = max(0, int(cx - radius)), min(w, int(cx + radius) + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    for c in range(3):
        image[c, y0:y1, x0:x1][mask] = color[c]


def _fill_rect(image, y0, x0, y1, x1, color):
    _, h, w = image.shape
    y0, y1 = max(0, int(y0)), min(h, int(y1))
    x0, x1 = max(0, int(x0)), min(w, int(x1))
    if y0 >= y1 or x0 >= x1:
        return
    image[:, y0:y1, x0:x1] = np.asarray(color)[:, None, None]


def _band_center_y(rng, attr, body):
    y0, _, y1, _ = body
    bh = y1 - y0
    extent = RENDERER_EXTENT[attr.renderer]
    lo = attr.band[0] + extent / 2.0
    hi = attr.band[1] - extent / 2.0
    frac = lo if hi <= lo else rng.uniform(lo, hi)
    return y0 + frac * bh


def _clamp_point(y, x, h, w):
    return (float(min(max(y, 0.0), h - 1.0)), float(min(max(x, 0.0), w - 1.0)))


def _render(attr, image, body, rng):
    """Draw one positive attribute; returns its k ground-truth centers
    (empty for global attributes)."""
    _, h, w = image.shape
    y0, x0, y1, x1 = body
    bh, bw = y1 - y0, x1 - x0
    cx_body = (x0 + x1) / 2.0

    if attr.renderer == "head-blob":
        cy = _band_center_y(rng, attr, body)
        cx = cx_body + rng.uniform(-0.15, 0.15) * bw
        r = max(2.0, 0.05 * bh)
        _fill_disc(image, cy, cx, r, (0.95, 0.15, 0.10))
        return [_clamp_point(cy, cx, h, w)]

    if attr.renderer == "head-bar":
        cy = _band_center_y(rng, attr, body)
        cx = cx_body + rng.uniform(-0.08, 0.08) * bw
        half_w = max(2.0, 0.28 * bw)
        half_h = max(1.0, 0.022 * bh)
        _fill_rect(image, cy - half_h, cx - half_w, cy + half_h, cx + half_w, (0.05, 0.10, 0.85))
        return [_clamp_point(cy, cx, h, w)]

    if attr.renderer == "side-blob":
        cy = _band_center_y(rng, attr, body)
        side = 1.0 if rng.random() < 0.5 else -1.0
        cx = cx_body + side * (0.5 * bw + rng.uniform(0.0, 0.12) * bw)
        r = max(2.5, 0.065 * bh)
        _fill_disc(image, cy, cx, r, (0.10, 0.85, 0.15))
        return [_clamp_point(cy, cx, h, w)]

    if attr.renderer == "leg-stripe":
        cy = _band_center_y(rng, attr, body)
        half_h = max(2.0, 0.08 * bh)
        half_w = max(1.0, 0.30 * bw)
        cx = cx_body + rng.uniform(-0.05, 0.05) * bw
        _fill_rect(image, cy - half_h, cx - half_w, cy + half_h, cx + half_w, (0.85, 0.10, 0.80))
        return [_clamp_point(cy, cx, h, w)]

    if attr.renderer == "torso-color":
        ty0 = y0 + attr.band[0] * bh
        ty1 = y0 + attr.band[1] * bh
        _fill_rect(image, ty0, x0, ty1, x1, (0.90, 0.50, 0.05))
        return []

    if attr.renderer == "global-tint":
        image *= 0.55
        return []

    if attr.renderer == "rare-mark":
        cy = _band_center_y(rng, attr, body)
        cx = cx_body + rng.uniform(-0.10, 0.10) * bw
        r = max(2.0, 0.04 * bh)
        _fill_disc(image, cy, cx, r, (0.95, 0.90, 0.10))
        return [_clamp_point(cy, cx, h, w)]

    if attr.renderer == "foot-dots":
        cy = _band_center_y(rng, attr, body)
        r = max(2.0, 0.045 * bh)
        dx = 0.22 * bw + rng.uniform(0.0, 0.08) * bw
        pts = []
        for side in (-1.0, 1.0):
            cx = cx_body + side * dx
            _fill_disc(image, cy, cx, r, (0.10, 0.90, 0.90))
            pts.append(_clamp_point(cy, cx, h, w))
        return pts

    raise ValueError(f"unknown renderer {attr.renderer!r}")


def generate(schema, count, size_range=(64, 128), seed=0):
    """Generate ``count`` samples; sample i draws from a stream keyed by
    (seed, i), so parallel or resumed generation stays reproducible."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    min_h, max_h = size_range
    if min_h < 32 or max_h < min_h:
        raise ValueError(f"bad size range {size_range}, heights must be >= 32")
    samples = []
    for i in range(count):
        rng = np.random.default_rng((seed, i))
        h = int(rng.integers(min_h, max_h + 1))
        w = max(16, int(round(h / 2)))
        image = rng.uniform(0.0, 0.25, size=(3, h, w))

        bh = rng.uniform(0.62, 0.82) * h
        bw = rng.uniform(0.34, 0.52) * w
        cy = rng.uniform(0.42, 0.58) * h
        cx = rng.uniform(0.32, 0.68) * w
        y0 = min(max(cy - bh / 2.0, 0.0), h - bh)
        x0 = min(max(cx - bw / 2.0, 0.0), w - bw)
        body = (y0, x0, y0 + bh, x0 + bw)
        _fill_rect(image, *body, color=(0.46, 0.46, 0.48))

        # Presence first, then painting with whole-image tints last, so a
        # tint darkens every primitive regardless of schema order.
        labels = np.array([int(rng.random() < a.rate) for a in schema.attributes], dtype=np.int64)
        locations = {}
        deferred = []
        for idx, attr in enumerate(schema.attributes):
            if not labels[idx]:
                continue
            if attr.renderer == "global-tint":
                deferred.append(attr)
                continue
            centers = _render(attr, image, body, rng)
            if attr.kind == "localizable":
                locations[attr.name] = centers
        for attr in deferred:
            _render(attr, image, body, rng)
        samples.append(SyntheticSample(image, labels, locations, body))
    return samples


# -- on-disk layout -------------------------------------------------------------


def _image_name(i):
    return f"images/sample_{i:05d}.ppm"


def write_dataset(samples, directory, schema):
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    with open(os.path.join(directory, "schema.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(schema_to_text(schema))
    header = "image," + ",".join(f"label_{i}" for i in range(len(schema)))
    index_lines = [header]
    loc_lines = ["image,attribute,rank,y,x"]
    for i, s in enumerate(samples):
        name = _image_name(i)
        write_ppm(os.path.join(directory, name), s.image)
        index_lines.append(name + "," + ",".join(str(int(v)) for v in s.labels))
        for attr_name, centers in s.locations.items():
            for rank, (y, x) in enumerate(centers, start=1):
                loc_lines.append(f"{name},{attr_name},{rank},{y!r},{x!r}")
    with open(os.path.join(directory, "index.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(index_lines) + "\n")
    with open(os.path.join(directory, "locations.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(loc_lines) + "\n")


def read_dataset(directory):
    """Load a dataset directory; returns (samples, schema).

    The index is strict: exactly L label columns per row, every referenced
    image must exist, and malformed rows are rejected with their line number.
    """
    schema_path = os.path.join(directory, "schema.txt")
    if not os.path.exists(schema_path):
        raise FormatError(f"missing schema.txt in {directory}")
    with open(schema_path, "r", encoding="utf-8") as fh:
        schema = schema_from_text(fh.read())
    num = len(schema)

    index_path = os.path.join(directory, "index.csv")
    if not os.path.exists(index_path):
        raise FormatError(f"missing index.csv in {directory}")
    with open(index_path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    expected_header = "image," + ",".join(f"label_{i}" for i in range(num))
    if not lines or lines[0] != expected_header:
        raise FormatError(f"index.csv line 1: bad header, expected {expected_header!r}")

    samples = []
    by_name = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 1 + num:
            raise FormatError(f"index.csv line {lineno}: expected {1 + num} columns, got {len(parts)}")
        name = parts[0]
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise FormatError(f"index.csv line {lineno}: missing image file {name!r}")
        try:
            labels = np.array([int(p) for p in parts[1:]], dtype=np.int64)
        except ValueError:
            raise FormatError(f"index.csv line {lineno}: non-integer label") from None
        if not np.all((labels == 0) | (labels == 1)):
            raise FormatError(f"index.csv line {lineno}: labels must be 0 or 1")
        sample = SyntheticSample(read_ppm(path), labels, {})
        by_name[name] = sample
        samples.append(sample)

    loc_path = os.path.join(directory, "locations.csv")
    if os.path.exists(loc_path):
        with open(loc_path, "r", encoding="utf-8") as fh:
            loc_lines = fh.read().splitlines()
        if not loc_lines or loc_lines[0] != "image,attribute,rank,y,x":
            raise FormatError("locations.csv line 1: bad header")
        for lineno, line in enumerate(loc_lines[1:], start=2):
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise FormatError(f"locations.csv line {lineno}: expected 5 columns")
            name, attr_name, _rank, y, x = parts
            if name not in by_name:
                raise FormatError(f"locations.csv line {lineno}: unknown image {name!r}")
            try:
                point = (float(y), float(x))
            except ValueError:
                raise FormatError(f"locations.csv line {lineno}: bad coordinates") from None
            by_name[name].locations.setdefault(attr_name, []).append(point)
    return samples, schema


def quantize_like_disk(samples):
    """Round images to the 8-bit grid the PPM codec stores, in place."""
    for s in samples:
        s.image = to_u8(s.image).astype(np.float64) / 255.0
    return samples
