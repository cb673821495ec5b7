"""Netpbm image/label files, manifests, mini-batches and a synthetic dataset."""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import VOID


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PPM / PGM

_WS = b" \t\r\n\v\f"


def _header(buf: bytes, magic: bytes, path):
    """Parse magic, width, height, maxval. Returns (width, height, payload offset)."""
    if buf[:2] != magic:
        raise DataError(f"{path}: expected magic {magic.decode()} at byte 0, found {buf[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and (buf[pos] in _WS or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < len(buf) and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos] not in _WS and buf[pos] != ord("#"):
            pos += 1
        tok = buf[start:pos]
        if not tok:
            raise DataError(f"{path}: header ends early at byte {start}")
        if not tok.isdigit():
            raise DataError(f"{path}: bad header field {tok!r} at byte {start}")
        fields.append(int(tok))
    if pos >= len(buf) or buf[pos] not in _WS:
        raise DataError(f"{path}: missing whitespace after header at byte {pos}")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DataError(f"{path}: non-positive size {width}x{height}")
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval} unsupported, need 255")
    return width, height, pos + 1


def _read(path, magic, channels):
    buf = Path(path).read_bytes()
    w, h, off = _header(buf, magic, path)
    need = w * h * channels
    if len(buf) - off < need:
        raise DataError(f"{path}: payload short, {len(buf) - off} of {need} bytes after byte {off}")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1)


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _as_u8(arr, ndim, what):
    arr = np.asarray(arr)
    if arr.ndim != ndim or (ndim == 3 and arr.shape[2] != 3):
        raise DataError(f"{what} has shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255):
            raise DataError(f"{what} values outside [0, 255]")
        arr = arr.astype(np.uint8)
    return np.ascontiguousarray(arr)


def write_ppm(path, image):
    image = _as_u8(image, 3, "image")
    h, w = image.shape[:2]
    atomic_write_bytes(path, b"P6\n%d %d\n255\n" % (w, h) + image.tobytes())


def write_pgm(path, labels):
    labels = _as_u8(labels, 2, "label map")
    h, w = labels.shape
    atomic_write_bytes(path, b"P5\n%d %d\n255\n" % (w, h) + labels.tobytes())


# ---------------------------------------------------------------------------
# Manifests


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.image.shape[:2] != self.labels.shape:
            raise DataError(f"image {self.image.shape[:2]} and labels {self.labels.shape} differ in size")


@dataclass
class Manifest:
    entries: list = field(default_factory=list)   # (image path, label path), absolute
    split: str = "train"
    path: Path | None = None

    def __len__(self):
        return len(self.entries)

    def load(self, index: int) -> Sample:
        img, lab = self.entries[index]
        return Sample(read_ppm(img), read_pgm(lab))

    def load_all(self) -> list:
        return [self.load(i) for i in range(len(self))]


SPLITS = ("train", "val")


def read_manifest(path, split=None) -> Manifest:
    """One ``image<TAB>labels`` line per sample, relative to the manifest's directory.

    The split is taken from ``split`` or else from the file name stem.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    entries = []
    for no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{no}: expected two tab-separated paths")
        pair = tuple(str((base / p).resolve()) for p in parts)
        for p in pair:
            if not os.access(p, os.R_OK):
                raise DataError(f"{path}:{no}: cannot read {p}")
        entries.append(pair)
    if split is None:
        split = path.stem if path.stem in SPLITS else "train"
    return Manifest(entries, split, path)


def write_manifest(path, manifest: Manifest):
    base = Path(path).parent.resolve()
    lines = [f"{os.path.relpath(a, base)}\t{os.path.relpath(b, base)}" for a, b in manifest.entries]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def make_batches(n_or_manifest, batch_size: int, seed: int, epoch: int) -> list:
    """Shuffled index batches; the permutation depends only on (seed, epoch)."""
    n = n_or_manifest if isinstance(n_or_manifest, int) else len(n_or_manifest)
    if batch_size < 1:
        raise DataError(f"batch size must be at least 1, got {batch_size}")
    if n == 0:
        raise DataError("empty manifest")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size].tolist() for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# Synthetic shapes

BACKGROUND = 0
MIN_LABEL_FRACTION = 0.01


_FIXED_COLORS = [(40, 40, 40), (220, 60, 60), (60, 190, 70), (70, 90, 230), (230, 210, 60),
                 (200, 70, 210), (60, 210, 220), (240, 150, 40)]


def base_colors(num_labels: int) -> np.ndarray:
    """Distinct colours per label, label 0 being the background.

    Fixed for a given label count so that every split shares one palette;
    labels past the fixed table get seeded random colours kept apart in L1.
    """
    cols = [np.array(c) for c in _FIXED_COLORS[:num_labels]]
    rng = np.random.default_rng(7919)
    while len(cols) < num_labels:
        c = rng.integers(0, 256, 3)
        if min(np.abs(c - p).sum() for p in cols) >= 60:
            cols.append(c)
    return np.array(cols, dtype=np.float64)


def _draw_sample(rng, size, num_labels):
    labels = np.full((size, size), BACKGROUND, dtype=np.int64)
    rows, cols = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(1, 4)):
        lab = int(rng.integers(1, num_labels))
        h, w = rng.integers(size // 6, size // 2, 2)
        top, left = rng.integers(0, size - h), rng.integers(0, size - w)
        if rng.random() < 0.5:
            mask = (rows >= top) & (rows < top + h) & (cols >= left) & (cols < left + w)
        else:
            cy, cx = top + h / 2, left + w / 2
            mask = ((rows + 0.5 - cy) / (h / 2)) ** 2 + ((cols + 0.5 - cx) / (w / 2)) ** 2 <= 1.0
        labels[mask] = lab
    return labels


def void_boundary(labels: np.ndarray) -> np.ndarray:
    """Mark a 1-pixel ring as void: pixels touching a 4-neighbour of lower label."""
    edge = np.zeros(labels.shape, dtype=bool)
    edge[1:, :] |= labels[1:, :] > labels[:-1, :]
    edge[:-1, :] |= labels[:-1, :] > labels[1:, :]
    edge[:, 1:] |= labels[:, 1:] > labels[:, :-1]
    edge[:, :-1] |= labels[:, :-1] > labels[:, 1:]
    out = labels.copy()
    out[edge] = VOID
    return out


def synth_samples(count, size, num_labels, noise_sd, seed, max_tries=100):
    if num_labels < 2:
        raise DataError("need at least two labels (label 0 is background)")
    if count < 1 or size < 8:
        raise DataError("need count >= 1 and size >= 8")
    colors = base_colors(num_labels)
    for attempt in range(max_tries):
        rng = np.random.default_rng([seed, attempt])
        clean = [_draw_sample(rng, size, num_labels) for _ in range(count)]
        hist = np.bincount(np.concatenate([c.ravel() for c in clean]), minlength=num_labels)
        if np.all(hist / hist.sum() >= MIN_LABEL_FRACTION):
            break
    else:
        raise DataError(f"could not cover every label after {max_tries} draws")
    out = []
    for lab in clean:
        img = colors[lab]
        if noise_sd > 0:
            img = img + rng.normal(0.0, noise_sd, img.shape)
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        out.append(Sample(img, void_boundary(lab).astype(np.uint8)))
    return out


def synth_dataset(out_dir, count, size, num_labels, noise_sd, seed, split="train") -> Manifest:
    """Write ``count`` PPM/PGM pairs and ``<split>.txt`` into out_dir."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = tempfile.TemporaryFile(dir=out)
        probe.close()
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    samples = synth_samples(count, size, num_labels, noise_sd, seed)
    entries = []
    for k, s in enumerate(samples):
        img_p, lab_p = out / f"{split}_{k:04d}.ppm", out / f"{split}_{k:04d}.pgm"
        write_ppm(img_p, s.image)
        write_pgm(lab_p, s.labels)
        entries.append((str(img_p.resolve()), str(lab_p.resolve())))
    man = Manifest(entries, split, out / f"{split}.txt")
    write_manifest(man.path, man)
    return man
