"""Synthetic tumour phantoms, MR-like noise models, and the PHTM1 file format.

Three classes of blob on a textured brain-like ellipse: filled disk, ring and
elongated ellipse. Slices are grouped by patient and splits never share a
patient. Every random draw comes from a PCG64 stream seeded with
``SeedSequence([seed, purpose, index])``, so a dataset is a pure function of
its seeds.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PRNG = "numpy PCG64 via SeedSequence([seed, stream, index])"
MAGIC = b"PHTM1"
SPLITS = ("train", "val", "test")

# stream tags
_PATIENT = 0xDA7A
_NOISE = 0x0153
_PERM = 0x7E57


def stream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, int(index)]))


@dataclass
class PhantomSpec:
    size: int = 32
    n_classes: int = 3
    # meningioma / glioma / pituitary frequencies of the original MR collection
    class_priors: tuple[float, ...] = (708 / 3064, 1426 / 3064, 930 / 3064)
    counts: tuple[int, int, int] = (600, 60, 200)
    slices_per_patient: tuple[int, int] = (4, 16)
    seed: int = 0

    def __post_init__(self):
        self.class_priors = tuple(float(p) for p in self.class_priors)
        self.counts = tuple(int(c) for c in self.counts)
        self.slices_per_patient = tuple(int(s) for s in self.slices_per_patient)
        if self.size < 16:
            raise ValueError(f"phantom size must be >= 16, got {self.size}")
        if self.n_classes != 3:
            raise ValueError("the phantom generator draws exactly 3 tumour classes")
        if len(self.class_priors) != self.n_classes or abs(sum(self.class_priors) - 1) > 1e-9:
            raise ValueError(f"class priors must be {self.n_classes} numbers summing to 1")
        if min(self.class_priors) < 0:
            raise ValueError("class priors must be non-negative")
        if len(self.counts) != 3 or min(self.counts) <= 0:
            raise ValueError(f"split counts must be three positive integers, got {self.counts}")
        lo, hi = self.slices_per_patient
        if not 1 <= lo <= hi:
            raise ValueError(f"bad slices_per_patient range {self.slices_per_patient}")


@dataclass
class NoiseSpec:
    kind: str = "gaussian"
    mu: float = 0.0
    sigma: float | None = None
    nu: float = 1.0
    rho_test: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "rician"):
            raise ValueError(f"noise kind must be 'gaussian' or 'rician', got {self.kind!r}")
        if self.sigma is None:
            self.sigma = 32.0 if self.kind == "gaussian" else 16.0
        if not self.sigma > 0:
            raise ValueError(f"noise sigma must be > 0, got {self.sigma}")
        if not 0.0 <= self.rho_test <= 1.0:
            raise ValueError(f"rho_test must be in [0, 1], got {self.rho_test}")


@dataclass
class Split:
    x: np.ndarray  # (N, H, W) float64, values in [0, 1]
    y: np.ndarray  # (N,) int64
    noisy: np.ndarray  # (N,) bool
    patient: np.ndarray  # (N,) int64

    def __len__(self):
        return len(self.y)

    def copy(self) -> Split:
        return Split(self.x.copy(), self.y.copy(), self.noisy.copy(), self.patient.copy())

    def subset(self, idx) -> Split:
        return Split(self.x[idx], self.y[idx], self.noisy[idx], self.patient[idx])


@dataclass
class SplitDataset:
    train: Split
    val: Split
    test: Split
    n_classes: int
    seed: int
    provenance: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.train.x.shape[1:]

    def splits(self):
        return (self.train, self.val, self.test)

    def equals(self, other: SplitDataset) -> bool:
        if (self.n_classes, self.seed) != (other.n_classes, other.seed):
            return False
        for a, b in zip(self.splits(), other.splits()):
            if not (np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
                    and np.array_equal(a.noisy, b.noisy) and np.array_equal(a.patient, b.patient)):
                return False
        return True


# ---------------------------------------------------------------- phantoms

def _soft(d: np.ndarray, edge: float = 0.6) -> np.ndarray:
    """Anti-aliased indicator of d > 0."""
    return 1.0 / (1.0 + np.exp(-d / edge))


def _draw_patient(rng: np.random.Generator, spec: PhantomSpec) -> dict:
    s = spec.size
    c = s / 2
    label = int(rng.choice(spec.n_classes, p=spec.class_priors))
    lo, hi = spec.slices_per_patient
    brain_a = s * rng.uniform(0.33, 0.42)
    brain_b = s * rng.uniform(0.28, 0.38)
    ang = rng.uniform(0, math.pi)
    rr = rng.uniform(0.0, 0.45)
    th = rng.uniform(0, 2 * math.pi)
    bumps = rng.uniform(0, s, size=(5, 2)), rng.uniform(2, 5, size=5), rng.normal(0, 0.06, size=5)
    return {
        "label": label,
        "n_slices": int(rng.integers(lo, hi + 1)),
        "brain_center": (c + rng.normal(0, 1.0), c + rng.normal(0, 1.0)),
        "brain_axes": (brain_a, brain_b),
        "brain_level": rng.uniform(0.25, 0.42),
        "bumps": bumps,
        "tumor_offset": (rr * brain_b * math.cos(th), rr * brain_b * math.sin(th)),
        "tumor_radius": rng.uniform(2.8, 4.8) * s / 32,
        "tumor_level": rng.uniform(0.5, 0.85),
        "tumor_angle": ang,
    }


def _render(p: dict, t: float, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = p["brain_center"]
    ba, bb = p["brain_axes"]
    bscale = math.sqrt(max(1 - (0.5 * t) ** 2, 0.2))
    rb = np.sqrt(((yy - cy) / (bb * bscale)) ** 2 + ((xx - cx) / (ba * bscale)) ** 2)
    brain = _soft((1 - rb) * min(ba, bb) * bscale)
    (centers, widths, amps) = p["bumps"]
    tex = np.zeros_like(yy)
    for (by, bx), w, a in zip(centers, widths, amps):
        tex += a * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * w * w))
    img = brain * (p["brain_level"] + tex)

    tscale = math.sqrt(max(1 - (0.75 * t) ** 2, 0.25))
    r0 = p["tumor_radius"] * tscale * rng.uniform(0.9, 1.1)
    oy, ox = p["tumor_offset"]
    ty = cy + oy * bscale + rng.normal(0, 0.4)
    tx = cx + ox * bscale + rng.normal(0, 0.4)
    level = p["tumor_level"] * rng.uniform(0.92, 1.08)
    dy, dx = yy - ty, xx - tx
    r = np.sqrt(dy * dy + dx * dx)
    if p["label"] == 0:  # filled disk
        blob = _soft(r0 - r)
    elif p["label"] == 1:  # ring with a dark core
        r1 = r0 * 1.25
        blob = _soft(r1 - r) * _soft(r - 0.55 * r1) - 0.5 * _soft(0.55 * r1 - r)
    else:  # elongated ellipse
        ca, sa = math.cos(p["tumor_angle"]), math.sin(p["tumor_angle"])
        u = (dx * ca + dy * sa) / (1.7 * r0)
        v = (-dx * sa + dy * ca) / (0.55 * r0)
        blob = _soft((1 - np.sqrt(u * u + v * v)) * 0.55 * r0)
    img = img + brain * level * blob
    return np.clip(img, 0.0, 1.0)


def _to_f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def generate_phantoms(spec: PhantomSpec | None = None) -> SplitDataset:
    """Clean train/val/test phantoms, split by patient."""
    spec = spec or PhantomSpec()
    patient = 0
    splits = []
    for count in spec.counts:
        xs, ys, pids = [], [], []
        while len(ys) < count:
            rng = stream(spec.seed, _PATIENT, patient)
            p = _draw_patient(rng, spec)
            n = p["n_slices"]
            for k in range(min(n, count - len(ys))):
                t = (k - (n - 1) / 2) / max(n / 2, 1)
                xs.append(_render(p, t, rng, spec.size))
                ys.append(p["label"])
                pids.append(patient)
            patient += 1
        splits.append(Split(_to_f32(np.stack(xs)), np.array(ys, dtype=np.int64),
                            np.zeros(count, dtype=bool), np.array(pids, dtype=np.int64)))
    prov = {"phantom": _jsonable(asdict(spec)), "prng": PRNG}
    return SplitDataset(*splits, n_classes=spec.n_classes, seed=spec.seed, provenance=prov)


def _jsonable(d):
    return json.loads(json.dumps(d))


# ------------------------------------------------------------------- noise

def add_gaussian_noise(x, mu: float = 0.0, sigma: float = 32.0, rng=None) -> np.ndarray:
    """``clip(x + N(mu, sigma^2) / 255, 0, 1)``; mu and sigma in 8-bit units."""
    rng = rng if rng is not None else np.random.default_rng()
    x = np.asarray(x, dtype=np.float64)
    return np.clip(x + rng.normal(mu, sigma, size=x.shape) / 255.0, 0.0, 1.0)


def rician_samples(nu: float, sigma: float, size, rng) -> np.ndarray:
    """Magnitude noise ``sigma * |nu + g1 + i g2|`` with standard normal g1, g2."""
    g1 = rng.standard_normal(size)
    g2 = rng.standard_normal(size)
    return sigma * np.sqrt((nu + g1) ** 2 + g2 ** 2)


def add_rician_noise(x, nu: float = 1.0, sigma: float = 16.0, rng=None) -> np.ndarray:
    """``clip(x + n / 255, 0, 1)`` with non-negative Rician ``n`` in 8-bit units."""
    rng = rng if rng is not None else np.random.default_rng()
    x = np.asarray(x, dtype=np.float64)
    return np.clip(x + rician_samples(nu, sigma, x.shape, rng) / 255.0, 0.0, 1.0)


def _noise_one(img: np.ndarray, noise: NoiseSpec, rng) -> np.ndarray:
    if noise.kind == "gaussian":
        return add_gaussian_noise(img, noise.mu, noise.sigma, rng)
    return add_rician_noise(img, noise.nu, noise.sigma, rng)


def apply_noise_protocol(ds: SplitDataset, noise: NoiseSpec) -> SplitDataset:
    """Noise every training image, keep validation clean, noise a rho_test share of test.

    The noisy test subset is the first ``floor(rho_test * n_test)`` entries of a
    seeded permutation. Each image's noise stream depends only on
    ``(noise.seed, split, index)``.
    """
    if any(s.noisy.any() for s in ds.splits()):
        raise ValueError("noise protocol expects a clean dataset")
    train = ds.train.copy()
    for i in range(len(train)):
        train.x[i] = _noise_one(train.x[i], noise, stream(noise.seed, _NOISE, i))
    train.x = _to_f32(train.x)
    train.noisy[:] = True

    test = ds.test.copy()
    n_noisy = math.floor(noise.rho_test * len(test))
    perm = stream(noise.seed, _PERM).permutation(len(test))
    for i in np.sort(perm[:n_noisy]):
        test.x[i] = _noise_one(test.x[i], noise, stream(noise.seed, _NOISE, 1_000_000 + int(i)))
        test.noisy[i] = True
    test.x = _to_f32(test.x)
    prov = dict(ds.provenance)
    prov["noise"] = _jsonable(asdict(noise))
    return SplitDataset(train, ds.val.copy(), test, ds.n_classes, ds.seed, prov)


# ------------------------------------------------------------------ PHTM1

class DatasetFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


_HEADER = struct.Struct("<5sIIIHHB")


def dataset_bytes(ds: SplitDataset) -> bytes:
    h, w = ds.shape
    parts = [_HEADER.pack(MAGIC, len(ds.train), len(ds.val), len(ds.test), h, w, ds.n_classes)]
    rec = np.dtype([("label", "u1"), ("noisy", "u1"), ("pix", "<f4", (h * w,))])
    for s in ds.splits():
        if s.x.size and (s.x.min() < 0 or s.x.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        arr = np.empty(len(s), dtype=rec)
        arr["label"] = s.y
        arr["noisy"] = s.noisy
        arr["pix"] = s.x.reshape(len(s), -1)
        parts.append(arr.tobytes())
    parts.append(struct.pack("<Q", ds.seed))
    return b"".join(parts)


def parse_dataset(buf: bytes) -> SplitDataset:
    if len(buf) < 5 or buf[:5] != MAGIC:
        raise DatasetFormatError(f"bad magic {bytes(buf[:5])!r}, expected 'PHTM1'", 0)
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("truncated header", len(buf))
    _, n_tr, n_va, n_te, h, w, n_classes = _HEADER.unpack_from(buf, 0)
    rec = np.dtype([("label", "u1"), ("noisy", "u1"), ("pix", "<f4", (h * w,))])
    off = _HEADER.size
    splits = []
    for name, n in zip(SPLITS, (n_tr, n_va, n_te)):
        need = n * rec.itemsize
        if off + need > len(buf):
            have = (len(buf) - off) // rec.itemsize
            raise DatasetFormatError(f"truncated {name} split: {have} of {n} samples present",
                                     off + have * rec.itemsize)
        arr = np.frombuffer(buf, dtype=rec, count=n, offset=off)
        x = arr["pix"].astype(np.float64).reshape(n, h, w)
        bad = arr["label"] >= n_classes
        if bad.any():
            raise DatasetFormatError(f"{name} label out of range", off + int(np.argmax(bad)) * rec.itemsize)
        splits.append(Split(x, arr["label"].astype(np.int64), arr["noisy"].astype(bool),
                            np.full(n, -1, dtype=np.int64)))
        off += need
    if off + 8 > len(buf):
        raise DatasetFormatError("truncated trailer: missing u64 seed", off)
    (seed,) = struct.unpack_from("<Q", buf, off)
    if off + 8 != len(buf):
        raise DatasetFormatError(f"{len(buf) - off - 8} trailing bytes after seed", off + 8)
    return SplitDataset(*splits, n_classes=n_classes, seed=seed)


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_dataset(ds: SplitDataset, path) -> None:
    """Write PHTM1 plus a JSON sidecar with patient ids and provenance."""
    path = Path(path)
    _atomic_write(path, dataset_bytes(ds))
    side = {"provenance": ds.provenance,
            "patients": {n: s.patient.tolist() for n, s in zip(SPLITS, ds.splits())}}
    _atomic_write(sidecar_path(path), json.dumps(side, sort_keys=True, indent=1).encode())


def load_dataset(path) -> SplitDataset:
    path = Path(path)
    ds = parse_dataset(path.read_bytes())
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        ds.provenance = meta.get("provenance", {})
        for name, s in zip(SPLITS, ds.splits()):
            pids = meta.get("patients", {}).get(name)
            if pids is not None and len(pids) == len(s):
                s.patient = np.array(pids, dtype=np.int64)
    return ds


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
