"""Synthetic anatomy + pathology images, the APEXDS1 container and k-fold splits.

Images mimic a stacked two-modality scan: channel 0 a structural rendering
(anatomy regions with class-specific intensity and stripe texture), channel 1
an uptake rendering (bright lesion blobs), channel 2 left empty.

Every lesion-like blob looks the same whether or not it is pathological.
A blob of pathology type ``j`` is pathological when it sits in the anatomy
region hosting ``j`` and normal (a distractor, unlabelled) elsewhere.  The
knob ``rho`` sets how strongly placement follows that rule: with
probability ``rho`` a pathology lands inside its host (otherwise anywhere
in the body), and each drawn distractor appears outside its host with
probability ``rho`` (otherwise it is dropped).  At ``rho = 0`` there are no
distractors and location carries no information about the label.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .losses import InstanceTargets

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components numbered 1..n in raster order of first pixel."""
    labels, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    return labels, int(n)


MAGIC = b"APEXDS1"
CHECKPOINT_MAGIC = b"APEXCK1"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    H: int = 64
    W: int = 64
    A: int = 6
    P: int = 3
    rho: float = 0.95
    noise: float = 0.04
    instances_min: int = 1
    instances_max: int = 3
    distractors_min: int = 0
    distractors_max: int = 2
    radius_min: float = 5.0
    radius_max: float = 8.0
    n_train: int = 200
    n_test: int = 50
    mode: str = "semantic"
    seed: int = 0
    hosts: tuple[int, ...] = ()  # host anatomy class (1-based) per pathology class; default 1, 3, 5, ...

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.A < 2 or self.P < 1:
            raise ValueError(f"need A >= 2 and P >= 1, got A={self.A}, P={self.P}")
        if self.mode not in ("semantic", "instance"):
            raise ValueError(f"mode must be 'semantic' or 'instance', got {self.mode!r}")
        if not 1 <= self.instances_min <= self.instances_max:
            raise ValueError("need 1 <= instances_min <= instances_max")
        if not 0 <= self.distractors_min <= self.distractors_max:
            raise ValueError("need 0 <= distractors_min <= distractors_max")
        self.hosts = tuple(int(h) for h in self.hosts) or tuple((2 * j) % self.A + 1 for j in range(self.P))
        if len(self.hosts) != self.P or not all(1 <= h <= self.A for h in self.hosts):
            raise ValueError(f"hosts {self.hosts} must give one anatomy class in 1..{self.A} per pathology class")

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_test

    def anatomy_names(self) -> list[str]:
        return [f"anatomy_{k}" for k in range(1, self.A + 1)]

    def pathology_names(self) -> list[str]:
        return [f"pathology_{j}" for j in range(1, self.P + 1)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hosts"] = list(self.hosts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown generator keys: {sorted(unknown)}")
        kw = dict(d)
        if "hosts" in kw:
            kw["hosts"] = tuple(kw["hosts"])
        return cls(**kw)


def _parse_value(field_type, raw: str):
    raw = raw.strip()
    if field_type in (int, "int"):
        return int(raw)
    if field_type in (float, "float"):
        return float(raw)
    if "tuple" in str(field_type):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw


def read_key_value(path: str | Path, section: str) -> dict[str, str]:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep key case (H, W, A, P)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.lstrip().startswith("["):
        text = f"[{section}]\n" + text
    parser.read_string(text)
    if not parser.has_section(section):
        raise KeyError(f"{path}: missing [{section}] section")
    return dict(parser.items(section))


def write_key_value(path: str | Path, section: str, values: dict) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser[section] = {k: (" ".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v)) for k, v in values.items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def load_generator_config(path: str | Path) -> GeneratorConfig:
    raw = read_key_value(path, "generator")
    types = {f.name: f.type for f in dataclasses.fields(GeneratorConfig)}
    unknown = set(raw) - set(types)
    if unknown:
        raise KeyError(f"{path}: unknown generator keys {sorted(unknown)}")
    return GeneratorConfig(**{k: _parse_value(types[k], v) for k, v in raw.items()})


def save_generator_config(cfg: GeneratorConfig, path: str | Path) -> None:
    write_key_value(path, "generator", cfg.to_dict())


# ---------------------------------------------------------------------------
# sample generation


@dataclass
class SampleRecord:
    image: np.ndarray  # (3, H, W) float32
    anatomy: np.ndarray  # (H, W) uint16 labels 0..A
    anatomy_instances: np.ndarray  # (H, W) uint16
    pathology: np.ndarray  # (H, W) uint16 labels 0..P
    pathology_instances: np.ndarray  # (H, W) uint16
    meta: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            all(np.array_equal(getattr(self, n), getattr(other, n)) and getattr(self, n).dtype == getattr(other, n).dtype
                for n in _ARRAY_FIELDS)
            and self.meta == other.meta
        )


_ARRAY_FIELDS = ("image", "anatomy", "anatomy_instances", "pathology", "pathology_instances")

# stripe orientation per anatomy class (radians); pairs of classes share an intensity
_ANGLES = (0.0, np.pi / 2, np.pi / 4, 3 * np.pi / 4, np.pi / 8, 5 * np.pi / 8)


def _smooth_field(rng: np.random.Generator, H: int, W: int, terms: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    out = np.zeros((H, W))
    for _ in range(terms):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (fy * yy + fx * xx) + ph)
    return out / terms


def _canonical_seeds(A: int) -> np.ndarray:
    cols = int(np.ceil(np.sqrt(A * 1.5)))
    rows = int(np.ceil(A / cols))
    pts = []
    for k in range(A):
        r, c = divmod(k, cols)
        pts.append(((r + 0.5) / rows, (c + 0.5) / cols))
    return np.array(pts)


def _class_intensity(k: int, A: int) -> float:
    # classes 2m+1 and 2m+2 share an intensity; texture tells them apart
    pairs = (A + 1) // 2
    return 0.35 + 0.4 * (((k - 1) // 2) / max(1, pairs - 1))


def _layout(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray | None:
    H, W, A = cfg.H, cfg.W, cfg.A
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy = H / 2 + rng.uniform(-2, 2)
    cx = W / 2 + rng.uniform(-2, 2)
    ry = 0.44 * H * rng.uniform(0.95, 1.05)
    rx = 0.44 * W * rng.uniform(0.95, 1.05)
    theta = np.arctan2(yy - cy, xx - cx)
    wobble = 1.0
    for kk in (2, 3, 4):
        wobble = wobble + 0.04 * rng.uniform(-1, 1) * np.cos(kk * theta + rng.uniform(0, 2 * np.pi))
    body = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= wobble ** 2
    top, left = cy - ry, cx - rx
    seeds = _canonical_seeds(A)
    sy = top + seeds[:, 0] * 2 * ry + rng.uniform(-0.08, 0.08, A) * H
    sx = left + seeds[:, 1] * 2 * rx + rng.uniform(-0.08, 0.08, A) * W
    dist = np.stack([(yy - sy[k]) ** 2 + (xx - sx[k]) ** 2 + (0.12 * H) ** 2 * _smooth_field(rng, H, W)
                     for k in range(A)])
    labels = np.where(body, dist.argmin(axis=0) + 1, 0)
    # keep one connected piece per class; fragments go to the nearest surviving region
    keep = np.zeros((H, W), dtype=bool)
    for k in range(1, A + 1):
        comp, n = label_components(labels == k)
        if n == 0:
            return None
        sizes = np.bincount(comp.ravel())[1:]
        keep |= comp == (int(sizes.argmax()) + 1)
    orphan = body & ~keep
    if orphan.any():
        _, (iy, ix) = ndimage.distance_transform_edt(~keep, return_indices=True)
        labels = np.where(orphan, labels[iy, ix], labels)
    min_area = 0.25 * body.sum() / A
    if any((labels == k).sum() < min_area for k in range(1, A + 1)):
        return None
    return labels.astype(np.int64)


def _disc(H: int, W: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _place(rng, cfg: GeneratorConfig, region: np.ndarray, occupied: np.ndarray, r: float):
    ys, xs = np.nonzero(region & ~ndimage.binary_dilation(occupied, iterations=2))
    if ys.size == 0:
        return None
    for _ in range(20):
        i = rng.integers(ys.size)
        m = _disc(cfg.H, cfg.W, ys[i], xs[i], r) & region & ~occupied
        if m.sum() >= 0.6 * np.pi * r * r and not (ndimage.binary_dilation(m, iterations=2) & occupied).any():
            return (int(ys[i]), int(xs[i])), m
    return None


def _try_generate(cfg: GeneratorConfig, rng: np.random.Generator, index: int) -> SampleRecord | None:
    H, W, A, P = cfg.H, cfg.W, cfg.A, cfg.P
    labels = _layout(cfg, rng)
    if labels is None:
        return None
    body = labels > 0
    yy, xx = np.mgrid[0:H, 0:W]
    structure = np.zeros((H, W))
    uptake = np.zeros((H, W))
    for k in range(1, A + 1):
        region = labels == k
        ang = _ANGLES[((k - 1) // 2) % len(_ANGLES)]
        phase = rng.uniform(0, 2 * np.pi)
        stripes = np.cos(2 * np.pi * (np.cos(ang) * yy + np.sin(ang) * xx) / 5.0 + phase)
        structure[region] = _class_intensity(k, A) + 0.1 * stripes[region]
        uptake[region] = 0.08
    occupied = np.zeros((H, W), dtype=bool)
    path_labels = np.zeros((H, W), dtype=np.int64)
    path_inst = np.zeros((H, W), dtype=np.int64)
    lesions = []
    n_path = int(rng.integers(cfg.instances_min, cfg.instances_max + 1))
    n_dist = int(rng.integers(cfg.distractors_min, cfg.distractors_max + 1))
    kinds = [(True, int(rng.integers(P))) for _ in range(n_path)] + [(False, int(rng.integers(P))) for _ in range(n_dist)]
    for is_path, j in kinds:
        host = labels == cfg.hosts[j]
        follows_rule = rng.random() < cfg.rho
        if is_path:
            region = host if follows_rule else body
        elif follows_rule:
            region = body & ~host
        else:
            continue
        r = rng.uniform(cfg.radius_min, cfg.radius_max)
        placed = _place(rng, cfg, region, occupied, r)
        if placed is None:
            if is_path:
                return None
            continue
        (cy, cx), m = placed
        occupied |= m
        # same rendering for pathology and distractor of type j
        structure[m] += 0.12 + 0.05 * np.cos(yy[m] + xx[m])
        uptake[m] = 0.55 + 0.15 * j
        if is_path:
            iid = int(path_inst.max()) + 1
            path_inst[m] = iid
            path_labels[m] = j + 1
        lesions.append({"pathological": bool(is_path), "type": j, "center": [cy, cx], "radius": round(float(r), 6),
                        "in_host": bool(host[cy, cx])})
    if path_inst.max() == 0:
        return None
    noise = rng.normal(0.0, cfg.noise, size=(2, H, W))
    image = np.zeros((3, H, W))
    image[0] = np.where(body, structure + noise[0], 0.0)
    image[1] = np.where(body, uptake + noise[1], 0.0)
    return SampleRecord(
        image=image.astype(np.float32),
        anatomy=labels.astype(np.uint16),
        anatomy_instances=labels.astype(np.uint16),
        pathology=path_labels.astype(np.uint16),
        pathology_instances=path_inst.astype(np.uint16),
        meta={"index": int(index), "hosts": list(cfg.hosts), "lesions": lesions},
    )


def generate_sample(cfg: GeneratorConfig, index: int) -> SampleRecord:
    """Deterministic in ``(cfg.seed, index)``; retries walk a fixed chain of sub-seeds."""
    for attempt in range(100):
        rng = np.random.default_rng([cfg.seed, index, attempt])
        rec = _try_generate(cfg, rng, index)
        if rec is not None:
            rec.meta["split"] = "train" if index < cfg.n_train else "test"
            rec.meta["mode"] = cfg.mode
            rec.meta["rho"] = cfg.rho
            return rec
    raise RuntimeError(f"could not generate sample {index} after 100 layouts; loosen the generator config")


def generate_dataset(cfg: GeneratorConfig, indices: Iterable[int] | None = None) -> list[SampleRecord]:
    idx = range(cfg.n_total) if indices is None else indices
    return [generate_sample(cfg, i) for i in idx]


# ---------------------------------------------------------------------------
# container format


def _encode_record(meta: dict, arrays: Sequence[tuple[str, np.ndarray]]) -> bytes:
    descr = []
    payload = io.BytesIO()
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        descr.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape)})
        payload.write(le.tobytes())
    header = json.dumps({"arrays": descr, "meta": meta}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + payload.getvalue()


def write_container(path: str | Path, records: Sequence[tuple[dict, Sequence[tuple[str, np.ndarray]]]],
                    magic: bytes = MAGIC) -> None:
    """Write ``magic`` + version byte + u64 count + per record (u64 header length, JSON header, payloads)."""
    if len(magic) != 7:
        raise ValueError("magic must be 7 bytes")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(bytes([FORMAT_VERSION]))
        fh.write(struct.pack("<Q", len(records)))
        for meta, arrays in records:
            fh.write(_encode_record(meta, arrays))


def read_container(path: str | Path, magic: bytes = MAGIC) -> list[tuple[dict, dict[str, np.ndarray]]]:
    data = Path(path).read_bytes()
    if data[:7] != magic:
        raise DatasetFormatError(f"{path}: bad magic {data[:7]!r}, expected {magic.decode()!r}")
    if len(data) < 16:
        raise DatasetFormatError(f"{path}: truncated file header")
    if data[7] != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {data[7]}")
    (count,) = struct.unpack_from("<Q", data, 8)
    pos = 16
    out = []
    for i in range(count):
        if pos + 8 > len(data):
            raise DatasetFormatError(f"{path}: truncated before record {i}")
        (hlen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if pos + hlen > len(data):
            raise DatasetFormatError(f"{path}: truncated header in record {i}")
        try:
            header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"{path}: corrupt header in record {i}: {exc}") from None
        pos += hlen
        arrays = {}
        for d in header["arrays"]:
            dt = np.dtype(d["dtype"])
            shape = tuple(d["shape"])
            n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + n > len(data):
                raise DatasetFormatError(f"{path}: truncated payload {d['name']!r} in record {i}")
            arrays[d["name"]] = np.frombuffer(data, dtype=dt, count=n // dt.itemsize, offset=pos).reshape(shape).astype(
                dt.newbyteorder("="))
            pos += n
        out.append((header["meta"], arrays))
    if pos != len(data):
        raise DatasetFormatError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return out


def write_dataset(path: str | Path, records: Sequence[SampleRecord], class_names: dict | None = None) -> None:
    encoded = []
    for rec in records:
        H, W = rec.anatomy.shape
        for name in _ARRAY_FIELDS[1:]:
            if getattr(rec, name).shape != (H, W):
                raise ValueError(f"{name} shape {getattr(rec, name).shape} != anatomy shape {(H, W)}")
        if rec.image.shape != (3, H, W):
            raise ValueError(f"image shape {rec.image.shape} != {(3, H, W)}")
        meta = dict(rec.meta)
        if class_names is not None:
            meta["class_names"] = class_names
        arrays = [("image", rec.image.astype(np.float32, copy=False))]
        arrays += [(n, getattr(rec, n).astype(np.uint16, copy=False)) for n in _ARRAY_FIELDS[1:]]
        encoded.append((meta, arrays))
    write_container(path, encoded, MAGIC)


def read_dataset(path: str | Path) -> list[SampleRecord]:
    out = []
    for i, (meta, arrays) in enumerate(read_container(path, MAGIC)):
        missing = [n for n in _ARRAY_FIELDS if n not in arrays]
        if missing:
            raise DatasetFormatError(f"{path}: record {i} lacks arrays {missing}")
        hw = arrays["anatomy"].shape
        if arrays["image"].shape != (3,) + hw or any(arrays[n].shape != hw for n in _ARRAY_FIELDS[1:]):
            raise DatasetFormatError(f"{path}: record {i} has inconsistent array shapes")
        out.append(SampleRecord(meta=dict(meta), **{n: arrays[n] for n in _ARRAY_FIELDS}))
    return out


def file_hash(path: str | Path) -> str:
    """Git-style blob hash (sha1 over ``blob <size>\\0`` + content)."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ---------------------------------------------------------------------------
# splits and targets


def kfold_split(n_samples: int, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle once, cut into k contiguous folds; returns (train, val) index arrays."""
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if n_samples < k:
        raise ValueError(f"cannot split {n_samples} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n_samples)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        val = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train, val))
    return out


def majority_pool(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-wise majority (ties count as foreground) of a binary mask."""
    H, W = mask.shape
    if H % factor or W % factor:
        raise ValueError(f"mask {H}x{W} not divisible by {factor}")
    return mask.reshape(H // factor, factor, W // factor, factor).mean(axis=(1, 3)) >= 0.5


def segments(labels: np.ndarray, instances: np.ndarray, mode: str = "semantic") -> list[tuple[np.ndarray, int]]:
    """(mask, class) segments; class is the 1-based label.

    Semantic mode yields one segment per connected component per class;
    instance mode one per instance ID.
    """
    out = []
    if mode == "semantic":
        for c in np.unique(labels):
            if c == 0:
                continue
            comp, n = label_components(labels == c)
            out.extend((comp == i, int(c)) for i in range(1, n + 1))
    elif mode == "instance":
        for iid in np.unique(instances):
            if iid == 0:
                continue
            m = instances == iid
            out.append((m, int(np.bincount(labels[m]).argmax())))
    else:
        raise ValueError(f"unknown target mode {mode!r}")
    return out


def instance_targets(labels: np.ndarray, instances: np.ndarray, factor: int, mode: str = "semantic",
                     class_offset: int = 0) -> InstanceTargets:
    """Targets at mask resolution; classes become 0-based (+ ``class_offset``).

    Segments that vanish under majority pooling are dropped.
    """
    masks, classes = [], []
    for m, c in segments(labels, instances, mode):
        pooled = majority_pool(m, factor)
        if pooled.any():
            masks.append(pooled.reshape(-1))
            classes.append(c - 1 + class_offset)
    n = (labels.shape[0] // factor) * (labels.shape[1] // factor)
    return InstanceTargets(np.array(masks, dtype=np.float64).reshape(len(classes), n), np.array(classes, dtype=np.int64))


def pooled_labels(labels: np.ndarray, factor: int, num_classes: int) -> np.ndarray:
    """Label map at mask resolution, consistent with :func:`majority_pool`.

    A block takes the most frequent foreground class when that class covers
    at least half the block (ties to the lower class), else 0.
    """
    H, W = labels.shape
    blocks = labels.reshape(H // factor, factor, W // factor, factor).transpose(0, 2, 1, 3).reshape(
        H // factor, W // factor, -1)
    counts = np.stack([(blocks == c).sum(-1) for c in range(1, num_classes + 1)], axis=-1)
    best = counts.argmax(-1)
    full = np.take_along_axis(counts, best[..., None], -1)[..., 0]
    return np.where(2 * full >= factor * factor, best + 1, 0)


def multitask_labels(anatomy: np.ndarray, pathology: np.ndarray, num_anatomy: int) -> np.ndarray:
    """Pathology labels pasted atop anatomy: pathology class j becomes A + j."""
    return np.where(pathology > 0, pathology.astype(np.int64) + num_anatomy, anatomy.astype(np.int64))
