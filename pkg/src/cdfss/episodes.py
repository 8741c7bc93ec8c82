"""Synthetic two-domain shape datasets, their on-disk layout, and K-shot episode sampling."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .formats import load_tensor, quantize, read_pgm, save_tensor, write_pgm

SHAPES = ("rect", "ellipse", "triangle", "cross", "ring", "stripe")
TEXTURES = ("flat", "gaussian-noise", "gradient")
MANIFEST_VERSION = 1


class ForgeConfigError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    class_set: tuple[str, ...]
    texture: str = "flat"
    fg_intensity: tuple[float, float] = (0.6, 0.9)
    bg_intensity: tuple[float, float] = (0.1, 0.35)
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_set", tuple(self.class_set))
        object.__setattr__(self, "fg_intensity", tuple(float(v) for v in self.fg_intensity))
        object.__setattr__(self, "bg_intensity", tuple(float(v) for v in self.bg_intensity))
        if not self.class_set:
            raise ForgeConfigError(f"domain {self.domain_id!r} has no classes")
        unknown = [c for c in self.class_set if c not in SHAPES]
        if unknown:
            raise ForgeConfigError(f"domain {self.domain_id!r}: unknown shape classes {unknown}; choose from {SHAPES}")
        if len(set(self.class_set)) != len(self.class_set):
            raise ForgeConfigError(f"domain {self.domain_id!r} lists a class twice")
        if self.texture not in TEXTURES:
            raise ForgeConfigError(f"domain {self.domain_id!r}: texture must be one of {TEXTURES}")
        for name in ("fg_intensity", "bg_intensity"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ForgeConfigError(f"domain {self.domain_id!r}: {name} must satisfy 0 <= lo <= hi <= 1")
        if self.noise_sigma < 0:
            raise ForgeConfigError("noise_sigma must be non-negative")

    @property
    def intensity_gap(self) -> float:
        """Distance between the foreground and background intensity ranges (0 if they overlap)."""
        (flo, fhi), (blo, bhi) = self.fg_intensity, self.bg_intensity
        return max(0.0, flo - bhi, blo - fhi)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_set"] = list(self.class_set)
        d["fg_intensity"] = list(self.fg_intensity)
        d["bg_intensity"] = list(self.bg_intensity)
        return d


DEFAULT_SOURCE = DomainSpec("source", ("rect", "ellipse", "triangle"), "flat", (0.6, 0.9), (0.1, 0.35), 0.05, 1)
DEFAULT_TARGET = DomainSpec("target", ("cross", "ring", "stripe"), "gaussian-noise", (0.55, 0.85), (0.15, 0.4), 0.08, 2)


@dataclass
class Episode:
    class_id: str
    domain_id: str
    supports: list[tuple[np.ndarray, np.ndarray]]
    query_image: np.ndarray
    query_mask: np.ndarray
    episode_id: str = ""
    indices: tuple[int, ...] = field(default=(), repr=False)

    @property
    def k(self) -> int:
        return len(self.supports)


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray, aspect: float) -> np.ndarray:
    if shape == "rect":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= aspect)
    if shape == "ellipse":
        return u**2 + (v / aspect) ** 2 <= 1.0
    if shape == "triangle":
        # equilateral, circumradius 1, one vertex on +v
        inside = np.ones_like(u, dtype=bool)
        for ang in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3):
            nx, ny = -np.cos(ang), -np.sin(ang)  # inward edge normals of the opposite sides
            inside &= u * nx + v * ny <= 0.5
        return inside
    if shape == "cross":
        return ((np.abs(u) <= 1.0) & (np.abs(v) <= 0.3)) | ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0))
    if shape == "ring":
        r = np.sqrt(u**2 + v**2)
        return (r <= 1.0) & (r >= 0.55)
    if shape == "stripe":
        return (np.abs(u) <= 1.6) & (np.abs(v) <= 0.25)
    raise ForgeConfigError(f"unknown shape {shape!r}")


def _texture(kind: str, rng, size: int) -> np.ndarray:
    if kind == "flat":
        return np.zeros((size, size))
    if kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1) - 0.5
        return 0.1 * (np.cos(theta) * xs + np.sin(theta) * ys)
    coarse = rng.standard_normal((size // 4 + 1, size // 4 + 1))
    ys = np.linspace(0, coarse.shape[0] - 1, size)
    xs = np.linspace(0, coarse.shape[1] - 1, size)
    rows = np.array([np.interp(xs, np.arange(coarse.shape[1]), r) for r in coarse])
    smooth = np.array([np.interp(ys, np.arange(coarse.shape[0]), col) for col in rows.T]).T
    return 0.06 * smooth


def render_image(spec: DomainSpec, shape: str, rng, size: int, channels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """One quantized image [C, S, S] in [0, 1] and its binary mask [S, S]."""
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    radius = rng.uniform(0.15, 0.3) * size
    theta = rng.uniform(0, np.pi)
    aspect = rng.uniform(0.5, 1.0)
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = ys - cy, xs - cx
    u = (np.cos(theta) * dx + np.sin(theta) * dy) / radius
    v = (-np.sin(theta) * dx + np.cos(theta) * dy) / radius
    mask = _shape_mask(shape, u, v, aspect)
    if not mask.any():
        mask[min(int(cy), size - 1), min(int(cx), size - 1)] = True
    fg = rng.uniform(*spec.fg_intensity)
    bg = rng.uniform(*spec.bg_intensity)
    img = np.empty((channels, size, size))
    for c in range(channels):
        base = np.where(mask, fg, bg) + _texture(spec.texture, rng, size)
        img[c] = base + spec.noise_sigma * rng.standard_normal((size, size))
    img = quantize(img) / 255.0
    return img, mask.astype(np.float64)


def forge_arrays(
    source: DomainSpec, target: DomainSpec, n_images_per_class: int, image_size: int, channels: int = 1
) -> dict[str, dict[str, list[tuple[np.ndarray, np.ndarray]]]]:
    shared = sorted(set(source.class_set) & set(target.class_set))
    if shared:
        raise ForgeConfigError(f"source and target share class(es) {', '.join(shared)}; label spaces must be disjoint")
    if source.domain_id == target.domain_id:
        raise ForgeConfigError(f"domain ids must differ, both are {source.domain_id!r}")
    if n_images_per_class < 2:
        raise ForgeConfigError("n_images_per_class must be at least 2 (one support and one query)")
    if image_size < 4 or image_size % 4:
        raise ForgeConfigError(f"image_size must be a positive multiple of 4, got {image_size}")
    out = {}
    for spec in (source, target):
        rng = np.random.default_rng(spec.seed)
        out[spec.domain_id] = {
            cls: [render_image(spec, cls, rng, image_size, channels) for _ in range(n_images_per_class)]
            for cls in spec.class_set
        }
    return out


# ---------------------------------------------------------------------------
# dataset


class EpisodeDataset:
    """Images and masks grouped by domain and class, fully held in memory."""

    def __init__(self, items, image_size: int, channels: int = 1, root: Path | None = None):
        self.items = items
        self.image_size = image_size
        self.channels = channels
        self.root = root

    @classmethod
    def open(cls, root) -> "EpisodeDataset":
        root = Path(root)
        manifest_path = root / "manifest.json"
        if not manifest_path.is_file():
            raise FileNotFoundError(f"no manifest.json under {root}")
        manifest = json.loads(manifest_path.read_text())
        validate_manifest(manifest)
        size, ch = manifest["image_size"], manifest["channels"]
        items = {}
        for dom in manifest["domains"]:
            items[dom["domain_id"]] = {}
            for c in dom["classes"]:
                pairs = []
                for entry in c["images"]:
                    if "exact" in entry:
                        img = load_tensor(root / entry["exact"]).astype(np.float64)
                    else:
                        img = read_pgm(root / entry["img"]).astype(np.float64).reshape(ch, size, size) / 255.0
                    mask = (read_pgm(root / entry["mask"]) > 127).astype(np.float64)
                    pairs.append((img, mask))
                items[dom["domain_id"]][c["class_id"]] = pairs
        return cls(items, size, ch, root)

    def domains(self) -> list[str]:
        return list(self.items)

    def classes(self, domain_id: str) -> list[str]:
        if domain_id not in self.items:
            raise SamplingError(f"unknown domain {domain_id!r}; have {self.domains()}")
        return list(self.items[domain_id])

    def get(self, domain_id: str, class_id: str, index: int) -> tuple[np.ndarray, np.ndarray]:
        return self.items[domain_id][class_id][index]


def validate_manifest(m: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise ValueError(f"invalid manifest: {msg}")

    need(isinstance(m, dict), "not an object")
    need(m.get("version") == MANIFEST_VERSION, f"version must be {MANIFEST_VERSION}")
    need(isinstance(m.get("image_size"), int) and m["image_size"] > 0, "image_size")
    need(isinstance(m.get("channels"), int) and m["channels"] > 0, "channels")
    need(isinstance(m.get("domains"), list) and m["domains"], "domains")
    for d in m["domains"]:
        need(isinstance(d.get("domain_id"), str), "domain_id")
        need(isinstance(d.get("classes"), list), "classes")
        for c in d["classes"]:
            need(isinstance(c.get("class_id"), str), "class_id")
            for e in c.get("images", []):
                need(isinstance(e.get("img"), str) and isinstance(e.get("mask"), str), "image entry")
                need("\\" not in e["img"] and not e["img"].startswith("/"), "paths must be relative, forward-slash")


def forge_dataset(
    source: DomainSpec,
    target: DomainSpec,
    n_images_per_class: int,
    image_size: int,
    out_dir,
    channels: int = 1,
    exact: bool = False,
) -> EpisodeDataset:
    """Render both domains and write PGM images/masks plus manifest.json under ``out_dir``."""
    arrays = forge_arrays(source, target, n_images_per_class, image_size, channels)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    domains = []
    for dom_id, classes in arrays.items():
        cls_entries = []
        for cls, pairs in classes.items():
            (root / dom_id / cls).mkdir(parents=True, exist_ok=True)
            entries = []
            for i, (img, mask) in enumerate(pairs):
                rel = f"{dom_id}/{cls}"
                entry = {"img": f"{rel}/img_{i:04d}.pgm", "mask": f"{rel}/mask_{i:04d}.pgm"}
                write_pgm(root / entry["img"], quantize(img.reshape(channels * image_size, image_size)))
                write_pgm(root / entry["mask"], (mask * 255).astype(np.uint8))
                if exact:
                    entry["exact"] = f"{rel}/img_{i:04d}.rtnt"
                    save_tensor(root / entry["exact"], img)
                entries.append(entry)
            cls_entries.append({"class_id": cls, "images": entries})
        domains.append({"domain_id": dom_id, "classes": cls_entries})
    manifest = {"version": MANIFEST_VERSION, "image_size": image_size, "channels": channels, "domains": domains}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return EpisodeDataset(arrays, image_size, channels, root)


def sample_episode(ds: EpisodeDataset, domain_id: str, k: int, rng_seed) -> Episode:
    """Uniform class, then k supports and one query drawn without replacement."""
    if k < 1:
        raise SamplingError(f"k must be >= 1, got {k}")
    eligible = [c for c in ds.classes(domain_id) if len(ds.items[domain_id][c]) >= k + 1]
    if not eligible:
        raise SamplingError(f"no class in domain {domain_id!r} has {k + 1} images")
    rng = np.random.default_rng(rng_seed)
    cls = eligible[int(rng.integers(len(eligible)))]
    idx = rng.choice(len(ds.items[domain_id][cls]), size=k + 1, replace=False)
    pairs = [ds.get(domain_id, cls, int(i)) for i in idx]
    seed_tag = "-".join(str(s) for s in np.atleast_1d(rng_seed))
    return Episode(
        class_id=cls,
        domain_id=domain_id,
        supports=pairs[:k],
        query_image=pairs[k][0],
        query_mask=pairs[k][1],
        episode_id=f"{domain_id}:{seed_tag}",
        indices=tuple(int(i) for i in idx),
    )
