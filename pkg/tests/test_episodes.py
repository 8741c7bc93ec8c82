import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from cdfss.episodes import (
    DEFAULT_SOURCE,
    DEFAULT_TARGET,
    DomainSpec,
    EpisodeDataset,
    ForgeConfigError,
    SamplingError,
    forge_arrays,
    forge_dataset,
    sample_episode,
    validate_manifest,
)
from cdfss.formats import read_pgm


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def forged(tmp_path_factory):
    root = tmp_path_factory.mktemp("forge")
    forge_dataset(DEFAULT_SOURCE, DEFAULT_TARGET, 6, 16, root / "a")
    forge_dataset(DEFAULT_SOURCE, DEFAULT_TARGET, 6, 16, root / "b")
    return root


def test_forge_is_byte_identical(forged):
    a, b = tree_bytes(forged / "a"), tree_bytes(forged / "b")
    assert a and a == b


def test_manifest_layout(forged):
    m = json.loads((forged / "a" / "manifest.json").read_text())
    validate_manifest(m)
    assert m["version"] == 1 and m["image_size"] == 16 and m["channels"] == 1
    for d in m["domains"]:
        for c in d["classes"]:
            assert len(c["images"]) == 6
            for e in c["images"]:
                assert e["img"].startswith(f"{d['domain_id']}/{c['class_id']}/")
                assert (forged / "a" / e["img"]).is_file()


def test_masks_nonempty_binary_and_images_in_range(ds32):
    for dom in ds32.domains():
        for cls in ds32.classes(dom):
            for img, mask in ds32.items[dom][cls]:
                assert set(np.unique(mask)) <= {0.0, 1.0}
                assert mask.sum() >= 1
                assert img.min() >= 0 and img.max() <= 1


def test_intensity_separation_from_manifest(tmp_path):
    forge_dataset(DEFAULT_SOURCE, DEFAULT_TARGET, 20, 32, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    gaps = {s.domain_id: s.intensity_gap for s in (DEFAULT_SOURCE, DEFAULT_TARGET)}
    checked = 0
    for d in m["domains"]:
        for c in d["classes"]:
            for e in c["images"]:
                img = read_pgm(tmp_path / e["img"]).astype(float) / 255
                fg = read_pgm(tmp_path / e["mask"]) > 127
                sep = img[fg].mean() - img[~fg].mean()
                assert sep >= gaps[d["domain_id"]] / 2, e["img"]
                checked += 1
    assert checked == 120


def test_round_trip_pgm_is_bit_exact(forged, ds16):
    ds = EpisodeDataset.open(forged / "a")
    fresh = forge_arrays(DEFAULT_SOURCE, DEFAULT_TARGET, 6, 16)
    for dom in fresh:
        for cls in fresh[dom]:
            for (img, mask), (img2, mask2) in zip(fresh[dom][cls], ds.items[dom][cls]):
                assert img.tobytes() == img2.tobytes()
                assert mask.tobytes() == mask2.tobytes()


def test_round_trip_exact_mode(tmp_path):
    noisy = DomainSpec("s", ("rect",), "gradient", (0.6, 0.9), (0.1, 0.3), 0.0, 5)
    ds = forge_dataset(noisy, DomainSpec("t", ("ring",), seed=6), 3, 8, tmp_path, channels=2, exact=True)
    back = EpisodeDataset.open(tmp_path)
    assert back.channels == 2
    for dom in ds.items:
        for cls in ds.items[dom]:
            for (a, ma), (b, mb) in zip(ds.items[dom][cls], back.items[dom][cls]):
                assert a.tobytes() == b.tobytes() and ma.tobytes() == mb.tobytes()


def test_overlapping_classes_rejected():
    clash = DomainSpec("target", ("ring", "rect"), seed=2)
    with pytest.raises(ForgeConfigError, match="rect"):
        forge_arrays(DEFAULT_SOURCE, clash, 4, 16)


def test_invalid_domain_specs():
    with pytest.raises(ForgeConfigError):
        DomainSpec("x", ("hexagon",))
    with pytest.raises(ForgeConfigError):
        DomainSpec("x", ("rect",), fg_intensity=(0.5, 1.2))
    with pytest.raises(ForgeConfigError):
        DomainSpec("x", ("rect",), texture="plaid")


def test_source_and_target_never_share_classes(ds16):
    assert not set(ds16.classes("source")) & set(ds16.classes("target"))
    for seed in range(50):
        assert sample_episode(ds16, "source", 1, seed).class_id in DEFAULT_SOURCE.class_set
        assert sample_episode(ds16, "target", 1, seed).class_id in DEFAULT_TARGET.class_set


@pytest.mark.parametrize("k", [1, 3, 5])
def test_episode_indices_distinct_and_shapes(ds16, k):
    for seed in range(30):
        ep = sample_episode(ds16, "target", k, seed)
        assert len(set(ep.indices)) == k + 1
        assert ep.k == k
        assert ep.query_image.shape == (1, 16, 16) and ep.query_mask.shape == (16, 16)


def test_same_seed_same_episode(ds16):
    a, b = sample_episode(ds16, "source", 2, 123), sample_episode(ds16, "source", 2, 123)
    assert a.class_id == b.class_id and a.indices == b.indices and a.episode_id == b.episode_id


def test_class_frequencies_uniform(ds16):
    counts = Counter(sample_episode(ds16, "source", 1, (5, i)).class_id for i in range(1000))
    for cls in ds16.classes("source"):
        assert abs(counts[cls] / 1000 - 1 / 3) <= 0.05


def test_insufficient_images():
    ds = EpisodeDataset(forge_arrays(DEFAULT_SOURCE, DEFAULT_TARGET, 3, 8), 8)
    sample_episode(ds, "source", 2, 0)
    with pytest.raises(SamplingError):
        sample_episode(ds, "source", 3, 0)
    with pytest.raises(SamplingError):
        sample_episode(ds, "nowhere", 1, 0)


def test_open_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        EpisodeDataset.open(tmp_path)
