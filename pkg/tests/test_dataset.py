import json

import numpy as np
import pytest
import torch

from rawmamba.dataset import (
    DatasetConfig,
    build_scene,
    image_batch,
    load_split,
    make_batch,
    make_dataset,
    sample_units,
    scene_seed,
)
from rawmamba.errors import ConfigurationError, LoadError


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    cfg = DatasetConfig(scenes=5, test_fraction=0.4, frames=3, size=16, seed=7)
    root = make_dataset(tmp_path_factory.mktemp("ds") / "data", cfg)
    return cfg, root


def test_default_split_counts():
    assert DatasetConfig().split_counts() == {"train": 64, "test": 16}
    cfg = DatasetConfig()
    assert (cfg.frames, cfg.size) == (5, 32)


def test_layout_and_meta(small):
    cfg, root = small
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    assert meta["splits"] == {"train": ["scene_0000", "scene_0001", "scene_0002"], "test": ["scene_0003", "scene_0004"]}
    scene_dir = root / "test" / "scene_0004"
    for t in range(3):
        for f in (f"frame_{t:02d}.raw.rmt", f"frame_{t:02d}.srgb.rmt", f"flow_{t:02d}.rmt"):
            assert (scene_dir / f).is_file()
    sm = json.loads((scene_dir / "meta.json").read_text(encoding="utf-8"))
    assert sm["seed"] == scene_seed(7, 4) and sm["sampling_stride"] == 9 and sm["mask"] == "mask.rmt"
    assert set(sm["isp"]) == {"wb_gains", "ccm", "gamma", "ltm_strength", "ltm_radius"}
    assert not list(root.rglob(".scene_*"))


def test_reload_is_bit_identical(small):
    cfg, root = small
    for split, offset in (("train", 0), ("test", 3)):
        for i, loaded in enumerate(load_split(root, split)):
            fresh = build_scene(cfg, offset + i)
            for key in ("raw", "srgb", "flow", "mask"):
                assert getattr(loaded, key).tobytes() == getattr(fresh, key).tobytes()
                assert getattr(loaded, key).dtype == np.float32


def test_seeds_disjoint_between_splits(small):
    _, root = small
    seeds = {s: {sc.meta["seed"] for sc in load_split(root, s)} for s in ("train", "test")}
    assert not seeds["train"] & seeds["test"]
    assert len(seeds["train"]) == 3 and len(seeds["test"]) == 2


def test_srgb_is_8bit(small):
    _, root = small
    s = load_split(root, "train")[0]
    q = s.srgb.astype(np.float64) * 255
    np.testing.assert_allclose(q, np.rint(q), atol=1e-4)


def test_overwrite_guard(tmp_path):
    cfg = DatasetConfig(scenes=1, test_fraction=0.0, frames=1, size=8)
    make_dataset(tmp_path / "d", cfg)
    with pytest.raises(ConfigurationError, match="refusing"):
        make_dataset(tmp_path / "d", cfg)
    make_dataset(tmp_path / "d", cfg, overwrite=True)
    with pytest.raises(LoadError):
        load_split(tmp_path / "d", "val")
    with pytest.raises(ConfigurationError):
        DatasetConfig(scenes=0).split_counts()


def test_batches(small):
    _, root = small
    scenes = load_split(root, "train")
    video = make_batch(sample_units(scenes, "video")[:2], "video")
    assert video.x.shape == (2, 3, 3, 16, 16) and video.y.shape == (2, 4, 3, 16, 16)
    assert video.meta.kind == "video" and video.meta.flow.shape == (2, 3, 2, 16, 16)
    assert torch.equal(video.meta.raw_ref, video.y[:, :, 0])
    units = sample_units(scenes, "image")
    assert len(units) == 9
    img = image_batch(units[:2])
    assert img.x.shape == (2, 3, 1, 16, 16) and img.meta.mask.shape == (2, 1, 16, 16)
    on = img.meta.mask.bool().expand(-1, 4, -1, -1)
    assert torch.equal(img.meta.raw_ref[on], img.y[:, :, 0][on])
    assert not img.meta.raw_ref[~on].any()
    assert img.names[1] == "scene_0000/frame_01"
    with pytest.raises(ConfigurationError):
        make_batch(units[:1], "stereo")
