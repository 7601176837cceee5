import hashlib
import json
from math import comb

import numpy as np
import pytest
import torch
from PIL import Image

from dpmkit.data import (SyntheticSpec, _plan, augment, composite_images, generate_synthetic, ingest_folder,
                         load_manifest, load_split, patch_pixel_mask, random_erasing, render_synthetic,
                         to_tensor, to_uint8)
from dpmkit.errors import ValidationError


def _binomial_interval(n, p, level=0.99):
    cdf, lo, hi = 0.0, None, None
    for k in range(n + 1):
        cdf += comb(n, k) * p ** k * (1 - p) ** (n - k)
        if lo is None and cdf >= (1 - level) / 2:
            lo = k
        if hi is None and cdf >= 1 - (1 - level) / 2:
            hi = k
    return lo, hi


def test_counts_and_dense_ids(tmp_path):
    spec = SyntheticSpec(num_identities=10, images_per_identity=8, num_test_identities=2,
                         image_height=16, image_width=8)
    m = generate_synthetic(spec, tmp_path)
    train = m.split("train")
    assert len(train) == 80
    assert sorted({r.identity_id for r in train}) == list(range(10))


def test_deterministic_bytes(tmp_path):
    spec = SyntheticSpec(num_identities=3, images_per_identity=4, num_test_identities=2, seed=7,
                         image_height=16, image_width=8)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_occlusion_rate_binomial():
    spec = SyntheticSpec(num_identities=1, num_test_identities=200, query_per_identity=2,
                         gallery_per_identity=1, occlusion_rate=0.5, seed=11)
    occ = [o for split, *_, o in _plan(spec) if split == "query"]
    lo, hi = _binomial_interval(400, 0.5)
    assert len(occ) == 400
    assert (lo, hi) == (174, 226)
    assert lo <= sum(occ) <= hi


def test_occluded_flag_changes_pixels():
    spec = SyntheticSpec(num_identities=2, images_per_identity=2, num_test_identities=4, occlusion_rate=1.0)
    d = render_synthetic(spec)
    assert d["query"].occluded.all() and not d["gallery"].occluded.any() and not d["train"].occluded.any()


def test_two_images_per_identity_per_camera():
    spec = SyntheticSpec(num_identities=5, images_per_identity=6, num_cameras=3)
    rows = [(k, c) for split, k, c, *_ in _plan(spec) if split == "train"]
    for k in range(5):
        for c in range(3):
            assert rows.count((k, c)) >= 2


@pytest.mark.parametrize("kw", [{"occlusion_rate": 1.5}, {"train_occlusion_rate": -0.1},
                                {"occluder_kinds": ["blobs"]}, {"num_identities": 0}])
def test_spec_validation(kw):
    with pytest.raises(ValidationError):
        SyntheticSpec(**kw)


def _write_manifest(tmp_path, rows):
    for r in rows:
        Image.new("RGB", (4, 8)).save(tmp_path / r["path"])
    p = tmp_path / "m.jsonl"
    p.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return p


def _row(path, pid, cam, split):
    return {"path": path, "identity_id": pid, "camera_id": cam, "split": split}


def test_manifest_valid(tmp_path):
    p = _write_manifest(tmp_path, [_row("a.png", 0, 0, "train"), _row("b.png", 1, 0, "train"),
                                   _row("q.png", 5, 0, "query"), _row("g.png", 5, 1, "gallery")])
    m = load_manifest(p)
    assert len(m.records) == 4
    d = load_split(m, "train", size=(8, 4))
    assert d.images.shape == (2, 3, 8, 4)


@pytest.mark.parametrize("rows,match", [
    ([_row("a.png", 0, 0, "train"), _row("a.png", 1, 0, "train")], "record 2: duplicate"),
    ([_row("a.png", 0, 0, "train"), _row("b.png", 2, 0, "train")], "dense"),
    ([_row("a.png", 0, 0, "train"), _row("q.png", 3, 0, "query")], r"record 2 \(q.png\)"),
    ([_row("a.png", 0, 0, "valid")], "record 1"),
])
def test_manifest_errors(tmp_path, rows, match):
    p = _write_manifest(tmp_path, rows)
    with pytest.raises(ValidationError, match=match):
        load_manifest(p)


def test_manifest_dangling_and_malformed(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps(_row("missing.png", 0, 0, "train")) + "\n")
    with pytest.raises(ValidationError, match="dangling"):
        load_manifest(p)
    p.write_text('{"path": "x"}\n')
    with pytest.raises(ValidationError, match="record 1"):
        load_manifest(p)


def test_ingest_folder(tmp_path):
    for split, names in {"train": ["0007_c1_0.png", "0003_c2_1.png", "-1_c1_x.png"],
                         "query": ["0100_c1_0.png"], "gallery": ["0100_c2_0.jpg", "junk.txt"]}.items():
        (tmp_path / split).mkdir()
        for n in names:
            (tmp_path / split / n).write_bytes(b"")
    m = ingest_folder(tmp_path, tmp_path / "manifest.jsonl")
    train = {r.path: r.identity_id for r in m.split("train")}
    assert train == {"train/0003_c2_1.png": 0, "train/0007_c1_0.png": 1}
    assert [r.identity_id for r in m.split("query")] == [2] == [r.identity_id for r in m.split("gallery")]
    assert (tmp_path / "manifest.jsonl").exists()


def test_tensor_roundtrip():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (2, 5, 4, 3), dtype=np.uint8)
    t = to_tensor(img)
    assert t.shape == (2, 3, 5, 4) and t.min() >= -1 and t.max() <= 1
    assert np.array_equal(to_uint8(t), img)


def test_augment_shapes_and_determinism():
    x = torch.rand(4, 3, 8, 6) * 2 - 1
    a = augment(x, torch.Generator().manual_seed(0), erase_prob=0.5)
    b = augment(x, torch.Generator().manual_seed(0), erase_prob=0.5)
    assert a.shape == x.shape and torch.equal(a, b)
    assert torch.equal(random_erasing(x, torch.Generator().manual_seed(0), prob=0.0), x)


def test_composite_uses_target_where_candidate_salient():
    t = np.full((4, 4, 3), 200, np.uint8)
    c = np.zeros((4, 4, 3), np.uint8)
    out = composite_images(t, c, [1, 0, 0, 1], (2, 2), 2, 2)
    m = patch_pixel_mask([1, 0, 0, 1], (2, 2), (4, 4), 2, 2)
    assert m.sum() == 8
    assert (out[m] == 200).all() and (out[~m] == 0).all()
