import json

import numpy as np
import pytest
from scipy.stats import chisquare

from synthloc.raster import Raster, read_image, read_mask, write_image
from synthloc.splicer import (
    Manifest, SpliceError, build_dataset, gen_toy_pair, plan_dataset, read_manifest, splice,
    write_toy_dataset,
)


def test_splice_composition(rng):
    for seed in range(30):
        host = Raster(rng.random((64, 80)))
        donor = Raster(rng.random((50, 40)))
        img, mask, (top, left, dtop, dleft) = splice(host, donor, 16, np.random.default_rng(seed))
        inside = mask.labels.astype(bool)
        assert inside.sum() == 256
        assert np.array_equal(img.pixels[~inside], host.pixels[~inside])
        assert np.array_equal(img.pixels[top:top + 16, left:left + 16],
                              donor.pixels[dtop:dtop + 16, dleft:dleft + 16])
        assert inside[top:top + 16, left:left + 16].all()


def test_splice_errors(rng):
    host = Raster(rng.random((32, 32)))
    with pytest.raises(SpliceError):
        splice(host, Raster(rng.random((32, 32))), 40, rng)
    with pytest.raises(SpliceError):
        splice(host, Raster(rng.random((8, 8))), 16, rng)
    with pytest.raises(SpliceError):
        splice(host, Raster(rng.random((32, 32, 3))), 8, rng)


def test_placement_uniform():
    host = Raster(np.zeros((20, 20)))
    donor = Raster(np.ones((8, 8)))
    rng = np.random.default_rng(99)
    tops, lefts = [], []
    for _ in range(10_000):
        _, _, (t, l, _, _) = splice(host, donor, 8, rng)
        tops.append(t)
        lefts.append(l)
    for vals in (tops, lefts):
        counts = np.bincount(vals, minlength=13)
        assert len(counts) == 13
        assert chisquare(counts).pvalue > 0.001


def test_plan_balanced_and_deterministic():
    hosts = [f"h{i}.png" for i in range(7)]
    donors = {"a": ["a0.png", "a1.png"], "b": ["b0.png"], "c": ["c0.png", "c1.png", "c2.png"]}
    m1 = plan_dataset(hosts, donors, 30, 16, seed=3)
    m2 = plan_dataset(hosts, donors, 30, 16, seed=3)
    assert m1 == m2
    assert m1.group_counts == {"a": 10, "b": 10, "c": 10}
    assert sorted(r.group for r in m1.records) == ["a"] * 10 + ["b"] * 10 + ["c"] * 10
    # hosts are used without replacement until the pool is exhausted
    used = [r.host_id for r in m1.records]
    assert len(set(used[:7])) == 7
    assert plan_dataset(hosts, donors, 30, 16, seed=4) != m1


def test_plan_errors():
    with pytest.raises(SpliceError):
        plan_dataset([], {"a": ["x"]}, 2, 8, 0)
    with pytest.raises(SpliceError):
        plan_dataset(["h"], {"a": ["x"], "b": ["y"]}, 3, 8, 0)
    with pytest.raises(SpliceError):
        plan_dataset(["h"], {"a": []}, 2, 8, 0)


def _pool(tmp_path, name, n, seed, size=64):
    d = tmp_path / name
    d.mkdir()
    rng = np.random.default_rng(seed)
    for i in range(n):
        write_image(Raster(rng.random((size, size))), d / f"{i:03d}.png")
    return d


def test_build_dataset(tmp_path):
    hosts = _pool(tmp_path, "hosts", 4, 0)
    donors = {"g1": str(_pool(tmp_path, "d1", 2, 1)), "g2": str(_pool(tmp_path, "d2", 2, 2))}
    man = build_dataset(hosts, donors, 6, seed=5, out_dir=tmp_path / "out", side=16)
    assert man.group_counts == {"g1": 3, "g2": 3}
    assert read_manifest(tmp_path / "out" / "manifest.json") == man
    for rec in man.records:
        img = read_image(tmp_path / "out" / "images" / f"{rec.output_id}.png")
        mask = read_mask(tmp_path / "out" / "masks" / f"{rec.output_id}.png")
        host = read_image(hosts / rec.host_id)
        donor = read_image(tmp_path / ("d1" if rec.group == "g1" else "d2") / rec.donor_id)
        m = mask.labels.astype(bool)
        assert m.sum() == 256
        assert np.array_equal(img.pixels[~m], host.pixels[~m])
        assert np.array_equal(img.pixels[rec.top:rec.top + 16, rec.left:rec.left + 16],
                              donor.pixels[rec.donor_top:rec.donor_top + 16,
                                           rec.donor_left:rec.donor_left + 16])
    first = (tmp_path / "out" / "manifest.json").read_bytes()
    build_dataset(hosts, donors, 6, seed=5, out_dir=tmp_path / "again", side=16)
    assert (tmp_path / "again" / "manifest.json").read_bytes() == first


def test_manifest_roundtrip_and_version():
    man = plan_dataset(["h.png"], {"a": ["d.png"]}, 2, 8, 0)
    doc = man.to_dict()
    assert Manifest.from_dict(json.loads(json.dumps(doc))) == man
    with pytest.raises(SpliceError):
        Manifest.from_dict({**doc, "version": 99})


def test_toy_pair_properties():
    for seed in range(10):
        real, synth = gen_toy_pair(seed, 64)
        a, b = real.pixels[:, :, 0], synth.pixels[:, :, 0]
        assert a.shape == b.shape == (64, 64)
        assert 0 <= a.min() and a.max() <= 1 and 0 <= b.min() and b.max() <= 1
        assert np.corrcoef(a.ravel(), b.ravel())[0, 1] > 0.8
        assert np.abs(a - b).mean() > 0.01
        # the synthetic image carries a strong period-2 component
        nyq = lambda x: np.abs(np.fft.fft2(x - x.mean())[32, 32])
        assert nyq(b) > 20 * nyq(a)
    assert np.array_equal(gen_toy_pair(3)[0].pixels, gen_toy_pair(3)[0].pixels)
    with pytest.raises(SpliceError):
        gen_toy_pair(0, 30)


def test_write_toy_dataset(tmp_path):
    seeds = write_toy_dataset(3, 7, tmp_path, size=32)
    assert len(set(seeds)) == 3
    assert sorted(p.name for p in (tmp_path / "real").iterdir()) == ["00000.png", "00001.png", "00002.png"]
    assert read_image(tmp_path / "synthetic" / "00001.png").pixels.shape == (32, 32, 1)
