import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biomeshift.autodiff import SENTINEL
from biomeshift.data import (SynthBiomeParams, biome_family, crop_offsets, default_signatures, generate_biome,
                             load_biome_dir, make_splits, read_dataset, split_tile, to_images, write_dataset)
from biomeshift.errors import DataError, IntegrityError, MagicError, ParameterError, TruncationError
from biomeshift.shift import frechet_distance, spectral_stats


def test_crop_offsets_examples():
    assert crop_offsets(510, 256) == [0, 254]
    assert 2 * 256 - 510 == 2  # overlap strip
    assert crop_offsets(512, 256) == [0, 256]
    with pytest.raises(ParameterError):
        split_tile(np.zeros((200, 200, 1)), np.zeros((200, 200), np.uint8), 256)


def test_split_tile_overlap_is_shared():
    image = np.arange(10 * 10, dtype=np.float32).reshape(10, 10, 1)
    crops = split_tile(image, np.zeros((10, 10), np.uint8), 6)
    assert len(crops) == 4
    # top-left and top-right crops share the 2-pixel strip at columns 4..5
    np.testing.assert_array_equal(crops[0][0][:, 4:6], crops[1][0][:, 0:2])


def test_split_ten_tiles():
    ds = generate_biome(_params(), 10, 16)
    tr, va = make_splits(ds, 0.8, seed=3)
    assert (len(tr), len(va)) == (8, 2)


def test_split_hygiene_over_many_seeds():
    ds = generate_biome(_params(), 7, 8)
    for seed in range(1000):
        tr, va = make_splits(ds, 0.8, seed)
        assert not set(tr.tile_ids) & set(va.tile_ids)
        assert sorted(tr.tile_ids + va.tile_ids) == sorted(ds.tile_ids)
    a, b = make_splits(ds, 0.8, 5), make_splits(ds, 0.8, 5)
    assert a[0].tile_ids == b[0].tile_ids


def test_crops_never_leak_between_splits():
    ds = generate_biome(_params(), 6, 16)
    tr, va = make_splits(ds, 0.5, 0)
    assert not set(to_images(tr, 8).source_tiles) & set(to_images(va, 8).source_tiles)


def _params(**kw):
    base = dict(biome_id="b", class_priors=np.full(5, 0.2), signatures=default_signatures(5, 4), seed=11)
    base.update(kw)
    return SynthBiomeParams(**base)


def test_generator_deterministic():
    a = generate_biome(_params(), 3, 16)
    b = generate_biome(_params(), 3, 16)
    assert a.equals(b)
    assert a.images.tobytes() == b.images.tobytes()


def test_labels_valid_and_unlabeled_fraction():
    ds = generate_biome(_params(unlabeled_fraction=0.1), 100, 32)
    lab = ds.labels
    assert set(np.unique(lab).tolist()) <= set(range(5)) | {SENTINEL}
    assert abs((lab == SENTINEL).mean() - 0.1) <= 0.02


def test_offset_sweep_monotone():
    direction = np.array([1.0, -1.0, 0.5, 0.0])
    base = spectral_stats(generate_biome(_params(), 4, 16).images)
    dist_mean, dist_frechet = [], []
    for step in range(1, 6):
        stats = spectral_stats(generate_biome(_params(spectral_offset=0.1 * step * direction), 4, 16).images)
        dist_mean.append(np.linalg.norm(stats[0] - base[0]))
        dist_frechet.append(frechet_distance(*base, *stats))
    assert all(a < b for a, b in zip(dist_mean, dist_mean[1:]))
    assert all(a < b for a, b in zip(dist_frechet, dist_frechet[1:]))


def test_family_shift_grows_with_index():
    fam = biome_family(4, seed=2, tilt_step=0.0)
    means = [spectral_stats(generate_biome(p, 3, 16).images)[0] for p in fam]
    d = [np.linalg.norm(m - means[0]) for m in means]
    assert all(a < b for a, b in zip(d, d[1:]))


def test_param_validation():
    with pytest.raises(ParameterError):
        _params(class_priors=[0.5, 0.6, 0, 0, 0])
    with pytest.raises(ParameterError):
        _params(noise_scale=0.0)
    with pytest.raises(ParameterError):
        _params(signatures=np.zeros((3, 4)))


# ------------------------------------------------------------------ container

def test_round_trip(tmp_path, tiny_dataset):
    write_dataset(tiny_dataset, tmp_path / "a.svds")
    back = read_dataset(tmp_path / "a.svds")
    assert back.equals(tiny_dataset)
    assert back.images.tobytes() == tiny_dataset.images.tobytes()
    assert back.class_names == ["a", "b", "c"]


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 3), st.text(min_size=1, max_size=8))
def test_round_trip_property(tmp_path_factory, n, size, channels, name):
    from biomeshift.data import TileDataset

    rng = np.random.default_rng(n * 100 + size)
    ds = TileDataset(biome_id=name, tile_ids=[f"{name}/{i}" for i in range(n)],
                     images=rng.standard_normal((n, size, size, channels)).astype(np.float32),
                     labels=rng.integers(0, 4, (n, size, size)).astype(np.uint8), n_classes=4)
    path = tmp_path_factory.mktemp("rt") / "x.svds"
    write_dataset(ds, path)
    assert read_dataset(path).equals(ds)


def test_truncated_file(tmp_path, tiny_dataset_path):
    raw = tiny_dataset_path.read_bytes()
    for cut in (3, 10, 40, len(raw) - 1):
        p = tmp_path / f"t{cut}.svds"
        p.write_bytes(raw[:cut])
        with pytest.raises((TruncationError, MagicError)):
            read_dataset(p)


def _with_tile_count(raw: bytes, n_tiles: int) -> bytes:
    (meta_len,) = struct.unpack_from("<Q", raw, 8)
    meta = json.loads(raw[16:16 + meta_len])
    meta["n_tiles"] = n_tiles
    blob = json.dumps(meta).encode()
    return raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + meta_len:]


def test_declared_count_mismatch(tmp_path, tiny_dataset_path):
    raw = tiny_dataset_path.read_bytes()
    (tmp_path / "more.svds").write_bytes(_with_tile_count(raw, 4))
    with pytest.raises(IntegrityError):
        read_dataset(tmp_path / "more.svds")
    (tmp_path / "fewer.svds").write_bytes(_with_tile_count(raw, 2))
    with pytest.raises(IntegrityError):
        read_dataset(tmp_path / "fewer.svds")


def test_load_biome_dir(tmp_path, tiny_dataset):
    write_dataset(tiny_dataset, tmp_path / "x.svds")
    assert list(load_biome_dir(tmp_path)) == ["tiny"]
    with pytest.raises(DataError):
        load_biome_dir(tmp_path / "nothing")
