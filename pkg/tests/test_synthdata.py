import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esdnet.evalkit.probes import knn_predict
from esdnet.synthdata import (
    CLASS_NAMES,
    DEFAULT_PROFILES,
    DatasetConfig,
    dump_dataset,
    generate_dataset,
    generate_sample,
    inject_cloud_spikes,
    load_dataset,
    monthly_means,
    save_dataset_files,
)
from esdnet.training import normalized_difference

BY_NAME = {p.name: p for p in DEFAULT_PROFILES}


@pytest.fixture(scope="module")
def data():
    return generate_dataset(DatasetConfig())


def test_nine_classes():
    assert CLASS_NAMES == ("crop", "forest", "grass", "shrub", "water", "tundra", "impervious", "bareland", "snow_ice")


def test_stratification_exact(data):
    train, val = data
    assert len(train) == len(val) == 900
    assert np.bincount(train.annual_class).tolist() == [100] * 9
    assert np.bincount(val.annual_class).tolist() == [100] * 9


def test_splits_draw_disjoint_streams(data):
    train, val = data
    assert not np.array_equal(train.reflectance[0], val.reflectance[0])


def test_regeneration_bit_identical(data):
    again, _ = generate_dataset(DatasetConfig())
    assert dump_dataset(again) == dump_dataset(data[0])


def test_sample_determinism():
    a = generate_sample(BY_NAME["crop"], 17)
    b = generate_sample(BY_NAME["crop"], 17)
    assert a.reflectance.tobytes() == b.reflectance.tobytes()
    assert np.array_equal(a.water, b.water)


@settings(max_examples=30, deadline=None)
@given(cls=st.sampled_from(CLASS_NAMES), seed=st.integers(0, 2**32 - 1))
def test_signals_inside_unit_interval(cls, seed):
    s = generate_sample(BY_NAME[cls], seed)
    for arr in (s.reflectance, s.clean):
        assert arr.min() >= 0.0 and arr.max() <= 1.0
    c = inject_cloud_spikes(s.reflectance, 0.1, seed)
    assert c.reflectance.min() >= 0.0 and c.reflectance.max() <= 1.0


def test_labels_follow_class():
    crop = generate_sample(BY_NAME["crop"], 0)
    imp = generate_sample(BY_NAME["impervious"], 0)
    tundra = generate_sample(BY_NAME["tundra"], 0)
    assert (crop.crop, crop.impervious) == (1, 0)
    assert (imp.crop, imp.impervious) == (0, 1)
    assert tundra.annual_class == 5 and tundra.static_class == 2
    assert crop.water.shape == (12,) and set(np.unique(crop.water)) <= {0, 1}


def test_water_signature():
    s = [generate_sample(BY_NAME["water"], i) for i in range(20)]
    refl = np.stack([x.reflectance for x in s])
    assert refl[..., 3:].mean() < 0.1
    ndwi = normalized_difference(refl[..., 1], refl[..., 3])
    assert np.all(monthly_means(ndwi) > 0)


def test_impervious_is_flat():
    def band_var(name):
        return np.mean([generate_sample(BY_NAME[name], i).clean.var(axis=0) for i in range(20)], axis=0)

    flat = band_var("impervious")
    for veg in ("crop", "forest", "grass"):
        assert flat.mean() < band_var(veg).mean()


def test_clouds_rate_zero_is_identity():
    x = generate_sample(BY_NAME["forest"], 1).reflectance
    c = inject_cloud_spikes(x, 0.0, 3)
    assert np.array_equal(c.reflectance, x)
    assert c.corrupted_days.size == 0


def test_cloud_count_and_brightness():
    x = generate_sample(BY_NAME["forest"], 1).reflectance
    c = inject_cloud_spikes(x, 0.05, 3)
    # seeded Bernoulli draw per day; count is exact for this seed
    assert 8 <= len(c.cloud_days) <= 30
    assert len(c.shadow_days) == len(c.cloud_days)
    assert not set(c.cloud_days) & set(c.shadow_days)
    clean_days = np.setdiff1d(np.arange(365), c.corrupted_days)
    assert c.reflectance[c.cloud_days, 0].min() > x[clean_days, 0].max()
    # shadows pull every band toward 0.05
    assert np.all(np.abs(c.reflectance[c.shadow_days] - 0.05) <= np.abs(x[c.shadow_days] - 0.05) + 1e-7)


def test_cloud_rate_rejected():
    with pytest.raises(ValueError):
        inject_cloud_spikes(np.zeros((365, 6)), 1.5, 0)


def test_empty_class_list_rejected():
    with pytest.raises(ValueError):
        generate_dataset(DatasetConfig(classes=()))
    with pytest.raises(ValueError):
        generate_dataset(DatasetConfig(classes=("cloud",)))


def test_dataset_file_roundtrip(data, tmp_path):
    train, _ = data
    path = tmp_path / "train.esds"
    save_dataset_files(train, path, DatasetConfig())
    back = load_dataset(path.read_bytes())
    assert path.read_bytes()[:4] == b"ESDS"
    assert (tmp_path / "train.esds.json").exists()
    for k in ("reflectance", "clean", "static", "annual_class", "static_class", "water"):
        assert np.array_equal(getattr(back, k), getattr(train, k))
    assert back.class_names == CLASS_NAMES
    assert dump_dataset(back) == path.read_bytes()


def test_dataset_garbage_rejected(data):
    buf = dump_dataset(data[0].subset(np.arange(3)))
    with pytest.raises(ValueError, match="magic"):
        load_dataset(b"XXXX" + buf[4:])
    with pytest.raises(ValueError, match="truncated"):
        load_dataset(buf[:-5])


def test_separability_oracle(data):
    """1-NN on clean series must clear 90%: the classes are learnable by design."""
    train, val = data
    X = train.clean.reshape(len(train), -1)
    Xv = val.clean.reshape(len(val), -1)
    pred = knn_predict(X, train.annual_class, Xv, 1, 9)
    assert np.mean(pred == val.annual_class) > 0.9
