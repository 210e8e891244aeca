import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esdnet.evalkit import (
    confusion_from_counts,
    confusion_metrics,
    configs_for,
    denoising_score,
    extract_features,
    few_shot_curve,
    fit_predict_probe,
    recon_metrics,
    stratified_subsample,
)
from esdnet.evalkit.forest import DecisionTree, RandomForest, gini
from esdnet.model import ESDNet, ModelConfig
from esdnet.synthdata import CLASS_NAMES, DatasetConfig, generate_dataset
from esdnet.training import TrainConfig

# counts as printed: rows reference, columns predicted, class order as CLASS_NAMES
TABLE5 = np.array([
    [2048, 154, 808, 247, 3, 0, 2, 51, 0],
    [116, 8793, 449, 320, 7, 78, 0, 4, 0],
    [362, 596, 4247, 780, 33, 225, 5, 387, 0],
    [176, 676, 907, 2669, 5, 58, 3, 185, 0],
    [3, 16, 24, 3, 1340, 22, 0, 24, 0],
    [6, 69, 165, 3, 18, 1196, 0, 71, 0],
    [57, 18, 75, 25, 1, 0, 54, 42, 0],
    [5, 7, 203, 108, 24, 50, 0, 5221, 7],
    [0, 0, 1, 0, 5, 0, 0, 20, 118],
])
TABLE6 = np.array([
    [2384, 136, 609, 141, 3, 0, 9, 31, 0],
    [72, 8902, 412, 319, 7, 46, 5, 4, 0],
    [322, 515, 4661, 592, 25, 196, 8, 316, 0],
    [96, 683, 923, 2766, 2, 49, 1, 159, 0],
    [3, 15, 35, 1, 1334, 22, 1, 21, 0],
    [0, 65, 208, 4, 12, 1159, 0, 80, 0],
    [24, 24, 70, 19, 2, 0, 104, 29, 0],
    [7, 7, 242, 91, 12, 49, 1, 5210, 6],
    [0, 0, 0, 0, 3, 0, 0, 31, 110],
])
# printed PA / UA rows, in percent
TABLE5_PA = [61.82, 90.03, 64.01, 57.04, 93.58, 78.27, 19.85, 92.82, 81.94]
TABLE5_UA = [73.86, 85.13, 61.74, 64.24, 93.31, 73.42, 84.38, 86.94, 94.40]
TABLE6_PA = [71.96, 91.14, 70.25, 59.12, 93.16, 75.85, 38.24, 92.62, 76.39]
TABLE6_UA = [81.98, 86.03, 65.10, 70.33, 95.29, 76.20, 80.62, 88.59, 94.83]


@pytest.mark.parametrize("counts,oa,pa,ua", [
    (TABLE5, 76.92, TABLE5_PA, TABLE5_UA),
    (TABLE6, 79.74, TABLE6_PA, TABLE6_UA),
])
def test_printed_confusion_tables(counts, oa, pa, ua):
    cm = confusion_from_counts(counts, CLASS_NAMES)
    assert abs(100 * cm.oa - oa) <= 0.01
    np.testing.assert_allclose(100 * cm.pa, pa, atol=0.01)
    np.testing.assert_allclose(100 * cm.ua, ua, atol=0.01)


def test_crop_ratios_by_hand():
    cm = confusion_from_counts(TABLE6)
    assert cm.pa[0] == 2384 / 3313
    assert cm.ua[0] == 2384 / 2908


def test_confusion_csv_layout():
    text = confusion_from_counts(TABLE6, CLASS_NAMES).to_csv().splitlines()
    assert text[0].startswith("Class,crop,forest")
    assert text[1].endswith("71.96%")
    assert text[-1].endswith("79.74%")


def test_confusion_from_labels():
    ref = [0, 0, 1, 1, 2]
    pred = [0, 1, 1, 1, 0]
    cm = confusion_metrics(ref, pred, 3)
    assert cm.counts.tolist() == [[1, 1, 0], [0, 2, 0], [1, 0, 0]]
    assert cm.oa == 3 / 5
    np.testing.assert_allclose(cm.pa, [0.5, 1.0, 0.0])
    np.testing.assert_allclose(cm.ua, [0.5, 2 / 3, 0.0])
    perfect = confusion_metrics(ref, ref, 3)
    assert perfect.oa == 1.0 and np.all(perfect.pa == 1) and np.all(perfect.ua == 1)
    with pytest.raises(ValueError):
        confusion_metrics([0, 3], [0, 1], 3)


def brute_force_recon(x, xh):
    """Scalar-loop reference: one pass per band with running sums."""
    nb = x.shape[-1]
    a = x.reshape(-1, nb)
    b = xh.reshape(-1, nb)
    n = a.shape[0]
    out = []
    for j in range(nb):
        sa = sb = sab = saa = sbb = se = sq = 0.0
        for i in range(n):
            u, v = float(a[i, j]), float(b[i, j])
            sa += u
            sb += v
            se += abs(v - u)
            sq += (v - u) ** 2
        ma, mb = sa / n, sb / n
        for i in range(n):
            u, v = float(a[i, j]) - ma, float(b[i, j]) - mb
            sab += u * v
            saa += u * u
            sbb += v * v
        out.append((se / n, (sq / n) ** 0.5, sab / (saa * sbb) ** 0.5))
    return np.array(out)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 6), days=st.integers(2, 20))
def test_recon_metrics_match_brute_force(seed, n, days):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, days, 6))
    xh = x + rng.normal(scale=0.05, size=x.shape)
    m = recon_metrics(x, xh)
    ref = brute_force_recon(x, xh)
    np.testing.assert_allclose(m.mae, ref[:, 0], rtol=1e-12)
    np.testing.assert_allclose(m.rmse, ref[:, 1], rtol=1e-12)
    np.testing.assert_allclose(m.cc, ref[:, 2], rtol=1e-12)
    assert np.all(m.rmse >= m.mae) and np.all(np.abs(m.cc) <= 1)


def test_recon_metrics_trivial_cases():
    x = np.random.default_rng(0).uniform(size=(3, 10, 6))
    m = recon_metrics(x, x)
    assert m.mean_mae == 0 and m.mean_rmse == 0 and m.mean_cc == 1
    m = recon_metrics(x, x + 0.01)
    np.testing.assert_allclose(m.mae, 0.01)
    np.testing.assert_allclose(m.rmse, 0.01)
    np.testing.assert_allclose(m.cc, 1.0)
    with pytest.raises(ValueError):
        recon_metrics(x[:1, :1], x[:1, :1])
    with pytest.raises(ValueError):
        recon_metrics(x, x[:, :5])
    assert m.to_csv().splitlines()[0] == "Band,MAE,RMSE,CC"


def blobs(seed=0, n=200, dim=5):
    rng = np.random.default_rng(seed)
    X = np.concatenate([rng.normal(-3, 1, size=(n, dim)), rng.normal(3, 1, size=(n, dim))])
    y = np.repeat([0, 1], n)
    return X, y


@pytest.mark.parametrize("algorithm,hyper", [
    ("linear", {}), ("ridge", {}), ("knn", {"k": 1}), ("knn", {"k": 3}), ("random_forest", {"n_trees": 25}),
])
def test_probes_on_separable_blobs(algorithm, hyper):
    X, y = blobs(0)
    Xt, yt = blobs(1)
    res = fit_predict_probe(X, y, Xt, yt, algorithm, 2, "blobs", **hyper)
    assert res.oa >= 0.99
    assert res.confusion.total == len(yt)


def test_knn_self_match_is_perfect():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(150, 4))
    y = rng.integers(0, 3, size=150)
    assert fit_predict_probe(X, y, X, y, "knn", 3, k=1).oa == 1.0


def test_knn_ties_go_to_smallest_class():
    X = np.array([[-1.0], [1.0]])
    res = fit_predict_probe(X, [1, 0], np.array([[0.0]]), [0], "knn", 2, k=2)
    assert res.oa == 1.0


def test_probe_rejects_missing_class():
    X, y = blobs(0, n=5)
    with pytest.raises(ValueError, match="no samples"):
        fit_predict_probe(X, y, X, y, "linear", 3)
    with pytest.raises(ValueError, match="unknown"):
        fit_predict_probe(X, y, X, y, "svm", 2)


def test_gini_and_tree():
    assert gini(np.array([[5, 5]]))[0] == pytest.approx(0.5)
    assert gini(np.array([[4, 0]]))[0] == 0.0
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([0, 0, 1, 1])
    tree = DecisionTree(2, max_features=None, rng=np.random.default_rng(0)).fit(X, y)
    assert tree.predict(X).tolist() == [0, 0, 1, 1]


def test_forest_deterministic():
    X, y = blobs(3, n=50)
    a = RandomForest(2, n_trees=10, seed=4).fit(X, y).predict(X)
    b = RandomForest(2, n_trees=10, seed=4).fit(X, y).predict(X)
    assert np.array_equal(a, b)


def test_stratified_subsample():
    y = np.repeat(np.arange(4), [10, 20, 30, 40])
    rng = np.random.default_rng(0)
    idx = stratified_subsample(y, 20, rng)
    assert len(idx) == 20 and len(set(idx)) == 20
    assert np.bincount(y[idx]).tolist() == [2, 4, 6, 8]
    assert np.array_equal(stratified_subsample(y, 100, rng), np.arange(100))
    with pytest.raises(ValueError):
        stratified_subsample(y, 3, rng)


def test_few_shot_full_pool_equals_probe():
    X, y = blobs(0, n=30)
    X = X + np.random.default_rng(9).normal(scale=3, size=X.shape)
    Xt, yt = blobs(1, n=30)
    curve = few_shot_curve({"f": (X, Xt)}, y, yt, [len(y)], repeats=1, seed=3)
    assert curve["f"][0] == fit_predict_probe(X, y, Xt, yt, "linear", 2).oa


def test_few_shot_deterministic_and_roughly_monotone():
    train, val = generate_dataset(DatasetConfig(n_train_per_class=60, n_val_per_class=30))
    R = extract_features(train, None, "composite")
    Rv = extract_features(val, None, "composite")
    args = ({"c": (R, Rv)}, train.annual_class, val.annual_class, [27, 90, 540])
    a = few_shot_curve(*args, repeats=5, seed=1)
    assert a == few_shot_curve(*args, repeats=5, seed=1)
    c = a["c"]
    assert c[0] <= c[1] + 0.02 and c[1] <= c[2] + 0.02


def test_feature_modes():
    train, _ = generate_dataset(DatasetConfig(n_train_per_class=2, n_val_per_class=1))
    model = ESDNet(ModelConfig(n_res=1, hidden=16))
    for p in model.parameters().values():
        if p.data.ndim == 3:
            p.data *= np.sqrt(6.0)
    codes = extract_features(train, model, "codes")
    pooled = extract_features(train, model, "pooled")
    assert codes.shape == (18, 48)
    assert pooled.shape == (18, 4)
    np.testing.assert_allclose(pooled, codes.reshape(18, 12, 4).mean(axis=1), atol=1e-12)
    assert np.array_equal(codes, extract_features(train, model, "codes"))
    assert extract_features(train, None, "raw").shape == (18, 365 * 6)
    assert extract_features(train, None, "composite").shape == (18, 24)
    with pytest.raises(ValueError):
        extract_features(train, None, "codes")


def test_denoising_score_trivial():
    rng = np.random.default_rng(0)
    clean = rng.uniform(size=(365, 6))
    corrupted = clean.copy()
    days = np.array([3, 50, 200])
    corrupted[days] += 0.3
    assert denoising_score(clean, corrupted, clean, days) == 0.0
    assert denoising_score(clean, corrupted, corrupted, days) == 1.0
    with pytest.raises(ValueError):
        denoising_score(clean, corrupted, clean, np.array([], dtype=int))


def test_ablation_configs():
    mc, tc = ModelConfig(n_res=2), TrainConfig()
    assert configs_for("temporal_dim", 24, mc, tc)[0].t_lat == 24
    assert configs_for("codebook", 256, mc, tc)[0].levels == (4, 4, 4, 4)
    assert configs_for("residual_layers", 5, mc, tc)[0].n_res == 5
    assert configs_for("supervision", "without", mc, tc)[1].beta == 0.0
    with pytest.raises(ValueError, match="codebook"):
        configs_for("codebook", 300, mc, tc)
    with pytest.raises(ValueError, match="temporal_dim"):
        configs_for("temporal_dim", 7, mc, tc)
    with pytest.raises(ValueError, match="knob"):
        configs_for("depth", 1, mc, tc)
