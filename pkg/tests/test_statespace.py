import numpy as np
import pytest

from histsde.core import TimeRescaling
from histsde.errors import (
    DegenerateColumnError,
    DuplicateKeyError,
    InsufficientDataError,
    ParseError,
    SchemaError,
)
from histsde.statespace import (
    LatentPanel,
    Panel,
    UnitObservations,
    ingest_csv,
    pca_fit,
    pca_project,
    rescale_time,
)


def write(tmp_path, text, name="panel.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def panel_from(rows, columns=("a", "b")):
    units = {}
    for uid, t, *vals in rows:
        units.setdefault(uid, []).append((t, vals))
    return Panel(
        columns=list(columns),
        units=[
            UnitObservations(u, np.array([r[0] for r in rs], float), np.array([r[1] for r in rs], float))
            for u, rs in units.items()
        ],
    )


def test_ingest_basic(tmp_path):
    p = write(tmp_path, "unit,time,x,y\nA,2001,1.0,2.0\nA,2000,0.5,1.5\nA,2002,1.5,2.5\n")
    panel = ingest_csv(p)
    assert panel.columns == ["x", "y"]
    assert len(panel.units) == 1
    u = panel.units[0]
    np.testing.assert_array_equal(u.t_obs, [2000, 2001, 2002])
    np.testing.assert_array_equal(u.values[:, 0], [0.5, 1.0, 1.5])


def test_ingest_missing_cell(tmp_path):
    p = write(tmp_path, "unit,time,x,y\nA,2000,1.0,\nA,2001,1.0,2.0\n")
    u = ingest_csv(p).units[0]
    assert len(u.t_obs) == 2
    assert np.isnan(u.values[0, 1]) and u.values[0, 0] == 1.0


def test_ingest_errors(tmp_path):
    with pytest.raises(DuplicateKeyError):
        ingest_csv(write(tmp_path, "unit,time,x\nA,1,1\nA,1,2\n"))
    with pytest.raises(ParseError) as exc:
        ingest_csv(write(tmp_path, "unit,time,x\nA,1,1\nA,2,abc\n"))
    assert exc.value.row == 3
    with pytest.raises(SchemaError, match="time"):
        ingest_csv(write(tmp_path, "unit,year,x\nA,1,1\n"))


def test_pca_identity_correlation():
    x = 2.0 * np.array([1, -1, 1, -1])
    y = np.array([1, 1, -1, -1], float)
    panel = panel_from([("A", t, xi, yi) for t, (xi, yi) in enumerate(zip(x, y))])
    # raw covariance is diag(4, 1): PC1 would explain 0.8 of raw variance
    assert np.var(x) / (np.var(x) + np.var(y)) == pytest.approx(0.8)
    model = pca_fit(panel, k=1)
    assert model.explained_variance_ratio[0] == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(np.linalg.norm(model.components[0]), 1.0)


def test_pca_perfect_correlation():
    x = np.arange(6, dtype=float)
    panel = panel_from([("A", t, xi, 3 * xi + 1) for t, xi in enumerate(x)])
    model = pca_fit(panel, k=1)
    assert abs(model.explained_variance_ratio[0] - 1.0) < 1e-10
    np.testing.assert_allclose(model.components[0], [2**-0.5, 2**-0.5], atol=1e-10)


def test_pca_anchor_and_log():
    rng = np.random.default_rng(0)
    base = rng.normal(size=200)
    a = np.exp(base + 0.1 * rng.normal(size=200))
    b = -base + 0.1 * rng.normal(size=200)
    panel = panel_from([("U", t, ai, bi) for t, (ai, bi) in enumerate(zip(a, b))])
    m1 = pca_fit(panel, k=1, log_columns=["a"], anchors=["a"])
    m2 = pca_fit(panel, k=1, log_columns=["a"], anchors=["b"])
    assert m1.components[0, 0] > 0 and m2.components[0, 1] > 0
    np.testing.assert_allclose(m1.components, -m2.components)
    assert m1.log_columns == (0,)


def test_pca_full_rank_roundtrip_and_ratios():
    rng = np.random.default_rng(4)
    raw = rng.normal(size=(50, 3)) @ np.array([[1.0, 0.3, 0.0], [0.0, 1.0, 0.5], [0.2, 0.0, 1.0]])
    raw[:, 2] = np.exp(raw[:, 2])
    panel = panel_from([("U", t, *r) for t, r in enumerate(raw)], columns=("a", "b", "c"))
    model = pca_fit(panel, k=3, log_columns=["c"])
    assert abs(model.explained_variance_ratio.sum() - 1.0) < 1e-10
    assert np.all(np.diff(model.explained_variance_ratio) <= 0)
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(3), atol=1e-10)
    back = model.inverse_transform(model.transform(raw))
    np.testing.assert_allclose(back, raw, rtol=1e-8, atol=1e-8)
    for i, a in enumerate(model.sign_anchor):
        assert model.components[i, a] >= 0


def test_pca_errors():
    with pytest.raises(InsufficientDataError):
        pca_fit(panel_from([("A", 0, 1.0, 2.0), ("A", 1, 2.0, 1.0)]), k=1)
    with pytest.raises(DegenerateColumnError):
        pca_fit(panel_from([("A", t, float(t), 5.0) for t in range(5)]), k=1)


def test_project_centering_and_gaps():
    rows = [("A", t, float(t), float(t % 3)) for t in range(2000, 2010)]
    panel = panel_from(rows)
    model = pca_fit(panel, k=1, passthrough=["b"])
    assert model.dim == 2
    latent = pca_project(model, panel)
    assert latent.gaps == []
    np.testing.assert_allclose(model.transform(model.column_means), 0.0, atol=1e-12)
    # one missing year: drop 2004 entirely and blank one value in 2007
    rows2 = [r for r in rows if r[1] != 2004]
    rows2 = [(u, t, a, (np.nan if t == 2007 else b)) for u, t, a, b in rows2]
    latent2 = pca_project(model, panel_from(rows2), nominal_interval=1.0)
    spans = [(g.t_start, g.t_end, g.missing_times) for g in latent2.gaps]
    assert spans == [(2003.0, 2005.0, (2004.0,)), (2006.0, 2008.0, (2007.0,))]
    trans = list(latent2.transitions())
    assert len(trans) == 7 - 2
    with pytest.raises(SchemaError):
        pca_project(model, Panel(columns=["a"], units=[]))


def test_rescale_time():
    lp = LatentPanel.from_arrays({"A": ([1990, 1991, 1993], [[0.0], [1.0], [2.0]])})
    same = rescale_time(lp, TimeRescaling(1.0))
    np.testing.assert_array_equal(same.times(same.units[0]), [1990, 1991, 1993])
    fast = rescale_time(lp, TimeRescaling(0.01))
    dts = [dt for _, _, dt, _, _ in fast.transitions()]
    np.testing.assert_allclose(dts, [0.01, 0.02])
    century = TimeRescaling(alpha=1.0, n_sub=1000)
    assert century.step(100.0) == pytest.approx(0.1)


def test_latent_json_roundtrip():
    lp = LatentPanel.from_arrays({"A": ([0.0, 1.0], [[0.0, 1.0], [1.0, 2.0]])}, TimeRescaling(0.5, 3))
    back = LatentPanel.from_dict(lp.to_dict())
    assert back.rescaling == lp.rescaling
    np.testing.assert_array_equal(back.units[0].states, lp.units[0].states)
