import hashlib
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtri

from maya.data import (DataError, DatasetSplit, EncodedDataset, QuantileColumn, Schema, SchemaError, UNKNOWN,
                       apply_quantile, batches, encode, fit_quantile, load_csv, prepare, split)

SCHEMA = """task = regression
column.a = numerical
column.c = categorical
column.y = target
"""


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# schema ---------------------------------------------------------------------

def test_schema_parse_roundtrip():
    s = Schema.from_text(SCHEMA)
    assert s.target == "y" and s.numerical == ["a"] and s.categorical == ["c"]
    assert Schema.from_text(s.to_text()) == s


@pytest.mark.parametrize("text", [
    "task = regression\ncolumn.a = numerical\n",  # no target
    "task = regression\ncolumn.y = target\n",  # no features
    "task = multiclass\nnum_classes = 1\ncolumn.a = numerical\ncolumn.y = target\n",
    "task = ranking\ncolumn.a = numerical\ncolumn.y = target\n",
    "task = regression\ncolumn.a = text\ncolumn.y = target\n",
])
def test_schema_rejects(text):
    with pytest.raises(SchemaError):
        Schema.from_text(text)


# load_csv -------------------------------------------------------------------

def test_load_csv_rows_extra_column_and_bad_numbers(tmp_path):
    p = write(tmp_path, "a,c,extra,y\n1.5,x,9,1\nabc,y,9,2\n,x,9,3\n")
    with pytest.warns(UserWarning, match="extra"):
        raw = load_csv(p, Schema.from_text(SCHEMA))
    assert len(raw) == 3
    a = raw.numerical["a"]
    assert a[0] == 1.5 and math.isnan(a[1]) and math.isnan(a[2])


def test_load_csv_missing_column(tmp_path):
    with pytest.raises(SchemaError, match="c"):
        load_csv(write(tmp_path, "a,y\n1,2\n"), Schema.from_text(SCHEMA))


def test_load_csv_bad_target_reports_line(tmp_path):
    with pytest.raises(DataError, match=r"t.csv:3: unparseable target"):
        load_csv(write(tmp_path, "a,c,y\n1,x,1\n2,x,oops\n"), Schema.from_text(SCHEMA))


# split ----------------------------------------------------------------------

@pytest.mark.parametrize("n,sizes", [(100, (64, 16, 20)), (10, (7, 1, 2))])
def test_split_sizes(n, sizes):
    s = split(n, seed=3)
    assert (len(s.train), len(s.val), len(s.test)) == sizes


@settings(max_examples=200, deadline=None)
@given(st.integers(5, 500), st.integers(0, 2 ** 32 - 1))
def test_split_partition(n, seed):
    s = split(n, seed)
    allidx = np.concatenate([s.train, s.val, s.test])
    assert sorted(allidx.tolist()) == list(range(n))
    assert len(s.val) == math.floor(0.16 * n) and len(s.test) == math.floor(0.2 * n)
    again = split(n, seed)
    assert all(np.array_equal(a, b) for a, b in zip((s.train, s.val, s.test), (again.train, again.val, again.test)))


# quantile -------------------------------------------------------------------

def test_quantile_examples(frozen):
    q = fit_quantile(np.arange(1.0, 1001.0))
    assert abs(apply_quantile(q, 500.5)) < 1e-12
    assert abs(apply_quantile(q, 750.0) - frozen["quantile_750_of_1_to_1000"]) < 1e-12
    assert abs(apply_quantile(q, 750.0) - 0.6745) < 0.02
    delta = 1 / (2 * 1000)
    assert apply_quantile(q, -5.0) == pytest.approx(ndtri(delta))
    assert apply_quantile(q, 1e6) == pytest.approx(ndtri(1 - delta))


def test_quantile_constant_column_rejected():
    with pytest.raises(DataError):
        QuantileColumn.fit(np.full(10, 2.0))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=60).filter(lambda v: len(set(v)) > 1),
       st.floats(-2e3, 2e3), st.floats(-2e3, 2e3))
def test_quantile_monotone(train, x1, x2):
    q = fit_quantile(np.array(train))
    lo, hi = min(x1, x2), max(x1, x2)
    assert apply_quantile(q, lo) <= apply_quantile(q, hi)


def test_quantile_training_columns_look_normal():
    rng = np.random.default_rng(0)
    for col in (rng.exponential(size=400), rng.uniform(size=400), rng.lognormal(size=400)):
        t = apply_quantile(fit_quantile(col), col)
        assert abs(t.mean()) < 0.1 and 0.85 <= t.std() <= 1.15


# encode ---------------------------------------------------------------------

def _table(tmp_path, rows):
    text = "a,c,y\n" + "".join(f"{a},{c},{y}\n" for a, c, y in rows)
    return load_csv(write(tmp_path, text), Schema.from_text(SCHEMA))


def test_encode_unknown_category_and_target_standardization(tmp_path):
    raw = _table(tmp_path, [(1, "a", 8), (2, "b", 12), (3, "a", 10), (4, "c", 99), ("", "b", 5)])
    sp = DatasetSplit(np.array([0, 1, 2]), np.array([4]), np.array([3]))
    ds = encode(raw, sp, Schema.from_text(SCHEMA))
    assert ds.vocabularies["c"] == ["a", "b"]
    assert ds.cat[3, 0] == UNKNOWN and ds.cat[0, 0] == 1 and ds.cat[1, 0] == 2
    mean, std = np.mean([8, 12, 10]), np.std([8, 12, 10])
    assert ds.target_mean == mean and ds.target_std == std
    assert ds.y[1] == pytest.approx((12 - mean) / std)
    # missing numeric in a held-out row takes the train median (2.0), which maps to 0
    assert ds.num[4, 0] == pytest.approx(0.0)
    assert ds.info.cat_cardinalities == [3]


def test_encode_standardization_example(tmp_path):
    raw = _table(tmp_path, [(1, "a", 8), (2, "a", 12), (3, "a", 12), (4, "a", 8), (5, "a", 12)])
    sp = DatasetSplit(np.array([0, 1, 2, 3]), np.array([4]), np.array([], dtype=np.int64))
    ds = encode(raw, sp, Schema.from_text(SCHEMA))
    assert (ds.target_mean, ds.target_std) == (10.0, 2.0)
    assert ds.y[4] == 1.0
    assert ds.destandardize(np.array([1.0]))[0] == 12.0


def test_encode_drops_constant_column_with_warning(tmp_path):
    schema = Schema.from_text(SCHEMA.replace("column.y", "column.k = numerical\ncolumn.y"))
    p = write(tmp_path, "a,c,k,y\n" + "".join(f"{i},x,7,{i}\n" for i in range(10)))
    with pytest.warns(UserWarning, match="'k'"):
        ds = prepare(p, schema)
    assert ds.dropped == ["k"] and ds.num_columns == ["a"]


def test_encode_all_missing_column_named(tmp_path):
    raw = _table(tmp_path, [("", "a", 1), ("", "b", 2), ("", "a", 3), ("", "a", 4), ("", "b", 5)])
    with pytest.raises(DataError, match="'a'"):
        encode(raw, split(5, 0), Schema.from_text(SCHEMA))


def _digest(directory: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(directory.iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_encoding_is_byte_deterministic_and_roundtrips(tmp_path):
    rng = np.random.default_rng(0)
    rows = [(f"{v:.4f}", "abc"[i % 3], f"{v * 2:.3f}") for i, v in enumerate(rng.normal(size=40))]
    text = "a,c,y\n" + "".join(f"{a},{c},{y}\n" for a, c, y in rows)
    p = write(tmp_path, text)
    schema = Schema.from_text(SCHEMA)
    prepare(p, schema, seed=5).save(tmp_path / "d1")
    prepare(p, schema, seed=5).save(tmp_path / "d2")
    assert _digest(tmp_path / "d1") == _digest(tmp_path / "d2")
    ds = EncodedDataset.load(tmp_path / "d1")
    assert ds.fingerprint() == prepare(p, schema, seed=5).fingerprint()
    assert np.all(ds.cat < np.array(ds.info.cat_cardinalities))


def test_classification_labels(tmp_path):
    schema = Schema.from_text("task = multiclass\nnum_classes = 3\ncolumn.a = numerical\ncolumn.y = target\n")
    p = write(tmp_path, "a,y\n" + "".join(f"{i},{'xyz'[i % 3]}\n" for i in range(20)))
    ds = prepare(p, schema)
    assert ds.classes == ["x", "y", "z"] and set(ds.labels.tolist()) == {0, 1, 2}


# batches --------------------------------------------------------------------

def test_batches_sizes_order_and_determinism():
    idx = np.arange(10)
    assert [len(b) for b in batches(idx, 4, shuffle=False)] == [4, 4, 2]
    assert np.array_equal(np.concatenate(list(batches(idx, 4, shuffle=False))), idx)
    a = [b.tolist() for b in batches(idx, 4, seed=1, epoch=2)]
    assert a == [b.tolist() for b in batches(idx, 4, seed=1, epoch=2)]
    assert a != [b.tolist() for b in batches(idx, 4, seed=1, epoch=3)]


def test_batches_skip_singletons_and_reject_empty():
    assert [len(b) for b in batches(np.arange(9), 4, shuffle=False, drop_singletons=True)] == [4, 4]
    with pytest.raises(DataError):
        list(batches(np.array([], dtype=int), 4))
