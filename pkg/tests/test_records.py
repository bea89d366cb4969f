import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from endp.records import (BASE_COLUMNS, ExperimentRecord, columns, read_csv_rows, strip_wall_time, to_csv,
                          write_records)


def rec(epoch=1, **kw):
    base = dict(run_id="r", seed=0, epoch=epoch, ensemble_size=200, nll=0.5, kl=12.0, kl_scale=1e-4, total=0.5012,
                acc_clean=0.9, wall_time_s=3.2)
    base.update(kw)
    return ExperimentRecord(**base)


def test_accuracy_and_wall_time_validation():
    with pytest.raises(ValueError):
        rec(acc_clean=1.2)
    with pytest.raises(ValueError):
        rec(conditions={"acc_fgsm_0.1": -0.1})
    with pytest.raises(ValueError):
        rec(wall_time_s=0.0)
    assert math.isnan(rec(acc_clean=math.nan, wall_time_s=math.nan).acc_clean)


def test_column_order():
    r = rec(conditions={"acc_gaussian_0.1": 0.8, "acc_fgsm_0.2": 0.3}, extra={"hit_fgsm_0.2": 0.1})
    assert columns([r]) == list(BASE_COLUMNS) + ["acc_gaussian_0.1", "acc_fgsm_0.2", "hit_fgsm_0.2"]
    assert to_csv([r]).splitlines()[0].split(",") == columns([r])


def test_condition_grid_gives_five_accuracy_columns():
    conds = {"acc_gaussian_0.1": 0.9, "acc_gaussian_0.2": 0.8, "acc_fgsm_0.1": 0.5, "acc_fgsm_0.2": 0.2}
    acc = [c for c in columns([rec(conditions=conds)]) if c.startswith("acc_")]
    assert len(acc) == 5


floats = st.floats(allow_nan=True, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(nll=floats, kl=floats, acc=st.floats(0, 1), wall=st.floats(1e-9, 1e6), cond=st.floats(0, 1))
def test_csv_and_json_agree_losslessly(tmp_path_factory, nll, kl, acc, wall, cond):
    r = rec(nll=nll, kl=kl, acc_clean=acc, wall_time_s=wall, conditions={"acc_fgsm_0.1": cond})
    out = tmp_path_factory.mktemp("rec")
    csv_path, json_path = write_records([r, rec(2)], out)
    rows = read_csv_rows(csv_path)
    doc = json.loads(json_path.read_text())
    assert doc["columns"] == list(rows[0])
    for row, jrow, orig in zip(rows, doc["rows"], [r.row(), rec(2).row()]):
        for c in doc["columns"]:
            want = orig.get(c)
            if isinstance(want, float):
                got_csv, got_json = float(row[c]), float(jrow[c])
                if math.isnan(want):
                    assert math.isnan(got_csv) and math.isnan(got_json)
                else:
                    assert got_csv == want == got_json
            elif want is None:
                assert row[c] == "" and jrow[c] is None
            else:
                assert row[c] == str(want) and jrow[c] == want


def test_strip_wall_time():
    rows = [{"epoch": "1", "wall_time_s": "3.0", "eval_time_s": "1.0"}]
    assert strip_wall_time(rows) == [{"epoch": "1"}]
