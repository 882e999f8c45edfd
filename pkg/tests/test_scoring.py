import numpy as np
import pytest

import oracles
from slicerecon.errors import FormatError, ScoringError, SelectionError
from slicerecon.scoring import (
    SCORE_KEYS,
    TABLE_HEADER,
    ScoreRecord,
    read_score_table,
    score_scan,
    select_score,
    write_score_table,
)
from slicerecon.evaluation import auc


def test_perfect_reconstruction_scores_zero():
    rng = np.random.default_rng(0)
    gts = [rng.random((3, 16, 16)) for _ in range(4)]
    rec = score_scan(gts, gts, "s", 0.0)
    for m in ("l1", "l2", "ssim"):
        assert rec.get(m, "average") == 0 and rec.get(m, "maximum") == 0
    assert rec.get("dice", "maximum") == pytest.approx(0, abs=1e-9)


def test_single_window_matches_oracles():
    rng = np.random.default_rng(1)
    p, t = rng.random((3, 14, 13)), rng.random((3, 14, 13))
    rec = score_scan([p], [t])
    expect = {
        "l1": oracles.l1(p, t),
        "l2": oracles.l2(p, t),
        "dice": oracles.soft_dice(p, t),
        "ssim": 1 - oracles.ssim(p, t),
    }
    for m, v in expect.items():
        assert rec.get(m, "average") == pytest.approx(v, abs=1e-10)
        assert rec.get(m, "maximum") == pytest.approx(v, abs=1e-10)


def test_aggregation_arithmetic():
    # uniform offsets d give per-window l2 = d^2: 0.1 and 0.3
    t = np.full((3, 12, 12), 0.2)
    preds = [t + np.sqrt(0.1), t + np.sqrt(0.3)]
    rec = score_scan(preds, [t, t])
    assert rec.get("l2", "average") == pytest.approx(0.2)
    assert rec.get("l2", "maximum") == pytest.approx(0.3)
    for m in ("l1", "l2", "ssim", "dice"):
        assert rec.get(m, "average") <= rec.get(m, "maximum")


def test_zero_windows_is_error():
    with pytest.raises(ScoringError):
        score_scan([], [])


def test_record_invariants():
    with pytest.raises(ScoringError):
        ScoreRecord("s", 0.0, {("l2", "average"): 0.1})
    bad = {k: 0.1 for k in SCORE_KEYS}
    bad[("l1", "maximum")] = float("nan")
    with pytest.raises(ScoringError):
        ScoreRecord("s", 0.0, bad)


def _records(columns, cdrs):
    out = []
    for i, cdr in enumerate(cdrs):
        out.append(ScoreRecord(f"s{i}", cdr, {k: float(columns[k][i]) for k in SCORE_KEYS}))
    return out


def test_selection_dominant_l2_average():
    rng = np.random.default_rng(2)
    cdrs = [0.0] * 10 + [0.5, 1.0, 2.0] * 4
    columns = {k: rng.random(len(cdrs)) for k in SCORE_KEYS}
    columns[("l2", "average")] = np.array([0.1 * (c > 0) + 0.01 * i for i, c in enumerate(cdrs)]) + \
        np.array([0 if c == 0 else 1 for c in cdrs])
    sel = select_score(_records(columns, cdrs))
    assert (sel.metric, sel.aggregation) == ("l2", "average")
    assert sel.validation_auc == 1.0


def test_selection_tie_break():
    cdrs = [0.0] * 3 + [1.0] * 3
    columns = {k: np.full(6, 0.4) for k in SCORE_KEYS}
    sel = select_score(_records(columns, cdrs))
    assert (sel.metric, sel.aggregation, sel.validation_auc) == ("l2", "average", 0.5)
    # with l2 removed from contention, the next in order is l2-maximum, then l1-average
    columns[("l2", "average")] = np.array([1, 1, 1, 0, 0, 0.0])
    sel = select_score(_records(columns, cdrs))
    assert (sel.metric, sel.aggregation) == ("l2", "maximum")


def test_selection_single_class():
    with pytest.raises(SelectionError):
        select_score(_records({k: np.ones(3) for k in SCORE_KEYS}, [0.0] * 3))


def test_selection_monotone_invariance():
    rng = np.random.default_rng(4)
    cdrs = [0.0] * 8 + [1.0] * 8
    columns = {k: rng.random(16) for k in SCORE_KEYS}
    before = select_score(_records(columns, cdrs))
    transformed = dict(columns)
    transformed[("dice", "maximum")] = np.exp(5 * columns[("dice", "maximum")])
    after = select_score(_records(transformed, cdrs))
    assert before == after
    labels = [c > 0 for c in cdrs]
    assert auc(columns[("dice", "maximum")], labels) == auc(transformed[("dice", "maximum")], labels)


def test_score_table_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    recs = _records({k: rng.random(4) for k in SCORE_KEYS}, [0.0, 0.5, 1.0, 2.0])
    write_score_table(recs, tmp_path / "s.csv")
    text = (tmp_path / "s.csv").read_text()
    assert text.splitlines()[0] == ",".join(TABLE_HEADER)
    assert text.splitlines()[2].startswith("s1,0.5,")
    back = read_score_table(tmp_path / "s.csv")
    assert [(r.scan_id, r.cdr, r.scores) for r in back] == [(r.scan_id, r.cdr, r.scores) for r in recs]


def test_score_table_bad_header(tmp_path):
    (tmp_path / "s.csv").write_text("scan,cdr\n")
    with pytest.raises(FormatError):
        read_score_table(tmp_path / "s.csv")
