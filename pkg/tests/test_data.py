import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cooprec.data import (
    Behavior,
    InteractionRecord,
    MalformedRowError,
    PartitionConfig,
    UnknownBehaviorError,
    build_split,
    filter_dataset,
    format_interactions,
    parse_interactions,
    partition_temporal,
    read_split,
    sessionize,
    split_users,
    write_split,
)


def click(user, item, t, cat=0):
    return InteractionRecord(user, item, cat, Behavior.CLICK, t)


def stamps(sessions):
    return [[c.timestamp for c in s.clicks] for s in sessions]


# -- parsing -----------------------------------------------------------------


def test_parse_click_row():
    (r,) = parse_interactions("1,42,7,pv,100")
    assert r == InteractionRecord(1, 42, 7, Behavior.CLICK, 100)


def test_parse_purchase_row():
    (r,) = parse_interactions(b"1,42,7,buy,100\n")
    assert r.behavior is Behavior.PURCHASE


def test_parse_all_tokens_in_order():
    rows = "1,1,1,pv,5\n2,2,2,buy,4\n3,3,3,cart,3\n4,4,4,fav,2\n"
    kinds = [r.behavior for r in parse_interactions(io.BytesIO(rows.encode()))]
    assert kinds == [Behavior.CLICK, Behavior.PURCHASE, Behavior.CART, Behavior.FAVORITE]


def test_unknown_behavior_names_the_token():
    with pytest.raises(UnknownBehaviorError) as err:
        parse_interactions("1,42,7,xx,100")
    assert "UnknownBehavior('xx')" in str(err.value)
    assert err.value.token == "xx"


@pytest.mark.parametrize(
    "text,line",
    [("1,2,3,pv,4\n1,2,3,pv\n", 2), ("1,2,3,pv,4\n\n1,a,3,pv,4\n", 3), ("1,2,3,pv,-4\n", 1)],
)
def test_malformed_rows_report_the_line(text, line):
    with pytest.raises(MalformedRowError) as err:
        parse_interactions(text)
    assert err.value.line == line


def test_custom_token_table():
    (r,) = parse_interactions("1,2,3,click,4", tokens={"click": Behavior.CLICK})
    assert r.behavior is Behavior.CLICK


def test_format_round_trip():
    recs = [click(1, 2, 3), InteractionRecord(4, 5, 6, Behavior.FAVORITE, 7)]
    assert parse_interactions(format_interactions(recs)) == recs


# -- sessions ----------------------------------------------------------------


def test_sessionize_splits_on_long_gap():
    recs = [click(1, i, t) for i, t in enumerate([0, 700, 1500])]
    assert stamps(sessionize(recs, 706)) == [[0, 700], [1500]]


def test_sessionize_gap_equal_to_threshold_joins():
    assert stamps(sessionize([click(1, 1, 0), click(1, 2, 706)], 706)) == [[0, 706]]


def test_sessionize_single_and_empty():
    assert stamps(sessionize([click(1, 1, 5)], 706)) == [[5]]
    assert sessionize([], 706) == []


def test_sessionize_sorts_internally():
    recs = [click(1, 1, 800), click(1, 2, 0)]
    assert stamps(sessionize(recs, 706)) == [[0], [800]]


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=40), st.integers(1, 2000))
def test_sessionize_respects_threshold(ts, thr):
    sessions = sessionize([click(1, k, t) for k, t in enumerate(ts)], thr)
    assert sum(len(s) for s in sessions) == len(ts)
    for s in sessions:
        gaps = [b.timestamp - a.timestamp for a, b in zip(s.clicks, s.clicks[1:])]
        assert all(0 <= g <= thr for g in gaps)
    for a, b in zip(sessions, sessions[1:]):
        assert b.clicks[0].timestamp - a.clicks[-1].timestamp > thr


# -- partition and filters ---------------------------------------------------

CFG = PartitionConfig(t_device=1000, t_test=2000, idle_threshold_secs=706, min_user_clicks=1)


def test_routing_at_the_device_boundary():
    split = partition_temporal([click(1, 1, 999), click(1, 2, 1000)], CFG)
    assert stamps(split.global_train) == [[999]]
    assert stamps(split.personal_train[1]) == [[1000]]


def test_transactional_records_are_kept_everywhere():
    buy = InteractionRecord(1, 9, 0, Behavior.PURCHASE, CFG.t_test + 5)
    early = InteractionRecord(1, 9, 0, Behavior.CART, 3)
    split = partition_temporal([click(1, 1, 10), buy, early], CFG)
    assert split.transactional == [buy, early]
    assert split.click_counts() == {"global": 1, "personal": 0, "test": 0}


def test_session_spanning_cutoff_is_cut():
    recs = [click(1, i, t) for i, t in enumerate([900, 950, 1010, 1060])]
    split = partition_temporal(recs, CFG)
    assert stamps(split.global_train) == [[900, 950]]
    assert stamps(split.personal_train[1]) == [[1010, 1060]]


def test_length_one_sessions_are_removed():
    recs = [click(1, 1, 0), click(1, 2, 10), click(1, 1, 3000), click(1, 1, 5000), click(1, 2, 5010)]
    split = build_split(recs, CFG)
    assert [s.items for s in split.test[1]] == [[1, 2]]
    assert all(len(s) >= 2 for s in split.stage_sessions("test"))
    assert split.dropped["short_sessions"] == 1


def test_unseen_test_item_click_is_removed():
    recs = [click(1, 1, 0), click(1, 2, 10), click(1, 1, 2100), click(1, 2, 2110), click(1, 77, 2120)]
    split = build_split(recs, CFG)
    assert [s.items for s in split.test[1]] == [[1, 2]]
    assert split.dropped["unseen_test_items"] == 1


def test_user_below_click_minimum_is_removed():
    cfg = PartitionConfig(1000, 2000, min_user_clicks=12)
    few = [click(1, k % 3, 10 * k) for k in range(11)]
    enough = [click(2, k % 3, 10 * k) for k in range(12)]
    split = build_split(few + enough, cfg)
    assert split.users() == [2]
    assert split.dropped["min_clicks"] == 11


def test_session_click_minimum_mode():
    cfg = PartitionConfig(1000, 2000, min_user_clicks=3, min_clicks_mode="session")
    recs = [click(1, 1, 0), click(1, 2, 10), click(1, 1, 900), click(1, 2, 910), click(1, 3, 920)]
    split = build_split(recs, cfg)
    assert [len(s) for s in split.global_train] == [3]


def test_config_rejects_inverted_deadlines():
    with pytest.raises(ValueError):
        PartitionConfig(t_device=5, t_test=5)


user_clicks = st.lists(
    st.tuples(st.integers(0, 4), st.integers(0, 6), st.integers(0, 4000)), min_size=0, max_size=60
)


@settings(max_examples=60)
@given(user_clicks)
def test_partition_is_lossless_and_ordered(rows):
    recs = [click(u, i, t) for u, i, t in rows]
    split = build_split(recs, CFG)
    counts = split.click_counts()
    assert sum(counts.values()) + sum(split.dropped.values()) == len(recs)
    for s in split.global_train:
        assert all(c.timestamp < CFG.t_device for c in s.clicks)
    for s in split.stage_sessions("personal"):
        assert all(CFG.t_device <= c.timestamp < CFG.t_test for c in s.clicks)
    train_items = split.train_items()
    for s in split.stage_sessions("test"):
        assert all(c.timestamp >= CFG.t_test and c.item_id in train_items for c in s.clicks)
    for stage in ("global", "personal", "test"):
        for s in split.stage_sessions(stage):
            assert len(s) >= 2
            gaps = [b.timestamp - a.timestamp for a, b in zip(s.clicks, s.clicks[1:])]
            assert all(0 <= g <= CFG.idle_threshold_secs for g in gaps)


@settings(max_examples=30)
@given(user_clicks)
def test_pipeline_is_deterministic(rows):
    recs = [click(u, i, t) for u, i, t in rows]
    assert build_split(recs, CFG) == build_split(list(recs), CFG)


def test_filter_is_idempotent():
    recs = [click(u, (u + k) % 5, 30 * k + 1000 * u) for u in range(3) for k in range(20)]
    once = build_split(recs, CFG)
    again = filter_dataset(once, CFG)
    assert again.global_train == once.global_train
    assert again.test == once.test


# -- user cohorts ------------------------------------------------------------


def test_ten_users_one_new():
    recs = [click(u, 0, 100 * u) for u in range(10)]
    old, new = split_users(recs, 0.9)
    assert new == {9} and old == set(range(9))


def test_tied_means_are_all_old():
    old, new = split_users([click(u, 0, 50) for u in range(5)], 0.9)
    assert new == set() and old == set(range(5))


def test_single_user_is_old():
    assert split_users([click(3, 0, 1), click(3, 1, 9)], 0.9) == ({3}, set())


@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 10_000)), min_size=1, max_size=50), st.floats(0, 1))
def test_cohorts_partition_users(rows, q):
    recs = [click(u, 0, t) for u, t in rows]
    old, new = split_users(recs, q)
    assert old | new == {u for u, _ in rows}
    assert not old & new


def test_brute_force_quantile_cut():
    import numpy as np

    rng = np.random.default_rng(3)
    means = rng.permutation(np.arange(10, dtype=float) * 37.0)
    recs = [click(u, 0, int(m)) for u, m in enumerate(means)]
    # linear-interpolated 0.9 quantile of 10 sorted values sits between the 9th and 10th
    ordered = sorted(means)
    cut = ordered[8] + 0.1 * (ordered[9] - ordered[8])
    expected = {u for u, m in enumerate(means) if m > cut}
    assert split_users(recs, 0.9)[1] == expected


# -- persistence -------------------------------------------------------------


def test_split_round_trips_through_disk(tmp_path):
    recs = [click(u, (u * 3 + k) % 7, 200 * k + 17 * u) for u in range(4) for k in range(15)]
    recs.append(InteractionRecord(1, 3, 0, Behavior.PURCHASE, 2500))
    split = build_split(recs, CFG)
    manifest = write_split(split, tmp_path, CFG)
    again, cfg = read_split(tmp_path)
    assert cfg == CFG
    assert again.global_train == split.global_train
    assert again.personal_train == split.personal_train
    assert again.test == split.test
    assert again.transactional == split.transactional
    assert set(manifest["sha256"]) == {"global", "personal", "test", "transactional"}
    first = (tmp_path / "manifest.json").read_bytes()
    write_split(split, tmp_path, CFG)
    assert (tmp_path / "manifest.json").read_bytes() == first
