import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cooprec.model import (
    ModelConfig,
    RecModel,
    Vocabulary,
    extract_user_embedding,
    fine_tune,
    forward_scores,
    pad_batch,
    train_global,
)
from cooprec.sparsity import LassoConfig, PruningSchedule, apply_magnitude_prune


def toy(mode="pull", gamma=0.0, seed=0, **kw):
    cfg = ModelConfig(vocab_size=12, embedding_dim=6, hidden_dim=8, batch_size=4, mode=mode,
                      lasso=LassoConfig(gamma=gamma), **kw)
    return RecModel(cfg, seed)


def cycle_sessions(n=40, length=6, vocab=12):
    """Deterministic successor pattern i -> i + 1 that a GRU can learn."""
    return [[(start + t) % vocab for t in range(length)] for start in range(n)]


def test_vocabulary_is_sorted_and_strict():
    v = Vocabulary([30, 10, 20, 10])
    assert v.ids.tolist() == [10, 20, 30]
    assert v.encode([30, 10]) == [2, 0]
    with pytest.raises(KeyError):
        v.index(99)
    assert v.encode_known([99, 20]).tolist() == [1]


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=0)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=3, mode="sideways")


def test_pad_batch_counts_predictions():
    inputs, targets, valid = pad_batch([[1, 2], [3, 4, 5]])
    assert valid.sum() == 3
    assert targets[1].tolist() == [4, 5] and inputs[0, 0] == 1


def test_single_pair_session_gives_one_step():
    inputs, targets, valid = pad_batch([[1, 2]])
    expected = toy().loss(inputs, targets, valid)[0]
    report = train_global(toy(), [[1, 2]], epochs=1)
    assert len(report.epochs) == 1
    assert report.losses[0] == expected


def test_empty_training_set():
    with pytest.raises(ValueError):
        train_global(toy(), [[1]], epochs=1)


def test_loss_falls_on_learnable_pattern():
    losses = train_global(toy(), cycle_sessions(), epochs=6).losses
    assert losses[-1] < 0.9 * losses[0]
    assert np.polyfit(range(len(losses)), losses, 1)[0] < 0


def test_training_is_deterministic():
    a, b = toy(), toy()
    train_global(a, cycle_sessions(), epochs=2, seed=4)
    train_global(b, cycle_sessions(), epochs=2, seed=4)
    assert a.digest() == b.digest()


def test_pruning_schedule_is_applied():
    m = toy()
    report = train_global(m, cycle_sessions(), epochs=4, schedule=PruningSchedule.for_epochs(4, 0.9))
    assert report.epochs[-1]["s_t"] == pytest.approx(0.9)
    assert m.weight_sparsity() >= 0.9 - 1e-9


def test_target_sparsity_calibrates_threshold():
    m = RecModel(ModelConfig(vocab_size=12, embedding_dim=6, hidden_dim=8, lasso=LassoConfig(target_sparsity=0.9)), 0)
    train_global(m, cycle_sessions(), epochs=2)
    table = m.embedding.table.values
    assert np.mean(np.abs(table) <= m.gamma) >= 0.9


def test_pull_embedding_is_dense_and_push_is_truncated():
    pull = extract_user_embedding(toy("pull", gamma=0.05), [1, 2, 3]).vector
    assert np.count_nonzero(pull) == pull.size
    push_model = toy("push", gamma=0.05)
    push = extract_user_embedding(push_model, [1, 2, 3]).vector
    raw = push_model.hidden_states(np.array([[1, 2, 3]]))[1][0, -1]
    assert np.all(push[np.abs(raw) <= 0.05] == 0)
    assert np.array_equal(push[np.abs(raw) > 0.05], raw[np.abs(raw) > 0.05])


def test_empty_prefix_and_bad_ids():
    m = toy()
    with pytest.raises(ValueError):
        extract_user_embedding(m, [])
    with pytest.raises(KeyError):
        forward_scores(m, [1, 99])


def test_candidate_scores_are_a_restriction():
    m = toy()
    full = forward_scores(m, [3, 4])
    assert np.allclose(forward_scores(m, [3, 4], [7, 2]), full[[7, 2]])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 11), min_size=1, max_size=6), st.integers(-8, 8))
def test_constant_shift_keeps_ranking(prefix, c):
    scores = forward_scores(toy(), prefix)
    ids = np.arange(12)
    assert np.array_equal(np.lexsort((ids, -scores))[:5], np.lexsort((ids, -(scores + c)))[:5])


def test_zero_steps_copies_the_model():
    base = toy()
    out = fine_tune(base, cycle_sessions(5), steps=0)
    assert out is not base and out.digest() == base.digest()


def test_no_sessions_returns_copy():
    base = toy()
    assert fine_tune(base, [[4]], steps=3).digest() == base.digest()


def test_fine_tune_leaves_global_untouched():
    base = toy()
    before = base.digest()
    other = fine_tune(base, cycle_sessions(5), steps=2, update_batch_size=5)
    mine = fine_tune(base, [[1, 5, 9, 1, 5, 9]], steps=2, update_batch_size=5)
    assert base.digest() == before
    assert other.digest() != before and mine.digest() != other.digest()


def test_masks_survive_fine_tuning():
    base = toy()
    apply_magnitude_prune(base.params(), 0.8)
    tuned = fine_tune(base, cycle_sessions(10), steps=3, update_batch_size=3)
    for p in tuned.params():
        assert np.all(p.values[~p.mask] == 0.0)
    assert tuned.weight_sparsity() == base.weight_sparsity()


def test_push_fine_tuning_keeps_the_cloud_head():
    base = toy("push", gamma=0.01)
    tuned = fine_tune(base, cycle_sessions(5), steps=2)
    assert np.array_equal(tuned.output.weight.values, base.output.weight.values)
    assert not np.array_equal(tuned.embedding.table.values, base.embedding.table.values)
    with pytest.raises(ValueError):
        fine_tune(base, cycle_sessions(5), scope="all")


def test_head_scope_only_moves_the_head():
    base = toy()
    tuned = fine_tune(base, cycle_sessions(5), steps=1, scope="head")
    assert np.array_equal(tuned.embedding.table.values, base.embedding.table.values)
    assert not np.array_equal(tuned.output.weight.values, base.output.weight.values)


def test_update_batch_size_controls_update_count():
    base = toy()
    sessions = cycle_sessions(4, length=3)  # 2 predictions each
    one = fine_tune(base, sessions, steps=1, update_batch_size=100)
    once = fine_tune(base, sessions, steps=1, update_batch_size=8)
    assert one.digest() == once.digest()
    per_session = fine_tune(base, sessions, steps=1, update_batch_size=2)
    assert per_session.digest() != one.digest()
    dropped = fine_tune(base, sessions, steps=1, update_batch_size=100, flush_partial=False)
    assert dropped.digest() == base.digest()
