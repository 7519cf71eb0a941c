import warnings

import numpy as np
import pytest

from builders import gcn_case, lm_case, mlp_case
from dfa_engine.alignment import (AlignmentRecord, deepest, measure_alignment, per_sample_cosines,
                                  read_alignment_csv, write_alignment_csv)
from dfa_engine.datasets import Batch
from dfa_engine.feedback import FeedbackMatrix
from dfa_engine.network import build_mlp
from dfa_engine.parallel import UnsupportedModeError
from dfa_engine.tensor import ParameterError, SeededRng


def test_transpose_feedback_gives_unit_cosine():
    net, x, y = mlp_case(0, depth=2)
    net.feedback["dense0"] = FeedbackMatrix.fixed(net.params["dense1.weight"].T, "dense0")
    (rec,) = measure_alignment(net, Batch(x, y))
    assert abs(rec.mean_cosine - 1) < 1e-12 and rec.std_cosine < 1e-12 and rec.sample_count == 7


def test_random_high_dimensional_signals_are_nearly_orthogonal():
    rng = SeededRng(1)
    a, b = rng.normal(size=(50, 10_000)), rng.normal(size=(50, 10_000))
    cos, skipped = per_sample_cosines(a, b)
    assert skipped == 0 and abs(cos.mean()) < 0.05


def test_zero_norm_samples_skipped_with_warning():
    a = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    b = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    cos, skipped = per_sample_cosines(a, b)
    assert skipped == 2 and np.array_equal(cos, [1.0])

    net, x, y = mlp_case(2, depth=3, activation="relu")
    net.params["dense1.weight"][:] = 0.0  # kills the BP signal reaching dense0
    with pytest.warns(UserWarning, match="skipped"):
        recs = measure_alignment(net, Batch(x, y))
    assert recs[0].skipped == 7 and recs[0].sample_count == 0


def test_measure_is_side_effect_free():
    net, x, y = mlp_case(3, depth=4)
    before = net.param_hash()
    measure_alignment(net, Batch(x, y))
    assert net.param_hash() == before


def test_records_cover_hidden_points_deepest_first():
    net, x, y = mlp_case(4, depth=4)
    recs = measure_alignment(net, Batch(x, y))
    assert [r.layer_id for r in recs] == ["dense0", "dense1", "dense2"]
    assert deepest(recs).layer_id == "dense0"
    for r in recs:
        assert -1 <= r.mean_cosine <= 1 and r.std_cosine >= 0


def test_top_alignment_is_one_by_construction():
    net, x, y = mlp_case(5, depth=3)
    recs = measure_alignment(net, Batch(x, y), include_top=True)
    assert recs[-1].layer_id == "dense2" and abs(recs[-1].mean_cosine - 1) < 1e-12


def test_graph_and_sequence_samples():
    net, x, y, mask = gcn_case(6)
    (rec,) = measure_alignment(net, Batch(x, y))
    assert rec.sample_count + rec.skipped == x.shape[0]
    net, x, y = lm_case(6, granularity="micro_sublayer")
    recs = measure_alignment(net, [Batch(x, y), Batch(x[:1], y[:1])])
    assert [r.sample_count for r in recs] == [3, 3, 3, 3]


def test_untrained_alignment_near_zero():
    rng = SeededRng(7)
    net = build_mlp(rng, [20, 256, 256, 10], "tanh", "dfa")
    x = rng.normal(size=(200, 20))
    y = rng.integers(0, 10, size=200)
    for r in measure_alignment(net, Batch(x, y)):
        assert abs(r.mean_cosine) < 0.1


def test_requires_dfa_network():
    net, x, y = mlp_case(0, mode="bp")
    with pytest.raises(UnsupportedModeError):
        measure_alignment(net, Batch(x, y))
    net, _, _ = mlp_case(0)
    with pytest.raises(ParameterError):
        measure_alignment(net, Batch(np.zeros((0, 5)), np.zeros(0, int)))


def test_record_invariants():
    with pytest.raises(ValueError):
        AlignmentRecord("x", 1.5, 0.1, 3)
    with pytest.raises(ValueError):
        AlignmentRecord("x", 0.5, -0.1, 3)


def test_csv_roundtrip(tmp_path):
    recs = [AlignmentRecord("dense0", 0.25, 0.1, 10, epoch=3), AlignmentRecord("dense1", -0.5, 0.2, 10, epoch=3)]
    path = tmp_path / "alignment.csv"
    write_alignment_csv(path, recs)
    write_alignment_csv(path, recs, append=True)
    assert path.read_text().splitlines()[0] == "epoch,layer_id,mean_cosine,std_cosine,n"
    back = read_alignment_csv(path)
    assert len(back) == 4 and back[1].mean_cosine == -0.5 and back[0].epoch == 3
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert deepest(back[:2]).layer_id == "dense0"
