import csv
import math
import pickle
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from dfa_engine import datasets as D
from dfa_engine.network import build_gcn, build_mlp, build_transformer_lm
from dfa_engine.tensor import ParameterError, SeededRng
from dfa_engine.training import evaluate, init_optimizer, train_epoch

REPO = Path(__file__).resolve().parents[1]
CORA_DIR = REPO / "data" / "planetoid"
SHAKESPEARE = REPO / "data" / "shakespeare.txt"


def assert_partition(masks, n):
    total = sum(m.astype(int) for m in masks.values())
    assert np.all(total == 1) if n else True


# --------------------------------------------------------------------------
# blobs


def test_blobs_zero_spread_collapses_classes():
    ds = D.gen_blobs(SeededRng(0), 20, 3, 5, 0.0)
    for c in range(3):
        rows = ds.features[ds.labels == c]
        assert np.all(rows == rows[0])
    # nearest-mean classification is then perfect
    means = np.eye(3, 5)
    pred = np.argmin(((ds.features[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    assert np.all(pred == ds.labels)


def test_blobs_deterministic_and_partitioned():
    a, b = D.gen_blobs(SeededRng(1), 50, 3, 8, 0.5), D.gen_blobs(SeededRng(1), 50, 3, 8, 0.5)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert_partition(a.masks, 150)
    assert [int(m.sum()) for m in a.masks.values()] == [120, 15, 15]
    assert a.onehot.shape == (150, 3) and np.all(a.onehot.sum(axis=1) == 1)


def test_blobs_parameter_errors():
    with pytest.raises(ParameterError):
        D.gen_blobs(SeededRng(0), 0, 3, 8, 0.5)
    with pytest.raises(ParameterError):
        D.gen_blobs(SeededRng(0), 10, 5, 3, 0.5)


def test_blobs_shallow_baseline_calibration():
    """The easy preset is solvable by the head alone."""
    rng = SeededRng(2)
    ds = D.gen_blobs(rng.child("data"), 100, 3, 8, 0.5)
    net = build_mlp(rng.child("init"), [8, 64, 3], "tanh", "shallow")
    opt = init_optimizer("adam", net.params, 0.01)
    for epoch in range(30):
        m = train_epoch(net, ds, opt, shuffle_rng=rng.child(f"s{epoch}"), batch_size=32)
    assert m.test_metric >= 0.9


def test_tabular_csv_export(tmp_path):
    ds = D.gen_blobs(SeededRng(3), 5, 2, 3, 0.5)
    ds.to_csv(tmp_path / "blobs.csv")
    with open(tmp_path / "blobs.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    assert float(rows[4]["x1"]) == ds.features[4, 1]
    assert Counter(r["split"] for r in rows) == Counter({"train": 8, "val": 1, "test": 1})


# --------------------------------------------------------------------------
# stochastic block model


@pytest.mark.parametrize("seed", range(10))
def test_sbm_adjacency_structure(seed):
    ds = D.gen_sbm_graph(SeededRng(seed), 30, 3, 0.3, 0.05, 0.5)
    a = ds.adjacency
    assert np.array_equal(a, a.T) and not np.any(np.diag(a)) and set(np.unique(a)) <= {0.0, 1.0}
    assert len(ds.labels) == 90
    assert [int((ds.masks["train"] & (ds.labels == c)).sum()) for c in range(3)] == [20, 20, 20]
    total = sum(m.astype(int) for m in ds.masks.values())
    assert np.all(total == 1)


def test_sbm_block_densities():
    ds = D.gen_sbm_graph(SeededRng(4), 200, 2, 0.2, 0.02, 0.0)
    same = ds.labels[:, None] == ds.labels[None, :]
    off_diag = ~np.eye(400, dtype=bool)
    assert abs(ds.adjacency[same & off_diag].mean() - 0.2) < 0.01
    assert abs(ds.adjacency[~same].mean() - 0.02) < 0.005


def test_sbm_invalid_probabilities():
    for p_in, p_out in [(0.1, 0.1), (0.1, 0.2), (1.2, 0.1), (0.5, -0.1)]:
        with pytest.raises(ParameterError):
            D.gen_sbm_graph(SeededRng(0), 30, 2, p_in, p_out, 0.1)


def test_sbm_deterministic():
    a = D.gen_sbm_graph(SeededRng(5), 30, 3, 0.3, 0.05, 0.5)
    b = D.gen_sbm_graph(SeededRng(5), 30, 3, 0.3, 0.05, 0.5)
    assert a.to_canonical_text() == b.to_canonical_text()


def test_sbm_perfectly_separable_reaches_full_accuracy():
    rng = SeededRng(6)
    ds = D.gen_sbm_graph(rng.child("data"), 30, 3, 1.0, 0.0, 0.0)
    net = build_gcn(rng.child("init"), ds.normalized_adjacency, [3, 16, 3], mode="dfa", feedback_rng=rng.child("fb"))
    opt = init_optimizer("adam", net.params, 0.01)
    for epoch in range(100):
        m = train_epoch(net, ds, opt, shuffle_rng=rng)
    assert m.test_metric == 1.0


def test_graph_canonical_roundtrip():
    ds = D.gen_sbm_graph(SeededRng(7), 15, 3, 0.4, 0.1, 0.3, feature_dim=5, train_per_class=3)
    back = D.GraphDataset.from_canonical_text(ds.to_canonical_text())
    assert np.array_equal(back.adjacency, ds.adjacency)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
    assert all(np.array_equal(back.masks[s], ds.masks[s]) for s in D.SPLITS)
    assert back.to_canonical_text() == ds.to_canonical_text()


# --------------------------------------------------------------------------
# Planetoid


def fake_planetoid(tmp_path, seed=8, n=60, n_test=20, n_train=12):
    ds = D.gen_sbm_graph(SeededRng(seed), n // 3, 3, 0.3, 0.05, 0.2, feature_dim=6, train_per_class=4)
    test_index = SeededRng(seed).permutation(np.arange(n - n_test, n))
    D.write_planetoid(ds, tmp_path, "toy", n_train, test_index)
    return ds, test_index


def test_planetoid_loader_recovers_graph(tmp_path):
    ds, test_index = fake_planetoid(tmp_path)
    back = D.load_planetoid(tmp_path, "toy")
    assert np.array_equal(back.adjacency, ds.adjacency)
    assert np.allclose(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
    assert back.masks["train"].sum() == 12 and back.masks["test"].sum() == 20
    assert np.array_equal(np.flatnonzero(back.masks["test"]), np.sort(test_index))
    assert not (back.masks["train"] & back.masks["val"]).any()
    assert not (back.masks["val"] & back.masks["test"]).any()


def test_planetoid_symmetrises_and_drops_self_loops(tmp_path):

    fake_planetoid(tmp_path)
    graph_path = tmp_path / "ind.toy.graph"
    with open(graph_path, "rb") as fh:
        graph = pickle.load(fh)
    graph = {k: list(v) for k, v in graph.items()}
    graph[0] = [0] + [j for j in graph.get(0, []) if j != 5]
    graph.setdefault(5, [])
    if 0 not in graph[5]:
        graph[5].append(0)
    with open(graph_path, "wb") as fh:
        pickle.dump(graph, fh)
    back = D.load_planetoid(tmp_path, "toy")
    assert back.adjacency[0, 5] == back.adjacency[5, 0] == 1.0
    assert back.adjacency[0, 0] == 0.0


def test_planetoid_roundtrip_via_canonical_text(tmp_path):
    fake_planetoid(tmp_path)
    back = D.load_planetoid(tmp_path, "toy")
    text = back.to_canonical_text()
    again = D.GraphDataset.from_canonical_text(text)
    assert again.to_canonical_text() == text


def test_planetoid_missing_file(tmp_path):
    fake_planetoid(tmp_path)
    (tmp_path / "ind.toy.ally").unlink()
    with pytest.raises(D.IngestionError, match="ind.toy.ally"):
        D.load_planetoid(tmp_path, "toy")


def test_planetoid_malformed_file_names_file_and_offset(tmp_path):
    fake_planetoid(tmp_path)
    data = (tmp_path / "ind.toy.x").read_bytes()
    (tmp_path / "ind.toy.x").write_bytes(data[: len(data) // 2])
    with pytest.raises(D.IngestionError, match=r"ind\.toy\.x.*offset \d+"):
        D.load_planetoid(tmp_path, "toy")
    fake_planetoid(tmp_path)
    (tmp_path / "ind.toy.test.index").write_text("12\nbanana\n")
    with pytest.raises(D.IngestionError, match="line 2"):
        D.load_planetoid(tmp_path, "toy")


def test_planetoid_refuses_foreign_classes(tmp_path):

    fake_planetoid(tmp_path)
    with open(tmp_path / "ind.toy.y", "wb") as fh:
        pickle.dump(Path("/etc"), fh)
    with pytest.raises(D.IngestionError, match="disallowed"):
        D.load_planetoid(tmp_path, "toy")


class _Exec:
    def __reduce__(self):
        return (eval, ("1",))


def test_planetoid_rejects_callable_builtins(tmp_path):
    fake_planetoid(tmp_path)
    with open(tmp_path / "ind.toy.y", "wb") as fh:
        pickle.dump(_Exec(), fh)
    with pytest.raises(D.IngestionError, match="disallowed class builtins.eval"):
        D.load_planetoid(tmp_path, "toy")


@pytest.mark.skipif(not (CORA_DIR / "ind.cora.x").exists(), reason="Cora Planetoid files not in data/planetoid")
def test_real_cora_constants():
    ds = D.load_planetoid(CORA_DIR, "cora")
    assert ds.n_nodes == 2708 and ds.n_classes == 7 and ds.features.shape[1] == 1433
    assert [int(ds.masks[s].sum()) for s in D.SPLITS] == [140, 500, 1000]
    assert np.array_equal(ds.adjacency, ds.adjacency.T)


# --------------------------------------------------------------------------
# text


def test_text_vocab_and_shift(tmp_path):
    path = tmp_path / "abab.txt"
    path.write_text("ab" * 500)
    ds = D.load_text_chars(path, chunk_length=16, batch_chunks=4)
    assert ds.vocab_size == 3 and ds.vocab[0] == D.UNK
    for split in D.SPLITS:
        inputs, targets = ds.chunks(split)
        lo, _ = ds.bounds[split]
        assert np.array_equal(targets[:, :-1], inputs[:, 1:])
        flat = inputs.reshape(-1)
        assert np.array_equal(flat, ds.ids[lo:lo + flat.size])  # contiguous, non-overlapping
        assert np.array_equal(targets.reshape(-1), ds.ids[lo + 1:lo + 1 + flat.size])


def test_text_split_fractions():
    ds = D.text_from_string("x" * 1000, 8, 2)
    assert ds.bounds == {"train": (0, 900), "val": (900, 950), "test": (950, 1000)}


def test_text_unknown_codepoints(tmp_path):
    path = tmp_path / "u.txt"
    path.write_text("héllo → wörld ☃", encoding="utf-8")
    ds = D.load_text_chars(path, 4, 2)
    assert "→" not in ds.vocab and "é" in ds.vocab
    assert ds.decode(ds.encode("→a")) == "?" + ("a" if "a" in ds.vocab else "?")
    assert int((ds.ids == 0).sum()) == 2


def test_text_errors(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    with pytest.raises(D.IngestionError, match="empty"):
        D.load_text_chars(empty)
    bad = tmp_path / "bad.txt"
    bad.write_bytes(b"abc\xff\xfe")
    with pytest.raises(D.IngestionError, match="offset 3"):
        D.load_text_chars(bad)
    with pytest.raises(D.IngestionError):
        D.load_text_chars(tmp_path / "missing.txt")


def test_text_chunk_caps():
    ds = D.text_from_string("abcdefgh" * 500, 8, 4)
    ds.max_train_chunks, ds.max_eval_chunks = 10, 3
    assert sum(len(b.x) for b in ds.train_batches(SeededRng(0))) == 10
    assert sum(len(b.x) for b in ds.eval_batches("val")) == 3


def unigram_perplexity(train_ids, eval_targets, vocab_size):
    """Order-0 model with add-one smoothing, counted by hand."""
    counts = Counter(train_ids.tolist())
    total = len(train_ids) + vocab_size
    nll = 0.0
    for t in eval_targets.reshape(-1).tolist():
        nll -= math.log((counts.get(t, 0) + 1) / total)
    return math.exp(nll / eval_targets.size)


@pytest.mark.skipif(not SHAKESPEARE.exists(), reason="character corpus not present")
def test_shallow_transformer_beats_unigram():
    ds = D.load_text_chars(SHAKESPEARE, chunk_length=32, batch_chunks=32, max_chars=120_000)
    lo, hi = ds.bounds["train"]
    baseline = unigram_perplexity(ds.ids[lo:hi], ds.chunks("val")[1], ds.vocab_size)
    rng = SeededRng(9)
    net = build_transformer_lm(rng.child("init"), ds.vocab_size, 32, 4, 64, 1, 32, "shallow")
    opt = init_optimizer("adam", net.params, 3e-3)
    for epoch in range(2):
        train_epoch(net, ds, opt, shuffle_rng=rng.child(f"s{epoch}"), batch_size=32, eval_test=False)
    _, ppl = evaluate(net, ds, "val")
    assert ppl < baseline
