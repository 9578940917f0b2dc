"""Graph containers, generators, and the text dataset format."""

import numpy as np
import pytest

from gnnsearch.errors import IngestionError, ParameterError
from gnnsearch.graphs import (
    LabeledDataset,
    canonical_edges,
    generate_multigraph,
    generate_sbm,
    load_citation,
    make_graph,
    make_mask,
    save_citation,
)


# ---------------------------------------------------------------------------
# containers and canonicalization


def test_canonical_edges_symmetrize_dedupe_selfloop():
    out = canonical_edges(3, [[0, 1], [0, 1], [1, 0]])
    expected = [[0, 0], [0, 1], [1, 0], [1, 1], [2, 2]]
    assert out.tolist() == expected


def test_canonical_edges_directed_mode_keeps_direction():
    out = canonical_edges(3, [[0, 1]], symmetrize=False)
    assert out.tolist() == [[0, 0], [0, 1], [1, 1], [2, 2]]


def test_canonical_edges_endpoint_out_of_range():
    with pytest.raises(ParameterError, match="out of range"):
        canonical_edges(3, [[0, 3]])


def test_make_graph_degrees_are_in_degrees(rng):
    g = make_graph(4, [[0, 1], [2, 1]], rng.standard_normal((4, 3)))
    # Each node gets a self-loop; node 1 additionally receives from 0 and 2.
    recount = np.bincount(g.dst, minlength=4)
    assert np.array_equal(g.degrees, recount)
    assert g.degrees.tolist() == [2, 3, 2, 1]
    assert g.degrees.sum() == g.edge_count


def test_make_graph_arrays_are_frozen(rng):
    g = make_graph(3, [[0, 1]], rng.standard_normal((3, 2)))
    with pytest.raises(ValueError):
        g.edges[0, 0] = 5
    with pytest.raises(ValueError):
        g.features[0, 0] = 5.0


def test_make_graph_validation(rng):
    with pytest.raises(ParameterError):
        make_graph(0, [], np.zeros((0, 2)))
    with pytest.raises(ParameterError, match="features shape"):
        make_graph(3, [], np.zeros((2, 2)))


def test_make_mask_disjoint_and_sorted():
    mask = make_mask(10, [3, 1], [5], [7, 9])
    assert mask.train.tolist() == [1, 3]
    assert mask.of("val").tolist() == [5]
    assert mask.of("test").tolist() == [7, 9]


def test_make_mask_rejects_overlap_and_bad_ids():
    with pytest.raises(ParameterError, match="overlap"):
        make_mask(10, [1, 2], [2], [3])
    with pytest.raises(ParameterError, match="out of range"):
        make_mask(10, [1], [11], [3])


def test_mask_of_unknown_kind():
    mask = make_mask(5, [0], [1], [2])
    with pytest.raises(ParameterError, match="mask kind"):
        mask.of("holdout")


def test_dataset_alignment_validated(rng):
    g = make_graph(3, [], rng.standard_normal((3, 2)))
    mask = make_mask(3, [0], [1], [2])
    with pytest.raises(ParameterError):
        LabeledDataset(graphs=(g,), labels=(), masks=(mask,), task_kind="single", class_count=2)
    with pytest.raises(ParameterError, match="task kind"):
        LabeledDataset(
            graphs=(g,), labels=(np.zeros(3, dtype=np.int64),), masks=(mask,),
            task_kind="regression", class_count=2,
        )


# ---------------------------------------------------------------------------
# generators


def test_sbm_basic_shape_and_split():
    ds = generate_sbm(2, 50, 0.2, 0.02, 16, 1.0, seed=7)
    g = ds.graphs[0]
    assert g.node_count == 100
    assert ds.class_count == 2
    assert np.array_equal(ds.labels[0], np.repeat([0, 1], 50))
    mask = ds.masks[0]
    assert mask.train.size == 20  # min(20, 50 // 5) per class, 2 classes
    assert mask.val.size == 25
    assert mask.train.size + mask.val.size + mask.test.size == 100
    assert np.intersect1d(mask.train, mask.val).size == 0


def test_sbm_degenerate_cliques():
    # p_in=1, p_out=0: two complete blocks. Directed edge count per block
    # is npb*(npb-1), plus one self-loop per node.
    npb = 6
    ds = generate_sbm(2, npb, 1.0, 0.0, 4, 1.0, seed=3)
    g = ds.graphs[0]
    assert g.edge_count == 2 * npb * (npb - 1) + 2 * npb
    labels = ds.labels[0]
    cross = labels[g.src] != labels[g.dst]
    assert not cross.any()


def test_sbm_deterministic_and_seed_sensitive():
    a = generate_sbm(2, 20, 0.3, 0.05, 8, 1.0, seed=7)
    b = generate_sbm(2, 20, 0.3, 0.05, 8, 1.0, seed=7)
    c = generate_sbm(2, 20, 0.3, 0.05, 8, 1.0, seed=8)
    assert np.array_equal(a.graphs[0].edges, b.graphs[0].edges)
    assert np.array_equal(a.graphs[0].features, b.graphs[0].features)
    assert np.array_equal(a.masks[0].train, b.masks[0].train)
    assert not np.array_equal(a.graphs[0].features, c.graphs[0].features)


def test_sbm_signal_separates_blocks():
    ds = generate_sbm(2, 30, 0.2, 0.02, 8, 5.0, seed=1)
    feats, labels = ds.graphs[0].features, ds.labels[0]
    centroids = np.stack([feats[labels == b].mean(axis=0) for b in range(2)])
    assigned = np.argmin(
        np.linalg.norm(feats[:, None, :] - centroids[None], axis=2), axis=1
    )
    assert np.mean(assigned == labels) > 0.95


def test_sbm_validation():
    with pytest.raises(ParameterError):
        generate_sbm(1, 10, 0.3, 0.1, 4, 1.0, seed=0)
    with pytest.raises(ParameterError, match="p_out"):
        generate_sbm(2, 10, 0.1, 0.3, 4, 1.0, seed=0)
    with pytest.raises(ParameterError, match="p_out"):
        generate_sbm(2, 10, 1.1, 0.3, 4, 1.0, seed=0)
    with pytest.raises(ParameterError):
        generate_sbm(2, 10, 0.3, 0.1, 4, 1.0, seed=0, train_per_class=10)


def test_multigraph_split_counts():
    ds = generate_multigraph(4, 20, 4.0, 6, 3, seed=0)
    kinds = []
    for mask, graph in zip(ds.masks, ds.graphs):
        if mask.train.size:
            kinds.append("train")
            assert mask.train.size == graph.node_count
        elif mask.val.size:
            kinds.append("val")
        else:
            kinds.append("test")
    assert kinds == ["train", "train", "val", "test"]
    assert ds.task_kind == "multi"
    for labels in ds.labels:
        assert labels.shape == (20, 3)
        assert set(np.unique(labels)) <= {0, 1}


def test_multigraph_deterministic():
    a = generate_multigraph(3, 15, 3.0, 4, 2, seed=5)
    b = generate_multigraph(3, 15, 3.0, 4, 2, seed=5)
    for ga, gb in zip(a.graphs, b.graphs):
        assert np.array_equal(ga.edges, gb.edges)
        assert np.array_equal(ga.features, gb.features)
    for la, lb in zip(a.labels, b.labels):
        assert np.array_equal(la, lb)


def test_multigraph_validation():
    with pytest.raises(ParameterError, match="at least 3"):
        generate_multigraph(2, 20, 4.0, 6, 3, seed=0)
    with pytest.raises(ParameterError):
        generate_multigraph(3, 20, -1.0, 6, 3, seed=0)


# ---------------------------------------------------------------------------
# text format


def _write(tmp_path, text):
    path = tmp_path / "data.txt"
    path.write_text(text, encoding="utf-8")
    return path


MINIMAL = """nodes 3 features 2 classes 2 task single
node 0 0.5 -1.5 0
node 1 2.0 0.25 1
node 2 -3.0 1.0 0
edge 0 1
mask train 0
mask val 1
mask test 2
"""


def test_load_minimal_file_canonicalizes(tmp_path):
    ds = load_citation(_write(tmp_path, MINIMAL))
    g = ds.graphs[0]
    # One declared edge becomes both directions plus three self-loops.
    assert g.edges.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1], [2, 2]]
    assert g.degrees.tolist() == [2, 2, 1]
    assert ds.labels[0].tolist() == [0, 1, 0]
    assert ds.masks[0].train.tolist() == [0]
    assert ds.class_count == 2


def test_save_load_round_trip_single(tmp_path):
    ds = generate_sbm(2, 12, 0.4, 0.05, 5, 1.5, seed=9)
    path = tmp_path / "sbm.txt"
    save_citation(ds, path)
    back = load_citation(path)
    assert np.array_equal(back.graphs[0].edges, ds.graphs[0].edges)
    assert np.array_equal(back.graphs[0].features, ds.graphs[0].features)
    assert np.array_equal(back.labels[0], ds.labels[0])
    for kind in ("train", "val", "test"):
        assert np.array_equal(back.masks[0].of(kind), ds.masks[0].of(kind))
    assert back.task_kind == ds.task_kind and back.class_count == ds.class_count
    # Self-loops are left out of the file itself.
    assert "edge 0 0" not in path.read_text(encoding="utf-8")


def test_save_load_round_trip_multi(tmp_path):
    rng = np.random.default_rng(2)
    g = make_graph(4, [[0, 1], [1, 2], [2, 3]], rng.standard_normal((4, 3)))
    ds = LabeledDataset(
        graphs=(g,),
        labels=(rng.integers(0, 2, size=(4, 3)).astype(np.int64),),
        masks=(make_mask(4, [0, 1], [2], [3]),),
        task_kind="multi",
        class_count=3,
    )
    path = tmp_path / "multi.txt"
    save_citation(ds, path)
    back = load_citation(path)
    assert back.task_kind == "multi"
    assert np.array_equal(back.labels[0], ds.labels[0])
    assert np.array_equal(back.graphs[0].features, ds.graphs[0].features)


@pytest.mark.parametrize(
    "mutation,message",
    [
        (("nodes 3 features 2 classes 2", 0), "line 1"),
        (("node 0 0.5 -1.5", 1), "line 2: node line needs"),
        (("node 9 0.5 -1.5 0", 1), "line 2: node id 9 out of range"),
        (("node 0 0.5 -1.5 7", 1), "line 2: label 7 out of range"),
        (("node 0 abc -1.5 0", 1), "line 2"),
        (("edge 0 9", 4), "line 5: edge endpoint out of range"),
        (("edge 0", 4), "line 5: edge line needs"),
        (("blob 0 1", 4), "line 5: unknown record kind"),
        (("mask weird 0", 5), "line 6: mask kind"),
        (("mask train x", 5), "line 6: invalid literal"),
    ],
)
def test_load_errors_name_the_line(tmp_path, mutation, message):
    replacement, lineno = mutation
    lines = MINIMAL.splitlines()
    lines[lineno] = replacement
    # Re-sorting may shift the reported number for mask lines; match loosely.
    with pytest.raises(IngestionError) as err:
        load_citation(_write(tmp_path, "\n".join(lines)))
    assert message.split(":")[0] in str(err.value)


def test_load_duplicate_and_missing_nodes(tmp_path):
    dup = MINIMAL.replace("node 1 2.0 0.25 1", "node 0 2.0 0.25 1")
    with pytest.raises(IngestionError, match="duplicate node id 0"):
        load_citation(_write(tmp_path, dup))
    missing = "\n".join(line for line in MINIMAL.splitlines() if not line.startswith("node 2"))
    with pytest.raises(IngestionError, match="node 2 never declared"):
        load_citation(_write(tmp_path, missing))


def test_load_overlapping_masks(tmp_path):
    bad = MINIMAL.replace("mask val 1", "mask val 0")
    with pytest.raises(IngestionError, match="mask"):
        load_citation(_write(tmp_path, bad))


def test_load_empty_file(tmp_path):
    with pytest.raises(IngestionError, match="line 1"):
        load_citation(_write(tmp_path, ""))


def test_save_rejects_multigraph(tmp_path):
    ds = generate_multigraph(3, 10, 3.0, 4, 2, seed=1)
    with pytest.raises(ParameterError, match="one graph"):
        save_citation(ds, tmp_path / "nope.txt")
