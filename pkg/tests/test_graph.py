import numpy as np
import pytest

from mssgcl.graph import (
    Graph,
    IntegrityError,
    ParseError,
    degree_onehot_features,
    parse_tudataset,
    validate_graph,
    write_tudataset,
)

from conftest import synthetic_dataset


def write_files(directory, name, **files):
    directory.mkdir(parents=True, exist_ok=True)
    for suffix, lines in files.items():
        (directory / f"{name}_{suffix}.txt").write_text("\n".join(lines) + "\n")


@pytest.fixture
def two_triangles(tmp_path):
    # Nodes 1-3 form graph 1, nodes 4-6 graph 2.
    a = []
    for base in (0, 3):
        for i, j in ((1, 2), (2, 3), (1, 3)):
            a += [f"{base + i}, {base + j}", f"{base + j}, {base + i}"]
    write_files(
        tmp_path / "TRI",
        "TRI",
        A=a,
        graph_indicator=["1", "1", "1", "2", "2", "2"],
        graph_labels=["1", "2"],
    )
    return tmp_path / "TRI"


class TestParse:
    def test_two_triangles(self, two_triangles):
        ds = parse_tudataset(two_triangles, "TRI")
        assert len(ds) == 2
        assert ds.num_classes == 2
        assert [g.node_count for g in ds.graphs] == [3, 3]
        assert [g.num_edges for g in ds.graphs] == [3, 3]
        assert [g.label for g in ds.graphs] == [0, 1]
        # No node labels: degree one-hot, every node has degree 2.
        assert ds.feature_source == "degree"
        assert ds.feature_dim == 3
        np.testing.assert_array_equal(ds.graphs[0].features, np.tile([0, 0, 1.0], (3, 1)))

    def test_cross_graph_edge(self, tmp_path):
        write_files(tmp_path, "X", A=["1, 4", "4, 1"], graph_indicator=["1", "1", "1", "2"])
        with pytest.raises(IntegrityError, match=r"X_A.txt:1"):
            parse_tudataset(tmp_path, "X")

    def test_missing_file_named(self, tmp_path):
        write_files(tmp_path, "X", A=["1, 2", "2, 1"])
        with pytest.raises(ParseError, match="X_graph_indicator.txt"):
            parse_tudataset(tmp_path, "X")

    def test_non_integer_token_line_number(self, tmp_path):
        write_files(tmp_path, "X", A=["1, 2", "2, one"], graph_indicator=["1", "1"])
        with pytest.raises(ParseError, match=r"X_A.txt:2"):
            parse_tudataset(tmp_path, "X")

    def test_unpaired_direction(self, tmp_path):
        write_files(tmp_path, "X", A=["1, 2", "2, 1", "2, 3"], graph_indicator=["1", "1", "1"])
        with pytest.raises(IntegrityError, match="no reverse"):
            parse_tudataset(tmp_path, "X")

    def test_self_loops_dropped(self, tmp_path):
        write_files(tmp_path, "X", A=["1, 1", "1, 2", "2, 1"], graph_indicator=["1", "1"])
        ds = parse_tudataset(tmp_path, "X")
        assert ds.self_loops_dropped == 1
        assert ds.graphs[0].num_edges == 1

    def test_whitespace_tokens_and_label_remap(self, tmp_path):
        write_files(
            tmp_path,
            "X",
            A=["1 2", "2\t1", "3   4", "4 3"],
            graph_indicator=["1", "1", "2", "2"],
            graph_labels=["-1", "5"],
            node_labels=["7", "3", "3", "9"],
        )
        ds = parse_tudataset(tmp_path, "X")
        assert [g.label for g in ds.graphs] == [0, 1]
        assert ds.feature_dim == 3
        np.testing.assert_array_equal(ds.graphs[0].features, [[0, 1, 0], [1, 0, 0]])
        np.testing.assert_array_equal(ds.graphs[1].features, [[1, 0, 0], [0, 0, 1]])

    def test_unsorted_indicator(self, tmp_path):
        write_files(tmp_path, "X", A=["1, 3", "3, 1"], graph_indicator=["1", "2", "1"], node_labels=["0", "1", "2"])
        ds = parse_tudataset(tmp_path, "X")
        assert [g.node_count for g in ds.graphs] == [2, 1]
        np.testing.assert_array_equal(ds.graphs[0].edges, [[0, 1]])
        np.testing.assert_array_equal(ds.graphs[1].features, [[0, 1, 0]])


def test_mutag_statistics(mutag):
    assert len(mutag) == 188
    nodes = np.mean([g.node_count for g in mutag.graphs])
    edges = np.mean([g.num_edges for g in mutag.graphs])
    assert abs(nodes - 17.93) <= 0.01
    assert abs(edges - 19.79) <= 0.01
    assert mutag.num_classes == 2
    assert mutag.feature_dim == 7


def test_mutag_accounting(mutag):
    from conftest import MUTAG_DIR

    indicator_lines = len((MUTAG_DIR / "MUTAG_graph_indicator.txt").read_text().split())
    a_lines = sum(1 for line in (MUTAG_DIR / "MUTAG_A.txt").read_text().splitlines() if line.strip())
    assert sum(g.node_count for g in mutag.graphs) == indicator_lines
    assert sum(g.num_edges for g in mutag.graphs) == a_lines // 2
    for g in mutag.graphs:
        assert validate_graph(g) == []
        np.testing.assert_array_equal(g.features.sum(axis=1), 1.0)


@pytest.mark.parametrize("make", ["synthetic", "mutag"])
def test_round_trip(make, tmp_path, mutag):
    ds = synthetic_dataset() if make == "synthetic" else mutag
    write_tudataset(ds, tmp_path / "out", ds.name)
    again = parse_tudataset(tmp_path / "out", ds.name)
    assert again.equals(ds)


class TestDegreeOneHot:
    def test_degree_two(self):
        g = Graph(3, [(0, 1), (1, 2)], np.zeros((3, 0)))
        np.testing.assert_array_equal(degree_onehot_features(g, 4)[1], [0, 0, 1, 0, 0])

    def test_isolated_node(self):
        g = Graph(2, np.zeros((0, 2)), np.zeros((2, 0)))
        np.testing.assert_array_equal(degree_onehot_features(g, 3), [[1, 0, 0, 0]] * 2)

    def test_star_center_clamped(self):
        g = Graph(6, [(0, k) for k in range(1, 6)], np.zeros((6, 0)))
        feats = degree_onehot_features(g, 3)
        np.testing.assert_array_equal(feats[0], [0, 0, 0, 1])
        np.testing.assert_array_equal(feats.sum(axis=1), 1.0)


class TestValidate:
    def test_triangle_ok(self):
        assert validate_graph(Graph(3, [(0, 1), (1, 2), (0, 2)], np.eye(3))) == []

    def test_out_of_range(self):
        problems = validate_graph(Graph(3, [(0, 5)], np.eye(3)))
        assert len(problems) == 1 and "out of range" in problems[0]

    def test_duplicate(self):
        problems = validate_graph(Graph(3, [(0, 1), (1, 0)], np.eye(3)))
        assert len(problems) == 1 and "duplicates" in problems[0]

    def test_feature_rows(self):
        problems = validate_graph(Graph(3, [(0, 1)], np.eye(2)))
        assert any("features" in p for p in problems)
