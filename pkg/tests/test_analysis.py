import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import linkage

from simoe import analysis as A
from simoe.autodiff import DegenerateInputError
from simoe.layers import AttachmentPolicy, GateInit
from simoe.model import TinyTransformer, TinyTransformerConfig, count_params, init_params
from simoe.upcycled import SIMoEModel


def test_overlap_examples():
    assert A.overlap_ratio([1, 1, 0, 0], [0, 1, 1, 0]) == pytest.approx(1 / 3)
    assert A.overlap_ratio([0.3, 0, 0], [0.3, 0, 0]) == 1.0
    assert A.overlap_ratio([0, 0], [0, 0]) == 0.0
    assert A.overlap_ratio([1, 0], [0, 1]) == 0.0
    with pytest.raises(ValueError):
        A.overlap_ratio([1, 0], [1, 0, 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_overlap_matrix_properties(seed):
    rng = np.random.default_rng(seed)
    masks = (rng.random((4, 12)) < 0.5) * rng.random((4, 12))
    mat = A.overlap_matrix(masks)
    np.testing.assert_array_equal(mat, mat.T)
    assert np.all((mat >= 0) & (mat <= 1))
    for i in range(4):
        assert mat[i, i] == (1.0 if masks[i].any() else 0.0)


def test_mean_off_diagonal():
    assert A.mean_off_diagonal(np.array([[1, 0.2], [0.2, 1]])) == pytest.approx(0.2)
    assert A.mean_off_diagonal(np.ones((1, 1))) == 0.0


def _model_with_masks(masks_by_layer):
    cfg = TinyTransformerConfig()
    seed = TinyTransformer.from_params(cfg, init_params(cfg, 0))
    names = list(masks_by_layer)
    m = SIMoEModel.upcycle(seed, AttachmentPolicy(names), 2, "instance", GateInit())
    for l in m.gated:
        l.log_phi.values[...] = np.where(masks_by_layer[l.layer_id.name], 5.0, -5.0)
    return m


def test_capacity_half_active():
    d = 64
    half = np.zeros((2, d), dtype=bool)
    half[:, : d // 2] = True
    full = np.ones((2, 256), dtype=bool)
    m = _model_with_masks({"blocks.0.query": half, "blocks.0.ffn_down": full})
    rep = A.capacity_report(m)
    assert rep["per_layer"]["blocks.0.query"]["mean"] == 0.5
    assert rep["by_kind"]["query"]["mean"] == 0.5
    assert rep["by_kind"]["ffn_down"]["mean"] == 1.0
    # depth 0 aggregate weights each layer by its delta size: 64*64 vs 64*256
    expected = (0.5 * 64 * 64 + 1.0 * 64 * 256) / (64 * 64 + 64 * 256)
    assert rep["by_depth"]["0"]["mean"] == pytest.approx(expected)


def test_overlap_report_on_model():
    a = np.zeros((2, 64), dtype=bool)
    a[0, :20] = True
    a[1, 10:30] = True
    rep = A.overlap_report(_model_with_masks({"blocks.1.key": a}))
    assert rep["mean_off_diagonal"] == pytest.approx(10 / 30)


def test_active_param_counts():
    a = np.zeros((2, 64), dtype=bool)
    a[0, :10] = True
    a[1, 5:20] = True
    m = _model_with_masks({"blocks.0.value": a})
    pr = A.active_param_count(m, pruned=True)
    un = A.active_param_count(m, pruned=False)
    assert pr["delta"] == 20 * 64 and pr["masks"] == 20 * 2
    assert un["delta"] == 64 * 64 and un["masks"] == 2 * 64
    assert pr["total"] < un["total"]
    assert pr["seed"] == un["seed"] == count_params(init_params(m.cfg, 0))


# ---------------------------------------------------------------- dendrogram


def brute_force_average_linkage(vectors):
    """Reference: recompute every cluster distance from scratch at each merge."""
    names = sorted(vectors)
    clusters = [frozenset([n]) for n in names]
    heights = []
    while len(clusters) > 1:
        best = None
        for a, b in itertools.combinations(clusters, 2):
            dist = np.mean([A.cosine_distance(vectors[x], vectors[y]) for x in a for y in b])
            if best is None or dist < best[0] - 1e-15:
                best = (dist, a, b)
        dist, a, b = best
        clusters = [c for c in clusters if c not in (a, b)] + [a | b]
        heights.append((dist, a | b))
    return heights


def test_dendrogram_examples():
    v = {"a": [1, 0, 0], "b": [0.9, 0.1, 0], "c": [0, 0, 1]}
    nodes = A.routing_dendrogram(v)
    merges = A.dendrogram_json(nodes)["merges"]
    assert merges[0]["members"] == ["a", "b"]
    assert merges[-1]["members"] == ["a", "b", "c"]
    with pytest.raises(DegenerateInputError):
        A.routing_dendrogram({"a": [0, 0], "b": [1, 0]})
    with pytest.raises(ValueError):
        A.routing_dendrogram({"a": [1, 0]})


def test_cosine_distance():
    assert A.cosine_distance([1, 0], [0, 1]) == 1.0
    assert A.cosine_distance([1, 1], [2, 2]) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        A.cosine_distance([0, 0], [1, 0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_dendrogram_matches_oracles(seed, n):
    rng = np.random.default_rng(seed)
    vectors = {f"d{i}": rng.dirichlet(np.ones(4)) for i in range(n)}
    nodes = A.routing_dendrogram(vectors)
    merges = [(nd.distance, frozenset(nd.members)) for nd in nodes if nd.children is not None]
    ref = brute_force_average_linkage(vectors)
    for (d1, m1), (d2, m2) in zip(merges, ref):
        assert d1 == pytest.approx(d2, abs=1e-12)
        assert m1 == m2
    names = sorted(vectors)
    Z = linkage(np.stack([vectors[k] for k in names]), method="average", metric="cosine")
    np.testing.assert_allclose([d for d, _ in merges], Z[:, 2], atol=1e-12)


def test_dendrogram_json_tree_structure():
    v = {"x": [1, 0.1], "y": [1, 0.2], "z": [0.1, 1]}
    tree = A.dendrogram_json(A.routing_dendrogram(v))["tree"]
    assert sorted(tree["members"]) == ["x", "y", "z"]
    leaves = []

    def walk(t):
        if "leaf" in t:
            leaves.append(t["leaf"])
        else:
            for c in t["children"]:
                walk(c)

    walk(tree)
    assert sorted(leaves) == ["x", "y", "z"]


# ---------------------------------------------------------------- pruned export


@pytest.mark.parametrize("routing", ["instance", "token"])
def test_export_round_trip_matches_unpruned(tmp_path, routing):
    rng = np.random.default_rng(3)
    cfg = TinyTransformerConfig()
    seed = TinyTransformer.from_params(cfg, init_params(cfg, 0))
    m = SIMoEModel.upcycle(seed, AttachmentPolicy("all_linear"), 3, routing, GateInit())
    for l in m.gated:
        l.theta_delta.values[...] = rng.normal(0, 0.1, l.theta_delta.shape)
        l.log_phi.values[...] = rng.normal(-1.0, 3.0, l.log_phi.shape)
    m.router.w_out.values[...] = rng.normal(size=m.router.w_out.shape)
    m.router.set_input_stats(rng.normal(1.0, 2.0, size=(20, 64)))
    A.export_pruned(m, tmp_path / "p")
    p = A.load_pruned(tmp_path / "p")
    ids = rng.integers(4, 64, size=(5, 11))
    prompts = [list(r) for r in ids]
    diff = np.max(np.abs(p(ids, prompts).values - m(ids, prompts).values))
    assert diff < 1e-10
    pr, un = A.active_param_count(m, True), A.active_param_count(m, False)
    assert pr["total"] < un["total"]
