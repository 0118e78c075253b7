import json

import numpy as np
import pytest

from vaeaudit.dataio import SubgroupKey
from vaeaudit.latentlab import (
    EmbeddingMatrix,
    LatentLabError,
    NeighborEntry,
    embed_dataset,
    knn_composition,
    knn_global,
    nearest_centroid_subgroup,
    project_2d,
    pull_effect,
    write_embeddings_csv,
    write_projection_csv,
    write_pull_records_json,
)

from conftest import IdentityModel, interior_image, make_dataset


def key_of(male: str, young: str) -> SubgroupKey:
    return SubgroupKey((("Male", male), ("Young", young)))


def toy_matrix() -> EmbeddingMatrix:
    """Six points in two clusters, hand-placed for exact neighbor checks."""
    ids = ("a", "b", "c", "d", "e", "f")
    vectors = np.array(
        [
            [0.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [10.0, 10.0],
            [11.0, 10.0],
            [10.0, 11.0],
        ]
    )
    left, right = key_of("+", "+"), key_of("-", "-")
    return EmbeddingMatrix(ids, vectors, (left, left, left, right, right, right))


def brute_force_knn(matrix: EmbeddingMatrix, query, k, exclude=None):
    """Independent exhaustive scan with the same (distance, id) tie rule."""
    scored = []
    for i in range(matrix.n):
        if matrix.ids[i] == exclude:
            continue
        d = float(np.sqrt(np.sum((matrix.vectors[i] - query) ** 2)))
        scored.append((d, matrix.ids[i]))
    scored.sort()
    return [NeighborEntry(sample_id=sid, distance=d) for d, sid in scored[:k]]


# ---------------------------------------------------------------------------
# Matrix construction


def test_matrix_validation():
    key = key_of("+", "+")
    with pytest.raises(LatentLabError):
        EmbeddingMatrix(("a", "b"), np.zeros((2, 3)), (key,))  # length mismatch
    with pytest.raises(LatentLabError):
        EmbeddingMatrix(("a", "a"), np.zeros((2, 3)), (key, key))  # duplicate id
    with pytest.raises(LatentLabError):
        EmbeddingMatrix(("a",), np.array([[np.nan]]), (key,))
    with pytest.raises(LatentLabError):
        EmbeddingMatrix(("a",), np.zeros(3), (key,))  # not 2-D


def test_matrix_accessors():
    matrix = toy_matrix()
    assert matrix.n == 6
    assert matrix.latent_dim == 2
    assert np.array_equal(matrix.row("b"), [1.0, 0.0])
    assert matrix.subgroup_keys() == [key_of("+", "+"), key_of("-", "-")]
    assert np.allclose(matrix.centroid(key_of("-", "-")), [31 / 3, 31 / 3])
    with pytest.raises(LatentLabError):
        matrix.row("zz")


def test_embed_dataset_identity_rows_are_flattened_inputs():
    dataset, _ = make_dataset(majority=3, minority=1)
    model = IdentityModel(dataset.image_shape)
    matrix = embed_dataset(model, dataset)
    assert matrix.n == len(dataset.samples)
    for sample in dataset.samples:
        expected = sample.pixels.transpose(2, 0, 1).reshape(-1)
        assert np.allclose(matrix.row(sample.id), expected)
    for i, sid in enumerate(matrix.ids):
        sample = dataset.get(sid)
        assert matrix.subgroups[i] == SubgroupKey.from_attributes(
            dataset.schema.protected, sample.attributes
        )


def test_embed_dataset_subset():
    dataset, _ = make_dataset(majority=3, minority=1)
    model = IdentityModel(dataset.image_shape)
    chosen = dataset.ids[:3]
    matrix = embed_dataset(model, dataset, ids=chosen)
    assert matrix.ids == tuple(chosen)


# ---------------------------------------------------------------------------
# Neighborhoods


def test_knn_composition_hand_checked():
    matrix = toy_matrix()
    out = knn_composition(matrix, np.array([0.0, 0.0]), k=2)
    left = out[key_of("+", "+")]
    assert [e.sample_id for e in left] == ["a", "b"]  # d=0, then tie b/c broken by id
    assert left[0].distance == 0.0
    assert left[1].distance == pytest.approx(1.0)
    right = out[key_of("-", "-")]
    assert [e.sample_id for e in right] == ["d", "e"]


def test_knn_tie_breaks_by_ascending_id():
    key = key_of("+", "+")
    matrix = EmbeddingMatrix(
        ("z", "m", "a"), np.array([[1.0], [1.0], [1.0]]), (key, key, key)
    )
    out = knn_composition(matrix, np.array([0.0]), k=3)[key]
    assert [e.sample_id for e in out] == ["a", "m", "z"]


def test_knn_matches_brute_force_on_random_data():
    rng = np.random.default_rng(0)
    n = 400
    keys = [key_of("+", "+"), key_of("+", "-"), key_of("-", "+"), key_of("-", "-")]
    ids = tuple(f"s{i:04d}" for i in range(n))
    vectors = rng.normal(size=(n, 5))
    # quantize so exact ties actually occur
    vectors = np.round(vectors, 1)
    subgroups = tuple(keys[i % 4] for i in range(n))
    matrix = EmbeddingMatrix(ids, vectors, subgroups)
    for trial in range(10):
        query = np.round(rng.normal(size=5), 1)
        k = int(rng.integers(1, 12))
        exclude = ids[int(rng.integers(n))] if trial % 2 else None
        assert knn_global(matrix, query, k, exclude=exclude) == brute_force_knn(
            matrix, query, k, exclude=exclude
        )
        per_group = knn_composition(matrix, query, k, exclude=exclude)
        for key in keys:
            members = [i for i in range(n) if subgroups[i] == key]
            sub = EmbeddingMatrix(
                tuple(ids[i] for i in members),
                vectors[members],
                tuple(subgroups[i] for i in members),
            )
            assert per_group[key] == brute_force_knn(sub, query, k, exclude=exclude)


def test_knn_small_subgroup_returns_all_members():
    matrix = toy_matrix()
    out = knn_composition(matrix, np.zeros(2), k=10)
    assert len(out[key_of("+", "+")]) == 3


def test_knn_exclude_self():
    matrix = toy_matrix()
    out = knn_composition(matrix, matrix.row("a"), k=3, exclude="a")
    assert "a" not in [e.sample_id for e in out[key_of("+", "+")]]


def test_knn_validation():
    matrix = toy_matrix()
    with pytest.raises(LatentLabError):
        knn_composition(matrix, np.zeros(2), k=0)
    with pytest.raises(LatentLabError):
        knn_composition(matrix, np.zeros(3), k=1)
    with pytest.raises(LatentLabError):
        knn_global(matrix, np.zeros(3), k=1)


def test_nearest_centroid_subgroup():
    matrix = toy_matrix()
    assert nearest_centroid_subgroup(matrix, np.array([0.0, 0.0])) == key_of("+", "+")
    assert nearest_centroid_subgroup(matrix, np.array([12.0, 12.0])) == key_of("-", "-")


def test_nearest_centroid_tie_breaks_by_canonical_name():
    a, b = key_of("+", "+"), key_of("-", "-")
    matrix = EmbeddingMatrix(("x", "y"), np.array([[-1.0], [1.0]]), (a, b))
    # query at 0 is equidistant from both centroids; '+' sorts before '-'
    assert nearest_centroid_subgroup(matrix, np.array([0.0])) == a


# ---------------------------------------------------------------------------
# Pull effect


def test_pull_effect_zero_delta_zero_displacement():
    dataset, _ = make_dataset(majority=3, minority=1)
    model = IdentityModel(dataset.image_shape)
    matrix = embed_dataset(model, dataset)
    x = dataset.samples[0].pixels
    record = pull_effect(model, matrix, x, np.zeros_like(x), k=2, sample_id="q")
    assert record.displacement == 0.0
    assert not record.switched
    assert record.neighbors == record.adversarial_neighbors
    assert np.array_equal(record.embedding, record.adversarial_embedding)


def test_pull_effect_nonzero_delta_moves_embedding():
    dataset, _ = make_dataset(majority=3, minority=1)
    model = IdentityModel(dataset.image_shape)
    matrix = embed_dataset(model, dataset)
    x = interior_image(dataset.image_shape, seed=4, margin=0.2)
    delta = np.full_like(x, 0.05)
    record = pull_effect(model, matrix, x, delta, k=2)
    # identity embedding: displacement equals the L2 norm of the delta
    assert record.displacement == pytest.approx(float(np.sqrt(np.sum(delta**2))))


def test_pull_effect_budget_enforced():
    dataset, _ = make_dataset(majority=3, minority=1)
    model = IdentityModel(dataset.image_shape)
    matrix = embed_dataset(model, dataset)
    x = dataset.samples[0].pixels
    delta = np.full_like(x, 0.2)
    with pytest.raises(LatentLabError):
        pull_effect(model, matrix, x, delta, budget=0.1)
    # exactly at budget passes
    pull_effect(model, matrix, x, np.full_like(x, 0.1), budget=0.1)


def test_pull_effect_centroid_switch_two_clusters():
    left, right = key_of("+", "+"), key_of("-", "-")
    shape = (2, 2, 1)
    model = IdentityModel(shape)
    # cluster centroids at 0.1 and 0.9 in every coordinate
    ids = ("l1", "l2", "r1", "r2")
    vectors = np.array(
        [[0.1] * 4, [0.12] * 4, [0.9] * 4, [0.88] * 4]
    )
    matrix = EmbeddingMatrix(ids, vectors, (left, left, right, right))
    x = np.full(shape, 0.15)
    record = pull_effect(model, matrix, x, np.full(shape, 0.7), k=1)
    assert record.centroid_subgroup == left
    assert record.adversarial_centroid_subgroup == right
    assert record.switched


# ---------------------------------------------------------------------------
# Projections


def test_pca_projection_rank2_exact():
    # points lie exactly in a 2-D subspace of R^4: PCA must capture all variance
    rng = np.random.default_rng(1)
    basis = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    weights = rng.normal(size=(20, 2))
    vectors = weights @ basis
    key = key_of("+", "+")
    matrix = EmbeddingMatrix(
        tuple(f"s{i:02d}" for i in range(20)), vectors, (key,) * 20
    )
    projection = project_2d(matrix, method="pca")
    centered = vectors - vectors.mean(axis=0)
    assert np.linalg.norm(projection.coords) == pytest.approx(np.linalg.norm(centered))


def test_pca_row_order_invariance():
    rng = np.random.default_rng(2)
    n = 15
    vectors = rng.normal(size=(n, 4))
    key = key_of("+", "+")
    ids = tuple(f"s{i:02d}" for i in range(n))
    matrix = EmbeddingMatrix(ids, vectors, (key,) * n)
    perm = rng.permutation(n)
    shuffled = EmbeddingMatrix(
        tuple(ids[i] for i in perm), vectors[perm], (key,) * n
    )
    p1 = project_2d(matrix, method="pca")
    p2 = project_2d(shuffled, method="pca")
    for sid in ids:
        assert np.array_equal(p1.coord_of(sid), p2.coord_of(sid))  # bit-exact


def test_pca_sign_convention():
    # data varying along +e1 only; the component's largest loading must be
    # positive, so the coordinate increases with the raw value
    key = key_of("+", "+")
    vectors = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    matrix = EmbeddingMatrix(("a", "b", "c", "d"), vectors, (key,) * 4)
    projection = project_2d(matrix, method="pca")
    xs = projection.coords[:, 0]
    assert np.all(np.diff(xs) > 0)
    assert np.allclose(projection.coords[:, 1], 0.0)


def test_pca_first_axis_carries_most_variance():
    rng = np.random.default_rng(3)
    vectors = np.hstack(
        [rng.normal(0, 5, size=(30, 1)), rng.normal(0, 1, size=(30, 1)), rng.normal(0, 0.1, size=(30, 2))]
    )
    key = key_of("+", "+")
    matrix = EmbeddingMatrix(tuple(f"s{i:02d}" for i in range(30)), vectors, (key,) * 30)
    coords = project_2d(matrix, method="pca").coords
    assert np.var(coords[:, 0]) >= np.var(coords[:, 1])


def test_pca_one_dim_zero_pads():
    key = key_of("+", "+")
    matrix = EmbeddingMatrix(("a", "b", "c"), np.array([[1.0], [2.0], [4.0]]), (key,) * 3)
    projection = project_2d(matrix, method="pca")
    assert projection.coords.shape == (3, 2)
    assert np.array_equal(projection.coords[:, 1], np.zeros(3))


def test_projection_needs_two_rows():
    key = key_of("+", "+")
    matrix = EmbeddingMatrix(("a",), np.array([[1.0, 2.0]]), (key,))
    with pytest.raises(LatentLabError):
        project_2d(matrix)
    with pytest.raises(LatentLabError):
        project_2d(toy_matrix(), method="umap")


def test_tsne_smoke_deterministic_under_seed():
    rng = np.random.default_rng(4)
    key = key_of("+", "+")
    n = 12
    matrix = EmbeddingMatrix(
        tuple(f"s{i:02d}" for i in range(n)), rng.normal(size=(n, 3)), (key,) * n
    )
    p1 = project_2d(matrix, method="tsne", seed=7)
    p2 = project_2d(matrix, method="tsne", seed=7)
    assert p1.coords.shape == (n, 2)
    assert np.allclose(p1.coords, p2.coords)


# ---------------------------------------------------------------------------
# Persistence


def test_embeddings_csv(tmp_path):
    matrix = toy_matrix()
    path = tmp_path / "emb.csv"
    write_embeddings_csv(matrix, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "id,subgroup,v_1,v_2"
    assert lines[1] == "a,Male+-Young+,0.0,0.0"
    assert [line.split(",")[0] for line in lines[1:]] == sorted(matrix.ids)


def test_projection_csv(tmp_path):
    matrix = toy_matrix()
    projection = project_2d(matrix, method="pca")
    path = tmp_path / "proj.csv"
    write_projection_csv(projection, matrix, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "id,subgroup,x,y"
    assert len(lines) == 7
    other = EmbeddingMatrix(("q", "r"), np.zeros((2, 2)), (key_of("+", "+"),) * 2)
    with pytest.raises(LatentLabError):
        write_projection_csv(projection, other, path)


def test_pull_records_json(tmp_path):
    dataset, _ = make_dataset(majority=3, minority=1)
    model = IdentityModel(dataset.image_shape)
    matrix = embed_dataset(model, dataset)
    x = dataset.samples[0].pixels
    records = [
        pull_effect(model, matrix, x, np.zeros_like(x), k=1, sample_id="b"),
        pull_effect(model, matrix, x, np.zeros_like(x), k=1, sample_id="a"),
    ]
    path = tmp_path / "pull.json"
    write_pull_records_json(records, path)
    payload = json.loads(path.read_text())
    assert [r["sample_id"] for r in payload["records"]] == ["a", "b"]
    first = payload["records"][0]
    assert first["displacement"] == 0.0
    assert first["centroid_subgroup"] == first["adversarial_centroid_subgroup"]
