import numpy as np
import pytest

from incr_gcf.errors import (
    BoundsError,
    ShapeError,
    SnapshotError,
    SnapshotFingerprintError,
    SnapshotTruncatedError,
    SnapshotVersionError,
    ValidationError,
)
from incr_gcf.graph import build_graph
from incr_gcf.model import (
    EmbeddingModel,
    FinalEmbeddings,
    expand_for_interval,
    forward,
    init_model,
    load_snapshot,
    read_snapshot,
    save_snapshot,
    score,
    score_all_items,
)

from .conftest import random_graph
from .test_graph import dense_normalized


def _final(users, items):
    users, items = np.asarray(users, float), np.asarray(items, float)
    return FinalEmbeddings(users, items, [users], [items])


def test_init_deterministic():
    a = init_model(5, 7, dim=4, seed=7)
    b = init_model(5, 7, dim=4, seed=7)
    assert a.user_emb0.tobytes() == b.user_emb0.tobytes()
    assert a.item_emb0.tobytes() == b.item_emb0.tobytes()
    assert a != init_model(5, 7, dim=4, seed=8)


def test_init_shape():
    m = init_model(3, 2, dim=4)
    assert m.user_emb0.shape == (3, 4) and m.item_emb0.shape == (2, 4)
    assert m.user_emb0.dtype == np.float32


def test_init_distribution():
    m = init_model(25_000, 1, dim=4, seed=3, dtype=np.float64)
    vals = m.user_emb0.ravel()
    assert vals.size == 10**5
    # std of the sample mean is 0.1 / sqrt(1e5) ~ 3e-4
    assert abs(vals.mean()) < 0.01
    assert abs(vals.std() - 0.1) < 0.002


@pytest.mark.parametrize("args", [(0, 3), (3, 0)])
def test_init_rejects_empty(args):
    with pytest.raises(ValidationError):
        init_model(*args)


def test_init_rejects_bad_dims():
    with pytest.raises(ValidationError):
        init_model(2, 2, dim=0)
    with pytest.raises(ValidationError):
        init_model(2, 2, n_layers=-1)


def test_forward_k0_is_identity(tiny_model):
    m = tiny_model
    m.n_layers = 0
    g = build_graph([(0, 0), (1, 2)], 4, 5)
    f = forward(m, g)
    np.testing.assert_array_equal(f.user_final, m.user_emb0)
    np.testing.assert_array_equal(f.item_final, m.item_emb0)


def test_forward_k1_empty_graph_halves(tiny_model):
    m = tiny_model
    m.n_layers = 1
    g = build_graph(np.zeros((0, 2), int), 4, 5)
    f = forward(m, g)
    np.testing.assert_array_equal(f.user_final, m.user_emb0 / 2)
    np.testing.assert_array_equal(f.item_final, m.item_emb0 / 2)


def test_forward_k2_dense_matrix_powers():
    pairs = [(0, 0), (0, 1), (1, 1), (2, 2), (1, 2)]
    g = build_graph(pairs, 3, 3)
    m = init_model(3, 3, dim=2, n_layers=2, seed=5, dtype=np.float64)
    f = forward(m, g)
    a = dense_normalized(pairs, 3, 3)
    e0 = np.vstack([m.user_emb0, m.item_emb0])
    want = (e0 + a @ e0 + a @ a @ e0) / 3
    np.testing.assert_allclose(np.vstack([f.user_final, f.item_final]), want, atol=1e-14)
    assert len(f.user_layers) == 3


def test_forward_shape_mismatch(tiny_model):
    with pytest.raises(ShapeError):
        forward(tiny_model, build_graph([(0, 0)], 3, 5))


def test_forward_is_linear_in_initial_embeddings():
    rng = np.random.default_rng(2)
    for _ in range(20):
        g, _ = random_graph(rng)
        x = init_model(g.n_users, g.n_items, dim=3, n_layers=2, seed=1, dtype=np.float64)
        y = init_model(g.n_users, g.n_items, dim=3, n_layers=2, seed=2, dtype=np.float64)
        a, b = rng.normal(size=2)
        z = x.copy()
        z.user_emb0 = a * x.user_emb0 + b * y.user_emb0
        z.item_emb0 = a * x.item_emb0 + b * y.item_emb0
        fx, fy, fz = forward(x, g), forward(y, g), forward(z, g)
        np.testing.assert_allclose(fz.user_final, a * fx.user_final + b * fy.user_final, atol=1e-12)
        np.testing.assert_allclose(fz.item_final, a * fx.item_final + b * fy.item_final, atol=1e-12)


def test_score_examples():
    e = np.eye(3)
    f = _final(e, e)
    assert score(f, 1, 1) == 1.0
    assert score(f, 0, 2) == 0.0
    rng = np.random.default_rng(9)
    u, i = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    f = _final(u, i)
    assert score(f, 1, 0) == pytest.approx(sum(u[1, k] * i[0, k] for k in range(3)), rel=1e-14)


def test_score_bounds():
    f = _final(np.eye(2), np.eye(2))
    with pytest.raises(BoundsError):
        score(f, 2, 0)
    with pytest.raises(BoundsError):
        score_all_items(f, -1)


def test_score_only_depends_on_its_rows():
    rng = np.random.default_rng(4)
    u, i = rng.normal(size=(5, 3)), rng.normal(size=(6, 3))
    s = score(_final(u, i), 2, 3)
    u2, i2 = u.copy(), i.copy()
    u2[[0, 1, 3, 4]] = u2[[4, 3, 1, 0]]
    i2[[0, 5]] = i2[[5, 0]]
    assert score(_final(u2, i2), 2, 3) == s


def test_score_all_items():
    rng = np.random.default_rng(1)
    f = _final(rng.normal(size=(2, 3)), rng.normal(size=(1, 3)))
    assert score_all_items(f, 0).tolist() == [score(f, 0, 0)]
    f = _final(np.zeros((1, 3)), rng.normal(size=(4, 3)))
    assert not score_all_items(f, 0).any()
    f = _final(rng.normal(size=(2, 3)), rng.normal(size=(5, 3)))
    np.testing.assert_allclose(score_all_items(f, 1), [score(f, 1, j) for j in range(5)], rtol=1e-14)


def test_expand_identity():
    m = init_model(3, 4, dim=2, seed=1)
    assert expand_for_interval(m, 3, 4) == m


def test_expand_keeps_prefix():
    m = init_model(3, 4, dim=2, seed=1)
    m.user_emb0 += 1.0  # trained values, not the init draws
    e = expand_for_interval(m, 4, 4, seed=1)
    assert e.user_emb0[:3].tobytes() == m.user_emb0.tobytes()
    assert e.n_users == 4


def test_expand_rows_match_fresh_init():
    # row r of a table depends only on (seed, kind, r), whatever the table size
    m = init_model(3, 300, dim=5, seed=11)
    e = expand_for_interval(m, 3, 302, seed=11)
    fresh = init_model(3, 302, dim=5, seed=11)
    assert e.item_emb0[300:].tobytes() == fresh.item_emb0[300:].tobytes()


def test_expand_refuses_to_shrink():
    with pytest.raises(ValidationError):
        expand_for_interval(init_model(3, 3, dim=2), 2, 3)


def test_snapshot_round_trip(tmp_path):
    m = init_model(7, 9, dim=6, n_layers=2, seed=4, fingerprint=b"\x01" * 32)
    p = tmp_path / "m.snap"
    save_snapshot(m, p)
    back = load_snapshot(p, expected_fingerprint=b"\x01" * 32)
    assert back == m
    snap = read_snapshot(p)
    assert (snap.version, snap.dim, snap.n_layers, snap.n_users, snap.n_items) == (1, 6, 2, 7, 9)


def test_snapshot_header_layout(tmp_path):
    m = init_model(2, 3, dim=4, n_layers=1)
    p = tmp_path / "m.snap"
    save_snapshot(m, p)
    raw = p.read_bytes()
    assert raw[:8] == b"IGCFSNAP"
    assert int.from_bytes(raw[8:12], "little") == 1
    assert len(raw) == 8 + 4 * 3 + 8 * 2 + 32 + 4 * 4 * 5
    body = np.frombuffer(raw[68:], dtype="<f4")
    np.testing.assert_array_equal(body[:8], m.user_emb0.ravel())


def test_snapshot_truncated(tmp_path):
    p = tmp_path / "m.snap"
    save_snapshot(init_model(2, 2, dim=2), p)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(SnapshotTruncatedError):
        load_snapshot(p)
    p.write_bytes(b"IGCF")
    with pytest.raises(SnapshotTruncatedError):
        load_snapshot(p)


def test_snapshot_fingerprint_mismatch(tmp_path):
    p = tmp_path / "m.snap"
    save_snapshot(init_model(2, 2, dim=2, fingerprint=b"a" * 32), p)
    with pytest.raises(SnapshotFingerprintError):
        load_snapshot(p, expected_fingerprint=b"b" * 32)


def test_snapshot_version_and_magic(tmp_path):
    p = tmp_path / "m.snap"
    save_snapshot(init_model(2, 2, dim=2), p)
    raw = bytearray(p.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    p.write_bytes(bytes(raw))
    with pytest.raises(SnapshotVersionError):
        load_snapshot(p)
    raw[:8] = b"NOTASNAP"
    p.write_bytes(bytes(raw))
    with pytest.raises(SnapshotError):
        load_snapshot(p)


def test_snapshot_errors_are_distinct():
    kinds = {SnapshotVersionError, SnapshotFingerprintError, SnapshotTruncatedError}
    assert len(kinds) == 3
    for a in kinds:
        for b in kinds - {a}:
            assert not issubclass(a, b)


def test_model_equality_is_bitwise():
    m = init_model(2, 2, dim=2)
    other = m.copy()
    assert m == other
    other.item_emb0[0, 0] = np.nextafter(other.item_emb0[0, 0], np.float32(1))
    assert m != other
    assert isinstance(m, EmbeddingModel)
