import numpy as np
import pytest

from conftest import central_diff, random_grid, rel_error
from dvgo.errors import InvalidInputError, LoadError
from dvgo.grid import Bbox3, DenseGrid, trilinear_sample
from dvgo.scene import (CoarseScene, FineScene, MlpParams, encoding_size, init_mlp, load_scene,
                        mlp_backward, mlp_forward, mlp_input, positional_encoding, query_coarse,
                        query_fine, save_scene, scene_summary)


def make_fine(rng, with_mlp=True, feat_dim=4):
    box = Bbox3([-1, -1, -1], [1, 1, 1])
    density = DenseGrid(rng.normal(size=(1, 3, 4, 3)), box)
    feat = DenseGrid(rng.normal(size=(feat_dim if with_mlp else 3, 3, 4, 3)), box)
    mlp = init_mlp(feat_dim + encoding_size(2) + encoding_size(1), 16, 2, 3, rng) if with_mlp else None
    return FineScene(density, feat, mlp, -1.5, 0.1, k_x=2, k_d=1)


def test_positional_encoding_layout():
    v = np.array([[0.5, -1.0, 2.0]])
    enc = positional_encoding(v, 2)
    assert enc.shape == (1, encoding_size(2))
    np.testing.assert_allclose(enc[0, :3], v[0])
    np.testing.assert_allclose(enc[0, 3:6], np.sin(v[0]))
    np.testing.assert_allclose(enc[0, 6:9], np.cos(v[0]))
    np.testing.assert_allclose(enc[0, 9:12], np.sin(2 * v[0]))
    assert positional_encoding(v, 0).shape == (1, 3)


def test_positional_encoding_keeps_float32():
    assert positional_encoding(np.ones((2, 3), np.float32), 3).dtype == np.float32
    assert positional_encoding(np.ones((2, 3), int), 1).dtype == np.float64


def test_mlp_init_ranges(rng):
    p = init_mlp(10, 32, 2, 3, rng)
    assert [w.shape for w in p.weights] == [(10, 32), (32, 32), (32, 3)]
    assert np.all(np.abs(p.weights[0]) <= np.sqrt(6 / 42))
    assert all(np.all(b == 0) for b in p.biases)


def test_mlp_shape_mismatch(rng):
    with pytest.raises(InvalidInputError):
        MlpParams([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])
    p = init_mlp(4, 8, 1, 3, rng)
    with pytest.raises(InvalidInputError):
        mlp_forward(p, np.zeros((2, 5)))


def test_mlp_output_in_unit_interval(rng):
    p = init_mlp(6, 16, 2, 3, rng)
    out, _ = mlp_forward(p, rng.normal(size=(50, 6)) * 10)
    assert np.all((out >= 0) & (out <= 1))


def test_mlp_backward_matches_fd(rng):
    p = init_mlp(5, 7, 2, 3, rng)
    for b in p.biases:
        b += rng.normal(size=b.shape) * 0.1
    x = rng.normal(size=(4, 5))
    up = rng.normal(size=(4, 3))
    out, cache = mlp_forward(p, x)
    gw, gb, gx = mlp_backward(p, cache, up)

    def f_w(i):
        def f(w):
            q = p.copy()
            q.weights[i] = w
            return float(np.sum(mlp_forward(q, x)[0] * up))
        return f

    for i in range(3):
        assert rel_error(gw[i], central_diff(f_w(i), p.weights[i])) < 1e-6
    assert rel_error(gx, central_diff(lambda v: float(np.sum(mlp_forward(p, v)[0] * up)), x)) < 1e-6
    _, _, partial = mlp_backward(p, cache, up, input_cols=2)
    np.testing.assert_allclose(partial, gx[:, :2])


def test_mlp_float32_path_close_to_float64(rng):
    p = init_mlp(6, 16, 2, 3, rng)
    x = rng.normal(size=(20, 6))
    out64, _ = mlp_forward(p, x)
    out32, _ = mlp_forward(p, x.astype(np.float32))
    assert out32.dtype == np.float32
    np.testing.assert_allclose(out32, out64, atol=1e-5)


def test_scene_validation(rng):
    box = Bbox3([0, 0, 0], [1, 1, 1])
    d = DenseGrid(np.zeros((1, 2, 2, 2)), box)
    with pytest.raises(InvalidInputError):
        CoarseScene(d, DenseGrid(np.zeros((2, 2, 2, 2)), box), 0.0, 0.1)
    with pytest.raises(InvalidInputError):
        FineScene(d, DenseGrid(np.zeros((4, 2, 2, 2)), box), None, 0.0, 0.1)
    with pytest.raises(InvalidInputError):
        FineScene(d, DenseGrid(np.zeros((4, 2, 2, 2)), box), init_mlp(5, 4, 1, 3, rng), 0.0, 0.1)


def test_query_coarse_and_fine(rng):
    box = Bbox3([0, 0, 0], [1, 1, 1])
    coarse = CoarseScene(DenseGrid(np.full((1, 2, 2, 2), 0.25), box), DenseGrid(np.zeros((3, 2, 2, 2)), box), 0, 0.1)
    raw, rgb = query_coarse(coarse, np.array([[0.3, 0.3, 0.3]]))
    assert raw[0] == pytest.approx(0.25)
    np.testing.assert_allclose(rgb, 0.5)
    fine = make_fine(rng)
    x = rng.uniform(-1, 1, (5, 3))
    d = np.array([0.0, 0.0, 1.0])
    raw, rgb = query_fine(fine, x, d)
    assert raw.shape == (5,) and rgb.shape == (5, 3)
    feat = fine.feat
    x_in = mlp_input(np.zeros((1, feat.channels)), x[:1], d[None], 2, 1)
    assert x_in.shape[1] == fine.mlp_in_dim


def test_diffuse_fine_scene_queries_sigmoid_colour(rng):
    fine = make_fine(rng, with_mlp=False)
    _, rgb = query_fine(fine, np.zeros((1, 3)), np.array([1.0, 0, 0]))
    np.testing.assert_allclose(rgb[0], 1 / (1 + np.exp(-trilinear_sample(fine.feat, np.zeros(3)))))
    assert "feat" in fine.params() and "mlp.w0" not in fine.params()


def test_checkpoint_roundtrip(tmp_path, rng):
    fine = make_fine(rng)
    save_scene(fine, tmp_path / "f.ckpt")
    back = load_scene(tmp_path / "f.ckpt")
    assert back.kind == "fine" and back.k_x == 2 and back.k_d == 1
    assert back.bias == fine.bias and back.step == fine.step
    np.testing.assert_allclose(back.density.values, fine.density.values, rtol=1e-6)
    for a, b in zip(back.mlp.weights, fine.mlp.weights):
        np.testing.assert_allclose(a, b, rtol=1e-6)
    x = rng.uniform(-1, 1, (6, 3))
    np.testing.assert_allclose(query_fine(back, x, [0, 1, 0])[1], query_fine(fine, x, [0, 1, 0])[1], atol=1e-5)
    box = Bbox3([0, 0, 0], [1, 1, 1])
    coarse = CoarseScene(random_grid(rng, 1, (2, 3, 2), (0, 0, 0), (1, 1, 1)),
                         random_grid(rng, 3, (2, 3, 2), (0, 0, 0), (1, 1, 1)), -3.0, 0.2)
    save_scene(coarse, tmp_path / "c.ckpt")
    assert load_scene(tmp_path / "c.ckpt").kind == "coarse"
    assert scene_summary(coarse)["dims"] == [2, 3, 2]
    assert box == coarse.density.bbox


def test_checkpoint_is_byte_stable(tmp_path, rng):
    fine = make_fine(rng)
    save_scene(fine, tmp_path / "a.ckpt")
    save_scene(fine, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_load_errors(tmp_path):
    with pytest.raises(LoadError):
        load_scene(tmp_path / "nope.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"not a zip")
    with pytest.raises(LoadError):
        load_scene(tmp_path / "bad.ckpt")
