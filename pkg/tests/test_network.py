import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svdistill.network import (CorruptFileError, EncoderConfig, ParameterSet, backward, check_params,
                               forward, init_params, lde_pool, load_params, make_batch, replace_classifier,
                               save_params, select_groups)


def small_cfg(**kw):
    base = dict(input_dim=4, block_widths=(5, 3), conv_context=3, pooling="lde", lde_components=2,
                embedding_dim=3, num_classes=4)
    base.update(kw)
    return EncoderConfig(**base)


def seqs(rng, lengths, dim=4):
    return [rng.normal(size=(t, dim)) for t in lengths]


def loss_of(params, cfg, x, a, b):
    """Scalar probe loss: random linear functionals of the logits and the embedding."""
    tr = forward(params, cfg, x)
    return float(np.sum(a * tr.logits) + np.sum(b * tr.embedding))


def numeric_grad(params, cfg, x, a, b, group, name, h=1e-5):
    arr = params.values[group][name]
    out = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + h
        up = loss_of(params, cfg, x, a, b)
        arr[i] = old - h
        down = loss_of(params, cfg, x, a, b)
        arr[i] = old
        out[i] = (up - down) / (2 * h)
    return out


def rel_err(x, y):
    return np.max(np.abs(x - y)) / max(np.max(np.abs(x)), np.max(np.abs(y)), 1e-12)


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            small_cfg(num_classes=1)
        with pytest.raises(ValueError):
            small_cfg(lde_components=0)
        with pytest.raises(ValueError):
            small_cfg(conv_context=2)
        with pytest.raises(ValueError):
            small_cfg(embedding_dim=0)

    def test_dict_round_trip(self):
        cfg = small_cfg(pooling="mean", embedding_tap="pre")
        assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_linearity_collapse(self):
        cfg = small_cfg(pooling="mean")
        p = init_params(cfg, 0)
        for g in p.values.values():
            for k in g:
                g[k][...] = 0.0
        p.values["fc2"]["b"][...] = [0.5, -1.0, 2.0, 0.0]
        tr = forward(p, cfg, np.zeros((6, 4)))
        np.testing.assert_array_equal(tr.embedding, np.zeros((1, 3)))
        np.testing.assert_array_equal(tr.logits, [[0.5, -1.0, 2.0, 0.0]])

    def test_deterministic(self):
        cfg = small_cfg()
        x = seqs(np.random.default_rng(0), [7, 9])
        a, b = forward(init_params(cfg, 3), cfg, x), forward(init_params(cfg, 3), cfg, x)
        np.testing.assert_array_equal(a.logits, b.logits)
        np.testing.assert_array_equal(a.embedding, b.embedding)

    def test_mean_pooling_repeat_invariance(self):
        # frame context 1: repeating the whole sequence leaves every frame-level output unchanged
        cfg = small_cfg(pooling="mean", conv_context=1)
        p = init_params(cfg, 1)
        x = np.random.default_rng(2).normal(size=(8, 4))
        np.testing.assert_allclose(forward(p, cfg, np.vstack([x, x])).embedding,
                                   forward(p, cfg, x).embedding, rtol=0, atol=1e-14)

    def test_batch_matches_single(self):
        cfg = small_cfg()
        p = init_params(cfg, 4)
        x = seqs(np.random.default_rng(5), [5, 11, 3])
        joint = forward(p, cfg, x).embedding
        for i, s in enumerate(x):
            np.testing.assert_allclose(joint[i], forward(p, cfg, s).embedding[0], atol=1e-13)

    def test_output_shapes(self):
        cfg = small_cfg()
        tr = forward(init_params(cfg, 0), cfg, seqs(np.random.default_rng(0), [4, 6]))
        assert tr.logits.shape == (2, 4) and tr.embedding.shape == (2, 3)

    def test_errors(self):
        cfg = small_cfg()
        p = init_params(cfg, 0)
        with pytest.raises(ValueError):
            forward(p, cfg, np.zeros((5, 3)))
        with pytest.raises(ValueError):
            forward(p, cfg, np.zeros((2, 4)))


class TestLde:
    def test_single_component_is_mean_residual(self):
        x = np.random.default_rng(0).normal(size=(6, 3))
        mu = np.array([[0.2, -0.1, 0.4]])
        np.testing.assert_allclose(lde_pool(x, mu, [1.7]), x.mean(0) - mu[0], atol=1e-7)

    def test_frames_at_component_mean(self):
        mu = np.array([[5.0, 5.0], [-5.0, -5.0]])
        out = lde_pool(np.tile(mu[1], (4, 1)), mu, [1.0, 1.0]).reshape(2, 2)
        np.testing.assert_allclose(out[1], 0.0, atol=1e-12)

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        x, mu, s = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), np.array([0.7, 1.3])
        expected = []
        weights = []
        for t in range(4):
            logit = [-s[c] * np.sum((x[t] - mu[c]) ** 2) for c in range(2)]
            ex = np.exp(np.array(logit) - max(logit))
            weights.append(ex / ex.sum())
        weights = np.array(weights)
        for c in range(2):
            num = sum(weights[t, c] * (x[t] - mu[c]) for t in range(4))
            expected.append(num / (weights[:, c].sum() + 1e-8))
        np.testing.assert_allclose(lde_pool(x, mu, s), np.concatenate(expected), rtol=0, atol=1e-10)

    def test_nonpositive_scale(self):
        with pytest.raises(ValueError):
            lde_pool(np.zeros((3, 2)), np.zeros((1, 2)), [0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(1, 5))
    def test_residual_is_convex_combination(self, seed, c):
        rng = np.random.default_rng(seed)
        x, mu = rng.normal(size=(5, 2)), rng.normal(size=(c, 2))
        out = lde_pool(x, mu, np.full(c, 0.5)).reshape(c, 2)
        # weighted residuals lie in the convex hull of (x_t - mu_c)
        for k in range(c):
            diff = x - mu[k]
            assert np.all(out[k] <= diff.max(0) + 1e-9) and np.all(out[k] >= diff.min(0) - 1e-9)


@pytest.mark.parametrize("pooling", ["mean", "lde"])
@pytest.mark.parametrize("tap", ["post", "pre"])
def test_backward_finite_difference(pooling, tap):
    cfg = small_cfg(pooling=pooling, embedding_tap=tap)
    p = init_params(cfg, 7)
    rng = np.random.default_rng(8)
    x = seqs(rng, [5, 4, 7])
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 3))
    tr = forward(p, cfg, x)
    p.zero_grad()
    backward(p, tr, d_logits=a, d_embedding=b)
    for group, arrs in p.values.items():
        for name in arrs:
            num = numeric_grad(p, cfg, x, a, b, group, name)
            assert rel_err(p.grads[group][name], num) < 1e-5, (group, name)


class TestBackward:
    def test_zero_upstream(self):
        cfg = small_cfg()
        p = init_params(cfg, 0)
        tr = forward(p, cfg, seqs(np.random.default_rng(0), [5]))
        p.zero_grad()
        backward(p, tr, np.zeros((1, 4)), np.zeros((1, 3)))
        assert all(np.all(g == 0) for arrs in p.grads.values() for g in arrs.values())

    def test_frozen_groups_untouched(self):
        cfg = small_cfg()
        p = init_params(cfg, 0)
        tr = forward(p, cfg, seqs(np.random.default_rng(0), [5, 6]))
        p.zero_grad()
        train = select_groups(p, cfg, "last2fc")
        backward(p, tr, np.ones((2, 4)), trainable=set(train))
        for group, arrs in p.grads.items():
            nonzero = any(np.any(g != 0) for g in arrs.values())
            assert nonzero == (group in train)

    def test_partial_matches_full(self):
        cfg = small_cfg()
        p = init_params(cfg, 2)
        x = seqs(np.random.default_rng(1), [6, 5])
        d = np.random.default_rng(3).normal(size=(2, 4))
        p.zero_grad()
        backward(p, forward(p, cfg, x), d)
        full = {g: {k: v.copy() for k, v in arrs.items()} for g, arrs in p.grads.items()}
        p.zero_grad()
        train = select_groups(p, cfg, "last2fc+pool+lastblock")
        backward(p, forward(p, cfg, x), d, trainable=set(train))
        for g in train:
            for k in p.grads[g]:
                np.testing.assert_array_equal(p.grads[g][k], full[g][k])

    def test_shape_mismatch(self):
        cfg = small_cfg()
        p = init_params(cfg, 0)
        tr = forward(p, cfg, seqs(np.random.default_rng(0), [5]))
        with pytest.raises(ValueError):
            backward(p, tr, np.zeros((1, 5)))

    def test_foreign_trace(self):
        cfg = small_cfg()
        p, q = init_params(cfg, 0), init_params(cfg, 0)
        tr = forward(p, cfg, seqs(np.random.default_rng(0), [5]))
        with pytest.raises(ValueError):
            backward(q, tr, np.zeros((1, 4)))


class TestSelectionAndReplacement:
    def test_selections(self):
        cfg = small_cfg()
        p = init_params(cfg, 0)
        assert select_groups(p, cfg, "last2fc") == ["fc1", "fc2"]
        assert select_groups(p, cfg, "last2fc+pool+lastblock") == ["enc.block2", "pool.lde", "fc1", "fc2"]
        assert select_groups(p, cfg, "all") == p.group_names
        with pytest.raises(ValueError):
            select_groups(p, cfg, "first")

    def test_replace_classifier(self):
        cfg = small_cfg()
        p = init_params(cfg, 0)
        q, new_cfg = replace_classifier(p, cfg, 7, seed=1)
        assert new_cfg.num_classes == 7 and q.values["fc2"]["W"].shape == (3, 7)
        assert q.modified == {"fc2"}
        for g in p.group_names:
            if g != "fc2":
                for k in p.values[g]:
                    np.testing.assert_array_equal(q.values[g][k], p.values[g][k])
        check_params(q, new_cfg)

    def test_snapshot_is_read_only(self):
        snap = init_params(small_cfg(), 0).snapshot()
        with pytest.raises(ValueError):
            snap.values["fc1"]["W"][0, 0] = 1.0


class TestModelFile:
    def test_round_trip(self, tmp_path):
        cfg = small_cfg()
        p, cfg2 = replace_classifier(init_params(cfg, 5), cfg, 6, seed=2)
        save_params(p, cfg2, tmp_path / "m.bin")
        q, cfg3 = load_params(tmp_path / "m.bin", expected_cfg=cfg2)
        assert cfg3 == cfg2 and q.equals(p) and q.modified == p.modified

    def test_truncated(self, tmp_path):
        cfg = small_cfg()
        save_params(init_params(cfg, 0), cfg, tmp_path / "m.bin")
        data = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(data[:-9])
        with pytest.raises(CorruptFileError):
            load_params(tmp_path / "t.bin")

    def test_flipped_byte(self, tmp_path):
        cfg = small_cfg()
        save_params(init_params(cfg, 0), cfg, tmp_path / "m.bin")
        data = bytearray((tmp_path / "m.bin").read_bytes())
        data[len(data) // 2] ^= 0xFF
        (tmp_path / "c.bin").write_bytes(bytes(data))
        with pytest.raises(CorruptFileError):
            load_params(tmp_path / "c.bin")

    def test_config_mismatch(self, tmp_path):
        cfg = small_cfg()
        save_params(init_params(cfg, 0), cfg, tmp_path / "m.bin")
        with pytest.raises(ValueError):
            load_params(tmp_path / "m.bin", expected_cfg=small_cfg(num_classes=5))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOTAMODEL" + bytes(20))
        with pytest.raises(CorruptFileError):
            load_params(tmp_path / "x.bin")


def test_make_batch_offsets():
    b = make_batch([np.zeros((3, 2)), np.zeros((5, 2))])
    assert list(b.offsets) == [0, 3] and list(b.lengths) == [3, 5]
    assert list(b.seg) == [0, 0, 0, 1, 1, 1, 1, 1]


def test_parameter_set_equality_and_copy():
    p = init_params(small_cfg(), 0)
    q = p.copy()
    assert q.equals(p)
    q.values["fc1"]["b"][0] += 1.0
    assert not q.equals(p)
    assert isinstance(q, ParameterSet)
