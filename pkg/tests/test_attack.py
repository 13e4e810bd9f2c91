import ast
import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import softmax
from tepalab import attack
from tepalab.attack import (
    AttackConfig,
    diverse_index_map,
    diverse_transform,
    dim,
    h_max_for,
    poigen,
    prediction_entropy,
    rotation_loss,
)
from tepalab.errors import ConfigError
from tepalab.models import ArchSpec, PlainModel, YModel, build_model
from tepalab.nn import ops
from tepalab.nn.tensor import Tensor

EPS = 32 / 255


def _x(n=4, size=8, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32)


class TestConfig:
    def test_method_defaults(self):
        ttt = AttackConfig.for_method("ttt")
        assert ttt.i_adv == 20 and ttt.i_iter == 3
        assert [ttt.alpha_at(i) for i in (0, 9, 10, 14, 15, 19)] == [4 / 255] * 2 + [2 / 255] * 2 + [1 / 255] * 2
        tent = AttackConfig.for_method("tent")
        assert tent.i_adv == 200 and tent.alpha_at(150) == 1 / 255
        assert tent.epsilon == EPS and tent.p == 0.5 and tent.mu == 1.0

    @pytest.mark.parametrize("kw", [dict(epsilon=1.5), dict(p=-0.1), dict(alpha=0.5), dict(alpha=0.0), dict(sigma2_dua=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            AttackConfig(**kw)

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            AttackConfig.for_method("bn-adapt")
        with pytest.raises(ConfigError):
            poigen("bn-adapt", _x(), build_model(ArchSpec()))


class TestDiversity:
    def test_h_max(self):
        assert h_max_for(32) == 35
        assert h_max_for(10) == 11

    def test_p_zero_identity(self):
        x = _x(5)
        np.testing.assert_array_equal(diverse_transform(x, 0.0, np.random.default_rng(0)), x)

    def test_p_one_with_h_max_equal_h_identity(self):
        x = _x(5)
        np.testing.assert_array_equal(diverse_transform(x, 1.0, np.random.default_rng(0), h_max=8), x)

    def test_shape_and_range_over_1000_draws(self):
        rng = np.random.default_rng(1)
        x = _x(1000, size=32, seed=2)
        out = diverse_transform(x, 0.5, rng)
        assert out.shape == x.shape
        assert out.min() >= 0 and out.max() <= 1
        changed = np.any(out != x, axis=(1, 2, 3)).mean()
        assert 0.4 < changed < 0.6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 40), st.integers(0, 2**31 - 1))
    def test_index_map_in_bounds(self, h, seed):
        rows, cols, valid = diverse_index_map(3, h, h, 1.0, np.random.default_rng(seed))
        assert rows.min() >= 0 and rows.max() < h and cols.min() >= 0 and cols.max() < h
        # the resized image always covers at least h/h_max of each side
        assert valid.any(axis=(1, 2)).all()


class TestDim:
    def test_eps_zero_returns_input(self):
        x = _x()
        m = build_model(ArchSpec(widths=(4, 8)))
        out = dim(x, None, m, "entropy", AttackConfig(epsilon=0.0, i_adv=3, alpha=None), np.random.default_rng(0))
        np.testing.assert_array_equal(out, x)

    def test_linear_surrogate_first_step_sign(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(3, 3 * 4 * 4))
        x = (0.3 + 0.4 * rng.random((2, 3, 4, 4))).astype(np.float32)
        y = np.array([0, 2])
        f = lambda t: ops.linear(ops.reshape(t, (len(t.data), -1)), Tensor(w))  # noqa: E731
        cfg = AttackConfig(epsilon=0.1, alpha=0.01, i_adv=1, p=0.0)
        out = dim(x, y, f, "ce", cfg, np.random.default_rng(0))
        # closed form: d CE / d x = W^T (softmax(Wx) - onehot(y))
        flat = x.reshape(2, -1).astype(np.float64)
        p = softmax(flat @ w.T)
        p[np.arange(2), y] -= 1
        g = (p @ w).reshape(x.shape)
        np.testing.assert_array_equal(np.sign(out - x), np.sign(g))

    def test_zero_gradient_is_guarded(self):
        f = lambda t: ops.mul(ops.linear(ops.reshape(t, (len(t.data), -1)), Tensor(np.ones((2, 48)))), 0.0)  # noqa: E731
        cfg = AttackConfig(epsilon=EPS, alpha=1 / 255, i_adv=5, p=0.0)
        x = _x(2, size=4)
        out = dim(x, None, f, "entropy", cfg, np.random.default_rng(0))
        assert np.isfinite(out).all()
        np.testing.assert_array_equal(out, x)

    def test_ce_needs_labels(self):
        with pytest.raises(ConfigError):
            dim(_x(), None, build_model(ArchSpec()), "ce", AttackConfig(alpha=1 / 255, i_adv=1), np.random.default_rng(0))

    def test_literal_step_stays_within_alpha(self):
        m = build_model(ArchSpec(widths=(4, 8)))
        x = _x()
        cfg = AttackConfig(alpha=2 / 255, i_adv=6, literal_step=True)
        out = dim(x, None, m, "entropy", cfg, np.random.default_rng(0))
        assert np.abs(out - x).max() <= 2 / 255 + 1e-6

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_projection_contract(self, seed):
        m = build_model(ArchSpec(widths=(4, 8), seed=seed % 7))
        x = _x(3, seed=seed)
        x[0, 0, 0, 0], x[1, 1, 2, 2] = 0.0, 1.0
        out = dim(x, None, m, "entropy", AttackConfig(alpha=8 / 255, i_adv=6), np.random.default_rng(seed))
        assert np.abs(out - x).max() <= EPS + 1e-6
        assert out.min() >= 0 and out.max() <= 1


class TestPoigen:
    def test_dua_eps_zero_identity(self):
        x = _x()
        out = poigen("dua", x, build_model(ArchSpec()), AttackConfig.for_method("dua", epsilon=0.0))
        np.testing.assert_array_equal(out, x)

    def test_dua_noise_statistics(self):
        x = np.full((200, 3, 8, 8), 0.5, np.float32)
        out = poigen("dua", x, build_model(ArchSpec()), AttackConfig.for_method("dua", epsilon=0.05, seed=4))
        d = (out - x) / 0.05
        assert abs(d.mean()) < 0.02
        assert abs(d.var() - 0.8) < 0.03

    def test_ttt_needs_y_surrogate(self):
        with pytest.raises(ConfigError):
            poigen("ttt", _x(), build_model(ArchSpec()))

    def test_ttt_budget_and_frame(self):
        s = build_model(ArchSpec(widths=(4, 8), split_point=1, seed=1))
        x = _x(3)
        cfg = AttackConfig.for_method("ttt", i_iter=1, i_adv=4)
        out = poigen("ttt", x, s, cfg)
        assert out.shape == x.shape
        assert np.abs(out - x).max() <= EPS + 1e-6
        assert out.min() >= 0 and out.max() <= 1
        assert rotation_loss(s, out).mean() > rotation_loss(s, x).mean()

    def test_tent_raises_entropy_and_rpl_reuses_it(self):
        s = build_model(ArchSpec(widths=(4, 8), seed=2))
        x = _x(8)
        cfg = AttackConfig.for_method("tent", i_adv=10, seed=1)
        out = poigen("tent", x, s, cfg)
        assert np.abs(out - x).max() <= EPS + 1e-6
        assert (prediction_entropy(s, out) > prediction_entropy(s, x)).mean() >= 0.9
        np.testing.assert_array_equal(poigen("rpl", x, s, cfg), out)

    def test_same_seed_byte_identical(self):
        s = build_model(ArchSpec(widths=(4, 8), seed=2))
        cfg = AttackConfig.for_method("tent", i_adv=3, seed=5)
        assert poigen("tent", _x(), s, cfg).tobytes() == poigen("tent", _x(), s, cfg).tobytes()

    def test_surrogate_parameters_untouched(self):
        s = build_model(ArchSpec(widths=(4, 8), split_point=1))
        before = [p.data.copy() for p in s.parameters()]
        poigen("ttt", _x(2), s, AttackConfig.for_method("ttt", i_iter=1, i_adv=2))
        for p, b in zip(s.parameters(), before):
            np.testing.assert_array_equal(p.data, b)
            assert p.requires_grad

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 1000))
    def test_entropy_never_exceeds_log_c(self, seed):
        s = build_model(ArchSpec(widths=(4, 8), num_classes=5, seed=seed % 5))
        out = poigen("tent", _x(2, seed=seed), s, AttackConfig.for_method("tent", i_adv=3, seed=seed))
        assert prediction_entropy(s, out).max() <= np.log(5) + 1e-6


class TestNeverQueriesTarget:
    def test_signature_admits_only_a_surrogate(self):
        params = inspect.signature(poigen).parameters
        assert list(params) == ["method", "x", "surrogate", "cfg"]
        assert not any("target" in name for name in params)
        # the attack module imports nothing that holds or builds a target
        imported = set()
        for node in ast.walk(ast.parse(inspect.getsource(attack))):
            if isinstance(node, ast.ImportFrom):
                imported.add(node.module)
        assert not imported & {"harness", "lab", "tta", "cli", "defenses"}

    def test_only_surrogate_forwarded(self, monkeypatch):
        surrogate = build_model(ArchSpec(widths=(4, 8), split_point=1, seed=1))
        bystander = build_model(ArchSpec(widths=(4, 8), split_point=1, seed=2))
        seen = []
        for cls in (PlainModel, YModel):
            for name in ("__call__", "extract"):
                if hasattr(cls, name):
                    orig = getattr(cls, name)
                    monkeypatch.setattr(cls, name, lambda self, *a, _o=orig, **k: seen.append(id(self)) or _o(self, *a, **k))
        poigen("ttt", _x(2), surrogate, AttackConfig.for_method("ttt", i_iter=1, i_adv=2))
        assert seen and set(seen) == {id(surrogate)}
        assert id(bystander) not in seen
