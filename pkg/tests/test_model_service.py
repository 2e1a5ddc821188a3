import pytest
import numpy as np

from services.model_service import ModelService, cell_layout, is_bmru_param, model_service
from services.numerics import Rng, numerics
from schemas.errors import ShapeMismatchError
from schemas.models import BlockConfig, NetworkConfig


def network(kind="lru", H=3, N=2, blocks=1, bidirectional=False, positional_dim=0, head_layers=2,
            input_dim=2, output_dim=2, pooling="last_timestep"):
    block = BlockConfig(cell_kind=kind, model_dim=H, state_dim=N, bidirectional=bidirectional,
                        positional_dim=positional_dim)
    return NetworkConfig(blocks=[block] * blocks, head_layers=head_layers, pooling=pooling,
                         input_dim=input_dim, output_dim=output_dim)


class TestComponents:
    def setup_method(self):
        self.model = ModelService()

    def test_positional_first_row(self):
        pe = self.model.positional_encoding(4, 8, np.float64)
        assert np.array_equal(pe[0], [0.0, 1.0] * 4)

    def test_positional_rows_distinct(self):
        pe = self.model.positional_encoding(2000, 16, np.float64)
        assert len(np.unique(pe, axis=0)) == 2000

    def test_positional_odd_dim(self):
        with pytest.raises(ValueError):
            self.model.positional_encoding(4, 3)

    def test_batch_norm_constant_input(self):
        x = np.full((2, 5, 3), 4.0)
        beta = np.array([0.1, -0.2, 0.3])
        y, _, _ = self.model.batch_norm_forward(x, np.ones(3), beta, np.zeros(3), np.ones(3), "train")
        assert np.allclose(y, np.broadcast_to(beta, y.shape))

    def test_batch_norm_train_statistics(self):
        x = Rng(0, "data").normal(3.0, 2.0, (4, 25, 3))
        y, (rm, rv), _ = self.model.batch_norm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), "train")
        flat = y.reshape(-1, 3)
        assert np.all(np.abs(flat.mean(axis=0)) < 1e-4)
        assert np.all(np.abs(flat.var(axis=0) - 1.0) < 1e-4)
        assert np.allclose(rm, 0.1 * x.reshape(-1, 3).mean(axis=0))

    def test_batch_norm_eval_is_pure(self):
        x = Rng(1, "data").normal(0, 1, (2, 4, 3))
        rm, rv = np.array([0.5, 0.0, -1.0]), np.array([2.0, 1.0, 0.5])
        y1, stats, _ = self.model.batch_norm_forward(x, np.ones(3), np.zeros(3), rm, rv, "eval")
        y2, _, _ = self.model.batch_norm_forward(x, np.ones(3), np.zeros(3), rm, rv, "eval")
        assert np.array_equal(y1, y2)
        assert stats[0] is rm and stats[1] is rv

    def test_batch_norm_needs_two_values(self):
        with pytest.raises(ShapeMismatchError):
            self.model.batch_norm_forward(np.ones((1, 1, 3)), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), "train")

    def test_batch_norm_gradient(self):
        x = Rng(2, "data").normal(0, 1, (3, 4, 2))
        gamma, beta = np.array([1.5, -0.7]), np.array([0.2, 0.1])
        w = Rng(3, "data").normal(0, 1, x.shape)

        def f(v):
            y, _, _ = self.model.batch_norm_forward(v, gamma, beta, np.zeros(2), np.ones(2), "train")
            return float(np.sum(w * y))

        _, _, cache = self.model.batch_norm_forward(x, gamma, beta, np.zeros(2), np.ones(2), "train")
        dx, _, _ = self.model.batch_norm_backward(w, cache)
        assert numerics.relative_error(dx, numerics.finite_difference_grad(f, x, 1e-6)) <= 1e-5

    def test_glu_gate_closed(self):
        W = np.zeros((4, 2))
        b = np.array([1.0, 1.0, -50.0, -50.0])
        y, _ = self.model.glu_forward(np.ones((1, 2)), W, b)
        assert np.all(np.abs(y) < 1e-20)

    def test_glu_half_open(self):
        W = np.vstack([np.eye(2), np.zeros((2, 2))])
        x = np.array([[0.4, -1.2]])
        y, _ = self.model.glu_forward(x, W, np.zeros(4))
        assert np.allclose(y, x / 2)

    def test_glu_gradient(self):
        rng = Rng(4, "data")
        x, W, b = rng.normal(0, 1, (3, 4)), rng.normal(0, 1, (8, 4)), rng.normal(0, 1, 8)
        w = rng.normal(0, 1, (3, 4))
        _, cache = self.model.glu_forward(x, W, b)
        dx, dW, db = self.model.glu_backward(w, W, cache)
        fx = numerics.finite_difference_grad(lambda v: float(np.sum(w * self.model.glu_forward(v, W, b)[0])), x, 1e-6)
        fW = numerics.finite_difference_grad(lambda v: float(np.sum(w * self.model.glu_forward(x, v, b)[0])), W, 1e-6)
        assert numerics.relative_error(dx, fx) <= 1e-5
        assert numerics.relative_error(dW, fW) <= 1e-5

    def test_gelu_gradient(self):
        x = np.linspace(-3, 3, 13)
        fd = numerics.finite_difference_grad(lambda v: float(np.sum(self.model.gelu(v))), x, 1e-6)
        assert numerics.relative_error(self.model.gelu_grad(x), fd) <= 1e-6


class TestLayout:
    def test_hybrid_halves_dimensions(self):
        cfg = BlockConfig(cell_kind="hybrid", model_dim=128, state_dim=128)
        assert cell_layout(cfg) == [("bmru", 64, 64), ("lru", 64, 64)]

    def test_is_bmru_param(self):
        assert is_bmru_param("blocks.0.bmru.fwd.W_x")
        assert is_bmru_param("blocks.3.bmru.bwd.alpha")
        assert not is_bmru_param("blocks.0.bmru.fwd.W_o")
        assert not is_bmru_param("blocks.0.bmru.merge.W")
        assert not is_bmru_param("blocks.0.lru.fwd.B_re")
        assert not is_bmru_param("head.0.W")

    def test_hybrid_parameter_parity(self):
        model = ModelService()
        counts = {}
        for kind in ("bmru", "lru", "hybrid"):
            params, _ = model.init_network(network(kind, H=128, N=128, blocks=2, input_dim=1, output_dim=10),
                                           0, np.float32)
            counts[kind] = model.count_parameters(params)
        assert abs(counts["hybrid"] / counts["bmru"] - 1.0) <= 0.05
        assert counts["hybrid"] <= counts["lru"]


class TestBlocks:
    def setup_method(self):
        self.model = ModelService()

    def _init(self, cfg, seed=0):
        return self.model.init_network(cfg, seed, np.float64)

    def test_block_shape_contract(self):
        cfg = network("hybrid", H=4, N=4, bidirectional=True, positional_dim=2)
        params, state = self._init(cfg)
        for B, T in [(1, 2), (3, 5)]:
            x = Rng(0, "data").normal(0, 1, (B, T, 4))
            out, _, _ = self.model.block_forward(cfg.blocks[0], 0, params, state, x, "train")
            assert out.shape == (B, T, 4)

    def test_hybrid_positional_columns_reach_bmru_only(self):
        cfg = network("hybrid", H=4, N=4, bidirectional=True, positional_dim=2)
        params, state = self._init(cfg)
        assert params["blocks.0.bmru.fwd.W_x"].shape[-1] == 6
        assert params["blocks.0.lru.fwd.B_re"].shape == (2, 4)
        assert params["blocks.0.lru.bwd.B_re"].shape == (2, 4)
        x = Rng(7, "data").normal(0, 1, (2, 5, 4))
        _, _, cache = self.model.block_forward(cfg.blocks[0], 0, params, state, x, "train")
        bmru_cell, lru_cell = cache.cells
        assert bmru_cell["fwd"]["x"].shape == (2, 5, 6)
        assert lru_cell["fwd"]["x"].shape == (2, 5, 4)
        assert np.array_equal(lru_cell["fwd"]["x"], cache.x_norm[..., :4])
        grads = {}
        dx = self.model.block_backward(cfg.blocks[0], 0, params, cache, np.ones_like(x), grads)
        assert dx.shape == x.shape
        assert all(np.all(np.isfinite(g)) for g in grads.values())

    def test_zero_glu_is_identity(self):
        cfg = network("bmru", H=4, N=3)
        params, state = self._init(cfg)
        params["blocks.0.glu.W"][:] = 0.0
        params["blocks.0.glu.b"][:] = 0.0
        x = Rng(1, "data").normal(0, 1, (2, 6, 4))
        out, _, cache = self.model.block_forward(cfg.blocks[0], 0, params, state, x, "train")
        assert np.array_equal(out, x)
        grads = {}
        dout = Rng(2, "data").normal(0, 1, x.shape)
        dx = self.model.block_backward(cfg.blocks[0], 0, params, cache, dout, grads)
        assert np.array_equal(dx, dout)

    def test_bidirectional_mirrors_on_symmetric_input(self):
        cfg = network("lru", H=3, N=2, bidirectional=True)
        params, state = self._init(cfg)
        for name in [k for k in params if ".lru.fwd." in k]:
            params[name.replace(".fwd.", ".bwd.")] = params[name].copy()
        half = Rng(3, "data").normal(0, 1, (2, 4, 3))
        x = np.concatenate([half, half[:, ::-1]], axis=1)
        _, _, cache = self.model.block_forward(cfg.blocks[0], 0, params, state, x, "train")
        cell = cache.cells[0]
        assert np.allclose(cell["fwd"]["h"], cell["bwd"]["h"], atol=1e-12)

    @pytest.mark.parametrize("k", [1, 5, 50])
    def test_bmru_block_stationary_suffix(self, k):
        cfg = network("bmru", H=4, N=6)
        params, state = self._init(cfg, seed=4)
        rng = Rng(4, "data")
        prefix, const = rng.normal(0, 1, (2, 8, 4)), rng.normal(0, 1, (2, 1, 4))
        once = np.concatenate([prefix, const], axis=1)
        many = np.concatenate([prefix, np.repeat(const, k, axis=1)], axis=1)
        _, _, c1 = self.model.block_forward(cfg.blocks[0], 0, params, state, once, "eval")
        _, _, ck = self.model.block_forward(cfg.blocks[0], 0, params, state, many, "eval")
        assert np.array_equal(c1.cells[0]["fwd"]["h"][:, -1], ck.cells[0]["fwd"]["h"][:, -1])

    def test_wrong_width(self):
        cfg = network("lru", H=3)
        params, state = self._init(cfg)
        with pytest.raises(ShapeMismatchError):
            self.model.block_forward(cfg.blocks[0], 0, params, state, np.zeros((1, 2, 4)), "eval")


class TestNetwork:
    def setup_method(self):
        self.model = ModelService()

    def test_output_shape(self):
        cfg = network("bmru", H=4, N=4, input_dim=2, output_dim=3)
        params, state = self.model.init_network(cfg, 0)
        pred, new_state, _ = self.model.network_forward(cfg, params, state, np.zeros((5, 3, 2)), "train")
        assert pred.shape == (5, 3)
        assert set(new_state) == set(state)

    def test_eval_does_not_touch_state(self):
        cfg = network("lru", H=3, N=2)
        params, state = self.model.init_network(cfg, 0)
        before = {k: v.copy() for k, v in state.items()}
        _, new_state, _ = self.model.network_forward(cfg, params, state, np.ones((2, 4, 2)), "eval")
        for k in state:
            assert np.array_equal(state[k], before[k])
            assert np.array_equal(new_state[k], before[k])

    def test_hybrid_network_constructible(self):
        cfg = network("hybrid", H=8, N=8, blocks=2, input_dim=1, output_dim=10)
        params, state = self.model.init_network(cfg, 1)
        assert any(k.startswith("blocks.1.bmru.fwd.") for k in params)
        assert any(k.startswith("blocks.1.lru.fwd.") for k in params)
        pred, _, _ = self.model.network_forward(cfg, params, state, np.zeros((2, 5, 1)), "eval")
        assert pred.shape == (2, 10)

    def test_init_deterministic(self):
        cfg = network("bmru", H=4, N=4)
        a, _ = self.model.init_network(cfg, 9)
        b, _ = self.model.init_network(cfg, 9)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    @pytest.mark.parametrize("pooling", ["last_timestep", "mean"])
    def test_lru_network_gradient(self, pooling):
        cfg = network("lru", H=3, N=2, bidirectional=True, positional_dim=2, input_dim=2, output_dim=2,
                      pooling=pooling)
        params, state = self.model.init_network(cfg, 2, np.float64)
        rng = Rng(5, "data")
        for name in params:
            if name.endswith(".D") or name.endswith(".b") or name.endswith(".beta"):
                params[name] = rng.normal(0, 0.5, params[name].shape)
        x = rng.normal(0, 1, (3, 4, 2))
        w = rng.normal(0, 1, (3, 2))

        def loss(p):
            pred, _, _ = self.model.network_forward(cfg, p, state, x, "train")
            return float(np.sum(w * pred))

        _, _, cache = self.model.network_forward(cfg, params, state, x, "train")
        grads, dx = self.model.network_backward(cfg, params, cache, w)
        assert set(grads) == set(params)
        for name, value in params.items():
            def f(v, name=name):
                p = dict(params)
                p[name] = v
                return loss(p)

            fd = numerics.finite_difference_grad(f, value, 1e-6)
            assert numerics.relative_error(grads[name], fd) <= 1e-3, name
        fd_x = numerics.finite_difference_grad(
            lambda v: float(np.sum(w * self.model.network_forward(cfg, params, state, v, "train")[0])), x, 1e-6)
        assert numerics.relative_error(dx, fd_x) <= 1e-3

    def test_bmru_network_backward_covers_all_params(self):
        cfg = network("hybrid", H=4, N=4, bidirectional=True, input_dim=2, output_dim=1)
        params, state = self.model.init_network(cfg, 3, np.float64)
        x = Rng(6, "data").normal(0, 1, (2, 5, 2))
        pred, _, cache = self.model.network_forward(cfg, params, state, x, "train")
        grads, _ = self.model.network_backward(cfg, params, cache, np.ones_like(pred))
        assert set(grads) == set(params)
        assert all(grads[k].shape == params[k].shape for k in params)
        assert all(np.all(np.isfinite(g)) for g in grads.values())

    def test_global_instance(self):
        assert isinstance(model_service, ModelService)
