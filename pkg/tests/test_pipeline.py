import math

import numpy as np
import pytest

import nerp
from nerp.images import ImageGrid
from nerp.mlp import init_params, make_fourier_encoding, mlp_forward
from nerp.operators import SamplingSpec, radon_forward
from nerp.pipeline import (
    CoordinateNetwork,
    ReconConfig,
    embed_prior,
    forward_model_for,
    infer_image,
    load_checkpoint,
    make_coordinate_grid,
    reconstruct,
    save_checkpoint,
    train_reconstruction,
)


def tiny_cfg(**kw):
    base = dict(fourier_m=16, fourier_sigma=2.0, depth=2, width=16, prior_iters=50,
                recon_iters=20, prior_lr=1e-3, recon_lr=1e-4, seed=0)
    base.update(kw)
    return ReconConfig(**base)


def assert_params_equal(a, b):
    assert a.depth == b.depth and a.activation == b.activation
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        np.testing.assert_array_equal(wa, wb)
        np.testing.assert_array_equal(ba, bb)


# --- coordinate grid -----------------------------------------------------------


def test_grid_1d_pixel_centers():
    np.testing.assert_allclose(make_coordinate_grid((2,)), [[0.25], [0.75]])


def test_grid_256_is_65536_interior_points():
    grid = make_coordinate_grid((256, 256))
    assert grid.shape == (65536, 2)
    assert grid.min() > 0.0 and grid.max() < 1.0


def test_grid_first_point_and_row_major_order():
    grid = make_coordinate_grid((4, 4))
    np.testing.assert_allclose(grid[0], [0.125, 0.125])
    np.testing.assert_allclose(grid[1], [0.125, 0.375])  # column varies fastest


def test_grid_rejects_empty_axes():
    with pytest.raises(ValueError):
        make_coordinate_grid((0, 4))


# --- prior embedding -----------------------------------------------------------


def test_embed_prior_zero_iterations_returns_initialization():
    cfg = tiny_cfg(prior_iters=0)
    prior = nerp.shepp_logan(16)
    net, fit = embed_prior(prior, cfg)
    expected = init_params(cfg.depth, cfg.width, 2 * cfg.fourier_m, cfg.activation,
                           seed=cfg.seed, omega0=cfg.omega0, dtype=cfg.np_dtype)
    assert_params_equal(net.params, expected)
    assert math.isfinite(fit)


def test_embed_prior_constant_image_quality():
    cfg = ReconConfig(fourier_m=64, fourier_sigma=4.0, depth=4, width=64,
                      prior_iters=200, prior_lr=1e-3, seed=0)
    net, fit = embed_prior(ImageGrid(np.full((32, 32), 0.5)), cfg)
    assert fit >= 60.0


def test_embed_prior_rejects_unnormalized_images():
    with pytest.raises(ValueError):
        embed_prior(ImageGrid(np.full((8, 8), 1.5)), tiny_cfg())


def test_embed_prior_fit_matches_inference():
    cfg = tiny_cfg(prior_iters=100)
    prior = nerp.shepp_logan(16)
    net, fit = embed_prior(prior, cfg)
    img = infer_image(net, (16, 16))
    recomputed = nerp.psnr(np.clip(img.values, 0, 1), prior.values)
    assert recomputed == pytest.approx(fit, abs=1e-9)


# --- measurement-constrained training ---------------------------------------------


def test_train_zero_iterations_is_identity():
    cfg = tiny_cfg(recon_iters=0)
    prior = nerp.shepp_logan(16)
    sino = radon_forward(prior, SamplingSpec("ct", 3))
    net, _ = embed_prior(prior, cfg)
    model = forward_model_for(sino, (16, 16))
    trained, losses = train_reconstruction(net, sino, model, cfg)
    assert_params_equal(trained.params, net.params)
    assert len(losses) == 1


def test_prior_fixed_point_initial_loss():
    # measurements generated from the prior itself: the starting loss equals
    # the prior-fit residual pushed through the operator
    cfg = tiny_cfg(fourier_m=32, width=32, depth=3, prior_iters=300)
    prior = nerp.shepp_logan(16)
    sino = radon_forward(prior, SamplingSpec("ct", 5))
    net, fit = embed_prior(prior, cfg)
    model = forward_model_for(sino, (16, 16))

    embedded = infer_image(net, (16, 16)).values
    bound = float(np.sum(model.forward(embedded - prior.values) ** 2))
    _, losses = train_reconstruction(net, sino, model, cfg)
    assert losses[0] <= bound + 1e-6


def test_prior_fixed_point_keeps_quality():
    cfg = tiny_cfg(fourier_m=32, width=32, depth=3, prior_iters=60, recon_iters=50,
                   recon_lr=1e-5)
    prior = nerp.shepp_logan(16)
    sino = radon_forward(prior, SamplingSpec("ct", 5))
    net, fit = embed_prior(prior, cfg)
    model = forward_model_for(sino, (16, 16))
    trained, _ = train_reconstruction(net, sino, model, cfg)
    img = infer_image(trained, (16, 16))
    final = nerp.psnr(np.clip(img.values, 0, 1), prior.values)
    assert final >= fit - 1.0


def test_train_rejects_mismatched_measurements():
    cfg = tiny_cfg()
    prior = nerp.shepp_logan(16)
    sino = radon_forward(prior, SamplingSpec("ct", 3))
    other = radon_forward(prior, SamplingSpec("ct", 4))
    net, _ = embed_prior(prior, cfg)
    model = forward_model_for(sino, (16, 16))
    with pytest.raises(ValueError):
        train_reconstruction(net, other, model, cfg)


def test_training_loss_recomputable_from_inference():
    cfg = tiny_cfg(recon_iters=15)
    prior = nerp.shepp_logan(16)
    target = nerp.perturb_lesion(
        prior, nerp.LesionSpec((0.5, 0.5), (0.2, 0.15), 0.0, 0.2)
    )
    sino = radon_forward(target, SamplingSpec("ct", 4))
    net, _ = embed_prior(prior, cfg)
    model = forward_model_for(sino, (16, 16))
    trained, losses = train_reconstruction(net, sino, model, cfg)
    img = infer_image(trained, (16, 16))
    loss = float(np.sum((model.forward(img.values) - sino.values) ** 2))
    assert loss == pytest.approx(losses[-1], rel=1e-6)


def test_end_to_end_gradient_matches_finite_differences():
    # analytic dL/dtheta through the projector vs central differences
    from nerp.mlp import fourier_features, mlp_backward

    cfg = ReconConfig(fourier_m=16, fourier_sigma=2.0, depth=2, width=8,
                      recon_iters=0, seed=1, dtype="float64")
    rng = np.random.default_rng(0)
    target = rng.random((8, 8))
    sino = radon_forward(target, SamplingSpec("ct", 3))
    model = forward_model_for(sino, (8, 8))

    enc = make_fourier_encoding(cfg.fourier_m, 2, cfg.fourier_sigma, cfg.seed)
    params = init_params(cfg.depth, cfg.width, enc.num_features, "sine",
                         seed=cfg.seed, dtype=np.float64)
    feats = fourier_features(make_coordinate_grid((8, 8)), enc)

    def loss_of(p):
        out, _ = mlp_forward(p, feats)
        resid = model.forward(out.reshape(8, 8)) - sino.values
        return float(np.sum(resid**2))

    out, tape = mlp_forward(params, feats)
    resid = model.forward(out.reshape(8, 8)) - sino.values
    grads = mlp_backward(params, tape, (2.0 * model.adjoint(resid)).ravel())

    gmax = max(np.abs(g).max() for pair in grads for g in pair)
    eps = 1e-5
    worst = 0.0
    for li in range(params.depth):
        for slot in (0, 1):
            arr = params.layers[li][slot]
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                plus = params.copy()
                plus.layers[li][slot][idx] += eps
                minus = params.copy()
                minus.layers[li][slot][idx] -= eps
                fd = (loss_of(plus) - loss_of(minus)) / (2 * eps)
                an = grads[li][slot][idx]
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-3 * gmax))
    assert worst < 1e-3


# --- inference ----------------------------------------------------------------


def test_infer_constant_network():
    params = init_params(2, 8, 32, "sine", seed=0)
    for w, b in params.layers:
        w[:] = 0.0
    params.layers[-1][1][:] = 0.75
    net = CoordinateNetwork(make_fourier_encoding(16, 2, 1.0, 0), params)
    img = infer_image(net, (6, 6))
    np.testing.assert_allclose(img.values, np.full((6, 6), 0.75), atol=1e-7)


def test_infer_supports_finer_grids():
    cfg = tiny_cfg(prior_iters=100)
    prior = nerp.shepp_logan(16)
    net, _ = embed_prior(prior, cfg)
    up = infer_image(net, (32, 32))
    assert up.shape == (32, 32)
    assert np.all(np.isfinite(up.values))
    # coarse evaluation is consistent with box-averaged fine evaluation
    down = up.values.reshape(16, 2, 16, 2).mean(axis=(1, 3))
    base = infer_image(net, (16, 16)).values
    assert np.abs(down - base).mean() < 0.05


# --- full reconstruction modes ---------------------------------------------------


@pytest.fixture(scope="module")
def small_problem():
    prior = nerp.shepp_logan(16)
    target = nerp.perturb_lesion(
        prior, nerp.LesionSpec((0.45, 0.55), (0.15, 0.1), 0.3, 0.25)
    )
    sino = radon_forward(target, SamplingSpec("ct", 4))
    return prior, target, sino


def test_reconstruct_requires_prior_for_nerp(small_problem):
    _, _, sino = small_problem
    with pytest.raises(ValueError):
        reconstruct(None, sino, tiny_cfg(), mode="nerp", image_shape=(16, 16))


def test_reconstruct_rejects_unknown_mode(small_problem):
    prior, _, sino = small_problem
    with pytest.raises(ValueError):
        reconstruct(prior, sino, tiny_cfg(), mode="tv")


def test_no_prior_mode_equals_training_from_scratch(small_problem):
    prior, _, sino = small_problem
    cfg = tiny_cfg()
    img, _ = reconstruct(None, sino, cfg, mode="nerp_no_prior", image_shape=(16, 16))

    enc = make_fourier_encoding(cfg.fourier_m, 2, cfg.fourier_sigma, cfg.seed)
    params = init_params(cfg.depth, cfg.width, enc.num_features, cfg.activation,
                         seed=cfg.seed, omega0=cfg.omega0, dtype=cfg.np_dtype)
    model = forward_model_for(sino, (16, 16))
    net, _ = train_reconstruction(CoordinateNetwork(enc, params), sino, model, cfg)
    np.testing.assert_array_equal(img.values, infer_image(net, (16, 16)).values)


def test_grff_mode_uses_relu_network(small_problem):
    prior, _, sino = small_problem
    cfg = tiny_cfg()
    img, _ = reconstruct(prior, sino, cfg, mode="grff")

    enc = make_fourier_encoding(cfg.fourier_m, 2, cfg.fourier_sigma, cfg.seed)
    params = init_params(cfg.depth, cfg.width, enc.num_features, "relu",
                         seed=cfg.seed, omega0=cfg.omega0, dtype=cfg.np_dtype)
    model = forward_model_for(sino, (16, 16))
    net, _ = train_reconstruction(CoordinateNetwork(enc, params), sino, model, cfg)
    np.testing.assert_array_equal(img.values, infer_image(net, (16, 16)).values)


def test_reconstruct_is_deterministic(small_problem):
    prior, _, sino = small_problem
    cfg = tiny_cfg()
    a, losses_a = reconstruct(prior, sino, cfg, mode="nerp")
    b, losses_b = reconstruct(prior, sino, cfg, mode="nerp")
    np.testing.assert_array_equal(a.values, b.values)
    assert losses_a == losses_b


def test_loss_curve_trends_down(small_problem):
    prior, _, sino = small_problem
    _, losses = reconstruct(prior, sino, tiny_cfg(recon_iters=60), mode="nerp")
    assert len(losses) == 61
    assert losses[-1] < losses[0]


# --- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, small_problem):
    prior, _, _ = small_problem
    cfg = tiny_cfg(prior_iters=40)
    net, _ = embed_prior(prior, cfg)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path, seed=cfg.seed, config_hash="abc123")
    back = load_checkpoint(path)
    assert_params_equal(back.params, net.params)
    np.testing.assert_array_equal(back.encoding.matrix_b, net.encoding.matrix_b)
    np.testing.assert_array_equal(
        infer_image(back, (16, 16)).values, infer_image(net, (16, 16)).values
    )


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b'{"kind": "other"}\n')
    with pytest.raises(ValueError):
        load_checkpoint(path)
