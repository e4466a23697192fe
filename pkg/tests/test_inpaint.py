import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gestalt.errors import DegenerateMask, EmptyBatch, NoSourcePatch, ShapeUnsupported
from gestalt.imagecore import Composite, compose_matrix
from gestalt.inpaint import (
    ConvVaeGan,
    LatentFeatures,
    LossWeights,
    OracleInpainter,
    PatchInpainter,
    RandomFeatureInpainter,
    discriminator_score,
    kl_to_unit_normal,
    patch_fill,
    vae_gan_losses,
)
from gestalt.problems import render_texture
from gestalt.tensornet import Adam


def small_model(**kw):
    kw = {"z_dim": 32, "image_size": 16, "enc_channels": (3, 4), "disc_channels": (3,), "seed": 5, **kw}
    return ConvVaeGan(**kw)


def quadrant_mask(size=64):
    m = np.ones((size, size), dtype=bool)
    m[size // 2 :, size // 2 :] = False
    return m


def random_composite(rng, size=32):
    cells = [np.round(rng.random((size, size)) * 255) / 255 for _ in range(3)]
    return compose_matrix(cells, (2, 2), (1, 1))


# -- latent features ----------------------------------------------------------

def test_latent_features_reject_empty_and_nonfinite():
    with pytest.raises(ValueError):
        LatentFeatures(np.array([]))
    with pytest.raises(ValueError):
        LatentFeatures(np.array([1.0, np.nan]))
    assert LatentFeatures(np.ones((2, 3))).values.shape == (6,)


# -- encoder ------------------------------------------------------------------

def test_encode_deterministic(rng):
    m = ConvVaeGan(seed=1)
    img = rng.random((64, 64))
    a = m.encode(img, quadrant_mask()).values
    b = m.encode(img, quadrant_mask()).values
    assert np.array_equal(a, b)


def test_mask_channel_is_live(rng):
    m = ConvVaeGan(seed=1)
    img = rng.random((64, 64))
    full = np.ones((64, 64), dtype=bool)
    one = full.copy()
    one[10, 10] = False
    assert not np.array_equal(m.encode(img, full).values, m.encode(img, one).values)


def test_zero_weight_encoder_returns_bias(rng):
    m = ConvVaeGan(seed=1)
    for layer in m.encoder.layers:
        for k in layer.params:
            layer.params[k][...] = 0
    head = m.encoder.layers[-1]
    head.params["b"][...] = np.arange(head.params["b"].size) * 0.01
    c, h, w = m.latent_shape
    for img in (rng.random((64, 64)), np.ones((64, 64))):
        z = m.encode(img, quadrant_mask()).values
        assert np.allclose(z, np.repeat(head.params["b"][:c], h * w))
    dense = ConvVaeGan(seed=1, latent="dense")
    for layer in dense.encoder.layers:
        for k in layer.params:
            layer.params[k][...] = 0
    dense.encoder.layers[-1].params["b"][...] = np.arange(2 * dense.z_dim) * 0.01
    z = dense.encode(rng.random((64, 64)), quadrant_mask()).values
    assert np.allclose(z, np.arange(dense.z_dim) * 0.01)


def test_sampling_mode_reproducible_with_seed(rng):
    m = ConvVaeGan(seed=1, mode="sampling")
    img = rng.random((64, 64))
    a = m.encode(img, quadrant_mask(), rng=np.random.default_rng(3)).values
    b = m.encode(img, quadrant_mask(), rng=np.random.default_rng(3)).values
    c = m.encode(img, quadrant_mask(), rng=np.random.default_rng(4)).values
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_encoder_accepts_cells_and_composites(rng):
    m = ConvVaeGan(seed=1)
    f = m.features([rng.random((32, 32)), rng.random((32, 32))])
    assert f.shape == (2, m.z_dim // 4)  # a half-size input covers a quarter of the latent grid
    assert m.features([rng.random((64, 64))]).shape == (1, m.z_dim)
    with pytest.raises(ShapeUnsupported):
        m.encode(rng.random((20, 20)), np.ones((20, 20), bool))


def test_decoder_output_shape_and_range(rng):
    m = ConvVaeGan(seed=2)
    out = m.decode(rng.standard_normal((3, *m.latent_shape)) * 5)
    assert out.shape == (3, 64, 64)
    assert out.min() >= 0 and out.max() <= 1


def test_vae_rejects_3x3_composite(rng):
    comp = compose_matrix([rng.random((32, 32)) for _ in range(8)], (3, 3), (2, 2))
    with pytest.raises(ShapeUnsupported):
        ConvVaeGan(seed=0).inpaint(comp)


@pytest.mark.parametrize("latent", ["dense", "spatial"])
def test_architecture_roundtrip(latent):
    m = small_model(latent=latent)
    m2 = ConvVaeGan.from_architecture(m.architecture())
    assert m2.architecture() == m.architecture()


def test_latent_layouts():
    assert small_model(latent="dense").latent_shape == (32,)
    assert small_model().latent_shape == (2, 4, 4)
    with pytest.raises(ValueError):
        small_model(z_dim=20)
    with pytest.raises(ValueError):
        small_model(latent="ring")


# -- loss terms ---------------------------------------------------------------

def test_kl_examples():
    assert kl_to_unit_normal(np.zeros((1, 5)), np.zeros((1, 5))) == 0.0
    assert kl_to_unit_normal(np.ones((1, 1)), np.zeros((1, 1))) == pytest.approx(0.5, abs=1e-12)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-8, 8)), min_size=1, max_size=8))
def test_kl_nonnegative(pairs):
    mu = np.array([[p[0] for p in pairs]])
    lv = np.array([[p[1] for p in pairs]])
    kl = kl_to_unit_normal(mu, lv)
    assert kl >= -1e-12
    if np.all(np.abs(mu) < 1e-9) and np.all(np.abs(lv) < 1e-9):
        assert kl < 1e-9


def test_recon_zero_when_decoder_reproduces_image():
    m = small_model()
    for layer in m.decoder.layers:
        for k in layer.params:
            layer.params[k][...] = 0
    m.decoder.layers[-1].params["b"][...] = 0.25
    imgs = np.full((2, 16, 16), 0.25)
    masks = np.ones((2, 16, 16), bool)
    masks[:, 8:, 8:] = False
    assert vae_gan_losses(m, imgs, masks, LossWeights(1, 0, 0)).recon == 0.0


def test_loss_total_combines_weights(rng):
    m = small_model()
    imgs = rng.random((3, 16, 16))
    masks = np.ones((3, 16, 16), bool)
    masks[:, :6, :6] = False
    w = LossWeights(2.0, 0.1, 0.3)
    loss = vae_gan_losses(m, imgs, masks, w)
    assert loss.kl >= 0
    assert loss.total == pytest.approx(2.0 * loss.recon + 0.1 * loss.kl + 0.3 * loss.adv_g)


def test_empty_batch():
    with pytest.raises(EmptyBatch):
        vae_gan_losses(small_model(), np.zeros((0, 16, 16)), np.zeros((0, 16, 16), bool))


@pytest.mark.parametrize("latent", ["dense", "spatial"])
@pytest.mark.parametrize("seed", range(3))
def test_objective_gradients_match_finite_differences(seed, latent):
    """Hand-derived objective gradients against central differences.

    Biases are jittered so that no pre-activation sits on a piecewise-linear
    kink, where finite differences are meaningless.
    """
    m = small_model(seed=seed, latent=latent, dtype=np.float64)
    r = np.random.default_rng(seed)
    for net in m.networks:
        for layer in net.layers:
            if "b" in layer.params:
                layer.params["b"][...] = r.normal(0, 0.1, layer.params["b"].shape)
    imgs = r.random((2, 16, 16))
    masks = np.ones((2, 16, 16), bool)
    masks[:, 4:12, 8:] = False
    w = LossWeights(1.0, 0.05, 0.2)

    def objective():
        loss, _, _ = m.losses_and_grads(imgs, masks, w, rng=np.random.default_rng(99), need_grads=False)
        return w.rec * loss.recon + w.beta * loss.kl + w.adv * loss.adv_g

    _, grads, _ = m.losses_and_grads(imgs, masks, w, rng=np.random.default_rng(99), train_discriminator=False)
    params = m.generator_parameters
    worst = 0.0
    for p, g in zip(params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in r.choice(flat.size, size=min(6, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-6
            up = objective()
            flat[i] = old - 1e-6
            down = objective()
            flat[i] = old
            num = (up - down) / 2e-6
            worst = max(worst, abs(num - gflat[i]) / max(abs(num) + abs(gflat[i]), 1e-6))
    assert worst < 1e-3


# -- discriminator ------------------------------------------------------------

def test_zero_weight_discriminator_scores_half(rng):
    m = ConvVaeGan(seed=0)
    for layer in m.discriminator.layers:
        for k in layer.params:
            layer.params[k][...] = 0
    assert discriminator_score(m, rng.random((64, 64))) == 0.5
    assert discriminator_score(m, np.ones((64, 64))) == 0.5


def test_discriminator_deterministic(rng):
    m = ConvVaeGan(seed=0)
    img = rng.random((64, 64))
    assert discriminator_score(m, img) == discriminator_score(m, img)


def test_discriminator_learns_real_from_noise():
    m = small_model(seed=3)
    r = np.random.default_rng(0)
    opt = Adam(m.discriminator.parameters, lr=1e-3)

    def real(n):
        return np.stack([render_texture("stripes_h", 16, 4, (int(r.integers(4)), 0)) for _ in range(n)])

    for _ in range(200):
        x = np.concatenate([real(8), r.random((8, 16, 16))])[:, None]
        logits = m.discriminator.forward(x)[:, 0].astype(np.float64)
        target = np.r_[np.ones(8), np.zeros(8)]
        m.discriminator.backward(((1 / (1 + np.exp(-logits)) - target) / 16)[:, None])
        opt.step(m.discriminator.gradients)
    s_real = np.mean([discriminator_score(m, im) for im in real(20)])
    s_noise = np.mean([discriminator_score(m, r.random((16, 16))) for _ in range(20)])
    assert s_real > s_noise


# -- inpaint contract ---------------------------------------------------------

def _backends(rng):
    oracle = OracleInpainter()
    return [ConvVaeGan(seed=0), PatchInpainter(), oracle, RandomFeatureInpainter(seed=1)]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_known_pixels_preserved_for_every_backend(seed):
    rng = np.random.default_rng(seed)
    comp = random_composite(rng)
    for backend in _backends(rng):
        full, pred = backend.inpaint(comp)
        assert np.array_equal(full[comp.mask], comp.image[comp.mask])
        assert pred.shape == (32, 32)


def test_inpaint_rejects_all_unknown_mask(rng):
    comp = Composite(rng.random((64, 64)), np.zeros((64, 64), bool), (2, 2), (32, 32), (1, 1))
    with pytest.raises(DegenerateMask):
        PatchInpainter().inpaint(comp)


def test_oracle_prediction_is_ground_truth(rng):
    cells = [rng.random((32, 32)) for _ in range(3)]
    truth = rng.random((32, 32))
    comp = compose_matrix(cells, (2, 2), (1, 1))
    oracle = OracleInpainter()
    oracle.add(comp, truth)
    _, pred = oracle.inpaint(comp)
    assert np.array_equal(pred, truth)


# -- patch propagation --------------------------------------------------------

def test_patch_all_known_unchanged(rng):
    img = rng.random((24, 24))
    assert np.array_equal(patch_fill(PatchInpainter(), img, np.ones((24, 24), bool)), img)


@settings(max_examples=15, deadline=None)
@given(st.floats(0, 1), st.integers(0, 12), st.integers(0, 12), st.integers(3, 10), st.integers(3, 10))
def test_patch_constant_image_stays_constant(v, top, left, h, w):
    img = np.full((32, 32), v)
    mask = np.ones((32, 32), bool)
    mask[top : top + h, left : left + w] = False
    out = patch_fill(PatchInpainter(), np.where(mask, img, 0.5), mask)
    assert np.array_equal(out, img)


@pytest.mark.parametrize("kind", ["stripes_h", "stripes_v", "stripes_d", "checker", "dots", "grid"])
@pytest.mark.parametrize("period", [4, 8])
def test_patch_exact_on_periodic_texture(kind, period):
    img = render_texture(kind, 64, period, (1, 2))
    comp = compose_matrix([img[:32, :32], img[:32, 32:], img[32:, :32]], (2, 2), (1, 1))
    _, pred = PatchInpainter(patch=8).inpaint(comp)
    assert np.array_equal(pred, img[32:, 32:])


def test_patch_needs_a_source():
    mask = np.zeros((16, 16), bool)
    mask[0, :] = True
    with pytest.raises(NoSourcePatch):
        patch_fill(PatchInpainter(patch=4), np.ones((16, 16)), mask)


def test_patch_parameters_validated():
    with pytest.raises(ValueError):
        PatchInpainter(patch=1)
    with pytest.raises(ValueError):
        PatchInpainter(stride=0)


def test_random_backend_gives_fresh_features(rng):
    b = RandomFeatureInpainter(seed=0)
    img = rng.random((32, 32))
    assert not np.array_equal(b.features([img]), b.features([img]))
