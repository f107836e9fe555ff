import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from constrictae import tensor as T
from constrictae.losses import (
    LossConfig,
    Mode,
    constriction_inside,
    constriction_surface,
    reconstruction_loss,
    total_loss,
)
from constrictae.tensor import ShapeError, Tensor

from oracles import central_difference, loop_mean_squared


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def three_four():
    return t64(np.array([3.0, 4.0]).reshape(1, 2, 1, 1))


def loop_norms(F):
    tp, cp, hp, wp = F.shape
    out = np.zeros((hp, wp))
    for j in range(hp):
        for i in range(wp):
            acc = 0.0
            for a in range(tp):
                for c in range(cp):
                    acc += F[a, c, j, i] ** 2
            out[j, i] = acc**0.5
    return out


# -- hand-evaluated cases -----------------------------------------------------


def test_inside_three_four():
    assert constriction_inside(three_four(), 1.0).item() == pytest.approx(4.0, abs=1e-6)
    assert constriction_inside(three_four(), 6.0).item() == 0.0


def test_surface_three_four():
    assert constriction_surface(three_four(), 1.0).item() == pytest.approx(4.0, abs=1e-6)
    assert constriction_surface(three_four(), 5.0).item() == pytest.approx(0.0, abs=1e-12)


def test_zero_latent():
    F = t64(np.zeros((2, 3, 4, 4)))
    assert constriction_inside(F, 0.7).item() == 0.0
    assert constriction_surface(F, 2.0).item() == pytest.approx(2.0)


def test_locations_are_averaged():
    F = np.zeros((1, 2, 1, 2))
    F[0, :, 0, 0] = (3.0, 4.0)  # norm 5
    F[0, :, 0, 1] = (0.0, 1.0)  # norm 1
    assert constriction_inside(t64(F), 2.0).item() == pytest.approx((3.0 + 0.0) / 2)
    assert constriction_surface(t64(F), 2.0).item() == pytest.approx((3.0 + 1.0) / 2)


def test_batched_latent_is_mean_of_per_sample_losses():
    rng = np.random.default_rng(0)
    F = rng.standard_normal((3, 2, 4, 2, 2))
    batched = constriction_surface(t64(F), 1.5).item()
    singles = [constriction_surface(t64(f), 1.5).item() for f in F]
    assert batched == pytest.approx(np.mean(singles), rel=1e-12)


def test_alpha_must_be_positive():
    with pytest.raises(ValueError):
        constriction_inside(three_four(), 0.0)
    with pytest.raises(ValueError):
        constriction_surface(three_four(), -1.0)
    with pytest.raises(ValueError):
        LossConfig(alpha=0.0)
    with pytest.raises(ValueError):
        LossConfig(lam=-1.0)


def test_reconstruction_loss():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((2, 8, 1, 4, 4))
    assert reconstruction_loss(t64(X), t64(X)).item() == 0.0
    assert reconstruction_loss(t64(X + 2.0), t64(X)).item() == pytest.approx(4.0)
    Y = rng.standard_normal(X.shape)
    assert abs(reconstruction_loss(t64(Y), t64(X)).item() - loop_mean_squared(Y - X)) < 1e-12
    with pytest.raises(ShapeError):
        reconstruction_loss(t64(X), t64(X[:1]))


def test_total_loss():
    l_r = t64(1.0, grad=True)
    assert total_loss(l_r, None, 0.3) is l_r
    assert total_loss(l_r, t64(2.0), 0.0) is l_r
    assert total_loss(l_r, t64(0.0), 0.5).item() == 1.0
    assert total_loss(l_r, t64(2.0), 0.0001).item() == pytest.approx(1.0002, abs=1e-12)


def test_mode_parsing():
    assert Mode.parse("inside") is Mode.INSIDE
    assert Mode.parse("surface") is Mode.SURFACE
    assert Mode.parse("none") is Mode.NONE
    assert Mode.parse("on_surface") is Mode.SURFACE
    with pytest.raises(ValueError):
        Mode.parse("ball")


# -- properties ---------------------------------------------------------------


latents = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s))


@settings(max_examples=1000, deadline=None)
@given(latents, st.floats(0.05, 6.0))
def test_nonnegative_and_inside_dominated_by_surface(rng, alpha):
    F = t64(rng.standard_normal((2, 3, 2, 2)) * rng.uniform(0.1, 3))
    inside = constriction_inside(F, alpha).item()
    surface = constriction_surface(F, alpha).item()
    assert inside >= 0 and surface >= 0
    assert inside <= surface + 1e-12


@settings(max_examples=200, deadline=None)
@given(latents, st.floats(0.1, 5.0))
def test_zero_sets(rng, alpha):
    F = rng.standard_normal((2, 3, 3, 3))
    norms = loop_norms(F)
    # rescale every location onto the sphere: surface loss vanishes
    on = F * (alpha / norms)[None, None]
    assert constriction_surface(t64(on), alpha).item() < 1e-7
    assert constriction_inside(t64(on), alpha).item() < 1e-7
    # strictly inside: inside loss vanishes, surface does not
    within = on * rng.uniform(0.1, 0.9, size=(3, 3))[None, None]
    assert constriction_inside(t64(within), alpha).item() == 0.0
    assert constriction_surface(t64(within), alpha).item() > 1e-7
    # push one location out: both are positive
    out = within.copy()
    out[:, :, 0, 0] *= 3 * alpha / loop_norms(within)[0, 0]
    assert constriction_inside(t64(out), alpha).item() > 1e-7


@settings(max_examples=200, deadline=None)
@given(latents)
def test_inside_gradient_vanishes_within_ball(rng):
    alpha = 2.0
    F = rng.standard_normal((2, 4, 3, 3))
    F *= (rng.uniform(0.0, alpha - 1e-3, size=(3, 3)) / loop_norms(F))[None, None]
    x = t64(F, grad=True)
    T.backward(constriction_inside(x, alpha))
    assert np.all(x.grad == 0.0)


@settings(max_examples=200, deadline=None)
@given(latents, st.floats(0.1, 4.0))
def test_orthogonal_invariance(rng, alpha):
    F = rng.standard_normal((2, 3, 2, 3))
    perm = rng.permutation(6)
    signs = rng.choice([-1.0, 1.0], size=6)
    G = (F.reshape(6, 2, 3)[perm] * signs[:, None, None]).reshape(F.shape)
    for fn in (constriction_inside, constriction_surface):
        assert fn(t64(G), alpha).item() == pytest.approx(fn(t64(F), alpha).item(), rel=1e-12, abs=1e-15)


def test_norm_layer_matches_loop_norms():
    F = np.random.default_rng(4).standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(T.l2_norm_per_location(t64(F)).data, loop_norms(F), rtol=1e-12)


# -- gradients ----------------------------------------------------------------


def _kink_free(rng, alpha, shape=(2, 3, 2, 2)):
    while True:
        F = rng.standard_normal(shape)
        if np.all(np.abs(loop_norms(F) - alpha) > 1e-2):
            return F


@pytest.mark.parametrize("fn", [constriction_inside, constriction_surface])
@pytest.mark.parametrize("seed", range(20))
def test_constriction_gradients(fn, seed):
    rng = np.random.default_rng(seed)
    alpha = 2.0
    F = _kink_free(rng, alpha)
    assert T.grad_check(lambda x: fn(x, alpha), t64(F), 1e-6) < 1e-5
    F32 = Tensor(F.astype(np.float32))
    assert T.grad_check(lambda x: fn(x, alpha), F32, 1e-2) < 1e-3


@pytest.mark.parametrize("seed", range(20))
def test_reconstruction_gradient(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((1, 4, 1, 3, 3))
    Y = rng.standard_normal(X.shape)
    x = t64(Y, grad=True)
    T.backward(reconstruction_loss(x, t64(X)))
    numeric = central_difference(lambda a: loop_mean_squared(a - X), Y, 1e-6)
    assert np.abs(x.grad - numeric).max() / np.abs(numeric).max() < 1e-5
