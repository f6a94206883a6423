import numpy as np
import pytest

from tamoo.errors import DomainError
from tamoo.transforms import (
    DETERMINISTIC_PARAMS,
    KINDS,
    STOCHASTIC_RANGES,
    TransformSpec,
    apply_transform,
)


def smooth_image(side=16):
    i, j = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    return 0.5 + 0.4 * np.sin(i / side * np.pi) * np.cos(j / side * np.pi / 2)


def jvp(spec, x, v, param, h=1e-3):
    """Directional derivative with Richardson extrapolation (error O(h^4))."""
    f = lambda t: apply_transform(spec, x + t * v, param)[0]
    d1 = (f(h) - f(-h)) / (2 * h)
    d2 = (f(h / 2) - f(-h / 2)) / h
    return (4 * d2 - d1) / 3


def test_table_constants():
    assert DETERMINISTIC_PARAMS == {"identity": None, "hflip": 1.0, "vflip": 1.0, "center_crop": 0.6,
                                    "brightness": 1.3, "rotation": 10.0, "gamma": 1.3}
    assert STOCHASTIC_RANGES["center_crop"] == (0.6, 1.0)
    assert STOCHASTIC_RANGES["brightness"] == (1.0, 1.3)
    assert STOCHASTIC_RANGES["rotation"] == (-10.0, 10.0)
    assert STOCHASTIC_RANGES["gamma"] == (0.7, 1.3)
    assert STOCHASTIC_RANGES["hflip"] == STOCHASTIC_RANGES["vflip"] == 0.5


def test_vflip_example():
    out, _ = apply_transform(TransformSpec("vflip"), np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out, [[3, 4], [1, 2]])


@pytest.mark.parametrize("kind", ["hflip", "vflip"])
def test_flip_involution(kind):
    x = np.random.default_rng(0).random((16, 16))
    once, _ = apply_transform(TransformSpec(kind), x)
    twice, _ = apply_transform(TransformSpec(kind), once)
    assert np.array_equal(twice, x)


def test_brightness_clamp():
    out, vjp = apply_transform(TransformSpec("brightness"), np.array([0.9, 0.5, 0.1, 0.2]))
    assert out[0] == 1.0
    np.testing.assert_allclose(out[1:], [0.65, 0.13, 0.26])
    np.testing.assert_allclose(vjp(np.ones(4)), [0.0, 1.3, 1.3, 1.3])


def test_gamma_one_is_identity():
    x = np.random.default_rng(1).random(256)
    out, _ = apply_transform(TransformSpec("gamma", param=1.0), x)
    np.testing.assert_allclose(out, x, atol=1e-15)


def test_gamma_floor_keeps_gradient_finite():
    x = np.zeros(16)
    _, vjp = apply_transform(TransformSpec("gamma", param=0.7), x)
    assert np.all(np.isfinite(vjp(np.ones(16))))
    _, vjp_raw = apply_transform(TransformSpec("gamma", param=0.7), x + 0.5, gamma_floor=0.0)
    assert np.all(np.isfinite(vjp_raw(np.ones(16))))


def test_rotation_round_trip():
    x = smooth_image()
    there, _ = apply_transform(TransformSpec("rotation", param=10.0), x)
    back, _ = apply_transform(TransformSpec("rotation", param=-10.0), there)
    interior = (slice(3, 13), slice(3, 13))
    assert np.max(np.abs(back[interior] - x[interior])) <= 0.1


def test_rotation_zero_and_full_crop_are_identity():
    x = smooth_image()
    np.testing.assert_allclose(apply_transform(TransformSpec("rotation", param=0.0), x)[0], x, atol=1e-12)
    np.testing.assert_allclose(apply_transform(TransformSpec("center_crop", param=1.0), x)[0], x, atol=1e-12)


def test_center_crop_samples_inside_the_image():
    out, vjp = apply_transform(TransformSpec("center_crop"), np.full((16, 16), 0.7))
    np.testing.assert_allclose(out, 0.7, atol=1e-12)
    # every output pixel is a convex combination of input pixels
    np.testing.assert_allclose(vjp(np.ones((16, 16))).sum(), 256.0, atol=1e-9)
    # a crop ignores the border rows entirely
    x = smooth_image()
    x2 = x.copy()
    x2[0, :] = 0.0
    np.testing.assert_array_equal(apply_transform(TransformSpec("center_crop"), x)[0],
                                  apply_transform(TransformSpec("center_crop"), x2)[0])


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("mode", ["deterministic", "stochastic"])
def test_vjp_adjoint(kind, mode):
    rng = np.random.default_rng(hash((kind, mode)) % 2**32)
    spec = TransformSpec(kind, mode)
    for _ in range(5):
        x = rng.uniform(0.05, 0.95, 256)
        param = spec.draw(rng)
        if kind == "brightness":
            # keep pixels clear of the clamp kink so the difference quotient is valid
            x = np.where(np.abs(param * x - 1.0) < 0.02, 0.3, x)
        u, v = rng.normal(size=256), rng.normal(size=256)
        _, vjp = apply_transform(spec, x, param)
        lhs = vjp(u) @ v
        rhs = u @ jvp(spec, x, v, param)
        assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))


def test_parameter_validation():
    with pytest.raises(DomainError):
        TransformSpec("rotation", param=45.0)
    with pytest.raises(DomainError):
        TransformSpec("gamma", param=2.0)
    with pytest.raises(DomainError):
        TransformSpec("hflip", param=0.3)
    with pytest.raises(DomainError):
        TransformSpec("identity", param=1.0)
    with pytest.raises(DomainError):
        TransformSpec("translate")
    with pytest.raises(DomainError):
        TransformSpec("gamma", mode="sometimes")


def test_draws_stay_in_range():
    rng = np.random.default_rng(2)
    for kind, r in STOCHASTIC_RANGES.items():
        spec = TransformSpec(kind, "stochastic")
        for _ in range(200):
            p = spec.draw(rng)
            if isinstance(r, tuple):
                assert r[0] <= p <= r[1]
            elif r is None:
                assert p is None
            else:
                assert p in (0.0, 1.0)


def test_input_errors():
    with pytest.raises(DomainError, match="index 3"):
        apply_transform(TransformSpec("identity"), np.array([0.1, 0.2, 0.3, np.nan]))
    with pytest.raises(DomainError):
        apply_transform(TransformSpec("identity"), np.ones(15))
