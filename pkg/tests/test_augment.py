import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from crackscan.augment import ROTATE_RIGHT_ANGLE, AugmentationPolicy, augment


def _image(seed=0, size=32):
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3)).astype(np.uint8)


def test_identity_policy_is_noop():
    img = _image()
    out = augment(img, AugmentationPolicy.identity(), np.random.default_rng(0))
    assert out.dtype == np.uint8
    assert out.tobytes() == img.tobytes()


def test_hflip_is_an_involution():
    policy = AugmentationPolicy(hflip=True, vflip=False, brightness=0, contrast=0, saturation=0, rotation=0)
    seed = next(s for s in range(100) if np.random.default_rng(s).random() < 0.5)
    img = _image(1)
    once = augment(img, policy, np.random.default_rng(seed))
    np.testing.assert_array_equal(once, img[:, ::-1])
    np.testing.assert_array_equal(augment(once, policy, np.random.default_rng(seed)), img)


def test_fixed_seed_is_bit_identical():
    img = _image(2)
    policy = AugmentationPolicy()
    a = augment(img, policy, np.random.default_rng(7))
    b = augment(img, policy, np.random.default_rng(7))
    assert a.tobytes() == b.tobytes()
    assert augment(img, policy, np.random.default_rng(8)).tobytes() != a.tobytes()


def test_right_angle_rotation_mode():
    img = _image(3)
    policy = AugmentationPolicy(False, False, 0, 0, 0, rotation=90, rotation_mode=ROTATE_RIGHT_ANGLE)
    out = augment(img, policy, np.random.default_rng(0))
    assert any(np.array_equal(out, np.rot90(img, k)) for k in range(4))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 10_000),
    st.floats(0, 0.5),
    st.floats(0, 0.5),
    st.floats(0, 0.5),
    st.floats(0, 45),
)
def test_shape_and_range_preserved(seed, b, c, s, rot):
    img = _image(seed % 7, 24)
    policy = AugmentationPolicy(True, True, b, c, s, rot)
    out = augment(img, policy, np.random.default_rng(seed))
    assert out.shape == img.shape and out.dtype == np.uint8
