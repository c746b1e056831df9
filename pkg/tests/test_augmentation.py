import numpy as np
import pytest

from dproto.augmentation import KINDS, augment, equivalent_angle, random_augment
from dproto.config import DatasetConfig


@pytest.fixture
def image():
    rng = np.random.default_rng(0)
    img = np.full((20, 20, 3), 0.5)
    img[5:15, 6:12] = rng.uniform(size=(10, 6, 3))
    return img


def test_zero_rotation_is_the_identity(image):
    np.testing.assert_allclose(augment(image, "rotation", 0.0, seed=1), image, atol=1e-12)


def test_full_turn_is_close_to_the_identity(image):
    turned = augment(image, "rotation", 360.0, seed=1)
    assert np.abs(turned - image).max() <= 0.02


@pytest.mark.parametrize("kind,magnitude", [("rotation", 20.0), ("perspective", 0.1),
                                            ("shear", -0.2), ("distortion", 3.0)])
def test_same_seed_same_output(image, kind, magnitude):
    a = augment(image, kind, magnitude, seed=11)
    b = augment(image, kind, magnitude, seed=11)
    np.testing.assert_array_equal(a, b)
    assert a.shape == image.shape
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_grayscale_images_keep_their_shape(image):
    assert augment(image[:, :, 0], "shear", 0.1, seed=0).shape == (20, 20)


def test_uncovered_area_gets_the_background():
    white = np.ones((10, 10, 1))
    out = augment(white, "shear", 0.2, seed=0)
    assert out.min() >= 0.5 - 1e-12
    assert out[9, 0, 0] < 1.0
    assert out[5, 5, 0] == pytest.approx(1.0)


def test_invalid_requests(image):
    with pytest.raises(ValueError):
        augment(image, "blur", 1.0, seed=0)
    with pytest.raises(ValueError):
        augment(image, "rotation", 40.0, seed=0)
    with pytest.raises(ValueError):
        augment(image, "perspective", -0.05, seed=0)


def test_equivalent_angle_wraps():
    assert equivalent_angle(360.0) == 0.0
    assert equivalent_angle(-190.0) == 170.0


def test_random_augment_draws_a_valid_transformation(image):
    cfg = DatasetConfig()
    img, kind, magnitude = random_augment(image, seed=4, cfg=cfg)
    assert kind in KINDS
    assert img.shape == image.shape
    again, kind2, magnitude2 = random_augment(image, seed=4, cfg=cfg)
    assert (kind2, magnitude2) == (kind, magnitude)
    np.testing.assert_array_equal(again, img)
