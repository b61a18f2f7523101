import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from singleclass.core import ParameterError, RandomSource, ShapeError
from singleclass.defenses import (ADV_TRAIN_PRESETS, PAIRED_CHAINS, AdvTrainConfig,
                                  BitDepthReduction, DefenseChain, MedianSmoothing,
                                  RandomResizePad, adversarial_train, apply_chain,
                                  bit_depth_reduce, median_smooth, random_resize_pad)
from singleclass.models import train_classifier

unit = st.floats(0.0, 1.0, width=32)


# --- bit depth -------------------------------------------------------------------------

def test_bit_depth_examples(rng):
    assert bit_depth_reduce(np.array([0.7]), 1)[0] == 1.0
    x = rng.uniform(0, 1, (3, 8, 8))
    assert np.abs(bit_depth_reduce(x, 8) - x).max() <= 1 / 510 + 1e-15
    with pytest.raises(ParameterError):
        bit_depth_reduce(x, 0)
    with pytest.raises(ParameterError):
        bit_depth_reduce(x, 9)


def test_bit_depth_matches_scalar_quantizer(rng):
    x = rng.uniform(0, 1, (2, 5, 5))
    out = bit_depth_reduce(x, 3)
    for idx in np.ndindex(x.shape):
        assert out[idx] == round(float(x[idx]) * 7) / 7


# --- median ----------------------------------------------------------------------------

def sort_median_oracle(x, k):
    r = k // 2
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        # reflect about the edge pixel, which is not repeated
        padded = np.pad(x[c], r, mode="reflect")
        for i in range(x.shape[1]):
            for j in range(x.shape[2]):
                window = sorted(padded[i:i + k, j:j + k].ravel().tolist())
                out[c, i, j] = window[len(window) // 2]
    return out


@pytest.mark.parametrize("kernel", [3, 5])
def test_median_matches_sort_oracle(kernel, rng):
    x = rng.uniform(0, 1, (3, 8, 8))
    np.testing.assert_array_equal(median_smooth(x, kernel), sort_median_oracle(x, kernel))


def test_median_examples():
    flat = np.full((3, 6, 6), 0.4)
    np.testing.assert_array_equal(median_smooth(flat), flat)
    spiked = flat.copy()
    spiked[:, 2, 3] = 1.0
    np.testing.assert_array_equal(median_smooth(spiked), flat)
    with pytest.raises(ParameterError):
        median_smooth(flat, 4)
    with pytest.raises(ParameterError):
        median_smooth(flat, 7)


def test_median_batch_is_per_image(rng):
    x = rng.uniform(0, 1, (2, 3, 6, 6))
    np.testing.assert_array_equal(median_smooth(x)[1], median_smooth(x[1]))


# --- resize and pad --------------------------------------------------------------------

def test_resize_pad_contract(rng):
    x = rng.uniform(0, 1, (4, 3, 10, 10)).astype(np.float32)
    a = random_resize_pad(x, (0.5, 0.9), RandomSource(3))
    assert a.shape == x.shape and a.dtype == x.dtype
    np.testing.assert_array_equal(a, random_resize_pad(x, (0.5, 0.9), RandomSource(3)))
    np.testing.assert_allclose(random_resize_pad(x, (1.0, 1.0), RandomSource(0)), x, atol=1e-6)
    with pytest.raises(ParameterError):
        random_resize_pad(x, (0.0, 1.0))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (3, 6, 6), elements=unit), st.sampled_from(["bit_depth", "median",
                                                                      "resize_pad"]))
def test_transforms_keep_images_valid(x, name):
    out = DefenseChain([(name, {})]).transform(x)
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= 1


# --- chains ----------------------------------------------------------------------------

def test_chain_composition(rng):
    x = rng.uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
    with pytest.raises(ParameterError):
        DefenseChain([]).fit()
    with pytest.raises(ParameterError):
        DefenseChain([("jpeg", {})]).transform(x)
    np.testing.assert_array_equal(DefenseChain([("median", {"kernel": 3})]).transform(x),
                                  MedianSmoothing(3).transform(x))
    chain = DefenseChain([("bit_depth", {"bits": 3}), ("median", {})])
    np.testing.assert_array_equal(apply_chain(x, chain), median_smooth(bit_depth_reduce(x, 3)))
    assert chain.name == "bit_depth+median"
    assert clone(chain).get_params()["steps"] == chain.steps


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (1, 5, 5), elements=st.floats(0, 1)), st.integers(1, 8))
def test_median_and_bit_depth_commute(x, bits):
    # quantization is monotone and the median of an odd window commutes with any
    # monotone map, so this pair is order-free
    np.testing.assert_array_equal(median_smooth(bit_depth_reduce(x, bits)),
                                  bit_depth_reduce(median_smooth(x), bits))


def test_resize_pad_pairs_depend_on_order():
    # a thin bright line survives resizing but not a 3x3 median taken afterwards
    x = np.zeros((1, 12, 12))
    x[0, :, 6] = 1.0
    first = DefenseChain([("median", {}), ("resize_pad", {"scale_range": (0.75, 0.75)})])
    second = DefenseChain([("resize_pad", {"scale_range": (0.75, 0.75)}), ("median", {})])
    assert not np.array_equal(first.transform(x), second.transform(x))
    x = np.linspace(0, 1, 144).reshape(1, 12, 12)
    # same resize draw in both orders
    rp = ("resize_pad", {"scale_range": (0.75, 0.75), "seed": 0})
    third = DefenseChain([rp, ("bit_depth", {"bits": 2})])
    swapped = DefenseChain([("bit_depth", {"bits": 2}), rp])
    assert not np.array_equal(third.transform(x), swapped.transform(x))


def test_paired_chains_are_the_three_pairs():
    names = {tuple(n for n, _ in pair) for pair in PAIRED_CHAINS}
    assert names == {("bit_depth", "median"), ("median", "resize_pad"),
                     ("resize_pad", "bit_depth")}


def test_transformer_estimators(rng):
    x = rng.uniform(0, 1, (3, 6, 6))
    np.testing.assert_array_equal(BitDepthReduction(2).fit().transform(x), bit_depth_reduce(x, 2))
    t = RandomResizePad((0.5, 0.8), seed=9)
    np.testing.assert_array_equal(t.transform(x), t.transform(x))


# --- adversarial training --------------------------------------------------------------

def small_cfg(**kw):
    base = dict(epochs=1, batch_size=16, lr=0.02, lr_final=0.002)
    base.update(kw)
    return AdvTrainConfig(**base)


def test_adv_config_validation():
    with pytest.raises(ParameterError):
        AdvTrainConfig(epsilon=-0.1)
    with pytest.raises(ParameterError):
        AdvTrainConfig(momentum=1.0)
    with pytest.raises(ParameterError):
        AdvTrainConfig(norm="l2")
    assert AdvTrainConfig(radius=0.1).ball_radius == 0.1
    assert ADV_TRAIN_PRESETS["cifar10"]["epsilon"] == 0.031


def test_zero_epsilon_is_bit_identical_to_clean_training(tiny_clf, tiny_data):
    train, test = tiny_data
    cfg = small_cfg(epsilon=0.0)
    maps = np.random.default_rng(0).uniform(0, 1, (len(train), 16, 16))
    hardened, delta = adversarial_train(tiny_clf, train, maps, cfg)
    clean = train_classifier(train, cfg.train_config(), init=tiny_clf, heldout=test)
    assert hardened.checksum() == clean.checksum()
    np.testing.assert_array_equal(delta, 0)


def test_zero_maps_match_clean_training(tiny_clf, tiny_data):
    train, test = tiny_data
    cfg = small_cfg(epsilon=0.05)
    hardened, delta = adversarial_train(tiny_clf, train, np.zeros((len(train), 16, 16)), cfg)
    clean = train_classifier(train, cfg.train_config(), init=tiny_clf, heldout=test)
    assert hardened.checksum() == clean.checksum()
    # the loss no longer depends on delta, so its sign step is zero
    np.testing.assert_array_equal(delta, 0)


def test_delta_stays_in_ball_and_source_model_untouched(tiny_clf, tiny_data):
    train = tiny_data[0]
    before = tiny_clf.checksum()
    cfg = small_cfg(epsilon=0.02, epochs=2)
    maps = np.random.default_rng(1).uniform(0, 1, (len(train), 16, 16))
    hardened, delta = adversarial_train(tiny_clf, train, maps, cfg)
    assert len(hardened.delta_trace_) == 2 * -(-len(train) // 16)
    assert max(hardened.delta_trace_) <= cfg.epsilon
    assert np.abs(delta).max() <= cfg.epsilon
    assert tiny_clf.checksum() == before


def test_adv_train_input_checks(tiny_clf, tiny_data):
    train = tiny_data[0]
    with pytest.raises(ParameterError):
        adversarial_train(tiny_clf, train, np.zeros((3, 16, 16)), small_cfg())
    with pytest.raises(ShapeError):
        adversarial_train(tiny_clf, train, np.zeros((len(train), 8, 8)), small_cfg())
