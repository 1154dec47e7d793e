import numpy as np
import pytest

from cmaxsim.core.errors import KernelError, NumericalError
from cmaxsim.models.schemas import EventWindow, MotionParams, StageScale
from cmaxsim.services.accumulation_service import IweChannels, accumulate_window
from cmaxsim.services.contrast_service import (
    STAGE_TAPS,
    GaussianKernel,
    LineBufferBlur,
    StreamStats,
    direct_objective,
    gaussian_taps,
    line_buffer_stats,
    make_kernel,
    objective_from_stats,
    smooth,
    smooth_block,
    stream_stats,
)


def _contrast(win, omega, scale, kernel, intr):
    return objective_from_stats(stream_stats(smooth(accumulate_window(win, None, omega, scale, intr), kernel)))


def test_gaussian_taps_normalised_and_symmetric():
    for length in (3, 5, 9):
        taps = gaussian_taps(length, 1.0)
        assert taps.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_array_equal(taps, taps[::-1])
        assert np.argmax(taps) == length // 2
    np.testing.assert_array_equal(gaussian_taps(5, 0.0), [0, 0, 1, 0, 0])
    with pytest.raises(KernelError):
        gaussian_taps(4, 1.0)


def test_stage_kernels(intr):
    for s, taps in STAGE_TAPS.items():
        assert make_kernel(StageScale.for_sensor(s, intr)).length == taps
    with pytest.raises(KernelError):
        make_kernel(StageScale.for_sensor(0.3, intr))


def test_identity_kernel_leaves_image_untouched(intr, rng):
    scale = StageScale.for_sensor(0.25, intr)
    channels = IweChannels(rng.normal(size=(4, scale.hs, scale.ws)), scale)
    out = smooth(channels, make_kernel(scale, sigma=0.0))
    np.testing.assert_array_equal(out, channels.data)


def test_kernel_larger_than_image_is_rejected():
    scale = StageScale(1.0, 4, 20)
    kernel = GaussianKernel(gaussian_taps(9, 1.0), 1.0)
    with pytest.raises(KernelError):
        smooth(IweChannels.zeros(scale), kernel)


@pytest.mark.parametrize("s", [0.25, 0.5, 1.0])
def test_line_buffer_is_bitwise_equal_to_materialised_blur(intr, rng, s):
    scale = StageScale.for_sensor(s, intr)
    kernel = make_kernel(scale)
    channels = IweChannels(rng.normal(size=(4, scale.hs, scale.ws)), scale)
    reference = stream_stats(smooth(channels, kernel))
    streamed, blur = line_buffer_stats(channels, kernel)
    assert streamed.S1 == reference.S1
    assert streamed.S2 == reference.S2
    assert np.array_equal(streamed.G, reference.G)
    assert np.array_equal(streamed.T, reference.T)
    assert streamed.P == reference.P == scale.pixels
    assert blur.buffer_writes == 4 * scale.ws * scale.hs
    assert blur.buffer_reads == 4 * scale.ws * (kernel.length - 1) * scale.hs


def test_line_buffer_row_count_is_enforced(intr):
    scale = StageScale.for_sensor(0.25, intr)
    blur = LineBufferBlur(make_kernel(scale), scale.hs, scale.ws)
    blur.push(np.zeros((4, scale.ws)))
    with pytest.raises(KernelError):
        blur.finish()


def test_streaming_statistics_match_two_pass_form(rng):
    for _ in range(1000):
        h, w = rng.integers(3, 12, size=2)
        block = rng.normal(size=(4, h, w)) + rng.uniform(-2, 2)
        one_pass = objective_from_stats(stream_stats(block))
        two_pass = direct_objective(block)
        assert one_pass.variance == pytest.approx(two_pass.variance, rel=1e-12, abs=1e-14)
        np.testing.assert_allclose(one_pass.gradient, two_pass.gradient, rtol=1e-12, atol=1e-13)


def test_constant_image_has_zero_variance():
    block = np.zeros((4, 5, 5))
    block[0] = 3.0
    obj = objective_from_stats(stream_stats(block))
    assert obj.variance == pytest.approx(0.0, abs=1e-12)
    assert obj.variance >= 0.0


def test_bad_statistics_raise():
    with pytest.raises(NumericalError):
        objective_from_stats(StreamStats())
    with pytest.raises(NumericalError):
        objective_from_stats(StreamStats(S1=10.0, S2=1.0, P=4))


def _blur_2d(block, taps):
    """Zero-padded 2-D convolution with the outer product of ``taps``."""
    k2 = np.outer(taps, taps)
    r = len(taps) // 2
    h, w = block.shape[-2:]
    padded = np.pad(block, [(0, 0)] * (block.ndim - 2) + [(r, r), (r, r)])
    out = np.zeros(block.shape)
    for i in range(len(taps)):
        for j in range(len(taps)):
            out += k2[i, j] * padded[..., i:i + h, j:j + w]
    return out


def test_impulse_spreads_to_the_outer_product_kernel():
    taps = gaussian_taps(5, 1.0)
    block = np.zeros((1, 5, 5))
    block[0, 2, 2] = 1.0
    out = smooth_block(block, GaussianKernel(taps, 1.0))
    np.testing.assert_allclose(out[0], np.outer(taps, taps), rtol=0, atol=1e-15)


@pytest.mark.parametrize("s", [0.25, 0.5, 1.0])
def test_separable_blur_equals_2d_convolution(intr, rng, s):
    scale = StageScale.for_sensor(s, intr)
    kernel = make_kernel(scale)
    block = rng.normal(size=(4, scale.hs, scale.ws))
    np.testing.assert_allclose(smooth_block(block, kernel), _blur_2d(block, kernel.taps), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("s", [0.25, 0.5, 1.0])
def test_analytic_gradient_matches_finite_differences(intr, scene, rng, s):
    scale = StageScale.for_sensor(s, intr)
    kernel = make_kernel(scale)
    events = scene.events
    h = 1e-7
    for _ in range(100):
        n = int(rng.integers(200, 401))
        start = int(rng.integers(0, len(events) - n))
        part = events.slice(start, start + n)
        win = EventWindow(part, float(part.t[0]), index=0, start=start)
        base = np.array([0.6, -0.4, 0.9]) + rng.uniform(-0.5, 0.5, 3)
        obj = _contrast(win, MotionParams.from_array(base), scale, kernel, intr)
        fd = np.zeros(3)
        for j in range(3):
            step = np.zeros(3)
            step[j] = h
            hi = _contrast(win, MotionParams.from_array(base + step), scale, kernel, intr).variance
            lo = _contrast(win, MotionParams.from_array(base - step), scale, kernel, intr).variance
            fd[j] = (hi - lo) / (2 * h)
        np.testing.assert_allclose(obj.gradient, fd, rtol=1e-3, atol=1e-6,
                                   err_msg=f"gradient mismatch at s={s}, events {start}+{n}, omega={base}")
