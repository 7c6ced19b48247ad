"""Precision, reproducible noise, gradients, resampling, FFT and Adam."""

import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from errors import CapabilityError, ConfigurationError, DimensionError, InvariantError, OptimizerError
from numerics import (Adam, RngStream, as_tensor, bilinear_resize, fft_full, finite_difference_check,
                      gradient, set_checked, set_precision)


def test_set_precision_switches_default_dtype():
    assert set_precision("float32") == torch.float32
    assert torch.get_default_dtype() == torch.float32
    set_precision("float64")
    assert torch.zeros(1).dtype == torch.float64


def test_set_precision_rejects_unknown_name():
    with pytest.raises(ConfigurationError):
        set_precision("float16")


def test_checked_mode_rejects_nan():
    with pytest.raises(InvariantError):
        as_tensor([1.0, float("nan")])
    set_checked(False)
    try:
        assert torch.isnan(as_tensor([float("nan")])).all()
    finally:
        set_checked(True)


def test_rng_stream_replays_identically():
    a = RngStream(7, "noise").normal((4, 5))
    b = RngStream(7, "noise").normal((4, 5))
    assert torch.equal(a, b)
    assert not torch.equal(a, RngStream(7, "other").normal((4, 5)))
    assert not torch.equal(a, RngStream(8, "noise").normal((4, 5)))


NOISE_SCRIPT = (
    "import torch; torch.set_default_dtype(torch.float64); from numerics import RngStream; "
    "print(repr(RngStream(7, 'noise').spawn('window-3').normal((6,)).tolist()))"
)


def _noise_in_fresh_process():
    done = subprocess.run([sys.executable, "-c", NOISE_SCRIPT], cwd=Path(__file__).resolve().parent,
                          capture_output=True, text=True, check=True)
    return done.stdout.strip()


def test_rng_stream_is_identical_across_processes():
    first, second = _noise_in_fresh_process(), _noise_in_fresh_process()
    assert first == second
    assert first == repr(RngStream(7, "noise").spawn("window-3").normal((6,)).tolist())


def test_spawned_stream_ignores_parent_consumption():
    parent = RngStream(3, "root")
    first = parent.spawn("child").normal((10,))
    parent.normal((1000,))
    assert torch.equal(first, parent.spawn("child").normal((10,)))


def test_normal_moments():
    z = RngStream(0, "moments").normal((20000,))
    assert abs(float(z.mean())) < 0.03
    assert abs(float(z.var()) - 1.0) < 0.05
    assert z.dtype == torch.float64


def test_randint_bounds():
    t = RngStream(1, "ints").randint(1, 301, (5000,))
    assert t.dtype == torch.long
    assert int(t.min()) >= 1 and int(t.max()) <= 300


def test_gradient_of_sum_of_squares():
    w = torch.tensor([1.0, -2.0, 3.0], requires_grad=True)
    (g,) = gradient(lambda: (w ** 2).sum(), [w])
    assert torch.allclose(g, 2 * w.detach())


def test_gradient_unused_parameter_is_zero():
    w = torch.ones(2, requires_grad=True)
    v = torch.ones(3, requires_grad=True)
    gw, gv = gradient(lambda: w.sum(), [w, v])
    assert torch.equal(gv, torch.zeros(3))


def test_gradient_errors():
    w = torch.ones(3, requires_grad=True)
    with pytest.raises(DimensionError):
        gradient(lambda: w * 2, [w])
    with pytest.raises(CapabilityError):
        gradient(lambda: torch.tensor(1.0), [w])


def test_finite_difference_check_on_small_network():
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Linear(4, 6), torch.nn.Tanh(), torch.nn.Linear(6, 1))
    x = torch.randn(5, 4)
    params = list(net.parameters())
    assert finite_difference_check(lambda: net(x).pow(2).sum(), params) < 1e-5


def test_bilinear_resize_same_size_is_identity():
    img = torch.rand(2, 3, 5, 7)
    out = bilinear_resize(img, (5, 7))
    assert torch.equal(out, img)
    assert out.data_ptr() != img.data_ptr()


def test_bilinear_resize_preserves_constants_and_shape():
    img = torch.full((3, 4, 6), 0.25)
    out = bilinear_resize(img, (9, 11))
    assert out.shape == (3, 9, 11)
    assert torch.allclose(out, torch.full_like(out, 0.25), atol=1e-15)


def test_bilinear_resize_rejects_empty_target():
    with pytest.raises(DimensionError):
        bilinear_resize(torch.rand(4, 4), (0, 4))


def test_fft_matches_naive_dft_and_parseval():
    x = torch.randn(3, 16)
    real, imag = fft_full(x)
    n = np.arange(16)
    W = np.exp(-2j * math.pi * np.outer(n, n) / 16)
    expected = x.numpy() @ W.T
    assert np.allclose(real.numpy(), expected.real, atol=1e-10)
    assert np.allclose(imag.numpy(), expected.imag, atol=1e-10)
    energy = (real ** 2 + imag ** 2).sum(dim=-1) / 16
    assert torch.allclose(energy, (x ** 2).sum(dim=-1), atol=1e-10)


def test_fft_rejects_empty():
    with pytest.raises(DimensionError):
        fft_full(torch.zeros(2, 0))


def test_adam_first_step_moves_by_learning_rate():
    w = torch.nn.Parameter(torch.tensor([1.0, -1.0]))
    opt = Adam([("w", w)], lr=0.01)
    opt.zero_grad()
    (w * torch.tensor([3.0, -0.5])).sum().backward()
    assert opt.step() == 1
    assert torch.allclose(w.detach(), torch.tensor([0.99, -0.99]), atol=1e-8)


def test_adam_names_parameter_with_nonfinite_gradient():
    a = torch.nn.Parameter(torch.ones(2))
    b = torch.nn.Parameter(torch.ones(2))
    opt = Adam([("a", a), ("b", b)])
    a.grad = torch.zeros(2)
    b.grad = torch.tensor([1.0, float("inf")])
    with pytest.raises(OptimizerError) as info:
        opt.step()
    assert info.value.parameter == "b"
    assert torch.equal(a.detach(), torch.ones(2))


def test_adam_state_round_trip_keeps_step_count():
    w = torch.nn.Parameter(torch.ones(3))
    opt = Adam([("w", w)])
    for _ in range(3):
        opt.zero_grad()
        w.sum().backward()
        opt.step()
    other = Adam([("w", w)])
    other.load_state_dict(opt.state_dict())
    assert other.t == 3


def test_adam_needs_trainable_parameters():
    frozen = torch.nn.Parameter(torch.ones(1), requires_grad=False)
    with pytest.raises(ConfigurationError):
        Adam([("frozen", frozen)])


def test_gradient_chain_rule():
    x = torch.tensor(1.0, requires_grad=True)
    (g,) = gradient(lambda: torch.sin(x ** 2), [x])
    assert abs(float(g) - 2 * math.cos(1.0)) < 1e-12


def test_finite_difference_check_on_matmul_softmax():
    torch.manual_seed(1)
    W = torch.randn(4, 5, requires_grad=True)
    x = torch.randn(3, 4)
    target = torch.randn(3, 5)
    fn = lambda: ((torch.softmax(x @ W, dim=-1) - target) ** 2).sum()
    assert finite_difference_check(fn, [W]) < 1e-4


def _bilinear_oracle(img, H, W):
    r, c = img.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            y = min(max((i + 0.5) * r / H - 0.5, 0.0), r - 1)
            x = min(max((j + 0.5) * c / W - 0.5, 0.0), c - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, r - 1), min(x0 + 1, c - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = ((1 - dy) * (1 - dx) * img[y0, x0] + (1 - dy) * dx * img[y0, x1]
                         + dy * (1 - dx) * img[y1, x0] + dy * dx * img[y1, x1])
    return out


def test_bilinear_resize_matches_half_pixel_oracle():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = bilinear_resize(torch.as_tensor(img), (4, 4))
    assert np.allclose(out.numpy(), _bilinear_oracle(img, 4, 4), atol=1e-12)


def test_bilinear_resize_single_pixel_extends():
    out = bilinear_resize(torch.tensor([[0.7]]), (8, 8))
    assert torch.allclose(out, torch.full((8, 8), 0.7), atol=1e-15)


def test_fft_constant_and_impulse():
    re, im = fft_full(torch.full((4,), 2.5))
    assert torch.allclose(re, torch.tensor([10.0, 0.0, 0.0, 0.0]), atol=1e-12)
    assert torch.allclose(im, torch.zeros(4), atol=1e-12)
    re, im = fft_full(torch.tensor([1.0, 0.0, 0.0, 0.0]))
    assert torch.allclose(re, torch.ones(4))
    assert torch.allclose(im, torch.zeros(4))


def test_fft_is_linear():
    x, y = torch.randn(16), torch.randn(16)
    re, im = fft_full(2.0 * x - 3.0 * y)
    rx, ix = fft_full(x)
    ry, iy = fft_full(y)
    assert torch.allclose(re, 2.0 * rx - 3.0 * ry, atol=1e-10)
    assert torch.allclose(im, 2.0 * ix - 3.0 * iy, atol=1e-10)


def test_adam_matches_scalar_recurrence():
    theta = torch.nn.Parameter(torch.tensor([1.0]))
    opt = Adam([("theta", theta)], lr=0.1)
    ref, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        opt.zero_grad()
        (theta ** 2).sum().backward()
        opt.step()
        g = 2 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(float(theta) - ref) < 1e-12


def test_adam_zero_gradient_leaves_parameters():
    w = torch.nn.Parameter(torch.tensor([0.5, -0.25]))
    opt = Adam([("w", w)])
    for _ in range(3):
        opt.zero_grad()
        (w * 0.0).sum().backward()
        opt.step()
    assert torch.equal(w.detach(), torch.tensor([0.5, -0.25]))
