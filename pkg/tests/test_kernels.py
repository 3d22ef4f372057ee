import numpy as np
import pytest

from unlearnable import _kernels_py as py
from unlearnable import kernels

try:
    from unlearnable import _ckernels as cy
except ImportError:  # extension not built
    cy = None

needs_cython = pytest.mark.skipif(cy is None, reason="compiled kernels not built")

CASES = [((2, 3, 8, 8), 3, 3, 1, 1), ((1, 1, 5, 7), 2, 3, 2, 0), ((3, 2, 6, 6), 3, 3, 2, 1), ((1, 4, 4, 4), 1, 1, 1, 0)]


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("shape,kh,kw,stride,pad", CASES)
def test_im2col_matches_direct_windows(rng, shape, kh, kw, stride, pad):
    x = rng.uniform(-1, 1, shape)
    cols = py.im2col(x, kh, kw, stride, pad)
    n, c, h, w = shape
    ho, wo = py.conv_output_size(h, kh, stride, pad), py.conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    row = 0
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                win = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                assert np.array_equal(cols[row], win.reshape(-1))
                row += 1


@pytest.mark.parametrize("shape,kh,kw,stride,pad", CASES)
def test_col2im_is_adjoint_of_im2col(rng, shape, kh, kw, stride, pad):
    x = rng.uniform(-1, 1, shape)
    cols = py.im2col(x, kh, kw, stride, pad)
    g = rng.uniform(-1, 1, cols.shape)
    lhs = np.sum(cols * g)
    rhs = np.sum(x * py.col2im(g, shape, kh, kw, stride, pad))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_maxpool_first_max_wins_ties():
    x = np.ones((1, 1, 2, 2))
    out, arg = py.maxpool2d_forward(x, 2, 2)
    assert out.item() == 1.0 and arg.item() == 0
    grad = py.maxpool2d_backward(np.ones((1, 1, 1, 1)), arg, x.shape, 2, 2)
    assert grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


@needs_cython
@pytest.mark.parametrize("shape,kh,kw,stride,pad", CASES)
def test_cython_im2col_col2im_bitwise(rng, shape, kh, kw, stride, pad):
    x = rng.uniform(-1, 1, shape)
    a, b = py.im2col(x, kh, kw, stride, pad), cy.im2col(x, kh, kw, stride, pad)
    assert a.shape == b.shape and np.array_equal(a, b)
    g = rng.uniform(-1, 1, a.shape)
    assert np.array_equal(py.col2im(g, shape, kh, kw, stride, pad), cy.col2im(g, shape, kh, kw, stride, pad))


@needs_cython
@pytest.mark.parametrize("shape,k,stride", [((2, 3, 8, 8), 2, 2), ((1, 2, 7, 5), 2, 2), ((1, 1, 6, 6), 3, 1)])
def test_cython_maxpool_bitwise(rng, shape, k, stride):
    x = rng.uniform(-1, 1, shape)
    x[0, 0, 0, :2] = 0.5  # a tie
    o1, a1 = py.maxpool2d_forward(x, k, stride)
    o2, a2 = cy.maxpool2d_forward(x, k, stride)
    assert np.array_equal(o1, o2) and np.array_equal(a1, a2)
    g = rng.uniform(-1, 1, o1.shape)
    assert np.array_equal(py.maxpool2d_backward(g, a1, shape, k, stride),
                          cy.maxpool2d_backward(g, a2, shape, k, stride))


def test_pure_python_switch(monkeypatch):
    import importlib
    monkeypatch.setenv("UNLEARNABLE_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("UNLEARNABLE_PURE_PYTHON")
        importlib.reload(kernels)


def test_benchmark_script_runs(tmp_path, capsys):
    import importlib.util
    from pathlib import Path
    path = Path(__file__).resolve().parent.parent / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    mod.CASES = [("conv im2col", (2, 1, 8, 8), 3, 1, 1)]
    mod.POOLS = [("pool", (2, 2, 8, 8), 2, 2)]
    assert mod.main(["--repeat", "1", "--json", str(tmp_path / "b.json")]) == 0
    assert "speedup" in capsys.readouterr().out
