"""Finite-difference checker: agreement on smooth losses, detection of lies."""

import numpy as np
import pytest

from tara.numerics import Matrix, Tape, fd_check, matmul, mean_all, square, sum_all, tanh


def test_quadratic_matches_to_high_precision():
    rng = np.random.default_rng(11)
    w = Matrix(rng.standard_normal((3, 4)))

    def loss_fn(params, tape):
        return sum_all(square(params["w"]))

    report = fd_check(loss_fn, {"w": w})
    assert report.max_rel_err < 1e-8
    assert report.passed(1e-4)
    blk = report.blocks["w"]
    assert blk.checked == 12


def test_composite_tanh_network():
    rng = np.random.default_rng(12)
    params = {
        "w1": Matrix(rng.standard_normal((4, 3))),
        "w2": Matrix(rng.standard_normal((2, 4))),
    }
    x = Matrix(rng.standard_normal((3, 5)))

    def loss_fn(p, tape):
        h = tanh(matmul(p["w1"], x))
        return mean_all(square(matmul(p["w2"], h)))

    report = fd_check(loss_fn, params)
    assert report.max_rel_err < 1e-6
    assert set(report.blocks) == {"w1", "w2"}


def test_constant_loss_reports_zero_error():
    w = Matrix([[1.0, 2.0]])

    def loss_fn(params, tape):
        # depends on the watched leaf only through a zero coefficient
        return sum_all(square(Matrix([[3.0]])))

    report = fd_check(loss_fn, {"w": w})
    assert report.max_rel_err == 0.0


def test_detects_wrong_analytic_gradient():
    w = Matrix([[1.0, -2.0, 0.5]])

    def lying_loss(params, tape):
        if tape is not None:
            return sum_all(params["w"])  # analytic grad: all ones
        return Matrix([[2.0 * float(params["w"].array.sum())]])  # true fd slope: 2

    report = fd_check(lying_loss, {"w": w})
    assert report.max_rel_err > 0.4
    assert not report.passed(1e-4)


def test_sampled_subset_is_deterministic():
    rng = np.random.default_rng(13)
    w = Matrix(rng.standard_normal((6, 6)))

    def loss_fn(params, tape):
        return sum_all(square(params["w"]))

    r1 = fd_check(loss_fn, {"w": w}, samples_per_block=5, seed=42)
    r2 = fd_check(loss_fn, {"w": w}, samples_per_block=5, seed=42)
    assert r1.blocks["w"].checked == 5
    assert r1.blocks["w"].worst_index == r2.blocks["w"].worst_index
    assert r1.max_rel_err == r2.max_rel_err


def test_report_lines_are_printable():
    w = Matrix([[2.0]])

    def loss_fn(params, tape):
        return square(params["w"])

    report = fd_check(loss_fn, {"w": w})
    lines = report.lines()
    assert len(lines) == 1 and lines[0].startswith("w:")
