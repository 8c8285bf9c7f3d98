import pytest

from cmpose import tensor as T
from cmpose.gradcheck import TOLERANCE, check_model, check_ops, gradcheck, relative_error, toy_config

import numpy as np


def test_op_suite_passes():
    results = check_ops(0)
    assert {r.name for r in results} >= {"op:MatMul", "op:Softmax", "op:LayerNorm", "op:Gelu", "op:TakeAlong"}
    assert all(r.passed() for r in results), [(r.name, r.rel_error) for r in results if not r.passed()]


def test_model_check_covers_every_parameter_group():
    cfg = toy_config()
    results = check_model(cfg, seed=0)
    from cmpose.model import CMPose

    names = {n for n, _ in CMPose(cfg, np.random.default_rng(0)).named_parameters()}
    assert {r.name for r in results} == names
    assert max(r.rel_error for r in results) <= TOLERANCE


def _broken_gelu_backward(original):
    def backward(self, grad):
        out = original(self, grad)
        return tuple(1.01 * g for g in out) if isinstance(out, tuple) else 1.01 * out

    return backward


def test_corrupted_backward_rule_is_named(monkeypatch):
    monkeypatch.setattr(T.Gelu, "backward", _broken_gelu_backward(T.Gelu.backward))
    report = gradcheck(seeds=range(1))
    assert not report.passed
    assert "op:Gelu" in report.failures
    assert "FAIL" in report.lines()[-1] and "op:Gelu" in report.lines()[-1]


def test_report_is_deterministic():
    a, b = gradcheck(seeds=range(2)), gradcheck(seeds=range(2))
    assert [(g.name, g.rel_error, g.checked) for g in a.groups] == [(g.name, g.rel_error, g.checked) for g in b.groups]


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-9)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.001])) == pytest.approx(1e-3, rel=1e-3)
