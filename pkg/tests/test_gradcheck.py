"""The gradient checker must pass on healthy kernels and, just as
importantly, fail loudly when a gradient error is planted."""

import pytest

from trifuse.gradcheck import CHECKED_OPS, run_gradcheck


class TestGradCheck:
    def test_all_ops_pass(self):
        results = run_gradcheck(seed=0)
        assert [r.op for r in results] == list(CHECKED_OPS)
        for result in results:
            assert result.passed, f"{result.op}: {result.max_rel_error:.3e}"
            assert result.max_rel_error < 1e-4

    def test_passes_under_other_seeds(self):
        for seed in (1, 2):
            assert all(r.passed for r in run_gradcheck(seed=seed))

    @pytest.mark.parametrize("fault_op", ["matmul", "batchnorm", "full_model"])
    def test_planted_fault_is_caught(self, fault_op):
        results = {r.op: r for r in run_gradcheck(seed=0, fault_op=fault_op)}
        assert not results[fault_op].passed
        for op, result in results.items():
            if op != fault_op:
                assert result.passed, op

    def test_unknown_fault_op_rejected(self):
        with pytest.raises(ValueError, match="unknown op"):
            run_gradcheck(fault_op="transmogrify")

    def test_covers_core_operations(self):
        for op in ("matmul", "linear", "batchnorm", "softmax", "scaled_attention",
                   "multi_head", "tri_transformer_fuse", "classify", "bce_loss", "full_model"):
            assert op in CHECKED_OPS
