import numpy as np
import pytest

from lindit import attention as A
from lindit import complexity as C
from lindit import tensor as T
from lindit.errors import ConfigurationError, ContractError


class TestFormulas:
    def test_mhsa_direct_substitution(self):
        assert C.gmacs_mhsa(1, 1) == 6

    def test_mhsa_reference_value(self):
        # evaluated independently: 4*256*384^2 + 2*256^2*384
        assert C.gmacs_mhsa(256, 384) == 201_326_592

    def test_mhsa_quadratic_term_scales_with_n_squared(self):
        base = C.gmacs_mhsa(128, 384)
        doubled = C.gmacs_mhsa(256, 384)
        quad_base = base - 4 * 128 * 384 * 384
        quad_doubled = doubled - 4 * 256 * 384 * 384
        assert quad_doubled == 4 * quad_base

    def test_mhla_direct_substitution(self):
        assert C.gmacs_mhla(1, 1, 1, 1) == 9

    def test_mhla_reference_value(self):
        # evaluated independently: 4*256*384^2 + 256*384 + 3*256*384^2/2 + 25*256*384
        assert C.gmacs_mhla(256, 384, 2, 5) == 210_173_952

    def test_mhla_head_term_doubles_when_heads_halve(self):
        full = C.gmacs_mhla(256, 384, 4, 5)
        halved = C.gmacs_mhla(256, 384, 2, 5)
        head_term = lambda h: 3 * 256 * 384 * 384 // h
        assert halved - full == head_term(2) - head_term(4)
        assert halved > full

    def test_mhla_requires_divisible_heads(self):
        with pytest.raises(ConfigurationError):
            C.gmacs_mhla(16, 384, 5, 5)

    def test_mhsa_takes_no_head_argument(self):
        import inspect

        assert "heads" not in inspect.signature(C.gmacs_mhsa).parameters


class TestCounter:
    def test_matmul_alone(self):
        with T.mac_tally() as tally:
            T.Tensor(np.zeros((3, 4))) @ T.Tensor(np.zeros((4, 5)))
        assert tally.total() == 60

    def test_depthwise_conv_alone(self):
        # 4x4 output pixels, 9 taps each
        with T.mac_tally() as tally:
            T.conv2d_depthwise(
                T.Tensor(np.zeros((1, 1, 4, 4))), T.Tensor(np.zeros((1, 1, 3, 3)))
            )
        assert tally.total() == 144

    def test_full_linear_attention_matches_formula(self):
        cfg = A.AttentionConfig(hidden_dim=8, num_heads=2, variant="linear_relu_dwc", dwc_kernel=5)
        analytic, counted = C.attention_macs(cfg, 4)
        assert analytic == C.gmacs_mhla(16, 8, 2, 5)
        assert counted == analytic

    def test_disabled_instrumentation_is_a_contract_error(self):
        with pytest.raises(ContractError):
            T.macs_executed()


class TestConformanceGrid:
    @pytest.mark.parametrize("n", [4, 16, 64, 256])
    @pytest.mark.parametrize("d", [8, 32, 384])
    @pytest.mark.parametrize("h", [1, 2, 4])
    @pytest.mark.parametrize("k", [3, 5])
    def test_formula_equals_counter(self, n, d, h, k):
        side = int(round(n**0.5))
        cfg = A.AttentionConfig(hidden_dim=d, num_heads=h, variant="linear_relu_dwc", dwc_kernel=k)
        analytic, counted = C.attention_macs(cfg, side)
        assert analytic == counted

    @pytest.mark.parametrize("n,d,h", [(16, 8, 2), (64, 32, 4), (256, 384, 2)])
    def test_softmax_formula_equals_counter(self, n, d, h):
        side = int(round(n**0.5))
        cfg = A.AttentionConfig(hidden_dim=d, num_heads=h, variant="softmax")
        analytic, counted = C.attention_macs(cfg, side)
        assert analytic == counted == C.gmacs_mhsa(n, d)


class TestHarness:
    def test_single_trial_has_zero_std(self):
        cfg = A.AttentionConfig(hidden_dim=8, num_heads=2, variant="linear_relu_dwc")
        report = C.bench_latency(cfg, grid_side=4, trials=1, warmup=1)
        assert report.latency_std_s == 0.0
        assert report.trials == 1

    def test_repeated_sweeps_share_analytic_columns(self):
        kwargs = dict(hidden_dim=32, grid_side=4, kernel=5, trials=2, warmup=1)
        first = C.sweep_heads([1, 2, 4], **kwargs)
        second = C.sweep_heads([1, 2, 4], **kwargs)
        assert [r.analytic_macs for r in first] == [r.analytic_macs for r in second]
        assert [r.counted_macs for r in first] == [r.counted_macs for r in second]

    def test_sweep_gmacs_strictly_decreasing_in_heads(self):
        heads = [1, 2, 3, 6, 48, 96]
        gmacs = [C.gmacs_mhla(256, 384, h, 5) for h in heads]
        assert all(a > b for a, b in zip(gmacs, gmacs[1:]))

    def test_crossover_exists_and_is_found_by_scan(self):
        n_star = C.crossover_tokens(384, 2, 5)
        assert n_star is not None
        assert C.gmacs_mhla(n_star, 384, 2, 5) < C.gmacs_mhsa(n_star, 384)
        assert C.gmacs_mhla(n_star - 1, 384, 2, 5) >= C.gmacs_mhsa(n_star - 1, 384)

    def test_csv_schema(self, tmp_path):
        cfg = A.AttentionConfig(hidden_dim=8, num_heads=2, variant="linear_relu_dwc")
        report = C.bench_latency(cfg, grid_side=4, trials=2, warmup=1)
        path = tmp_path / "costs.csv"
        C.write_cost_csv(path, [report])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "variant,N,D,h,k,analytic_macs,counted_macs,latency_mean_s,latency_std_s,trials"
        fields = lines[1].split(",")
        assert fields[0] == "linear_relu_dwc"
        assert int(fields[5]) == report.analytic_macs
