import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiera2a import (ConfigError, FitError, LevelParams, Measurement,
                     build_topology, fit_params, load_measurements,
                     load_params, load_topology, save_params, save_topology)


class TestBuildTopology:
    def test_four_level_cluster(self):
        topo = build_topology([4, 2, 2, 2], 128, 1024, 2)
        assert topo.num_gpus == 32
        assert topo.num_levels == 4
        assert topo.level_group_counts == (1, 4, 8, 16)
        assert topo.experts_per_gpu == 4

    def test_single_level_degenerate(self):
        topo = build_topology([2], 4, 8, 2)
        assert topo.num_gpus == 2
        assert topo.num_levels == 1
        assert topo.level_group_counts == (1,)

    def test_contiguous_gpu_assignment(self):
        topo = build_topology([2, 8], 128, 8, 2)
        assert topo.num_gpus == 16
        assert topo.level_group_counts == (1, 2)
        assert all(topo.gpu_of_expert(e) == 0 for e in range(8))
        assert topo.gpu_of_expert(8) == 1

    def test_experts_not_divisible(self):
        with pytest.raises(ConfigError):
            build_topology([4, 2], 30, 8, 2)

    def test_empty_fanouts(self):
        with pytest.raises(ConfigError):
            build_topology([], 8, 8, 2)

    def test_all_ones(self):
        with pytest.raises(ConfigError):
            build_topology([1, 1], 8, 8, 2)

    def test_interior_fanout_one(self):
        with pytest.raises(ConfigError):
            build_topology([2, 1, 2], 8, 8, 2)

    def test_trailing_fanout_one_is_allowed(self):
        topo = build_topology([2, 1], 8, 8, 2)
        assert topo.num_gpus == 2
        assert topo.level_group_counts == (1, 2)


topologies = st.builds(
    lambda fanouts, mult: build_topology(list(fanouts) + [2], math.prod(fanouts) * 2 * mult, 4, 2),
    st.lists(st.integers(2, 4), min_size=0, max_size=3),
    st.integers(1, 4),
)


class TestGroupIndexing:
    @given(topologies)
    def test_groups_nondecreasing_and_surjective(self, topo):
        for level in range(topo.num_levels):
            groups = topo.level_group_counts[level]
            ids = [topo.group_of_expert(e, groups) for e in range(topo.experts)]
            assert ids == sorted(ids)
            assert set(ids) == set(range(groups))

    @given(topologies)
    def test_finer_levels_refine_coarser(self, topo):
        u = topo.level_group_counts
        for i in range(topo.num_levels):
            for j in range(i + 1, topo.num_levels):
                for e in range(topo.experts):
                    assert (topo.group_of_expert(e, u[i])
                            == topo.group_of_expert(e, u[j]) * u[i] // u[j])

    @given(topologies)
    def test_gpu_groups_refine_every_level(self, topo):
        for level in range(topo.num_levels):
            groups = topo.level_group_counts[level]
            for e in range(topo.experts):
                assert (topo.group_of_expert(e, groups)
                        == topo.gpu_of_expert(e) * groups // topo.num_gpus)


class TestFitParams:
    def test_two_points_determine_the_line(self):
        fit = fit_params([Measurement(0, 0.5), Measurement(10**6, 1.029)])
        assert fit.alpha == pytest.approx(0.5, abs=1e-12)
        assert fit.beta == pytest.approx(5.29e-7, rel=1e-9)
        assert not fit.negative_beta

    def test_exact_line_has_unit_r_squared(self):
        series = [Measurement(b, 0.1 + 1e-8 * b)
                  for b in np.linspace(0, 5e8, 50).astype(int)]
        fit = fit_params(series)
        assert fit.alpha == pytest.approx(0.1, rel=1e-9)
        assert fit.beta == pytest.approx(1e-8, rel=1e-9)
        assert abs(fit.r_squared - 1.0) < 1e-9

    def test_negative_slope_is_flagged(self):
        fit = fit_params([Measurement(0, 2.0), Measurement(100, 1.0)])
        assert fit.negative_beta
        assert fit.beta < 0

    def test_too_few_points(self):
        with pytest.raises(FitError):
            fit_params([Measurement(0, 1.0)])

    def test_degenerate_byte_sizes(self):
        with pytest.raises(FitError):
            fit_params([Measurement(5, 1.0), Measurement(5, 2.0)])

    @given(st.floats(0.01, 10), st.floats(1e-9, 1e-6),
           st.integers(3, 30), st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_recovers_noise_free_lines(self, alpha, beta, n, seed):
        rng = np.random.default_rng(seed)
        xs = np.sort(rng.choice(np.arange(0, 10**9, 997), size=n, replace=False))
        series = [Measurement(int(x), float(alpha + beta * x)) for x in xs]
        fit = fit_params(series)
        assert fit.alpha == pytest.approx(alpha, rel=1e-6, abs=1e-9)
        assert fit.beta == pytest.approx(beta, rel=1e-6)
        assert fit.r_squared > 1.0 - 1e-9


class TestFiles:
    def test_topology_roundtrip(self, tmp_path):
        topo = build_topology([4, 2, 2, 2], 128, 1024, 2)
        path = tmp_path / "topo.json"
        save_topology(topo, path)
        assert load_topology(path) == topo

    def test_topology_missing_key(self, tmp_path):
        path = tmp_path / "topo.json"
        path.write_text(json.dumps({"level_fanouts": [2]}))
        with pytest.raises(ConfigError):
            load_topology(path)

    def test_params_roundtrip(self, tmp_path):
        params = LevelParams(alpha_inter=(0.497, 0.301), beta_inter=(5.29e-7, 1.17e-7),
                             alpha_intra=(0.722, 0.571, 0.114),
                             beta_intra=(5.7e-7, 1.27e-7, 2.63e-8))
        path = tmp_path / "params.json"
        save_params(params, path, r_squared={"std": 0.9999})
        loaded = load_params(path)
        assert loaded == params
        assert json.loads(path.read_text())["std"]["r2"] == 0.9999

    def test_params_level_mismatch(self, tmp_path, config_dir):
        with pytest.raises(ConfigError):
            load_params(config_dir / "params_4x8.json", num_levels=2)

    def test_params_validation(self):
        with pytest.raises(ConfigError):
            LevelParams(alpha_inter=(0.1,), beta_inter=(0.0,),
                        alpha_intra=(0.1, 0.1), beta_intra=(1e-7, 1e-7))
        with pytest.raises(ConfigError):
            LevelParams(alpha_inter=(-0.1,), beta_inter=(1e-7,),
                        alpha_intra=(0.1, 0.1), beta_intra=(1e-7, 1e-7))

    def test_std_convention_aliases(self):
        params = LevelParams(alpha_inter=(0.4,), beta_inter=(2e-7,),
                             alpha_intra=(0.7, 0.5), beta_intra=(5e-7, 1e-7))
        assert params.alpha_std == params.intra(0)[0] == 0.7
        assert params.beta_std == params.intra(0)[1] == 5e-7

    def test_measurement_csv(self, tmp_path):
        path = tmp_path / "bench.csv"
        path.write_text("bytes,seconds\n0,0.5\n1000,0.6\n2000,0.7\n")
        series = load_measurements(path)
        assert [m.bytes for m in series] == [0, 1000, 2000]

    def test_measurement_csv_bad_header(self, tmp_path):
        path = tmp_path / "bench.csv"
        path.write_text("size,time\n0,0.5\n")
        with pytest.raises(FitError):
            load_measurements(path)

    def test_measurement_csv_not_increasing(self, tmp_path):
        path = tmp_path / "bench.csv"
        path.write_text("bytes,seconds\n1000,0.5\n1000,0.6\n")
        with pytest.raises(FitError):
            load_measurements(path)
