"""Single-convolution cost rows and whole-model accounting."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from elastic_cnn.arch import PRESETS, get_preset, selastic_transform
from elastic_cnn.cost import (
    METHODS, CostQuery, compare_methods, measure_flops, model_cost, random_query, table1_cost,
    verify_elastic_bound,
)
from elastic_cnn.errors import InputError
from elastic_cnn.network import build


def hand_resnext50():
    """Independent count for ResNeXt-50 (32x4d) at 224px, BN affine included."""
    params = 3 * 64 * 49 + 2 * 64
    flops = 3 * 64 * 49 * 112 * 112
    cin = 64
    for s, (n, width, cout, res) in enumerate(
            zip((3, 4, 6, 3), (128, 256, 512, 1024), (256, 512, 1024, 2048), (56, 28, 14, 7))):
        for b in range(n):
            convs = [cin * width, width * (width // 32) * 9, width * cout]
            if b == 0:
                convs.append(cin * cout)
            params += sum(convs) + 2 * (width + width + cout) + (2 * cout if b == 0 else 0)
            flops += sum(convs) * res * res
            if b == 0 and s > 0:
                # the stride sits on the 3x3, so the entry 1x1 sees the previous resolution
                flops += cin * width * (4 * res * res - res * res)
            cin = cout
    params += 2048 * 1000 + 1000
    flops += 2048 * 1000
    return params, flops


class TestTable1:
    def test_elastic_two_branch(self):
        n, c, k = 56, 64, 3
        flops, params = table1_cost(CostQuery("elastic", n, c, k, 2, (2, 2), (1, 2)))
        assert flops == Fraction(5, 8) * n * n * c * k * k
        assert params == c * k * k

    def test_degenerate_elastic_equals_single(self):
        assert table1_cost(CostQuery("elastic", 9, 5, 3)) == table1_cost(CostQuery("single", 9, 5, 3))

    def test_filter_pyramid_standard(self):
        n, c, k = 10, 4, 3
        flops, params = table1_cost(CostQuery("filter_pyramid_standard", n, c, k, 2, (2, 2), (1, 2)))
        assert flops == Fraction(5, 2) * n * n * c * k * k
        assert params == Fraction(5, 2) * c * k * k
        assert flops >= table1_cost(CostQuery("single", n, c, k))[0]

    def test_six_rows(self):
        rows = compare_methods(56, 64, 3, 2, (2, 2), (1, 2))
        assert [r[0] for r in rows] == list(METHODS)
        single = 56 * 56 * 64 * 9
        expected = {
            "single": (single, 576), "feature_pyramid_concat": (2 * single, 1152),
            "feature_pyramid_add": (single, 576), "filter_pyramid_standard": (Fraction(5, 2) * single, 1440),
            "filter_pyramid_dilated": (single, 576), "elastic": (Fraction(5, 8) * single, 576),
        }
        assert {m: (f, p) for m, f, p in rows} == expected

    @pytest.mark.parametrize("kwargs", [
        dict(q=2, b=(2,), r=(1, 2)),
        dict(q=2, b=(3, 3), r=(1, 2)),
        dict(q=2, b=(1, 1), r=(1, 1)),
        dict(q=1, b=(1,), r=(0,)),
        dict(q=0, b=(), r=()),
    ])
    def test_invalid_queries(self, kwargs):
        with pytest.raises(InputError):
            CostQuery("elastic", 8, 8, 3, **kwargs)

    def test_unknown_method(self):
        with pytest.raises(InputError, match="unknown method"):
            CostQuery("image_pyramid", 8, 8, 3)

    @given(seed=st.integers(0, 2**32 - 1))
    def test_bound_property(self, seed):
        q = random_query(np.random.default_rng(seed))
        ef, ep = table1_cost(q)
        sf, sp = table1_cost(CostQuery("single", q.n, q.c, q.k))
        assert ep == sp
        assert ef <= sf
        assert (ef == sf) == all(r == 1 for r in q.r)

    def test_one_ratio_two_is_strict(self):
        ef, _ = table1_cost(CostQuery("elastic", 7, 3, 3, 3, (3, 3, 3), (1, 1, 2)))
        assert ef < table1_cost(CostQuery("single", 7, 3, 3))[0]

    def test_verifier_reports_counterexamples(self, monkeypatch):
        from elastic_cnn import cost

        real = cost.table1_cost
        # a cost function that forgets the 1/b_i weighting must be caught
        monkeypatch.setattr(cost, "table1_cost", lambda q: (real(q)[0] * q.q, real(q)[1]))
        report = cost.verify_elastic_bound(
            lambda rng: CostQuery("elastic", 4, 4, 3, 2, (2, 2), (1, 1)), trials=5)
        assert not report.passed and len(report.counterexamples) == 5

    def test_verifier_small(self):
        report = verify_elastic_bound(trials=500, seed=7)
        assert report.passed and report.trials == 500


class TestModelCost:
    def test_resnext50_against_hand_count(self):
        report = model_cost(get_preset("resnext50"))
        assert (report.total_params, report.total_flops) == hand_resnext50()

    @pytest.mark.parametrize("name,params_m,flops_b", [
        ("resnext50", 25.0, 4.2),
        ("resnext50_elastic", 25.2, 4.2),
        ("resnext50_selastic", 25.0, 3.4),
        ("densenet201", 20.0, 4.4),
        ("densenet201_elastic", 19.5, 4.3),
    ])
    def test_reported_sizes(self, name, params_m, flops_b):
        report = model_cost(get_preset(name))
        assert report.total_params / 1e6 == pytest.approx(params_m, rel=0.02)
        assert report.total_flops / 1e9 == pytest.approx(flops_b, rel=0.05)

    @pytest.mark.parametrize("name", ["resnext50", "densenet201_elastic", "toy_resnext_8_elastic"])
    def test_totals_are_exact_sums(self, name):
        report = model_cost(get_preset(name))
        assert isinstance(report.total_flops, int)
        assert report.total_flops == sum(l.flops for l in report.per_layer)
        assert report.total_params == sum(l.params for l in report.per_layer)
        csv = report.to_csv().splitlines()
        assert csv[0] == "layer,kind,flops,params" and len(csv) == len(report.per_layer) + 1

    @pytest.mark.parametrize("name", [n for n in sorted(PRESETS) if n.startswith("toy")])
    def test_symbolic_matches_executed(self, name):
        spec = get_preset(name)
        net = build(spec)
        assert measure_flops(net) == model_cost(spec).total_flops
        assert measure_flops(net, 64) == model_cost(spec, 64).total_flops

    def test_resolution_scaling(self):
        spec = get_preset("toy_resnext_8_elastic")
        f32 = model_cost(spec).total_flops
        assert model_cost(spec, 16).total_flops / f32 == pytest.approx(0.25, rel=0.02)
        assert model_cost(spec, 64).total_flops / f32 == pytest.approx(4.0, rel=0.02)

    def test_selastic_strictly_cheaper(self):
        base = get_preset("resnext101")
        assert model_cost(selastic_transform(base)).total_flops < model_cost(base).total_flops
