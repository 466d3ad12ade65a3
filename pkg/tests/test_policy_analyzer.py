"""Scale-policy scores, traces, aggregation and CSV interchange."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from elastic_cnn import ops
from elastic_cnn.arch import get_preset
from elastic_cnn.errors import InputError, UsageError
from elastic_cnn.network import build
from elastic_cnn.policy import (
    PolicyTrace, aggregate, block_scale_score, block_scale_scores, export_traces, format_aggregate,
    import_traces, trace_batch, trace_image,
)
from elastic_cnn.tensor import DTYPE, Tensor


def loop_score(high, low):
    """Brute-force triple sum over (c, y, x), one image."""
    c, h, w = low.shape
    hi = 0.0
    for k in range(c):
        for y in range(2 * h):
            for x in range(2 * w):
                hi += float(high[k, y, x])
    lo = 0.0
    for k in range(c):
        for y in range(h):
            for x in range(w):
                lo += float(low[k, y, x])
    return hi / (4 * h * w * c) - lo / (h * w * c)


@pytest.fixture(scope="module")
def toy_net():
    net = build(get_preset("toy_resnext_8_elastic"), seed=5)
    net.eval()
    return net


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(9).standard_normal((6, 3, 32, 32)).astype(DTYPE)


class TestScore:
    def test_zeros(self):
        assert block_scale_score(np.zeros((4, 6, 6)), np.zeros((4, 3, 3))) == 0.0

    @given(a=st.floats(0, 50), b=st.floats(0, 50), c=st.integers(1, 4), h=st.integers(1, 5))
    def test_constant_fields(self, a, b, c, h):
        high = np.full((c, 2 * h, 2 * h), a, dtype=DTYPE)
        low = np.full((c, h, h), b, dtype=DTYPE)
        assert block_scale_score(high, low) == float(DTYPE(a)) - float(DTYPE(b))

    @given(c=st.integers(1, 4), h=st.integers(1, 5), w=st.integers(1, 5), seed=st.integers(0, 2**31))
    def test_matches_loop_oracle(self, c, h, w, seed):
        r = np.random.default_rng(seed)
        high = np.maximum(r.standard_normal((c, 2 * h, 2 * w)), 0).astype(DTYPE)
        low = np.maximum(r.standard_normal((c, h, w)), 0).astype(DTYPE)
        assert block_scale_score(Tensor(high), Tensor(low)) == pytest.approx(loop_score(high, low), abs=1e-6)

    @given(delta=st.floats(-3, 3), seed=st.integers(0, 2**31))
    def test_shift_response(self, delta, seed):
        r = np.random.default_rng(seed)
        high = r.random((3, 4, 6))
        low = r.random((3, 2, 3))
        shifted = block_scale_score(high + delta, low)
        assert shifted - block_scale_score(high, low) == pytest.approx(delta, abs=1e-9)

    def test_batch_is_per_sample(self, rng):
        high = rng.random((5, 2, 4, 4))
        low = rng.random((5, 2, 2, 2))
        batch = block_scale_scores(high, low)
        assert batch.shape == (5,)
        for i in range(5):
            assert batch[i] == pytest.approx(loop_score(high[i], low[i]), abs=1e-12)

    @pytest.mark.parametrize("hs,ls", [
        ((2, 4, 4), (2, 3, 3)),
        ((2, 4, 4), (3, 2, 2)),
        ((2, 4, 5), (2, 2, 2)),
        ((4, 4), (2, 2)),
    ])
    def test_shape_violations(self, hs, ls):
        with pytest.raises(InputError):
            block_scale_score(np.zeros(hs), np.zeros(ls))

    def test_single_image_only(self):
        with pytest.raises(InputError, match="one image"):
            block_scale_score(np.zeros((2, 1, 4, 4)), np.zeros((2, 1, 2, 2)))


class TestTrace:
    def test_resnext50_elastic_has_17_scores(self):
        net = build(get_preset("resnext50_elastic", num_classes=10), seed=0)
        img = np.random.default_rng(0).standard_normal((3, 64, 64)).astype(DTYPE)
        trace = trace_image(net, img, "img0")
        assert len(trace.scores) == 17
        assert all(np.isfinite(trace.scores))
        assert 0 <= trace.prediction < 10

    def test_identical_images_identical_traces(self, toy_net, images):
        batch = np.stack([images[0], images[0]])
        a, b = trace_batch(toy_net, batch, ["a", "b"])
        assert a.scores == b.scores
        assert trace_image(toy_net, images[0]).scores == a.scores

    def test_trace_length_invariant(self, toy_net, images):
        traces = trace_batch(toy_net, images, [str(i) for i in range(len(images))])
        assert {len(t.scores) for t in traces} == {len(toy_net.elastic_blocks())}

    def test_capture_matches_instrumented_forward(self, toy_net, images):
        x = Tensor(images[:2])
        toy_net.set_capture(True)
        try:
            toy_net(x)
            block = toy_net.elastic_blocks()[0]
            captured = [b.captured.data.copy() for b in block.branches]
        finally:
            toy_net.set_capture(False)
        # recompute the first Elastic block's inner activations by hand
        z = ops.relu(toy_net.stem_bn(toy_net.stem_conv(x)))
        for br, cap in zip(block.branches, captured):
            y = z if br.scale_ratio == 1 else ops.avg_pool2(z)
            y = ops.relu(br.bn1(br.conv1(y)))
            y = ops.relu(br.bn2(br.conv2(y)))
            assert y.data.tobytes() == cap.tobytes()

    def test_forced_zero_low_branch(self, images):
        net = build(get_preset("toy_resnext_8_elastic"), seed=2)
        for block in net.elastic_blocks():
            low = next(b for b in block.branches if b.scale_ratio == 2)
            low.bn2.params.gamma.data[:] = 0
            low.bn2.params.beta.data[:] = 0
        traces = trace_batch(net, images[:3], ["0", "1", "2"])
        net.set_capture(True)
        net.eval()
        net(Tensor(images[:3]))
        for k, block in enumerate(net.elastic_blocks()):
            high = next(b for b in block.branches if b.scale_ratio == 1).captured.data.astype(np.float64)
            means = high.reshape(3, -1).mean(axis=1)
            for i in range(3):
                assert traces[i].scores[k] == pytest.approx(means[i], rel=1e-6)
        net.set_capture(False)

    def test_restores_training_mode(self, images):
        net = build(get_preset("toy_resnext_8_elastic"))
        assert net.training
        trace_batch(net, images[:1], ["x"])
        assert net.training

    def test_non_elastic_network(self, images):
        with pytest.raises(UsageError, match="no Elastic blocks"):
            trace_image(build(get_preset("toy_resnext_8")), images[0])

    def test_densenet_rejected(self, images):
        with pytest.raises(UsageError):
            trace_image(build(get_preset("toy_densenet_8_elastic")), images[0])

    def test_id_count_mismatch(self, toy_net, images):
        with pytest.raises(InputError):
            trace_batch(toy_net, images[:2], ["only-one"])


def traces_fixture():
    r = np.random.default_rng(3)
    return [PolicyTrace(str(i), tuple(r.standard_normal(4)), int(i % 3), int(r.integers(3)))
            for i in range(100)]


class TestAggregate:
    def test_single_trace(self):
        t = PolicyTrace("a", (1.0, 2.0, 6.0), label=1)
        (row,) = aggregate([t])
        assert row.key == 1 and row.mean == pytest.approx(3.0) and row.count == 3

    def test_sorted_min_first(self):
        traces = [PolicyTrace("x", (5.0, 5.0), label=0), PolicyTrace("y", (-1.0, -1.0), label=1)]
        rows = aggregate(traces)
        assert [r.key for r in rows] == [1, 0]
        assert aggregate(list(reversed(traces))) == rows

    def test_category_means_flat_recompute(self):
        traces = traces_fixture()
        rows = {r.key: r.mean for r in aggregate(traces, "category")}
        for cat in range(3):
            flat = [s for t in traces if t.label == cat for s in t.scores]
            assert rows[cat] == pytest.approx(sum(flat) / len(flat), abs=1e-12)

    def test_block_grouping(self):
        traces = traces_fixture()
        rows = {r.key: r for r in aggregate(traces, "block")}
        assert sorted(rows) == [1, 2, 3, 4]
        assert rows[2].mean == pytest.approx(np.mean([t.scores[1] for t in traces]))
        assert rows[2].count == 100

    def test_prediction_fallback(self):
        (row,) = aggregate([PolicyTrace("a", (1.0,), None, 7)])
        assert row.key == 7

    def test_empty(self):
        assert aggregate([]) == []
        assert format_aggregate([]) == "category,mean_score,std,count\n"

    def test_bad_group(self):
        with pytest.raises(InputError):
            aggregate(traces_fixture(), "image")


class TestExport:
    def test_empty_is_header_only(self, tmp_path):
        path = tmp_path / "t.csv"
        export_traces([], path)
        assert path.read_text() == "image_id,label,prediction\n"

    def test_one_trace(self, tmp_path):
        path = tmp_path / "t.csv"
        export_traces([PolicyTrace("img", (0.123456789, -2.0), 1, 2)], path)
        lines = path.read_text().splitlines()
        assert lines == ["image_id,label,prediction,s_1,s_2", "img,1,2,0.123457,-2"]
        (back,) = import_traces(path)
        assert back.image_id == "img" and back.scores == (0.123457, -2.0)

    def test_round_trip_aggregate(self, tmp_path):
        traces = traces_fixture()
        path = tmp_path / "t.csv"
        export_traces(traces, path)
        back = import_traces(path)
        assert [t.image_id for t in back] == [t.image_id for t in traces]
        for a, b in zip(aggregate(traces), aggregate(back)):
            assert a.key == b.key
            assert a.mean == pytest.approx(b.mean, abs=1e-5)

    def test_io_error_names_path(self, tmp_path):
        target = tmp_path / "missing" / "t.csv"
        with pytest.raises(OSError, match="missing"):
            export_traces(traces_fixture(), target)
