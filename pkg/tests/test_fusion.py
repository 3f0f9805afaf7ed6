"""Tests for per-layer adapter selection and the static fusion baselines."""

import math
from pathlib import Path

import numpy as np
import pytest

from lorafuse.core.model import (
    AdapterLayer,
    DenoiserModel,
    LinearLayer,
    LoRAAdapter,
    time_embedding,
)
from lorafuse.core.numerics import Tensor
from lorafuse.modules.fusion import (
    TRACE_HEADER,
    Choice,
    Criterion,
    FusionPolicy,
    LayerSelection,
    LoRAFusion,
    PolicyKind,
    SelectionTrace,
    batch_decision,
    branch_features,
    divergence,
    fused_forward,
    magnitude_score,
    select_layer,
    top_k_default,
)
from lorafuse.utils.validators import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    TraceParseError,
    ValidationError,
)


def np_softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def np_kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))


def np_silu(v: np.ndarray) -> np.ndarray:
    return v / (1.0 + np.exp(-v))


@pytest.fixture
def witness() -> tuple[DenoiserModel, LoRAAdapter, LoRAAdapter]:
    """One zero layer with rank-1 adapters reading opposite input coordinates.

    The content update copies x[0] into output 0 and the style update copies
    x[1], so whichever coordinate is larger makes its branch move further
    from the (uniform) base feature.
    """
    model = DenoiserModel(
        layers=(LinearLayer(w0=Tensor.zeros((2, 4)), bias=Tensor.zeros((2,))),),
        time_embed_dim=2,
    )
    up = Tensor([[1.0], [0.0]])
    content = LoRAAdapter(
        layers={0: AdapterLayer(down=Tensor([[1.0, 0.0, 0.0, 0.0]]), up=up, alpha=1.0)},
        name="content",
    )
    style = LoRAAdapter(
        layers={0: AdapterLayer(down=Tensor([[0.0, 1.0, 0.0, 0.0]]), up=up, alpha=1.0)},
        name="style",
    )
    return model, content, style


class TestFusionPolicy:
    """Test suite for policy construction."""

    def test_labels(self) -> None:
        """Test the short report labels."""
        assert FusionPolicy.base_only().label == "base"
        assert FusionPolicy.direct_merge().label == "merge(1,1)"
        assert FusionPolicy.kl_select("js").label == "select[js]"
        assert FusionPolicy.magnitude_top_k().label == "topk"
        assert FusionPolicy.magnitude_top_k(5).label == "topk(5)"

    def test_strings_are_coerced(self) -> None:
        """Test that kind and criterion accept their string values."""
        policy = FusionPolicy("kl", criterion="cosine")
        assert policy.kind is PolicyKind.KL
        assert policy.criterion is Criterion.COSINE

    def test_invalid_parameters(self) -> None:
        """Test validation of k, temperature and the criterion name."""
        with pytest.raises(ValidationError):
            FusionPolicy.magnitude_top_k(0)
        with pytest.raises(ValidationError):
            FusionPolicy.kl_select(temperature=0.0)
        with pytest.raises(ValueError):
            FusionPolicy.kl_select("hellinger")


class TestBranchFeatures:
    """Test suite for computing the three branch outputs of a layer."""

    def test_missing_deltas_equal_base(self) -> None:
        """Test that absent updates give the base feature for both branches."""
        layer = LinearLayer(w0=Tensor([[1.0, 2.0]]), bias=Tensor([0.5]))
        base, content, style = branch_features(layer, None, None, Tensor([1.0, 1.0]))
        assert base.data[0] == content.data[0] == style.data[0] == 3.5

    def test_matches_three_products(self) -> None:
        """Test against three independent matrix-vector products."""
        rng = np.random.default_rng(0)
        w0, b = rng.normal(size=(3, 4)), rng.normal(size=3)
        dc, ds = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        x = rng.normal(size=4)
        layer = LinearLayer(w0=Tensor(w0), bias=Tensor(b))
        base, content, style = branch_features(layer, Tensor(dc), Tensor(ds), Tensor(x))
        np.testing.assert_allclose(base.data, w0 @ x + b, atol=1e-12)
        np.testing.assert_allclose(content.data, (w0 + dc) @ x + b, atol=1e-12)
        np.testing.assert_allclose(style.data, (w0 + ds) @ x + b, atol=1e-12)


class TestDivergence:
    """Test suite for the branch-change scores."""

    @pytest.mark.parametrize("criterion", ["kl", "js", "cosine"])
    def test_unchanged_feature_scores_zero(self, criterion: str) -> None:
        """Test that d(f, f) == 0."""
        f = Tensor([0.3, -1.2, 2.0, 0.0])
        assert divergence(criterion, f, f) == pytest.approx(0.0, abs=1e-12)

    def test_kl_matches_oracle(self) -> None:
        """Test KL on softmaxed features against plain numpy for random pairs."""
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b = rng.normal(size=6), rng.normal(size=6)
            expected = np_kl(np_softmax(a), np_softmax(b))
            assert divergence("kl", Tensor(a), Tensor(b)) == pytest.approx(expected, abs=1e-12)

    def test_kl_shift_invariant(self) -> None:
        """Test that a constant offset on both features changes nothing."""
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert divergence("kl", Tensor(a + 4.0), Tensor(b + 4.0)) == pytest.approx(
            divergence("kl", Tensor(a), Tensor(b)), abs=1e-12
        )

    def test_kl_permutation_invariant(self) -> None:
        """Test that permuting both features jointly changes nothing."""
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=8), rng.normal(size=8)
        perm = rng.permutation(8)
        assert divergence("kl", Tensor(a[perm]), Tensor(b[perm])) == pytest.approx(
            divergence("kl", Tensor(a), Tensor(b)), abs=1e-12
        )

    def test_temperature_sharpens(self) -> None:
        """Test that temperature rescales the logits before softmax."""
        a, b = np.array([1.0, 0.0]), np.array([0.0, 0.0])
        expected = np_kl(np_softmax(a / 0.5), np_softmax(b / 0.5))
        assert divergence("kl", Tensor(a), Tensor(b), temperature=0.5) == pytest.approx(expected, abs=1e-12)

    def test_js_is_symmetric_and_bounded(self) -> None:
        """Test JS(p, q) == JS(q, p) <= ln 2."""
        a, b = Tensor([5.0, -5.0, 0.0]), Tensor([-5.0, 5.0, 0.0])
        forward = divergence("js", a, b)
        assert forward == pytest.approx(divergence("js", b, a), abs=1e-15)
        assert 0.0 < forward <= math.log(2)

    def test_cosine_and_dot(self) -> None:
        """Test 1 - cos and the negated inner product."""
        assert divergence("cosine", Tensor([1.0, 0.0]), Tensor([0.0, 1.0])) == pytest.approx(1.0)
        assert divergence("dot", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])) == -11.0

    def test_cosine_zero_feature(self) -> None:
        """Test that a zero feature is degenerate under cosine."""
        with pytest.raises(DegenerateInputError):
            divergence("cosine", Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    def test_shape_mismatch(self) -> None:
        """Test that features must be equal-length vectors."""
        with pytest.raises(DimensionError):
            divergence("kl", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


class TestSelection:
    """Test suite for the per-layer decision rule."""

    def test_larger_change_wins(self) -> None:
        """Test the comparison in both directions."""
        assert select_layer(0.5, 0.2) is Choice.CONTENT
        assert select_layer(0.2, 0.5) is Choice.STYLE

    def test_tie_prefers_content(self) -> None:
        """Test that equal scores pick Content."""
        assert select_layer(0.3, 0.3) is Choice.CONTENT
        assert select_layer(0.0, 0.0) is Choice.CONTENT

    def test_nan_rejected(self) -> None:
        """Test that a NaN score raises ContractError."""
        with pytest.raises(ContractError):
            select_layer(float("nan"), 0.1)

    def test_batch_uses_means(self) -> None:
        """Test that the batch decision compares mean scores."""
        choice, d_c, d_s = batch_decision([(1.0, 0.0), (0.0, 0.7), (0.2, 0.7)])
        assert choice is Choice.STYLE
        assert d_c == pytest.approx(0.4)
        assert d_s == pytest.approx(1.4 / 3)
        assert batch_decision([(1.0, 0.0), (0.0, 0.9)])[0] is Choice.CONTENT

    def test_empty_batch(self) -> None:
        """Test that an empty batch raises ContractError."""
        with pytest.raises(ContractError):
            batch_decision([])


class TestMagnitudeScore:
    """Test suite for the input-independent top-k baseline."""

    def test_default_k(self) -> None:
        """Test 1% of the entries, at least 8, at most all of them."""
        assert top_k_default(5) == 5
        assert top_k_default(64) == 8
        assert top_k_default(10000) == 100

    def test_sum_of_largest(self) -> None:
        """Test the sum of the k largest absolute entries."""
        assert magnitude_score(Tensor([[3.0, -4.0], [1.0, 0.0]]), k=2) == 7.0
        assert magnitude_score(None) == 0.0


class TestLoRAFusion:
    """Test suite for fused noise prediction."""

    def test_selection_matches_layerwise_oracle(
        self, small_model: DenoiserModel, adapter_pair: tuple[LoRAAdapter, LoRAAdapter]
    ) -> None:
        """Test KL selection against a plain-numpy re-evaluation, layer by layer."""
        adapter_c, adapter_s = adapter_pair
        x = np.random.default_rng(4).normal(size=small_model.input_dim)
        t = 300
        row: list[LayerSelection] = []
        out = fused_forward(
            small_model, adapter_c, adapter_s, FusionPolicy.kl_select(), Tensor(x), t, row
        ).data

        h = np.concatenate([x, time_embedding(t, small_model.time_embed_dim).data])
        expected_choices = []
        last = len(small_model.layers) - 1
        for i, layer in enumerate(small_model.layers):
            w0, b = layer.w0.data, layer.bias.data
            base = w0 @ h + b
            content = (w0 + adapter_c.delta(i).data) @ h + b
            style = (w0 + adapter_s.delta(i).data) @ h + b
            d_c = np_kl(np_softmax(content), np_softmax(base))
            d_s = np_kl(np_softmax(style), np_softmax(base))
            pick_content = d_c >= d_s
            expected_choices.append(Choice.CONTENT if pick_content else Choice.STYLE)
            h = content if pick_content else style
            if i < last:
                h = np_silu(h)

        assert [s.choice for s in row] == expected_choices
        assert [s.layer for s in row] == list(small_model.adapted_layer_indices)
        np.testing.assert_allclose(out, h, atol=1e-10)

    def test_zero_style_adapter_always_picks_content(
        self,
        small_model: DenoiserModel,
        adapter_pair: tuple[LoRAAdapter, LoRAAdapter],
        zero_adapter: LoRAAdapter,
    ) -> None:
        """Test that a no-op style adapter makes selection equal ContentOnly bitwise."""
        adapter_c, _ = adapter_pair
        x = Tensor(np.random.default_rng(5).normal(size=small_model.input_dim))
        row: list[LayerSelection] = []
        selected = fused_forward(
            small_model, adapter_c, zero_adapter, FusionPolicy.kl_select(), x, 500, row
        )
        content_only = fused_forward(
            small_model, adapter_c, zero_adapter, FusionPolicy.content_only(), x, 500
        )
        assert all(s.choice is Choice.CONTENT for s in row)
        assert all(s.d_s == 0.0 for s in row)
        np.testing.assert_array_equal(selected.data, content_only.data)

    def test_merge_with_zero_style_weight_is_content_only(
        self, small_model: DenoiserModel, adapter_pair: tuple[LoRAAdapter, LoRAAdapter]
    ) -> None:
        """Test DirectMerge(1, 0) == ContentOnly."""
        adapter_c, adapter_s = adapter_pair
        x = Tensor(np.random.default_rng(6).normal(size=small_model.input_dim))
        merged = fused_forward(small_model, adapter_c, adapter_s, FusionPolicy.direct_merge(1.0, 0.0), x, 50)
        content = fused_forward(small_model, adapter_c, adapter_s, FusionPolicy.content_only(), x, 50)
        np.testing.assert_allclose(merged.data, content.data, atol=1e-10)

    def test_merge_adds_weighted_updates(
        self, small_model: DenoiserModel, adapter_pair: tuple[LoRAAdapter, LoRAAdapter]
    ) -> None:
        """Test DirectMerge against explicit summed weight updates."""
        adapter_c, adapter_s = adapter_pair
        x = Tensor(np.random.default_rng(7).normal(size=small_model.input_dim))
        deltas = {
            i: Tensor(0.7 * adapter_c.delta(i).data + 0.4 * adapter_s.delta(i).data)
            for i in small_model.adapted_layer_indices
        }
        merged = fused_forward(small_model, adapter_c, adapter_s, FusionPolicy.direct_merge(0.7, 0.4), x, 80)
        np.testing.assert_allclose(merged.data, small_model.predict_epsilon(x, 80, deltas).data, atol=1e-10)

    def test_base_policy_needs_no_adapters(self, small_model: DenoiserModel) -> None:
        """Test that BaseOnly equals the plain model and records nothing."""
        x = Tensor(np.random.default_rng(8).normal(size=small_model.input_dim))
        row: list[LayerSelection] = []
        out = fused_forward(small_model, None, None, FusionPolicy.base_only(), x, 10, row)
        np.testing.assert_array_equal(out.data, small_model.forward(x, 10).data)
        assert row == []

    def test_missing_adapter_rejected(
        self, small_model: DenoiserModel, adapter_pair: tuple[LoRAAdapter, LoRAAdapter]
    ) -> None:
        """Test that a selecting policy needs both adapters."""
        with pytest.raises(ValidationError):
            LoRAFusion(small_model, adapter_pair[0], None, FusionPolicy.kl_select())
        LoRAFusion(small_model, adapter_pair[0], None, FusionPolicy.content_only())

    def test_incompatible_adapter_rejected(
        self, small_model: DenoiserModel, adapter_pair: tuple[LoRAAdapter, LoRAAdapter]
    ) -> None:
        """Test that an adapter for another architecture is rejected up front."""
        other = DenoiserModel.initialize(
            input_dim=64, hidden_width=10, hidden_layers=2, time_embed_dim=8, seed=1
        )
        foreign = LoRAAdapter.initialize(other, rank=2, name="foreign")
        with pytest.raises(ValidationError, match="foreign"):
            LoRAFusion(small_model, adapter_pair[0], foreign, FusionPolicy.kl_select())

    def test_frozen_decisions_reproduce_prediction(
        self, small_model: DenoiserModel, adapter_pair: tuple[LoRAAdapter, LoRAAdapter]
    ) -> None:
        """Test that replaying recorded decisions gives the same output."""
        fusion = LoRAFusion(small_model, *adapter_pair, FusionPolicy.kl_select())
        x = Tensor(np.random.default_rng(9).normal(size=small_model.input_dim))
        row: list[LayerSelection] = []
        live = fusion.predict(x, 200, row)
        replay = fusion.predict(x, 200, frozen=row)
        np.testing.assert_array_equal(live.data, replay.data)
        with pytest.raises(ContractError):
            fusion.predict(x, 200, frozen=row[:1])

    def test_batch_shares_one_decision_per_layer(
        self, small_model: DenoiserModel, adapter_pair: tuple[LoRAAdapter, LoRAAdapter]
    ) -> None:
        """Test that a batch of copies decides like a single sample."""
        fusion = LoRAFusion(small_model, *adapter_pair, FusionPolicy.kl_select())
        x = np.random.default_rng(10).normal(size=small_model.input_dim)
        single: list[LayerSelection] = []
        batched: list[LayerSelection] = []
        fusion.predict(Tensor(x), 400, single)
        out = fusion.predict(Tensor(np.stack([x, x, x])), 400, batched)
        assert out.shape == (3, small_model.input_dim)
        assert [s.choice for s in batched] == [s.choice for s in single]
        for a, b in zip(batched, single):
            assert a.d_c == pytest.approx(b.d_c, rel=1e-12)

    def test_selection_depends_on_input(
        self, witness: tuple[DenoiserModel, LoRAAdapter, LoRAAdapter]
    ) -> None:
        """Test that two inputs get different branches while TopK cannot tell them apart."""
        model, content, style = witness
        fusion = LoRAFusion(model, content, style, FusionPolicy.kl_select())
        first: list[LayerSelection] = []
        second: list[LayerSelection] = []
        fusion.predict(Tensor([3.0, 0.5]), 10, first)
        fusion.predict(Tensor([0.5, 3.0]), 10, second)
        assert first[0].choice is Choice.CONTENT
        assert second[0].choice is Choice.STYLE

        topk = fusion.with_policy(FusionPolicy.magnitude_top_k())
        first_k: list[LayerSelection] = []
        second_k: list[LayerSelection] = []
        topk.predict(Tensor([3.0, 0.5]), 10, first_k)
        topk.predict(Tensor([0.5, 3.0]), 10, second_k)
        assert [s.choice for s in first_k] == [s.choice for s in second_k] == [Choice.CONTENT]
        assert topk.static_selections[0].d_c == topk.static_selections[0].d_s == 1.0


class TestSelectionTrace:
    """Test suite for the step x layer decision record."""

    @pytest.fixture
    def trace(self) -> SelectionTrace:
        trace = SelectionTrace()
        trace.append([LayerSelection(0, Choice.CONTENT, 0.5, 0.25), LayerSelection(1, Choice.STYLE, 0.1, 0.3)])
        trace.append([LayerSelection(0, Choice.CONTENT, 0.7, 0.2), LayerSelection(1, Choice.CONTENT, 0.4, 0.3)])
        return trace

    def test_csv_header_and_rows(self, trace: SelectionTrace) -> None:
        """Test the CSV layout."""
        lines = trace.to_csv_text().splitlines()
        assert lines[0] == ",".join(TRACE_HEADER)
        assert lines[1] == "0,0,C,0.5,0.25"
        assert len(lines) == 5

    def test_csv_round_trip(self, tmp_path: Path, trace: SelectionTrace) -> None:
        """Test that written traces read back identically."""
        path = trace.write_csv(tmp_path / "run" / "trace.csv")
        assert SelectionTrace.read_csv(path).rows == trace.rows

    def test_frequencies(self, trace: SelectionTrace) -> None:
        """Test per-layer Content and Style shares."""
        freq = {f.layer: f for f in trace.frequencies()}
        assert freq[0].content == 1.0 and freq[0].style == 0.0
        assert freq[1].content == 0.5 and freq[1].style == 0.5
        assert freq[1].count == 2

    def test_matrix(self, trace: SelectionTrace) -> None:
        """Test the 1/0 decision matrix."""
        np.testing.assert_array_equal(trace.matrix(), [[1, 0], [1, 1]])

    def test_completeness(self, trace: SelectionTrace) -> None:
        """Test that every row must cover exactly the given layers."""
        assert trace.is_complete([0, 1])
        assert not trace.is_complete([0, 1, 2])
        assert trace.selection_count() == 4

    def test_bad_choice_reports_line(self) -> None:
        """Test that a malformed row is reported with its line number."""
        text = "step,layer,choice,d_c,d_s\n0,0,C,0.5,0.25\n0,1,X,0.1,0.2\n"
        with pytest.raises(TraceParseError, match="line 3") as info:
            SelectionTrace.from_csv_text(text)
        assert info.value.line == 3

    def test_bad_header(self) -> None:
        """Test that a wrong header is reported on line 1."""
        with pytest.raises(TraceParseError, match="line 1"):
            SelectionTrace.from_csv_text("a,b,c\n0,0,C,0.1,0.2\n")

    def test_wrong_field_count(self) -> None:
        """Test that short rows are rejected."""
        with pytest.raises(TraceParseError, match="line 2"):
            SelectionTrace.from_csv_text("step,layer,choice,d_c,d_s\n0,0,C,0.1\n")

    def test_non_finite_value(self) -> None:
        """Test that NaN scores are rejected."""
        with pytest.raises(TraceParseError, match="line 2"):
            SelectionTrace.from_csv_text("step,layer,choice,d_c,d_s\n0,0,C,nan,0.1\n")

    def test_duplicate_cell(self) -> None:
        """Test that one layer cannot be decided twice in a step."""
        text = "step,layer,choice,d_c,d_s\n0,0,C,0.5,0.25\n0,0,S,0.1,0.2\n"
        with pytest.raises(TraceParseError, match="line 3"):
            SelectionTrace.from_csv_text(text)

    def test_empty_text(self) -> None:
        """Test that an empty file is rejected."""
        with pytest.raises(TraceParseError):
            SelectionTrace.from_csv_text("")

