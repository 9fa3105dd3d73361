import numpy as np
import pytest

from diep.data import (
    CalibrationSet,
    RedundancyEntry,
    RedundancySpec,
    TaskSpec,
    TokenSet,
    gen_task,
    ingest_text,
    init_model,
    load_jsonl,
    plant_redundancy,
    pretrain_toy,
    redundant_pruned_count,
    save_jsonl,
)
from diep.exceptions import CompatibilityError, SpecError
from diep.moe import CloneGroup, ModelConfig, model_forward

from conftest import tiny_model


class TestTask:
    def test_targets_follow_label_table(self, small_task):
        spec, (train, evaluation, calib) = small_task
        table = spec.label_table()
        for ds in (train, evaluation, calib):
            np.testing.assert_array_equal(ds.targets, table[ds.tokens])

    def test_one_domain_per_sequence(self, small_task):
        spec, (train, _, _) = small_task
        dom = spec.domain_of(train.tokens)
        assert np.all(dom == dom[:, :1])

    def test_shapes(self, small_task):
        spec, (train, evaluation, calib) = small_task
        assert train.tokens.shape == (spec.n_train, spec.seq_len)
        assert evaluation.tokens.shape == (spec.n_eval, spec.seq_len)
        assert isinstance(calib, CalibrationSet) and calib.n_samples == spec.n_calibration

    def test_deterministic(self):
        spec = TaskSpec(n_train=8, n_eval=8, n_calibration=8)
        a, b = gen_task(spec, 3), gen_task(spec, 3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.tokens, y.tokens)
        assert not np.array_equal(gen_task(spec, 4)[0].tokens, a[0].tokens)

    def test_splits_are_independent_streams(self):
        spec = TaskSpec(n_train=16, n_eval=16, n_calibration=16)
        train, evaluation, calib = gen_task(spec, 0)
        assert not np.array_equal(train.tokens, evaluation.tokens)
        assert not np.array_equal(evaluation.tokens, calib.tokens)

    def test_domains_disagree_on_labels(self):
        """Same in-domain content maps to different classes in different domains."""
        spec = TaskSpec(n_domains=4, vocab=64, classes=4)
        table = spec.label_table().reshape(4, 16)
        assert any(not np.array_equal(table[0], table[d]) for d in range(1, 4))

    @pytest.mark.parametrize("kw", [dict(vocab=10, n_domains=4), dict(classes=1), dict(seq_len=0), dict(n_domains=0)])
    def test_bad_spec(self, kw):
        with pytest.raises(SpecError):
            TaskSpec(**kw)

    def test_tokenset_shape_mismatch(self):
        with pytest.raises(CompatibilityError):
            TokenSet(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_empty_calibration(self):
        with pytest.raises(SpecError):
            CalibrationSet(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_batches_cover_every_sample_once(self, rng):
        ds = TokenSet(np.arange(20).reshape(10, 2), np.zeros((10, 2)))
        seen = np.concatenate([b.tokens[:, 0] for b in ds.batches(3, rng)])
        assert sorted(seen.tolist()) == list(range(0, 20, 2))

    def test_jsonl_round_trip(self, tmp_path, small_task):
        _, (_, _, calib) = small_task
        save_jsonl(calib, tmp_path / "c.jsonl")
        back = load_jsonl(tmp_path / "c.jsonl", CalibrationSet)
        np.testing.assert_array_equal(back.tokens, calib.tokens)
        np.testing.assert_array_equal(back.targets, calib.targets)


class TestPretrain:
    def test_loss_decreases_and_beats_chance(self, small_task):
        spec, (train, evaluation, _) = small_task
        model = init_model(ModelConfig(2, 4, 2, 8, spec.vocab, spec.classes), spec, 0)
        result = pretrain_toy(model, train, epochs=10, eval_set=evaluation)
        assert result.losses[-1] < result.losses[0]
        assert result.train_accuracy > 1.0 / spec.classes + 0.1

    def test_embedding_frozen_by_default(self, small_task):
        spec, (train, _, _) = small_task
        model = init_model(ModelConfig(1, 3, 2, 8, spec.vocab, spec.classes), spec, 0)
        out = pretrain_toy(model, train, epochs=1).model
        np.testing.assert_array_equal(out.embedding, model.embedding)
        assert not np.array_equal(out.head, model.head)

    def test_clones_stay_exact(self, planted_small):
        model = planted_small[0]
        group = model.clone_groups[0]
        src = model.layers[group.layer].experts[group.source].arrays()
        for c in group.clones:
            for name, arr in model.layers[group.layer].experts[c].arrays().items():
                np.testing.assert_array_equal(arr, src[name])

    def test_deterministic(self, small_task):
        spec, (train, _, _) = small_task
        model = init_model(ModelConfig(1, 3, 2, 8, spec.vocab, spec.classes), spec, 0)
        a = pretrain_toy(model, train, epochs=2, seed=5)
        b = pretrain_toy(model, train, epochs=2, seed=5)
        assert a.losses == b.losses

    def test_vocab_mismatch(self, small_task):
        _, (train, _, _) = small_task
        with pytest.raises(CompatibilityError):
            pretrain_toy(tiny_model(vocab=4), train, epochs=1)

    def test_init_model_spec_mismatch(self):
        with pytest.raises(CompatibilityError):
            init_model(ModelConfig(1, 2, 1, 4, 8, 3), TaskSpec(vocab=64))


class TestPlant:
    def test_exact_clone(self):
        model = plant_redundancy(tiny_model(n_experts=4), RedundancySpec((RedundancyEntry(1, 2, 2),)))
        lay = model.layers[1]
        assert model.clone_groups == (CloneGroup(1, 2, (0, 1), 0.0),)
        for c in (0, 1):
            np.testing.assert_array_equal(lay.experts[c].w_up, lay.experts[2].w_up)

    def test_explicit_targets(self):
        model = plant_redundancy(tiny_model(), RedundancySpec((RedundancyEntry(0, 0, 1, targets=(3,)),)))
        np.testing.assert_array_equal(model.layers[0].experts[3].w_down, model.layers[0].experts[0].w_down)

    def test_noisy_clone_scale(self):
        base = tiny_model(d_model=8, seed=1)
        model = plant_redundancy(base, RedundancySpec((RedundancyEntry(0, 0, 1, sigma=0.01),)), seed=2)
        diff = model.layers[0].experts[1].w_up - base.layers[0].experts[0].w_up
        assert 0.005 < diff.std() < 0.02

    def test_original_untouched(self):
        base = tiny_model()
        before = base.layers[0].experts[1].w_up.copy()
        plant_redundancy(base, RedundancySpec((RedundancyEntry(0, 0, 1),)))
        np.testing.assert_array_equal(base.layers[0].experts[1].w_up, before)

    @pytest.mark.parametrize("entry", [
        RedundancyEntry(5, 0, 1),
        RedundancyEntry(0, 9, 1),
        RedundancyEntry(0, 0, 4),
        RedundancyEntry(0, 0, -1),
        RedundancyEntry(0, 0, 1, targets=(0,)),
        RedundancyEntry(0, 0, 2, targets=(1,)),
    ])
    def test_bad_entries(self, entry):
        with pytest.raises(SpecError):
            plant_redundancy(tiny_model(), RedundancySpec((entry,)))

    def test_clone_does_not_change_outputs_when_routing_splits(self, rng):
        """With exact clones, the layer can drop one member without changing the
        function if both were routed: a sanity check of the fixture meaning."""
        model = plant_redundancy(tiny_model(n_layers=1, n_experts=3, top_k=1, seed=3),
                                 RedundancySpec((RedundancyEntry(0, 0, 1),)))
        e = model.layers[0].experts
        x = rng.normal(size=(5, 4))
        np.testing.assert_array_equal(e[0](x), e[1](x))

    def test_redundant_pruned_count(self):
        groups = [CloneGroup(0, 0, (1, 2), 0.0), CloneGroup(1, 3, (4,), 0.0)]
        assert redundant_pruned_count(groups, [(0, 1)]) == 1
        assert redundant_pruned_count(groups, [(0, 0), (0, 1), (0, 2)]) == 2
        assert redundant_pruned_count(groups, [(1, 3), (1, 4), (0, 5)]) == 1
        assert redundant_pruned_count(groups, []) == 0

    def test_spec_dict_round_trip(self):
        spec = RedundancySpec((RedundancyEntry(1, 0, 2, 0.1, (3, 4)),))
        assert RedundancySpec.from_dict(spec.to_dict()) == spec
        assert spec.clone_count == 2


class TestIngest:
    def test_next_token_targets(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_bytes(bytes(range(200)))
        ds = ingest_text(path, vocab=256, n_samples=4, seq_len=5, seed=1)
        np.testing.assert_array_equal(ds.targets[:, :-1], ds.tokens[:, 1:])
        assert np.all((ds.targets - ds.tokens) % 200 == 1)

    def test_vocab_folding(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_bytes(b"\xff" * 50)
        assert ingest_text(path, vocab=16, n_samples=2, seq_len=3).tokens.max() == 255 % 16

    def test_short_file_wraps_with_warning(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_bytes(b"abc")
        with pytest.warns(UserWarning, match="wrapping"):
            ds = ingest_text(path, vocab=256, n_samples=3, seq_len=4)
        assert ds.tokens.shape == (3, 4)

    def test_missing_and_empty(self, tmp_path):
        with pytest.raises(OSError):
            ingest_text(tmp_path / "nope.txt", vocab=8)
        (tmp_path / "e.txt").write_bytes(b"")
        with pytest.raises(OSError):
            ingest_text(tmp_path / "e.txt", vocab=8)

    def test_forward_on_ingested(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("the quick brown fox jumps over the lazy dog\n" * 5)
        ds = ingest_text(path, vocab=32, n_samples=4, seq_len=6)
        assert model_forward(ds.tokens, tiny_model(vocab=32, classes=32)).shape == (24, 32)
