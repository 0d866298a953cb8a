import numpy as np
import pytest

from prunelab import tensor as T
from prunelab.bench import (account_live_bytes, attach_sites,
                            bench_pruned_vs_dense, keep_first_plan,
                            measure_arms)
from prunelab.errors import ContractError
from prunelab.model import FoundationModel, ModelConfig


def bench_model(d=32, layers=2, heads=2, ffn=64, vocab=32):
    cfg = ModelConfig(vocab_size=vocab, max_seq=16, embed_dim=d,
                      num_layers=layers, num_heads=heads, ffn_dim=ffn,
                      num_classes=2)
    return FoundationModel(cfg, seed=0)


def batch_for(model, batch=4, seq=12, seed=0):
    rng = T.seeded_rng(seed)
    ids = rng.integers(0, model.config.vocab_size, (batch, seq), dtype=np.int64)
    labels = rng.integers(0, 2, batch, dtype=np.int64)
    return ids, labels


def test_account_live_bytes_hand_check_frozen_model():
    """With everything frozen except the classifier, the walk is enumerable."""
    model = bench_model()
    ids, labels = batch_for(model)
    parts = account_live_bytes(model, None, ids, labels)

    weight_want = sum(p.data.nbytes for p in model.foundation_parameters())
    weight_want += model.w_cls.data.nbytes
    assert parts["weights"] == weight_want
    # optimizer state: two moment buffers for the only trainable tensor
    assert parts["optimizer"] == 2 * model.w_cls.data.nbytes
    assert parts["grads"] == parts["activations"] + model.w_cls.data.nbytes
    assert parts["activations"] > 0


def test_live_bytes_grow_with_trainable_modules():
    model = bench_model()
    ids, labels = batch_for(model)
    plain = account_live_bytes(model, None, ids, labels)
    peft = attach_sites(model, ("q", "k", "v", "o", "fc1", "fc2"), rank=4,
                        scale=2.0, seed=1)
    with_modules = account_live_bytes(model, peft, ids, labels)
    assert with_modules["weights"] > plain["weights"]
    assert with_modules["optimizer"] > plain["optimizer"]
    assert with_modules["activations"] > plain["activations"]


def test_frozen_model_records_fewer_activation_bytes_than_unfrozen():
    model = bench_model()
    ids, labels = batch_for(model)
    frozen = account_live_bytes(model, None, ids, labels)
    model.set_frozen(False)
    unfrozen = account_live_bytes(model, None, ids, labels)
    assert unfrozen["activations"] > frozen["activations"]
    assert unfrozen["grads"] > frozen["grads"]


def test_measure_arms_interleaves_and_fills_rows():
    model = bench_model()
    peft = attach_sites(model, ("q",), rank=2, scale=2.0, seed=2)
    ids, labels = batch_for(model)
    rows = measure_arms([("plain", model, None), ("with-q", model, peft)],
                        ids, labels, reps=3, batches=2)
    assert [r.label for r in rows] == ["plain", "with-q"]
    for row in rows:
        assert len(row.forward_times) == 3
        assert len(row.backward_times) == 3
        assert row.forward_median > 0
        assert row.backward_median > 0
        assert row.total_bytes == sum(row.byte_parts.values())
        assert "reps" in row.variance_note()


def test_measure_arms_rejects_too_few_reps():
    model = bench_model()
    ids, labels = batch_for(model)
    with pytest.raises(ContractError):
        measure_arms([("m", model, None)], ids, labels, reps=2)


def test_keep_first_plan_halves_structures():
    cfg = bench_model(d=32, heads=4).config
    plan = keep_first_plan(cfg, heads_kept=2, ffn_kept=32)
    assert plan.keep_heads == [[0, 1], [0, 1]]
    assert all(k == list(range(32)) for k in plan.keep_ffn)


def test_pruned_arm_is_lighter_than_dense():
    """Structural pruning must show up in both byte and parameter accounting."""
    rows = {r.label: r for r in bench_pruned_vs_dense(seed=0, reps=3)}
    dense, pruned = rows["dense"], rows["pruned"]
    assert pruned.foundation_params < dense.foundation_params
    assert pruned.total_bytes < dense.total_bytes
    assert pruned.byte_parts["activations"] < dense.byte_parts["activations"]


def test_attach_sites_only_names_requested_sites():
    model = bench_model()
    peft = attach_sites(model, ("q", "fc1"), rank=2, scale=2.0, seed=3)
    assert sorted({site for _, site in peft.modules}) == ["fc1", "q"]
    assert len(peft.modules) == 2 * model.config.num_layers
