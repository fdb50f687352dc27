"""Transformer classifier: wiring oracle, gradients, training loop contract,
and the model file format."""

import copy
import math

import numpy as np
import pytest
import torch

from rngaudit import metrics
from rngaudit.bitstream import generate_random, tokenize
from rngaudit.corpus import build_corpus
from rngaudit.model import (
    MODEL_MAGIC,
    ModelConfig,
    Prediction,
    TrainConfig,
    TrainingError,
    bce_loss,
    classify,
    forward,
    init,
    load_model,
    predict_batch,
    predict_probs,
    save_model,
    sinusoidal_positional_encoding,
    train,
)

torch.set_num_threads(1)

TINY = ModelConfig(d_model=4, n_layers=1, n_heads=1, vocab_size=8,
                   max_tokens=4, dropout=0.0)


def small_records(bits, count, seed):
    _, parts = build_corpus(bits=bits, count=count, seed=seed)
    return parts


class TestConfig:
    def test_head_width(self):
        cfg = ModelConfig(d_model=240, n_heads=8)
        net = init(cfg, seed=0)
        assert net.layers[0].attention.d_head == 30

    def test_optimal_architecture_accepted(self):
        ModelConfig(d_model=192, n_layers=1, n_heads=1)

    def test_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=240, n_heads=7)

    def test_flatten_needs_fixed_tokens(self):
        with pytest.raises(ValueError):
            ModelConfig(head_type="Flatten")
        ModelConfig(head_type="Flatten", fixed_tokens=32)

    def test_average_forbids_fixed_tokens(self):
        with pytest.raises(ValueError):
            ModelConfig(head_type="Average", fixed_tokens=32)

    def test_ffn_default(self):
        assert ModelConfig(d_model=192).ffn_dim == 768

    def test_dict_round_trip(self):
        cfg = ModelConfig(d_model=64, n_layers=2, n_heads=4)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestInit:
    def test_same_seed_identical(self):
        a = init(TINY, seed=5)
        b = init(TINY, seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_seed_changes_params(self):
        a = init(TINY, seed=5)
        b = init(TINY, seed=6)
        assert any(
            not torch.equal(pa, pb)
            for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_layer_norm_neutral(self):
        net = init(TINY, seed=0)
        assert torch.equal(net.layers[0].norm1.weight,
                           torch.ones(TINY.d_model))
        assert torch.equal(net.layers[0].norm1.bias,
                           torch.zeros(TINY.d_model))


def reference_forward(net, tokens):
    """Independent numpy recomputation of the documented forward pass."""
    cfg = net.config
    w = {k: v.detach().numpy().astype(np.float64)
         for k, v in net.state_dict().items()}
    d = cfg.d_model

    x = w["embedding.weight"][tokens]
    if cfg.positional_encoding:
        pos = np.arange(len(tokens))[:, None]
        div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
        pe = np.zeros((len(tokens), d))
        pe[:, 0::2] = np.sin(pos * div)
        pe[:, 1::2] = np.cos(pos * div[: d // 2])
        x = x + pe

    def layer_norm(v, gamma, beta):
        mu = v.mean(axis=-1, keepdims=True)
        var = v.var(axis=-1, keepdims=True)
        return gamma * (v - mu) / np.sqrt(var + 1e-5) + beta

    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        q = x @ w[p + "attention.query.weight"].T + w[p + "attention.query.bias"]
        k = x @ w[p + "attention.key.weight"].T + w[p + "attention.key.bias"]
        v = x @ w[p + "attention.value.weight"].T + w[p + "attention.value.bias"]
        heads = []
        dh = d // cfg.n_heads
        for h in range(cfg.n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            e = np.exp(scores - scores.max(axis=-1, keepdims=True))
            attn = e / e.sum(axis=-1, keepdims=True)
            heads.append(attn @ v[:, sl])
        ctx = np.concatenate(heads, axis=-1)
        ctx = ctx @ w[p + "attention.out.weight"].T + w[p + "attention.out.bias"]
        x = layer_norm(x + ctx, w[p + "norm1.weight"], w[p + "norm1.bias"])
        ff = np.maximum(x @ w[p + "ffn1.weight"].T + w[p + "ffn1.bias"], 0.0)
        ff = ff @ w[p + "ffn2.weight"].T + w[p + "ffn2.bias"]
        x = layer_norm(x + ff, w[p + "norm2.weight"], w[p + "norm2.bias"])

    pooled = x.mean(axis=0) if cfg.head_type == "Average" else x.reshape(-1)
    logits = pooled @ w["head.weight"].T + w["head.bias"]
    return 1.0 / (1.0 + np.exp(-logits))


class TestForward:
    def test_hand_oracle_tiny(self):
        cfg = ModelConfig(d_model=2, n_layers=1, n_heads=1, vocab_size=4,
                          max_tokens=4, dropout=0.0)
        net = init(cfg, seed=0)
        # overwrite with hand-set values so the oracle is not comparing
        # one RNG stream to itself
        with torch.no_grad():
            for i, p in enumerate(net.parameters()):
                vals = 0.1 * (np.arange(p.numel()) % 7 - 3.0) + 0.01 * i
                p.copy_(torch.from_numpy(vals.reshape(p.shape)))
        tokens = [3, 1]
        got = forward(net, np.array(tokens)).probs
        want = reference_forward(net, np.array(tokens))
        assert np.allclose(got, want, atol=1e-6)

    def test_oracle_multi_head_multi_layer(self):
        cfg = ModelConfig(d_model=8, n_layers=2, n_heads=2, vocab_size=16,
                          max_tokens=8, dropout=0.0)
        net = init(cfg, seed=3)
        tokens = np.array([5, 0, 11, 7])
        got = forward(net, tokens).probs
        want = reference_forward(net, tokens)
        assert np.allclose(got, want, atol=1e-6)

    def test_shape_invariance_average(self):
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, dropout=0.0,
                          max_tokens=128)
        net = init(cfg, seed=0)
        for bits in (512, 1024, 2048):
            seq = generate_random(1, bits, seed=bits)[0]
            pred = forward(net, seq)
            assert pred.probs.shape == (7,)

    def test_sigmoid_strictly_inside(self):
        net = init(TINY, seed=1)
        pred = forward(net, np.array([1, 2, 3]))
        assert np.all((pred.probs > 0.0) & (pred.probs < 1.0))

    def test_inference_deterministic_despite_dropout_config(self):
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=1, dropout=0.5,
                          vocab_size=32, max_tokens=8)
        net = init(cfg, seed=2)
        tokens = np.array([1, 9, 17])
        a = forward(net, tokens).probs
        b = forward(net, tokens).probs
        assert np.array_equal(a, b)

    def test_flatten_length_enforced(self):
        cfg = ModelConfig(d_model=8, n_layers=1, n_heads=1, vocab_size=16,
                          head_type="Flatten", fixed_tokens=4, max_tokens=8,
                          dropout=0.0)
        net = init(cfg, seed=0)
        forward(net, np.array([1, 2, 3, 4]))
        with pytest.raises(ValueError):
            forward(net, np.array([1, 2, 3]))

    def test_token_out_of_vocab(self):
        net = init(TINY, seed=0)
        with pytest.raises(ValueError):
            forward(net, np.array([1, 8]))

    def test_length_over_max(self):
        net = init(TINY, seed=0)
        with pytest.raises(ValueError):
            forward(net, np.arange(5) % 8)

    def test_permutation_invariance_without_positions(self):
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, vocab_size=64,
                          max_tokens=16, dropout=0.0,
                          positional_encoding=False)
        net = init(cfg, seed=4)
        tokens = np.array([3, 60, 17, 41, 5, 5, 22, 9])
        perm = np.array([5, 2, 7, 0, 1, 4, 6, 3])
        a = forward(net, tokens).probs
        b = forward(net, tokens[perm]).probs
        assert np.allclose(a, b, atol=1e-6)

    def test_position_encoding_breaks_invariance(self):
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, vocab_size=64,
                          max_tokens=16, dropout=0.0)
        net = init(cfg, seed=4)
        tokens = np.array([3, 60, 17, 41, 5, 5, 22, 9])
        perm = np.array([5, 2, 7, 0, 1, 4, 6, 3])
        a = forward(net, tokens).probs
        b = forward(net, tokens[perm]).probs
        assert not np.allclose(a, b, atol=1e-6)

    def test_attention_rows_sum_to_one(self):
        cfg = ModelConfig(d_model=16, n_layers=2, n_heads=4, vocab_size=64,
                          max_tokens=16, dropout=0.0)
        net = init(cfg, seed=9)
        tokens = torch.tensor([[3, 60, 17, 41, 5, 5, 22, 9]])
        net.eval()
        with torch.no_grad():
            _, attention = net(tokens, return_attention=True)
        assert len(attention) == 2
        for weights in attention:
            sums = weights.sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


class TestPositionalEncoding:
    def test_table_values(self):
        pe = sinusoidal_positional_encoding(4, 6).numpy()
        assert pe[0] == pytest.approx([0, 1, 0, 1, 0, 1])
        assert pe[2, 0] == pytest.approx(math.sin(2.0), abs=1e-6)
        assert pe[2, 1] == pytest.approx(math.cos(2.0), abs=1e-6)
        assert pe[3, 2] == pytest.approx(
            math.sin(3.0 / 10000 ** (2 / 6)), abs=1e-6
        )

    def test_rows_distinct(self):
        pe = sinusoidal_positional_encoding(128, 192).numpy()
        assert len({tuple(np.round(r, 9)) for r in pe}) == 128


class TestLoss:
    def test_exact_match_near_zero(self):
        y = torch.tensor([1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])
        assert bce_loss(y, y).item() <= 7e-7

    def test_half_probability_ln2(self):
        p = torch.full((7,), 0.5)
        y = torch.tensor([1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
        assert bce_loss(p, y).item() == pytest.approx(math.log(2), rel=1e-6)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(12)
        p = rng.uniform(0.01, 0.99, size=7)
        y = (rng.random(7) < 0.5).astype(float)
        want = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert bce_loss(torch.tensor(p), torch.tensor(y)).item() == \
            pytest.approx(want, rel=1e-9)

    def test_clamping_keeps_loss_finite(self):
        p = torch.tensor([0.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5])
        y = torch.tensor([1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
        assert torch.isfinite(bce_loss(p, y))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bce_loss(torch.zeros(7), torch.zeros(6))


def fd_reference(net, tokens, labels, eps=1e-6):
    """Central finite differences of the loss, evaluated on a float64 copy
    of the network so the reference is accurate at both precisions."""
    ref = copy.deepcopy(net).double()
    labels64 = labels.double()
    grads = {}
    for name, p in ref.named_parameters():
        flat = p.data.view(-1)
        g = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                up = bce_loss(torch.sigmoid(ref(tokens)), labels64).item()
            flat[i] = orig - eps
            with torch.no_grad():
                down = bce_loss(torch.sigmoid(ref(tokens)), labels64).item()
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
        grads[name] = g.view_as(p)
    return grads


def worst_gradient_error(net, tokens, labels):
    """Max per-tensor relative error between autograd and finite differences.

    The denominator is floored at 1e-4 because structurally zero gradients
    (the attention key bias cancels inside each softmax row) make a bare
    relative norm meaningless.
    """
    loss = bce_loss(torch.sigmoid(net(tokens)), labels)
    net.zero_grad()
    loss.backward()
    fd = fd_reference(net, tokens, labels)
    worst = 0.0
    for name, p in net.named_parameters():
        analytic = p.grad.detach().double()
        numeric = fd[name]
        rel = (analytic - numeric).norm().item() / max(
            analytic.norm().item(), numeric.norm().item(), 1e-4
        )
        worst = max(worst, rel)
    return worst


GRAD_TOKENS = torch.tensor([[1, 5, 2], [7, 0, 3]])
GRAD_LABELS = torch.tensor(
    [[1, 0, 1, 1, 0, 1, 0], [0, 1, 0, 1, 1, 0, 1]], dtype=torch.float32
)


class TestGradients:
    def test_float32(self):
        net = init(TINY, seed=11, dtype=torch.float32)
        assert worst_gradient_error(net, GRAD_TOKENS, GRAD_LABELS) < 1e-3

    def test_float64(self):
        net = init(TINY, seed=11, dtype=torch.float64)
        err = worst_gradient_error(net, GRAD_TOKENS, GRAD_LABELS.double())
        assert err < 1e-6


@pytest.fixture(scope="module")
def tiny_corpus():
    return small_records(512, 300, seed=77)


class TestTraining:
    def test_overfits_single_batch(self, tiny_corpus):
        records = tiny_corpus["train"][:32]
        cfg = ModelConfig(d_model=48, n_layers=1, n_heads=1, dropout=0.0)
        tcfg = TrainConfig(seed=3, batch_size=32, max_epochs=200,
                           patience=200, threads=1)
        net, history = train(cfg, tcfg, records, records)
        probs = predict_probs(net, [r.seq for r in records])
        counts = metrics.accumulate(probs >= 0.5,
                                    [r.label for r in records])
        assert metrics.macro_f1(counts) == 1.0
        assert len(history) <= 200

    def test_history_fields_and_determinism(self, tiny_corpus):
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=1, vocab_size=65536)
        tcfg = TrainConfig(seed=5, max_epochs=3, patience=3, threads=1)
        _, h1 = train(cfg, tcfg, tiny_corpus["train"], tiny_corpus["val"])
        _, h2 = train(cfg, tcfg, tiny_corpus["train"], tiny_corpus["val"])
        assert h1 == h2
        assert [h["epoch"] for h in h1] == [1, 2, 3]
        for row in h1:
            assert set(row) == {"epoch", "train_loss", "train_batch_f1",
                                "val_macro_f1"}

    def test_returns_best_epoch_params(self, tiny_corpus):
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=1)
        tcfg = TrainConfig(seed=5, max_epochs=4, patience=4, threads=1)
        net, history = train(cfg, tcfg, tiny_corpus["train"],
                             tiny_corpus["val"])
        best = max(h["val_macro_f1"] for h in history)
        probs = predict_probs(net, [r.seq for r in tiny_corpus["val"]])
        counts = metrics.accumulate(probs >= 0.5,
                                    [r.label for r in tiny_corpus["val"]])
        assert metrics.macro_f1(counts) == pytest.approx(best, abs=1e-9)

    def test_divergence_names_epoch_and_batch(self, tiny_corpus):
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=1, dropout=0.0)
        tcfg = TrainConfig(seed=5, learning_rate=1e9, max_epochs=3,
                           patience=3, threads=1)
        with pytest.raises(TrainingError, match=r"epoch \d+, batch \d+"):
            train(cfg, tcfg, tiny_corpus["train"], tiny_corpus["val"])

    def test_empty_sets_rejected(self, tiny_corpus):
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=1)
        with pytest.raises(ValueError):
            train(cfg, TrainConfig(), [], tiny_corpus["val"])

    def test_flatten_rejects_mixed_lengths(self, tiny_corpus):
        _, parts1024 = build_corpus(bits=1024, count=50, seed=7)
        mixed = tiny_corpus["train"][:30] + parts1024["train"][:30]
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=1,
                          head_type="Flatten", fixed_tokens=32)
        with pytest.raises(ValueError):
            train(cfg, TrainConfig(max_epochs=1), mixed, mixed)

    def test_mixed_length_training_runs(self, tiny_corpus):
        _, parts1024 = build_corpus(bits=1024, count=50, seed=7)
        mixed = tiny_corpus["train"][:40] + parts1024["train"][:30]
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=1, max_tokens=64)
        tcfg = TrainConfig(seed=1, max_epochs=2, patience=2, batch_size=16,
                           threads=1)
        net, history = train(cfg, tcfg, mixed, mixed)
        assert len(history) == 2
        probs = predict_probs(net, [r.seq for r in mixed])
        assert probs.shape == (70, 7)


class TestPrediction:
    def test_classify_threshold_inclusive(self):
        pred = Prediction(probs=np.array([0.9, 0.1, 0.5, 0.49, 0.51, 0.0, 1.0]))
        got = classify(pred)
        assert got.tolist() == [True, False, True, False, True, False, True]

    def test_predict_batch_matches_forward(self):
        net = init(ModelConfig(d_model=16, n_layers=1, n_heads=1,
                               dropout=0.0), seed=8)
        seqs = generate_random(5, 512, seed=1)
        batched = predict_batch(net, seqs)
        for seq, pred in zip(seqs, batched):
            assert np.allclose(forward(net, seq).probs, pred.probs, atol=1e-6)

    def test_probs_validated(self):
        with pytest.raises(ValueError):
            Prediction(probs=np.array([1.5, 0, 0, 0, 0, 0, 0]))
        with pytest.raises(ValueError):
            Prediction(probs=np.zeros(6))


class TestPersistence:
    def test_round_trip_bit_identical(self, tmp_path):
        cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, vocab_size=128,
                          max_tokens=16)
        net = init(cfg, seed=13)
        path = tmp_path / "model.rtnn"
        save_model(str(path), net)
        back = load_model(str(path))
        assert back.config == cfg
        for (na, pa), (nb, pb) in zip(net.named_parameters(),
                                      back.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_magic_line(self, tmp_path):
        net = init(TINY, seed=0)
        path = tmp_path / "model.rtnn"
        save_model(str(path), net)
        assert path.read_bytes().startswith(MODEL_MAGIC.encode() + b"\n")

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bogus.rtnn"
        path.write_bytes(b"RTNN9\n{}\n")
        with pytest.raises(ValueError, match="magic"):
            load_model(str(path))

    def test_truncated_file(self, tmp_path):
        net = init(TINY, seed=0)
        path = tmp_path / "model.rtnn"
        save_model(str(path), net)
        raw = path.read_bytes()
        path.write_bytes(raw[:-40])
        with pytest.raises(ValueError, match="truncated"):
            load_model(str(path))

    def test_header_config_vs_arrays(self, tmp_path):
        """A header that declares a different d_model than the stored arrays
        must be rejected rather than silently reshaped."""
        net = init(TINY, seed=0)
        path = tmp_path / "model.rtnn"
        save_model(str(path), net)
        raw = path.read_bytes()
        tampered = raw.replace(b'"d_model": 4', b'"d_model": 8', 1)
        path.write_bytes(tampered)
        with pytest.raises(ValueError):
            load_model(str(path))

    def test_trailing_garbage(self, tmp_path):
        net = init(TINY, seed=0)
        path = tmp_path / "model.rtnn"
        save_model(str(path), net)
        path.write_bytes(path.read_bytes() + b"\x00" * 16)
        with pytest.raises(ValueError, match="trailing"):
            load_model(str(path))
