"""End-to-end smoke tests for the Python bindings."""

import numpy as np
import pytest

import outlierlab as ol


@pytest.fixture(scope="module")
def stream():
    spec = ol.CorpusSpec()
    spec.vocab_size = 105
    spec.n_documents = 60
    spec.seed = 7
    corpus = ol.generate_corpus(spec)
    return ol.apply_tokenization_scheme(corpus, ol.Scheme.SPLIT, 32, 1e-3, 0.5, 11)


@pytest.fixture(scope="module")
def trained(stream):
    model = ol.ModelConfig()
    model.n_layers = 2
    model.hidden_dim = 16
    model.n_heads = 2
    model.ffn_dim = 32
    model.vocab_size = 105
    model.max_seq_len = 32
    model.seed = 3
    train = ol.TrainConfig()
    train.total_steps = 8
    train.warmup_steps = 2
    train.batch_size = 4
    train.checkpoint_interval = 4
    train.seed = 5
    return ol.train_mlm(train, model, stream)


def test_stream_shape(stream):
    toks = stream.tokens
    assert toks.ndim == 2 and toks.shape[1] == 32
    assert toks[0, 0] == 0  # CLS leads every row
    assert toks.min() >= 0 and toks.max() < 105


def test_frequency_table(stream):
    freq = ol.estimate_frequency(stream, 105, False)
    total = sum(freq.counts)
    assert total > 0
    assert freq.counts[0] == 0  # specials excluded


def test_training_emits_checkpoints(trained):
    steps = [c.step for c in trained.checkpoints]
    assert steps == [0, 4, 8]
    assert trained.checkpoints[-1].running_mlm_loss > 0


def test_checkpoint_roundtrip(trained, tmp_path):
    path = str(tmp_path / "ckpt.bin")
    ol.save_checkpoint(trained.checkpoints[-1], path)
    loaded = ol.load_checkpoint(path)
    orig = trained.checkpoints[-1].params
    for name, tensor in loaded.params.items():
        np.testing.assert_array_equal(tensor, orig[name])


def test_hidden_states_and_ablation(trained, stream):
    ckpt = trained.checkpoints[-1]
    hs = ol.hidden_states(ckpt, stream, 0, ol.AblationMask([], []))
    assert len(hs) == 3  # embeddings + 2 layers
    ablated = ol.hidden_states(ckpt, stream, 0, ol.AblationMask([3], []))
    assert np.all(ablated[1][:, 3] == 0.0)
    assert np.all(ablated[2][:, 3] == 0.0)


def test_candidates_and_eval(trained, stream):
    ckpt = trained.checkpoints[-1]
    cands = ol.find_candidates(ckpt, 3.0, 0.5)
    assert isinstance(cands, list)
    loss = ol.eval_mlm_loss(ckpt, stream, 16, 0.15, 99)
    assert loss > 0


def test_run_command_pipeline(tmp_path):
    out = str(tmp_path / "run")
    overrides = [
        "corpus.vocab_size=105",
        "corpus.n_documents=40",
        "model.n_layers=2",
        "model.hidden_dim=16",
        "model.n_heads=2",
        "model.ffn_dim=32",
        "scheme.max_seq_len=16",
        "train.total_steps=4",
        "train.warmup_steps=1",
        "train.batch_size=4",
        "train.checkpoint_interval=2",
        "probe.n_train=32",
        "probe.n_eval=32",
        "probe.fine_tune_steps=3",
        "probe.fine_tune_warmup=1",
        "detect.eval_rows=16",
        "diagnostics.max_rows=16",
    ]
    for cmd in ("gen-corpus", "train", "report"):
        code, err = ol.run_command(cmd, "", overrides, out, "")
        assert code == 0, f"{cmd}: {err}"
    assert (tmp_path / "run" / "manifest.json").exists()
    assert (tmp_path / "run" / "losses.csv").exists()


def test_run_command_error_codes(tmp_path):
    code, err = ol.run_command("not-a-command", "", [], str(tmp_path), "")
    assert code == 2
    code, err = ol.run_command("gen-corpus", "", ["no.such.key=1"], str(tmp_path), "")
    assert code == 3
    assert "no.such.key" in err
