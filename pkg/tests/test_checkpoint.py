"""Checkpoint manifest + blob round-trips, corruption detection, golden layout."""

import numpy as np
import pytest

from nextbasket.autograd import ParameterStore
from nextbasket.checkpoint import (load_checkpoint, pack_training_state, roundtrip_report,
                                   save_checkpoint, split_training_state)
from nextbasket.errors import CheckpointError
from nextbasket.optim import AdamState
from nextbasket.pretraining import training_rng


def random_tensors(n=10, seed=0):
    rng = np.random.default_rng(seed)
    shapes = [(3,), (2, 4), (5, 1), (1,), (2, 2, 2), (7,), (4, 3), (6,), (2, 5), (3, 3)]
    return {f"tensor_{i:02d}": rng.normal(size=shapes[i % len(shapes)]) for i in range(n)}


def test_roundtrip_bit_identical(tmp_path):
    tensors = random_tensors()
    save_checkpoint(tmp_path / "ckpt", tensors, {"note": "hello"})
    loaded, header = load_checkpoint(tmp_path / "ckpt")
    assert header["note"] == "hello"
    assert set(loaded) == set(tensors)
    for name, original in tensors.items():
        assert loaded[name].dtype == np.float64
        assert np.array_equal(loaded[name], original)
        assert loaded[name].tobytes() == original.tobytes()


def test_roundtrip_report_all_true(tmp_path):
    report = roundtrip_report(random_tensors(), tmp_path / "ckpt", {"note": "x"})
    assert report.pop("#hash") is True
    assert len(report) == 10 and all(report.values())


def test_truncated_blob_rejected_without_partial_load(tmp_path):
    save_checkpoint(tmp_path / "ckpt", random_tensors())
    blob = (tmp_path / "ckpt" / "tensors.bin")
    blob.write_bytes(blob.read_bytes()[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ckpt")


def test_flipped_bit_rejected(tmp_path):
    save_checkpoint(tmp_path / "ckpt", random_tensors())
    blob = tmp_path / "ckpt" / "tensors.bin"
    data = bytearray(blob.read_bytes())
    data[11] ^= 0x40
    blob.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ckpt")


def test_missing_checkpoint_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing_here")


def test_golden_manifest_layout(tmp_path):
    """The on-disk layout is a public contract; freeze it."""
    tensors = {"beta": np.array([1.5, -2.5]), "alpha": np.arange(6.0).reshape(2, 3)}
    save_checkpoint(tmp_path / "ckpt", tensors, {"config.hidden_size": "8"})
    manifest = (tmp_path / "ckpt" / "manifest.txt").read_text().splitlines()
    assert manifest[0] == "nextbasket-checkpoint-v1"
    assert manifest[1] == "config.hidden_size=8"
    assert manifest[2].startswith("blob_sha256=")
    assert manifest[3] == "[tensors]"
    # sorted by name, byte offsets in file order
    assert manifest[4] == "alpha\t2,3\t0"
    assert manifest[5] == "beta\t2\t48"
    blob = (tmp_path / "ckpt" / "tensors.bin").read_bytes()
    assert len(blob) == 8 * 8
    assert np.frombuffer(blob, dtype="<f8", count=6).tolist() == list(range(6))


def test_scalar_and_empty_edge_cases(tmp_path):
    save_checkpoint(tmp_path / "s", {"scalar": np.array(3.25)})
    loaded, _ = load_checkpoint(tmp_path / "s")
    assert loaded["scalar"].shape == (1,)  # 0-d tensors stored as length-1
    assert loaded["scalar"][0] == 3.25


def test_reserved_header_key_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x", {}, {"blob_sha256": "boom"})


def test_training_state_roundtrip(tmp_path):
    store = ParameterStore(3)
    store.create("layer.weight", (4, 2))
    store.create("layer.bias", (2,), "zeros")
    adam = AdamState(learning_rate=1e-3, step_count=17)
    adam.first_moment["layer.weight"] = np.full((4, 2), 0.25)
    adam.second_moment["layer.weight"] = np.full((4, 2), 0.5)
    rng = training_rng(9)
    rng.random(13)  # advance the stream

    tensors, header = pack_training_state(store, adam, rng, {"config.hidden_size": "4"})
    save_checkpoint(tmp_path / "ckpt", tensors, header)
    loaded, loaded_header = load_checkpoint(tmp_path / "ckpt")
    params, adam2, rng2 = split_training_state(loaded, loaded_header)

    assert set(params) == {"layer.weight", "layer.bias"}
    assert np.array_equal(params["layer.weight"], store["layer.weight"].data)
    assert adam2.step_count == 17
    assert adam2.learning_rate == 1e-3
    assert np.array_equal(adam2.first_moment["layer.weight"], np.full((4, 2), 0.25))
    # the restored rng continues the exact stream
    assert rng2.random(5).tolist() == rng.random(5).tolist()


def test_pretrained_tensors_identical_with_extra_fresh_heads(tmp_path, tiny_corpus):
    """Loading a pre-train checkpoint into a fine-tune store: old tensors equal,
    new head tensors present."""
    from nextbasket.finetune import FinetuneSettings, init_finetune_store
    from tests.conftest import make_model

    store, config = make_model(tiny_corpus, seed=1)
    tensors, header = pack_training_state(store, header=config.to_header())
    save_checkpoint(tmp_path / "pre", tensors, header)

    loaded, loaded_header = load_checkpoint(tmp_path / "pre")
    params = split_training_state(loaded, loaded_header)[0]
    ft_store = init_finetune_store(tiny_corpus, config, FinetuneSettings(seed=2), params)

    report = {}
    for name, _ in ft_store.items():
        if name in params and not name.startswith(("heads.", "pool.", "users.")):
            report[name] = np.array_equal(ft_store[name].data, params[name])
    assert report and all(report.values())
    assert "pool.weight" in ft_store and "users.embedding" in ft_store
    assert "heads.next_basket.weight" not in ft_store
