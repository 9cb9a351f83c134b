"""Binary container format and model checkpoints."""

import numpy as np
import pytest

from kwsaug.checkpoint import (Checkpoint, load_checkpoint, load_tensors,
                               save_checkpoint, save_tensors)
from kwsaug.errors import CheckpointError
from kwsaug.model import ModelConfig, forward_bottleneck, init_params
from kwsaug.selfcheck import small_model_config


@pytest.fixture()
def tensors(rng):
    return {
        "alpha": rng.uniform(-1, 1, size=(3, 4)).astype(np.float32),
        "beta/scalar": np.asarray(2.5, dtype=np.float32),
        "gamma": rng.uniform(-1, 1, size=7).astype(np.float32),
    }


class TestContainer:
    def test_round_trip_is_byte_identical(self, tmp_path, tensors):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_tensors(p1, tensors)
        loaded = load_tensors(p1)
        for name, arr in tensors.items():
            np.testing.assert_array_equal(loaded[name], arr)
            assert loaded[name].dtype == np.float32
        save_tensors(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_flipped_payload_byte_fails_checksum(self, tmp_path, tensors):
        path = tmp_path / "a.ckpt"
        save_tensors(path, tensors)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x40
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_tensors(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_tensors(path)

    def test_float64_payload_rejected(self, tmp_path):
        with pytest.raises(CheckpointError, match="float32"):
            save_tensors(tmp_path / "x.ckpt", {"a": np.zeros(3, dtype=np.float64)})

    def test_insertion_order_preserved(self, tmp_path, tensors):
        path = tmp_path / "a.ckpt"
        save_tensors(path, tensors)
        assert list(load_tensors(path)) == list(tensors)


class TestCheckpoint:
    def test_forward_replay_bit_exact(self, tmp_path, rng):
        cfg = small_model_config()
        params = init_params(cfg, np.random.default_rng(0))
        x = rng.uniform(-1, 1, size=(2, 9, cfg.n_mels)).astype(np.float32)
        before, _ = forward_bottleneck(params, x)
        ckpt = Checkpoint(cfg, {k: t.data for k, t in params.tensors.items()},
                          step=17, stage="pretrain")
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt", expect=cfg)
        after, _ = forward_bottleneck(loaded.param_tensors(), x)
        np.testing.assert_array_equal(before.data, after.data)
        assert loaded.step == 17 and loaded.stage == "pretrain"

    def test_config_mismatch_rejected(self, tmp_path):
        cfg = small_model_config()
        params = init_params(cfg, np.random.default_rng(0))
        ckpt = Checkpoint(cfg, {k: t.data for k, t in params.tensors.items()})
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        other = ModelConfig()
        with pytest.raises(CheckpointError, match="config"):
            load_checkpoint(tmp_path / "m.ckpt", expect=other)

    def test_shape_disagreement_names_tensor(self, tmp_path):
        cfg = small_model_config()
        params = init_params(cfg, np.random.default_rng(0))
        arrays = {k: t.data for k, t in params.tensors.items()}
        arrays["bottleneck.w"] = arrays["bottleneck.w"][:, :-1].copy()
        save_checkpoint(Checkpoint(cfg, arrays), tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="bottleneck.w"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_missing_tensor_rejected(self, tmp_path):
        cfg = small_model_config()
        params = init_params(cfg, np.random.default_rng(0))
        arrays = {k: t.data for k, t in params.tensors.items()}
        del arrays["project.b"]
        save_checkpoint(Checkpoint(cfg, arrays), tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="project.b"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_adam_state_round_trip(self, tmp_path, rng):
        cfg = small_model_config()
        params = init_params(cfg, np.random.default_rng(0))
        adam = {"t": 42,
                "m": {"bottleneck.w": rng.uniform(-1, 1, size=(cfg.d_feat, cfg.d_bottleneck)).astype(np.float32)},
                "v": {"bottleneck.w": rng.uniform(0, 1, size=(cfg.d_feat, cfg.d_bottleneck)).astype(np.float32)}}
        ckpt = Checkpoint(cfg, {k: t.data for k, t in params.tensors.items()},
                          step=42, stage="finetune", adam=adam)
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        assert loaded.adam["t"] == 42
        np.testing.assert_array_equal(loaded.adam["m"]["bottleneck.w"], adam["m"]["bottleneck.w"])
