import json
import struct

import numpy as np
import pytest

from bhvit import autograd as ag
from bhvit.checkpoint import MAGIC, VERSION, CheckpointError, load_checkpoint, read_header, save_checkpoint
from bhvit.data import DataFileError
from bhvit.errors import ShapeError
from bhvit.layers import bit_kernels
from bhvit.training import TrainConfig, make_optimizer, train
from conftest import micro, synthetic_dataset


def _logits(model, x):
    model.eval()
    with ag.no_grad():
        return model(x).data


@pytest.fixture(scope="module")
def trained():
    """A micro model moved off its init by a few steps, plus its optimizer."""
    cfg = TrainConfig(epochs=1, batch_size=16, seed=0)
    model = micro(seed=2)
    opt = make_optimizer(model, cfg)
    train(model, synthetic_dataset(32), cfg, optimizer=opt, max_steps=2)
    return model, opt


class TestRoundtrip:
    def test_dense_logits_bit_exact(self, trained, tmp_path, rng):
        model, opt = trained
        x = rng.normal(size=(3, 64, 64, 3)).astype(np.float32)
        path = save_checkpoint(tmp_path / "m.bhvt", model, opt, epoch=4)
        ck = load_checkpoint(path)
        assert ck.epoch == 4
        assert np.array_equal(_logits(ck.model, x), _logits(model, x))
        for (n, p), (n2, p2) in zip(model.named_parameters(), ck.model.named_parameters()):
            assert n == n2 and np.array_equal(p.data, p2.data)

    def test_packed_matches_bit_kernels(self, trained, tmp_path, rng):
        model, _ = trained
        x = rng.normal(size=(2, 64, 64, 3)).astype(np.float32)
        ck = load_checkpoint(save_checkpoint(tmp_path / "p.bhvt", model, packed=True))
        ck.model.eval()
        with bit_kernels():
            packed = ck.model(x).data
        assert np.array_equal(packed, _logits(model, x))

    def test_packed_is_smaller(self, trained, tmp_path):
        model, _ = trained
        dense = save_checkpoint(tmp_path / "d.bhvt", model).stat().st_size
        packed = save_checkpoint(tmp_path / "p.bhvt", model, packed=True).stat().st_size
        assert packed < dense

    def test_optimizer_state(self, trained, tmp_path):
        model, opt = trained
        ck = load_checkpoint(save_checkpoint(tmp_path / "o.bhvt", model, opt))
        state = opt.state_dict()
        assert ck.optimizer_state["t"] == state["t"] == 2
        for key in ("m", "v"):
            assert set(ck.optimizer_state[key]) == set(state[key])
            for name, arr in state[key].items():
                assert np.array_equal(ck.optimizer_state[key][name], arr)


class TestFormat:
    def test_header(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.bhvt", micro(), packed=True)
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        version, hlen = struct.unpack("<IQ", raw[4:16])
        assert version == VERSION
        header = json.loads(raw[16:16 + hlen])
        kinds = {e["kind"] for e in header["tensors"]}
        assert kinds == {"dense-f32", "bitpacked"}
        assert header == read_header(path)[0]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bhvt").write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.bhvt")

    def test_bad_version(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.bhvt", micro())
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", VERSION + 1)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(DataFileError) as exc:
            load_checkpoint(tmp_path / "gone.bhvt")
        assert "gone.bhvt" in str(exc.value)

    def test_shape_mismatch(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.bhvt", micro())
        raw = path.read_bytes()
        hlen = struct.unpack("<Q", raw[8:16])[0]
        header = json.loads(raw[16:16 + hlen])
        header["tensors"][0]["shape"] = [1] + header["tensors"][0]["shape"]
        hdr = json.dumps(header).encode()
        path.write_bytes(raw[:8] + struct.pack("<Q", len(hdr)) + hdr + raw[16 + hlen:])
        with pytest.raises(ShapeError):
            load_checkpoint(path)
