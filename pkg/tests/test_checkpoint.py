"""
检查点：比特级往返、损坏检测、模型恢复
"""
import struct

import numpy as np
import pytest

from core.checkpoint import (
    capture, decode_checkpoint, encode_checkpoint, load_checkpoint, restore_model, save_checkpoint,
)
from core.errors import FormatError
from core.model_zoo import build_model, micro_config
from core.optim import AdamW
from core.tensor import Tensor, backward, no_grad
from core import functional as F


def _trained_pair(variant='filter'):
    model = build_model(micro_config(variant), seed=1)
    opt = AdamW(model, lr=1e-3)
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 16, 16)))
    backward(F.cross_entropy(model(x), np.array([0, 3])))
    opt.step()
    return model, opt


def test_round_trip_is_bit_identical(tmp_path):
    model, opt = _trained_pair('dropout')
    path = save_checkpoint(str(tmp_path / 'run' / 'last.ckpt'), model, opt, epoch=3, extra={'best_val_acc': 0.5})
    ckpt = load_checkpoint(path)

    assert ckpt.epoch == 3
    assert ckpt.extra == {'best_val_acc': 0.5}
    assert ckpt.config == model.config
    assert list(ckpt.params) == [n for n, _ in model.named_parameters()]
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(ckpt.params[name], value)
        assert ckpt.params[name].dtype == value.dtype
    saved = opt.state_dict()
    assert ckpt.optimizer['meta'] == saved['meta']
    for name, value in saved['tensors'].items():
        np.testing.assert_array_equal(ckpt.optimizer['tensors'][name], value)
    assert ckpt.rng_state == model.selection_rng.bit_generator.state


def test_restored_model_gives_identical_logits(tmp_path):
    model, opt = _trained_pair()
    path = save_checkpoint(str(tmp_path / 'best.ckpt'), model, opt)
    restored = restore_model(path, seed=99)
    x = Tensor(np.random.default_rng(5).standard_normal((2, 3, 16, 16)))
    model.eval()
    restored.eval()
    with no_grad():
        np.testing.assert_array_equal(model(x).data, restored(x).data)


def test_restored_selection_stream_continues(tmp_path):
    model, _ = _trained_pair('dropout')
    blob = encode_checkpoint(capture(model))
    restored = restore_model(decode_checkpoint(blob))
    np.testing.assert_array_equal(model.selection_rng.random(5), restored.selection_rng.random(5))


def test_layout_starts_with_magic_and_manifest():
    model, _ = _trained_pair()
    blob = encode_checkpoint(capture(model))
    magic, version, length = struct.unpack_from('<4sIQ', blob, 0)
    assert (magic, version) == (b'FVCK', 1)
    assert blob[16:16 + length].startswith(b'{')


def test_bad_magic_and_version():
    model, _ = _trained_pair()
    blob = bytearray(encode_checkpoint(capture(model)))
    with pytest.raises(FormatError):
        decode_checkpoint(b'NOPE' + bytes(blob[4:]))
    struct.pack_into('<I', blob, 4, 7)
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(blob))


def test_truncated_file():
    model, _ = _trained_pair()
    blob = encode_checkpoint(capture(model))
    for cut in (8, 40, len(blob) - 5):
        with pytest.raises(FormatError):
            decode_checkpoint(blob[:cut])


def test_fingerprint_mismatch_is_detected():
    model, _ = _trained_pair()
    ckpt = capture(model)
    ckpt.fingerprint = '0' * len(ckpt.fingerprint)
    with pytest.raises(FormatError):
        decode_checkpoint(encode_checkpoint(ckpt))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / 'absent.ckpt'))
