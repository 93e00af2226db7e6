import dataclasses

import numpy as np
import pytest

from mams.checkpoint import load_checkpoint, read_manifest, save_checkpoint, write_manifest
from mams.errors import InputError
from mams.model import build_model, forward_full
from mams.tensor import Tensor


def test_manifest_round_trip(tmp_path):
    fields = {"a": 1, "b": [1.5, "x"], "c": None, "d": {"k": True}}
    write_manifest(tmp_path / "m.txt", fields)
    assert read_manifest(tmp_path / "m.txt") == fields


def test_manifest_reports_line_number(tmp_path):
    (tmp_path / "m.txt").write_text("a = 1\nbroken line\n")
    with pytest.raises(InputError, match=":2:"):
        read_manifest(tmp_path / "m.txt")


@pytest.mark.parametrize("fusion,momentum", [(True, True), (False, False), (True, False), (False, True)])
def test_checkpoint_round_trip_restores_outputs(tmp_path, tiny_config, fusion, momentum):
    cfg = dataclasses.replace(tiny_config, use_fusion=fusion, use_momentum=momentum)
    model = build_model(cfg, np.random.default_rng(3))
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3, 16, 16)))
    forward_full(model, x, "train", np.random.default_rng(0))  # move BN running stats off their defaults
    if momentum:
        model.momentum.conv.weight.data += 0.25
    save_checkpoint(model, tmp_path / "ck", step=7, m=0.99, seed=3)
    back, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["step"] == 7 and manifest["seed"] == 3 and manifest["m"] == 0.99
    assert back.config == cfg
    np.testing.assert_array_equal(forward_full(back, x, "eval").data, forward_full(model, x, "eval").data)
    for g in model.groups():
        for p, q in zip(model.groups()[g].params, back.groups()[g].params):
            np.testing.assert_array_equal(p.data, q.data)
        for p, q in zip(model.groups()[g].buffers, back.groups()[g].buffers):
            np.testing.assert_array_equal(p, q)


def test_checkpoint_mismatch_detected(tmp_path, tiny_config):
    model = build_model(tiny_config, np.random.default_rng(0))
    save_checkpoint(model, tmp_path / "ck")
    other = build_model(dataclasses.replace(tiny_config, c_out=32), np.random.default_rng(0))
    save_checkpoint(other, tmp_path / "other")
    (tmp_path / "ck" / "head.mams").write_bytes((tmp_path / "other" / "head.mams").read_bytes())
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "ck")
