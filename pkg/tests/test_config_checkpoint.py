import struct

import numpy as np
import pytest

from llab.checkpoint import (MAGIC, load_encoder, load_operator, pack, read_checkpoint,
                             save_encoder, save_operator, unpack, write_checkpoint)
from llab.config import ExperimentConfig, load_config, parse_config
from llab.errors import ConfigError, DataError
from llab.models import Encoder
from llab.operators import LatentOperator


def test_defaults_follow_training_table():
    cfg = ExperimentConfig()
    tc = cfg.reconstructor_train_config()
    assert (tc.epochs, tc.batch_size, tc.base_lr) == (40, 10, 3e-4)
    assert cfg.operator.alpha == 0.9


def test_parse_dotted_keys_and_types():
    cfg = parse_config("""
        # comment
        seed = 4
        encoder.objective = contrastive   # trailing comment
        data.fractions = 0.25, 0.25, 0.25, 0.25
        operator.renormalize = false
        judge.checkpoints = a.ckpt, b.ckpt
    """)
    assert cfg.seed == 4 and cfg.encoder.objective == "contrastive"
    assert cfg.data.fractions == (0.25, 0.25, 0.25, 0.25)
    assert cfg.operator.renormalize is False
    assert cfg.judge.checkpoints == ["a.ckpt", "b.ckpt"]


@pytest.mark.parametrize("text", [
    "encoder.colour = red",
    "decoder.depth = 3",
    "seed = seven",
    "operator.renormalize = maybe",
    "seed = 1\nseed = 2",
    "just some words",
])
def test_parser_is_strict(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("text", [
    "data.resolution = 30",
    "encoder.patch_size = 3\ndata.resolution = 33",
    "data.fractions = 0.5, 0.5, 0.5, 0.5",
    "encoder.objective = jigsaw",
    "operator.kind = rotation",
    "operator.pixel_op = suppress\noperator.alpha = 2",
    "encoder.dim = 30\nencoder.heads = 4",
])
def test_validation_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text).validate()


def test_text_round_trip_and_digest(tmp_path):
    cfg = parse_config("seed = 9\nencoder.dim = 32\n")
    again = parse_config(cfg.to_text())
    assert again == cfg and again.digest() == cfg.digest()
    moved = parse_config(cfg.to_text())
    moved.output.dir = "elsewhere"
    assert moved.digest() == cfg.digest()


def test_load_config_resolves_relative_paths(tmp_path):
    (tmp_path / "exp.cfg").write_text("data.root = corpus\njudge.checkpoints = j/encoder.ckpt\n")
    cfg = load_config(tmp_path / "exp.cfg", {"seed": "5"})
    assert cfg.data.root == str(tmp_path / "corpus")
    assert cfg.judge.checkpoints == [str(tmp_path / "j" / "encoder.ckpt")]
    assert cfg.seed == 5
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    enc = Encoder(8, 4, 8, 1, 2, seed=0)
    enc.freeze()
    first = save_encoder(tmp_path / "a.ckpt", enc, config_hash="abc")
    loaded, manifest = load_encoder(first)
    assert manifest["objective"] == "masked-recon" and loaded.frozen
    second = save_encoder(tmp_path / "b.ckpt", loaded, config_hash="abc")
    assert first.read_bytes() == second.read_bytes()
    for k, v in enc.state_dict().items():
        np.testing.assert_allclose(loaded.state_dict()[k], v, rtol=1e-6, atol=1e-7)


def test_operator_checkpoint_keeps_double_precision(tmp_path):
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((16, 16)))
    op = LatentOperator(q, "orthogonal", 0.5, "swap_rb", {"n_images": 3})
    save_operator(tmp_path / "op.ckpt", op, pixel_op={"kind": "swap_rb", "channel": 2, "alpha": 0.9})
    loaded, manifest = load_operator(tmp_path / "op.ckpt")
    np.testing.assert_array_equal(loaded.matrix, q)
    assert manifest["provenance"] == {"n_images": 3}


def test_container_errors(tmp_path):
    blob = pack({"kind": "x"}, {"w": np.ones((2, 3))})
    manifest, params = unpack(blob)
    assert manifest == {"kind": "x"} and params["w"].shape == (2, 3)
    with pytest.raises(DataError):
        unpack(b"NOPE" + blob[4:])
    with pytest.raises(DataError):
        unpack(MAGIC + struct.pack("<H", 99) + blob[6:])
    with pytest.raises(DataError):
        unpack(blob[:-3])
    with pytest.raises(DataError):
        unpack(blob + b"\0")
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "absent.ckpt")
    with pytest.raises(ValueError):
        pack({}, {"w": np.array([np.nan])})
    write_checkpoint(tmp_path / "op.ckpt", {"kind": "operator"}, {})
    with pytest.raises(DataError):
        load_encoder(tmp_path / "op.ckpt")


def test_config_hash_mismatch_only_warns(tmp_path):
    enc = Encoder(8, 4, 8, 1, 2, seed=0)
    save_encoder(tmp_path / "e.ckpt", enc, config_hash="one")
    with pytest.warns(UserWarning):
        load_encoder(tmp_path / "e.ckpt", config_hash="two")


def test_digest_survives_moving_the_experiment_folder(tmp_path):
    text = "data.root = corpus\ndata.split_file = splits.json\njudge.checkpoints = j/e.ckpt\n"
    for name in ("one", "two"):
        (tmp_path / name).mkdir()
        (tmp_path / name / "exp.cfg").write_text(text)
    first = load_config(tmp_path / "one" / "exp.cfg")
    second = load_config(tmp_path / "two" / "exp.cfg")
    assert first.data.root != second.data.root
    assert first.digest() == second.digest()
    (tmp_path / "two" / "exp.cfg").write_text(text.replace("corpus", "other"))
    assert load_config(tmp_path / "two" / "exp.cfg").digest() != first.digest()
    assert first.data.root == str(tmp_path / "one" / "corpus")
