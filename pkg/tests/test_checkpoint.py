import struct

import numpy as np
import pytest

from mae3d import autodiff as ad
from mae3d import checkpoint as ck
from mae3d import downstream as ds
from mae3d.config import DownstreamConfig, to_flat
from mae3d.model import MAE3D
from mae3d.training import make_optimizer, pretrain

from conftest import tiny_model_config, tiny_pretrain_config


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(0)
    cfg = tiny_pretrain_config(epochs=1)
    clouds = [rng.normal(size=(64, 3)) for _ in range(4)]
    return cfg, pretrain(clouds, cfg)


def _save(tmp_path, cfg, res, name="m.ckpt"):
    path = tmp_path / name
    ck.save(path, res.model, to_flat(cfg, cfg.model), cfg.model.hash(), epoch=cfg.epochs, optimizer=res.optimizer)
    return path


def test_round_trip_bitwise(tmp_path, trained):
    cfg, res = trained
    loaded = ck.load(_save(tmp_path, cfg, res))
    for name, p in res.model.named_parameters():
        assert loaded.params[name].dtype == np.float32
        assert loaded.params[name].tobytes() == p.data.tobytes()
    st = res.optimizer.state
    assert loaded.optimizer.step == st.step
    for name in st.m:
        assert loaded.optimizer.m[name].tobytes() == st.m[name].tobytes()
        assert loaded.optimizer.v[name].tobytes() == st.v[name].tobytes()
    assert loaded.epoch == cfg.epochs
    assert loaded.config_hash == cfg.model.hash()
    assert loaded.components() == ["extractor", "pos_embed", "reconstruction", "transformer"]


def test_restore_into_fresh_model(tmp_path, trained):
    cfg, res = trained
    model = MAE3D(cfg.model, seed=99)
    ck.restore(model, ck.load(_save(tmp_path, cfg, res)))
    for (n, a), (_, b) in zip(model.named_parameters(), res.model.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n


def test_resume_optimizer_continues_identically(tmp_path, trained):
    cfg, res = trained
    loaded = ck.load(_save(tmp_path, cfg, res))
    model = MAE3D(cfg.model, seed=99)
    ck.restore(model, loaded)
    opt = make_optimizer(model, cfg)
    opt.state = loaded.optimizer
    for m, o in ((res.model, res.optimizer), (model, opt)):
        for p in m.parameters():
            p.grad = np.full_like(p.data, 0.01)
        o.step(1e-3)
    for (n, a), (_, b) in zip(model.named_parameters(), res.model.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n


def test_hash_mismatch_requires_force(tmp_path, trained):
    cfg, res = trained
    loaded = ck.load(_save(tmp_path, cfg, res))
    other = MAE3D(tiny_model_config(patch_radius=0.5), seed=0)
    with pytest.raises(ck.CheckpointError, match="hash mismatch"):
        ck.restore(other, loaded)
    ck.restore(other, loaded, force=True)


def test_shape_mismatch_names_parameter(tmp_path, trained):
    cfg, res = trained
    loaded = ck.load(_save(tmp_path, cfg, res))
    other = MAE3D(tiny_model_config(d_feat=24), seed=0)
    with pytest.raises(ck.CheckpointError, match="extractor.linears.2.weight"):
        ck.restore(other, loaded, force=True)


def test_subset_extractor_only(tmp_path, trained):
    cfg, res = trained
    path = _save(tmp_path, cfg, res)
    sub = ck.load(path, subset="extractor")
    assert sub.components() == ["extractor"]
    assert sub.optimizer is None
    both = ck.load(path, subset="extractor+pos")
    assert both.components() == ["extractor", "pos_embed"]
    with pytest.raises(ck.CheckpointError, match="unknown subset"):
        ck.load(path, subset="decoder")


def test_subset_load_leaves_head_random(tmp_path, trained):
    cfg, res = trained
    sub = ck.load(_save(tmp_path, cfg, res), subset="extractor")
    down = DownstreamConfig(seed=3)
    pre = ds.build_classifier(cfg.model, 4, down, sub)
    scratch = ds.build_classifier(cfg.model, 4, down, None)
    for (n, a), (_, b) in zip(pre.head.named_parameters(), scratch.head.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n
    for (n, a), (_, b) in zip(pre.backbone.extractor.named_parameters(), res.model.extractor.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n


def test_loaded_extractor_preserves_patch_outputs(tmp_path, trained):
    cfg, res = trained
    bb = ds.build_backbone(cfg.model, 7, ck.load(_save(tmp_path, cfg, res), subset="extractor"))
    patches = np.random.default_rng(1).normal(size=(3, 4, 16, 3)).astype(np.float32)
    a = res.model.extractor(ad.Tensor(patches)).data
    b = bb.extractor(ad.Tensor(patches)).data
    assert a.tobytes() == b.tobytes()


def test_truncated_file_reports_offset(tmp_path, trained):
    cfg, res = trained
    path = _save(tmp_path, cfg, res)
    raw = path.read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(ck.CheckpointError, match=r"offset \d+: truncated"):
        ck.load(cut)


def test_bad_magic_and_trailing_bytes(tmp_path, trained):
    cfg, res = trained
    raw = _save(tmp_path, cfg, res).read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ck.CheckpointError, match="offset 0: bad magic"):
        ck.load(bad)
    bad.write_bytes(raw + b"\0\0")
    with pytest.raises(ck.CheckpointError, match=f"offset {len(raw)}: 2 trailing"):
        ck.load(bad)


def test_corrupt_rank_reports_offset(tmp_path, trained):
    cfg, res = trained
    raw = bytearray(_save(tmp_path, cfg, res).read_bytes())
    (mlen,) = struct.unpack_from("<I", raw, 8)
    first = 12 + mlen + 4  # start of the first parameter entry
    (nlen,) = struct.unpack_from("<I", raw, first)
    rank_at = first + 4 + nlen
    struct.pack_into("<I", raw, rank_at, 99)
    bad = tmp_path / "rank.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ck.CheckpointError, match=f"offset {rank_at}: implausible rank 99"):
        ck.load(bad)


def test_layout_matches_documented_format(tmp_path):
    class One(ad.Module):
        def __init__(self):
            self.w = ad.Parameter(np.arange(6, dtype=np.float32).reshape(2, 3))

        def named_parameters(self, prefix=""):
            yield "extractor.w", self.w

    path = tmp_path / "one.ckpt"
    ck.save(path, One())
    raw = path.read_bytes()
    assert raw[:8] == b"MAE3DCK1"
    (mlen,) = struct.unpack_from("<I", raw, 8)
    off = 12 + mlen
    assert struct.unpack_from("<II", raw, off) == (1, len("extractor.w"))
    off += 8
    assert raw[off:off + 11] == b"extractor.w"
    off += 11
    assert struct.unpack_from("<IQQ", raw, off) == (2, 2, 3)
    off += 20
    np.testing.assert_array_equal(np.frombuffer(raw[off:off + 24], "<f4"), np.arange(6))
    assert raw[off + 24:] == struct.pack("<II", 0, 0)
