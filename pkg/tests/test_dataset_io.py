import json
import os

import numpy as np
import pytest

from eigenshape import dataset as ds
from eigenshape import models as M


def toy_record(seed=0, d=8, k=2):
    rng = np.random.default_rng(seed)
    image = rng.random((d, d)).astype(np.float32)
    rasters = rng.standard_normal((k, d, d)).astype(np.float32)
    return ds.EigenRecord(
        image=image,
        mask=(image > 0.5).astype(np.float32),
        eigenvalues=np.sort(rng.uniform(20, 200, k)).astype(np.float32),
        rasters=rasters,
        scale=float(np.float32(1.25)),
        gaps=rng.uniform(1, 10, k).astype(np.float32),
        kind="smooth",
    )


class TestRecordBlob:
    def test_roundtrip_bitwise(self):
        rec = toy_record()
        back = ds.record_from_bytes(ds.record_to_bytes(rec))
        assert np.array_equal(rec.image, back.image)
        assert np.array_equal(rec.mask, back.mask)
        assert np.array_equal(rec.eigenvalues, back.eigenvalues)
        assert np.array_equal(rec.rasters, back.rasters)
        assert np.array_equal(rec.gaps, back.gaps)
        assert rec.scale == back.scale

    def test_blob_size_formula(self):
        rec = toy_record(d=32, k=20)
        blob = ds.record_to_bytes(rec)
        assert len(blob) == 16 + 4 * (1024 + 1024 + 20 + 20480 + 1 + 20)

    def test_truncation_detected(self):
        blob = ds.record_to_bytes(toy_record())
        with pytest.raises(ds.TruncatedRecord):
            ds.record_from_bytes(blob[:-8])
        with pytest.raises(ds.TruncatedRecord):
            ds.record_from_bytes(blob[:10])

    def test_bad_magic_and_version(self):
        blob = ds.record_to_bytes(toy_record())
        with pytest.raises(ds.VersionUnsupported):
            ds.record_from_bytes(b"XXXX" + blob[4:])
        bad_version = blob[:4] + (99).to_bytes(4, "little") + blob[8:]
        with pytest.raises(ds.VersionUnsupported):
            ds.record_from_bytes(bad_version)


class TestDatasetDir:
    def test_roundtrip(self, tmp_path):
        records = [toy_record(s) for s in range(3)]
        manifest = {"version": 1, "d": 8, "k": 2, "counts": {"smooth": 3, "polygon": 0}}
        ds.write_dataset(records, manifest, str(tmp_path))
        back, mani = ds.read_dataset(str(tmp_path))
        assert len(back) == 3
        for a, b in zip(records, back):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.rasters, b.rasters)
        assert mani["counts"]["smooth"] == 3

    def test_checksum_mismatch(self, tmp_path):
        ds.write_dataset([toy_record()], {"version": 1}, str(tmp_path))
        target = tmp_path / "records" / "00000.eigr"
        data = bytearray(target.read_bytes())
        data[40] ^= 0x55
        target.write_bytes(bytes(data))
        with pytest.raises(ds.ChecksumMismatch):
            ds.read_dataset(str(tmp_path))

    def test_version_gate(self, tmp_path):
        ds.write_dataset([toy_record()], {"version": 1}, str(tmp_path))
        mani = json.loads((tmp_path / "manifest.json").read_text())
        mani["version"] = 42
        (tmp_path / "manifest.json").write_text(json.dumps(mani))
        with pytest.raises(ds.VersionUnsupported):
            ds.read_dataset(str(tmp_path))

    def test_no_tmp_files_left(self, tmp_path):
        ds.write_dataset([toy_record()], {"version": 1}, str(tmp_path))
        leftovers = [f for f in os.listdir(tmp_path) if f.endswith(".tmp")]
        assert leftovers == []


class TestGenerationDeterminism:
    def test_same_seed_byte_identical(self, tmp_path):
        a, ma = ds.generate_dataset(4, d=16, k=1, h=0.05, seed=3)
        b, mb = ds.generate_dataset(4, d=16, k=1, h=0.05, seed=3)
        for ra, rb in zip(a, b):
            assert ds.record_to_bytes(ra) == ds.record_to_bytes(rb)
        assert ma == mb
        p1, p2 = tmp_path / "d1", tmp_path / "d2"
        ds.write_dataset(a, ma, str(p1))
        ds.write_dataset(b, mb, str(p2))
        for name in sorted(os.listdir(p1 / "records")):
            assert (p1 / "records" / name).read_bytes() == (p2 / "records" / name).read_bytes()
        assert (p1 / "manifest.json").read_bytes() == (p2 / "manifest.json").read_bytes()

    def test_record_contracts(self):
        records, manifest = ds.generate_dataset(2, d=16, k=2, h=0.05, seed=1, audit=True)
        for rec in records:
            assert np.all(rec.eigenvalues > 0)
            assert np.all(np.diff(rec.eigenvalues) >= 0)
            for i in range(rec.k):
                assert np.linalg.norm(rec.rasters[i]) == pytest.approx(16.0, abs=1e-3)
            assert np.array_equal(rec.mask, (rec.image > 0).astype(np.float32))


class TestCheckpoint:
    def test_roundtrip_forward_bitwise(self, tmp_path):
        model = M.build_cnn(32, seed=4)
        x = np.random.default_rng(0).random((2, 1, 32, 32), dtype=np.float32)
        model.forward(x, train=True)
        before = model.forward(x, train=False)
        path = str(tmp_path / "m.ckpt")
        ds.write_checkpoint(model, {"eig_index": 1, "epoch": 5}, path)
        loaded, header = ds.read_checkpoint(path)
        after = loaded.forward(x, train=False)
        assert np.array_equal(before, after)
        assert header["epoch"] == 5

    def test_fno_roundtrip(self, tmp_path):
        model = M.build_fno(32, seed=4)
        x = M.add_positional_encoding(
            np.random.default_rng(1).random((1, 1, 32, 32), dtype=np.float32))
        before = model.forward(x, train=False)
        path = str(tmp_path / "f.ckpt")
        ds.write_checkpoint(model, {"eig_index": 1}, path)
        loaded, _ = ds.read_checkpoint(path)
        assert np.array_equal(before, loaded.forward(x, train=False))

    def test_truncated(self, tmp_path):
        model = M.build_cnn(32, seed=4)
        path = str(tmp_path / "m.ckpt")
        ds.write_checkpoint(model, {}, path)
        data = open(path, "rb").read()
        open(path, "wb").write(data[: len(data) // 3])
        with pytest.raises(ds.TruncatedRecord):
            ds.read_checkpoint(path)

    def test_census_mismatch_wrong_d(self, tmp_path):
        import struct

        model = M.build_cnn(32, seed=4)
        path = str(tmp_path / "m.ckpt")
        ds.write_checkpoint(model, {}, path)
        raw = open(path, "rb").read()
        hlen = struct.unpack("<I", raw[4:8])[0]
        header = json.loads(raw[8:8 + hlen])
        header["d"] = 64  # d=64 census disagrees with the stored d=32 tensors
        hj = json.dumps(header, sort_keys=True).encode()
        open(path, "wb").write(raw[:4] + struct.pack("<I", len(hj)) + hj + raw[8 + hlen:])
        with pytest.raises(ds.CensusMismatch):
            ds.read_checkpoint(path)
