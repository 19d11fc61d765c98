import hashlib
import json
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pluto import store as ps
from pluto.store import (BadMagicError, ConflictError, DigestError, ModuleRecord, ModuleStore, NotFoundError,
                         ShapeError, TruncationError, VersionError, adapter_param_count, deserialize, serialize,
                         selector_param_count, vpt_param_count)
from pluto.vit import VitConfig, random_module


class TestFormulas:
    def test_vpt(self):
        assert vpt_param_count(8, 32) == 256
        assert vpt_param_count(1, 1) == 1
        with pytest.raises(ValueError):
            vpt_param_count(0, 32)

    def test_adapter(self):
        assert adapter_param_count(2, 32, 8) == 2048
        assert adapter_param_count(1, 1, 1) == 4
        assert adapter_param_count(4, 32, 8) == 2 * adapter_param_count(2, 32, 8)
        with pytest.raises(ValueError):
            adapter_param_count(0, 32, 8)

    def test_selector(self):
        assert selector_param_count(32, 8, 8, 8, 4) == 448
        assert selector_param_count(1, 1, 1, 1, 1) == 8
        with pytest.raises(ValueError):
            selector_param_count(32, 0, 8, 8, 4)

    @given(st.integers(1, 50), st.integers(1, 50), st.integers(1, 50), st.integers(1, 50), st.integers(1, 50))
    def test_selector_linear_in_v(self, d, dx, dl, dp, v):
        assert selector_param_count(d, dx, dl, dp, v + 1) - selector_param_count(d, dx, dl, dp, v) == dl

    @pytest.mark.parametrize("kind,size", [("vpt", 1), ("vpt", 8), ("adapter", 1), ("adapter", 8)])
    def test_stored_counts_match_formula(self, kind, size):
        rec = random_module(VitConfig(), kind, size)
        assert rec.payload_param_count() == rec.formula_param_count()
        assert rec.head_param_count() == 32 * 10 + 10


class TestContainer:
    @pytest.fixture
    def rec(self, cfg):
        return random_module(cfg, "adapter", 4, seed=2, module_id="adapter-a", domain_label="blur:sev3")

    def test_layout(self, rec):
        buf = serialize(rec)
        magic, version, hlen = struct.unpack_from("<4sHI", buf)
        assert (magic, version) == (b"PLUT", 1)
        header = json.loads(buf[10 : 10 + hlen])
        assert header["id"] == "adapter-a" and header["kind"] == "adapter"
        names = [t["name"] for t in header["tensors"]]
        assert names[:4] == ["layer0.attn.W_down", "layer0.attn.b_down", "layer0.attn.W_up", "layer0.attn.b_up"]
        n_floats = sum(int(np.prod(t["shape"])) for t in header["tensors"])
        assert len(buf) == 10 + hlen + 4 * n_floats + 32
        assert buf[-32:] == hashlib.sha256(buf[:-32]).digest()
        first = np.frombuffer(buf, "<f4", count=4, offset=10 + hlen)
        np.testing.assert_array_equal(first, rec.payload["layer0.attn.W_down"].ravel()[:4])

    def test_round_trip_and_determinism(self, rec):
        buf = serialize(rec)
        assert serialize(rec) == buf
        back = deserialize(buf)
        assert back.equals(rec)  # records from random_module are already quantized
        assert serialize(back) == buf

    def test_quantization_applied_once(self, rec):
        noisy = ModuleRecord(rec.id, rec.domain_label, rec.kind, rec.hyper,
                             {k: v + 1e-9 for k, v in rec.payload.items()}, rec.head_weight, rec.head_bias)
        once = deserialize(serialize(noisy))
        twice = deserialize(serialize(once))
        assert twice.equals(once)
        for k in once.payload:
            np.testing.assert_array_equal(once.payload[k], noisy.payload[k].astype(np.float32).astype(np.float64))

    def test_bad_magic(self, rec):
        buf = bytearray(serialize(rec))
        buf[0:4] = b"NOPE"
        with pytest.raises(BadMagicError):
            deserialize(bytes(buf))

    def test_bad_version(self, rec):
        buf = bytearray(serialize(rec))
        buf[4:6] = struct.pack("<H", 2)
        with pytest.raises(VersionError):
            deserialize(bytes(buf))

    def test_truncated_names_lengths(self, rec):
        buf = serialize(rec)
        with pytest.raises(TruncationError, match=rf"expected {len(buf)} bytes, got {len(buf) - 100}"):
            deserialize(buf[:-100])
        with pytest.raises(TruncationError):
            deserialize(buf[:7])

    def test_flipped_payload_bit(self, rec):
        buf = bytearray(serialize(rec))
        buf[len(buf) // 2] ^= 0x01
        with pytest.raises(DigestError):
            deserialize(bytes(buf))

    def test_shape_mismatch(self, rec, cfg):
        with pytest.raises(ShapeError):
            ModuleRecord("x", "", "vpt", {"prompts": 3, "embed_dim": 32, "classes": 10},
                         {"prompts": np.zeros((2, 32))}, rec.head_weight, rec.head_bias)
        # A container whose manifest disagrees with its hyper is rejected at load.
        header = {"id": "x", "domain_label": "", "kind": "vpt", "hyper": {"prompts": 3, "embed_dim": 32, "classes": 10},
                  "meta": {}}
        buf = ps.pack_container(header, {"prompts": np.zeros((2, 32)), "head.weight": rec.head_weight,
                                         "head.bias": rec.head_bias})
        with pytest.raises(ShapeError):
            deserialize(buf)

    def test_unsafe_id_rejected(self, rec):
        with pytest.raises(ValueError):
            ModuleRecord("../escape", "", rec.kind, rec.hyper, rec.payload, rec.head_weight, rec.head_bias)

    def test_u16_tensor(self):
        buf = ps.pack_container({"kind": "dataset"}, {"labels": np.array([0, 7, 65535])}, {"labels": "u16"})
        header, tensors = ps.unpack_container(buf)
        assert header["tensors"][0]["dtype"] == "u16"
        np.testing.assert_array_equal(tensors["labels"], [0, 7, 65535])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_round_trip_property(self, p, seed):
        rec = random_module(VitConfig(), "vpt", p, seed=seed)
        assert deserialize(serialize(rec)).equals(rec)


class TestModuleStore:
    @pytest.fixture
    def records(self, cfg):
        return [random_module(cfg, "vpt" if j % 2 else "adapter", 2, seed=j, module_id=f"m{3 - j}",
                              domain_label=f"d{j}:sev1") for j in range(4)]

    def test_put_list_get(self, tmp_path, records):
        s = ModuleStore(tmp_path)
        for r in records:
            ps.store_put(s, r)
        listing = ps.store_list(s)
        assert [e["id"] for e in listing] == ["m0", "m1", "m2", "m3"]
        assert set(listing[0]) == {"id", "domain_label", "kind", "sha256"}
        got = ps.store_get(s, "m2")
        assert got.equals(records[1])
        assert hashlib.sha256(serialize(got)).hexdigest() == listing[2]["sha256"]

    def test_conflict_and_not_found(self, tmp_path, records):
        s = ModuleStore(tmp_path)
        s.put(records[0])
        with pytest.raises(ConflictError, match="conflict:m3"):
            s.put(records[0])
        with pytest.raises(NotFoundError, match="not_found:zzz"):
            s.get("zzz")

    def test_tampered_file_rejected(self, tmp_path, records):
        s = ModuleStore(tmp_path)
        s.put(records[0])
        path = tmp_path / "m3.plut"
        buf = bytearray(path.read_bytes())
        buf[20] ^= 0xFF
        path.write_bytes(bytes(buf))
        with pytest.raises(DigestError):
            s.get("m3")

    def test_persists_across_instances(self, tmp_path, records):
        ModuleStore(tmp_path).put(records[0])
        assert "m3" in ModuleStore(tmp_path) and len(ModuleStore(tmp_path)) == 1
        assert (tmp_path / "store.json").exists()

    def test_stored_counts_match_formulas(self, tmp_path, records):
        s = ModuleStore(tmp_path)
        for r in records:
            s.put(r)
        for e in s.list():
            r = s.get(e["id"])
            assert r.payload_param_count() == r.formula_param_count()

    def test_concurrent_puts_keep_index_consistent(self, tmp_path, cfg):
        s = ModuleStore(tmp_path)
        recs = [random_module(cfg, "vpt", 2, seed=j, module_id=f"c{j:02d}") for j in range(16)]
        errors = []

        def put(r):
            try:
                ModuleStore(tmp_path).put(r)
                ModuleStore(tmp_path).list()
            except Exception as exc:  # pragma: no cover - surfaced below
                errors.append(exc)

        threads = [threading.Thread(target=put, args=(r,)) for r in recs]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert [e["id"] for e in s.list()] == [f"c{j:02d}" for j in range(16)]
        for r in recs:
            assert s.get(r.id).equals(r)
