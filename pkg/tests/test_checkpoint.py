import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from iap import checkpoint as ckpt
from iap.errors import FormatError


def _tensors():
    rng = np.random.default_rng(0)
    return {
        "backbone/w": rng.standard_normal((3, 4)).astype(np.float32),
        "prompt/0/vision/0/K": rng.standard_normal((2, 4)).astype(np.float32),
        "stats/0/mu": np.array([1.5, -2.25], dtype=np.float32),
        "scalar": np.float32(7.0),
    }


def _manifest_span(blob: bytes):
    mlen = struct.unpack_from("<Q", blob, len(ckpt.MAGIC) + 4)[0]
    start = len(ckpt.MAGIC) + 12
    return start, start + mlen


class TestRoundTrip:
    def test_bit_exact(self):
        src = _tensors()
        blob, manifest = ckpt.encode(src, {"seed": 3})
        out, meta = ckpt.decode(blob)
        assert meta == {"seed": 3} and list(out) == list(src)
        for k, v in src.items():
            assert out[k].tobytes() == np.asarray(v).tobytes() and out[k].shape == np.shape(v)

    def test_save_load_save_identical(self, tmp_path):
        ckpt.save(tmp_path / "a.iap", _tensors(), {"note": "x"})
        t, meta = ckpt.load(tmp_path / "a.iap")
        ckpt.save(tmp_path / "b.iap", t, meta)
        assert (tmp_path / "a.iap").read_bytes() == (tmp_path / "b.iap").read_bytes()

    def test_manifest_entries(self):
        blob, manifest = ckpt.encode(_tensors())
        assert len(manifest["entries"]) == len(_tensors())
        spans = [(e["offset"], e["offset"] + e["nbytes"]) for e in manifest["entries"]]
        assert spans[0][0] == 0 and all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
        assert spans[-1][1] == manifest["payload_bytes"]
        assert all(e["element_width"] == 4 for e in manifest["entries"])

    def test_little_endian_float32_payload(self):
        blob, manifest = ckpt.encode({"x": np.array([1.0, -2.0])})
        assert blob[-8:] == struct.pack("<2f", 1.0, -2.0)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(1, 5)),
                  elements=st.floats(width=32, allow_nan=False)))
    def test_property(self, arr):
        out, _ = ckpt.decode(ckpt.encode({"a": arr, "b": arr[::-1].copy()})[0])
        assert out["a"].tobytes() == arr.tobytes() and out["b"].tobytes() == arr[::-1].tobytes()

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        ckpt.atomic_write(tmp_path / "f.txt", "hello")
        assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]


class TestCorruption:
    def test_bad_magic(self):
        blob, _ = ckpt.encode(_tensors())
        with pytest.raises(FormatError, match="magic"):
            ckpt.decode(b"X" + blob[1:])

    def test_version_mismatch(self):
        blob, _ = ckpt.encode(_tensors())
        bumped = blob[:len(ckpt.MAGIC)] + struct.pack("<I", ckpt.VERSION + 1) + blob[len(ckpt.MAGIC) + 4:]
        with pytest.raises(FormatError, match="version"):
            ckpt.decode(bumped)

    @pytest.mark.parametrize("cut", [4, 10, 30, 200])
    def test_truncated(self, cut):
        blob, _ = ckpt.encode(_tensors())
        with pytest.raises(FormatError):
            ckpt.decode(blob[:-cut])

    def test_payload_byte_tampered(self):
        blob, _ = ckpt.encode(_tensors())
        for pos in (len(blob) - 1, len(blob) - 30):
            bad = bytearray(blob)
            bad[pos] ^= 0x01
            with pytest.raises(FormatError, match="checksum"):
                ckpt.decode(bytes(bad))

    def test_overlapping_offsets(self):
        blob, _ = ckpt.encode(_tensors())
        a, b = _manifest_span(blob)
        manifest = json.loads(blob[a:b])
        manifest["entries"][1]["offset"] = 0
        head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        forged = blob[:len(ckpt.MAGIC)] + struct.pack("<IQ", ckpt.VERSION, len(head)) + head + blob[b:]
        with pytest.raises(FormatError, match="overlaps"):
            ckpt.decode(forged)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ckpt.load(tmp_path / "nope.iap")
