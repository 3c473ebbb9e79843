import json
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from sednet.dataio import (FingerprintError, FormatError, VersionError, decode_volume,
                           encode_volume, load_dataset, load_model, load_volume, load_weights,
                           read_weights, save_dataset, save_volume, save_weights, synth_generate,
                           synth_slice)
from sednet.model import ModelConfig, build, forward, freeze_for_transfer
from sednet.preprocess import Volume
from sednet.trainer import TrainConfig, frozen_checksum, transfer_train

SMALL = dict(input_height=16, input_width=16, base_filters=4)


def sample_volume(rng, s=3, h=5, w=7, sid="case_001"):
    images = rng.normal(size=(s, h, w)).astype(np.float32)
    masks = rng.choice([0, 1, 2, 4], size=(s, h, w)).astype(np.uint8)
    return Volume(sid, images, masks, slice_ids=np.array([4, 9, 11][:s]))


def header_of(blob):
    hlen = struct.unpack_from("<I", blob, 7)[0]
    return json.loads(blob[11:11 + hlen]), hlen


def rebuild(header, payload):
    hb = json.dumps(header).encode()
    return b"SEDVOL" + struct.pack("<BI", 1, len(hb)) + hb + payload


class TestVolumeFormat:
    def test_round_trip(self, rng, tmp_path):
        vol = sample_volume(rng)
        path = save_volume(tmp_path / "a.sedvol", vol)
        back = load_volume(path)
        assert back.sample_id == vol.sample_id
        assert back.images.tobytes() == vol.images.tobytes()
        np.testing.assert_array_equal(back.masks, vol.masks)
        np.testing.assert_array_equal(back.slice_ids, vol.slice_ids)
        assert back.label_map == vol.label_map

    def test_inflated_slice_count(self, rng):
        vol = sample_volume(rng)
        blob = encode_volume(vol)
        header, hlen = header_of(blob)
        header["slices"] += 1
        header["slice_ids"].append(99)
        bad = rebuild(header, blob[11 + hlen:])
        with pytest.raises(FormatError, match="bytes"):
            decode_volume(bad)

    def test_version_mismatch(self, rng):
        blob = bytearray(encode_volume(sample_volume(rng)))
        blob[6] = 2
        with pytest.raises(VersionError, match="version 2"):
            decode_volume(bytes(blob))

    def test_bad_magic(self, rng):
        blob = b"XXXXXX" + encode_volume(sample_volume(rng))[6:]
        with pytest.raises(FormatError, match="magic"):
            decode_volume(blob)

    def test_truncated(self, rng):
        blob = encode_volume(sample_volume(rng))
        for cut in (0, 5, 10, 20, len(blob) - 1):
            with pytest.raises(FormatError):
                decode_volume(blob[:cut])

    def test_zero_slice_volume(self):
        vol = Volume("empty", np.zeros((0, 4, 4), np.float32), np.zeros((0, 4, 4), np.uint8))
        assert len(decode_volume(encode_volume(vol))) == 0

    def test_dataset_sorted(self, rng, tmp_path):
        vols = [sample_volume(rng, sid=s) for s in ("b", "a", "c")]
        save_dataset(tmp_path, vols)
        assert [v.sample_id for v in load_dataset(tmp_path)] == ["a", "b", "c"]

    def test_empty_dir(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_atomic_no_leftovers(self, rng, tmp_path):
        save_volume(tmp_path / "x.sedvol", sample_volume(rng))
        save_volume(tmp_path / "x.sedvol", sample_volume(rng))
        assert [p.name for p in tmp_path.iterdir()] == ["x.sedvol"]


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-5, 10**6) | st.text(max_size=5),
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.text(max_size=8), inner, max_size=3),
    max_leaves=8,
)


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.dictionaries(st.sampled_from(["sample_id", "slices", "height", "width", "image_dtype",
                                        "mask_dtype", "label_map", "slice_ids", "junk"]),
                       json_values), st.binary(max_size=64))
def test_fuzzed_header_raises_format_error(header, payload):
    blob = rebuild(header, payload)
    try:
        decode_volume(blob)
    except FormatError:
        pass


@settings(max_examples=150, deadline=None)
@given(st.binary(max_size=80))
def test_fuzzed_bytes_raise_format_error(tail):
    for blob in (tail, b"SEDVOL" + tail, b"SEDVOL\x01" + tail):
        try:
            decode_volume(blob)
        except FormatError:
            pass


class TestSynthetic:
    def test_deterministic(self):
        a = synth_generate(5, 2, 4, 32, 32)
        b = synth_generate(5, 2, 4, 32, 32)
        for va, vb in zip(a, b):
            assert va.images.tobytes() == vb.images.tobytes()
            assert va.masks.tobytes() == vb.masks.tobytes()
        c = synth_generate(6, 2, 4, 32, 32)
        assert a[0].images.tobytes() != c[0].images.tobytes()

    def test_label_codes(self):
        vols = synth_generate(1, 3, 10, 32, 32)
        codes = set(np.unique(np.concatenate([v.masks.ravel() for v in vols])).tolist())
        assert codes <= {0, 1, 2, 4}
        assert {1, 2, 4} <= codes

    def test_empty_fraction(self):
        vols = synth_generate(0, 10, 100, 32, 32, empty_rate=0.3)
        empty = sum(int(not m.any()) for v in vols for m in v.masks)
        assert abs(empty / 1000 - 0.3) <= 0.05

    def test_nesting(self):
        rng = np.random.default_rng(11)
        h = w = 48
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        for _ in range(20):
            _, mask, regions = synth_slice(rng, h, w, int(rng.integers(1, 4)))
            for r in regions:
                cy, cx = r["center"]
                ry, rx = r["radii"]
                c, s = np.cos(r["theta"]), np.sin(r["theta"])
                u = ((yy - cy) * c + (xx - cx) * s) / ry
                v = (-(yy - cy) * s + (xx - cx) * c) / rx
                rho = np.sqrt(u * u + v * v)
                sc = r["scales"]
                assert sc["ET"] < sc["NTC"] < sc["ED"]
                assert np.all(mask[rho <= sc["ET"]] == 4)
                assert np.all(np.isin(mask[rho <= sc["NTC"]], (1, 4)))
                assert np.all(mask[rho <= sc["ED"]] != 0)

    def test_tumor_is_brighter(self):
        rng = np.random.default_rng(2)
        img, mask, _ = synth_slice(rng, 64, 64, 2)
        assert img[mask > 0].mean() > img[mask == 0].mean()


class TestWeights:
    def test_round_trip_bit_identical(self, rng, tmp_path):
        model = build(ModelConfig(seed=7, **SMALL))
        path = save_weights(tmp_path / "m.sedw", model)
        back = load_model(path)
        x = rng.random((2, 16, 16, 1)).astype(np.float32)
        assert forward(model, x).data.tobytes() == forward(back, x).data.tobytes()

    def test_trainable_flags_restored(self, tmp_path):
        model = freeze_for_transfer(build(ModelConfig(**SMALL)))
        back = load_model(save_weights(tmp_path / "m.sedw", model))
        assert {k: p.trainable for k, p in back.params.items()} == \
               {k: p.trainable for k, p in model.params.items()}

    def test_fingerprint_mismatch(self, tmp_path):
        path = save_weights(tmp_path / "m.sedw", build(ModelConfig(**SMALL)))
        other = build(ModelConfig(input_height=16, input_width=16, base_filters=8))
        with pytest.raises(FingerprintError):
            load_weights(path, other)

    def test_seed_does_not_block_loading(self, tmp_path):
        path = save_weights(tmp_path / "m.sedw", build(ModelConfig(seed=1, **SMALL)))
        load_weights(path, build(ModelConfig(seed=2, **SMALL)))

    def test_truncated_payload(self, tmp_path):
        path = save_weights(tmp_path / "m.sedw", build(ModelConfig(**SMALL)))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError, match="offset"):
            read_weights(path)

    def test_archive_feeds_transfer(self, rng, tmp_path):
        model = build(ModelConfig(**SMALL))
        path = save_weights(tmp_path / "m.sedw", model)
        x = rng.random((3, 16, 16, 1)).astype(np.float32)
        y = (rng.random((3, 16, 16, 3)) < 0.3).astype(np.uint8)
        res = transfer_train(path, [(x, y)], [(x, y)], TrainConfig(epochs=2))
        assert res.checksum_before == res.checksum_after == frozen_checksum(model)
        assert res.trainable == 4 * 3 + 3
