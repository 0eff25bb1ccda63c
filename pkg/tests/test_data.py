import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmnas.data import (ArrayCache, BadMagicError, DimMismatchError, LabelDomainError, ManifestError,
                        MissingVolumeError, PairedStudy, TruncatedVolumeError, Volume, ZeroDimsError,
                        blob_centers, decode_volume, encode_volume, gaussian_blob, load_manifest,
                        make_folds, normalize_volume, read_volume, synth_generate, write_manifest,
                        write_volume)


def study(i, label, dims=(2, 2, 2)):
    return PairedStudy(f"s{i:03d}", Volume(np.zeros(dims), "pet"), Volume(np.zeros(dims), "ct"), label)


def balanced(n):
    return [study(i, i % 2) for i in range(n)]


# ---------------------------------------------------------------- volumes


def test_volume_round_trip(rng, tmp_path):
    vol = Volume(rng.standard_normal((4, 3, 2)), "ct")
    write_volume(vol, tmp_path / "v.mmv")
    back = read_volume(tmp_path / "v.mmv", "ct")
    assert back == vol and back.voxels.tobytes() == vol.voxels.tobytes()


def test_volume_file_size_and_layout():
    v = np.arange(8.0).reshape(2, 2, 2)
    blob = encode_volume(Volume(v))
    assert len(blob) == 80
    assert blob[:16] == b"MMV1" + struct.pack("<3I", 2, 2, 2)
    # z is the fastest-varying axis
    assert struct.unpack("<2d", blob[16:32]) == (v[0, 0, 0], v[0, 0, 1])


def test_bad_magic():
    blob = b"XXXX" + encode_volume(Volume(np.zeros((2, 2, 2))))[4:]
    with pytest.raises(BadMagicError):
        decode_volume(blob)


def test_truncated_and_zero_dims():
    blob = encode_volume(Volume(np.zeros((2, 2, 2))))
    with pytest.raises(TruncatedVolumeError):
        decode_volume(blob[:-8])
    with pytest.raises(TruncatedVolumeError):
        decode_volume(blob[:10])
    with pytest.raises(ZeroDimsError):
        decode_volume(b"MMV1" + struct.pack("<3I", 2, 0, 2))


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.integers(1, 6)] * 3), st.integers(0, 2**32 - 1))
def test_round_trip_bit_exact_property(dims, seed):
    v = np.random.default_rng(seed).standard_normal(dims) * 1e3
    assert decode_volume(encode_volume(Volume(v))).voxels.tobytes() == v.tobytes()


def test_normalize_examples(rng):
    np.testing.assert_array_equal(normalize_volume(Volume(np.array([0.0, 2.0]).reshape(1, 1, 2))).voxels.ravel(),
                                  [-1.0, 1.0])
    np.testing.assert_array_equal(normalize_volume(Volume(np.full((2, 2, 2), 3.3))).voxels, 0.0)
    for _ in range(20):
        out = normalize_volume(Volume(rng.standard_normal((4, 5, 6)) * 7 + 2)).voxels
        assert abs(out.mean()) <= 1e-12
        assert abs(out.var() - 1.0) <= 1e-9


# ---------------------------------------------------------------- manifests


def test_manifest_happy_path(tmp_path):
    studies, _ = synth_generate(2, (8, 8, 8), 0.1, 0)
    path = write_manifest(studies, tmp_path)
    loaded = load_manifest(path)
    assert len(loaded) == 2 and loaded == studies


def write_records(tmp_path, records):
    path = tmp_path / "manifest.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return path


def test_manifest_dim_mismatch_names_id(tmp_path):
    write_volume(Volume(np.zeros((8, 8, 8))), tmp_path / "p.mmv")
    write_volume(Volume(np.zeros((16, 16, 16))), tmp_path / "c.mmv")
    path = write_records(tmp_path, [{"id": "case7", "pet_path": "p.mmv", "ct_path": "c.mmv", "label": 0}])
    with pytest.raises(DimMismatchError, match="case7"):
        load_manifest(path)


def test_manifest_label_domain(tmp_path):
    write_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "p.mmv")
    path = write_records(tmp_path, [{"id": "a", "pet_path": "p.mmv", "ct_path": "p.mmv", "label": 2}])
    with pytest.raises(LabelDomainError):
        load_manifest(path)


def test_manifest_missing_volume_and_file(tmp_path):
    path = write_records(tmp_path, [{"id": "a", "pet_path": "nope.mmv", "ct_path": "nope.mmv", "label": 0}])
    with pytest.raises(MissingVolumeError):
        load_manifest(path)
    with pytest.raises(MissingVolumeError):
        load_manifest(tmp_path / "absent.jsonl")


def test_manifest_malformed_line_named(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"id": "a"}\n')
    with pytest.raises(ManifestError, match="line 1"):
        load_manifest(path)


def test_error_classes_are_distinct():
    kinds = {DimMismatchError, LabelDomainError, MissingVolumeError}
    assert len(kinds) == 3 and all(issubclass(k, ManifestError) for k in kinds)


# ---------------------------------------------------------------- folds


def test_forty_eight_studies_six_folds():
    plan = make_folds(balanced(48), 6, seed=0)
    labels = {s.id: s.label for s in balanced(48)}
    for f in range(6):
        test = plan.test_ids(f)
        assert len(test) == 8 and sum(labels[i] for i in test) == 4
        assert len(plan.train_ids(f)) == 40


def test_twelve_studies_folds_of_two():
    plan = make_folds(balanced(12), 6, 1)
    assert [len(plan.test_ids(f)) for f in range(6)] == [2] * 6


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(2, 8), st.integers(0, 1000))
def test_fold_partition(n, k, seed):
    studies = [study(i, int(i < max(1, n // 3))) for i in range(max(n, k))]
    plan = make_folds(studies, k, seed)
    folds = [set(plan.test_ids(f)) for f in range(k)]
    assert set().union(*folds) == {s.id for s in studies}
    assert sum(len(f) for f in folds) == len(studies)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    for c in (0, 1):
        per = [sum(1 for i in f if studies[int(i[1:])].label == c) for f in folds]
        assert max(per) - min(per) <= 1


def test_fold_determinism():
    a, b, c = (make_folds(balanced(24), 6, s) for s in (3, 3, 4))
    assert a.assignments == b.assignments
    assert a.assignments != c.assignments


def test_fold_errors():
    with pytest.raises(ValueError):
        make_folds(balanced(4), 6)
    with pytest.raises(ValueError):
        make_folds([study(i, 0) for i in range(8)], 2)


# ---------------------------------------------------------------- synthetic generator


def test_odd_n_rejected():
    with pytest.raises(ValueError, match="even"):
        synth_generate(7)


def test_generator_is_balanced_and_deterministic():
    a, spec = synth_generate(20, (8, 8, 8), 0.1, 5)
    b, _ = synth_generate(20, (8, 8, 8), 0.1, 5)
    assert a == b
    assert sum(s.label for s in a) == 10
    assert [r["label"] for r in spec.truth] == [r["b_pet"] ^ r["b_ct"] for r in spec.truth]


def test_single_modality_carries_no_label_information():
    _, spec = synth_generate(1000, (8, 8, 8), 0.1, 0)
    y = np.array([r["label"] for r in spec.truth])
    for key in ("b_pet", "b_ct"):
        b = np.array([r[key] for r in spec.truth])
        assert abs(np.corrcoef(b, y)[0, 1]) < 0.1


def matched_filter(vol, dims, center, sigma):
    t = gaussian_blob(dims, center, sigma)
    return float(np.sum(vol * t) / np.sum(t * t))


def test_blob_detector_recovers_presence():
    dims = (16, 16, 16)
    studies, spec = synth_generate(1000, dims, 0.1, 1)
    pet_c, _ = blob_centers(dims)
    hits = [(matched_filter(s.pet.voxels, dims, pet_c, spec.blob_sigma) > 0.5) == bool(r["b_pet"])
            for s, r in zip(studies, spec.truth)]
    assert np.mean(hits) >= 0.99


def test_joint_readout_is_exact_without_noise():
    dims = (8, 8, 8)
    studies, spec = synth_generate(200, dims, 0.01, 2)
    pet_c, ct_c = blob_centers(dims)
    pred = [int(matched_filter(s.pet.voxels, dims, pet_c, spec.blob_sigma) > 0.5)
            ^ int(matched_filter(s.ct.voxels, dims, ct_c, spec.blob_sigma) > 0.5) for s in studies]
    assert pred == [s.label for s in studies]


def test_blobs_sit_at_different_locations():
    pet_c, ct_c = blob_centers((16, 16, 16))
    assert pet_c != ct_c


def test_array_cache_batches(rng):
    studies, _ = synth_generate(4, (8, 8, 8), 0.1, 0)
    b = ArrayCache(studies).batch(studies[:3])
    assert b.pet.shape == b.ct.shape == (3, 1, 8, 8, 8)
    assert list(b.labels) == [s.label for s in studies[:3]]
    assert abs(b.pet[0].mean()) < 1e-12
    with pytest.raises(ValueError):
        ArrayCache(studies).batch([])
