import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetfuse.datamodel import (
    DatasetManifest,
    InvariantError,
    MissingFileError,
    SampleIOError,
    ShapeMismatchError,
    StudySample,
    largest_remainder,
    load_manifest,
    load_sample,
    save_sample,
    split_patientwise,
    subsample_training,
)
from hetfuse.synthgen import SceneSpec, generate_scene


def _manifest(n_patients, per_patient=1, root="/nonexistent"):
    samples = [(f"P{p:03d}_S{s:02d}", f"P{p:03d}") for p in range(n_patients) for s in range(per_patient)]
    return DatasetManifest(root=root, samples=samples)


def _tiny(surface=True):
    rng = np.random.default_rng(0)
    return StudySample(
        patient_id="p1",
        eye_id="OD",
        volume=rng.normal(size=(4, 8, 6)).astype(np.float32),
        images={"slo": rng.normal(size=(5, 9)).astype(np.float32)},
        mask=(rng.random((4, 8)) > 0.5).astype(np.uint8),
        surface=rng.integers(0, 6, (4, 8)) if surface else None,
        spacing=(0.12, 0.006, 0.004),
    )


def test_roundtrip_generated_sample(tmp_path):
    s = generate_scene(SceneSpec(dims=(16, 32, 16), structure_scale=3.0), 7)
    save_sample(s, tmp_path / "s")
    back = load_sample(tmp_path / "s")
    assert back.volume.tobytes() == s.volume.tobytes()
    assert back.mask.tobytes() == s.mask.tobytes()
    assert back.surface.tobytes() == s.surface.tobytes()
    assert {k: v.tobytes() for k, v in back.images.items()} == {k: v.tobytes() for k, v in s.images.items()}
    assert (back.patient_id, back.eye_id, back.spacing) == (s.patient_id, s.eye_id, s.spacing)


def test_absent_surface_roundtrip(tmp_path):
    save_sample(_tiny(surface=False), tmp_path)
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["surface"] is None
    assert not (tmp_path / "surface.i32").exists()
    assert load_sample(tmp_path).surface is None


def test_layout_is_little_endian_row_major(tmp_path):
    s = _tiny()
    save_sample(s, tmp_path)
    raw = np.frombuffer((tmp_path / "volume.f32").read_bytes(), dtype="<f4").reshape(4, 8, 6)
    assert np.array_equal(raw, s.volume)
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["shapes"]["volume"] == [4, 8, 6] and meta["modalities"] == ["slo"]


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_non_writable_dir(tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    try:
        with pytest.raises(SampleIOError, match=str(d)):
            save_sample(_tiny(), d)
    finally:
        d.chmod(0o700)


def test_unwritable_path_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(SampleIOError, match="file"):
        save_sample(_tiny(), blocker / "sub")


def test_load_errors_are_distinct(tmp_path):
    save_sample(_tiny(), tmp_path)
    (tmp_path / "volume.f32").write_bytes(np.zeros(4 * 8 * 5, "<f4").tobytes())
    with pytest.raises(ShapeMismatchError):
        load_sample(tmp_path)
    (tmp_path / "volume.f32").write_bytes(np.zeros(4 * 8 * 6, "<f4").tobytes())
    mask = np.zeros((4, 8), np.uint8)
    mask[0, 0] = 2
    (tmp_path / "mask.u8").write_bytes(mask.tobytes())
    with pytest.raises(InvariantError):
        load_sample(tmp_path)
    (tmp_path / "mask.u8").unlink()
    with pytest.raises(MissingFileError):
        load_sample(tmp_path)
    assert not issubclass(ShapeMismatchError, InvariantError)


def test_volume_shape_from_meta(tmp_path):
    save_sample(_tiny(), tmp_path)
    assert load_sample(tmp_path).volume.shape == (4, 8, 6)


def test_manifest_roundtrip(tmp_path):
    m = _manifest(3, 2, tmp_path)
    m.extra = {"generator": {"task": "lesion"}}
    m.save()
    back = load_manifest(tmp_path)
    assert back.samples == m.samples and back.extra == m.extra and back.patients == ["P000", "P001", "P002"]


def test_manifest_rejects_duplicates():
    with pytest.raises(ValueError):
        DatasetManifest(root=".", samples=[("a", "p"), ("a", "q")])
    with pytest.raises(ValueError):
        DatasetManifest(root=".", samples=[("a", "")])


def test_split_sizes_and_determinism():
    m = _manifest(10)
    s = split_patientwise(m, (0.6, 0.1, 0.3), 0)
    assert (len(s.train), len(s.val), len(s.test)) == (6, 1, 3)
    assert s == split_patientwise(m, (0.6, 0.1, 0.3), 0)


def test_split_seed_changes_train():
    m = _manifest(100)
    assert split_patientwise(m, seed=0).train != split_patientwise(m, seed=1).train


def test_split_errors():
    with pytest.raises(ValueError):
        split_patientwise(_manifest(2))
    with pytest.raises(ValueError):
        split_patientwise(_manifest(10), (0.5, 0.1, 0.3))


def test_largest_remainder_examples():
    assert largest_remainder(10, (0.6, 0.1, 0.3)) == [6, 1, 3]
    assert largest_remainder(7, (0.6, 0.1, 0.3)) == [4, 1, 2]
    assert largest_remainder(3, (0.6, 0.1, 0.3)) == [2, 0, 1]


def test_subsample_examples():
    m = _manifest(100)
    s = split_patientwise(m, seed=3)
    assert subsample_training(s, 1.0, 5).train == s.train
    a, b = subsample_training(s, 0.1, 5), subsample_training(s, 0.2, 5)
    assert (len(a.train), len(b.train)) == (6, 12) and a.train <= b.train
    assert subsample_training(s, 0.2, 5) == b
    assert (b.val, b.test) == (s.val, s.test)
    with pytest.raises(ValueError):
        subsample_training(s, 0.0, 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 80), st.integers(1, 3), st.integers(0, 10_000))
def test_split_partitions_disjoint_and_cover(n, per, seed):
    m = _manifest(n, per)
    s = split_patientwise(m, seed=seed)
    assert not (s.train & s.val or s.train & s.test or s.val & s.test)
    assert s.train | s.val | s.test == set(m.patients)
    assert [len(s.train), len(s.val), len(s.test)] == largest_remainder(n, (0.6, 0.1, 0.3))


@settings(max_examples=50, deadline=None)
@given(
    st.integers(3, 80),
    st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6),
    st.integers(0, 10_000),
)
def test_nested_training_chain(n, pcts, seed):
    s = split_patientwise(_manifest(n), seed=seed)
    chain = [subsample_training(s, p, seed).train for p in sorted(pcts)]
    for small, large in zip(chain, chain[1:]):
        assert small <= large
    assert chain[-1] <= s.train
