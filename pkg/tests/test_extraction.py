import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdsm.archive import PatchArchive
from gdsm.errors import DimsMismatch, IntervalOutOfBounds
from gdsm.extraction import (
    PLANES,
    Plane,
    RegionSpec,
    SliceTable,
    default_regions,
    extract_global_slices,
    extract_local_patches,
    patch_count,
    read_region_config,
    resize_bilinear,
    take_slice,
    write_region_config,
)
from gdsm.volume import DIMS_1MM, DIMS_2MM, SubjectRecord, Volume3D, normalize_patch

REC = SubjectRecord("sub-x", 40.0, 1)

# Default local intervals typed in independently of the package defaults.
TABLE1 = {
    "axial": [(60, 79), (60, 79), (66, 94), (66, 94), (70, 84), (70, 84), (60, 94), (60, 94)],
    "coronal": [(85, 120), (85, 120), (80, 110), (80, 110), (135, 140), (135, 140)],
    "sagittal": [(113, 128), (60, 72), (100, 120), (60, 80), (125, 140), (100, 120), (60, 80)],
}


def brute_count(intervals):
    return sum(len(range(lo, hi + 1)) for lo, hi in intervals)


def test_plane_codes_and_slice_shapes():
    data = np.zeros((3, 4, 5))
    assert [int(p) for p in PLANES] == [0, 1, 2]
    assert take_slice(data, Plane.AXIAL, 0).shape == (3, 4)
    assert take_slice(data, Plane.CORONAL, 0).shape == (3, 5)
    assert take_slice(data, Plane.SAGITTAL, 0).shape == (4, 5)


def test_default_region_labels_match_table():
    labels = [r.encoded_label for r in default_regions()]
    assert labels == [0, 0, 1, 1, 2, 2, 3, 3]


def test_patch_count_table2():
    assert patch_count(SliceTable.default()) == {"axial": 20, "coronal": 30, "sagittal": 30, "total": 80}
    assert patch_count(None)["total"] == 0
    assert patch_count([])["total"] == 0


def test_patch_count_table1_inclusive():
    counts = patch_count(default_regions())
    expected = {k: brute_count(v) for k, v in TABLE1.items()}
    assert expected == {"axial": 198, "coronal": 146, "sagittal": 129}
    assert counts == {**expected, "total": 473}


def test_global_slices_default(phantom_pair):
    _, vol_2mm, rec = phantom_pair
    patches = extract_global_slices(vol_2mm, SliceTable.default(), rec)
    assert len(patches) == 80
    planes = [p.plane for p in patches]
    assert planes == [Plane.AXIAL] * 20 + [Plane.CORONAL] * 30 + [Plane.SAGITTAL] * 30
    assert [p.slice_index for p in patches[:3]] == [30, 31, 32]
    assert all(p.encoded_label == int(p.plane) and p.stream == "global" for p in patches)
    assert patches[0].image.shape == (91, 109)
    assert patches[20].image.shape == (91, 91)
    assert patches[-1].image.shape == (109, 91)
    assert all(0.0 <= p.image.min() and p.image.max() <= 1.0 for p in patches)


def test_global_single_slice_and_bounds(phantom_pair):
    _, vol_2mm, rec = phantom_pair
    one = extract_global_slices(vol_2mm, SliceTable({Plane.AXIAL: (30, 30)}), rec)
    assert len(one) == 1 and one[0].image.shape == (91, 109)
    with pytest.raises(IntervalOutOfBounds):
        extract_global_slices(vol_2mm, SliceTable({Plane.AXIAL: (80, 95)}), rec)
    with pytest.raises(DimsMismatch):
        extract_global_slices(Volume3D(np.zeros((4, 4, 4))), SliceTable.default(), rec)


def test_local_default_counts(phantom_pair):
    vol_1mm, _, rec = phantom_pair
    patches = extract_local_patches(vol_1mm, default_regions(), rec)
    by_plane = {pl.label: sum(p.plane == pl for p in patches) for pl in PLANES}
    assert by_plane == {"axial": 198, "coronal": 146, "sagittal": 129}
    assert all(p.image.shape == (80, 80) for p in patches)
    assert all(0.0 <= p.image.min() and p.image.max() <= 1.0 for p in patches)
    # canonical order: plane, then region, then ascending slice
    first = patches[:20]
    assert [p.slice_index for p in first] == list(range(60, 80))
    assert {p.region for p in first} == {"left_hippocampus"}


def test_identity_mask_equals_resized_slice(rng):
    data = rng.random(DIMS_1MM, dtype=np.float32)
    vol = Volume3D(data)
    full = RegionSpec("all", 0, {Plane.CORONAL: (100, 100)}, "left",
                      box=((0, DIMS_1MM[0] - 1), (0, DIMS_1MM[1] - 1), (0, DIMS_1MM[2] - 1)))
    (patch,) = extract_local_patches(vol, [full], REC)
    expected = normalize_patch(resize_bilinear(data[:, 100, :]))
    np.testing.assert_allclose(patch.image, expected.astype(np.float32), atol=1e-7)


def test_resize_is_corner_aligned_bilinear():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = resize_bilinear(img, (3, 3))
    np.testing.assert_allclose(out, [[0, 0.5, 1], [1, 1.5, 2], [2, 2.5, 3]])


def test_disjoint_masks_give_disjoint_voxels():
    regions = {r.region_name: r for r in default_regions()}
    left = regions["left_hippocampus"].mask_volume()
    right = regions["right_hippocampus"].mask_volume()
    assert not np.any(left & right)


def test_empty_mask_slice_is_skipped(caplog, rng):
    vol = Volume3D(rng.random(DIMS_1MM, dtype=np.float32))
    region = RegionSpec("r", 1, {Plane.AXIAL: (10, 12)}, "left", box=((5, 20), (5, 20), (11, 30)))
    with caplog.at_level(logging.WARNING):
        patches = extract_local_patches(vol, [region], REC)
    assert [p.slice_index for p in patches] == [11, 12]
    assert "empty" in caplog.text


def test_local_interval_out_of_bounds(phantom_pair):
    vol_1mm, _, rec = phantom_pair
    bad = RegionSpec("r", 0, {Plane.AXIAL: (170, 190)}, "left", box=((0, 5), (0, 5), (0, 5)))
    with pytest.raises(IntervalOutOfBounds):
        extract_local_patches(vol_1mm, [bad], rec)


def test_extraction_is_deterministic(phantom_pair):
    vol_1mm, vol_2mm, rec = phantom_pair
    regions = default_regions()[:2]
    a = extract_local_patches(vol_1mm, regions, rec)
    b = extract_local_patches(vol_1mm, regions, rec)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.one_of(st.none(), st.tuples(st.integers(0, 90), st.integers(0, 20))), min_size=3, max_size=3))
def test_global_count_matches_config(phantom_pair, spec):
    _, vol_2mm, rec = phantom_pair
    intervals = {}
    for plane, iv in zip(PLANES, spec):
        if iv is None:
            continue
        lo = min(iv[0], vol_2mm.dims[plane.axis] - 1)
        hi = min(lo + iv[1], vol_2mm.dims[plane.axis] - 1)
        intervals[plane] = (lo, hi)
    table = SliceTable(intervals)
    assert len(extract_global_slices(vol_2mm, table, rec)) == patch_count(table)["total"]


def test_region_config_round_trip(tmp_path):
    write_region_config(default_regions(), tmp_path / "regions.json")
    doc = json.loads((tmp_path / "regions.json").read_text())
    assert doc["regions"][5]["intervals"]["sagittal"] is None
    back = read_region_config(tmp_path / "regions.json")
    assert [r.to_json() for r in back] == [r.to_json() for r in default_regions()]


def test_region_config_with_mask_file(tmp_path):
    from gdsm.volume import write_volume

    mask = np.zeros(DIMS_1MM, dtype=np.float32)
    mask[50:60, 50:60, 50:60] = 1
    write_volume(Volume3D(mask), tmp_path / "m.gvol")
    doc = {"regions": [{"region_name": "cube", "encoded_label": 1, "laterality": "right",
                        "intervals": {"axial": [52, 53], "coronal": None, "sagittal": None},
                        "mask": "m.gvol"}]}
    (tmp_path / "r.json").write_text(json.dumps(doc))
    (region,) = read_region_config(tmp_path / "r.json")
    vol = Volume3D(np.ones(DIMS_1MM, dtype=np.float32))
    assert len(extract_local_patches(vol, [region], REC)) == 2


def test_archive_round_trip(tmp_path, phantom_pair):
    _, vol_2mm, rec = phantom_pair
    patches = extract_global_slices(vol_2mm, SliceTable({Plane.SAGITTAL: (40, 42)}), rec)
    arch = PatchArchive(tmp_path / "a", "global")
    arch.write_subject(rec.subject_id, patches)
    arch.write_index("abc", "val")
    back = PatchArchive.open(tmp_path / "a")
    assert back.config_hash == "abc"
    assert back.subjects[rec.subject_id]["counts"] == {"axial": 0, "coronal": 0, "sagittal": 3}
    got = back.read_subject(rec.subject_id)
    assert [p.key for p in got] == [p.key for p in patches]
    assert all(a.image.tobytes() == b.image.tobytes() for a, b in zip(got, patches))
    assert got[0].target_age == 40.0 and got[0].gender == 1 and got[0].axis_length == 91
