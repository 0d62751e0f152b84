import json

import numpy as np
import pytest

from qctriage import bids


class TestParseEntities:
    def test_full_dwi_name(self):
        ent = bids.parse_entities("sub-01_ses-02_acq-b1000_run-1_dwi.nii.gz")
        assert ent.subject == "01"
        assert ent.session == "02"
        assert ent.acquisition == "b1000"
        assert ent.run == "1"
        assert ent.suffix == "dwi"
        assert ent.extension == ".nii.gz"

    def test_minimal_t1w(self):
        ent = bids.parse_entities("sub-ADNI123_T1w.nii")
        assert ent.subject == "ADNI123"
        assert ent.session is None
        assert ent.suffix == "T1w"
        assert ent.extension == ".nii"

    def test_missing_subject(self):
        with pytest.raises(bids.MissingSubjectError):
            bids.parse_entities("T1w.nii.gz")

    def test_no_suffix(self):
        with pytest.raises(bids.NoSuffixError):
            bids.parse_entities("sub-01_ses-02.nii")

    def test_duplicate_entity(self):
        with pytest.raises(bids.DuplicateEntityError):
            bids.parse_entities("sub-01_sub-02_dwi.nii")

    def test_order_insensitive_parse_fixed_order_serialize(self):
        a = bids.parse_entities("sub-01_run-2_acq-hi_dwi.nii")
        b = bids.parse_entities("sub-01_acq-hi_run-2_dwi.nii")
        assert a.serialize() == b.serialize() == "sub-01_acq-hi_run-2_dwi"

    def test_direction_entity_round_trip(self):
        ent = bids.parse_entities("sub-9_dir-PA_dwi.nii.gz")
        assert ent.direction == "PA"
        assert ent.serialize() == "sub-9_dir-PA_dwi"

    def test_parse_serialize_identity(self):
        cases = [
            bids.EntityMap(subject="01", suffix="T1w", extension=".nii"),
            bids.EntityMap(subject="x", session="1", acquisition="b0",
                           direction="AP", run="3", suffix="dwi",
                           extension=".nii.gz"),
        ]
        for ent in cases:
            parsed = bids.parse_entities(ent.serialize(with_extension=True))
            assert parsed.serialize() == ent.serialize()
            assert parsed == ent


class TestLoadGradients:
    def write(self, tmp_path, bval, bvec):
        bval_path = tmp_path / "x.bval"
        bvec_path = tmp_path / "x.bvec"
        bval_path.write_text(bval)
        bvec_path.write_text(bvec)
        return bval_path, bvec_path

    def test_three_by_three_is_fsl_rows(self, tmp_path):
        table = bids.load_gradients(*self.write(
            tmp_path, "0 1000 1000", "0 1 0\n0 0 1\n0 0 0\n"))
        assert len(table) == 3
        assert table.bvals[0] == 0
        assert np.array_equal(table.bvecs[0], [0, 0, 0])
        assert np.array_equal(table.bvecs[1], [1, 0, 0])
        assert np.array_equal(table.bvecs[2], [0, 1, 0])

    def test_fsl_wide_layout(self, tmp_path):
        table = bids.load_gradients(*self.write(
            tmp_path,
            "0 1000 1000 1000 2000",
            "0 1 0 0 0.6\n0 0 1 0 0.8\n0 0 0 1 0\n"))
        assert len(table) == 5
        assert np.allclose(table.bvecs[4], [0.6, 0.8, 0.0])

    def test_n_by_three_layout(self, tmp_path):
        table = bids.load_gradients(*self.write(
            tmp_path, "0 1000 1000 2000",
            "0 0 0\n1 0 0\n0 1 0\n0 0 1\n"))
        assert len(table) == 4
        assert np.array_equal(table.bvecs[3], [0, 0, 1])

    def test_count_mismatch(self, tmp_path):
        with pytest.raises(bids.CountMismatchError):
            bids.load_gradients(*self.write(
                tmp_path, "0 1000 1000 2000", "0 1 0\n0 0 1\n0 0 0\n"))

    def test_three_four_five_norm(self, tmp_path):
        table = bids.load_gradients(*self.write(
            tmp_path, "1000", "0.6\n0.8\n0\n"))
        assert table.norms()[0] == pytest.approx(1.0)

    def test_unparseable(self, tmp_path):
        with pytest.raises(bids.UnparseableNumberError):
            bids.load_gradients(*self.write(tmp_path, "0 banana", "0\n0\n0\n"))

    def test_empty_file(self, tmp_path):
        with pytest.raises(bids.EmptyFileError):
            bids.load_gradients(*self.write(tmp_path, "  \n", "0\n0\n0\n"))


def candidate(name, n_volumes, pe=None, with_gradients=True, tmp_path=None):
    ent = bids.parse_entities(name)
    return bids.ScanCandidate(
        path=tmp_path / name if tmp_path else None,
        entities=ent,
        n_volumes=n_volumes,
        bval_path="x.bval" if with_gradients else None,
        bvec_path="x.bvec" if with_gradients else None,
        phase_encoding=pe,
    )


class TestPrefilter:
    def test_orphan_small_dwi_excluded(self):
        item = candidate("sub-01_dwi.nii.gz", 5)
        decision = bids.prefilter(item, [item])
        assert decision.action == "exclude"
        assert decision.reason == "too_few_volumes"

    def test_reverse_pe_companion_kept_by_json(self):
        small = candidate("sub-01_dir-PA_dwi.nii.gz", 5, pe="j-")
        big = candidate("sub-01_dir-AP_dwi.nii.gz", 96, pe="j")
        decision = bids.prefilter(small, [small, big])
        assert decision.action == "keep"
        assert decision.rule == "json_pedir"

    def test_reverse_pe_entity_fallback(self):
        small = candidate("sub-01_acq-rpe_dwi.nii.gz", 4)
        big = candidate("sub-01_dwi.nii.gz", 64)
        decision = bids.prefilter(small, [small, big])
        assert decision.action == "keep"
        assert decision.rule == "entity_rpe"

    def test_pa_ap_pairing(self):
        small = candidate("sub-01_dir-PA_dwi.nii.gz", 3)
        big = candidate("sub-01_dir-AP_dwi.nii.gz", 40)
        assert bids.prefilter(small, [small, big]).rule == "entity_pair"

    def test_small_scan_other_session_not_companion(self):
        small = candidate("sub-01_ses-A_dir-PA_dwi.nii.gz", 5, pe="j-")
        big = candidate("sub-01_ses-B_dir-AP_dwi.nii.gz", 96, pe="j")
        assert bids.prefilter(small, [small, big]).action == "exclude"

    def test_missing_gradients_flagged(self):
        item = candidate("sub-01_dwi.nii.gz", 96, with_gradients=False)
        decision = bids.prefilter(item, [item])
        assert decision.action == "flag"
        assert decision.reason == "missing_gradients"


class TestScanDataset:
    def test_empty_directory(self, tmp_path):
        manifest = bids.scan_dataset(tmp_path)
        assert manifest.items == [] and manifest.exclusions == []

    def test_not_a_directory(self, tmp_path):
        with pytest.raises(NotADirectoryError):
            bids.scan_dataset(tmp_path / "missing")

    def test_t1w_plus_orphan_dwi(self, tmp_path, make_image):
        make_image("data/sub-01/anat/sub-01_T1w.nii.gz")
        make_image("data/sub-01/dwi/sub-01_dwi.nii.gz", n_volumes=5)
        manifest = bids.scan_dataset(tmp_path / "data")
        assert len(manifest.items) == 1
        assert manifest.items[0].entities.suffix == "T1w"
        assert manifest.exclusions == [
            ("sub-01/dwi/sub-01_dwi.nii.gz", "too_few_volumes")]

    def test_duplicate_entities(self, tmp_path, make_image):
        make_image("data/sub-01/anat/sub-01_T1w.nii")
        make_image("data/sub-01/anat/sub-01_T1w.nii.gz")
        manifest = bids.scan_dataset(tmp_path / "data")
        assert len(manifest.items) == 1
        assert len(manifest.exclusions) == 1
        assert manifest.exclusions[0][1] == "duplicate_entities"

    def test_sidecars_attached(self, tmp_path, make_image):
        img = make_image("data/sub-01/dwi/sub-01_dwi.nii.gz", n_volumes=8)
        base = img.parent / "sub-01_dwi"
        img.parent.joinpath("sub-01_dwi.bval").write_text("0 " + "1000 " * 7)
        img.parent.joinpath("sub-01_dwi.bvec").write_text(
            "0 " + "1 " * 7 + "\n0 " + "0 " * 7 + "\n0 " + "0 " * 7 + "\n")
        img.parent.joinpath("sub-01_dwi.json").write_text(
            json.dumps({"PhaseEncodingDirection": "j"}))
        manifest = bids.scan_dataset(tmp_path / "data")
        assert len(manifest.items) == 1
        assert set(manifest.items[0].sidecars) == {"bval", "bvec", "json"}
        assert manifest.items[0].flags == ()

    def test_missing_bvec_flagged(self, tmp_path, make_image):
        img = make_image("data/sub-02/dwi/sub-02_dwi.nii.gz", n_volumes=96)
        img.parent.joinpath("sub-02_dwi.bval").write_text("0 1000")
        manifest = bids.scan_dataset(tmp_path / "data")
        assert manifest.items[0].flags == ("missing_gradients",)

    def test_reverse_pe_kept_in_tree(self, tmp_path, make_image):
        make_image("data/sub-03/dwi/sub-03_dir-AP_dwi.nii.gz", n_volumes=96)
        make_image("data/sub-03/dwi/sub-03_dir-PA_dwi.nii.gz", n_volumes=5)
        for name, pe in (("sub-03_dir-AP_dwi", "j"), ("sub-03_dir-PA_dwi", "j-")):
            (tmp_path / "data/sub-03/dwi" / f"{name}.json").write_text(
                json.dumps({"PhaseEncodingDirection": pe}))
        manifest = bids.scan_dataset(tmp_path / "data")
        assert len(manifest.items) == 2
        notes = {i.entities.serialize(): i.notes for i in manifest.items}
        assert notes["sub-03_dir-PA_dwi"] == "kept_by:json_pedir"

    def test_unreadable_file_is_exclusion(self, tmp_path, make_image):
        make_image("data/sub-01/anat/sub-01_T1w.nii")
        bad = tmp_path / "data/sub-01/anat/sub-01_acq-bad_T1w.nii"
        bad.write_bytes(b"\x00" * 348)
        manifest = bids.scan_dataset(tmp_path / "data")
        assert len(manifest.items) == 1
        assert len(manifest.exclusions) == 1
        assert manifest.exclusions[0][1].startswith("unreadable:")

    def test_deterministic_and_partitioning(self, tmp_path, make_image):
        make_image("data/sub-01/anat/sub-01_T1w.nii.gz")
        make_image("data/sub-01/dwi/sub-01_dwi.nii.gz", n_volumes=7)
        make_image("data/sub-02/ses-01/dwi/sub-02_ses-01_dwi.nii.gz",
                   n_volumes=3)
        m1 = bids.scan_dataset(tmp_path / "data")
        m2 = bids.scan_dataset(tmp_path / "data")
        assert m1.to_dict() == m2.to_dict()
        visited = {i.image for i in m1.items} | {e[0] for e in m1.exclusions}
        assert len(visited) == 3
        assert not ({i.image for i in m1.items}
                    & {e[0] for e in m1.exclusions})

    def test_manifest_round_trip(self, tmp_path, make_image):
        make_image("data/sub-01/anat/sub-01_T1w.nii.gz")
        manifest = bids.scan_dataset(tmp_path / "data")
        out = tmp_path / "manifest.json"
        manifest.save(out)
        loaded = bids.Manifest.load(out)
        assert loaded.to_dict() == manifest.to_dict()
