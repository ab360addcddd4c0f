"""Container and manifest format tests: bitwise round trips, one error
class per corruption category, schema field paths."""

import json
import struct

import numpy as np
import pytest

from poselift.evaluation import EvalRecord
from poselift.geometry import CameraIntrinsics, axis_angle_matrix
from poselift.io import (
    MAGIC,
    ChecksumError,
    DimensionError,
    FileFormatError,
    HeaderError,
    MagicError,
    SchemaError,
    TruncationError,
    VersionError,
    read_depth_map,
    read_feature_map,
    read_manifest,
    write_depth_map,
    write_feature_map,
    write_results,
)
from poselift.matching import FeatureMap
from poselift.synth import DepthMap, GridSpec, make_dataset, random_scene

from conftest import make_rng


def random_feature_map(rng, h=6, w=7, c=9):
    data = rng.normal(size=(h, w, c))
    mask = rng.random((h, w)) > 0.3
    mask.ravel()[0] = True  # keep at least one foreground cell
    return FeatureMap(data=data, pixel_stride=4.0, pixel_offset=2.0, mask=mask)


def random_depth_map(rng, h=9, w=11):
    values = rng.uniform(0.0, 3.0, size=(h, w)).astype(np.float32)
    values[rng.random((h, w)) > 0.7] = 0.0
    return DepthMap(values, scale=float(rng.uniform(0.5, 2.0)))


def rewrite_header(path, mutate):
    data = path.read_bytes()
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + hlen])
    mutate(header)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path.write_bytes(MAGIC + struct.pack("<I", len(hb)) + hb + data[8 + hlen :])


class TestRoundTrip:
    def test_feature_map_bitwise(self, tmp_path):
        rng = make_rng(50)
        for i in range(25):
            fm = random_feature_map(rng)
            p = tmp_path / f"f{i}.zpkt"
            write_feature_map(p, fm)
            back = read_feature_map(p)
            assert back.data.tobytes() == fm.data.tobytes()
            np.testing.assert_array_equal(back.mask, fm.mask)
            assert back.pixel_stride == fm.pixel_stride
            assert back.pixel_offset == fm.pixel_offset

    def test_depth_map_bitwise(self, tmp_path):
        rng = make_rng(51)
        for i in range(25):
            dm = random_depth_map(rng)
            p = tmp_path / f"d{i}.zpkt"
            write_depth_map(p, dm)
            back = read_depth_map(p)
            assert back.values.tobytes() == dm.values.tobytes()
            assert back.scale == dm.scale

    def test_mask_bits_pack_row_major_with_padding(self, tmp_path):
        # 5x7 grid: 35 bits round-trip through 5 zero-padded bytes
        rng = make_rng(52)
        fm = random_feature_map(rng, h=5, w=7, c=8)
        p = tmp_path / "f.zpkt"
        write_feature_map(p, fm)
        np.testing.assert_array_equal(read_feature_map(p).mask, fm.mask)

    def test_writer_deterministic(self, tmp_path):
        fm = random_feature_map(make_rng(53))
        write_feature_map(tmp_path / "a.zpkt", fm)
        write_feature_map(tmp_path / "b.zpkt", fm)
        assert (tmp_path / "a.zpkt").read_bytes() == (tmp_path / "b.zpkt").read_bytes()


class TestCorruption:
    @pytest.fixture
    def feature_file(self, tmp_path):
        p = tmp_path / "f.zpkt"
        write_feature_map(p, random_feature_map(make_rng(54)))
        return p

    def test_bad_magic(self, feature_file):
        data = feature_file.read_bytes()
        feature_file.write_bytes(b"NOPE" + data[4:])
        with pytest.raises(MagicError):
            read_feature_map(feature_file)

    def test_unsupported_version(self, feature_file):
        rewrite_header(feature_file, lambda h: h.update(version=99))
        with pytest.raises(VersionError):
            read_feature_map(feature_file)

    def test_header_not_json(self, feature_file):
        data = bytearray(feature_file.read_bytes())
        data[8] = ord("X")  # clobber the opening brace
        feature_file.write_bytes(bytes(data))
        with pytest.raises(HeaderError):
            read_feature_map(feature_file)

    def test_header_missing_key(self, feature_file):
        rewrite_header(feature_file, lambda h: h.pop("kind"))
        with pytest.raises(HeaderError):
            read_feature_map(feature_file)

    def test_wrong_kind(self, feature_file):
        with pytest.raises(HeaderError):
            read_depth_map(feature_file)

    def test_checksum_mismatch(self, feature_file):
        data = bytearray(feature_file.read_bytes())
        (hlen,) = struct.unpack("<I", data[4:8])
        data[8 + hlen + 10] ^= 0xFF
        feature_file.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            read_feature_map(feature_file)

    def test_truncation(self, feature_file):
        data = feature_file.read_bytes()
        feature_file.write_bytes(data[: len(data) - 5])
        with pytest.raises(TruncationError):
            read_feature_map(feature_file)

    def test_truncation_inside_header(self, feature_file):
        feature_file.write_bytes(feature_file.read_bytes()[:10])
        with pytest.raises(TruncationError):
            read_feature_map(feature_file)
        feature_file.write_bytes(b"ZP")
        with pytest.raises(TruncationError):
            read_feature_map(feature_file)

    def test_dimension_mismatch(self, feature_file):
        # shrinking a declared dim leaves surplus payload bytes
        rewrite_header(
            feature_file, lambda h: h.update(shape=[h["shape"][0] - 1] + h["shape"][1:])
        )
        with pytest.raises(DimensionError):
            read_feature_map(feature_file)

    def test_invalid_shape(self, feature_file):
        rewrite_header(feature_file, lambda h: h.update(shape=[0, 7, 9]))
        with pytest.raises(DimensionError):
            read_feature_map(feature_file)
        rewrite_header(feature_file, lambda h: h.update(shape=[6, 7]))
        with pytest.raises(DimensionError):
            read_feature_map(feature_file)

    def test_all_errors_share_base_class(self):
        for cls in (
            MagicError, VersionError, HeaderError, ChecksumError,
            TruncationError, DimensionError, SchemaError,
        ):
            assert issubclass(cls, FileFormatError)
            assert issubclass(cls, Exception)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    K = CameraIntrinsics(fx=140.0, fy=140.0, cx=63.5, cy=63.5, width=128, height=128)
    manifest = make_dataset(
        random_scene(8), root, n_refs=2, n_queries=1, seed=8,
        intrinsics=K, grid=GridSpec(16, 16, 8.0, 4.0),
    )
    return root, manifest


def mutate_manifest(root, mutate):
    doc = json.loads((root / "manifest.json").read_text())
    mutate(doc)
    (root / "manifest.json").write_text(json.dumps(doc))


class TestManifest:
    def test_round_trip(self, dataset):
        root, written = dataset
        back = read_manifest(root / "manifest.json")
        assert back.scene == written.scene
        assert back.intrinsics == written.intrinsics
        assert back.grid == written.grid
        assert back.noise_sd == written.noise_sd
        assert back.category == written.category
        assert back.query_warp == written.query_warp
        assert back.root == root
        assert [r.camera for r in back.references] == [
            r.camera for r in written.references
        ]
        for bq, wq in zip(back.queries, written.queries):
            assert bq.view_id == wq.view_id
            np.testing.assert_array_equal(bq.pose.rotation, wq.pose.rotation)
            np.testing.assert_array_equal(bq.pose.translation, wq.pose.translation)

    def test_check_files_flags_missing_and_corrupt(self, dataset, tmp_path):
        root, written = dataset
        import shutil

        shutil.copytree(root, tmp_path / "c", dirs_exist_ok=True)
        victim = tmp_path / "c" / written.references[0].feature_file
        data = victim.read_bytes()
        victim.write_bytes(b"NOPE" + data[4:])
        with pytest.raises(MagicError):
            read_manifest(tmp_path / "c" / "manifest.json")
        victim.unlink()
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path / "c" / "manifest.json")
        # without the check the manifest itself still parses
        m = read_manifest(tmp_path / "c" / "manifest.json", check_files=False)
        assert len(m.references) == 2

    def test_schema_errors_name_field_paths(self, dataset, tmp_path):
        root, _ = dataset
        import shutil

        cases = [
            (lambda d: d["intrinsics"].pop("fx"), "manifest.intrinsics.fx"),
            (lambda d: d.update(format="other"), "manifest.format"),
            (lambda d: d["references"][0]["camera"].update(theta=9.0),
             "references[0].camera"),
            (lambda d: d["queries"][0]["pose"].update(rotation=[[1, 0], [0, 1]]),
             "queries[0].pose.rotation"),
            (lambda d: d["scene"]["primitives"][0].update(kind="cone"),
             "primitives[0]"),
            (lambda d: d["grid"].update(pixel_stride=0.0), "manifest.grid"),
            (lambda d: d["queries"][0].update(depth_file=5), "queries[0].depth_file"),
        ]
        for i, (mutate, expected_path) in enumerate(cases):
            work = tmp_path / f"s{i}"
            shutil.copytree(root, work)
            mutate_manifest(work, mutate)
            with pytest.raises(SchemaError) as exc:
                read_manifest(work / "manifest.json")
            assert expected_path in str(exc.value)

    def test_manifest_not_json(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text("{not json")
        with pytest.raises(SchemaError):
            read_manifest(p)


class TestWriteResults:
    def make_records(self):
        def rec(err, qid, cat):
            R = axis_angle_matrix(np.array([0.0, 0.0, 1.0]), np.radians(err))
            return EvalRecord.from_rotations(qid, R, np.eye(3), 0, 1, cat)

        return [rec(10.0, "q0", "cup"), rec(20.0, "q1", "cup"), rec(40.0, "q2", "pot")]

    def test_document_and_table(self, tmp_path):
        jp, tp = tmp_path / "results.json", tmp_path / "results.txt"
        by_cat, pooled = write_results(jp, tp, self.make_records())
        doc = json.loads(jp.read_text())
        assert sorted(doc) == ["pooled", "records", "summaries", "thresholds"]
        assert doc["thresholds"] == [15.0, 30.0]
        assert doc["pooled"]["n"] == 3
        assert doc["pooled"]["median_err_deg"] == pytest.approx(20.0)
        assert doc["pooled"]["acc"]["15"] == pytest.approx(1.0 / 3.0)
        assert doc["pooled"]["acc"]["30"] == pytest.approx(2.0 / 3.0)
        assert sorted(doc["summaries"]) == ["cup", "pot"]
        assert len(doc["records"]) == 3
        r0 = doc["records"][0]
        assert r0["query_id"] == "q0" and r0["category"] == "cup"
        assert np.asarray(r0["rotation_gt"]).shape == (3, 3)

        lines = tp.read_text().splitlines()
        assert lines[0].split() == ["category", "n", "med.err", "acc.15", "acc.30"]
        assert lines[-1].split()[0] == "all"
        assert [row.split()[0] for row in lines[1:]] == ["cup", "pot", "all"]
        assert by_cat["cup"].n == 2 and pooled.n == 3
