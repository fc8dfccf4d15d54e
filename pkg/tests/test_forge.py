import json

import numpy as np
import pytest

from qsplice.forge import (
    BACKGROUND_QF_SET,
    QF_SET,
    Box,
    ForgeRecipe,
    file_digest,
    forge,
    forge_batch,
    load_ground_truth,
    make_texture,
    sample_recipe,
    save_sample,
)
from qsplice.jpeg import GridShift, QuantMatrix, save_luma


@pytest.fixture(scope="module")
def small_sources():
    return make_texture(50, (192, 192)), make_texture(51, (192, 192))


def k2_recipe(seed=9, type="II"):
    return ForgeRecipe(
        k=2, type=type, qf_background=95, qf_donors=[65], qf2=90,
        boxes=[Box(top=40, left=48, h=96, w=96)],
        shift_background=GridShift(3, 2) if type == "II" else GridShift(0, 0),
        shift_donors=[GridShift(1, 5)],
        seed=seed,
    )


class TestSampleRecipe:
    def test_same_seed_same_recipe(self):
        a = sample_recipe(7, 2, "I")
        b = sample_recipe(7, 2, "I")
        assert a.to_json() == b.to_json()

    def test_k1_draws_background_only(self):
        r = sample_recipe(3, 1, "I")
        assert r.qf_background in QF_SET
        assert r.boxes == [] and r.qf_donors == []
        assert r.shift_background.aligned

    def test_k4_draws_three_distinct_donors(self):
        r = sample_recipe(11, 4, "II")
        assert r.qf_background in BACKGROUND_QF_SET
        assert len(r.qf_donors) == 3
        assert len(set(r.qf_donors)) == 3
        assert r.qf_background not in r.qf_donors
        assert not r.shift_background.aligned
        assert all(not s.aligned for s in r.shift_donors)

    def test_boxes_fit_and_do_not_overlap(self):
        for seed in range(20):
            r = sample_recipe(seed, 4, "I", image_size=(512, 512))
            for box in r.boxes:
                assert box.h in (64, 96, 128, 156) and box.w in (64, 96, 128, 156)
                assert 0 <= box.top and box.top + box.h <= 512
                assert 0 <= box.left and box.left + box.w <= 512
            for i, a in enumerate(r.boxes):
                for b in r.boxes[i + 1 :]:
                    assert not a.overlaps(b)


class TestForge:
    def test_ground_truth_follows_box_geometry(self, small_sources):
        src, donor = small_sources
        recipe = k2_recipe()
        sample = forge(src, [donor], recipe)
        box = recipe.boxes[0]
        labels = sample.gt.labels
        for i in range(labels.shape[0]):
            for j in range(labels.shape[1]):
                cy, cx = (i + 3) * 8 + 3.5, (j + 3) * 8 + 3.5
                inside = box.top <= cy < box.top + box.h and box.left <= cx < box.left + box.w
                assert (labels[i, j] == 1) == inside

    def test_oracle_tensor_matches_region_matrices(self, small_sources):
        src, donor = small_sources
        sample = forge(src, [donor], k2_recipe())
        for i in range(sample.gt.labels.shape[0]):
            for j in range(sample.gt.labels.shape[1]):
                expected = sample.gt.region_q1[sample.gt.labels[i, j]].prefix(15)
                assert np.array_equal(sample.oracle_tensor.data[i, j], expected)

    def test_bit_exact_reproducibility(self, small_sources):
        src, donor = small_sources
        a = forge(src, [donor], k2_recipe())
        b = forge(src, [donor], k2_recipe())
        assert np.array_equal(a.image.pixels, b.image.pixels)

    def test_pristine_sample(self):
        recipe = ForgeRecipe(k=1, type="I", qf_background=85, seed=1)
        sample = forge(make_texture(52, (128, 128)), [], recipe)
        assert sample.gt.k == 1
        assert not sample.gt.labels.any()

    def test_duplicate_donor_qfs_rejected(self, small_sources):
        src, donor = small_sources
        recipe = ForgeRecipe(
            k=3, type="I", qf_background=95, qf_donors=[65, 65], qf2=90,
            boxes=[Box(0, 0, 64, 64), Box(100, 100, 64, 64)],
            shift_background=GridShift(0, 0),
            shift_donors=[GridShift(1, 1), GridShift(2, 2)],
        )
        with pytest.raises(ValueError, match="distinct"):
            forge(src, [donor, donor], recipe)

    def test_out_of_bounds_box_names_region(self, small_sources):
        src, donor = small_sources
        recipe = k2_recipe()
        recipe.boxes = [Box(top=150, left=150, h=96, w=96)]
        with pytest.raises(ValueError, match="region 1"):
            forge(src, [donor], recipe)

    def test_type_invariants_enforced(self, small_sources):
        src, donor = small_sources
        bad = k2_recipe(type="I")
        bad.shift_background = GridShift(1, 1)
        with pytest.raises(ValueError, match="Type I"):
            forge(src, [donor], bad)
        bad2 = k2_recipe(type="II")
        bad2.shift_background = GridShift(0, 0)
        with pytest.raises(ValueError, match="Type II"):
            forge(src, [donor], bad2)
        bad3 = k2_recipe(type="I")
        bad3.shift_donors = [GridShift(0, 0)]
        with pytest.raises(ValueError, match="misaligned"):
            forge(src, [donor], bad3)

    def test_sjpeg_mode_marks_donor_as_single_compressed(self, small_sources):
        src, donor = small_sources
        recipe = k2_recipe()
        recipe.mode = "djpeg_vs_sjpeg"
        sample = forge(src, [donor], recipe)
        assert np.all(sample.gt.region_q1[1].steps == 1)
        box = recipe.boxes[0]
        inside = sample.oracle_tensor.data[
            sample.gt.labels == 1
        ]
        assert np.all(inside == 1.0)

    def test_explicit_matrix_recipes_round_trip(self):
        q = QuantMatrix(steps=np.full((8, 8), 7), label="custom")
        recipe = ForgeRecipe(k=2, type="I", qf_background=q, qf_donors=[65],
                             boxes=[Box(0, 0, 64, 64)],
                             shift_donors=[GridShift(2, 2)])
        again = ForgeRecipe.from_json(recipe.to_json())
        assert isinstance(again.qf_background, QuantMatrix)
        assert again.qf_background == q
        assert again.to_json() == recipe.to_json()


class TestForgeBatch:
    def write_manifest(self, tmp_path, entries):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(entries))
        return path

    def test_empty_manifest_yields_empty_index(self, tmp_path):
        manifest = self.write_manifest(tmp_path, [])
        rows = forge_batch(manifest, tmp_path / "out")
        assert rows == []
        assert (tmp_path / "out" / "index.csv").exists()

    def test_bad_entry_recorded_batch_continues(self, tmp_path, small_sources):
        src, _ = small_sources
        src_path = tmp_path / "src.png"
        save_luma(src, src_path)
        manifest = self.write_manifest(tmp_path, [
            {"id": "bad", "source": str(tmp_path / "missing.png"),
             "recipe": k2_recipe().to_json()},
            {"id": "good", "source": str(src_path),
             "rule": {"seed": 4, "k": 1, "type": "I", "image_size": [192, 192]}},
        ])
        rows = forge_batch(manifest, tmp_path / "out")
        by_id = {r["id"]: r for r in rows}
        assert by_id["bad"]["status"] == "error" and by_id["bad"]["error"]
        assert by_id["good"]["status"] == "ok"
        assert (tmp_path / "out" / "good.png").exists()
        assert (tmp_path / "out" / "good.q1t").exists()

    def test_rerun_is_byte_identical(self, tmp_path, small_sources):
        src, _ = small_sources
        src_path = tmp_path / "src.png"
        save_luma(src, src_path)
        manifest = self.write_manifest(tmp_path, [
            {"id": f"s{i}", "source": str(src_path),
             "rule": {"seed": i, "k": 2, "type": "II", "image_size": [192, 192],
                      "box_sizes": [64, 96]}}
            for i in range(3)
        ])
        forge_batch(manifest, tmp_path / "a")
        forge_batch(manifest, tmp_path / "b")
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert file_digest(tmp_path / "a" / name) == file_digest(tmp_path / "b" / name)

    def test_saved_sample_reloads_as_oracle_input(self, tmp_path, small_sources):
        src, donor = small_sources
        sample = forge(src, [donor], k2_recipe())
        save_sample(sample, tmp_path, "demo")
        gt = load_ground_truth(tmp_path / "demo.gt.png", tmp_path / "demo.recipe.json")
        assert np.array_equal(gt.labels, sample.gt.labels)
        assert gt.k == sample.gt.k
        assert all(a == b for a, b in zip(gt.region_q1, sample.gt.region_q1))
