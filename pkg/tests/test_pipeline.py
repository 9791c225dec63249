import json

import numpy as np
import pytest

from kneecart.phantom import MTC, TIBIA, make_tibial_disc
from kneecart.pipeline import PipelineConfig, StageError, run_pipeline
from kneecart.volume import LabelVolume
from kneecart.warp import DeformationField


def test_config_defaults_and_round_trip():
    cfg = PipelineConfig()
    again = PipelineConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert cfg.provenance()["config_sha256"] == again.provenance()["config_sha256"]
    other = PipelineConfig(side="left")
    assert other.provenance()["config_sha256"] != cfg.provenance()["config_sha256"]


def test_config_validation():
    with pytest.raises(ValueError, match="unknown config keys"):
        PipelineConfig.from_dict({"sideways": 1})
    with pytest.raises(ValueError, match="left or right"):
        PipelineConfig(side="medial")
    with pytest.raises(ValueError, match="distinct"):
        PipelineConfig(femur_label=2)
    with pytest.raises(ValueError, match="max_ray_mm"):
        PipelineConfig(max_ray_mm=0.0)
    with pytest.raises(ValueError, match="knn"):
        PipelineConfig(knn=-1)
    with pytest.raises(ValueError, match="merge_mode"):
        PipelineConfig(merge_mode="vote")


def test_field_without_template_rejected():
    ph = make_tibial_disc()
    geom = ph.geometry
    field = DeformationField(np.zeros(geom.dims + (3,)), geom)
    with pytest.raises(StageError) as e:
        run_pipeline(ph.seg, PipelineConfig(), field=field)
    assert e.value.stage == "warp"


@pytest.mark.filterwarnings("ignore:.*cartilage label .* is empty")
def test_missing_bone_under_cartilage_fails():
    ph = make_tibial_disc()
    vox = np.array(ph.seg.voxels)
    vox[vox == TIBIA] = 0
    seg = LabelVolume(vox, ph.geometry, ph.seg.label_schema)
    with pytest.raises(StageError) as e:
        run_pipeline(seg, PipelineConfig())
    assert e.value.stage == "medial_tibial"
    assert "bone label" in str(e.value)


@pytest.mark.filterwarnings("ignore:.*cartilage label .* is empty")
def test_identity_template_matches_no_template():
    ph = make_tibial_disc()
    cfg = PipelineConfig()
    alone = run_pipeline(ph.seg, cfg)
    with_template = run_pipeline(ph.seg, cfg, template_seg=ph.seg)
    a = [(r.region, r.fcl_percent, r.mean_thickness_mm, r.surface_area_mm2, r.volume_mm3)
         for r in alone.report.rows]
    b = [(r.region, r.fcl_percent, r.mean_thickness_mm, r.surface_area_mm2, r.volume_mm3)
         for r in with_template.report.rows]
    assert a == b
    assert np.array_equal(alone.atlas.voxels, with_template.atlas.voxels)


@pytest.mark.filterwarnings("ignore:.*cartilage label .* is empty")
def test_disc_report_values_match_truth():
    ph = make_tibial_disc()
    res = run_pipeline(ph.seg, PipelineConfig())
    rows = {r.region.name: r for r in res.report.rows}
    present = [n for n, r in rows.items() if r.warning != "region absent"]
    assert sorted(present) == ["aMTC", "cMTC", "eMTC", "iMTC", "pMTC"]

    cart = ph.mask(MTC)
    vox_mm3 = ph.geometry.voxel_volume_mm3
    total_volume = sum(rows[n].volume_mm3 for n in present)
    assert total_volume == pytest.approx(cart.count * vox_mm3, rel=1e-12)
    # interior thickness is the disc height (4 voxels at 0.3 mm); the
    # central region mean sits close under it, rim tapers measure zero
    assert rows["cMTC"].mean_thickness_mm == pytest.approx(1.2, abs=0.05)
    # no template: the outline repair rounds the staircase corners of the
    # voxelized ellipse, leaving a fill ring never more than one voxel
    # outside the observed footprint and nothing in the centre
    from scipy.spatial import cKDTree
    fcl = res.compartments["medial_tibial"].fcl
    assert fcl.fcl_percent < 8.0
    d, _ = cKDTree(fcl.footprint.positions).query(fcl.fcl_patch.positions)
    assert d.max() <= 0.3 + 1e-9
    assert rows["cMTC"].fcl_percent == 0.0
