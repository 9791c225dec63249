import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import iso_geometry
from kneecart.cli import main
from kneecart.metrics import RegionalReport, RegionRow
from kneecart.parcellation import REGION_ORDER
from kneecart.phantom import make_phantom
from kneecart.volume import LabelVolume, load_volume, save_volume
from kneecart.warp import VelocityField, load_field, save_field


def _write_disc(tmp_path, name="seg.nii.gz", **kw):
    ph = make_phantom("tibial-disc", **kw)
    path = tmp_path / name
    save_volume(ph.seg, path)
    return path


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert capsys.readouterr().out.startswith("kneecart ")


def test_dump_config(capsys):
    rc = main(["run", "--seg", "missing.nii.gz", "--out", "x",
               "--side", "left", "--no-fcl", "--dump-config"])
    assert rc == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["side"] == "left"
    assert cfg["with_fcl"] is False
    assert cfg["with_thickness"] is True


def test_phantom_command_writes_scene(tmp_path):
    out = tmp_path / "shell"
    rc = main(["phantom", "--kind", "shell", "--out", str(out),
               "--defect-fraction", "0.25", "--seed", "3"])
    assert rc == 0
    assert (out / "seg.nii.gz").exists()
    assert (out / "template_seg.nii.gz").exists()
    truth = json.loads((out / "truth.json").read_text())
    assert truth["defect_fraction"] == pytest.approx(0.25)

    disc = tmp_path / "disc"
    assert main(["phantom", "--kind", "tibial-disc", "--out", str(disc)]) == 0
    assert (disc / "seg.nii.gz").exists()
    assert not (disc / "template_seg.nii.gz").exists()

    rc = main(["phantom", "--kind", "shell", "--out", str(tmp_path / "bad"),
               "--defect-fraction", "0.987"])
    assert rc == 2


@pytest.mark.filterwarnings("ignore:.*cartilage label .* is empty")
def test_run_produces_report_and_rerun_is_identical(tmp_path, capsys):
    seg = _write_disc(tmp_path)
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["run", "--seg", str(seg), "--out", str(out1)]) == 0
    for name in ("report.csv", "report.json", "atlas.nii.gz"):
        assert (out1 / name).exists(), name
    plys = list(out1.glob("*_cartilage.ply"))
    assert len(plys) == 1 and plys[0].stat().st_size > 0

    atlas = load_volume(out1 / "atlas.nii.gz")
    assert isinstance(atlas, LabelVolume)
    codes = set(np.unique(atlas.voxels)) - {0}
    assert codes == {11, 12, 13, 14, 15}

    lines = (out1 / "report.csv").read_text().splitlines()
    assert lines[0].startswith("# provenance ")
    assert len(lines) == 2 + 20

    assert main(["run", "--seg", str(seg), "--out", str(out2)]) == 0
    assert (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()
    assert (out1 / "atlas.nii.gz").read_bytes() == (out2 / "atlas.nii.gz").read_bytes()


def test_run_failure_exit_codes(tmp_path, capsys):
    out = tmp_path / "out"
    rc = main(["run", "--seg", str(tmp_path / "nope.nii.gz"), "--out", str(out)])
    assert rc == 2
    assert "error in stage load" in capsys.readouterr().err

    junk = tmp_path / "junk.nii.gz"
    junk.write_bytes(b"not a volume at all")
    assert main(["run", "--seg", str(junk), "--out", str(out)]) == 2
    assert "error in stage load" in capsys.readouterr().err

    seg = _write_disc(tmp_path)
    rc = main(["run", "--seg", str(seg), "--out", str(out),
               "--svf", "a.nii.gz", "--dvf", "b.nii.gz"])
    assert rc == 2
    assert "error in stage config" in capsys.readouterr().err

    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"sideways": true}')
    rc = main(["run", "--seg", str(seg), "--out", str(out), "--config", str(cfg)])
    assert rc == 2
    assert "error in stage config" in capsys.readouterr().err


def test_metrics_dsc(tmp_path, capsys):
    a = _write_disc(tmp_path, "a.nii.gz")
    b = _write_disc(tmp_path, "b.nii.gz")
    rc = main(["metrics", "--seg-a", str(a), "--seg-b", str(b)])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["dsc"] == {"2": 1.0, "4": 1.0}

    rc = main(["metrics", "--seg-a", str(a), "--seg-b", str(b), "--labels", "4"])
    assert rc == 0
    assert list(json.loads(capsys.readouterr().out)["dsc"]) == ["4"]

    assert main(["metrics"]) == 2
    assert "error in stage config" in capsys.readouterr().err


def test_metrics_report_agreement(tmp_path, capsys):
    rng = np.random.default_rng(8)
    base = rng.uniform(1.0, 3.0, 20)
    for name, jitter in (("a.csv", 0.0), ("b.csv", 0.1)):
        rows = [RegionRow(r, 0.0, base[i] + jitter * rng.normal(), 30.0, 10.0)
                for i, r in enumerate(REGION_ORDER)]
        RegionalReport(rows).to_csv(tmp_path / name)
    rc = main(["metrics", "--report-a", str(tmp_path / "a.csv"),
               "--report-b", str(tmp_path / "b.csv")])
    assert rc == 0
    got = json.loads(capsys.readouterr().out)["mean_thickness_mm"]
    assert got["n"] == 20
    assert 0.9 < got["pearson"] <= 1.0
    assert got["rmsd"] < 0.5

    rc = main(["metrics", "--report-a", str(tmp_path / "a.csv"),
               "--report-b", str(tmp_path / "b.csv"), "--column", "bogus"])
    assert rc == 2
    assert "no column" in capsys.readouterr().err


def test_warp_integrate_apply_resample(tmp_path):
    seg = _write_disc(tmp_path)
    geom = load_volume(seg).geometry
    vec = np.zeros(geom.dims + (3,))
    vec[..., 1] = geom.spacing[1]  # one voxel along +y
    svf = tmp_path / "svf.nii.gz"
    save_field(VelocityField(vec, geom), svf)

    dvf = tmp_path / "dvf.nii.gz"
    assert main(["warp", "--svf", str(svf), "--out", str(dvf)]) == 0
    field = load_field(dvf, kind="deformation")
    assert np.allclose(field.vectors, vec, atol=1e-5)

    warped = tmp_path / "warped.nii.gz"
    rc = main(["warp", "--dvf", str(dvf), "--apply", str(seg),
               "--resample-to", str(seg), "--out", str(warped)])
    assert rc == 0
    before = load_volume(seg)
    after = load_volume(warped)
    # pulling by one voxel along +y shifts labels one voxel toward -y
    assert after.voxels.any()
    assert np.array_equal(after.voxels[:, :-1, :], before.voxels[:, 1:, :])

    assert main(["warp", "--svf", str(svf), "--dvf", str(dvf),
                 "--out", str(tmp_path / "x.nii.gz")]) == 2
    assert main(["warp", "--out", str(tmp_path / "x.nii.gz")]) == 2


@pytest.mark.filterwarnings("ignore:.*cartilage label .* is empty")
def test_parcellate_subcommand(tmp_path):
    seg = _write_disc(tmp_path)
    out = tmp_path / "parc"
    assert main(["parcellate", "--seg", str(seg), "--out", str(out)]) == 0
    lines = (out / "report.csv").read_text().splitlines()
    present = [ln for ln in lines[2:] if "TC" in ln.split(",")[0]]
    assert len(present) == 20 - 10
    # thickness and loss are skipped in this mode
    assert all(ln.split(",")[2] == "0.000000" for ln in lines[2:])
    assert (out / "atlas.nii.gz").exists()


def test_run_two_subjects_with_workers(tmp_path):
    a = _write_disc(tmp_path, "subj_a.nii.gz", compartment="medial")
    b = _write_disc(tmp_path, "subj_b.nii.gz", compartment="lateral", side="left")
    out = tmp_path / "batch"
    rc = main(["run", "--seg", str(a), str(b), "--side", "left",
               "--out", str(out), "--workers", "2"])
    assert rc == 0
    for sub in ("subj_a", "subj_b"):
        assert (out / sub / "report.csv").exists()


def test_module_entrypoint():
    proc = subprocess.run([sys.executable, "-m", "kneecart", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("kneecart ")
