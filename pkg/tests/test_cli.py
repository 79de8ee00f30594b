import json
from pathlib import Path

import numpy as np
import pytest

from refield.cli import main
from refield.config import Config
from refield.scenes import fixture_diffuse_sphere, save_scene


@pytest.fixture(scope="module")
def sphere_json(tmp_path_factory):
    path = tmp_path_factory.mktemp("scene") / "sphere.json"
    save_scene(path, fixture_diffuse_sphere())
    return path


@pytest.fixture(scope="module")
def baked(tmp_path_factory, sphere_json):
    out = tmp_path_factory.mktemp("fixture")
    code = main(["bake", "--scene", str(sphere_json), "--dims", "32",
                 "--out", str(out), "--views", "3", "--resolution", "24",
                 "--samples", "48"])
    assert code == 0
    return out


class TestBake:
    def test_outputs_exist(self, baked):
        assert (baked / "grid.rfv").exists()
        assert (baked / "cameras.json").exists()
        assert sorted(p.name for p in (baked / "views").glob("*.pfm")) == [
            "view_000.pfm", "view_001.pfm", "view_002.pfm"]
        assert (baked / "gt" / "env.pfm").exists()
        assert (baked / "gt" / "mask_000.pfm").exists()
        assert (baked / "gt" / "albedo_000.pfm").exists()
        assert (baked / "gt" / "normal_000.pfm").exists()

    def test_byte_stable_with_seed(self, tmp_path, sphere_json):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = main(["--seed", "5", "bake", "--scene", str(sphere_json),
                         "--dims", "16", "--out", str(out), "--views", "2",
                         "--resolution", "12", "--samples", "16"])
            assert code == 0
            outs.append((out / "views" / "view_000.pfm").read_bytes())
        assert outs[0] == outs[1]


class TestUsageErrors:
    def test_unknown_flag_exits_one(self, capsys):
        assert main(["render", "--bogus"]) == 1

    def test_missing_subcommand_exits_one(self):
        assert main([]) == 1

    def test_unknown_config_key_exits_two(self, tmp_path, sphere_json):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"not_a_key": 1}))
        code = main(["--config", str(cfg), "bake", "--scene",
                     str(sphere_json), "--dims", "16",
                     "--out", str(tmp_path / "o")])
        assert code == 2


class TestDecomposeCli:
    def test_empty_grid_no_surface(self, tmp_path, baked):
        from refield.grids import DensityGrid, save_rfv

        void = DensityGrid(sigma=np.zeros((8, 8, 8), dtype=np.float32),
                           origin=np.full(3, -1.0), voxel_size=0.25)
        save_rfv(tmp_path / "void.rfv", void)
        code = main(["decompose", "--grid", str(tmp_path / "void.rfv"),
                     "--views", str(baked), "--out", str(tmp_path / "r")])
        assert code == 2

    def test_small_end_to_end(self, tmp_path, baked):
        cfg = Config(stage_a_epochs=1, warmup_epochs=1, joint_epochs=1,
                     batch_size=256, n_spec=8, n_diff=8, env_resolution=8,
                     seed=3)
        cfg_path = tmp_path / "cfg.json"
        cfg.save(cfg_path)
        out = tmp_path / "result"
        code = main(["--config", str(cfg_path), "decompose",
                     "--grid", str(baked / "grid.rfv"),
                     "--views", str(baked), "--out", str(out)])
        assert code == 0
        assert (out / "surfels.sfl").exists()
        assert (out / "env.pfm").exists()
        metrics = (out / "metrics.csv").read_text().strip().split("\n")
        assert metrics[0] == "epoch,stage,total,R,C,P,PSNR"
        assert len(metrics) == 4

        # render from the decomposition output
        img = tmp_path / "img.pfm"
        code = main(["--config", str(cfg_path), "render",
                     "--surfels", str(out / "surfels.sfl"),
                     "--grid", str(baked / "grid.rfv"),
                     "--env", str(out / "env.pfm"),
                     "--camera", str(baked / "cameras.json"),
                     "--out", str(img), "--png", str(tmp_path / "img.png")])
        assert code == 0
        assert img.exists() and (tmp_path / "img.png").exists()

        # relight with the gt environment
        code = main(["--config", str(cfg_path), "relight",
                     "--surfels", str(out / "surfels.sfl"),
                     "--grid", str(baked / "grid.rfv"),
                     "--env", str(baked / "gt" / "env.pfm"),
                     "--camera", str(baked / "cameras.json"),
                     "--out", str(tmp_path / "relit.pfm")])
        assert code == 0

        # material edit
        code = main(["--config", str(cfg_path), "edit-material",
                     "--surfels", str(out / "surfels.sfl"),
                     "--grid", str(baked / "grid.rfv"),
                     "--env", str(out / "env.pfm"),
                     "--camera", str(baked / "cameras.json"),
                     "--set-roughness", "0.9",
                     "--out", str(tmp_path / "edited.pfm")])
        assert code == 0


class TestExtractCli:
    def test_extract_surface(self, tmp_path, baked):
        out = tmp_path / "surfels.sfl"
        code = main(["extract-surface", "--grid", str(baked / "grid.rfv"),
                     "--cameras", str(baked / "cameras.json"),
                     "--out", str(out)])
        assert code == 0
        from refield.surfels import load_sfl

        cloud = load_sfl(out)
        assert len(cloud) > 50
        assert np.allclose(np.linalg.norm(cloud.normals, axis=1), 1.0)


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = Config(seed=7, n_spec=32)
        cfg.save(tmp_path / "c.json")
        back = Config.load(tmp_path / "c.json")
        assert back.seed == 7 and back.n_spec == 32

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError):
            Config.from_dict({"bogus": 1})

    def test_range_validation(self):
        with pytest.raises(ValueError):
            Config(tau_hit=1.5)
        with pytest.raises(ValueError):
            Config(n_spec=0)
        with pytest.raises(ValueError):
            Config(env_resolution=12)
        with pytest.raises(ValueError):
            Config(smooth_norm="l3")
