"""End-to-end runs of the command-line frontend on synthetic data."""

import json

import numpy as np
import pytest

from sdvmatch import io, net
from sdvmatch.cli import main

COMMON = ["--set", "arch_preset=compact", "--set", "descriptor_dim=16"]


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenes")
    rc = main(["synth", "--out", str(d), "--pairs", "2", "--seed", "5",
               "--points", "4000", "--noise", "0.001", "--overlap", "0.8"])
    assert rc == 0
    return d


@pytest.fixture(scope="module")
def weights_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("weights")
    w = d / "w.sdvw"
    arch = net.compact_architecture(16, 16)
    net.save_params(w, net.init_params(arch, seed=1))
    return w


class TestSynth:
    def test_outputs_exist(self, scene_dir):
        assert (scene_dir / "manifest.txt").exists()
        assert (scene_dir / "pair_000_a.ply").exists()
        assert (scene_dir / "pair_001_T.txt").exists()
        cloud = io.read_ply(scene_dir / "pair_000_a.ply")
        assert len(cloud) == 4000


class TestDownsample:
    def test_roundtrip(self, scene_dir, tmp_path):
        out = tmp_path / "down.ply"
        rc = main(["downsample", "--cloud", str(scene_dir / "pair_000_a.ply"),
                   "--cell", "0.05", "--out", str(out)])
        assert rc == 0
        assert len(io.read_ply(out)) < 4000


class TestKeypoints:
    def test_sampling(self, scene_dir, tmp_path):
        out = tmp_path / "k.txt"
        rc = main(["keypoints", "--cloud", str(scene_dir / "pair_000_a.ply"),
                   "--count", "100", "--seed", "3", "--neighbor-radius", "0.2",
                   "--out", str(out)])
        assert rc == 0
        kp = io.read_keypoints(out, 4000)
        assert len(kp) == 100


class TestDescribe:
    def test_describe_and_sidecar(self, scene_dir, weights_file, tmp_path):
        kp = tmp_path / "k.txt"
        main(["keypoints", "--cloud", str(scene_dir / "pair_000_a.ply"),
              "--count", "60", "--seed", "3", "--neighbor-radius", "0.2",
              "--out", str(kp)])
        out = tmp_path / "d.sdvd"
        rc = main(["describe", "--cloud", str(scene_dir / "pair_000_a.ply"),
                   "--keypoints", str(kp), "--weights", str(weights_file),
                   "--out", str(out)] + COMMON)
        assert rc == 0
        desc = io.read_descriptors(out, expected_dim=16)
        skipped = io.read_keypoints(str(out) + ".skipped")
        assert len(desc) + len(skipped) == 60
        np.testing.assert_allclose(np.linalg.norm(desc, axis=1), 1.0, atol=1e-3)

    def test_threads_match_serial(self, scene_dir, weights_file, tmp_path):
        kp = tmp_path / "k.txt"
        main(["keypoints", "--cloud", str(scene_dir / "pair_000_a.ply"),
              "--count", "40", "--seed", "4", "--neighbor-radius", "0.2",
              "--out", str(kp)])
        outs = []
        for threads in ("1", "3"):
            out = tmp_path / f"d{threads}.sdvd"
            rc = main(["describe", "--cloud", str(scene_dir / "pair_000_a.ply"),
                       "--keypoints", str(kp), "--weights", str(weights_file),
                       "--out", str(out), "--threads", threads] + COMMON)
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestMatchRegister:
    def _describe_pair(self, scene_dir, weights_file, tmp_path):
        paths = {}
        for side, cloud in (("p", "pair_000_a.ply"), ("q", "pair_000_b.ply")):
            kp = tmp_path / f"k{side}.txt"
            main(["keypoints", "--cloud", str(scene_dir / cloud), "--count", "150",
                  "--seed", "3" if side == "p" else "4",
                  "--neighbor-radius", "0.2", "--out", str(kp)])
            d = tmp_path / f"d{side}.sdvd"
            main(["describe", "--cloud", str(scene_dir / cloud), "--keypoints",
                  str(kp), "--weights", str(weights_file), "--out", str(d)] + COMMON)
            paths[side] = (kp, d)
        return paths

    def test_match_output(self, scene_dir, weights_file, tmp_path):
        paths = self._describe_pair(scene_dir, weights_file, tmp_path)
        out = tmp_path / "corr.txt"
        rc = main(["match", "--desc-p", str(paths["p"][1]),
                   "--desc-q", str(paths["q"][1]), "--out", str(out)])
        assert rc == 0
        rows = out.read_text().splitlines()
        assert rows
        i, j, d = rows[0].split()
        int(i), int(j), float(d)

    def test_register_too_few_correspondences(self, scene_dir, weights_file, tmp_path):
        # two descriptor files with a single row each -> at most one match
        d1 = tmp_path / "a.sdvd"
        d2 = tmp_path / "b.sdvd"
        io.write_descriptors(d1, np.eye(1, 16, dtype=np.float32))
        io.write_descriptors(d2, np.eye(1, 16, dtype=np.float32))
        k1 = tmp_path / "ka.txt"
        k2 = tmp_path / "kb.txt"
        io.write_keypoints(k1, [0])
        io.write_keypoints(k2, [0])
        rc = main(["register",
                   "--cloud-p", str(scene_dir / "pair_000_a.ply"),
                   "--cloud-q", str(scene_dir / "pair_000_b.ply"),
                   "--keypoints-p", str(k1), "--keypoints-q", str(k2),
                   "--desc-p", str(d1), "--desc-q", str(d2),
                   "--out", str(tmp_path / "T.txt")])
        assert rc == 1


class TestEvaluate:
    def test_oracle_full_recall(self, scene_dir, tmp_path):
        report = tmp_path / "report.json"
        csv = tmp_path / "report.csv"
        rc = main(["evaluate", "--manifest", str(scene_dir / "manifest.txt"),
                   "--oracle", "--keypoint-count", "200", "--seed", "0",
                   "--neighbor-radius", "0.2",
                   "--report", str(report), "--csv", str(csv)] + COMMON)
        assert rc == 0
        doc = json.loads(report.read_text())
        assert doc["recall"] == 1.0
        assert len(doc["pairs"]) == 2
        assert csv.read_text().startswith("scene,frag_a,frag_b,")

    def test_determinism_byte_identical(self, scene_dir, tmp_path):
        outs = []
        for k in range(2):
            report = tmp_path / f"r{k}.json"
            rc = main(["evaluate", "--manifest", str(scene_dir / "manifest.txt"),
                       "--oracle", "--keypoint-count", "100", "--seed", "7",
                       "--neighbor-radius", "0.2", "--report", str(report)] + COMMON)
            assert rc == 0
            outs.append(report.read_bytes())
        assert outs[0] == outs[1]

    def test_missing_weights_is_error(self, scene_dir):
        rc = main(["evaluate", "--manifest", str(scene_dir / "manifest.txt"),
                   "--keypoint-count", "50"])
        assert rc == 1

    def test_usage_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["evaluate", "--bogus-flag"])
        assert exc.value.code == 2


class TestSweep:
    def test_sweep_csv(self, scene_dir, tmp_path):
        out = tmp_path / "sweep.csv"
        rc = main(["sweep", "--manifest", str(scene_dir / "manifest.txt"),
                   "--oracle", "--keypoint-count", "150", "--seed", "0",
                   "--neighbor-radius", "0.2", "--tau2", "0.05,0.2,0.5",
                   "--out", str(out)] + COMMON)
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "tau2,recall"
        assert len(lines) == 4
        recalls = [float(l.split(",")[1]) for l in lines[1:]]
        assert all(a >= b for a, b in zip(recalls, recalls[1:]))


class TestTrainCli:
    def test_short_training_run(self, scene_dir, tmp_path):
        weights = tmp_path / "trained.sdvw"
        log = tmp_path / "loss.csv"
        rc = main(["train", "--manifest", str(scene_dir / "manifest.txt"),
                   "--out", str(weights), "--seed", "1", "--loss-log", str(log),
                   "--set", "arch_preset=compact", "--set", "descriptor_dim=16",
                   "--set", "batch_size=4", "--set", "anchors_per_pair=6",
                   "--set", "epochs=2", "--set", "dropout_rate=0.0"])
        assert rc == 0
        assert weights.exists()
        params = net.load_params(weights)
        assert net.descriptor_dim(params.arch) == 16
        assert log.read_text().startswith("iteration,epoch,loss,lr")

    def test_bad_config_key(self, scene_dir, tmp_path):
        rc = main(["train", "--manifest", str(scene_dir / "manifest.txt"),
                   "--out", str(tmp_path / "w.sdvw"), "--set", "nope=1"])
        assert rc == 1
