"""Harness tests: synthetic data, config parsing, the pipeline's outputs
and determinism, manifest completeness, and CLI exit codes."""

import hashlib
import json

import numpy as np
import pytest

from randmark import cli
from randmark import nnengine as ne
from randmark.attacks import AttackSpec
from randmark.harness import (
    ExperimentConfig,
    build_trigger_set,
    run_pipeline,
    verify_suspect,
)
from randmark.synth import gen_synthetic_images
from randmark.watermark import load_trigger_set


def micro_config(**overrides) -> ExperimentConfig:
    base = dict(
        s=16,
        k=6,
        n=8,
        backbone_hidden=(12,),
        encoder_hidden=(16,),
        decoder_hidden=(12,),
        trigger_count=8,
        k_train=4,
        k_verify=8,
        epochs=80,
        pretrain_epochs=5,
        pretrain_images=40,
        tau=2,
        r_bar=6,
        r_under=3,
        m_models=2,
        independents=1,
        seed=31,
        attacks=[("prune20", AttackSpec(kind="prune", fraction=0.2))],
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestSyntheticImages:
    def test_deterministic_under_seed(self):
        assert np.array_equal(
            gen_synthetic_images(5, 64, 1), gen_synthetic_images(5, 64, 1)
        )

    def test_distinct_images_full_range(self):
        images = gen_synthetic_images(100, 256, 2)
        assert images.shape == (100, 256)
        assert images.min() >= 0.0 and images.max() <= 1.0
        for i in range(0, 99, 7):
            assert np.linalg.norm(images[i] - images[i + 1]) > 0.0
        # every image spans the full intensity range, none constant
        assert np.all(np.ptp(images, axis=1) > 0.5)

    def test_histogram_covers_intensity_range(self):
        images = gen_synthetic_images(100, 256, 3)
        hist, _ = np.histogram(images.ravel(), bins=10, range=(0.0, 1.0))
        assert np.all(hist > 0)

    def test_non_square_dimension_rejected(self):
        with pytest.raises(ValueError, match="square"):
            gen_synthetic_images(3, 15, 4)


class TestBuildTriggerSet:
    def test_messages_balanced(self):
        images = gen_synthetic_images(100, 256, 5)
        triggers = build_trigger_set(images, 32, 0.1, 6)
        pooled = triggers.messages().mean()
        assert 0.45 <= pooled <= 0.55

    def test_zero_sigma_scale_rejected(self):
        images = gen_synthetic_images(4, 16, 7)
        with pytest.raises(ValueError, match="sigma_scale"):
            build_trigger_set(images, 8, 0.0, 8)

    def test_deterministic_under_seed(self):
        images = gen_synthetic_images(4, 16, 9)
        a = build_trigger_set(images, 8, 0.1, 10)
        b = build_trigger_set(images, 8, 0.1, 10)
        for x, y in zip(a.samples, b.samples):
            assert x.message == y.message and x.sigma == y.sigma


class TestConfigFile:
    def test_parse_sections(self, tmp_path):
        text = """
[dims]
s = 16
k = 6
n = 8
backbone_hidden = 12
encoder_hidden = 16
decoder_hidden = 12

[triggers]
trigger_count = 8
sigma_scale = 0.2

[embed]
lam = 2.0
epochs = 9

[verify]
k_verify = 12
tau = 3

[bounds]
alpha = 0.02
m_models = 4

[run]
seed = 99

[attack.pruneheavy]
kind = prune
fraction = 0.4

[attack.ft1]
kind = finetune
epochs = 1
lr = 0.002
"""
        path = tmp_path / "exp.cfg"
        path.write_text(text)
        config = ExperimentConfig.from_file(path)
        assert (config.s, config.k, config.n) == (16, 6, 8)
        assert config.backbone_hidden == (12,)
        assert config.trigger_count == 8
        assert config.sigma_scale == 0.2
        assert config.lam == 2.0 and config.epochs == 9
        assert config.k_verify == 12 and config.tau == 3
        assert config.alpha == 0.02 and config.m_models == 4
        assert config.seed == 99
        names = [name for name, _ in config.attacks]
        assert names == ["pruneheavy", "ft1"]
        assert config.attacks[0][1].fraction == 0.4
        assert config.attacks[1][1].lr == 0.002

    def test_invalid_tau_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(tau=33)


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = micro_config()
    manifest = run_pipeline(config, out)
    return config, out, manifest


class TestPipeline:
    def test_all_stages_complete(self, micro_run):
        _, out, manifest = micro_run
        assert manifest.failures == {}
        for name in (
            "triggers.rmts",
            "bundle/manifest.txt",
            "embed_log.json",
            "sweep.csv",
            "covariance.csv",
            "bound_report.json",
            "manifest.json",
        ):
            assert (out / name).is_file(), name

    def test_trigger_file_loadable(self, micro_run):
        config, out, _ = micro_run
        triggers = load_trigger_set(out / "triggers.rmts")
        assert len(triggers) == config.trigger_count

    def test_manifest_lists_every_file_with_matching_hash(self, micro_run):
        _, out, manifest = micro_run
        on_disk = {
            str(p.relative_to(out))
            for p in out.rglob("*")
            if p.is_file() and p.name != "manifest.json"
        }
        assert set(manifest.files) == on_disk
        for rel, digest in manifest.files.items():
            assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest

    def test_sweep_covers_all_suspects_and_taus(self, micro_run):
        config, out, _ = micro_run
        lines = (out / "sweep.csv").read_text().strip().splitlines()[1:]
        suspects = {line.split(",")[0] for line in lines}
        assert suspects == {"watermarked", "prune20", "independent0"}
        assert len(lines) == len(suspects) * (config.n + 1)

    def test_verification_reports_emitted(self, micro_run):
        _, out, _ = micro_run
        payload = json.loads((out / "verification" / "watermarked.json").read_text())
        assert payload["detection_rate"] >= 0.5
        assert len(payload["rho"]) == 8

    def test_zero_attack_config_keeps_baselines_only(self, tmp_path):
        config = micro_config(attacks=[], bounds_stage=False, seed=32)
        run_pipeline(config, tmp_path / "run")
        lines = (tmp_path / "run" / "sweep.csv").read_text().strip().splitlines()[1:]
        kinds = {line.split(",")[1] for line in lines}
        assert kinds == {"watermarked", "independent"}

    def test_stage_failure_recorded_and_dependents_skipped(self, tmp_path):
        # a fine-tune attack with an absurd learning rate diverges; the
        # failure lands in the manifest and verification never runs
        config = micro_config(
            seed=34,
            bounds_stage=False,
            attacks=[("ftboom", AttackSpec(kind="finetune", epochs=2, lr=1e308))],
        )
        with np.errstate(over="ignore", invalid="ignore"):
            manifest = run_pipeline(config, tmp_path / "run")
        assert "attacks" in manifest.failures
        assert not (tmp_path / "run" / "verification").exists()
        assert (tmp_path / "run" / "manifest.json").is_file()

    def test_reruns_are_byte_identical(self, tmp_path):
        config_a = micro_config(bounds_stage=False, seed=33)
        config_b = micro_config(bounds_stage=False, seed=33)
        run_pipeline(config_a, tmp_path / "a")
        run_pipeline(config_b, tmp_path / "b")
        files_a = sorted(
            p.relative_to(tmp_path / "a")
            for p in (tmp_path / "a").rglob("*")
            if p.is_file() and p.name != "manifest.json"
        )
        files_b = sorted(
            p.relative_to(tmp_path / "b")
            for p in (tmp_path / "b").rglob("*")
            if p.is_file() and p.name != "manifest.json"
        )
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


class TestVerifySuspect:
    def test_report_shape(self, mini_run):
        report, batches = verify_suspect(
            mini_run.bundle.watermarked_f,
            mini_run.bundle,
            mini_run.triggers,
            tau=1,
            k_draws=8,
            seed=44,
            suspect_id="self",
        )
        assert len(report.rho) == len(mini_run.triggers)
        assert len(batches) == len(mini_run.triggers)
        assert report.detection_rate == 1.0

    def test_per_trigger_streams_differ(self, mini_run):
        _, batches = verify_suspect(
            mini_run.bundle.watermarked_f, mini_run.bundle, mini_run.triggers,
            tau=1, k_draws=8, seed=45, suspect_id="self",
        )
        seeds = {b.noise_seed for b in batches}
        assert len(seeds) == len(batches)


def _write_micro_cfg(path, trigger_count=8, r_bar=6, r_under=3):
    path.write_text(f"""
[dims]
s = 16
k = 6
n = 8
backbone_hidden = 12
encoder_hidden = 16
decoder_hidden = 12

[triggers]
trigger_count = {trigger_count}

[verify]
k_verify = 4
tau = 2

[bounds]
m_models = 2
r_bar = {r_bar}
r_under = {r_under}

[run]
seed = 31
""")
    return path


class TestCli:
    def test_usage_error_exits_one(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["verify"])  # missing required flags
        assert info.value.code == 1

    def test_unknown_command_exits_one(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["definitely-not-a-command"])
        assert info.value.code == 1

    def test_verify_refuses_dimension_mismatch(self, micro_run, tmp_path, capsys):
        _, out, _ = micro_run
        wrong = ne.init_network([17, 6, 6], ["tanh", "identity"], 46)
        suspect_path = tmp_path / "wrong.rmk"
        ne.save_checkpoint(wrong, suspect_path)
        code = cli.main([
            "verify",
            "--suspect", str(suspect_path),
            "--bundle", str(out / "bundle"),
            "--triggers", str(out / "triggers.rmts"),
            "--tau", "2",
            "--K", "4",
        ])
        assert code == cli.EXIT_REFUSED
        assert "refused" in capsys.readouterr().err

    def test_verify_succeeds_on_matching_suspect(self, micro_run, tmp_path, capsys):
        _, out, _ = micro_run
        code = cli.main([
            "verify",
            "--suspect", str(out / "suspects" / "watermarked.rmk"),
            "--bundle", str(out / "bundle"),
            "--triggers", str(out / "triggers.rmts"),
            "--tau", "2",
            "--K", "4",
            "--out", str(tmp_path / "report.json"),
        ])
        assert code == cli.EXIT_OK
        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["suspect_id"] == "watermarked"

    def test_bounds_inapplicable_exits_three(self, micro_run, tmp_path):
        config, out, _ = micro_run
        # r_bar = N makes the lower-side precondition impossible
        cfg_path = _write_micro_cfg(tmp_path / "na.cfg", r_bar=config.trigger_count)
        code = cli.main([
            "bounds",
            "--config", str(cfg_path),
            "--bundle", str(out / "bundle"),
            "--triggers", str(out / "triggers.rmts"),
            "--out", str(tmp_path / "bounds_out"),
        ])
        assert code == cli.EXIT_BOUND_NA

    def test_bounds_from_population_directories(self, micro_run, tmp_path, capsys):
        _, out, _ = micro_run
        omega_dir = tmp_path / "omega"
        xi_dir = tmp_path / "xi"
        omega_dir.mkdir()
        xi_dir.mkdir()
        (omega_dir / "copy.rmk").write_bytes(
            (out / "suspects" / "watermarked.rmk").read_bytes()
        )
        (xi_dir / "indep.rmk").write_bytes(
            (out / "suspects" / "independent0.rmk").read_bytes()
        )
        cfg = _write_micro_cfg(tmp_path / "micro.cfg")
        code = cli.main([
            "bounds",
            "--config", str(cfg),
            "--bundle", str(out / "bundle"),
            "--triggers", str(out / "triggers.rmts"),
            "--population-omega", str(omega_dir),
            "--population-xi", str(xi_dir),
            "--out", str(tmp_path / "bounds_out"),
        ])
        assert code in (cli.EXIT_OK, cli.EXIT_BOUND_NA)
        payload = json.loads((tmp_path / "bounds_out" / "bound_report.json").read_text())
        assert len(payload["l"]) == 8

    def test_bounds_from_estimates_file(self, micro_run, tmp_path):
        _, out, _ = micro_run
        estimates = {
            "p_hat": 1.0,
            "q_hat": 0.125,
            "omega": [
                {"trigger_id": i, "matches": 60, "trials": 64} for i in range(8)
            ],
            "xi": [{"trigger_id": i, "matches": 33, "trials": 64} for i in range(8)],
        }
        path = tmp_path / "estimates.json"
        path.write_text(json.dumps(estimates))
        cfg = _write_micro_cfg(tmp_path / "micro.cfg")
        code = cli.main([
            "bounds",
            "--config", str(cfg),
            "--bundle", str(out / "bundle"),
            "--triggers", str(out / "triggers.rmts"),
            "--estimates", str(path),
            "--out", str(tmp_path / "bounds_est"),
        ])
        assert code in (cli.EXIT_OK, cli.EXIT_BOUND_NA)
        payload = json.loads((tmp_path / "bounds_est" / "bound_report.json").read_text())
        assert payload["p_hat"] == 1.0

    def test_oracle_emits_json(self, capsys):
        code = cli.main([
            "oracle", "binomial-tail", "--n", "32", "--tau", "5", "--r", "0.5"
        ])
        assert code == cli.EXIT_OK
        payload = json.loads(capsys.readouterr().out.strip())
        assert payload["method"] == "exact-integer"
        assert payload["value"] == pytest.approx(242825 / 2**32, rel=1e-12)

    def test_report_summarizes_run(self, micro_run, capsys):
        _, out, _ = micro_run
        code = cli.main(["report", "--run", str(out)])
        assert code == cli.EXIT_OK
        text = capsys.readouterr().out
        assert "watermarked" in text and "bounds" in text
