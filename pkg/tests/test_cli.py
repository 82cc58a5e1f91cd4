import json

import numpy as np
import pytest

from polyformer.cli import flat_to_phase_config, main
from polyformer.errors import ConfigError
from polyformer.train import load_checkpoint

TINY = {"depth": 1, "base_channels": 4, "num_prototypes": 4, "ffn_hidden": 8, "steps": 2}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    (root / "small_images.json").write_text(json.dumps({"size": 16}))
    for domain, n in (("source", 10), ("target", 8)):
        assert main(["synth", "--domain", domain, "--count", str(n), "--out", str(root / domain),
                     "--config", str(root / "small_images.json")]) == 0
    cfg = str(root / "tiny.json")
    assert main(["train-source", "--data", str(root / "source"), "--out", str(root / "a.pfrm"), "--config", cfg]) == 0
    assert main(["train-poly", "--ckpt", str(root / "a.pfrm"), "--data", str(root / "source"),
                 "--out", str(root / "b.pfrm"), "--config", cfg]) == 0
    return root


class TestConfig:
    def test_flat_mapping(self):
        c = flat_to_phase_config({"lr": 0.01, "use_adv": False, "depth": 1, "base_channels": 4, "seed": 3}, "C")
        assert c.optim.lr == 0.01 and not c.flags.use_adv and c.unet.depth == 1 and c.poly.dim == 4 and c.seed == 3

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            flat_to_phase_config({"learning_rate": 1}, "A")


class TestCommands:
    def test_synth_manifest(self, workdir):
        manifest = json.loads((workdir / "target" / "manifest.json").read_text())
        assert len(manifest["samples"]) == 8 and manifest["spec"]["size"] == 16

    def test_digest_recorded(self, workdir):
        meta = load_checkpoint(workdir / "b.pfrm").metadata
        assert meta["phase"] == "B" and len(meta["config_digest"]) == 16

    def test_adapt_and_eval(self, workdir, capsys):
        code, out, _ = run(capsys, "adapt", "--ckpt", workdir / "b.pfrm", "--target", workdir / "target",
                           "--source", workdir / "source", "--out", workdir / "c.pfrm", "--shots", 3,
                           "--no-sup", "--adv", "features", "--config", workdir / "tiny.json")
        assert code == 0
        summary = json.loads(out)
        assert summary["row"] == "L_adv+K" and len(summary["shot_ids"]) == 3
        code, out, _ = run(capsys, "eval", "--ckpt", workdir / "c.pfrm", "--data", workdir / "target",
                           "--holdout-shots", 3, "--out", workdir / "report.json")
        assert code == 0
        report = json.loads(out)
        assert report["count"] == 5 and report["domain"] == "target"
        assert report["config_digest"] == summary["config_digest"]
        assert json.loads((workdir / "report.json").read_text()) == report

    def test_eval_deterministic(self, workdir, capsys):
        outs = [run(capsys, "eval", "--ckpt", workdir / "b.pfrm", "--data", workdir / "source")[1] for _ in range(2)]
        assert outs[0] == outs[1]

    def test_ablate(self, workdir, capsys):
        code, out, _ = run(capsys, "ablate", "--ckpt", workdir / "b.pfrm", "--target", workdir / "target",
                           "--source", workdir / "source", "--shots", 3, "--out", workdir / "abl",
                           "--config", workdir / "tiny.json")
        assert code == 0
        table = json.loads((workdir / "abl" / "ablation.json").read_text())
        assert len(table["rows"]) == 7 and all(r["ledger_ok"] for r in table["rows"])
        assert len((workdir / "abl" / "ablation.csv").read_text().splitlines()) == 8
        assert "Unadapted" in out


class TestExitCodes:
    def test_unsupported_flags(self, workdir, capsys):
        code, _, err = run(capsys, "adapt", "--ckpt", workdir / "b.pfrm", "--target", workdir / "target",
                           "--out", workdir / "x.pfrm", "--no-sup", "--adv", "off", "--config", workdir / "tiny.json")
        assert code == 2 and "no supported ablation row" in err

    def test_bad_config_key(self, workdir, capsys, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"learning_rate": 0.1}))
        code, _, _ = run(capsys, "train-source", "--data", workdir / "source", "--out", tmp_path / "a.pfrm",
                         "--config", bad)
        assert code == 2

    def test_corrupt_checkpoint(self, workdir, capsys, tmp_path):
        broken = tmp_path / "broken.pfrm"
        broken.write_bytes((workdir / "a.pfrm").read_bytes()[:100])
        code, _, err = run(capsys, "eval", "--ckpt", broken, "--data", workdir / "source")
        assert code == 2 and "truncated" in err

    def test_numeric_failure(self, workdir, capsys, tmp_path):
        nan_cfg = tmp_path / "nan.json"
        nan_cfg.write_text(json.dumps({**TINY, "lr": float("nan")}))
        code, _, _ = run(capsys, "train-source", "--data", workdir / "source", "--out", tmp_path / "n.pfrm",
                         "--config", nan_cfg, "--steps", 3)
        assert code == 3

    def test_ledger_violation(self, workdir, capsys, monkeypatch, tmp_path):
        from polyformer.train import phases

        monkeypatch.setattr(phases, "allowed_changes", lambda model, phase, trainable: set())
        code, _, err = run(capsys, "train-poly", "--ckpt", workdir / "a.pfrm", "--data", workdir / "source",
                           "--out", tmp_path / "v.pfrm", "--config", workdir / "tiny.json")
        assert code == 4 and "poly." in err
