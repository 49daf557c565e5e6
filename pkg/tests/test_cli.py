import json

import numpy as np
import pytest

from drkit import attacks, cli
from drkit.cli import KEYS, SUBCOMMAND_KEYS, ConfigError, load_config, main
from drkit.data import bundled_digits, write_idx


def _json(tmp_path, payload, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


class TestLoadConfig:
    def test_flags_override_file(self, tmp_path):
        cfg = load_config(_json(tmp_path, {"epsilon": 16, "iters": 100}), "attack", {"iters": 50})
        assert cfg.iters == 50 and cfg.epsilon == 16.0
        assert cfg.sources["iters"] == "flag" and cfg.sources["epsilon"] == "file"

    def test_typo_suggests_key(self, tmp_path):
        with pytest.raises(ConfigError, match="did you mean 'epsilon'") as exc:
            load_config(_json(tmp_path, {"epsilonn": 16}), "attack")
        assert "valid keys:" in str(exc.value)

    def test_empty_object_gives_defaults(self, tmp_path):
        cfg = load_config(_json(tmp_path, {}), "attack")
        acfg = cfg.attack_config()
        assert acfg == attacks.AttackConfig()
        assert (cfg.epsilon, cfg.lr, cfg.beta1, cfg.beta2, cfg.mu, cfg.p) == (16.0, 0.05, 0.98, 0.99, 1.0, 0.5)

    def test_type_mismatch_names_key(self, tmp_path):
        with pytest.raises(ConfigError, match="key 'iters': expected int"):
            load_config(_json(tmp_path, {"iters": 2.5}), "attack")
        with pytest.raises(ConfigError, match="key 'epsilon'"):
            load_config(_json(tmp_path, {"epsilon": True}), "attack")

    def test_key_for_another_subcommand(self, tmp_path):
        with pytest.raises(ConfigError, match="not used by demo"):
            load_config(_json(tmp_path, {"epsilon": 8}), "demo")

    def test_not_an_object(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="flat JSON object"):
            load_config(path, "attack")

    @pytest.mark.parametrize(
        "override,key", [({"epsilon": 0.0}, "epsilon"), ({"p": 1.5}, "'p'"), ({"beta1": 1.0}, "beta1"), ({"n": 0}, "'n'")]
    )
    def test_ranges(self, override, key):
        with pytest.raises(ConfigError, match=key):
            load_config(None, "attack", override)


class TestMain:
    def test_missing_weights_exit_2(self, tmp_path, capsys):
        missing = tmp_path / "nope.drw"
        assert main(["attack", "--weights", str(missing), "--out", str(tmp_path / "o")]) == 2
        assert str(missing) in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_unknown_flag_exit_2(self, capsys):
        assert main(["eval", "--epsilonn", "16"]) == 2
        assert "--epsilonn" in capsys.readouterr().err

    def test_unknown_subcommand_exit_2(self):
        assert main(["explode"]) == 2

    def test_bad_tap_names_key(self, tmp_path, capsys):
        assert main(["attack", "--tap", "conv9.9", "--index", "0", "--out", str(tmp_path)]) == 2
        assert "key 'tap'" in capsys.readouterr().err

    def test_budget_breach_exit_3(self, tmp_path, monkeypatch):
        monkeypatch.setattr(attacks, "_project", lambda x_t, x, eps: np.clip(x_t + 0.5, 0, 1).astype(np.float32))
        assert main(["attack", "--attack", "fgsm", "--index", "0", "--out", str(tmp_path)]) == 3

    def test_help_lists_every_flag_with_default(self, capsys):
        for sub, keys in SUBCOMMAND_KEYS.items():
            with pytest.raises(SystemExit):
                cli.build_parser().parse_args([sub, "--help"])
            text = " ".join(capsys.readouterr().out.split())
            for key in keys:
                assert f"--{key}" in text
            assert text.count("(default:") >= len(keys)
            if "epsilon" in keys:
                assert "(default: 16.0; published attack setting)" in text

    def test_single_image_attack(self, tmp_path):
        out = tmp_path / "run"
        argv = ["attack", "--attack", "dr", "--tap", "conv3.3", "--epsilon", "16", "--iters", "5", "--lr", "0.05"]
        assert main(argv + ["--seed", "0", "--index", "2", "--out", str(out)]) == 0
        panel = next(out.glob("panel-*.ppm"))
        assert panel.read_bytes().startswith(b"P5\n86 28\n255\n")
        result = json.loads((out / "attack.json").read_text())
        assert len(result["images"][0]["trace"]) == 6
        assert result["images"][0]["linf"] <= 16 / 255 + 1e-6
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["iters"] == 5 and manifest["seeds"]["seed"] == 0
        assert set(manifest["outputs"]) == {panel.name, "attack.json", "x_adv.npy"}
        assert "source:minivgg-digits" in manifest["inputs"]

    def test_eval_mi_fgsm_rows(self, tmp_path):
        out = tmp_path / "ev"
        assert main(["eval", "--attack", "mi_fgsm", "--mu", "1", "--iters", "20", "--n", "10", "--out", str(out)]) == 0
        lines = (out / "eval.csv").read_text().splitlines()
        assert lines[0].startswith("source,attack,tap,target")
        assert [line.split(",")[3] for line in lines[1:]] == ["minivgg-digits", "miniresnet-digits", "minivgg-parity"]
        payload = json.loads((out / "eval.json").read_text())
        assert payload["config"]["run"]["mu"] == 1.0
        assert any("cross-task" in f for f in payload["findings"])

    def test_config_file_recorded(self, tmp_path):
        cfg = _json(tmp_path, {"attack": "fgsm", "n": 3})
        out = tmp_path / "o"
        assert main(["attack", "--config", str(cfg), "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_sources"]["attack"] == "file"
        assert "config" in manifest["inputs"]

    def test_train_on_custom_idx(self, tmp_path):
        ds = bundled_digits().take(np.arange(0, 5000, 80))
        ip, lp = tmp_path / "x.idx3-ubyte", tmp_path / "y.idx1-ubyte"
        write_idx(ds, ip, lp)
        out = tmp_path / "t"
        argv = ["train", "--images", str(ip), "--labels", str(lp), "--n_test", "20", "--epochs", "1"]
        assert main(argv + ["--batch_size", "4", "--task", "parity", "--seed", "3", "--out", str(out)]) == 0
        record = json.loads((out / "train.json").read_text())
        assert record["model"] == "minivgg-parity" and len(record["epoch_loss"]) == 1
        assert (out / "minivgg-parity.drw").exists()
        # the trained file is usable as an attack source
        assert main(["attack", "--weights", str(out / "minivgg-parity.drw"), "--attack", "fgsm", "--n", "2", "--out", str(out / "a")]) == 0

    def test_images_without_labels(self, tmp_path):
        assert main(["train", "--images", str(tmp_path / "x"), "--out", str(tmp_path)]) == 2


def test_every_key_documented():
    for keys in SUBCOMMAND_KEYS.values():
        for key in keys:
            assert KEYS[key].help
