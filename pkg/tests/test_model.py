"""Model assembly, presets, cost algebra, checkpoint format."""
import numpy as np
import pytest

from smoe.errors import ConfigError, ContractError, DimensionError, FormatError
from smoe.model import (PRESETS, AcousticModel, ModelConfig, build,
                        count_flops, count_params, load_checkpoint,
                        preset_config, save_checkpoint)


class TestModelConfig:
    def test_defaults_are_valid(self):
        cfg = ModelConfig()
        assert cfg.blank == cfg.vocab - 1
        assert cfg.n_attention == 2
        assert cfg.has_embedding_network

    def test_all_violations_reported_at_once(self):
        with pytest.raises(ConfigError) as err:
            ModelConfig(d=0, vocab=1, n_experts=0)
        msg = str(err.value)
        assert "d=0" in msg and "vocab=1" in msg and "n_experts=0" in msg

    def test_heads_must_divide_d(self):
        with pytest.raises(ConfigError):
            ModelConfig(d=32, heads=5)

    def test_embedding_concat_needs_tower(self):
        with pytest.raises(ConfigError):
            ModelConfig(router_mode="embedding-concat", embedding_depth=0)
        cfg = ModelConfig(router_mode="plain", embedding_depth=0)
        assert not cfg.has_embedding_network

    def test_json_round_trip(self):
        cfg = preset_config("desk-moe-8e")
        back = ModelConfig.from_json(cfg.to_json())
        assert back == cfg

    def test_unknown_json_field_rejected(self):
        cfg = preset_config("desk-b1")
        blob = cfg.to_json().replace('"d":32', '"d":32,"dropout":0.1')
        with pytest.raises(ConfigError):
            ModelConfig.from_json(blob)

    def test_attention_cadence(self):
        cfg = ModelConfig(moe_layers=5, attention_every=2)
        assert cfg.n_attention == 2
        cfg = ModelConfig(moe_layers=4, attention_every=0)
        assert cfg.n_attention == 0


class TestPresets:
    def test_all_presets_construct(self):
        for name in PRESETS:
            cfg = preset_config(name)
            assert cfg.preset == name

    def test_baseline_rows(self):
        b1 = preset_config("desk-b1")
        assert b1.n_experts == 1
        assert b1.moe_layers == 8  # depth-doubled to stay cost matched
        assert b1.router_mode == "plain"
        assert not b1.has_embedding_network
        b2 = preset_config("desk-b2")
        assert b2.n_experts == 4
        assert b2.loss_mode == "balancing"

    def test_routed_rows(self):
        for n in (2, 4, 8):
            cfg = preset_config(f"desk-moe-{n}e")
            assert cfg.n_experts == n
            assert cfg.router_mode == "embedding-concat"
            assert cfg.loss_mode == "importance+l1"
            assert cfg.has_embedding_network

    def test_overrides_and_unknown(self):
        cfg = preset_config("desk-moe-4e", vocab=12)
        assert cfg.vocab == 12
        with pytest.raises(ConfigError):
            preset_config("desk-moe-3e")


class TestParamCount:
    @pytest.mark.parametrize("name", ["desk-b1", "desk-b2", "desk-moe-l1",
                                      "desk-moe-l1-emb", "desk-moe-4e",
                                      "desk-moe-8e"])
    def test_algebra_matches_built_tensors(self, name):
        cfg = preset_config(name)
        want = build(cfg, seed=0).param_total()
        assert count_params(cfg).params == want

    def test_breakdown_sums_to_total(self):
        report = count_params(preset_config("desk-moe-4e"))
        assert sum(report.breakdown["params"].values()) == report.params


class TestFlopsCount:
    def test_near_constant_across_expert_counts(self):
        vals = [count_flops(preset_config(name)).flops_per_second
                for name in ("b2", "moe-2e", "moe-4e", "moe-8e")]
        spread = (max(vals) - min(vals)) / min(vals)
        assert spread < 0.01

    def test_executed_path_at_most_headline(self):
        for name in ("desk-b1", "desk-moe-4e", "moe-8e"):
            report = count_flops(preset_config(name))
            assert report.breakdown["flops"]["executed_path"] \
                <= report.flops_per_second + 1e-9

    def test_mac2_doubles(self):
        cfg = preset_config("desk-moe-4e")
        one = count_flops(cfg, convention="mac1").flops_per_second
        two = count_flops(cfg, convention="mac2").flops_per_second
        assert two == pytest.approx(2.0 * one, rel=1e-12)

    def test_scales_with_duration(self):
        cfg = preset_config("desk-b1")
        per_sec = count_flops(cfg, audio_seconds=1.0)
        report = count_flops(cfg, audio_seconds=4.0)
        assert report.breakdown["frames"] == pytest.approx(
            4.0 * per_sec.breakdown["frames"])

    def test_validation(self):
        cfg = preset_config("desk-b1")
        with pytest.raises(ContractError):
            count_flops(cfg, audio_seconds=0.0)
        with pytest.raises(ConfigError):
            count_flops(cfg, convention="mac3")


class TestForward:
    def test_routed_shapes(self):
        cfg = preset_config("desk-moe-4e")
        model = build(cfg, seed=0)
        x = np.random.default_rng(0).normal(size=(9, cfg.input_dim))
        logits, records, emb_logits = model.forward_utterance(x)
        assert logits.shape == (9, cfg.vocab)
        assert len(records) == cfg.moe_layers
        assert all(r.frames == 9 and r.n_experts == 4 for r in records)
        assert emb_logits is not None
        assert emb_logits.shape == (9, cfg.vocab)

    def test_plain_has_no_embedding_logits(self):
        cfg = preset_config("desk-b1")
        model = build(cfg, seed=0)
        x = np.random.default_rng(1).normal(size=(5, cfg.input_dim))
        logits, records, emb_logits = model.forward_utterance(x)
        assert emb_logits is None
        assert len(records) == cfg.moe_layers

    def test_input_contract(self):
        model = build(preset_config("desk-b1"), seed=0)
        with pytest.raises(DimensionError):
            model.forward_utterance(np.zeros((4, 64)))
        with pytest.raises(ContractError):
            model.forward_utterance(np.zeros((0, 128)))

    def test_parameter_names_unique_and_trainable(self):
        model = build(preset_config("desk-moe-4e"), seed=0)
        params = model.parameters()
        names = [n for n, _ in params]
        assert len(names) == len(set(names))
        assert all(p.requires_grad for _, p in params)

    def test_build_deterministic_per_seed(self):
        cfg = preset_config("desk-moe-4e")
        a = build(cfg, seed=3)
        b = build(cfg, seed=3)
        for (na, pa), (nb, pb) in zip(a.parameters(), b.parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        c = build(cfg, seed=4)
        assert any(not np.array_equal(pa.data, pc.data)
                   for (_, pa), (_, pc) in zip(a.parameters(), c.parameters()))


class TestCheckpoint:
    def trained_like_model(self, seed=0):
        # scribble over the init so the round trip proves data movement,
        # not initialization determinism
        model = build(preset_config("desk-moe-2e"), seed=seed)
        rng = np.random.default_rng(99)
        for _, p in model.parameters():
            p.data = rng.normal(size=p.data.shape)
        return model

    def test_round_trip_bit_exact(self, tmp_path):
        model = self.trained_like_model()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert back.cfg == model.cfg
        assert back.seed == model.seed
        for (na, pa), (nb, pb) in zip(model.parameters(), back.parameters()):
            assert na == nb
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError) as err:
            load_checkpoint(str(path))
        assert err.value.offset == 0

    def test_truncation(self, tmp_path):
        model = self.trained_like_model()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, path)
        blob = open(path, "rb").read()
        cut = tmp_path / "cut.ckpt"
        cut.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(str(cut))

    def test_trailing_bytes(self, tmp_path):
        model = self.trained_like_model()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, path)
        with open(path, "ab") as f:
            f.write(b"\x00")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_config_change_breaks_block_check(self, tmp_path):
        # a checkpoint is only loadable into the exact architecture it
        # was saved from; the stored config drives the rebuild, so a
        # corrupted block name must be caught
        model = self.trained_like_model()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, path)
        blob = bytearray(open(path, "rb").read())
        idx = bytes(blob).find(b"inproj.w")
        blob[idx:idx + 8] = b"wrong.nm"
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(str(bad))
