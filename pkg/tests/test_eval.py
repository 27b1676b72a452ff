import pytest
import torch

from worldground import config as config_mod
from worldground import eval as eval_mod
from worldground import scenesynth, trainer
from worldground.errors import ConfigError, ValidationError
from worldground.model import GroundingModel


def tiny_cfg():
    cfg = config_mod.load_config(None).overridden(
        model__dim=16, model__text_dim=16, model__state_dim=16,
        model__encoder_blocks=1, model__encoder_heads=2,
        model__cross_modal_layers=2, model__rollout_horizon=2,
        model__prior_hidden=4, hyperedge_k=3, model__hypergraph_layers=1,
        model__mld_blocks=2, model__mld_heads=2, model__mld_dropout=0.0,
        train__stage1_epochs=1, train__stage2_epochs=1,
        train__batch_size=4)
    cfg.validate()
    return cfg


@pytest.fixture(scope="module")
def scenes():
    synth = scenesynth.SynthConfig()
    return [scenesynth.generate_scene(seed, synth) for seed in range(10)]


def test_oracle_predictor_scores_one():
    synth = scenesynth.SynthConfig()
    samples = [scenesynth.generate_scene(s, synth) for s in range(6)]

    def perfect(sample):
        return sample.objects[sample.target_index].box

    report = eval_mod.evaluate(None, samples, tiny_cfg(), predictor=perfect)
    assert report["count"] == 6
    assert report["accuracy"] == 1.0
    assert report["mean_iou"] == 1.0
    assert "node_accuracy" not in report
    for split in report["splits"].values():
        assert split["accuracy"] == 1.0


def test_fixed_corner_predictor_scores_zero(scenes):
    tiny = (0.0, 0.0, 1e-4, 1e-4)
    report = eval_mod.evaluate(None, scenes, tiny_cfg(),
                               predictor=lambda s: tiny)
    assert report["accuracy"] == 0.0
    assert report["mean_iou"] < 0.01


def test_model_report_contains_node_accuracy(scenes):
    cfg = tiny_cfg()
    torch.manual_seed(0)
    model = GroundingModel.from_config(cfg)
    report = eval_mod.evaluate(model, scenes, cfg)
    assert 0.0 <= report["node_accuracy"] <= 1.0
    assert 0.0 <= report["accuracy"] <= 1.0
    assert report["count"] == len(scenes)
    assert sum(s["count"] for s in report["splits"].values()) >= len(scenes)


def test_evaluate_validation():
    cfg = tiny_cfg()
    with pytest.raises(ValidationError):
        eval_mod.evaluate(None, [], cfg, predictor=lambda s: (0, 0, 1, 1))
    synth = scenesynth.SynthConfig()
    sample = scenesynth.generate_scene(0, synth)
    with pytest.raises(ConfigError):
        eval_mod.evaluate(None, [sample], cfg, iou_threshold=1.5,
                          predictor=lambda s: (0, 0, 1, 1))


def test_report_serialization_is_byte_stable(scenes):
    cfg = tiny_cfg()
    torch.manual_seed(1)
    model = GroundingModel.from_config(cfg)
    a = eval_mod.report_to_json(eval_mod.evaluate(model, scenes, cfg))
    b = eval_mod.report_to_json(eval_mod.evaluate(model, scenes, cfg))
    assert a == b
    assert a.encode("utf-8")  # serializable


def test_train_and_eval_round_trip(scenes):
    cfg = tiny_cfg()
    report = eval_mod.train_and_eval(scenes[:6], scenes[6:], cfg, seed=0)
    assert len(report["stage1_losses"]) == 1
    assert len(report["stage2_losses"]) == 1
    assert report["count"] == 4


def test_ablate_default_is_full_only(scenes):
    cfg = tiny_cfg()
    table = eval_mod.ablate(scenes[:4], scenes[4:6], cfg, ablations=(),
                            seeds=(0,))
    assert list(table) == ["full"]
    entry = table["full"]
    assert entry["seeds"] == [0]
    assert len(entry["accuracy_per_seed"]) == 1


def test_ablate_rejects_unknown_variant(scenes):
    with pytest.raises(ConfigError, match="unknown ablations"):
        eval_mod.ablate(scenes[:2], scenes[2:4], tiny_cfg(),
                        ablations=("backwards_time",))


def test_benchmark_reports_param_count(scenes, tmp_path):
    cfg = tiny_cfg()
    torch.manual_seed(2)
    model = GroundingModel.from_config(cfg)
    result = trainer.train_stage1(scenes[:4], cfg, seed=2, model=model)
    path = tmp_path / "bench.wgnd"
    trainer.save_checkpoint(str(path), result.model, result.optimizer,
                            result.step, cfg)
    report = eval_mod.benchmark_latency(str(path), scenes[:2], cfg,
                                        n_samples=4, warmup=1)
    assert report["n_samples"] == 4
    assert report["mean_ms"] > 0.0
    assert report["p95_ms"] >= report["p50_ms"] * 0.5
    want_params = sum(p.numel() for p in result.model.parameters())
    assert report["param_count"] == want_params
    assert "not comparable" in report["reference"]


def test_benchmark_single_sample_no_warmup(scenes):
    cfg = tiny_cfg()
    torch.manual_seed(3)
    model = GroundingModel.from_config(cfg)
    report = eval_mod.benchmark_latency(model, scenes[:1], cfg,
                                        n_samples=1, warmup=0)
    assert report["n_samples"] == 1


def test_benchmark_validation(scenes):
    cfg = tiny_cfg()
    torch.manual_seed(4)
    model = GroundingModel.from_config(cfg)
    with pytest.raises(ConfigError):
        eval_mod.benchmark_latency(model, scenes[:1], cfg, n_samples=0)
    with pytest.raises(ConfigError):
        eval_mod.benchmark_latency(model, scenes[:1], cfg, warmup=-1)
    with pytest.raises(ValidationError):
        eval_mod.benchmark_latency(model, [], cfg)
