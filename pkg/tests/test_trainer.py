import dataclasses
import json

import numpy as np
import pytest
import torch

from maskmix.backbone import Checkpoint, EncoderConfig, Network, init_parameters
from maskmix.core import ConfigError, NumericFault, RandomSource
from maskmix.data import LoadedDataset
from maskmix.losses import LossConfig
from maskmix.mixing import MixPolicy
from maskmix.trainer import (
    EpochRecord,
    RunReport,
    TrainConfig,
    balanced_sampler,
    build_optimizer,
    evaluate,
    evaluate_network,
    finetune,
    layer_id,
    lr_factor,
    network_from_checkpoint,
    pretrain,
)

TINY_ENC = dict(
    image_size=8, patch_size=4, channels=1, embed_dim=12, depth=2, num_heads=2,
    mlp_ratio=2.0, decoder_dim=8, decoder_depth=1, decoder_num_heads=2,
)


def tiny_dataset(rng: RandomSource, n_per_class: int = 12, num_classes: int = 3,
                 size: int = 8) -> LoadedDataset:
    """Separable toy data: class k brightens a distinct image third."""
    n = n_per_class * num_classes
    images = rng.uniform(0.0, 0.35, size=(n, size, size, 1)).astype(np.float32)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    third = size // num_classes if num_classes <= size else 1
    for i, k in enumerate(labels):
        images[i, :, k * third : (k + 1) * third] += 0.6
    images = np.clip(images, 0.0, 1.0)
    order = rng.permutation(n)
    return LoadedDataset(
        images=images[order],
        labels=labels[order],
        class_names=tuple(f"c{k}" for k in range(num_classes)),
        source_ids=tuple(str(i) for i in range(n)),
    )


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        stage="finetune",
        epochs=2,
        batch_size=6,
        lr=1e-3,
        warmup_epochs=0.5,
        projection_dim=8,
        encoder=EncoderConfig(**TINY_ENC),
        eval_every=1,
        seed=3,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=1)
        with pytest.raises(ConfigError):
            TrainConfig(layer_decay=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(stage="warmup")
        with pytest.raises(ConfigError):
            TrainConfig(contrastive="scl", mix=MixPolicy(enabled=True))

    def test_json_round_trip(self):
        cfg = tiny_config(contrastive="scl", mix=MixPolicy(enabled=False),
                          loss=LossConfig(temperature=0.2, loss_weight=0.5))
        restored = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert restored == cfg

    def test_field_names_mirror_config_file(self):
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        assert {"stage", "epochs", "batch_size", "lr", "weight_decay", "layer_decay",
                "mask_ratio", "balanced_sampling", "seed", "projection_dim"} <= names


class TestOptimizer:
    def test_layer_decay_schedule(self):
        cfg = tiny_config(layer_decay=0.65, lr=1e-4)
        model = Network(cfg.encoder, num_classes=3, projection_dim=8)
        opt = build_optimizer(model, cfg)
        depth = cfg.encoder.depth
        top = depth + 1
        seen = set()
        for group in opt.param_groups:
            scale = group["lr"] / cfg.lr
            expected = {cfg.layer_decay ** (top - lid) for lid in range(top + 1)}
            assert any(abs(scale - e) < 1e-12 for e in expected)
            seen.add(round(scale, 10))
        assert max(seen) == pytest.approx(1.0)  # head group at base lr
        assert min(seen) == pytest.approx(cfg.layer_decay**top)

    def test_layer_id_mapping(self):
        assert layer_id("encoder.patch_embed.weight", 4) == 0
        assert layer_id("encoder.pos_embed", 4) == 0
        assert layer_id("encoder.blocks.2.qkv.weight", 4) == 3
        assert layer_id("encoder.norm.weight", 4) == 5
        assert layer_id("classifier.fc.weight", 4) == 5
        assert layer_id("decoder.pixel_head.bias", 4) == 5

    def test_one_d_params_not_decayed(self):
        cfg = tiny_config()
        model = Network(cfg.encoder, num_classes=3, projection_dim=8)
        opt = build_optimizer(model, cfg)
        for group in opt.param_groups:
            dims = {p.dim() for p in group["params"]}
            if group["weight_decay"] == 0.0:
                assert dims <= {1}
            else:
                assert all(d > 1 for d in dims)

    def test_zero_grad_step_only_decays(self):
        cfg = tiny_config(weight_decay=0.1)
        model = Network(cfg.encoder, num_classes=3, projection_dim=8)
        init_parameters(model, RandomSource(0))
        opt = build_optimizer(model, cfg)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        for (name, p), group_wd in _param_with_wd(model, opt):
            if group_wd > 0:
                assert (p.detach().abs() <= before[name].abs() + 1e-12).all()
                if before[name].abs().max() > 0:
                    assert not torch.equal(p.detach(), before[name])
            else:
                assert torch.equal(p.detach(), before[name])

    def test_zero_grad_zero_decay_is_identity(self):
        cfg = tiny_config(weight_decay=0.0)
        model = Network(cfg.encoder, num_classes=3, projection_dim=8)
        init_parameters(model, RandomSource(0))
        opt = build_optimizer(model, cfg)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        for name, p in model.named_parameters():
            assert torch.equal(p.detach(), before[name])

    def test_lr_factor_shape(self):
        total, warm = 100, 10
        assert lr_factor(0, total, warm) == pytest.approx(0.1)
        assert lr_factor(9, total, warm) == pytest.approx(1.0)
        assert lr_factor(warm, total, warm) == pytest.approx(1.0)
        assert lr_factor(total - 1, total, warm) < 0.001
        values = [lr_factor(s, total, warm) for s in range(warm, total)]
        assert all(a >= b for a, b in zip(values, values[1:]))


def _param_with_wd(model, opt):
    by_id = {}
    for group in opt.param_groups:
        for p in group["params"]:
            by_id[id(p)] = group["weight_decay"]
    return [((n, p), by_id[id(p)]) for n, p in model.named_parameters()]


class TestBalancedSampler:
    def test_balanced_input_uniform_expectation(self):
        rng = RandomSource(0)
        ds = tiny_dataset(rng, n_per_class=20, num_classes=3)
        idx = balanced_sampler(ds, rng)
        counts = np.bincount(ds.labels[idx], minlength=3)
        assert len(idx) == len(ds.labels)
        assert counts.min() > 0

    def test_skewed_input_rebalanced(self):
        rng = RandomSource(1)
        images = np.zeros((1000, 4, 4, 1), dtype=np.float32)
        labels = np.array([0] * 900 + [1] * 100)
        ds = LoadedDataset(images=images, labels=labels, class_names=("a", "b"))
        idx = balanced_sampler(ds, rng)
        minority = (ds.labels[idx] == 1).sum()
        assert 450 <= minority <= 550

    def test_deterministic(self):
        ds = tiny_dataset(RandomSource(2))
        a = balanced_sampler(ds, RandomSource(5))
        b = balanced_sampler(ds, RandomSource(5))
        assert np.array_equal(a, b)

    def test_empty_class_rejected(self):
        images = np.zeros((4, 4, 4, 1), dtype=np.float32)
        ds = LoadedDataset(images=images, labels=np.zeros(4, dtype=np.int64),
                           class_names=("a", "b"))
        with pytest.raises(ConfigError, match="class 1"):
            balanced_sampler(ds, RandomSource(0))


class TestRunReport:
    def test_monotone_epochs_enforced(self):
        report = RunReport()
        report.append(EpochRecord(epoch=1, stage="finetune", total_loss=1.0))
        with pytest.raises(Exception):
            report.append(EpochRecord(epoch=1, stage="finetune", total_loss=0.9))

    def test_non_finite_rejected(self):
        report = RunReport()
        with pytest.raises(NumericFault):
            report.append(EpochRecord(epoch=1, stage="finetune", total_loss=float("nan")))

    def test_final_lookup(self):
        report = RunReport()
        report.append(EpochRecord(epoch=1, stage="finetune", eval_acc=0.5))
        report.append(EpochRecord(epoch=2, stage="finetune"))
        assert report.final("eval_acc") == 0.5


class TestPretrain:
    def test_deterministic_reports(self):
        corpus = tiny_dataset(RandomSource(4), n_per_class=8)
        cfg = tiny_config(stage="pretrain", epochs=2, batch_size=8)
        _, report_a = pretrain(corpus, cfg, RandomSource(11))
        _, report_b = pretrain(corpus, cfg, RandomSource(11))
        assert [r.recon_loss for r in report_a.records] == [r.recon_loss for r in report_b.records]

    def test_checkpoint_contents(self):
        corpus = tiny_dataset(RandomSource(4), n_per_class=8)
        cfg = tiny_config(stage="pretrain", epochs=1, batch_size=8)
        ckpt, report = pretrain(corpus, cfg, RandomSource(0))
        assert ckpt.metadata["stage"] == "pretrain"
        assert ckpt.metadata["droppable"] == ["decoder."]
        assert any(name.startswith("encoder.") for name in ckpt.tensors)
        assert any(name.startswith("decoder.") for name in ckpt.tensors)
        assert len(report) == 1 and report.records[0].recon_loss > 0

    def test_mask_arithmetic(self):
        # 0.75 of a 4-patch grid masks 3 patches per image
        from maskmix.masking import mask_count

        assert mask_count(EncoderConfig(**TINY_ENC).num_patches, 0.75) == 3

    def test_stage_enforced(self):
        corpus = tiny_dataset(RandomSource(4))
        with pytest.raises(ConfigError):
            pretrain(corpus, tiny_config(stage="finetune"), RandomSource(0))


class TestFinetune:
    @pytest.fixture(scope="class")
    def data(self):
        return tiny_dataset(RandomSource(8), n_per_class=10)

    def test_ce_only_trajectory_equals_weight_zero(self, data):
        base = tiny_config(contrastive="none", mix=MixPolicy(enabled=False))
        wzero = tiny_config(contrastive="mscl", mix=MixPolicy(enabled=False),
                            loss=LossConfig(loss_weight=0.0))
        _, report_a = finetune(data, None, base, RandomSource(5))
        _, report_b = finetune(data, None, wzero, RandomSource(5))
        assert [r.total_loss for r in report_a.records] == [r.total_loss for r in report_b.records]
        assert [r.train_acc for r in report_a.records] == [r.train_acc for r in report_b.records]

    def test_deterministic_given_seed(self, data):
        cfg = tiny_config()
        _, a = finetune(data, None, cfg, RandomSource(7), eval_dataset=data)
        _, b = finetune(data, None, cfg, RandomSource(7), eval_dataset=data)
        assert [r.total_loss for r in a.records] == [r.total_loss for r in b.records]
        assert [r.eval_acc for r in a.records] == [r.eval_acc for r in b.records]

    def test_loads_pretrained_encoder(self, data):
        corpus = tiny_dataset(RandomSource(4), n_per_class=8)
        pre_cfg = tiny_config(stage="pretrain", epochs=1, batch_size=8)
        ckpt, _ = pretrain(corpus, pre_cfg, RandomSource(0))
        cfg = tiny_config(epochs=1)
        fine_ckpt, report = finetune(data, ckpt, cfg, RandomSource(1), eval_dataset=data)
        assert fine_ckpt.metadata["stage"] == "finetune"
        assert not any(name.startswith("decoder.") for name in fine_ckpt.tensors)
        assert report.records[-1].eval_acc is not None

    def test_incompatible_checkpoint_lists_names(self, data):
        other = EncoderConfig(**{**TINY_ENC, "embed_dim": 16})
        model = Network(other, with_decoder=True)
        init_parameters(model, RandomSource(0))
        from maskmix.backbone import CheckpointError, state_tensors

        bad = Checkpoint(tensors=state_tensors(model), metadata={"stage": "pretrain"})
        with pytest.raises(CheckpointError, match="patch_embed"):
            finetune(data, bad, tiny_config(), RandomSource(0))

    def test_loss_decreases_from_tiny_lr_step(self, data):
        # a single small-lr step on a frozen batch reduces the smooth loss
        from maskmix.losses import total_finetune_loss
        from maskmix.mixing import augment_two_views, build_pair_mask, mix_multiview

        cfg = tiny_config(lr=1e-6)
        model = Network(cfg.encoder, num_classes=3, projection_dim=cfg.projection_dim)
        init_parameters(model, RandomSource(2))
        rng = RandomSource(3)
        batch = mix_multiview(augment_two_views(data.take(range(6)), rng), cfg.mix, rng)
        pos = build_pair_mask(batch, cfg.loss.threshold).positives()
        x = torch.from_numpy(batch.images)
        targets = torch.from_numpy(batch.labels.astype(np.float32))

        def loss_value():
            tokens, reps = model.represent(x)
            return total_finetune_loss(
                model.classifier(reps), targets, model.projector(reps), pos, cfg.loss
            ).total

        opt = build_optimizer(model, cfg)
        before = loss_value()
        before.backward()
        opt.step()
        after = loss_value()
        assert after.item() < before.item()

    def test_skipped_anchor_counter_recorded(self, data):
        cfg = tiny_config(epochs=1)
        _, report = finetune(data, None, cfg, RandomSource(5))
        assert report.records[0].skipped_anchors is not None
        assert report.records[0].skipped_anchors >= 0

    def test_non_finite_loss_aborts_with_diagnostics(self):
        from maskmix.trainer import _abort_if_nonfinite

        model = Network(EncoderConfig(**TINY_ENC), num_classes=3, projection_dim=4)
        init_parameters(model, RandomSource(0))
        for p in model.parameters():
            p.grad = torch.ones_like(p)
        with pytest.raises(NumericFault, match="step 17"):
            _abort_if_nonfinite(torch.tensor(float("nan")), model, step=17, lr=1e-3)
        try:
            _abort_if_nonfinite(torch.tensor(float("inf")), model, step=3, lr=1e-3)
        except NumericFault as exc:
            assert "gradient norms" in str(exc)


class TestEvaluate:
    def test_constant_predictor_hits_chance(self):
        ds = tiny_dataset(RandomSource(0), n_per_class=10, num_classes=3)
        cfg = EncoderConfig(**TINY_ENC)
        model = Network(cfg, num_classes=3, projection_dim=4)
        init_parameters(model, RandomSource(0))
        with torch.no_grad():
            model.classifier.fc.weight.zero_()
            model.classifier.fc.bias.copy_(torch.tensor([10.0, 0.0, 0.0]))
        result = evaluate_network(model, ds)
        assert result.accuracy == pytest.approx(1 / 3, abs=1e-12)
        assert result.confusion[:, 0].sum() == 30

    def test_confusion_row_sums(self):
        ds = tiny_dataset(RandomSource(1), n_per_class=7, num_classes=3)
        model = Network(EncoderConfig(**TINY_ENC), num_classes=3, projection_dim=4)
        init_parameters(model, RandomSource(5))
        result = evaluate_network(model, ds)
        counts = np.bincount(ds.labels, minlength=3)
        assert np.array_equal(result.confusion.sum(axis=1), counts)

    def test_accuracy_matches_bruteforce_recount(self):
        ds = tiny_dataset(RandomSource(2), n_per_class=9, num_classes=3)
        model = Network(EncoderConfig(**TINY_ENC), num_classes=3, projection_dim=4)
        init_parameters(model, RandomSource(6))
        result = evaluate_network(model, ds)
        with torch.inference_mode():
            _, reps = model.represent(torch.from_numpy(ds.images))
            pred = model.classifier(reps).argmax(1).numpy()
        manual = sum(int(p == t) for p, t in zip(pred, ds.labels))
        assert result.accuracy == manual / len(ds.labels)

    def test_checkpoint_round_trip_reproduces_accuracy(self, tmp_path):
        ds = tiny_dataset(RandomSource(3), n_per_class=8)
        cfg = tiny_config(epochs=1)
        ckpt, _ = finetune(ds, None, cfg, RandomSource(4), eval_dataset=None)
        direct = evaluate(ds, ckpt)
        path = tmp_path / "ft.ckpt"
        ckpt.save(path)
        reloaded = evaluate(ds, Checkpoint.load(path))
        assert reloaded.accuracy == direct.accuracy
        assert np.array_equal(reloaded.confusion, direct.confusion)

    def test_class_count_mismatch_rejected(self):
        ds = tiny_dataset(RandomSource(0), num_classes=3)
        model = Network(EncoderConfig(**TINY_ENC), num_classes=5, projection_dim=4)
        init_parameters(model, RandomSource(0))
        with pytest.raises(ConfigError, match="5 classes"):
            evaluate_network(model, ds)

    def test_pretrain_checkpoint_rejected_for_eval(self):
        corpus = tiny_dataset(RandomSource(4), n_per_class=8)
        cfg = tiny_config(stage="pretrain", epochs=1, batch_size=8)
        ckpt, _ = pretrain(corpus, cfg, RandomSource(0))
        with pytest.raises(ConfigError):
            network_from_checkpoint(ckpt)
