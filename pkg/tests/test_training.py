import numpy as np
import pytest

import densecount as dc
from densecount.data import synth_scene
from densecount.errors import ConfigError, ContractError, NumericError
from densecount.layers import AttentionSpec
from densecount.network import Model, ModelConfig, build_aspdnet, forward
from densecount.training import (TrainConfig, build_patches, desk_scale, euclidean_loss,
                                 full_scale, loss_decrease_probe, sgd_step, train)

from conftest import gradcheck


def micro_config(**flags):
    return ModelConfig(frontend_channels=[8, "P", 8], spm_rates=[2], spm_branch_channels=8,
                       midend_channels=[], backend_channels=[8],
                       attention=AttentionSpec(reduction_ratio=2, spatial_kernel=3),
                       **flags)


def micro_scenes(n, width=64, height=64, seed0=100):
    return [synth_scene(seed=seed0 + i, width=width, height=height, n_objects=3 + (i % 8))
            for i in range(n)]


class TestEuclideanLoss:
    def test_zero_when_equal(self, rng):
        x = dc.Tensor(rng.uniform(0, 1, (2, 1, 4, 4)))
        y = dc.Tensor(x.values.copy())
        assert euclidean_loss(x, y).item() == 0.0

    def test_half_scale_hand_case(self):
        pred = dc.Tensor(np.array([[1.0, 2.0]]))
        gt = dc.Tensor(np.array([[0.0, 0.0]]))
        assert euclidean_loss(pred, gt, "half").item() == 2.5
        assert euclidean_loss(pred, gt, "unit").item() == 5.0

    def test_gradient_is_residual_over_batch(self, rng):
        pred = dc.Tensor(rng.uniform(0, 1, (4, 1, 3, 3)))
        gt = dc.Tensor(rng.uniform(0, 1, (4, 1, 3, 3)))
        g = dc.Graph()
        with g:
            loss = euclidean_loss(pred, gt, "half")
        dc.backward(loss, g)
        assert np.allclose(pred.grad, (pred.values - gt.values) / 4)

    def test_gradcheck(self, rng):
        pred = dc.Tensor(rng.uniform(0, 1, (2, 1, 3, 4)))
        gt = dc.Tensor(rng.uniform(0, 1, (2, 1, 3, 4)))
        errs = gradcheck(lambda pred: euclidean_loss(pred, gt), {"pred": pred},
                         np.ones((1,)))
        assert errs["pred"] < 1e-6

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ContractError):
            euclidean_loss(dc.zeros([1, 1, 2, 2]), dc.zeros([1, 1, 2, 3]))


class TestSgdStep:
    def test_zero_lr_keeps_parameters(self):
        model = Model(micro_config(), {"w": dc.Tensor([1.0, 2.0], name="w")})
        model.parameters["w"].grad = np.array([5.0, -5.0])
        sgd_step(model, lr=0.0)
        assert model.parameters["w"].values.tolist() == [1.0, 2.0]

    def test_update_rule_hand_case(self):
        model = Model(micro_config(), {"w": dc.Tensor([1.0], name="w")})
        model.parameters["w"].grad = np.array([2.0])
        sgd_step(model, lr=0.1)
        assert np.allclose(model.parameters["w"].values, [0.8])
        assert model.parameters["w"].grad is None

    def test_identical_inputs_give_identical_updates(self, rng):
        def make():
            m = Model(micro_config(), {"w": dc.Tensor(rng.uniform(-1, 1, 5).copy(), name="w")})
            return m
        vals = rng.uniform(-1, 1, 5)
        grads = rng.uniform(-1, 1, 5)
        models = []
        for _ in range(2):
            m = Model(micro_config(), {"w": dc.Tensor(vals.copy(), name="w")})
            m.parameters["w"].grad = grads.copy()
            sgd_step(m, lr=0.3)
            models.append(m)
        assert np.array_equal(models[0].parameters["w"].values,
                              models[1].parameters["w"].values)

    def test_missing_grad_names_parameter(self):
        model = Model(micro_config(), {"spm.branch1.weight": dc.zeros([1], name="x")})
        with pytest.raises(ContractError, match="spm.branch1.weight"):
            sgd_step(model, lr=0.1)


class TestTrainConfig:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)

    def test_bad_loss_scale_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(loss_scale="double")

    def test_presets(self):
        desk = desk_scale()
        assert desk.batch_size == 4 and desk.epochs <= 50
        reference = full_scale()
        assert reference.batch_size == 32 and reference.epochs == 400
        assert reference.learning_rate == 1e-5

    def test_round_trip(self):
        cfg = desk_scale(seed=7)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTrainLoop:
    def test_patches_are_augmented_and_downsampled(self):
        images = micro_scenes(2)
        cfg = TrainConfig(learning_rate=1e-5, batch_size=4, epochs=1, seed=0)
        patches = build_patches(images, cfg, factor=2)
        assert len(patches) == 36
        pixels, target = patches[0]
        assert pixels.shape == (3, 32, 32)
        assert target.shape == (1, 16, 16)

    def test_empty_dataset_rejected(self):
        model = build_aspdnet(micro_config(), seed=0)
        with pytest.raises(ConfigError):
            train(model, [], TrainConfig(epochs=1))

    def test_gradient_reaches_every_parameter(self):
        model = build_aspdnet(micro_config(), seed=1, init="scaled")
        images = micro_scenes(1)
        cfg = TrainConfig(learning_rate=1e-6, batch_size=2, epochs=1, seed=1)
        patches = build_patches(images, cfg, model.config.downsample_factor)
        x = dc.Tensor(np.stack([patches[0][0], patches[1][0]]))
        gt = dc.Tensor(np.stack([patches[0][1], patches[1][1]]))
        graph = dc.Graph()
        with graph:
            loss = euclidean_loss(forward(model, x), gt)
        dc.backward(loss, graph)
        for name, p in model.parameters.items():
            assert p.grad is not None, name
        # the branches that most easily go silently dead carry real signal
        assert np.any(model.parameters["backend.conv1.offset.weight"].grad != 0.0)
        assert np.any(model.parameters["cbam.channel.w1"].grad != 0.0)
        assert np.any(model.parameters["cbam.spatial.weight"].grad != 0.0)

    def test_frozen_batch_probe_decreases_monotonically(self):
        model = build_aspdnet(micro_config(), seed=2, init="scaled")
        images = micro_scenes(2)
        cfg = TrainConfig(learning_rate=1e-6, batch_size=4, epochs=1, seed=2)
        patches = build_patches(images, cfg, model.config.downsample_factor)
        result = loss_decrease_probe(model, patches, cfg, steps=5)
        assert result["monotone_decrease"], result["losses"]

    def test_loss_improves_on_synthetic_scenes(self):
        model = build_aspdnet(micro_config(), seed=3, init="scaled")
        cfg = TrainConfig(learning_rate=1e-5, batch_size=4, epochs=10, seed=3,
                          checkpoint_every=100)
        model, log = train(model, micro_scenes(8), cfg, probe=False)
        losses = log.losses()
        assert len(losses) == 10
        assert losses[-1] < losses[0]
        assert log.config["model_init"] == "scaled"

    def test_same_seed_reproduces_loss_sequence(self):
        images = micro_scenes(3)
        runs = []
        for _ in range(2):
            model = build_aspdnet(micro_config(), seed=4, init="scaled")
            cfg = TrainConfig(learning_rate=1e-5, batch_size=4, epochs=3, seed=4)
            _, log = train(model, images, cfg, probe=False)
            runs.append(log.losses())
        assert runs[0] == runs[1]

    def test_non_finite_loss_aborts_naming_the_batch(self):
        model = build_aspdnet(micro_config(), seed=5, init="scaled")
        # pre-load a weight large enough that the squared loss overflows
        model.parameters["head.weight"].values[:] = 1e200
        cfg = TrainConfig(learning_rate=1e-5, batch_size=4, epochs=5, seed=5)
        with pytest.raises(NumericError, match="epoch 1, batch 0"):
            train(model, micro_scenes(2), cfg, probe=False)

    def test_checkpoint_resume_matches_straight_run(self, tmp_path):
        images = micro_scenes(2)

        def run(out, epochs, resume=False):
            model = build_aspdnet(micro_config(), seed=6, init="scaled")
            cfg = TrainConfig(learning_rate=1e-5, batch_size=4, epochs=epochs, seed=6,
                              checkpoint_every=2)
            return train(model, images, cfg, out_dir=out, resume=resume, probe=False)

        straight, straight_log = run(tmp_path / "straight", epochs=4)
        run(tmp_path / "resumed", epochs=2)
        resumed, resumed_log = run(tmp_path / "resumed", epochs=4, resume=True)

        assert straight_log.losses() == resumed_log.losses()
        for name in straight.parameters:
            assert np.array_equal(straight.parameters[name].values,
                                  resumed.parameters[name].values)

    def test_artifacts_written(self, tmp_path):
        model = build_aspdnet(micro_config(), seed=7, init="scaled")
        cfg = TrainConfig(learning_rate=1e-5, batch_size=4, epochs=2, seed=7,
                          checkpoint_every=1)
        train(model, micro_scenes(1), cfg, out_dir=tmp_path, probe=False)
        assert (tmp_path / "model.ckpt").exists()
        assert (tmp_path / "model.ckpt.config.json").exists()
        lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 3  # header + one record per epoch
        assert (tmp_path / "timing.jsonl").exists()
