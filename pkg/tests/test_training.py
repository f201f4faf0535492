from dataclasses import replace

import numpy as np
import pytest
import torch

from oracles import brute_iou, brute_oiou
from unilseg.data import Source, Task
from unilseg.decoder import THRESHOLD
from unilseg.model import PRESETS, UniLSeg
from unilseg.shapes import SceneConfig, generate_video, sample_corpus, scene_to_triplets
from unilseg.training import (
    NonFiniteLoss, TrainConfig, collate, desk_overfit_config, evaluate, fit, infer, load_checkpoint,
    make_optimizer, make_schedule, mix_data, parse_kv, save_checkpoint, set_epoch_lr, train_step,
)

SMALL = SceneConfig(canvas=(32, 32), count=(1, 2), size=(10, 14), border_width=2)


def tiny(seed=0):
    torch.manual_seed(seed)
    return UniLSeg(PRESETS["tiny"])


@pytest.fixture(scope="module")
def corpus():
    return sample_corpus(8, seed=3, config=SMALL)


class TestSchedule:
    def test_stage_one(self):
        c = make_schedule(1)
        assert (c.learning_rate, c.epochs, c.lr_decay, c.backbone_lr_factor) == (5e-5, 5, None, 0.1)
        assert c.data == "pseudo"

    def test_stage_two(self):
        c = make_schedule(2)
        assert (c.learning_rate, c.epochs, c.backbone_lr_factor) == (1e-4, 15, 0.1)
        assert c.lr_decay == {"epoch": 10, "factor": 0.1}
        assert [c.lr_at(e) for e in (0, 9, 10, 14)] == [1e-4, 1e-4, pytest.approx(1e-5), pytest.approx(1e-5)]

    def test_unknown_stage(self):
        with pytest.raises(ValueError):
            make_schedule(3)

    def test_threshold(self):
        assert THRESHOLD == 0.5

    def test_desk_overfit_stretch(self):
        c = desk_overfit_config(64, 2000, 8)
        assert c.max_steps == 2000 and c.epochs == 250
        assert c.decay_epoch == round(250 * 10 / 15)
        assert c.learning_rate == 1e-4

    @pytest.mark.parametrize("bad", [dict(learning_rate=-1.0), dict(decay_factor=0), dict(backbone_lr_factor=2.0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestOptimizer:
    def test_two_groups_at_a_tenth(self):
        model = tiny()
        opt = make_optimizer(model, make_schedule(2))
        head, backbone = opt.param_groups
        assert backbone["lr"] == pytest.approx(0.1 * head["lr"])
        ids = lambda g: {id(p) for p in g["params"]}
        assert ids(head).isdisjoint(ids(backbone))
        assert ids(head) | ids(backbone) == {id(p) for p in model.parameters()}
        assert all(n.startswith("vision.") for n, p in model.named_parameters() if id(p) in ids(backbone))

    def test_decay_keeps_ratio(self):
        model = tiny()
        config = make_schedule(2)
        opt = make_optimizer(model, config)
        set_epoch_lr(opt, config, 12)
        head, backbone = opt.param_groups
        assert head["lr"] == pytest.approx(1e-5)
        assert backbone["lr"] == pytest.approx(1e-6)

    def test_zero_lr_changes_nothing(self, corpus):
        model = tiny()
        config = replace(make_schedule(2), learning_rate=0.0, hide_prob=0.0)
        opt = make_optimizer(model, config)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        losses = [train_step(model, opt, corpus[:4], config).item() for _ in range(3)]
        for k, v in model.state_dict().items():
            assert torch.equal(before[k], v), k
        assert losses[0] == losses[1] == losses[2]


def test_overfit_one_batch(corpus):
    model = tiny()
    config = replace(make_schedule(2), learning_rate=1e-3, backbone_lr_factor=1.0)
    opt = make_optimizer(model, config)
    batch = corpus[:4]
    losses = [train_step(model, opt, batch, config).item() for _ in range(200)]
    assert losses[-1] < 0.1 * losses[0], (losses[0], losses[-1])


def test_non_finite_loss_aborts(corpus):
    model = tiny()
    with torch.no_grad():
        model.vision.patch_embed.weight.fill_(float("nan"))
    config = make_schedule(2)
    with pytest.raises(NonFiniteLoss):
        train_step(model, make_optimizer(model, config), corpus[:2], config)


class TestHiding:
    def test_only_pseudo_images_are_hidden(self, corpus):
        model = tiny()
        config = replace(make_schedule(2), hide_prob=1.0, hide_patch=8)
        sup = corpus[0]
        pseudo = replace(corpus[1], source=Source.PSEUDO_BOX)
        x, _, y = collate(model, [sup, pseudo], config, np.random.default_rng(0), fill=np.full(3, 0.25))
        np.testing.assert_allclose(x[0].numpy(), sup.image, atol=1e-6)
        np.testing.assert_allclose(x[1].numpy(), 0.25, atol=1e-6)
        np.testing.assert_array_equal(y[1].numpy(), pseudo.mask)


class TestMixData:
    def test_stage_one_uses_pseudo_only(self, corpus):
        pseudo = [replace(t, source=Source.PSEUDO_MASK) for t in corpus]
        out = mix_data(corpus[:2], pseudo, make_schedule(1), np.random.default_rng(0))
        assert len(out) == len(pseudo)

    def test_stage_two_ratio(self, corpus):
        pseudo = [replace(t, source=Source.PSEUDO_MASK) for t in corpus]
        out = mix_data(corpus[:3], pseudo, make_schedule(2), np.random.default_rng(0))
        assert len(out) == 6
        assert sum(t.source.is_pseudo for t in out) == 3


class TestDeterminism:
    def test_two_runs_identical(self, corpus):
        config = replace(make_schedule(2), batch_size=4, max_steps=6, learning_rate=1e-3)
        a = fit(tiny(), corpus, config).losses
        b = fit(tiny(), corpus, config).losses
        assert len(a) == 6
        assert np.max(np.abs(np.array(a) - np.array(b))) <= 1e-6

    def test_checkpoint_round_trip(self, corpus, tmp_path):
        model = tiny()
        config = replace(make_schedule(2), batch_size=4, max_steps=2)
        opt = make_optimizer(model, config)
        fit(model, corpus, config, opt)
        model.eval()
        path = tmp_path / "m.pt"
        save_checkpoint(path, model, opt, config, epoch=1)
        loaded, state = load_checkpoint(path)
        x, tokens, _ = collate(model, corpus[:3])
        with torch.no_grad():
            a = model(x, tokens).response.logits
            b = loaded(x, tokens).response.logits
        assert torch.equal(a, b)
        assert state["epoch"] == 1 and state["train_config"]["max_steps"] == 2
        assert loaded.vocab.itos == model.vocab.itos

    def test_float64_checkpoint(self, tmp_path):
        model = tiny().double()
        save_checkpoint(tmp_path / "d.pt", model)
        loaded, _ = load_checkpoint(tmp_path / "d.pt")
        assert next(loaded.parameters()).dtype == torch.float64


class TestInfer:
    def test_shape_and_determinism(self, corpus):
        model = tiny().eval()
        t = corpus[0]
        a = infer(model, t.image, t.caption)
        b = infer(model, t.image, t.caption)
        assert a.shape == t.mask.shape and a.dtype == np.uint8
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {0, 1}

    def test_indivisible_size(self):
        with pytest.raises(ValueError):
            infer(tiny(), np.zeros((30, 32, 3)), "all circle")


def oracle_predictor(triplets):
    table = {(id(t.image), t.caption): t.mask for t in triplets}
    return lambda image, caption: table[(id(image), caption)].astype(np.float64)


class TestEvaluate:
    @pytest.mark.parametrize("task", [Task.RIS, Task.SS, Task.PS, Task.SOD])
    def test_oracle_scores_one(self, task):
        triplets = [t for t in sample_corpus(24, seed=5, config=SMALL) if t.task is task]
        report = evaluate(oracle_predictor(triplets), triplets, task)
        for value in report.aggregates.values():
            assert value == pytest.approx(1.0)

    def test_background_model(self):
        triplets = [t for t in sample_corpus(16, seed=5, config=SMALL) if t.task is Task.RIS]
        report = evaluate(lambda image, caption: np.zeros(image.shape[:2]), triplets, Task.RIS)
        assert report.aggregates["oIoU"] == 0.0

    def test_matches_brute_force(self, rng):
        triplets = [t for t in sample_corpus(16, seed=6, config=SMALL) if t.task is Task.RIS]
        noise = {id(t.image): rng.random(t.mask.shape) for t in triplets}
        predict = lambda image, caption: noise[id(image)]
        report = evaluate(predict, triplets, Task.RIS)
        preds = [(noise[id(t.image)] > 0.5).astype(np.uint8) for t in triplets]
        assert report.aggregates["oIoU"] == pytest.approx(brute_oiou(list(zip(preds, [t.mask for t in triplets]))), abs=1e-12)
        for got, p, t in zip(report.ious, preds, triplets):
            assert got == pytest.approx(brute_iou(p, t.mask), abs=1e-12)

    def test_rvos_groups_by_video(self):
        triplets = []
        for v in range(2):
            for f, frame in enumerate(generate_video(v, 3, SMALL)):
                triplets += scene_to_triplets(frame, [Task.RVOS], video_id=f"v{v}", frame_index=f)
        report = evaluate(oracle_predictor(triplets), triplets, Task.RVOS)
        assert report.aggregates["J&F"] == pytest.approx(1.0)

    def test_task_mismatch(self, corpus):
        with pytest.raises(ValueError):
            evaluate(tiny(), corpus, Task.RIS)

    def test_real_model_runs(self, corpus):
        ris = [t for t in corpus if t.task is Task.RIS]
        report = evaluate(tiny().eval(), ris, Task.RIS)
        assert 0.0 <= report.aggregates["oIoU"] <= 1.0
        assert len(report.ious) == len(ris)


def test_parse_kv():
    text = """
    # comment
    preset = tiny
    learning_rate = 5e-4   # trailing comment
    lr_decay = {"epoch": 3, "factor": 0.5}
    model.channels = [8, 16, 16, 16]
    init = null
    """
    kv = parse_kv(text)
    assert kv == {"preset": "tiny", "learning_rate": 5e-4, "lr_decay": {"epoch": 3, "factor": 0.5},
                  "model.channels": [8, 16, 16, 16], "init": None}
    with pytest.raises(ValueError):
        parse_kv("no equals sign")


def test_dropout_only_in_train_mode(corpus):
    torch.manual_seed(0)
    model = UniLSeg(replace(PRESETS["tiny"], dropout=0.5))
    x, tokens, _ = collate(model, corpus[:2])
    with torch.no_grad():
        model.train()
        a, b = model(x, tokens).response.logits, model(x, tokens).response.logits
        model.eval()
        c, d = model(x, tokens).response.logits, model(x, tokens).response.logits
    assert not torch.equal(a, b)
    assert torch.equal(c, d)
