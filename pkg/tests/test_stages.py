import numpy as np
import pytest

from biomeshift.autodiff import Tensor
from biomeshift.data import biome_family, generate_biome, make_splits, to_images
from biomeshift.errors import DataError, NoLabeledPixelsError, ParameterError
from biomeshift.metrics import macro_accuracy, overall_accuracy
from biomeshift.patching import PatchSpec
from biomeshift.stages import SegHead, SegModel, StagePlan, head_forward, new_head, run_plan, train_stage
from biomeshift.vit import ViTConfig, ViTEncoder

VIT = ViTConfig(image_size=8, patch=4, channels=4, depth=1, width=16, heads=2)


@pytest.fixture(scope="module")
def task():
    p = biome_family(1, seed=4)[0]
    ds = generate_biome(p, 6, 16)
    tr, va = make_splits(ds, 0.67, 0)
    return to_images(tr, 8), to_images(va, 8)


def _model(seed=0):
    enc = ViTEncoder(VIT, np.random.default_rng(seed))
    return SegModel(enc, new_head(enc, 5, seed), np.full(4, 0.4), np.full(4, 0.2))


def test_head_shapes_for_base_config():
    spec = PatchSpec(256, 256, 15, 8)
    head = SegHead(768, 8, 9, np.random.default_rng(0))
    assert (head.weight.shape, head.out_features) == ((768, 576), 576)
    out = head_forward(Tensor(np.zeros((1024, 768), np.float32)), head, spec)
    assert out.shape == (256, 256, 9)


def test_zero_head_weights_give_bias_everywhere():
    spec = PatchSpec(8, 8, 4, 4)
    head = SegHead(16, 4, 3, np.random.default_rng(0))
    head.weight.data[:] = 0
    head.bias.data = np.tile(np.array([1.0, -2.0, 0.5], np.float32), 16)
    out = head_forward(Tensor(np.random.default_rng(1).standard_normal((4, 16))), head, spec).data
    np.testing.assert_array_equal(out, np.broadcast_to([1.0, -2.0, 0.5], (8, 8, 3)))


def test_head_locality():
    spec = PatchSpec(8, 8, 4, 4)
    head = SegHead(16, 4, 3, np.random.default_rng(0))
    enc = np.random.default_rng(1).standard_normal((4, 16))
    base = head_forward(Tensor(enc), head, spec).data
    enc[3] += 1.0  # patch (1, 1): pixels rows 4..7, cols 4..7
    changed = (head_forward(Tensor(enc), head, spec).data != base).any(axis=-1)
    assert changed[4:, 4:].all()
    changed[4:, 4:] = False
    assert not changed.any()


def test_metric_examples():
    true = np.array([0, 1, 2, 3] + [255] * 5)
    pred = np.array([0, 1, 0, 0] + [1] * 5)
    assert overall_accuracy(pred, true) == 0.5
    assert overall_accuracy(true[:4], true[:4]) == 1.0
    with pytest.raises(NoLabeledPixelsError):
        overall_accuracy(pred, np.full(9, 255))
    assert macro_accuracy(pred, true, 4) == 0.5


def test_probe_leaves_encoder_bitwise_unchanged(task):
    train, val = task
    model = _model()
    before = model.encoder.param_hash()
    rep = train_stage(model, train, val, epochs=3, lr=1e-2, freeze_encoder=True, batch_size=4)
    assert model.encoder.param_hash() == before == rep.manifest["final_encoder_hash"]
    assert rep.manifest["final_head_hash"] != rep.manifest["initial_head_hash"]


def test_zero_epochs_flagged(task):
    rep = train_stage(_model(), *task, epochs=0, lr=1e-3, freeze_encoder=False)
    assert rep.error and rep.val_accuracy == [] and rep.best_epoch is None


def test_twenty_epochs_best_at_least_first(task):
    rep = train_stage(_model(), *task, epochs=20, lr=3e-3, freeze_encoder=False, batch_size=4)
    assert len(rep.val_accuracy) == 20
    assert rep.best_val_accuracy >= rep.val_accuracy[0]
    assert rep.best_val_accuracy == max(rep.val_accuracy)
    assert rep.val_accuracy.index(rep.best_val_accuracy) == rep.best_epoch


def test_lpft_hands_over_best_head(task):
    train, val = task
    enc = ViTEncoder(VIT, np.random.default_rng(0))
    pretrained = enc.param_hash()
    plan = StagePlan(regime="lpft", probe_epochs=3, finetune_epochs=2, batch_size=4, lr=1e-3, probe_lr=1e-2)
    _, (probe, ft) = run_plan(plan, enc, train, val, np.full(4, 0.4), np.full(4, 0.2))
    best_head = SegHead(16, 4, 5, np.random.default_rng(9))
    best_head.load_arrays(probe.best_state["head"])
    assert ft.manifest["initial_head_hash"] == best_head.param_hash() == probe.manifest["final_head_hash"]
    assert ft.manifest["initial_encoder_hash"] == pretrained


def test_finetune_starts_from_random_head(task):
    train, val = task
    common = dict(probe_epochs=2, finetune_epochs=1, batch_size=4, lr=1e-3, probe_lr=1e-2, seed=3)
    _, lp = run_plan(StagePlan(regime="lpft", **common), ViTEncoder(VIT, np.random.default_rng(0)),
                     train, val, np.full(4, 0.4), np.full(4, 0.2))
    _, ft = run_plan(StagePlan(regime="finetune", **common), ViTEncoder(VIT, np.random.default_rng(0)),
                     train, val, np.full(4, 0.4), np.full(4, 0.2))
    assert ft[0].manifest["initial_head_hash"] != lp[1].manifest["initial_head_hash"]
    assert ft[0].manifest["initial_head_hash"] == lp[0].manifest["initial_head_hash"]


def test_split_leak_rejected(task):
    train, _ = task
    with pytest.raises(DataError):
        train_stage(_model(), train, train, epochs=1, lr=1e-3, freeze_encoder=True)


def test_plan_validation():
    with pytest.raises(ParameterError):
        StagePlan(regime="zero-shot")
    assert [s[0] for s in StagePlan(regime="lpft").stages()] == ["probe", "finetune"]


def test_model_checkpoint_round_trip(task, tmp_path):
    from biomeshift.checkpoint import read_checkpoint, write_checkpoint

    model = _model()
    write_checkpoint(model.checkpoint(), tmp_path / "m.svck")
    back = SegModel.from_checkpoint(read_checkpoint(tmp_path / "m.svck"))
    np.testing.assert_array_equal(back.logits(task[1].images), model.logits(task[1].images))
