import numpy as np
import pytest
import torch

from gdsm.errors import EmptyDataset, ShapeMismatch, UntrainedSource
from gdsm.extraction import ExtractedPatch, Plane, SliceTable, extract_global_slices
from gdsm.models import (
    BackboneSpec,
    HeadSpec,
    TrainingConfig,
    build_correction_model,
    build_pathway,
    encode,
    load_model,
    parameter_digest,
    predict,
    predict_batch,
    save_model,
    train,
)
from gdsm.phantom import PhantomParams, generate_subject


def local_patch(age=40.0, gender=1, seed=0, label=1, plane=Plane.AXIAL):
    img = np.random.default_rng(seed).random((80, 80)).astype(np.float32)
    return ExtractedPatch(f"s{seed}", plane, 70, img, label, "local", gender, age, 182, region="r")


def global_patch(age=40.0, seed=0, shape=(91, 109), plane=Plane.AXIAL):
    img = np.random.default_rng(seed).random(shape).astype(np.float32)
    return ExtractedPatch(f"s{seed}", plane, 40, img, int(plane), "global", seed % 2, age, 91)


@pytest.fixture(scope="module")
def age_slices():
    """Global coronal slices from clean phantoms spanning the age range."""
    patches = []
    for i, age in enumerate(np.linspace(19, 77, 40)):
        _, v2, rec = generate_subject(PhantomParams(float(age), i % 2, noise_sigma=0.0), f"p{i}")
        patches += extract_global_slices(v2, SliceTable({Plane.CORONAL: (50, 54)}), rec)
    return patches


def test_head_widths():
    local = build_pathway("local_axial")
    assert local.feature_dim == 32 and local.head_input_width == 32 + 6
    glob = build_pathway("global")
    assert glob.head_input_width == 32 + 5
    assert [m.out_features for m in glob.head if isinstance(m, torch.nn.Linear)] == [64, 32, 16, 1]


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        build_pathway("local_axial", BackboneSpec(input_shape=(109, 109, 1)))
    with pytest.raises(ShapeMismatch):
        build_pathway("global", BackboneSpec(input_shape=(80, 80, 1)))
    model = build_pathway("local_axial")
    with pytest.raises(ShapeMismatch):
        predict(model, local_patch(plane=Plane.CORONAL))
    with pytest.raises(ShapeMismatch):
        predict(model, global_patch())


def test_zero_head_predicts_zero():
    spec = BackboneSpec(input_shape=(80, 80, 1), widths=(8,))
    model = build_pathway("local_axial", spec, HeadSpec(zero_init=True))
    assert model.feature_dim == 8
    assert predict(model, local_patch()) == 0.0
    assert predict(model, local_patch(seed=3, age=70)) == 0.0


def test_prediction_is_deterministic():
    model = build_pathway("global", seed=3)
    p = global_patch(shape=(109, 91), plane=Plane.SAGITTAL)
    assert predict(model, p) == predict(model, p)
    other = build_pathway("global", seed=3)
    assert predict(other, p) == predict(model, p)


def test_global_slices_are_padded():
    model = build_pathway("global")
    images, aux, _ = encode(model, [global_patch(shape=(91, 91), plane=Plane.CORONAL)])
    assert images.shape == (1, 1, 109, 109)
    assert torch.all(images[0, 0, :9] == 0)
    np.testing.assert_allclose(aux[0].numpy(), [0, 40 / 90, 0, 1, 0], rtol=1e-6)


def test_constant_targets_converge():
    patches = [local_patch(age=40.0, seed=i) for i in range(64)]
    model = build_pathway("local_axial", seed=1)
    model, history = train(model, patches, [], TrainingConfig(epochs=15, seed=1))
    assert history.epochs[-1]["train_mae"] < 0.5
    assert abs(predict(model, local_patch(seed=999)) - 40.0) < 1.0


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train(build_pathway("global"), [], [])


def test_loss_decreases_on_phantoms(age_slices):
    model = build_pathway("global", seed=2)
    model, history = train(model, age_slices, [], TrainingConfig(epochs=8, seed=2))
    assert len(age_slices) == 200
    assert history.epochs[-1]["train_mae"] < history.epochs[0]["train_mae"]


def test_early_stopping_restores_best(age_slices):
    rng = np.random.default_rng(0)
    # validation targets unrelated to the images: the monitored loss plateaus quickly
    val = [ExtractedPatch(p.subject_id, p.plane, p.slice_index, p.image, p.encoded_label, p.stream,
                          p.gender, float(rng.uniform(19, 77)), p.axis_length) for p in age_slices[::7]]
    model = build_pathway("global", seed=4)
    model, history = train(model, age_slices, val, TrainingConfig(epochs=40, seed=4))
    vals = [e["val_mae"] for e in history.epochs]
    assert history.best_epoch == int(np.argmin(vals))
    assert history.stopped_early
    assert len(vals) == history.best_epoch + 1 + 3
    restored = np.mean(np.abs(predict_batch(model, val) - np.array([p.target_age for p in val])))
    assert restored == pytest.approx(min(vals), rel=1e-6)


def test_aux_inputs_are_live(age_slices):
    model, _ = train(build_pathway("global", seed=5), age_slices, [], TrainingConfig(epochs=3, seed=5))
    batch = age_slices[:16]
    flipped = [ExtractedPatch(p.subject_id, p.plane, p.slice_index, p.image, p.encoded_label, p.stream,
                              1 - p.gender, p.target_age, p.axis_length) for p in batch]
    assert np.any(predict_batch(model, batch) != predict_batch(model, flipped))


def test_correction_model_construction(age_slices):
    with pytest.raises(UntrainedSource):
        build_correction_model(build_pathway("global"), 10)
    glob, _ = train(build_pathway("global", seed=6), age_slices, [], TrainingConfig(epochs=2, seed=6))
    corr = build_correction_model(glob, 10)
    assert corr.head_input_width == glob.feature_dim + 10
    assert corr.backbone is not glob.backbone
    for a, b in zip(corr.backbone.parameters(), glob.backbone.parameters()):
        assert torch.equal(a, b)
    frozen = build_correction_model(glob, 10, tail_trainable=0)
    assert not any(p.requires_grad for p in frozen.backbone.parameters())
    assert all(p.requires_grad for p in frozen.head.parameters())


def test_zero_head_correction_outputs_zero(age_slices):
    glob, _ = train(build_pathway("global", seed=6, head_spec=HeadSpec()), age_slices, [],
                    TrainingConfig(epochs=1, seed=6))
    glob.head_spec.zero_init = True
    corr = build_correction_model(glob, 3)
    vectors = {p.subject_id: np.array([30.0, 40.0, 50.0]) for p in age_slices}
    assert np.all(predict_batch(corr, age_slices[:10], vectors) == 0.0)


def test_frozen_layers_unchanged_by_correction_training(age_slices):
    glob, _ = train(build_pathway("global", seed=7), age_slices, [], TrainingConfig(epochs=2, seed=7))
    corr = build_correction_model(glob, 2, tail_trainable=2)
    frozen = torch.nn.Sequential(*list(corr.backbone.layers)[:4])
    tail = torch.nn.Sequential(*list(corr.backbone.layers)[4:])
    before, before_tail = parameter_digest(frozen), parameter_digest(tail)
    vectors = {p.subject_id: np.array([p.target_age + 1, p.target_age - 1]) for p in age_slices}
    train(corr, age_slices, [], TrainingConfig(epochs=2, seed=7), age_vectors=vectors)
    assert parameter_digest(frozen) == before
    assert parameter_digest(tail) != before_tail


def test_checkpoint_round_trip(tmp_path, age_slices):
    model, history = train(build_pathway("global", seed=8), age_slices, [], TrainingConfig(epochs=1, seed=8))
    save_model(model, tmp_path, history, "hash123")
    back = load_model(tmp_path, "global")
    np.testing.assert_array_equal(predict_batch(back, age_slices[:5]), predict_batch(model, age_slices[:5]))
    assert (tmp_path / "global.history.json").exists()


def _head_loss(head, z, y, scale, offset):
    return torch.mean(torch.abs(head(z).squeeze(1) * scale + offset - y))


@pytest.mark.parametrize("stream", ["local_axial", "global"])
def test_head_gradient_matches_finite_differences(stream):
    worst = 0.0
    for point in range(10):
        torch.manual_seed(point)
        model = build_pathway(stream, seed=100 + point).double()
        size = model.input_size
        n = 8
        images = torch.rand(n, 1, *size, dtype=torch.float64)
        aux = torch.rand(n, model.aux_width, dtype=torch.float64)
        y = 40 + 20 * torch.rand(n, dtype=torch.float64)
        with torch.no_grad():
            z = torch.cat([model.features(images), aux], dim=1)
        loss = torch.mean(torch.abs(model(images, aux) - y))
        params = list(model.head.parameters())
        grads = torch.autograd.grad(loss, params)
        eps = 1e-6
        for p, g in zip(params, grads):
            flat = p.data.view(-1)
            fd = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = _head_loss(model.head, z, y, model.target_scale, model.target_offset).item()
                flat[i] = orig - eps
                down = _head_loss(model.head, z, y, model.target_scale, model.target_offset).item()
                flat[i] = orig
                fd[i] = (up - down) / (2 * eps)
            rel = (torch.linalg.norm(g.view(-1) - fd) / torch.linalg.norm(fd).clamp_min(1e-12)).item()
            worst = max(worst, rel)
    assert worst < 1e-4
