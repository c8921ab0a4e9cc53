import numpy as np
import pytest

from apexseg.ablation import row_config
from apexseg.autodiff import Tensor, grad_check_params
from apexseg.data import GeneratorConfig, generate_dataset
from apexseg.model import ANATOMY, JOINT, PATHOLOGY, ModelConfig, SegModel
from apexseg.train import (Adam, clip_grad_norm, compute_loss, cosine_lr, evaluate, load_checkpoint, model_input,
                           prepare, save_checkpoint, train_model, training_phases, write_pgm)

TINY = ModelConfig(d=8, widths=(4, 4, 8, 8), rounds=1, heads=2, num_layers=3, num_queries=4, mixer_heads=2)
GEN = GeneratorConfig(H=32, W=32, radius_min=3, radius_max=4, n_train=6, n_test=0)


@pytest.fixture(scope="module")
def data():
    return prepare(generate_dataset(GEN), GEN.A, GEN.P)


def tiny_model(key, seed=0):
    cfg = row_config(key, GEN.A)
    return SegModel(cfg.incorporation, GEN.A, GEN.P, cfg.sharing, cfg.mixing, TINY, np.random.default_rng(seed)), cfg


def test_cosine_schedule_endpoints():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


def test_adam_first_step_moves_by_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 1e-3])
    Adam([p], lr=0.1).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-4)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([a], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.8])


def test_pretrain_phases():
    m, cfg = tiny_model("pretrain")
    assert training_phases(m, cfg.replace(epochs=6)) == [((ANATOMY,), 3), ((PATHOLOGY,), 6)]
    m, cfg = tiny_model("ca")
    assert training_phases(m, cfg.replace(epochs=6)) == [((ANATOMY, PATHOLOGY), 6)]


def test_anatomy_input_channel(data):
    m, _ = tiny_model("ana_in")
    x = model_input(m, data, [0, 1]).data
    np.testing.assert_allclose(x[:, 2], data.anatomy[:2] / GEN.A)
    m, _ = tiny_model("baseline")
    assert not model_input(m, data, [0]).data[:, 2].any()


@pytest.mark.parametrize("key", ["baseline", "multitask_g10", "ca"])
def test_end_to_end_loss_gradient(key, data):
    m, cfg = tiny_model(key, seed=3)
    # zero biases on an exactly-zero background put ReLUs on their kink; move off it
    rng = np.random.default_rng(1)
    for name, p in zip(m.state_dict(), m.parameters()):
        if name.endswith("bias"):
            p.data[...] = rng.normal(0.0, 0.1, p.shape)
    heads = tuple(m.head_names)
    x = model_input(m, data, [0])

    def f():
        return compute_loss(m, m(x, heads), data, [0], cfg, heads)

    assert grad_check_params(f, m.parameters(), per_param=2, rng=np.random.default_rng(0)) < 1e-4


def test_training_is_deterministic_and_reduces_loss(data):
    runs = []
    for _ in range(2):
        m, cfg = tiny_model("ca")
        runs.append(train_model(m, data, cfg.replace(epochs=4, lr=3e-3, batch_size=3)).losses)
    assert runs[0] == runs[1]
    assert runs[0][-1] < runs[0][0]


def test_zero_epochs_leaves_weights(data):
    m, cfg = tiny_model("baseline")
    before = m.state_dict()
    assert train_model(m, data, cfg.replace(epochs=0)).losses == []
    assert all(np.array_equal(before[k], v) for k, v in m.state_dict().items())


def test_evaluate_report_fields(data):
    m, _ = tiny_model("ca")
    report, preds = evaluate(m, data)
    assert preds.pathology.shape == (6, 8, 8) and preds.anatomy.shape == (6, 8, 8)
    assert 0.0 <= report.miou <= 1.0 and len(report.per_class_iou) == GEN.P
    assert "anatomy_miou" in report.extra and "attended_anatomy" in report.extra
    m, _ = tiny_model("multitask_g1")
    report, preds = evaluate(m, data)
    assert preds.pathology.max() <= GEN.P and "attended_anatomy" not in report.extra
    assert JOINT in m.head_names


def test_checkpoint_round_trip(tmp_path, data):
    m, _ = tiny_model("ca")
    save_checkpoint(m, tmp_path / "c.apexck", {"k": 1})
    meta, state = load_checkpoint(tmp_path / "c.apexck")
    assert meta == {"k": 1}
    m2, _ = tiny_model("ca", seed=9)
    m2.load_state_dict(state)
    x = model_input(m, data, [0])
    np.testing.assert_array_equal(m(x).heads[PATHOLOGY].final.mask_logits.data,
                                  m2(x).heads[PATHOLOGY].final.mask_logits.data)


def test_write_pgm(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.array([[0, 1], [2, 3]]), 3)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw == b"P5\n2 2\n255\n" + bytes([0, 85, 170, 255])
