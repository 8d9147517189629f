from __future__ import annotations

import numpy as np
import pytest

from glucose_iit.errors import StaleTrace, UnknownModule
from glucose_iit.neural import (
    Architecture,
    NetworkSpec,
    backward,
    forward,
    init,
    load,
    save,
    wiring_for,
)


def spec(architecture: Architecture = Architecture.TREE, dropout: float = 0.0) -> NetworkSpec:
    return NetworkSpec(architecture=architecture, hidden_size=8, dropout=dropout)


def features(seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=20)


def test_tree_wiring_follows_amended_graph():
    wiring = wiring_for(Architecture.TREE)
    assert len(wiring) == 13
    assert wiring["X13"] == ("X4",)
    assert wiring["X4"] == ("X3", "X5", "X9")
    assert wiring["X5"] == ("X7",)
    assert wiring["X10"] == ()
    assert wiring["X1"] == ()


def test_parallel_wiring_has_no_edges():
    assert all(parents == () for parents in wiring_for(Architecture.PARALLEL).values())


def test_joint_wiring_merges_feedback_pairs():
    wiring = wiring_for(Architecture.JOINT)
    assert len(wiring) == 11
    assert wiring["X4_5"] == ("X3", "X7", "X9")
    assert wiring["X6_10"] == ("X11", "X12")
    assert wiring["X7"] == ("X6_10",)
    assert wiring["X13"] == ("X4_5",)


@pytest.mark.parametrize("architecture", list(Architecture))
def test_init_is_seeded(architecture):
    first = init(spec(architecture), 3)
    second = init(spec(architecture), 3)
    other = init(spec(architecture), 4)
    for key, value in first.parameters().items():
        np.testing.assert_array_equal(value, second.parameters()[key])
    assert any(
        not np.array_equal(value, other.parameters()[key]) for key, value in first.parameters().items()
    )


def test_parameter_count():
    net = init(spec(), 0)
    wiring = wiring_for(Architecture.TREE)
    expected = sum((20 + len(parents)) * 8 + 8 + 8 + 1 for parents in wiring.values())
    assert net.parameter_count() == expected


def test_eval_forward_is_deterministic():
    net = init(NetworkSpec(hidden_size=8), 0)
    x = features()
    assert forward(net, x).prediction == forward(net, x).prediction


def test_train_forward_needs_rng():
    net = init(NetworkSpec(hidden_size=8, dropout=0.3), 0)
    with pytest.raises(ValueError):
        forward(net, features(), "train")


def test_dropout_masks_are_inverted_and_replayable():
    net = init(NetworkSpec(hidden_size=64, dropout=0.3), 0)
    trace = forward(net, features(), "train", rng=np.random.default_rng(1))
    mask = trace.masks["X13"]
    assert set(np.unique(mask)) <= {0.0, 1.0 / 0.7}
    replay = forward(net, features(), "train", masks=trace.masks)
    assert replay.prediction == trace.prediction


def test_patching_prediction_module_sets_prediction():
    net = init(spec(), 0)
    assert forward(net, features(), patch={"X13": 1.25}).prediction == 1.25


def test_patch_propagates_to_children_only():
    net = init(spec(), 0)
    x = features()
    factual = forward(net, x)
    patched = forward(net, x, patch={"X4": factual.outputs["X4"] + 1.0})
    assert patched.outputs["X3"] == factual.outputs["X3"]
    assert patched.outputs["X13"] != factual.outputs["X13"]


def test_parallel_patch_off_readout_has_no_effect():
    net = init(spec(Architecture.PARALLEL), 0)
    x = features()
    assert forward(net, x, patch={"X4": 99.0}).prediction == forward(net, x).prediction


def test_unknown_patch_module():
    net = init(spec(), 0)
    with pytest.raises(UnknownModule):
        forward(net, features(), patch={"X4_5": 0.0})


def test_patched_module_gets_no_gradient():
    net = init(spec(), 0)
    grads = backward(forward(net, features(), patch={"X4": 0.5}), 1.0)
    for key in ("X4", "X3", "X9", "X5", "X7", "X8", "X6"):
        assert not grads[f"{key}.hidden.weight"].any()
    assert grads["X13.head.weight"].any()


def test_backward_needs_masks_in_train_mode():
    net = init(NetworkSpec(hidden_size=8, dropout=0.3), 0)
    trace = forward(net, features(), "train", rng=np.random.default_rng(0))
    trace.masks["X1"] = None
    with pytest.raises(StaleTrace):
        backward(trace, 1.0)


def numeric_gradient(net, x, key, index, patch, masks, mode, eps=1e-6):
    param = net.parameters()[key]
    original = param[index]
    param[index] = original + eps
    up = forward(net, x, mode, patch, masks=masks).prediction
    param[index] = original - eps
    down = forward(net, x, mode, patch, masks=masks).prediction
    param[index] = original
    return (up - down) / (2 * eps)


@pytest.mark.parametrize("architecture", list(Architecture))
@pytest.mark.parametrize("patched", [False, True])
def test_gradients_match_finite_differences(architecture, patched):
    rng = np.random.default_rng(7)
    for seed in range(5):
        net = init(NetworkSpec(architecture=architecture, hidden_size=8, dropout=0.3), seed)
        x = features(seed)
        mode = "train" if seed % 2 else "eval"
        trace = forward(net, x, mode, rng=np.random.default_rng(seed))
        patch = {net.order[len(net.order) // 2]: 0.3} if patched else None
        if patched:
            trace = forward(net, x, mode, patch, masks=trace.masks)
        analytic = backward(trace, 1.0)
        masks = trace.masks if mode == "train" else None
        for key, param in net.parameters().items():
            for _ in range(3):
                index = tuple(int(rng.integers(n)) for n in param.shape)
                numeric = numeric_gradient(net, x, key, index, patch, masks, mode)
                np.testing.assert_allclose(analytic[key][index], numeric, rtol=1e-4, atol=1e-7)


def test_checkpoint_round_trip(tmp_path):
    net = init(NetworkSpec(architecture=Architecture.JOINT, hidden_size=8), 5)
    net.parameters()["X13.head.bias"][0] = 0.75
    save(net, tmp_path / "model")
    assert (tmp_path / "model.npz").exists() and (tmp_path / "model.json").exists()
    loaded = load(tmp_path / "model")
    assert loaded.spec == net.spec
    assert loaded.wiring == net.wiring
    x = features()
    assert forward(loaded, x).prediction == forward(net, x).prediction
