"""Module networks built from linear → leaky ReLU → dropout blocks.

Each module maps (global features ++ parent-module outputs) to one scalar,
the network's estimate of its aligned causal variable at the horizon.
Forward passes can patch any module's scalar with a fixed value; backward
treats a patched output as a constant.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from glucose_iit.cohort import FEATURE_NAMES, FeatureVector
from glucose_iit.errors import NonFiniteValue, StaleTrace, UnknownModule
from glucose_iit.glucose_model import AMENDED_PARENTS, REGULAR_PARENTS, STATE_VARIABLES
from glucose_iit.scm import topological_sort

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
STANDARD_HIDDEN_SIZES = (128, 256)
PREDICTION_MODULE = "X13"
MERGED_MODULES: Mapping[str, tuple[str, ...]] = {"X4_5": ("x4", "x5"), "X6_10": ("x6", "x10")}

ParameterGradients = dict[str, np.ndarray]


class Architecture(str, Enum):
    TREE = "tree"
    PARALLEL = "parallel"
    JOINT = "joint"


class NetworkSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    architecture: Architecture = Architecture.TREE
    hidden_size: int = Field(default=256, gt=0)
    feature_width: int = Field(default=len(FEATURE_NAMES), gt=0)
    leaky_slope: float = Field(default=0.01, gt=0)
    dropout: float = Field(default=0.3, ge=0, lt=1)


def module_name(variable: str) -> str:
    return "X" + variable[1:]


def module_for_variable(variable: str, architecture: Architecture) -> str:
    if architecture == Architecture.JOINT:
        for merged, members in MERGED_MODULES.items():
            if variable in members:
                return merged
    return module_name(variable)


def _sort_key(name: str) -> int:
    return int(name[1:].split("_")[0])


def wiring_for(architecture: Architecture) -> dict[str, tuple[str, ...]]:
    """
    Parent modules of every module.

    tree: amended-graph parents; parallel: none; joint: regular-graph parents
    with (x4, x5) and (x6, x10) merged, each merged module inheriting the
    union of its members' external edges.
    """
    if architecture == Architecture.PARALLEL:
        return {module_name(v): () for v in STATE_VARIABLES}
    table = AMENDED_PARENTS if architecture == Architecture.TREE else REGULAR_PARENTS
    wiring: dict[str, set[str]] = {}
    for variable in STATE_VARIABLES:
        name = module_for_variable(variable, architecture)
        parents = wiring.setdefault(name, set())
        for parent in table[variable]:
            if parent in STATE_VARIABLES:
                parents.add(module_for_variable(parent, architecture))
        parents.discard(name)
    return {name: tuple(sorted(p, key=_sort_key)) for name, p in wiring.items()}


@dataclass
class Block:
    weight: np.ndarray
    bias: np.ndarray
    alpha: float = 0.01
    dropout: float = 0.3


@dataclass
class NeuralModule:
    name: str
    hidden: Block
    head_weight: np.ndarray
    head_bias: np.ndarray

    @property
    def input_width(self) -> int:
        return self.hidden.weight.shape[1]


@dataclass
class ForwardTrace:
    network: "ModuleNetwork"
    mode: str
    inputs: dict[str, np.ndarray] = field(default_factory=dict)
    pre_activations: dict[str, np.ndarray] = field(default_factory=dict)
    activations: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, np.ndarray | None] = field(default_factory=dict)
    outputs: dict[str, float] = field(default_factory=dict)
    patched: frozenset[str] = frozenset()
    prediction: float = 0.0


@dataclass
class ModuleNetwork:
    spec: NetworkSpec
    modules: dict[str, NeuralModule]
    wiring: dict[str, tuple[str, ...]]
    seed: int = 0

    def __post_init__(self) -> None:
        self.order = topological_sort(self.wiring, lambda m: self.wiring[m])

    @property
    def architecture(self) -> Architecture:
        return self.spec.architecture

    @property
    def hidden_size(self) -> int:
        return self.spec.hidden_size

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed `<module>.<hidden|head>.<weight|bias>`."""
        params: dict[str, np.ndarray] = {}
        for name in self.order:
            module = self.modules[name]
            params[f"{name}.hidden.weight"] = module.hidden.weight
            params[f"{name}.hidden.bias"] = module.hidden.bias
            params[f"{name}.head.weight"] = module.head_weight
            params[f"{name}.head.bias"] = module.head_bias
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def restore(self, snapshot: Mapping[str, np.ndarray]) -> None:
        for key, array in self.parameters().items():
            array[...] = snapshot[key]

    def forward(self, x, mode: str = "eval", patch=None, rng=None, masks=None) -> ForwardTrace:
        return forward(self, x, mode, patch, rng, masks=masks)


def _xavier(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init(spec: NetworkSpec, rng_seed: int) -> ModuleNetwork:
    """
    Build a network with Xavier-uniform weights and zero biases.

    Every module draws from its own stream keyed by (seed, module name), so
    two architectures sharing a seed differ only where fan-ins differ.
    """
    if spec.hidden_size not in STANDARD_HIDDEN_SIZES:
        logger.debug("Hidden size %d is outside %s", spec.hidden_size, STANDARD_HIDDEN_SIZES)
    wiring = wiring_for(spec.architecture)
    modules = {}
    for name, parents in wiring.items():
        rng = np.random.default_rng([rng_seed, zlib.crc32(name.encode())])
        fan_in = spec.feature_width + len(parents)
        modules[name] = NeuralModule(
            name=name,
            hidden=Block(
                weight=_xavier(rng, spec.hidden_size, fan_in),
                bias=np.zeros(spec.hidden_size),
                alpha=spec.leaky_slope,
                dropout=spec.dropout,
            ),
            head_weight=_xavier(rng, 1, spec.hidden_size)[0],
            head_bias=np.zeros(1),
        )
    return ModuleNetwork(spec=spec, modules=modules, wiring=wiring, seed=rng_seed)


def forward(
    net: ModuleNetwork,
    x: FeatureVector | np.ndarray,
    mode: str = "eval",
    patch: Mapping[str, float] | None = None,
    rng: np.random.Generator | None = None,
    *,
    masks: Mapping[str, np.ndarray | None] | None = None,
) -> ForwardTrace:
    """
    Evaluate modules in wiring order and record everything backward needs.

    A patched module still runs its blocks, but its output is replaced by the
    patch value before any child reads it. Dropout is active only in train
    mode, with inverted scaling; `masks` replays the masks of an earlier trace.

    Raises:
        UnknownModule: If a patch key is not a module of `net`.
        ValueError: If train mode needs fresh masks and no rng is given.
        NonFiniteValue: If a module output is NaN or infinite.
    """
    patch = dict(patch or {})
    for key in patch:
        if key not in net.modules:
            raise UnknownModule(key)
    features = x.values if isinstance(x, FeatureVector) else np.asarray(x, float)
    trace = ForwardTrace(network=net, mode=mode, patched=frozenset(patch))
    train = mode == "train"
    for name in net.order:
        module = net.modules[name]
        block = module.hidden
        inputs = np.concatenate([features, [trace.outputs[p] for p in net.wiring[name]]])
        z = block.weight @ inputs + block.bias
        a = np.where(z > 0, z, block.alpha * z)
        mask = None
        if train and block.dropout > 0:
            if masks is not None and masks.get(name) is not None:
                mask = masks[name]
            elif rng is None:
                raise ValueError("train mode with dropout needs an rng")
            else:
                keep = rng.random(z.shape[0]) >= block.dropout
                mask = keep / (1.0 - block.dropout)
            a = a * mask
        out = float(module.head_weight @ a + module.head_bias[0])
        if name in patch:
            out = float(patch[name])
        if not np.isfinite(out):
            raise NonFiniteValue(name)
        trace.inputs[name] = inputs
        trace.pre_activations[name] = z
        trace.activations[name] = a
        trace.masks[name] = mask
        trace.outputs[name] = out
    trace.prediction = trace.outputs[PREDICTION_MODULE]
    return trace


def zero_gradients(net: ModuleNetwork) -> ParameterGradients:
    return {k: np.zeros_like(v) for k, v in net.parameters().items()}


def backward(trace: ForwardTrace, upstream: float) -> ParameterGradients:
    """
    Reverse-mode gradients of `upstream * prediction` for every parameter.

    Patched modules are constants: they get zero gradient and pass nothing to
    their parents.

    Raises:
        StaleTrace: If a train-mode trace lacks a dropout mask.
    """
    net = trace.network
    grads = zero_gradients(net)
    width = net.spec.feature_width
    d_out = {name: 0.0 for name in net.order}
    d_out[PREDICTION_MODULE] = float(upstream)
    for name in reversed(net.order):
        module = net.modules[name]
        block = module.hidden
        if trace.mode == "train" and block.dropout > 0 and trace.masks.get(name) is None:
            raise StaleTrace(f"no dropout mask recorded for {name}")
        g = d_out[name]
        if name in trace.patched or g == 0.0:
            continue
        a = trace.activations[name]
        grads[f"{name}.head.weight"] += g * a
        grads[f"{name}.head.bias"] += g
        da = g * module.head_weight
        mask = trace.masks.get(name)
        if mask is not None:
            da = da * mask
        z = trace.pre_activations[name]
        dz = da * np.where(z > 0, 1.0, block.alpha)
        grads[f"{name}.hidden.weight"] += np.outer(dz, trace.inputs[name])
        grads[f"{name}.hidden.bias"] += dz
        d_inputs = block.weight.T @ dz
        for k, parent in enumerate(net.wiring[name]):
            d_out[parent] += float(d_inputs[width + k])
    return grads


def save(net: ModuleNetwork, path: str | Path) -> None:
    """Write `<path>.npz` with the parameters and `<path>.json` with the metadata."""
    path = Path(path)
    np.savez(path.with_suffix(".npz"), **net.parameters())
    sidecar = {
        "format_version": FORMAT_VERSION,
        "spec": net.spec.model_dump(mode="json"),
        "seed": net.seed,
        "feature_names": list(FEATURE_NAMES),
        "wiring": {k: list(v) for k, v in net.wiring.items()},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load(path: str | Path) -> ModuleNetwork:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    if sidecar["format_version"] != FORMAT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {sidecar['format_version']}")
    net = init(NetworkSpec(**sidecar["spec"]), sidecar["seed"])
    with np.load(path.with_suffix(".npz")) as stored:
        net.restore({k: stored[k] for k in stored.files})
    return net
