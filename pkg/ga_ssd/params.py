"""Parameter containers, initialisation and on-disk checkpoints."""

import json
import logging
import os
import re
from dataclasses import dataclass
from typing import Any, Dict, Iterator, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, ManifestError
from .tensor import Tensor


logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
_DTYPE_TAGS = {np.dtype(np.float32): "f32le", np.dtype(np.float64): "f64le"}
_TAG_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor]
    stride: Tuple[int, int, int] = (1, 1, 1)
    groups: int = 1
    padding_mode: str = "same"

    def __post_init__(self) -> None:
        if self.padding_mode != "same":
            raise ConfigurationError("only same padding is supported")
        if self.groups < 1 or self.weight.shape[0] % self.groups:
            raise ConfigurationError(
                f"groups={self.groups} must divide C_out={self.weight.shape[0]}"
            )
        if any(k % 2 == 0 for k in self.weight.shape[2:]):
            raise ConfigurationError(f"kernel extents must be odd, got {self.weight.shape[2:]}")
        if isinstance(self.stride, int):
            self.stride = (self.stride,) * 3
        self.stride = tuple(int(s) for s in self.stride)
        if any(s < 1 for s in self.stride):
            raise ConfigurationError(f"stride must be positive, got {self.stride}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNormState:
    mean: np.ndarray
    var: np.ndarray


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running: BatchNormState


class ParameterSet:
    """Named, seeded parameters of one network.

    Tensors are created in a fixed order from a single generator, so the same
    seed always yields the same initial weights.
    """

    def __init__(self, seed: int = 0, dtype=np.float64) -> None:
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.tensors: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def tensor(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise ConfigurationError(f"duplicate parameter name {name}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def conv(
        self,
        name: str,
        c_in: int,
        c_out: int,
        kernel: int = 3,
        stride=1,
        groups: int = 1,
        zero: bool = False,
        std: Optional[float] = None,
        bias: Optional[np.ndarray] = None,
    ) -> ConvParams:
        """He-normal weights and zero bias unless `std` or `bias` override them."""
        if c_in % groups or c_out % groups:
            raise ConfigurationError(f"{name}: groups={groups} must divide {c_in} and {c_out}")
        shape = (c_out, c_in // groups, kernel, kernel, kernel)
        fan_in = shape[1] * kernel ** 3
        if zero:
            weight = np.zeros(shape)
        else:
            weight = self.rng.normal(0.0, np.sqrt(2.0 / fan_in) if std is None else std, size=shape)
        if bias is None:
            bias = np.zeros(c_out)
        elif np.shape(bias) != (c_out,):
            raise ConfigurationError(f"{name}: bias must have shape ({c_out},), got {np.shape(bias)}")
        return ConvParams(
            weight=self.tensor(f"{name}.weight", weight),
            bias=self.tensor(f"{name}.bias", bias),
            stride=stride,
            groups=groups,
        )

    def batch_norm(self, name: str, channels: int) -> BatchNormParams:
        mean = np.zeros(channels, dtype=np.float64)
        var = np.ones(channels, dtype=np.float64)
        self.buffers[f"{name}.running_mean"] = mean
        self.buffers[f"{name}.running_var"] = var
        return BatchNormParams(
            gamma=self.tensor(f"{name}.gamma", np.ones(channels)),
            beta=self.tensor(f"{name}.beta", np.zeros(channels)),
            running=BatchNormState(mean=mean, var=var),
        )

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> Dict[str, np.ndarray]:
        out = {name: t.data.copy() for name, t in self.tensors.items()}
        out.update({name: b.copy() for name, b in self.buffers.items()})
        return out

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        expected = set(self.tensors) | set(self.buffers)
        missing = sorted(expected - set(arrays))
        unexpected = sorted(set(arrays) - expected)
        if missing or unexpected:
            raise ManifestError(
                f"checkpoint does not match network: missing {missing[:5]}, unexpected {unexpected[:5]}"
            )
        for name, array in arrays.items():
            target = self.tensors[name].data if name in self.tensors else self.buffers[name]
            if target.shape != array.shape:
                raise ManifestError(f"{name}: checkpoint shape {array.shape} != network shape {target.shape}")
            target[...] = array


def _file_stem(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def save_tensor(path_stem: str, name: str, array: np.ndarray) -> str:
    """Write `<stem>.raw` little-endian scalars plus a `<stem>.json` sidecar."""
    array = np.asarray(array)
    tag = _DTYPE_TAGS.get(array.dtype)
    if tag is None:
        array = array.astype(np.float64)
        tag = "f64le"
    with open(path_stem + ".raw", "wb") as f:
        f.write(np.ascontiguousarray(array, dtype=_TAG_DTYPES[tag]).tobytes())
    with open(path_stem + ".json", "w") as f:
        json.dump({"shape": list(array.shape), "dtype": tag, "name": name}, f)
    return os.path.basename(path_stem) + ".raw"


def load_tensor(path_stem: str) -> np.ndarray:
    try:
        with open(path_stem + ".json", "r") as f:
            header = json.load(f)
        shape = tuple(int(s) for s in header["shape"])
        dtype = _TAG_DTYPES[header["dtype"]]
    except (OSError, ValueError, KeyError) as e:
        raise ManifestError(f"unreadable tensor header {path_stem}.json: {e}") from e
    try:
        raw = np.fromfile(path_stem + ".raw", dtype=dtype)
    except OSError as e:
        raise ManifestError(f"missing tensor payload {path_stem}.raw") from e
    if raw.size != int(np.prod(shape)):
        raise ManifestError(f"{path_stem}.raw holds {raw.size} scalars, header says {shape}")
    return raw.reshape(shape).astype(dtype.newbyteorder("="))


def save_checkpoint(directory: str, params: ParameterSet, meta: Dict[str, Any]) -> str:
    os.makedirs(directory, exist_ok=True)
    entries = []
    for kind, source in (("parameter", params.tensors), ("buffer", params.buffers)):
        for name, value in source.items():
            array = value.data if isinstance(value, Tensor) else value
            stem = os.path.join(directory, _file_stem(name))
            entries.append({
                "name": name,
                "file": save_tensor(stem, name, array),
                "shape": list(array.shape),
                "kind": kind,
            })
    manifest = dict(meta)
    manifest["tensors"] = entries
    with open(os.path.join(directory, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info("checkpoint written to %s (%d tensors)", directory, len(entries))
    return directory


def load_checkpoint(directory: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise ManifestError(f"no {MANIFEST} in {directory}")
    with open(path, "r") as f:
        manifest = json.load(f)
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        stem = os.path.join(directory, entry["file"][: -len(".raw")])
        array = load_tensor(stem)
        if list(array.shape) != list(entry["shape"]):
            raise ManifestError(f"{entry['name']}: manifest shape {entry['shape']} != file shape {list(array.shape)}")
        arrays[entry["name"]] = array
    return manifest, arrays
