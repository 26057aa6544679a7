"""Model-bundle directory format, calibration activations, and synthetic generation.

On-disk layout (one directory per bundle):

    manifest.json          layer table: name, n, d, kind, dtype, file names
    <name>.weight.mrt      one tensor file per weight matrix
    <name>.bias.mrt        optional, stored as a 1×d matrix
    <name>.act.mrt         optional stack of calibration activations

Tensor files: 8-byte magic ``MRT1\\0\\0\\0\\0``, then u32 rows, u32 cols
(little-endian), then the row-major payload (little-endian IEEE-754 doubles
for dtype ``f64``, one byte per code for dtype ``u8q``).

Activation files: the same 8-byte magic, then u32 sample count, u32 rows,
u32 cols, then the samples' payloads concatenated in order.
"""
import json
import os
import shutil
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BundleFormatError, DimensionMismatchError, NonFiniteError, ValidationError
from .linalg import as_matrix

MAGIC = b"MRT1\x00\x00\x00\x00"
LAYER_KINDS = ("qkv", "attn_proj", "mlp1", "mlp2", "generic")

_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4"), "u8q": np.dtype("u1")}


@dataclass
class LayerRecord:
    """One compressible layer: weight (n×d), optional bias (length d)."""

    name: str
    weight: np.ndarray
    bias: np.ndarray | None = None
    kind: str = "generic"

    def __post_init__(self):
        self.weight = as_matrix(self.weight, f"layer '{self.name}' weight")
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"layer '{self.name}': unknown kind '{self.kind}'")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.d:
                raise DimensionMismatchError(
                    f"layer '{self.name}': bias length {self.bias.shape[0]} != d={self.d}"
                )
            if not np.isfinite(self.bias).all():
                raise NonFiniteError(f"layer '{self.name}': bias contains NaN or Inf")

    @property
    def n(self):
        return self.weight.shape[0]

    @property
    def d(self):
        return self.weight.shape[1]


@dataclass
class ProxyDataset:
    """Per-layer stacks of calibration activations, shape (N, s, n_l) each."""

    samples: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def count(self):
        for stack in self.samples.values():
            return stack.shape[0]
        return 0

    def for_layer(self, name):
        if name not in self.samples:
            raise ValidationError(f"no activations recorded for layer '{name}'")
        return self.samples[name]


@dataclass
class ModelBundle:
    layers: list[LayerRecord]
    proxy: ProxyDataset = field(default_factory=ProxyDataset)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError("layer names must be unique")
        counts = {name: stack.shape[0] for name, stack in self.proxy.samples.items()}
        if len(set(counts.values())) > 1:
            raise ValidationError(f"sample count differs across layers: {counts}")
        for layer in self.layers:
            stack = self.proxy.samples.get(layer.name)
            if stack is not None and stack.shape[2] != layer.n:
                raise DimensionMismatchError(
                    f"layer '{layer.name}': activations have {stack.shape[2]} columns, "
                    f"weight expects n={layer.n}"
                )

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise ValidationError(f"unknown layer '{name}'")

    def param_count(self):
        return sum(l.n * l.d for l in self.layers)


def write_tensor(path, array, dtype="f64"):
    """Write one matrix in the tensor wire format."""
    arr = np.ascontiguousarray(array)
    rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(arr.astype(_DTYPES[dtype], copy=False).tobytes())


def read_tensor(path, dtype="f64"):
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
        if head != MAGIC:
            raise BundleFormatError(f"{path}: bad magic {head!r}")
        rows, cols = struct.unpack("<II", fh.read(8))
        want = rows * cols * _DTYPES[dtype].itemsize
        payload = fh.read()
    if len(payload) != want:
        raise BundleFormatError(f"{path}: payload is {len(payload)} bytes, expected {want}")
    return np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(rows, cols).astype(
        np.float64 if dtype != "u8q" else np.uint8
    )


def write_activations(path, stack):
    stack = np.ascontiguousarray(stack, dtype=np.float64)
    count, rows, cols = stack.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", count, rows, cols))
        fh.write(stack.astype("<f8", copy=False).tobytes())


def read_activations(path):
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
        if head != MAGIC:
            raise BundleFormatError(f"{path}: bad magic {head!r}")
        count, rows, cols = struct.unpack("<III", fh.read(12))
        want = count * rows * cols * 8
        payload = fh.read()
    if len(payload) != want:
        raise BundleFormatError(f"{path}: payload is {len(payload)} bytes, expected {want}")
    return np.frombuffer(payload, dtype="<f8").reshape(count, rows, cols).astype(np.float64)


def _swap_into_place(staging, path):
    # Directory renames are not atomic against a populated target: move the old
    # tree aside first, then rename, then drop the old tree.
    trash = None
    if os.path.exists(path):
        trash = path + ".old"
        if os.path.exists(trash):
            shutil.rmtree(trash)
        os.rename(path, trash)
    os.rename(staging, path)
    if trash is not None:
        shutil.rmtree(trash)


def save_bundle(bundle, path):
    """Write `bundle` under `path`, replacing any previous content."""
    staging = path + ".staging"
    if os.path.exists(staging):
        shutil.rmtree(staging)
    os.makedirs(staging)
    entries = []
    for layer in bundle.layers:
        entry = {
            "name": layer.name,
            "n": layer.n,
            "d": layer.d,
            "kind": layer.kind,
            "dtype": "f64",
            "weight": f"{layer.name}.weight.mrt",
            "bias": None,
            "activations": None,
        }
        write_tensor(os.path.join(staging, entry["weight"]), layer.weight)
        if layer.bias is not None:
            entry["bias"] = f"{layer.name}.bias.mrt"
            write_tensor(os.path.join(staging, entry["bias"]), layer.bias.reshape(1, -1))
        stack = bundle.proxy.samples.get(layer.name)
        if stack is not None:
            entry["activations"] = f"{layer.name}.act.mrt"
            write_activations(os.path.join(staging, entry["activations"]), stack)
        entries.append(entry)
    manifest = {
        "format": "mrt-bundle",
        "version": 1,
        "metadata": bundle.metadata,
        "layers": entries,
    }
    with open(os.path.join(staging, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _swap_into_place(staging, path)


def load_bundle(path):
    """Load and fully validate a bundle directory."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise BundleFormatError(f"{path}: no manifest.json")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise BundleFormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if manifest.get("format") != "mrt-bundle":
        raise BundleFormatError(f"{path}: not a model bundle (format={manifest.get('format')!r})")

    layers = []
    samples = {}
    for entry in manifest.get("layers", []):
        name = entry["name"]
        weight_path = os.path.join(path, entry["weight"])
        if not os.path.isfile(weight_path):
            raise BundleFormatError(f"layer '{name}': missing tensor file {entry['weight']}")
        weight = read_tensor(weight_path, entry.get("dtype", "f64"))
        if weight.shape != (entry["n"], entry["d"]):
            raise DimensionMismatchError(
                f"layer '{name}': manifest declares {entry['n']}x{entry['d']}, "
                f"tensor file holds {weight.shape[0]}x{weight.shape[1]}"
            )
        if not np.isfinite(weight).all():
            raise NonFiniteError(f"layer '{name}': weight contains NaN or Inf")
        bias = None
        if entry.get("bias"):
            bias = read_tensor(os.path.join(path, entry["bias"])).reshape(-1)
        layers.append(LayerRecord(name=name, weight=weight, bias=bias, kind=entry["kind"]))
        if entry.get("activations"):
            stack = read_activations(os.path.join(path, entry["activations"]))
            if not np.isfinite(stack).all():
                raise NonFiniteError(f"layer '{name}': activations contain NaN or Inf")
            samples[name] = stack
    return ModelBundle(
        layers=layers, proxy=ProxyDataset(samples=samples), metadata=manifest.get("metadata", {})
    )


def _random_orthogonal(rng, size):
    q, r = np.linalg.qr(rng.standard_normal((size, size)))
    # Fix signs so the factorization is unique given the rng stream.
    return q * np.sign(np.diag(r))


def gen_synthetic(seed, layers, n, d, s, samples, spectrum_decay=0.8):
    """Build a deterministic relu-chain model with decaying weight spectra.

    Layer dims alternate n×d, d×n, ... so the chain composes. Weight l has
    singular values spectrum_decay**i. Activations are produced by pushing
    `samples` Gaussian inputs (each s×n) through the chain with max(0, x)
    between layers; each layer stores its own inputs.
    """
    if layers < 1:
        raise ValidationError(f"need at least one layer, got {layers}")
    if min(n, d, s) < 2 or samples < 1:
        raise ValidationError(f"dims must be >= 2 and samples >= 1 (n={n}, d={d}, s={s}, N={samples})")
    if not 0.0 < spectrum_decay <= 1.0:
        raise ValidationError(f"spectrum_decay must lie in (0, 1], got {spectrum_decay}")

    rng = np.random.default_rng(seed)
    dims = [n if l % 2 == 0 else d for l in range(layers + 1)]
    records = []
    for l in range(layers):
        a, b = dims[l], dims[l + 1]
        k = min(a, b)
        sigma = spectrum_decay ** np.arange(k)
        left = _random_orthogonal(rng, a)[:, :k]
        right = _random_orthogonal(rng, b)[:k, :]
        weight = (left * sigma) @ right
        records.append(LayerRecord(name=f"layer{l:02d}", weight=weight, kind="generic"))

    stacks = {rec.name: np.empty((samples, s, rec.n)) for rec in records}
    for i in range(samples):
        x = rng.standard_normal((s, n))
        for rec in records:
            stacks[rec.name][i] = x
            x = np.maximum(x @ rec.weight, 0.0)

    metadata = {
        "generator": "synthetic-chain",
        "seed": int(seed),
        "activation": "relu",
        "spectrum_decay": float(spectrum_decay),
    }
    return ModelBundle(layers=records, proxy=ProxyDataset(samples=stacks), metadata=metadata)


def representative_input(proxy, layer):
    """Mean of the proxy samples for one layer, shape s×n."""
    stack = proxy.for_layer(layer)
    if stack.shape[0] < 1:
        raise ValidationError(f"layer '{layer}': no samples to average")
    return stack.mean(axis=0)
