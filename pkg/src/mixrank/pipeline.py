"""Pipeline orchestration: compress, evaluate, quantize, cost reports.

Everything is deterministic given (inputs, seed): the proxy split, the
per-layer gradient-descent seeds, and all file contents derive from the one
config seed. Output directories are staged and swapped into place, so a
failing run never leaves a partial bundle behind.
"""
import csv
import json
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .allocator import allocate, schedule_for
from .bundle import _swap_into_place, read_tensor, write_tensor
from .compensate import CompensationFactors, GdConfig, comp_rank, compensate
from .cost import layer_cost, size_report
from .errors import (
    BundleFormatError,
    DimensionMismatchError,
    InfeasibleTargetError,
    ValidationError,
)
from .factorize import (
    LowRankFactors,
    SingularSpectrum,
    activation_aware_spectrum,
    energy_loss,
    factorize,
    layer_output_error,
)
from .linalg import svd
from .quant import QuantizedMatrix, dequantize, quantize

FACTOR_NAMES = ("left", "right", "comp_left", "comp_right")


@dataclass
class PipelineConfig:
    alpha: float = 2.0
    gamma: float = 80.0
    schedule_iters: int = 500
    gd_learning_rate: float = 1e-3
    gd_iterations: int = 2000
    gd_batch_size: int = 64
    comp_budget_fraction: float = 0.05
    proxy_cap: int | None = None
    rcond: float = 1e-10
    bits: int = 8
    quant_mode: str = "affine_minmax"
    channel_axis: str = "column"
    holdout_fraction: float = 0.2
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.alpha <= 1.0:
            raise ValidationError(f"alpha must exceed 1, got {self.alpha}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValidationError(f"holdout_fraction must lie in (0, 1), got {self.holdout_fraction}")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers}")

    def gd_config(self, seed):
        return GdConfig(
            learning_rate=self.gd_learning_rate,
            iterations=self.gd_iterations,
            batch_size=self.gd_batch_size,
            seed=seed,
        )


@dataclass
class CompressedLayer:
    name: str
    kind: str
    n: int
    d: int
    factors: LowRankFactors
    compensation: CompensationFactors
    bias: np.ndarray | None = None
    quantized: dict | None = None  # factor name -> QuantizedMatrix

    def __post_init__(self):
        r, q = self.factors.rank, self.compensation.rank
        if r < 1 or q < 1 or q >= r:
            raise ValidationError(
                f"layer '{self.name}': need rank >= 1 and 1 <= comp rank < rank, got r={r}, q={q}"
            )

    @property
    def rank(self):
        return self.factors.rank

    @property
    def comp_rank(self):
        return self.compensation.rank

    def approx_weight(self):
        return self.factors.product() + self.compensation.product()

    def param_count(self):
        return (self.n + self.d) * (self.rank + self.comp_rank)


@dataclass
class CompressedBundle:
    layers: list[CompressedLayer]
    provenance: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise ValidationError(f"unknown layer '{name}'")

    def original_params(self):
        return sum(l.n * l.d for l in self.layers)

    def param_count(self):
        return sum(l.param_count() for l in self.layers)

    def total_ratio(self):
        return self.original_params() / self.param_count()


def split_proxy(count, seed, holdout_fraction, proxy_cap=None):
    """Seeded calibration/held-out index split, identical across commands."""
    if count < 1:
        raise ValidationError("proxy is empty")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(count)
    if proxy_cap is not None:
        perm = perm[: max(1, proxy_cap)]
    if len(perm) == 1:
        return perm, perm  # degenerate: evaluate on the only sample there is
    n_cal = int(round((1.0 - holdout_fraction) * len(perm)))
    n_cal = min(max(n_cal, 1), len(perm) - 1)
    return perm[:n_cal], perm[n_cal:]


def _layer_seeds(seed, count):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def compress_bundle(bundle, config):
    """Run the full flow: spectra -> rank allocation -> factors -> compensation.

    Returns (CompressedBundle, artifacts) where artifacts holds the
    allocation trace, per-layer error rows, and gradient-descent logs that
    cmd_compress writes next to the bundle.
    """
    if not bundle.layers:
        raise ValidationError("bundle has no layers")
    count = bundle.proxy.count
    cal_idx, held_idx = split_proxy(count, config.seed, config.holdout_fraction, config.proxy_cap)

    reps, spectra, cal_stacks, held_stacks = [], [], [], []
    for layer in bundle.layers:
        stack = bundle.proxy.for_layer(layer.name)
        cal, held = stack[cal_idx], stack[held_idx]
        x_rep = cal.mean(axis=0)
        reps.append(x_rep)
        spectra.append(activation_aware_spectrum(layer, x_rep))
        cal_stacks.append(cal)
        held_stacks.append(held)

    params = schedule_for(
        bundle, spectra, config.alpha,
        comp_budget_fraction=config.comp_budget_fraction,
        decay=config.gamma, max_iters=config.schedule_iters,
    )
    ranks, trace = allocate(
        bundle, spectra, config.alpha,
        params=params, comp_budget_fraction=config.comp_budget_fraction,
    )

    qs = [comp_rank(layer, config.comp_budget_fraction) for layer in bundle.layers]
    bad = [l.name for l, r, q in zip(bundle.layers, ranks, qs) if q >= r]
    if bad:
        raise InfeasibleTargetError(
            f"allocated ranks leave no room for compensation (q >= r) on layers {bad}; "
            "lower alpha or the compensation budget"
        )

    seeds = _layer_seeds(config.seed, len(bundle.layers))

    def build(idx):
        layer = bundle.layers[idx]
        factors = factorize(layer, reps[idx], ranks[idx], config.rcond)
        result = compensate(
            layer, factors, cal_stacks[idx], config.gd_config(seeds[idx]), config.comp_budget_fraction
        )
        err_none = layer_output_error(layer, factors, None, held_stacks[idx])
        err_comp = layer_output_error(layer, factors, result.factors, held_stacks[idx])
        rmax = min(layer.n, layer.d, len(spectra[idx]))
        extra = factorize(layer, reps[idx], min(ranks[idx] + qs[idx], rmax), config.rcond)
        err_extra = layer_output_error(layer, extra, None, held_stacks[idx])
        compressed = CompressedLayer(
            name=layer.name, kind=layer.kind, n=layer.n, d=layer.d,
            factors=factors, compensation=result.factors, bias=layer.bias,
        )
        return compressed, result, err_none, err_comp, err_extra

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            built = list(pool.map(build, range(len(bundle.layers))))
    else:
        built = [build(i) for i in range(len(bundle.layers))]

    error_rows, gd_rows, layers = [], [], []
    for layer, (compressed, result, err_none, err_comp, err_extra) in zip(bundle.layers, built):
        layers.append(compressed)
        error_rows.append({
            "layer": layer.name,
            "rank": compressed.rank,
            "comp_rank": compressed.comp_rank,
            "err_no_comp": err_none.value,
            "err_with_comp": err_comp.value,
            "err_extra_rank": err_extra.value,
            "skipped_samples": err_comp.skipped,
        })
        for row in result.log:
            gd_rows.append({
                "layer": layer.name,
                "iteration": row.iteration,
                "batch_loss": row.batch_loss,
                "full_loss": row.full_loss,
            })

    original = bundle.param_count()
    lowrank = sum((l.n + l.d) * r for l, r in zip(bundle.layers, ranks))
    total = lowrank + sum((l.n + l.d) * q for l, q in zip(bundle.layers, qs))
    psi_total = original / total
    if psi_total < config.alpha:
        raise InfeasibleTargetError(
            f"allocation missed the target: total ratio {psi_total:.4f} < alpha {config.alpha}"
        )

    provenance = {
        "config": asdict(config),
        "original_params": original,
        "psi_lowrank": original / lowrank,
        "psi_total": psi_total,
        "proxy_count": int(count),
    }
    compressed = CompressedBundle(layers=layers, provenance=provenance, metadata=dict(bundle.metadata))
    artifacts = {
        "trace": trace,
        "error_rows": error_rows,
        "gd_rows": gd_rows,
        "energy_rows": energy_curve_rows(bundle, spectra),
    }
    return compressed, artifacts


def energy_curve_rows(bundle, spectra):
    """Normalized energy-loss curves of the activation-weighted product vs the
    bare weight, per layer and rank (the spectrum comparison report)."""
    rows = []
    for layer, spec in zip(bundle.layers, spectra):
        plain_values = svd(layer.weight).s
        plain = SingularSpectrum(
            layer=layer.name, values=plain_values, total_energy=float(np.sum(plain_values**2))
        )
        rmax = min(layer.n, layer.d, len(spec))
        for r in range(1, rmax + 1):
            rows.append({
                "layer": layer.name,
                "rank": r,
                "act_energy_loss": energy_loss(spec, min(r, len(spec))),
                "weight_energy_loss": energy_loss(plain, min(r, len(plain))),
            })
    return rows


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def save_compressed(compressed, path, artifacts=None):
    """Write a compressed bundle (and its report CSVs) atomically."""
    alpha = compressed.provenance.get("config", {}).get("alpha")
    if alpha is not None and compressed.total_ratio() < alpha:
        raise ValidationError(
            f"refusing to write: total ratio {compressed.total_ratio():.4f} below alpha {alpha}"
        )
    staging = path + ".staging"
    if os.path.exists(staging):
        shutil.rmtree(staging)
    os.makedirs(staging)
    entries = []
    for layer in compressed.layers:
        entry = {
            "name": layer.name, "kind": layer.kind, "n": layer.n, "d": layer.d,
            "rank": layer.rank, "comp_rank": layer.comp_rank, "bias": None,
        }
        if layer.bias is not None:
            entry["bias"] = f"{layer.name}.bias.mrt"
            write_tensor(os.path.join(staging, entry["bias"]), layer.bias.reshape(1, -1))
        if layer.quantized is None:
            entry["tensors"] = {}
            for fname, mat in zip(FACTOR_NAMES, _factor_mats(layer)):
                entry["tensors"][fname] = f"{layer.name}.{fname}.mrt"
                write_tensor(os.path.join(staging, entry["tensors"][fname]), mat)
        else:
            qinfo = {
                "bits": layer.quantized["left"].bits,
                "mode": layer.quantized["mode"],
                "channel_axis": layer.quantized["left"].channel_axis,
                "codes": {}, "scales": {}, "zeros": {},
            }
            for fname in FACTOR_NAMES:
                qm = layer.quantized[fname]
                qinfo["codes"][fname] = f"{layer.name}.{fname}.u8q.mrt"
                qinfo["scales"][fname] = f"{layer.name}.{fname}.scales.mrt"
                qinfo["zeros"][fname] = f"{layer.name}.{fname}.zeros.mrt"
                write_tensor(os.path.join(staging, qinfo["codes"][fname]), qm.codes, dtype="u8q")
                write_tensor(os.path.join(staging, qinfo["scales"][fname]), qm.scales.reshape(1, -1))
                write_tensor(os.path.join(staging, qinfo["zeros"][fname]), qm.zeros.reshape(1, -1))
            entry["quantized"] = qinfo
        entries.append(entry)
    manifest = {
        "format": "mrt-compressed",
        "version": 1,
        "provenance": compressed.provenance,
        "metadata": compressed.metadata,
        "layers": entries,
    }
    with open(os.path.join(staging, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")

    if artifacts:
        artifacts["trace"].write_csv(os.path.join(staging, "trace.csv"))
        _write_csv(
            os.path.join(staging, "layer_errors.csv"), artifacts["error_rows"],
            ["layer", "rank", "comp_rank", "err_no_comp", "err_with_comp",
             "err_extra_rank", "skipped_samples"],
        )
        _write_csv(
            os.path.join(staging, "gd_log.csv"), artifacts["gd_rows"],
            ["layer", "iteration", "batch_loss", "full_loss"],
        )
        _write_csv(
            os.path.join(staging, "energy_curves.csv"), artifacts["energy_rows"],
            ["layer", "rank", "act_energy_loss", "weight_energy_loss"],
        )

    _swap_into_place(staging, path)


def _factor_mats(layer):
    return (layer.factors.left, layer.factors.right,
            layer.compensation.left, layer.compensation.right)


def load_compressed(path):
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise BundleFormatError(f"{path}: no manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "mrt-compressed":
        raise BundleFormatError(
            f"{path}: not a compressed bundle (format={manifest.get('format')!r})"
        )
    layers = []
    for entry in manifest["layers"]:
        name = entry["name"]
        bias = None
        if entry.get("bias"):
            bias = read_tensor(os.path.join(path, entry["bias"])).reshape(-1)
        if "quantized" in entry:
            qinfo = entry["quantized"]
            quantized = {"mode": qinfo["mode"]}
            mats = {}
            for fname in FACTOR_NAMES:
                codes = read_tensor(os.path.join(path, qinfo["codes"][fname]), dtype="u8q")
                scales = read_tensor(os.path.join(path, qinfo["scales"][fname])).reshape(-1)
                zeros = read_tensor(os.path.join(path, qinfo["zeros"][fname])).reshape(-1)
                qm = QuantizedMatrix(codes=codes, scales=scales, zeros=zeros,
                                     bits=qinfo["bits"], channel_axis=qinfo["channel_axis"])
                quantized[fname] = qm
                mats[fname] = dequantize(qm)
        else:
            quantized = None
            mats = {
                fname: read_tensor(os.path.join(path, entry["tensors"][fname]))
                for fname in FACTOR_NAMES
            }
        factors = LowRankFactors(left=mats["left"], right=mats["right"], rank=entry["rank"])
        comp = CompensationFactors(
            left=mats["comp_left"], right=mats["comp_right"], rank=entry["comp_rank"]
        )
        _check_factor_shapes(name, entry, factors, comp)
        layers.append(CompressedLayer(
            name=name, kind=entry["kind"], n=entry["n"], d=entry["d"],
            factors=factors, compensation=comp, bias=bias, quantized=quantized,
        ))
    return CompressedBundle(
        layers=layers,
        provenance=manifest.get("provenance", {}),
        metadata=manifest.get("metadata", {}),
    )


def _check_factor_shapes(name, entry, factors, comp):
    n, d, r, q = entry["n"], entry["d"], entry["rank"], entry["comp_rank"]
    shapes = {
        "left": (factors.left.shape, (n, r)),
        "right": (factors.right.shape, (d, r)),
        "comp_left": (comp.left.shape, (n, q)),
        "comp_right": (comp.right.shape, (d, q)),
    }
    for fname, (got, want) in shapes.items():
        if got != want:
            raise DimensionMismatchError(
                f"layer '{name}': tensor '{fname}' is {got}, manifest expects {want}"
            )


@dataclass
class LayerEval:
    layer: str
    rank: int
    comp_rank: int
    err_heldout: float
    err_heldout_no_comp: float
    err_calibration: float
    generalization_gap: float


@dataclass
class EvalReport:
    layers: list[LayerEval]
    error_sum: float
    end_to_end_deviation: float | None
    original_params: int
    compressed_params: int
    psi_total: float


def evaluate_pair(bundle, compressed):
    """Score a compressed bundle against its source on the held-out split."""
    names = [l.name for l in bundle.layers]
    cnames = [l.name for l in compressed.layers]
    if names != cnames:
        raise ValidationError(f"layer sets differ: {names} vs {cnames}")
    cfg = compressed.provenance.get("config", {})
    seed = cfg.get("seed", 0)
    holdout = cfg.get("holdout_fraction", 0.2)
    cap = cfg.get("proxy_cap")
    cal_idx, held_idx = split_proxy(bundle.proxy.count, seed, holdout, cap)

    rows = []
    for layer, clayer in zip(bundle.layers, compressed.layers):
        if (layer.n, layer.d) != (clayer.n, clayer.d):
            raise DimensionMismatchError(
                f"layer '{layer.name}': dims {layer.n}x{layer.d} vs compressed "
                f"{clayer.n}x{clayer.d}"
            )
        stack = bundle.proxy.for_layer(layer.name)
        held = layer_output_error(layer, clayer.factors, clayer.compensation, stack[held_idx])
        held_nc = layer_output_error(layer, clayer.factors, None, stack[held_idx])
        cal = layer_output_error(layer, clayer.factors, clayer.compensation, stack[cal_idx])
        rows.append(LayerEval(
            layer=layer.name, rank=clayer.rank, comp_rank=clayer.comp_rank,
            err_heldout=held.value, err_heldout_no_comp=held_nc.value,
            err_calibration=cal.value,
            generalization_gap=held.value - cal.value,
        ))

    deviation = None
    if bundle.metadata.get("generator") == "synthetic-chain" and _chain_composes(bundle):
        deviation = _end_to_end_deviation(bundle, compressed, held_idx)

    return EvalReport(
        layers=rows,
        error_sum=sum(r.err_heldout for r in rows),
        end_to_end_deviation=deviation,
        original_params=bundle.param_count(),
        compressed_params=compressed.param_count(),
        psi_total=compressed.total_ratio(),
    )


def _chain_composes(bundle):
    dims = [(l.n, l.d) for l in bundle.layers]
    return all(dims[i][1] == dims[i + 1][0] for i in range(len(dims) - 1))


def _end_to_end_deviation(bundle, compressed, held_idx):
    first = bundle.layers[0].name
    inputs = bundle.proxy.for_layer(first)[held_idx]
    total, used = 0.0, 0
    for x in inputs:
        ref, out = x, x
        for i, layer in enumerate(bundle.layers):
            approx = compressed.layers[i].approx_weight()
            if i < len(bundle.layers) - 1:
                ref = np.maximum(ref @ layer.weight, 0.0)
                out = np.maximum(out @ approx, 0.0)
            else:
                ref = ref @ layer.weight
                out = out @ approx
        denom = float(np.sum(ref * ref))
        if denom == 0.0:
            continue
        total += float(np.sum((out - ref) ** 2)) / denom
        used += 1
    return total / used if used else None


def quantize_bundle(compressed, bits, mode="affine_minmax", channel_axis="column"):
    """Attach per-channel quantized forms to every factor matrix."""
    layers = []
    for layer in compressed.layers:
        quantized = {"mode": mode}
        mats = {}
        for fname, mat in zip(FACTOR_NAMES, _factor_mats(layer)):
            qm = quantize(mat, bits, mode=mode, channel_axis=channel_axis)
            quantized[fname] = qm
            mats[fname] = dequantize(qm)
        layers.append(CompressedLayer(
            name=layer.name, kind=layer.kind, n=layer.n, d=layer.d,
            factors=LowRankFactors(left=mats["left"], right=mats["right"], rank=layer.rank),
            compensation=CompensationFactors(
                left=mats["comp_left"], right=mats["comp_right"], rank=layer.comp_rank
            ),
            bias=layer.bias, quantized=quantized,
        ))
    provenance = dict(compressed.provenance)
    provenance["quantization"] = {"bits": bits, "mode": mode, "channel_axis": channel_axis}
    return CompressedBundle(layers=layers, provenance=provenance, metadata=dict(compressed.metadata))


def quantized_size_report(compressed, bits, sidecar_bits=32):
    """Size accounting for a quantized bundle vs the FP16 original."""
    code_params = compressed.param_count()
    sidecar_params = 0
    bias_params = 0
    for layer in compressed.layers:
        for fname, mat in zip(FACTOR_NAMES, _factor_mats(layer)):
            channels = mat.shape[1] if layer.quantized is None or \
                layer.quantized[fname].channel_axis == "column" else mat.shape[0]
            sidecar_params += 2 * channels  # scales + zeros
        if layer.bias is not None:
            bias_params += layer.bias.size
    baseline = compressed.provenance.get("original_params", compressed.original_params())
    baseline += bias_params
    groups = [(code_params, bits), (sidecar_params, sidecar_bits)]
    if bias_params:
        groups.append((bias_params, 16))
    return size_report(groups, baseline_params=baseline)


def cost_report(compressed, seq_len):
    """Per-layer and aggregate multiplication counts at sequence length seq_len."""
    rows = [
        layer_cost(layer.name, seq_len, layer.n, layer.d, layer.rank, layer.comp_rank)
        for layer in compressed.layers
    ]
    total_orig = sum(r.original_mults for r in rows)
    total_fact = sum(r.factored_mults for r in rows)
    return rows, total_fact / total_orig
