"""Shared builders for synthetic test instances."""
import numpy as np

from mixrank import LayerRecord, ModelBundle, ProxyDataset
from mixrank.factorize import SingularSpectrum


def spectral_matrix(rng, rows, cols, decay, scale=1.0):
    """Random matrix with singular values scale * decay**i."""
    k = min(rows, cols)
    q1, r1 = np.linalg.qr(rng.standard_normal((rows, rows)))
    q2, r2 = np.linalg.qr(rng.standard_normal((cols, cols)))
    sigma = scale * decay ** np.arange(k)
    return (q1[:, :k] * sigma) @ q2[:, :k].T


def correlated_layer(rng, n=16, d=16, s=20, w_decay=0.8, x_decay=0.7, mix=0.5, samples=32):
    """Layer plus activation stack whose samples share one structured row space.

    Each sample is a random row-mixing of the same base activation, the
    desk-scale analog of tokens drawn from a common low-dimensional manifold.
    """
    weight = spectral_matrix(rng, n, d, w_decay)
    base = spectral_matrix(rng, s, n, x_decay)
    stack = np.stack([
        (np.eye(s) + mix * rng.standard_normal((s, s))) @ base for _ in range(samples)
    ])
    return LayerRecord(name="corr", weight=weight), stack


def correlated_bundle(seed, layers=3, samples=32, **kw):
    rng = np.random.default_rng(seed)
    records, stacks = [], {}
    for i in range(layers):
        layer, stack = correlated_layer(rng, samples=samples, **kw)
        record = LayerRecord(name=f"layer{i:02d}", weight=layer.weight)
        records.append(record)
        stacks[record.name] = stack
    return ModelBundle(layers=records, proxy=ProxyDataset(samples=stacks),
                       metadata={"generator": "correlated"})


def diag_spectrum_instance(seed, min_layers=2, max_layers=3, dim_lo=6, dim_hi=10,
                           decay_lo=0.3, decay_hi=0.95, alpha_lo=1.3, alpha_hi=3.0):
    """Tiny allocator instance with explicit diagonal spectra, for brute force."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(min_layers, max_layers + 1))
    records, spectra = [], []
    for i in range(count):
        n = int(rng.integers(dim_lo, dim_hi + 1))
        d = int(rng.integers(dim_lo, dim_hi + 1))
        k = min(n, d)
        sigma = rng.uniform(0.5, 2.0) * rng.uniform(decay_lo, decay_hi) ** np.arange(k)
        weight = np.zeros((n, d))
        weight[:k, :k] = np.diag(sigma)
        records.append(LayerRecord(name=f"l{i}", weight=weight))
        spectra.append(SingularSpectrum(layer=f"l{i}", values=sigma,
                                        total_energy=float(np.sum(sigma**2))))
    alpha = float(rng.uniform(alpha_lo, alpha_hi))
    return ModelBundle(layers=records), spectra, alpha
