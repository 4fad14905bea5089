"""Small random instances shared by the unit and acceptance tests."""

import numpy as np

from lorelab.models import EncoderParams, PrototypeHead, encode

# keep every ReLU pre-activation at least this far from its kink, so central
# differences with h=1e-3 never straddle it
KINK_CLEARANCE = 0.02


def _preactivations(theta: EncoderParams, x: np.ndarray):
    h = x.astype(np.float64)
    out = []
    for i, (w, b) in enumerate(zip(theta.weights, theta.biases)):
        h = h @ w + b
        if i < len(theta.weights) - 1:
            out.append(h)
            h = np.maximum(h, 0)
    return out


def generic_encoder(rng, dims=(2, 8, 4), batch=4, scale=0.5):
    """Encoder and batch whose hidden pre-activations avoid the ReLU kink.

    Weights are shrunk so losses stay near unit scale; float32 central
    differences carry noise proportional to the loss value.
    """
    for _ in range(1000):
        theta = EncoderParams.init(list(dims), seed=rng)
        theta = theta.with_arrays([a * scale for a in theta.arrays()])
        theta = theta.with_arrays([a + (0.1 * rng.normal(size=a.shape) if a.ndim == 1 else 0) for a in theta.arrays()])
        x = rng.uniform(0, 1, (batch, dims[0])).astype(np.float32)
        if all(np.min(np.abs(p)) > KINK_CLEARANCE for p in _preactivations(theta, x)):
            return theta, x
    raise RuntimeError("could not draw a generic instance")


def random_head(rng, n_classes, k, tau=0.5):
    p = rng.normal(size=(n_classes, k))
    return PrototypeHead(p / np.linalg.norm(p, axis=1, keepdims=True), tau)


def unit_scale_reference(rng, theta, x):
    """Reference embeddings near the live ones, so distances stay O(1)."""
    z = encode(theta, x).data
    return (z + 0.3 * rng.normal(size=z.shape)).astype(np.float32)


def blobs_lab(seed=0, n=600, epochs=3):
    """Tiny easy task for fast training-loop tests."""
    from lorelab.harness.data import synth_blobs
    from lorelab.harness.experiments import build_lab

    data = synth_blobs(4, n, 8, 0.05, seed=seed)
    return build_lab(data, dims=(8, 16, 8), pretrain_epochs=epochs,
                     splits={"train": n // 2, "val": n // 4, "probe": n // 4})


# linear toys for the weak-duality check: the first has an optimal anchor, the
# others a radius large enough that the proximity constraint costs adversarial loss
DUALITY_TOYS = [
    dict(a0=1.0, b0=0.0, data=[0.2, 0.8], epsilon=0.1, rho_list=[0.0, 0.05, 1e6],
         grid={"a": [0, 2, 101], "b": [-0.5, 0.5, 101]}),
    dict(a0=1.0, b0=0.0, data=[0.2, 0.8], epsilon=0.5, rho_list=[0.0, 0.01, 0.05, 0.2, 1e6],
         grid={"a": [0, 2, 101], "b": [-0.5, 0.5, 101]}),
    dict(a0=-0.7, b0=0.3, data=[0.1, 0.4, 0.9], epsilon=0.3, rho_list=[0.0, 0.02, 0.1, 0.5, 1e6],
         grid={"a": [-1.5, 0.5, 81], "b": [-0.2, 0.8, 81]}),
    dict(a0=2.0, data=[0.5], epsilon=0.25, rho_list=[0.0, 0.1, 1e6], grid={"a": [0, 3, 301]}),
]
