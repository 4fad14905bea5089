"""Clean supervised pretraining that produces the reference encoder.

Stands in for a pretrained backbone: the encoder and a set of learnable class
vectors are fit jointly with a cosine-softmax cross-entropy on clean data.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..models import EncoderParams, encode
from ..optimize import OptimizerState, adaptive_update
from ..tensor import Tape
from .data import Dataset


def _cosine_ce(params, classes, x, y, tau):
    z = encode(params, x)
    zn = z / T.reshape(T.sqrt(T.sq_norm(z) + 1e-12), (z.shape[0], 1))
    cn = classes / T.reshape(T.sqrt(T.sq_norm(classes)), (classes.shape[0], 1))
    logits = T.matmul(zn, T.transpose(cn)) * (1.0 / tau)
    return -T.mean(T.pick(T.log_softmax(logits), y))


def pretrain_encoder(data: Dataset, dims, epochs: int = 20, lr: float = 3e-3, batch_size: int = 64,
                     tau: float = 0.07, seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    theta = EncoderParams.init(dims, seed=rng)
    classes = rng.normal(0.0, 1.0, (data.n_classes, dims[-1])).astype(np.float32)
    arrays = theta.arrays() + [classes]
    state = OptimizerState()
    for _ in range(epochs):
        perm = rng.permutation(len(data))
        for s in range(0, len(data), batch_size):
            idx = perm[s:s + batch_size]
            tape = Tape()
            watched = [tape.watch(a) for a in arrays]
            loss = _cosine_ce(watched[:-1], watched[-1], data.inputs[idx], data.labels[idx], tau)
            grads = tape.gradient(loss, watched)
            arrays, state = adaptive_update(arrays, grads, state, lr)
    return theta.with_arrays(arrays[:-1])
