import numpy as np

from gmmdl.prior import PosteriorBatch, PriorBank


def random_bank(rng, C=3, M=4, d=5, eps=0.2, eta=(1.0, 1.0, 1.0), spread=1.0):
    return PriorBank(
        rng.normal(0.0, spread, size=(C, M, d)),
        rng.uniform(0.3, 2.0, size=(C, M, d)),
        rng.dirichlet(np.ones(M), size=C),
        eta=eta,
        eps=eps,
    )


def random_batch(rng, C=3, d=5, b=12, all_classes=True):
    labels = rng.integers(0, C, size=b)
    if all_classes and b >= C:
        labels[:C] = np.arange(C)
    return PosteriorBatch(labels, rng.normal(size=(b, d)), rng.uniform(0.2, 2.0, size=(b, d)))


def random_simplex(rng, shape):
    return rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
