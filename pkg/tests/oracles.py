"""Independent reference implementations used by the test suites."""

import math
from fractions import Fraction

import numpy as np

from polespl import encoder as enc

FD_STEP = 1e-4
REL_FLOOR = 1e-8


def rel_error(analytic, numeric, floor=REL_FLOOR):
    """Elementwise |a - n| / max(|a|, |n|, floor), maximised."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def central_diff(f, x, h=FD_STEP, index=None):
    """Central differences of scalar ``f()`` w.r.t. entries of array ``x`` (in place)."""
    idx = range(x.size) if index is None else index
    out = []
    for i in idx:
        old = x.flat[i]
        x.flat[i] = old + h
        up = f()
        x.flat[i] = old - h
        down = f()
        x.flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def _relu_pattern(params, x):
    _, cache = enc._forward(params, enc._as_batch(params, x))
    masks = [cache["stem.mask"]] + [m for name, _, _ in enc._ARCH for m in (cache[name][1], cache[name][4])]
    return b"".join(np.packbits(m).tobytes() for m in masks)


def kink_safe_diff(f, pattern, x, index, h=FD_STEP, h_min=1e-8):
    """Central differences that shrink the step while +h and -h straddle a ReLU kink.

    Returns the derivatives and how many entries needed a smaller step.
    """
    out, shrunk = [], 0
    for i in index:
        old = x.flat[i]
        step = h
        while True:
            x.flat[i] = old + step
            up, pu = f(), pattern()
            x.flat[i] = old - step
            down, pd = f(), pattern()
            x.flat[i] = old
            if pu == pd or step <= h_min:
                break
            step /= 10.0
        shrunk += step < h
        out.append((up - down) / (2 * step))
    return np.array(out), shrunk


def network_gradient_errors(objective, seed=0, samples=128, input_shape=(8, 16), batch=6):
    """Worst relative error per parameter tensor for a loss through the encoder.

    ``objective`` is 'cl' (InfoNCE over batch/2 pairs) or 'sl' (softmax
    cross-entropy through a fixed random classifier). Entries are sampled
    per tensor (all entries for small tensors). Returns
    ``(worst per tensor, number of kink-shrunk steps)``.
    """
    rng = np.random.default_rng(seed)
    params = enc.init_params(seed, input_shape=input_shape)
    for k, v in params.tensors.items():
        if k.endswith(".b"):
            v += rng.normal(scale=0.1, size=v.shape)
    x = rng.random((batch,) + input_shape)
    if objective == "cl":
        half = batch // 2

        def emb_loss(e):
            loss, da, dp = enc.infonce_loss(e[:half], e[half:], 0.07)
            return loss, np.concatenate([da, dp]), None
    else:
        w = rng.normal(size=(5, params.embed_dim))
        y = rng.integers(0, 5, batch)

        def emb_loss(e):
            loss, dl = enc.cross_entropy_loss(e @ w.T, y)
            return loss, dl @ w, None

    _, grads, _ = enc.loss_and_grads(params, x, emb_loss)
    f = lambda: enc.loss_and_grads(params, x, emb_loss)[0]
    pattern = lambda: _relu_pattern(params, x)
    worst, shrunk = {}, 0
    for name, t in params.tensors.items():
        idx = np.arange(t.size) if t.size <= samples else rng.choice(t.size, samples, replace=False)
        num, n = kink_safe_diff(f, pattern, t, idx)
        worst[name] = rel_error(grads[name].flat[idx], num)
        shrunk += n
    return worst, shrunk


def embedding_gradient_errors(seed=0, b=8, d=16, c=7):
    """Worst relative errors of the loss gradients w.r.t. their direct inputs."""
    rng = np.random.default_rng(seed)
    unit = lambda m: m / np.linalg.norm(m, axis=1, keepdims=True)
    a, p = unit(rng.normal(size=(b, d))), unit(rng.normal(size=(b, d)))
    _, da, dp = enc.infonce_loss(a, p, 0.07)
    out = {
        "infonce.anchor": rel_error(da, central_diff(lambda: enc.infonce_loss(a, p, 0.07)[0], a)),
        "infonce.positive": rel_error(dp, central_diff(lambda: enc.infonce_loss(a, p, 0.07)[0], p)),
    }
    _, dz1, dz2 = enc.nt_xent_loss(a, p, 0.07)
    out["ntxent.z1"] = rel_error(dz1, central_diff(lambda: enc.nt_xent_loss(a, p, 0.07)[0], a))
    out["ntxent.z2"] = rel_error(dz2, central_diff(lambda: enc.nt_xent_loss(a, p, 0.07)[0], p))
    logits = rng.normal(size=(b, c))
    y = rng.integers(0, c, b)
    _, dl = enc.cross_entropy_loss(logits, y)
    out["xent.logits"] = rel_error(dl, central_diff(lambda: enc.cross_entropy_loss(logits, y)[0], logits))
    return out


# --- retrieval ------------------------------------------------------------

def brute_rank(q, ids, emb):
    """Sort by (-cosine, id) with plain Python tuples."""
    sims = [float(sum(float(a) * float(b) for a, b in zip(q, e))) for e in emb]
    return [int(i) for _, i in sorted(zip([-s for s in sims], ids))]


def round_half_up_2(num, den):
    """100 * num / den to two decimals, exact rational arithmetic."""
    v = Fraction(100 * num, den) * 100
    return float(Fraction(math.floor(v + Fraction(1, 2)), 100))


def brute_recall(queries, db_ids, db_emb, ks=(1, 5, 10)):
    ranks = []
    for lid, e in queries:
        order = brute_rank(e, db_ids, db_emb)
        ranks.append(order.index(lid) + 1)
    return ranks, {k: round_half_up_2(sum(r <= k for r in ranks), len(ranks)) for k in ks} if ranks else {}
