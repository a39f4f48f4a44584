"""Finite-difference gradient cases shared by the unit and acceptance tests.

Each case is ``build(rng) -> (fn, point)`` where ``fn`` maps a Tensor to a
scalar Tensor. Outputs are contracted with a random weight tensor so that
every output coordinate contributes a distinct gradient.
"""

import numpy as np

from gclab import autodiff as ad
from gclab import contrast, encoders
from gclab.autodiff import Tensor
from gclab.contrast import DiscriminatorConfig, ScoredBatch
from gclab.encoders import EncoderConfig
from gclab.graph import Graph, symmetric_normalize
from gclab.samplers import View, diffusion_view

KINK_MARGIN = 1e-3
TOL = 1e-4
# central differences at h=1e-5 carry ~1e-11 of rounding noise on these
# problems, so a gradient coordinate below NOISE / TOL cannot be resolved to TOL
FD_NOISE = 1e-11
ZERO_NOISE = FD_NOISE / TOL


def small_graph(rng, n=6, feat_dim=3):
    # a ring plus random chords, so every node has neighbours
    idx = np.arange(n)
    ring = np.stack([idx, (idx + 1) % n], axis=1)
    chords = rng.integers(0, n, size=(n // 2, 2))
    return Graph(n, np.vstack([ring, chords]), rng.standard_normal((n, feat_dim)))


def _binary(op, shape_a, shape_b, wrt=0, **kw):
    def build(rng):
        a = rng.standard_normal(shape_a)
        b = rng.standard_normal(shape_b)
        w = rng.standard_normal(op(Tensor(a), Tensor(b), **kw).shape)
        if wrt == 0:
            return (lambda t: ad.reduce_sum(ad.mul(op(t, b, **kw), w))), a
        return (lambda t: ad.reduce_sum(ad.mul(op(a, t, **kw), w))), b
    return build


def _spmm(rng):
    g = small_graph(rng, 7)
    adj = symmetric_normalize(g)
    x = rng.standard_normal((7, 3))
    w = rng.standard_normal((7, 3))
    return (lambda t: ad.reduce_sum(ad.mul(ad.spmm(adj, t), w))), x


def _concat(axis):
    def build(rng):
        a = rng.standard_normal((3, 2))
        b = rng.standard_normal((3, 4) if axis == 1 else (5, 2))
        w = rng.standard_normal(np.concatenate([a, b, a], axis=axis).shape)
        return (lambda t: ad.reduce_sum(ad.mul(ad.concat([t, b, t], axis=axis), w))), a
    return build


def _gather(rng):
    x = rng.standard_normal((5, 3))
    idx = np.array([0, 2, 2, 4, 1, 0])
    w = rng.standard_normal((len(idx), 3))
    return (lambda t: ad.reduce_sum(ad.mul(ad.gather(t, idx), w))), x


def _segment(op):
    def build(rng):
        x = rng.standard_normal((7, 3)) if op is not ad.segment_softmax else rng.standard_normal((7, 1))
        seg = np.array([0, 0, 1, 2, 2, 2, 1])
        out_shape = op(Tensor(x), seg, 3).shape
        w = rng.standard_normal(out_shape)
        return (lambda t: ad.reduce_sum(ad.mul(op(t, seg, 3), w))), x
    return build


def _reduce(op, axis):
    def build(rng):
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal(op(Tensor(x), axis).shape)
        return (lambda t: ad.reduce_sum(ad.mul(op(t, axis), w))), x
    return build


def _simple(op, positive=False, **kw):
    def build(rng):
        x = rng.standard_normal((4, 3))
        if positive:
            x = np.abs(x) + 0.5
        w = rng.standard_normal(op(Tensor(x), **kw).shape)
        return (lambda t: ad.reduce_sum(ad.mul(op(t, **kw), w))), x
    return build


def _prelu_slope(rng):
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((4, 3))
    return (lambda s: ad.reduce_sum(ad.mul(ad.prelu(x, s), w))), np.array([rng.uniform(0.05, 0.5)])


PRIMITIVE_CASES = {
    "matmul": _binary(ad.matmul, (3, 4), (4, 2)),
    "matmul[rhs]": _binary(ad.matmul, (3, 4), (4, 2), wrt=1),
    "sparse-dense-matmul": _spmm,
    "transpose": _simple(ad.transpose),
    "add": _binary(ad.add, (3, 4), (3, 4)),
    "add[broadcast]": _binary(ad.add, (3, 4), (1, 4), wrt=1),
    "scale": _simple(ad.scale, c=-1.7),
    "elementwise-multiply": _binary(ad.mul, (3, 4), (3, 4)),
    "relu": _simple(ad.relu),
    "leaky-relu": _simple(ad.leaky_relu, slope=0.2),
    "prelu": _binary(ad.prelu, (4, 3), (1,)),
    "prelu[slope]": _prelu_slope,
    "logsigmoid": _simple(ad.logsigmoid),
    "exp": _simple(ad.exp),
    "log": _simple(ad.log, positive=True),
    "logsumexp": _simple(ad.logsumexp),
    "row-softmax": _simple(ad.row_softmax),
    "row-l2-normalize": _simple(ad.l2_normalize),
    "concat[cols]": _concat(1),
    "concat[rows]": _concat(0),
    "reduce-sum[rows]": _reduce(ad.reduce_sum, 0),
    "reduce-sum[all]": _reduce(ad.reduce_sum, None),
    "reduce-mean[rows]": _reduce(ad.reduce_mean, 0),
    "reduce-mean[all]": _reduce(ad.reduce_mean, None),
    "row-gather": _gather,
    "segment-sum": _segment(ad.segment_sum),
    "segment-mean": _segment(ad.segment_mean),
    "segment-softmax": _segment(ad.segment_softmax),
}


# ------------------------------------------------------------- model parts


def _unflatten(x, layout):
    out, start = {}, 0
    for name, shape in layout:
        size = int(np.prod(shape))
        out[name] = ad.reshape(ad.gather(x, np.arange(start, start + size)), shape)
        start += size
    return out


def _flatten(store):
    layout = [(name, t.shape) for name, t in store.items()]
    return layout, np.concatenate([t.value.ravel() for _, t in store.items()])


def encoder_case(kind, layers, readout="mean", projection=False, dim=4):
    """Gradient of a weighted node + graph embedding w.r.t. every encoder parameter."""
    def build(rng):
        cfg = EncoderConfig(kind, layers, dim, readout, projection)
        g = small_graph(rng)
        views = [View("original", g, 0, np.arange(g.num_nodes))]
        if kind in ("gcn", "gin", "gat"):
            views.append(diffusion_view(g, 0.2))
        store = encoders.init_params(cfg, ad.ParamStore(), g.feat_dim, g.num_nodes, rng)
        # lift biases off zero so relu inputs are generic
        for name, t in store.items():
            t.value = t.value + 0.1 * rng.standard_normal(t.shape)
            # GAT's a_dst gradient is exactly zero when every logit of a neighbourhood
            # sits on one side of the LeakyReLU kink (softmax shift invariance), and
            # finite differences then only see rounding noise; a smaller a_dst keeps
            # the logits straddling the kink so the point is generic
            if name.endswith("a_dst"):
                t.value = 0.1 * t.value
        layout, point = _flatten(store)
        n_total = sum(v.num_nodes for v in views)
        w_nodes = rng.standard_normal((n_total, dim))
        w_graph = rng.standard_normal((len(views), dim))

        def fn(x):
            params = _unflatten(x, layout)
            table = encoders.encode_nodes(cfg, params, views)
            nodes = encoders.project(table.node_embeddings, params, projection)
            loss = ad.reduce_sum(ad.mul(nodes, w_nodes))
            if readout != "none":
                graph = encoders.project(encoders.readout(table, readout, params), params, projection)
                loss = ad.add(loss, ad.reduce_sum(ad.mul(graph, w_graph)))
            return loss
        return fn, point
    return build


def projection_case(rng):
    cfg = EncoderConfig("mlp", 1, 4, "none", True)
    store = encoders.init_params(cfg, ad.ParamStore(), 3, 0, rng)
    emb = rng.standard_normal((5, 4))
    layout, point = _flatten(store)
    w = rng.standard_normal((5, 4))
    return (lambda x: ad.reduce_sum(ad.mul(encoders.project(emb, _unflatten(x, layout), True), w))), point


def discriminator_case(kind, wrt):
    def build(rng):
        a = rng.standard_normal((6, 4))
        c = rng.standard_normal((6, 4))
        wmat = rng.standard_normal((4, 4))
        w = rng.standard_normal((6, 1))

        def fn(t):
            args = {"a": a, "c": c, "W": wmat}
            args[wrt] = t
            disc = DiscriminatorConfig(kind, args["W"] if kind == "bilinear" else None)
            return ad.reduce_sum(ad.mul(contrast.score(disc, args["a"], args["c"]), w))
        return fn, {"a": a, "c": c, "W": wmat}[wrt]
    return build


def _col(t, j):
    return ad.reshape(ad.gather(ad.transpose(t), np.array([j])), (t.shape[0], 1))


def _cols(t, lo, hi):
    return ad.transpose(ad.gather(ad.transpose(t), np.arange(lo, hi)))


def _infonce_explicit(rng):
    point = rng.standard_normal((5, 4))
    return (lambda t: contrast.estimate_infonce(ScoredBatch(_col(t, 0), _cols(t, 1, 4)))), point


def _infonce_in_batch(rng):
    point = rng.standard_normal((5, 5))
    mask = ~np.eye(5, dtype=bool)
    mask[0, 3] = False

    def fn(t):
        diag = ad.reshape(ad.gather(ad.reshape(t, (25, 1)), np.arange(0, 25, 6)), (5, 1))
        return contrast.estimate_infonce(ScoredBatch(diag, matrix=t, negative_mask=mask,
                                                     pair_anchor=np.arange(5)))
    return fn, point


def _jsd(rng):
    point = rng.standard_normal((5, 4))
    return (lambda t: contrast.estimate_jsd(ScoredBatch(_col(t, 0), _cols(t, 1, 4)))), point


ESTIMATOR_CASES = {
    "jsd": _jsd,
    "infonce[explicit]": _infonce_explicit,
    "infonce[in-batch]": _infonce_in_batch,
}

DISCRIMINATOR_CASES = {
    f"{kind}[{wrt}]": discriminator_case(kind, wrt)
    for kind in ("inner", "bilinear") for wrt in ("a", "c", "W") if not (kind == "inner" and wrt == "W")
}


def encoder_cases():
    readouts = ["mean", "sum", "jknet", "none"]
    cases = {}
    for kind in encoders.ENCODERS:
        for layers in (1, 2, 3, 4):
            readout = readouts[(layers - 1) % 4]
            cases[f"{kind}-L{layers}-{readout}"] = encoder_case(kind, layers, readout)
    return cases


def max_error(build, points=20, seed=0, max_tries=200):
    """(largest grad_check error, redrawn points) over ``points`` seeded, non-degenerate points.

    A point is redrawn when a relu-type input lies within KINK_MARGIN of its
    kink, or when some coordinate that both the analytic and the numeric side
    put below ZERO_NOISE misses TOL. For such coordinates the central
    difference is dominated by rounding noise, so its relative error says
    nothing about the analytic gradient. A wrong analytic gradient still
    fails, because the numeric side is then large or the error shows up in
    the well-resolved coordinates.
    """
    rng = np.random.default_rng(seed)
    worst, used, tries = 0.0, 0, 0
    while used < points:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could only place {used} non-degenerate points")
        fn, point = build(rng)
        probe = fn(Tensor(point, requires_grad=True))
        if ad.kink_distance(probe) < KINK_MARGIN:
            continue
        analytic, numeric = ad.gradient_pair(fn, point)
        both_zero = (np.abs(analytic) < ZERO_NOISE) & (np.abs(numeric) < ZERO_NOISE)
        coord_err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        if np.any(both_zero & (coord_err >= TOL)):
            continue
        worst = max(worst, ad.relative_error(analytic, numeric))
        used += 1
    return worst, tries - used
