"""Oracle comparisons shared by the unit tests and the acceptance run; each returns a max error."""
from __future__ import annotations

import numpy as np

from builders import gcn_case, lm_case, mlp_case, trace_and_delta
from dfa_engine.feedback import FeedbackMatrix
from dfa_engine.training import backward_bp, backward_dfa, loss_and_error
from oracles import central_difference, eq3_dense, eq3_graphconv, naive_project, rel_error, torch_region_vjp


def dfa_mlp_oracle_error(seed, depth):
    net, x, y = mlp_case(seed, depth)
    trace, delta, _ = trace_and_delta(net, x, y)
    grads = backward_dfa(net, trace, delta)
    worst, h_prev = 0.0, x
    for idx, region in enumerate(net.regions):
        step = region.steps[0]
        a = trace.caches[idx][0][1]
        if idx == len(net.regions) - 1:
            B = np.eye(delta.shape[1])  # the top layer receives delta_ay itself
        else:
            B = net.feedback[region.name].matrix
        gw, gb = eq3_dense(B, delta, a, h_prev, step.layer.activation.kind)
        worst = max(worst, np.max(np.abs(grads[f"{region.name}.weight"] - gw)),
                    np.max(np.abs(grads[f"{region.name}.bias"] - gb)))
        h_prev = trace.outputs[idx]
    return worst


def dfa_gcn_oracle_error(seed):
    net, x, y, mask = gcn_case(seed)
    trace, delta, _ = trace_and_delta(net, x, y, mask)
    grads = backward_dfa(net, trace, delta)
    worst, h_prev = 0.0, x
    for idx, region in enumerate(net.regions):
        layer = region.steps[0].layer
        a = trace.caches[idx][0][1]
        B = None if idx == len(net.regions) - 1 else net.feedback[region.name].matrix
        gw, gb = eq3_graphconv(B, delta, a, h_prev, layer.normalized_adjacency, layer.activation.kind)
        worst = max(worst, np.max(np.abs(grads[f"{region.name}.weight"] - gw)),
                    np.max(np.abs(grads[f"{region.name}.bias"] - gb)))
        h_prev = trace.outputs[idx]
    return worst


def dfa_transformer_oracle_error(seed, granularity):
    net, x, y = lm_case(seed, granularity=granularity)
    trace, delta, _ = trace_and_delta(net, x, y)
    grads = backward_dfa(net, trace, delta)
    flat = delta.reshape(-1, delta.shape[-1])
    worst, covered = 0.0, set()
    for idx, region in enumerate(net.regions):
        if idx == len(net.regions) - 1:
            signal = delta
        else:
            signal = naive_project(net.feedback[region.name].matrix, flat).reshape(trace.outputs[idx].shape)
        for name, g in torch_region_vjp(net, trace, idx, signal, n_heads=2).items():
            worst = max(worst, np.max(np.abs(grads[name] - g)))
            covered.add(name)
    assert covered == set(net.params)
    return worst


def _loss_of(net, x, y, mask=None):
    return loss_and_error(net.loss, net.predict(x), y, mask)[0]


def bp_fd_error(net, x, y, mask=None):
    """Largest relative error between BP gradients and central differences over every parameter."""
    trace, delta, _ = trace_and_delta(net, x, y, mask)
    grads = backward_bp(net, trace, delta)
    assert set(grads) == set(net.params)
    return max(rel_error(grads[name], central_difference(lambda: _loss_of(net, x, y, mask), p))
               for name, p in net.params.items())


def transpose_collapse_error(seed, activation):
    net, x, y = mlp_case(seed, depth=2, activation=activation)
    net.feedback["dense0"] = FeedbackMatrix.fixed(net.params["dense1.weight"].T, "dense0")
    trace, delta, _ = trace_and_delta(net, x, y)
    dfa, bp = backward_dfa(net, trace, delta), backward_bp(net, trace, delta)
    return max(np.max(np.abs(dfa[name] - bp[name])) for name in net.params)
