"""Execution of trainable units and heads: forward, backward, local and BP steps.

Memory accounting policy for a training step: the step registers the
parameters, optimizer state, parameter gradients and every intermediate it
produces, and keeps all of them live until the step ends. The step input is
registered by the caller. Only the unit's output survives the step.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .arch import CONV_STAGE, AuxiliarySpec, LayerParams, LayerSpec
from .errors import NumericError
from .meter import MemoryMeter, NullMeter, StepTensors
from .optim import SgdState, sgd_step

_NULL = NullMeter()


def unit_forward(layer: LayerSpec, params: dict, x, tape: StepTensors | None = None):
    """``relu(pool(conv(x)))`` for conv stages; a basic residual block otherwise.

    Returns ``(output, cache)``; ``cache`` feeds ``unit_backward``.
    """
    if layer.kind == CONV_STAGE:
        c = ops.conv2d_forward(x, params["w"], params["b"], 1, 1)
        if layer.downsample:
            p, ctx = ops.pool_forward(c, "max", 2, 2, 2)
        else:
            p, ctx = c, None
        a = ops.relu_forward(p)
        if tape is not None:
            tape.add(c, a)
            if ctx is not None:
                tape.add(p, ctx.argmax)
        return a, (x, c, p, ctx)

    stride = 2 if layer.downsample else 1
    h1 = ops.conv2d_forward(x, params["w1"], params["b1"], stride, 1)
    r1 = ops.relu_forward(h1)
    h2 = ops.conv2d_forward(r1, params["w2"], params["b2"], 1, 1)
    sc = ops.conv2d_forward(x, params["wp"], params["bp"], stride, 0) if layer.has_projection else x
    z = h2 + sc
    a = ops.relu_forward(z)
    if tape is not None:
        tape.add(h1, r1, h2, z, a)
        if layer.has_projection:
            tape.add(sc)
    return a, (x, h1, r1, z)


def unit_backward(layer: LayerSpec, params: dict, cache, grad_out, need_input_grad: bool = False, tape=None):
    """Return ``(grad_input or None, [param grads in params order])``."""
    if layer.kind == CONV_STAGE:
        x, c, p, ctx = cache
        gp = ops.relu_backward(p, grad_out)
        gc = ops.pool_backward(ctx, gp) if ctx is not None else gp
        gx, gw, gb = ops.conv2d_backward(x, params["w"], gc, 1, 1, need_input_grad)
        if tape is not None:
            tape.add(gp, gx, gw, gb)
            if ctx is not None:
                tape.add(gc)
        return gx, [gw, gb]

    x, h1, r1, z = cache
    stride = 2 if layer.downsample else 1
    gz = ops.relu_backward(z, grad_out)
    gr1, gw2, gb2 = ops.conv2d_backward(r1, params["w2"], gz, 1, 1, True)
    gh1 = ops.relu_backward(h1, gr1)
    gx, gw1, gb1 = ops.conv2d_backward(x, params["w1"], gh1, stride, 1, need_input_grad)
    grads = {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}
    if tape is not None:
        tape.add(gz, gr1, gh1, gx, gw1, gb1, gw2, gb2)
    if layer.has_projection:
        gxp, gwp, gbp = ops.conv2d_backward(x, params["wp"], gz, stride, 0, need_input_grad)
        grads.update({"wp": gwp, "bp": gbp})
        if tape is not None:
            tape.add(gxp, gwp, gbp)
        if need_input_grad:
            gx = gx + gxp
    elif need_input_grad:
        gx = gx + gz
    if need_input_grad and tape is not None:
        tape.add(gx)
    return gx, [grads[name] for name in params]


def head_forward(spec: AuxiliarySpec, params: dict, a, tape: StepTensors | None = None):
    """Auxiliary classifier (conv, ReLU, adaptive avg pool, linear) or terminal head."""
    if spec.has_conv:
        h = ops.conv2d_forward(a, params["w"], params["b"], 1, 1)
        r = ops.relu_forward(h)
    else:
        h = None
        r = a
    q = ops.adaptive_avg_pool_forward(r, spec.pool_target)
    flat = q.reshape(q.shape[0], -1)
    logits = ops.linear_forward(flat, params["fc_w"], params["fc_b"])
    if tape is not None:
        tape.add(q, logits)
        if spec.has_conv:
            tape.add(h, r)
    return logits, (a, h, r, flat)


def head_backward(spec: AuxiliarySpec, params: dict, cache, grad_logits, tape=None):
    a, h, r, flat = cache
    gflat, gfw, gfb = ops.linear_backward(flat, params["fc_w"], grad_logits)
    gr = ops.adaptive_avg_pool_backward(r.shape, gflat.reshape(r.shape[0], r.shape[1], *spec.pool_target))
    if tape is not None:
        tape.add(gflat, gr, gfw, gfb)
    if not spec.has_conv:
        return gr, [gfw, gfb]
    gh = ops.relu_backward(h, gr)
    ga, gw, gb = ops.conv2d_backward(a, params["w"], gh, 1, 1, True)
    if tape is not None:
        tape.add(gh, ga, gw, gb)
    return ga, [gw, gb, gfw, gfb]


def _check_loss(loss: float, layer_number: int) -> None:
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} at layer {layer_number}")


def local_step(
    layer: LayerSpec,
    lp: LayerParams,
    x,
    y,
    unit_opt: SgdState,
    head_opt: SgdState,
    meter: MemoryMeter | None = None,
    layer_number: int = 1,
):
    """One local-learning update of a unit and its head on a batch.

    Forward through the unit, predict with the head, take the cross-entropy
    loss, back-propagate into the unit only, and apply SGD to both. Returns
    ``(loss, activation)`` where the activation is the unit output computed
    before the update; it stays registered with the meter for the caller.
    """
    meter = meter or _NULL
    tape = StepTensors(meter)
    tape.add(*lp.unit_list(), *lp.head_list(), *unit_opt.velocity, *head_opt.velocity)
    done = False
    try:
        a, ucache = unit_forward(layer, lp.unit, x, tape)
        logits, hcache = head_forward(lp.head_spec, lp.head, a, tape)
        loss, glogits = ops.softmax_cross_entropy(logits, y)
        tape.add(glogits)
        _check_loss(loss, layer_number)
        ga, head_grads = head_backward(lp.head_spec, lp.head, hcache, glogits, tape)
        _, unit_grads = unit_backward(layer, lp.unit, ucache, ga, False, tape)
        for g in head_grads + unit_grads:
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient at layer {layer_number}")
        sgd_step(lp.head_list(), head_grads, head_opt)
        sgd_step(lp.unit_list(), unit_grads, unit_opt)
        done = True
    finally:
        if done:
            tape.keep(a)
        tape.release_all()
    return loss, a


def bp_step(layers, params: list[LayerParams], x, y, opts: list[SgdState], meter: MemoryMeter | None = None):
    """One end-to-end backprop update; every activation is retained until the backward pass ends.

    ``opts`` holds one optimizer state per layer covering unit and, for the
    last layer, terminal-head parameters.
    """
    meter = meter or _NULL
    tape = StepTensors(meter)
    for lp, opt in zip(params, opts):
        tape.add(*lp.unit_list(), *lp.head_list(), *opt.velocity)
    try:
        caches = []
        a = x
        for layer, lp in zip(layers, params):
            a, cache = unit_forward(layer, lp.unit, a, tape)
            caches.append(cache)
        last = params[-1]
        logits, hcache = head_forward(last.head_spec, last.head, a, tape)
        loss, glogits = ops.softmax_cross_entropy(logits, y)
        tape.add(glogits)
        _check_loss(loss, len(layers))
        g, head_grads = head_backward(last.head_spec, last.head, hcache, glogits, tape)
        all_grads = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            g, unit_grads = unit_backward(layers[i], params[i].unit, caches[i], g, i > 0, tape)
            all_grads[i] = unit_grads
        all_grads[-1] = all_grads[-1] + head_grads
        for grads in all_grads:
            for gr in grads:
                if not np.all(np.isfinite(gr)):
                    raise NumericError("non-finite gradient during backpropagation")
        for lp, opt, grads in zip(params, opts, all_grads):
            sgd_step(lp.unit_list() + lp.head_list(), grads, opt)
    finally:
        tape.release_all()
    return loss


# Inference ------------------------------------------------------------------


def forward_units(layers, params: list[LayerParams], x, samplewise: bool = True):
    """Forward ``x`` through consecutive units without recording anything.

    With ``samplewise`` each sample is processed on its own, which makes the
    result for a sample independent of which other samples share its batch
    (BLAS kernels choose different code paths for different matrix sizes).
    """
    if not samplewise:
        for layer, lp in zip(layers, params):
            x, _ = unit_forward(layer, lp.unit, x)
        return x
    outs = []
    for i in range(x.shape[0]):
        xi = x[i : i + 1]
        for layer, lp in zip(layers, params):
            xi, _ = unit_forward(layer, lp.unit, xi)
        outs.append(xi)
    return np.concatenate(outs, axis=0)


def head_logits(spec: AuxiliarySpec, params: dict, a, samplewise: bool = True):
    if not samplewise:
        return head_forward(spec, params, a)[0]
    return np.concatenate([head_forward(spec, params, a[i : i + 1])[0] for i in range(a.shape[0])], axis=0)
