"""Finite-difference verification suite.

Runs every primitive through :func:`sepkit.primitives.grad_check` on small
randomized shapes, then checks the whole pipeline (forward + combined loss
with the mel embedder in the loop) at a tiny configuration. Exhaustive
coordinate probing for the primitives; deterministic subsampling for the
composite checks, where exhaustive probing is infeasible.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch

from .data import SyntheticSpeaker, mix, synth_utterance
from .data import NoiseSpec
from .objectives import MelStatEmbedder, loss_with_permutation, total_loss
from .primitives import (
    GradReport,
    conv1d,
    depthwise_conv1d,
    glu,
    global_avg_pool_time,
    grad_check,
    layer_norm,
    linear,
    mhsa,
    prelu,
    swish,
    transposed_conv1d,
)
from .separator import (
    ConformerConvModule,
    SEConformerLayer,
    Separator,
    SeparatorConfig,
    TransformerLayer,
    se_block,
)

PRIMITIVE_TOL = 1e-5
LAYER_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _module_closure(module: torch.nn.Module, *args: torch.Tensor, seed: int = 0):
    """Closure over (inputs..., params...) via functional_call.

    Parameters are re-randomized first: fresh-init values sit at special
    points (layer-norm gamma=1 makes a sum-of-outputs scalar blind to
    everything upstream of a final norm).
    """
    module = module.double()
    g = torch.Generator().manual_seed(seed + 9173)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(0.5 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    names = [n for n, _ in module.named_parameters()]
    params = [p.detach() for _, p in module.named_parameters()]
    n_args = len(args)

    def closure(*tensors):
        inputs = tensors[:n_args]
        override = dict(zip(names, tensors[n_args:]))
        return torch.func.functional_call(module, override, inputs)

    return closure, [*args, *params]


def primitive_grad_reports(seed: int = 0, h: float = 1e-5) -> list[GradReport]:
    """One report per primitive, all coordinates probed."""
    g = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    reports = []
    reports.append(
        grad_check(
            lambda x, w, b: conv1d(x, w, b, stride=2),
            [rand(2, 9), rand(3, 2, 3), rand(3)],
            h=h,
            op_name="conv1d",
        )
    )
    reports.append(
        grad_check(
            lambda x, w, b: transposed_conv1d(x, w, b, stride=2),
            [rand(3, 5), rand(3, 2, 4), rand(2)],
            h=h,
            op_name="transposed_conv1d",
        )
    )
    reports.append(
        grad_check(
            linear, [rand(4, 6), rand(5, 6), rand(5)], h=h, op_name="linear"
        )
    )
    reports.append(
        grad_check(
            lambda x, gm, bt: layer_norm(x, gm, bt, eps=1e-6),
            [rand(3, 7), rand(7), rand(7)],
            h=h,
            op_name="layer_norm",
        )
    )
    # key bias omitted: softmax makes it a no-op, so its gradient is exactly
    # zero and finite differences would only measure rounding noise there
    reports.append(
        grad_check(
            lambda x, wq, wk, wv, wo, bq, bv, bo: mhsa(
                x, wq, wk, wv, wo, bq, None, bv, bo, heads=2
            ),
            [rand(5, 8)] + [rand(8, 8) for _ in range(4)] + [rand(8) for _ in range(3)],
            h=h,
            op_name="mhsa",
        )
    )
    reports.append(
        grad_check(
            depthwise_conv1d, [rand(3, 8), rand(3, 3)], h=h, op_name="depthwise_conv1d"
        )
    )
    # smooth activations; kinked ones (relu/prelu/glu) use offset inputs so no
    # coordinate sits on the kink
    reports.append(grad_check(swish, [rand(4, 4)], h=h, op_name="swish"))
    reports.append(grad_check(torch.sigmoid, [rand(4, 4)], h=h, op_name="sigmoid"))
    reports.append(grad_check(torch.tanh, [rand(4, 4)], h=h, op_name="tanh"))
    reports.append(
        grad_check(
            lambda x, s: prelu(x + 0.3, s),
            [rand(4, 4), rand(1)],
            h=h,
            op_name="prelu",
        )
    )
    reports.append(
        grad_check(lambda x: glu(x + 0.2, dim=-1), [rand(3, 6)], h=h, op_name="glu")
    )
    reports.append(
        grad_check(
            global_avg_pool_time, [rand(4, 9)], h=h, op_name="global_avg_pool_time"
        )
    )
    reports.append(
        grad_check(
            se_block, [rand(4, 6), rand(2, 4), rand(4, 2)], h=h, op_name="se_block"
        )
    )
    return reports


def layer_grad_reports(seed: int = 0, h: float = 1e-5) -> list[GradReport]:
    """Composite layers; coordinates subsampled to keep runtime bounded."""
    g = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    torch.manual_seed(seed)
    reports = []
    closure, inputs = _module_closure(ConformerConvModule(8, 3), rand(6, 8))
    reports.append(
        grad_check(
            closure, inputs, h=h, op_name="conformer_conv_module",
            max_coords_per_input=24, seed=seed,
        )
    )
    closure, inputs = _module_closure(
        SEConformerLayer(8, heads=2, conv_kernel=3, ffn_mult=2, se_reduction=4),
        rand(5, 8),
    )
    reports.append(
        grad_check(
            closure, inputs, h=h, op_name="se_conformer_layer",
            max_coords_per_input=10, seed=seed,
        )
    )
    closure, inputs = _module_closure(TransformerLayer(8, heads=2, ffn_mult=2), rand(5, 8))
    reports.append(
        grad_check(
            closure, inputs, h=h, op_name="transformer_layer",
            max_coords_per_input=10, seed=seed,
        )
    )
    return reports


def tiny_config() -> SeparatorConfig:
    """Smallest full pipeline used for the whole-network check."""
    return SeparatorConfig(
        channels=8,
        chunk_size=10,
        num_blocks=2,
        intra_layers=2,
        inter_layers=2,
        attention_heads=2,
        intra_kernels=(3, 5),
        se_reduction=4,
        ffn_mult=2,
        num_speakers=2,
    )


def _tiny_mixture(num_samples: int, sample_rate: int = 8000):
    low = SyntheticSpeaker("low_00", "low_f0", 120.0, 1.5, [1.0, 0.5, 0.33])
    high = SyntheticSpeaker("high_00", "high_f0", 210.0, 1.5, [1.0, 0.45, 0.3])
    dur = num_samples / sample_rate
    s1 = synth_utterance(low, dur, seed=11, sample_rate=sample_rate)
    s2 = synth_utterance(high, dur, seed=22, sample_rate=sample_rate)
    mixture, targets, _ = mix([s1, s2], [0.0, 0.0], NoiseSpec("none"), seed=33)
    return mixture, targets


def end_to_end_grad_report(
    h: float = 1e-5,
    coords_per_tensor: int = 3,
    seed: int = 0,
    num_samples: int = 720,
    cfg: Optional[SeparatorConfig] = None,
) -> GradReport:
    """Gradient of the combined training loss w.r.t. every parameter tensor
    and the mixture input, probed at a few coordinates each."""
    torch.manual_seed(seed)
    model = Separator(cfg or tiny_config()).double()
    embedder = MelStatEmbedder()
    mixture, targets = _tiny_mixture(num_samples)
    refs = [t.samples for t in targets]
    names = [n for n, _ in model.named_parameters()]
    params = [p.detach() for _, p in model.named_parameters()]

    # freeze the PIT assignment at the base point: the argmax is piecewise
    # constant and near-ties would otherwise flip between probe points
    with torch.no_grad():
        base_est = model(mixture.samples.unsqueeze(0))[0]
        base = total_loss(refs, [base_est[0], base_est[1]], embedder, alpha=1.0)
    perm = base.pit.permutation

    def closure(mix_in, *param_tensors):
        override = dict(zip(names, param_tensors))
        est = torch.func.functional_call(model, override, (mix_in.unsqueeze(0),))[0]
        lb = loss_with_permutation(refs, [est[0], est[1]], embedder, perm, alpha=1.0)
        return lb.total

    return grad_check(
        closure,
        [mixture.samples, *params],
        h=h,
        op_name="separate_forward+total_loss",
        max_coords_per_input=coords_per_tensor,
        seed=seed,
        refine_h=(1e-6, 1e-7),
    )


def frontend_roundtrip_grad_report(h: float = 1e-5, seed: int = 0) -> GradReport:
    """segment -> overlap_add is the identity, so its Jacobian is too."""
    from .frontend import overlap_add, segment

    g = torch.Generator().manual_seed(seed)
    x = torch.randn(3, 17, generator=g, dtype=torch.float64)
    return grad_check(
        lambda t: overlap_add(segment(t, 4)),
        [x],
        h=h,
        op_name="overlap_add(segment)",
    )


def run_suite(log=print) -> bool:
    """Full verification sweep; prints one line per check."""
    ok = True
    for report in primitive_grad_reports():
        good = report.ok(PRIMITIVE_TOL)
        ok &= good
        log(
            f"[{'PASS' if good else 'FAIL'}] {report.op_name}: "
            f"max rel err {report.max_rel_error:.3e} (tol {PRIMITIVE_TOL:.0e})"
        )
    report = frontend_roundtrip_grad_report()
    good = report.ok(PRIMITIVE_TOL)
    ok &= good
    log(
        f"[{'PASS' if good else 'FAIL'}] {report.op_name}: "
        f"max rel err {report.max_rel_error:.3e} (tol {PRIMITIVE_TOL:.0e})"
    )
    for report in layer_grad_reports():
        good = report.ok(LAYER_TOL)
        ok &= good
        log(
            f"[{'PASS' if good else 'FAIL'}] {report.op_name}: "
            f"max rel err {report.max_rel_error:.3e} (tol {LAYER_TOL:.0e})"
        )
    report = end_to_end_grad_report()
    good = report.ok(END_TO_END_TOL)
    ok &= good
    log(
        f"[{'PASS' if good else 'FAIL'}] {report.op_name}: "
        f"max rel err {report.max_rel_error:.3e} (tol {END_TO_END_TOL:.0e})"
    )
    return ok
