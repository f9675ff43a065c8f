"""Finite-difference checks for every primitive, every block and the end-to-end model."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import CheckReport, Tensor, finite_difference_check
from .blocks import (LPI, XCA, Attention, DecoderLayer, EncoderLayer, GridShape, Init)
from .data import KeypointInstance
from .matching import PredictionSet, batch_set_loss, hungarian, match_cost
from .model import ModelConfig, PoseModel

STEP = 1e-5
TOLERANCE = 1e-4
SCOPES = ("primitives", "blocks", "model")

MICRO_CONFIG = dict(width=32, height=32, patch_size=16, d_model=16, n_heads=2,
                    encoder_depth=1, decoder_depth=1, num_queries=4, num_joints=3,
                    vab_depth=1, conv_channels=(4, 8, 8, 8))


def _weighted(fn: Callable[..., Tensor], weights: np.ndarray) -> Callable[..., Tensor]:
    """Scalarize a tensor-valued function with fixed random weights."""
    w = Tensor(weights)
    return lambda *args: ad.sum_(ad.mul(fn(*args), w))


def _check_inputs(name: str, fn: Callable[..., Tensor], inputs: list[np.ndarray],
                  rng: np.random.Generator, differentiable: Iterable[int] | None = None,
                  max_probes: int | None = None) -> list[CheckReport]:
    """Check d(sum(w * fn(inputs)))/d(input_i) for each differentiable input."""
    tensors = [Tensor(x) for x in inputs]
    out_shape = fn(*tensors).shape
    f_all = _weighted(fn, rng.standard_normal(out_shape))
    reports = []
    idx = range(len(inputs)) if differentiable is None else differentiable
    for i in idx:
        def f(x, i=i):
            args = list(tensors)
            args[i] = x
            return f_all(*args)
        label = name if len(inputs) == 1 else f"{name}[arg{i}]"
        reports.append(finite_difference_check(f, tensors[i], STEP, TOLERANCE, max_probes,
                                               rng, label))
    return reports


def primitive_cases(rng: np.random.Generator, small: bool = False):
    """``(name, fn, inputs, differentiable input indices)`` for every primitive."""
    n = 2 if small else 3
    r = lambda *s: rng.standard_normal(s)
    away = lambda *s: r(*s) + np.sign(r(*s)) * 0.5  # keeps |a - b| clear of the kink
    targets = rng.integers(0, 5, size=(n, 4))
    idx = rng.integers(0, 6, size=(n, 3))
    return [
        ("add", lambda a, b: ad.add(a, b), [r(n, 4), r(4)], None),
        ("sub", lambda a, b: ad.sub(a, b), [r(n, 1, 4), r(n, 3, 1)], None),
        ("mul", lambda a, b: ad.mul(a, b), [r(n, 4), r(n, 1)], None),
        ("scale", lambda a: ad.scale(a, -1.7), [r(n, 4)], None),
        ("matmul", lambda a, b: ad.matmul(a, b), [r(2, n, 4), r(4, 5)], None),
        ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), [r(n, 4, 2)], None),
        ("reshape", lambda a: ad.reshape(a, (4, n * 2)), [r(n, 8)], None),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [r(n, 2), r(n, 3)], None),
        ("slice", lambda a: ad.slice_(a, (slice(1, None), slice(None, None, 2))), [r(n, 5)], None),
        ("softmax", lambda a: ad.softmax(a, axis=0), [r(n, 4)], None),
        ("layer_norm", lambda a: ad.layer_norm(a), [r(n, 6)], None),
        ("gelu", ad.gelu, [r(n, 5) * 1.5], None),
        ("sigmoid", ad.sigmoid, [r(n, 5) * 3], None),
        ("exp", ad.exp, [r(n, 4)], None),
        ("sum", lambda a: ad.sum_(a, axis=1), [r(n, 4)], None),
        ("mean", lambda a: ad.mean(a, axis=0, keepdims=True), [r(n, 4)], None),
        ("l2_normalize", lambda a: ad.l2_normalize(a, axis=-1), [r(n, 5)], None),
        ("depthwise_conv2d", lambda x, w, b: ad.depthwise_conv2d(x, w, b, stride=1),
         [r(1, 4, 5, 2), r(3, 3, 2), r(2)], None),
        ("depthwise_conv2d_s2", lambda x, w, b: ad.depthwise_conv2d(x, w, b, stride=2),
         [r(2, 5, 4, 3), r(3, 3, 3), r(3)], None),
        ("lookup", lambda t: ad.lookup(t, idx), [r(6, 4)], None),
        ("l1_distance", lambda a, b: ad.l1_distance(a, b), [r(n, 4), away(n, 4)], None),
        ("softmax_cross_entropy", lambda a: ad.softmax_cross_entropy(a, targets), [r(n, 4, 5) * 2], None),
    ]


def check_primitives(seed: int = 0) -> list[CheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    with ad.precision("float64"):
        for name, fn, inputs, diff in primitive_cases(rng):
            reports += _check_inputs(name, fn, inputs, rng, diff)
    return reports


def check_blocks(seed: int = 0) -> list[CheckReport]:
    rng = np.random.default_rng(seed)
    reports = []
    with ad.precision("float64"):
        init = Init(rng, np.float64)
        d, h = 8, 2
        attn = Attention(d, h, init)
        cov = XCA(d, h, init)
        lpi = LPI(d, init)
        enc_tok = EncoderLayer(d, h, init, "token")
        enc_ch = EncoderLayer(d, h, init, "channel")
        dec = DecoderLayer(d, h, init)
        qpos = Tensor(rng.standard_normal((3, d)))
        mpos = Tensor(rng.standard_normal((1, 7, d)))
        grid = GridShape(2, 3)
        x = rng.standard_normal((2, 7, d))
        reports += _check_inputs("self_attention", lambda t: attn(t, t, t), [x], rng)
        reports += _check_inputs("cross_attention", lambda q, m: attn(q, m, m),
                                 [rng.standard_normal((2, 3, d)), x], rng)
        reports += _check_inputs("xca", cov, [x], rng)
        reports += _check_inputs("local_patch_interaction", lambda t: lpi(t, grid),
                                 [rng.standard_normal((2, 6, d))], rng)
        reports += _check_inputs("encoder_layer[token]", lambda t: enc_tok(t, grid), [x], rng)
        reports += _check_inputs("encoder_layer[channel]", lambda t: enc_ch(t, grid), [x], rng)
        reports += _check_inputs("decoder_layer", lambda q, m: dec(q, m, qpos, mpos),
                                 [rng.standard_normal((2, 3, d)), x], rng)
    return reports


def micro_instances(rng: np.random.Generator, batch: int, k: int) -> list[KeypointInstance]:
    out = []
    for s in range(batch):
        vis = np.full(k, 2)
        vis[rng.integers(0, k)] = 0 if s % 2 else 2
        out.append(KeypointInstance(rng.uniform(0.1, 0.9, (k, 2)), vis, area=400.0, image_id=s))
    return out


def model_loss_fn(model: PoseModel, instances):
    """Image -> scalar set loss with the matching frozen at the starting point."""
    def loss(images: Tensor, assignments=None) -> Tensor:
        logits, coords = model(images)
        return batch_set_loss(logits, coords, instances, assignments).total

    def assign(images: np.ndarray):
        with ad.no_grad():
            logits, coords = model(images)
        return [hungarian(match_cost(PredictionSet(l, c), g))
                for l, c, g in zip(logits.data, coords.data, instances)]

    return loss, assign


def check_model(seed: int = 0, variants=("deit", "xcit", "conv-baseline", "vab"),
                param_probes: int = 3, image_probes: int | None = None) -> list[CheckReport]:
    """End-to-end image -> loss gradient on the micro configuration, plus sampled parameters."""
    rng = np.random.default_rng(seed)
    reports = []
    with ad.precision("float64"):
        for variant in variants:
            cfg = ModelConfig(variant=variant, seed=seed, **MICRO_CONFIG)
            model = PoseModel(cfg, dtype=np.float64)
            instances = micro_instances(rng, 2, cfg.num_joints)
            images = rng.standard_normal((2, cfg.height, cfg.width, 3))
            loss, assign = model_loss_fn(model, instances)
            frozen = assign(images)
            probes = image_probes if variant in ("deit", "xcit") else (image_probes or 768)
            reports.append(finite_difference_check(
                lambda x: loss(x, frozen), Tensor(images), STEP, TOLERANCE, probes, rng,
                f"model[{variant}] image"))
            image = Tensor(images)
            for name, p in model.named_parameters():
                # softmax cancels a bias shared by every key: true gradient is zero,
                # so only round-off would be compared
                if _is_token_key_bias(model, name):
                    continue
                reports.append(finite_difference_check(
                    lambda _: loss(image, frozen), p, STEP, TOLERANCE, param_probes, rng,
                    f"model[{variant}] {name}"))
    return reports


def _is_token_key_bias(model: PoseModel, name: str) -> bool:
    if not name.endswith(".k.bias"):
        return False
    owner = model
    for part in name.split(".")[:-2]:
        owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
    return isinstance(owner, Attention)


def run_suite(scope: str = "all", seed: int = 0) -> list[CheckReport]:
    if scope not in SCOPES + ("all",):
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    reports = []
    if scope in ("all", "primitives"):
        reports += check_primitives(seed)
    if scope in ("all", "blocks"):
        reports += check_blocks(seed)
    if scope in ("all", "model"):
        reports += check_model(seed)
    return reports
