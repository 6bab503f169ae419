"""Closed-form FLOPs accounting for one scoring pass over a pool.

Everything is exact Python-int arithmetic; any quantity at or beyond
2^128 raises Overflow. Batch primitives are counted for a symmetric
dual-encoder step (two projections, two normalizations, both logit
directions); per-method totals compose them with per-batch sketch
applications and, for the preconditioned scorer, the per-iteration
k-space solve work plus margin and prototype bookkeeping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, Overflow

_LIMIT = 1 << 128

SKETCH_COSTS = ("countsketch", "sparse-signed", "srht", "dense")

METHOD_NAMES = ("tracin", "trak", "chips")

PRIMITIVE_KEYS = (
    "C_lin",
    "C_norm",
    "C_mm",
    "C_fwd",
    "C_bwd",
    "C_fb",
    "C_jvp",
    "C_proto_eval",
)


def _guard(x: int) -> int:
    if x >= _LIMIT:
        raise Overflow(f"FLOPs count {x} exceeds 128-bit range")
    return x


@dataclass(frozen=True)
class CostModel:
    B_train: int
    B_eval: int
    N_train: int
    N_eval: int
    d_v: int
    d_t: int
    d: int
    k: int
    E: int = 10
    I: int = 5
    sketch_kind: str = "countsketch"
    sparsity_s: int = 4
    c_neg: int = 6

    def __post_init__(self):
        positive = (
            "B_train", "B_eval", "N_eval", "d_v", "d_t", "d", "k", "E", "I",
            "sparsity_s", "c_neg",
        )
        for name in positive:
            val = getattr(self, name)
            if not isinstance(val, int) or val < 1:
                raise ConfigError(f"cost model field {name!r} must be a positive integer, got {val}")
        if not isinstance(self.N_train, int) or self.N_train < 0:
            raise ConfigError(
                f"cost model field 'N_train' must be a non-negative integer, got {self.N_train}"
            )
        if self.sketch_kind not in SKETCH_COSTS:
            raise ConfigError(
                f"cost model field 'sketch_kind' must be one of {SKETCH_COSTS}, "
                f"got {self.sketch_kind!r}"
            )

    @property
    def param_dim(self) -> int:
        return self.d_v * self.d + self.d_t * self.d + 1

    @property
    def n_train(self) -> int:
        return -(-self.N_train // self.B_train)  # ceil

    @property
    def n_eval(self) -> int:
        return -(-self.N_eval // self.B_eval)


def default_model() -> CostModel:
    """Large-scale instantiation behind the documented totals."""
    return CostModel(
        B_train=32768,
        B_eval=3400,
        N_train=24_000_000,
        N_eval=3400,
        d_v=768,
        d_t=512,
        d=512,
        k=4096,
    )


def rp_cost(model: CostModel) -> int:
    """Cost of one sketch application to a param-space vector."""
    P = model.param_dim
    if model.sketch_kind == "countsketch":
        return _guard(2 * P)
    if model.sketch_kind == "sparse-signed":
        return _guard(2 * model.sparsity_s * P)
    if model.sketch_kind == "srht":
        m = 1 << max(1, math.ceil(math.log2(P)))
        return _guard(2 * m * int(math.log2(m)))
    return _guard(2 * model.k * P)  # dense gaussian


def batch_primitives(model: CostModel, B: int) -> dict[str, int]:
    """The per-batch primitive costs at an arbitrary batch size."""
    if B < 1:
        raise ConfigError(f"batch size must be >= 1, got {B}")
    c_lin = 2 * B * (model.d_v + model.d_t) * model.d
    c_norm = 6 * B * model.d
    c_mm = 2 * B * B * model.d
    c_fwd = c_lin + c_norm + 2 * c_mm
    c_bwd = 2 * (c_lin + 2 * c_mm)
    out = {
        "C_lin": c_lin,
        "C_norm": c_norm,
        "C_mm": c_mm,
        "C_fwd": c_fwd,
        "C_bwd": c_bwd,
        "C_fb": c_fwd + c_bwd,
        "C_jvp": 2 * c_fwd,
    }
    for val in out.values():
        _guard(val)
    return out


def primitives(model: CostModel) -> dict[str, int]:
    """Training-batch primitives plus the eval-prototype cost."""
    out = batch_primitives(model, model.B_train)
    ev = batch_primitives(model, model.B_eval)
    out["C_proto_eval"] = _guard(ev["C_lin"] + ev["C_norm"])
    return out


def base_total(model: CostModel) -> int:
    """Shared cost of the preconditioned scorers.

    Eval direction, eval prototypes, one sketched gradient pass over the
    pool, I solve sweeps, and the final scoring pass.
    """
    train = batch_primitives(model, model.B_train)
    evalb = batch_primitives(model, model.B_eval)
    c_rp = rp_cost(model)
    proto = _guard(evalb["C_lin"] + evalb["C_norm"])
    total = (
        model.n_eval * (evalb["C_fb"] + c_rp)
        + proto
        + model.n_train * (train["C_fb"] + c_rp)
        + model.I * model.n_train * (train["C_jvp"] + train["C_fb"] + c_rp)
        + model.n_train * (train["C_jvp"] + train["C_fwd"])
    )
    return _guard(total)


def method_total(model: CostModel, method: str) -> int:
    if method == "tracin":
        train = batch_primitives(model, model.B_train)
        evalb = batch_primitives(model, model.B_eval)
        total = (
            model.n_eval * (evalb["C_fb"] + rp_cost(model))
            + model.n_train * train["C_jvp"]
            + model.E * model.n_train * train["C_fb"]
        )
        return _guard(total)
    if method == "trak":
        return base_total(model)
    if method == "chips":
        delta_neg = model.c_neg * model.k
        delta_margin = 2 * model.B_train * model.B_train
        delta_rel = 4 * model.B_train * model.d
        total = (
            base_total(model)
            + model.I * delta_neg
            + model.n_train * delta_margin
            + model.n_train * delta_rel
        )
        return _guard(total)
    raise ConfigError(f"unknown method {method!r}, expected one of {METHOD_NAMES}")


def format_sci(x: int, sig: int = 7) -> str:
    """Scientific notation with the table's significant figures."""
    return f"{float(x):.{sig - 1}e}"


def cost_table(model: CostModel) -> str:
    """Plain-text table: primitives at both batch sizes, then totals."""
    train = batch_primitives(model, model.B_train)
    evalb = batch_primitives(model, model.B_eval)
    proto = evalb["C_lin"] + evalb["C_norm"]
    lines = [
        f"{'primitive':<14}{'train B=' + str(model.B_train):>22}"
        f"{'eval B=' + str(model.B_eval):>22}",
    ]
    for key in PRIMITIVE_KEYS[:-1]:
        lines.append(f"{key:<14}{train[key]:>22}{evalb[key]:>22}")
    lines.append(f"{'C_proto_eval':<14}{'':>22}{proto:>22}")
    lines.append("")
    lines.append(f"{'method':<14}{'total':>22}{'':>14}")
    for method in METHOD_NAMES:
        total = method_total(model, method)
        lines.append(f"{method:<14}{total:>22}  {format_sci(total)}")
    return "\n".join(lines)
