"""Directional subspace losses, single-domain and hybrid.

For a target embedding ``f_t`` and a domain subspace with projection
``f*``:

* distance loss: ``|f* - f_t|^2``;
* direction loss: ``1 - cos(f_t - f_s, f* - f_t)``, with both norms
  smoothed as ``sqrt(|v|^2 + eps^2)`` so the loss stays finite when a
  displacement vanishes.

The hybrid forms weight several domains: distance terms add with
weights ``alpha_i``; the direction loss compares the source-to-target
displacement against the weighted sum of per-domain perpendiculars.
The full objective sums ``dist + lambda * direct`` over the encoder
ensemble and averages over a latent batch.  Gradients flow through the
projection unless ``detach_projection`` is set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ConfigError, DimensionError
from .subspace import DomainSubspace, project
from .worlds import (
    EncoderSpec,
    GeneratorParams,
    encode,
    encode_var,
    generator_forward_var,
    generator_param_vars,
)

Array = np.ndarray

#: Smoothing constant for the direction-loss norms.
NORM_EPS = 1e-8


@dataclass(frozen=True)
class DomainWeight:
    domain_id: str
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0.0:
            raise ConfigError(f"weight for {self.domain_id!r} must be positive")

    def to_json_dict(self) -> dict:
        return {"domain_id": self.domain_id, "alpha": self.alpha}

    @classmethod
    def from_json_dict(cls, data: dict) -> "DomainWeight":
        try:
            return cls(domain_id=data["domain_id"], alpha=float(data["alpha"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed weight entry: {exc}") from exc


@dataclass(frozen=True)
class EncoderTerms:
    encoder_id: str
    dist_term: float
    direct_term: float


@dataclass(frozen=True)
class LossBreakdown:
    """Objective value with its per-encoder decomposition.

    ``total == sum(dist_term + lam * direct_term)`` over the encoders;
    terms an ablation removed from the objective are recorded as 0.
    """

    total: float
    per_encoder: tuple[EncoderTerms, ...]
    lam: float

    def to_json_dict(self) -> dict:
        return {
            "total": self.total,
            "lambda": self.lam,
            "per_encoder": [
                {"encoder_id": t.encoder_id, "dist": t.dist_term, "direct": t.direct_term}
                for t in self.per_encoder
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "LossBreakdown":
        try:
            return cls(
                total=float(data["total"]),
                per_encoder=tuple(
                    EncoderTerms(t["encoder_id"], float(t["dist"]), float(t["direct"]))
                    for t in data["per_encoder"]
                ),
                lam=float(data["lambda"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed loss record: {exc}") from exc


def _projection_var(f_t: Var, subspace: DomainSubspace, detach: bool) -> Var:
    tape = f_t.tape
    if f_t.shape != subspace.mean.shape:
        raise DimensionError(
            f"embedding has shape {f_t.shape}, subspace lives in {subspace.mean.shape}"
        )
    if detach:
        return tape.constant(project(subspace, f_t.value))
    mean = tape.constant(subspace.mean)
    centered = ad.sub(f_t, mean)
    coords = ad.matvec(tape.constant(subspace.basis.T), centered)
    lifted = ad.matvec(tape.constant(subspace.basis), coords)
    return ad.add(lifted, mean)


def dist_loss(
    f_t: Var, subspace: DomainSubspace, *, detach_projection: bool = False
) -> Var:
    """Squared distance from ``f_t`` to its projection onto the subspace."""
    f_star = _projection_var(f_t, subspace, detach_projection)
    return ad.sq_norm(ad.sub(f_star, f_t))


def _one_minus_cosine(u: Var, v: Var, eps: float) -> Var:
    tape = u.tape
    cos = ad.div(ad.dot(u, v), ad.mul(ad.norm_eps(u, eps), ad.norm_eps(v, eps)))
    return ad.sub(tape.constant(1.0), cos)


def direct_loss(
    f_s: Var,
    f_t: Var,
    subspace: DomainSubspace,
    *,
    eps: float = NORM_EPS,
    detach_projection: bool = False,
) -> Var:
    """One minus the cosine between ``f_t - f_s`` and ``f* - f_t``."""
    delta_st = ad.sub(f_t, f_s)
    f_star = _projection_var(f_t, subspace, detach_projection)
    delta_tp = ad.sub(f_star, f_t)
    return _one_minus_cosine(delta_st, delta_tp, eps)


def _check_hybrid_args(subspaces, weights) -> None:
    if not weights:
        raise ConfigError("hybrid losses need at least one domain weight")
    if len(subspaces) != len(weights):
        raise ConfigError(
            f"{len(subspaces)} subspaces paired with {len(weights)} weights"
        )


def hybrid_dist_loss(
    f_t: Var,
    subspaces: list[DomainSubspace],
    weights: list[DomainWeight],
    *,
    detach_projection: bool = False,
) -> Var:
    """Weighted sum of per-domain distance losses."""
    _check_hybrid_args(subspaces, weights)
    total = None
    for sub_i, w in zip(subspaces, weights):
        term = ad.smul(w.alpha, dist_loss(f_t, sub_i, detach_projection=detach_projection))
        total = term if total is None else ad.add(total, term)
    return total


def hybrid_direct_loss(
    f_s: Var,
    f_t: Var,
    subspaces: list[DomainSubspace],
    weights: list[DomainWeight],
    *,
    eps: float = NORM_EPS,
    detach_projection: bool = False,
) -> Var:
    """Direction loss against the weighted sum of per-domain perpendiculars."""
    _check_hybrid_args(subspaces, weights)
    delta_st = ad.sub(f_t, f_s)
    aggregate = None
    for sub_i, w in zip(subspaces, weights):
        f_star = _projection_var(f_t, sub_i, detach_projection)
        term = ad.smul(w.alpha, ad.sub(f_star, f_t))
        aggregate = term if aggregate is None else ad.add(aggregate, term)
    return _one_minus_cosine(delta_st, aggregate, eps)


def hda_objective(
    z_batch,
    source_gen: GeneratorParams,
    target_gen: GeneratorParams,
    encoders: list[EncoderSpec],
    subspaces_per_encoder: dict[str, dict[str, DomainSubspace]],
    weights: list[DomainWeight],
    lam: float,
    *,
    dist_only: bool = False,
    direct_only: bool = False,
    detach_projection: bool = False,
) -> tuple[LossBreakdown, dict[str, Array]]:
    """Full objective over a latent batch, with target-generator gradients.

    Returns the batch-mean loss breakdown and the gradient of the total
    with respect to each target generator parameter array.  Source
    generator and encoders enter as constants: their weights receive no
    gradient and are never modified.
    """
    z_batch = np.asarray(z_batch, dtype=np.float64)
    if z_batch.ndim != 2:
        raise DimensionError(f"latent batch must be (n, d_z), got shape {z_batch.shape}")
    if z_batch.shape[0] < 1:
        raise ConfigError("latent batch is empty")
    if z_batch.shape[1] != target_gen.d_z:
        raise DimensionError(
            f"latents have dimension {z_batch.shape[1]}, generator wants {target_gen.d_z}"
        )
    if not encoders:
        raise ConfigError("need at least one encoder")
    if lam < 0.0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if dist_only and direct_only:
        raise ConfigError("dist_only and direct_only are mutually exclusive")
    _check_hybrid_args([None] * len(weights), weights)
    for enc in encoders:
        per_domain = subspaces_per_encoder.get(enc.encoder_id)
        if per_domain is None:
            raise ConfigError(f"no subspaces supplied for encoder {enc.encoder_id!r}")
        for w in weights:
            sub_i = per_domain.get(w.domain_id)
            if sub_i is None:
                raise ConfigError(
                    f"encoder {enc.encoder_id!r} has no subspace for domain {w.domain_id!r}"
                )
            if sub_i.dim != enc.d_e:
                raise DimensionError(
                    f"subspace for ({enc.encoder_id!r}, {w.domain_id!r}) lives in "
                    f"dimension {sub_i.dim}, encoder outputs {enc.d_e}"
                )

    batch = z_batch.shape[0]
    inv_batch = 1.0 / batch
    dist_sums = {enc.encoder_id: 0.0 for enc in encoders}
    direct_sums = {enc.encoder_id: 0.0 for enc in encoders}
    grads = {name: np.zeros_like(arr) for name, arr in target_gen.to_dict().items()}

    for z in z_batch:
        x_source = source_gen.forward(z)
        tape = Tape()
        param_vars = generator_param_vars(tape, target_gen)
        x_target = generator_forward_var(tape, param_vars, z)
        sample_total = None
        for enc in encoders:
            f_t = encode_var(tape, enc, x_target)
            subs = [subspaces_per_encoder[enc.encoder_id][w.domain_id] for w in weights]
            enc_term = None
            if not direct_only:
                d = hybrid_dist_loss(f_t, subs, weights, detach_projection=detach_projection)
                dist_sums[enc.encoder_id] += d.item()
                enc_term = d
            if not dist_only:
                f_s = tape.constant(encode(enc, x_source))
                dr = hybrid_direct_loss(
                    f_s, f_t, subs, weights, detach_projection=detach_projection
                )
                direct_sums[enc.encoder_id] += dr.item()
                weighted = ad.smul(lam, dr)
                enc_term = weighted if enc_term is None else ad.add(enc_term, weighted)
            sample_total = enc_term if sample_total is None else ad.add(sample_total, enc_term)
        tape.backward(sample_total, seed=inv_batch)
        for name, var in param_vars.items():
            grads[name] += var.grad

    per_encoder = tuple(
        EncoderTerms(
            enc.encoder_id,
            dist_sums[enc.encoder_id] * inv_batch,
            direct_sums[enc.encoder_id] * inv_batch,
        )
        for enc in encoders
    )
    total = 0.0
    for terms in per_encoder:
        total += terms.dist_term + lam * terms.direct_term
    return LossBreakdown(total=total, per_encoder=per_encoder, lam=lam), grads
