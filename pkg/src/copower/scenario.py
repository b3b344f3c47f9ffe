"""Scenario files: one JSON document describing a design question.

Schema (all blocks are objects; see README for a complete example):

  model       exactly one of
                "icc":        {rho0, rho1, rho2, sigma_y2}
                "components": {sigma_phi, sigma_e}
              rho0 may be a scalar or per-endpoint list; rho1/rho2 may be
              scalars (exchangeable across endpoint pairs) or full matrices.
  effect      {"beta": [...], "gamma": [...]?}  (gamma defaults to zeros)
  design      {"n"?, "m_bar"?, "cv"?, "z_bar"?, "alpha"?}
  test        {"kind": omnibus|homogeneity|custom|iu, "contrast"?, "delta"?}
  solver      {"target_power", "solve_for": "n"|"m"}          (optional)
  simulation  {"reps", "seed"}                                 (optional)
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .types import (
    DesignSpec,
    EffectModel,
    IccSet,
    TestKind,
    TestSpec,
    VarianceComponents,
    components_to_icc,
    icc_set,
    icc_to_components,
)


@dataclass(frozen=True)
class Scenario:
    vc: VarianceComponents
    effect: EffectModel
    design: DesignSpec
    test: TestSpec
    target_power: float | None
    solve_for: str | None
    reps: int
    seed: int
    raw: dict

    @property
    def icc(self) -> IccSet:
        return components_to_icc(self.vc)


def _require(block: dict, key: str, context: str):
    if key not in block:
        raise ValidationError(f"scenario {context} block is missing '{key}'")
    return block[key]


def _pair_matrix(value, rho0: np.ndarray, diagonal) -> np.ndarray:
    """Expand a scalar between-endpoint ICC to its matrix form."""
    k = rho0.shape[0]
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        mat = np.full((k, k), float(arr))
        np.fill_diagonal(mat, diagonal)
        return mat
    return arr


def _parse_model(block: dict) -> VarianceComponents:
    has_icc = "icc" in block
    has_comp = "components" in block
    if has_icc == has_comp:
        raise ValidationError(
            "scenario model block needs exactly one of 'icc' or 'components'"
        )
    if has_comp:
        comp = block["components"]
        return VarianceComponents(
            sigma_phi=np.asarray(_require(comp, "sigma_phi", "model.components"), float),
            sigma_e=np.asarray(_require(comp, "sigma_e", "model.components"), float),
        )
    icc = block["icc"]
    sigma_y2 = np.atleast_1d(
        np.asarray(_require(icc, "sigma_y2", "model.icc"), dtype=float)
    )
    rho0 = np.atleast_1d(np.asarray(_require(icc, "rho0", "model.icc"), dtype=float))
    if rho0.shape[0] == 1 and sigma_y2.shape[0] > 1:
        rho0 = np.full(sigma_y2.shape[0], rho0[0])
    rho1 = _require(icc, "rho1", "model.icc")
    rho2 = _require(icc, "rho2", "model.icc")
    if np.ndim(rho1) == 0 and np.ndim(rho2) == 0:
        return icc_to_components(icc_set(rho0, float(rho1), float(rho2), sigma_y2))
    full = IccSet(
        rho0=rho0,
        rho1=_pair_matrix(rho1, rho0, rho0),
        rho2=_pair_matrix(rho2, rho0, 1.0),
        sigma_y2=sigma_y2,
    )
    return icc_to_components(full)


def _parse_test(block: dict, effect: EffectModel) -> TestSpec:
    kind_name = str(_require(block, "kind", "test"))
    try:
        kind = TestKind(kind_name)
    except ValueError:
        valid = ", ".join(k.value for k in TestKind)
        raise ValidationError(f"unknown test kind '{kind_name}' (expected {valid})")
    contrast = block.get("contrast")
    delta = block.get("delta")
    return TestSpec(
        kind=kind,
        contrast=None if contrast is None else np.asarray(contrast, dtype=float),
        delta=None if delta is None else np.asarray(delta, dtype=float),
        beta=effect.beta,
    )


def parse_scenario(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ValidationError("scenario must be a JSON object")
    vc = _parse_model(_require(doc, "model", "top-level"))

    effect_block = _require(doc, "effect", "top-level")
    beta = np.atleast_1d(
        np.asarray(_require(effect_block, "beta", "effect"), dtype=float)
    )
    gamma = np.asarray(effect_block.get("gamma", np.zeros_like(beta)), dtype=float)
    effect = EffectModel(gamma=gamma, beta=beta)
    if effect.k != vc.k:
        raise ValidationError(
            f"effect has {effect.k} endpoints but the model has {vc.k}"
        )

    design_block = _require(doc, "design", "top-level")
    solver_block = doc.get("solver") or {}
    solve_for = solver_block.get("solve_for")
    target_power = solver_block.get("target_power")
    if solve_for is not None:
        if solve_for not in ("n", "m"):
            raise ValidationError("solver.solve_for must be 'n' or 'm'")
        if target_power is None:
            raise ValidationError("solver block needs 'target_power'")

    n = design_block.get("n")
    m_bar = design_block.get("m_bar")
    if solve_for == "m":
        if n is None:
            raise ValidationError("solving for m requires design.n")
        m_bar = m_bar if m_bar is not None else 1.0
    elif m_bar is None:
        raise ValidationError("design block needs 'm_bar'")
    if solve_for is None and n is None:
        raise ValidationError("design block needs 'n' (or a solver block)")
    design = DesignSpec(
        n=None if n is None else int(n),
        m_bar=float(m_bar),
        cv=float(design_block.get("cv", 0.0)),
        z_bar=float(design_block.get("z_bar", 0.5)),
        alpha=float(design_block.get("alpha", 0.05)),
    )

    test = _parse_test(_require(doc, "test", "top-level"), effect)

    sim_block = doc.get("simulation") or {}
    return Scenario(
        vc=vc,
        effect=effect,
        design=design,
        test=test,
        target_power=None if target_power is None else float(target_power),
        solve_for=solve_for,
        reps=int(sim_block.get("reps", 1000)),
        seed=int(sim_block.get("seed", 20230)),
        raw=doc,
    )


def load_scenario(path) -> Scenario:
    try:
        with open(path) as handle:
            doc = json.load(handle)
    except OSError as exc:
        raise ValidationError(f"cannot read scenario file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"scenario file is not valid JSON: {exc}") from exc
    return parse_scenario(doc)
