"""Byzantine client behaviours injected into the training loop.

``cosine-guided`` models an adversary that can see honest gradients.  It
estimates the benign mean of its cluster from the honest updates already
produced this round (its own honest update when none is available yet), then
submits a vector with cosine ``target_cos`` to that mean, pointing as far from
it as the cosine allows and ``stretch`` times its norm.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from ..rfca import AttackHook, ClientUpdate, TrainTask, clustered_model_update
from .config import AttackSpec


def flip_labels(task: TrainTask) -> TrainTask:
    """Binary labels swap ``0 <-> 1``; regression targets are negated."""
    y = 1.0 - task.y if task.kind == "logistic" else -task.y
    return replace(task, y=y)


def sign_flip(update: ClientUpdate) -> ClientUpdate:
    return ClientUpdate(cluster=update.cluster, gradient=-update.gradient)


def scale_update(update: ClientUpdate, factor: float) -> ClientUpdate:
    return ClientUpdate(cluster=update.cluster, gradient=factor * update.gradient)


def label_flip(update: ClientUpdate, models: np.ndarray, task: TrainTask, rng) -> ClientUpdate:
    """Retrain the chosen cluster model on flipped labels."""
    _, delta = clustered_model_update(models[update.cluster][None, :], flip_labels(task), task.lr, seed=rng)
    return ClientUpdate(cluster=update.cluster, gradient=delta)


def cosine_guided(update: ClientUpdate, benign: Sequence[np.ndarray], target_cos: float, scale: float,
                  rng) -> ClientUpdate:
    mean = np.mean(benign, axis=0) if len(benign) else update.gradient
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        return update
    unit = mean / norm
    # orthogonal direction: the component of a random probe perpendicular to the mean
    probe = rng.standard_normal(unit.shape)
    probe -= (probe @ unit) * unit
    pn = float(np.linalg.norm(probe))
    if pn == 0.0:
        return update
    crafted = target_cos * unit + np.sqrt(1.0 - target_cos**2) * probe / pn
    return ClientUpdate(cluster=update.cluster, gradient=scale * norm * crafted)


def inject_attack(update: ClientUpdate, spec: AttackSpec, *, models: np.ndarray | None = None,
                  task: TrainTask | None = None, benign: Sequence[np.ndarray] = (), rng=None) -> ClientUpdate:
    """Replace an adversarial client's honest update according to ``spec``."""
    rng = np.random.default_rng() if rng is None else rng
    if spec.kind == "none":
        return update
    if spec.kind == "sign-flip":
        return sign_flip(update)
    if spec.kind == "scaling":
        return scale_update(update, spec.scale)
    if spec.kind == "label-flip":
        if models is None or task is None:
            raise ValueError("label-flip needs the broadcast models and the client's task")
        return label_flip(update, models, task, rng)
    if spec.kind == "cosine-guided":
        return cosine_guided(update, benign, spec.target_cos, spec.stretch, rng)
    raise ValueError(f"unknown attack {spec.kind!r}")


def attack_hook(spec: AttackSpec, adversaries: Sequence[int]) -> AttackHook:
    """Adapter for the training loop; the benign estimate uses honest clients of the same cluster."""
    adv = set(adversaries)

    def hook(i: int, update: ClientUpdate, ctx: dict) -> ClientUpdate:
        honest = [u.gradient for k, u in enumerate(ctx["honest"]) if k not in adv and u.cluster == update.cluster]
        return inject_attack(update, spec, models=ctx["state"].models, task=ctx["task"], benign=honest,
                             rng=ctx["rng"])

    return hook
