"""Declarative experiment recipes: validated JSON configs swept over axes and seeds.

A recipe fixes a graph, a transition kernel (or capability classes), an
initial condition and a simulation mode, then sweeps any of (u, gamma, n,
placement) crossed with a seed list.  Every cell writes a trajectory CSV;
a manifest captures the exact resolved configuration of each cell so runs
are bit-reproducible.
"""

from __future__ import annotations

import json
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import abm, metrics, rum
from .graph import DirectedGraph, GraphGenSpec, generate

SWEEP_AXES = ("u", "gamma", "n", "placement")


class RecipeError(ValueError):
    """Invalid recipe configuration; the message names the offending key path."""


@dataclass(frozen=True)
class ExperimentRecipe:
    """Fully validated recipe with defaults applied."""

    graph: dict
    model: dict
    init: dict
    sim: dict
    sweep: dict
    seeds: tuple[int, ...]
    out_dir: str

    def to_dict(self) -> dict:
        return {
            "graph": dict(self.graph),
            "model": json.loads(json.dumps(self.model)),
            "init": dict(self.init),
            "sim": dict(self.sim),
            "sweep": {k: list(v) for k, v in self.sweep.items()},
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
        }


def serialize_recipe(recipe: ExperimentRecipe) -> str:
    return json.dumps(recipe.to_dict(), indent=2)


def _require_keys(section: dict, allowed: set, path: str) -> None:
    for key in section:
        if key not in allowed:
            raise RecipeError(f"{path}.{key}: unknown key")


def _normalize_graph(section, path="graph") -> dict:
    if not isinstance(section, dict):
        raise RecipeError(f"{path}: must be an object")
    if "path" in section:
        _require_keys(section, {"path"}, path)
        return {"path": str(section["path"])}
    _require_keys(section, {"model", "n", "gamma", "clip", "p", "branching", "seed"}, path)
    model = section.get("model")
    if model not in ("powerlaw", "ba", "er", "chain", "tree"):
        raise RecipeError(f"{path}.model: expected one of powerlaw/ba/er/chain/tree")
    n = section.get("n")
    if not isinstance(n, int) or n < 1:
        raise RecipeError(f"{path}.n: must be a positive integer")
    out = {"model": model, "n": n,
           "gamma": float(section.get("gamma", 2.7)),
           "clip": int(section.get("clip", 50)),
           "p": float(section.get("p", 0.1)),
           "branching": int(section.get("branching", 2)),
           "seed": section.get("seed")}
    if out["gamma"] <= 1:
        raise RecipeError(f"{path}.gamma: must be > 1")
    if not 0.0 <= out["p"] <= 1.0:
        raise RecipeError(f"{path}.p: must be in [0, 1]")
    if out["seed"] is not None and not isinstance(out["seed"], int):
        raise RecipeError(f"{path}.seed: must be an integer or null")
    return out


_MODEL_KEYS = {
    "rum": {"kind", "path", "labels", "reference", "features", "context_dim", "coeffs"},
    "table": {"kind", "path", "labels", "rows"},
    "plugin": {"kind", "path", "labels", "buckets", "q_state", "table"},
    "logits": {"kind", "path", "labels", "c0_h", "cu_h", "cq_h", "c0_t", "cu_t", "cq_t"},
}


def _normalize_model(section, path="model") -> dict:
    if not isinstance(section, dict):
        raise RecipeError(f"{path}: must be an object")
    if "path" in section and len(section) <= 2:
        _require_keys(section, {"path", "kind"}, path)
        return {"path": str(section["path"]), **({"kind": section["kind"]} if "kind" in section else {})}
    kind = section.get("kind", "rum")
    if kind == "classes":
        _require_keys(section, {"kind", "classes", "placement"}, path)
        classes = section.get("classes")
        if not isinstance(classes, list) or not classes:
            raise RecipeError(f"{path}.classes: must be a non-empty list")
        norm = []
        for i, cls in enumerate(classes):
            _require_keys(cls, {"fraction", "model"}, f"{path}.classes[{i}]")
            frac = cls.get("fraction")
            if not isinstance(frac, (int, float)) or frac < 0:
                raise RecipeError(f"{path}.classes[{i}].fraction: must be nonnegative")
            norm.append({"fraction": float(frac),
                         "model": _normalize_model(cls.get("model", {}), f"{path}.classes[{i}].model")})
        total = sum(c["fraction"] for c in norm)
        if abs(total - 1.0) > 1e-9:
            raise RecipeError(f"{path}.classes: fractions must sum to 1")
        placement = section.get("placement", "top_out_degree")
        if placement not in ("random", "top_in_degree", "top_out_degree"):
            raise RecipeError(f"{path}.placement: invalid class placement")
        return {"kind": "classes", "classes": norm, "placement": placement}
    if kind not in _MODEL_KEYS:
        raise RecipeError(f"{path}.kind: unknown kernel kind {kind!r}")
    _require_keys(section, _MODEL_KEYS[kind], path)
    out = dict(section)
    out["kind"] = kind
    try:
        rum.kernel_from_dict(out)
    except Exception as exc:
        raise RecipeError(f"{path}: invalid kernel ({exc})") from exc
    return out


def _normalize_init(section, path="init") -> dict:
    if not isinstance(section, dict):
        raise RecipeError(f"{path}: must be an object")
    _require_keys(section, {"distribution", "placement", "nodes"}, path)
    dist = section.get("distribution")
    if not isinstance(dist, list) or not dist:
        raise RecipeError(f"{path}.distribution: must be a list of probabilities")
    out = {"distribution": [float(p) for p in dist],
           "placement": section.get("placement", "random")}
    if "nodes" in section:
        out["nodes"] = [int(i) for i in section["nodes"]]
    try:
        abm.InitSpec(tuple(out["distribution"]), out["placement"],
                     tuple(out["nodes"]) if "nodes" in out else None)
    except Exception as exc:
        raise RecipeError(f"{path}: {exc}") from exc
    return out


def _normalize_sim(section, path="sim") -> dict:
    if not isinstance(section, dict):
        raise RecipeError(f"{path}: must be an object")
    _require_keys(section, {"mode", "steps", "rounds", "u", "log_transitions"}, path)
    out = {"mode": section.get("mode", "parallel"),
           "steps": int(section.get("steps", 0)),
           "rounds": int(section.get("rounds", 10)),
           "u": float(section.get("u", 0.0)),
           "log_transitions": bool(section.get("log_transitions", False))}
    if out["mode"] not in ("sequential", "parallel"):
        raise RecipeError(f"{path}.mode: must be sequential or parallel")
    if out["steps"] < 0 or out["rounds"] < 0:
        raise RecipeError(f"{path}: steps and rounds must be >= 0")
    return out


def parse_config(text: str) -> ExperimentRecipe:
    """Parse and validate a recipe JSON document, applying defaults."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RecipeError(f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise RecipeError("recipe must be a JSON object")
    _require_keys(raw, {"graph", "model", "init", "sim", "sweep", "seeds", "out_dir"}, "recipe")
    for required in ("graph", "model", "init"):
        if required not in raw:
            raise RecipeError(f"recipe.{required}: missing required section")
    sweep_raw = raw.get("sweep", {})
    if not isinstance(sweep_raw, dict):
        raise RecipeError("recipe.sweep: must be an object")
    _require_keys(sweep_raw, set(SWEEP_AXES), "sweep")
    sweep = {}
    for axis, values in sweep_raw.items():
        if not isinstance(values, list) or not values:
            raise RecipeError(f"sweep.{axis}: must be a non-empty list")
        sweep[axis] = list(values)
    seeds = raw.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise RecipeError("recipe.seeds: must be a non-empty list of integers")
    return ExperimentRecipe(
        graph=_normalize_graph(raw["graph"]),
        model=_normalize_model(raw["model"]),
        init=_normalize_init(raw["init"]),
        sim=_normalize_sim(raw.get("sim", {})),
        sweep=sweep,
        seeds=tuple(seeds),
        out_dir=str(raw.get("out_dir", "results")),
    )


def _cell_name(axes: dict, seed: int) -> str:
    parts = [f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}"
             for k, v in sorted(axes.items())]
    parts.append(f"seed={seed}")
    return "__".join(parts)


def _build_graph(graph_cfg: dict, axes: dict, seed: int) -> DirectedGraph:
    if "path" in graph_cfg:
        return DirectedGraph.load(graph_cfg["path"])
    cfg = dict(graph_cfg)
    if "gamma" in axes:
        cfg["gamma"] = float(axes["gamma"])
    if "n" in axes:
        cfg["n"] = int(axes["n"])
    spec = GraphGenSpec(model=cfg["model"], node_count=cfg["n"], gamma=cfg["gamma"],
                        edge_clip=cfg["clip"], er_p=cfg["p"], tree_branching=cfg["branching"],
                        seed=cfg["seed"] if cfg.get("seed") is not None else seed)
    return generate(spec)


def _build_models(model_cfg: dict, g: DirectedGraph, seed: int):
    if "path" in model_cfg and set(model_cfg) <= {"path", "kind"}:
        return rum.load_kernel(model_cfg["path"])
    if model_cfg.get("kind") == "classes":
        kernels = []
        for cls in model_cfg["classes"]:
            kernels.append(_build_models(cls["model"], g, seed))
        fractions = [cls["fraction"] for cls in model_cfg["classes"]]
        rng = np.random.default_rng(seed)
        return abm.assign_capability_classes(g, fractions, kernels,
                                             placement=model_cfg["placement"], rng=rng)
    return rum.kernel_from_dict(model_cfg)


def _resolve_cell(recipe: ExperimentRecipe, axes: dict, seed: int) -> dict:
    cfg = {"graph": dict(recipe.graph), "model": recipe.model,
           "init": dict(recipe.init), "sim": dict(recipe.sim), "seed": seed}
    if "gamma" in axes:
        cfg["graph"]["gamma"] = float(axes["gamma"])
    if "n" in axes:
        cfg["graph"]["n"] = int(axes["n"])
    if "placement" in axes:
        cfg["init"]["placement"] = axes["placement"]
    if "u" in axes:
        cfg["sim"]["u"] = float(axes["u"])
    if cfg["graph"].get("seed") is None and "path" not in cfg["graph"]:
        cfg["graph"]["seed"] = seed
    return cfg


@dataclass
class RecipeRunResult:
    manifest: dict
    failed: bool


def run_recipe(recipe: ExperimentRecipe, out_dir: str | None = None) -> RecipeRunResult:
    """Cartesian sweep over axes x seeds; one trajectory CSV per cell.

    Cell failures are recorded in the manifest and do not stop the sweep.
    """
    out = Path(out_dir if out_dir is not None else recipe.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    axis_names = sorted(recipe.sweep)
    combos: list[dict] = [{}]
    for name in axis_names:
        combos = [dict(c, **{name: v}) for c in combos for v in recipe.sweep[name]]
    cells = []
    terminal: dict[str, dict] = {}
    failed = False
    for axes in combos:
        combo_key = json.dumps(axes, sort_keys=True)
        terminal[combo_key] = {"axes": axes, "rho": [], "labels": None}
        for seed in recipe.seeds:
            name = _cell_name(axes, seed)
            cfg = _resolve_cell(recipe, axes, seed)
            entry = {"name": name, "axes": axes, "seed": seed, "config": cfg, "outputs": {}}
            try:
                g = _build_graph(recipe.graph, axes, seed)
                models = _build_models(recipe.model, g, seed)
                init_cfg = cfg["init"]
                init = abm.InitSpec(tuple(init_cfg["distribution"]), init_cfg["placement"],
                                    tuple(init_cfg["nodes"]) if "nodes" in init_cfg else None)
                sim_cfg = cfg["sim"]
                sim = abm.SimSpec(models=models, mode=sim_cfg["mode"], steps=sim_cfg["steps"],
                                  rounds=sim_cfg["rounds"], u=sim_cfg["u"], seed=seed,
                                  log_transitions=sim_cfg["log_transitions"])
                result = abm.run(g, init, sim)
                traj_path = out / f"{name}.csv"
                metrics.write_trajectory_csv(traj_path, result.times, result.rho, result.labels,
                                             degrees=result.degrees,
                                             by_degree=result.rho_by_degree)
                entry["outputs"]["trajectory"] = traj_path.name
                if sim_cfg["log_transitions"]:
                    log_path = out / f"{name}.jsonl"
                    space = rum.StateSpace(tuple(result.labels), len(result.labels) - 1)
                    rum.write_records_jsonl(log_path, result.records, space)
                    entry["outputs"]["transitions"] = log_path.name
                bucket = terminal[combo_key]
                bucket["rho"].append(result.terminal_rho.tolist())
                bucket["labels"] = list(result.labels)
            except Exception as exc:
                failed = True
                entry["error"] = f"{type(exc).__name__}: {exc}"
                entry["traceback"] = traceback.format_exc(limit=3)
            cells.append(entry)
    summary = []
    for combo_key in sorted(terminal):
        bucket = terminal[combo_key]
        if not bucket["rho"]:
            summary.append({"axes": bucket["axes"], "n_seeds": 0})
            continue
        arr = np.asarray(bucket["rho"])
        summary.append({
            "axes": bucket["axes"],
            "labels": bucket["labels"],
            "n_seeds": len(arr),
            "terminal_mean": arr.mean(axis=0).tolist(),
            "terminal_std": arr.std(axis=0).tolist(),
        })
    manifest = {"recipe": recipe.to_dict(), "cells": cells, "summary": summary}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return RecipeRunResult(manifest=manifest, failed=failed)
