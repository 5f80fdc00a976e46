"""Run configuration: one TOML document per run, strictly validated.

A config file mirrors `experiments.ExperimentSpec` plus output plumbing:

    [run]
    scenario = "elastic_H_poro"
    seed = 0
    noise = 0.0
    out = "runs/demo"            # optional; --out overrides
    threads = 1
    observations = "obs.csv"     # optional: invert against stored data

    [mesh]                       # optional, scenario defaults otherwise
    nx = 10
    ny = 10

    [time]
    dt = 0.1
    n_steps = 10

    [truth]                      # keys fixed per scenario
    E = 1.0
    nu = 0.35

    [optimizer]                  # LbfgsConfig fields
    max_iter = 300

    [options]                    # scenario-specific extras
    source = 2.0

    [gradcheck]                  # cmd_gradcheck only
    tol = 1e-5
    corrupt = false

    [sweep]                      # cmd_sweep only
    kind = "noise"
    sigmas = [0.0, 0.01, 0.1]
    seeds = [0, 1, 2, 3, 4]

Unknown keys anywhere are rejected before any compute, so typos fail fast
instead of silently running defaults.  `config_hash` fingerprints the
parsed document; every output file header carries it.
"""

import dataclasses
import hashlib
import json

import tomli

from . import experiments as ex
from . import optim


class ConfigError(ValueError):
    pass


_RUN_KEYS = {"scenario", "seed", "noise", "out", "threads", "observations",
             "assessment"}
_MESH_KEYS = {"nx", "ny", "lx", "ly"}
_TIME_KEYS = {"dt", "n_steps"}
_OPTIMIZER_KEYS = {f.name for f in dataclasses.fields(optim.LbfgsConfig)}
_GRADCHECK_KEYS = {"h", "tol", "corrupt", "n_directions"}
_SWEEP_KEYS = {"kind", "sigmas", "seeds", "widths", "depths", "activations",
               "law"}
_TOP_KEYS = {"run", "mesh", "time", "truth", "optimizer", "options",
             "gradcheck", "sweep"}


def _reject_unknown(table, allowed, where):
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError("unknown key(s) in [%s]: %s (allowed: %s)"
                          % (where, ", ".join(unknown),
                             ", ".join(sorted(allowed))))


def load_config(path):
    """Parse and validate a TOML run configuration."""
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as e:
        raise ConfigError("invalid TOML in %s: %s" % (path, e))
    return validate_config(doc)


def validate_config(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a table")
    _reject_unknown(doc, _TOP_KEYS, "top level")
    run = doc.get("run")
    if not isinstance(run, dict) or "scenario" not in run:
        raise ConfigError("config needs a [run] table with a scenario key")
    _reject_unknown(run, _RUN_KEYS, "run")
    scenario = run["scenario"]
    if scenario not in ex.SCENARIOS:
        raise ConfigError("unknown scenario %r (expected one of %s)"
                          % (scenario, ", ".join(ex.SCENARIOS)))

    _reject_unknown(doc.get("mesh", {}), _MESH_KEYS, "mesh")
    _reject_unknown(doc.get("time", {}), _TIME_KEYS, "time")
    _reject_unknown(doc.get("optimizer", {}), _OPTIMIZER_KEYS, "optimizer")
    _reject_unknown(doc.get("gradcheck", {}), _GRADCHECK_KEYS, "gradcheck")
    _reject_unknown(doc.get("sweep", {}), _SWEEP_KEYS, "sweep")

    defaults = ex.default_spec(scenario)
    _reject_unknown(doc.get("truth", {}), defaults.truth, "truth")
    _reject_unknown(doc.get("options", {}), defaults.options, "options")

    # the spec builder re-validates values (positivity, required keys)
    try:
        spec_from_config(doc)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))
    return doc


def spec_from_config(doc, seed=None):
    """Build the ExperimentSpec a validated config describes."""
    run = doc["run"]
    overrides = {}
    overrides.update(doc.get("mesh", {}))
    overrides.update(doc.get("time", {}))
    for key in ("truth", "optimizer", "options"):
        if doc.get(key):
            overrides[key] = doc[key]
    if "noise" in run:
        overrides["noise"] = float(run["noise"])
    if "assessment" in run:
        overrides["assessment"] = run["assessment"]
    overrides["seed"] = int(run.get("seed", 0) if seed is None else seed)
    return ex.default_spec(run["scenario"], **overrides)


def config_hash(doc):
    """Stable 16-hex-digit fingerprint of the parsed config document."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
