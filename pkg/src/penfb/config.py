"""Run configuration: YAML files validated against a strict JSON Schema.

The schema ships with the package (``config_schema.json``) and rejects
unknown keys. :func:`parse_config` reports every violation at once and
fills defaults, so a :class:`RunConfig` is always complete.
"""

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .errors import ConfigError, ParameterError
from .problems import make_basis_pursuit, make_bilevel_quadratic, make_radon
from .solver import Options
from .stochastic import NoiseModel, Schedule


def load_schema():
    return json.loads(resources.files("penfb").joinpath("config_schema.json").read_text())


def _fill_defaults(schema, node):
    """Insert ``default`` values of object properties, recursively."""
    if schema.get("type") != "object" or not isinstance(node, dict):
        return node
    for key, sub in schema.get("properties", {}).items():
        if key not in node and "default" in sub:
            node[key] = copy.deepcopy(sub["default"])
        if key in node:
            node[key] = _fill_defaults(sub, node[key])
    return node


def _format_error(err):
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{where}: {err.message}"


@dataclass(frozen=True)
class RunConfig:
    """A validated configuration with every default filled in."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def config_hash(self):
        """SHA-256 of the canonical JSON form, ignoring ``output_dir``."""
        payload = {k: v for k, v in self.data.items() if k != "output_dir"}
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_overrides(self, **kw):
        data = copy.deepcopy(self.data)
        for k, v in kw.items():
            if v is not None:
                data[k] = v
        return RunConfig(data)

    # -- builders -----------------------------------------------------------
    def build_problem(self):
        p = self.data["problem"]
        fam = p["family"]
        if fam == "bilevel_quadratic":
            prob = make_bilevel_quadratic(p["d"], p["J"], p["ref_value"])
        elif fam == "basis_pursuit":
            prob = make_basis_pursuit(p["m"], p["d"], p["sparsity"], p["noise_sigma"], p["seed"],
                                      orthonormal=p["orthonormal"])
        else:
            prob = make_radon(p["image_side"], p["n_angles"], p["n_detectors"], p["phantom"], p["seed"])
        if "x0" in p:
            from dataclasses import replace
            prob = replace(prob, x0=np.asarray(p["x0"], dtype=float))
        return prob

    def lipschitz(self, problem):
        s = self.data["schedule"]
        if "L" in s:
            return float(s["L"])
        return float(problem.penalty.lipschitz(self.data["flags"]["l_constant_choice"]))

    def build_schedule(self, problem):
        s = self.data["schedule"]
        flags = self.data["flags"]
        L = self.lipschitz(problem)
        l_step = None
        b = self.data.get("batch_size")
        if (b is not None and flags["batch_scaling"] == "unbiased"
                and flags["minibatch_step_constant"]):
            l_step = max(L, problem.penalty.minibatch_lipschitz(b))
        keys = ("kind", "a", "n0", "c", "beta_scale", "lambda_scale", "lambda_exp",
                "beta_value", "lambda_value")
        return Schedule(**{k: s[k] for k in keys}, L=L, L_step=l_step)

    def build_noise(self):
        n = self.data["noise"]
        if n["regime"] == "UBV":
            return NoiseModel.ubv(n["sigma_star"])
        if n["regime"] == "ASV":
            return NoiseModel.asv(n["sigma0"], n["q"])
        return NoiseModel.off()

    def build_options(self):
        f = self.data["flags"]
        return Options(batch_size=self.data.get("batch_size"),
                       beta_scales_noise=f["beta_scales_noise"],
                       uniform_cesaro=f["uniform_cesaro"],
                       noise_scaling=self.data["noise"]["scaling"],
                       batch_scaling=f["batch_scaling"])


def validate(data):
    """Return ``(filled, errors)`` for a raw configuration mapping."""
    schema = load_schema()
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    messages = [_format_error(e) for e in errors]
    if messages or not isinstance(data, dict):
        return None, messages or ["<root>: configuration must be a mapping"]
    filled = _fill_defaults(schema, copy.deepcopy(data))
    p = filled["problem"]
    if p["family"] == "bilevel_quadratic" and not p["J"] < p["d"]:
        messages.append("problem: bilevel_quadratic needs J < d")
    if p["family"] == "basis_pursuit" and not (p["m"] <= p["d"] and p["sparsity"] <= p["d"]):
        messages.append("problem: basis_pursuit needs m <= d and sparsity <= d")
    if filled["noise"]["regime"] == "ASV" and filled["noise"]["q"] <= 0.5:
        messages.append("noise/q: ASV needs q > 1/2")
    if "batch_size" in filled and p["family"] == "bilevel_quadratic":
        messages.append("batch_size: minibatches need a least-squares penalty")
    return filled, messages


def parse_config(path, **overrides):
    """Load, validate and default a YAML configuration file.

    Raises :class:`ConfigError` listing every schema violation, and (when
    ``flags.enforce_step_rule`` is set) any breach of the step-size rule
    ``lambda_n beta_n < 2 / L_Psi``.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    return config_from_dict(raw if raw is not None else {}, **overrides)


def config_from_dict(raw, **overrides):
    raw = copy.deepcopy(raw)
    for k, v in overrides.items():
        if v is not None:
            raw[k] = v
    filled, errors = validate(raw)
    if errors:
        raise ConfigError(errors)
    cfg = RunConfig(filled)
    if filled["flags"]["enforce_step_rule"]:
        try:
            problem = cfg.build_problem()
            cfg.build_schedule(problem).check_step_rule(filled["n_steps"])
        except ParameterError as exc:
            raise ConfigError([f"schedule: {exc}"]) from exc
    return cfg
