"""Run configuration: INI-style text with a fixed schema, explicit defaults,
strict unknown-key rejection, and a canonical round-trippable rendering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diversify import DiversifyHyper
from .errors import ConfigError
from .fitter import FitHyper
from .latent import VaeTrainConfig
from .metrics import BenchmarkConfig
from .synth import CurriculumSchedule

# (section, key) -> (type tag, default). Type tags: int, float, bool, str,
# float_or_auto, float_list.
SCHEMA = {
    ("run", "seed"): ("int", 0),
    ("run", "out_dir"): ("str", "runs/out"),
    ("paths", "model"): ("str", ""),
    ("paths", "latent_model"): ("str", ""),
    ("paths", "target"): ("str", ""),
    ("paths", "occlusion_mask"): ("str", ""),
    ("paths", "landmarks"): ("str", ""),
    ("data", "subdivisions"): ("int", 3),
    ("data", "shape_fields"): ("int", 8),
    ("data", "expr_fields"): ("int", 8),
    ("data", "subjects"): ("int", 16),
    ("data", "expressions_per_subject"): ("int", 5),
    ("data", "shape_sigma"): ("float", 0.12),
    ("data", "expr_sigma"): ("float", 0.08),
    ("data", "sigma_decay"): ("float", 0.9),
    ("data", "bump_width"): ("float", 1.0),
    ("data", "obs_noise"): ("float", 8e-4),
    ("model", "coarse_shape"): ("int", 4),
    ("model", "coarse_expr"): ("int", 4),
    ("model", "local_shape"): ("int", 3),
    ("model", "local_expr"): ("int", 3),
    ("model", "latent_dim"): ("int", 16),
    ("model", "latent_variant"): ("str", "linear"),
    ("fit", "mode"): ("str", "dense"),
    ("fit", "tau"): ("float", 0.2),
    ("fit", "iters"): ("int", 500),
    ("fit", "lambda_lmk"): ("float", 1.0),
    ("fit", "lambda_data"): ("float", 1.0),
    ("fit", "lambda_reg"): ("float", 1e-3),
    ("fit", "eta"): ("float", 2e-2),
    ("diversify", "num_samples"): ("int", 8),
    ("diversify", "iters"): ("int", 200),
    ("diversify", "lambda_s"): ("float", 10.0),
    ("diversify", "lambda_dpp"): ("float", 1.0),
    ("diversify", "eta"): ("float", 5e-2),
    ("diversify", "k"): ("float_or_auto", None),
    ("vae", "epochs"): ("int", 40),
    ("vae", "batch_size"): ("int", 8),
    ("vae", "step_size"): ("float", 1e-3),
    ("vae", "kl_weight"): ("float", 1e-3),
    ("vae", "lap_weight"): ("float", 1e-1),
    ("curriculum", "start"): ("float", 0.05),
    ("curriculum", "end"): ("float", 0.40),
    ("curriculum", "ramp_epochs"): ("int", 30),
    ("benchmark", "instances"): ("int", 10),
    ("benchmark", "fractions"): ("float_list", (0.25, 0.30, 0.40)),
    ("benchmark", "num_samples"): ("int", 10),
    ("benchmark", "write_meshes"): ("bool", False),
}

_SECTION_ORDER = ("run", "paths", "data", "model", "fit", "diversify", "vae",
                  "curriculum", "benchmark")
_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _convert(section: str, key: str, raw: str, lineno: int):
    tag, _ = SCHEMA[(section, key)]
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(raw)
            return _BOOL_WORDS[raw.lower()]
        if tag == "float_or_auto":
            return None if raw.lower() == "auto" else float(raw)
        if tag == "float_list":
            return tuple(float(t) for t in raw.split(",") if t.strip())
        return raw
    except ValueError:
        raise ConfigError(
            f"line {lineno}: cannot parse [{section}] {key} = {raw!r} as {tag}") from None


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings keyed by (section, key)."""

    values: dict = field(repr=False)

    def __post_init__(self):
        missing = [k for k in SCHEMA if k not in self.values]
        if missing:
            raise ConfigError(f"unresolved config keys: {missing}")

    def get(self, section: str, key: str):
        return self.values[(section, key)]

    def canonical_text(self) -> str:
        lines = []
        for section in _SECTION_ORDER:
            lines.append(f"[{section}]")
            for (sec, key), (tag, _) in SCHEMA.items():
                if sec != section:
                    continue
                val = self.values[(sec, key)]
                if tag == "float_or_auto" and val is None:
                    rendered = "auto"
                elif tag == "float_list":
                    rendered = ",".join(f"{v:.12g}" for v in val)
                elif tag == "bool":
                    rendered = "true" if val else "false"
                elif tag == "float":
                    rendered = f"{val:.12g}"
                else:
                    rendered = str(val)
                lines.append(f"{key} = {rendered}")
            lines.append("")
        return "\n".join(lines)

    # typed views over the raw values -------------------------------------

    def fit_hyper(self) -> FitHyper:
        return FitHyper(tau=self.get("fit", "tau"), n_iter=self.get("fit", "iters"),
                        lambda_lmk=self.get("fit", "lambda_lmk"),
                        lambda_data=self.get("fit", "lambda_data"),
                        lambda_reg=self.get("fit", "lambda_reg"),
                        eta=self.get("fit", "eta"))

    def diversify_hyper(self, seed: int | None = None) -> DiversifyHyper:
        return DiversifyHyper(num_samples=self.get("diversify", "num_samples"),
                              n_iter=self.get("diversify", "iters"),
                              lambda_s=self.get("diversify", "lambda_s"),
                              lambda_dpp=self.get("diversify", "lambda_dpp"),
                              eta=self.get("diversify", "eta"),
                              k=self.get("diversify", "k"),
                              seed=self.get("run", "seed") if seed is None else seed)

    def curriculum(self) -> CurriculumSchedule:
        return CurriculumSchedule(self.get("curriculum", "start"),
                                  self.get("curriculum", "end"),
                                  self.get("curriculum", "ramp_epochs"))

    def vae_config(self) -> VaeTrainConfig:
        return VaeTrainConfig(epochs=self.get("vae", "epochs"),
                              batch_size=self.get("vae", "batch_size"),
                              step_size=self.get("vae", "step_size"),
                              kl_weight=self.get("vae", "kl_weight"),
                              lap_weight=self.get("vae", "lap_weight"),
                              curriculum=self.curriculum(),
                              seed=self.get("run", "seed"),
                              latent_dim=self.get("model", "latent_dim"))

    def benchmark_config(self) -> BenchmarkConfig:
        return BenchmarkConfig(
            instances=self.get("benchmark", "instances"),
            fractions=self.get("benchmark", "fractions"),
            num_samples=self.get("benchmark", "num_samples"),
            seed=self.get("run", "seed"),
            subdivisions=self.get("data", "subdivisions"),
            gen_shape_fields=self.get("data", "shape_fields"),
            gen_expr_fields=self.get("data", "expr_fields"),
            bump_width=self.get("data", "bump_width"),
            shape_sigma=self.get("data", "shape_sigma"),
            expr_sigma=self.get("data", "expr_sigma"),
            sigma_decay=self.get("data", "sigma_decay"),
            n_subjects=self.get("data", "subjects"),
            samples_per_subject=self.get("data", "expressions_per_subject"),
            obs_noise=self.get("data", "obs_noise"),
            coarse_shape=self.get("model", "coarse_shape"),
            coarse_expr=self.get("model", "coarse_expr"),
            local_shape=self.get("model", "local_shape"),
            local_expr=self.get("model", "local_expr"),
            latent_dim=self.get("model", "latent_dim"),
            fit=self.fit_hyper(),
            diversify=self.diversify_hyper(),
            model_path=self.get("paths", "model") or None,
            latent_path=self.get("paths", "latent_model") or None,
        )


def default_config() -> RunConfig:
    return RunConfig({key: default for key, (_, default) in SCHEMA.items()})


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {key: default for key, (_, default) in SCHEMA.items()}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in _SECTION_ORDER:
                raise ConfigError(f"{source} line {lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source} line {lineno}: expected `key = value`")
        if section is None:
            raise ConfigError(f"{source} line {lineno}: key outside any [section]")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if (section, key) not in SCHEMA:
            raise ConfigError(f"{source} line {lineno}: unknown key {key!r} in [{section}]")
        values[(section, key)] = _convert(section, key, raw, lineno)
    return RunConfig(values)


def parse_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config_text(text, source=str(path))


def derive_seed(seed: int, stage: int) -> int:
    """One deterministic child seed per pipeline stage."""
    return int(np.random.SeedSequence(seed, spawn_key=(stage,)).generate_state(1)[0])
