"""INI experiment configuration with a fixed schema.

Every key has a default; unknown sections or keys are rejected with the
offending line number. Values can be overridden from the environment with
``FRACSDE_<SECTION>__<KEY>`` (for example ``FRACSDE_SCORE__EPOCHS=50``).
"""

import configparser
import hashlib
import json
import os
import re

from .diffnet import TrainPlan
from .errors import ConfigError, FracSdeError
from .sde import BENCHMARK_HORIZON, make_benchmark

ENV_PREFIX = "FRACSDE_"


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    s = s.strip()
    return None if s.lower() in ("", "none", "auto") else float(s)


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s
    return parse


def _grid(s):
    s = s.strip().lower()
    if s == "auto":
        return s
    return tuple(float(v) for v in s.split(","))


def _plan_keys(epochs, batch, lr0=1e-3, decay_rate=0.9, width=64, depth=4):
    return {
        "epochs": (int, epochs, "training epochs (one fresh batch each)"),
        "batch_size": (int, batch, "points per batch"),
        "lr0": (float, lr0, "initial Adam learning rate"),
        "decay_rate": (float, decay_rate, "learning-rate decay factor"),
        "decay_interval": (int, 400, "epochs between decays"),
        "smooth_l1_beta": (float, 1.0, "smooth-L1 threshold (inf = MSE)"),
        "width": (int, width, "hidden units per layer"),
        "depth": (int, depth, "weight layers"),
        "t_min": (float, 1e-3, "smallest training time"),
    }


# section -> key -> (parser, default, description)
SCHEMA = {
    "experiment": {
        "name": (str, "experiment", "output sub-directory name"),
        "benchmark": (_choice(*sorted(BENCHMARK_HORIZON)), "ou_levy", "benchmark SDE"),
        "d": (int, 2, "dimension"),
        "alpha": (float, 1.95, "stability index"),
        "seed": (int, 0, "root seed; every stage derives its streams from it"),
        "T": (_opt_float, None, "horizon (auto = benchmark default)"),
        "grid": (_grid, "auto", "training times: auto or a comma list"),
        "output": (str, "output", "output root directory"),
    },
    "score": dict(
        route=(_choice("fsm", "mixed-fsm", "score-fpinn"), "fsm", "fractional-score route"),
        **_plan_keys(2000, 1000),
    ),
    "vanilla": dict(
        hard_constraint=(_bool, True, "NN t + grad log p0 parameterisation"),
        **_plan_keys(2000, 1000),
    ),
    "ll": dict(
        constraint=(_choice("auto", "hard", "soft"), "auto", "initial condition handling"),
        lambda_initial=(float, 20.0, "soft-mode initial loss weight"),
        lambda_residual=(float, 1.0, "residual loss weight"),
        **_plan_keys(2000, 1000, lr0=3e-3, decay_rate=0.5),
    ),
    "oracle": {
        "kind": (_choice("mc", "radial-kde", "exact"), "mc", "reference LL"),
        "n_mc": (int, 10**6, "Monte-Carlo/KDE sample budget"),
        "method": (_choice("subordinated", "direct"), "subordinated", "MC estimator"),
        "n_test": (int, 2000, "test points drawn from p_T"),
        "t": (_opt_float, None, "evaluation time (auto = T)"),
        "bandwidth": (str, "silverman", "KDE bandwidth: silverman or a number"),
    },
    "simulate": {
        "scheme": (_choice("forward", "implicit"), "forward", "Euler-Maruyama variant"),
        "steps": (int, 100, "time steps on [0, T]"),
        "n": (int, 10000, "trajectories"),
        "save_every": (int, 10, "keep every k-th grid time"),
    },
    "stable": {
        "n": (int, 100000, "samples"),
        "gamma": (float, 1.0, "scale"),
    },
    "evaluate": {
        "drop_fraction": (float, 0.1, "share of lowest-reference test points dropped"),
        "max_ll_rel_l2": (_opt_float, None, "threshold for exit code 4 (auto or none = no gate)"),
    },
}


def _line_index(text):
    """``{(section, key): line}`` for every assignment in the file."""
    index, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), no)
            continue
        m = re.match(r"([^=:\s]+)\s*[=:]", line)
        if m and section is not None:
            index[(section, m.group(1).strip())] = no
    return index


class ExperimentConfig:
    """Resolved configuration: ``cfg[section][key]`` is always set."""

    def __init__(self, values, source=None):
        self.values = values
        self.source = source

    def __getitem__(self, section):
        return self.values[section]

    @classmethod
    def defaults(cls):
        return cls({s: {k: v[1] for k, v in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def from_text(cls, text, source="<string>", environ=None):
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        lines = _line_index(text)
        cfg = cls.defaults()
        cfg.source = source
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{source}: unknown section [{section}]",
                                  line=lines.get((section, None)))
            for key, raw in cp.items(section):
                cfg._set(section, key, raw, where=source, line=lines.get((section, key)))
        env = os.environ if environ is None else environ
        for name, raw in sorted(env.items()):
            if not name.startswith(ENV_PREFIX) or "__" not in name:
                continue
            section, key = name[len(ENV_PREFIX):].split("__", 1)
            section = section.lower()
            if section not in SCHEMA:
                raise ConfigError(f"environment: unknown section in {name}", key=name)
            match = {k.lower(): k for k in SCHEMA[section]}
            cfg._set(section, match.get(key.lower(), key), raw, where=f"environment {name}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, environ=None):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, source=str(path), environ=environ)

    def _set(self, section, key, raw, where, line=None):
        if key not in SCHEMA[section]:
            close = [k for k in SCHEMA[section] if sorted(k) == sorted(key)]
            hint = f" (did you mean {close[0]!r}?)" if close else ""
            raise ConfigError(f"{where}: unknown key in [{section}]{hint}", key=key, line=line)
        parse = SCHEMA[section][key][0]
        try:
            self.values[section][key] = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for [{section}] {key}: {exc}",
                              key=key, line=line) from exc

    def set(self, section, key, value):
        self.values[section][key] = value

    def validate(self):
        e = self["experiment"]
        if e["d"] < 1:
            raise ConfigError("d must be >= 1", key="d")
        if not 0 < e["alpha"] <= 2:
            raise ConfigError("alpha must lie in (0, 2]", key="alpha")
        for s in ("score", "vanilla", "ll"):
            try:
                self.plan(s)
            except FracSdeError as exc:
                raise ConfigError(f"[{s}] {exc}") from exc

    # -- derived objects ------------------------------------------------

    def spec(self):
        e = self["experiment"]
        return make_benchmark(e["benchmark"], e["d"], e["alpha"], seed=e["seed"], T=e["T"])

    def grid(self):
        """Training-time grid; ``None`` lets the samplers decide."""
        g = self["experiment"]["grid"]
        return None if g == "auto" else g

    def plan(self, section):
        v = self[section]
        kw = {k: v[k] for k in _plan_keys(0, 0)}
        if section == "ll":
            kw.update(lambda_initial=v["lambda_initial"], lambda_residual=v["lambda_residual"])
        return TrainPlan(seed=self["experiment"]["seed"], **kw)

    def as_dict(self):
        return json.loads(json.dumps(self.values, default=list))

    def digest(self):
        blob = json.dumps(self.values, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_text(self):
        lines = []
        for s, keys in SCHEMA.items():
            lines.append(f"[{s}]")
            for k in keys:
                v = self.values[s][k]
                if isinstance(v, tuple):
                    v = ",".join(repr(x) for x in v)
                lines.append(f"{k} = {'auto' if v is None else v}")
            lines.append("")
        return "\n".join(lines)


def schema_markdown():
    """Table of every key with its default, for the README."""
    rows = ["| section | key | default | meaning |", "|---|---|---|---|"]
    for s, keys in SCHEMA.items():
        for k, (_, default, doc) in keys.items():
            rows.append(f"| {s} | {k} | {'auto' if default is None else default} | {doc} |")
    return "\n".join(rows)
