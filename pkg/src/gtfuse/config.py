"""Plain-text ``key = value`` configuration.

Keys are grouped by a dotted prefix (``noise.``, ``simulate.``,
``estimate.``). An INI-style ``[section]`` header sets the prefix for the
following lines. All values are SI (seconds, meters, radians) unless the key
name says otherwise (``*_deg``).
"""
from dataclasses import dataclass, field, fields

from .data import NoiseSpec
from .errors import BadConfig, InputError


@dataclass
class SimConfig:
    duration: float = 60.0
    t_start: float = 100.0
    mocap_rate: float = 300.0
    imu_rate: float = 500.0
    dut_rate: float = 90.0
    trajectory: str = "sinusoid"  # sinusoid | spline
    preset: str = "default"  # default | degraded | static
    rot_amp_deg: float = 15.0  # per sinusoid component at low frequency
    trans_amp: float = 0.3
    f_min: float = 0.2
    f_max: float = 1.5
    amp_falloff: float = 1.0  # amplitude ~ f^-n above the lowest band
    components: int = 3
    extrinsic_trans_range: float = 0.2
    clock_offset_range: float = 0.2
    clock_drift_sign: str = "random"  # random | positive | negative
    dut_white_r_deg: float = 0.02
    dut_white_p: float = 3e-4
    dut_drift_r_deg_per_min: float = 1.0
    dut_drift_p_per_min: float = 0.01
    intrinsic_scale: float = 1e-3
    gyro_bias0_deg: float = 0.05
    acc_bias0: float = 0.01
    calib_seed: int = -1  # -1: derive calibration from the main seed
    noiseless: bool = False
    spline_dt: float = 0.05
    truth_rate: float = 1000.0


@dataclass
class EstimateConfig:
    motion_dt: float = 0.05
    offset_dt: float = 20.0
    bias_dt: float = 5.0
    max_iterations: int = 100
    offset_mode: str = "variable"  # variable | fixed
    two_stage: bool = True
    reweight_rounds: int = 3  # final solves with DUT weights from the estimate
    estimate_intrinsics: bool = True
    rate: float = 90.0
    frame: str = "dut"  # dut | global
    keyframe_dt: float = 0.25
    sync_rate: float = 100.0
    max_lag: float = 5.0
    w_min: float = 1e-3
    pair_rot_deg: float = 5.0
    pair_trans: float = 0.1
    pair_time: float = 0.5
    domain_margin: float = 0.1
    fd_check: bool = False


@dataclass
class Config:
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    simulate: SimConfig = field(default_factory=SimConfig)
    estimate: EstimateConfig = field(default_factory=EstimateConfig)


SECTIONS = ("noise", "simulate", "estimate")


def parse_kv(text, source="<config>"):
    out = {}
    prefix = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            prefix = line[1:-1].strip() + "."
            continue
        if "=" not in line:
            raise BadConfig(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            key = prefix + key
        out[key] = (value, lineno)
    return out


def _convert(value, typ, key):
    try:
        if typ is bool:
            v = value.lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        return str(value)
    except ValueError as exc:
        raise BadConfig(f"{key}: cannot parse {value!r} as {typ.__name__}") from exc


def _types(cls):
    return {f.name: (f.type if isinstance(f.type, type) else eval(f.type)) for f in fields(cls)}


def apply_settings(cfg, settings, source="<config>"):
    """Apply ``{'section.key': value}`` (strings or already-typed values)."""
    groups = {s: {} for s in SECTIONS}
    for key, value in settings.items():
        lineno = None
        if isinstance(value, tuple):
            value, lineno = value
        where = f"{source}:{lineno}: " if lineno else ""
        if "." not in key:
            raise BadConfig(f"{where}key {key!r} has no section")
        sec, name = key.split(".", 1)
        if sec not in groups:
            raise BadConfig(f"{where}unknown section {sec!r}")
        types = _types(type(getattr(cfg, sec)))
        if name not in types:
            raise BadConfig(f"{where}unknown key {key!r}")
        groups[sec][name] = _convert(value, types[name], key) if isinstance(value, str) else value
    noise_kw = {**vars(cfg.noise), **groups["noise"]}
    try:
        noise = NoiseSpec(**noise_kw)
    except ValueError as exc:
        raise BadConfig(str(exc)) from exc
    sim = SimConfig(**{**vars(cfg.simulate), **groups["simulate"]})
    est = EstimateConfig(**{**vars(cfg.estimate), **groups["estimate"]})
    out = Config(noise, sim, est)
    validate_config(out)
    return out


def validate_config(cfg):
    s, e = cfg.simulate, cfg.estimate
    for name in ("duration", "mocap_rate", "imu_rate", "dut_rate", "f_min", "f_max", "spline_dt",
                 "truth_rate"):
        if not getattr(s, name) > 0:
            raise BadConfig(f"simulate.{name} must be positive")
    if s.f_max < s.f_min:
        raise BadConfig("simulate.f_max must not be below simulate.f_min")
    if s.amp_falloff < 0:
        raise BadConfig("simulate.amp_falloff must not be negative")
    if s.trajectory not in ("sinusoid", "spline"):
        raise BadConfig(f"simulate.trajectory must be sinusoid or spline, got {s.trajectory!r}")
    if s.preset not in ("default", "degraded", "static"):
        raise BadConfig(f"simulate.preset must be default, degraded or static, got {s.preset!r}")
    if s.clock_drift_sign not in ("random", "positive", "negative"):
        raise BadConfig("simulate.clock_drift_sign must be random, positive or negative")
    for name in ("motion_dt", "offset_dt", "bias_dt", "rate", "keyframe_dt", "sync_rate"):
        if not getattr(e, name) > 0:
            raise BadConfig(f"estimate.{name} must be positive")
    if e.offset_mode not in ("variable", "fixed"):
        raise BadConfig("estimate.offset_mode must be variable or fixed")
    if e.frame not in ("dut", "global"):
        raise BadConfig("estimate.frame must be dut or global")
    if e.max_iterations < 1:
        raise BadConfig("estimate.max_iterations must be at least 1")
    if e.reweight_rounds < 0:
        raise BadConfig("estimate.reweight_rounds must not be negative")


def load_config(path=None, overrides=None):
    cfg = Config()
    settings = {}
    source = "<defaults>"
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except FileNotFoundError as exc:
            raise InputError(f"{path}: config file not found") from exc
        settings.update(parse_kv(text, str(path)))
        source = str(path)
    if overrides:
        settings.update(overrides)
    return apply_settings(cfg, settings, source)


def format_config(cfg):
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        for k, v in vars(getattr(cfg, sec)).items():
            lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
