"""Experiment runner: configuration, presets, problem construction, runs.

A config file is flat ``key = value`` text; ``#`` starts a comment. Solver
overrides use the ``params.`` prefix, e.g. ``params.max_iters = 300``.
Images are PNG paths or ``synthetic:NAME:SIZE`` generators.
"""
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import fbe
from .denoisers import CosineGradStep, QuadraticGradStep
from .errors import NumericalError, ParameterError, PnPError
from .fidelity import Fidelity
from .operators import (
    BUILTIN_KERNELS, CircularConvolution, Composition, Downsample, builtin_kernel, load_kernel, scale_to_opnorm,
)
from .solvers import SOLVERS, SolverParams, solve
from .tensor import RNG_ALGORITHM, add_gaussian_noise, child_seeds, make_rng, psnr

logger = logging.getLogger(__name__)

NOISE_LEVELS = (2.55, 7.65, 12.75)
FBE_SOLVERS = ("pnp_lbfgs", "minfbe")

# PnP-LBFGS hyperparameters per (task, noise)
TABLE_1 = {
    ("deblur", 2.55): dict(alpha=0.5, gamma=1.0, beta=0.01, lam=1.0, sigma_d_ratio=1.0),
    ("deblur", 7.65): dict(alpha=0.5, gamma=1.0, beta=0.01, lam=1.0, sigma_d_ratio=0.75),
    ("deblur", 12.75): dict(alpha=0.7, gamma=1.0, beta=0.01, lam=1.0, sigma_d_ratio=0.75),
    ("sr", 2.55): dict(alpha=0.5, gamma=1.0, beta=0.01, lam=4.0, sigma_d_ratio=2.0),
    ("sr", 7.65): dict(alpha=0.5, gamma=1.0, beta=0.01, lam=1.5, sigma_d_ratio=1.0),
    ("sr", 12.75): dict(alpha=0.5, gamma=1.0, beta=0.01, lam=1.0, sigma_d_ratio=0.75),
}

# same as TABLE_1 except the SR fidelity weights quoted in the SR section text
SECTION_4_4 = dict(TABLE_1)
SECTION_4_4.update({
    ("sr", 2.55): dict(TABLE_1[("sr", 2.55)], lam=2.0),
    ("sr", 7.65): dict(TABLE_1[("sr", 7.65)], lam=1.5),
    ("sr", 12.75): dict(TABLE_1[("sr", 12.75)], lam=1.0),
})

# relaxed PGD: lam = (alpha + 1) / (alpha L_f) and alpha_hat = 1 / (lam L_f)
TABLE_2 = {
    ("deblur", 2.55): dict(alpha=0.6, lf=1.0, sigma_d_ratio=1.5),
    ("deblur", 7.65): dict(alpha=0.8, lf=1.0, sigma_d_ratio=1.0),
    ("deblur", 12.75): dict(alpha=0.85, lf=1.0, sigma_d_ratio=1.0),
    ("sr", 2.55): dict(alpha=1.0, lf=0.25, sigma_d_ratio=2.0),
    ("sr", 7.65): dict(alpha=1.0, lf=0.25, sigma_d_ratio=2.0),
    ("sr", 12.75): dict(alpha=1.0, lf=0.25, sigma_d_ratio=2.0),
}

PRESETS = ("table_1", "section_4_4", "table_2", "none")

# fidelity weight, step and relaxation used for the remaining baselines
BASELINE_DEFAULTS = {
    "pnp_pgd": dict(lam=1.0, step=0.99, alpha=1.0),
    "pnp_fista": dict(lam=1.0, step=0.99, alpha=1.0),
    "pnp_drsdiff": dict(lam=1.0, step=0.99, alpha=1.0),
    "pnp_drs": dict(lam=1.0, step=0.99, alpha=0.5),
    "dpir_hqs": dict(lam=1.0, step=1.0, alpha=1.0),
}


def _split_list(v):
    if isinstance(v, (list, tuple)):
        return tuple(v)
    return tuple(s.strip() for s in str(v).split(",") if s.strip())


def _opt_float(v):
    if v is None or (isinstance(v, str) and v.strip().lower() in ("", "none")):
        return None
    return float(v)


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ParameterError(f"not a boolean: {v!r}")


@dataclass
class ExperimentConfig:
    task: str = "deblur"
    kernel: str = "gaussian25_1.6"
    sr_scale: int = 2
    noise: float = 7.65
    solver: str = "pnp_lbfgs"
    preset: str = "table_1"
    denoiser: str = "cosine"
    reg_lipschitz: float = 0.9
    reg_omega: float = 2 * math.pi / 0.25
    alpha: float = None
    sigma_d_ratio: float = None
    lam: float = None
    gamma: float = None
    beta: float = None
    denoiser_cmd: str = ""
    denoiser_address: str = ""
    seed: int = 0
    images: tuple = ("synthetic:blend:64",)
    out: str = "runs"
    init: str = "nearest"
    timing: bool = True
    workers: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = _split_list(self.images)
        if self.task not in ("deblur", "sr"):
            raise ParameterError(f"task must be 'deblur' or 'sr', got {self.task!r}")
        if self.sr_scale not in (2, 3):
            raise ParameterError("sr_scale must be 2 or 3")
        if self.preset not in PRESETS:
            raise ParameterError(f"preset must be one of {PRESETS}")
        if self.solver not in SOLVERS:
            raise ParameterError(f"unknown solver {self.solver!r}")
        if self.denoiser not in ("cosine", "quadratic", "external"):
            raise ParameterError(f"unknown denoiser {self.denoiser!r}")
        if self.init not in ("nearest", "adjoint"):
            raise ParameterError("init must be 'nearest' or 'adjoint'")
        if self.noise < 0:
            raise ParameterError("noise must be non-negative")
        known = {f.name for f in fields(SolverParams)}
        bad = set(self.params) - known
        if bad:
            raise ParameterError(f"unknown solver parameters: {sorted(bad)}")

    @property
    def sigma(self):
        """Noise standard deviation on the [0, 1] intensity scale."""
        return self.noise / 255.0

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "params":
                for k in sorted(v):
                    lines.append(f"params.{k} = {_fmt_value(v[k])}")
                continue
            lines.append(f"{f.name} = {_fmt_value(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        raw, params = {}, {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"line {n}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("params."):
                params[key[len("params."):]] = value
            else:
                raw[key] = value
        return cls.from_dict(raw, params)

    @classmethod
    def from_dict(cls, raw, params=None):
        kinds = {
            "sr_scale": int, "seed": int, "workers": int,
            "noise": float, "reg_lipschitz": float, "reg_omega": float,
            "alpha": _opt_float, "sigma_d_ratio": _opt_float, "lam": _opt_float,
            "gamma": _opt_float, "beta": _opt_float, "timing": _bool, "images": _split_list,
        }
        names = {f.name for f in fields(cls)} - {"params"}
        unknown = set(raw) - names
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: kinds.get(k, str)(v) for k, v in raw.items()}
        kw["params"] = {k: _coerce_param(k, v) for k, v in (params or {}).items()}
        return cls(**kw)

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ParameterError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def replace(self, **changes):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return ExperimentConfig(**d)


def _fmt_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(str(s) for s in v)
    return str(v)


def _coerce_param(name, value):
    defaults = SolverParams()
    if not hasattr(defaults, name):
        raise ParameterError(f"unknown solver parameter {name!r}")
    current = getattr(defaults, name)
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        return _bool(value)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float) or current is None:
        return _opt_float(value)
    return value


# -- presets -----------------------------------------------------------------

def _row(table, cfg):
    key = (cfg.task, cfg.noise)
    if key not in table:
        raise ParameterError(f"preset {cfg.preset!r} has no entry for task={cfg.task}, noise={cfg.noise}")
    return table[key]


def resolve_hyperparameters(cfg):
    """Effective fidelity weight, step, relaxation and denoiser strength.

    Explicit config values override the preset. Returns a dict with keys
    ``fid_lam, step, alpha, alpha_hat, gamma, beta, sigma_d``.
    """
    h = dict(fid_lam=1.0, step=1.0, alpha=1.0, alpha_hat=None, gamma=1.0, beta=0.01, sigma_d_ratio=1.0)
    if cfg.preset != "none":
        if cfg.solver in FBE_SOLVERS:
            row = _row(TABLE_1 if cfg.preset == "table_1" else SECTION_4_4, cfg) if cfg.preset != "table_2" else None
            if row is not None:
                h.update(fid_lam=row["lam"], alpha=row["alpha"], gamma=row["gamma"], beta=row["beta"],
                         sigma_d_ratio=row["sigma_d_ratio"])
        elif cfg.solver == "pnp_alpha_pgd":
            row = _row(TABLE_2, cfg)
            step = (row["alpha"] + 1.0) / (row["alpha"] * row["lf"])
            h.update(alpha=row["alpha"], step=step, alpha_hat=1.0 / (step * row["lf"]),
                     sigma_d_ratio=row["sigma_d_ratio"])
        else:
            b = BASELINE_DEFAULTS[cfg.solver]
            h.update(fid_lam=b["lam"], step=b["step"], alpha=b["alpha"])
    if cfg.lam is not None:
        h["fid_lam"] = cfg.lam
    if cfg.alpha is not None:
        h["alpha"] = cfg.alpha
    if cfg.gamma is not None:
        h["gamma"] = cfg.gamma
    if cfg.beta is not None:
        h["beta"] = cfg.beta
    if cfg.sigma_d_ratio is not None:
        h["sigma_d_ratio"] = cfg.sigma_d_ratio
    h["sigma_d"] = h["sigma_d_ratio"] * cfg.sigma
    return h


# -- images --------------------------------------------------------------------

SYNTHETIC_IMAGES = ("blend", "bars", "disk", "ramp", "checker")


def synthetic_image(name, size=64, channels=3):
    """Deterministic test images in [0, 1] with shape ``(channels, size, size)``."""
    n = int(size)
    yy, xx = np.mgrid[0:n, 0:n] / n
    if name == "blend":
        chans = [0.5 + 0.3 * np.sin(6 * xx) * np.cos(4 * yy), (xx > 0.5) * 0.6 + 0.2, 0.4 + 0.4 * yy]
    elif name == "bars":
        chans = [0.2 + 0.6 * ((np.floor(8 * xx) % 2) == 0)] * 3
    elif name == "disk":
        r = np.hypot(xx - 0.5, yy - 0.5)
        chans = [0.15 + 0.7 * (r < 0.3), 0.15 + 0.5 * (r < 0.2), 0.2 + 0.6 * np.exp(-8 * r * r)]
    elif name == "ramp":
        chans = [0.1 + 0.8 * xx, 0.1 + 0.8 * yy, 0.5 + 0.0 * xx]
    elif name == "checker":
        c = ((np.floor(4 * xx) + np.floor(4 * yy)) % 2)
        chans = [0.25 + 0.5 * c, 0.75 - 0.5 * c, 0.5 + 0.2 * c]
    else:
        raise ParameterError(f"unknown synthetic image {name!r}; known: {SYNTHETIC_IMAGES}")
    img = np.stack(chans)[:channels]
    return np.clip(img, 0.0, 1.0).astype(np.float64)


def load_png(path):
    from PIL import Image
    try:
        with Image.open(path) as im:
            im = im.convert("RGB") if im.mode not in ("L", "RGB") else im
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise ParameterError(f"cannot read image {path}: {exc}") from exc
    return arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1)).copy()


def save_png(path, x):
    """8-bit export; clamping to [0, 1] happens only here."""
    from PIL import Image
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(x * 255.0).astype(np.uint8)
    im = Image.fromarray(u8[0], mode="L") if u8.shape[0] == 1 else Image.fromarray(np.transpose(u8, (1, 2, 0)), mode="RGB")
    im.save(path)


def load_image(spec):
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        name = parts[1]
        size = int(parts[2]) if len(parts) > 2 else 64
        return synthetic_image(name, size)
    return load_png(spec)


def image_tag(spec):
    if spec.startswith("synthetic:"):
        return spec.replace(":", "-")
    return Path(spec).stem


# -- problems ------------------------------------------------------------------

@dataclass
class Problem:
    fid: Fidelity
    reg: object
    x_true: np.ndarray
    y: np.ndarray
    x0: np.ndarray
    hyper: dict
    meta: dict


def resolve_kernel(spec):
    if spec in BUILTIN_KERNELS:
        return builtin_kernel(spec)
    if os.path.exists(spec):
        return load_kernel(spec)
    raise ParameterError(f"kernel {spec!r} is neither a builtin ({sorted(BUILTIN_KERNELS)}) nor a readable file")


def nearest_upsample(u, s, shape):
    """Replicate each low-resolution pixel over an ``s x s`` block, edge-padded to ``shape``."""
    c, h, w = shape
    up = np.repeat(np.repeat(u, s, axis=1), s, axis=2)[:, :h, :w]
    ph, pw = h - up.shape[1], w - up.shape[2]
    if ph or pw:
        up = np.pad(up, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return up


def build_regularizer(cfg, hyper, client=None):
    if cfg.denoiser == "cosine":
        return CosineGradStep(lipschitz=cfg.reg_lipschitz, omega=cfg.reg_omega, alpha=hyper["alpha"])
    if cfg.denoiser == "quadratic":
        return QuadraticGradStep(lipschitz=cfg.reg_lipschitz, alpha=hyper["alpha"])
    from .protocol import DenoiserClient, ExternalDenoiser, open_transport
    if client is None:
        client = DenoiserClient(open_transport(cmd=cfg.denoiser_cmd or None, address=cfg.denoiser_address or None))
    return ExternalDenoiser(client, hyper["sigma_d"], alpha=hyper["alpha"], lipschitz=cfg.reg_lipschitz)


def build_problem(cfg, image=None, seed=None):
    """Fidelity, regularizer, ground truth, measurement and starting point.

    Deblur uses a circular convolution rescaled to ``||A^T A|| = 0.96``;
    SR uses ``A = S K`` with the unscaled kernel. ``x0 = y`` for deblur;
    for SR ``init`` selects nearest-neighbour upsampling or ``A^T y``.
    """
    spec = cfg.images[0] if image is None else image
    x_true = load_image(spec) if isinstance(spec, str) else np.asarray(spec, dtype=np.float64)
    hyper = resolve_hyperparameters(cfg)
    k = resolve_kernel(cfg.kernel)
    blur = CircularConvolution(k, x_true.shape)
    if cfg.task == "deblur":
        op = scale_to_opnorm(blur)
    else:
        op = Composition([blur, Downsample(cfg.sr_scale, x_true.shape)])
    rng = make_rng(cfg.seed if seed is None else seed)
    y = add_gaussian_noise(op.apply(x_true), cfg.sigma, rng)
    if cfg.task == "deblur":
        x0 = y.copy()
    elif cfg.init == "nearest":
        x0 = nearest_upsample(y, cfg.sr_scale, x_true.shape)
    else:
        x0 = op.adjoint(y)
    fid = Fidelity(op, y, lam=hyper["fid_lam"])
    reg = build_regularizer(cfg, hyper)
    meta = {
        "init": "y" if cfg.task == "deblur" else cfg.init,
        "rng": RNG_ALGORITHM,
        "psnr_border": "none (full image)",
        "sigma": cfg.sigma,
    }
    return Problem(fid=fid, reg=reg, x_true=x_true, y=y, x0=x0, hyper=hyper, meta=meta)


def solver_params(cfg, problem):
    """SolverParams for a problem, clamping an inadmissible fixed step.

    The fixed-step solvers need ``gamma < min((1-beta)/L_f, 1/M)``; when a
    preset violates it (large SR fidelity weights) the step is reduced to
    0.99 times the bound and a warning is returned.
    """
    h = problem.hyper
    warnings = []
    gamma = h["gamma"]
    if cfg.solver == "pnp_lbfgs":
        bound = fbe.step_bound(problem.fid, problem.reg, h["beta"])
        if not gamma < bound:
            new = 0.99 * bound
            warnings.append(f"gamma={gamma} violates the step bound {bound:.6g}; using {new:.6g}")
            gamma = new
    kw = dict(
        gamma0=gamma, beta=h["beta"], lam=h["step"], alpha=h["alpha"], alpha_hat=h["alpha_hat"],
        sigma_d=h["sigma_d"], noise_sigma=cfg.sigma, dpir_steps=8 if cfg.task == "deblur" else 24,
        record_timing=cfg.timing,
    )
    kw.update(cfg.params)
    return SolverParams(**kw), warnings


# -- runs ------------------------------------------------------------------------

@dataclass
class RunSummary:
    image: str
    task: str
    kernel: str
    noise: float
    solver: str
    status: str
    iterations: int
    final_psnr: float
    wall_time: float
    calls: dict
    max_direction_ratio: float
    fallbacks: int = 0
    secant_rejections: int = 0
    gamma_final: float = math.nan
    error: str = None
    warnings: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    csv: str = ""

    def to_dict(self):
        d = asdict(self)
        for k in ("final_psnr", "wall_time", "max_direction_ratio", "gamma_final", "noise"):
            v = d[k]
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = str(v)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("final_psnr", "wall_time", "max_direction_ratio", "gamma_final", "noise"):
            if isinstance(d.get(k), str):
                d[k] = float(d[k])
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def run_filename(cfg, image):
    kernel = cfg.kernel if cfg.kernel in BUILTIN_KERNELS else Path(cfg.kernel).stem
    return f"{image_tag(image)}__{kernel}__s{cfg.noise:g}__{cfg.solver}"


def run_single(cfg, image, seed, out_dir=None):
    """Build, solve and optionally write the CSV and summary JSON for one image."""
    problem = build_problem(cfg, image, seed=seed)
    params, warnings = solver_params(cfg, problem)
    error = None
    try:
        record = solve(cfg.solver, problem.x0, problem.fid, problem.reg, params, x_true=problem.x_true)
    except (NumericalError, PnPError) as exc:
        record = getattr(exc, "record", None)
        error = f"{type(exc).__name__}: {exc}"
        logger.error("run %s failed: %s", image, error)
        if record is None:
            from .solvers import RunRecord
            record = RunRecord(solver=cfg.solver, status="error", x=problem.x0)
    finally:
        close = getattr(getattr(problem.reg, "client", None), "close", None)
        if close is not None:
            close()
    x = record.x if record.x is not None else problem.x0
    gamma_final = record.rows[-1].gamma if record.rows else params.gamma0
    summary = RunSummary(
        image=image, task=cfg.task, kernel=cfg.kernel, noise=cfg.noise, solver=cfg.solver,
        status=record.status if error is None else "error", iterations=record.iterations,
        final_psnr=float(psnr(x, problem.x_true)), wall_time=record.wall_time if cfg.timing else 0.0,
        calls=dict(record.calls), max_direction_ratio=record.max_direction_ratio,
        fallbacks=record.fallbacks, secant_rejections=record.secant_rejections, gamma_final=float(gamma_final),
        error=error, warnings=warnings + list(record.warnings), meta=dict(problem.meta, hyper=problem.hyper),
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        base = run_filename(cfg, image)
        csv_path = out / f"{base}.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            record.write_csv(fh)
        summary.csv = csv_path.name
        (out / f"{base}.json").write_text(summary.to_json() + "\n", encoding="utf-8")
    return record, summary


def _run_job(args):
    cfg_text, image, seed, out_dir = args
    _, summary = run_single(ExperimentConfig.from_text(cfg_text), image, seed, out_dir)
    return summary


def run_experiment(cfg, out_dir=None):
    """Run every image of ``cfg``; returns the list of RunSummary.

    Per-image seeds derive from ``cfg.seed``; results do not depend on the
    worker count. An aggregate ``summary.json`` is written to ``out_dir``.
    """
    out_dir = cfg.out if out_dir is None else out_dir
    seeds = child_seeds(cfg.seed, len(cfg.images))
    jobs = [(cfg.to_text(), img, s, out_dir) for img, s in zip(cfg.images, seeds)]
    if cfg.workers > 1 and len(jobs) > 1 and cfg.denoiser != "external":
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            summaries = list(pool.map(_run_job, jobs))
    else:
        summaries = [_run_job(j) for j in jobs]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        agg = [s.to_dict() for s in summaries]
        Path(out_dir, "summary.json").write_text(json.dumps(agg, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        Path(out_dir, "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return summaries


def benchmark_config(noise, solver="pnp_lbfgs", size=64, **changes):
    """The 64x64 deblur benchmark used for the iteration-count comparison:
    weak cosine potential, residual stopping at 1e-6."""
    cfg = ExperimentConfig(
        task="deblur", kernel="gaussian25_1.6", noise=noise, solver=solver, preset="table_1",
        denoiser="cosine", reg_lipschitz=0.05, reg_omega=2 * math.pi, images=(f"synthetic:blend:{size}",),
        timing=False, params=dict(stop_rule="residual_only", residual_tol=1e-6, max_iters=3000, track_phi=False),
    )
    return cfg.replace(**changes) if changes else cfg
