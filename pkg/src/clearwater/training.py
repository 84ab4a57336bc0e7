"""Dual tone-mapped loss, batch construction, the optimizer, and the fit loop.

One optimization step samples a batch of pixels from a single image, renders
each ray twice over shared samples and one shared field query (the plain
density and the object-only density), and penalizes both against the
observation in tone-mapped space:

    loss = sum_rays sum_rgb (psi(obs) - psi(pred))^2 + (psi(obs) - psi(refined))^2

The second term is what pushes density out of the water: a correct water
model must explain the observation with the object-only field plus water
terms alone. Adaptive-moment updates use the base learning rate for grid and
water parameters and a scaled-down rate for the MLP heads; all optimizer
state lives in the parameter store under optim/ so checkpoints carry it.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import checkpoint as ck
from . import color
from . import dataset as dst
from . import gradcore as gc
from . import renderer as rd
from . import scenefield as sf
from . import watermodel as wm
from .scenefield import SceneSample

log = logging.getLogger(__name__)

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8

_KNEE = 0.0031308
_GAMMA = 1.0 / 2.4
_TOP_SLOPE = 1.055 * _GAMMA  # d/dx of the power branch at x = 1
_GRAD_FLOOR = 1e-6


def tone_map_node(x):
    """Differentiable linear-to-sRGB transfer for the loss path.

    Above 1 the curve continues linearly with its slope at 1 so bright
    mispredictions keep a gradient; the backward pass clamps its input to
    >= 1e-6 against the steep dark end.
    """
    xv = gc.value_of(x)
    if np.any(xv < 0):
        raise ValueError("tone map input must be non-negative")
    out = np.where(xv <= _KNEE, 12.92 * xv,
                   1.055 * np.clip(xv, _KNEE, 1.0) ** _GAMMA - 0.055)
    out = np.where(xv > 1.0, 1.0 + _TOP_SLOPE * (xv - 1.0), out)
    if not isinstance(x, gc.Node):
        return out

    def vjp(g):
        xc = np.maximum(xv, _GRAD_FLOOR)
        slope = np.where(xc <= _KNEE, 12.92,
                         _TOP_SLOPE * np.clip(xc, _KNEE, 1.0) ** (_GAMMA - 1.0))
        slope = np.where(xc > 1.0, _TOP_SLOPE, slope)
        return (g * slope,)

    return gc.record("tone_map", out, (x,), vjp)


def total_loss(pred, refined_pred, observed):
    """Summed squared tone-mapped error of both predictions vs the observation.

    refined_pred may be None (ablation without the refined term).
    """
    obs = np.asarray(observed, dtype=np.float64)
    if np.any(obs < 0):
        raise ValueError("observed values must be non-negative")
    pv = gc.value_of(pred)
    if pv.shape != obs.shape:
        raise ValueError(f"pred shape {pv.shape} != observed shape {obs.shape}")
    # match the prediction dtype so a float32 forward keeps a float32 backward
    psi_obs = color.tone_map(np.clip(obs, 0.0, 1.0)).astype(pv.dtype, copy=False)
    d = gc.sub(tone_map_node(pred), psi_obs)
    loss = gc.reduce_sum(gc.mul(d, d))
    if refined_pred is not None:
        rv = gc.value_of(refined_pred)
        if rv.shape != obs.shape:
            raise ValueError(f"refined shape {rv.shape} != observed shape {obs.shape}")
        dr = gc.sub(tone_map_node(refined_pred), psi_obs)
        loss = gc.add(loss, gc.reduce_sum(gc.mul(dr, dr)))
    return loss


@dataclass
class TrainConfig:
    """Desk-scale defaults; the full-scale settings remain reachable via TOML."""

    rays_per_batch: int = 256
    samples_per_ray: int = 64
    epochs: int = 5000  # one epoch = one optimization step (one image, one batch)
    learning_rate: float = 1e-2
    head_lr_scale: float = 0.1
    seed: int = 0
    a: float = 3.0
    b: float = 3.0
    beta_init: tuple = wm.BETA_INIT
    backscatter_init: tuple = wm.BACKSCATTER_INIT
    use_refined_loss: bool = True
    jitter: bool = True
    checkpoint_every: int = 1000
    near: float | None = None  # dataset overrides; None keeps the manifest values
    far: float | None = None
    encoder: dict = field(default_factory=dict)  # EncoderConfig overrides
    heads: sf.HeadsConfig = field(default_factory=sf.HeadsConfig)

    def __post_init__(self):
        if self.rays_per_batch < 1 or self.samples_per_ray < 2:
            raise ValueError("need rays_per_batch >= 1 and samples_per_ray >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0 or self.head_lr_scale <= 0:
            raise ValueError("learning rates must be positive")
        if self.a <= 0 or self.b <= 0:
            raise ValueError("gate constants must be positive")
        allowed = {f.name for f in dataclasses.fields(sf.EncoderConfig)}
        for key in self.encoder:
            if key not in allowed:
                raise ValueError(f"unknown encoder option '{key}'")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["beta_init"] = list(self.beta_init)
        out["backscatter_init"] = list(self.backscatter_init)
        return out


_SECTION_KEYS = {
    "encoder": None,  # validated against EncoderConfig fields
    "heads": {"width", "depth"},
    "water": {"a", "b", "beta_init", "backscatter_init"},
    "train": {"rays_per_batch", "samples_per_ray", "epochs", "learning_rate",
              "head_lr_scale", "seed", "use_refined_loss", "jitter",
              "checkpoint_every"},
    "dataset": {"near", "far"},
}


def load_config(path: str) -> TrainConfig:
    """Parse a TOML config; unknown sections or keys are rejected by path."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    for section in raw:
        if section not in _SECTION_KEYS:
            raise ValueError(f"{path}: unknown section '{section}'")
        keys = _SECTION_KEYS[section]
        if keys is not None:
            for key in raw[section]:
                if key not in keys:
                    raise ValueError(f"{path}: unknown key '{section}.{key}'")

    kwargs: dict = {}
    enc = dict(raw.get("encoder", {}))
    for key in ("aabb_lo", "aabb_hi"):
        if key in enc:
            enc[key] = tuple(enc[key])
    kwargs["encoder"] = enc
    if "heads" in raw:
        kwargs["heads"] = sf.HeadsConfig(**raw["heads"])
    water = raw.get("water", {})
    for src, dest in (("a", "a"), ("b", "b"), ("beta_init", "beta_init"),
                      ("backscatter_init", "backscatter_init")):
        if src in water:
            val = water[src]
            kwargs[dest] = tuple(val) if isinstance(val, list) else val
    kwargs.update(raw.get("train", {}))
    for key in ("near", "far"):
        if key in raw.get("dataset", {}):
            kwargs[key] = raw["dataset"][key]
    return TrainConfig(**kwargs)


def config_from_dict(raw: dict) -> TrainConfig:
    """Rebuild a TrainConfig from checkpoint metadata (inverse of to_dict).

    JSON storage turns tuples into lists and the heads dataclass into a
    mapping; both are converted back here.
    """
    kwargs = dict(raw)
    for key in ("beta_init", "backscatter_init"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    enc = dict(kwargs.get("encoder", {}))
    for key in ("aabb_lo", "aabb_hi"):
        if key in enc:
            enc[key] = tuple(enc[key])
    kwargs["encoder"] = enc
    if isinstance(kwargs.get("heads"), dict):
        kwargs["heads"] = sf.HeadsConfig(**kwargs["heads"])
    return TrainConfig(**kwargs)


def build_field(dataset: dst.Dataset, config: TrainConfig) -> sf.SceneField:
    """Scene field whose encoder domain covers everything the rays can sample."""
    enc = dict(config.encoder)
    if "aabb_lo" not in enc or "aabb_hi" not in enc:
        lo, hi = dst.frustum_bounds(dataset)
        enc.setdefault("aabb_lo", tuple(lo))
        enc.setdefault("aabb_hi", tuple(hi))
    return sf.SceneField(sf.EncoderConfig(**enc), config.heads)


def initialize(dataset: dst.Dataset, config: TrainConfig):
    """Fresh field, parameter store, and rng for a training run."""
    rng = np.random.default_rng(config.seed)
    fld = build_field(dataset, config)
    store = gc.ParamStore()
    # start the normals toward the cameras; surfaces lit by a co-centered
    # light never contribute while facing away, and the cosine clamp would
    # otherwise leave a wrong-facing init without any gradient
    forward = np.mean([dataset.camera(i).rotation[:, 2] for i in range(len(dataset))], axis=0)
    fld.register(store, rng, normal_hint=-forward)
    wm.WaterParams.register(store, beta=config.beta_init,
                            backscatter=config.backscatter_init)
    return fld, store, rng


def _is_head_param(name: str) -> bool:
    return name.startswith("field/") and not name.startswith("field/grid/")


def _ensure_adam_state(store: gc.ParamStore) -> None:
    if "optim/t" not in store:
        store.add("optim/t", np.zeros(1))
    for name in store.names():
        if name.startswith("optim/"):
            continue
        if f"optim/m/{name}" not in store:
            store.add(f"optim/m/{name}", np.zeros_like(store.values(name)))
            store.add(f"optim/v/{name}", np.zeros_like(store.values(name)))


def adam_step(store: gc.ParamStore, learning_rate: float, head_lr_scale: float) -> None:
    """One adaptive-moment update from the accumulated gradients."""
    _ensure_adam_state(store)
    t = float(store.values("optim/t")[0]) + 1.0
    store.set_values("optim/t", np.array([t]))
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t
    for name in store.names():
        if name.startswith("optim/"):
            continue
        g = store.grads(name).astype(np.float32)
        m = ADAM_BETA1 * store.values(f"optim/m/{name}") + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * store.values(f"optim/v/{name}") + (1.0 - ADAM_BETA2) * g * g
        rate = learning_rate * (head_lr_scale if _is_head_param(name) else 1.0)
        step = rate * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        store.set_values(name, store.values(name) - step.astype(np.float32))
        store.set_values(f"optim/m/{name}", m)
        store.set_values(f"optim/v/{name}", v)


def water_values(store: gc.ParamStore) -> tuple[np.ndarray, np.ndarray]:
    """Current (beta, backscatter) values behind the softplus, as floats."""
    beta = np.logaddexp(0.0, store.values("water/beta_raw").astype(np.float64))
    backscatter = np.logaddexp(0.0, store.values("water/backscatter_raw").astype(np.float64))
    return beta, backscatter


def _dump_diagnostics(store: gc.ParamStore, frame: int, pred) -> None:
    norms = {name: float(np.linalg.norm(store.values(name)))
             for name in store.names() if not name.startswith("optim/")}
    bad = ""
    pv = gc.value_of(pred) if pred is not None else None
    if pv is not None and not np.all(np.isfinite(pv)):
        bad = f", first bad ray {int(np.argwhere(~np.isfinite(pv))[0][0])}"
    log.error("non-finite loss on frame %d%s; parameter norms: %s",
              frame, bad, json.dumps(norms, sort_keys=True))


def train_step(dataset: dst.Dataset, store: gc.ParamStore, config: TrainConfig,
               rng, *, fld: sf.SceneField | None = None):
    """One optimization step on one image; returns (loss, store).

    A non-finite forward pass rejects the step: diagnostics are logged, no
    parameters change, and the returned loss is nan.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if fld is None:
        fld = build_field(dataset, config)
    frame = int(rng.integers(len(dataset)))
    flat = rng.choice(dataset.height * dataset.width,
                      size=config.rays_per_batch, replace=False)
    rows, cols = np.divmod(flat, dataset.width)
    cam = dataset.camera(frame)
    dirs = rd.pixel_directions(cam, rows.astype(np.float64), cols.astype(np.float64))
    near = config.near if config.near is not None else dataset.near
    far = config.far if config.far is not None else dataset.far
    t, delta = rd.stratified_samples(near, far, config.samples_per_ray, len(dirs),
                                     jitter=config.jitter, rng=rng)
    observed = dataset.images[frame, rows, cols]

    # float32 keeps the tape's memory traffic down; params are float32 anyway
    pts = (cam.center + t[..., None] * dirs[:, None, :]).reshape(-1, 3).astype(np.float32)
    t32, delta32 = t.astype(np.float32), delta.astype(np.float32)
    to_light = (-dirs).astype(np.float32)
    light = rd.LightModel(intensity=dataset.light.intensity.astype(np.float32))

    pred = None
    tape = gc.Tape()
    try:
        ctx = gc.EvalContext(store, tape)
        water = wm.WaterParams.from_context(ctx, a=config.a, b=config.b)
        sample = fld.query(ctx, pts)
        pred = rd.composite_radiance(sample, t32, delta32, to_light, light,
                                     mode="underwater", water=water, d_n=near)
        refined = None
        if config.use_refined_loss:
            bar = SceneSample(sigma=wm.refined_sigma(sample.sigma, config.a, config.b),
                              albedo=sample.albedo, normal=sample.normal)
            refined = rd.composite_radiance(bar, t32, delta32, to_light, light,
                                            mode="underwater", water=water, d_n=near)
        loss = total_loss(pred, refined, observed)
        loss_value = float(gc.value_of(loss))
        store.zero_grads()
        gc.gradient_of(loss, store)
    except gc.NonFiniteError:
        _dump_diagnostics(store, frame, pred)
        return float("nan"), store
    finally:
        # Node.tape and Tape.nodes form a cycle; clearing here frees the graph
        # by refcount instead of leaving ~0.5 GB per step to the cyclic collector.
        tape.clear()

    adam_step(store, config.learning_rate, config.head_lr_scale)
    return loss_value, store


def _config_echo(config_dict: dict) -> dict:
    # epochs is excluded: resuming exists precisely to extend the step count
    echo = json.loads(json.dumps(config_dict))
    echo.pop("epochs", None)
    return echo


CSV_HEADER = "step,loss,beta_r,beta_g,beta_b,S_r,S_g,S_b"


def _csv_row(step: int, loss: float, beta: np.ndarray, backscatter: np.ndarray) -> str:
    vals = [loss, *beta, *backscatter]
    return ",".join([str(step)] + [f"{v:.10e}" for v in vals])


def fit(dataset: dst.Dataset, config: TrainConfig, out_path: str, *,
        log_path: str | None = None, resume: str | None = None) -> str:
    """Run the step loop, writing checkpoints and a loss-curve CSV.

    Resume restores parameters, optimizer state, and the rng stream from a
    checkpoint written by a previous fit with an identical config, then
    appends to the loss log. Returns out_path.
    """
    fld, store, rng = initialize(dataset, config)
    _ensure_adam_state(store)
    start = 0
    if resume is not None:
        loaded, meta = ck.load_checkpoint(resume)
        if _config_echo(meta.get("config", {})) != _config_echo(config.to_dict()):
            raise ValueError("resume checkpoint was trained with a different config")
        if set(loaded.names()) != set(store.names()):
            raise ValueError("resume checkpoint parameters do not match this config")
        for name in loaded.names():
            store.set_values(name, loaded.values(name))
        rng.bit_generator.state = meta["rng_state"]
        start = int(meta["step"])

    def save(step: int) -> None:
        meta = {"config": config.to_dict(), "step": step,
                "rng_state": rng.bit_generator.state}
        ck.save_checkpoint(out_path, store, meta)

    log_file = log_path if log_path is not None else out_path + ".loss.csv"
    for path in (out_path, log_file):
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
    mode = "a" if resume is not None and os.path.exists(log_file) else "w"
    with open(log_file, mode) as fh:
        if mode == "w":
            fh.write(CSV_HEADER + "\n")
        for step in range(start + 1, config.epochs + 1):
            loss_value, _ = train_step(dataset, store, config, rng, fld=fld)
            beta, backscatter = water_values(store)
            fh.write(_csv_row(step, loss_value, beta, backscatter) + "\n")
            if config.checkpoint_every > 0 and step % config.checkpoint_every == 0:
                fh.flush()
                save(step)
    save(max(config.epochs, start))
    return out_path
