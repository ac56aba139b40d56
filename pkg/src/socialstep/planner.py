"""CVAE social path planner.

Five MLP sub-networks: a per-neighbor history encoder whose outputs are
sum-aggregated (permutation invariant, any neighbor count), a goal encoder,
a ground-truth future encoder (training only), a latent encoder producing
(mean, log variance), and a decoder mapping environment features plus a
latent draw to the predicted ego future. Trained end to end with
KL + endpoint + average-trajectory losses plus the smooth temporal-logic
safety losses; at test time the latent comes from the standard normal
prior.

All math runs on the diffmath autodiff core; trajectories are ego-frame
(n_pred, 2) arrays laid out row-major when flattened.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffmath as dm
from . import stl
from .crowdsets import SocialSample
from .diffmath import Tensor
from .stl import SafetyParams

FORMAT_VERSION = 1


class TrainingDivergenceError(RuntimeError):
    def __init__(self, message, sample_ids=()):
        super().__init__(message)
        self.sample_ids = list(sample_ids)


class ModelLoadError(ValueError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    """Network widths, safety parameters, and training hyperparameters.

    Width tuples list hidden and output sizes; input sizes are derived
    (neighbor/future histories flatten to 2*n_obs / 2*n_pred, the latent
    encoder reads environment + future features, the decoder reads
    environment features + a latent draw).
    """

    n_obs: int = 8
    n_pred: int = 8
    latent_dim: int = 8
    ped_encoder: tuple[int, ...] = (64, 32, 16)
    goal_encoder: tuple[int, ...] = (32, 16)
    traj_encoder: tuple[int, ...] = (64, 32, 16)
    latent_encoder: tuple[int, ...] = (64, 16)
    decoder: tuple[int, ...] = (128, 64, 16)
    safety: SafetyParams = field(default_factory=SafetyParams)
    learning_rate: float = 1e-3
    momentum: float = 0.9
    grad_clip: float = 5.0  # global gradient-norm cap; 0 disables
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.latent_encoder[-1] != 2 * self.latent_dim:
            raise ValueError("latent encoder must output 2 * latent_dim "
                             "(mean and log variance)")
        if self.decoder[-1] != 2 * self.n_pred:
            raise ValueError("decoder must output 2 * n_pred coordinates")
        if min(self.n_obs, self.n_pred, self.latent_dim) < 1:
            raise ValueError("n_obs, n_pred, latent_dim must be positive")

    @property
    def env_dim(self) -> int:
        return self.ped_encoder[-1] + self.goal_encoder[-1]

    def layer_sizes(self, net: str) -> list[int]:
        inputs = {
            "ped_encoder": 2 * self.n_obs,
            "goal_encoder": 2,
            "traj_encoder": 2 * self.n_pred,
            "latent_encoder": self.env_dim + self.traj_encoder[-1],
            "decoder": self.env_dim + self.latent_dim,
        }
        return [inputs[net]] + list(getattr(self, net))


NET_NAMES = ("ped_encoder", "goal_encoder", "traj_encoder",
             "latent_encoder", "decoder")


@dataclass
class LossBreakdown:
    kl: float
    endpoint: float
    avg_traj: float
    stl_dtheta: float
    stl_vel: float
    total: float

    def as_dict(self):
        return asdict(self)


class PlannerModel:
    """Weights of the five sub-networks plus config echo and training metadata."""

    def __init__(self, config: PlannerConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 0])
        self.nets: dict[str, list[tuple[Tensor, Tensor]]] = {}
        for net in NET_NAMES:
            sizes = config.layer_sizes(net)
            layers = []
            for li, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                # He init on hidden layers; small linear output layers keep
                # the initial latent stats and decoded paths near zero
                std = np.sqrt(2.0 / fan_in) if li < len(sizes) - 2 \
                    else 0.1 / np.sqrt(fan_in)
                w = Tensor(rng.normal(0.0, std, size=(fan_out, fan_in)))
                b = Tensor(np.zeros((fan_out, 1)))
                layers.append((w, b))
            self.nets[net] = layers
        self.meta = {"epochs_seen": 0, "final_losses": None,
                     "variant": _variant_label(config.safety)}

    def parameters(self):
        for net in NET_NAMES:
            for i, (w, b) in enumerate(self.nets[net]):
                yield f"{net}.{i}.w", w
                yield f"{net}.{i}.b", b

    def run_net(self, net: str, x: Tensor) -> Tensor:
        """MLP forward on a (in_dim, batch) column stack; ReLU on hidden layers."""
        layers = self.nets[net]
        cols = x.shape[1]
        for i, (w, b) in enumerate(layers):
            bias = b if cols == 1 else dm.concat([b] * cols, axis=1)
            x = w @ x + bias
            if i < len(layers) - 1:
                x = x.relu()
        return x


def _variant_label(safety: SafetyParams) -> str:
    return "no-STL" if safety.alpha1 == 0.0 and safety.alpha2 == 0.0 else "stl"


def _canonical_neighbor_order(neighbors) -> list[np.ndarray]:
    """Sort histories by their coordinates so aggregation order (and hence
    the floating-point sum) is independent of input order."""
    arrs = [np.asarray(nb, dtype=float) for nb in neighbors]
    return sorted(arrs, key=lambda a: tuple(a.ravel()))


def _ped_sum(model: PlannerModel, neighbors) -> Tensor:
    width = model.config.ped_encoder[-1]
    if not neighbors:
        return Tensor(np.zeros((width, 1)))
    ordered = _canonical_neighbor_order(neighbors)
    cols = np.column_stack([nb.ravel() for nb in ordered])
    enc = model.run_net("ped_encoder", Tensor(cols))
    return enc.sum(axis=1).reshape(width, 1)


def encode_env(model: PlannerModel, sample: SocialSample) -> Tensor:
    """Environment features: summed neighbor encodings next to the goal encoding."""
    goal = Tensor(np.asarray(sample.goal, dtype=float).reshape(2, 1))
    return dm.concat([_ped_sum(model, sample.neighbors),
                      model.run_net("goal_encoder", goal)], axis=0)


def _batch_env(model: PlannerModel, batch: list[SocialSample]) -> Tensor:
    """(env_dim, B) environment features for a batch."""
    goals = Tensor(np.column_stack(
        [np.asarray(s.goal, dtype=float) for s in batch]))
    goal_enc = model.run_net("goal_encoder", goals)
    cols = []
    for i, s in enumerate(batch):
        cols.append(dm.concat([_ped_sum(model, s.neighbors),
                               goal_enc[:, i:i + 1]], axis=0))
    return dm.concat(cols, axis=1)


def training_loss(model: PlannerModel, batch: list[SocialSample],
                  noise: np.ndarray) -> tuple[Tensor, LossBreakdown]:
    """Forward pass of the total training loss for one batch.

    `noise` holds the reparameterization draws, shape (latent_dim, B);
    passing them in keeps the loss a deterministic function of the weights
    (gradient checks freeze them). Returns the scalar loss tensor plus the
    batch-mean breakdown.
    """
    cfg = model.config
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    env = _batch_env(model, batch)
    targets = np.column_stack([np.asarray(s.ego_future, dtype=float).ravel()
                               for s in batch])
    traj_enc = model.run_net("traj_encoder", Tensor(targets))
    stats = model.run_net("latent_encoder", dm.concat([env, traj_enc], axis=0))
    mu = stats[0:cfg.latent_dim, :]
    log_var = stats[cfg.latent_dim:, :]
    sigma = log_var.scale(0.5).exp()
    z = mu + sigma * Tensor(noise)
    pred = model.run_net("decoder", dm.concat([env, z], axis=0))

    kl_vec = (mu.square() + log_var.exp() - log_var - 1.0).sum(axis=0).scale(0.5)
    assert float(kl_vec.data.min()) >= -1e-12, "KL divergence went negative"
    residual = pred - Tensor(targets)
    end_vec = residual[2 * cfg.n_pred - 2:, :].square().sum(axis=0)
    avg_vec = residual.square().sum(axis=0).scale(1.0 / cfg.n_pred)

    _check_finite(kl_vec, end_vec, avg_vec, batch)
    kl = kl_vec.mean()
    endpoint = end_vec.mean()
    avg_traj = avg_vec.mean()
    total = kl + endpoint + avg_traj

    p = cfg.safety
    stl_dtheta_val = stl_vel_val = 0.0
    if p.alpha1 > 0.0 or p.alpha2 > 0.0:
        origin = Tensor(np.zeros((1, 2)))
        dtheta_terms, vel_terms = [], []
        for i, s in enumerate(batch):
            traj = dm.concat([origin, pred[:, i:i + 1].reshape(cfg.n_pred, 2)],
                             axis=0)
            ld, lv = stl.stl_terms(traj, s.theta0, p, tau=p.tau)
            dtheta_terms.append(ld)
            vel_terms.append(lv)
        stl_dtheta = dm.stack_scalars(dtheta_terms).mean()
        stl_vel = dm.stack_scalars(vel_terms).mean()
        stl_dtheta_val = float(stl_dtheta.data)
        stl_vel_val = float(stl_vel.data)
        if p.alpha1 > 0.0:
            total = total + stl_dtheta.scale(p.alpha1)
        if p.alpha2 > 0.0:
            total = total + stl_vel.scale(p.alpha2)

    breakdown = LossBreakdown(
        kl=float(kl.data), endpoint=float(endpoint.data),
        avg_traj=float(avg_traj.data), stl_dtheta=stl_dtheta_val,
        stl_vel=stl_vel_val, total=float(total.data))
    if not np.isfinite(breakdown.total):
        raise TrainingDivergenceError(
            "non-finite training loss", [_sample_id(s) for s in batch])
    return total, breakdown


def _check_finite(kl_vec, end_vec, avg_vec, batch):
    for vec in (kl_vec, end_vec, avg_vec):
        bad = np.flatnonzero(~np.isfinite(vec.data))
        if bad.size:
            sid = _sample_id(batch[int(bad[0])])
            raise TrainingDivergenceError(
                f"non-finite loss for sample {sid}", [sid])


def _sample_id(s: SocialSample) -> str:
    return f"{s.ego_id}:{s.t_anchor}"


class SgdMomentum:
    """Momentum SGD with a global gradient-norm cap.

    The safety losses occasionally spike (their signal frames divide by
    segment lengths), so raw gradients are rescaled whenever their global
    norm exceeds `clip`.
    """

    def __init__(self, model: PlannerModel, lr: float, momentum: float,
                 clip: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = {name: np.zeros_like(p.data)
                         for name, p in model.parameters()}

    def step(self, model: PlannerModel):
        scale = 1.0
        if self.clip > 0.0:
            sq = sum(float(np.sum(p.grad * p.grad))
                     for _, p in model.parameters())
            norm = np.sqrt(sq)
            if norm > self.clip:
                scale = self.clip / norm
        for name, p in model.parameters():
            v = self.momentum * self.velocity[name] - self.lr * scale * p.grad
            self.velocity[name] = v
            p.data = p.data + v


def train_step(model: PlannerModel, batch: list[SocialSample],
               optimizer: SgdMomentum, rng: np.random.Generator) -> LossBreakdown:
    """One SGD step on a batch; returns the batch-mean loss breakdown."""
    noise = rng.standard_normal((model.config.latent_dim, len(batch)))
    total, breakdown = training_loss(model, batch, noise)
    dm.backward(total)
    optimizer.step(model)
    return breakdown


def train(model: PlannerModel, samples: list[SocialSample],
          epochs: int | None = None, log_every: int = 0,
          progress=None) -> list[LossBreakdown]:
    """Full training loop; deterministic given the config seed.

    Returns one epoch-mean LossBreakdown per epoch.
    """
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    if not samples and epochs > 0:
        raise ValueError("no training samples")
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    noise_rng = np.random.default_rng([cfg.seed, 2])
    optimizer = SgdMomentum(model, cfg.learning_rate, cfg.momentum,
                            clip=cfg.grad_clip)
    history: list[LossBreakdown] = []
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(samples))
        sums = np.zeros(6)
        n_batches = 0
        for lo in range(0, len(samples), cfg.batch_size):
            batch = [samples[i] for i in order[lo:lo + cfg.batch_size]]
            bd = train_step(model, batch, optimizer, noise_rng)
            sums += [bd.kl, bd.endpoint, bd.avg_traj, bd.stl_dtheta,
                     bd.stl_vel, bd.total]
            n_batches += 1
        history.append(LossBreakdown(*(sums / n_batches)))
        model.meta["epochs_seen"] += 1
        if progress is not None:
            progress(epoch, history[-1])
    model.meta["final_losses"] = history[-1].as_dict() if history else None
    return history


# ---- inference ----

def _decode(model: PlannerModel, env: Tensor, z: np.ndarray) -> np.ndarray:
    z_t = Tensor(z.reshape(model.config.latent_dim, -1))
    out = model.run_net("decoder", dm.concat([env, z_t], axis=0))
    k = out.shape[1]
    return out.data.T.reshape(k, model.config.n_pred, 2)


def predict(model: PlannerModel, neighbors, goal, mode: str = "mean",
            k: int = 1, seed: int | None = None, theta0: float = 0.0) -> np.ndarray:
    """Predict the ego future in the ego frame.

    mean: decode the prior mean (z = 0), deterministic. sample: k prior
    draws, returns (k, n_pred, 2). best_of: k draws, returns the one with
    the best worst-case safety robustness, ties broken by endpoint
    distance to the goal.
    """
    if mode not in ("mean", "sample", "best_of"):
        raise ValueError(f"unknown predict mode {mode!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    cfg = model.config
    goal = np.asarray(goal, dtype=float).reshape(2)
    env = dm.concat([_ped_sum(model, neighbors),
                     model.run_net("goal_encoder", Tensor(goal.reshape(2, 1)))],
                    axis=0)
    if mode == "mean":
        return _decode(model, env, np.zeros((cfg.latent_dim, 1)))[0]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((cfg.latent_dim, k))
    env_k = dm.concat([env] * k, axis=1)
    trajs = _decode(model, env_k, z)
    if mode == "sample":
        return trajs
    p = cfg.safety
    best, best_key = None, None
    for traj in trajs:
        full = np.vstack([[0.0, 0.0], traj])
        ld, lv = stl.hard_violations(full, theta0, p)
        # recover robustness sign: violation is relu(-rho)
        v_sag, v_lat = stl.velocity_signals(full, 0.4, theta0)
        dth = stl.heading_change_signal(full, theta0)
        sigs = {s.name: s for s in (v_sag, v_lat, dth)}
        phi_vel, phi_dth = stl.build_safety_formulas(p, len(dth))
        rho = min(float(stl.robustness(phi_vel, sigs).data),
                  float(stl.robustness(phi_dth, sigs).data))
        key = (-rho, float(np.linalg.norm(traj[-1] - goal)))
        if best_key is None or key < best_key:
            best, best_key = traj, key
    return best


@dataclass
class EvalResult:
    """Per-sample accuracy and exact-semantics safety violations."""

    ids: list[str]
    ade: np.ndarray
    fde: np.ndarray
    heading_violation: np.ndarray
    velocity_violation: np.ndarray
    variant: str = "stl"

    def summary(self) -> dict:
        out = {"n_samples": len(self.ids), "variant": self.variant}
        for name in ("ade", "fde", "heading_violation", "velocity_violation"):
            arr = getattr(self, name)
            out[name] = {
                "mean": float(np.mean(arr)),
                "median": float(np.median(arr)),
                "q25": float(np.percentile(arr, 25)),
                "q75": float(np.percentile(arr, 75)),
            }
            if name.endswith("violation"):
                out[name]["rate"] = float(np.mean(arr > 0))
        return out


def evaluate(model: PlannerModel, samples: list[SocialSample],
             safety: SafetyParams | None = None) -> EvalResult:
    """Mean-mode ADE/FDE and hard-semantics violations over a sample set."""
    if not samples:
        raise ValueError("empty evaluation set")
    safety = safety if safety is not None else model.config.safety
    ids, ade, fde, vh, vv = [], [], [], [], []
    for s in samples:
        pred = predict(model, s.neighbors, s.goal, mode="mean")
        err = np.linalg.norm(pred - s.ego_future, axis=1)
        ids.append(_sample_id(s))
        ade.append(float(err.mean()))
        fde.append(float(err[-1]))
        full = np.vstack([[0.0, 0.0], pred])
        h, v = stl.hard_violations(full, s.theta0, safety)
        vh.append(h)
        vv.append(v)
    return EvalResult(ids, np.array(ade), np.array(fde), np.array(vh),
                      np.array(vv), variant=model.meta.get("variant", "stl"))


# ---- checkpointing ----

def save_model(model: PlannerModel, path) -> None:
    """Versioned npz checkpoint: config echo, metadata, named weight arrays."""
    cfg = asdict(model.config)
    cfg["safety"] = asdict(model.config.safety)
    arrays = {f"param:{name}": p.data for name, p in model.parameters()}
    np.savez(path, format_version=np.array(FORMAT_VERSION),
             config_json=np.array(json.dumps(cfg)),
             meta_json=np.array(json.dumps(model.meta)), **arrays)


def load_model(path) -> PlannerModel:
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != FORMAT_VERSION:
                raise ModelLoadError(
                    f"checkpoint format v{version} unsupported "
                    f"(reader handles v{FORMAT_VERSION})")
            cfg_dict = json.loads(str(data["config_json"]))
            cfg_dict["safety"] = SafetyParams(**cfg_dict["safety"])
            for key in ("ped_encoder", "goal_encoder", "traj_encoder",
                        "latent_encoder", "decoder"):
                cfg_dict[key] = tuple(cfg_dict[key])
            model = PlannerModel(PlannerConfig(**cfg_dict))
            model.meta = json.loads(str(data["meta_json"]))
            for name, p in model.parameters():
                arr = data[f"param:{name}"]
                if arr.shape != p.data.shape:
                    raise ModelLoadError(f"parameter {name} has shape {arr.shape}, "
                                         f"expected {p.data.shape}")
                p.data = arr.astype(np.float64)
    except ModelLoadError:
        raise
    except (OSError, KeyError, ValueError, zipfile.BadZipFile, json.JSONDecodeError) as e:
        raise ModelLoadError(f"cannot load checkpoint {path}: {e}") from e
    return model


# ---- estimator facade ----

class SocialPathPlanner:
    """fit/predict wrapper so the planner composes like any other estimator.

    Constructor arguments mirror PlannerConfig fields; `get_params` /
    `set_params` follow the usual estimator conventions. After `fit`, the
    trained weights live in `model_` and the per-epoch loss trace in
    `history_`.
    """

    def __init__(self, config: PlannerConfig | None = None, **overrides):
        config = config if config is not None else PlannerConfig()
        if overrides:
            config = replace(config, **overrides)
        self.config = config
        self.model_: PlannerModel | None = None
        self.history_: list[LossBreakdown] | None = None

    def get_params(self, deep: bool = True) -> dict:
        return {"config": self.config}

    def set_params(self, **params) -> "SocialPathPlanner":
        config = params.pop("config", self.config)
        if params:
            config = replace(config, **params)
        self.config = config
        return self

    def fit(self, X: list[SocialSample], y=None) -> "SocialPathPlanner":
        self.model_ = PlannerModel(self.config)
        self.history_ = train(self.model_, X)
        return self

    def predict(self, X) -> np.ndarray:
        if self.model_ is None:
            raise RuntimeError("planner is not fitted")
        if isinstance(X, SocialSample):
            X = [X]
        return np.stack([predict(self.model_, s.neighbors, s.goal, mode="mean")
                         for s in X])

    def score(self, X: list[SocialSample], y=None) -> float:
        """Negative mean ADE (higher is better)."""
        if self.model_ is None:
            raise RuntimeError("planner is not fitted")
        return -float(np.mean(evaluate(self.model_, X).ade))
