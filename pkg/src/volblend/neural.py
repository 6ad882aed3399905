"""The realtime network: dataset generation, tokenizer-encoder/decoder
architecture, Adam training with a linear learning-rate schedule, and
inference.

The network f maps (linear-blend delta, neutral surface) to the
per-vertex correction from the linear blend to the physics-plausible
expression. It never sees absolute expression surfaces.
"""

from __future__ import annotations

import struct
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import FormatError, ValidationError

MODEL_MAGIC = b"VBSN1"
ACTIVATIONS = {"leaky_relu_0.01": 0}


@dataclass
class TrainingConfig:
    """Optimization settings; defaults follow the production recipe at
    desk step count (full scale trains 200k steps on ~50k instances)."""

    steps: int = 20000
    batch_size: int = 128
    lr_start: float = 1e-4
    lr_end: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_fraction: float = 0.9
    seed: int = 0
    # desk-profile token sizes; the full-scale architecture (hidden 1024,
    # token 256) is one config away and what NeuralModel defaults to
    hidden: int = 512
    token: int = 128
    log_every: int = 100

    def validate(self):
        if self.lr_end > self.lr_start:
            raise ValidationError("lr_end must be <= lr_start")
        if not 0 < self.train_fraction < 1:
            raise ValidationError("train_fraction must be in (0, 1)")

    def learning_rate(self, step: int) -> float:
        return self.lr_start + (self.lr_end - self.lr_start) * step / self.steps


@dataclass
class DatasetInstance:
    """One training pair: flattened arrays over 3N coordinates (mm)."""

    neutral: np.ndarray       # (3N,)
    linear_delta: np.ndarray  # (3N,) linear blend minus neutral
    target_delta: np.ndarray  # (3N,) plausible minus linear blend
    identity: int
    weights: np.ndarray       # rig weight vector (metadata)

    def validate(self):
        n = len(self.neutral)
        if len(self.linear_delta) != n or len(self.target_delta) != n:
            raise ValidationError("instance arrays must share length 3N")
        if not np.isfinite(self.target_delta).all():
            raise ValidationError("target delta must be finite")


@dataclass
class Dataset:
    instances: list
    n_coords: int
    identities: np.ndarray  # unique identity ids

    def split(self, rng: np.random.Generator, train_fraction: float = 0.9):
        """Identity-disjoint train/test split."""
        ids = self.identities.copy()
        rng.shuffle(ids)
        n_train = max(1, int(round(train_fraction * len(ids))))
        train_ids = set(ids[:n_train].tolist())
        train = [i for i in self.instances if i.identity in train_ids]
        test = [i for i in self.instances if i.identity not in train_ids]
        return train, test


class NeuralModel:
    """Two tokenizer encoders plus a decoder, all fully connected.

    Layers: delta encoder 3N -> hidden -> token, neutral encoder
    3N -> hidden -> token, decoder concat(2*token) -> hidden -> 3N.
    Hidden activations are leaky ReLU (slope 0.01); the output is
    linear. Inputs are standardized per coordinate with training-set
    statistics stored in the model. The forward pass is deterministic
    and runs row-by-row so outputs do not depend on batch composition.
    """

    SLOPE = 0.01

    def __init__(self, n_coords: int, hidden: int = 1024, token: int = 256,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.n_coords = int(n_coords)
        self.hidden = int(hidden)
        self.token = int(token)
        self.dtype = dtype

        def layer(n_in, n_out, scale=1.0):
            w = rng.normal(size=(n_in, n_out)) * np.sqrt(2.0 / n_in) * scale
            return w.astype(dtype), np.zeros(n_out, dtype)

        n = self.n_coords
        self.params = {}
        for prefix in ("d", "n"):  # delta and neutral encoders
            self.params[f"{prefix}_w1"], self.params[f"{prefix}_b1"] = layer(n, hidden)
            self.params[f"{prefix}_w2"], self.params[f"{prefix}_b2"] = layer(hidden, token)
        self.params["dec_w1"], self.params["dec_b1"] = layer(2 * token, hidden)
        # small final layer: the net starts out predicting ~zero correction
        self.params["dec_w2"], self.params["dec_b2"] = layer(hidden, n, scale=0.01)

        self.norm_delta_mean = np.zeros(n, dtype)
        self.norm_delta_std = np.ones(n, dtype)
        self.norm_neutral_mean = np.zeros(n, dtype)
        self.norm_neutral_std = np.ones(n, dtype)
        # optional audit callback receiving (delta, neutral) raw inputs
        self.input_audit_hook = None

    @property
    def n_vertices(self) -> int:
        return self.n_coords // 3

    def set_normalization(self, deltas: np.ndarray, neutrals: np.ndarray):
        dt = self.dtype
        self.norm_delta_mean = deltas.mean(axis=0).astype(dt)
        self.norm_delta_std = np.maximum(deltas.std(axis=0), 1e-3).astype(dt)
        self.norm_neutral_mean = neutrals.mean(axis=0).astype(dt)
        self.norm_neutral_std = np.maximum(neutrals.std(axis=0), 1e-3).astype(dt)

    def _act(self, x):
        # leaky ReLU via max: for slope < 1, max(x, slope*x) == leaky(x)
        return np.maximum(x, self.SLOPE * x)

    def _forward_normalized(self, xd, xn, cache=None):
        p = self.params
        zd1 = xd @ p["d_w1"] + p["d_b1"]
        ad1 = self._act(zd1)
        td = ad1 @ p["d_w2"] + p["d_b2"]
        zn1 = xn @ p["n_w1"] + p["n_b1"]
        an1 = self._act(zn1)
        tn = an1 @ p["n_w2"] + p["n_b2"]
        cat = np.concatenate([td, tn], axis=-1)
        z3 = cat @ p["dec_w1"] + p["dec_b1"]
        a3 = self._act(z3)
        out = a3 @ p["dec_w2"] + p["dec_b2"]
        if cache is not None:
            cache.update(xd=xd, xn=xn, zd1=zd1, ad1=ad1, zn1=zn1, an1=an1,
                         cat=cat, z3=z3, a3=a3)
        return out

    def predict_correction(self, linear_delta: np.ndarray,
                           neutral: np.ndarray) -> np.ndarray:
        """Correction field f(delta, neutral), batched or single (3N,)."""
        if self.input_audit_hook is not None:
            self.input_audit_hook(linear_delta, neutral)
        single = linear_delta.ndim == 1
        xd = np.atleast_2d(np.asarray(linear_delta, self.dtype))
        xn = np.atleast_2d(np.asarray(neutral, self.dtype))
        if xd.shape[1] != self.n_coords or xn.shape[1] != self.n_coords:
            raise ValidationError(f"inputs must have {self.n_coords} coordinates")
        out = np.empty_like(xd)
        for i in range(len(xd)):  # row-wise: batch-composition invariant
            d = (xd[i] - self.norm_delta_mean) / self.norm_delta_std
            n = (xn[i] - self.norm_neutral_mean) / self.norm_neutral_std
            out[i] = self._forward_normalized(d[None], n[None])[0]
        return out[0] if single else out


def infer(model: NeuralModel, neutral: np.ndarray,
          linear_delta: np.ndarray) -> np.ndarray:
    """Corrected surface: (neutral + linear_delta) + f(linear_delta, neutral).

    Pure function of its inputs; identical calls are bitwise identical.
    """
    neutral = np.asarray(neutral, float).ravel()
    linear_delta = np.asarray(linear_delta, float).ravel()
    correction = model.predict_correction(linear_delta, neutral)
    return (neutral + linear_delta) + correction.astype(float)


def infer_timed(model: NeuralModel, neutral, linear_delta):
    t0 = time.perf_counter()
    out = infer(model, neutral, linear_delta)
    return out, time.perf_counter() - t0


# ----------------------------------------------------------------------------
# Training


def _backward(model: NeuralModel, cache, d_out):
    """Gradients of 0.5*sum(residual^2)-style upstream d_out, for all
    parameters. Returns dict matching model.params."""
    p = model.params
    g = {}
    a3 = cache["a3"]
    g["dec_w2"] = a3.T @ d_out
    g["dec_b2"] = d_out.sum(axis=0)
    d_a3 = d_out @ p["dec_w2"].T
    d_z3 = d_a3 * np.where(cache["z3"] > 0, 1.0, model.SLOPE).astype(model.dtype)
    g["dec_w1"] = cache["cat"].T @ d_z3
    g["dec_b1"] = d_z3.sum(axis=0)
    d_cat = d_z3 @ p["dec_w1"].T
    token = model.token
    d_td = d_cat[:, :token]
    d_tn = d_cat[:, token:]

    for prefix, d_t, a1, z1, x in (("d", d_td, cache["ad1"], cache["zd1"], cache["xd"]),
                                   ("n", d_tn, cache["an1"], cache["zn1"], cache["xn"])):
        g[f"{prefix}_w2"] = a1.T @ d_t
        g[f"{prefix}_b2"] = d_t.sum(axis=0)
        d_a1 = d_t @ p[f"{prefix}_w2"].T
        d_z1 = d_a1 * np.where(z1 > 0, 1.0, model.SLOPE).astype(model.dtype)
        g[f"{prefix}_w1"] = x.T @ d_z1
        g[f"{prefix}_b1"] = d_z1.sum(axis=0)
    return g


def loss_and_gradients(model: NeuralModel, xd, xn, y):
    """Mean-squared-error loss over the batch and parameter gradients."""
    cache = {}
    out = model._forward_normalized(xd, xn, cache)
    resid = out - y
    batch, n = resid.shape
    loss = float((resid.astype(np.float64) ** 2).mean())
    d_out = (resid * (2.0 / (batch * n))).astype(model.dtype)
    return loss, _backward(model, cache, d_out)


@dataclass
class TrainResult:
    model: NeuralModel
    log: list                      # dicts: step, loss, lr
    config: TrainingConfig
    optimizer_state: dict = field(default_factory=dict)


def _stack(instances, dtype=np.float32):
    xd = np.stack([i.linear_delta for i in instances]).astype(dtype)
    xn = np.stack([i.neutral for i in instances]).astype(dtype)
    y = np.stack([i.target_delta for i in instances]).astype(dtype)
    return xd, xn, y


def train(train_instances: list, config: TrainingConfig,
          model: NeuralModel | None = None,
          resume_state: dict | None = None,
          checkpoint_path=None, checkpoint_every: int = 0) -> TrainResult:
    """Adam with the linear learning-rate schedule.

    With a fixed seed the run is deterministic, and resuming from a
    checkpoint reproduces the uninterrupted run bit for bit (optimizer
    moments and the batch-sampling generator state are stored).
    """
    config.validate()
    if not train_instances:
        raise ValidationError("empty training set")
    n_coords = len(train_instances[0].neutral)

    xd, xn, y = _stack(train_instances)
    if model is None:
        model = NeuralModel(n_coords, hidden=config.hidden, token=config.token,
                            rng=np.random.default_rng(config.seed))
        model.set_normalization(xd, xn)
    xd_n = ((xd - model.norm_delta_mean) / model.norm_delta_std).astype(model.dtype)
    xn_n = ((xn - model.norm_neutral_mean) / model.norm_neutral_std).astype(model.dtype)

    if resume_state:
        m = resume_state["m"]
        v = resume_state["v"]
        step0 = int(resume_state["step"])
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_state["rng_state"]
        log = list(resume_state.get("log", []))
    else:
        m = {k: np.zeros_like(p) for k, p in model.params.items()}
        v = {k: np.zeros_like(p) for k, p in model.params.items()}
        step0 = 0
        rng = np.random.default_rng(config.seed + 1)
        log = []

    b1, b2, eps = config.beta1, config.beta2, config.eps
    n_train = len(train_instances)
    scratch = {k: np.empty_like(p) for k, p in model.params.items()}
    for step in range(step0, config.steps):
        idx = rng.integers(0, n_train, size=min(config.batch_size, n_train))
        loss, grads = loss_and_gradients(model, xd_n[idx], xn_n[idx], y[idx])
        if not np.isfinite(loss):
            raise ValidationError(f"training diverged (non-finite loss) at step {step}")
        lr = config.learning_rate(step)
        t = step + 1
        corr1 = 1.0 - b1 ** t
        inv_sqrt_corr2 = 1.0 / np.sqrt(1.0 - b2 ** t)
        for k, p in model.params.items():
            gk = grads[k]
            sc = scratch[k]
            # in-place Adam: the moment buffers dominate memory traffic
            m[k] *= b1
            np.multiply(gk, 1 - b1, out=sc)
            m[k] += sc
            v[k] *= b2
            np.multiply(gk, gk, out=sc)
            sc *= 1 - b2
            v[k] += sc
            np.sqrt(v[k], out=sc)
            sc *= inv_sqrt_corr2
            sc += eps
            np.divide(m[k], sc, out=sc)
            sc *= lr / corr1
            p -= sc
        if step % config.log_every == 0 or step == config.steps - 1:
            log.append({"step": step, "loss": loss, "lr": lr})
        if checkpoint_path and checkpoint_every and (step + 1) % checkpoint_every == 0:
            # a "{step}" placeholder in the path keeps every checkpoint
            path = str(checkpoint_path).format(step=step + 1)
            save_checkpoint(path, model, config,
                            {"m": m, "v": v, "step": step + 1,
                             "rng_state": rng.bit_generator.state, "log": log})

    return TrainResult(model=model, log=log, config=config,
                       optimizer_state={"m": m, "v": v, "step": config.steps,
                                        "rng_state": rng.bit_generator.state,
                                        "log": log})


def write_training_log_csv(path, log: list, header_comment: str = ""):
    with open(path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("step,loss,lr\n")
        for row in log:
            fh.write(f"{row['step']},{row['loss']!r},{row['lr']!r}\n")


# ----------------------------------------------------------------------------
# Evaluation


def evaluate(model: NeuralModel | None, test_instances: list,
             n_latency_calls: int = 0):
    """Per-vertex L2 error statistics of the corrected surfaces against
    ground truth, with the zero-network baseline and optional latency
    measurement. A None model evaluates the baseline alone."""
    if not test_instances:
        raise ValidationError("empty test set")
    per_instance = []
    per_identity: dict[int, list] = {}
    baseline_rows = []
    for inst in test_instances:
        target = inst.linear_delta + inst.target_delta  # plausible minus neutral
        if model is not None:
            corrected = infer(model, inst.neutral, inst.linear_delta)
            pred_delta = corrected - inst.neutral
        else:
            pred_delta = inst.linear_delta
        err = np.linalg.norm((pred_delta - target).reshape(-1, 3), axis=1)
        base = np.linalg.norm(inst.target_delta.reshape(-1, 3), axis=1)
        per_instance.append(err.mean())
        baseline_rows.append(base.mean())
        per_identity.setdefault(inst.identity, []).append(err.mean())

    errs = np.array(per_instance)
    result = {
        "mean_error_mm": float(errs.mean()),
        "p50_error_mm": float(np.percentile(errs, 50)),
        "p90_error_mm": float(np.percentile(errs, 90)),
        "p99_error_mm": float(np.percentile(errs, 99)),
        "baseline_mean_error_mm": float(np.mean(baseline_rows)),
        "n_instances": len(test_instances),
        "per_identity": {int(k): float(np.mean(vv)) for k, vv in per_identity.items()},
    }
    if model is not None and n_latency_calls > 0:
        inst = test_instances[0]
        times = []
        for _ in range(n_latency_calls):
            _, dt = infer_timed(model, inst.neutral, inst.linear_delta)
            times.append(dt)
        times = np.array(times)
        result["latency_mean_ms"] = float(times.mean() * 1e3)
        result["latency_p50_ms"] = float(np.percentile(times, 50) * 1e3)
        result["latency_p99_ms"] = float(np.percentile(times, 99) * 1e3)
    return result


def write_metrics_csv(path, metrics: dict, header_comment: str = ""):
    scalar = {k: v for k, v in metrics.items() if not isinstance(v, dict)}
    with open(path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(",".join(scalar.keys()) + "\n")
        fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                          for v in scalar.values()) + "\n")
        fh.write("identity,mean_error_mm\n")
        for k, v in metrics.get("per_identity", {}).items():
            fh.write(f"{k},{v!r}\n")


# ----------------------------------------------------------------------------
# Model and checkpoint files

_PARAM_ORDER = ("d_w1", "d_b1", "d_w2", "d_b2", "n_w1", "n_b1", "n_w2", "n_b2",
                "dec_w1", "dec_b1", "dec_w2", "dec_b2")


def save_model(model: NeuralModel, path) -> None:
    """Versioned little-endian binary: header (N, layer dims, activation
    id, normalization stats), then row-major weights and biases."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<4i", model.n_coords, model.hidden, model.token,
                             ACTIVATIONS["leaky_relu_0.01"]))
        for arr in (model.norm_delta_mean, model.norm_delta_std,
                    model.norm_neutral_mean, model.norm_neutral_std):
            fh.write(np.ascontiguousarray(arr, "<f4").tobytes())
        for name in _PARAM_ORDER:
            fh.write(np.ascontiguousarray(model.params[name], "<f4").tobytes())


def load_model(path) -> NeuralModel:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != MODEL_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
        n_coords, hidden, token, act = struct.unpack("<4i", fh.read(16))
        if act not in ACTIVATIONS.values():
            raise FormatError(f"{path}: unknown activation id {act}")
        model = NeuralModel(n_coords, hidden=hidden, token=token)

        def arr(shape):
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(count * 4), dtype="<f4")
            if data.size != count:
                raise FormatError(f"{path}: truncated model file")
            return data.reshape(shape).copy()

        model.norm_delta_mean = arr((n_coords,))
        model.norm_delta_std = arr((n_coords,))
        model.norm_neutral_mean = arr((n_coords,))
        model.norm_neutral_std = arr((n_coords,))
        for name in _PARAM_ORDER:
            model.params[name] = arr(model.params[name].shape)
        return model


def save_checkpoint(path, model: NeuralModel, config: TrainingConfig,
                    state: dict) -> None:
    import pickle
    payload = {
        "model": {"n_coords": model.n_coords, "hidden": model.hidden,
                  "token": model.token,
                  "params": {k: v.copy() for k, v in model.params.items()},
                  "norm": (model.norm_delta_mean, model.norm_delta_std,
                           model.norm_neutral_mean, model.norm_neutral_std)},
        "config": asdict(config),
        "state": state,
        "config_hash": config_hash(config),
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh)


def load_checkpoint(path):
    import pickle
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    cm = payload["model"]
    model = NeuralModel(cm["n_coords"], hidden=cm["hidden"], token=cm["token"])
    model.params = cm["params"]
    (model.norm_delta_mean, model.norm_delta_std,
     model.norm_neutral_mean, model.norm_neutral_std) = cm["norm"]
    config = TrainingConfig(**payload["config"])
    return model, config, payload["state"]


def config_hash(config: TrainingConfig) -> str:
    import hashlib
    text = ";".join(f"{k}={v}" for k, v in sorted(asdict(config).items()))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


# ----------------------------------------------------------------------------
# Dataset generation


def generate_dataset(template, regressor, n_identities: int,
                     expressions_per_identity: int, seed: int = 0,
                     level: int = 0, jobs: int = 1,
                     zero_weight_rate: float = 0.05,
                     progress=None) -> Dataset:
    """Sample synthetic heads, fit the layered model, transfer the rig,
    and run the physics pipeline per sampled expression.

    Identity failures are logged and skipped; the run aborts when the
    success rate drops below 90%. Deterministic for a fixed seed
    (identities are seeded independently, so job parallelism cannot
    reorder results).
    """
    args = [(template, regressor, seed, identity, expressions_per_identity,
             level, zero_weight_rate) for identity in range(n_identities)]
    if jobs > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(jobs) as pool:
            results = pool.map(_identity_worker, args)
    else:
        results = [_identity_worker(a) for a in args]

    instances = []
    failures = {}
    for identity, (ok, payload) in enumerate(results):
        if ok:
            instances.extend(payload)
        else:
            failures[identity] = payload
        if progress:
            progress(identity, ok)
    success = 1.0 - len(failures) / max(n_identities, 1)
    if success < 0.9:
        taxonomy = {}
        for msg in failures.values():
            taxonomy[msg] = taxonomy.get(msg, 0) + 1
        raise ValidationError(
            f"dataset generation success rate {success:.0%} < 90%; "
            f"failure taxonomy: {taxonomy}")
    if failures:
        warnings.warn(f"{len(failures)} identities failed and were skipped")
    return Dataset(instances=instances,
                   n_coords=len(instances[0].neutral),
                   identities=np.unique([i.identity for i in instances]))


def _identity_worker(args):
    from . import blendshapes as vb
    from . import fitting as vf
    from . import lhm as vl
    from . import physics as vp

    template, regressor, seed, identity, n_expr, level, zero_rate = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, identity]))
    try:
        spec = vl.sample_identity_spec(rng, level=level)
        skin = vl.generate_synthetic_skin(spec)
        fitted = vf.fit_lhm(skin, regressor, template).lhm
        rig = vb.transfer_rig(vb.build_desk_rig(template), fitted.skin)
        sim = vp.HeadSimulator(fitted)
        stream = vb.sample_weights(rig.n_shapes, n_expr * 3, rng)
        # spread expression picks across the stream
        picks = np.linspace(0, len(stream) - 1, n_expr).astype(int)
        out = []
        for j, frame in enumerate(picks):
            w = stream.weights[frame].copy()
            if (identity * n_expr + j) % max(int(round(1 / zero_rate)), 1) == 0:
                w[:] = 0.0  # rest instances anchor the fixed point
            plausible, linear, _ = vb.evaluate_volumetric_groundtruth(rig, w, sim)
            inst = DatasetInstance(
                neutral=fitted.skin.vertices.ravel().copy(),
                linear_delta=(linear - fitted.skin.vertices).ravel(),
                target_delta=(plausible - linear).ravel(),
                identity=identity, weights=w)
            inst.validate()
            out.append(inst)
        return True, out
    except Exception as exc:  # noqa: BLE001 - failures become taxonomy entries
        return False, f"{type(exc).__name__}: {exc}"
