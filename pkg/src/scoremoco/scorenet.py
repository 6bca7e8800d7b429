"""Small convolutional score network with hand-written derivatives.

The network maps an image x at noise level sigma to a score estimate

    s(x, t) = [F(c_in * x, log sigma) + alpha * c_in * x] / sigma,
    c_in    = 1 / sqrt(sigma_data^2 + sigma^2),

where F is a stack of 3x3 convolutions: one input layer, four residual
blocks and one output layer (six convolutions), SiLU activations. Besides the
plain forward pass it provides parameter gradients (training), input VJPs and
JVPs, and the forward-over-reverse pass needed by the likelihood adjoint:
grad_x [c^T s(x) + w * sum_m eps_m^T (ds/dx) eps_m].
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DivergenceError, FormatError, IncompatibleWeightsError
from .grid import SeededRng
from .scorefield import NoiseSchedule, ScoreFunction

_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _silu(a):
    return a * _sigmoid(a)


def _silu_d1(a):
    s = _sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


def _silu_d2(a):
    s = _sigmoid(a)
    return s * (1.0 - s) * (2.0 + a * (1.0 - 2.0 * s))


def _im2col(h):
    b, hh, ww, c = h.shape
    p = np.pad(h, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, hh, ww, 9 * c))
    for k, (dy, dx) in enumerate(_OFFSETS):
        cols[..., k * c:(k + 1) * c] = p[:, dy:dy + hh, dx:dx + ww, :]
    return cols


def conv3x3(h, weight, bias=None):
    """Zero-padded 3x3 convolution, NHWC layout, weight of shape (9*C_in, C_out)."""
    b, hh, ww, c = h.shape
    out = (_im2col(h).reshape(-1, 9 * c) @ weight).reshape(b, hh, ww, -1)
    if bias is not None:
        out += bias
    return out


def conv3x3_transpose(g, weight):
    """Adjoint of :func:`conv3x3` with respect to its input."""
    b, hh, ww, _ = g.shape
    c = weight.shape[0] // 9
    gc = (g.reshape(-1, g.shape[-1]) @ weight.T).reshape(b, hh, ww, 9 * c)
    gp = np.zeros((b, hh + 2, ww + 2, c))
    for k, (dy, dx) in enumerate(_OFFSETS):
        gp[:, dy:dy + hh, dx:dx + ww, :] += gc[..., k * c:(k + 1) * c]
    return gp[:, 1:-1, 1:-1, :]


def conv3x3_weight_grad(h, g):
    b, hh, ww, c = h.shape
    cols = _im2col(h).reshape(-1, 9 * c)
    gf = g.reshape(-1, g.shape[-1])
    return cols.T @ gf, gf.sum(axis=0)


def _round_f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class Architecture:
    channels: int = 32
    n_res_blocks: int = 4
    sigma_data: float = 0.5
    in_channels: int = 2
    kernel: int = 3
    activation: str = "silu"

    @property
    def n_layers(self) -> int:
        return self.n_res_blocks + 2

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        c = self.channels
        shapes = [("conv0.w", (9 * self.in_channels, c)), ("conv0.b", (c,))]
        for k in range(1, self.n_res_blocks + 1):
            shapes += [(f"conv{k}.w", (9 * c, c)), (f"conv{k}.b", (c,))]
        last = self.n_res_blocks + 1
        shapes += [(f"conv{last}.w", (9 * c, 1)), (f"conv{last}.b", (1,)), ("skip", (1,))]
        return shapes

    def to_dict(self) -> dict:
        return {
            "kind": "conv-residual",
            "channels": self.channels,
            "n_layers": self.n_layers,
            "n_res_blocks": self.n_res_blocks,
            "in_channels": self.in_channels,
            "kernel": self.kernel,
            "activation": self.activation,
            "sigma_data": self.sigma_data,
            "param_shapes": [[name, list(shape)] for name, shape in self.param_shapes()],
        }

    def hash(self) -> str:
        return architecture_hash(self.to_dict())


def architecture_hash(arch: dict) -> str:
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()


class ScoreNet(ScoreFunction):
    """Time-conditional convolutional score model (see module docstring)."""

    def __init__(self, schedule: NoiseSchedule, arch: Architecture | None = None,
                 params: np.ndarray | None = None, seed: int = 0):
        self.schedule = schedule
        self.arch = arch or Architecture()
        self._shapes = self.arch.param_shapes()
        self.n_params = sum(int(np.prod(s)) for _, s in self._shapes)
        if params is None:
            params = _round_f32(self._init_params(seed))
        self.set_params(params)

    # -- parameters -------------------------------------------------------
    def _init_params(self, seed: int) -> np.ndarray:
        rng = SeededRng(seed, 0x5C0E).generator()
        chunks = []
        for name, shape in self._shapes:
            if name.endswith(".w"):
                fan_in = shape[0]
                std = math.sqrt(2.0 / fan_in)
                if name.startswith("conv0"):
                    scale = 1.0
                elif shape[1] == 1:
                    scale = 0.1
                else:
                    scale = 0.2
                chunks.append(rng.normal(0.0, std * scale, size=shape).ravel())
            else:
                chunks.append(np.zeros(int(np.prod(shape))))
        return np.concatenate(chunks)

    def set_params(self, params: np.ndarray) -> None:
        params = np.asarray(params, dtype=np.float64).ravel()
        if params.size != self.n_params:
            raise IncompatibleWeightsError(f"expected {self.n_params} parameters, got {params.size}")
        self.params = params.copy()
        self._views = {}
        offset = 0
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            self._views[name] = self.params[offset:offset + n].reshape(shape)
            offset += n

    def _layers(self):
        v = self._views
        return [(v[f"conv{k}.w"], v[f"conv{k}.b"]) for k in range(self.arch.n_layers)]

    # -- passes -----------------------------------------------------------
    def _conditioning(self, sig):
        sig = np.atleast_1d(np.asarray(sig, dtype=np.float64))
        c_in = 1.0 / np.sqrt(self.arch.sigma_data**2 + sig**2)
        return sig, c_in

    def _forward(self, x, sig, tangents=None):
        """Primal (and optional tangent) pass.

        x: (B, H, W); sig: scalar or (B,); tangents: (M, H, W), only with B = 1.
        Returns (o, o_dot, cache) with o of shape (B, H, W).
        """
        sig, c_in = self._conditioning(sig)
        b = x.shape[0]
        cb = c_in.reshape(-1, 1, 1)
        xh = cb * x
        z0 = np.stack([xh, np.broadcast_to(np.log(sig).reshape(-1, 1, 1), x.shape)], axis=-1)
        layers = self._layers()
        zt = None
        if tangents is not None:
            if b != 1:
                raise ValueError("tangent passes need a single primal image")
            zt = np.zeros(tangents.shape + (2,))
            zt[..., 0] = cb * tangents
        cache = {"inputs": [], "pre": [], "pre_dot": [], "x_hat": xh, "c_in": c_in, "sig": sig}

        w, bias = layers[0]
        a = conv3x3(z0, w, bias)
        cache["inputs"].append((z0, zt))
        cache["pre"].append(a)
        h = _silu(a)
        ht = None
        if zt is not None:
            at = conv3x3(zt, w)
            cache["pre_dot"].append(at)
            ht = _silu_d1(a) * at
        for w, bias in layers[1:-1]:
            cache["inputs"].append((h, ht))
            a = conv3x3(h, w, bias)
            cache["pre"].append(a)
            h = h + _silu(a)
            if ht is not None:
                at = conv3x3(ht, w)
                cache["pre_dot"].append(at)
                ht = ht + _silu_d1(a) * at
        w, bias = layers[-1]
        cache["inputs"].append((h, ht))
        alpha = self._views["skip"][0]
        o = conv3x3(h, w, bias)[..., 0] + alpha * xh
        od = None
        if ht is not None:
            od = conv3x3(ht, w)[..., 0] + alpha * cb * tangents
        return o, od, cache

    def _reverse_input(self, cache, o_bar, od_bar=None):
        """grad_x of <o_bar, o> + <od_bar, o_dot>, summed over the o_bar batch."""
        layers = self._layers()
        alpha = self._views["skip"][0]
        w, _ = layers[-1]
        xh_bar = alpha * o_bar
        h_bar = conv3x3_transpose(o_bar[..., None], w)
        hd_bar = conv3x3_transpose(od_bar[..., None], w) if od_bar is not None else None
        n = len(layers)
        for k in range(n - 2, 0, -1):
            w, _ = layers[k]
            a = cache["pre"][k]
            a_bar = h_bar * _silu_d1(a)
            if hd_bar is not None:
                at = cache["pre_dot"][k]
                a_bar = a_bar + np.sum(hd_bar * at, axis=0, keepdims=True) * _silu_d2(a)
                ad_bar = hd_bar * _silu_d1(a)
                hd_bar = hd_bar + conv3x3_transpose(ad_bar, w)
            h_bar = h_bar + conv3x3_transpose(a_bar, w)
        w, _ = layers[0]
        a = cache["pre"][0]
        a_bar = h_bar * _silu_d1(a)
        if hd_bar is not None:
            a_bar = a_bar + np.sum(hd_bar * cache["pre_dot"][0], axis=0, keepdims=True) * _silu_d2(a)
        z_bar = conv3x3_transpose(a_bar, w)
        xh_bar = xh_bar + z_bar[..., 0]
        return cache["c_in"].reshape(-1, 1, 1) * xh_bar

    def _reverse_params(self, cache, o_bar):
        layers = self._layers()
        grads = {}
        alpha = self._views["skip"][0]
        n = len(layers)
        grads["skip"] = np.array([np.sum(o_bar * cache["x_hat"])])
        h, _ = cache["inputs"][-1]
        w, _ = layers[-1]
        gw, gb = conv3x3_weight_grad(h, o_bar[..., None])
        grads[f"conv{n - 1}.w"], grads[f"conv{n - 1}.b"] = gw, gb
        h_bar = conv3x3_transpose(o_bar[..., None], w)
        for k in range(n - 2, -1, -1):
            w, _ = layers[k]
            a_bar = h_bar * _silu_d1(cache["pre"][k])
            inp, _ = cache["inputs"][k]
            gw, gb = conv3x3_weight_grad(inp, a_bar)
            grads[f"conv{k}.w"], grads[f"conv{k}.b"] = gw, gb
            if k > 0:
                h_bar = h_bar + conv3x3_transpose(a_bar, w)
        return np.concatenate([grads[name].ravel() for name, _ in self._shapes])

    @staticmethod
    def _batch(x):
        x = np.asarray(x, dtype=np.float64)
        return x[None] if x.ndim == 2 else x

    # -- ScoreFunction ----------------------------------------------------
    def __call__(self, x, t):
        sig = self.schedule.sigma(t)
        xb = self._batch(x)
        o, _, _ = self._forward(xb, sig)
        return (o / sig).reshape(np.shape(x))

    def score_and_jvp(self, x, t, v):
        """Return s(x, t) and (ds/dx) v for a batch of tangents v (M, H, W)."""
        sig = self.schedule.sigma(t)
        v = np.asarray(v, dtype=np.float64)
        vb = v[None] if v.ndim == 2 else v
        o, od, _ = self._forward(self._batch(x), sig, vb)
        return o[0] / sig, (od / sig).reshape(v.shape)

    def jvp(self, x, t, v):
        return self.score_and_jvp(x, t, v)[1]

    def vjp(self, x, t, v):
        sig = self.schedule.sigma(t)
        v = np.asarray(v, dtype=np.float64)
        vb = v[None] if v.ndim == 2 else v
        _, _, cache = self._forward(self._batch(x), sig)
        return self._reverse_input(cache, vb / sig).reshape(v.shape)

    def div_grad(self, x, t, eps):
        return self.score_and_combined_vjp(x, t, np.zeros(np.shape(x)), eps, 1.0)[1]

    def score_and_combined_vjp(self, x, t, cotangent, eps, weight=1.0):
        """One forward-over-reverse sweep; see :meth:`ScoreFunction.score_and_combined_vjp`."""
        sig = self.schedule.sigma(t)
        eps = np.asarray(eps, dtype=np.float64)
        eb = eps[None] if eps.ndim == 2 else eps
        o, _, cache = self._forward(self._batch(x), sig, eb)
        c = np.asarray(cotangent, dtype=np.float64)[None] / sig
        g = self._reverse_input(cache, c, weight * eb / sig)
        return (o[0] / sig).reshape(np.shape(x)), g.reshape(np.shape(x))

    # -- training support -------------------------------------------------
    def forward_batch(self, x, sig):
        """Network output F (= sigma * score) for a batch with per-sample sigma."""
        o, _, cache = self._forward(self._batch(x), sig)
        return o, cache

    def param_grad(self, cache, o_bar):
        return self._reverse_params(cache, o_bar)


# -- denoising score matching ---------------------------------------------

def sigma_to_time(schedule: NoiseSchedule, sig):
    return np.log(np.asarray(sig) / schedule.sigma_min) / schedule.log_ratio


def sample_sigmas(schedule: NoiseSchedule, gen: np.random.Generator, n: int) -> np.ndarray:
    """Log-uniform noise levels on [sigma_min, sigma_max]."""
    u = gen.uniform(0.0, 1.0, size=n)
    return schedule.sigma_min * (schedule.sigma_max / schedule.sigma_min) ** u


def dsm_loss(net: ScoreFunction, batch: np.ndarray, schedule: NoiseSchedule, rng: SeededRng,
             want_grad: bool = True):
    """Denoising score matching loss E ||sigma * s(x + sigma z, t) + z||^2.

    The loss is the per-sample squared norm (summed over pixels) averaged over
    the batch. Returns ``(loss, grad)``; ``grad`` is None unless ``net`` is a
    :class:`ScoreNet` and ``want_grad`` is set.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.shape[0] == 0:
        raise ValueError("dsm_loss needs a non-empty batch")
    gen = rng.generator()
    b = batch.shape[0]
    sig = sample_sigmas(schedule, gen, b)
    z = gen.standard_normal(batch.shape)
    noisy = batch + sig[:, None, None] * z
    grad = None
    # overflow is reported as DivergenceError below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        if isinstance(net, ScoreNet):
            out, cache = net.forward_batch(noisy, sig)
            resid = out + z
            if want_grad:
                grad = net.param_grad(cache, 2.0 * resid / b)
        else:
            ts = sigma_to_time(schedule, sig)
            resid = np.stack([s * net(xn, float(np.clip(t, 0.0, 1.0))) for s, xn, t in zip(sig, noisy, ts)]) + z
        loss = float(np.sum(resid * resid) / b)
    if not math.isfinite(loss) or (grad is not None and not np.all(np.isfinite(grad))):
        raise DivergenceError(f"non-finite DSM loss ({loss})")
    return loss, grad


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 2000
    learning_rate: float = 2e-3
    sigma_law: str = "log-uniform"
    seed: int = 0
    pool_size: int = 256
    grad_clip: float = 10.0
    lr_decay_to: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.learning_rate <= 0 or self.pool_size < 1:
            raise ValueError("TrainConfig fields must be positive")
        if self.sigma_law != "log-uniform":
            raise ValueError(f"unsupported sigma law {self.sigma_law!r}")


@dataclass
class TrainResult:
    params: np.ndarray
    losses: list[float] = field(default_factory=list)

    def smoothed(self, window: int = 50) -> np.ndarray:
        return smooth_losses(self.losses, window)


def smooth_losses(losses, window: int = 50) -> np.ndarray:
    """Trailing moving average of a loss curve."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        return arr
    c = np.cumsum(np.concatenate([[0.0], arr]))
    idx = np.arange(1, arr.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def train(net: ScoreNet, sampler: Callable[[int], np.ndarray], config: TrainConfig,
          log: Callable[[int, float], None] | None = None) -> TrainResult:
    """Adam on the DSM loss over a fixed pool of sampled clean images.

    ``sampler(seed)`` returns one clean 2-D image array. Random flips augment
    the pool. On a non-finite loss the network is restored to the last good
    parameters and :class:`DivergenceError` is raised with ``checkpoint`` set.
    """
    gen = SeededRng(config.seed, 0x7EA1).generator()
    pool = np.stack([np.asarray(sampler(int(s)), dtype=np.float64)
                     for s in gen.integers(0, 2**31, size=config.pool_size)])
    params = net.params.copy()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    losses = []
    for step in range(config.steps):
        idx = gen.integers(0, config.pool_size, size=config.batch_size)
        batch = pool[idx].copy()
        flips = gen.integers(0, 2, size=(config.batch_size, 2))
        for i, (fy, fx) in enumerate(flips):
            if fy:
                batch[i] = batch[i, ::-1, :]
            if fx:
                batch[i] = batch[i, :, ::-1]
        try:
            loss, grad = dsm_loss(net, batch, net.schedule, SeededRng(config.seed, step + 1))
        except DivergenceError as exc:
            net.set_params(params)
            exc.step = step
            exc.checkpoint = params.copy()
            raise
        losses.append(loss)
        if log is not None:
            log(step, loss)
        gnorm = float(np.linalg.norm(grad))
        if config.grad_clip > 0 and gnorm > config.grad_clip:
            grad = grad * (config.grad_clip / gnorm)
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        mhat = m / (1 - beta1 ** (step + 1))
        vhat = v / (1 - beta2 ** (step + 1))
        frac = step / max(config.steps - 1, 1)
        lr = config.learning_rate * (config.lr_decay_to ** frac)
        params = params - lr * mhat / (np.sqrt(vhat) + adam_eps)
        net.set_params(params)
    if config.steps > 0:
        net.set_params(_round_f32(net.params))
    return TrainResult(net.params.copy(), losses)


# -- weight files -----------------------------------------------------------

def _weight_paths(path):
    p = Path(path)
    if p.suffix in (".f32raw", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".f32raw"), p.with_name(p.name + ".json")


def save_weights(net: ScoreNet, path, extra: dict | None = None) -> Path:
    """Store parameters as little-endian float32 plus a JSON manifest."""
    raw, man = _weight_paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    arch = net.arch.to_dict()
    manifest = {
        "architecture": arch,
        "architecture_hash": architecture_hash(arch),
        "n_params": net.n_params,
        "dtype": "float32",
        "byte_order": "little",
        "sigma_min": net.schedule.sigma_min,
        "sigma_max": net.schedule.sigma_max,
        "normalization": {"intensity_range": [0.0, 1.0]},
    }
    manifest.update(extra or {})
    raw.write_bytes(net.params.astype("<f4").tobytes())
    man.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return raw


def load_weights(path, net: ScoreNet | None = None) -> ScoreNet:
    """Load a network; when ``net`` is given its architecture must match."""
    raw, man = _weight_paths(path)
    manifest = json.loads(man.read_text())
    arch_dict = manifest.get("architecture")
    if arch_dict is None or architecture_hash(arch_dict) != manifest.get("architecture_hash"):
        raise IncompatibleWeightsError(f"{man}: architecture does not match its recorded hash")
    arch = Architecture(channels=arch_dict["channels"], n_res_blocks=arch_dict["n_res_blocks"],
                        sigma_data=arch_dict["sigma_data"], in_channels=arch_dict["in_channels"],
                        kernel=arch_dict["kernel"], activation=arch_dict["activation"])
    if arch.hash() != manifest["architecture_hash"]:
        raise IncompatibleWeightsError(f"{man}: unsupported architecture description")
    if net is not None and net.arch.hash() != arch.hash():
        raise IncompatibleWeightsError("stored weights belong to a different architecture")
    payload = raw.read_bytes()
    if len(payload) != 4 * manifest["n_params"]:
        raise FormatError(f"{raw}: payload size does not match n_params")
    params = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    schedule = NoiseSchedule(manifest["sigma_min"], manifest["sigma_max"])
    if net is None:
        return ScoreNet(schedule, arch, params)
    net.set_params(params)
    return net
