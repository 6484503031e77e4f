"""Convolutional DRAW.

One timestep of the single-layer model:

    ε   = x − r                      (mean planes of r for Gaussian output)
    h^e = LSTM(x, ε, h^e, h^d)
    q   = q(z | h^e),  p = p(z | h^d)
    z   ~ q
    h^d = LSTM(z, h^d, r)
    r   = r + W h^d

The two-layer model feeds the first posterior mean into a second
encoder, codes z₂ before z₁ and lets the second decoder state bias the
first prior and the first decoder. Latents are picked by a
:class:`LatentPolicy` at the moment the decoder consumes them, after both the
posterior (if any) and the prior are known; sampling, replay, quantisation and
arithmetic decoding are all policies.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ContractViolation, NumericFault
from .layers import (
    ConvKernel,
    ConvLstmGates,
    ConvLstmState,
    GateInput,
    build_conv_lstm,
    conv_lstm_step,
    uniform_weight,
)
from .likelihood import (
    GaussianParams,
    elbo_loss,
    gaussian_kl,
    input_nll_bernoulli,
    input_nll_gaussian,
    input_nll_gaussian_bins,
    kl_per_image,
)
from .params import Checkpoint, ParamStore, load_checkpoint, restore_store, save_checkpoint
from .tensor import Tensor, no_grad

LOGGER = logging.getLogger(__name__)

POSTERIOR_MODES = ("sample", "mean")


@dataclass(slots=True)
class DrawState:
    """Every recurrent variable of one unrolled model: canvas plus LSTM states per layer."""

    r: Tensor
    enc: Tuple[ConvLstmState, ...]
    dec: Tuple[ConvLstmState, ...]
    t: int = 0

    @property
    def batch_size(self) -> int:
        return self.r.shape[0]


@dataclass(slots=True)
class LayerTrace:
    layer: int
    q: Optional[GaussianParams]
    p: GaussianParams
    z: Tensor
    kl: Optional[Tensor]

    def __post_init__(self) -> None:
        if self.z.shape != self.p.shape:
            raise ContractViolation(f"latent {self.z.shape} does not match prior {self.p.shape}")


@dataclass(slots=True)
class TimestepTrace:
    """Posterior, prior, chosen latent and per-unit KL of every layer at step ``t``."""

    t: int
    layers: Tuple[LayerTrace, ...]

    def layer(self, index: int) -> LayerTrace:
        for entry in self.layers:
            if entry.layer == index:
                return entry
        raise KeyError(index)

    def kl_nats(self) -> Dict[int, np.ndarray]:
        """Per-image KL of each layer, summed over units."""

        return {
            entry.layer: entry.kl.data.sum(axis=(1, 2, 3))
            for entry in self.layers
            if entry.kl is not None
        }


@dataclass(slots=True)
class ElboTerms:
    loss: Tensor
    lx: Tensor
    kl: Tensor
    traces: List[TimestepTrace]
    state: DrawState


# Latent policies ------------------------------------------------------------------


class LatentPolicy(Protocol):
    def choose(self, t: int, layer: int, q: Optional[GaussianParams], p: GaussianParams) -> Tensor:
        ...


class NoiseSource(Protocol):
    def normal(self, t: int, layer: int, shape: Tuple[int, ...], dtype: np.dtype) -> np.ndarray:
        ...


NoiseInput = Union[np.ndarray, Mapping[int, np.ndarray], NoiseSource]


class RandomNoise:
    """Standard normal draws from a numpy generator, in call order."""

    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng

    def normal(self, t: int, layer: int, shape: Tuple[int, ...], dtype: np.dtype) -> np.ndarray:
        return self.rng.standard_normal(shape).astype(dtype, copy=False)


class FixedNoise:
    """Pre-drawn noise keyed by (t, layer), then by layer alone; ``default`` covers missing keys."""

    def __init__(
        self,
        arrays: Optional[Mapping[Tuple[int, int], np.ndarray]] = None,
        default: Optional[np.ndarray] = None,
        *,
        per_layer: Optional[Mapping[int, np.ndarray]] = None,
    ) -> None:
        self.arrays = dict(arrays or {})
        self.per_layer = dict(per_layer or {})
        self.default = default

    def normal(self, t: int, layer: int, shape: Tuple[int, ...], dtype: np.dtype) -> np.ndarray:
        array = self.arrays.get((t, layer), self.per_layer.get(layer, self.default))
        if array is None:
            raise ContractViolation(f"no frozen noise for step {t}, layer {layer}")
        array = np.asarray(array, dtype=dtype)
        if array.shape != shape:
            raise ContractViolation(f"noise for step {t} has shape {array.shape}, latent needs {shape}")
        return array


class SamplePolicy:
    """Reparameterised sampling from q when present, else from the prior at temperature λ."""

    def __init__(self, noise: NoiseSource, temperature: float = 1.0, posterior: str = "sample") -> None:
        if not 0.0 <= temperature <= 1.0:
            raise ContractViolation(f"temperature must lie in [0, 1], got {temperature}")
        if posterior not in POSTERIOR_MODES:
            raise ContractViolation(f"posterior mode must be one of {POSTERIOR_MODES}, got {posterior!r}")
        self.noise = noise
        self.temperature = temperature
        self.posterior = posterior

    def choose(self, t: int, layer: int, q: Optional[GaussianParams], p: GaussianParams) -> Tensor:
        if q is not None:
            if self.posterior == "mean":
                return q.mu
            eps = self.noise.normal(t, layer, q.shape, q.mu.dtype)
            return q.mu + T.exp(q.log_var * 0.5) * eps
        if self.temperature == 0.0:
            return p.mu
        eps = self.noise.normal(t, layer, p.shape, p.mu.dtype)
        return p.mu + T.exp(p.log_var * 0.5) * (eps * self.temperature)


class ReplayPolicy:
    """Feeds back previously recorded latents."""

    def __init__(self, latents: Mapping[Tuple[int, int], np.ndarray]) -> None:
        self.latents = dict(latents)

    @classmethod
    def from_traces(cls, traces: Sequence[TimestepTrace]) -> "ReplayPolicy":
        return cls(
            {(trace.t, entry.layer): entry.z.data.copy() for trace in traces for entry in trace.layers}
        )

    def choose(self, t: int, layer: int, q: Optional[GaussianParams], p: GaussianParams) -> Tensor:
        try:
            return Tensor(self.latents[(t, layer)])
        except KeyError as exc:
            raise ContractViolation(f"no recorded latent for step {t}, layer {layer}") from exc


# Model ---------------------------------------------------------------------------


@dataclass(slots=True)
class GaussianHead:
    """Convolutional map from hidden states to a diagonal Gaussian over latents."""

    kernels: Tuple[ConvKernel, ...]
    latent_maps: int
    fixed_log_var: Optional[Tensor] = None

    def __call__(self, inputs: Sequence[Tensor]) -> GaussianParams:
        if len(inputs) != len(self.kernels):
            raise ContractViolation(f"head expects {len(self.kernels)} inputs, got {len(inputs)}")
        out = self.kernels[0].apply(inputs[0])
        for source, kernel in zip(inputs[1:], self.kernels[1:]):
            out = out + kernel.apply(source)
        if self.fixed_log_var is not None:
            log_var = T.broadcast_to(T.reshape(self.fixed_log_var, (1, self.latent_maps, 1, 1)), out.shape)
            return GaussianParams.clamped(out, log_var)
        latents = self.latent_maps
        return GaussianParams.clamped(T.channel_slice(out, 0, latents), T.channel_slice(out, latents, 2 * latents))


class ConvDraw:
    """Parameters and step functions of a one- or two-layer convolutional DRAW."""

    def __init__(self, cfg: ModelConfig, store: Optional[ParamStore] = None, *, seed: int = 0) -> None:
        self.cfg = cfg
        self.store = store if store is not None else ParamStore(cfg.dtype)
        if self.store.dtype != cfg.dtype:
            raise ContractViolation(f"parameter store holds {self.store.dtype}, model needs {cfg.dtype}")
        self.dtype = cfg.dtype
        self.two_layer = cfg.active_layers == 2
        self._build(np.random.default_rng(seed))
        LOGGER.debug(
            "Built %s-layer model with %s parameter tensors (%s values)",
            cfg.active_layers,
            len(self.store),
            sum(tensor.data.size for _, tensor in self.store.items()),
        )

    # Construction -------------------------------------------------------------

    def _head(
        self, rng: np.random.Generator, prefix: str, inputs: Sequence[Tuple[str, int]], latents: int, *, posterior: bool
    ) -> GaussianHead:
        rk = self.cfg.recurrent_kernel
        fixed = posterior and self.cfg.fixed_posterior_variance
        out_channels = latents if fixed else 2 * latents
        kernels = []
        for index, (name, channels) in enumerate(inputs):
            weight = self.store.add(f"{prefix}.{name}.weight", uniform_weight(rng, out_channels, channels, rk, rk))
            bias = self.store.add(f"{prefix}.bias", np.zeros(out_channels)) if index == 0 else None
            kernels.append(ConvKernel.same(weight, bias))
        log_var = self.store.add(f"{prefix}.log_var", np.zeros(latents)) if fixed else None
        return GaussianHead(tuple(kernels), latents, log_var)

    def _add_initial_state(self, prefix: str, features: int) -> None:
        hh, hw = self.cfg.hidden_shape
        self.store.add(f"{prefix}.h0", np.zeros((1, features, hh, hw)))
        self.store.add(f"{prefix}.c0", np.zeros((1, features, hh, hw)))

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        k, s, rk = cfg.kernel, cfg.stride, cfg.recurrent_kernel
        f1, l1 = cfg.lstm_feature_maps, cfg.latent_maps
        f2, l2 = cfg.lstm_feature_maps_2, cfg.latent_maps_2
        canvas = cfg.canvas_channels

        self.store.add("canvas.init", np.zeros((1, canvas, cfg.height, cfg.width)))
        self._add_initial_state("enc1", f1)
        self._add_initial_state("dec1", f1)
        if self.two_layer:
            self._add_initial_state("enc2", f2)
            self._add_initial_state("dec2", f2)

        self.enc1: ConvLstmGates = build_conv_lstm(
            self.store,
            "enc1",
            [GateInput("image", 2 * cfg.channels, k, s), GateInput("dec", f1, rk)],
            f1,
            rk,
            rng,
        )
        self.q1 = self._head(rng, "q1", [("enc", f1)], l1, posterior=True)
        if self.two_layer:
            self.enc2: ConvLstmGates = build_conv_lstm(
                self.store, "enc2", [GateInput("mu1", l1, rk), GateInput("dec", f2, rk)], f2, rk, rng
            )
            self.q2 = self._head(rng, "q2", [("enc", f2)], l2, posterior=True)
            self.p2 = self._head(rng, "p2", [("dec", f2)], l2, posterior=False)
            self.dec2: ConvLstmGates = build_conv_lstm(self.store, "dec2", [GateInput("z", l2, rk)], f2, rk, rng)

        upper = [("upper", f2)] if self.two_layer else []
        self.p1 = self._head(rng, "p1", [("dec", f1), *upper], l1, posterior=False)
        dec_inputs = [GateInput("z", l1, rk), GateInput("canvas", canvas, k, s)]
        if self.two_layer:
            dec_inputs.append(GateInput("upper", f2, rk))
        self.dec1: ConvLstmGates = build_conv_lstm(self.store, "dec1", dec_inputs, f1, rk, rng)

        write_weight = self.store.add("write.weight", uniform_weight(rng, canvas, f1, k, k).transpose(1, 0, 2, 3))
        write_bias = self.store.add("write.bias", np.zeros(canvas))
        self.write = ConvKernel.same(write_weight, write_bias, stride=s, transposed=True)

    # Persistence --------------------------------------------------------------

    @classmethod
    def from_checkpoint(cls, path: Path) -> Tuple["ConvDraw", Checkpoint]:
        """Rebuild a model from the configuration text and parameters in ``path``."""

        stored = load_checkpoint(path)
        cfg = ModelConfig.from_text(stored.config_text)
        model = cls(cfg)
        checkpoint = load_checkpoint(path, param_names=set(model.store))
        restore_store(model.store, checkpoint)
        LOGGER.info("Loaded %s-layer model (T=%s) from %s", cfg.active_layers, cfg.timesteps, path)
        return model, checkpoint

    def save(
        self,
        path: Path,
        *,
        extras: Optional[Mapping[str, np.ndarray]] = None,
        include_optimizer: bool = True,
    ) -> None:
        save_checkpoint(path, self.store, self.cfg.to_text(), extras=extras, include_optimizer=include_optimizer)

    def fingerprint(self) -> bytes:
        return self.cfg.fingerprint(self.store.values())

    # Rollout primitives -------------------------------------------------------

    def as_input(self, x: Union[np.ndarray, Tensor]) -> Tensor:
        tensor = x if isinstance(x, Tensor) else T.tensor4(x, self.dtype)
        if tensor.ndim != 4 or tensor.shape[1:] != self.cfg.input_shape:
            raise ContractViolation(f"input {tensor.shape} does not match model input {self.cfg.input_shape}")
        if tensor.dtype != self.dtype:
            tensor = Tensor(tensor.data.astype(self.dtype))
        return tensor

    def init_state(self, batch_size: int) -> DrawState:
        """Broadcast the learned initial canvas and LSTM states over a batch."""

        if batch_size < 1:
            raise ContractViolation(f"batch_size must be >= 1, got {batch_size}")

        def tiled(name: str) -> Tensor:
            return T.tile_batch(self.store[name], batch_size)

        layer_names = ("1", "2") if self.two_layer else ("1",)
        enc = tuple(ConvLstmState(tiled(f"enc{i}.h0"), tiled(f"enc{i}.c0")) for i in layer_names)
        dec = tuple(ConvLstmState(tiled(f"dec{i}.h0"), tiled(f"dec{i}.c0")) for i in layer_names)
        return DrawState(r=tiled("canvas.init"), enc=enc, dec=dec, t=0)

    def step(
        self, state: DrawState, x: Optional[Tensor], policy: LatentPolicy
    ) -> Tuple[DrawState, TimestepTrace]:
        """Advance one timestep. Without ``x`` the encoder is skipped and q is absent."""

        cfg = self.cfg
        t = state.t
        enc = list(state.enc)
        dec = list(state.dec)
        q1: Optional[GaussianParams] = None
        q2: Optional[GaussianParams] = None
        if x is not None:
            if x.shape[0] != state.batch_size:
                raise ContractViolation(f"batch of {x.shape[0]} images against state of {state.batch_size}")
            eps = x - T.channel_slice(state.r, 0, cfg.channels)
            enc[0] = conv_lstm_step(enc[0], [T.concat([x, eps]), dec[0].h], self.enc1)
            q1 = self.q1([enc[0].h])

        layers: List[LayerTrace] = []
        upper: List[Tensor] = []
        if self.two_layer:
            if q1 is not None:
                enc[1] = conv_lstm_step(enc[1], [q1.mu, dec[1].h], self.enc2)
                q2 = self.q2([enc[1].h])
            p2 = self.p2([dec[1].h])
            z2 = self._choose(policy, t, 2, q2, p2)
            dec[1] = conv_lstm_step(dec[1], [z2], self.dec2)
            upper = [dec[1].h]
            layers.append(LayerTrace(2, q2, p2, z2, gaussian_kl(q2, p2) if q2 is not None else None))

        p1 = self.p1([dec[0].h, *upper])
        z1 = self._choose(policy, t, 1, q1, p1)
        dec[0] = conv_lstm_step(dec[0], [z1, state.r, *upper], self.dec1)
        r = state.r + self.write.apply_transpose(dec[0].h, (cfg.height, cfg.width))
        layers.insert(0, LayerTrace(1, q1, p1, z1, gaussian_kl(q1, p1) if q1 is not None else None))

        new_state = DrawState(r=r, enc=tuple(enc), dec=tuple(dec), t=t + 1)
        self._check_finite(new_state, t)
        return new_state, TimestepTrace(t=t, layers=tuple(layers))

    @staticmethod
    def _choose(
        policy: LatentPolicy, t: int, layer: int, q: Optional[GaussianParams], p: GaussianParams
    ) -> Tensor:
        z = policy.choose(t, layer, q, p)
        if z.shape != p.shape:
            raise ContractViolation(f"policy returned latent {z.shape} for prior {p.shape}")
        if z.dtype != p.mu.dtype and not z.requires_grad:
            z = Tensor(z.data.astype(p.mu.dtype))
        return z

    @staticmethod
    def _check_finite(state: DrawState, t: int) -> None:
        tensors = [state.r]
        for lstm in (*state.enc, *state.dec):
            tensors.extend((lstm.h, lstm.c))
        for tensor in tensors:
            if not np.all(np.isfinite(tensor.data)):
                raise NumericFault(f"non-finite activations at step {t}", step=t)

    # Steps and rollouts -------------------------------------------------------

    def inference_step(
        self,
        state: DrawState,
        x: Union[np.ndarray, Tensor],
        noise: Optional[NoiseInput] = None,
        *,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[DrawState, TimestepTrace]:
        """One encoder/decoder update with z sampled from q.

        ``noise`` may be a latent-shaped array (single-layer models), a
        ``{layer: array}`` mapping, a :class:`NoiseSource`, or ``None`` to
        draw from ``rng``.
        """

        return self.step(state, self.as_input(x), SamplePolicy(self._noise(noise, rng)))

    def two_layer_step(
        self,
        state: DrawState,
        x: Union[np.ndarray, Tensor],
        noise: Optional[NoiseInput] = None,
        *,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[DrawState, TimestepTrace]:
        if self.cfg.layers != 2:
            raise ContractViolation("two_layer_step needs a model configured with layers = 2")
        return self.inference_step(state, x, noise, rng=rng)

    def generation_step(
        self,
        state: DrawState,
        temperature: float,
        noise: Optional[NoiseInput] = None,
        *,
        rng: Optional[np.random.Generator] = None,
    ) -> DrawState:
        """Decoder and canvas update with z = μp + λ·σp·ε; the encoder is untouched."""

        new_state, _ = self.step(state, None, SamplePolicy(self._noise(noise, rng), temperature))
        return new_state

    def _noise(self, noise: Optional[NoiseInput], rng: Optional[np.random.Generator]) -> NoiseSource:
        if noise is None:
            return RandomNoise(rng if rng is not None else np.random.default_rng())
        if isinstance(noise, np.ndarray):
            if self.two_layer:
                raise ContractViolation(
                    "a two-layer model needs one noise array per layer, given as {1: array, 2: array}"
                )
            return FixedNoise(default=noise)
        if isinstance(noise, Mapping):
            missing = [layer for layer in ((1, 2) if self.two_layer else (1,)) if layer not in noise]
            if missing:
                raise ContractViolation(f"no noise given for layer(s) {missing}")
            return FixedNoise(per_layer=noise)
        return noise

    def output_nll(self, x: Tensor, r: Tensor) -> Tensor:
        """Per-image input cost L^x in nats for the configured likelihood."""

        cfg = self.cfg
        if cfg.likelihood == "bernoulli":
            return input_nll_bernoulli(x, r)
        if cfg.likelihood_mode == "bin_integrated":
            return input_nll_gaussian_bins(x, r, cfg.quantization_step)
        return input_nll_gaussian(x, r, cfg.quantization_step)

    @property
    def dequantizes_input(self) -> bool:
        return self.cfg.dequantizes_input

    def rollout(
        self, x: Tensor, policy: LatentPolicy, steps: Optional[int] = None
    ) -> Tuple[DrawState, List[TimestepTrace]]:
        state = self.init_state(x.shape[0])
        traces: List[TimestepTrace] = []
        for _ in range(self.cfg.timesteps if steps is None else steps):
            state, trace = self.step(state, x, policy)
            traces.append(trace)
        return state, traces

    def negative_elbo(
        self,
        x: Union[np.ndarray, Tensor],
        noise: NoiseSource,
        *,
        beta: Optional[float] = None,
    ) -> ElboTerms:
        """Full T-step unroll and the batch-mean loss β·L^x + Σ_t KL_t."""

        inputs = self.as_input(x)
        state, traces = self.rollout(inputs, SamplePolicy(noise))
        lx = self.output_nll(inputs, state.r)
        loss = elbo_loss(traces, lx, self.cfg.beta if beta is None else beta, steps=self.cfg.timesteps)
        return ElboTerms(loss=loss, lx=lx, kl=kl_per_image(traces), traces=traces, state=state)

    def canvas_means(self, r: Tensor) -> np.ndarray:
        """Expected pixel values of the output distribution, clamped to [0, 1]."""

        channels = self.cfg.channels
        if self.cfg.likelihood == "bernoulli":
            means = 1.0 / (1.0 + np.exp(-r.data.astype(np.float64)))
        else:
            means = r.data[:, :channels].astype(np.float64)
        return np.clip(means, 0.0, 1.0)

    def reconstruct_partial(
        self,
        x: Union[np.ndarray, Tensor],
        t_keep: int,
        temperature: float = 0.0,
        *,
        seed: int = 0,
        posterior: str = "mean",
    ) -> np.ndarray:
        """Infer the first ``t_keep`` steps from ``x`` and generate the rest at temperature λ."""

        inputs = self.as_input(x)
        if not 0 <= t_keep <= self.cfg.timesteps:
            raise ContractViolation(f"t_keep must lie in [0, {self.cfg.timesteps}], got {t_keep}")
        rng = np.random.default_rng(seed)
        with no_grad():
            state = self.init_state(inputs.shape[0])
            observed = SamplePolicy(RandomNoise(rng), posterior=posterior)
            for _ in range(t_keep):
                state, _ = self.step(state, inputs, observed)
            generated = SamplePolicy(RandomNoise(rng), temperature)
            for _ in range(self.cfg.timesteps - t_keep):
                state, _ = self.step(state, None, generated)
        return self.canvas_means(state.r)

    def sample(self, count: int, temperature: float = 1.0, *, seed: int = 0) -> np.ndarray:
        """Unconditional samples; λ = 0 gives the deterministic mean image."""

        rng = np.random.default_rng(seed)
        policy = SamplePolicy(RandomNoise(rng), temperature)
        with no_grad():
            state = self.init_state(count)
            for _ in range(self.cfg.timesteps):
                state, _ = self.step(state, None, policy)
        return self.canvas_means(state.r)
