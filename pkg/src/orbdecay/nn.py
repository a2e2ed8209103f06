"""GRU sequence-to-sequence network with hand-derived gradients.

Everything here is plain numpy: gated recurrent cells, a stacked
encoder/decoder pair joined layer-by-layer through the final encoder states,
an affine scalar head, reverse-mode backpropagation (including through
fed-back predictions), and Adam with global-norm gradient clipping.

Array convention: batched activations are [batch x width]; single examples
may be passed as 1-D vectors and come back in kind. The decoder consumes
scalar step inputs (the previous output), optionally concatenated with
per-object constant features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from orbdecay.errors import InputError, NumericalError

CHECKPOINT_SCHEMA = "orbdecay-checkpoint/1"


class ShapeMismatch(InputError):
    """Operand shapes are inconsistent with the model dimensions."""


class MissingTeacher(InputError):
    """A sampling mask requests ground truth but none was provided."""


class LengthMismatch(InputError):
    """Sequences of different lengths cannot be compared."""


class NonFiniteGradient(NumericalError):
    """A gradient turned non-finite; the optimizer step is aborted."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name}")
        self.parameter = name


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    expx = np.exp(x[~positive])
    out[~positive] = expx / (1.0 + expx)
    return out


@dataclass
class GruLayerParams:
    """Weights of one GRU layer: input, recurrent, and bias terms for the
    update gate (z), reset gate (r), and candidate state (c)."""

    wz: np.ndarray
    wr: np.ndarray
    wc: np.ndarray
    vz: np.ndarray
    vr: np.ndarray
    vc: np.ndarray
    bz: np.ndarray
    br: np.ndarray
    bc: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.wz.shape[0]

    @property
    def input_size(self) -> int:
        return self.wz.shape[1]


def init_gru_layer(input_size: int, hidden_size: int, rng: np.random.Generator) -> GruLayerParams:
    """Uniform init in [-1/sqrt(k), +1/sqrt(k)] per weight matrix, zero biases."""
    bound = 1.0 / np.sqrt(hidden_size)

    def weights(rows: int, cols: int) -> np.ndarray:
        return rng.uniform(-bound, bound, size=(rows, cols))

    return GruLayerParams(
        wz=weights(hidden_size, input_size),
        wr=weights(hidden_size, input_size),
        wc=weights(hidden_size, input_size),
        vz=weights(hidden_size, hidden_size),
        vr=weights(hidden_size, hidden_size),
        vc=weights(hidden_size, hidden_size),
        bz=np.zeros(hidden_size),
        br=np.zeros(hidden_size),
        bc=np.zeros(hidden_size),
    )


@dataclass
class Seq2SeqModel:
    """Stacked GRU encoder/decoder with an affine scalar output head.

    Encoder and decoder have the same depth and hidden size; the final
    hidden state of encoder layer ``l`` initializes decoder layer ``l``.
    The head has no activation: the regression target is an unbounded
    normalized time.
    """

    encoder: list[GruLayerParams]
    decoder: list[GruLayerParams]
    dense_w: np.ndarray
    dense_b: np.ndarray
    hidden_size: int
    num_layers: int
    input_size: int
    decoder_input_size: int = 1

    def hyperparameters(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "num_layers": self.num_layers,
            "input_size": self.input_size,
            "decoder_input_size": self.decoder_input_size,
        }


def init_model(
    input_size: int,
    hidden_size: int,
    num_layers: int,
    seed: int,
    decoder_input_size: int = 1,
) -> Seq2SeqModel:
    if not 1 <= num_layers <= 3:
        raise InputError(f"num_layers must be in [1, 3], got {num_layers}")
    if not 1 <= hidden_size <= 256:
        # The tuner's search space starts at 16; tiny sizes stay legal here
        # so numerical harnesses can use them.
        raise InputError(f"hidden_size must be in [1, 256], got {hidden_size}")
    rng = np.random.default_rng(seed)
    encoder = [
        init_gru_layer(input_size if l == 0 else hidden_size, hidden_size, rng)
        for l in range(num_layers)
    ]
    decoder = [
        init_gru_layer(decoder_input_size if l == 0 else hidden_size, hidden_size, rng)
        for l in range(num_layers)
    ]
    bound = 1.0 / np.sqrt(hidden_size)
    return Seq2SeqModel(
        encoder=encoder,
        decoder=decoder,
        dense_w=rng.uniform(-bound, bound, size=hidden_size),
        dense_b=np.zeros(1),
        hidden_size=hidden_size,
        num_layers=num_layers,
        input_size=input_size,
        decoder_input_size=decoder_input_size,
    )


def named_parameters(model: Seq2SeqModel) -> list[tuple[str, np.ndarray]]:
    """All parameters in a stable, serialization-defining order."""
    out: list[tuple[str, np.ndarray]] = []
    for side, layers in (("encoder", model.encoder), ("decoder", model.decoder)):
        for l, p in enumerate(layers):
            for name in ("wz", "wr", "wc", "vz", "vr", "vc", "bz", "br", "bc"):
                out.append((f"{side}.{l}.{name}", getattr(p, name)))
    out.append(("dense.w", model.dense_w))
    out.append(("dense.b", model.dense_b))
    return out


def _as_batch(x: np.ndarray, width: int, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ShapeMismatch(f"{what}: expected width {width}, got shape {arr.shape}")
    return arr, single


def gru_step(params: GruLayerParams, x: np.ndarray, c_prev: np.ndarray):
    """One GRU update.

    ``z = sigma(Wz x + Vz c_prev + bz)``, ``r = sigma(Wr x + Vr c_prev + br)``,
    ``c~ = tanh(Wc x + Vc (r * c_prev) + bc)``, and the new state is the
    convex combination ``c = (1 - z) * c~ + z * c_prev``. The hidden state
    and the cell output are both ``c``.

    Returns the new state and a cache of intermediates for backpropagation.
    """
    x2, single = _as_batch(x, params.input_size, "gru input")
    c2, _ = _as_batch(c_prev, params.hidden_size, "gru state")
    if x2.shape[0] != c2.shape[0]:
        raise ShapeMismatch(
            f"batch mismatch: input {x2.shape[0]} vs state {c2.shape[0]}"
        )
    if not (np.isfinite(x2).all() and np.isfinite(c2).all()):
        raise InputError("non-finite values in gru_step inputs")
    z = sigmoid(x2 @ params.wz.T + c2 @ params.vz.T + params.bz)
    r = sigmoid(x2 @ params.wr.T + c2 @ params.vr.T + params.br)
    rc = r * c2
    c_tilde = np.tanh(x2 @ params.wc.T + rc @ params.vc.T + params.bc)
    c = (1.0 - z) * c_tilde + z * c2
    cache = (x2, c2, z, r, rc, c_tilde)
    return (c[0] if single else c), cache


def _gru_step_backward(params: GruLayerParams, cache, dc: np.ndarray, grads: dict, prefix: str):
    """Backpropagate one GRU step; returns (dx, dc_prev).

    ``grads`` entries named ``prefix + field`` are accumulated in place.
    """
    x, c_prev, z, r, rc, c_tilde = cache
    dg = dc * (1.0 - z)
    dz = dc * (c_prev - c_tilde)
    dc_prev = dc * z

    dac = dg * (1.0 - c_tilde**2)
    daz = dz * z * (1.0 - z)
    drc = dac @ params.vc
    dr = drc * c_prev
    dc_prev = dc_prev + drc * r
    dar = dr * r * (1.0 - r)
    dc_prev = dc_prev + daz @ params.vz + dar @ params.vr
    dx = daz @ params.wz + dar @ params.wr + dac @ params.wc

    grads[prefix + "wz"] += daz.T @ x
    grads[prefix + "wr"] += dar.T @ x
    grads[prefix + "wc"] += dac.T @ x
    grads[prefix + "vz"] += daz.T @ c_prev
    grads[prefix + "vr"] += dar.T @ c_prev
    grads[prefix + "vc"] += dac.T @ rc
    grads[prefix + "bz"] += daz.sum(axis=0)
    grads[prefix + "br"] += dar.sum(axis=0)
    grads[prefix + "bc"] += dac.sum(axis=0)
    return dx, dc_prev


def encode(model: Seq2SeqModel, inputs: np.ndarray):
    """Run the encoder over an input sequence.

    ``inputs`` is [Tx x p] or [batch x Tx x p]. Layer 0 consumes the inputs;
    each further layer consumes the hidden sequence of the one below. All
    initial states are zero. Returns the per-layer final states (the context)
    and the step caches.
    """
    arr = np.asarray(inputs, dtype=float)
    single = arr.ndim == 2
    if single:
        arr = arr[None, ...]
    if arr.ndim != 3 or arr.shape[2] != model.input_size:
        raise ShapeMismatch(
            f"encoder inputs: expected [batch x Tx x {model.input_size}], got {arr.shape}"
        )
    batch, tx, _ = arr.shape
    if tx < 1:
        raise ShapeMismatch("encoder needs at least one time step")

    caches: list[list] = []
    sequence = [arr[:, t, :] for t in range(tx)]
    context: list[np.ndarray] = []
    for layer in model.encoder:
        state = np.zeros((batch, model.hidden_size))
        layer_cache = []
        outputs = []
        for x_t in sequence:
            state, cache = gru_step(layer, x_t, state)
            layer_cache.append(cache)
            outputs.append(state)
        caches.append(layer_cache)
        context.append(state)
        sequence = outputs
    return context, caches


def decode(
    model: Seq2SeqModel,
    context: list[np.ndarray],
    y0: np.ndarray,
    ty: int,
    teacher: np.ndarray | None = None,
    sampling_mask: np.ndarray | None = None,
    extras: np.ndarray | None = None,
):
    """Unroll the decoder for ``ty`` steps.

    Decoder layer ``l`` starts from ``context[l]``. The first step consumes
    the seed ``y0`` (the last target value of the input segment); later steps
    consume the previous true output where ``sampling_mask`` is set and the
    previous prediction otherwise (entry 0 of the mask is vacuous). Each
    step's top-layer state passes through the affine head to one scalar
    prediction; the final hidden state is discarded.

    ``extras``, when given, is a per-object constant feature block appended
    to every step input.
    """
    if ty < 1:
        raise ShapeMismatch("decoder needs at least one output step")
    if len(context) != model.num_layers:
        raise ShapeMismatch(
            f"context has {len(context)} layers, model has {model.num_layers}"
        )
    y0_arr = np.asarray(y0, dtype=float)
    single = y0_arr.ndim == 0
    if single:
        y0_arr = y0_arr[None]
    batch = y0_arr.shape[0]

    if sampling_mask is None:
        mask = np.zeros(ty, dtype=bool)
    else:
        mask = np.asarray(sampling_mask, dtype=bool)
        if mask.shape != (ty,):
            raise ShapeMismatch(f"sampling mask must have length {ty}")
    teacher_arr = None
    if teacher is not None:
        teacher_arr = np.asarray(teacher, dtype=float)
        if teacher_arr.ndim == 1:
            teacher_arr = teacher_arr[None, :]
        if teacher_arr.shape != (batch, ty):
            raise ShapeMismatch(
                f"teacher: expected [{batch} x {ty}], got {teacher_arr.shape}"
            )
    if mask[1:].any() and teacher_arr is None:
        raise MissingTeacher("sampling mask requests ground truth but none given")

    extras_arr = None
    expected_width = 1
    if extras is not None:
        extras_arr = np.asarray(extras, dtype=float)
        if extras_arr.ndim == 1:
            extras_arr = extras_arr[None, :]
        expected_width = 1 + extras_arr.shape[1]
    if expected_width != model.decoder_input_size:
        raise ShapeMismatch(
            f"decoder input width {expected_width} != model decoder_input_size "
            f"{model.decoder_input_size}"
        )

    states = [np.asarray(c, dtype=float).reshape(batch, model.hidden_size) for c in context]
    predictions = np.empty((batch, ty))
    step_caches = []
    fed_back = np.zeros(ty, dtype=bool)
    for t in range(ty):
        if t == 0:
            prev = y0_arr
        elif mask[t]:
            prev = teacher_arr[:, t - 1]
        else:
            prev = predictions[:, t - 1]
            fed_back[t] = True
        x_t = prev[:, None] if extras_arr is None else np.concatenate(
            [prev[:, None], extras_arr], axis=1
        )
        layer_caches = []
        h = x_t
        for l, layer in enumerate(model.decoder):
            states[l], cache = gru_step(layer, h, states[l])
            layer_caches.append(cache)
            h = states[l]
        predictions[:, t] = h @ model.dense_w + model.dense_b[0]
        step_caches.append((layer_caches, h))

    cache = {
        "steps": step_caches,
        "fed_back": fed_back,
        "predictions": predictions,
        "batch": batch,
    }
    return (predictions[0] if single else predictions), cache


def mse_loss(y: np.ndarray, yhat: np.ndarray) -> float:
    """Mean squared error over one sequence or a batch of sequences."""
    a = np.asarray(y, dtype=float)
    b = np.asarray(yhat, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise LengthMismatch(f"incompatible sequences: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(diff * diff))


@dataclass
class TrainingBatch:
    """One forward/backward unit: encoder inputs, decoder seed, targets."""

    enc_inputs: np.ndarray
    y0: np.ndarray
    targets: np.ndarray
    decoder_extras: np.ndarray | None = None


def zero_gradients(model: Seq2SeqModel) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in named_parameters(model)}


def backward(
    model: Seq2SeqModel,
    batch: TrainingBatch,
    sampling_mask: np.ndarray | None = None,
):
    """Forward plus exact reverse-mode gradients of the batch-mean MSE.

    The backward pass runs the decoder time-major so that gradient flowing
    into a step input can be routed back into the previous step's prediction
    whenever that prediction was fed back (mask entry unset); it then drains
    through the context into a layer-major encoder pass.

    Returns ``(loss, predictions, gradients)`` with gradients keyed like
    :func:`named_parameters`.
    """
    enc_inputs = np.asarray(batch.enc_inputs, dtype=float)
    if enc_inputs.ndim == 2:
        enc_inputs = enc_inputs[None, ...]
    targets = np.asarray(batch.targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[None, :]
    y0 = np.atleast_1d(np.asarray(batch.y0, dtype=float))
    b, ty = targets.shape

    context, enc_caches = encode(model, enc_inputs)
    predictions, dec_cache = decode(
        model,
        context,
        y0,
        ty,
        teacher=targets,
        sampling_mask=sampling_mask,
        extras=batch.decoder_extras,
    )
    predictions = predictions.reshape(b, ty)
    loss = mse_loss(targets, predictions)

    grads = zero_gradients(model)
    dpred = 2.0 * (predictions - targets) / (b * ty)

    # Decoder: reverse time, threading feedback gradient into earlier steps.
    dcarry = [np.zeros((b, model.hidden_size)) for _ in range(model.num_layers)]
    dfeedback = np.zeros((b, ty))
    fed_back = dec_cache["fed_back"]
    for t in range(ty - 1, -1, -1):
        dy = dpred[:, t] + dfeedback[:, t]
        layer_caches, h_top = dec_cache["steps"][t]
        grads["dense.w"] += h_top.T @ dy
        grads["dense.b"] += np.array([dy.sum()])
        dabove = dy[:, None] * model.dense_w[None, :]
        for l in range(model.num_layers - 1, -1, -1):
            dc = dcarry[l] + dabove
            dabove, dcarry[l] = _gru_step_backward(
                model.decoder[l], layer_caches[l], dc, grads, f"decoder.{l}."
            )
        # dabove is now the gradient on the step input block.
        if t > 0 and fed_back[t]:
            dfeedback[:, t - 1] += dabove[:, 0]

    # Encoder: layer-major reverse, seeded by the context gradients.
    dout_seq = [np.zeros((b, model.hidden_size)) for _ in range(enc_inputs.shape[1])]
    for l in range(model.num_layers - 1, -1, -1):
        carried = dcarry[l]
        dinput_seq = []
        for t in range(enc_inputs.shape[1] - 1, -1, -1):
            dc = carried + dout_seq[t]
            dx, carried = _gru_step_backward(
                model.encoder[l], enc_caches[l][t], dc, grads, f"encoder.{l}."
            )
            dinput_seq.append(dx)
        dinput_seq.reverse()
        dout_seq = dinput_seq

    return loss, predictions, grads


def predict_sequence(
    model: Seq2SeqModel,
    enc_inputs: np.ndarray,
    y0: np.ndarray,
    ty: int,
    extras: np.ndarray | None = None,
) -> np.ndarray:
    """Pure-inference unroll: every step consumes the previous prediction."""
    context, _ = encode(model, enc_inputs)
    predictions, _ = decode(model, context, y0, ty, extras=extras)
    return predictions


@dataclass
class OptimizerState:
    """Adam state with global-norm gradient clipping.

    The default moment decay rates are both 0.999 and the clip threshold is
    0.1; all are overridable.
    """

    lr: float
    beta1: float = 0.999
    beta2: float = 0.999
    epsilon: float = 1e-8
    clipnorm: float = 0.1
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise InputError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("moment decay rates must lie in [0, 1)")

    @staticmethod
    def for_model(model: Seq2SeqModel, lr: float, **kwargs) -> "OptimizerState":
        opt = OptimizerState(lr=lr, **kwargs)
        for name, value in named_parameters(model):
            opt.m[name] = np.zeros_like(value)
            opt.v[name] = np.zeros_like(value)
        return opt


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_and_step(
    opt: OptimizerState, model: Seq2SeqModel, grads: dict[str, np.ndarray]
) -> None:
    """Scale gradients to the global-norm budget, then apply one Adam step.

    The whole step aborts (model untouched) if any gradient is non-finite.
    """
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NonFiniteGradient(name)

    norm = global_norm(grads)
    scale = opt.clipnorm / norm if norm > opt.clipnorm else 1.0

    opt.step_count += 1
    bc1 = 1.0 - opt.beta1**opt.step_count
    bc2 = 1.0 - opt.beta2**opt.step_count
    for name, value in named_parameters(model):
        g = grads[name] * scale
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * (g * g)
        m_hat = opt.m[name] / bc1
        v_hat = opt.v[name] / bc2
        value -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.epsilon)


def model_state(model: Seq2SeqModel) -> dict[str, np.ndarray]:
    """Deep copy of all parameters, keyed like :func:`named_parameters`."""
    return {name: value.copy() for name, value in named_parameters(model)}


def load_model_state(model: Seq2SeqModel, state: dict[str, np.ndarray]) -> None:
    for name, value in named_parameters(model):
        value[...] = state[name]


def save_checkpoint(
    model: Seq2SeqModel,
    path: str,
    meta: dict | None = None,
    optimizer: OptimizerState | None = None,
) -> None:
    """Write a versioned JSON checkpoint.

    Arrays are flattened row-major; floats serialize via shortest
    round-trip formatting, so a load/save cycle is bit-exact.
    """
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "hyperparameters": model.hyperparameters(),
        "parameters": {
            name: value.ravel(order="C").tolist()
            for name, value in named_parameters(model)
        },
        "meta": meta or {},
        "optimizer": None,
    }
    if optimizer is not None:
        payload["optimizer"] = {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "epsilon": optimizer.epsilon,
            "clipnorm": optimizer.clipnorm,
            "step_count": optimizer.step_count,
            "m": {k: v.ravel(order="C").tolist() for k, v in optimizer.m.items()},
            "v": {k: v.ravel(order="C").tolist() for k, v in optimizer.v.items()},
        }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True)
        handle.write("\n")


def load_checkpoint(path: str) -> tuple[Seq2SeqModel, dict, OptimizerState | None]:
    with open(path, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise InputError(f"{path}: not a checkpoint file")
    hp = payload["hyperparameters"]
    model = init_model(
        input_size=hp["input_size"],
        hidden_size=hp["hidden_size"],
        num_layers=hp["num_layers"],
        seed=0,
        decoder_input_size=hp.get("decoder_input_size", 1),
    )
    for name, value in named_parameters(model):
        flat = np.array(payload["parameters"][name], dtype=float)
        value[...] = flat.reshape(value.shape)

    optimizer = None
    raw = payload.get("optimizer")
    if raw:
        optimizer = OptimizerState(
            lr=raw["lr"],
            beta1=raw["beta1"],
            beta2=raw["beta2"],
            epsilon=raw["epsilon"],
            clipnorm=raw["clipnorm"],
            step_count=raw["step_count"],
        )
        for name, value in named_parameters(model):
            optimizer.m[name] = np.array(raw["m"][name], dtype=float).reshape(value.shape)
            optimizer.v[name] = np.array(raw["v"][name], dtype=float).reshape(value.shape)
    return model, payload.get("meta", {}), optimizer
