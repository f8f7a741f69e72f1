"""Dual-flow shared-latent model with hybrid likelihood/adversarial training.

Two flow stacks map the low-resolution domain X (upsampled to the target
grid) and the high-resolution domain Y onto one isotropic Gaussian latent.
Cross-domain translation goes through that latent:

    x-to-y:  y_hat = f_Y.inverse(f_X.forward(x))
    y-to-x:  x_hat = f_X.inverse(f_Y.forward(y))

Training alternates Wasserstein critic updates (gradient penalty per
Gulrajani et al.) with one generator update that descends

    adv_x + adv_y + lambda_x * NLL_x + lambda_y * NLL_y

where NLL is the mean negative log-likelihood per item in nats.  Batches are
drawn independently from the two domains - nothing pairs them.
"""

import csv
import math
from dataclasses import dataclass, asdict, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .flows import FlowStack, GaussianPrior, flow_log_prob
from .params import ParameterStore, adam_step, save_checkpoint, load_checkpoint


class TrainingDiverged(ArithmeticError):
    """A loss went non-finite; carries the last good step index."""

    def __init__(self, step, cause):
        super().__init__(f"training diverged at step {step}: {cause}")
        self.step = step


def leaky_relu(x, slope=0.2):
    return ad.sub(ad.relu(x), ad.mul(slope, ad.relu(ad.neg(x))))


class PatchCritic:
    """Strided convolutional critic scoring overlapping patches.

    Three stride-2 convolutions widen the channels, a final stride-1
    convolution collapses to a one-channel score map; the critic value is
    the mean over that map.  No normalization layers - the gradient penalty
    forbids batch-coupled statistics.
    """

    def __init__(self, in_channels, widths=(64, 128, 256), kernel=4, store=None, name="critic", rng=None):
        store = store if store is not None else ParameterStore()
        rng = rng or np.random.default_rng(0)
        self.weights = []
        self.biases = []
        self.strides = []
        chans = [in_channels, *widths, 1]
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            stride = 2 if i < len(widths) else 1
            w = rng.standard_normal((cout, cin, kernel, kernel)) * math.sqrt(
                2.0 / (cin * kernel * kernel)
            )
            self.weights.append(store.add(f"{name}/w{i}", w))
            self.biases.append(store.add(f"{name}/b{i}", np.zeros(cout)))
            self.strides.append(stride)

    def score_map(self, x):
        h = x
        last = len(self.weights) - 1
        for i, (w, b, s) in enumerate(zip(self.weights, self.biases, self.strides)):
            h = ad.add(ad.conv2d(h, w, s, "same"), ad.reshape(b, (1, b.shape[0], 1, 1)))
            if i != last:
                h = leaky_relu(h)
        return h

    def __call__(self, x):
        smap = self.score_map(x)
        return ad.reduce_mean(smap, axis=tuple(range(1, smap.ndim)))


@dataclass
class TrainConfig:
    batch: int = 8
    total_steps: int = 1000
    critic_ratio: int = 5
    lambda_x: float = 1.0
    lambda_y: float = 1.0
    lambda_gp: float = 10.0
    lr_flow: float = 1e-4
    lr_critic: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0  # 0: only final
    clip_grad: float = 50.0  # global-norm gradient clip per update group; 0 disables

    def __post_init__(self):
        if self.critic_ratio < 1:
            raise ValueError("critic_ratio must be >= 1")
        for name in ("lambda_x", "lambda_y", "lambda_gp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossRecord:
    step: int
    mle_x: float  # nats per dimension
    mle_y: float
    adv_gen_x: float
    adv_gen_y: float
    critic_x: float
    critic_y: float
    gp_x: float
    gp_y: float

    def finite(self):
        return all(math.isfinite(v) for v in asdict(self).values())


LOSS_COLUMNS = [f.name for f in fields(LossRecord)]


class AlignFlowModel:
    """Pair of flow stacks sharing one Gaussian prior, plus two critics."""

    def __init__(
        self,
        in_shape,
        levels=2,
        steps=4,
        hidden=64,
        critic_widths=(64, 128, 256),
        lambda_x=1.0,
        lambda_y=1.0,
        seed=0,
    ):
        self.store = ParameterStore()
        self.prior = GaussianPrior()
        self.lambda_x = lambda_x
        self.lambda_y = lambda_y
        self.in_shape = tuple(in_shape)
        self.critic_widths = tuple(critic_widths)
        # identical weight init for both stacks: the raw cross-map then starts
        # as (near) identity plus the per-domain actnorm statistics transfer
        self.fx = FlowStack(in_shape, levels, steps, hidden, self.store, "fx",
                            np.random.default_rng([seed, 1]))
        self.fy = FlowStack(in_shape, levels, steps, hidden, self.store, "fy",
                            np.random.default_rng([seed, 1]))
        if self.fx.latent_dim != self.fy.latent_dim or self.fx.latent_shapes != self.fy.latent_shapes:
            raise ValueError("flow stacks disagree on the latent signature")
        rng_c = np.random.default_rng([seed, 2])
        self.cx = PatchCritic(in_shape[0], critic_widths, 4, self.store, "cx", rng_c)
        self.cy = PatchCritic(in_shape[0], critic_widths, 4, self.store, "cy", rng_c)

    # -- setup / persistence ---------------------------------------------------

    def initialize(self, batch_x, batch_y):
        """Data-dependent actnorm init; a no-op when already initialized."""
        if not self.fx.initialized:
            with ad.no_grad():
                self.fx.forward(ad.as_tensor(batch_x))
        if not self.fy.initialized:
            with ad.no_grad():
                self.fy.forward(ad.as_tensor(batch_y))

    @property
    def initialized(self):
        return self.fx.initialized and self.fy.initialized

    def config(self):
        flow = self.fx.config()
        return {
            "kind": "alignflow",
            "in_shape": list(self.in_shape),
            "levels": flow["levels"],
            "steps": flow["steps"],
            "hidden": flow["hidden"],
            "critic_widths": list(self.critic_widths),
            "lambda_x": self.lambda_x,
            "lambda_y": self.lambda_y,
            "initialized": self.initialized,
        }

    def save(self, path, extra=None):
        header = self.config()
        if extra:
            header["extra"] = extra
        save_checkpoint(path, header, self.store)

    @classmethod
    def from_header(cls, header):
        return cls(
            tuple(header["in_shape"]),
            header["levels"],
            header["steps"],
            header["hidden"],
            tuple(header["critic_widths"]),
            header["lambda_x"],
            header["lambda_y"],
        )

    @classmethod
    def load(cls, path):
        header, store = load_checkpoint(path)
        if header.get("kind") != "alignflow":
            raise ValueError(f"checkpoint is a {header.get('kind')!r} model, not alignflow")
        model = cls.from_header(header)
        for name, tensor in model.store.items():
            if name not in store:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            if store[name].shape != tensor.shape:
                raise ValueError(f"checkpoint shape mismatch for {name!r}")
            tensor.data = store[name].data
        model.store._m1 = store._m1
        model.store._m2 = store._m2
        model.store._steps = store._steps
        if header.get("initialized"):
            model.fx.mark_initialized()
            model.fy.mark_initialized()
        return model, header.get("extra")

    def flow_grads(self, grads):
        return {k: v for k, v in grads.items() if k.startswith(("fx/", "fy/"))}

    def critic_grads(self, grads, which):
        return {k: v for k, v in grads.items() if k.startswith(which + "/")}


def cross_map(model, batch, direction="x-to-y"):
    """Deterministic cross-domain translation through the shared latent."""
    batch = ad.as_tensor(batch)
    if direction == "x-to-y":
        z, _ = model.fx.forward(batch)
        return model.fy.inverse(z)
    if direction == "y-to-x":
        z, _ = model.fy.forward(batch)
        return model.fx.inverse(z)
    raise ValueError(f"direction must be 'x-to-y' or 'y-to-x', got {direction!r}")


def encode(model, batch, domain="x"):
    stack = model.fx if domain == "x" else model.fy
    z, _ = stack.forward(ad.as_tensor(batch))
    return z


def mle_loss(flow, prior, batch):
    """Mean negative log-likelihood of the batch, in nats per item."""
    batch = ad.as_tensor(batch)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    return ad.neg(ad.reduce_mean(flow_log_prob(flow, prior, batch)))


def generator_adv_loss(critic, fake):
    """Wasserstein generator objective: -mean critic score of the fakes."""
    return ad.neg(ad.reduce_mean(critic(fake)))


def wgan_gp_critic_loss(critic, real, fake, lambda_gp, rng):
    """Gradient-penalized Wasserstein critic loss.

    Returns (loss, wasserstein, penalty) where
    loss = mean c(fake) - mean c(real) + lambda_gp * penalty and the penalty
    pushes the critic's input-gradient norm towards 1 along per-item random
    interpolates of real and fake.
    """
    real, fake = ad.as_tensor(real), ad.as_tensor(fake)
    if real.shape != fake.shape:
        raise ad.ShapeError(f"real {real.shape} and fake {fake.shape} batches differ")
    n = real.shape[0]
    w_term = ad.sub(ad.reduce_mean(critic(fake)), ad.reduce_mean(critic(real)))
    if lambda_gp == 0:
        return w_term, w_term, Tensor(0.0)
    u = rng.uniform(size=(n,) + (1,) * (real.ndim - 1))
    xhat = Tensor(u * real.data + (1.0 - u) * fake.data, requires_grad=True)
    score_sum = ad.reduce_sum(critic(xhat))
    (g,) = ad.grad(score_sum, [xhat], create_graph=True)
    norms = ad.power(ad.reduce_sum(ad.mul(g, g), axis=tuple(range(1, real.ndim))), 0.5)
    penalty = ad.reduce_mean(ad.power(ad.sub(norms, 1.0), 2.0))
    return ad.add(w_term, ad.mul(lambda_gp, penalty)), w_term, penalty


def alignflow_total_loss(model, batch_x, batch_y, config, seed=0, step=0):
    """All six loss components from the same pair of unpaired batches.

    Returns (generator_loss Tensor, LossRecord).  The critic terms in the
    record are evaluated with detached fakes (they describe the critics'
    current objective, not a trainable quantity here).
    """
    batch_x, batch_y = ad.as_tensor(batch_x), ad.as_tensor(batch_y)
    d = float(np.prod(batch_x.shape[1:]))

    nll_x = mle_loss(model.fx, model.prior, batch_x)
    nll_y = mle_loss(model.fy, model.prior, batch_y)
    fake_y = cross_map(model, batch_x, "x-to-y")
    fake_x = cross_map(model, batch_y, "y-to-x")
    adv_x = generator_adv_loss(model.cx, fake_x)
    adv_y = generator_adv_loss(model.cy, fake_y)

    gen = ad.add(
        ad.add(adv_x, adv_y),
        ad.add(ad.mul(model.lambda_x, nll_x), ad.mul(model.lambda_y, nll_y)),
    )

    # not under no_grad: the penalty needs a tape to differentiate the critic
    # with respect to its input, even though only the value is kept here
    cl_x, _, gp_x = wgan_gp_critic_loss(
        model.cx, batch_x, fake_x.detach(), config.lambda_gp,
        np.random.default_rng([seed, step, 90]),
    )
    cl_y, _, gp_y = wgan_gp_critic_loss(
        model.cy, batch_y, fake_y.detach(), config.lambda_gp,
        np.random.default_rng([seed, step, 91]),
    )

    record = LossRecord(
        step=step,
        mle_x=nll_x.item() / d,
        mle_y=nll_y.item() / d,
        adv_gen_x=adv_x.item(),
        adv_gen_y=adv_y.item(),
        critic_x=cl_x.item(),
        critic_y=cl_y.item(),
        gp_x=gp_x.item(),
        gp_y=gp_y.item(),
    )
    return gen, record


def clip_gradients(grads, max_norm):
    """Scale the whole gradient group down to the given global norm."""
    if not max_norm:
        return grads
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        return {k: v * factor for k, v in grads.items()}
    return grads


def train_step(model, batch_x, batch_y, config, step):
    """config.critic_ratio critic updates, then one generator update.

    Fully deterministic given (config.seed, step): every random draw comes
    from a generator keyed by both.
    """
    batch_x, batch_y = ad.as_tensor(batch_x), ad.as_tensor(batch_y)
    d = float(np.prod(batch_x.shape[1:]))
    try:
        critic_stats = {}
        for k in range(config.critic_ratio):
            with ad.no_grad():
                fake_y = cross_map(model, batch_x, "x-to-y")
                fake_x = cross_map(model, batch_y, "y-to-x")
            for tag, substream, critic, real, fake in (
                ("cx", 10, model.cx, batch_x, fake_x),
                ("cy", 11, model.cy, batch_y, fake_y),
            ):
                rng = np.random.default_rng([config.seed, step, k, substream])
                loss, w_term, gp = wgan_gp_critic_loss(critic, real, fake, config.lambda_gp, rng)
                model.store.zero_grads()
                ad.backward(loss)
                grads = clip_gradients(
                    model.critic_grads(model.store.gather_grads(), tag), config.clip_grad
                )
                adam_step(model.store, grads, lr=config.lr_critic)
                critic_stats[tag] = (loss.item(), gp.item())  # last iteration wins

        nll_x = mle_loss(model.fx, model.prior, batch_x)
        nll_y = mle_loss(model.fy, model.prior, batch_y)
        fake_y = cross_map(model, batch_x, "x-to-y")
        fake_x = cross_map(model, batch_y, "y-to-x")
        adv_x = generator_adv_loss(model.cx, fake_x)
        adv_y = generator_adv_loss(model.cy, fake_y)
        gen = ad.add(
            ad.add(adv_x, adv_y),
            ad.add(ad.mul(model.lambda_x, nll_x), ad.mul(model.lambda_y, nll_y)),
        )
        model.store.zero_grads()
        ad.backward(gen)
        grads = clip_gradients(model.flow_grads(model.store.gather_grads()), config.clip_grad)
        adam_step(model.store, grads, lr=config.lr_flow)
    except ArithmeticError as err:  # NonFiniteError, DomainError, overflow
        raise TrainingDiverged(step, err) from err

    record = LossRecord(
        step=step,
        mle_x=nll_x.item() / d,
        mle_y=nll_y.item() / d,
        adv_gen_x=adv_x.item(),
        adv_gen_y=adv_y.item(),
        critic_x=critic_stats["cx"][0],
        critic_y=critic_stats["cy"][0],
        gp_x=critic_stats["cx"][1],
        gp_y=critic_stats["cy"][1],
    )
    if not record.finite():
        raise TrainingDiverged(step, "non-finite loss component")
    return record


def sample_batch(data, batch, rng):
    idx = rng.choice(data.shape[0], size=min(batch, data.shape[0]), replace=False)
    return data[idx]


def train(model, data_x, data_y, config, out_dir=None, start_step=0, callback=None, extra=None):
    """Run the training loop over two unpaired datasets (N, C, H, W arrays).

    The domains may cover disjoint time ranges - batches are sampled
    independently.  Writes ``model.ckpt`` and ``history.csv`` under
    ``out_dir`` when given (plus periodic ``model-NNNNNN.ckpt`` files when
    the config asks for them); ``extra`` metadata is stored in every
    checkpoint header.  Returns the loss history.
    """
    if data_x.shape[0] == 0 or data_y.shape[0] == 0:
        raise ValueError("both datasets must be nonempty")
    if data_x.shape[1:] != tuple(model.in_shape) or data_y.shape[1:] != tuple(model.in_shape):
        raise ValueError(
            f"datasets must match the model grid {model.in_shape}; "
            f"got {data_x.shape[1:]} and {data_y.shape[1:]}"
        )
    if not model.initialized:
        rng0 = np.random.default_rng([config.seed, 0, 0])
        rng1 = np.random.default_rng([config.seed, 0, 1])
        init_n = min(64, data_x.shape[0], data_y.shape[0])
        model.initialize(
            sample_batch(data_x, init_n, rng0), sample_batch(data_y, init_n, rng1)
        )

    history = []
    for step in range(start_step, config.total_steps):
        bx = sample_batch(data_x, config.batch, np.random.default_rng([config.seed, step, 0]))
        by = sample_batch(data_y, config.batch, np.random.default_rng([config.seed, step, 1]))
        record = train_step(model, bx, by, config, step)
        history.append(record)
        if callback is not None:
            callback(step, record, model)
        if out_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            model.save(
                f"{out_dir}/model-{step + 1:06d}.ckpt",
                extra={**(extra or {}), "next_step": step + 1},
            )
    if out_dir is not None:
        model.save(f"{out_dir}/model.ckpt", extra={**(extra or {}), "next_step": config.total_steps})
        write_history(f"{out_dir}/history.csv", history)
    return history


def write_history(path, history, append=False):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(LOSS_COLUMNS)
        for rec in history:
            row = asdict(rec)
            writer.writerow([row["step"]] + [repr(row[c]) for c in LOSS_COLUMNS[1:]])


def read_history(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != LOSS_COLUMNS:
            raise ValueError(f"unexpected history columns {header}")
        return [
            LossRecord(int(row[0]), *(float(v) for v in row[1:])) for row in reader
        ]
