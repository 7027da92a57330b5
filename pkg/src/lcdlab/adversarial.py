"""Adversarial feature learning for top-view place codes.

Two objectives share one five-network model:

* baseline: the bidirectional min-max game with a sigmoid-headed joint
  discriminator (saturating JSD value function, non-saturating generator);
* stable: a weight-clipped Wasserstein joint critic, plus cycle
  reconstruction in both domains and per-domain JSD side discriminators.

The generator pair is En (image -> code) and De (code -> image); D_J judges
joint (image, code) samples with an unbounded head, D_X and D_Z are the
side discriminators with sigmoid heads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import MalformedFileError, NumericError
from .mapping import TopViewImage
from .network import (LayerSpec, Network, OptimizerState, clip_params,
                      load_networks, optimizer_step, save_networks)

CODE_FILE_MAGIC = b"SAFC"
CODE_FILE_VERSION = 1

OBJECTIVES = ("stable-afl", "bigan-baseline")


@dataclass
class BiGANModel:
    en: Network     # image -> code
    de: Network     # code -> image
    dj: Network     # image (+) code -> unbounded scalar
    dx: Network     # image -> probability
    dz: Network     # code -> probability
    code_dim: int
    image_hw: int

    def networks(self) -> dict[str, Network]:
        return {"en": self.en, "de": self.de, "dj": self.dj,
                "dx": self.dx, "dz": self.dz}


def build_bigan(image_hw: int = 64, code_dim: int = 64,
                channels: tuple[int, int, int] = (16, 32, 64),
                disc_hidden: tuple[int, int] = (256, 128),
                seed: int = 0) -> BiGANModel:
    """Construct the five networks: strided-conv encoder, upsampling decoder,
    and three dense discriminators. Weights are seeded per network so the
    whole model is reproducible from one seed."""
    if image_hw % 8 != 0:
        raise ValueError("image_hw must be divisible by 8 (three stride-2 stages)")
    c1, c2, c3 = channels
    bottom = image_hw // 8
    flat_img = image_hw * image_hw
    h1, h2 = disc_hidden

    en = Network([
        LayerSpec("conv2d", fan_in=1, fan_out=c1, kernel=4, stride=2),
        LayerSpec("leaky_relu", alpha=0.2),
        LayerSpec("conv2d", fan_in=c1, fan_out=c2, kernel=4, stride=2),
        LayerSpec("leaky_relu", alpha=0.2),
        LayerSpec("conv2d", fan_in=c2, fan_out=c3, kernel=4, stride=2),
        LayerSpec("leaky_relu", alpha=0.2),
        LayerSpec("flatten"),
        LayerSpec("dense", fan_in=c3 * bottom * bottom, fan_out=code_dim),
    ], seed=seed)

    de = Network([
        LayerSpec("dense", fan_in=code_dim, fan_out=c3 * bottom * bottom),
        LayerSpec("leaky_relu", alpha=0.2),
        LayerSpec("reshape", shape=(c3, bottom, bottom)),
        LayerSpec("upsample", factor=2),
        LayerSpec("conv2d", fan_in=c3, fan_out=c2, kernel=3, stride=1),
        LayerSpec("leaky_relu", alpha=0.2),
        LayerSpec("upsample", factor=2),
        LayerSpec("conv2d", fan_in=c2, fan_out=c1, kernel=3, stride=1),
        LayerSpec("leaky_relu", alpha=0.2),
        LayerSpec("upsample", factor=2),
        LayerSpec("conv2d", fan_in=c1, fan_out=1, kernel=3, stride=1),
        LayerSpec("tanh"),
    ], seed=seed + 1)

    def mlp(n_in, out_sigmoid, net_seed):
        layers = [
            LayerSpec("dense", fan_in=n_in, fan_out=h1),
            LayerSpec("leaky_relu", alpha=0.2),
            LayerSpec("dense", fan_in=h1, fan_out=h2),
            LayerSpec("leaky_relu", alpha=0.2),
            LayerSpec("dense", fan_in=h2, fan_out=1),
        ]
        if out_sigmoid:
            layers.append(LayerSpec("sigmoid"))
        return Network(layers, seed=net_seed)

    return BiGANModel(
        en=en, de=de,
        dj=mlp(flat_img + code_dim, False, seed + 2),
        dx=mlp(flat_img, True, seed + 3),
        dz=mlp(code_dim, True, seed + 4),
        code_dim=code_dim, image_hw=image_hw)


@dataclass
class TrainConfig:
    batch_size: int = 8
    iterations: int = 500
    n_critic: int = 5
    clip_c: float = 0.01
    lr: float = 5e-5
    code_prior: str = "uniform"   # uniform on [-1, 1]^code_dim
    lambda_x: float = 1.0
    lambda_z: float = 1.0
    lambda_cyc: float = 1.0
    seed: int = 0
    optimizer: str = "rmsprop"
    rho: float = 0.9
    eps: float = 1e-8
    aug_rot: float = 0.0   # rotation augmentation amplitude b: uniform(-b/2, b/2) rad
    epoch_len: int = 0     # iterations per epoch for callbacks; 0 = no epochs

    def __post_init__(self):
        if min(self.batch_size, self.n_critic) < 1 or self.iterations < 0:
            raise ValueError("batch_size and n_critic must be positive")
        if self.clip_c <= 0 or self.lr <= 0:
            raise ValueError("clip_c and lr must be positive")
        if self.code_prior != "uniform":
            raise ValueError(f"unsupported code prior {self.code_prior!r}")


@dataclass
class LatentCode:
    values: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise NumericError("latent code contains non-finite values")


@dataclass
class LossReport:
    """Per-iteration loss trace; columns iter,L_J,L_X,L_Z,L_cyc,critic_estimate."""
    rows: list = field(default_factory=list)

    COLUMNS = ("iter", "L_J", "L_X", "L_Z", "L_cyc", "critic_estimate")

    def append(self, it, l_j, l_x, l_z, l_cyc, critic):
        self.rows.append((int(it), float(l_j), float(l_x), float(l_z),
                          float(l_cyc), float(critic)))

    def to_csv(self, path) -> None:
        lines = [",".join(self.COLUMNS)]
        for row in self.rows:
            lines.append(",".join([str(row[0])] + [repr(v) for v in row[1:]]))
        Path(path).write_text("\n".join(lines) + "\n")


# --- loss graphs -----------------------------------------------------------
#
# Each builder assembles one scalar graph from explicit parameter leaves, so
# a single backprop yields every gradient and the same builders serve both
# training and the finite-difference checks.

def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None, :, :]
    return x


def _mean_scalar(t: ad.Tensor) -> ad.Tensor:
    return ad.mean_all(t)


def _joint_input(x_img: ad.Tensor, code: ad.Tensor) -> ad.Tensor:
    flat = ad.reshape(x_img, (x_img.data.shape[0], -1))
    return ad.concat(flat, code, axis=1)


def build_bigan_jsd_graphs(model, nodes, x, z):
    """Saturating discriminator loss and non-saturating generator loss for
    the baseline min-max game (sigmoid head on the joint discriminator)."""
    x_t, z_t = ad.Tensor(x), ad.Tensor(z)
    ex = model.en.apply(x_t, nodes["en"])
    gz = model.de.apply(z_t, nodes["de"])
    d_real = ad.sigmoid(model.dj.apply(_joint_input(x_t, ex), nodes["dj"]))
    d_fake = ad.sigmoid(model.dj.apply(_joint_input(gz, z_t), nodes["dj"]))
    disc = ad.neg(ad.add(_mean_scalar(ad.safe_log(d_real)),
                         _mean_scalar(ad.safe_log(sub_one(d_fake)))))
    gen = ad.neg(ad.add(_mean_scalar(ad.safe_log(d_fake)),
                        _mean_scalar(ad.safe_log(sub_one(d_real)))))
    return disc, gen


def sub_one(t: ad.Tensor) -> ad.Tensor:
    return ad.sub(ad.Tensor(np.ones_like(t.data)), t)


def build_wasserstein_graphs(model, nodes, x, z, detach_gen: bool = False):
    """Joint critic estimate mean[D_J(x, En(x))] - mean[D_J(De(z), z)].
    Returns (critic_loss, gen_loss): the critic maximizes the estimate (its
    loss is the negation); the generator minimizes the same expression."""
    x_t, z_t = ad.Tensor(x), ad.Tensor(z)
    ex = model.en.apply(x_t, nodes["en"])
    gz = model.de.apply(z_t, nodes["de"])
    if detach_gen:
        ex, gz = ex.detach(), gz.detach()
    est = ad.sub(_mean_scalar(model.dj.apply(_joint_input(x_t, ex), nodes["dj"])),
                 _mean_scalar(model.dj.apply(_joint_input(gz, z_t), nodes["dj"])))
    return ad.neg(est), est


def build_cycle_graph(model, nodes, x, z):
    """Mean per-sample squared reconstruction error in both domains:
    De(En(x)) against x and En(De(z)) against z."""
    x_t, z_t = ad.Tensor(x), ad.Tensor(z)
    x_rec = model.de.apply(model.en.apply(x_t, nodes["en"]), nodes["de"])
    z_rec = model.en.apply(model.de.apply(z_t, nodes["de"]), nodes["en"])
    n_x, n_z = x.shape[0], z.shape[0]
    data_term = ad.scale(ad.sum_all(ad.square(ad.sub(x_rec, x_t))), 1.0 / n_x)
    code_term = ad.scale(ad.sum_all(ad.square(ad.sub(z_rec, z_t))), 1.0 / n_z)
    return ad.add(data_term, code_term)


def build_side_data_graphs(model, nodes, x, z, detach_gen: bool = False):
    """JSD GAN loss on the data domain: D_X tells real images from De(z)."""
    x_t, z_t = ad.Tensor(x), ad.Tensor(z)
    gz = model.de.apply(z_t, nodes["de"])
    if detach_gen:
        gz = gz.detach()
    gz_flat = ad.reshape(gz, (z.shape[0], -1))
    d_real = model.dx.apply(ad.reshape(x_t, (x.shape[0], -1)), nodes["dx"])
    d_fake = model.dx.apply(gz_flat, nodes["dx"])
    dx_loss = ad.neg(ad.add(_mean_scalar(ad.safe_log(d_real)),
                            _mean_scalar(ad.safe_log(sub_one(d_fake)))))
    gen_term = ad.neg(_mean_scalar(ad.safe_log(d_fake)))
    return dx_loss, gen_term


def build_side_code_graphs(model, nodes, x, z, detach_gen: bool = False):
    """Code-domain mirror of the data-side loss: D_Z tells prior codes from
    encoded ones, and the generator term pushes En(x) toward the prior."""
    x_t, z_t = ad.Tensor(x), ad.Tensor(z)
    ex = model.en.apply(x_t, nodes["en"])
    if detach_gen:
        ex = ex.detach()
    d_real = model.dz.apply(z_t, nodes["dz"])
    d_fake = model.dz.apply(ex, nodes["dz"])
    dz_loss = ad.neg(ad.add(_mean_scalar(ad.safe_log(d_real)),
                            _mean_scalar(ad.safe_log(sub_one(d_fake)))))
    gen_term = ad.neg(_mean_scalar(ad.safe_log(d_fake)))
    return dz_loss, gen_term


def _fresh_nodes(model: BiGANModel) -> dict:
    return {name: net.make_param_nodes() for name, net in model.networks().items()}


def _grads_of(net: Network, nodes) -> list[list[np.ndarray]]:
    return [[n.grad if n.grad is not None else np.zeros_like(n.data) for n in layer]
            for layer in nodes]


# --- public loss values (floats), per the operation contracts --------------

def loss_bigan_jsd(model, x_batch, z_batch) -> tuple[float, float]:
    x, z = _as_batch(x_batch), np.asarray(z_batch, dtype=np.float64)
    disc, gen = build_bigan_jsd_graphs(model, _fresh_nodes(model), x, z)
    return disc.item(), gen.item()


def loss_joint_wasserstein(model, x_batch, z_batch) -> tuple[float, float]:
    x, z = _as_batch(x_batch), np.asarray(z_batch, dtype=np.float64)
    critic_loss, gen_loss = build_wasserstein_graphs(model, _fresh_nodes(model), x, z)
    return critic_loss.item(), gen_loss.item()


def loss_cycle(model, x_batch, z_batch) -> float:
    x, z = _as_batch(x_batch), np.asarray(z_batch, dtype=np.float64)
    return build_cycle_graph(model, _fresh_nodes(model), x, z).item()


def loss_side_data(model, x_batch, z_batch) -> tuple[float, float]:
    x, z = _as_batch(x_batch), np.asarray(z_batch, dtype=np.float64)
    dx_loss, gen = build_side_data_graphs(model, _fresh_nodes(model), x, z)
    return dx_loss.item(), gen.item()


def loss_side_code(model, x_batch, z_batch) -> tuple[float, float]:
    x, z = _as_batch(x_batch), np.asarray(z_batch, dtype=np.float64)
    dz_loss, gen = build_side_code_graphs(model, _fresh_nodes(model), x, z)
    return dz_loss.item(), gen.item()


def full_objective(model, x_batch, z_batch, lambda_x=1.0, lambda_z=1.0,
                   lambda_cyc=1.0) -> float:
    """Composed total L_J + lx*L_X + lz*L_Z + lc*L_cyc (pure composition)."""
    l_j = loss_joint_wasserstein(model, x_batch, z_batch)[1]
    l_x = loss_side_data(model, x_batch, z_batch)[0]
    l_z = loss_side_code(model, x_batch, z_batch)[0]
    l_c = loss_cycle(model, x_batch, z_batch)
    return l_j + lambda_x * l_x + lambda_z * l_z + lambda_cyc * l_c


# --- rotation augmentation --------------------------------------------------

def rotate_image(img: np.ndarray, angle: float, fill: float = -1.0) -> np.ndarray:
    """Nearest-neighbor rotation about the image center (normalized images)."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    c, s = np.cos(angle), np.sin(angle)
    src_r = c * (rows - cy) + s * (cols - cx) + cy
    src_c = -s * (rows - cy) + c * (cols - cx) + cx
    ri = np.rint(src_r).astype(np.int64)
    ci = np.rint(src_c).astype(np.int64)
    ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    out = np.full_like(img, fill)
    out[ok] = img[ri[ok], ci[ok]]
    return out


# --- training ----------------------------------------------------------------

def _sample_batch(images: np.ndarray, cfg: TrainConfig, rng) -> np.ndarray:
    idx = rng.integers(0, images.shape[0], size=cfg.batch_size)
    batch = images[idx]
    if cfg.aug_rot > 0.0:
        batch = batch.copy()
        for i in range(batch.shape[0]):
            ang = rng.uniform(-cfg.aug_rot / 2.0, cfg.aug_rot / 2.0)
            batch[i, 0] = rotate_image(batch[i, 0], ang)
    return batch


def _sample_prior(cfg: TrainConfig, code_dim: int, rng) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(cfg.batch_size, code_dim))


def _check_finite(value: float, iteration: int, name: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {name} at iteration {iteration}")


def train(model: BiGANModel, images, config: TrainConfig,
          objective: str = "stable-afl", on_epoch=None, on_critic_step=None
          ) -> tuple[BiGANModel, LossReport]:
    """Run the training loop; deterministic for a given config seed.

    stable-afl iterations: n_critic clipped critic updates on D_J, one JSD
    update each for D_X and D_Z, then one generator update on En and De
    minimizing the critic estimate plus weighted side and cycle terms.
    bigan-baseline iterations: one JSD discriminator update on the
    sigmoid-headed D_J and one non-saturating generator update.

    on_critic_step(model) fires after each clipped critic update;
    on_epoch(model, epoch_index) fires every config.epoch_len iterations.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    images = _as_batch(images)
    if images.shape[0] < config.batch_size:
        raise ValueError("dataset smaller than one batch")
    if images.shape[2] != model.image_hw or images.shape[3] != model.image_hw:
        raise ValueError(f"images must be {model.image_hw}x{model.image_hw}")

    rng = np.random.default_rng(config.seed)
    report = LossReport()
    opts = {name: OptimizerState(kind=config.optimizer, learning_rate=config.lr,
                                 rho=config.rho, eps=config.eps)
            for name in ("en", "de", "dj", "dx", "dz")}

    def step(net_name, nodes, loss_graph):
        ad.backprop(loss_graph)
        net = model.networks()[net_name]
        optimizer_step(opts[net_name], net, _grads_of(net, nodes[net_name]))

    for it in range(config.iterations):
        if objective == "bigan-baseline":
            x = _sample_batch(images, config, rng)
            z = _sample_prior(config, model.code_dim, rng)
            nodes = _fresh_nodes(model)
            disc, _ = build_bigan_jsd_graphs(model, nodes, x, z)
            _check_finite(disc.item(), it, "discriminator loss")
            step("dj", nodes, disc)

            x = _sample_batch(images, config, rng)
            z = _sample_prior(config, model.code_dim, rng)
            nodes = _fresh_nodes(model)
            _, gen = build_bigan_jsd_graphs(model, nodes, x, z)
            _check_finite(gen.item(), it, "generator loss")
            ad.backprop(gen)
            for name in ("en", "de"):
                optimizer_step(opts[name], model.networks()[name],
                               _grads_of(model.networks()[name], nodes[name]))
            report.append(it, disc.item(), 0.0, 0.0, 0.0, gen.item())
        else:
            critic_loss_val = 0.0
            for _ in range(config.n_critic):
                x = _sample_batch(images, config, rng)
                z = _sample_prior(config, model.code_dim, rng)
                nodes = _fresh_nodes(model)
                critic_loss, _ = build_wasserstein_graphs(model, nodes, x, z,
                                                          detach_gen=True)
                critic_loss_val = critic_loss.item()
                _check_finite(critic_loss_val, it, "critic loss")
                step("dj", nodes, critic_loss)
                clip_params(model.dj, config.clip_c)
                if on_critic_step is not None:
                    on_critic_step(model)

            x = _sample_batch(images, config, rng)
            z = _sample_prior(config, model.code_dim, rng)
            nodes = _fresh_nodes(model)
            dx_loss, _ = build_side_data_graphs(model, nodes, x, z, detach_gen=True)
            _check_finite(dx_loss.item(), it, "data-side loss")
            step("dx", nodes, dx_loss)

            nodes = _fresh_nodes(model)
            dz_loss, _ = build_side_code_graphs(model, nodes, x, z, detach_gen=True)
            _check_finite(dz_loss.item(), it, "code-side loss")
            step("dz", nodes, dz_loss)

            x = _sample_batch(images, config, rng)
            z = _sample_prior(config, model.code_dim, rng)
            nodes = _fresh_nodes(model)
            _, gen_w = build_wasserstein_graphs(model, nodes, x, z)
            _, gen_x = build_side_data_graphs(model, nodes, x, z)
            _, gen_z = build_side_code_graphs(model, nodes, x, z)
            cyc = build_cycle_graph(model, nodes, x, z)
            total = ad.add(gen_w, ad.scale(gen_x, config.lambda_x))
            total = ad.add(total, ad.scale(gen_z, config.lambda_z))
            total = ad.add(total, ad.scale(cyc, config.lambda_cyc))
            _check_finite(total.item(), it, "generator loss")
            ad.backprop(total)
            for name in ("en", "de"):
                optimizer_step(opts[name], model.networks()[name],
                               _grads_of(model.networks()[name], nodes[name]))
            report.append(it, critic_loss_val, dx_loss.item(), dz_loss.item(),
                          cyc.item(), -critic_loss_val)

        if on_epoch is not None and config.epoch_len > 0 and \
                (it + 1) % config.epoch_len == 0:
            on_epoch(model, (it + 1) // config.epoch_len - 1)
    return model, report


# --- encoding ----------------------------------------------------------------

def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit pixels onto the network input range [-1, 1]."""
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


def encode(model: BiGANModel, image: TopViewImage | np.ndarray,
           frame_id: int = 0) -> LatentCode:
    """Pure forward pass of the encoder on one normalized top-view image."""
    px = image.pixels if isinstance(image, TopViewImage) else np.asarray(image)
    if px.shape != (model.image_hw, model.image_hw):
        raise ValueError(
            f"image is {px.shape}, encoder expects {(model.image_hw, model.image_hw)}")
    x = normalize_pixels(px)[None, None, :, :]
    nodes = model.en.make_param_nodes()
    code = model.en.apply(ad.Tensor(x), nodes)
    return LatentCode(values=code.data[0], frame_id=frame_id)


def encode_batch(model: BiGANModel, images: np.ndarray,
                 frame_ids=None) -> list[LatentCode]:
    """Encode a stack of images in one forward pass."""
    x = normalize_pixels(images)
    if x.ndim == 3:
        x = x[:, None, :, :]
    nodes = model.en.make_param_nodes()
    codes = model.en.apply(ad.Tensor(x), nodes).data
    ids = range(codes.shape[0]) if frame_ids is None else frame_ids
    return [LatentCode(values=codes[i], frame_id=fid) for i, fid in enumerate(ids)]


# --- code files ----------------------------------------------------------------

def code_payload(code: LatentCode) -> bytes:
    """The serialized float32 vector; a 1024-dim code is exactly 4096 bytes."""
    return code.values.astype("<f4").tobytes()


def write_codes(path, codes: list[LatentCode]) -> None:
    if not codes:
        raise ValueError("refusing to write an empty code file")
    dim = codes[0].values.size
    for c in codes:
        if c.values.size != dim:
            raise ValueError("all codes in one file must share a dimension")
    with open(path, "wb") as fh:
        fh.write(CODE_FILE_MAGIC)
        fh.write(struct.pack("<III", CODE_FILE_VERSION, dim, len(codes)))
        for c in codes:
            fh.write(struct.pack("<I", c.frame_id))
            fh.write(code_payload(c))


def read_codes(path) -> list[LatentCode]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CODE_FILE_MAGIC:
        raise MalformedFileError(f"{path}: not a SAFC code file")
    version, dim, count = struct.unpack_from("<III", raw, 4)
    if version != CODE_FILE_VERSION:
        raise MalformedFileError(f"{path}: unsupported code file version {version}")
    expected = 16 + count * (4 + 4 * dim)
    if len(raw) != expected:
        raise MalformedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    codes, off = [], 16
    for _ in range(count):
        (fid,) = struct.unpack_from("<I", raw, off)
        off += 4
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
        codes.append(LatentCode(values=vec, frame_id=fid))
    return codes


def save_model(path, model: BiGANModel) -> None:
    save_networks(path, model.networks())


def load_model(path) -> BiGANModel:
    nets = load_networks(path)
    missing = {"en", "de", "dj", "dx", "dz"} - set(nets)
    if missing:
        raise MalformedFileError(f"{path}: checkpoint missing networks {sorted(missing)}")
    code_dim = nets["en"].specs[-1].fan_out
    image_hw = int(round((nets["dx"].specs[0].fan_in) ** 0.5))
    return BiGANModel(en=nets["en"], de=nets["de"], dj=nets["dj"],
                      dx=nets["dx"], dz=nets["dz"],
                      code_dim=code_dim, image_hw=image_hw)
