"""Apparel encoder: a convolutional auto-encoder producing cloth codes."""

import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .exceptions import ContractViolation
from .layers import down_block, eval_mode, init_weights, run_checked, up_block
from .training import make_optimizer, resolve_dtype, sample_minibatch
from .validation import check_codes, check_images, check_rng, check_same_shape

DEFAULT_WIDTHS = (64, 128, 256, 512, 512)


class ApparelEncoderNet(nn.Module):
    """Five stride-2 conv blocks down to the cloth code, five transposed-conv blocks back.

    With the default widths a 3x256x128 cloth image maps to a 512x8x4 code.
    The output block is a bare transposed convolution followed by tanh.
    """

    def __init__(self, widths=DEFAULT_WIDTHS):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) != 5:
            raise ContractViolation(f"apparel encoder needs 5 widths, got {len(widths)}")
        self.widths = widths
        chans = (3,) + widths
        self.encoder = nn.ModuleList(down_block(a, b) for a, b in zip(chans[:-1], chans[1:]))
        rev = chans[::-1]
        blocks = [up_block(a, b) for a, b in zip(rev[:-2], rev[1:-1])]
        blocks.append(nn.Sequential(nn.ConvTranspose2d(rev[-2], 3, 4, 2, 1), nn.Tanh()))
        self.decoder = nn.ModuleList(blocks)
        init_weights(self)

    @property
    def code_channels(self):
        return self.widths[-1]

    def architecture(self):
        return {"widths": list(self.widths)}

    def encode(self, x):
        for block in self.encoder:
            x = block(x)
        return x

    def decode(self, z):
        for block in self.decoder:
            z = block(z)
        return z

    def forward(self, x):
        return self.decode(self.encode(x))


def encode_cloth(net, cloth_image):
    """Cloth code(s) for one image or a batch, with BN in inference mode."""
    single = torch.is_tensor(cloth_image) and cloth_image.dim() == 3
    x = check_images(cloth_image, dtype=next(net.parameters()).dtype)
    with eval_mode(net), torch.no_grad():
        z = run_checked(net.encoder, x, "encoder")
    return z[0] if single else z


def decode_cloth(net, code):
    single = torch.is_tensor(code) and code.dim() == 3
    z = check_codes(code, channels=net.code_channels).to(next(net.parameters()).dtype)
    with eval_mode(net), torch.no_grad():
        x = run_checked(net.decoder, z, "decoder")
    return x[0] if single else x


def l1_loss(target, output):
    """Mean absolute elementwise difference."""
    check_same_shape(target, output, "L1 loss inputs")
    return (target - output).abs().mean()


ea_loss = l1_loss


def train_ea_step(net, batch, optimizer):
    """One gradient step of the auto-encoder on ``batch`` as input and target.

    Returns the loss measured before the step.
    """
    x = check_images(batch, dtype=next(net.parameters()).dtype)
    net.train()
    loss = ea_loss(x, net(x))
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


class ApparelEncoder(TransformerMixin, BaseEstimator):
    """Cloth auto-encoder as a transformer: cloth images in, cloth codes out.

    Parameters
    ----------
    widths : tuple of int
        Channel widths of the five down-sampling blocks; the last is the
        code depth. Mirrored by the decoder.
    n_steps : int
        Number of gradient steps in :meth:`fit`.
    batch_size : int
        Minibatch size; batches are sampled without replacement each step.
    optimizer : {'sgd', 'adam'}
    lr, momentum, weight_decay : float
    random_state : int or None
    dtype : {'float32', 'float64'}

    Attributes
    ----------
    net_ : ApparelEncoderNet
    loss_curve_ : list of float
        Pre-step loss of every step.
    """

    def __init__(self, widths=DEFAULT_WIDTHS, n_steps=2000, batch_size=8, optimizer="sgd",
                 lr=0.01, momentum=0.9, weight_decay=5e-4, random_state=None,
                 dtype="float32"):
        self.widths = widths
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.dtype = dtype

    def _init_net(self, rng):
        torch.manual_seed(int(rng.integers(0, 2**31 - 1)))
        return ApparelEncoderNet(self.widths).to(resolve_dtype(self.dtype))

    def fit(self, X, y=None):
        dtype = resolve_dtype(self.dtype)
        X = check_images(X, dtype=dtype)
        rng = check_rng(self.random_state)
        self.net_ = self._init_net(rng)
        opt = make_optimizer(self.net_.parameters(), self.optimizer, self.lr,
                             self.momentum, self.weight_decay)
        self.loss_curve_ = []
        for _ in range(self.n_steps):
            idx = sample_minibatch(len(X), self.batch_size, rng)
            self.loss_curve_.append(train_ea_step(self.net_, X[idx], opt))
        self.net_.eval()
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        return encode_cloth(self.net_, check_images(X))

    def inverse_transform(self, codes):
        check_is_fitted(self, "net_")
        return decode_cloth(self.net_, codes)

    def score(self, X, y=None):
        """Negative mean L1 reconstruction error (higher is better)."""
        X = check_images(X, dtype=resolve_dtype(self.dtype))
        recon = self.inverse_transform(self.transform(X))
        return -float(l1_loss(X, recon))

    @classmethod
    def from_net(cls, net, **params):
        est = cls(widths=net.widths, **params)
        est.net_ = net
        est.loss_curve_ = []
        return est


def reconstruction_error(net, X):
    return float(l1_loss(X, decode_cloth(net, encode_cloth(net, X))))


__all__ = [
    "ApparelEncoderNet", "ApparelEncoder", "encode_cloth", "decode_cloth", "ea_loss",
    "l1_loss", "train_ea_step", "reconstruction_error", "DEFAULT_WIDTHS",
]
