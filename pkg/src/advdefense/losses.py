"""Classification losses and their closed-form gradients.

Multiclass uses softmax cross-entropy, binary mode the logistic loss
on the sign classifier output.  Gradients w.r.t. logits are the usual
residuals (softmax - onehot, resp. -y * sigmoid(-y f)); gradients
w.r.t. the input chain them through the network Jacobian.
"""

import numpy as np

from .network import input_gradient, jacobian, mlp_forward


def softmax(logits):
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / np.sum(e)


def cross_entropy(logits, label):
    z = logits - np.max(logits)
    return float(np.log(np.sum(np.exp(z))) - z[label])


def logistic_loss(f, label):
    # log(1 + exp(-y f)), stable for large |f|
    m = -label * f
    return float(np.logaddexp(0.0, m))


def sample_loss(net, x, label):
    out = mlp_forward(net, x)
    if net.n_classes == 1:
        return logistic_loss(out[0], label)
    return cross_entropy(out, label)


def logit_residual(net, logits, label):
    """dL/dlogits at the given output."""
    if net.n_classes == 1:
        f = logits[0]
        sig = 1.0 / (1.0 + np.exp(label * f))
        return np.array([-label * sig])
    r = softmax(logits)
    r[label] -= 1.0
    return r


def loss_input_gradient(net, x, label):
    """dL/dx for one sample."""
    out = mlp_forward(net, x)
    if net.n_classes == 1:
        res = logit_residual(net, out, label)
        return res[0] * input_gradient(net, x)
    return jacobian(net, x) @ logit_residual(net, out, label)
