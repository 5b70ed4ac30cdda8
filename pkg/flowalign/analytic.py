"""Closed-form fields and rewards used to check the sampler and guidance

With standard normal data and standard normal noise the interpolant
``x_t = (1 - t)*x0 + t*x1`` is N(0, s2) with ``s2 = (1 - t)**2 + t**2`` and
everything below is exact.
"""

import numpy


def gaussian_variance(t):
    t = numpy.asarray(t, dtype=numpy.float64)
    return (1 - t)**2 + t**2


def gaussian_velocity(x, t):
    """Marginal velocity E[x1 - x0 | x_t = x] for N(0, 1) data

    :param x: position
    :param t: time, 0 is data and 1 is noise
    """
    return (2*numpy.asarray(t) - 1)*numpy.asarray(x)/gaussian_variance(t)


def gaussian_posterior_mean(x, t):
    """E[x0 | x_t = x] for N(0, 1) data"""
    return (1 - numpy.asarray(t))*numpy.asarray(x)/gaussian_variance(t)


def gaussian_noisy_reward(x, t, alpha):
    """Noisy-latent reward for the clean reward ``alpha*x0``"""
    return alpha*gaussian_posterior_mean(x, t)


def gaussian_noisy_reward_grad(x, t, alpha):
    return numpy.broadcast_to(alpha*(1 - numpy.asarray(t))/gaussian_variance(t),
                              numpy.shape(x)).astype(numpy.float64)


class GaussianField:
    """The Gaussian marginal velocity as a sampler field"""
    sample_dim = 1

    def __call__(self, x, t, y, dropped=None):
        return gaussian_velocity(x, t)


class ConstantField:
    def __init__(self, c, sample_dim):
        self.c = numpy.asarray(c, dtype=numpy.float64)
        self.sample_dim = sample_dim

    def __call__(self, x, t, y, dropped=None):
        return numpy.broadcast_to(self.c, numpy.shape(x)).copy()


class GaussianReward:
    """Posterior-mean reward with the interface of a noisy reward model"""

    def __init__(self, alpha):
        self.alpha = alpha

    def scores(self, x, y, t):
        return gaussian_noisy_reward(numpy.atleast_2d(x), t, self.alpha)

    def weighted_reward(self, x, y, t, weights):
        """Scalar reward per sample and its gradient with respect to x"""
        x = numpy.atleast_2d(numpy.asarray(x, dtype=numpy.float64))
        w = float(numpy.sum(weights.as_array() if hasattr(weights, "as_array") else weights))
        return (w*gaussian_noisy_reward(x, t, self.alpha)[:, 0],
                w*gaussian_noisy_reward_grad(x, t, self.alpha))
