"""Symbolic checks of the closed forms used by the numeric code, using sympy"""

import sympy

rA, rB = sympy.symbols("r_A r_B", real=True)
theta = sympy.Symbol("theta", positive=True)
t = sympy.Symbol("t", positive=True)
x, x0, x1, v_pred = sympy.symbols("x x_0 x_1 v_pred", real=True)


def btt_probabilities(printed=False):
    """Win, loss and tie probabilities of the tie-aware preference model

    :param printed: use the variant whose win denominators swap the roles of
                    the two rewards; it does not sum to one
    """
    eA, eB = sympy.exp(rA), sympy.exp(rB)
    if printed:
        pA = eA/(eB + theta*eA)
        pB = eB/(eA + theta*eB)
    else:
        pA = eA/(eA + theta*eB)
        pB = eB/(theta*eA + eB)
    pTie = (theta**2 - 1)*eA*eB/((eA + theta*eB)*(theta*eA + eB))
    return pA, pB, pTie


def btt_normalisation_residual(printed=False):
    """``pA + pB + pTie - 1`` simplified; zero for the normalised form"""
    return sympy.simplify(sum(btt_probabilities(printed)) - 1)


def btt_tie_at_equal_rewards():
    """pTie when rA = rB, simplifies to (theta - 1)/(theta + 1)"""
    return sympy.simplify(btt_probabilities()[2].subs(rB, rA))


def terminal_noise_identity_residual():
    """Noise error minus (1 - t)**2 times velocity error, which vanishes"""
    x_t = (1 - t)*x0 + t*x1
    x1_pred = x_t + (1 - t)*v_pred
    return sympy.expand((x1 - x1_pred)**2 - (1 - t)**2*((x1 - x0) - v_pred)**2)


def gaussian_density(var):
    return sympy.exp(-x**2/(2*var))/sympy.sqrt(2*sympy.pi*var)


def gaussian_continuity_residual():
    """Continuity equation residual of the Gaussian marginal velocity

    With N(0, 1) data and noise, ``p_t = N(0, (1 - t)**2 + t**2)`` and the
    velocity ``(2t - 1)x/((1 - t)**2 + t**2)`` transports it, which requires
    ``dp/dt + d(p v)/dx = 0``.
    """
    var = (1 - t)**2 + t**2
    p = gaussian_density(var)
    v = (2*t - 1)*x/var
    return sympy.simplify(sympy.diff(p, t) + sympy.diff(p*v, x))


def velocity_from_score(score):
    """Marginal velocity written through the score: ``x/(t - 1) + t/(t - 1)*score``"""
    return x/(t - 1) + t/(t - 1)*score


def velocity_from_score_residual():
    """The score form reproduces the Gaussian marginal velocity"""
    var = (1 - t)**2 + t**2
    score = sympy.diff(sympy.log(gaussian_density(var)), x)
    return sympy.simplify(velocity_from_score(score) - (2*t - 1)*x/var)
