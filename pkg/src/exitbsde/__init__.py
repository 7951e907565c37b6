"""Deep-BSDE style losses on random exit-time horizons.

Modules: ``geometry`` (domains), ``problems`` (forward/backward problem specs),
``funclass`` (candidate functions), ``simulate`` (Euler-Maruyama with exit
detection and bridge-refined references), ``loss`` (loss summands, weights,
Monte Carlo estimates), ``rates`` (stepsize studies), ``train`` (SGD on
single-hidden-layer nets) and ``cli``.
"""

__version__ = "0.1.0"
