"""Dissipativity certification for uncertain differential-algebraic systems.

Subpackages:
    linalg    dense matrix kernels (null spaces, truncated SVD, spectra)
    sdp/ipm   semidefinite-program model and interior-point solver
    poly      multivariate polynomials and monomial bases
    dae       DAE system models, supply rates, simulation and gain oracles
    certify   dissipation LMIs for linear DAEs, gain minimization
    sos       sum-of-squares compiler for polynomial DAEs
    power39   New England 39-bus line-failure case study pipeline
    cli       command-line front end
"""

__version__ = "0.1.0"
