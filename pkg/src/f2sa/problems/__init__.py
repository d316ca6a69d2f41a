from .base import BilevelProblem, InnerSolveStalled, NoSecondOrderAccess, minimize_lower
from .hard import (
    GammaOutOfRange,
    HardInstance,
    HardInstanceParams,
    f_nc,
    grad_f_nc,
    make_hard_instance,
    masked_chain_grad,
    phi_cap,
    phi_cap_prime,
    prog,
    psi,
    psi_prime,
    rho,
    rho_jacobian,
)
from .learn2reg import Learn2Reg, ScaleTooLarge, make_learn2reg
from .synthetic import LinearCoupling, TanhCoupling, make_linear_coupling, make_tanh_coupling

PROBLEM_NAMES = ("linear", "tanh", "hard", "learn2reg")


def make_problem(name: str, *, sigma: float = 0.0, seed: int = 0, **kw) -> BilevelProblem:
    """Build a named problem with desk-scale defaults; ``kw`` overrides the factory arguments."""
    if name == "linear":
        return make_linear_coupling(kw.get("dim_x", 5), kw.get("dim_y", 5), kw.get("mu", 1.0), sigma, seed)
    if name == "tanh":
        return make_tanh_coupling(kw.get("dim_x", 5), kw.get("dim_y", 5), kw.get("mu", 1.0), sigma, seed)
    if name == "hard":
        params = HardInstanceParams(
            T_chain=kw.get("T_chain", 10),
            epsilon_target=kw.get("epsilon_target", 0.01),
            L1=kw.get("L1", 1.0),
            sigma=sigma,
            mu=kw.get("mu", 1.0),
            seed=seed,
            gamma_override=kw.get("gamma"),
        )
        return make_hard_instance(params)
    if name == "learn2reg":
        return make_learn2reg(kw.get("n_samples", 200), kw.get("n_features", 10), kw.get("n_val", 100), sigma, seed,
                              kw.get("val_weight", 1.0))
    raise ValueError(f"unknown problem {name!r}; choose from {', '.join(PROBLEM_NAMES)}")


__all__ = [
    "BilevelProblem", "InnerSolveStalled", "NoSecondOrderAccess", "minimize_lower",
    "GammaOutOfRange", "HardInstance", "HardInstanceParams", "f_nc", "grad_f_nc", "make_hard_instance",
    "masked_chain_grad", "phi_cap", "phi_cap_prime", "prog", "psi", "psi_prime", "rho", "rho_jacobian",
    "Learn2Reg", "ScaleTooLarge", "make_learn2reg",
    "LinearCoupling", "TanhCoupling", "make_linear_coupling", "make_tanh_coupling",
    "PROBLEM_NAMES", "make_problem",
]
