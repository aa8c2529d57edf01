import numpy as np
import pytest

from attendout import ptree
from attendout.attention import AttentionParams
from attendout.numkernel import RngState


def rand_attention(seed: int, d: int = 8, heads: int = 2, scale: float = 0.5) -> AttentionParams:
    r = RngState(seed).derive("fixture-attn")
    return AttentionParams(
        r.normal_array((d, d)) * scale, r.normal_array((d, d)) * scale,
        r.normal_array((d, d)) * scale, r.normal_array((d, d)) * scale,
        num_heads=heads,
    )


def max_rel_err(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=float).ravel()
    reference = np.asarray(reference, dtype=float).ravel()
    return float((np.abs(analytic - reference) / np.maximum(np.abs(reference), floor)).max())


def tree_finite_diff(params, objective, h: float = 1e-5):
    """Central differences of a scalar objective over every tree leaf."""
    from attendout.numkernel import finite_diff_grad

    probe = ptree.copy_tree(params)

    def flat_objective(vec):
        ptree.set_flat(probe, vec)
        return objective(probe)

    return finite_diff_grad(flat_objective, ptree.flatten(params), h)


@pytest.fixture
def rng():
    return RngState(12345)
