import numpy as np
import pytest

from slimdiff.tensorcore import finite_diff_grad, max_rel_error

SEEDS = [0, 1, 2, 3, 4]

# Entries whose true gradient is ~0 carry pure round-off in the central
# difference (~1e-10 absolute at h=1e-6); the floor keeps those from
# dominating a relative-error statistic.
GRAD_FLOOR = 1e-6


def grad_error(analytic, f, x, h=1e-6):
    return max_rel_error(analytic, finite_diff_grad(f, x, h), floor=GRAD_FLOOR)


def param_grad_errors(module, loss_fn, h=1e-5, sample=None, seed=0):
    """Relative FD error of every parameter gradient of ``module``.

    ``loss_fn()`` must run forward, return the scalar loss and leave the
    analytic gradients accumulated in ``module.grads`` after a backward call
    it performs itself. With ``sample`` only that many random entries per
    parameter are probed (for larger networks).
    """
    module.zero_grad()
    loss_fn()
    # snapshot first: every FD probe below re-runs backward at a perturbed point
    analytic = {name: g.copy() for name, _, g in module.named_parameters()}
    pick = np.random.default_rng(seed)
    errs = {}
    for name, p, _ in module.named_parameters():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            idx = pick.choice(flat.size, sample, replace=False)
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            old = flat[i]
            vals = []
            for v in (old + h, old - h):
                flat[i] = v
                module.zero_grad()
                vals.append(loss_fn())
            flat[i] = old
            numeric[n] = (vals[0] - vals[1]) / (2 * h)
        errs[name] = max_rel_error(analytic[name].reshape(-1)[idx], numeric, floor=GRAD_FLOOR)
    module.zero_grad()
    return errs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**over):
    """A seconds-scale run config for pipeline tests."""
    from slimdiff.harness.config import RunConfig

    base = {
        "log_every": 2,
        "warmup": 2,
        "data": {"train": 8, "val": 4, "test": 4, "size": 32},
        "ue": {"iterations": 20},
        "teacher": {"iterations": 6, "batch": 4, "unet": {
            "levels": [{"width": 4}, {"width": 6, "attention": "self"}, {"width": 8, "attention": "self"}],
            "temb_dim": 8}},
        "student": {"iterations": 6, "prune_levels": 1, "batch": 4, "qgam_queries": 4, "max_samples": 64,
                    "hooks": ["enc0", "dec0"]},
    }
    for k, v in over.items():
        if isinstance(v, dict):
            base.setdefault(k, {}).update(v)
        else:
            base[k] = v
    return RunConfig().with_overrides(**base)
