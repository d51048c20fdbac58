import json

import numpy as np
import pytest

from melt.melt import GateParams, gated_update
from melt.tensor import Tensor
from melt.verify import (
    MiswiredMeltLM,
    SaturationError,
    equivalence_suite,
    full_loop_jacobian,
    gate_jacobian,
    jacobian_suite,
    spectral_radius,
    superhighway_check,
    superhighway_suite,
)
from melt.verify.lab import fd_jacobian, gate_map, probe_gate, saturating_bias


def test_jacobian_terms_and_fd():
    rng = np.random.default_rng(0)
    gp = probe_gate(8, 0.3, 1, scale=0.5)
    x, h = rng.standard_normal(8), rng.standard_normal(8)
    rep = gate_jacobian(x, h, gp)
    np.testing.assert_allclose(rep.J, rep.term1 + rep.term2 + rep.term3, atol=1e-12)
    assert not rep.term3.any()
    fd = fd_jacobian(gate_map(x, gp), h)
    assert np.linalg.norm(rep.J - fd) / np.linalg.norm(fd) < 1e-5


def test_jacobian_against_autodiff():
    # rows of J are the gradients of each output unit
    rng = np.random.default_rng(1)
    gp = probe_gate(5, -0.2, 2, scale=0.5)
    x, h = rng.standard_normal(5), rng.standard_normal(5)
    rep = gate_jacobian(x, h, gp)
    from melt import tensor as tn
    for i in range(5):
        hp = Tensor(h.copy(), requires_grad=True)
        with tn.Tape() as tape:
            out, _ = gated_update(x, hp, gp)
            loss = tn.index(out, i)
        tn.backward(loss, tape)
        np.testing.assert_allclose(hp.grad, rep.J[i], atol=1e-14)


def test_saturation_limits():
    x, h = np.ones(6), -np.ones(6)
    assert gate_jacobian(x, h, probe_gate(6, 40.0)).deviation <= 1e-10
    assert np.linalg.norm(gate_jacobian(x, h, probe_gate(6, -40.0)).J) <= 1e-10


def test_dx_dh_enters_term3():
    gp = probe_gate(3, 0.0)
    rep = gate_jacobian(np.ones(3), np.zeros(3), gp, dx_dh=np.eye(3))
    z = 1 / (1 + np.exp(-(np.ones(3) @ gp.w_z.data + gp.b_z.data)))
    np.testing.assert_allclose(np.diag(rep.term3), 1 - z)


def test_spectral_radius():
    assert spectral_radius(np.eye(4)) == pytest.approx(1.0, abs=1e-12)
    assert spectral_radius(np.diag([0.5, 0.3])) == pytest.approx(0.5, rel=1e-9)
    assert spectral_radius(np.zeros((3, 3))) == 0.0
    rot = np.array([[0.0, -0.8], [0.8, 0.0]])  # complex pair, power iteration cannot settle on a vector
    assert spectral_radius(rot) == pytest.approx(0.8, rel=1e-9)
    with pytest.raises(ValueError):
        spectral_radius(np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_spectral_radius_nonsymmetric_vs_eig(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 24))
    a = rng.standard_normal((n, n)) * 10.0 ** rng.uniform(-3, 3)
    ref = np.abs(np.linalg.eigvals(a)).max()
    assert abs(spectral_radius(a) - ref) / ref < 1e-10


def test_spectral_radius_equal_modulus_cluster():
    # five eigenvalues of modulus 0.9: only the Gelfand fallback can resolve this
    perm = np.roll(np.eye(5), 1, axis=0) * 0.9
    assert spectral_radius(perm) == pytest.approx(0.9, rel=1e-12)
    near_id = np.eye(6) + 1e-9 * np.random.default_rng(0).standard_normal((6, 6))
    ref = np.abs(np.linalg.eigvals(near_id)).max()
    # fallback bias is about the cluster width divided by 2**POWER_SQUARINGS
    assert spectral_radius(near_id) == pytest.approx(ref, rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_spectral_radius_symmetric_vs_eig(seed):
    a = np.random.default_rng(seed).standard_normal((8, 8))
    a = a + a.T
    ref = np.abs(np.linalg.eigvalsh(a)).max()
    assert abs(spectral_radius(a) - ref) / ref < 1e-6


@pytest.mark.parametrize("T", [1, 8, 64])
def test_clamped_superhighway_is_exact(T):
    assert superhighway_check(probe_gate(8, 0.0), T, 0.0, clamp=True) == 1.0


def test_superhighway_bound_and_precondition():
    eps = 1e-3
    r = superhighway_check(probe_gate(16, saturating_bias(eps)), 8, eps)
    assert (1 - eps) ** 8 - 1e-6 <= r <= 1 + 1e-6
    with pytest.raises(SaturationError, match=r"loop 1, dim \d+"):
        superhighway_check(probe_gate(16, 0.0), 4, eps)


def test_unsaturated_control_decays():
    sat = superhighway_check(probe_gate(16, saturating_bias(1e-3)), 16, 1e-3)
    ctl = superhighway_check(probe_gate(16, 0.0), 16, 1.0 - 1e-9)
    assert ctl < 0.9 and ctl < sat


def test_full_network_jacobian_runs(melt_model):
    J, rep = full_loop_jacobian(melt_model, [1, 2, 3], 0, 2)
    assert J.shape == (64, 64) and rep.J.shape == (64, 64)
    # attention feeds the latent back into x, so the full Jacobian differs
    assert np.linalg.norm(J - rep.J) > 1e-6
    with pytest.raises(ValueError):
        full_loop_jacobian(melt_model, [1, 2], 0, 1)


def test_suites_pass():
    for res in jacobian_suite(trials=30) + superhighway_suite():
        assert res.ok, res


def test_equivalence_suite_and_fault_injection():
    good = {r.name: r for r in equivalence_suite(memory_lengths=(8,), memory_loops=(1, 2))}
    assert all(r.ok for r in good.values()), good
    bad = {r.name: r for r in equivalence_suite(inject_fault=True, memory_lengths=(8,), memory_loops=(1, 2))}
    assert bad["alpha0_equals_looplm"].ok
    assert not bad["melt_matches_reference"].ok
    row = json.loads(bad["melt_matches_reference"].to_json())
    assert set(row) >= {"name", "status", "metric", "tolerance"}


def test_miswired_model_differs(melt_model, tokens):
    bad = MiswiredMeltLM(melt_model.config, melt_model.params)
    a = melt_model.chunk_forward(tokens, 2).logits[-1].data
    b = bad.chunk_forward(tokens, 2).logits[-1].data
    assert not np.allclose(a, b)


def test_gate_params_accept_arrays():
    gp = GateParams(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(2))
    rep = gate_jacobian(np.ones(2), np.zeros(2), gp)
    np.testing.assert_allclose(rep.term1, 0.5 * np.eye(2))
