import math

import numpy as np
import pytest
from scipy import integrate

from ksmeanfield import field as fld
from ksmeanfield import potential as pot

SB, TG = pot.SMOOTH_BUMP, pot.TRUNCATED_GAUSSIAN


def k0_integral(x):
    # K0(x) = int_0^inf exp(-x cosh t) dt, cut where the integrand underflows
    upper = math.acosh(max(800.0 / x, 1.0))
    val, _ = integrate.quad(lambda t: math.exp(-x * math.cosh(t)), 0, upper,
                            epsabs=0, epsrel=1e-13, limit=500)
    return val


@pytest.mark.parametrize("x", [1e-6, 1e-3, 0.1, 0.7, 1.0, 2.0, 3.5, 10.0, 25.0, 60.0])
def test_bessel_k0_matches_integral(x):
    assert pot.bessel_k0(x) == pytest.approx(k0_integral(x), rel=1e-9)


def test_bessel_k0_reference_values():
    assert pot.bessel_k0(1.0) == pytest.approx(0.42102443824070834, rel=1e-12)
    x = 1e-3
    lead = -math.log(x / 2) - np.euler_gamma
    # the leading term alone is off by (x^2/4)(1 - gamma - ln(x/2)) ~ 2e-6 here
    assert abs(pot.bessel_k0(x) - lead) < 2.1e-6
    assert abs(pot.bessel_k0(x) - (lead + 0.25 * x * x * (lead + 1))) < 1e-11
    asym = math.sqrt(math.pi / 20) * math.exp(-10) * (1 - 1 / 80)
    assert pot.bessel_k0(10.0) == pytest.approx(asym, rel=1e-2)


@pytest.mark.parametrize("x", [0.0, -1.0, [1.0, 0.0]])
def test_bessel_k0_domain(x):
    with pytest.raises(ValueError):
        pot.bessel_k0(x)


def test_yukawa():
    assert pot.yukawa_eval(1.0, 1.0) == pytest.approx(0.42102443824070834 / (2 * math.pi), rel=1e-12)
    r = np.linspace(0.1, 5, 20)
    assert np.array_equal(pot.yukawa_eval(2.0, r), 2 * pot.yukawa_eval(1.0, r))
    assert pot.yukawa_eval(1.0, 30.0) < 1e-13
    with pytest.raises(ValueError):
        pot.yukawa_eval(1.0, 0.0)


@pytest.mark.parametrize("kind", [SB, TG])
@pytest.mark.parametrize("eps", [0.01, 0.1, 0.5, 1.0])
def test_mollifier_normalized(kind, eps):
    spec = pot.MollifierSpec(kind, eps)
    val, _ = integrate.quad(lambda r: 2 * math.pi * r * pot.mollifier_eval(spec, [r, 0.0]),
                            0, eps, epsabs=0, epsrel=1e-12, limit=200)
    assert abs(val - 1) < 1e-8


def test_mollifier_support_and_scaling():
    spec = pot.MollifierSpec(SB, 0.5)
    assert pot.mollifier_eval(spec, [0.75, 0.0]) == 0.0
    assert pot.mollifier_eval(spec, [0.0, 0.5]) == 0.0
    one = pot.MollifierSpec(SB, 1.0)
    assert pot.mollifier_eval(spec, [0.0, 0.0]) == pytest.approx(4 * pot.mollifier_eval(one, [0.0, 0.0]),
                                                                 rel=1e-14)
    x = np.random.default_rng(0).normal(size=(100, 2))
    assert np.all(pot.mollifier_eval(spec, x) >= 0)


def test_mollifier_spec_validation():
    with pytest.raises(ValueError):
        pot.MollifierSpec(SB, 0.0)
    with pytest.raises(ValueError):
        pot.MollifierSpec("box", 0.1)


def test_mollifier_symbol_at_zero_and_decay():
    spec = pot.MollifierSpec(SB, 0.2)
    assert pot.mollifier_symbol(spec, 0.0) == 1.0
    assert abs(pot.mollifier_symbol(spec, 200.0)) < 1e-3


def phi_eps_oracle(eps, r, kind=SB):
    # planar quadrature in polar coordinates centered on the K0 singularity
    spec = pot.MollifierSpec(kind, eps)

    def f(rho, th):
        y = np.array([r + rho * math.cos(th), rho * math.sin(th)])
        return rho * pot.yukawa_eval(1.0, max(rho, 1e-300)) * pot.mollifier_eval(spec, y)

    val, _ = integrate.dblquad(f, 0, 2 * math.pi, 0, r + eps, epsabs=1e-14, epsrel=1e-10)
    return val


@pytest.mark.parametrize("eps, r", [(0.5, 0.0), (0.5, 0.2), (0.5, 0.6), (0.1, 0.0), (0.1, 0.099)])
def test_phi_eps_matches_planar_quadrature(eps, r):
    assert pot.phi_eps_exact(1.0, pot.MollifierSpec(SB, eps), [r])[0] == \
        pytest.approx(phi_eps_oracle(eps, r), rel=1e-6)


def test_phi_eps_truncated_gaussian_quadrature():
    spec = pot.MollifierSpec(TG, 0.3)
    assert pot.phi_eps_exact(1.0, spec, [0.1])[0] == pytest.approx(phi_eps_oracle(0.3, 0.1, TG), rel=1e-6)


def test_table_center_value_frozen():
    t = pot.build_potential_table(1.0, pot.MollifierSpec(SB, 0.5))
    # value produced by the planar quadrature oracle
    assert t.center_value == pytest.approx(0.27312820259007936, rel=1e-6)


def test_table_invariants(table03):
    v = table03.values
    assert np.all(np.isfinite(v)) and np.all(v > 0)
    assert np.all(np.diff(v) <= 0)
    assert np.all(np.diff(table03.radii) > 0) and table03.radii[0] == 0
    assert v[-1] < 1e-12 * v[0]
    assert table03.radii[-1] == table03.r_max


def test_table_mollification_error_bound():
    spec = pot.MollifierSpec(SB, 0.1)
    t = pot.build_potential_table(1.0, spec)
    r = np.linspace(1.9, 40, 2000)
    bound = 0.1 * np.max(pot.yukawa_gradient_norm(1.0, r))
    assert abs(pot.phi_eps_lookup(t, [2.0, 0.0]) - pot.yukawa_eval(1.0, 2.0)) <= bound


def test_table_linear_in_chi():
    spec = pot.MollifierSpec(SB, 0.2)
    a = pot.build_potential_table(1.3, spec)
    b = pot.build_potential_table(2.6, spec)
    assert np.allclose(b.values, 2 * a.values, rtol=1e-12, atol=0)
    c = pot.scaled_table(a, 2.6)
    assert np.allclose(c.values, b.values, rtol=1e-12, atol=0)


def test_center_value_grows_as_eps_shrinks():
    vals = [pot.build_potential_table(1.0, pot.MollifierSpec(SB, e)).center_value for e in (0.4, 0.2, 0.1)]
    assert vals[0] < vals[1] < vals[2] < np.inf


def test_table_is_read_only(table03):
    with pytest.raises(ValueError):
        table03.values[0] = 1.0


def test_table_rejects_small_sample_count():
    with pytest.raises(ValueError):
        pot.build_potential_table(1.0, pot.MollifierSpec(SB, 0.3), n_samples=100)


def test_quadrature_failure_is_reported():
    with pytest.raises(pot.QuadratureError):
        pot.phi_eps_exact(1.0, pot.MollifierSpec(SB, 0.3), [0.1], tol=1e-30)


def test_lookup_contract(table03):
    t = table03
    assert pot.phi_eps_lookup(t, [0.0, 0.0]) == t.values[0]
    k = 1000
    mid = 0.5 * (t.radii[k] + t.radii[k + 1])
    assert pot.phi_eps_lookup(t, [mid, 0.0]) == pytest.approx(0.5 * (t.values[k] + t.values[k + 1]),
                                                            rel=1e-13)
    assert pot.phi_eps_lookup(t, [t.radii[k], 0.0]) == t.values[k]
    assert pot.phi_eps_lookup(t, [t.r_max * 1.01, 0.0]) == 0.0
    x = np.random.default_rng(1).normal(size=(50, 2))
    assert np.array_equal(pot.phi_eps_lookup(t, x), pot.phi_eps_lookup(t, -x))
    assert np.all(pot.phi_eps_lookup(t, x) <= t.values[0])


def test_table_csv_dump(tmp_path, table03):
    p = tmp_path / "table.csv"
    table03.to_csv(p)
    data = np.loadtxt(p, delimiter=",", skiprows=1)
    assert np.array_equal(data[:, 0], table03.radii)
    assert np.array_equal(data[:, 1], table03.values)


def test_zero_table():
    z = pot.zero_table(pot.MollifierSpec(SB, 0.3))
    assert z.chi == 0 and not z.values.any()


# test fields for the mollification error bound
def smooth_fields(grid):
    x1, x2 = grid.mesh
    r2 = grid.r2
    out = {"gaussian": np.exp(-r2 / 2) / (2 * math.pi)}
    out["mixture"] = (0.6 * np.exp(-((x1 - 1) ** 2 + x2**2) / 0.5) +
                      0.4 * np.exp(-((x1 + 1.5) ** 2 + (x2 - 0.5) ** 2) / 0.3))
    s2 = r2 / 9.0
    bump = np.zeros_like(r2)
    inside = s2 < 1
    bump[inside] = np.exp(-1 / (1 - s2[inside]))
    out["bump"] = bump * (1 + 0.3 * np.sin(2 * x1))
    return out


def mollification_errors(grid, f, eps):
    fd = fld.DensityField(grid, f)
    sm = fld.convolve(fd, fld.mollifier_kernel(pot.MollifierSpec(SB, eps), grid))
    g1, g2 = fld.gradient(fd)
    gn = np.hypot(g1.values, g2.values)
    d = np.abs(sm.values - f)
    h2 = grid.h**2
    res = {}
    for q in (1, 2, np.inf):
        if q == np.inf:
            res[q] = (d.max(), eps * gn.max())
        else:
            res[q] = ((h2 * np.sum(d**q)) ** (1 / q), eps * (h2 * np.sum(gn**q)) ** (1 / q))
    return res


@pytest.mark.parametrize("eps", [0.2, 0.1, 0.05])
def test_mollification_error_bound(eps):
    grid = fld.Grid2D(8.0, 256)
    for name, f in smooth_fields(grid).items():
        for q, (err, bound) in mollification_errors(grid, f, eps).items():
            assert err <= bound, (name, q)
