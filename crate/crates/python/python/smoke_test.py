"""Smoke test for the poisson_sgs extension module."""

import json
import math
import pathlib
import sys
import tempfile

import poisson_sgs as ps

ROOT = pathlib.Path(__file__).resolve().parents[3]


def main() -> int:
    size = 32
    truth = ps.phantom(size)
    assert len(truth) == size * size and max(truth) == 1.0

    op = ps.Operator.identity(size * size)
    y = ps.simulate_counts(truth, op, 40.0, seed=3)
    assert y == ps.simulate_counts(truth, op, 40.0, seed=3)

    model = ps.PoissonModel(y, 40.0, op)
    prior = ps.Prior.tv(size, size, beta=3.0, epsilon=0.01)
    cfg = ps.SamplerConfig(rho=0.01, gamma_step=1e-4, n_mc=400, n_bi=100, seed=5, thin=10)
    res = ps.run_chain(model, prior, cfg, init="backprojection")
    assert res.count == 300 and len(res.thinned) == 30
    assert all(v > 0 for v in res.mean)
    assert res.guard_rate < 1e-4
    noisy = [v / 40.0 for v in y]
    print(f"chain: psnr {ps.psnr(truth, res.mean):.2f} dB (observation {ps.psnr(truth, noisy):.2f} dB), "
          f"ssim {ps.ssim(truth, res.mean, size, size):.3f}")

    blur = ps.Operator.blur(size, size)
    assert blur.shape == (size * size, size * size)
    assert abs(sum(blur.apply([1.0] * size * size)) - size * size) < 1e-9

    m, big_m, rho_max = ps.check_convergence_constants(0.5, 1.0, 1.0, 0.5, 0.0)
    assert math.isclose(m, 1.0625) and math.isclose(big_m, 2.0) and rho_max == 1.0

    try:
        ps.SamplerConfig(rho=0.1, gamma_step=1e-3, n_mc=10, n_bi=10)
    except ValueError:
        pass
    else:
        raise AssertionError("n_bi >= n_mc accepted")

    checks = ps.oracle(seed=0)
    assert all(ok for _, ok, _ in checks), checks

    with tempfile.TemporaryDirectory() as tmp:
        text = ps.run_experiment(str(ROOT / "presets" / "tv_denoise_quick.toml"), out_dir=tmp,
                                 overrides=[("sampler.n_mc", "300")])
        summary = json.loads(text)
        assert summary["schema_version"] == 1
        assert (pathlib.Path(tmp) / "posterior_mean.pgm").exists()
        print(f"experiment: psnr {summary['metrics']['psnr_db']:.2f} dB, {len(summary['artifacts'])} artifacts")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
