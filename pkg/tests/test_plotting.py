import numpy as np

from homsim import correlate as C
from homsim import fit as F
from homsim import models as M
from homsim import plotting, scan

PNG = b"\x89PNG\r\n\x1a\n"


def test_histogram_plot_with_fit_and_overlay(tmp_path):
    cfg = C.HistogramConfig.centered(100_000, 1000)
    x = 0.5 * (cfg.edges[:-1] + cfg.edges[1:]) / 1000
    counts = np.random.default_rng(0).poisson(100 * M.evaluate("hbt_cw", x, b=0.9, tau_hbt=3.0))
    h = C.normalize(C.Histogram(cfg.edges, counts), "plateau", plateau=(50, 100))
    r = F.fit_recipe("hbt_cw", [h])
    p = plotting.plot_histogram(h, tmp_path / "h.png", r, "HBT", xlim=(-20, 20), overlay=[(h, "copy")])
    assert p.read_bytes()[:8] == PNG


def test_fit_data_and_scan_plots(tmp_path):
    x = np.linspace(-0.3, 0.3, 61)
    y = 10 + 100 * 0.025**2 / (x**2 + 0.025**2)
    d = F.FitData(x, y, np.ones_like(x))
    r = F.fit_recipe("lorentzian", [d])
    assert plotting.plot_fit_data(d, r, tmp_path / "f.png", "GHz").read_bytes()[:8] == PNG
    pts = [scan.ScanPoint("reprate", 24.0 + i, 40, 40, 0, 1, 26, 0.6, 0.01, 0.95, 0.01) for i in range(3)]
    pts.append(scan.ScanPoint("reprate", 30.0, 33, 40, 7, 1, 26, status="failed: x"))
    assert plotting.plot_scan(pts, tmp_path / "s.png").read_bytes()[:8] == PNG
    assert plotting.plot_scan([], tmp_path / "e.png").exists()
