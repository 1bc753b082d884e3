// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "pfa/loss.hpp"
#include "pfa/pipeline.hpp"
#include "pfa/scan.hpp"
#include "pfa/staging.hpp"
#include "pfa/wsi.hpp"
#include "otsu_oracle.hpp"
#include "test_util.hpp"

using namespace pfa;
using clock_type = std::chrono::steady_clock;

namespace {

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void criterion(int n, const char* title, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = clock_type::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  std::printf("criterion %d: %s - %s;%s (%.1f s)\n", n, o.pass ? "PASS" : "FAIL", title, o.detail.str().c_str(),
              seconds_since(t0));
  std::fflush(stdout);
  failures += !o.pass;
}

const std::size_t kTiles[] = {2, 4, 8};
const std::size_t kAlphas[] = {1, 2, 4};

void certification(Outcome& o) {
  const auto spec = desk_network_spec();
  double worst_mixed = 0, worst_double = 0;
  const auto t0 = clock_type::now();
  for (std::size_t alpha : kAlphas)
    for (std::size_t tile : kTiles) {
      const auto g = solve_geometry(spec.patch_size, tile, spec.native_stride, alpha);
      for (Precision p : {Precision::mixed, Precision::double_only}) {
        CertifyOptions opt;
        opt.trials = 10;
        opt.seed = 100 * alpha + tile;
        opt.precision = p;
        const auto r = certify_equivalence(spec, g, opt);
        std::ostringstream what;
        what << "alpha " << alpha << " tile " << tile << (p == Precision::mixed ? " mixed" : " double") << " dev "
             << r.max_deviation << r.error;
        o.require(r.passed && r.trials_run == 10, what.str());
        (p == Precision::mixed ? worst_mixed : worst_double) =
            std::max(p == Precision::mixed ? worst_mixed : worst_double, r.max_deviation);
      }
    }
  const double t = seconds_since(t0);
  o.require(worst_mixed <= 1e-4, "32-bit deviation above 1e-4");
  o.require(worst_double <= 1e-9, "64-bit deviation above 1e-9");
  o.require(t <= 300, "runtime above 5 min");
  o.detail << " 9 geometries x 10 trials, max |dense - patch| " << worst_mixed << " (32-bit), " << worst_double
           << " (64-bit), " << t << " s";
}

void geometry_sweep(Outcome& o) {
  std::mt19937_64 rng(77);
  std::size_t bad = 0, cells_checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t alpha = std::size_t{1} << (rng() % 5);
    const std::size_t sp = alpha * (1 + rng() % 64);
    const std::size_t lp = 1 + rng() % 700;
    const std::size_t lm = 1 + rng() % 64;
    const auto g = solve_geometry(lp, lm, sp, alpha);
    const std::size_t h = lp + rng() % (3 * g.roi_stride + 1), w = lp + rng() % (3 * g.roi_stride + 1);
    const auto plan = plan_scan(h, w, g, nullptr, 0.0);
    std::vector<int> hits(plan.lat_y.cells * plan.lat_x.cells, 0);
    for (const auto& r : plan.rois)
      for (std::size_t u = 0; u < r.rows; ++u)
        for (std::size_t v = 0; v < r.cols; ++v) {
          ++hits[(r.cell_row + u) * plan.lat_x.cells + r.cell_col + v];
          const double cy = static_cast<double>(r.y) + static_cast<double>(u * g.pitch) + lp / 2.0;
          const double cx = static_cast<double>(r.x) + static_cast<double>(v * g.pitch) + lp / 2.0;
          if (cy != plan.cell_center_y(r.cell_row + u) || cx != plan.cell_center_x(r.cell_col + v)) ++bad;
        }
    for (int c : hits) bad += c != 1;
    cells_checked += hits.size();
    // Every patch position that fits is on the lattice.
    bad += plan.lat_y.cells != (h - lp) / g.pitch + 1;
    bad += plan.lat_x.cells != (w - lp) / g.pitch + 1;
  }
  o.require(bad == 0, std::to_string(bad) + " tiling violations");
  const auto full = solve_geometry(692, 64, 512, 16);
  o.require(full.roi == 2708 && full.roi_stride == 2048, "full-size tuple");
  o.detail << " 1000 tuples, " << cells_checked << " cells each covered once; full-size tuple L_R " << full.roi
           << ", S_R " << full.roi_stride;
}

void loss_suite(Outcome& o) {
  std::size_t bce_mismatch = 0, bound_violations = 0;
  double worst_cont = 0;
  for (int i = 1; i < 10000; ++i) {
    const double p = i / 10000.0;
    bce_mismatch += truncated_bce(p, 0.0) != -std::log(p);
    for (double g : {0.01, 0.04, 0.2, 0.5}) {
      bound_violations += truncated_bce(p, g) > -std::log(p) + 1e-15;
      bound_violations += std::abs(truncated_bce_grad(p, g)) > 1.0 / g + 1e-12;
    }
  }
  for (double g : {0.01, 0.04, 0.1, 0.3, 0.5}) {
    const double below = std::nextafter(g, 0.0);
    worst_cont = std::max(worst_cont, std::abs(truncated_bce(below, g) - truncated_bce(g, g)));
    worst_cont = std::max(worst_cont, std::abs(truncated_bce_grad(below, g) - truncated_bce_grad(g, g)) * g);
  }
  o.require(bce_mismatch == 0, "gamma 0 differs from BCE");
  o.require(bound_violations == 0, "domination or gradient bound");
  o.require(worst_cont <= 1e-6, "continuity at gamma");

  // Finite differences of the joint loss through the toy network.
  const auto spec = testutil::tiny_spec();
  auto params = testutil::random_params<double>(spec, 21);
  std::mt19937_64 rng(21);
  auto image = testutil::random_tensor({1, 2, 24, 24}, rng, 0.0, 1.0);
  Mask mask({22, 22}, 0);
  for (std::size_t y = 0; y < 22; ++y)
    for (std::size_t x = 0; x < 22; ++x) mask[y * 22 + x] = (y - 9.0) * (y - 9.0) + (x - 12.0) * (x - 12.0) <= 25;
  const LossConfig cfg{0.04, 0.5};
  auto grads = params.zeros_like();
  synergy_loss<double>(spec, params, image, 1, mask, cfg, &grads);
  auto loss = [&] { return synergy_loss<double>(spec, params, image, 1, mask, cfg, nullptr).total; };
  double worst = 0;
  std::size_t checked = 0;
  for (auto& [name, t] : params.tensors) {
    const std::size_t step = std::max<std::size_t>(1, t.size() / 6);
    for (std::size_t i = 0; i < t.size(); i += step, ++checked)
      worst = std::max(worst, testutil::rel_err(testutil::central_diff(t, i, 1e-6, loss), grads.at(name)[i]));
  }
  o.require(worst <= 1e-3, "finite-difference gradient");
  o.detail << " 10^4-point grid, continuity gap " << worst_cont << ", FD max rel err " << worst << " over " << checked
           << " weights";
}

void speed(Outcome& o) {
  const auto spec = desk_network_spec();
  const auto params = init_params<float>(spec, 3, false);
  const std::size_t alpha = 4, rois = 3;
  double prev_ratio = 0, prev_speedup = 0;
  for (std::size_t tile : kTiles) {
    const auto g = solve_geometry(spec.patch_size, tile, spec.native_stride, alpha);
    std::mt19937_64 rng(tile);
    CostCounter dense_cost, patch_cost;
    double dense_s = 1e300, patch_s = 1e300;
    ForwardOptions opt;
    opt.mode = Mode::dense;
    opt.alpha = alpha;
    for (std::size_t r = 0; r < rois; ++r) {
      auto roi = testutil::random_tensor<float>({1, spec.input_channels, g.roi, g.roi}, rng, 0.0, 1.0);
      CostCounter dc, pc;
      auto t0 = clock_type::now();
      detector_forward(roi, spec, params, opt, &dc);
      dense_s = std::min(dense_s, seconds_since(t0));
      t0 = clock_type::now();
      patch_oracle(roi, spec, params, g, &pc);
      patch_s = std::min(patch_s, seconds_since(t0));
      dense_cost = dc;
      patch_cost = pc;
    }
    const double ratio = static_cast<double>(patch_cost.macs) / static_cast<double>(dense_cost.macs);
    const double speedup = patch_s / dense_s;
    o.detail << " L_m=" << tile << ": MAC ratio " << ratio << ", speedup " << speedup << "x;";
    o.require(ratio > prev_ratio, "MAC ratio not increasing at L_m=" + std::to_string(tile));
    o.require(speedup > prev_speedup, "speedup not increasing at L_m=" + std::to_string(tile));
    if (tile == 8) {
      o.require(ratio >= 5, "MAC ratio below 5 at L_m=8");
      o.require(speedup >= 3, "speedup below 3 at L_m=8");
    }
    prev_ratio = ratio;
    prev_speedup = speedup;
  }
}

Polygon square(double x0, double y0, double side) {
  return {{x0, y0}, {x0 + side, y0}, {x0 + side, y0 + side}, {x0, y0 + side}};
}

void metrics(Outcome& o) {
  SlideDetections s;
  s.lesions = {square(0, 0, 10), square(50, 50, 10)};
  s.detections = {{5, 5, 0.9}, {30, 30, 0.8}, {55, 55, 0.4}};
  const double f = froc({s}).average;
  const double a = auc({0.9, 0.8, 0.7, 0.1}, {1, 0, 1, 0});
  const double k = quadratic_kappa({0, 0, 1, 1, 0, 1}, {0, 0, 0, 1, 1, 1}, 2);
  o.require(std::abs(f - 0.8333) <= 1e-4 && std::abs(f - 5.0 / 6.0) <= 1e-9, "FROC hand case");
  o.require(a == 0.75, "AUC hand case");
  o.require(std::abs(k - 1.0 / 3.0) <= 1e-12, "kappa hand case");

  SlideDetections perfect;
  perfect.lesions = s.lesions;
  perfect.detections = {{5, 5, 0.9}, {55, 55, 0.8}};
  const double fp = froc({perfect}).average;
  const double ap = auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
  const double kp = quadratic_kappa({0, 1, 2, 3, 4}, {0, 1, 2, 3, 4});
  o.require(fp == 1.0 && ap == 1.0 && kp == 1.0, "perfect agreement");
  o.detail << " FROC " << f << ", AUC " << a << ", kappa " << k << "; perfect " << fp << "/" << ap << "/" << kp;
}

void study(Outcome& o) {
  const StudyConfig cfg;
  auto t0 = clock_type::now();
  const StudyReport a = run_synthetic_study(cfg);
  const double first = seconds_since(t0);
  t0 = clock_type::now();
  const StudyReport b = run_synthetic_study(cfg);
  const double second = seconds_since(t0);
  o.require(a.kappa >= 0.8, "kappa below 0.8");
  o.require(a.froc >= 0.8, "FROC below 0.8");
  o.require(first <= 1200 && second <= 1200, "run above 20 min");
  o.require(a.digest == b.digest && a.predicted == b.predicted && a.loss_curve == b.loss_curve,
            "runs differ under the same seed");
  o.detail << " " << cfg.train_patients + cfg.eval_patients << " patients / "
           << 5 * (cfg.train_patients + cfg.eval_patients) << " slides, kappa " << a.kappa << ", FROC " << a.froc
           << ", AUC " << a.auc << ", " << first << " s per run, digest " << a.digest.substr(0, 16)
           << (a.digest == b.digest ? " (identical on re-run)" : " (differs on re-run)");
}

void mutation(Outcome& o) {
  const auto spec = desk_network_spec();
  std::size_t caught = 0, total = 0;
  double smallest = 1e300;
  for (std::size_t alpha : kAlphas)
    for (std::size_t tile : kTiles) {
      CertifyOptions opt;
      opt.trials = 2;
      opt.seed = 7;
      opt.fault_offset = 1;
      const auto r = certify_equivalence(spec, solve_geometry(spec.patch_size, tile, spec.native_stride, alpha), opt);
      ++total;
      caught += !r.passed;
      smallest = std::min(smallest, r.max_deviation);
    }
  o.require(caught == total, "fault went unnoticed");
  o.detail << " one-cell pooling offset flagged in " << caught << "/" << total
           << " geometries, smallest max deviation " << smallest;
}

void otsu(Outcome& o) {
  std::mt19937_64 rng(4242);
  int agree = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Histogram h{};
    const int mode = trial % 3;
    for (int v = 0; v < 256; ++v) {
      if (mode == 0) h[v] = rng() % 100000;
      else if (mode == 1) h[v] = (rng() % 4 == 0) ? rng() % 1000 : 0;
      else h[v] = static_cast<std::uint64_t>(9000 * std::exp(-std::pow((v - 40.0) / 15, 2)) +
                                             3000 * std::exp(-std::pow((v - 190.0) / 25, 2))) + rng() % 7;
    }
    h[rng() % 256] += 1;
    h[rng() % 256] += 1;
    agree += otsu_threshold(h).threshold == testutil::otsu_oracle(h);
  }
  o.require(agree == 100, "threshold mismatch");
  o.detail << " " << agree << "/100 random histograms match the exhaustive oracle";
}

}  // namespace

int main() {
  criterion(1, "dense scan equals sliding-window patch classification", certification);
  criterion(2, "ROI lattice tiles every cell exactly once", geometry_sweep);
  criterion(3, "truncated loss properties and gradients", loss_suite);
  criterion(4, "dense scan cost and speed versus patch scan", speed);
  criterion(5, "FROC, AUC and kappa hand cases", metrics);
  criterion(6, "end-to-end synthetic staging study", study);
  criterion(7, "certifier detects an injected pooling fault", mutation);
  criterion(8, "Otsu threshold equals exhaustive oracle", otsu);
  std::printf("%d of 8 criteria passed\n", 8 - failures);
  return failures == 0 ? 0 : 1;
}
