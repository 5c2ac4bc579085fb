#ifndef MICROSURR_TESTS_SUPPORT_HPP
#define MICROSURR_TESTS_SUPPORT_HPP

// Toy problems and a finite-difference gradient check shared by the test
// binaries.

#include <microsurr/training.hpp>

#include <string>
#include <vector>

namespace microsurr::testing_support {

inline TrainingSample ground_truth(std::uint64_t seed, const StrainPath& path, int K = 3, double h = 0.3, int n_seg = 12) {
  Rng rng(seed);
  SampleRecord r;
  r.voids = sample_voids(1, 0.3, 1.0, rng);
  r.mesh = triangulate(r.voids, h, n_seg);
  r.path = path;
  const PathRun run = run_path(r.mesh, r.material, path);
  for (const auto& s : run.steps) {
    r.eps.push_back(s.eps_field);
    r.sig.push_back(s.sig_field);
    r.kappa.push_back(s.kappa_field);
    r.sig_hom.push_back(s.sig_hom);
  }
  return prepare_sample(r, K);
}

inline GNNConfig tiny(Variant v) {
  GNNConfig c = GNNConfig::for_variant(v);
  c.hidden = 8;
  c.n_mpl = 2;
  c.K = 3;
  c.dropout = 0.1;
  return c;
}

inline std::vector<TrainingSample> toy_set() {
  std::vector<TrainingSample> s;
  s.push_back(ground_truth(1, make_path(Voigt3(1, 0.2, -0.4).normalized(), {0.01, 0.02, 0.03})));
  s.push_back(ground_truth(2, make_path(Voigt3(-0.3, 1, 0.5).normalized(), {0.012, 0.006, 0.025})));
  return s;
}

struct GradCheck {
  double worst = 0.0;
  std::string where;
  int one_sided = 0;
};

/// Central differences per parameter; at kinks (central disagreeing with
/// both one-sided quotients) the matching one-sided quotient is used.
inline GradCheck check_gradient(GNNModel& m, const std::vector<const TrainingSample*>& batch, std::uint64_t seed) {
  std::vector<double> g(m.num_params(), 0.0);
  batch_loss(m, batch, Mode::Train, seed, &g);
  double gmax = 0.0;
  for (double v : g) gmax = std::max(gmax, std::abs(v));
  const double floor = 1e-6 * gmax;
  const double h = 1e-6;
  GradCheck out;
  auto& p = m.params.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double x = p[i];
    p[i] = x + h;
    const double lp = batch_loss(m, batch, Mode::Train, seed).L_comb;
    p[i] = x - h;
    const double lm = batch_loss(m, batch, Mode::Train, seed).L_comb;
    p[i] = x;
    const double fd = (lp - lm) / (2 * h);
    auto rel = [&](double d) { return std::abs(d - g[i]) / std::max({std::abs(d), std::abs(g[i]), floor}); };
    double e = rel(fd);
    if (e >= 1e-4) {
      const double l0 = batch_loss(m, batch, Mode::Train, seed).L_comb;
      const double e1 = std::min(rel((lp - l0) / h), rel((l0 - lm) / h));
      if (e1 < 1e-4) {
        ++out.one_sided;
        e = e1;
      }
    }
    if (e > out.worst) {
      out.worst = e;
      out.where = m.params.blocks()[0].name;
      for (const auto& b : m.params.blocks())
        if (i >= b.offset && i < b.offset + b.size()) out.where = b.name + "[" + std::to_string(i - b.offset) + "]";
    }
  }
  return out;
}

}  // namespace microsurr::testing_support

#endif  // MICROSURR_TESTS_SUPPORT_HPP
