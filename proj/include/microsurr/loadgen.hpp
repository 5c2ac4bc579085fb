#ifndef MICROSURR_LOADGEN_HPP
#define MICROSURR_LOADGEN_HPP

// Macroscopic strain paths: proportional loading along a fixed Voigt
// direction with monotonic, Gaussian-process or scripted unloading magnitudes.

#include "core.hpp"

#include <Eigen/Cholesky>

#include <vector>

namespace microsurr {

struct StrainPath {
  Voigt3 direction = Voigt3::UnitX();
  std::vector<double> magnitudes;
  std::vector<Voigt3> steps;

  std::size_t T() const { return steps.size(); }
};

inline StrainPath make_path(const Voigt3& direction, std::vector<double> magnitudes) {
  StrainPath p;
  p.direction = direction;
  p.magnitudes = std::move(magnitudes);
  p.steps.reserve(p.magnitudes.size());
  for (double m : p.magnitudes) p.steps.push_back(m * direction);
  return p;
}

/// Uniform direction on the unit sphere of Voigt strain space.
inline Voigt3 sample_direction(Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  for (;;) {
    Voigt3 d(n01(rng), n01(rng), n01(rng));
    const double n = d.norm();
    if (n > 1e-12) return d / n;
  }
}

inline StrainPath monotonic_path(int T, double delta, Rng& rng) {
  require(T >= 1, ErrorKind::InvalidArgument, "T must be at least 1");
  require(delta > 0.0, ErrorKind::InvalidArgument, "delta must be positive");
  const Voigt3 d = sample_direction(rng);
  std::vector<double> m(T);
  for (int t = 0; t < T; ++t) m[t] = (t + 1) * delta;
  return make_path(d, std::move(m));
}

struct GPConfig {
  double variance = 2e-3;
  double length_scale = 8.0;
  int T = 25;
  double jitter = 1e-12;
  double max_jitter = 1e-8;

  void validate() const {
    require(variance > 0.0, ErrorKind::InvalidArgument, "GP variance must be positive");
    require(length_scale > 0.0, ErrorKind::InvalidArgument, "GP length scale must be positive");
    require(T >= 1, ErrorKind::InvalidArgument, "GP path needs T >= 1");
  }
};

inline double gp_kernel(double t, double s, const GPConfig& cfg) {
  const double d = t - s;
  return cfg.variance * std::exp(-d * d / (2.0 * cfg.length_scale * cfg.length_scale));
}

/// Covariance of the magnitudes at t = 1..T-1 given a zero value at t = 0.
inline Eigen::MatrixXd gp_posterior_covariance(const GPConfig& cfg) {
  const int n = cfg.T - 1;
  Eigen::MatrixXd S(n, n);
  const double k00 = gp_kernel(0, 0, cfg);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      S(i, j) = gp_kernel(i + 1, j + 1, cfg) - gp_kernel(i + 1, 0, cfg) * gp_kernel(0, j + 1, cfg) / k00;
    }
  }
  return S;
}

/// Lower Cholesky factor of `S` with diagonal jitter escalated tenfold
/// from cfg.jitter up to cfg.max_jitter.
inline Eigen::MatrixXd jittered_cholesky(const Eigen::MatrixXd& S, const GPConfig& cfg) {
  for (double jit = cfg.jitter; jit <= cfg.max_jitter * (1.0 + 1e-9); jit *= 10.0) {
    Eigen::MatrixXd A = S;
    A.diagonal().array() += jit;
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() == Eigen::Success) return llt.matrixL();
  }
  throw Error(ErrorKind::CholeskyFailed, "GP covariance not positive definite up to jitter " +
                                             std::to_string(cfg.max_jitter));
}

/// Signed magnitude drawn from the conditioned GP; direction fixed per path.
inline StrainPath gp_path(const GPConfig& cfg, Rng& rng) {
  cfg.validate();
  const Voigt3 d = sample_direction(rng);
  std::vector<double> m(cfg.T, 0.0);
  if (cfg.T > 1) {
    const Eigen::MatrixXd Lc = jittered_cholesky(gp_posterior_covariance(cfg), cfg);
    std::normal_distribution<double> n01(0.0, 1.0);
    Eigen::VectorXd z(cfg.T - 1);
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = n01(rng);
    const Eigen::VectorXd f = Lc * z;
    for (int t = 1; t < cfg.T; ++t) m[t] = f(t - 1);
  }
  return make_path(d, std::move(m));
}

/// 30 steps: load for steps 1-14, unload for 15-19, reload for 20-30.
inline StrainPath unloading_path(Rng& rng, double delta = 0.004) {
  require(delta > 0.0, ErrorKind::InvalidArgument, "delta must be positive");
  const Voigt3 d = sample_direction(rng);
  std::vector<double> m(30);
  double acc = 0.0;
  for (int step = 1; step <= 30; ++step) {
    acc += (step >= 15 && step <= 19) ? -delta : delta;
    m[step - 1] = acc;
  }
  return make_path(d, std::move(m));
}

enum class PathKind { Monotonic, GP, Unload };

inline std::string_view to_string(PathKind k) {
  switch (k) {
    case PathKind::Monotonic: return "monotonic";
    case PathKind::GP: return "gp";
    case PathKind::Unload: return "unload";
  }
  return "?";
}

inline PathKind parse_path_kind(std::string_view s) {
  if (s == "monotonic") return PathKind::Monotonic;
  if (s == "gp") return PathKind::GP;
  if (s == "unload") return PathKind::Unload;
  throw Error(ErrorKind::InvalidArgument, "unknown path type '" + std::string(s) + "'");
}

}  // namespace microsurr

#endif  // MICROSURR_LOADGEN_HPP
