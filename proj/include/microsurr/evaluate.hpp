#ifndef MICROSURR_EVALUATE_HPP
#define MICROSURR_EVALUATE_HPP

// Error metrics, stiffness extraction and the comparison studies.

#include "core.hpp"
#include "dataset.hpp"
#include "fesolver.hpp"
#include "surrogate.hpp"
#include "training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace microsurr {

// Metrics.

/// Per-step errors, averaged over samples.
struct Metrics {
  std::vector<double> eps_mean, eps_max;
  std::vector<double> sig_mean, sig_max;
  std::vector<double> hom;
  int n_samples = 0;

  std::size_t T() const { return eps_mean.size(); }
};

/// Predicted or reference fields of one sample.
struct Prediction {
  Trajectory eps, sig;
  std::vector<Voigt3> sig_hom;
};

struct ElementErrors {
  double mean = 0.0;
  double max = 0.0;
};

/// Mean and max over elements of the row-wise Euclidean error.
inline ElementErrors element_errors(const Field3& pred, const Field3& truth) {
  require(pred.rows() == truth.rows() && pred.rows() > 0, ErrorKind::ShapeMismatch, "fields differ in element count");
  const Eigen::VectorXd n = (pred - truth).rowwise().norm();
  return {n.mean(), n.maxCoeff()};
}

inline Metrics field_errors(const std::vector<Prediction>& pred, const std::vector<Prediction>& truth) {
  require(pred.size() == truth.size() && !pred.empty(), ErrorKind::ShapeMismatch, "sample counts differ");
  const std::size_t T = truth.front().eps.size();
  Metrics m;
  m.n_samples = static_cast<int>(pred.size());
  m.eps_mean.assign(T, 0.0);
  m.eps_max.assign(T, 0.0);
  m.sig_mean.assign(T, 0.0);
  m.sig_max.assign(T, 0.0);
  m.hom.assign(T, 0.0);
  for (std::size_t s = 0; s < pred.size(); ++s) {
    const Prediction &p = pred[s], &q = truth[s];
    require(p.eps.size() == T && q.eps.size() == T && p.sig.size() == T && q.sig.size() == T &&
                p.sig_hom.size() == T && q.sig_hom.size() == T,
            ErrorKind::ShapeMismatch, "trajectories differ in step count");
    for (std::size_t t = 0; t < T; ++t) {
      const ElementErrors e = element_errors(p.eps[t], q.eps[t]);
      const ElementErrors g = element_errors(p.sig[t], q.sig[t]);
      m.eps_mean[t] += e.mean;
      m.eps_max[t] += e.max;
      m.sig_mean[t] += g.mean;
      m.sig_max[t] += g.max;
      m.hom[t] += (p.sig_hom[t] - q.sig_hom[t]).norm();
    }
  }
  const double inv = 1.0 / static_cast<double>(pred.size());
  for (auto* v : {&m.eps_mean, &m.eps_max, &m.sig_mean, &m.sig_max, &m.hom}) {
    for (double& x : *v) x *= inv;
  }
  return m;
}

inline Prediction reference_of(const TrainingSample& s) { return {s.eps, s.sig, s.sig_hom}; }

inline Prediction predict(const GNNModel& m, const TrainingSample& s) {
  const RolloutResult r = rollout(m, s.graph, s.path, Mode::Infer);
  require(r.has_stress, ErrorKind::InvalidArgument, "model does not predict stresses");
  Prediction p;
  p.eps = r.eps;
  p.sig = r.sig;
  for (const auto& h : r.sig_hom) p.sig_hom.push_back(h.front());
  return p;
}

inline std::vector<Prediction> predict_all(const GNNModel& m, const std::vector<TrainingSample>& data,
                                           int threads = worker_count()) {
  std::vector<Prediction> out(data.size());
  std::vector<std::string> errors(data.size());
  parallel_for(static_cast<int>(data.size()), threads, [&](int i) {
    try {
      out[static_cast<std::size_t>(i)] = predict(m, data[static_cast<std::size_t>(i)]);
    } catch (const Error& e) {
      errors[static_cast<std::size_t>(i)] = std::string(to_string(e.kind())) + "|" + e.what();
    }
  });
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) {
      throw Error(ErrorKind::NonFiniteState, "sample " + std::to_string(i) + ": " + errors[i].substr(errors[i].find('|') + 1));
    }
  }
  return out;
}

inline Metrics evaluate_dataset(const GNNModel& m, const std::vector<TrainingSample>& data, int threads = worker_count()) {
  std::vector<Prediction> truth;
  truth.reserve(data.size());
  for (const auto& s : data) truth.push_back(reference_of(s));
  return field_errors(predict_all(m, data, threads), truth);
}

/// Raw losses of predictions against references.
inline LossReport prediction_losses(const std::vector<Prediction>& pred, const std::vector<Prediction>& truth) {
  require(pred.size() == truth.size() && !pred.empty(), ErrorKind::ShapeMismatch, "sample counts differ");
  std::vector<Trajectory> pe, te, ps, ts;
  std::vector<std::vector<Voigt3>> ph, th;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pe.push_back(pred[i].eps);
    te.push_back(truth[i].eps);
    ps.push_back(pred[i].sig);
    ts.push_back(truth[i].sig);
    ph.push_back(pred[i].sig_hom);
    th.push_back(truth[i].sig_hom);
  }
  LossReport r;
  r.L_eps = loss_strain(pe, te);
  r.L_sig = loss_stress(ps, ts);
  r.L_hom = loss_hom(ph, th);
  r.L_comb = std::numeric_limits<double>::quiet_NaN();
  return r;
}

inline void write_metrics_csv(std::ostream& os, const Metrics& m) {
  os << "step,eps_mean,eps_max,sig_mean,sig_max,sig_hom\n";
  os.precision(10);
  for (std::size_t t = 0; t < m.T(); ++t) {
    os << t + 1 << ',' << m.eps_mean[t] << ',' << m.eps_max[t] << ',' << m.sig_mean[t] << ',' << m.sig_max[t] << ','
       << m.hom[t] << '\n';
  }
}

// Stiffness.

/// d(sigma_hom)/d(macro strain) of one inference step taken from the given
/// state, by reverse-mode differentiation. The state itself is held fixed.
inline Mat3 step_tangent(const GNNModel& m, const GraphBatch& b, const Field3& eps_t,
                         const std::vector<MatState>& states_t, const Voigt3& macro, GNNStep* out = nullptr) {
  require(b.n_graphs() == 1, ErrorKind::InvalidArgument, "tangent needs a single graph");
  RolloutRecord rec;
  rec.steps.resize(1);
  rec.macro = {{macro}};
  GNNStep s = step(m, b, eps_t, states_t, {macro}, Mode::Infer, 0, &rec.steps[0]);
  require(s.has_stress, ErrorKind::InvalidArgument, "model does not predict stresses");
  double area = 0.0;
  for (double a : b.areas) area += a;
  std::vector<double> grad(m.params.size());
  Mat3 C;
  RolloutSeeds seeds;
  seeds.sig.assign(1, Field3::Zero(b.n_nodes, 3));
  std::vector<std::vector<Voigt3>> d_macro;
  for (int i = 0; i < 3; ++i) {
    seeds.sig[0].setZero();
    for (int e = 0; e < b.n_nodes; ++e) seeds.sig[0](e, i) = b.areas[static_cast<std::size_t>(e)] / area;
    std::fill(grad.begin(), grad.end(), 0.0);
    rollout_backward(m, b, rec, seeds, grad, &d_macro);
    C.row(i) = d_macro[0][0].transpose();
  }
  if (out) *out = std::move(s);
  return C;
}

/// Central differences of the same map, for checking.
inline Mat3 step_tangent_fd(const GNNModel& m, const GraphBatch& b, const Field3& eps_t,
                            const std::vector<MatState>& states_t, const Voigt3& macro, double h = 1e-8) {
  Mat3 C;
  for (int j = 0; j < 3; ++j) {
    const Voigt3 d = h * Voigt3::Unit(j);
    const Voigt3 sp = step(m, b, eps_t, states_t, {macro + d}, Mode::Infer).sig_hom.front();
    const Voigt3 sm = step(m, b, eps_t, states_t, {macro - d}, Mode::Infer).sig_hom.front();
    C.col(j) = (sp - sm) / (2.0 * h);
  }
  return C;
}

struct StiffnessOptions {
  int n_probes = 5;
  double probe_scale = 1e-6;
  bool include_zero = false;
  std::uint64_t seed = 0;

  void validate() const {
    require(n_probes >= 0 && (n_probes > 0 || include_zero), ErrorKind::InvalidArgument, "at least one probe is needed");
    require(probe_scale > 0.0 && probe_scale <= 1e-6, ErrorKind::InvalidArgument, "probe scale must lie in (0, 1e-6]");
  }
};

/// Random macro strains with components uniform in [-scale, scale], plus the
/// origin when requested.
inline std::vector<Voigt3> stiffness_probes(const StiffnessOptions& o) {
  o.validate();
  Rng rng(o.seed);
  std::uniform_real_distribution<double> u(-o.probe_scale, o.probe_scale);
  std::vector<Voigt3> out;
  if (o.include_zero) out.push_back(Voigt3::Zero());
  for (int i = 0; i < o.n_probes; ++i) out.push_back(Voigt3(u(rng), u(rng), u(rng)));
  return out;
}

/// Homogenized surrogate tangent from a virgin state, averaged over probes.
inline Mat3 surrogate_stiffness(const GNNModel& m, const SampleGraph& g, const StiffnessOptions& o = {}) {
  const GraphBatch b = make_batch(g);
  const Field3 eps0 = Field3::Zero(b.n_nodes, 3);
  const std::vector<MatState> st0(static_cast<std::size_t>(b.n_nodes));
  Mat3 C = Mat3::Zero();
  const auto probes = stiffness_probes(o);
  for (const Voigt3& p : probes) C += step_tangent(m, b, eps0, st0, p);
  return C / static_cast<double>(probes.size());
}

inline Mat3 surrogate_stiffness_fd(const GNNModel& m, const SampleGraph& g, const StiffnessOptions& o = {},
                                   double h = 1e-8) {
  const GraphBatch b = make_batch(g);
  const Field3 eps0 = Field3::Zero(b.n_nodes, 3);
  const std::vector<MatState> st0(static_cast<std::size_t>(b.n_nodes));
  Mat3 C = Mat3::Zero();
  const auto probes = stiffness_probes(o);
  for (const Voigt3& p : probes) C += step_tangent_fd(m, b, eps0, st0, p, h);
  return C / static_cast<double>(probes.size());
}

// Scaling study.

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  const double n = static_cast<double>(v.size());
  const double mu = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return {mu, v.size() > 1 ? std::sqrt(s / (n - 1.0)) : 0.0};
}

struct ScalingOptions {
  std::vector<int> sizes{1, 2, 4, 9};
  int samples_per_size = 50;
  double vf = 0.3;
  double delta_min = 0.05;
  double h = 0.1;
  int n_seg = 24;
  StiffnessOptions stiffness;
  bool voidless_control = true;
  std::uint64_t seed = 0;
  int threads = worker_count();
};

struct ScalingRow {
  int n_voids = 0;
  int n = 0;
  int failed = 0;
  MeanStd fe_c00, fe_fro, sur_c00, sur_fro;
  double analytic_c00 = std::numeric_limits<double>::quiet_NaN();
  double control_rel_error = std::numeric_limits<double>::quiet_NaN();
};

struct ScalingSample {
  Mat3 fe;
  Mat3 sur;
};

/// FE probing and surrogate differentiation on one freshly generated cell.
inline ScalingSample scaling_sample(const GNNModel* m, int n_voids, const ScalingOptions& o, std::uint64_t seed) {
  GenConfig g;
  g.voids_min = g.voids_max = n_voids;
  g.vf = n_voids == 0 ? 0.0 : o.vf;
  g.delta_min = o.delta_min;
  g.h_min = g.h_max = o.h;
  g.n_seg = o.n_seg;
  g.material = m ? m->material : MaterialParams{};
  Rng rng(seed);
  auto [voids, mesh] = generate_geometry(g, rng);
  ScalingSample s;
  s.fe = probe_stiffness(MicroBVP(mesh, g.material));
  s.sur = Mat3::Constant(std::numeric_limits<double>::quiet_NaN());
  if (m) {
    StiffnessOptions so = o.stiffness;
    so.seed = derive_seed(seed, 0x737469ull);
    s.sur = surrogate_stiffness(*m, make_sample_graph(mesh, voids, m->config.K), so);
  }
  return s;
}

/// Stiffness statistics per void count. The model may be null, in which
/// case only the FE columns are filled.
inline std::vector<ScalingRow> scaling_study(const GNNModel* m, const ScalingOptions& o) {
  std::vector<ScalingRow> rows;
  std::vector<int> sizes = o.sizes;
  if (o.voidless_control) sizes.insert(sizes.begin(), 0);
  for (int nv : sizes) {
    const int n = nv == 0 ? 1 : o.samples_per_size;
    std::vector<std::optional<ScalingSample>> res(static_cast<std::size_t>(n));
    parallel_for(n, o.threads, [&](int i) {
      const std::uint64_t s = derive_seed(o.seed, (static_cast<std::uint64_t>(nv) << 32) + static_cast<std::uint64_t>(i));
      try {
        res[static_cast<std::size_t>(i)] = scaling_sample(m, nv, o, s);
      } catch (const Error&) {
      }
    });
    ScalingRow r;
    r.n_voids = nv;
    std::vector<double> fe00, fefro, su00, sufro;
    for (const auto& x : res) {
      if (!x || !x->fe.allFinite()) {
        ++r.failed;
        continue;
      }
      fe00.push_back(x->fe(0, 0));
      fefro.push_back(x->fe.norm());
      if (m) {
        su00.push_back(x->sur(0, 0));
        sufro.push_back(x->sur.norm());
      }
    }
    r.n = static_cast<int>(fe00.size());
    r.fe_c00 = mean_std(fe00);
    r.fe_fro = mean_std(fefro);
    r.sur_c00 = mean_std(su00);
    r.sur_fro = mean_std(sufro);
    if (nv == 0 && r.n > 0) {
      const Mat3 D = elastic_stiffness(m ? m->material : MaterialParams{});
      r.analytic_c00 = D(0, 0);
      r.control_rel_error = std::abs(r.fe_c00.mean - D(0, 0)) / D(0, 0);
    }
    rows.push_back(r);
  }
  return rows;
}

inline void write_scaling_csv(std::ostream& os, const std::vector<ScalingRow>& rows) {
  os << "n_voids,n,failed,fe_c00_mean,fe_c00_std,fe_fro_mean,fe_fro_std,sur_c00_mean,sur_c00_std,sur_fro_mean,"
        "sur_fro_std,analytic_c00,control_rel_error\n";
  os.precision(10);
  for (const auto& r : rows) {
    os << r.n_voids << ',' << r.n << ',' << r.failed << ',' << r.fe_c00.mean << ',' << r.fe_c00.std << ','
       << r.fe_fro.mean << ',' << r.fe_fro.std << ',' << r.sur_c00.mean << ',' << r.sur_c00.std << ','
       << r.sur_fro.mean << ',' << r.sur_fro.std << ',' << r.analytic_c00 << ',' << r.control_rel_error << '\n';
  }
}

// Timing.

struct TimingBand {
  double median = 0.0;
  double lo = 0.0;  ///< 95% interval of the mean
  double hi = 0.0;
};

inline TimingBand timing_band(std::vector<double> v) {
  require(!v.empty(), ErrorKind::InvalidArgument, "no timings");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  TimingBand b;
  b.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  const MeanStd ms = mean_std(v);
  // Two-sided 97.5% Student quantiles for 1..10 degrees of freedom.
  static const double tq[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228};
  const double q = n < 2 ? 0.0 : (n - 1 <= 10 ? tq[n - 2] : 1.96);
  const double half = q * ms.std / std::sqrt(static_cast<double>(n));
  b.lo = ms.mean - half;
  b.hi = ms.mean + half;
  return b;
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorKind::InvalidArgument, "slope needs at least two points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// Element size giving roughly `n` triangles in the matrix phase.
inline double element_size_for(int n, double vf, double L = 1.0) {
  return std::sqrt(4.0 * (1.0 - vf) * L * L / (std::sqrt(3.0) * n));
}

struct TimingOptions {
  std::vector<int> sizes{100, 400, 1600};
  int repetitions = 5;
  int n_voids = 1;
  double vf = 0.3;
  int n_seg = 0;  ///< segments per void boundary; 0 matches the element size
  int steps = 25;
  bool with_stiffness = true;
  std::uint64_t seed = 0;
};

struct TimingRow {
  int target = 0;
  int n_elements = 0;
  TimingBand fe, sur, sur_stiff;
};

struct TimingReport {
  std::vector<TimingRow> rows;
  double fe_slope = 0.0;
  double sur_slope = 0.0;
  double sur_stiff_slope = std::numeric_limits<double>::quiet_NaN();
};

/// Surrogate rollout that also extracts the homogenized tangent each step.
inline std::vector<Mat3> rollout_with_tangents(const GNNModel& m, const GraphBatch& b, const StrainPath& path) {
  Field3 eps = Field3::Zero(b.n_nodes, 3);
  std::vector<MatState> states(static_cast<std::size_t>(b.n_nodes));
  std::vector<Mat3> out;
  out.reserve(path.T());
  for (std::size_t t = 0; t < path.T(); ++t) {
    GNNStep s;
    out.push_back(step_tangent(m, b, eps, states, path.steps[t], &s));
    eps = std::move(s.eps);
    states = std::move(s.states);
  }
  return out;
}

/// Sequential wall-clock comparison on one cell per size. Meshing, graph
/// construction and path sampling happen outside the timed regions.
inline TimingReport timing_benchmark(const GNNModel& m, const TimingOptions& o) {
  using clock = std::chrono::steady_clock;
  require(o.repetitions >= 1, ErrorKind::InvalidArgument, "at least one repetition is needed");
  TimingReport rep;
  Rng rng(o.seed);
  const VoidSet voids = sample_voids(o.n_voids, o.vf, 1.0, rng);
  GPConfig gc;
  gc.T = o.steps;
  const StrainPath path = gp_path(gc, rng);
  std::vector<double> ns, fe, su, sk;
  for (int target : o.sizes) {
    MeshOptions mo;
    mo.seed = derive_seed(o.seed, static_cast<std::uint64_t>(target));
    const double h = element_size_for(target, o.vf);
    const int n_seg = o.n_seg > 0 ? o.n_seg : std::max(12, static_cast<int>(std::ceil(2.0 * kPi * voids.radius / h)));
    const PeriodicMesh mesh = triangulate(voids, h, n_seg, mo);
    const SampleGraph g = make_sample_graph(mesh, voids, m.config.K);
    const GraphBatch b = make_batch(g);
    TimingRow row;
    row.target = target;
    row.n_elements = static_cast<int>(mesh.num_elements());
    std::vector<double> tf, ts, tk;
    for (int r = 0; r < o.repetitions; ++r) {
      auto t0 = clock::now();
      const PathRun run = run_path(mesh, m.material, path);
      auto t1 = clock::now();
      const RolloutResult res = rollout(m, b, {&path}, Mode::Infer);
      auto t2 = clock::now();
      tf.push_back(std::chrono::duration<double>(t1 - t0).count());
      ts.push_back(std::chrono::duration<double>(t2 - t1).count());
      if (o.with_stiffness) {
        auto t3 = clock::now();
        const auto tang = rollout_with_tangents(m, b, path);
        tk.push_back(std::chrono::duration<double>(clock::now() - t3).count());
      }
    }
    row.fe = timing_band(tf);
    row.sur = timing_band(ts);
    if (o.with_stiffness) row.sur_stiff = timing_band(tk);
    ns.push_back(row.n_elements);
    fe.push_back(row.fe.median);
    su.push_back(row.sur.median);
    sk.push_back(row.sur_stiff.median);
    rep.rows.push_back(row);
  }
  if (ns.size() >= 2) {
    rep.fe_slope = loglog_slope(ns, fe);
    rep.sur_slope = loglog_slope(ns, su);
    if (o.with_stiffness) rep.sur_stiff_slope = loglog_slope(ns, sk);
  }
  return rep;
}

inline void write_timing_csv(std::ostream& os, const TimingReport& r) {
  os << "n_elements,fe_median_s,fe_ci_lo,fe_ci_hi,sur_median_s,sur_ci_lo,sur_ci_hi,sur_stiff_median_s,sur_stiff_ci_lo,"
        "sur_stiff_ci_hi\n";
  os.precision(8);
  for (const auto& x : r.rows) {
    os << x.n_elements << ',' << x.fe.median << ',' << x.fe.lo << ',' << x.fe.hi << ',' << x.sur.median << ','
       << x.sur.lo << ',' << x.sur.hi << ',' << x.sur_stiff.median << ',' << x.sur_stiff.lo << ',' << x.sur_stiff.hi
       << '\n';
  }
  os << "# slope fe=" << r.fe_slope << " surrogate=" << r.sur_slope << " surrogate_with_stiffness=" << r.sur_stiff_slope
     << '\n';
}

// Extrapolation and unloading.

struct ExtrapolationReport {
  Metrics metrics;
  int train_steps = 25;
  double growth = 0.0;  ///< mean strain error at the last step over that at train_steps
  bool finite = true;
};

inline ExtrapolationReport extrapolation_study(const GNNModel& m, const std::vector<TrainingSample>& test,
                                               int train_steps = 25, int threads = worker_count()) {
  ExtrapolationReport r;
  r.train_steps = train_steps;
  r.metrics = evaluate_dataset(m, test, threads);
  require(static_cast<int>(r.metrics.T()) >= train_steps, ErrorKind::InvalidArgument,
          "test paths are shorter than the training horizon");
  for (const auto* v : {&r.metrics.eps_mean, &r.metrics.eps_max, &r.metrics.sig_mean, &r.metrics.sig_max, &r.metrics.hom}) {
    for (double x : *v) r.finite = r.finite && std::isfinite(x);
  }
  r.growth = r.metrics.eps_mean.back() / r.metrics.eps_mean[static_cast<std::size_t>(train_steps - 1)];
  return r;
}

struct NamedLosses {
  std::string name;
  LossReport losses;
};

inline std::vector<NamedLosses> unloading_comparison(const std::vector<std::pair<std::string, const GNNModel*>>& models,
                                                     const std::vector<TrainingSample>& unload,
                                                     int threads = worker_count()) {
  std::vector<Prediction> truth;
  for (const auto& s : unload) truth.push_back(reference_of(s));
  std::vector<NamedLosses> out;
  for (const auto& [name, m] : models) out.push_back({name, prediction_losses(predict_all(*m, unload, threads), truth)});
  return out;
}

inline void write_losses_csv(std::ostream& os, const std::vector<NamedLosses>& rows) {
  os << "model,L_eps,L_sig,L_hom\n";
  os.precision(10);
  for (const auto& r : rows) os << r.name << ',' << r.losses.L_eps << ',' << r.losses.L_sig << ',' << r.losses.L_hom << '\n';
}

}  // namespace microsurr

#endif  // MICROSURR_EVALUATE_HPP
