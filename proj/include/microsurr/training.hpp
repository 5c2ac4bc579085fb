#ifndef MICROSURR_TRAINING_HPP
#define MICROSURR_TRAINING_HPP

// Losses, gradients through full rollouts, the optimizer loop and
// checkpoint files.

#include "binio.hpp"
#include "core.hpp"
#include "dataset.hpp"
#include "surrogate.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <functional>
#include <numeric>
#include <vector>

namespace microsurr {

using Trajectory = std::vector<Field3>;

// Losses.

namespace detail {

inline double mean_squared(const Trajectory& pred, const Trajectory& truth) {
  require(pred.size() == truth.size() && !pred.empty(), ErrorKind::ShapeMismatch, "trajectories differ in step count");
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    require(pred[t].rows() == truth[t].rows(), ErrorKind::ShapeMismatch, "fields differ in element count");
    acc += (pred[t] - truth[t]).squaredNorm();
    count += static_cast<std::size_t>(pred[t].size());
  }
  return acc / static_cast<double>(count);
}

}  // namespace detail

/// Root of the sample-averaged per-sample mean squared error.
inline double loss_field(const std::vector<Trajectory>& pred, const std::vector<Trajectory>& truth) {
  require(pred.size() == truth.size() && !pred.empty(), ErrorKind::ShapeMismatch, "sample counts differ");
  double acc = 0.0;
  for (std::size_t n = 0; n < pred.size(); ++n) acc += detail::mean_squared(pred[n], truth[n]);
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

inline double loss_strain(const std::vector<Trajectory>& pred, const std::vector<Trajectory>& truth) {
  return loss_field(pred, truth);
}

inline double loss_stress(const std::vector<Trajectory>& pred, const std::vector<Trajectory>& truth) {
  return loss_field(pred, truth);
}

inline double loss_hom(const std::vector<std::vector<Voigt3>>& pred, const std::vector<std::vector<Voigt3>>& truth) {
  require(pred.size() == truth.size() && !pred.empty(), ErrorKind::ShapeMismatch, "sample counts differ");
  double acc = 0.0;
  for (std::size_t n = 0; n < pred.size(); ++n) {
    require(pred[n].size() == truth[n].size() && !pred[n].empty(), ErrorKind::ShapeMismatch, "step counts differ");
    double s = 0.0;
    for (std::size_t t = 0; t < pred[n].size(); ++t) s += (pred[n][t] - truth[n][t]).squaredNorm();
    acc += s / (3.0 * static_cast<double>(pred[n].size()));
  }
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

inline double combine_losses(double L_eps, double L_sig, double xi, double c_eps, double c_sig) {
  require(c_eps > 0.0 && c_sig > 0.0, ErrorKind::InvalidArgument, "normalization constants must be positive");
  return xi * (L_sig / c_sig) + (1.0 - xi) * (L_eps / c_eps);
}

struct LossReport {
  double L_eps = 0.0;
  double L_sig = std::numeric_limits<double>::quiet_NaN();
  double L_comb = 0.0;
  double L_hom = std::numeric_limits<double>::quiet_NaN();
  double c_eps = 1.0;
  double c_sig = 1.0;
};

// Prepared samples.

/// A ground-truth record with its graph inputs for a given K.
struct TrainingSample {
  SampleGraph graph;
  StrainPath path;
  Trajectory eps, sig;
  std::vector<Eigen::VectorXd> kappa;
  std::vector<Voigt3> sig_hom;
};

inline TrainingSample prepare_sample(const SampleRecord& r, int K) {
  TrainingSample s;
  s.graph = make_sample_graph(r.mesh, r.voids, K);
  s.path = r.path;
  s.eps = r.eps;
  s.sig = r.sig;
  s.kappa = r.kappa;
  s.sig_hom = r.sig_hom;
  return s;
}

inline std::vector<TrainingSample> prepare_samples(const std::vector<SampleRecord>& rs, int K) {
  std::vector<TrainingSample> out;
  out.reserve(rs.size());
  for (const auto& r : rs) out.push_back(prepare_sample(r, K));
  return out;
}

namespace detail {

struct RunningStats {
  Eigen::VectorXd sum, sum2;
  double n = 0.0;

  explicit RunningStats(Eigen::Index d) : sum(Eigen::VectorXd::Zero(d)), sum2(Eigen::VectorXd::Zero(d)) {}
  template <class Derived>
  void add_rows(const Eigen::MatrixBase<Derived>& x) {
    sum += x.colwise().sum().transpose();
    sum2 += x.array().square().colwise().sum().matrix().transpose();
    n += static_cast<double>(x.rows());
  }
  Eigen::VectorXd mean() const { return sum / std::max(n, 1.0); }
  Eigen::VectorXd stddev() const {
    Eigen::VectorXd m = mean();
    Eigen::VectorXd v = (sum2 / std::max(n, 1.0) - m.cwiseProduct(m)).cwiseMax(0.0);
    Eigen::VectorXd s = v.cwiseSqrt();
    for (Eigen::Index i = 0; i < s.size(); ++i)
      if (!(s(i) > 1e-12)) s(i) = 1.0;
    return s;
  }
};

inline double pooled_std(const std::vector<const Trajectory*>& fields) {
  double s = 0.0, s2 = 0.0, n = 0.0;
  for (const Trajectory* tr : fields) {
    for (const Field3& f : *tr) {
      s += f.sum();
      s2 += f.squaredNorm();
      n += static_cast<double>(f.size());
    }
  }
  if (n == 0.0) return 1.0;
  const double m = s / n;
  const double sd = std::sqrt(std::max(s2 / n - m * m, 0.0));
  return sd > 1e-12 ? sd : 1.0;
}

}  // namespace detail

/// Input, output, edge and loss statistics over a training set, computed
/// along the ground-truth trajectories.
inline NormStats compute_norm_stats(const std::vector<TrainingSample>& data, const GNNConfig& cfg) {
  require(!data.empty(), ErrorKind::InvalidArgument, "cannot compute statistics of an empty dataset");
  NormStats st = NormStats::identity(cfg);
  detail::RunningStats in(cfg.input_dim()), out(cfg.output_dim()), edge(2);
  const int mc = cfg.macro_column();
  std::vector<const Trajectory*> eps_fields, sig_fields;
  for (const TrainingSample& s : data) {
    const int E = s.graph.num_nodes();
    require(s.graph.geom.K == cfg.K, ErrorKind::ShapeMismatch, "sample features use a different K");
    nn::Mat x(E, cfg.input_dim());
    nn::Mat y(E, cfg.output_dim());
    for (std::size_t t = 0; t < s.eps.size(); ++t) {
      if (t == 0) {
        x.leftCols(3).setZero();
        if (cfg.use_kappa_feature) x.col(3).setZero();
      } else {
        x.leftCols(3) = s.eps[t - 1];
        if (cfg.use_kappa_feature) x.col(3) = s.kappa[t - 1];
      }
      x.middleCols(mc, 3).rowwise() = s.path.steps[t].transpose();
      x.rightCols(2 * cfg.K) = s.graph.geom.values;
      in.add_rows(x);
      y.leftCols(3) = s.eps[t];
      if (cfg.predict_increment && t > 0) y.leftCols(3) -= s.eps[t - 1];
      if (cfg.stress_head()) y.rightCols(3) = s.sig[t];
      out.add_rows(y);
    }
    Eigen::MatrixX2d e(static_cast<Eigen::Index>(s.graph.graph.num_edges()), 2);
    for (std::size_t k = 0; k < s.graph.graph.num_edges(); ++k) {
      e.row(static_cast<Eigen::Index>(k)) = s.graph.graph.edge_features[k].transpose();
    }
    edge.add_rows(e);
    eps_fields.push_back(&s.eps);
    sig_fields.push_back(&s.sig);
  }
  st.in_mean = in.mean();
  st.in_std = in.stddev();
  st.out_mean = out.mean();
  st.out_std = out.stddev();
  st.edge_mean = edge.mean();
  st.edge_std = edge.stddev();
  st.loss_eps_scale = detail::pooled_std(eps_fields);
  st.loss_sig_scale = detail::pooled_std(sig_fields);
  return st;
}

// Loss and gradient over a batch.

/// Runs the batch, evaluates the losses and, when `grad` is given,
/// accumulates d(L_comb)/d(params) into it. Stress and homogenized losses
/// are reported whenever the mode produces stresses.
inline LossReport batch_loss(const GNNModel& m, const std::vector<const TrainingSample*>& batch, Mode mode,
                             std::uint64_t seed, std::vector<double>* grad = nullptr) {
  require(!batch.empty(), ErrorKind::InvalidArgument, "empty batch");
  std::vector<const SampleGraph*> graphs;
  std::vector<const StrainPath*> paths;
  for (const TrainingSample* s : batch) {
    graphs.push_back(&s->graph);
    paths.push_back(&s->path);
  }
  const GraphBatch b = make_batch(graphs);
  RolloutRecord rec;
  const RolloutResult r = rollout(m, b, paths, mode, seed, grad ? &rec : nullptr);
  const std::size_t T = r.T();
  const auto N = static_cast<double>(batch.size());
  LossReport rep;
  rep.c_eps = m.stats.loss_eps_scale;
  rep.c_sig = m.stats.loss_sig_scale;

  double mse_eps = 0.0, mse_sig = 0.0, mse_hom = 0.0;
  for (std::size_t g = 0; g < batch.size(); ++g) {
    const TrainingSample& s = *batch[g];
    require(s.eps.size() == T, ErrorKind::ShapeMismatch, "sample step count differs from its path");
    const int off = b.offsets[g], E = b.graph_size(static_cast<int>(g));
    const double denom = static_cast<double>(T) * E * 3.0;
    double e = 0.0, sg = 0.0, h = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      e += (r.eps[t].middleRows(off, E) - s.eps[t]).squaredNorm();
      if (r.has_stress) {
        sg += (r.sig[t].middleRows(off, E) - s.sig[t]).squaredNorm();
        h += (r.sig_hom[t][g] - s.sig_hom[t]).squaredNorm();
      }
    }
    mse_eps += e / denom;
    mse_sig += sg / denom;
    mse_hom += h / (3.0 * static_cast<double>(T));
  }
  rep.L_eps = std::sqrt(mse_eps / N);
  const double xi = m.config.xi;
  if (r.has_stress) {
    rep.L_sig = std::sqrt(mse_sig / N);
    rep.L_hom = std::sqrt(mse_hom / N);
    rep.L_comb = combine_losses(rep.L_eps, rep.L_sig, xi, rep.c_eps, rep.c_sig);
  } else {
    require(xi == 0.0, ErrorKind::InvalidArgument, "stress loss requested but the model produced no stresses");
    rep.L_comb = rep.L_eps / rep.c_eps;
  }
  if (!grad) return rep;

  // d L_comb / d prediction for each sample block.
  const double a_eps = rep.L_eps > 0.0 ? (1.0 - xi) / rep.c_eps / (rep.L_eps * N) : 0.0;
  const bool stress_term = r.has_stress && xi > 0.0;
  const double a_sig = stress_term && rep.L_sig > 0.0 ? xi / rep.c_sig / (rep.L_sig * N) : 0.0;
  RolloutSeeds seeds;
  seeds.eps.assign(T, Field3::Zero(b.n_nodes, 3));
  if (stress_term) seeds.sig.assign(T, Field3::Zero(b.n_nodes, 3));
  for (std::size_t g = 0; g < batch.size(); ++g) {
    const TrainingSample& s = *batch[g];
    const int off = b.offsets[g], E = b.graph_size(static_cast<int>(g));
    const double denom = static_cast<double>(T) * E * 3.0;
    for (std::size_t t = 0; t < T; ++t) {
      seeds.eps[t].middleRows(off, E) = (a_eps / denom) * (r.eps[t].middleRows(off, E) - s.eps[t]);
      if (stress_term) seeds.sig[t].middleRows(off, E) = (a_sig / denom) * (r.sig[t].middleRows(off, E) - s.sig[t]);
    }
  }
  rollout_backward(m, b, rec, seeds, *grad);
  return rep;
}

/// Loss over a whole set, in chunks, without gradients.
inline LossReport dataset_loss(const GNNModel& m, const std::vector<TrainingSample>& data, Mode mode,
                               std::size_t chunk = 16) {
  require(!data.empty(), ErrorKind::InvalidArgument, "empty dataset");
  double se = 0.0, ss = 0.0, sh = 0.0;
  LossReport out;
  bool stress = false;
  for (std::size_t i = 0; i < data.size(); i += chunk) {
    std::vector<const TrainingSample*> part;
    for (std::size_t j = i; j < std::min(data.size(), i + chunk); ++j) part.push_back(&data[j]);
    const LossReport r = batch_loss(m, part, mode, 0);
    const auto n = static_cast<double>(part.size());
    se += r.L_eps * r.L_eps * n;
    if (!std::isnan(r.L_sig)) {
      stress = true;
      ss += r.L_sig * r.L_sig * n;
      sh += r.L_hom * r.L_hom * n;
    }
    out.c_eps = r.c_eps;
    out.c_sig = r.c_sig;
  }
  const auto N = static_cast<double>(data.size());
  out.L_eps = std::sqrt(se / N);
  if (stress) {
    out.L_sig = std::sqrt(ss / N);
    out.L_hom = std::sqrt(sh / N);
    out.L_comb = combine_losses(out.L_eps, out.L_sig, m.config.xi, out.c_eps, out.c_sig);
  } else {
    out.L_comb = out.L_eps / out.c_eps;
  }
  return out;
}

// Optimization.

struct TrainConfig {
  int epochs = 200;
  int batch_size = 8;
  double lr_peak = 2e-4;
  double lr_start = 1e-5;
  int warmup_epochs = 10;
  double decay = 0.998;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, ErrorKind::InvalidArgument, "epochs must be positive");
    require(batch_size >= 1, ErrorKind::InvalidArgument, "batch size must be positive");
    require(lr_start > 0.0 && lr_start < lr_peak, ErrorKind::InvalidArgument, "need 0 < lr_start < lr_peak");
    require(decay > 0.0 && decay <= 1.0, ErrorKind::InvalidArgument, "decay must lie in (0, 1]");
    require(warmup_epochs >= 0, ErrorKind::InvalidArgument, "warmup epochs must be non-negative");
    require(clip_norm > 0.0, ErrorKind::InvalidArgument, "clip norm must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},     {"batch_size", c.batch_size}, {"lr_peak", c.lr_peak},
                     {"lr_start", c.lr_start}, {"warmup_epochs", c.warmup_epochs}, {"decay", c.decay},
                     {"clip_norm", c.clip_norm}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr_peak").get_to(c.lr_peak);
  j.at("lr_start").get_to(c.lr_start);
  j.at("warmup_epochs").get_to(c.warmup_epochs);
  j.at("decay").get_to(c.decay);
  j.at("clip_norm").get_to(c.clip_norm);
  j.at("seed").get_to(c.seed);
}

/// Linear warmup reaching lr_peak at epoch warmup_epochs, then
/// lr_peak * decay^epoch with epoch counted from zero.
inline double lr_at(int epoch, const TrainConfig& c) {
  require(epoch >= 0, ErrorKind::InvalidArgument, "epoch must be non-negative");
  if (epoch <= c.warmup_epochs && c.warmup_epochs > 0) {
    return c.lr_start + (c.lr_peak - c.lr_start) * static_cast<double>(epoch) / c.warmup_epochs;
  }
  return c.lr_peak * std::pow(c.decay, epoch);
}

struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  long step_count = 0;

  void step(std::vector<double>& params, const std::vector<double>& grad, double lr) {
    if (m.empty()) {
      m.assign(params.size(), 0.0);
      v.assign(params.size(), 0.0);
    }
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
};

/// Rescales `g` to at most `max_norm`; returns the norm before clipping.
inline double clip_gradient(std::vector<double>& g, double max_norm) {
  const double n = std::sqrt(std::inner_product(g.begin(), g.end(), g.begin(), 0.0));
  if (n > max_norm) {
    const double s = max_norm / n;
    for (double& x : g) x *= s;
  }
  return n;
}

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_L_comb = 0.0;
  double val_L_eps = 0.0, val_L_sig = 0.0, val_L_comb = 0.0, val_L_hom = 0.0;
  double wall_seconds = 0.0;
};

inline constexpr std::string_view kLogHeader = "epoch,lr,train_L_comb,val_L_eps,val_L_sig,val_L_comb,val_L_hom,wall_seconds";

inline std::string format_log_row(const EpochLog& e) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.3f", e.epoch, e.lr, e.train_L_comb,
                e.val_L_eps, e.val_L_sig, e.val_L_comb, e.val_L_hom, e.wall_seconds);
  return buf;
}

struct FitResult {
  GNNModel best;
  int best_epoch = -1;
  std::vector<EpochLog> log;
};

/// Full training run. The model with the lowest validation L_comb is kept.
/// `on_epoch` (optional) sees each log row as it is produced.
inline FitResult fit(const std::vector<TrainingSample>& train, const std::vector<TrainingSample>& val,
                     const GNNConfig& gcfg, const TrainConfig& tcfg, const MaterialParams& material = {},
                     const std::function<void(const EpochLog&)>& on_epoch = {}) {
  require(!train.empty(), ErrorKind::InvalidArgument, "training set is empty");
  require(!val.empty(), ErrorKind::InvalidArgument, "validation set is empty");
  tcfg.validate();
  GNNModel model = make_model(gcfg, derive_seed(tcfg.seed, 0x696e6974ull), material);
  model.stats = compute_norm_stats(train, gcfg);
  Adam opt;
  FitResult res;
  double best = std::numeric_limits<double>::infinity();
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> grad(model.num_params());
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, tcfg);
    Rng shuffle_rng(derive_seed(tcfg.seed, 0x1000000ull + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double train_sum = 0.0;
    int n_batches = 0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(tcfg.batch_size)) {
      std::vector<const TrainingSample*> batch;
      for (std::size_t j = i; j < std::min(order.size(), i + static_cast<std::size_t>(tcfg.batch_size)); ++j) {
        batch.push_back(&train[order[j]]);
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      const std::uint64_t dseed = derive_seed(tcfg.seed, (static_cast<std::uint64_t>(epoch) << 24) + i);
      const LossReport rep = batch_loss(model, batch, Mode::Train, dseed, &grad);
      const double gnorm = clip_gradient(grad, tcfg.clip_norm);
      if (!std::isfinite(gnorm)) {
        throw Error(ErrorKind::NonFiniteGradient,
                    "non-finite gradient norm at epoch " + std::to_string(epoch) + ", batch " + std::to_string(n_batches));
      }
      opt.step(model.params.values(), grad, lr);
      train_sum += rep.L_comb;
      ++n_batches;
    }
    const LossReport v = dataset_loss(model, val, Mode::Infer);
    EpochLog row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_L_comb = train_sum / n_batches;
    row.val_L_eps = v.L_eps;
    row.val_L_sig = v.L_sig;
    row.val_L_comb = v.L_comb;
    row.val_L_hom = v.L_hom;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(row);
    if (on_epoch) on_epoch(row);
    if (v.L_comb < best) {
      best = v.L_comb;
      res.best = model;
      res.best_epoch = epoch;
    }
  }
  if (res.best_epoch < 0) res.best = model;
  return res;
}

// Checkpoints.

inline constexpr std::string_view kCheckpointMagic = "GNNCKPT1";
inline constexpr int kCheckpointFormat = 1;

namespace detail {

inline nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Eigen::VectorXd json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline std::uint64_t config_hash(const GNNConfig& c) { return binio::fnv1a(c.shape_signature()); }

}  // namespace detail

inline std::string encode_checkpoint(const GNNModel& m) {
  nlohmann::json meta;
  meta["format_version"] = kCheckpointFormat;
  meta["config"] = m.config;
  meta["config_hash"] = detail::config_hash(m.config);
  meta["material"] = m.material;
  meta["stats"] = {{"in_mean", detail::vec_json(m.stats.in_mean)},
                   {"in_std", detail::vec_json(m.stats.in_std)},
                   {"out_mean", detail::vec_json(m.stats.out_mean)},
                   {"out_std", detail::vec_json(m.stats.out_std)},
                   {"edge_mean", detail::vec_json(m.stats.edge_mean)},
                   {"edge_std", detail::vec_json(m.stats.edge_std)},
                   {"loss_eps_scale", m.stats.loss_eps_scale},
                   {"loss_sig_scale", m.stats.loss_sig_scale}};
  meta["tensors"] = m.params.blocks().size();
  const std::string text = meta.dump(2);
  binio::Writer w;
  w.put_bytes(kCheckpointMagic);
  w.put_bytes("\n" + std::to_string(text.size()) + "\n");
  w.put_bytes(text);
  w.put_bytes("\n");
  for (std::size_t i = 0; i < m.params.blocks().size(); ++i) {
    const nn::ParamBlock& b = m.params.block(static_cast<int>(i));
    w.put_string(b.name);
    w.put_u32(2);
    w.put_u64(static_cast<std::uint64_t>(b.rows));
    w.put_u64(static_cast<std::uint64_t>(b.cols));
    for (std::size_t k = 0; k < b.size(); ++k) w.put_f64(m.params.values()[b.offset + k]);
  }
  return w.str();
}

inline GNNModel decode_checkpoint(std::string_view data) {
  binio::Reader rd(data, "checkpoint");
  if (data.size() < kCheckpointMagic.size() || rd.get_bytes(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw Error(ErrorKind::ParseError, "checkpoint magic bytes missing");
  }
  if (rd.get_bytes(1) != "\n") throw Error(ErrorKind::ParseError, "malformed checkpoint header");
  std::string len;
  for (std::string_view c = rd.get_bytes(1); c != "\n"; c = rd.get_bytes(1)) {
    if (c[0] < '0' || c[0] > '9' || len.size() > 12) throw Error(ErrorKind::ParseError, "malformed metadata length");
    len += c;
  }
  if (len.empty()) throw Error(ErrorKind::ParseError, "malformed metadata length");
  const std::string_view text = rd.get_bytes(std::stoull(len));
  if (rd.get_bytes(1) != "\n") throw Error(ErrorKind::ParseError, "malformed checkpoint metadata");
  GNNModel m;
  try {
    const nlohmann::json meta = nlohmann::json::parse(text);
    if (meta.at("format_version").get<int>() != kCheckpointFormat) {
      throw Error(ErrorKind::VersionMismatch, "unsupported checkpoint format version");
    }
    const GNNConfig cfg = meta.at("config").get<GNNConfig>();
    m = make_model_layout(cfg, meta.at("material").get<MaterialParams>());
    if (meta.at("config_hash").get<std::uint64_t>() != detail::config_hash(cfg)) {
      throw Error(ErrorKind::VersionMismatch, "checkpoint config hash does not match its configuration");
    }
    const auto& s = meta.at("stats");
    m.stats.in_mean = detail::json_vec(s.at("in_mean"));
    m.stats.in_std = detail::json_vec(s.at("in_std"));
    m.stats.out_mean = detail::json_vec(s.at("out_mean"));
    m.stats.out_std = detail::json_vec(s.at("out_std"));
    m.stats.edge_mean = detail::json_vec(s.at("edge_mean"));
    m.stats.edge_std = detail::json_vec(s.at("edge_std"));
    m.stats.loss_eps_scale = s.at("loss_eps_scale").get<double>();
    m.stats.loss_sig_scale = s.at("loss_sig_scale").get<double>();
    if (meta.at("tensors").get<std::size_t>() != m.params.blocks().size()) {
      throw Error(ErrorKind::VersionMismatch, "checkpoint tensor count does not match the configuration");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("checkpoint metadata: ") + e.what());
  }
  try {
    m.stats.check(m.config);
  } catch (const Error& e) {
    throw Error(ErrorKind::VersionMismatch, e.what());
  }
  for (std::size_t i = 0; i < m.params.blocks().size(); ++i) {
    const nn::ParamBlock& b = m.params.block(static_cast<int>(i));
    const std::string name = rd.get_string();
    const std::uint32_t rank = rd.get_u32();
    if (rank != 2) throw Error(ErrorKind::ParseError, "tensor " + name + " has unsupported rank");
    const std::uint64_t r = rd.get_u64(), c = rd.get_u64();
    if (name != b.name || r != static_cast<std::uint64_t>(b.rows) || c != static_cast<std::uint64_t>(b.cols)) {
      throw Error(ErrorKind::VersionMismatch, "tensor " + name + " does not match the configured layout (expected " +
                                                  b.name + ")");
    }
    for (std::size_t k = 0; k < b.size(); ++k) m.params.values()[b.offset + k] = rd.get_f64();
  }
  if (rd.remaining() != 0) throw Error(ErrorKind::ParseError, "trailing bytes after the last tensor");
  return m;
}

inline void save_checkpoint(const GNNModel& m, const std::string& path) { binio::write_file(path, encode_checkpoint(m)); }
inline GNNModel load_checkpoint(const std::string& path) { return decode_checkpoint(binio::read_file(path)); }

}  // namespace microsurr

#endif  // MICROSURR_TRAINING_HPP
