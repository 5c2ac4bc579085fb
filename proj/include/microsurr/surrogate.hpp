#ifndef MICROSURR_SURROGATE_HPP
#define MICROSURR_SURROGATE_HPP

// Encode-process-decode graph network over element centroids, followed by
// the constitutive update per element. Predicts strain increments and rolls
// out autoregressively along a macroscopic strain path.

#include "core.hpp"
#include "loadgen.hpp"
#include "material.hpp"
#include "microgen.hpp"
#include "nn.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace microsurr {

enum class Variant { A, B, C, D };
enum class Mode { Train, Infer };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::A: return "A";
    case Variant::B: return "B";
    case Variant::C: return "C";
    case Variant::D: return "D";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "A" || s == "a") return Variant::A;
  if (s == "B" || s == "b") return Variant::B;
  if (s == "C" || s == "c") return Variant::C;
  if (s == "D" || s == "d") return Variant::D;
  throw Error(ErrorKind::InvalidArgument, "unknown variant '" + std::string(s) + "'");
}

struct GNNConfig {
  int hidden = 512;
  int n_mpl = 5;
  double dropout = 0.1;
  double xi = 0.6;
  int K = 9;
  bool use_kappa_feature = true;
  bool use_material = true;    ///< material model on the training path
  bool infer_material = true;  ///< material model at inference
  bool predict_increment = true;
  Variant variant = Variant::A;

  /// Flags and blend weight of a named variant; other fields keep defaults.
  static GNNConfig for_variant(Variant v) {
    GNNConfig c;
    c.variant = v;
    c.use_kappa_feature = v == Variant::A;
    c.use_material = v == Variant::A || v == Variant::B;
    c.infer_material = v != Variant::C;
    c.xi = v == Variant::D ? 0.0 : 0.6;
    return c;
  }

  int input_dim() const { return 6 + 2 * K + (use_kappa_feature ? 1 : 0); }
  bool stress_head() const { return !use_material && !infer_material; }
  int output_dim() const { return stress_head() ? 6 : 3; }
  bool material_active(Mode m) const { return use_material || (m == Mode::Infer && infer_material); }
  int macro_column() const { return use_kappa_feature ? 4 : 3; }
  int geom_column() const { return macro_column() + 3; }

  void validate() const {
    require(hidden >= 1, ErrorKind::InvalidArgument, "hidden width must be positive");
    require(n_mpl >= 0, ErrorKind::InvalidArgument, "message-passing layer count must be non-negative");
    require(dropout >= 0.0 && dropout < 1.0, ErrorKind::InvalidArgument, "dropout must lie in [0, 1)");
    require(xi >= 0.0 && xi <= 1.0, ErrorKind::InvalidArgument, "xi must lie in [0, 1]");
    require(K >= 1, ErrorKind::InvalidArgument, "K must be positive");
    const GNNConfig ref = for_variant(variant);
    require(use_kappa_feature == ref.use_kappa_feature && use_material == ref.use_material &&
                infer_material == ref.infer_material,
            ErrorKind::InvalidArgument, "flags do not match variant " + std::string(to_string(variant)));
    require(variant != Variant::D || xi == 0.0, ErrorKind::InvalidArgument, "variant D trains on strains only (xi = 0)");
  }

  /// Everything that determines the parameter layout.
  std::string shape_signature() const {
    return "h" + std::to_string(hidden) + "_l" + std::to_string(n_mpl) + "_k" + std::to_string(K) + "_in" +
           std::to_string(input_dim()) + "_out" + std::to_string(output_dim());
  }
};

inline void to_json(nlohmann::json& j, const GNNConfig& c) {
  j = nlohmann::json{{"hidden", c.hidden},
                     {"n_mpl", c.n_mpl},
                     {"dropout", c.dropout},
                     {"xi", c.xi},
                     {"K", c.K},
                     {"use_kappa_feature", c.use_kappa_feature},
                     {"use_material", c.use_material},
                     {"infer_material", c.infer_material},
                     {"predict_increment", c.predict_increment},
                     {"variant", std::string(to_string(c.variant))}};
}

inline void from_json(const nlohmann::json& j, GNNConfig& c) {
  c = GNNConfig::for_variant(parse_variant(j.at("variant").get<std::string>()));
  j.at("hidden").get_to(c.hidden);
  j.at("n_mpl").get_to(c.n_mpl);
  j.at("dropout").get_to(c.dropout);
  j.at("xi").get_to(c.xi);
  j.at("K").get_to(c.K);
  j.at("use_kappa_feature").get_to(c.use_kappa_feature);
  j.at("use_material").get_to(c.use_material);
  j.at("infer_material").get_to(c.infer_material);
  j.at("predict_increment").get_to(c.predict_increment);
}

/// Frozen per-feature statistics; x_normalized = (x - mean) / std.
struct NormStats {
  Eigen::VectorXd in_mean, in_std;
  Eigen::VectorXd out_mean, out_std;
  Eigen::Vector2d edge_mean = Eigen::Vector2d::Zero();
  Eigen::Vector2d edge_std = Eigen::Vector2d::Ones();
  double loss_eps_scale = 1.0;  ///< pooled std of strain targets
  double loss_sig_scale = 1.0;  ///< pooled std of stress targets

  static NormStats identity(const GNNConfig& c) {
    NormStats s;
    s.in_mean = Eigen::VectorXd::Zero(c.input_dim());
    s.in_std = Eigen::VectorXd::Ones(c.input_dim());
    s.out_mean = Eigen::VectorXd::Zero(c.output_dim());
    s.out_std = Eigen::VectorXd::Ones(c.output_dim());
    return s;
  }

  void check(const GNNConfig& c) const {
    require(in_mean.size() == c.input_dim() && in_std.size() == c.input_dim() && out_mean.size() == c.output_dim() &&
                out_std.size() == c.output_dim(),
            ErrorKind::ShapeMismatch, "normalization statistics do not match the configuration");
    require((in_std.array() > 0).all() && (out_std.array() > 0).all() && (edge_std.array() > 0).all(),
            ErrorKind::InvalidArgument, "normalization std must be positive");
    require(loss_eps_scale > 0.0 && loss_sig_scale > 0.0, ErrorKind::InvalidArgument,
            "loss normalization constants must be positive");
  }
};

struct GNNModel {
  struct MPL {
    nn::MLP2 message;  ///< first-layer rows: 2 edge features, then sender state
    nn::MLP2 update;   ///< first-layer rows: own state, then aggregated message
  };

  GNNConfig config;
  NormStats stats;
  MaterialParams material;
  nn::ParamStore params;
  nn::MLP2 encoder;
  std::vector<MPL> layers;
  nn::MLP2 decoder;

  std::size_t num_params() const { return params.size(); }
};

/// Parameter layout for `cfg` with all values zero.
inline GNNModel make_model_layout(const GNNConfig& cfg, const MaterialParams& material = {}) {
  cfg.validate();
  GNNModel m;
  m.config = cfg;
  m.material = material;
  m.stats = NormStats::identity(cfg);
  const int h = cfg.hidden;
  m.encoder = nn::MLP2::create(m.params, "encoder", cfg.input_dim(), h, h);
  for (int l = 0; l < cfg.n_mpl; ++l) {
    const std::string p = "mpl" + std::to_string(l);
    GNNModel::MPL layer;
    layer.message = nn::MLP2::create(m.params, p + ".message", h + 2, h, h);
    layer.update = nn::MLP2::create(m.params, p + ".update", 2 * h, h, h);
    m.layers.push_back(layer);
  }
  m.decoder = nn::MLP2::create(m.params, "decoder", h, h, cfg.output_dim());
  return m;
}

inline GNNModel make_model(const GNNConfig& cfg, std::uint64_t seed, const MaterialParams& material = {}) {
  GNNModel m = make_model_layout(cfg, material);
  Rng rng(seed);
  m.encoder.init(m.params, rng);
  for (const auto& l : m.layers) {
    l.message.init(m.params, rng);
    l.update.init(m.params, rng);
  }
  m.decoder.init(m.params, rng);
  return m;
}

// Graph inputs.

/// Everything the network needs to know about one microstructure.
struct SampleGraph {
  DualGraph graph;
  GeomFeatures geom;
  std::vector<double> areas;

  int num_nodes() const { return graph.n_nodes; }
};

inline SampleGraph make_sample_graph(const PeriodicMesh& mesh, const VoidSet& voids, int K) {
  SampleGraph s;
  s.graph = build_dual_graph(mesh);
  s.geom = compute_void_features(mesh, voids, K);
  s.areas = mesh.element_areas;
  return s;
}

/// Disjoint union of graphs; node blocks are contiguous.
struct GraphBatch {
  int n_nodes = 0;
  int K = 0;
  std::vector<int> offsets{0};
  std::vector<int> graph_of;
  std::vector<int> recv, send;
  Eigen::MatrixX2d edge_features;
  nn::Mat geom;
  std::vector<double> areas;
  Eigen::VectorXd in_degree;

  int n_graphs() const { return static_cast<int>(offsets.size()) - 1; }
  int graph_size(int g) const { return offsets[g + 1] - offsets[g]; }
  std::size_t n_edges() const { return recv.size(); }
};

inline GraphBatch make_batch(const std::vector<const SampleGraph*>& graphs) {
  require(!graphs.empty(), ErrorKind::InvalidArgument, "empty graph batch");
  GraphBatch b;
  b.K = graphs.front()->geom.K;
  std::size_t n_edges = 0;
  for (const SampleGraph* s : graphs) {
    require(s->geom.K == b.K, ErrorKind::ShapeMismatch, "graphs in a batch use different K");
    require(s->geom.values.rows() == s->graph.n_nodes && static_cast<int>(s->areas.size()) == s->graph.n_nodes,
            ErrorKind::ShapeMismatch, "graph, features and areas disagree in node count");
    b.n_nodes += s->graph.n_nodes;
    b.offsets.push_back(b.n_nodes);
    n_edges += s->graph.num_edges();
  }
  b.graph_of.resize(static_cast<std::size_t>(b.n_nodes));
  b.geom.resize(b.n_nodes, 2 * b.K);
  b.areas.reserve(static_cast<std::size_t>(b.n_nodes));
  b.recv.reserve(n_edges);
  b.send.reserve(n_edges);
  b.edge_features.resize(static_cast<Eigen::Index>(n_edges), 2);
  b.in_degree = Eigen::VectorXd::Zero(b.n_nodes);
  Eigen::Index k = 0;
  for (std::size_t g = 0; g < graphs.size(); ++g) {
    const SampleGraph& s = *graphs[g];
    const int off = b.offsets[g];
    for (int i = 0; i < s.graph.n_nodes; ++i) b.graph_of[static_cast<std::size_t>(off + i)] = static_cast<int>(g);
    b.geom.middleRows(off, s.graph.n_nodes) = s.geom.values;
    b.areas.insert(b.areas.end(), s.areas.begin(), s.areas.end());
    for (std::size_t e = 0; e < s.graph.num_edges(); ++e, ++k) {
      const int r = off + s.graph.edges[e].first, sd = off + s.graph.edges[e].second;
      b.recv.push_back(r);
      b.send.push_back(sd);
      b.edge_features.row(k) = s.graph.edge_features[e].transpose();
      b.in_degree(r) += 1.0;
    }
  }
  return b;
}

inline GraphBatch make_batch(const SampleGraph& s) { return make_batch(std::vector<const SampleGraph*>{&s}); }

/// Per-graph area-weighted mean of a per-node field.
inline std::vector<Voigt3> homogenize_batch(const GraphBatch& b, const Field3& field) {
  require(field.rows() == b.n_nodes, ErrorKind::ShapeMismatch, "field does not match the batch");
  std::vector<Voigt3> out(static_cast<std::size_t>(b.n_graphs()));
  for (int g = 0; g < b.n_graphs(); ++g) {
    Voigt3 acc = Voigt3::Zero();
    double area = 0.0;
    for (int i = b.offsets[g]; i < b.offsets[g + 1]; ++i) {
      acc += b.areas[static_cast<std::size_t>(i)] * field.row(i).transpose();
      area += b.areas[static_cast<std::size_t>(i)];
    }
    out[static_cast<std::size_t>(g)] = acc / area;
  }
  return out;
}

/// Row sums of `values` grouped by `index` into `n` rows.
inline nn::Mat scatter_sum(const std::vector<int>& index, const nn::Mat& values, int n) {
  nn::Mat out = nn::Mat::Zero(n, values.cols());
  const auto E = static_cast<Eigen::Index>(index.size());
  for (Eigen::Index c = 0; c < values.cols(); ++c) {
    double* o = out.col(c).data();
    const double* v = values.col(c).data();
    for (Eigen::Index k = 0; k < E; ++k) o[index[static_cast<std::size_t>(k)]] += v[k];
  }
  return out;
}

inline nn::Mat gather_rows(const nn::Mat& values, const std::vector<int>& index) {
  const auto E = static_cast<Eigen::Index>(index.size());
  nn::Mat out(E, values.cols());
  for (Eigen::Index c = 0; c < values.cols(); ++c) {
    double* o = out.col(c).data();
    const double* v = values.col(c).data();
    for (Eigen::Index k = 0; k < E; ++k) o[k] = v[index[static_cast<std::size_t>(k)]];
  }
  return out;
}

// Forward pass.

struct StepCache {
  struct Layer {
    nn::Mat v_in;
    nn::Mat p;  ///< sender projections, N x h
    nn::LayerNormCache msg_ln;
    nn::Mat msg_z;
    nn::Mat s;  ///< summed hidden message activations
    nn::Mat agg;
    nn::MLP2Cache upd;
  };
  nn::Mat x;
  nn::Mat edge_in;
  nn::MLP2Cache enc;
  std::vector<Layer> layers;
  nn::Mat dec_in;
  nn::MLP2Cache dec;
  bool material = false;
  std::vector<Eigen::Matrix<double, 8, 8>> J;
};

struct GNNStep {
  Field3 eps;
  Field3 sig;
  Eigen::VectorXd kappa;
  std::vector<MatState> states;
  std::vector<Voigt3> sig_hom;
  bool has_stress = false;
};

namespace detail {

inline nn::Mat assemble_input(const GNNModel& m, const GraphBatch& b, const Field3& eps_t,
                              const std::vector<MatState>& states_t, const std::vector<Voigt3>& macro_next) {
  const GNNConfig& c = m.config;
  require(eps_t.rows() == b.n_nodes && static_cast<int>(states_t.size()) == b.n_nodes, ErrorKind::ShapeMismatch,
          "state arrays do not match the batch");
  require(static_cast<int>(macro_next.size()) == b.n_graphs(), ErrorKind::ShapeMismatch,
          "one macro strain per graph expected");
  require(b.K == c.K, ErrorKind::ShapeMismatch,
          "graph features use K=" + std::to_string(b.K) + " but the model expects K=" + std::to_string(c.K));
  nn::Mat x(b.n_nodes, c.input_dim());
  x.leftCols(3) = eps_t;
  if (c.use_kappa_feature) {
    for (int i = 0; i < b.n_nodes; ++i) x(i, 3) = states_t[static_cast<std::size_t>(i)].kappa;
  }
  const int mc = c.macro_column();
  for (int i = 0; i < b.n_nodes; ++i) {
    x.block(i, mc, 1, 3) = macro_next[static_cast<std::size_t>(b.graph_of[static_cast<std::size_t>(i)])].transpose();
  }
  x.rightCols(2 * c.K) = b.geom;
  x = (x.rowwise() - m.stats.in_mean.transpose()).array().rowwise() / m.stats.in_std.transpose().array();
  return x;
}

inline nn::Mat normalized_edges(const GNNModel& m, const GraphBatch& b) {
  nn::Mat e = b.edge_features;
  e = (e.rowwise() - m.stats.edge_mean.transpose()).array().rowwise() / m.stats.edge_std.transpose().array();
  return e;
}

inline nn::Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, std::uint64_t seed) {
  nn::Mat mask(rows, cols);
  std::uint64_t state = seed;
  const double keep = 1.0 - rate;
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      const double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
      mask(r, c) = u < keep ? 1.0 : 0.0;
    }
  }
  return mask;
}

}  // namespace detail

/// Hidden node states after the encoder.
inline nn::Mat encode(const GNNModel& m, const nn::Mat& x_normalized, nn::MLP2Cache* cache = nullptr) {
  return nn::mlp2_forward(m.params, m.encoder, x_normalized, cache);
}

/// One message-passing layer with residual. `edges_normalized` is E x 2.
inline nn::Mat message_pass(const GNNModel& m, int layer, const GraphBatch& b, const nn::Mat& edges_normalized,
                            const nn::Mat& v, Mode mode, std::uint64_t dropout_seed,
                            StepCache::Layer* cache = nullptr) {
  const int h = m.config.hidden;
  require(v.rows() == b.n_nodes && v.cols() == h, ErrorKind::ShapeMismatch, "node states have the wrong shape");
  const GNNModel::MPL& L = m.layers[static_cast<std::size_t>(layer)];
  const auto& P = m.params;
  const auto w1 = P.view(L.message.w1);
  const nn::Mat p = v * w1.bottomRows(h);
  nn::Mat pre = gather_rows(p, b.send);
  if (b.n_edges() > 0) {
    pre.noalias() += edges_normalized * w1.topRows(2);
    pre.rowwise() += P.view(L.message.b1).row(0);
  }
  nn::LayerNormCache ln;
  nn::Mat z = nn::layer_norm(pre, P.view(L.message.g), P.view(L.message.beta), &ln).cwiseMax(0.0);
  // Sum aggregation commutes with the affine second layer.
  const nn::Mat s = scatter_sum(b.recv, z, b.n_nodes);
  nn::Mat agg = s * P.view(L.message.w2);
  agg += b.in_degree * P.view(L.message.b2);

  const auto wu = P.view(L.update.w1);
  nn::Mat hu = v * wu.topRows(h);
  hu.noalias() += agg * wu.bottomRows(h);
  const bool drop = mode == Mode::Train && m.config.dropout > 0.0;
  nn::Mat mask;
  if (drop) mask = detail::dropout_mask(b.n_nodes, h, m.config.dropout, dropout_seed);
  const double keep_scale = 1.0 / (1.0 - m.config.dropout);
  nn::Mat out = v + nn::mlp2_tail(P, L.update, std::move(hu), drop ? &mask : nullptr, keep_scale,
                                  cache ? &cache->upd : nullptr);
  if (cache) {
    cache->v_in = v;
    cache->p = p;
    cache->msg_ln = std::move(ln);
    cache->msg_z = std::move(z);
    cache->s = s;
    cache->agg = std::move(agg);
  }
  return out;
}

/// Per-edge messages of one layer, E x h (used for checks; the forward
/// pass aggregates before the second linear map).
inline nn::Mat edge_messages(const GNNModel& m, int layer, const GraphBatch& b, const nn::Mat& edges_normalized,
                             const nn::Mat& v) {
  const int h = m.config.hidden;
  const GNNModel::MPL& L = m.layers[static_cast<std::size_t>(layer)];
  nn::Mat in(static_cast<Eigen::Index>(b.n_edges()), h + 2);
  in.leftCols(2) = edges_normalized;
  in.rightCols(h) = gather_rows(v, b.send);
  return nn::mlp2_forward(m.params, L.message, in, nullptr);
}

/// Denormalized decoder output; `states` is the final layer output plus the
/// encoded residual.
inline nn::Mat decode(const GNNModel& m, const nn::Mat& states, nn::MLP2Cache* cache = nullptr) {
  nn::Mat r = nn::mlp2_forward(m.params, m.decoder, states, cache);
  return (r.array().rowwise() * m.stats.out_std.transpose().array()).rowwise() + m.stats.out_mean.transpose().array();
}

inline GNNStep step(const GNNModel& m, const GraphBatch& b, const Field3& eps_t, const std::vector<MatState>& states_t,
                    const std::vector<Voigt3>& macro_next, Mode mode, std::uint64_t dropout_seed = 0,
                    StepCache* cache = nullptr) {
  const GNNConfig& c = m.config;
  nn::Mat x = detail::assemble_input(m, b, eps_t, states_t, macro_next);
  const nn::Mat edges = detail::normalized_edges(m, b);
  nn::Mat v0 = encode(m, x, cache ? &cache->enc : nullptr);
  if (cache) cache->layers.resize(static_cast<std::size_t>(c.n_mpl));
  nn::Mat v = v0;
  for (int l = 0; l < c.n_mpl; ++l) {
    v = message_pass(m, l, b, edges, v, mode, derive_seed(dropout_seed, static_cast<std::uint64_t>(l)),
                     cache ? &cache->layers[static_cast<std::size_t>(l)] : nullptr);
  }
  v += v0;
  const nn::Mat out = decode(m, v, cache ? &cache->dec : nullptr);

  GNNStep r;
  r.eps = out.leftCols(3);
  if (c.predict_increment) r.eps += eps_t;
  if (!r.eps.allFinite()) throw Error(ErrorKind::NonFiniteState, "non-finite strain prediction");
  const bool mat = c.material_active(mode);
  r.kappa = Eigen::VectorXd::Zero(b.n_nodes);
  if (mat) {
    r.sig.resize(b.n_nodes, 3);
    r.states.resize(static_cast<std::size_t>(b.n_nodes));
    if (cache) cache->J.resize(static_cast<std::size_t>(b.n_nodes));
    for (int i = 0; i < b.n_nodes; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      if (cache) {
        const MaterialUpdate mu = update_with_gradients(r.eps.row(i).transpose(), states_t[ui], m.material);
        r.sig.row(i) = mu.ss.sig.transpose();
        r.states[ui] = mu.next;
        cache->J[ui] = mu.grad.J;
      } else {
        auto [ss, next] = update_stress(r.eps.row(i).transpose(), states_t[ui], m.material);
        r.sig.row(i) = ss.sig.transpose();
        r.states[ui] = next;
      }
      r.kappa(i) = r.states[ui].kappa;
    }
    r.has_stress = true;
  } else {
    r.states = states_t;
    if (c.stress_head()) {
      r.sig = out.rightCols(3);
      r.has_stress = true;
    } else {
      r.sig = Field3::Zero(b.n_nodes, 3);
    }
  }
  if (r.has_stress) {
    if (!r.sig.allFinite()) throw Error(ErrorKind::NonFiniteState, "non-finite stress prediction");
    r.sig_hom = homogenize_batch(b, r.sig);
  }
  if (cache) {
    cache->x = std::move(x);
    cache->edge_in = edges;
    cache->dec_in = std::move(v);
    cache->material = mat;
  }
  return r;
}

/// Single-graph convenience overload.
inline GNNStep step(const GNNModel& m, const SampleGraph& g, const Field3& eps_t, const std::vector<MatState>& states_t,
                    const Voigt3& macro_next, Mode mode, std::uint64_t dropout_seed = 0) {
  return step(m, make_batch(g), eps_t, states_t, {macro_next}, mode, dropout_seed);
}

struct RolloutResult {
  std::vector<Field3> eps;  ///< per step t = 1..T
  std::vector<Field3> sig;
  std::vector<Eigen::VectorXd> kappa;
  std::vector<std::vector<Voigt3>> sig_hom;  ///< [t][graph]
  std::vector<MatState> final_states;
  bool has_stress = false;

  std::size_t T() const { return eps.size(); }
};

struct RolloutRecord {
  std::vector<StepCache> steps;
  std::vector<std::vector<Voigt3>> macro;
};

inline std::uint64_t step_seed(std::uint64_t rollout_seed, std::size_t t) {
  return derive_seed(rollout_seed, 0x5354455000000000ull + t);
}

/// Autoregressive rollout from a virgin state. All paths in a batch must
/// have the same number of steps.
inline RolloutResult rollout(const GNNModel& m, const GraphBatch& b, const std::vector<const StrainPath*>& paths,
                             Mode mode, std::uint64_t seed = 0, RolloutRecord* record = nullptr) {
  require(static_cast<int>(paths.size()) == b.n_graphs(), ErrorKind::ShapeMismatch, "one path per graph expected");
  const std::size_t T = paths.front()->T();
  for (const StrainPath* p : paths) require(p->T() == T, ErrorKind::ShapeMismatch, "paths differ in length");
  RolloutResult res;
  Field3 eps = Field3::Zero(b.n_nodes, 3);
  std::vector<MatState> states(static_cast<std::size_t>(b.n_nodes));
  if (record) {
    record->steps.assign(T, StepCache{});
    record->macro.assign(T, {});
  }
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<Voigt3> macro;
    macro.reserve(paths.size());
    for (const StrainPath* p : paths) macro.push_back(p->steps[t]);
    GNNStep s;
    try {
      s = step(m, b, eps, states, macro, mode, step_seed(seed, t), record ? &record->steps[t] : nullptr);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NonFiniteState) throw;
      throw Error(ErrorKind::NonFiniteState, std::string(e.what()) + " at step " + std::to_string(t + 1));
    }
    if (record) record->macro[t] = macro;
    eps = s.eps;
    states = std::move(s.states);
    res.has_stress = s.has_stress;
    res.eps.push_back(s.eps);
    res.sig.push_back(std::move(s.sig));
    res.kappa.push_back(std::move(s.kappa));
    res.sig_hom.push_back(std::move(s.sig_hom));
  }
  res.final_states = std::move(states);
  return res;
}

inline RolloutResult rollout(const GNNModel& m, const SampleGraph& g, const StrainPath& path, Mode mode,
                             std::uint64_t seed = 0) {
  return rollout(m, make_batch(g), {&path}, mode, seed);
}

// Reverse pass.

/// Accumulates parameter gradients for one step given the adjoint of the
/// denormalized decoder output; returns the adjoint of the raw input
/// features (before normalization).
inline nn::Mat step_backward(const GNNModel& m, const GraphBatch& b, const StepCache& c, const nn::Mat& d_out,
                             std::vector<double>& grad) {
  const auto& P = m.params;
  const int h = m.config.hidden;
  const nn::Mat d_r = (d_out.array().rowwise() * m.stats.out_std.transpose().array()).matrix();
  const nn::Mat d_dec = nn::mlp2_backward(P, m.decoder, c.dec_in, d_r, c.dec, grad);
  nn::Mat dv = d_dec;
  for (int l = m.config.n_mpl - 1; l >= 0; --l) {
    const GNNModel::MPL& L = m.layers[static_cast<std::size_t>(l)];
    const StepCache::Layer& lc = c.layers[static_cast<std::size_t>(l)];
    // Update network: out = v + F_U([v, agg]).
    const nn::Mat dh = nn::mlp2_backward_tail(P, L.update, dv, lc.upd, grad);
    auto gwu = P.view(L.update.w1, grad);
    const auto wu = P.view(L.update.w1);
    gwu.topRows(h) += lc.v_in.transpose() * dh;
    gwu.bottomRows(h) += lc.agg.transpose() * dh;
    nn::Mat dv_in = dv;
    dv_in.noalias() += dh * wu.topRows(h).transpose();
    const nn::Mat dagg = dh * wu.bottomRows(h).transpose();
    // Message network with aggregation folded in.
    P.view(L.message.w2, grad) += lc.s.transpose() * dagg;
    P.view(L.message.b2, grad).row(0) += b.in_degree.transpose() * dagg;
    const nn::Mat ds = dagg * P.view(L.message.w2).transpose();
    nn::Mat dz = gather_rows(ds, b.recv);
    dz = (lc.msg_z.array() > 0.0).select(dz, 0.0);
    const nn::Mat dpre = nn::layer_norm_backward(dz, lc.msg_ln, P.view(L.message.g), P.view(L.message.g, grad),
                                                 P.view(L.message.beta, grad));
    if (b.n_edges() > 0) {
      P.view(L.message.b1, grad).row(0) += dpre.colwise().sum();
      auto gw1 = P.view(L.message.w1, grad);
      gw1.topRows(2) += c.edge_in.transpose() * dpre;
      const nn::Mat dp = scatter_sum(b.send, dpre, b.n_nodes);
      gw1.bottomRows(h) += lc.v_in.transpose() * dp;
      dv_in.noalias() += dp * P.view(L.message.w1).bottomRows(h).transpose();
    }
    dv = std::move(dv_in);
  }
  dv += d_dec;  // encoded-state residual into the decoder
  nn::Mat dx = nn::mlp2_backward(P, m.encoder, c.x, dv, c.enc, grad);
  dx.array().rowwise() /= m.stats.in_std.transpose().array();
  return dx;
}

/// Output adjoints of a rollout: per-step seeds on predicted strains and
/// stresses (either may be empty to mean zero).
struct RolloutSeeds {
  std::vector<Field3> eps;
  std::vector<Field3> sig;
};

/// Backpropagation through time, including the constitutive update and the
/// autoregressive strain and history feedback. Parameter gradients are
/// accumulated into `grad`; if `d_macro` is given it receives the adjoint of
/// each step's macro strain input, [t][graph].
inline void rollout_backward(const GNNModel& m, const GraphBatch& b, const RolloutRecord& rec,
                             const RolloutSeeds& seeds, std::vector<double>& grad,
                             std::vector<std::vector<Voigt3>>* d_macro = nullptr) {
  const GNNConfig& c = m.config;
  const std::size_t T = rec.steps.size();
  require(grad.size() == m.params.size(), ErrorKind::ShapeMismatch, "gradient buffer has the wrong size");
  require(seeds.eps.empty() || seeds.eps.size() == T, ErrorKind::ShapeMismatch, "strain seeds per step expected");
  require(seeds.sig.empty() || seeds.sig.size() == T, ErrorKind::ShapeMismatch, "stress seeds per step expected");
  const int N = b.n_nodes;
  Field3 g_eps = Field3::Zero(N, 3);
  Eigen::MatrixXd g_p = Eigen::MatrixXd::Zero(N, 4);
  Eigen::VectorXd g_k = Eigen::VectorXd::Zero(N);
  if (d_macro) d_macro->assign(T, std::vector<Voigt3>(static_cast<std::size_t>(b.n_graphs()), Voigt3::Zero()));
  const int mc = c.macro_column();
  for (std::size_t tt = T; tt-- > 0;) {
    const StepCache& sc = rec.steps[tt];
    if (!seeds.eps.empty()) g_eps += seeds.eps[tt];
    nn::Mat d_out = nn::Mat::Zero(N, c.output_dim());
    if (sc.material) {
      Eigen::Matrix<double, 8, 1> a;
      for (int i = 0; i < N; ++i) {
        if (!seeds.sig.empty()) {
          a.head<3>() = seeds.sig[tt].row(i).transpose();
        } else {
          a.head<3>().setZero();
        }
        a.segment<4>(3) = g_p.row(i).transpose();
        a(7) = g_k(i);
        const Eigen::Matrix<double, 8, 1> w = sc.J[static_cast<std::size_t>(i)].transpose() * a;
        g_eps.row(i) += w.head<3>().transpose();
        g_p.row(i) = w.segment<4>(3).transpose();
        g_k(i) = w(7);
      }
    } else if (c.stress_head() && !seeds.sig.empty()) {
      d_out.rightCols(3) = seeds.sig[tt];
    }
    d_out.leftCols(3) = g_eps;
    const nn::Mat dx = step_backward(m, b, sc, d_out, grad);
    if (!dx.allFinite()) {
      throw Error(ErrorKind::NonFiniteGradient, "non-finite gradient at step " + std::to_string(tt + 1));
    }
    if (d_macro) {
      for (int i = 0; i < N; ++i) {
        (*d_macro)[tt][static_cast<std::size_t>(b.graph_of[static_cast<std::size_t>(i)])] +=
            dx.block(i, mc, 1, 3).transpose();
      }
    }
    if (c.predict_increment) {
      g_eps += dx.leftCols(3);
    } else {
      g_eps = dx.leftCols(3);
    }
    if (c.use_kappa_feature) g_k += dx.col(3);
  }
}

}  // namespace microsurr

#endif  // MICROSURR_SURROGATE_HPP
