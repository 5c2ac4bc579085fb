#ifndef MICROSURR_CLI_HPP
#define MICROSURR_CLI_HPP

// Command-line front end: gen-data, train, eval, compare, stiffness, bench.
// Exit codes: 0 success, 1 usage, 2 runtime failure.

#include "dataset.hpp"
#include "evaluate.hpp"
#include "training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace microsurr::cli {

struct RunConfig {
  GNNConfig model = GNNConfig::for_variant(Variant::A);
  TrainConfig train;
  GenConfig generation;
};

namespace detail {

/// Overlays `user` on the serialized defaults, rejecting keys the defaults
/// do not have.
template <class T>
T overlay(const T& base, const nlohmann::json& user, const std::string& section) {
  nlohmann::json j = base;
  require(user.is_object(), ErrorKind::InvalidArgument, "config section '" + section + "' must be an object");
  for (const auto& [k, v] : user.items()) {
    require(j.contains(k), ErrorKind::InvalidArgument, "unknown key '" + section + "." + k + "'");
    j[k] = v;
  }
  return j.get<T>();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j, RunConfig base = {}) {
  require(j.is_object(), ErrorKind::InvalidArgument, "config must be a JSON object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "model") {
        nlohmann::json mv = v;
        if (mv.contains("variant")) {
          // Variant flags follow the variant unless given explicitly.
          GNNConfig fresh = GNNConfig::for_variant(parse_variant(mv.at("variant").get<std::string>()));
          fresh.hidden = base.model.hidden;
          fresh.n_mpl = base.model.n_mpl;
          fresh.dropout = base.model.dropout;
          fresh.K = base.model.K;
          base.model = fresh;
        }
        base.model = detail::overlay(base.model, mv, k);
      } else if (k == "train") {
        base.train = detail::overlay(base.train, v, k);
      } else if (k == "generation") {
        base.generation = detail::overlay(base.generation, v, k);
      } else {
        throw Error(ErrorKind::InvalidArgument, "unknown config section '" + k + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidArgument, std::string("bad config value: ") + e.what());
  }
  return base;
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(binio::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ParseError, path + ": " + e.what());
  }
  return parse_run_config(j, std::move(base));
}

/// "a:b" or a single value.
template <class T>
std::pair<T, T> parse_range(const std::string& s) {
  auto conv = [&](const std::string& x) {
    std::istringstream is(x);
    T v{};
    is >> v;
    require(!is.fail() && is.eof(), ErrorKind::InvalidArgument, "bad range '" + s + "'");
    return v;
  };
  const auto p = s.find(':');
  if (p == std::string::npos) {
    const T v = conv(s);
    return {v, v};
  }
  return {conv(s.substr(0, p)), conv(s.substr(p + 1))};
}

/// Writes to `path`, or stdout for "-" or an empty path.
template <class Fn>
void emit(const std::string& path, Fn fn) {
  if (path.empty() || path == "-") {
    fn(std::cout);
    return;
  }
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::IoError, "cannot write " + path);
  fn(os);
  if (!os) throw Error(ErrorKind::IoError, "write failed for " + path);
}

inline std::vector<TrainingSample> load_samples(const std::string& dir, const GNNModel& m) {
  const Dataset d = load_dataset(dir);
  require(!d.samples.empty(), ErrorKind::InvalidArgument, "dataset " + dir + " holds no samples");
  const MaterialParams& a = d.generation.material;
  const MaterialParams& b = m.material;
  if (nlohmann::json(a) != nlohmann::json(b)) {
    throw Error(ErrorKind::VersionMismatch, "dataset " + dir + " was generated with material " +
                                                nlohmann::json(a).dump() + " but the checkpoint uses " +
                                                nlohmann::json(b).dump());
  }
  return prepare_samples(d.samples, m.config.K);
}

struct Options {
  // gen-data
  std::string out;
  int n = 8;
  std::string voids = "1:3";
  double vf = 0.6;
  double delta_min = 0.05;
  std::string h = "0.05:0.15";
  int n_seg = 32;
  std::string path = "gp";
  int steps = 25;
  double delta = 0.004;
  double gp_variance = 2e-3;
  double gp_length = 8.0;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string config;
  // train
  std::string data, val, log;
  std::string variant = "A";
  double xi = 0.6;
  int mpls = 5, hidden = 512, K = 9, epochs = 200, batch = 8, warmup = 10;
  double dropout = 0.1, lr = 2e-4, clip = 1.0;
  bool quiet = false;
  // eval and friends
  std::string ckpt;
  std::vector<std::string> ckpts;
  int train_steps = 25;
  std::vector<int> void_counts{1, 2, 4, 9};
  int probes = 5;
  double probe_scale = 1e-6;
  bool include_zero = false;
  std::vector<int> sizes{100, 400, 1600};
  int reps = 5;
  int bench_voids = 1;
  bool no_stiffness = false;
  int st_n = 50, st_n_seg = 24, bench_n_seg = 0;
  double st_vf = 0.3, st_h = 0.1, bench_vf = 0.3;
};

inline int threads_of(const Options& o) { return o.threads > 0 ? o.threads : worker_count(); }

inline int cmd_gen_data(const Options& o, const CLI::App& sub) {
  RunConfig rc;
  if (!o.config.empty()) rc = load_run_config(o.config);
  GenConfig& g = rc.generation;
  if (sub.count("--n")) g.n_samples = o.n;
  if (sub.count("--voids")) std::tie(g.voids_min, g.voids_max) = parse_range<int>(o.voids);
  if (sub.count("--vf")) g.vf = o.vf;
  if (sub.count("--delta-min")) g.delta_min = o.delta_min;
  if (sub.count("--mesh-size")) std::tie(g.h_min, g.h_max) = parse_range<double>(o.h);
  if (sub.count("--n-seg")) g.n_seg = o.n_seg;
  if (sub.count("--path")) g.path = parse_path_kind(o.path);
  if (sub.count("--steps")) g.steps = o.steps;
  if (sub.count("--delta")) g.delta = o.delta;
  if (sub.count("--gp-variance")) g.gp.variance = o.gp_variance;
  if (sub.count("--gp-length")) g.gp.length_scale = o.gp_length;
  if (sub.count("--seed")) g.seed = o.seed;
  g.validate();
  const GenerationReport r = generate_dataset(g, o.out, threads_of(o));
  std::cerr << "wrote " << r.written << " of " << g.n_samples << " samples to " << o.out << '\n';
  for (const auto& [i, what] : r.failures) std::cerr << "  sample " << i << " failed: " << what << '\n';
  return r.written > 0 || g.n_samples == 0 ? 0 : 2;
}

inline int cmd_train(const Options& o, const CLI::App& sub) {
  RunConfig rc;
  if (!o.config.empty()) rc = load_run_config(o.config);
  GNNConfig& g = rc.model;
  if (sub.count("--variant")) {
    GNNConfig fresh = GNNConfig::for_variant(parse_variant(o.variant));
    fresh.hidden = g.hidden;
    fresh.n_mpl = g.n_mpl;
    fresh.dropout = g.dropout;
    fresh.K = g.K;
    g = fresh;
  }
  if (sub.count("--hidden")) g.hidden = o.hidden;
  if (sub.count("--mpls")) g.n_mpl = o.mpls;
  if (sub.count("--dropout")) g.dropout = o.dropout;
  if (sub.count("--K")) g.K = o.K;
  const double xi_req = sub.count("--xi") ? o.xi : g.xi;
  if (g.variant == Variant::D && xi_req != 0.0) {
    std::cerr << "warning: variant D trains on strains only; xi set to 0\n";
    g.xi = 0.0;
  } else {
    g.xi = xi_req;
  }
  TrainConfig& t = rc.train;
  if (sub.count("--epochs")) t.epochs = o.epochs;
  if (sub.count("--batch")) t.batch_size = o.batch;
  if (sub.count("--lr")) t.lr_peak = o.lr;
  if (sub.count("--warmup")) t.warmup_epochs = o.warmup;
  if (sub.count("--clip")) t.clip_norm = o.clip;
  if (sub.count("--seed")) t.seed = o.seed;
  g.validate();
  t.validate();

  const Dataset dtrain = load_dataset(o.data);
  const Dataset dval = load_dataset(o.val);
  require(!dtrain.samples.empty() && !dval.samples.empty(), ErrorKind::InvalidArgument, "empty dataset");
  const MaterialParams material = dtrain.generation.material;
  const auto train = prepare_samples(dtrain.samples, g.K);
  const auto val = prepare_samples(dval.samples, g.K);
  const std::string log_path = o.log.empty() ? o.out + ".log.csv" : o.log;
  std::ofstream log(log_path);
  if (!log) throw Error(ErrorKind::IoError, "cannot write " + log_path);
  log << kLogHeader << '\n';
  const FitResult r = fit(train, val, g, t, material, [&](const EpochLog& e) {
    log << format_log_row(e) << '\n' << std::flush;
    if (!o.quiet) std::cerr << format_log_row(e) << '\n';
  });
  save_checkpoint(r.best, o.out);
  std::cerr << "best epoch " << r.best_epoch << ", val L_comb " << r.log[static_cast<std::size_t>(r.best_epoch)].val_L_comb
            << "; checkpoint " << o.out << '\n';
  return 0;
}

inline int cmd_eval(const Options& o) {
  const GNNModel m = load_checkpoint(o.ckpt);
  const auto data = load_samples(o.data, m);
  const Metrics met = evaluate_dataset(m, data, threads_of(o));
  emit(o.out, [&](std::ostream& os) { write_metrics_csv(os, met); });
  const LossReport l = prediction_losses(predict_all(m, data, threads_of(o)), [&] {
    std::vector<Prediction> t;
    for (const auto& s : data) t.push_back(reference_of(s));
    return t;
  }());
  std::cerr << "L_eps " << l.L_eps << "  L_sig " << l.L_sig << "  L_hom " << l.L_hom << '\n';
  if (static_cast<int>(met.T()) > o.train_steps && o.train_steps >= 1) {
    std::cerr << "error growth (step " << met.T() << " / step " << o.train_steps << "): "
              << met.eps_mean.back() / met.eps_mean[static_cast<std::size_t>(o.train_steps - 1)] << '\n';
  }
  return 0;
}

inline int cmd_compare(const Options& o) {
  std::vector<std::pair<std::string, GNNModel>> models;
  for (const std::string& entry : o.ckpts) {
    const auto eq = entry.find('=');
    const std::string name = eq == std::string::npos ? entry : entry.substr(0, eq);
    const std::string path = eq == std::string::npos ? entry : entry.substr(eq + 1);
    models.emplace_back(name, load_checkpoint(path));
  }
  const auto data = load_samples(o.data, models.front().second);
  std::vector<std::pair<std::string, const GNNModel*>> refs;
  for (const auto& [n, m] : models) {
    require(m.config.K == models.front().second.config.K, ErrorKind::VersionMismatch,
            "checkpoints disagree on the geometric feature count");
    refs.emplace_back(n, &m);
  }
  const auto rows = unloading_comparison(refs, data, threads_of(o));
  emit(o.out, [&](std::ostream& os) { write_losses_csv(os, rows); });
  return 0;
}

inline int cmd_stiffness(const Options& o) {
  std::optional<GNNModel> m;
  if (!o.ckpt.empty()) m = load_checkpoint(o.ckpt);
  ScalingOptions so;
  so.sizes = o.void_counts;
  so.samples_per_size = o.st_n;
  so.vf = o.st_vf;
  so.delta_min = o.delta_min;
  so.h = o.st_h;
  so.n_seg = o.st_n_seg;
  so.stiffness.n_probes = o.probes;
  so.stiffness.probe_scale = o.probe_scale;
  so.stiffness.include_zero = o.include_zero;
  so.stiffness.validate();
  so.seed = o.seed;
  so.threads = threads_of(o);
  const auto rows = scaling_study(m ? &*m : nullptr, so);
  emit(o.out, [&](std::ostream& os) { write_scaling_csv(os, rows); });
  return 0;
}

inline int cmd_bench(const Options& o) {
  const GNNModel m = load_checkpoint(o.ckpt);
  TimingOptions to;
  to.sizes = o.sizes;
  to.repetitions = o.reps;
  to.n_voids = o.bench_voids;
  to.vf = o.bench_vf;
  to.n_seg = o.bench_n_seg;
  to.steps = o.steps;
  to.with_stiffness = !o.no_stiffness;
  to.seed = o.seed;
  const TimingReport r = timing_benchmark(m, to);
  emit(o.out, [&](std::ostream& os) { write_timing_csv(os, r); });
  std::cerr << "slopes: fe " << r.fe_slope << ", surrogate " << r.sur_slope << '\n';
  return 0;
}

inline int run(int argc, const char* const* argv) {
  tune_allocator();
  CLI::App app{"Microstructure data generation and graph surrogate training"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "microsurr 1.0");
  Options o;

  auto common = [&](CLI::App* s) {
    s->add_option("--seed", o.seed, "master seed");
    s->add_option("--threads", o.threads, "worker threads (default MICROSURR_THREADS or all cores)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate FE ground-truth samples");
  gen->add_option("--out", o.out, "output directory")->required();
  gen->add_option("--n", o.n, "number of samples");
  gen->add_option("--voids", o.voids, "void count or range a:b");
  gen->add_option("--vf", o.vf, "void area fraction");
  gen->add_option("--delta-min", o.delta_min, "minimum gap between voids");
  gen->add_option("--mesh-size", o.h, "element size or range a:b, relative to the cell");
  gen->add_option("--n-seg", o.n_seg, "segments per void boundary");
  gen->add_option("--path,--path-type", o.path, "gp, monotonic or unload")
      ->check(CLI::IsMember({"gp", "monotonic", "unload"}));
  gen->add_option("--steps", o.steps, "time steps per path");
  gen->add_option("--delta", o.delta, "strain increment for monotonic and unloading paths");
  gen->add_option("--gp-variance", o.gp_variance, "GP kernel variance");
  gen->add_option("--gp-length", o.gp_length, "GP kernel length scale in steps");
  gen->add_option("--config", o.config, "JSON run configuration");
  common(gen);

  auto* train = app.add_subcommand("train", "train a surrogate");
  train->add_option("--data", o.data, "training dataset directory")->required();
  train->add_option("--val", o.val, "validation dataset directory")->required();
  train->add_option("--out", o.out, "checkpoint path")->required();
  train->add_option("--log", o.log, "CSV log path (default <out>.log.csv)");
  train->add_option("--variant", o.variant, "A, B, C or D")->check(CLI::IsMember({"A", "B", "C", "D", "a", "b", "c", "d"}));
  train->add_option("--xi", o.xi, "stress weight of the combined loss");
  train->add_option("--mpls", o.mpls, "message passing layers");
  train->add_option("--hidden", o.hidden, "hidden width");
  train->add_option("--dropout", o.dropout, "dropout rate");
  train->add_option("--K", o.K, "nearest voids in the node features");
  train->add_option("--epochs", o.epochs, "epochs");
  train->add_option("--batch", o.batch, "batch size");
  train->add_option("--lr", o.lr, "peak learning rate");
  train->add_option("--warmup", o.warmup, "warmup epochs");
  train->add_option("--clip", o.clip, "gradient norm clip");
  train->add_option("--config", o.config, "JSON run configuration");
  train->add_flag("--quiet", o.quiet, "no per-epoch output");
  common(train);

  auto* eval = app.add_subcommand("eval", "per-step error metrics on a dataset");
  eval->add_option("--ckpt", o.ckpt, "checkpoint")->required();
  eval->add_option("--data", o.data, "dataset directory")->required();
  eval->add_option("--out", o.out, "CSV path or -");
  eval->add_option("--train-steps", o.train_steps, "training horizon for the growth diagnostic");
  common(eval);

  auto* cmp = app.add_subcommand("compare", "losses of several checkpoints on one dataset");
  cmp->add_option("--ckpt", o.ckpts, "name=path, repeatable")->required();
  cmp->add_option("--data", o.data, "dataset directory")->required();
  cmp->add_option("--out", o.out, "CSV path or -");
  common(cmp);

  auto* st = app.add_subcommand("stiffness", "FE and surrogate stiffness against void count");
  st->add_option("--ckpt", o.ckpt, "checkpoint (FE only when omitted)");
  st->add_option("--voids", o.void_counts, "void counts")->delimiter(',');
  st->add_option("--n", o.st_n, "samples per void count")->capture_default_str();
  st->add_option("--vf", o.st_vf, "void area fraction")->capture_default_str();
  st->add_option("--delta-min", o.delta_min, "minimum gap between voids");
  st->add_option("--mesh-size", o.st_h, "element size")->capture_default_str();
  st->add_option("--n-seg", o.st_n_seg, "segments per void boundary")->capture_default_str();
  st->add_option("--probes", o.probes, "random probes per cell");
  st->add_option("--probe-scale", o.probe_scale, "probe magnitude");
  st->add_flag("--include-zero", o.include_zero, "also probe at zero strain");
  st->add_option("--out", o.out, "CSV path or -");
  common(st);

  auto* bench = app.add_subcommand("bench", "FE versus surrogate wall time");
  bench->add_option("--ckpt", o.ckpt, "checkpoint")->required();
  bench->add_option("--sizes", o.sizes, "target element counts")->delimiter(',');
  bench->add_option("--reps", o.reps, "repetitions per size");
  bench->add_option("--steps", o.steps, "path length");
  bench->add_option("--voids", o.bench_voids, "void count");
  bench->add_option("--vf", o.bench_vf, "void area fraction")->capture_default_str();
  bench->add_option("--n-seg", o.bench_n_seg, "segments per void boundary (0: from the element size)")->capture_default_str();
  bench->add_flag("--no-stiffness", o.no_stiffness, "skip the tangent timing");
  bench->add_option("--out", o.out, "CSV path or -");
  common(bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    if (*gen) return cmd_gen_data(o, *gen);
    if (*train) return cmd_train(o, *train);
    if (*eval) return cmd_eval(o);
    if (*cmp) return cmd_compare(o);
    if (*st) return cmd_stiffness(o);
    if (*bench) return cmd_bench(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace microsurr::cli

#endif  // MICROSURR_CLI_HPP
