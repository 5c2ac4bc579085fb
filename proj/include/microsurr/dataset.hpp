#ifndef MICROSURR_DATASET_HPP
#define MICROSURR_DATASET_HPP

// Ground-truth samples: generation by FE along a strain path, a binary record
// format and a JSON manifest per dataset directory.

#include "binio.hpp"
#include "core.hpp"
#include "fesolver.hpp"
#include "loadgen.hpp"
#include "material.hpp"
#include "microgen.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

namespace microsurr {

struct SampleRecord {
  PeriodicMesh mesh;
  VoidSet voids;
  StrainPath path;
  MaterialParams material;
  std::uint64_t seed = 0;
  double target_h = 0.0;
  std::vector<Field3> eps;  ///< per step, E x 3
  std::vector<Field3> sig;
  std::vector<Eigen::VectorXd> kappa;
  std::vector<Voigt3> sig_hom;

  std::size_t T() const { return eps.size(); }
  std::size_t num_elements() const { return mesh.num_elements(); }
};

inline constexpr std::string_view kSampleMagic = "MSSAMPLE";
inline constexpr std::uint32_t kSampleVersion = 1;

inline std::string encode_sample(const SampleRecord& r) {
  const std::size_t T = r.T(), E = r.num_elements();
  require(r.sig.size() == T && r.kappa.size() == T && r.sig_hom.size() == T && r.path.T() == T,
          ErrorKind::ShapeMismatch, "sample arrays differ in step count");
  nlohmann::json head;
  head["seed"] = r.seed;
  head["target_h"] = r.target_h;
  head["material"] = r.material;
  head["cell_size"] = r.voids.cell_size;
  head["radius"] = r.voids.radius;
  head["target_vf"] = r.voids.target_vf;
  nlohmann::json centers = nlohmann::json::array();
  for (const Vec2& c : r.voids.centers) centers.push_back({c.x(), c.y()});
  head["centers"] = centers;
  head["direction"] = {r.path.direction(0), r.path.direction(1), r.path.direction(2)};
  head["T"] = T;
  head["elements"] = E;
  binio::Writer w;
  w.put_bytes(kSampleMagic);
  w.put_u32(kSampleVersion);
  w.put_string(head.dump());
  w.put_string(mesh_to_string(r.mesh));
  w.put_u64(T);
  w.put_u64(E);
  for (double m : r.path.magnitudes) w.put_f64(m);
  for (std::size_t t = 0; t < T; ++t) {
    require(static_cast<std::size_t>(r.eps[t].rows()) == E && static_cast<std::size_t>(r.sig[t].rows()) == E &&
                static_cast<std::size_t>(r.kappa[t].size()) == E,
            ErrorKind::ShapeMismatch, "field length differs from element count");
  }
  for (const auto& f : r.eps) w.put_matrix(f);
  for (const auto& f : r.sig) w.put_matrix(f);
  for (const auto& k : r.kappa) w.put_matrix(k);
  for (const auto& s : r.sig_hom) w.put_matrix(s);
  return w.str();
}

inline SampleRecord decode_sample(std::string_view data) {
  binio::Reader rd(data, "sample record");
  if (rd.get_bytes(kSampleMagic.size()) != kSampleMagic) throw Error(ErrorKind::ParseError, "not a sample record");
  const std::uint32_t ver = rd.get_u32();
  if (ver != kSampleVersion) {
    throw Error(ErrorKind::VersionMismatch, "sample record version " + std::to_string(ver));
  }
  SampleRecord r;
  nlohmann::json head;
  try {
    head = nlohmann::json::parse(rd.get_string());
    r.seed = head.at("seed").get<std::uint64_t>();
    r.target_h = head.at("target_h").get<double>();
    r.material = head.at("material").get<MaterialParams>();
    r.voids.cell_size = head.at("cell_size").get<double>();
    r.voids.radius = head.at("radius").get<double>();
    r.voids.target_vf = head.at("target_vf").get<double>();
    for (const auto& c : head.at("centers")) r.voids.centers.emplace_back(c.at(0).get<double>(), c.at(1).get<double>());
    r.path.direction = Voigt3(head.at("direction").at(0).get<double>(), head.at("direction").at(1).get<double>(),
                              head.at("direction").at(2).get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("sample header: ") + e.what());
  }
  r.mesh = mesh_from_string(rd.get_string());
  const std::uint64_t T = rd.get_u64(), E = rd.get_u64();
  if (T != head.value("T", std::uint64_t{0}) || E != head.value("elements", std::uint64_t{0}) ||
      E != r.mesh.num_elements()) {
    throw Error(ErrorKind::ParseError, "sample header lengths are inconsistent");
  }
  const std::size_t need = (T + T * E * 7 + T * 3) * sizeof(double);
  if (rd.remaining() != need) throw Error(ErrorKind::ParseError, "sample payload has the wrong length");
  std::vector<double> mags(T);
  for (auto& m : mags) m = rd.get_f64();
  r.path = make_path(r.path.direction, std::move(mags));
  const auto Ei = static_cast<Eigen::Index>(E);
  r.eps.assign(T, Field3(Ei, 3));
  r.sig.assign(T, Field3(Ei, 3));
  r.kappa.assign(T, Eigen::VectorXd(Ei));
  r.sig_hom.assign(T, Voigt3::Zero());
  for (auto& f : r.eps) rd.get_matrix(f);
  for (auto& f : r.sig) rd.get_matrix(f);
  for (auto& k : r.kappa) rd.get_matrix(k);
  for (auto& s : r.sig_hom) rd.get_matrix(s);
  return r;
}

inline void write_sample(const SampleRecord& r, const std::string& path) { binio::write_file(path, encode_sample(r)); }
inline SampleRecord read_sample(const std::string& path) { return decode_sample(binio::read_file(path)); }

// Generation.

struct GenConfig {
  int n_samples = 8;
  int voids_min = 1;
  int voids_max = 3;
  double vf = 0.6;
  double delta_min = 0.05;
  double h_min = 0.05;
  double h_max = 0.15;
  int n_seg = 32;
  PathKind path = PathKind::GP;
  int steps = 25;
  double delta = 0.004;
  GPConfig gp;
  MaterialParams material;
  double cell_size = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    require(n_samples >= 0, ErrorKind::InvalidArgument, "sample count must be non-negative");
    require(voids_min >= 0 && voids_min <= voids_max, ErrorKind::InvalidArgument, "void range must satisfy 0 <= min <= max");
    require(vf >= 0.0 && vf < 1.0, ErrorKind::InvalidArgument, "void fraction must lie in [0, 1)");
    require(h_min > 0.0 && h_min <= h_max, ErrorKind::InvalidArgument, "element size range must satisfy 0 < min <= max");
    require(steps >= 1, ErrorKind::InvalidArgument, "step count must be positive");
    require(delta > 0.0, ErrorKind::InvalidArgument, "strain increment must be positive");
    require(cell_size > 0.0, ErrorKind::InvalidArgument, "cell size must be positive");
    material.validate();
    GPConfig g = gp;
    g.T = steps;
    if (path == PathKind::GP) g.validate();
  }
};

inline void to_json(nlohmann::json& j, const GenConfig& c) {
  j = nlohmann::json{{"n_samples", c.n_samples},
                     {"voids_min", c.voids_min},
                     {"voids_max", c.voids_max},
                     {"vf", c.vf},
                     {"delta_min", c.delta_min},
                     {"h_min", c.h_min},
                     {"h_max", c.h_max},
                     {"n_seg", c.n_seg},
                     {"path", std::string(to_string(c.path))},
                     {"steps", c.steps},
                     {"delta", c.delta},
                     {"gp_variance", c.gp.variance},
                     {"gp_length_scale", c.gp.length_scale},
                     {"material", c.material},
                     {"cell_size", c.cell_size},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, GenConfig& c) {
  j.at("n_samples").get_to(c.n_samples);
  j.at("voids_min").get_to(c.voids_min);
  j.at("voids_max").get_to(c.voids_max);
  j.at("vf").get_to(c.vf);
  j.at("delta_min").get_to(c.delta_min);
  j.at("h_min").get_to(c.h_min);
  j.at("h_max").get_to(c.h_max);
  j.at("n_seg").get_to(c.n_seg);
  c.path = parse_path_kind(j.at("path").get<std::string>());
  j.at("steps").get_to(c.steps);
  j.at("delta").get_to(c.delta);
  j.at("gp_variance").get_to(c.gp.variance);
  j.at("gp_length_scale").get_to(c.gp.length_scale);
  j.at("material").get_to(c.material);
  j.at("cell_size").get_to(c.cell_size);
  j.at("seed").get_to(c.seed);
}

inline StrainPath make_strain_path(const GenConfig& cfg, Rng& rng) {
  switch (cfg.path) {
    case PathKind::Monotonic: return monotonic_path(cfg.steps, cfg.delta, rng);
    case PathKind::GP: {
      GPConfig g = cfg.gp;
      g.T = cfg.steps;
      return gp_path(g, rng);
    }
    case PathKind::Unload: return unloading_path(rng, cfg.delta);
  }
  throw Error(ErrorKind::InvalidArgument, "unknown path kind");
}

/// Geometry of one sample: void count and element size drawn from the
/// configured ranges.
inline std::pair<VoidSet, PeriodicMesh> generate_geometry(const GenConfig& cfg, Rng& rng, double* h_out = nullptr) {
  std::uniform_int_distribution<int> nv(cfg.voids_min, cfg.voids_max);
  std::uniform_real_distribution<double> uh(cfg.h_min, cfg.h_max);
  const int n = nv(rng);
  const double h = uh(rng) * cfg.cell_size;
  VoidSamplingOptions vo;
  vo.delta_min = cfg.delta_min;
  vo.allow_voidless = n == 0;
  VoidSet voids = sample_voids(n, n == 0 ? 0.0 : cfg.vf, cfg.cell_size, rng, vo);
  MeshOptions mo;
  mo.seed = rng();
  PeriodicMesh mesh = triangulate(voids, h, cfg.n_seg, mo);
  if (h_out) *h_out = h;
  return {std::move(voids), std::move(mesh)};
}

inline SampleRecord generate_sample(const GenConfig& cfg, std::uint64_t sample_seed) {
  Rng rng(sample_seed);
  SampleRecord r;
  r.seed = sample_seed;
  r.material = cfg.material;
  std::tie(r.voids, r.mesh) = generate_geometry(cfg, rng, &r.target_h);
  r.path = make_strain_path(cfg, rng);
  const PathRun run = run_path(r.mesh, r.material, r.path);
  for (const StepResult& s : run.steps) {
    r.eps.push_back(s.eps_field);
    r.sig.push_back(s.sig_field);
    r.kappa.push_back(s.kappa_field);
    r.sig_hom.push_back(s.sig_hom);
  }
  return r;
}

/// Worker count: MICROSURR_THREADS if set, else hardware concurrency.
inline int worker_count() {
  if (const char* env = std::getenv("MICROSURR_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <class Fn>
void parallel_for(int n, int threads, Fn fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline constexpr int kManifestSchema = 1;

inline std::string sample_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05d.bin", index);
  return buf;
}

struct GenerationReport {
  int written = 0;
  std::vector<std::pair<int, std::string>> failures;
};

/// Writes one record per sample and `manifest.json` into `dir`. Samples that
/// fail are skipped and listed in the manifest.
inline GenerationReport generate_dataset(const GenConfig& cfg, const std::string& dir, int threads = worker_count()) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + dir + ": " + ec.message());
  std::vector<std::optional<std::string>> error(static_cast<std::size_t>(cfg.n_samples));
  parallel_for(cfg.n_samples, threads, [&](int i) {
    const std::uint64_t s = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    try {
      write_sample(generate_sample(cfg, s), (std::filesystem::path(dir) / sample_file_name(i)).string());
    } catch (const Error& e) {
      error[static_cast<std::size_t>(i)] = e.what();
    }
  });
  nlohmann::json man;
  man["schema_version"] = kManifestSchema;
  man["generation"] = cfg;
  man["material"] = cfg.material;
  nlohmann::json samples = nlohmann::json::array(), failures = nlohmann::json::array();
  GenerationReport rep;
  for (int i = 0; i < cfg.n_samples; ++i) {
    const std::uint64_t s = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    if (error[static_cast<std::size_t>(i)]) {
      failures.push_back({{"index", i}, {"seed", s}, {"error", *error[static_cast<std::size_t>(i)]}});
      rep.failures.emplace_back(i, *error[static_cast<std::size_t>(i)]);
    } else {
      samples.push_back({{"index", i}, {"seed", s}, {"file", sample_file_name(i)}});
      ++rep.written;
    }
  }
  man["counts"] = {{"requested", cfg.n_samples}, {"written", rep.written}, {"failed", rep.failures.size()}};
  man["partial"] = !rep.failures.empty();
  man["samples"] = samples;
  man["failures"] = failures;
  binio::write_file((std::filesystem::path(dir) / "manifest.json").string(), man.dump(2) + "\n");
  return rep;
}

struct Dataset {
  GenConfig generation;
  nlohmann::json manifest;
  std::vector<SampleRecord> samples;
};

inline Dataset load_dataset(const std::string& dir) {
  const std::string man_path = (std::filesystem::path(dir) / "manifest.json").string();
  Dataset d;
  try {
    d.manifest = nlohmann::json::parse(binio::read_file(man_path));
    if (d.manifest.at("schema_version").get<int>() != kManifestSchema) {
      throw Error(ErrorKind::VersionMismatch, "unsupported manifest schema in " + man_path);
    }
    d.generation = d.manifest.at("generation").get<GenConfig>();
    for (const auto& s : d.manifest.at("samples")) {
      d.samples.push_back(read_sample((std::filesystem::path(dir) / s.at("file").get<std::string>()).string()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ParseError, man_path + ": " + e.what());
  }
  return d;
}

}  // namespace microsurr

#endif  // MICROSURR_DATASET_HPP
