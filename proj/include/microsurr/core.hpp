#ifndef MICROSURR_CORE_HPP
#define MICROSURR_CORE_HPP

#include <Eigen/Dense>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace microsurr {

/// Failure categories raised across the toolkit. Each maps to a named error
/// condition of one of the public operations.
enum class ErrorKind {
  InvalidArgument,
  PlacementFailed,
  MeshingFailed,
  ParseError,
  NonPeriodicBoundary,
  DisconnectedGraph,
  InsufficientVoidImages,
  ReturnMapDiverged,
  UnpairedBoundaryNode,
  NewtonDiverged,
  CholeskyFailed,
  ShapeMismatch,
  NonFiniteState,
  NonFiniteGradient,
  VersionMismatch,
  IoError,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::PlacementFailed: return "PlacementFailed";
    case ErrorKind::MeshingFailed: return "MeshingFailed";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::NonPeriodicBoundary: return "NonPeriodicBoundary";
    case ErrorKind::DisconnectedGraph: return "DisconnectedGraph";
    case ErrorKind::InsufficientVoidImages: return "InsufficientVoidImages";
    case ErrorKind::ReturnMapDiverged: return "ReturnMapDiverged";
    case ErrorKind::UnpairedBoundaryNode: return "UnpairedBoundaryNode";
    case ErrorKind::NewtonDiverged: return "NewtonDiverged";
    case ErrorKind::CholeskyFailed: return "CholeskyFailed";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteState: return "NonFiniteState";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

using Vec2 = Eigen::Vector2d;
/// In-plane Voigt vector (xx, yy, xy). Strains carry engineering shear.
using Voigt3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
/// One Voigt 3-vector per row (element or graph node).
using Field3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Rng = std::mt19937_64;

inline constexpr double kPi = 3.14159265358979323846;

/// splitmix64 step; used to derive independent per-sample seeds from a master seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Seed for item `index` under `master`: the (index+1)-th splitmix64 output
/// of a stream started at `master`.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t state = master + 0x9E3779B97F4A7C15ull * index;
  return splitmix64(state);
}

inline bool all_finite(const Eigen::Ref<const Eigen::MatrixXd>& m) { return m.allFinite(); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

/// Raises glibc's mmap and trim thresholds.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace microsurr

#endif  // MICROSURR_CORE_HPP
