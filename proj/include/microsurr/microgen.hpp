#ifndef MICROSURR_MICROGEN_HPP
#define MICROSURR_MICROGEN_HPP

// Periodic voided microstructures: void placement, triangulation into
// constant-strain triangles, mesh file exchange, the integration-point dual
// graph and the void-distance node features.

#include "core.hpp"
#include "delaunay.hpp"
#include "predicates.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace microsurr {

struct VoidSet {
  double cell_size = 1.0;
  std::vector<Vec2> centers;
  double radius = 0.0;
  double target_vf = 0.0;

  std::size_t count() const { return centers.size(); }
};

struct VoidSamplingOptions {
  double delta_min = 0.05;  ///< minimum surface gap, in units of L
  int max_attempts = 10000;
  bool allow_voidless = false;
};

namespace detail {

/// Signed offset wrapped into [-L/2, L/2).
inline double wrap_half(double d, double L) {
  d -= L * std::floor(d / L + 0.5);
  return d;
}

inline Vec2 periodic_delta(const Vec2& a, const Vec2& b, double L) {
  return Vec2(wrap_half(a.x() - b.x(), L), wrap_half(a.y() - b.y(), L));
}

inline double wrap_into_cell(double x, double L) {
  double w = x - L * std::floor(x / L);
  if (w >= L) w = 0.0;
  return w;
}

}  // namespace detail

/// Periodic distance between two points under the 9-image metric.
inline double periodic_distance(const Vec2& a, const Vec2& b, double L) {
  return detail::periodic_delta(a, b, L).norm();
}

/// Random void placement at fixed volume fraction. Centers are drawn by
/// rejection sampling under the periodic minimum-gap rule; the accepted
/// configuration is then shifted by a random periodic translation so that
/// the cell corner lies in the matrix and no void grazes a cell edge.
inline VoidSet sample_voids(int n_voids, double vf, double L, Rng& rng,
                            const VoidSamplingOptions& opt = {}) {
  VoidSet vs;
  vs.cell_size = L;
  vs.target_vf = vf;
  require(L > 0.0, ErrorKind::InvalidArgument, "cell size must be positive");
  require(vf >= 0.0 && vf < 1.0, ErrorKind::InvalidArgument, "volume fraction must lie in [0,1)");
  if (vf == 0.0) {
    require(opt.allow_voidless, ErrorKind::InvalidArgument, "zero volume fraction requires allow_voidless");
    return vs;
  }
  require(n_voids >= 1, ErrorKind::InvalidArgument, "at least one void required");
  const double r = L * std::sqrt(vf / (n_voids * kPi));
  vs.radius = r;
  const double gap = opt.delta_min * L;
  const double min_center_dist = 2.0 * r + gap;
  if (min_center_dist > L) {
    throw Error(ErrorKind::PlacementFailed, "void cannot clear its own periodic image");
  }

  std::uniform_real_distribution<double> uni(0.0, L);
  int attempts = 0;
  const int restart_after = 500;
  int since_progress = 0;
  while (static_cast<int>(vs.centers.size()) < n_voids) {
    if (attempts++ >= opt.max_attempts) {
      throw Error(ErrorKind::PlacementFailed, "rejection sampling exhausted " +
                                                  std::to_string(opt.max_attempts) + " attempts");
    }
    const Vec2 c(uni(rng), uni(rng));
    bool ok = true;
    for (const Vec2& o : vs.centers) {
      if (periodic_distance(c, o, L) < min_center_dist) {
        ok = false;
        break;
      }
    }
    if (ok) {
      vs.centers.push_back(c);
      since_progress = 0;
    } else if (++since_progress >= restart_after) {
      vs.centers.clear();
      since_progress = 0;
    }
  }

  // Periodic shift: corner in the matrix, no near-tangent void/edge contact.
  const double clearance = 0.5 * gap;
  for (;;) {
    if (attempts++ >= opt.max_attempts) {
      throw Error(ErrorKind::PlacementFailed, "no admissible periodic shift found");
    }
    const Vec2 shift(uni(rng), uni(rng));
    bool ok = true;
    for (const Vec2& c : vs.centers) {
      const Vec2 d = detail::periodic_delta(c, shift, L);
      if (d.norm() - r < clearance) ok = false;
      if (std::abs(std::abs(d.x()) - r) < clearance) ok = false;
      if (std::abs(std::abs(d.y()) - r) < clearance) ok = false;
      if (!ok) break;
    }
    if (!ok) continue;
    for (Vec2& c : vs.centers) {
      c = Vec2(detail::wrap_into_cell(c.x() - shift.x(), L), detail::wrap_into_cell(c.y() - shift.y(), L));
    }
    break;
  }
  return vs;
}

/// Periodic partner of a boundary node.
struct BoundaryPair {
  int slave = -1;
  int master = -1;
  Vec2 offset = Vec2::Zero();  ///< x_slave - x_master, (L,0) or (0,L)
};

struct PeriodicMesh {
  double cell_size = 1.0;
  std::vector<Vec2> node_coords;
  std::vector<std::array<int, 3>> triangles;
  std::vector<double> element_areas;
  std::vector<Vec2> element_centroids;
  std::vector<BoundaryPair> boundary_pairs;
  std::array<int, 4> corner_nodes{-1, -1, -1, -1};  ///< (0,0), (L,0), (L,L), (0,L)
  double void_area = 0.0;  ///< polygonal void area inside the cell
  VoidSet voids;

  std::size_t num_nodes() const { return node_coords.size(); }
  std::size_t num_elements() const { return triangles.size(); }
  double matrix_area() const {
    double a = 0.0;
    for (double e : element_areas) a += e;
    return a;
  }
};

namespace detail {

inline void finalize_elements(PeriodicMesh& m) {
  m.element_areas.resize(m.triangles.size());
  m.element_centroids.resize(m.triangles.size());
  for (std::size_t e = 0; e < m.triangles.size(); ++e) {
    auto& t = m.triangles[e];
    double a = geom::signed_area(m.node_coords[t[0]], m.node_coords[t[1]], m.node_coords[t[2]]);
    if (a < 0.0) {
      std::swap(t[1], t[2]);
      a = -a;
    }
    m.element_areas[e] = a;
    m.element_centroids[e] = (m.node_coords[t[0]] + m.node_coords[t[1]] + m.node_coords[t[2]]) / 3.0;
  }
}

/// Pair boundary nodes by coordinate matching; master on x=0 / y=0.
inline void pair_boundary(PeriodicMesh& m, double tol) {
  const double L = m.cell_size;
  m.boundary_pairs.clear();
  m.corner_nodes = {-1, -1, -1, -1};
  const std::array<Vec2, 4> corners{Vec2(0, 0), Vec2(L, 0), Vec2(L, L), Vec2(0, L)};
  std::vector<int> left, right, bottom, top;
  for (int i = 0; i < static_cast<int>(m.node_coords.size()); ++i) {
    const Vec2& p = m.node_coords[i];
    bool is_corner = false;
    for (int c = 0; c < 4; ++c) {
      if ((p - corners[c]).cwiseAbs().maxCoeff() <= tol) {
        if (m.corner_nodes[c] >= 0) throw Error(ErrorKind::NonPeriodicBoundary, "duplicate corner node");
        m.corner_nodes[c] = i;
        is_corner = true;
      }
    }
    if (is_corner) continue;
    if (std::abs(p.x()) <= tol) left.push_back(i);
    else if (std::abs(p.x() - L) <= tol) right.push_back(i);
    else if (std::abs(p.y()) <= tol) bottom.push_back(i);
    else if (std::abs(p.y() - L) <= tol) top.push_back(i);
  }
  for (int c = 0; c < 4; ++c) {
    if (m.corner_nodes[c] < 0) throw Error(ErrorKind::NonPeriodicBoundary, "missing cell corner node");
  }
  auto match = [&](std::vector<int>& masters, std::vector<int>& slaves, int axis, const Vec2& offset) {
    auto key = [&](int i) { return m.node_coords[i][axis]; };
    std::sort(masters.begin(), masters.end(), [&](int a, int b) { return key(a) < key(b); });
    std::sort(slaves.begin(), slaves.end(), [&](int a, int b) { return key(a) < key(b); });
    if (masters.size() != slaves.size()) {
      throw Error(ErrorKind::NonPeriodicBoundary, "opposite cell edges carry different node counts");
    }
    for (std::size_t k = 0; k < masters.size(); ++k) {
      if (std::abs(key(masters[k]) - key(slaves[k])) > tol) {
        throw Error(ErrorKind::NonPeriodicBoundary, "boundary node without periodic partner");
      }
      m.boundary_pairs.push_back({slaves[k], masters[k], offset});
    }
  };
  match(left, right, 1, Vec2(L, 0));
  match(bottom, top, 0, Vec2(0, L));
}

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

struct MeshOptions {
  double grading = 1.0;          ///< growth of element size away from voids
  double poisson_factor = 0.75;  ///< interior point spacing relative to target size
  double min_angle_deg = 3.0;    ///< sliver floor
  int smoothing_passes = 4;
  std::uint64_t seed = 0x6d657368ull;
};

/// Structured voidless mesh with n x n squares, each split into two triangles.
inline PeriodicMesh structured_mesh(double L, int n) {
  require(n >= 1, ErrorKind::InvalidArgument, "structured mesh needs n >= 1");
  PeriodicMesh m;
  m.cell_size = L;
  auto coord = [&](int i) { return i == n ? L : L * static_cast<double>(i) / n; };
  for (int j = 0; j <= n; ++j) {
    for (int i = 0; i <= n; ++i) m.node_coords.emplace_back(coord(i), coord(j));
  }
  auto id = [&](int i, int j) { return j * (n + 1) + i; };
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      m.triangles.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
      m.triangles.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
    }
  }
  detail::finalize_elements(m);
  detail::pair_boundary(m, 1e-12 * L);
  return m;
}

namespace detail {

struct Chain {
  std::vector<Vec2> pts;
  bool closed = false;
  int side_in = -1;   // 0 bottom, 1 right, 2 top, 3 left
  int side_out = -1;
};

/// Side through which the segment from outside point `out` to inside point
/// `in` enters the cell: the violated constraint that is satisfied last.
inline int entry_side(const Vec2& out, const Vec2& in, double L) {
  int side = -1;
  double t_max = -1.0;
  auto consider = [&](int s, double t) {
    if (t > t_max) {
      t_max = t;
      side = s;
    }
  };
  if (out.y() <= 0.0) consider(0, (0.0 - out.y()) / (in.y() - out.y()));
  if (out.x() >= L) consider(1, (out.x() - L) / (out.x() - in.x()));
  if (out.y() >= L) consider(2, (out.y() - L) / (out.y() - in.y()));
  if (out.x() <= 0.0) consider(3, (0.0 - out.x()) / (in.x() - out.x()));
  if (side < 0) {
    // Rounding placed `out` on the cell side of an edge; take the nearest edge.
    const std::array<double, 4> gap{out.y(), L - out.x(), L - out.y(), out.x()};
    side = static_cast<int>(std::min_element(gap.begin(), gap.end()) - gap.begin());
  }
  return side;
}

inline Vec2 crossing(const Vec2& a, const Vec2& b, int side, double L);

/// Liang-Barsky test for a segment whose endpoints both lie outside the
/// cell: true when it passes through the open cell interior.
inline bool pass_through(const Vec2& a, const Vec2& b, double L, Vec2& x_in, int& s_in, Vec2& x_out,
                         int& s_out) {
  double t0 = 0.0, t1 = 1.0;
  s_in = s_out = -1;
  const Vec2 d = b - a;
  // side order: 0 bottom (y >= 0), 1 right (x <= L), 2 top (y <= L), 3 left (x >= 0)
  const std::array<double, 4> p{-d.y(), d.x(), d.y(), -d.x()};
  const std::array<double, 4> q{a.y(), L - a.x(), L - a.y(), a.x()};
  for (int k = 0; k < 4; ++k) {
    if (p[k] == 0.0) {
      if (q[k] <= 0.0) return false;
      continue;
    }
    const double t = q[k] / p[k];
    if (p[k] < 0.0) {
      if (t >= t0) {
        t0 = t;
        s_in = k;
      }
    } else if (t <= t1) {
      t1 = t;
      s_out = k;
    }
  }
  if (!(t1 - t0 > 1e-12) || s_in < 0 || s_out < 0) return false;
  x_in = crossing(a, b, s_in, L);
  x_out = crossing(a, b, s_out, L);
  return true;
}

inline Vec2 crossing(const Vec2& a, const Vec2& b, int side, double L) {
  auto on_x = [&](double x) {
    const double t = (x - a.x()) / (b.x() - a.x());
    return Vec2(x, a.y() + t * (b.y() - a.y()));
  };
  auto on_y = [&](double y) {
    const double t = (y - a.y()) / (b.y() - a.y());
    return Vec2(a.x() + t * (b.x() - a.x()), y);
  };
  switch (side) {
    case 0: return on_y(0.0);
    case 1: return on_x(L);
    case 2: return on_y(L);
    default: return on_x(0.0);
  }
}

/// Sutherland-Hodgman clip of a polygon to the cell square.
inline std::vector<Vec2> clip_to_cell(std::vector<Vec2> poly, double L) {
  for (int side = 0; side < 4; ++side) {
    auto inside = [&](const Vec2& p) {
      switch (side) {
        case 0: return p.y() >= 0.0;
        case 1: return p.x() <= L;
        case 2: return p.y() <= L;
        default: return p.x() >= 0.0;
      }
    };
    std::vector<Vec2> out;
    for (std::size_t i = 0; i < poly.size(); ++i) {
      const Vec2& cur = poly[i];
      const Vec2& prev = poly[(i + poly.size() - 1) % poly.size()];
      const bool ci = inside(cur), pi = inside(prev);
      if (ci) {
        if (!pi) out.push_back(crossing(prev, cur, side, L));
        out.push_back(cur);
      } else if (pi) {
        out.push_back(crossing(prev, cur, side, L));
      }
    }
    poly = std::move(out);
    if (poly.empty()) break;
  }
  return poly;
}

inline double polygon_area(const std::vector<Vec2>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    a += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * a;
}

inline double min_angle_deg(const Vec2& a, const Vec2& b, const Vec2& c) {
  auto ang = [](const Vec2& p, const Vec2& q, const Vec2& r) {
    const Vec2 u = q - p, v = r - p;
    const double cosv = u.dot(v) / (u.norm() * v.norm());
    return std::acos(std::clamp(cosv, -1.0, 1.0));
  };
  return std::min({ang(a, b, c), ang(b, c, a), ang(c, a, b)}) * 180.0 / kPi;
}

}  // namespace detail

namespace detail {

inline PeriodicMesh triangulate_voided(const VoidSet& voids, double target_h, int n_seg, const MeshOptions& opt) {
  const double L = voids.cell_size;
  const double r = voids.radius;
  const double seg = 2.0 * r * std::sin(kPi / n_seg);
  const double sagitta = r * (1.0 - std::cos(kPi / n_seg));
  const double h = target_h;
  const double h_near = std::min(h, seg);

  // Distance from p to the nearest void surface under periodicity.
  auto void_distance = [&](const Vec2& p) {
    double d = std::numeric_limits<double>::infinity();
    for (const Vec2& c : voids.centers) d = std::min(d, periodic_distance(p, c, L) - r);
    return d;
  };
  auto size_at = [&](const Vec2& p) {
    return std::min(h, h_near + opt.grading * std::max(0.0, void_distance(p)));
  };

  // Offsets of the polygon vertices around a center.
  std::vector<Vec2> ring(n_seg);
  for (int k = 0; k < n_seg; ++k) {
    const double th = 2.0 * kPi * k / n_seg;
    ring[k] = Vec2(r * std::cos(th), r * std::sin(th));
  }

  // Void chains inside the cell, one or more per polygon image.
  std::vector<detail::Chain> chains;
  std::vector<std::vector<Vec2>> image_polys;  // possibly modified polygons, for area bookkeeping
  for (const Vec2& c0 : voids.centers) {
    // Each polygon vertex belongs to exactly one periodic image, decided once
    // on the unshifted vertex so that mirrored images agree.
    std::vector<Vec2> base(n_seg);
    std::vector<std::array<int, 2>> home(n_seg);
    for (int k = 0; k < n_seg; ++k) {
      base[k] = c0 + ring[k];
      // Vertices grazing a cell line are moved onto it; otherwise they cut slivers.
      for (int a = 0; a < 2; ++a) {
        const double line = L * std::round(base[k][a] / L);
        if (std::abs(base[k][a] - line) < 0.15 * seg) base[k][a] = line;
      }
      home[k] = {static_cast<int>(std::floor(base[k].x() / L)), static_cast<int>(std::floor(base[k].y() / L))};
    }
    for (int j = -1; j <= 1; ++j) {
      for (int i = -1; i <= 1; ++i) {
        const Vec2 c = c0 + Vec2(i * L, j * L);
        if (c.x() + r <= 0.0 || c.x() - r >= L || c.y() + r <= 0.0 || c.y() - r >= L) continue;
        std::vector<Vec2> poly(n_seg);
        std::vector<char> inside(n_seg);
        int n_in = 0;
        for (int k = 0; k < n_seg; ++k) {
          poly[k] = base[k] + Vec2(i * L, j * L);
          inside[k] = home[k][0] == -i && home[k][1] == -j && poly[k].x() > 0.0 && poly[k].x() < L &&
                      poly[k].y() > 0.0 && poly[k].y() < L;
          n_in += inside[k];
        }
        if (n_in == n_seg) {
          detail::Chain ch;
          ch.pts = poly;
          ch.closed = true;
          chains.push_back(std::move(ch));
          image_polys.push_back(poly);
          continue;
        }
        // A dropped vertex is replaced by its crossing point for area bookkeeping.
        std::vector<std::optional<Vec2>> dropped(n_seg);
        bool touches = n_in > 0;
        for (int k = 0; k < n_seg; ++k) {
          const int kn = (k + 1) % n_seg;
          if (inside[k] || inside[kn]) continue;
          // An edge with both ends outside may still cut a corner of the cell.
          Vec2 x_in, x_out;
          int s_in = -1, s_out = -1;
          if (detail::pass_through(poly[k], poly[kn], L, x_in, s_in, x_out, s_out)) {
            detail::Chain ch;
            ch.side_in = s_in;
            ch.side_out = s_out;
            ch.pts = {x_in, x_out};
            chains.push_back(std::move(ch));
            touches = true;
          }
        }
        if (!touches) continue;
        for (int k = 0; k < n_seg; ++k) {
          const int kn = (k + 1) % n_seg;
          if (inside[k] || !inside[kn]) continue;
          // Entry across edge (k, kn).
          const int side_in = detail::entry_side(poly[k], poly[kn], L);
          detail::Chain ch;
          ch.side_in = side_in;
          ch.pts.push_back(detail::crossing(poly[k], poly[kn], side_in, L));
          std::vector<int> idx;
          int q = kn;
          while (inside[q]) {
            idx.push_back(q);
            q = (q + 1) % n_seg;
          }
          const int last = idx.back();
          const int side_out = detail::entry_side(poly[q], poly[last], L);
          const Vec2 x_out = detail::crossing(poly[last], poly[q], side_out, L);
          ch.side_out = side_out;
          // Vertices hugging a crossing point would leave a sliver; drop them.
          std::size_t lo = 0, hi = idx.size();
          if (hi - lo >= 2 && (poly[idx[lo]] - ch.pts.front()).norm() < 0.3 * seg) {
            dropped[idx[lo]] = ch.pts.front();
            ++lo;
          }
          if (hi - lo >= 2 && (poly[idx[hi - 1]] - x_out).norm() < 0.3 * seg) {
            dropped[idx[hi - 1]] = x_out;
            --hi;
          }
          for (std::size_t t = lo; t < hi; ++t) ch.pts.push_back(poly[idx[t]]);
          ch.pts.push_back(x_out);
          chains.push_back(std::move(ch));
        }
        std::vector<Vec2> kept;
        for (int k = 0; k < n_seg; ++k) kept.push_back(dropped[k] ? *dropped[k] : poly[k]);
        image_polys.push_back(std::move(kept));
      }
    }
  }

  // Canonicalize crossing points so that opposite edges mirror exactly.
  const double tol = 1e-9 * L;
  std::array<std::vector<double>, 4> side_vals;  // coordinate along each side
  auto along = [](const Vec2& p, int side) { return (side == 0 || side == 2) ? p.x() : p.y(); };
  for (const auto& ch : chains) {
    if (ch.closed) continue;
    side_vals[ch.side_in].push_back(along(ch.pts.front(), ch.side_in));
    side_vals[ch.side_out].push_back(along(ch.pts.back(), ch.side_out));
  }
  std::array<std::vector<double>, 2> canon;  // 0: bottom/top x values, 1: left/right y values
  for (int axis = 0; axis < 2; ++axis) {
    auto master = side_vals[axis == 0 ? 0 : 3];
    auto slave = side_vals[axis == 0 ? 2 : 1];
    std::sort(master.begin(), master.end());
    std::sort(slave.begin(), slave.end());
    if (master.size() != slave.size()) {
      throw Error(ErrorKind::MeshingFailed, "void crossings on opposite cell edges do not pair up");
    }
    for (std::size_t k = 0; k < master.size(); ++k) {
      if (std::abs(master[k] - slave[k]) > tol) {
        throw Error(ErrorKind::MeshingFailed, "void crossings on opposite cell edges do not mirror");
      }
    }
    canon[axis] = master;
  }
  auto snap = [&](Vec2& p, int side) {
    const int axis = (side == 0 || side == 2) ? 0 : 1;
    const auto& vals = canon[axis];
    const double v = along(p, side);
    auto it = std::lower_bound(vals.begin(), vals.end(), v - tol);
    if (it == vals.end() || std::abs(*it - v) > tol) {
      throw Error(ErrorKind::MeshingFailed, "crossing point lost during canonicalization");
    }
    switch (side) {
      case 0: p = Vec2(*it, 0.0); break;
      case 1: p = Vec2(L, *it); break;
      case 2: p = Vec2(*it, L); break;
      default: p = Vec2(0.0, *it); break;
    }
  };
  for (auto& ch : chains) {
    if (ch.closed) continue;
    snap(ch.pts.front(), ch.side_in);
    snap(ch.pts.back(), ch.side_out);
  }

  // Matrix intervals along each axis: breakpoints alternate matrix/void from the corner.
  auto discretize = [&](double a, double b, auto point_at) {
    // Place nodes with spacing following size_at along [a, b].
    const int samples = 64;
    std::vector<double> cum(samples + 1, 0.0);
    for (int s = 0; s < samples; ++s) {
      const double t0 = a + (b - a) * s / samples, t1 = a + (b - a) * (s + 1) / samples;
      const double mid = 0.5 * (t0 + t1);
      cum[s + 1] = cum[s] + (t1 - t0) / size_at(point_at(mid));
    }
    const int n = std::max(1, static_cast<int>(std::lround(cum.back())));
    std::vector<double> out{a};
    for (int k = 1; k < n; ++k) {
      const double target = cum.back() * k / n;
      int s = static_cast<int>(std::upper_bound(cum.begin(), cum.end(), target) - cum.begin()) - 1;
      s = std::clamp(s, 0, samples - 1);
      const double frac = (target - cum[s]) / (cum[s + 1] - cum[s]);
      out.push_back(a + (b - a) * (s + frac) / samples);
    }
    out.push_back(b);
    return out;
  };
  // For each axis: list of node coordinates on the master side plus the
  // segments (consecutive pairs) that are matrix.
  std::array<std::vector<std::vector<double>>, 2> intervals;
  for (int axis = 0; axis < 2; ++axis) {
    std::vector<double> brk{0.0};
    for (double v : canon[axis]) brk.push_back(v);
    brk.push_back(L);
    if ((brk.size() - 2) % 2 != 0) throw Error(ErrorKind::MeshingFailed, "odd number of edge crossings");
    for (std::size_t k = 0; k + 1 < brk.size(); k += 2) {
      const double a = brk[k], b = brk[k + 1];
      auto point_at = [&](double t) { return axis == 0 ? Vec2(t, 0.0) : Vec2(0.0, t); };
      if (void_distance(point_at(0.5 * (a + b))) < 0.0) {
        throw Error(ErrorKind::MeshingFailed, "edge interval classification mismatch");
      }
      intervals[axis].push_back(discretize(a, b, point_at));
    }
  }

  // Collect points and constraint segments.
  std::vector<Vec2> pts;
  std::map<std::pair<double, double>, int> index_of;
  auto add_point = [&](const Vec2& p) {
    auto key = std::make_pair(p.x(), p.y());
    auto it = index_of.find(key);
    if (it != index_of.end()) return it->second;
    const int id = static_cast<int>(pts.size());
    pts.push_back(p);
    index_of.emplace(key, id);
    return id;
  };
  struct Seg {
    int a, b;
    int partner;  // index of the mirrored boundary segment, -1 for void chains
    bool boundary;
  };
  std::vector<Seg> segs;
  for (int axis = 0; axis < 2; ++axis) {
    for (const auto& iv : intervals[axis]) {
      for (std::size_t k = 0; k + 1 < iv.size(); ++k) {
        const Vec2 m0 = axis == 0 ? Vec2(iv[k], 0.0) : Vec2(0.0, iv[k]);
        const Vec2 m1 = axis == 0 ? Vec2(iv[k + 1], 0.0) : Vec2(0.0, iv[k + 1]);
        const Vec2 s0 = axis == 0 ? Vec2(iv[k], L) : Vec2(L, iv[k]);
        const Vec2 s1 = axis == 0 ? Vec2(iv[k + 1], L) : Vec2(L, iv[k + 1]);
        const int id = static_cast<int>(segs.size());
        segs.push_back({add_point(m0), add_point(m1), id + 1, true});
        segs.push_back({add_point(s0), add_point(s1), id, true});
      }
    }
  }
  for (const auto& ch : chains) {
    std::vector<int> ids;
    const std::size_t n = ch.pts.size();
    const std::size_t n_edges = ch.closed ? n : n - 1;
    for (std::size_t k = 0; k < n_edges; ++k) {
      const Vec2& a = ch.pts[k];
      const Vec2& b = ch.pts[(k + 1) % n];
      const int sub = std::max(1, static_cast<int>(std::ceil((b - a).norm() / h - 1e-9)));
      for (int s = 0; s < sub; ++s) ids.push_back(add_point(s == 0 ? a : Vec2(a + (b - a) * (double(s) / sub))));
    }
    if (!ch.closed) ids.push_back(add_point(ch.pts.back()));
    const std::size_t m = ids.size();
    const std::size_t m_edges = ch.closed ? m : m - 1;
    for (std::size_t k = 0; k < m_edges; ++k) segs.push_back({ids[k], ids[(k + 1) % m], -1, false});
  }
  const std::size_t n_fixed = pts.size();

  // Graded Poisson-disk fill (Bridson's algorithm with variable radius).
  {
    Rng prng(opt.seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double cell = opt.poisson_factor * h_near / std::sqrt(2.0);
    const int gn = static_cast<int>(std::ceil(L / cell));
    std::vector<std::vector<int>> grid(static_cast<std::size_t>(gn) * gn);
    auto gidx = [&](const Vec2& p) {
      const int gx = std::clamp(static_cast<int>(p.x() / cell), 0, gn - 1);
      const int gy = std::clamp(static_cast<int>(p.y() / cell), 0, gn - 1);
      return std::make_pair(gx, gy);
    };
    std::vector<double> radius_of;
    for (const Vec2& p : pts) {
      auto [gx, gy] = gidx(p);
      grid[gy * gn + gx].push_back(static_cast<int>(radius_of.size()));
      radius_of.push_back(opt.poisson_factor * size_at(p));
    }
    const int reach = static_cast<int>(std::ceil(opt.poisson_factor * h / cell)) + 1;
    auto admissible = [&](const Vec2& p, double rp) {
      if (p.x() < 0.5 * rp || p.y() < 0.5 * rp || p.x() > L - 0.5 * rp || p.y() > L - 0.5 * rp) return false;
      if (void_distance(p) < 0.5 * rp + sagitta) return false;
      auto [gx, gy] = gidx(p);
      for (int dy = -reach; dy <= reach; ++dy) {
        for (int dx = -reach; dx <= reach; ++dx) {
          const int x = gx + dx, y = gy + dy;
          if (x < 0 || y < 0 || x >= gn || y >= gn) continue;
          for (int q : grid[y * gn + x]) {
            if ((pts[q] - p).norm() < 0.5 * (rp + radius_of[q])) return false;
          }
        }
      }
      return true;
    };
    std::vector<int> active;
    for (int i = 0; i < static_cast<int>(pts.size()); ++i) active.push_back(i);
    // Seed the bulk in case no constraint point is near a large empty region.
    for (int gy = 0; gy < gn; gy += std::max(1, static_cast<int>(h / cell))) {
      for (int gx = 0; gx < gn; gx += std::max(1, static_cast<int>(h / cell))) {
        const Vec2 p((gx + 0.5) * cell, (gy + 0.5) * cell);
        const double rp = opt.poisson_factor * size_at(p);
        if (!admissible(p, rp)) continue;
        auto [cx, cy] = gidx(p);
        grid[cy * gn + cx].push_back(static_cast<int>(pts.size()));
        pts.push_back(p);
        radius_of.push_back(rp);
        active.push_back(static_cast<int>(pts.size()) - 1);
      }
    }
    std::size_t head = 0;
    while (head < active.size()) {
      const int q = active[head++];
      const double rq = radius_of[q];
      for (int attempt = 0; attempt < 24; ++attempt) {
        const double ang = 2.0 * kPi * u01(prng);
        const double rad = rq * (1.0 + u01(prng));
        const Vec2 p = pts[q] + rad * Vec2(std::cos(ang), std::sin(ang));
        if (p.x() <= 0.0 || p.y() <= 0.0 || p.x() >= L || p.y() >= L) continue;
        const double rp = opt.poisson_factor * size_at(p);
        if (!admissible(p, rp)) continue;
        auto [gx, gy] = gidx(p);
        grid[gy * gn + gx].push_back(static_cast<int>(pts.size()));
        pts.push_back(p);
        radius_of.push_back(rp);
        active.push_back(static_cast<int>(pts.size()) - 1);
      }
    }
  }

  // Conforming Delaunay triangulation.
  geom::Triangulation dt(Vec2(0, 0), Vec2(L, L));
  std::vector<int> vid(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) vid[i] = dt.insert(pts[i]);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (vid[i] != geom::Triangulation::kFirstVertex + static_cast<int>(i)) {
      throw Error(ErrorKind::MeshingFailed, "duplicate mesh point");
    }
  }
  auto to_v = [](int p) { return p + geom::Triangulation::kFirstVertex; };
  auto pt = [&](int p) -> const Vec2& { return pts[p]; };
  for (int round = 0;; ++round) {
    if (round > 40) throw Error(ErrorKind::MeshingFailed, "constraint recovery did not converge");
    const auto edges = dt.edge_set();
    std::vector<std::size_t> missing;
    for (std::size_t s = 0; s < segs.size(); ++s) {
      if (!edges.count(geom::Triangulation::edge_key(to_v(segs[s].a), to_v(segs[s].b)))) missing.push_back(s);
    }
    if (missing.empty()) break;
    std::set<std::size_t> split;
    for (std::size_t s : missing) {
      split.insert(s);
      if (segs[s].partner >= 0) split.insert(static_cast<std::size_t>(segs[s].partner));
    }
    std::map<std::size_t, std::size_t> new_index;  // old segment -> index of its second half
    for (std::size_t s : split) {
      const Seg old = segs[s];
      Vec2 mid = 0.5 * (pt(old.a) + pt(old.b));
      if (old.boundary) {
        // Keep the midpoint exactly on the cell edge.
        if (pt(old.a).x() == pt(old.b).x()) mid.x() = pt(old.a).x();
        if (pt(old.a).y() == pt(old.b).y()) mid.y() = pt(old.a).y();
      }
      const int m = static_cast<int>(pts.size());
      pts.push_back(mid);
      if (dt.insert(mid) != to_v(m)) throw Error(ErrorKind::MeshingFailed, "duplicate split point");
      segs[s].b = m;
      new_index[s] = segs.size();
      segs.push_back({m, old.b, -1, old.boundary});
    }
    for (std::size_t s : split) {
      if (segs[s].partner >= 0) {
        const auto p = static_cast<std::size_t>(segs[s].partner);
        segs[new_index[s]].partner = static_cast<int>(new_index.at(p));
      }
    }
  }
  (void)n_fixed;

  // Triangles inside the cell, then flood-fill the matrix from the corner.
  std::vector<std::array<int, 3>> tris;
  for (auto t : dt.triangles()) {
    tris.push_back({t[0] - geom::Triangulation::kFirstVertex, t[1] - geom::Triangulation::kFirstVertex,
                    t[2] - geom::Triangulation::kFirstVertex});
  }
  std::unordered_set<std::uint64_t> barrier;
  for (const Seg& s : segs) {
    if (!s.boundary) barrier.insert(geom::Triangulation::edge_key(s.a, s.b));
  }
  std::unordered_map<std::uint64_t, std::vector<int>> edge_tris;
  for (int t = 0; t < static_cast<int>(tris.size()); ++t) {
    for (int k = 0; k < 3; ++k) edge_tris[geom::Triangulation::edge_key(tris[t][k], tris[t][(k + 1) % 3])].push_back(t);
  }
  // Periodic adjacency across mirrored boundary segments.
  std::vector<std::vector<int>> periodic_nb(tris.size());
  for (const Seg& s : segs) {
    if (!s.boundary || s.partner < 0) continue;
    const Seg& p = segs[static_cast<std::size_t>(s.partner)];
    auto it1 = edge_tris.find(geom::Triangulation::edge_key(s.a, s.b));
    auto it2 = edge_tris.find(geom::Triangulation::edge_key(p.a, p.b));
    if (it1 == edge_tris.end() || it2 == edge_tris.end()) continue;
    for (int t1 : it1->second) {
      for (int t2 : it2->second) periodic_nb[t1].push_back(t2);
    }
  }
  const int corner = add_point(Vec2(0.0, 0.0));
  int seed_tri = -1;
  for (int t = 0; t < static_cast<int>(tris.size()) && seed_tri < 0; ++t) {
    for (int k = 0; k < 3; ++k) {
      if (tris[t][k] == corner) seed_tri = t;
    }
  }
  if (seed_tri < 0) throw Error(ErrorKind::MeshingFailed, "corner node not triangulated");
  std::vector<char> matrix(tris.size(), 0);
  std::queue<int> bfs;
  bfs.push(seed_tri);
  matrix[seed_tri] = 1;
  while (!bfs.empty()) {
    const int t = bfs.front();
    bfs.pop();
    for (int k = 0; k < 3; ++k) {
      const auto key = geom::Triangulation::edge_key(tris[t][k], tris[t][(k + 1) % 3]);
      if (barrier.count(key)) continue;
      for (int n : edge_tris[key]) {
        if (!matrix[n]) {
          matrix[n] = 1;
          bfs.push(n);
        }
      }
    }
    for (int n : periodic_nb[t]) {
      if (!matrix[n]) {
        matrix[n] = 1;
        bfs.push(n);
      }
    }
  }

  // Compact to matrix triangles and referenced nodes.
  PeriodicMesh mesh;
  mesh.cell_size = L;
  mesh.voids = voids;
  std::vector<int> remap(pts.size(), -1);
  for (int t = 0; t < static_cast<int>(tris.size()); ++t) {
    if (!matrix[t]) continue;
    std::array<int, 3> tri{};
    for (int k = 0; k < 3; ++k) {
      const int p = tris[t][k];
      if (remap[p] < 0) {
        remap[p] = static_cast<int>(mesh.node_coords.size());
        mesh.node_coords.push_back(pts[p]);
      }
      tri[k] = remap[p];
    }
    mesh.triangles.push_back(tri);
  }

  // Smoothing of free interior nodes; accept a move only if it improves
  // the worst angle of the incident triangles.
  std::vector<char> fixed(mesh.node_coords.size(), 0);
  for (const Seg& s : segs) {
    if (remap[s.a] >= 0) fixed[remap[s.a]] = 1;
    if (remap[s.b] >= 0) fixed[remap[s.b]] = 1;
  }
  std::vector<std::vector<int>> node_tris(mesh.node_coords.size());
  for (int t = 0; t < static_cast<int>(mesh.triangles.size()); ++t) {
    for (int k = 0; k < 3; ++k) node_tris[mesh.triangles[t][k]].push_back(t);
  }
  auto worst_angle = [&](int node) {
    double w = 180.0;
    for (int t : node_tris[node]) {
      const auto& tr = mesh.triangles[t];
      const Vec2 &a = mesh.node_coords[tr[0]], &b = mesh.node_coords[tr[1]], &c = mesh.node_coords[tr[2]];
      if (geom::orient2d(a, b, c) <= 0) return -1.0;
      w = std::min(w, detail::min_angle_deg(a, b, c));
    }
    return w;
  };
  for (int pass = 0; pass < opt.smoothing_passes; ++pass) {
    for (int n = 0; n < static_cast<int>(mesh.node_coords.size()); ++n) {
      if (fixed[n]) continue;
      Vec2 avg = Vec2::Zero();
      int cnt = 0;
      for (int t : node_tris[n]) {
        for (int k = 0; k < 3; ++k) {
          if (mesh.triangles[t][k] != n) {
            avg += mesh.node_coords[mesh.triangles[t][k]];
            ++cnt;
          }
        }
      }
      if (cnt == 0) continue;
      avg /= cnt;
      const Vec2 old = mesh.node_coords[n];
      const double before = worst_angle(n);
      mesh.node_coords[n] = avg;
      if (worst_angle(n) <= before) mesh.node_coords[n] = old;
    }
  }

  detail::finalize_elements(mesh);
  detail::pair_boundary(mesh, 0.0);

  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& tr = mesh.triangles[t];
    const double ang = detail::min_angle_deg(mesh.node_coords[tr[0]], mesh.node_coords[tr[1]], mesh.node_coords[tr[2]]);
    if (!(mesh.element_areas[t] > 0.0) || ang < opt.min_angle_deg) {
      throw Error(ErrorKind::MeshingFailed, "element below quality floor (min angle " + std::to_string(ang) + " deg)");
    }
  }

  double void_area = 0.0;
  for (const auto& poly : image_polys) void_area += detail::polygon_area(detail::clip_to_cell(poly, L));
  mesh.void_area = void_area;
  const double area_err = std::abs(mesh.matrix_area() + void_area - L * L);
  if (area_err > 1e-9 * L * L) {
    throw Error(ErrorKind::MeshingFailed, "matrix region does not match the void polygons (area mismatch " +
                                              std::to_string(area_err) + ")");
  }
  return mesh;
}

}  // namespace detail

/// Triangulate the matrix region of the periodic cell: void circles become
/// n_seg-gons, the cell boundary is discretized with mirrored nodes, and the
/// interior is filled with a graded Poisson-disk point set before a
/// conforming Delaunay triangulation. A mesh failing the quality floor is
/// retried with a few different fill seeds.
inline PeriodicMesh triangulate(const VoidSet& voids, double target_h, int n_seg, const MeshOptions& opt = {}) {
  require(target_h > 0.0, ErrorKind::InvalidArgument, "target_h must be positive");
  require(n_seg >= 12, ErrorKind::InvalidArgument, "n_seg must be at least 12");
  const double L = voids.cell_size;
  if (voids.count() == 0) {
    const int n = std::max(1, static_cast<int>(std::ceil(L / target_h - 1e-9)));
    PeriodicMesh m = structured_mesh(L, n);
    m.voids = voids;
    return m;
  }
  MeshOptions o = opt;
  std::uint64_t seed_state = opt.seed;
  for (int attempt = 0;; ++attempt) {
    try {
      return detail::triangulate_voided(voids, target_h, n_seg, o);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::MeshingFailed || attempt >= 3) throw;
      o.seed = splitmix64(seed_state);
    }
  }
}

/// Mean length over unique mesh edges.
inline double mean_edge_length(const PeriodicMesh& m) {
  std::set<std::pair<int, int>> seen;
  double sum = 0.0;
  for (const auto& t : m.triangles) {
    for (int k = 0; k < 3; ++k) {
      int a = t[k], b = t[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      if (seen.insert({a, b}).second) sum += (m.node_coords[a] - m.node_coords[b]).norm();
    }
  }
  return seen.empty() ? 0.0 : sum / static_cast<double>(seen.size());
}

// ---------------------------------------------------------------------------
// Mesh file exchange.

inline std::string mesh_to_string(const PeriodicMesh& m) {
  std::ostringstream os;
  os << "MESH v1\n";
  os << "NODES " << m.node_coords.size() << "\n";
  for (const Vec2& p : m.node_coords) os << detail::fmt_double(p.x()) << ' ' << detail::fmt_double(p.y()) << "\n";
  os << "TRIS " << m.triangles.size() << "\n";
  for (const auto& t : m.triangles) os << t[0] << ' ' << t[1] << ' ' << t[2] << "\n";
  os << "CELL " << detail::fmt_double(m.cell_size) << "\n";
  os << "VOIDS " << m.voids.centers.size() << "\n";
  for (const Vec2& c : m.voids.centers) {
    os << detail::fmt_double(c.x()) << ' ' << detail::fmt_double(c.y()) << ' ' << detail::fmt_double(m.voids.radius)
       << "\n";
  }
  return os.str();
}

namespace detail {

class LineReader {
 public:
  explicit LineReader(std::string_view text) : text_(text) {}

  std::vector<std::string_view> next_tokens() {
    for (;;) {
      if (pos_ >= text_.size()) throw Error(ErrorKind::ParseError, "unexpected end of mesh file");
      std::size_t end = text_.find('\n', pos_);
      if (end == std::string_view::npos) end = text_.size();
      std::string_view line = text_.substr(pos_, end - pos_);
      pos_ = end + 1;
      ++line_no_;
      std::vector<std::string_view> toks;
      std::size_t i = 0;
      while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
        if (j > i) toks.push_back(line.substr(i, j - i));
        i = j;
      }
      if (!toks.empty()) return toks;
    }
  }

  int line() const { return line_no_; }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
  int line_no_ = 0;
};

template <typename T>
T parse_number(std::string_view tok, int line) {
  T v{};
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw Error(ErrorKind::ParseError, "bad number '" + std::string(tok) + "' on line " + std::to_string(line));
  }
  return v;
}

}  // namespace detail

/// Parse the line-oriented mesh format and reconstruct the periodic pairing
/// by coordinate matching (tolerance 1e-9 L).
inline PeriodicMesh mesh_from_string(std::string_view text) {
  detail::LineReader rd(text);
  auto expect = [&](std::string_view kw, std::size_t n_tok) {
    auto t = rd.next_tokens();
    if (t.size() != n_tok || t[0] != kw) {
      throw Error(ErrorKind::ParseError, "expected '" + std::string(kw) + "' on line " + std::to_string(rd.line()));
    }
    return t;
  };
  auto hdr = expect("MESH", 2);
  if (hdr[1] != "v1") throw Error(ErrorKind::ParseError, "unsupported mesh version");
  PeriodicMesh m;
  const auto n_nodes = detail::parse_number<std::size_t>(expect("NODES", 2)[1], rd.line());
  m.node_coords.reserve(n_nodes);
  for (std::size_t i = 0; i < n_nodes; ++i) {
    auto t = rd.next_tokens();
    if (t.size() != 2) throw Error(ErrorKind::ParseError, "node line needs 2 values");
    m.node_coords.emplace_back(detail::parse_number<double>(t[0], rd.line()), detail::parse_number<double>(t[1], rd.line()));
  }
  const auto n_tris = detail::parse_number<std::size_t>(expect("TRIS", 2)[1], rd.line());
  for (std::size_t i = 0; i < n_tris; ++i) {
    auto t = rd.next_tokens();
    if (t.size() != 3) throw Error(ErrorKind::ParseError, "triangle line needs 3 indices");
    std::array<int, 3> tri{};
    for (int k = 0; k < 3; ++k) {
      tri[k] = detail::parse_number<int>(t[k], rd.line());
      if (tri[k] < 0 || static_cast<std::size_t>(tri[k]) >= n_nodes) {
        throw Error(ErrorKind::ParseError, "triangle index out of range");
      }
    }
    m.triangles.push_back(tri);
  }
  m.cell_size = detail::parse_number<double>(expect("CELL", 2)[1], rd.line());
  if (!(m.cell_size > 0.0)) throw Error(ErrorKind::ParseError, "cell size must be positive");
  const auto n_voids = detail::parse_number<std::size_t>(expect("VOIDS", 2)[1], rd.line());
  m.voids.cell_size = m.cell_size;
  for (std::size_t i = 0; i < n_voids; ++i) {
    auto t = rd.next_tokens();
    if (t.size() != 3) throw Error(ErrorKind::ParseError, "void line needs 3 values");
    m.voids.centers.emplace_back(detail::parse_number<double>(t[0], rd.line()), detail::parse_number<double>(t[1], rd.line()));
    m.voids.radius = detail::parse_number<double>(t[2], rd.line());
  }
  const double L = m.cell_size;
  m.voids.target_vf = static_cast<double>(n_voids) * kPi * m.voids.radius * m.voids.radius / (L * L);
  detail::finalize_elements(m);
  for (double a : m.element_areas) {
    if (!(a > 0.0)) throw Error(ErrorKind::ParseError, "degenerate triangle in mesh file");
  }
  detail::pair_boundary(m, 1e-9 * L);
  m.void_area = L * L - m.matrix_area();
  return m;
}

inline void export_mesh(const PeriodicMesh& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::IoError, "cannot open " + path);
  os << mesh_to_string(m);
}

inline PeriodicMesh import_mesh(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::IoError, "cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return mesh_from_string(ss.str());
}

// ---------------------------------------------------------------------------
// Dual graph over integration points.

struct DualGraph {
  int n_nodes = 0;
  std::vector<std::pair<int, int>> edges;  ///< directed (i, j): receiver i, sender j
  std::vector<Vec2> edge_features;         ///< x_i - x_j with periodic phantom offset
  std::vector<char> is_periodic_edge;

  std::size_t num_edges() const { return edges.size(); }
};

inline DualGraph build_dual_graph(const PeriodicMesh& mesh) {
  const double L = mesh.cell_size;
  DualGraph g;
  g.n_nodes = static_cast<int>(mesh.num_elements());
  std::map<std::pair<int, int>, std::vector<int>> edge_tris;
  for (int t = 0; t < g.n_nodes; ++t) {
    const auto& tr = mesh.triangles[t];
    for (int k = 0; k < 3; ++k) {
      int a = tr[k], b = tr[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      edge_tris[{a, b}].push_back(t);
    }
  }
  // Node partner across the cell: axis 0 pairs x=0 <-> x=L, axis 1 pairs y=0 <-> y=L.
  std::array<std::map<int, int>, 2> partner;
  const auto& cn = mesh.corner_nodes;
  auto link = [&](int axis, int a, int b) {
    partner[axis][a] = b;
    partner[axis][b] = a;
  };
  for (const auto& bp : mesh.boundary_pairs) link(bp.offset.x() != 0.0 ? 0 : 1, bp.master, bp.slave);
  link(0, cn[0], cn[1]);
  link(0, cn[3], cn[2]);
  link(1, cn[0], cn[3]);
  link(1, cn[1], cn[2]);
  auto add_pair = [&](int i, int j, const Vec2& shift_j, bool periodic) {
    const Vec2 e = mesh.element_centroids[i] - (mesh.element_centroids[j] + shift_j);
    g.edges.emplace_back(i, j);
    g.edge_features.push_back(e);
    g.is_periodic_edge.push_back(periodic);
    g.edges.emplace_back(j, i);
    g.edge_features.push_back(-e);
    g.is_periodic_edge.push_back(periodic);
  };
  const double tol = 1e-9 * L;
  for (const auto& [key, ts] : edge_tris) {
    if (ts.size() == 2) {
      add_pair(ts[0], ts[1], Vec2::Zero(), false);
      continue;
    }
    if (ts.size() != 1) throw Error(ErrorKind::MeshingFailed, "non-manifold mesh edge");
    const auto [a, b] = key;
    const Vec2 &pa = mesh.node_coords[a], &pb = mesh.node_coords[b];
    int axis = -1;
    bool low_side = false;
    if (std::abs(pa.x()) <= tol && std::abs(pb.x()) <= tol) { axis = 0; low_side = true; }
    else if (std::abs(pa.y()) <= tol && std::abs(pb.y()) <= tol) { axis = 1; low_side = true; }
    if (!low_side) continue;  // high sides are visited from their low partner; void edges have none
    auto ia = partner[axis].find(a), ib = partner[axis].find(b);
    if (ia == partner[axis].end() || ib == partner[axis].end()) {
      throw Error(ErrorKind::NonPeriodicBoundary, "boundary edge without periodic partner");
    }
    int pa2 = ia->second, pb2 = ib->second;
    if (pa2 > pb2) std::swap(pa2, pb2);
    auto it = edge_tris.find({pa2, pb2});
    if (it == edge_tris.end() || it->second.size() != 1) {
      throw Error(ErrorKind::NonPeriodicBoundary, "periodic partner edge missing");
    }
    // Element i on the low side; its partner's centroid is moved back by L.
    const Vec2 shift = axis == 0 ? Vec2(-L, 0.0) : Vec2(0.0, -L);
    add_pair(ts[0], it->second[0], shift, true);
  }
  // Connectivity.
  std::vector<std::vector<int>> adj(g.n_nodes);
  for (const auto& [i, j] : g.edges) adj[i].push_back(j);
  std::vector<char> seen(g.n_nodes, 0);
  std::vector<int> stack;
  if (g.n_nodes > 0) {
    stack.push_back(0);
    seen[0] = 1;
  }
  int reached = g.n_nodes > 0 ? 1 : 0;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    for (int w : adj[v]) {
      if (!seen[w]) {
        seen[w] = 1;
        ++reached;
        stack.push_back(w);
      }
    }
  }
  if (reached != g.n_nodes) throw Error(ErrorKind::DisconnectedGraph, "dual graph has more than one component");
  return g;
}

// ---------------------------------------------------------------------------
// Void-distance features.

/// Row-major (num_nodes x 2K): (dx, dy) from each node to its K nearest
/// void-center images, ascending distance.
struct GeomFeatures {
  int K = 9;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> values;
};

/// Images per void: a 5 x 5 tile block centered on each node, so every
/// offset satisfies |dx|, |dy| <= 2.5 L.
inline constexpr int kTilingImages = 25;

inline GeomFeatures compute_void_features(const std::vector<Vec2>& positions, const VoidSet& voids, int K) {
  require(K >= 1, ErrorKind::InvalidArgument, "K must be at least 1");
  const std::size_t available = voids.count() * kTilingImages;
  if (static_cast<std::size_t>(K) > available) {
    throw Error(ErrorKind::InsufficientVoidImages,
                "K=" + std::to_string(K) + " exceeds " + std::to_string(available) + " tiled void images");
  }
  const double L = voids.cell_size;
  GeomFeatures f;
  f.K = K;
  f.values.resize(static_cast<Eigen::Index>(positions.size()), 2 * K);
  struct Cand {
    double d2, dx, dy;
  };
  std::vector<Cand> cands;
  cands.reserve(available);
  for (std::size_t n = 0; n < positions.size(); ++n) {
    cands.clear();
    for (const Vec2& c : voids.centers) {
      const Vec2 d0 = detail::periodic_delta(c, positions[n], L);
      for (int j = -2; j <= 2; ++j) {
        for (int i = -2; i <= 2; ++i) {
          const double dx = d0.x() + i * L, dy = d0.y() + j * L;
          cands.push_back({dx * dx + dy * dy, dx, dy});
        }
      }
    }
    std::partial_sort(cands.begin(), cands.begin() + K, cands.end(), [](const Cand& a, const Cand& b) {
      if (a.d2 != b.d2) return a.d2 < b.d2;
      if (a.dx != b.dx) return a.dx < b.dx;
      return a.dy < b.dy;
    });
    for (int k = 0; k < K; ++k) {
      f.values(static_cast<Eigen::Index>(n), 2 * k) = cands[k].dx;
      f.values(static_cast<Eigen::Index>(n), 2 * k + 1) = cands[k].dy;
    }
  }
  return f;
}

inline GeomFeatures compute_void_features(const PeriodicMesh& mesh, const VoidSet& voids, int K) {
  return compute_void_features(mesh.element_centroids, voids, K);
}

}  // namespace microsurr

#endif  // MICROSURR_MICROGEN_HPP
