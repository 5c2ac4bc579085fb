#ifndef MICROSURR_DELAUNAY_HPP
#define MICROSURR_DELAUNAY_HPP

#include "core.hpp"
#include "predicates.hpp"

#include <array>
#include <cstdint>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace microsurr::geom {

/// Incremental Bowyer-Watson Delaunay triangulation inside a bounding
/// super-triangle. Vertices 0..2 are the super-triangle corners; user
/// vertices start at index 3.
class Triangulation {
 public:
  struct Tri {
    std::array<int, 3> v;
    std::array<int, 3> nb;  // neighbour across the edge opposite v[i], -1 if none
    bool alive = true;
  };

  /// `lo`/`hi` bound every point that will be inserted.
  Triangulation(const Vec2& lo, const Vec2& hi) {
    const Vec2 c = 0.5 * (lo + hi);
    const double span = std::max(hi.x() - lo.x(), hi.y() - lo.y());
    const double big = 100.0 * std::max(span, 1e-12);
    points_.push_back(c + Vec2(-big, -big));
    points_.push_back(c + Vec2(big, -big));
    points_.push_back(c + Vec2(0.0, big));
    tris_.push_back(Tri{{0, 1, 2}, {-1, -1, -1}, true});
  }

  const std::vector<Vec2>& points() const { return points_; }
  const std::vector<Tri>& raw_triangles() const { return tris_; }
  static constexpr int kFirstVertex = 3;

  /// Insert a point; returns its vertex index (an existing index when the
  /// point coincides exactly with a vertex).
  int insert(const Vec2& p) {
    const int t0 = locate(p);
    for (int k = 0; k < 3; ++k) {
      const int vk = tris_[t0].v[k];
      if (points_[vk] == p) return vk;
    }
    const int pi = static_cast<int>(points_.size());
    points_.push_back(p);

    // Cavity: triangles whose circumcircle strictly contains p.
    ++stamp_;
    if (mark_.size() < tris_.size()) mark_.resize(tris_.size() * 2 + 16, 0);
    cavity_.clear();
    cavity_.push_back(t0);
    mark_[t0] = stamp_;
    for (std::size_t q = 0; q < cavity_.size(); ++q) {
      const Tri& t = tris_[cavity_[q]];
      for (int k = 0; k < 3; ++k) {
        const int n = t.nb[k];
        if (n < 0 || mark_[n] == stamp_) continue;
        const Tri& tn = tris_[n];
        if (incircle(points_[tn.v[0]], points_[tn.v[1]], points_[tn.v[2]], p) > 0) {
          mark_[n] = stamp_;
          cavity_.push_back(n);
        }
      }
    }

    // Re-triangulate the cavity boundary as a fan around p.
    struct Bnd {
      int a, b, outside;
    };
    std::vector<Bnd> bnd;
    for (int c : cavity_) {
      const Tri& t = tris_[c];
      for (int k = 0; k < 3; ++k) {
        const int n = t.nb[k];
        if (n >= 0 && mark_[n] == stamp_) continue;
        bnd.push_back({t.v[(k + 1) % 3], t.v[(k + 2) % 3], n});
      }
    }
    for (int c : cavity_) tris_[c].alive = false;

    std::unordered_map<int, int> by_a, by_b;
    by_a.reserve(bnd.size() * 2);
    by_b.reserve(bnd.size() * 2);
    const int first = static_cast<int>(tris_.size());
    for (const Bnd& e : bnd) {
      const int idx = static_cast<int>(tris_.size());
      tris_.push_back(Tri{{pi, e.a, e.b}, {e.outside, -1, -1}, true});
      by_a[e.a] = idx;
      by_b[e.b] = idx;
      if (e.outside >= 0) {
        Tri& o = tris_[e.outside];
        for (int k = 0; k < 3; ++k) {
          if (o.v[(k + 1) % 3] == e.b && o.v[(k + 2) % 3] == e.a) o.nb[k] = idx;
        }
      }
    }
    for (int idx = first; idx < static_cast<int>(tris_.size()); ++idx) {
      Tri& t = tris_[idx];
      t.nb[1] = by_a.at(t.v[2]);  // edge (b, p)
      t.nb[2] = by_b.at(t.v[1]);  // edge (p, a)
    }
    last_ = first;
    return pi;
  }

  /// Undirected edge set of the current triangulation (including
  /// super-triangle edges).
  std::unordered_set<std::uint64_t> edge_set() const {
    std::unordered_set<std::uint64_t> edges;
    edges.reserve(tris_.size() * 2);
    for (const Tri& t : tris_) {
      if (!t.alive) continue;
      for (int k = 0; k < 3; ++k) edges.insert(edge_key(t.v[k], t.v[(k + 1) % 3]));
    }
    return edges;
  }

  static std::uint64_t edge_key(int a, int b) {
    if (a > b) std::swap(a, b);
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  /// Alive triangles that do not touch the super-triangle.
  std::vector<std::array<int, 3>> triangles() const {
    std::vector<std::array<int, 3>> out;
    for (const Tri& t : tris_) {
      if (!t.alive) continue;
      if (t.v[0] < kFirstVertex || t.v[1] < kFirstVertex || t.v[2] < kFirstVertex) continue;
      out.push_back(t.v);
    }
    return out;
  }

 private:
  int locate(const Vec2& p) {
    int t = last_;
    if (t < 0 || t >= static_cast<int>(tris_.size()) || !tris_[t].alive) {
      t = static_cast<int>(tris_.size()) - 1;
      while (!tris_[t].alive) --t;
    }
    // Visibility walk; the rotating start edge avoids cycling on degenerate input.
    std::size_t guard = 0;
    for (;;) {
      const Tri& tr = tris_[t];
      bool moved = false;
      for (int j = 0; j < 3; ++j) {
        const int k = (j + rotate_) % 3;
        const Vec2& a = points_[tr.v[(k + 1) % 3]];
        const Vec2& b = points_[tr.v[(k + 2) % 3]];
        if (orient2d(a, b, p) < 0) {
          if (tr.nb[k] < 0) throw Error(ErrorKind::MeshingFailed, "point outside triangulation bounds");
          t = tr.nb[k];
          moved = true;
          break;
        }
      }
      rotate_ = (rotate_ + 1) % 3;
      if (!moved) return t;
      if (++guard > 4 * tris_.size() + 64) {
        throw Error(ErrorKind::MeshingFailed, "point location did not terminate");
      }
    }
  }

  std::vector<Vec2> points_;
  std::vector<Tri> tris_;
  std::vector<std::uint32_t> mark_;
  std::vector<int> cavity_;
  std::uint32_t stamp_ = 0;
  int last_ = 0;
  int rotate_ = 0;
};

}  // namespace microsurr::geom

#endif  // MICROSURR_DELAUNAY_HPP
