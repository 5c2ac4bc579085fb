#ifndef MICROSURR_FESOLVER_HPP
#define MICROSURR_FESOLVER_HPP

// Periodic microscale boundary value problem on constant-strain triangles.
// Displacements split as u = eps_macro * x + u_fluct; fluctuations are
// periodic (slave = master) and vanish at the cell corners.

#include "core.hpp"
#include "loadgen.hpp"
#include "material.hpp"
#include "microgen.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <memory>
#include <vector>

namespace microsurr {

struct PeriodicConstraints {
  std::vector<int> owner;  ///< node -> independent node index, -1 for corners
  int n_free = 0;          ///< independent nodes; unknowns = 2 * n_free
  std::size_t n_constraints = 0;
  int pinned_corner = -1;
};

inline PeriodicConstraints build_constraints(const PeriodicMesh& mesh) {
  const double L = mesh.cell_size;
  const double tol = 1e-12 * L;
  PeriodicConstraints c;
  const std::size_t n = mesh.num_nodes();
  std::vector<int> master_of(n, -1);
  for (const auto& bp : mesh.boundary_pairs) master_of[bp.slave] = bp.master;
  std::vector<char> is_master(n, 0);
  for (const auto& bp : mesh.boundary_pairs) is_master[bp.master] = 1;
  std::vector<char> corner(n, 0);
  for (int cn : mesh.corner_nodes) {
    if (cn < 0) throw Error(ErrorKind::UnpairedBoundaryNode, "mesh lacks a corner node");
    corner[cn] = 1;
  }
  c.owner.assign(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (corner[i]) continue;
    const Vec2& p = mesh.node_coords[i];
    const bool on_bnd =
        std::abs(p.x()) <= tol || std::abs(p.y()) <= tol || std::abs(p.x() - L) <= tol || std::abs(p.y() - L) <= tol;
    if (on_bnd && master_of[i] < 0 && !is_master[i]) {
      throw Error(ErrorKind::UnpairedBoundaryNode, "boundary node " + std::to_string(i) + " has no periodic partner");
    }
    if (master_of[i] < 0) c.owner[i] = c.n_free++;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (master_of[i] >= 0) c.owner[i] = c.owner[master_of[i]];
  }
  c.pinned_corner = mesh.corner_nodes[0];
  c.n_constraints = mesh.boundary_pairs.size() + 4;
  return c;
}

/// Affine part of the displacement for an engineering-shear macro strain.
inline Vec2 affine_displacement(const Voigt3& eps, const Vec2& x) {
  return Vec2(eps(0) * x.x() + 0.5 * eps(2) * x.y(), 0.5 * eps(2) * x.x() + eps(1) * x.y());
}

inline Voigt3 homogenize(const Field3& sig_field, const std::vector<double>& element_areas) {
  require(static_cast<std::size_t>(sig_field.rows()) == element_areas.size(), ErrorKind::ShapeMismatch,
          "stress field and element areas differ in length");
  Voigt3 acc = Voigt3::Zero();
  double area = 0.0;
  for (std::size_t e = 0; e < element_areas.size(); ++e) {
    acc += element_areas[e] * sig_field.row(static_cast<Eigen::Index>(e)).transpose();
    area += element_areas[e];
  }
  return acc / area;
}

struct SolverOptions {
  double tol_rel = 1e-8;
  double tol_abs = 1e-12;
  int max_iter = 30;
  int max_bisections = 4;
};

struct StepResult {
  Field3 eps_field;
  Field3 sig_field;
  Eigen::VectorXd kappa_field;
  Eigen::VectorXd sig_zz_field;
  Voigt3 sig_hom = Voigt3::Zero();
  int newton_iters = 0;  ///< linear solves, summed over sub-increments
  int substeps = 1;
  double residual_norm = 0.0;
  double reference_norm = 0.0;
};

class MicroBVP {
 public:
  MicroBVP(PeriodicMesh mesh, MaterialParams params, SolverOptions opt = {})
      : mesh_(std::move(mesh)), params_(params), opt_(opt) {
    params_.validate();
    cons_ = build_constraints(mesh_);
    states_.assign(mesh_.num_elements(), MatState{});
    ufl_ = Eigen::VectorXd::Zero(2 * cons_.n_free);
    setup();
  }

  const PeriodicMesh& mesh() const { return mesh_; }
  const MaterialParams& params() const { return params_; }
  const SolverOptions& options() const { return opt_; }
  const PeriodicConstraints& constraints() const { return cons_; }
  const std::vector<MatState>& states() const { return states_; }
  const Voigt3& eps_macro() const { return eps_macro_; }
  const Eigen::VectorXd& fluctuation_dofs() const { return ufl_; }

  /// Periodic fluctuation per node.
  Eigen::MatrixX2d fluctuation() const {
    Eigen::MatrixX2d u = Eigen::MatrixX2d::Zero(static_cast<Eigen::Index>(mesh_.num_nodes()), 2);
    for (std::size_t i = 0; i < mesh_.num_nodes(); ++i) {
      const int o = cons_.owner[i];
      if (o >= 0) u.row(static_cast<Eigen::Index>(i)) << ufl_(2 * o), ufl_(2 * o + 1);
    }
    return u;
  }

  /// Total displacement per node, u = eps x + fluctuation.
  Eigen::MatrixX2d displacements() const {
    Eigen::MatrixX2d u = fluctuation();
    for (std::size_t i = 0; i < mesh_.num_nodes(); ++i) {
      u.row(static_cast<Eigen::Index>(i)) += affine_displacement(eps_macro_, mesh_.node_coords[i]).transpose();
    }
    return u;
  }

  /// Newton solve towards eps_macro from the committed state, with
  /// bisection of the macro increment on divergence. Commits on success.
  StepResult solve(const Voigt3& eps_target) {
    for (int level = 0; level <= opt_.max_bisections; ++level) {
      const int n_sub = 1 << level;
      std::vector<MatState> st = states_;
      Eigen::VectorXd u = ufl_;
      StepResult res;
      int solves = 0;
      bool ok = true;
      for (int k = 1; k <= n_sub && ok; ++k) {
        const Voigt3 eps = eps_macro_ + (eps_target - eps_macro_) * (static_cast<double>(k) / n_sub);
        ok = newton(eps, st, u, res);
        solves += res.newton_iters;
      }
      if (!ok) continue;
      states_ = std::move(st);
      ufl_ = std::move(u);
      eps_macro_ = eps_target;
      res.newton_iters = solves;
      res.substeps = n_sub;
      return res;
    }
    throw Error(ErrorKind::NewtonDiverged, "no convergence after " + std::to_string(opt_.max_bisections) +
                                               " bisections of the macro strain increment");
  }

  /// Homogenized response to a macro strain, evaluated from the committed
  /// state without changing it.
  Voigt3 evaluate(const Voigt3& eps_target) const {
    MicroBVP copy = *this;
    return copy.solve(eps_target).sig_hom;
  }

 private:
  struct Element {
    Eigen::Matrix<double, 3, 6> B;
    std::array<int, 6> dof;
    double area;
  };

  void setup() {
    elems_.resize(mesh_.num_elements());
    for (std::size_t e = 0; e < mesh_.num_elements(); ++e) {
      const auto& t = mesh_.triangles[e];
      const Vec2 &p0 = mesh_.node_coords[t[0]], &p1 = mesh_.node_coords[t[1]], &p2 = mesh_.node_coords[t[2]];
      const double A = mesh_.element_areas[e];
      const double b[3] = {p1.y() - p2.y(), p2.y() - p0.y(), p0.y() - p1.y()};
      const double c[3] = {p2.x() - p1.x(), p0.x() - p2.x(), p1.x() - p0.x()};
      Element& el = elems_[e];
      el.B.setZero();
      for (int a = 0; a < 3; ++a) {
        el.B(0, 2 * a) = b[a];
        el.B(1, 2 * a + 1) = c[a];
        el.B(2, 2 * a) = c[a];
        el.B(2, 2 * a + 1) = b[a];
        const int o = cons_.owner[t[a]];
        el.dof[2 * a] = o >= 0 ? 2 * o : -1;
        el.dof[2 * a + 1] = o >= 0 ? 2 * o + 1 : -1;
      }
      el.B /= 2.0 * A;
      el.area = A;
    }
    // Sparsity pattern and per-element value slots.
    const int n = 2 * cons_.n_free;
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(elems_.size() * 36);
    for (const Element& el : elems_) {
      for (int a = 0; a < 6; ++a)
        for (int b = 0; b < 6; ++b)
          if (el.dof[a] >= 0 && el.dof[b] >= 0) trip.emplace_back(el.dof[a], el.dof[b], 0.0);
    }
    K_.resize(n, n);
    K_.setFromTriplets(trip.begin(), trip.end());
    K_.makeCompressed();
    slots_.assign(elems_.size() * 36, -1);
    for (std::size_t e = 0; e < elems_.size(); ++e) {
      const Element& el = elems_[e];
      for (int a = 0; a < 6; ++a) {
        for (int b = 0; b < 6; ++b) {
          if (el.dof[a] < 0 || el.dof[b] < 0) continue;
          const int col = el.dof[b];
          const int* begin = K_.innerIndexPtr() + K_.outerIndexPtr()[col];
          const int* end = K_.innerIndexPtr() + K_.outerIndexPtr()[col + 1];
          const int* it = std::lower_bound(begin, end, el.dof[a]);
          slots_[e * 36 + a * 6 + b] = static_cast<int>(it - K_.innerIndexPtr());
        }
      }
    }
    if (n > 0) {
      ldlt_ = std::make_shared<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>>();
      ldlt_->analyzePattern(K_);
    }
  }

  Voigt3 element_strain(const Element& el, const Voigt3& eps, const Eigen::VectorXd& u) const {
    Eigen::Matrix<double, 6, 1> ue;
    for (int a = 0; a < 6; ++a) ue(a) = el.dof[a] >= 0 ? u(el.dof[a]) : 0.0;
    return eps + el.B * ue;
  }

  /// Newton iterations at fixed macro strain. `st` enters as the previous
  /// committed state and leaves as the converged one; `u` is updated in place.
  bool newton(const Voigt3& eps, std::vector<MatState>& st, Eigen::VectorXd& u, StepResult& res) {
    const std::size_t E = elems_.size();
    const int n = 2 * cons_.n_free;
    res.eps_field.resize(static_cast<Eigen::Index>(E), 3);
    res.sig_field.resize(static_cast<Eigen::Index>(E), 3);
    res.kappa_field.resize(static_cast<Eigen::Index>(E));
    res.sig_zz_field.resize(static_cast<Eigen::Index>(E));
    res.newton_iters = 0;
    std::vector<MatState> trial(E);
    Eigen::VectorXd f(n);
    double f_ref = 0.0;
    for (int it = 0;; ++it) {
      f.setZero();
      std::fill(K_.valuePtr(), K_.valuePtr() + K_.nonZeros(), 0.0);
      try {
        for (std::size_t e = 0; e < E; ++e) {
          const Element& el = elems_[e];
          const Voigt3 eps_e = element_strain(el, eps, u);
          const MaterialUpdate mu = update_with_gradients(eps_e, st[e], params_);
          const StressStrain& ss = mu.ss;
          trial[e] = mu.next;
          const auto ei = static_cast<Eigen::Index>(e);
          res.eps_field.row(ei) = eps_e.transpose();
          res.sig_field.row(ei) = ss.sig.transpose();
          res.kappa_field(ei) = mu.next.kappa;
          res.sig_zz_field(ei) = ss.sig_zz;
          const Eigen::Matrix<double, 6, 1> fe = el.area * el.B.transpose() * ss.sig;
          const Eigen::Matrix<double, 6, 6> ke = el.area * el.B.transpose() * mu.grad.dsig_deps() * el.B;
          for (int a = 0; a < 6; ++a) {
            if (el.dof[a] < 0) continue;
            f(el.dof[a]) += fe(a);
            for (int b = 0; b < 6; ++b) {
              const int s = slots_[e * 36 + a * 6 + b];
              if (s >= 0) K_.valuePtr()[s] += ke(a, b);
            }
          }
        }
      } catch (const Error& err) {
        if (err.kind() == ErrorKind::ReturnMapDiverged) return false;
        throw;
      }
      const double fn = f.norm();
      if (!std::isfinite(fn)) return false;
      if (it == 0) f_ref = fn;
      res.residual_norm = fn;
      res.reference_norm = f_ref;
      if (fn <= opt_.tol_abs + opt_.tol_rel * f_ref) break;
      if (res.newton_iters >= opt_.max_iter) return false;
      Eigen::VectorXd du;
      ldlt_->factorize(K_);
      if (ldlt_->info() == Eigen::Success) {
        du = ldlt_->solve(-f);
      }
      if (ldlt_->info() != Eigen::Success || !du.allFinite()) {
        Eigen::SparseLU<Eigen::SparseMatrix<double>> lu(K_);
        if (lu.info() != Eigen::Success) return false;
        du = lu.solve(-f);
        if (!du.allFinite()) return false;
      }
      u += du;
      ++res.newton_iters;
    }
    st = trial;
    res.sig_hom = homogenize(res.sig_field, mesh_.element_areas);
    return true;
  }

  PeriodicMesh mesh_;
  MaterialParams params_;
  SolverOptions opt_;
  PeriodicConstraints cons_;
  std::vector<MatState> states_;
  Eigen::VectorXd ufl_;
  Voigt3 eps_macro_ = Voigt3::Zero();
  std::vector<Element> elems_;
  Eigen::SparseMatrix<double> K_;
  std::vector<int> slots_;
  std::shared_ptr<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>> ldlt_;
};

inline StepResult solve_step(MicroBVP& bvp, const Voigt3& eps_macro) { return bvp.solve(eps_macro); }

/// Homogenized tangent by probing: three macro strain perturbations of
/// magnitude `probe` about the committed state, none of them committed.
inline Mat3 probe_stiffness(const MicroBVP& bvp, double probe = 1e-8) {
  const Voigt3 base = bvp.eps_macro();
  const Voigt3 sig0 = bvp.evaluate(base);
  Mat3 C;
  for (int j = 0; j < 3; ++j) {
    C.col(j) = (bvp.evaluate(base + probe * Voigt3::Unit(j)) - sig0) / probe;
  }
  return C;
}

struct PathRun {
  std::vector<StepResult> steps;
  std::vector<Eigen::MatrixX2d> displacements;  ///< filled when requested
};

inline PathRun run_path(const PeriodicMesh& mesh, const MaterialParams& params, const StrainPath& path,
                        bool keep_displacements = false, const SolverOptions& opt = {}) {
  require(path.T() >= 1, ErrorKind::InvalidArgument, "strain path is empty");
  MicroBVP bvp(mesh, params, opt);
  PathRun run;
  run.steps.reserve(path.T());
  for (std::size_t t = 0; t < path.T(); ++t) {
    try {
      run.steps.push_back(bvp.solve(path.steps[t]));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NewtonDiverged) throw;
      throw Error(ErrorKind::NewtonDiverged, "step " + std::to_string(t) + ": " + e.what());
    }
    if (keep_displacements) run.displacements.push_back(bvp.displacements());
  }
  return run;
}

}  // namespace microsurr

#endif  // MICROSURR_FESOLVER_HPP
