#ifndef MICROSURR_MATERIAL_HPP
#define MICROSURR_MATERIAL_HPP

// Plane-strain J2 plasticity with exponential isotropic hardening.
//
// Internally stresses and strains live in 4-component tensor form
// (xx, yy, zz, xy) with tensor shear; the external interface uses in-plane
// Voigt 3-vectors with engineering shear strain. Stored plastic strain uses
// engineering shear in its xy slot.

#include "core.hpp"

#include <nlohmann/json.hpp>

namespace microsurr {

struct MaterialParams {
  double E = 3130.0;
  double nu = 0.37;
  double sig_inf = 64.80;
  double delta_sig = 33.60;
  double kappa_ref = 0.003407;

  double shear_modulus() const { return E / (2.0 * (1.0 + nu)); }
  double lame_lambda() const { return E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)); }

  void validate() const {
    require(E > 0.0, ErrorKind::InvalidArgument, "E must be positive");
    require(nu >= 0.0 && nu < 0.5, ErrorKind::InvalidArgument, "nu must lie in [0, 0.5)");
    require(sig_inf > delta_sig && delta_sig > 0.0, ErrorKind::InvalidArgument, "need sig_inf > delta_sig > 0");
    require(kappa_ref > 0.0, ErrorKind::InvalidArgument, "kappa_ref must be positive");
  }

  bool operator==(const MaterialParams&) const = default;
};

inline void to_json(nlohmann::json& j, const MaterialParams& p) {
  j = {{"E", p.E}, {"nu", p.nu}, {"sig_inf", p.sig_inf}, {"delta_sig", p.delta_sig}, {"kappa_ref", p.kappa_ref}};
}

inline void from_json(const nlohmann::json& j, MaterialParams& p) {
  j.at("E").get_to(p.E);
  j.at("nu").get_to(p.nu);
  j.at("sig_inf").get_to(p.sig_inf);
  j.at("delta_sig").get_to(p.delta_sig);
  j.at("kappa_ref").get_to(p.kappa_ref);
}

using Vec4 = Eigen::Vector4d;
using Mat4 = Eigen::Matrix4d;

/// History of one integration point.
struct MatState {
  double kappa = 0.0;
  Vec4 eps_p = Vec4::Zero();  ///< (xx, yy, zz, xy engineering)
};

struct StressStrain {
  Voigt3 eps = Voigt3::Zero();
  Voigt3 sig = Voigt3::Zero();
  double sig_zz = 0.0;
};

/// Plane-strain Hooke matrix in Voigt form (engineering shear).
inline Mat3 elastic_stiffness(const MaterialParams& p) {
  const double c = p.E / ((1.0 + p.nu) * (1.0 - 2.0 * p.nu));
  Mat3 D;
  D << c * (1.0 - p.nu), c * p.nu, 0.0,
       c * p.nu, c * (1.0 - p.nu), 0.0,
       0.0, 0.0, p.shear_modulus();
  return D;
}

inline double yield_stress(double kappa, const MaterialParams& p) {
  return p.sig_inf - p.delta_sig * std::exp(-kappa / p.kappa_ref);
}

inline double yield_slope(double kappa, const MaterialParams& p) {
  return p.delta_sig / p.kappa_ref * std::exp(-kappa / p.kappa_ref);
}

namespace detail {

inline const Vec4& trace_vector() {
  static const Vec4 m(1.0, 1.0, 1.0, 0.0);
  return m;
}

/// Weights turning a tensor-component product into the full double contraction.
inline const Vec4& contraction_weights() {
  static const Vec4 w(1.0, 1.0, 1.0, 2.0);
  return w;
}

inline Mat4 deviator_projector() {
  const Vec4& m = trace_vector();
  return Mat4::Identity() - m * m.transpose() / 3.0;
}

inline Mat4 elastic_tensor(const MaterialParams& p) {
  const Vec4& m = trace_vector();
  return p.lame_lambda() * m * m.transpose() + 2.0 * p.shear_modulus() * Mat4::Identity();
}

/// Engineering Voigt 3-vector -> tensor components, zero out-of-plane strain.
inline Eigen::Matrix<double, 4, 3> strain_embedding() {
  Eigen::Matrix<double, 4, 3> A = Eigen::Matrix<double, 4, 3>::Zero();
  A(0, 0) = 1.0;
  A(1, 1) = 1.0;
  A(3, 2) = 0.5;
  return A;
}

/// Stored plastic strain (engineering xy) -> tensor components.
inline Vec4 plastic_scaling() { return Vec4(1.0, 1.0, 1.0, 0.5); }

/// Stress tensor components -> in-plane Voigt (xx, yy, xy).
inline Eigen::Matrix<double, 3, 4> stress_selection() {
  Eigen::Matrix<double, 3, 4> S = Eigen::Matrix<double, 3, 4>::Zero();
  S(0, 0) = 1.0;
  S(1, 1) = 1.0;
  S(2, 3) = 1.0;
  return S;
}

inline double von_mises(const Vec4& s) {
  return std::sqrt(1.5 * s.dot(contraction_weights().cwiseProduct(s)));
}

/// Intermediate quantities of one return-map evaluation.
struct ReturnMap {
  Vec4 eps_e;      // elastic trial strain, tensor components
  Vec4 sig_trial;
  Vec4 s_trial;
  double q_trial = 0.0;
  bool plastic = false;
  double dgamma = 0.0;
  Vec4 N = Vec4::Zero();  // flow direction 1.5 s/q
  Vec4 sig;
  MatState next;
  int iterations = 0;
};

inline ReturnMap return_map(const Voigt3& eps, const MatState& prev, const MaterialParams& p) {
  ReturnMap rm;
  rm.eps_e = strain_embedding() * eps - plastic_scaling().cwiseProduct(prev.eps_p);
  rm.sig_trial = elastic_tensor(p) * rm.eps_e;
  rm.s_trial = deviator_projector() * rm.sig_trial;
  rm.q_trial = von_mises(rm.s_trial);
  rm.next = prev;
  rm.sig = rm.sig_trial;
  const double sig_y = yield_stress(prev.kappa, p);
  if (!(rm.q_trial > sig_y)) {
    if (!std::isfinite(rm.q_trial)) throw Error(ErrorKind::ReturnMapDiverged, "non-finite trial stress");
    return rm;
  }
  rm.plastic = true;
  const double G = p.shear_modulus();
  const double tol = 1e-12 * yield_stress(0.0, p);
  double dg = 0.0;
  for (;;) {
    const double r = rm.q_trial - 3.0 * G * dg - yield_stress(prev.kappa + dg, p);
    if (std::abs(r) <= tol) break;
    if (++rm.iterations > 50 || !std::isfinite(r)) {
      throw Error(ErrorKind::ReturnMapDiverged, "plastic multiplier iteration did not converge");
    }
    dg += r / (3.0 * G + yield_slope(prev.kappa + dg, p));
  }
  rm.dgamma = dg;
  rm.N = 1.5 * rm.s_trial / rm.q_trial;
  rm.sig = rm.sig_trial - 2.0 * G * dg * rm.N;
  rm.next.kappa = prev.kappa + dg;
  rm.next.eps_p = prev.eps_p + dg * rm.N.cwiseQuotient(plastic_scaling());
  return rm;
}

}  // namespace detail

/// Stress update by radial return. Returns the stress/strain record and the
/// updated history; the caller owns both.
inline std::pair<StressStrain, MatState> update_stress(const Voigt3& eps_next, const MatState& state_prev,
                                                       const MaterialParams& params) {
  const detail::ReturnMap rm = detail::return_map(eps_next, state_prev, params);
  StressStrain out;
  out.eps = eps_next;
  out.sig = detail::stress_selection() * rm.sig;
  out.sig_zz = rm.sig(2);
  return {out, rm.next};
}

/// Partial derivatives of (eps, eps_p_prev, kappa_prev) -> (sig, eps_p_next, kappa_next).
///
/// `J` is ordered rows (sig[3], eps_p_next[4], kappa_next) and columns
/// (eps[3], eps_p_prev[4], kappa_prev); the named blocks view into it.
struct UpdateGradients {
  Eigen::Matrix<double, 8, 8> J = Eigen::Matrix<double, 8, 8>::Zero();
  bool plastic = false;

  Mat3 dsig_deps() const { return J.block<3, 3>(0, 0); }
  Voigt3 dsig_dkappa() const { return J.block<3, 1>(0, 7); }
  Eigen::RowVector3d dkappa_deps() const { return J.block<1, 3>(7, 0); }
  double dkappa_dkappa() const { return J(7, 7); }
  Eigen::Matrix<double, 3, 4> dsig_depsp() const { return J.block<3, 4>(0, 3); }
  Eigen::Matrix<double, 4, 3> depsp_deps() const { return J.block<4, 3>(3, 0); }
  Mat4 depsp_depsp() const { return J.block<4, 4>(3, 3); }
  Vec4 depsp_dkappa() const { return J.block<4, 1>(3, 7); }
  Eigen::RowVector4d dkappa_depsp() const { return J.block<1, 4>(7, 3); }
};

namespace detail {

inline UpdateGradients gradients_of(const ReturnMap& rm, const MatState& state_prev, const MaterialParams& params) {
  const Mat4 Lam = elastic_tensor(params);
  const Mat4 P = deviator_projector();
  const auto Ae = strain_embedding();
  const Vec4 cp = plastic_scaling();
  const auto S = stress_selection();

  // Derivatives with respect to the elastic trial strain and kappa_prev.
  Mat4 dsig_dee = Lam;
  Vec4 dsig_dk = Vec4::Zero();
  Mat4 dept_dee = Mat4::Zero();  // tensor plastic strain
  Vec4 dept_dk = Vec4::Zero();
  Eigen::RowVector4d dk_dee = Eigen::RowVector4d::Zero();
  double dk_dk = 1.0;
  if (rm.plastic) {
    const double G = params.shear_modulus();
    const double H = yield_slope(state_prev.kappa + rm.dgamma, params);
    const Vec4 WN = contraction_weights().cwiseProduct(rm.N);
    const Eigen::Matrix4d ds_dee = 2.0 * G * P;
    const Eigen::RowVector4d dq_dee = WN.transpose() * ds_dee;
    const Eigen::RowVector4d ddg_dee = dq_dee / (3.0 * G + H);
    const double ddg_dk = -H / (3.0 * G + H);
    const Mat4 dN_ds = 1.5 / rm.q_trial * (Mat4::Identity() - (2.0 / 3.0) * rm.N * WN.transpose());
    const Mat4 dN_dee = dN_ds * ds_dee;
    dsig_dee = Lam - 2.0 * G * (rm.N * ddg_dee + rm.dgamma * dN_dee);
    dsig_dk = -2.0 * G * rm.N * ddg_dk;
    dept_dee = rm.N * ddg_dee + rm.dgamma * dN_dee;
    dept_dk = rm.N * ddg_dk;
    dk_dee = ddg_dee;
    dk_dk = 1.0 + ddg_dk;
  }
  // Chain to external variables: eps_e = Ae eps - diag(cp) eps_p.
  const Mat4 Cp = cp.asDiagonal();
  const Mat4 Cp_inv = cp.cwiseInverse().asDiagonal();
  UpdateGradients g;
  g.plastic = rm.plastic;
  g.J.block<3, 3>(0, 0) = S * dsig_dee * Ae;
  g.J.block<3, 4>(0, 3) = -S * dsig_dee * Cp;
  g.J.block<3, 1>(0, 7) = S * dsig_dk;
  g.J.block<4, 3>(3, 0) = Cp_inv * dept_dee * Ae;
  g.J.block<4, 4>(3, 3) = Mat4::Identity() - Cp_inv * dept_dee * Cp;
  g.J.block<4, 1>(3, 7) = Cp_inv * dept_dk;
  g.J.block<1, 3>(7, 0) = dk_dee * Ae;
  g.J.block<1, 4>(7, 3) = -dk_dee * Cp;
  g.J(7, 7) = dk_dk;
  return g;
}

}  // namespace detail

inline UpdateGradients update_gradients(const Voigt3& eps_next, const MatState& state_prev,
                                        const MaterialParams& params) {
  return detail::gradients_of(detail::return_map(eps_next, state_prev, params), state_prev, params);
}

/// Stress update together with all partial derivatives, one return map.
struct MaterialUpdate {
  StressStrain ss;
  MatState next;
  UpdateGradients grad;
};

inline MaterialUpdate update_with_gradients(const Voigt3& eps_next, const MatState& state_prev,
                                            const MaterialParams& params) {
  const detail::ReturnMap rm = detail::return_map(eps_next, state_prev, params);
  MaterialUpdate u;
  u.ss.eps = eps_next;
  u.ss.sig = detail::stress_selection() * rm.sig;
  u.ss.sig_zz = rm.sig(2);
  u.next = rm.next;
  u.grad = detail::gradients_of(rm, state_prev, params);
  return u;
}

/// Algorithmic tangent d(sig)/d(eps), in-plane block.
inline Mat3 consistent_tangent(const Voigt3& eps_next, const MatState& state_prev, const MaterialParams& params) {
  return update_gradients(eps_next, state_prev, params).dsig_deps();
}

/// Von Mises equivalent stress of an in-plane stress plus its out-of-plane component.
inline double equivalent_stress(const Voigt3& sig, double sig_zz) {
  const Vec4 s4 = detail::deviator_projector() * Vec4(sig(0), sig(1), sig_zz, sig(2));
  return detail::von_mises(s4);
}

}  // namespace microsurr

#endif  // MICROSURR_MATERIAL_HPP
