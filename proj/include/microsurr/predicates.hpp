#ifndef MICROSURR_PREDICATES_HPP
#define MICROSURR_PREDICATES_HPP

// Filtered geometric predicates: a floating-point evaluation with a static
// error bound, falling back to exact rational arithmetic when the sign is
// not certified.

#include "core.hpp"

#include <boost/multiprecision/cpp_int.hpp>

namespace microsurr::geom {

namespace detail {

using Rational = boost::multiprecision::cpp_rational;

inline int sign_of(const Rational& r) { return r.sign(); }

inline int orient2d_exact(const Vec2& a, const Vec2& b, const Vec2& c) {
  const Rational ax(a.x()), ay(a.y()), bx(b.x()), by(b.y()), cx(c.x()), cy(c.y());
  const Rational det = (ax - cx) * (by - cy) - (ay - cy) * (bx - cx);
  return sign_of(det);
}

inline int incircle_exact(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
  const Rational adx = Rational(a.x()) - Rational(d.x());
  const Rational ady = Rational(a.y()) - Rational(d.y());
  const Rational bdx = Rational(b.x()) - Rational(d.x());
  const Rational bdy = Rational(b.y()) - Rational(d.y());
  const Rational cdx = Rational(c.x()) - Rational(d.x());
  const Rational cdy = Rational(c.y()) - Rational(d.y());
  const Rational alift = adx * adx + ady * ady;
  const Rational blift = bdx * bdx + bdy * bdy;
  const Rational clift = cdx * cdx + cdy * cdy;
  const Rational det = alift * (bdx * cdy - cdx * bdy) + blift * (cdx * ady - adx * cdy) +
                       clift * (adx * bdy - bdx * ady);
  return sign_of(det);
}

}  // namespace detail

/// +1 if (a, b, c) is counter-clockwise, -1 if clockwise, 0 if collinear.
inline int orient2d(const Vec2& a, const Vec2& b, const Vec2& c) {
  const double detleft = (a.x() - c.x()) * (b.y() - c.y());
  const double detright = (a.y() - c.y()) * (b.x() - c.x());
  const double det = detleft - detright;
  const double bound = 3.3306690738754716e-16 * (std::abs(detleft) + std::abs(detright));
  if (det > bound) return 1;
  if (-det > bound) return -1;
  return detail::orient2d_exact(a, b, c);
}

/// +1 if d lies strictly inside the circle through the counter-clockwise
/// triangle (a, b, c), -1 if strictly outside, 0 if cocircular.
inline int incircle(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
  const double adx = a.x() - d.x(), ady = a.y() - d.y();
  const double bdx = b.x() - d.x(), bdy = b.y() - d.y();
  const double cdx = c.x() - d.x(), cdy = c.y() - d.y();
  const double bdxcdy = bdx * cdy, cdxbdy = cdx * bdy;
  const double cdxady = cdx * ady, adxcdy = adx * cdy;
  const double adxbdy = adx * bdy, bdxady = bdx * ady;
  const double alift = adx * adx + ady * ady;
  const double blift = bdx * bdx + bdy * bdy;
  const double clift = cdx * cdx + cdy * cdy;
  const double det = alift * (bdxcdy - cdxbdy) + blift * (cdxady - adxcdy) + clift * (adxbdy - bdxady);
  const double permanent = (std::abs(bdxcdy) + std::abs(cdxbdy)) * alift +
                           (std::abs(cdxady) + std::abs(adxcdy)) * blift +
                           (std::abs(adxbdy) + std::abs(bdxady)) * clift;
  const double bound = 1.1102230246251577e-15 * permanent;
  if (det > bound) return 1;
  if (-det > bound) return -1;
  return detail::incircle_exact(a, b, c, d);
}

inline double signed_area(const Vec2& a, const Vec2& b, const Vec2& c) {
  return 0.5 * ((b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x()));
}

}  // namespace microsurr::geom

#endif  // MICROSURR_PREDICATES_HPP
