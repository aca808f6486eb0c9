#pragma once

// Riemann-sphere coordinates for complex numbers.
//
// A point s = r e^{i theta} is mapped to (theta, phi) with
// sin(phi) = (r^2 - 1) / (r^2 + 1). The origin is the south pole
// (phi = -pi/2) and infinity the north pole (phi = +pi/2); both are
// excluded from the open coordinate domain.

#include <cmath>
#include <complex>
#include <numbers>

#include "error.hpp"

namespace nlaplace {

using Complex = std::complex<double>;

struct SphereCoord
{
    double theta = 0.0;   // (-pi, pi]
    long double phi = 0.0; // (-pi/2, pi/2); extended precision keeps |s| resolvable near the poles
};

/// Projects s onto the sphere. theta keeps the full quadrant (atan2).
inline SphereCoord to_sphere(Complex s)
{
    if (!std::isfinite(s.real()) || !std::isfinite(s.imag()))
        throw DomainError("to_sphere: non-finite input");
    const long double r = std::hypot(static_cast<long double>(s.real()), static_cast<long double>(s.imag()));
    if (r == 0.0L)
        throw DomainError("to_sphere: s = 0 maps to the south pole");
    // atan2 form of arcsin((r^2-1)/(r^2+1)); stays accurate near both poles.
    return {std::atan2(s.imag(), s.real()), std::atan2((r - 1.0L) * (r + 1.0L), 2.0L * r)};
}

/// Modulus of the complex number at latitude phi: tan(phi/2 + pi/4).
inline double sphere_modulus(double phi)
{
    // (1 + sin) / cos and cos / (1 - sin) are equal; pick the one without cancellation.
    const double c = std::cos(phi);
    const double s = std::sin(phi);
    return s <= 0.0 ? c / (1.0 - s) : (1.0 + s) / c;
}

inline double sphere_modulus(long double phi)
{
    // (1 + sin) / cos and cos / (1 - sin) are equal; pick the one without cancellation.
    const long double c = std::cos(phi);
    const long double s = std::sin(phi);
    return static_cast<double>(s <= 0.0L ? c / (1.0L - s) : (1.0L + s) / c);
}

inline Complex from_sphere(SphereCoord c)
{
    if (!(std::abs(c.phi) < std::numbers::pi_v<long double> / 2) || !std::isfinite(c.theta))
        throw DomainError("from_sphere: coordinate outside the open sphere domain");
    return std::polar(sphere_modulus(c.phi), c.theta);
}

/// Partial derivatives of (Re s, Im s) with respect to (theta, phi).
struct SphereJacobian
{
    double dre_dtheta, dre_dphi, dim_dtheta, dim_dphi;
};

inline SphereJacobian from_sphere_jacobian(SphereCoord c)
{
    const double r = sphere_modulus(static_cast<double>(c.phi));
    const double dr = 0.5 * (1.0 + r * r); // d/dphi tan(phi/2 + pi/4)
    const double ct = std::cos(c.theta);
    const double st = std::sin(c.theta);
    return {-r * st, dr * ct, r * ct, dr * st};
}

/// Latitude bound that keeps |from_sphere(theta, phi)| <= max_modulus.
inline double phi_cap(double max_modulus)
{
    if (!(max_modulus > 0.0))
        throw DomainError("phi_cap: max_modulus must be positive");
    if (std::isinf(max_modulus))
        return std::numbers::pi / 2;
    return std::atan2((max_modulus - 1.0) * (max_modulus + 1.0), 2.0 * max_modulus);
}

} // namespace nlaplace
