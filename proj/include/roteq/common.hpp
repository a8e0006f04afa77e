#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace roteq {

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

// Degree-based trig. Multiples of 90 produce exact {0, +-1} so that
// quarter-turn paths stay permutation-exact end to end.
inline void sincos_deg(double deg, double& s, double& c) {
    double a = std::fmod(deg, 360.0);
    if (a < 0) a += 360.0;
    if (a == 0.0) { s = 0.0; c = 1.0; return; }
    if (a == 90.0) { s = 1.0; c = 0.0; return; }
    if (a == 180.0) { s = 0.0; c = -1.0; return; }
    if (a == 270.0) { s = -1.0; c = 0.0; return; }
    const double rad = a * (3.14159265358979323846 / 180.0);
    s = std::sin(rad);
    c = std::cos(rad);
}

inline double cos_deg(double deg) { double s, c; sincos_deg(deg, s, c); return c; }
inline double sin_deg(double deg) { double s, c; sincos_deg(deg, s, c); return s; }

// Wraps an angle into [0, 360).
inline double wrap_deg(double deg) {
    double a = std::fmod(deg, 360.0);
    if (a < 0) a += 360.0;
    return a;
}

} // namespace roteq
